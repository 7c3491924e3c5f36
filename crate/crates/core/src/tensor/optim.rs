use super::Tensor;

/// Plain SGD: `p ← p − lr·grad`, then clears the gradient.
///
/// Tensors without a gradient are left untouched.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) {
    for p in params {
        if let Some(g) = p.take_grad() {
            p.data_mut()
                .iter_mut()
                .zip(&g)
                .for_each(|(v, d)| *v -= lr * d);
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + grad`, `p ← p − lr·v`.
///
/// Velocities are matched to parameters by position, so the same parameter
/// order must be passed on every step. With `μ = 0` this is [`sgd_step`].
#[derive(Clone, Debug, Default)]
pub struct Momentum {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(momentum: f64) -> Self {
        Momentum {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) {
        for (i, p) in params.into_iter().enumerate() {
            let Some(g) = p.take_grad() else { continue };
            if self.velocity.len() <= i {
                self.velocity.resize_with(i + 1, Vec::new);
            }
            let v = &mut self.velocity[i];
            if v.len() != g.len() {
                *v = vec![0.0; g.len()];
            }
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tape};

    #[test]
    fn quadratic_descent_is_monotone() {
        // loss = (p - 3)^2 written as sum(d ⊙ d) with d = p + (-3)
        let mut p = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.0])
            .unwrap()
            .with_requires_grad(true);
        let mut trace = vec![p.data()[0]];
        for _ in 0..2 {
            let mut tape = Tape::new();
            let pv = tape.watch(&mut p);
            let c = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), -3.0));
            let d = tape.add(pv, c).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap();
            tape.fill_grad(&mut p);
            sgd_step([&mut p], 0.01);
            assert!(p.grad().is_none());
            trace.push(p.data()[0]);
        }
        // p_{t+1} = p_t - 0.01 * 2 (p_t - 3)
        assert!((trace[1] - 0.06).abs() < 1e-15);
        assert!((trace[2] - (0.06 + 0.02 * (3.0 - 0.06))).abs() < 1e-15);
        assert!(trace[0] < trace[1] && trace[1] < trace[2] && trace[2] < 3.0);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = Tensor::full(Shape::new(1, 1, 1, 1), 0.0).with_requires_grad(true);
        let mut opt = Momentum::new(0.5);
        for _ in 0..2 {
            p.accumulate_grad(&[1.0]);
            opt.step([&mut p], 0.1);
        }
        // v1 = 1, v2 = 1.5
        assert!((p.data()[0] + 0.25).abs() < 1e-15);
        let mut q = Tensor::full(Shape::new(1, 1, 1, 1), 0.0).with_requires_grad(true);
        let mut r = q.clone();
        let mut plain = Momentum::new(0.0);
        for _ in 0..3 {
            q.accumulate_grad(&[0.7]);
            r.accumulate_grad(&[0.7]);
            plain.step([&mut q], 0.1);
            sgd_step([&mut r], 0.1);
        }
        assert_eq!(q.data(), r.data());
    }
}
