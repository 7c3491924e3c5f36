use rand::Rng;
use rand_distr::StandardNormal;

use super::{Shape, Tensor};

/// Normal initialization with standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
