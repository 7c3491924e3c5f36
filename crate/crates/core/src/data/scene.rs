use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Shape, Tensor};

/// A paired image `(1, 3, H, W)` with values in `[0, 1]` and a label raster
/// `(1, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Tensor,
    pub labels: LabelMap,
}

impl SceneSample {
    pub fn new(image: Tensor, labels: LabelMap) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || labels.dims() != (1, s.h, s.w) {
            return Err(Error::geometry(
                "scene",
                format!("image {s} and labels {:?} disagree", labels.dims()),
            ));
        }
        Ok(SceneSample { image, labels })
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    /// Pixel count per class, ignore label excluded.
    pub fn class_histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for &l in self.labels.data() {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }
}

/// Kinds of objects painted into a scene. Each kind owns one class index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    /// Irregular union of discs.
    Vegetation,
    /// Thick polyline crossing the scene.
    Road,
    /// Axis-aligned or rotated rectangle.
    Building,
    /// Small compact blob.
    Clutter,
    /// Very small rectangle.
    Car,
}

impl ObjectKind {
    /// Painting order, back to front.
    pub const LAYERS: [ObjectKind; 5] = [
        ObjectKind::Vegetation,
        ObjectKind::Road,
        ObjectKind::Building,
        ObjectKind::Clutter,
        ObjectKind::Car,
    ];

    /// Class painted by this kind. Class 0 is the background.
    pub fn class(self) -> u8 {
        match self {
            ObjectKind::Building => 1,
            ObjectKind::Road => 2,
            ObjectKind::Vegetation => 3,
            ObjectKind::Car => 4,
            ObjectKind::Clutter => 5,
        }
    }
}

/// Object counts per kind. Kinds whose class is not below `num_classes` are
/// not painted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeInventory {
    pub buildings: usize,
    pub roads: usize,
    pub vegetation: usize,
    pub clutter: usize,
    pub cars: usize,
}

impl ShapeInventory {
    pub const EMPTY: ShapeInventory = ShapeInventory {
        buildings: 0,
        roads: 0,
        vegetation: 0,
        clutter: 0,
        cars: 0,
    };

    pub fn count(&self, kind: ObjectKind) -> usize {
        match kind {
            ObjectKind::Building => self.buildings,
            ObjectKind::Road => self.roads,
            ObjectKind::Vegetation => self.vegetation,
            ObjectKind::Clutter => self.clutter,
            ObjectKind::Car => self.cars,
        }
    }
}

impl Default for ShapeInventory {
    fn default() -> Self {
        ShapeInventory {
            buildings: 7,
            roads: 2,
            vegetation: 6,
            clutter: 4,
            cars: 10,
        }
    }
}

/// Parameters of the synthetic aerial-scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub inventory: ShapeInventory,
    /// Standard deviation of per-pixel colour noise, indexed by class;
    /// classes past the end reuse the last entry.
    pub noise: Vec<f64>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 160,
            width: 160,
            num_classes: 4,
            inventory: ShapeInventory::default(),
            noise: vec![0.06, 0.05, 0.05, 0.10, 0.05, 0.08],
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "scene extents {}x{} below the 32 pixel minimum",
                self.height, self.width
            )));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.noise.iter().any(|n| !n.is_finite() || *n < 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    fn noise_for(&self, class: u8) -> f64 {
        match self.noise.len() {
            0 => 0.0,
            len => self.noise[(class as usize).min(len - 1)],
        }
    }
}

/// Base RGB colour of a class. Classes beyond the fixed palette get a
/// deterministic pseudo-random colour.
pub fn class_color(class: u8) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 6] = [
        [0.55, 0.52, 0.45], // ground
        [0.62, 0.36, 0.30], // roofs
        [0.42, 0.42, 0.44], // asphalt
        [0.26, 0.48, 0.22], // vegetation
        [0.18, 0.22, 0.62], // cars
        [0.78, 0.70, 0.20], // clutter
    ];
    match PALETTE.get(class as usize) {
        Some(c) => *c,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + class as u64);
            [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
        }
    }
}

fn kind_for_class(class: u8) -> ObjectKind {
    match (class - 1) % 5 {
        0 => ObjectKind::Building,
        1 => ObjectKind::Road,
        2 => ObjectKind::Vegetation,
        3 => ObjectKind::Car,
        _ => ObjectKind::Clutter,
    }
}

enum Footprint {
    Rect {
        cx: f64,
        cy: f64,
        half_w: f64,
        half_h: f64,
        cos: f64,
        sin: f64,
    },
    Polyline {
        points: Vec<(f64, f64)>,
        half_width: f64,
    },
    Discs(Vec<(f64, f64, f64)>),
}

impl Footprint {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Footprint::Rect {
                cx,
                cy,
                half_w,
                half_h,
                cos,
                sin,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                u.abs() <= *half_w && v.abs() <= *half_h
            }
            Footprint::Polyline { points, half_width } => points.windows(2).any(|seg| {
                let ((ax, ay), (bx, by)) = (seg[0], seg[1]);
                let (vx, vy) = (bx - ax, by - ay);
                let len2 = vx * vx + vy * vy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((x - ax) * vx + (y - ay) * vy) / len2).clamp(0.0, 1.0)
                };
                let (px, py) = (ax + t * vx - x, ay + t * vy - y);
                px * px + py * py <= half_width * half_width
            }),
            Footprint::Discs(discs) => discs
                .iter()
                .any(|(cx, cy, r)| (x - cx).powi(2) + (y - cy).powi(2) <= r * r),
        }
    }

    /// Conservative pixel bounding box `(y0, y1, x0, x1)`, half-open.
    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        let mut grow = |x: f64, y: f64, r: f64| {
            x0 = x0.min(x - r);
            x1 = x1.max(x + r);
            y0 = y0.min(y - r);
            y1 = y1.max(y + r);
        };
        match self {
            Footprint::Rect {
                cx,
                cy,
                half_w,
                half_h,
                ..
            } => grow(*cx, *cy, half_w.hypot(*half_h)),
            Footprint::Polyline { points, half_width } => {
                points.iter().for_each(|(x, y)| grow(*x, *y, *half_width))
            }
            Footprint::Discs(d) => d.iter().for_each(|(x, y, r)| grow(*x, *y, *r)),
        }
        let clip = |v: f64, max: usize| (v.max(0.0) as usize).min(max);
        (
            clip(y0.floor(), h),
            clip(y1.ceil() + 1.0, h),
            clip(x0.floor(), w),
            clip(x1.ceil() + 1.0, w),
        )
    }
}

fn sample_footprint(kind: ObjectKind, h: f64, w: f64, rng: &mut ChaCha8Rng) -> Footprint {
    let scale = h.min(w);
    match kind {
        ObjectKind::Building => {
            // side lengths from 4% to 30% of the scene: a wide range of scales
            let half_w = rng.gen_range(0.02..0.15) * scale;
            let half_h = half_w * rng.gen_range(0.5..1.6);
            let angle: f64 = if rng.gen_bool(0.5) {
                0.0
            } else {
                rng.gen_range(0.0..std::f64::consts::PI)
            };
            Footprint::Rect {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                half_w,
                half_h,
                cos: angle.cos(),
                sin: angle.sin(),
            }
        }
        ObjectKind::Car => {
            let half_w = rng.gen_range(1.2..2.2);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Footprint::Rect {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                half_w,
                half_h: half_w * 0.55,
                cos: angle.cos(),
                sin: angle.sin(),
            }
        }
        ObjectKind::Road => {
            let horizontal = rng.gen_bool(0.5);
            let steps = rng.gen_range(2..=4);
            let mut points = Vec::with_capacity(steps + 1);
            let mut across = rng.gen_range(0.1..0.9);
            for i in 0..=steps {
                let along = i as f64 / steps as f64;
                across = (across + rng.gen_range(-0.15..0.15f64)).clamp(0.0, 1.0);
                points.push(if horizontal {
                    (along * w, across * h)
                } else {
                    (across * w, along * h)
                });
            }
            Footprint::Polyline {
                points,
                half_width: rng.gen_range(0.012..0.03) * scale + 1.0,
            }
        }
        ObjectKind::Vegetation | ObjectKind::Clutter => {
            let (lo, hi) = if kind == ObjectKind::Vegetation {
                (0.03, 0.14)
            } else {
                (0.015, 0.04)
            };
            let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let base = rng.gen_range(lo..hi) * scale;
            let lobes = rng.gen_range(1..=4);
            let discs = (0..lobes)
                .map(|_| {
                    (
                        cx + rng.gen_range(-1.0..1.0) * base,
                        cy + rng.gen_range(-1.0..1.0) * base,
                        base * rng.gen_range(0.5..1.0),
                    )
                })
                .collect();
            Footprint::Discs(discs)
        }
    }
}

/// Generates one scene. Pure in `spec` (including its seed).
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = vec![0u8; h * w];
    // per-pixel owning object, 0 = background
    let mut owner = vec![0usize; h * w];
    let mut tints: Vec<[f64; 3]> = vec![[0.0; 3]];

    let extra_classes = (6..spec.num_classes).map(|c| c as u8);
    let mut layers: Vec<(ObjectKind, u8, usize)> = ObjectKind::LAYERS
        .iter()
        .filter(|k| (k.class() as usize) < spec.num_classes)
        .map(|k| (*k, k.class(), spec.inventory.count(*k)))
        .collect();
    for class in extra_classes {
        let kind = kind_for_class(class);
        layers.push((kind, class, spec.inventory.count(kind)));
    }

    for (kind, class, count) in layers {
        for _ in 0..count {
            let shape = sample_footprint(kind, h as f64, w as f64, &mut rng);
            let tint = [
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
            ];
            tints.push(tint);
            let id = tints.len() - 1;
            let (y0, y1, x0, x1) = shape.bounds(h, w);
            for y in y0..y1 {
                for x in x0..x1 {
                    if shape.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        labels[y * w + x] = class;
                        owner[y * w + x] = id;
                    }
                }
            }
        }
    }

    let plane = h * w;
    let mut image = vec![0.0; 3 * plane];
    for p in 0..plane {
        let class = labels[p];
        let base = class_color(class);
        let sigma = spec.noise_for(class);
        for c in 0..3 {
            let noise: f64 = rng.sample(StandardNormal);
            image[c * plane + p] = (base[c] + tints[owner[p]][c] + sigma * noise).clamp(0.0, 1.0);
        }
    }
    SceneSample::new(
        Tensor::from_vec(Shape::new(1, 3, h, w), image)?,
        LabelMap::new(1, h, w, labels)?,
    )
}
