//! Seeded synthetic scenes of circles, rectangles and triangles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::BinaryMask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["circle", "rectangle", "triangle"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();
pub const MIN_AREA: usize = 16;
pub const MAX_INSTANCES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    /// Place a pair of identical same-class shapes in every scene.
    pub twins: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { size: 64, twins: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub class_id: usize,
    /// Visible pixels.
    pub mask: BinaryMask,
    /// Drawing order; higher values are drawn later and occlude lower ones.
    pub z_order: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    pub seed: u64,
    pub size: usize,
    /// Row-major 8-bit grayscale pixels.
    pub pixels: Vec<u8>,
    pub instances: Vec<Instance>,
}

impl Scene {
    /// `[3, H, W]` image with the gray level replicated across channels, in `[0, 1]`.
    pub fn image(&self) -> Tensor {
        image_from_gray(&self.pixels, self.size, self.size)
    }
}

pub fn image_from_gray(pixels: &[u8], height: usize, width: usize) -> Tensor {
    let plane: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let mut data = Vec::with_capacity(3 * height * width);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::from_parts(vec![3, height, width], data)
}

/// Seed of scene `index` in a dataset generated from `base` (SplitMix64).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    /// Upright isosceles triangle: apex above the base.
    Triangle {
        cx: f64,
        top: f64,
        bottom: f64,
        half_base: f64,
    },
}

impl Shape {
    fn class_id(&self) -> usize {
        match self {
            Shape::Circle { .. } => 0,
            Shape::Rect { .. } => 1,
            Shape::Triangle { .. } => 2,
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            Shape::Triangle { cx, top, bottom, half_base } => {
                if py < top || py > bottom {
                    return false;
                }
                let half = half_base * (py - top) / (bottom - top);
                (px - cx).abs() <= half
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Circle { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Shape::Triangle { cx, top, bottom, half_base } => (cx - half_base, top, cx + half_base, bottom),
        }
    }

    fn translated(&self, dx: f64, dy: f64) -> Shape {
        match *self {
            Shape::Circle { cx, cy, r } => Shape::Circle { cx: cx + dx, cy: cy + dy, r },
            Shape::Rect { x0, y0, x1, y1 } => Shape::Rect { x0: x0 + dx, y0: y0 + dy, x1: x1 + dx, y1: y1 + dy },
            Shape::Triangle { cx, top, bottom, half_base } => {
                Shape::Triangle { cx: cx + dx, top: top + dy, bottom: bottom + dy, half_base }
            }
        }
    }

    fn rasterize(&self, size: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| self.contains(x as f64 + 0.5, y as f64 + 0.5))
    }
}

/// A random shape of `class` whose extent lies inside the image.
fn random_shape<R: Rng>(rng: &mut R, class: usize, size: usize) -> Shape {
    let s = size as f64;
    let extent = match class {
        0 => rng.random_range(3.0..s * 0.22),
        _ => rng.random_range(5.0..s * 0.45),
    };
    let shape = match class {
        0 => Shape::Circle { cx: 0.0, cy: 0.0, r: extent },
        1 => {
            let aspect = rng.random_range(0.5..2.0);
            let (w, h) = (extent, (extent * aspect).clamp(4.0, s * 0.45));
            Shape::Rect { x0: 0.0, y0: 0.0, x1: w, y1: h }
        }
        _ => {
            let aspect = rng.random_range(0.7..1.4);
            let h = (extent * aspect).clamp(5.0, s * 0.45);
            Shape::Triangle { cx: 0.0, top: 0.0, bottom: h, half_base: extent / 2.0 }
        }
    };
    let (x0, y0, x1, y1) = shape.bounds();
    let dx = rng.random_range(-x0..s - x1 + 1e-9);
    let dy = rng.random_range(-y0..s - y1 + 1e-9);
    shape.translated(dx, dy)
}

/// Generates the scene for `seed`; the result depends on nothing else.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size;
    // (shape, intensity) in drawing order.
    let mut placed: Vec<(Shape, f64)> = Vec::new();
    let mut occupied = BinaryMask::new(n, n);
    let claim = |mask: &BinaryMask, occupied: &mut BinaryMask| {
        for y in 0..n {
            for x in 0..n {
                if mask.get(x, y) {
                    occupied.set(x, y, true);
                }
            }
        }
    };

    if cfg.twins {
        let class = rng.random_range(0..NUM_CLASSES);
        let intensity = rng.random_range(0.55..1.0);
        'pair: for _ in 0..200 {
            let a = random_shape(&mut rng, class, n);
            let ma = a.rasterize(n);
            if ma.area() < MIN_AREA * 2 {
                continue;
            }
            for _ in 0..50 {
                // Whole-pixel shifts keep the rasterized twins identical.
                let (x0, y0, x1, y1) = a.bounds();
                let dx = rng.random_range((-x0).ceil() as i64..=(n as f64 - x1).floor() as i64) as f64;
                let dy = rng.random_range((-y0).ceil() as i64..=(n as f64 - y1).floor() as i64) as f64;
                if dx == 0.0 && dy == 0.0 {
                    continue;
                }
                let b = a.translated(dx, dy);
                let mb = b.rasterize(n);
                // The lower twin must stay mostly visible.
                let visible = ma.area() - ma.intersection(&mb);
                if mb.area() == ma.area() && visible >= MIN_AREA && visible * 2 >= ma.area() {
                    claim(&ma, &mut occupied);
                    claim(&mb, &mut occupied);
                    placed.push((a, intensity));
                    placed.push((b, intensity));
                    break 'pair;
                }
            }
        }
    }

    let target = if cfg.twins { placed.len() + rng.random_range(0..=1) } else { rng.random_range(1..=MAX_INSTANCES) };
    let mut attempts = 0;
    while placed.len() < target.max(1) && attempts < 500 {
        attempts += 1;
        let class = rng.random_range(0..NUM_CLASSES);
        let shape = random_shape(&mut rng, class, n);
        let mask = shape.rasterize(n);
        // Keep a one-pixel gap so separate instances never touch.
        let touches = (0..n).any(|y| {
            (0..n).any(|x| {
                mask.get(x, y)
                    && (y.saturating_sub(1)..=(y + 1).min(n - 1))
                        .any(|yy| (x.saturating_sub(1)..=(x + 1).min(n - 1)).any(|xx| occupied.get(xx, yy)))
            })
        });
        if mask.area() >= MIN_AREA && !touches {
            claim(&mask, &mut occupied);
            placed.push((shape, rng.random_range(0.55..1.0)));
        }
    }

    let background = rng.random_range(0.05..0.35);
    let mut gray: Vec<f64> = (0..n * n).map(|_| background + rng.random_range(-0.05..0.05)).collect();
    let mut masks: Vec<BinaryMask> = Vec::with_capacity(placed.len());
    for (shape, intensity) in &placed {
        let mask = shape.rasterize(n);
        for y in 0..n {
            for x in 0..n {
                if mask.get(x, y) {
                    gray[y * n + x] = intensity + rng.random_range(-0.05..0.05);
                    for earlier in masks.iter_mut() {
                        earlier.set(x, y, false);
                    }
                }
            }
        }
        masks.push(mask);
    }
    let pixels = gray.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let instances = placed
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(z, ((shape, _), mask))| Instance { class_id: shape.class_id(), mask, z_order: z })
        .collect();
    Scene { seed, size: n, pixels, instances }
}

/// Checks the scene invariants: instance count, classes, mask sizes and
/// bounds, and that visible masks are disjoint.
pub fn validate(scene: &Scene) -> Result<()> {
    let fail = |m: String| Err(Error::Dataset(m));
    let n = scene.size;
    if scene.pixels.len() != n * n {
        return fail(format!("scene {}: {} pixels for size {n}", scene.seed, scene.pixels.len()));
    }
    if !(1..=MAX_INSTANCES).contains(&scene.instances.len()) {
        return fail(format!("scene {}: {} instances", scene.seed, scene.instances.len()));
    }
    for (i, inst) in scene.instances.iter().enumerate() {
        if inst.class_id >= NUM_CLASSES {
            return fail(format!("scene {}: instance {i} has class {}", scene.seed, inst.class_id));
        }
        if inst.mask.height() != n || inst.mask.width() != n {
            return fail(format!("scene {}: instance {i} mask exceeds the image", scene.seed));
        }
        if inst.mask.area() < MIN_AREA {
            return fail(format!("scene {}: instance {i} has {} pixels", scene.seed, inst.mask.area()));
        }
        for other in &scene.instances[..i] {
            if other.mask.intersection(&inst.mask) > 0 {
                return fail(format!("scene {}: instance {i} overlaps another", scene.seed));
            }
        }
    }
    Ok(())
}
