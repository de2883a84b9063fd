//! Deterministic synthetic scenes: up to three non-overlapping shapes
//! (circle, square, triangle) on a low-frequency noise background. A sample
//! is a pure function of (dataset_seed, index); there is no global RNG.

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::imageio;
use crate::rng::{derive_seed_indexed, DetRng};
use std::path::Path;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_SHAPE_CLASSES: usize = 3;
/// Background plus the three shape classes.
pub const NUM_SEG_CLASSES: usize = 4;

/// Probability each shape class is attempted in a scene.
const SHAPE_PROB: f64 = 0.6;
/// Low-frequency background noise amplitude.
const NOISE_AMPLITUDE: f64 = 0.08;
const NOISE_GRID: usize = 9;

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    /// [3, 64, 64] in [0,1].
    pub image: Tensor,
    /// Row-major [64*64]; 0 = background, k = shape class k.
    pub seg_mask: Vec<u32>,
    /// presence[k] holds iff class k+1 appears in seg_mask.
    pub presence: [bool; NUM_SHAPE_CLASSES],
}

impl SyntheticSample {
    pub fn presence_f32(&self) -> [f32; NUM_SHAPE_CLASSES] {
        [
            self.presence[0] as u8 as f32,
            self.presence[1] as u8 as f32,
            self.presence[2] as u8 as f32,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: u32,
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.class {
            1 => dx * dx + dy * dy <= self.r * self.r,
            2 => dx.abs() <= self.r && dy.abs() <= self.r,
            3 => {
                // apex-up triangle inscribed in the radius
                let (ax, ay) = (0.0, -self.r);
                let (bx, by) = (-0.866 * self.r, 0.5 * self.r);
                let (cx2, cy2) = (0.866 * self.r, 0.5 * self.r);
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| {
                    (dx - x2) * (y1 - y2) - (x1 - x2) * (dy - y2)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx2, cy2);
                let d3 = sign(cx2, cy2, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            _ => unreachable!(),
        }
    }
}

pub fn generate_sample(dataset_seed: u64, index: u64) -> SyntheticSample {
    let mut rng = DetRng::new(derive_seed_indexed(dataset_seed, "sample", index));
    let n = IMAGE_SIZE;

    // background: per-channel base color plus one shared low-frequency field
    let base = [
        rng.uniform_in(0.25, 0.75),
        rng.uniform_in(0.25, 0.75),
        rng.uniform_in(0.25, 0.75),
    ];
    let grid: Vec<f64> = (0..NOISE_GRID * NOISE_GRID)
        .map(|_| rng.uniform_in(-NOISE_AMPLITUDE, NOISE_AMPLITUDE))
        .collect();

    // place up to one shape per class, rejecting overlaps
    let mut shapes: Vec<Shape> = Vec::new();
    for class in 1..=NUM_SHAPE_CLASSES as u32 {
        if rng.uniform() >= SHAPE_PROB {
            continue;
        }
        let r = rng.uniform_in(6.0, 13.0);
        let mut placed = false;
        for _ in 0..40 {
            let cx = rng.uniform_in(r + 2.0, n as f64 - r - 2.0);
            let cy = rng.uniform_in(r + 2.0, n as f64 - r - 2.0);
            let clear = shapes.iter().all(|s| {
                let d2 = (s.cx - cx).powi(2) + (s.cy - cy).powi(2);
                d2.sqrt() > s.r + r + 2.0
            });
            if clear {
                // class-keyed color family with jitter: circles red-ish,
                // squares green-ish, triangles blue-ish
                let color = {
                    let hot = rng.uniform_in(0.7, 1.0);
                    let cold1 = rng.uniform_in(0.0, 0.25);
                    let cold2 = rng.uniform_in(0.0, 0.25);
                    match class {
                        1 => [hot, cold1, cold2],
                        2 => [cold1, hot, cold2],
                        _ => [cold1, cold2, hot],
                    }
                };
                shapes.push(Shape {
                    class,
                    cx,
                    cy,
                    r,
                    color,
                });
                placed = true;
                break;
            }
        }
        let _ = placed;
    }

    let mut image = vec![0f32; 3 * n * n];
    let mut seg_mask = vec![0u32; n * n];
    let mut presence = [false; NUM_SHAPE_CLASSES];
    for y in 0..n {
        for x in 0..n {
            let noise = bilinear(&grid, NOISE_GRID, x as f64 / (n - 1) as f64, y as f64 / (n - 1) as f64);
            let mut color = [
                (base[0] + noise).clamp(0.0, 1.0),
                (base[1] + noise).clamp(0.0, 1.0),
                (base[2] + noise).clamp(0.0, 1.0),
            ];
            for s in &shapes {
                if s.contains(x as f64, y as f64) {
                    color = s.color;
                    seg_mask[y * n + x] = s.class;
                    presence[(s.class - 1) as usize] = true;
                    break;
                }
            }
            for c in 0..3 {
                image[c * n * n + y * n + x] = color[c] as f32;
            }
        }
    }

    SyntheticSample {
        image: Tensor::new(vec![3, n, n], image).expect("sized correctly"),
        seg_mask,
        presence,
    }
}

fn bilinear(grid: &[f64], g: usize, u: f64, v: f64) -> f64 {
    let fx = u * (g - 1) as f64;
    let fy = v * (g - 1) as f64;
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(g - 1);
    let y1 = (y0 + 1).min(g - 1);
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let a = grid[y0 * g + x0] * (1.0 - tx) + grid[y0 * g + x1] * tx;
    let b = grid[y1 * g + x0] * (1.0 - tx) + grid[y1 * g + x1] * tx;
    a * (1.0 - ty) + b * ty
}

/// Assemble a [N,3,64,64] batch tensor from samples.
pub fn batch_images(samples: &[&SyntheticSample]) -> Tensor {
    let n = samples.len();
    let plane = 3 * IMAGE_SIZE * IMAGE_SIZE;
    let mut data = Vec::with_capacity(n * plane);
    for s in samples {
        data.extend_from_slice(s.image.data());
    }
    Tensor::new(vec![n, 3, IMAGE_SIZE, IMAGE_SIZE], data).expect("sized correctly")
}

/// Export samples for inspection: PNG image, PGM mask (class index scaled to
/// 0/85/170/255), JSON presence flags.
pub fn export_dataset(dir: &Path, dataset_seed: u64, count: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut flags = String::from("{\n");
    for i in 0..count {
        let s = generate_sample(dataset_seed, i);
        imageio::write_png(&dir.join(format!("img_{i:05}.png")), &s.image)?;
        let mask8: Vec<u8> = s.seg_mask.iter().map(|&c| (c * 85) as u8).collect();
        imageio::write_pgm8(
            &dir.join(format!("mask_{i:05}.pgm")),
            &mask8,
            IMAGE_SIZE,
            IMAGE_SIZE,
        )?;
        flags.push_str(&format!(
            "  \"img_{i:05}\": [{}, {}, {}]{}\n",
            s.presence[0] as u8,
            s.presence[1] as u8,
            s.presence[2] as u8,
            if i + 1 < count { "," } else { "" }
        ));
    }
    flags.push_str("}\n");
    std::fs::write(dir.join("presence.json"), flags)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_pure_functions_of_seed_and_index() {
        let a = generate_sample(11, 3);
        let b = generate_sample(11, 3);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.seg_mask, b.seg_mask);
        assert_eq!(a.presence, b.presence);
        let c = generate_sample(11, 4);
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn presence_flags_match_mask_histogram() {
        for i in 0..50 {
            let s = generate_sample(99, i);
            for k in 0..NUM_SHAPE_CLASSES {
                let in_mask = s.seg_mask.iter().any(|&c| c == (k + 1) as u32);
                assert_eq!(in_mask, s.presence[k], "sample {i} class {k}");
            }
        }
    }

    #[test]
    fn class_frequencies_are_balanced() {
        let mut counts = [0usize; NUM_SHAPE_CLASSES];
        let n = 1000;
        for i in 0..n {
            let s = generate_sample(7, i);
            for k in 0..NUM_SHAPE_CLASSES {
                if s.presence[k] {
                    counts[k] += 1;
                }
            }
        }
        for (k, &c) in counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!(
                (0.4..=0.8).contains(&f),
                "class {k} frequency {f} outside [0.4, 0.8]"
            );
        }
    }

    #[test]
    fn pixels_in_unit_range() {
        let s = generate_sample(5, 0);
        for &v in s.image.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
