//! Procedural multi-task scenes: filled circles and rectangles over a flat background,
//! with depth, normals, edges and keypoints derived from the same closed-form geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::heads::{Target, TaskKind};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const BACKGROUND_DEPTH: f64 = 1.0;
pub const KEYPOINT_SIGMA: f64 = 1.5;
pub const IMAGE_NOISE_SD: f64 = 0.02;
/// Sphere radius relative to the circle radius.
pub const CAP_RADIUS_FACTOR: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Spherical cap over a disc of radius `r`.
    Circle { cx: f64, cy: f64, r: f64 },
    /// Axis-aligned plane patch `base + gx·(x−cx) + gy·(y−cy)`.
    Rect { x0: f64, y0: f64, x1: f64, y1: f64, gx: f64, gy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: usize,
    /// Depth on the rim (circle) or at the centre (rectangle).
    pub base: f64,
}

impl Primitive {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.shape {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1, .. } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }

    /// Closed-form surface height at `(x, y)`, valid inside the primitive.
    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        match self.shape {
            Shape::Circle { cx, cy, r } => {
                let big = CAP_RADIUS_FACTOR * r;
                let rho2 = (x - cx).powi(2) + (y - cy).powi(2);
                self.base + (big * big - rho2).max(0.0).sqrt() - (big * big - r * r).sqrt()
            }
            Shape::Rect { x0, y0, x1, y1, gx, gy } => {
                self.base + gx * (x - 0.5 * (x0 + x1)) + gy * (y - 0.5 * (y0 + y1))
            }
        }
    }

    pub fn keypoints(&self) -> Vec<(f64, f64)> {
        match self.shape {
            Shape::Circle { cx, cy, .. } => vec![(cx, cy)],
            Shape::Rect { x0, y0, x1, y1, .. } => vec![
                (0.5 * (x0 + x1), 0.5 * (y0 + y1)),
                (x0, y0),
                (x1, y0),
                (x0, y1),
                (x1, y1),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub num_classes: usize,
    pub primitives: Vec<Primitive>,
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    pub seg: Vec<usize>,
    /// `1×H×W`, strictly positive.
    pub depth: Tensor,
    /// `3×H×W`, unit length per pixel.
    pub normals: Tensor,
    /// `1×H×W` of zeros and ones.
    pub edges: Tensor,
    /// `1×H×W` in `[0, 1]`.
    pub keypoints: Tensor,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.depth.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[2]
    }

    /// Class with the most foreground pixels, ties to the lower index; background if
    /// nothing is visible.
    pub fn dominant_class(&self) -> usize {
        let mut counts = vec![0usize; self.num_classes];
        for &c in &self.seg {
            counts[c] += 1;
        }
        (1..self.num_classes)
            .filter(|&c| counts[c] > 0)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn target(&self, kind: TaskKind) -> Target {
        match kind {
            TaskKind::Segmentation => Target::Labels(self.seg.clone()),
            TaskKind::Depth => Target::Dense {
                values: self.depth.clone(),
                mask: None,
            },
            TaskKind::SurfaceNormal => Target::Normals(self.normals.clone()),
            TaskKind::Keypoint => Target::Dense {
                values: self.keypoints.clone(),
                mask: None,
            },
            TaskKind::Edge => Target::Dense {
                values: self.edges.clone(),
                mask: None,
            },
            TaskKind::Classification => Target::Class(self.dominant_class()),
        }
    }
}

/// Pixel centres sit at half-integer coordinates.
fn centre(i: usize) -> f64 {
    i as f64 + 0.5
}

fn sample_primitive(rng: &mut ChaCha8Rng, h: usize, w: usize, class: usize) -> Primitive {
    let (hf, wf) = (h as f64, w as f64);
    let small = hf.min(wf);
    if rng.random_bool(0.5) {
        let r = rng.random_range(0.12 * small..0.3 * small);
        let cx = rng.random_range(r..wf - r);
        let cy = rng.random_range(r..hf - r);
        Primitive {
            shape: Shape::Circle { cx, cy, r },
            class,
            base: rng.random_range(1.2..2.0),
        }
    } else {
        let rw = rng.random_range(0.2 * wf..0.5 * wf);
        let rh = rng.random_range(0.2 * hf..0.5 * hf);
        let x0 = rng.random_range(0.0..wf - rw);
        let y0 = rng.random_range(0.0..hf - rh);
        let (gx, gy) = if rng.random_bool(0.5) {
            (0.0, 0.0)
        } else {
            // keeps the ramp within ±0.4 of its centre height
            (rng.random_range(-0.4..0.4) / rw, rng.random_range(-0.4..0.4) / rh)
        };
        Primitive {
            shape: Shape::Rect {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
                gx,
                gy,
            },
            class,
            base: rng.random_range(1.5..2.5),
        }
    }
}

/// Unit normals of a height field, `normalize(−∂d/∂x, −∂d/∂y, 1)` by central
/// differences (one-sided on the border).
pub fn normals_from_depth(depth: &[f64], h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    let d = |i: usize, j: usize| depth[i * w + j];
    for i in 0..h {
        for j in 0..w {
            let dx = match (j > 0, j + 1 < w) {
                (true, true) => (d(i, j + 1) - d(i, j - 1)) / 2.0,
                (false, true) => d(i, j + 1) - d(i, j),
                (true, false) => d(i, j) - d(i, j - 1),
                (false, false) => 0.0,
            };
            let dy = match (i > 0, i + 1 < h) {
                (true, true) => (d(i + 1, j) - d(i - 1, j)) / 2.0,
                (false, true) => d(i + 1, j) - d(i, j),
                (true, false) => d(i, j) - d(i - 1, j),
                (false, false) => 0.0,
            };
            let v = [-dx, -dy, 1.0];
            let n = (v[0] * v[0] + v[1] * v[1] + 1.0).sqrt();
            for c in 0..3 {
                out[c * plane + i * w + j] = v[c] / n;
            }
        }
    }
    out
}

/// Pixels with at least one 4-neighbour of another class.
pub fn edges_from_seg(seg: &[usize], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let c = seg[i * w + j];
            let differs = (i > 0 && seg[(i - 1) * w + j] != c)
                || (i + 1 < h && seg[(i + 1) * w + j] != c)
                || (j > 0 && seg[i * w + j - 1] != c)
                || (j + 1 < w && seg[i * w + j + 1] != c);
            if differs {
                out[i * w + j] = 1.0;
            }
        }
    }
    out
}

fn class_color(class: usize, k: usize) -> [f64; 3] {
    if class == 0 {
        return [0.45, 0.45, 0.45];
    }
    let hue = (class - 1) as f64 / (k - 1) as f64 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.8 * r, 0.15 + 0.8 * g, 0.15 + 0.8 * b]
}

/// Renders the scene for `seed`. Later primitives occlude earlier ones.
pub fn generate_scene(seed: u64, h: usize, w: usize, k: usize) -> Result<Scene> {
    if h < 16 || w < 16 {
        return Err(Error::invalid("generate_scene", format!("{h}×{w} is below 16×16")));
    }
    if k < 2 {
        return Err(Error::invalid("generate_scene", "needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..k);
    let primitives: Vec<Primitive> = (0..count)
        .map(|_| {
            let class = rng.random_range(1..k);
            sample_primitive(&mut rng, h, w, class)
        })
        .collect();
    let plane = h * w;
    let mut seg = vec![0usize; plane];
    let mut depth = vec![BACKGROUND_DEPTH; plane];
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (centre(j), centre(i));
            if let Some(p) = primitives.iter().rev().find(|p| p.contains(x, y)) {
                seg[i * w + j] = p.class;
                depth[i * w + j] = p.depth_at(x, y);
            }
        }
    }
    let normals = normals_from_depth(&depth, h, w);
    let edges = edges_from_seg(&seg, h, w);
    let mut keypoints = vec![0.0f64; plane];
    let two_s2 = 2.0 * KEYPOINT_SIGMA * KEYPOINT_SIGMA;
    for (kx, ky) in primitives.iter().flat_map(|p| p.keypoints()) {
        for i in 0..h {
            for j in 0..w {
                let r2 = (centre(j) - kx).powi(2) + (centre(i) - ky).powi(2);
                let v = (-r2 / two_s2).exp();
                let slot = &mut keypoints[i * w + j];
                *slot = slot.max(v);
            }
        }
    }
    let light = {
        let l = [-0.4f64, -0.4, 1.0];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        l.map(|v| v / n)
    };
    let noise = Normal::new(0.0, IMAGE_NOISE_SD).expect("valid sd");
    let mut image = vec![0.0; 3 * plane];
    for p in 0..plane {
        let n = [normals[p], normals[plane + p], normals[2 * plane + p]];
        let shade = 0.55 + 0.45 * (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
        let color = class_color(seg[p], k);
        for c in 0..3 {
            let v: f64 = color[c] * shade + noise.sample(&mut rng);
            image[c * plane + p] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        seed,
        num_classes: k,
        primitives,
        image: Tensor::new(&[3, h, w], image)?,
        seg,
        depth: Tensor::new(&[1, h, w], depth)?,
        normals: Tensor::new(&[3, h, w], normals)?,
        edges: Tensor::new(&[1, h, w], edges)?,
        keypoints: Tensor::new(&[1, h, w], keypoints)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Scene seed for item `index` of `split`; splits use disjoint streams.
pub fn scene_seed(base: u64, split: Split, index: u64) -> u64 {
    let stream: u64 = match split {
        Split::Train => 0x5EED_0001,
        Split::Validation => 0x5EED_0002,
        Split::Test => 0x5EED_0003,
    };
    // splitmix64 finaliser over the combined key
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream << 32)
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_split(base: u64, split: Split, count: usize, h: usize, w: usize, k: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(base, split, i), h, w, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(42, 32, 32, 4).unwrap(), generate_scene(42, 32, 32, 4).unwrap());
        assert_ne!(generate_scene(42, 32, 32, 4).unwrap().image, generate_scene(43, 32, 32, 4).unwrap().image);
    }

    #[test]
    fn two_classes_give_two_labels() {
        for seed in 0..20 {
            let s = generate_scene(seed, 32, 32, 2).unwrap();
            assert_eq!(s.primitives.len(), 1);
            let mut labels = s.seg.clone();
            labels.sort();
            labels.dedup();
            assert_eq!(labels, vec![0, 1]);
        }
    }

    #[test]
    fn rejects_small_or_single_class() {
        assert!(generate_scene(0, 15, 32, 4).is_err());
        assert!(generate_scene(0, 32, 32, 1).is_err());
    }

    fn circle_scene(seed_from: u64) -> Scene {
        (seed_from..)
            .map(|s| generate_scene(s, 64, 64, 2).unwrap())
            .find(|s| matches!(s.primitives[0].shape, Shape::Circle { .. }))
            .unwrap()
    }

    #[test]
    fn cap_is_higher_at_centre_than_rim() {
        let s = circle_scene(0);
        let p = s.primitives[0];
        let Shape::Circle { cx, cy, r } = p.shape else { unreachable!() };
        let at_centre = p.depth_at(cx, cy);
        let at_rim = p.depth_at(cx + r, cy);
        let big = CAP_RADIUS_FACTOR * r;
        assert!((at_centre - (p.base + big - (big * big - r * r).sqrt())).abs() < 1e-12);
        assert!((at_rim - p.base).abs() < 1e-12);
        assert!(at_centre > at_rim);
    }

    #[test]
    fn cap_normals_match_sphere() {
        for start in [0, 10, 20] {
            let s = circle_scene(start);
            let p = s.primitives[0];
            let Shape::Circle { cx, cy, r } = p.shape else { unreachable!() };
            let big = CAP_RADIUS_FACTOR * r;
            let (h, w) = (64, 64);
            let plane = h * w;
            let mut worst: f64 = 0.0;
            for i in 1..h - 1 {
                for j in 1..w - 1 {
                    let inside = [(i, j), (i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
                        .iter()
                        .all(|&(a, b)| p.contains(centre(b), centre(a)));
                    if !inside {
                        continue;
                    }
                    let (dx, dy) = (centre(j) - cx, centre(i) - cy);
                    let sz = (big * big - dx * dx - dy * dy).sqrt();
                    let norm = (dx * dx + dy * dy + sz * sz).sqrt();
                    let want = [dx / norm, dy / norm, sz / norm];
                    let got = [s.normals.data()[i * w + j], s.normals.data()[plane + i * w + j], s.normals.data()[2 * plane + i * w + j]];
                    let cos: f64 = (0..3).map(|c| want[c] * got[c]).sum();
                    worst = worst.max(cos.clamp(-1.0, 1.0).acos().to_degrees());
                }
            }
            assert!(worst < 3.0, "worst angle {worst}");
        }
    }

    #[test]
    fn flat_and_ramp_normals() {
        let flat = normals_from_depth(&[2.0; 25], 5, 5);
        for p in 0..25 {
            assert_eq!([flat[p], flat[25 + p], flat[50 + p]], [0.0, 0.0, 1.0]);
        }
        let ramp: Vec<f64> = (0..25).map(|p| (p % 5) as f64).collect();
        let n = normals_from_depth(&ramp, 5, 5);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for p in 0..25 {
            assert!((n[p] + s).abs() < 1e-15 && n[25 + p] == 0.0 && (n[50 + p] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn background_normals_point_up() {
        let s = generate_scene(5, 32, 32, 3).unwrap();
        let plane = 32 * 32;
        for i in 0..32usize {
            for j in 0..32usize {
                let near_fg = (i.saturating_sub(1)..=(i + 1).min(31))
                    .any(|a| (j.saturating_sub(1)..=(j + 1).min(31)).any(|b| s.seg[a * 32 + b] != 0));
                if !near_fg {
                    let p = i * 32 + j;
                    assert_eq!(s.normals.data()[2 * plane + p], 1.0);
                }
            }
        }
    }

    #[test]
    fn label_invariants_hold() {
        for seed in 0..30 {
            let k = 2 + (seed as usize % 4);
            let s = generate_scene(seed, 24, 32, k).unwrap();
            let (h, w) = (24, 32);
            let plane = h * w;
            assert!(s.depth.data().iter().all(|&d| d > 0.0));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.keypoints.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.seg.iter().all(|&c| c < k));
            for p in 0..plane {
                let n = (0..3).map(|c| s.normals.data()[c * plane + p].powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
            // edge oracle straight from the definition
            for i in 0..h {
                for j in 0..w {
                    let c = s.seg[i * w + j];
                    let mut nb = Vec::new();
                    if i > 0 { nb.push(s.seg[(i - 1) * w + j]); }
                    if i + 1 < h { nb.push(s.seg[(i + 1) * w + j]); }
                    if j > 0 { nb.push(s.seg[i * w + j - 1]); }
                    if j + 1 < w { nb.push(s.seg[i * w + j + 1]); }
                    let want = if nb.iter().any(|&o| o != c) { 1.0 } else { 0.0 };
                    assert_eq!(s.edges.data()[i * w + j], want);
                }
            }
        }
    }

    #[test]
    fn keypoint_peaks_at_circle_centre() {
        let s = circle_scene(3);
        let Shape::Circle { cx, cy, .. } = s.primitives[0].shape else { unreachable!() };
        let (i, j) = (cy.floor() as usize, cx.floor() as usize);
        let r2 = (centre(j) - cx).powi(2) + (centre(i) - cy).powi(2);
        assert!((s.keypoints.data()[i * 64 + j] - (-r2 / (2.0 * KEYPOINT_SIGMA.powi(2))).exp()).abs() < 1e-12);
    }

    #[test]
    fn dominant_class_and_targets() {
        let s = generate_scene(9, 32, 32, 4).unwrap();
        let c = s.dominant_class();
        assert!(c >= 1 && s.seg.contains(&c));
        assert!(matches!(s.target(TaskKind::Classification), Target::Class(x) if x == c));
        assert!(matches!(s.target(TaskKind::Segmentation), Target::Labels(ref l) if l.len() == 1024));
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let a = generate_split(1, Split::Train, 8, 16, 16, 3).unwrap();
        let b = generate_split(1, Split::Train, 8, 16, 16, 3).unwrap();
        let v = generate_split(1, Split::Validation, 8, 16, 16, 3).unwrap();
        assert_eq!(a, b);
        let train_seeds: Vec<u64> = a.iter().map(|s| s.seed).collect();
        assert!(v.iter().all(|s| !train_seeds.contains(&s.seed)));
    }
}
