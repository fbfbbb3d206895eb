//! Seeded synthetic change pairs.
//!
//! Both images share a textured background and a set of persistent shapes.
//! The change is a set of rectangles present in only one of the two images.
//! The second image also receives nuisance perturbations (global brightness
//! shift, pixel noise, recolouring of persistent shapes) that never enter
//! the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ChangePair;
use crate::config::Difficulty;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    kind: Kind,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    color: [f32; 3],
}

impl Shape {
    fn covers(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || x < self.x0 || y >= self.y0 + self.h || x >= self.x0 + self.w {
            return false;
        }
        match self.kind {
            Kind::Rect => true,
            Kind::Ellipse => {
                let cy = self.y0 as f64 + self.h as f64 / 2.0;
                let cx = self.x0 as f64 + self.w as f64 / 2.0;
                let dy = (y as f64 + 0.5 - cy) / (self.h as f64 / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (self.w as f64 / 2.0);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn overlaps(&self, other: &Shape, margin: usize) -> bool {
        self.y0 < other.y0 + other.h + margin
            && other.y0 < self.y0 + self.h + margin
            && self.x0 < other.x0 + other.w + margin
            && other.x0 < self.x0 + self.w + margin
    }
}

/// Strength of the nuisance perturbations applied to the second image.
#[derive(Debug, Clone, Copy)]
struct Nuisance {
    brightness: f32,
    noise: f32,
    recolor: f32,
}

impl Nuisance {
    fn for_difficulty(d: Difficulty) -> Self {
        let (brightness, noise, recolor) = match d {
            Difficulty::None => (0.0, 0.0, 0.0),
            Difficulty::Easy => (0.04, 0.01, 0.05),
            Difficulty::Medium => (0.08, 0.02, 0.12),
            Difficulty::Hard => (0.15, 0.04, 0.25),
        };
        Self {
            brightness,
            noise,
            recolor,
        }
    }
}

/// Generator settings. Sizes are in pixels.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    pub size: usize,
    pub difficulty: Difficulty,
    /// Accepted range of the changed-pixel fraction.
    pub change_band: (f64, f64),
    /// Side lengths of shapes, inclusive; the ratio is at least 4.
    pub object_range: (usize, usize),
    /// Changed rectangles snap to this grid (the prediction stride).
    pub grid: usize,
    /// When false, only nuisance perturbations are applied.
    pub edits: bool,
}

impl SyntheticGenerator {
    pub fn new(size: usize, difficulty: Difficulty) -> Self {
        Self {
            size,
            difficulty,
            change_band: (0.05, 0.30),
            object_range: (8, 32),
            grid: 4,
            edits: true,
        }
    }

    pub fn generate(&self, seed: u64, id: impl Into<String>) -> ChangePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.size;
        let background = self.background(&mut rng);
        let mut occupied: Vec<Shape> = Vec::new();

        let persistent_count = rng.gen_range(2..=4);
        for _ in 0..persistent_count {
            let kind = if rng.gen_bool(0.5) { Kind::Rect } else { Kind::Ellipse };
            if let Some(s) = self.place(&mut rng, kind, 1, &occupied, 64) {
                occupied.push(s);
            }
        }
        let persistent = occupied.clone();

        let do_edit = self.edits && self.difficulty != Difficulty::None;
        let (mut added, mut removed) = (Vec::new(), Vec::new());
        if do_edit {
            for _attempt in 0..200 {
                let (a, r) = self.draw_edits(&mut rng, &occupied, &background);
                let area = self.mask(a.iter().chain(&r)).iter().filter(|&&b| b).count();
                let frac = area as f64 / (n * n) as f64;
                if frac >= self.change_band.0 && frac <= self.change_band.1 {
                    added = a;
                    removed = r;
                    break;
                }
            }
        }

        let nuisance = Nuisance::for_difficulty(self.difficulty);
        let t1 = self.render(&background, persistent.iter().chain(&removed));
        let recolored: Vec<Shape> = persistent
            .iter()
            .map(|s| {
                let mut s = *s;
                for c in &mut s.color {
                    *c = (*c + rng.gen_range(-1.0..=1.0) * nuisance.recolor).clamp(0.0, 1.0);
                }
                s
            })
            .collect();
        let mut t2 = self.render(&background, recolored.iter().chain(&added));
        if nuisance.brightness > 0.0 || nuisance.noise > 0.0 {
            let shift = rng.gen_range(-1.0..=1.0) * nuisance.brightness;
            let noise = Normal::new(0.0, nuisance.noise.max(f32::MIN_POSITIVE)).unwrap();
            for v in t2.iter_mut() {
                *v = (*v + shift + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
        let label: Vec<f32> = self
            .mask(added.iter().chain(&removed))
            .into_iter()
            .map(|b| if b { 1.0 } else { 0.0 })
            .collect();

        let quantize = |v: Vec<f32>| -> Vec<f32> { v.into_iter().map(|x| (x * 255.0).round() / 255.0).collect() };
        ChangePair::new(
            id,
            Tensor::new(vec![3, n, n], quantize(t1)).expect("t1 shape"),
            Tensor::new(vec![3, n, n], quantize(t2)).expect("t2 shape"),
            Tensor::new(vec![n, n], label).expect("label shape"),
        )
        .expect("generated pair is consistent")
    }

    fn background(&self, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let n = self.size;
        let mut out = vec![0.0f32; 3 * n * n];
        for c in 0..3 {
            let base = rng.gen_range(0.3..0.5);
            let waves: Vec<(f32, f32, f32, f32)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.01..0.06),
                        rng.gen_range(0.05..0.5),
                        rng.gen_range(0.05..0.5),
                        rng.gen_range(0.0..std::f32::consts::TAU),
                    )
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let mut v = base + rng.gen_range(-0.02..0.02);
                    for &(amp, fy, fx, ph) in &waves {
                        v += amp * (fy * y as f32 + fx * x as f32 + ph).sin();
                    }
                    out[c * n * n + y * n + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    /// A shape with random extent that avoids `occupied`.
    fn place(&self, rng: &mut ChaCha8Rng, kind: Kind, grid: usize, occupied: &[Shape], tries: usize) -> Option<Shape> {
        let (lo, hi) = self.object_range;
        let n = self.size;
        let snap = |v: usize| (v / grid) * grid;
        for _ in 0..tries {
            let h = snap(rng.gen_range(lo..=hi)).max(grid).min(n);
            let w = snap(rng.gen_range(lo..=hi)).max(grid).min(n);
            let y0 = snap(rng.gen_range(0..=n - h));
            let x0 = snap(rng.gen_range(0..=n - w));
            let color = [rng.gen(), rng.gen(), rng.gen()];
            let s = Shape {
                kind,
                y0,
                x0,
                h,
                w,
                color,
            };
            if occupied.iter().all(|o| !s.overlaps(o, 2)) {
                return Some(s);
            }
        }
        None
    }

    fn draw_edits(&self, rng: &mut ChaCha8Rng, occupied: &[Shape], background: &[f32]) -> (Vec<Shape>, Vec<Shape>) {
        let mut taken = occupied.to_vec();
        let (mut added, mut removed) = (Vec::new(), Vec::new());
        let count = rng.gen_range(1..=3);
        for _ in 0..count {
            let Some(mut s) = self.place(rng, Kind::Rect, self.grid.max(1), &taken, 64) else {
                continue;
            };
            s.color = self.contrasting_color(rng, background);
            taken.push(s);
            if rng.gen_bool(0.5) {
                added.push(s);
            } else {
                removed.push(s);
            }
        }
        (added, removed)
    }

    fn contrasting_color(&self, rng: &mut ChaCha8Rng, background: &[f32]) -> [f32; 3] {
        let plane = self.size * self.size;
        let mean: Vec<f32> = (0..3)
            .map(|c| background[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32)
            .collect();
        loop {
            let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let dist: f32 = color.iter().zip(&mean).map(|(a, b)| (a - b).abs()).sum::<f32>() / 3.0;
            if dist >= 0.3 {
                return color;
            }
        }
    }

    fn mask<'a>(&self, shapes: impl Iterator<Item = &'a Shape>) -> Vec<bool> {
        let n = self.size;
        let mut m = vec![false; n * n];
        for s in shapes {
            for y in s.y0..(s.y0 + s.h).min(n) {
                for x in s.x0..(s.x0 + s.w).min(n) {
                    if s.covers(y, x) {
                        m[y * n + x] = true;
                    }
                }
            }
        }
        m
    }

    fn render<'a>(&self, background: &[f32], shapes: impl Iterator<Item = &'a Shape>) -> Vec<f32> {
        let n = self.size;
        let mut img = background.to_vec();
        for s in shapes {
            for y in s.y0..(s.y0 + s.h).min(n) {
                for x in s.x0..(s.x0 + s.w).min(n) {
                    if s.covers(y, x) {
                        for c in 0..3 {
                            img[c * n * n + y * n + x] = s.color[c];
                        }
                    }
                }
            }
        }
        img
    }
}

/// One synthetic pair with default generator settings.
pub fn generate_synthetic_pair(seed: u64, size: usize, difficulty: Difficulty) -> ChangePair {
    SyntheticGenerator::new(size, difficulty).generate(seed, format!("syn{seed:06}"))
}
