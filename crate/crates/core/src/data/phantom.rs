use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CtSlice, MIN_SLICE_DIM};
use crate::error::{invalid, Result};

const AIR_HU: f32 = -1000.0;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn tissue_plateau(rng: &mut ChaCha8Rng) -> f32 {
    match rng.random_range(0..20u32) {
        0..=8 => rng.random_range(20.0..80.0),        // organ parenchyma
        9..=12 => rng.random_range(-120.0..-60.0),    // fat
        13..=17 => rng.random_range(400.0..1200.0),   // bone
        _ => rng.random_range(-1000.0..-900.0),       // gas
    }
}

/// Procedural NDCT substitute: a soft-tissue body ellipse on an air
/// background, `num_structures - 1` smaller ellipses inside it, and a faint
/// sinusoidal texture restricted to the body.
pub fn make_phantom(height: usize, width: usize, num_structures: usize, seed: u64) -> Result<CtSlice> {
    if height < MIN_SLICE_DIM || width < MIN_SLICE_DIM {
        return Err(invalid!(
            "phantom size {height}x{width} below minimum {MIN_SLICE_DIM}"
        ));
    }
    if num_structures == 0 {
        return Err(invalid!("phantom needs at least one structure"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);

    let angle: f64 = rng.random_range(-0.3..0.3);
    let body = Ellipse {
        cy: h / 2.0 + rng.random_range(-0.03..0.03) * h,
        cx: w / 2.0 + rng.random_range(-0.03..0.03) * w,
        ry: rng.random_range(0.34..0.44) * h,
        rx: rng.random_range(0.38..0.46) * w,
        cos: angle.cos(),
        sin: angle.sin(),
    };
    let body_hu: f32 = rng.random_range(0.0..80.0);

    let mut inner = Vec::with_capacity(num_structures - 1);
    for _ in 1..num_structures {
        let r: f64 = rng.random_range(0.0..0.6);
        let t: f64 = rng.random_range(0.0..2.0 * PI);
        let a: f64 = rng.random_range(0.0..PI);
        let e = Ellipse {
            cy: body.cy + r * body.ry * t.sin(),
            cx: body.cx + r * body.rx * t.cos(),
            ry: rng.random_range(0.05..0.2) * h,
            rx: rng.random_range(0.05..0.2) * w,
            cos: a.cos(),
            sin: a.sin(),
        };
        inner.push((e, tissue_plateau(&mut rng)));
    }

    // (amplitude HU, ky, kx, phase)
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(1.0..4.0),
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();

    let pixels = Array2::from_shape_fn((height, width), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        if !body.contains(py, px) {
            return AIR_HU;
        }
        let mut hu = body_hu;
        for (e, v) in &inner {
            if e.contains(py, px) {
                hu = *v;
            }
        }
        let texture: f64 = waves
            .iter()
            .map(|(amp, ky, kx, ph)| amp * (ky * py + kx * px + ph).sin())
            .sum();
        hu + texture as f32
    });
    CtSlice::new(pixels)
}
