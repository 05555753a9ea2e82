//! Independent oracles and fixtures shared by the integration and
//! acceptance tests. Nothing here calls the code under test for the value
//! being checked.
#![allow(dead_code)]

use alden_core::data::{make_phantom, simulate_low_dose, DoseSimConfig, PairedSample};
use alden_core::objectives::ContrastiveBatch;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PHANTOM_SIZE: usize = 64;
pub const PHANTOM_STRUCTURES: usize = 6;
pub const TEST_SEED_OFFSET: u64 = 1000;

/// Phantom pair `i` at the given dose. Dose noise seeds are disjoint from
/// phantom seeds.
pub fn phantom_pair(i: u64, dose: f64) -> PairedSample {
    let ndct = make_phantom(PHANTOM_SIZE, PHANTOM_SIZE, PHANTOM_STRUCTURES, i).unwrap();
    let cfg = DoseSimConfig {
        dose_fraction: dose,
        seed: i + 77,
        ..DoseSimConfig::default()
    };
    let ldct = simulate_low_dose(&ndct, &cfg).unwrap();
    PairedSample::new(ldct, ndct, format!("phantom_{i:04}")).unwrap()
}

/// 32 training pairs and 8 held-out test pairs at quarter dose.
pub fn toy_split() -> (Vec<PairedSample>, Vec<PairedSample>) {
    let train = (0..32).map(|i| phantom_pair(i, 0.25)).collect();
    let test = (0..8).map(|i| phantom_pair(TEST_SEED_OFFSET + i, 0.25)).collect();
    (train, test)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Value of a `(B, C, H, W)` row-major buffer.
fn at(buf: &[f64], dims: (usize, usize, usize, usize), i: usize, c: usize, x: usize, y: usize) -> f64 {
    let (_, ch, h, w) = dims;
    buf[((i * ch + c) * h + y) * w + x]
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + 1e-8) * (nb + 1e-8))
}

/// Double-loop InfoNCE: for each anchor, one positive `F_Y`, one negative
/// `F_X` at the anchor and `M` negatives `F_Y` at the sampled cells.
pub fn scl_oracle(f_yhat: &Tensor, f_x: &Tensor, f_y: &Tensor, batch: &ContrastiveBatch, tau: f64) -> f64 {
    let dims = f_yhat.dims4().unwrap();
    let (yh, x, y) = (values(f_yhat), values(f_x), values(f_y));
    let vec_at = |buf: &[f64], i: usize, (cx, cy): (usize, usize)| -> Vec<f64> {
        (0..dims.1).map(|c| at(buf, dims, i, c, cx, cy)).collect()
    };
    let mut total = 0.0;
    for (a, &(i, cell)) in batch.anchors.iter().enumerate() {
        let q = vec_at(&yh, i, cell);
        let s_pos = cosine(&q, &vec_at(&y, i, cell)) / tau;
        let mut denom = s_pos.exp() + (cosine(&q, &vec_at(&x, i, cell)) / tau).exp();
        for m in 0..batch.m {
            let neg = batch.negatives[a * batch.m + m];
            denom += (cosine(&q, &vec_at(&y, i, neg)) / tau).exp();
        }
        total += -(s_pos.exp() / denom).ln();
    }
    total / batch.anchors.len() as f64
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` along the coordinates in `coords`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&c| {
            probe[c] = x[c] + h;
            let up = f(&probe);
            probe[c] = x[c] - h;
            let down = f(&probe);
            probe[c] = x[c];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

pub fn psnr_oracle(a: &[f64], b: &[f64], range: f64) -> f64 {
    10.0 * (range * range / mse_oracle(a, b)).log10()
}

pub fn rmse_oracle(a: &[f64], b: &[f64]) -> f64 {
    mse_oracle(a, b).sqrt()
}

/// Direct 2-D windowed SSIM: every window weights its 121 pixels with the
/// outer product of a normalized 11-tap Gaussian.
pub fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> f64 {
    let n = 11;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..=h - n {
        for j in 0..=w - n {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..n {
                for v in 0..n {
                    let wt = g[u] * g[v] / (gs * gs);
                    let p = a[(i + u) * w + j + v];
                    let q = b[(i + u) * w + j + v];
                    mx += wt * p;
                    my += wt * q;
                    xx += wt * p * p;
                    yy += wt * q * q;
                    xy += wt * p * q;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
