//! Pixel fidelity, adversarial and semantic-guided contrastive objectives.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Added to feature norms before normalizing.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Weight of the generator adversarial term.
    pub lambda1: f64,
    /// Weight of the contrastive term.
    pub lambda2: f64,
    pub tau: f64,
    /// Anchors per image.
    pub k: usize,
    /// Cross-location negatives per anchor.
    pub m: usize,
    pub enable_aad: bool,
    pub enable_scl: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 0.5,
            tau: 0.1,
            k: 256,
            m: 32,
            enable_aad: true,
            enable_scl: true,
        }
    }
}

impl ObjectiveConfig {
    /// Anchor budget that fits the 8x8 grid of the tiny backbone.
    pub fn toy() -> Self {
        Self {
            k: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("objective: {m}")));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!(
                "weights must be non-negative, got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            ));
        }
        Ok(())
    }
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub scl: f64,
    pub total: f64,
}

impl LossReport {
    /// `iter<TAB>l1<TAB>adv_g<TAB>adv_d<TAB>scl<TAB>total`, shortest
    /// round-trip float formatting.
    pub fn log_line(&self, iteration: u64) -> String {
        format!(
            "{iteration}\t{}\t{}\t{}\t{}\t{}",
            self.l1, self.adv_g, self.adv_d, self.scl, self.total
        )
    }

    pub fn parse_log_line(line: &str) -> Result<(u64, LossReport)> {
        let f: Vec<&str> = line.trim_end().split('\t').collect();
        if f.len() != 6 {
            return Err(invalid!("loss log line needs 6 fields: `{line}`"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| invalid!("`{s}`: {e}"));
        Ok((
            f[0].parse().map_err(|e| invalid!("`{}`: {e}", f[0]))?,
            LossReport {
                l1: num(f[1])?,
                adv_g: num(f[2])?,
                adv_d: num(f[3])?,
                scl: num(f[4])?,
                total: num(f[5])?,
            },
        ))
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l1", self.l1),
            ("adv_g", self.adv_g),
            ("adv_d", self.adv_d),
            ("scl", self.scl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite {what} value {x}")));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "l1: prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// `-mean log sigmoid(real) - mean log(1 - sigmoid(fake))`.
pub fn adversarial_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    ensure_finite(real_logits, "real logit")?;
    ensure_finite(fake_logits, "fake logit")?;
    let real = softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

/// Non-saturating generator loss `-mean log sigmoid(fake)`.
pub fn adversarial_g_loss(fake_logits: &Tensor) -> Result<Tensor> {
    ensure_finite(fake_logits, "fake logit")?;
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// Anchor and negative coordinates sampled on a `(B, C, H, W)` feature grid.
///
/// Positives are `F_Y` at the anchors, first negatives `F_X` at the anchors,
/// second negatives `F_Y` at `M` other coordinates of the same image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub m: usize,
    /// `(sample, (x, y))`, `B * K` entries grouped by sample.
    pub anchors: Vec<(usize, (usize, usize))>,
    /// `(x, y)`, `M` consecutive entries per anchor.
    pub negatives: Vec<(usize, usize)>,
}

impl ContrastiveBatch {
    fn flat(&self, sample: usize, (x, y): (usize, usize)) -> u32 {
        (sample * self.height * self.width + y * self.width + x) as u32
    }

    pub fn anchor_indices(&self) -> Vec<u32> {
        self.anchors.iter().map(|&(i, c)| self.flat(i, c)).collect()
    }

    pub fn negative_indices(&self) -> Vec<u32> {
        self.anchors
            .iter()
            .enumerate()
            .flat_map(|(a, &(i, _))| {
                self.negatives[a * self.m..(a + 1) * self.m]
                    .iter()
                    .map(move |&c| self.flat(i, c))
            })
            .collect()
    }
}

/// Samples `K` distinct anchors per image and, for each anchor, `M` distinct
/// coordinates of the same image other than the anchor.
pub fn sample_contrastive_batch(
    f_x: &Tensor,
    f_yhat: &Tensor,
    f_y: &Tensor,
    cfg: &ObjectiveConfig,
    seed: u64,
) -> Result<ContrastiveBatch> {
    let dims = f_yhat.dims4()?;
    if f_x.dims4()? != dims || f_y.dims4()? != dims {
        return Err(Error::Shape(format!(
            "feature batches differ: F_X {:?}, F_Yhat {:?}, F_Y {:?}",
            f_x.dims(),
            f_yhat.dims(),
            f_y.dims()
        )));
    }
    let (b, _, h, w) = dims;
    sample_grid(b, h, w, cfg.k, cfg.m, seed)
}

pub fn sample_grid(batch: usize, height: usize, width: usize, k: usize, m: usize, seed: u64) -> Result<ContrastiveBatch> {
    let cells = height * width;
    if k == 0 || k > cells {
        return Err(invalid!("K = {k} anchors do not fit a {height}x{width} grid"));
    }
    if m + 1 > cells {
        return Err(invalid!(
            "M = {m} negatives exceed the {} non-anchor cells of a {height}x{width} grid",
            cells - 1
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coord = |idx: usize| (idx % width, idx / width);
    let mut anchors = Vec::with_capacity(batch * k);
    let mut negatives = Vec::with_capacity(batch * k * m);
    for i in 0..batch {
        for a in rand::seq::index::sample(&mut rng, cells, k).into_iter() {
            anchors.push((i, coord(a)));
            for j in rand::seq::index::sample(&mut rng, cells - 1, m).into_iter() {
                negatives.push(coord(if j >= a { j + 1 } else { j }));
            }
        }
    }
    Ok(ContrastiveBatch {
        batch,
        height,
        width,
        k,
        m,
        anchors,
        negatives,
    })
}

fn rows(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    Ok(f.flatten_from(2)?.transpose(1, 2)?.contiguous()?.reshape((b * h * w, c))?)
}

fn normalize_rows(v: &Tensor, what: &str, batch: &ContrastiveBatch, idx: &[u32]) -> Result<Tensor> {
    let norm = v.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let values = norm.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(r) = values.iter().position(|n| *n == 0.0 || !n.is_finite()) {
        let cell = idx[r] as usize;
        let per = batch.height * batch.width;
        let (i, rem) = (cell / per, cell % per);
        return Err(Error::Numeric(format!(
            "{what} feature of sample {i} at (x={}, y={}) has norm {}",
            rem % batch.width,
            rem / batch.width,
            values[r]
        )));
    }
    Ok(v.broadcast_div(&(norm + COSINE_EPS)?)?)
}

/// InfoNCE over one positive and `1 + M` negatives per anchor.
///
/// `F_X` and `F_Y` are detached here; gradients reach only `F_Yhat`.
pub fn scl_loss(
    f_yhat: &Tensor,
    f_x: &Tensor,
    f_y: &Tensor,
    batch: &ContrastiveBatch,
    cfg: &ObjectiveConfig,
) -> Result<Tensor> {
    let dims = f_yhat.dims4()?;
    if f_x.dims4()? != dims || f_y.dims4()? != dims {
        return Err(Error::Shape("SCL feature batches must share one shape".into()));
    }
    let (b, _, h, w) = dims;
    if (b, h, w) != (batch.batch, batch.height, batch.width) {
        return Err(Error::Shape(format!(
            "contrastive batch sampled for {}x{}x{} but features are {b}x{h}x{w}",
            batch.batch, batch.height, batch.width
        )));
    }
    let n = batch.anchors.len();
    let m = batch.m;
    let anchor_idx = batch.anchor_indices();
    let neg_idx = batch.negative_indices();
    let dev = Device::Cpu;
    let a_ids = Tensor::from_slice(&anchor_idx, n, &dev)?;
    let n_ids = Tensor::from_slice(&neg_idx, n * m, &dev)?;

    let yhat = rows(f_yhat)?;
    let y = rows(&f_y.detach())?;
    let x = rows(&f_x.detach())?;

    let q = normalize_rows(&yhat.index_select(&a_ids, 0)?, "F_Yhat", batch, &anchor_idx)?;
    let pos = normalize_rows(&y.index_select(&a_ids, 0)?, "F_Y", batch, &anchor_idx)?;
    let neg1 = normalize_rows(&x.index_select(&a_ids, 0)?, "F_X", batch, &anchor_idx)?;

    let s_pos = (&q * &pos)?.sum_keepdim(1)?;
    let s_neg1 = (&q * &neg1)?.sum_keepdim(1)?;
    let mut parts = vec![s_pos.clone(), s_neg1];
    if m > 0 {
        let neg2 = normalize_rows(&y.index_select(&n_ids, 0)?, "F_Y", batch, &neg_idx)?;
        let c = neg2.dim(1)?;
        let neg2 = neg2.reshape((n, m, c))?;
        parts.push(neg2.broadcast_mul(&q.unsqueeze(1)?)?.sum(2)?);
    }
    let logits = (Tensor::cat(&parts, 1)? / cfg.tau)?;
    let max = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + &max)?;
    let loss = (lse - (s_pos / cfg.tau)?)?.mean_all()?;
    Ok(loss)
}

/// `l1 + lambda1 * adv_g + lambda2 * scl` with disabled terms dropped.
pub fn total_loss(l1: f64, adv_g: f64, scl: f64, cfg: &ObjectiveConfig) -> f64 {
    let mut total = l1;
    if cfg.enable_aad {
        total += cfg.lambda1 * adv_g;
    }
    if cfg.enable_scl {
        total += cfg.lambda2 * scl;
    }
    total
}

/// Tensor form of [`total_loss`]; `None` terms are absent.
pub fn compose_total(l1: &Tensor, adv_g: Option<&Tensor>, scl: Option<&Tensor>, cfg: &ObjectiveConfig) -> Result<Tensor> {
    let mut total = l1.clone();
    if let (true, Some(a)) = (cfg.enable_aad, adv_g) {
        total = (total + (a * cfg.lambda1)?)?;
    }
    if let (true, Some(s)) = (cfg.enable_scl, scl) {
        total = (total + (s * cfg.lambda2)?)?;
    }
    Ok(total)
}
