//! Image-quality metrics and dataset reports.
//!
//! PSNR and SSIM are computed on window-normalized images with a data range
//! of 1. RMSE is reported in HU after mapping both images back through the
//! same window. The perceptual score is not LPIPS: it is the mean squared
//! distance between unit-normalized dense backbone features, reported under
//! its own name.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::data::{denormalize, normalize_hu, CtSlice, NormalizedImage, PairedSample, Window};
use crate::error::{invalid, Error, Result};
use crate::generator::Generator;

/// PSNR of two identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Guards the feature normalization against all-zero tokens.
const FEATURE_EPS: f64 = 1e-12;

fn same_shape(a: &ArrayView2<f32>, b: &ArrayView2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("images are {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn mse(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n
}

/// `10 log10(range^2 / MSE)`; [`PSNR_IDENTICAL`] when the MSE is zero.
pub fn psnr(pred: ArrayView2<f32>, target: ArrayView2<f32>, data_range: f64) -> Result<f64> {
    same_shape(&pred, &target)?;
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(invalid!("data_range must be positive, got {data_range}"));
    }
    let m = mse(pred, target);
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

fn gaussian_kernel() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let n = k.len();
    let (h, w) = x.dim();
    let rows: Array2<f64> = Array2::from_shape_fn((h, w + 1 - n), |(i, j)| (0..n).map(|t| k[t] * x[[i, j + t]]).sum());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(i, j)| (0..n).map(|t| k[t] * rows[[i + t, j]]).sum())
}

/// Mean local SSIM with an 11-tap Gaussian window (sigma 1.5), no padding.
pub fn ssim(pred: ArrayView2<f32>, target: ArrayView2<f32>, data_range: f64) -> Result<f64> {
    same_shape(&pred, &target)?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"));
    }
    if !(data_range.is_finite() && data_range > 0.0) {
        return Err(invalid!("data_range must be positive, got {data_range}"));
    }
    let x = pred.mapv(f64::from);
    let y = target.mapv(f64::from);
    let k = gaussian_kernel();
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k) - &mx * &mx;
    let syy = filter_valid(&(&y * &y), &k) - &my * &my;
    let sxy = filter_valid(&(&x * &y), &k) - &mx * &my;
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let num = (2.0 * &mx * &my + c1) * (2.0 * &sxy + c2);
    let den = (&mx * &mx + &my * &my + c1) * (sxx + syy + c2);
    Ok((num / den).mean().expect("non-empty map"))
}

/// Root mean squared HU difference.
pub fn rmse_hu(pred: &CtSlice, target: &CtSlice) -> Result<f64> {
    same_shape(&pred.pixels().view(), &target.pixels().view())?;
    Ok(mse(pred.pixels().view(), target.pixels().view()).sqrt())
}

/// Mean over tokens of the squared distance between unit-length dense
/// feature vectors of `pred` and `target`; lies in `[0, 4]`.
pub fn perceptual_distance(pred: &NormalizedImage, target: &NormalizedImage, backbone: &Backbone) -> Result<f64> {
    same_shape(&pred.pixels().view(), &target.pixels().view())?;
    let tokens = |img: &NormalizedImage| -> Result<Array2<f64>> {
        let f = backbone.extract_dense(img)?.values; // (1, C, h, w)
        let (_, c, h, w) = f.dims4()?;
        let v = f.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut t = Array2::from_shape_vec((c, h * w), v)
            .map_err(|e| invalid!("{e}"))?
            .reversed_axes();
        for mut row in t.axis_iter_mut(Axis(0)) {
            let norm = row.dot(&row).sqrt() + FEATURE_EPS;
            row /= norm;
        }
        Ok(t)
    };
    let a = tokens(pred)?;
    let b = tokens(target)?;
    let d = a - b;
    Ok((&d * &d).sum_axis(Axis(1)).mean().expect("at least one token"))
}

/// Convenience form that loads the backbone described by `spec`.
pub fn perceptual_distance_with_spec(
    pred: &NormalizedImage,
    target: &NormalizedImage,
    spec: &BackboneSpec,
) -> Result<f64> {
    perceptual_distance(pred, target, &Backbone::load(spec)?)
}

mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    // JSON has no infinity; the identical-image sentinel is written as "inf".
    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad psnr value `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: String,
    #[serde(with = "psnr_serde")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse_hu: f64,
    pub perceptual: f64,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(with = "psnr_serde")]
    pub mean: f64,
    #[serde(with = "psnr_serde")]
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        if mean.is_infinite() {
            return Self { mean, std: 0.0 };
        }
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_db: Summary,
    pub ssim: Summary,
    pub rmse_hu: Summary,
    pub perceptual: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Row name in comparison tables, e.g. an ablation label.
    pub label: String,
    pub window: Window,
    pub per_sample: Vec<MetricRow>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn from_rows(label: impl Into<String>, window: Window, per_sample: Vec<MetricRow>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(invalid!("a report needs at least one sample"));
        }
        let col = |f: fn(&MetricRow) -> f64| Summary::of(per_sample.iter().map(f));
        let aggregate = Aggregate {
            psnr_db: col(|r| r.psnr_db),
            ssim: col(|r| r.ssim),
            rmse_hu: col(|r| r.rmse_hu),
            perceptual: col(|r| r.perceptual),
        };
        Ok(Self {
            label: label.into(),
            window,
            per_sample,
            aggregate,
        })
    }

    fn header(&self) -> String {
        format!(
            "# {}: window [{}, {}] HU, psnr/ssim data_range 1.0, perceptual = backbone feature distance (not LPIPS)",
            self.label, self.window.min, self.window.max
        )
    }

    /// Human-readable table, one line per sample plus mean and std lines.
    pub fn to_table(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        let _ = writeln!(s, "{:<24} {:>10} {:>8} {:>10} {:>11}", "sample", "psnr_db", "ssim", "rmse_hu", "perceptual");
        let line = |s: &mut String, id: &str, p: f64, ss: f64, r: f64, q: f64| {
            let _ = writeln!(s, "{id:<24} {p:>10.4} {ss:>8.5} {r:>10.4} {q:>11.6}");
        };
        for r in &self.per_sample {
            line(&mut s, &r.sample_id, r.psnr_db, r.ssim, r.rmse_hu, r.perceptual);
        }
        let a = &self.aggregate;
        line(&mut s, "mean", a.psnr_db.mean, a.ssim.mean, a.rmse_hu.mean, a.perceptual.mean);
        line(&mut s, "std", a.psnr_db.std, a.ssim.std, a.rmse_hu.std, a.perceptual.std);
        s
    }

    /// One JSON object per line: a header record, one record per sample,
    /// then the aggregate record.
    pub fn to_json_lines(&self) -> String {
        let header = serde_json::json!({
            "record": "header",
            "label": self.label,
            "window": self.window,
            "data_range": 1.0,
        });
        let mut out = format!("{header}\n");
        for r in &self.per_sample {
            let mut v = serde_json::to_value(r).expect("row serializes");
            v["record"] = "sample".into();
            let _ = writeln!(out, "{v}");
        }
        let mut v = serde_json::to_value(&self.aggregate).expect("aggregate serializes");
        v["record"] = "aggregate".into();
        let _ = writeln!(out, "{v}");
        out
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let bad = |e: String| Error::Config(format!("metric report: {e}"));
        let mut label = None;
        let mut window = None;
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            match v["record"].as_str() {
                Some("header") => {
                    label = v["label"].as_str().map(str::to_string);
                    window = Some(serde_json::from_value(v["window"].clone()).map_err(|e| bad(e.to_string()))?);
                }
                Some("sample") => rows.push(serde_json::from_value(v).map_err(|e| bad(e.to_string()))?),
                Some("aggregate") => {}
                _ => return Err(bad(format!("unknown record in `{line}`"))),
            }
        }
        let window = window.ok_or_else(|| bad("missing header record".into()))?;
        Self::from_rows(label.unwrap_or_default(), window, rows)
    }
}

/// Side-by-side aggregate means, one row per report.
pub fn comparison_table(reports: &[MetricReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>10} {:>8} {:>10} {:>11}", "method", "psnr_db", "ssim", "rmse_hu", "perceptual");
    for r in reports {
        let a = &r.aggregate;
        let _ = writeln!(
            s,
            "{:<12} {:>10.4} {:>8.5} {:>10.4} {:>11.6}",
            r.label, a.psnr_db.mean, a.ssim.mean, a.rmse_hu.mean, a.perceptual.mean
        );
    }
    s
}

/// Metrics of one normalized prediction against its normalized reference.
pub fn score(
    sample_id: &str,
    pred: &NormalizedImage,
    target: &NormalizedImage,
    backbone: &Backbone,
) -> Result<MetricRow> {
    let ctx = Error::in_sample(sample_id);
    let inner = || -> Result<MetricRow> {
        Ok(MetricRow {
            sample_id: sample_id.to_string(),
            psnr_db: psnr(pred.pixels().view(), target.pixels().view(), 1.0)?,
            ssim: ssim(pred.pixels().view(), target.pixels().view(), 1.0)?,
            rmse_hu: rmse_hu(&denormalize(pred)?, &denormalize(target)?)?,
            perceptual: perceptual_distance(pred, target, backbone)?,
        })
    };
    inner().map_err(ctx)
}

/// Scores every pair. With a generator the low-dose input is denoised first;
/// without one the raw low-dose image is scored, which gives the
/// no-processing row.
pub fn evaluate_dataset(
    label: &str,
    generator: Option<&Generator>,
    dataset: &[PairedSample],
    window: Window,
    backbone: &Backbone,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(invalid!("evaluation dataset is empty"));
    }
    let rows = dataset
        .iter()
        .map(|p| {
            let id = p.sample_id.as_str();
            let x = normalize_hu(&p.ldct, window).map_err(Error::in_sample(id))?;
            let y = normalize_hu(&p.ndct, window).map_err(Error::in_sample(id))?;
            let pred = match generator {
                Some(g) => g.denoise(std::slice::from_ref(&x)).map_err(Error::in_sample(id))?.remove(0),
                None => x,
            };
            score(id, &pred, &y, backbone)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_rows(label, window, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_phantom;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(i, j)| f(i, j))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(16, 16, |_, _| 0.5);
        assert_eq!(psnr(a.view(), a.view(), 1.0).unwrap(), PSNR_IDENTICAL);
        let b = img(16, 16, |_, _| 0.6); // MSE 0.01
        assert!((psnr(a.view(), b.view(), 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(a.view(), img(16, 15, |_, _| 0.0).view(), 1.0).is_err());
        assert!(psnr(a.view(), b.view(), 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = img(20, 24, |i, j| ((i * 7 + j * 3) % 11) as f32 / 10.0);
        assert!((ssim(a.view(), a.view(), 1.0).unwrap() - 1.0).abs() < 1e-9);
        let zero = img(16, 16, |_, _| 0.0);
        let one = img(16, 16, |_, _| 1.0);
        let c1 = (SSIM_K1 * 1.0f64).powi(2);
        let c2 = (SSIM_K2 * 1.0f64).powi(2);
        let expect = (2.0 * 0.0 * 1.0 + c1) * c2 / ((0.0 + 1.0 + c1) * c2);
        assert!((ssim(zero.view(), one.view(), 1.0).unwrap() - expect).abs() < 1e-12);
        assert!(ssim(img(10, 20, |_, _| 0.0).view(), img(10, 20, |_, _| 0.0).view(), 1.0).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(k[i], k[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn rmse_offset() {
        let a = make_phantom(32, 32, 3, 1).unwrap();
        let b = CtSlice::new(a.pixels().mapv(|v| v + 5.0)).unwrap();
        assert_eq!(rmse_hu(&a, &a).unwrap(), 0.0);
        assert!((rmse_hu(&a, &b).unwrap() - 5.0).abs() < 1e-4);
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of([1.0, 2.0, 3.0, 6.0]);
        assert_eq!(s.mean, 3.0);
        assert!((s.std - 3.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(Summary::of([f64::INFINITY, 3.0]).mean, f64::INFINITY);
    }

    #[test]
    fn json_lines_round_trip_with_sentinel() {
        let rows = vec![
            MetricRow { sample_id: "a".into(), psnr_db: f64::INFINITY, ssim: 1.0, rmse_hu: 0.0, perceptual: 0.0 },
            MetricRow { sample_id: "b".into(), psnr_db: 31.25, ssim: 0.875, rmse_hu: 12.5, perceptual: 0.03125 },
        ];
        let r = MetricReport::from_rows("Baseline", Window::SOFT_TISSUE, rows).unwrap();
        let text = r.to_json_lines();
        assert!(text.contains("\"inf\""));
        assert_eq!(MetricReport::from_json_lines(&text).unwrap(), r);
        assert!(r.to_table().contains("window [-160, 240]"));
    }
}
