use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CtSlice;
use crate::error::{invalid, Result};

/// Attenuation of the reference water path, `mu_water * L`. Sets how strongly
/// transmitted counts fall off with density.
pub const WATER_PATH_ATTENUATION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DoseSimConfig {
    /// Fraction of the full dose, in `(0, 1]`.
    pub dose_fraction: f64,
    /// Unattenuated photon count per pixel at full dose.
    pub photon_count_full_dose: f64,
    /// Standard deviation of additive electronic noise, in HU.
    pub electronic_noise_sigma: f64,
    pub seed: u64,
}

impl Default for DoseSimConfig {
    fn default() -> Self {
        Self {
            dose_fraction: 0.25,
            photon_count_full_dose: 1.0e4,
            electronic_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl DoseSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dose_fraction > 0.0 && self.dose_fraction <= 1.0) {
            return Err(invalid!(
                "dose_fraction must lie in (0, 1], got {}",
                self.dose_fraction
            ));
        }
        if !(self.photon_count_full_dose > 0.0 && self.photon_count_full_dose.is_finite()) {
            return Err(invalid!(
                "photon_count_full_dose must be positive, got {}",
                self.photon_count_full_dose
            ));
        }
        if !(self.electronic_noise_sigma >= 0.0 && self.electronic_noise_sigma.is_finite()) {
            return Err(invalid!(
                "electronic_noise_sigma must be non-negative, got {}",
                self.electronic_noise_sigma
            ));
        }
        Ok(())
    }
}

fn expected_counts(hu: f64, n0: f64) -> f64 {
    n0 * (-WATER_PATH_ATTENUATION * (hu + 1000.0) / 1000.0).exp()
}

fn counts_to_hu(counts: f64, n0: f64) -> f64 {
    -1000.0 * (counts.max(0.5) / n0).ln() / WATER_PATH_ATTENUATION - 1000.0
}

/// Image-domain low-dose surrogate.
///
/// Each pixel's HU value is mapped to an expected transmitted count at full
/// dose, which is binomially thinned to the requested dose fraction and
/// rescaled. The HU perturbation implied by the thinned count (minus its
/// second-order log bias) is added to the input, followed by Gaussian
/// electronic noise. The added variance therefore scales as `1/d - 1`, and
/// `d = 1` with no electronic noise reproduces the input exactly.
pub fn simulate_low_dose(ndct: &CtSlice, cfg: &DoseSimConfig) -> Result<CtSlice> {
    cfg.validate()?;
    let d = cfg.dose_fraction;
    let n0 = cfg.photon_count_full_dose;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let electronic = Normal::new(0.0, cfg.electronic_noise_sigma)
        .map_err(|e| invalid!("electronic noise: {e}"))?;
    let hu_per_log = 1000.0 / WATER_PATH_ATTENUATION;

    let mut out = ndct.pixels().clone();
    for v in out.iter_mut() {
        let hu = *v as f64;
        let full = expected_counts(hu, n0).round();
        let mut shift = 0.0;
        if d < 1.0 {
            let thinned = Binomial::new(full as u64, d)
                .map_err(|e| invalid!("binomial thinning: {e}"))?
                .sample(&mut rng) as f64;
            shift = counts_to_hu(thinned / d, n0) - counts_to_hu(full, n0);
            if full > 0.0 {
                shift -= hu_per_log * (1.0 - d) / (2.0 * d * full);
            }
        }
        if cfg.electronic_noise_sigma > 0.0 {
            shift += electronic.sample(&mut rng);
        }
        *v = (hu + shift) as f32;
    }
    CtSlice::new(out)
}
