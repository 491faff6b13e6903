//! Post-decode refinement hook: `round(N / d)` passes of a configured
//! denoiser over the decoded latent.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiseConfig {
    /// Base inference step count `N`.
    pub steps: usize,
    /// Divisor `d`, in `[1, N]` (any `d >= 1` when `N = 0`).
    pub divisor: usize,
    /// `identity`, `gaussian-smoother` or `external:<name>`.
    pub denoiser: String,
    /// Passed through to external denoisers.
    pub conditioning: String,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            steps: 50,
            divisor: 10,
            denoiser: "gaussian-smoother".into(),
            conditioning: String::new(),
        }
    }
}

impl DenoiseConfig {
    /// A configuration that applies no refinement.
    pub fn zero_steps() -> Self {
        DenoiseConfig {
            steps: 0,
            divisor: 1,
            denoiser: "identity".into(),
            conditioning: String::new(),
        }
    }

    /// `round(N / d)`.
    pub fn effective_steps(&self) -> usize {
        if self.divisor == 0 {
            return 0;
        }
        (self.steps as f64 / self.divisor as f64).round() as usize
    }

    pub fn kind(&self) -> Result<DenoiserKind> {
        match self.denoiser.as_str() {
            "identity" => Ok(DenoiserKind::Identity),
            "gaussian-smoother" => Ok(DenoiserKind::GaussianSmoother),
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => Ok(DenoiserKind::External(name.to_string())),
                _ => Err(Error::Config(format!(
                    "denoise.denoiser: unknown tag {other:?}"
                ))),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.divisor < 1 {
            return Err(Error::Config("denoise.divisor: must be >= 1".into()));
        }
        if self.steps > 0 && self.divisor > self.steps {
            return Err(Error::Config(format!(
                "denoise.divisor: {} exceeds steps {}",
                self.divisor, self.steps
            )));
        }
        self.kind().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenoiserKind {
    Identity,
    GaussianSmoother,
    External(String),
}

/// `(latent, steps, conditioning) -> latent`.
pub type DenoiseFn = dyn Fn(&LatentTensor, usize, &str) -> Result<LatentTensor> + Send + Sync;

/// In-process registry of external denoisers, keyed by name.
#[derive(Clone, Default)]
pub struct DenoiserRegistry {
    external: BTreeMap<String, Arc<DenoiseFn>>,
}

impl fmt::Debug for DenoiserRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenoiserRegistry")
            .field("external", &self.external.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl DenoiserRegistry {
    pub fn register(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(&LatentTensor, usize, &str) -> Result<LatentTensor> + Send + Sync + 'static,
    ) {
        self.external.insert(name.into(), Arc::new(f));
    }
}

const BINOMIAL: [f64; 3] = [1.0, 2.0, 1.0];

/// One pass of the separable `[1 2 1] / 4` kernel per channel (3x3
/// binomial, weights sum to 1), replicating edge cells.
pub fn smooth_once(z: &LatentTensor) -> LatentTensor {
    let d = z.dims();
    let mut out = LatentTensor::zeros(d);
    for i in 0..d.h {
        for j in 0..d.w {
            let px = out.pixel_mut(i, j);
            for (dy, wy) in BINOMIAL.iter().enumerate() {
                let ii = (i + dy).saturating_sub(1).min(d.h - 1);
                for (dx, wx) in BINOMIAL.iter().enumerate() {
                    let jj = (j + dx).saturating_sub(1).min(d.w - 1);
                    let weight = wy * wx / 16.0;
                    for (o, v) in px.iter_mut().zip(z.pixel(ii, jj)) {
                        *o += weight * v;
                    }
                }
            }
        }
    }
    out
}

pub fn denoise(
    z: &LatentTensor,
    cfg: &DenoiseConfig,
    registry: &DenoiserRegistry,
) -> Result<LatentTensor> {
    cfg.validate()?;
    let steps = cfg.effective_steps();
    let kind = cfg.kind()?;
    if steps == 0 {
        return Ok(z.clone());
    }
    let out = match kind {
        DenoiserKind::Identity => z.clone(),
        DenoiserKind::GaussianSmoother => {
            let mut cur = z.clone();
            for _ in 0..steps {
                cur = smooth_once(&cur);
            }
            cur
        }
        DenoiserKind::External(name) => {
            let f = registry.external.get(&name).ok_or_else(|| {
                Error::Config(format!(
                    "denoise.denoiser: no external denoiser named {name:?}"
                ))
            })?;
            f(z, steps, &cfg.conditioning)?
        }
    };
    out.check_dims(z.dims(), "denoiser output")?;
    Ok(out)
}
