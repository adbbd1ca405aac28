//! Feature-guided backdoor localization.
//!
//! Fits a clean reference distribution (mean + ridge-regularized covariance)
//! over visual token embeddings from success episodes, then flags test-time
//! tokens whose Mahalanobis score falls outside the alpha-level acceptance
//! region. Scores use the Cholesky factor throughout; no explicit inverse.

use crate::btf::{Archive, Payload};
use crate::chi2;
use crate::error::{BeraError, Result};
use crate::linalg::{self, SpdFactor};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    AnalyticChi2,
    EmpiricalQuantile,
}

/// How to pick the threshold at fit time. `Auto` resolves to the empirical
/// quantile when the fit has at least 20·d samples and to the analytic
/// chi-squared quantile otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdSpec {
    Auto,
    Analytic,
    Empirical,
}

/// Ridge weight. `Auto` is 1e-3 · trace(S)/d, floored at 1e-12 so constant
/// data still factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonSpec {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct ReferenceDistribution {
    mu: Vec<f64>,
    sigma_factor: SpdFactor,
    epsilon: f64,
    tau_alpha: f64,
    alpha: f64,
    d: usize,
    n_tokens: usize,
    threshold_mode: ThresholdMode,
}

#[derive(Debug, Clone)]
pub struct AnomalySet {
    /// Sorted indices with score strictly above tau.
    pub indices: Vec<usize>,
    /// Score for every token in the batch.
    pub scores: Vec<f64>,
}

impl AnomalySet {
    pub fn universe(&self) -> usize {
        self.scores.len()
    }
}

/// Pick ceil(fraction · n) episode ids without replacement.
pub fn select_reference_episodes<T: Clone>(
    success_ids: &[T],
    fraction: f64,
    rng: &mut RandomStream,
) -> Result<Vec<T>> {
    if success_ids.is_empty() {
        return Err(BeraError::EmptyInput("no success episodes"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(BeraError::DomainError(format!(
            "reference fraction {} outside (0, 1]",
            fraction
        )));
    }
    let k = ((fraction * success_ids.len() as f64).ceil() as usize).min(success_ids.len());
    let picks = rng.sample_without_replacement(success_ids.len(), k);
    Ok(picks.into_iter().map(|i| success_ids[i].clone()).collect())
}

impl ReferenceDistribution {
    /// Fit mean, covariance, and threshold from stacked reference tokens
    /// (an N x d matrix of one token per row).
    pub fn fit(
        tokens: &Tensor,
        epsilon: EpsilonSpec,
        alpha: f64,
        threshold: ThresholdSpec,
    ) -> Result<Self> {
        if tokens.ndim() != 2 {
            return Err(BeraError::ShapeMismatch(format!(
                "reference tokens must be N x d, got {:?}",
                tokens.shape()
            )));
        }
        let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
        if n < 2 {
            return Err(BeraError::TooFewSamples { need: 2, got: n });
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(BeraError::DomainError(format!(
                "alpha {} outside (0, 1)",
                alpha
            )));
        }
        let mu = linalg::row_mean(tokens.data(), n, d)?;
        let mut sigma = linalg::sample_covariance(tokens.data(), n, d, &mu)?;
        let eps = match epsilon {
            EpsilonSpec::Fixed(e) => {
                if !(e > 0.0) {
                    return Err(BeraError::DomainError(format!("epsilon {} must be > 0", e)));
                }
                e
            }
            EpsilonSpec::Auto => {
                let trace: f64 = (0..d).map(|i| sigma[i * d + i]).sum();
                (1e-3 * trace / d as f64).max(1e-12)
            }
        };
        for i in 0..d {
            sigma[i * d + i] += eps;
        }
        let factor = linalg::cholesky_spd(&sigma, d)?;
        let mode = match threshold {
            ThresholdSpec::Analytic => ThresholdMode::AnalyticChi2,
            ThresholdSpec::Empirical => ThresholdMode::EmpiricalQuantile,
            ThresholdSpec::Auto => {
                if n >= 20 * d {
                    ThresholdMode::EmpiricalQuantile
                } else {
                    ThresholdMode::AnalyticChi2
                }
            }
        };
        let tau_alpha = match mode {
            ThresholdMode::AnalyticChi2 => chi2::chi2_quantile(d, 1.0 - alpha)?,
            ThresholdMode::EmpiricalQuantile => {
                let mut scores = Vec::with_capacity(n);
                let mut diff = vec![0.0; d];
                for row in tokens.data().chunks(d) {
                    for ((dst, v), m) in diff.iter_mut().zip(row).zip(&mu) {
                        *dst = v - m;
                    }
                    scores.push(factor.quad_form(&diff)?);
                }
                scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
                // Order statistic at the (1 - alpha) level, "higher" convention.
                let k = (((1.0 - alpha) * n as f64).ceil() as usize).clamp(1, n);
                scores[k - 1]
            }
        };
        Ok(ReferenceDistribution {
            mu,
            sigma_factor: factor,
            epsilon: eps,
            tau_alpha,
            alpha,
            d,
            n_tokens: n,
            threshold_mode: mode,
        })
    }

    /// Assemble from already-known pieces (loading, fixtures). `sigma` is the
    /// full ridged covariance, row-major d x d.
    pub fn from_parts(
        mu: Vec<f64>,
        sigma: &[f64],
        epsilon: f64,
        tau_alpha: f64,
        alpha: f64,
        n_tokens: usize,
        threshold_mode: ThresholdMode,
    ) -> Result<Self> {
        let d = mu.len();
        let factor = linalg::cholesky_spd(sigma, d)?;
        Ok(ReferenceDistribution {
            mu,
            sigma_factor: factor,
            epsilon,
            tau_alpha,
            alpha,
            d,
            n_tokens,
            threshold_mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn tau(&self) -> f64 {
        self.tau_alpha
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn threshold_mode(&self) -> ThresholdMode {
        self.threshold_mode
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.sigma_factor
    }

    /// Mahalanobis score of one token.
    pub fn score_one(&self, token: &[f64]) -> Result<f64> {
        if token.len() != self.d {
            return Err(BeraError::DimensionMismatch {
                expected: self.d,
                got: token.len(),
            });
        }
        let diff: Vec<f64> = token.iter().zip(&self.mu).map(|(v, m)| v - m).collect();
        self.sigma_factor.quad_form(&diff)
    }

    /// Scores for an M x d batch.
    pub fn scores(&self, batch: &Tensor) -> Result<Vec<f64>> {
        if batch.ndim() != 2 || batch.shape()[1] != self.d {
            return Err(BeraError::DimensionMismatch {
                expected: self.d,
                got: if batch.ndim() == 2 {
                    batch.shape()[1]
                } else {
                    0
                },
            });
        }
        batch
            .data()
            .chunks(self.d)
            .map(|row| self.score_one(row))
            .collect()
    }

    /// Flag tokens with score strictly above tau; ties count as clean.
    pub fn flag_anomalies(&self, batch: &Tensor) -> Result<AnomalySet> {
        let scores = self.scores(batch)?;
        let indices = scores
            .iter()
            .enumerate()
            .filter(|(_, s)| **s > self.tau_alpha)
            .map(|(j, _)| j)
            .collect();
        Ok(AnomalySet { indices, scores })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.push(
            "mu",
            Payload::F64 {
                shape: vec![self.d],
                data: self.mu.clone(),
            },
        );
        a.push(
            "sigma_lower",
            Payload::F64 {
                shape: vec![self.d, self.d],
                data: self.sigma_factor.lower().to_vec(),
            },
        );
        let mode_code = match self.threshold_mode {
            ThresholdMode::AnalyticChi2 => 0.0,
            ThresholdMode::EmpiricalQuantile => 1.0,
        };
        a.push(
            "scalars",
            Payload::F64 {
                shape: vec![5],
                data: vec![
                    self.alpha,
                    self.epsilon,
                    self.tau_alpha,
                    mode_code,
                    self.n_tokens as f64,
                ],
            },
        );
        a
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mu = match a.require("mu")? {
            Payload::F64 { shape, data } if shape.len() == 1 => data.clone(),
            _ => return Err(BeraError::CorruptFile("mu must be a 1-d f64 tensor".into())),
        };
        let d = mu.len();
        let lower = match a.require("sigma_lower")? {
            Payload::F64 { shape, data } if shape == &[d, d] => data.clone(),
            other => {
                return Err(BeraError::CorruptFile(format!(
                    "sigma_lower must be {} x {}, got {:?}",
                    d,
                    d,
                    other.shape()
                )))
            }
        };
        let scalars = match a.require("scalars")? {
            Payload::F64 { shape, data } if shape == &[5] => data.clone(),
            _ => return Err(BeraError::CorruptFile("scalars must have 5 entries".into())),
        };
        let threshold_mode = match scalars[3] {
            v if v == 0.0 => ThresholdMode::AnalyticChi2,
            v if v == 1.0 => ThresholdMode::EmpiricalQuantile,
            v => {
                return Err(BeraError::CorruptFile(format!(
                    "unknown threshold mode code {}",
                    v
                )))
            }
        };
        Ok(ReferenceDistribution {
            mu,
            sigma_factor: SpdFactor::from_lower(d, lower)?,
            epsilon: scalars[1],
            tau_alpha: scalars[2],
            alpha: scalars[0],
            d,
            n_tokens: scalars[4] as usize,
            threshold_mode,
        })
    }
}
