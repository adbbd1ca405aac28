//! One-dimensional Gaussian mixture fitting by EM.
//!
//! Saliency clustering only needs scalars, which keeps EM deterministic:
//! initialization is quantile-spaced (no random restarts), and the only
//! stochastic element is the re-seed location when a component empties out.
//! Variances are floored, making the M-step a constrained maximization that
//! still preserves the monotone log-likelihood guarantee.

use crate::error::{BeraError, Result};
use crate::rng::RandomStream;

#[derive(Debug, Clone)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    /// Final training log-likelihood.
    pub log_likelihood: f64,
    /// Per-iteration log-likelihood, non-decreasing within 1e-9.
    pub ll_history: Vec<f64>,
    /// Hard cluster index per input point (argmax responsibility, ties to
    /// the lower component index).
    pub assignments: Vec<usize>,
}

/// Default variance floor: 1e-8 times the squared data range.
pub fn default_var_floor(values: &[f64]) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    (1e-8 * range * range).max(1e-12)
}

struct Params {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

fn log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

/// E-step: responsibilities and total log-likelihood.
fn e_step(values: &[f64], p: &Params, resp: &mut [f64]) -> f64 {
    let k = p.means.len();
    let mut ll = 0.0;
    for (i, &x) in values.iter().enumerate() {
        let row = &mut resp[i * k..(i + 1) * k];
        let mut mx = f64::NEG_INFINITY;
        for c in 0..k {
            row[c] = if p.weights[c] > 0.0 {
                p.weights[c].ln() + log_pdf(x, p.means[c], p.variances[c])
            } else {
                f64::NEG_INFINITY
            };
            mx = mx.max(row[c]);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        ll += mx + sum.ln();
    }
    ll
}

fn m_step(values: &[f64], resp: &[f64], p: &mut Params, var_floor: f64) {
    let k = p.means.len();
    let n = values.len();
    for c in 0..k {
        let mut nk = 0.0;
        let mut sum = 0.0;
        for i in 0..n {
            let r = resp[i * k + c];
            nk += r;
            sum += r * values[i];
        }
        p.weights[c] = nk / n as f64;
        if nk > 1e-12 * n as f64 {
            let mean = sum / nk;
            let mut var = 0.0;
            for i in 0..n {
                let d = values[i] - mean;
                var += resp[i * k + c] * d * d;
            }
            p.means[c] = mean;
            p.variances[c] = (var / nk).max(var_floor);
        }
        // An effectively empty component keeps its old mean and variance;
        // its weight decays toward zero, which cannot lower the likelihood.
    }
}

fn run_em(
    values: &[f64],
    mut p: Params,
    tol: f64,
    max_iter: usize,
    var_floor: f64,
) -> (Params, Vec<f64>, Vec<f64>) {
    let k = p.means.len();
    let mut resp = vec![0.0; values.len() * k];
    let mut history = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..max_iter {
        let ll = e_step(values, &p, &mut resp);
        history.push(ll);
        if ll - prev < tol && prev.is_finite() {
            break;
        }
        prev = ll;
        m_step(values, &resp, &mut p, var_floor);
    }
    // Refresh responsibilities for the final parameters so hard assignments
    // match the reported likelihood.
    let ll = e_step(values, &p, &mut resp);
    if history.last().map_or(true, |&h| ll > h) {
        history.push(ll);
    }
    (p, resp, history)
}

fn hard_assign(resp: &[f64], n: usize, k: usize) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let row = &resp[i * k..(i + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fit a K-component 1-D mixture. Initialization: quantile-spaced means with
/// the global variance. K is reduced to the point count if there are fewer
/// points than requested components. `rng` is used only to place a re-seeded
/// component when one empties out during fitting.
pub fn fit_gmm_1d(
    values: &[f64],
    k: usize,
    rng: &mut RandomStream,
    tol: f64,
    max_iter: usize,
    var_floor: f64,
) -> Result<GmmModel> {
    if values.is_empty() {
        return Err(BeraError::EmptyInput("gmm on empty values"));
    }
    if k == 0 {
        return Err(BeraError::DomainError("gmm needs K >= 1".into()));
    }
    let n = values.len();
    let k = k.min(n);
    let floor = var_floor.max(1e-12);

    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean: f64 = values.iter().sum::<f64>() / n as f64;
    let global_var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let init = Params {
        weights: vec![1.0 / k as f64; k],
        means: (0..k)
            .map(|c| sorted[((c as f64 + 0.5) / k as f64 * n as f64) as usize])
            .collect(),
        variances: vec![global_var.max(floor); k],
    };

    let (p, resp, history) = run_em(values, init, tol, max_iter, floor);

    // If a component died, try one re-seeded restart at the worst-explained
    // point; keep it only when it genuinely improves the likelihood, so the
    // reported history is always a single monotone EM trajectory.
    let mut best = (p, resp, history);
    let empty = best.0.weights.iter().any(|&w| w < 1.0 / (10.0 * n as f64));
    if empty && k > 1 {
        let mut seeded = Params {
            weights: best.0.weights.clone(),
            means: best.0.means.clone(),
            variances: best.0.variances.clone(),
        };
        let mut scratch = vec![0.0; n * k];
        e_step(values, &seeded, &mut scratch);
        // Worst-explained point: lowest per-point likelihood under the model.
        let worst = {
            let mut worst_i = 0;
            let mut worst_ll = f64::INFINITY;
            for (i, &x) in values.iter().enumerate() {
                let mut lse = f64::NEG_INFINITY;
                for c in 0..k {
                    if seeded.weights[c] > 0.0 {
                        let t = seeded.weights[c].ln() + log_pdf(x, seeded.means[c], seeded.variances[c]);
                        lse = if lse > t { lse } else { t + (1.0 + (lse - t).exp()).ln() };
                    }
                }
                if lse < worst_ll {
                    worst_ll = lse;
                    worst_i = i;
                }
            }
            worst_i
        };
        let dead = best
            .0
            .weights
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let jitter = 1.0 + 0.01 * rng.next_f64();
        seeded.means[dead] = values[worst] * jitter;
        seeded.variances[dead] = global_var.max(floor);
        seeded.weights = vec![1.0 / k as f64; k];
        let candidate = run_em(values, seeded, tol, max_iter, floor);
        let old_ll = *best.2.last().unwrap();
        let new_ll = *candidate.2.last().unwrap();
        if new_ll > old_ll + 1e-12 {
            best = candidate;
        }
    }

    let (p, resp, history) = best;
    let ll = *history.last().unwrap();
    if !ll.is_finite() {
        return Err(BeraError::DomainError("gmm log-likelihood diverged".into()));
    }
    Ok(GmmModel {
        k,
        weights: p.weights,
        means: p.means,
        variances: p.variances,
        log_likelihood: ll,
        ll_history: history,
        assignments: hard_assign(&resp, n, k),
    })
}

/// Convenience wrapper with the documented defaults (tol 1e-6, 200
/// iterations, range-scaled variance floor).
pub fn fit_gmm_default(values: &[f64], k: usize, rng: &mut RandomStream) -> Result<GmmModel> {
    fit_gmm_1d(values, k, rng, 1e-6, 200, default_var_floor(values))
}
