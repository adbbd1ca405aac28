//! Attention-driven filtering.
//!
//! Deep-layer attention maps are averaged over heads, reduced to per-token
//! saliency (mean received attention over all query rows), clustered with a
//! small 1-D GMM, and the cluster with the highest mean saliency becomes the
//! layer's trigger candidate. Candidates are unioned across the deep layers
//! and intersected with the Mahalanobis anomaly set.

use std::collections::BTreeMap;

use crate::error::{BeraError, Result};
use crate::fbl::AnomalySet;
use crate::gmm::{self, GmmModel};
use crate::rng::RandomStream;
use crate::tensor::Tensor;

/// Per-layer attention maps plus the token-column bookkeeping.
/// `layers[i]` is an H x T x T tensor for global layer index `offset + i`.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    layers: Vec<Tensor>,
    offset: usize,
    image_cols: Vec<usize>,
    t: usize,
    h: usize,
}

impl AttentionStack {
    pub fn new(layers: Vec<Tensor>, offset: usize, image_cols: Vec<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(BeraError::EmptyInput("attention stack with no layers"));
        }
        let shape = layers[0].shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(BeraError::ShapeMismatch(format!(
                "attention layers must be H x T x T, got {:?}",
                shape
            )));
        }
        let (h, t) = (shape[0], shape[1]);
        for (i, l) in layers.iter().enumerate() {
            if l.shape() != shape.as_slice() {
                return Err(BeraError::ShapeMismatch(format!(
                    "layer {} shape {:?} differs from {:?}",
                    i,
                    l.shape(),
                    shape
                )));
            }
            for head in 0..h {
                for row in 0..t {
                    let mut sum = 0.0;
                    for col in 0..t {
                        sum += l.at3(head, row, col);
                    }
                    if (sum - 1.0).abs() > 1e-6 {
                        return Err(BeraError::ShapeMismatch(format!(
                            "layer {} head {} row {} sums to {}, not 1",
                            i, head, row, sum
                        )));
                    }
                }
            }
        }
        for &c in &image_cols {
            if c >= t {
                return Err(BeraError::IndexOutOfRange { index: c, size: t });
            }
        }
        Ok(AttentionStack {
            layers,
            offset,
            image_cols,
            t,
            h,
        })
    }

    pub fn first_layer(&self) -> usize {
        self.offset
    }

    pub fn last_layer(&self) -> usize {
        self.offset + self.layers.len() - 1
    }

    pub fn image_cols(&self) -> &[usize] {
        &self.image_cols
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn heads(&self) -> usize {
        self.h
    }

    fn layer(&self, l: usize) -> Result<&Tensor> {
        if l < self.offset || l > self.last_layer() {
            return Err(BeraError::LayerOutOfRange {
                layer: l,
                lo: self.offset,
                hi: self.last_layer(),
            });
        }
        Ok(&self.layers[l - self.offset])
    }
}

/// Head-averaged attention for one layer; stays row-stochastic by convexity.
pub fn mean_attention(stack: &AttentionStack, l: usize) -> Result<Tensor> {
    let layer = stack.layer(l)?;
    let (h, t) = (stack.h, stack.t);
    let mut out = Tensor::zeros(vec![t, t]);
    let inv = 1.0 / h as f64;
    for head in 0..h {
        for row in 0..t {
            for col in 0..t {
                let v = out.at2(row, col) + layer.at3(head, row, col) * inv;
                out.set2(row, col, v);
            }
        }
    }
    Ok(out)
}

/// Mean received attention per image-token column, averaged over all T query
/// rows: v_j = T^-1 sum_rows Abar[row, image_cols[j]].
pub fn token_saliency(abar: &Tensor, image_cols: &[usize]) -> Result<Vec<f64>> {
    if abar.ndim() != 2 || abar.shape()[0] != abar.shape()[1] {
        return Err(BeraError::ShapeMismatch(format!(
            "saliency needs a square map, got {:?}",
            abar.shape()
        )));
    }
    let t = abar.shape()[0];
    let inv = 1.0 / t as f64;
    image_cols
        .iter()
        .map(|&c| {
            if c >= t {
                return Err(BeraError::IndexOutOfRange { index: c, size: t });
            }
            Ok((0..t).map(|row| abar.at2(row, c)).sum::<f64>() * inv)
        })
        .collect()
}

/// Cluster with the highest mean member saliency. Ties go to the smaller
/// cluster, then the lower component index.
pub fn select_trigger_cluster(gmm: &GmmModel, saliency: &[f64]) -> Result<(usize, Vec<usize>)> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); gmm.k];
    for (i, &c) in gmm.assignments.iter().enumerate() {
        members[c].push(i);
    }
    let mut best: Option<(usize, f64, usize)> = None; // (idx, mean, size)
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        let mean = m.iter().map(|&i| saliency[i]).sum::<f64>() / m.len() as f64;
        let better = match best {
            None => true,
            Some((_, bm, bs)) => mean > bm || (mean == bm && m.len() < bs),
        };
        if better {
            best = Some((c, mean, m.len()));
        }
    }
    match best {
        Some((c, _, _)) => Ok((c, members[c].clone())),
        None => Err(BeraError::AllClustersEmpty),
    }
}

/// Sorted union across layers.
pub fn aggregate_layers(per_layer: &BTreeMap<usize, Vec<usize>>) -> Result<Vec<usize>> {
    if per_layer.is_empty() {
        return Err(BeraError::EmptyInput("no per-layer filter sets"));
    }
    let mut union: Vec<usize> = per_layer.values().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    Ok(union)
}

/// Intersection of the anomaly set with the aggregated filter; `m` is the
/// token universe both sets must live in.
pub fn intersect_backdoor(anom: &AnomalySet, filter: &[usize], m: usize) -> Result<Vec<usize>> {
    if anom.universe() != m {
        return Err(BeraError::UniverseMismatch {
            left: anom.universe(),
            right: m,
        });
    }
    for &i in filter {
        if i >= m {
            return Err(BeraError::UniverseMismatch { left: m, right: i + 1 });
        }
    }
    let mut out: Vec<usize> = anom
        .indices
        .iter()
        .filter(|i| filter.contains(i))
        .copied()
        .collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AfmConfig {
    /// First deep layer (0-based, inclusive) entering the aggregation.
    pub l_mid: usize,
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AfmConfig {
    fn default() -> Self {
        AfmConfig {
            l_mid: 2,
            k: 6,
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterSet {
    pub per_layer: BTreeMap<usize, Vec<usize>>,
    pub per_layer_saliency: BTreeMap<usize, Vec<f64>>,
    pub aggregate: Vec<usize>,
    pub backdoor: Vec<usize>,
}

/// Full filtering pass: saliency, clustering, and selection per deep layer,
/// union, then intersection with the anomaly set. Each layer clusters with
/// its own child stream, so the composition is deterministic regardless of
/// evaluation order.
pub fn run_afm(
    stack: &AttentionStack,
    anom: &AnomalySet,
    cfg: &AfmConfig,
    rng: &RandomStream,
) -> Result<FilterSet> {
    let m = stack.image_cols().len();
    if anom.universe() != m {
        return Err(BeraError::UniverseMismatch {
            left: anom.universe(),
            right: m,
        });
    }
    let lo = cfg.l_mid.max(stack.first_layer());
    let hi = stack.last_layer();
    if lo > hi {
        return Err(BeraError::LayerOutOfRange {
            layer: cfg.l_mid,
            lo: stack.first_layer(),
            hi,
        });
    }
    let mut per_layer = BTreeMap::new();
    let mut per_layer_saliency = BTreeMap::new();
    for l in lo..=hi {
        let abar = mean_attention(stack, l)?;
        let v = token_saliency(&abar, stack.image_cols())?;
        let mut layer_rng = rng.derive_child(l as u64);
        let model = gmm::fit_gmm_1d(
            &v,
            cfg.k,
            &mut layer_rng,
            cfg.tol,
            cfg.max_iter,
            gmm::default_var_floor(&v),
        )?;
        let (_, indices) = select_trigger_cluster(&model, &v)?;
        per_layer.insert(l, indices);
        per_layer_saliency.insert(l, v);
    }
    let aggregate = aggregate_layers(&per_layer)?;
    let backdoor = intersect_backdoor(anom, &aggregate, m)?;
    Ok(FilterSet {
        per_layer,
        per_layer_saliency,
        aggregate,
        backdoor,
    })
}
