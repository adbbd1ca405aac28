//! Pipeline orchestration: calibrate → detect → filter → mask → reconstruct
//! → re-infer over testbed episodes, plus reports, ablations, and sweeps.
//!
//! Every stage draws on a labelled child of the master seed (`LBL_*`), so a
//! stage can be re-run in isolation — or from files on another machine — and
//! still reproduce the artifact bytes of a full run. Detection keys its
//! stream by episode id, which keeps the per-episode fan-out order-free.

use crate::afm::{intersect_backdoor, run_afm, AfmConfig};
use crate::btf::{Archive, Payload};
use crate::config::{AfmMode, CalibrationScope, DecoderMode, FblMode, PipelineConfig};
use crate::error::{BeraError, Result};
use crate::fbl::{select_reference_episodes, AnomalySet, ReferenceDistribution};
use crate::imgio::{write_pgm, write_ppm};
use crate::mae::{self, MaeDims, MaeParams, TrainConfig, TrainState};
use crate::metrics::{
    detection_quality, pct, render_pct, summarize, trade_off, DetectionSummary, EpisodeRow,
    MetricsReport,
};
use crate::par;
use crate::rng::RandomStream;
use crate::tensor::Tensor;
use crate::testbed::{
    build_backdoored_encoder, build_policy_head, encoder_forward, judge, make_dataset,
    policy_forward, BackdooredEncoder, DatasetCfg, EncoderCfg, EncoderOutput, EpisodeRecord,
    Outcome, PolicyHead, TriggerType,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// seed plumbing

/// Stage labels: children of the master seed, one per pipeline stage. Stages
/// that run per task derive a further child keyed by task id.
pub const LBL_ENCODER: u64 = 0;
pub const LBL_DATASET: u64 = 1;
pub const LBL_CALIBRATE: u64 = 2;
pub const LBL_TRAIN: u64 = 3;
pub const LBL_DETECT: u64 = 4;
pub const LBL_SWEEP: u64 = 5;

// ---------------------------------------------------------------------------
// world

/// The deployed system under test: validated config plus the (backdoored)
/// encoder every stage runs through. The clean twin is not part of the world
/// — the defense never sees it.
#[derive(Debug, Clone)]
pub struct World {
    pub cfg: PipelineConfig,
    pub encoder: BackdooredEncoder,
}

impl World {
    /// Construct the encoder from the config seed and keep the clean twin,
    /// for callers that want to measure against it.
    pub fn build_with_twin(cfg: &PipelineConfig) -> Result<(World, BackdooredEncoder)> {
        cfg.validate()?;
        let enc_cfg = EncoderCfg {
            patch: cfg.patch,
            ..EncoderCfg::default()
        };
        let rng = RandomStream::new(cfg.seed).derive_child(LBL_ENCODER);
        let (backdoored, twin) = build_backdoored_encoder(&enc_cfg, &rng)?;
        Ok((
            World {
                cfg: cfg.clone(),
                encoder: backdoored,
            },
            twin,
        ))
    }

    pub fn build(cfg: &PipelineConfig) -> Result<World> {
        Ok(World::build_with_twin(cfg)?.0)
    }

    /// Reuse a saved encoder instead of rebuilding it (bit-identical either
    /// way; loading just skips the construction probes).
    pub fn from_saved(cfg: &PipelineConfig, encoder_path: &Path) -> Result<World> {
        cfg.validate()?;
        let encoder = BackdooredEncoder::load(encoder_path)?;
        if encoder.cfg.patch != cfg.patch {
            return Err(BeraError::Config(format!(
                "saved encoder uses patch {}, config says {}",
                encoder.cfg.patch, cfg.patch
            )));
        }
        Ok(World {
            cfg: cfg.clone(),
            encoder,
        })
    }

    /// Same encoder under different pipeline switches (ablations, test
    /// variants). The patch geometry must match the encoder's.
    pub fn with_config(&self, cfg: PipelineConfig) -> Result<World> {
        cfg.validate()?;
        if cfg.patch != self.encoder.cfg.patch {
            return Err(BeraError::Config(format!(
                "encoder patch {} does not match config patch {}",
                self.encoder.cfg.patch, cfg.patch
            )));
        }
        Ok(World {
            cfg,
            encoder: self.encoder.clone(),
        })
    }

    pub fn head(&self, task_id: usize) -> PolicyHead {
        build_policy_head(&self.encoder, task_id)
    }

    /// Token grid (rows, cols) of the encoder's patch layout.
    pub fn token_grid(&self) -> (usize, usize) {
        let c = self.encoder.cfg.canvas;
        let p = self.encoder.cfg.patch;
        (c.0 / p, c.1 / p)
    }

    fn root(&self) -> RandomStream {
        RandomStream::new(self.cfg.seed)
    }

    /// The detection stream for one episode. The standalone detect command
    /// derives the same stream, so its artifact matches the evaluation's.
    pub fn detect_stream(&self, task_id: usize, episode_id: usize) -> RandomStream {
        self.root()
            .derive_child(LBL_DETECT)
            .derive_child(task_id as u64)
            .derive_child(episode_id as u64)
    }
}

// ---------------------------------------------------------------------------
// stored episodes

/// One generated episode as persisted to disk: the rendered observation plus
/// the labels every later stage needs. The scene parameters themselves are
/// not kept — nothing downstream reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredEpisode {
    pub episode_id: usize,
    pub task_id: usize,
    pub image: Tensor,
    pub joints: Vec<f64>,
    pub ground_truth: Vec<usize>,
    pub boundary: Vec<usize>,
    pub poisoned: bool,
    pub trigger_type: Option<TriggerType>,
    pub outcome: Outcome,
}

impl From<EpisodeRecord> for StoredEpisode {
    fn from(e: EpisodeRecord) -> StoredEpisode {
        StoredEpisode {
            episode_id: e.episode_id,
            task_id: e.task_id,
            image: e.image,
            joints: e.joints,
            ground_truth: e.ground_truth,
            boundary: e.boundary,
            poisoned: e.poisoned,
            trigger_type: e.trigger_type,
            outcome: e.outcome,
        }
    }
}

fn outcome_code(o: Outcome) -> f64 {
    match o {
        Outcome::CleanSuccess => 0.0,
        Outcome::AttackSuccess => 1.0,
        Outcome::Failure => 2.0,
    }
}

fn outcome_from_code(c: f64) -> Result<Outcome> {
    match c as i64 {
        0 => Ok(Outcome::CleanSuccess),
        1 => Ok(Outcome::AttackSuccess),
        2 => Ok(Outcome::Failure),
        other => Err(BeraError::CorruptFile(format!(
            "unknown outcome code {}",
            other
        ))),
    }
}

fn indices_payload(v: &[usize]) -> Payload {
    Payload::F64 {
        shape: vec![v.len()],
        data: v.iter().map(|&i| i as f64).collect(),
    }
}

fn indices_from(p: &Payload, name: &str) -> Result<Vec<usize>> {
    match p {
        Payload::F64 { data, .. } => data
            .iter()
            .map(|&f| {
                if f >= 0.0 && f.fract() == 0.0 {
                    Ok(f as usize)
                } else {
                    Err(BeraError::CorruptFile(format!(
                        "non-index value {} in '{}'",
                        f, name
                    )))
                }
            })
            .collect(),
        Payload::U8 { .. } => Err(BeraError::CorruptFile(format!(
            "'{}' holds bytes, expected f64 indices",
            name
        ))),
    }
}

impl StoredEpisode {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.push_tensor("image", &self.image);
        a.push(
            "joints",
            Payload::F64 {
                shape: vec![self.joints.len()],
                data: self.joints.clone(),
            },
        );
        a.push("ground_truth", indices_payload(&self.ground_truth));
        a.push("boundary", indices_payload(&self.boundary));
        let trig = match self.trigger_type {
            None => -1.0,
            Some(t) => TriggerType::ALL.iter().position(|&x| x == t).unwrap_or(0) as f64,
        };
        a.push(
            "meta",
            Payload::F64 {
                shape: vec![5],
                data: vec![
                    self.episode_id as f64,
                    self.task_id as f64,
                    if self.poisoned { 1.0 } else { 0.0 },
                    trig,
                    outcome_code(self.outcome),
                ],
            },
        );
        a
    }

    pub fn from_archive(a: &Archive) -> Result<StoredEpisode> {
        let image = a.require("image")?.clone().into_tensor()?;
        let joints = match a.require("joints")? {
            Payload::F64 { data, .. } => data.clone(),
            Payload::U8 { .. } => {
                return Err(BeraError::CorruptFile("joints hold bytes".into()));
            }
        };
        let ground_truth = indices_from(a.require("ground_truth")?, "ground_truth")?;
        let boundary = indices_from(a.require("boundary")?, "boundary")?;
        let meta = match a.require("meta")? {
            Payload::F64 { data, .. } if data.len() == 5 => data.clone(),
            _ => return Err(BeraError::CorruptFile("episode meta malformed".into())),
        };
        let trigger_type = if meta[3] < 0.0 {
            None
        } else {
            let i = meta[3] as usize;
            if i >= TriggerType::ALL.len() {
                return Err(BeraError::CorruptFile(format!(
                    "unknown trigger code {}",
                    meta[3]
                )));
            }
            Some(TriggerType::ALL[i])
        };
        Ok(StoredEpisode {
            episode_id: meta[0] as usize,
            task_id: meta[1] as usize,
            image,
            joints,
            ground_truth,
            boundary,
            poisoned: meta[2] != 0.0,
            trigger_type,
            outcome: outcome_from_code(meta[4])?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<StoredEpisode> {
        StoredEpisode::from_archive(&Archive::load(path)?)
    }
}

// ---------------------------------------------------------------------------
// generation

/// Generate one task's episode set through the deployed encoder.
pub fn generate_task(world: &World, task_id: usize) -> Result<Vec<StoredEpisode>> {
    let head = world.head(task_id);
    let ds = DatasetCfg {
        n: world.cfg.episodes,
        poison_rate: world.cfg.poison_rate,
        mix: world.cfg.trigger_types.clone(),
        fraction: world.cfg.trigger_fraction,
        task_id,
        theta: world.cfg.theta,
    };
    let rng = world
        .root()
        .derive_child(LBL_DATASET)
        .derive_child(task_id as u64);
    let eps = make_dataset(&world.encoder, &head, &ds, &rng)?;
    Ok(eps.into_iter().map(StoredEpisode::from).collect())
}

/// One record per line, tab-separated; `-` stands for "none". The `target`
/// column is the label the generator aimed the episode at.
pub fn manifest_tsv(episodes: &[StoredEpisode]) -> String {
    let mut out =
        String::from("episode_id\ttask_id\tpoisoned\ttrigger\ttarget\toutcome\tground_truth\n");
    for ep in episodes {
        let trigger = ep.trigger_type.map(|t| t.as_str()).unwrap_or("-");
        let gt = if ep.ground_truth.is_empty() {
            "-".to_string()
        } else {
            ep.ground_truth
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            ep.episode_id,
            ep.task_id,
            ep.poisoned as u8,
            trigger,
            if ep.poisoned { "hazard" } else { "clean" },
            ep.outcome.as_str(),
            gt,
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// calibration

fn vstack(blocks: &[Tensor]) -> Result<Tensor> {
    if blocks.is_empty() {
        return Err(BeraError::EmptyInput("no token blocks to stack"));
    }
    let d = blocks[0].shape()[1];
    let mut rows = 0;
    let mut data = Vec::new();
    for b in blocks {
        if b.ndim() != 2 || b.shape()[1] != d {
            return Err(BeraError::ShapeMismatch(format!(
                "cannot stack {:?} under width {}",
                b.shape(),
                d
            )));
        }
        rows += b.shape()[0];
        data.extend_from_slice(b.data());
    }
    Tensor::new(vec![rows, d], data)
}

/// Pick the reference episodes (clean successes only) and stack their
/// final-layer tokens through the deployed encoder.
fn reference_token_stack(
    world: &World,
    episodes: &[StoredEpisode],
    rng: &mut RandomStream,
) -> Result<Tensor> {
    let succ: Vec<usize> = episodes
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.poisoned && e.outcome == Outcome::CleanSuccess)
        .map(|(i, _)| i)
        .collect();
    if succ.len() < 5 {
        return Err(BeraError::TooFewCleanEpisodes {
            need: 5,
            got: succ.len(),
        });
    }
    let picks = select_reference_episodes(&succ, world.cfg.reference_fraction, rng)?;
    let blocks: Vec<Result<Tensor>> = par::map_indexed(picks.len(), |i| {
        Ok(encoder_forward(&world.encoder, &episodes[picks[i]].image)?.tokens)
    });
    let blocks = blocks.into_iter().collect::<Result<Vec<_>>>()?;
    vstack(&blocks)
}

fn fit_reference(
    world: &World,
    episodes: &[StoredEpisode],
    rng: &mut RandomStream,
) -> Result<ReferenceDistribution> {
    let stack = reference_token_stack(world, episodes, rng)?;
    ReferenceDistribution::fit(
        &stack,
        world.cfg.epsilon.to_spec(),
        world.cfg.alpha,
        world.cfg.threshold_mode.to_spec(),
    )
}

/// Fit the clean reference for one task on its own child stream.
pub fn calibrate_task(
    world: &World,
    episodes: &[StoredEpisode],
    task_id: usize,
) -> Result<ReferenceDistribution> {
    let mut rng = world
        .root()
        .derive_child(LBL_CALIBRATE)
        .derive_child(task_id as u64);
    fit_reference(world, episodes, &mut rng)
}

/// Calibrate every task. Per-task scope fits one reference per task; pooled
/// scope stacks every task's selected tokens into a single fit that is then
/// shared by all tasks.
pub fn calibrate_all(
    world: &World,
    per_task: &BTreeMap<usize, Vec<StoredEpisode>>,
) -> Result<BTreeMap<usize, ReferenceDistribution>> {
    if per_task.is_empty() {
        return Err(BeraError::EmptyInput("no tasks to calibrate"));
    }
    let mut out = BTreeMap::new();
    match world.cfg.calibration_scope {
        CalibrationScope::PerTask => {
            for (&t, eps) in per_task {
                out.insert(t, calibrate_task(world, eps, t)?);
            }
        }
        CalibrationScope::Pooled => {
            let mut blocks = Vec::new();
            for (&t, eps) in per_task {
                let mut rng = world
                    .root()
                    .derive_child(LBL_CALIBRATE)
                    .derive_child(t as u64);
                blocks.push(reference_token_stack(world, eps, &mut rng)?);
            }
            let reference = ReferenceDistribution::fit(
                &vstack(&blocks)?,
                world.cfg.epsilon.to_spec(),
                world.cfg.alpha,
                world.cfg.threshold_mode.to_spec(),
            )?;
            for &t in per_task.keys() {
                out.insert(t, reference.clone());
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// decoder training

/// Train the reconstructor on the task's clean images, conditioning on the
/// deployed encoder's pooled embeddings (identical to the clean twin's on
/// clean inputs).
pub fn train_task(
    world: &World,
    episodes: &[StoredEpisode],
    task_id: usize,
) -> Result<TrainState> {
    let clean: Vec<&StoredEpisode> = episodes.iter().filter(|e| !e.poisoned).collect();
    if clean.is_empty() {
        return Err(BeraError::EmptyInput("no clean episodes to train on"));
    }
    let embeddings: Vec<Result<Vec<f64>>> = par::map_indexed(clean.len(), |i| {
        Ok(encoder_forward(&world.encoder, &clean[i].image)?.e)
    });
    let embeddings = embeddings.into_iter().collect::<Result<Vec<_>>>()?;
    let images: Vec<Tensor> = clean.iter().map(|e| e.image.clone()).collect();
    let (rows, cols) = world.token_grid();
    let dims = MaeDims {
        p: world.cfg.patch,
        d_p: world.cfg.decoder_dim,
        d_e: world.encoder.dim(),
        rows,
        cols,
    };
    let rng = world
        .root()
        .derive_child(LBL_TRAIN)
        .derive_child(task_id as u64);
    let mut init_rng = rng.derive_child(0);
    let init = MaeParams::init(dims, &mut init_rng);
    let tc = TrainConfig {
        steps: world.cfg.train_steps,
        batch: world.cfg.train_batch,
        lr: world.cfg.learning_rate,
        mask_lo: world.cfg.mask_lo,
        mask_hi: world.cfg.mask_hi,
        loss_mode: world.cfg.loss_mode.to_mode(),
        ..TrainConfig::default()
    };
    mae::train_decoder(&images, &embeddings, init, &tc, &rng.derive_child(1))
}

pub fn loss_csv(state: &TrainState) -> String {
    let mut out = String::from("step,mask_ratio,loss\n");
    for r in &state.loss_history {
        out.push_str(&format!("{},{},{}\n", r.step, r.mask_ratio, r.loss));
    }
    out
}

// ---------------------------------------------------------------------------
// detection and purification

/// Detection outcome for one frame. `scores` always holds the true
/// Mahalanobis scores (they feed the heatmap) even when the anomaly stage is
/// ablated to a random draw.
#[derive(Debug, Clone)]
pub struct Detection {
    pub anomalies: AnomalySet,
    pub per_layer: BTreeMap<usize, Vec<usize>>,
    pub per_layer_saliency: BTreeMap<usize, Vec<f64>>,
    pub filter: Vec<usize>,
    pub backdoor: Vec<usize>,
}

/// Uniform draw of 10% of the token universe (the trigger's default share of
/// the view), the stand-in both detection stages fall back to when ablated.
fn random_tenth(m: usize, rng: &mut RandomStream) -> Vec<usize> {
    let k = ((0.10 * m as f64).round() as usize).clamp(1, m);
    let mut v = rng.sample_without_replacement(m, k);
    v.sort_unstable();
    v
}

/// Compose the two detection stages under the configured ablation switches.
/// Child streams: 0 clustering, 1 anomaly-stage draw, 2 filter-stage draw —
/// so the full pipeline and its ablations share clustering streams and stay
/// pairwise comparable.
pub fn detect_frame(
    cfg: &PipelineConfig,
    reference: &ReferenceDistribution,
    out: &EncoderOutput,
    rng: &RandomStream,
) -> Result<Detection> {
    let m = out.stack.image_cols().len();
    let anomalies = match cfg.ablation_fbl {
        FblMode::On => reference.flag_anomalies(&out.tokens)?,
        FblMode::RandomTenth => {
            let scores = reference.scores(&out.tokens)?;
            AnomalySet {
                indices: random_tenth(m, &mut rng.derive_child(1)),
                scores,
            }
        }
    };
    match cfg.ablation_afm {
        AfmMode::On => {
            let afm_cfg = AfmConfig {
                l_mid: cfg.l_mid,
                k: cfg.clusters,
                tol: cfg.em_tol,
                max_iter: cfg.em_max_iter,
            };
            let fs = run_afm(&out.stack, &anomalies, &afm_cfg, &rng.derive_child(0))?;
            Ok(Detection {
                anomalies,
                per_layer: fs.per_layer,
                per_layer_saliency: fs.per_layer_saliency,
                filter: fs.aggregate,
                backdoor: fs.backdoor,
            })
        }
        AfmMode::Off => {
            let filter = random_tenth(m, &mut rng.derive_child(2));
            let backdoor = intersect_backdoor(&anomalies, &filter, m)?;
            Ok(Detection {
                anomalies,
                per_layer: BTreeMap::new(),
                per_layer_saliency: BTreeMap::new(),
                filter,
                backdoor,
            })
        }
    }
}

/// Blank the given patches. Like reconstruction, an empty patch list passes
/// the input through untouched.
pub fn zero_fill(image: &Tensor, patches: &[usize], p: usize) -> Result<Tensor> {
    if image.ndim() != 3 || image.shape()[2] != 3 {
        return Err(BeraError::ShapeMismatch(format!(
            "zero-fill wants H x W x 3, got {:?}",
            image.shape()
        )));
    }
    if patches.is_empty() {
        return Ok(image.clone());
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h % p != 0 || w % p != 0 {
        return Err(BeraError::IndivisibleDimensions { h, w, p });
    }
    let (rows, cols) = (h / p, w / p);
    let mut out = image.clone();
    for &idx in patches {
        if idx >= rows * cols {
            return Err(BeraError::IndexOutOfRange {
                index: idx,
                size: rows * cols,
            });
        }
        let (py, px) = ((idx / cols) * p, (idx % cols) * p);
        for y in 0..p {
            for x in 0..p {
                for c in 0..3 {
                    out.set3(py + y, px + x, c, 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Erase the detected region with the configured decoder variant.
pub fn purify_frame(
    mode: DecoderMode,
    params: &MaeParams,
    e: &[f64],
    image: &Tensor,
    backdoor: &[usize],
    p: usize,
) -> Result<Tensor> {
    match mode {
        DecoderMode::On => mae::purify(params, e, image, backdoor),
        DecoderMode::ZeroFill => zero_fill(image, backdoor, p),
    }
}

// ---------------------------------------------------------------------------
// residual measurement

/// Normalized cross-correlation between two same-shape images restricted to
/// the pixels of the given patches. Zero-variance inputs return 0 by the
/// same convention as the rectangular variant.
pub fn region_correlation(
    image: &Tensor,
    reference: &Tensor,
    patches: &[usize],
    p: usize,
) -> Result<f64> {
    if image.shape() != reference.shape() {
        return Err(BeraError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            image.shape(),
            reference.shape()
        )));
    }
    if image.ndim() != 3 || image.shape()[2] != 3 {
        return Err(BeraError::ShapeMismatch(format!(
            "correlation wants H x W x 3, got {:?}",
            image.shape()
        )));
    }
    if patches.is_empty() {
        return Err(BeraError::EmptyInput("empty correlation region"));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h % p != 0 || w % p != 0 {
        return Err(BeraError::IndivisibleDimensions { h, w, p });
    }
    let cols = w / p;
    let rows = h / p;
    let mut pix = Vec::with_capacity(patches.len() * p * p * 3);
    for &idx in patches {
        if idx >= rows * cols {
            return Err(BeraError::IndexOutOfRange {
                index: idx,
                size: rows * cols,
            });
        }
        let (py, px) = ((idx / cols) * p, (idx % cols) * p);
        for y in 0..p {
            for x in 0..p {
                for c in 0..3 {
                    pix.push((image.at3(py + y, px + x, c), reference.at3(py + y, px + x, c)));
                }
            }
        }
    }
    let n = pix.len() as f64;
    let (sa, sb) = pix
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    let (ma, mb) = (sa / n, sb / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for &(x, y) in &pix {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= 1e-18 || vb <= 1e-18 {
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

// ---------------------------------------------------------------------------
// evaluation

/// Everything reproducibility depends on: version stamp, the exact config
/// text, and the metrics body with raw full-precision values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifact {
    pub version: String,
    pub task_id: usize,
    pub config: String,
    pub report: MetricsReport,
}

/// Per-episode by-products of an evaluation, kept for artifact emission.
#[derive(Debug, Clone)]
pub struct EpisodeArtifact {
    pub episode_id: usize,
    pub backdoor: Vec<usize>,
    pub purified: Tensor,
}

#[derive(Debug)]
pub struct EvaluationOutput {
    pub artifact: RunArtifact,
    pub episodes: Vec<EpisodeArtifact>,
}

struct EvalUnit {
    row: EpisodeRow,
    pre: Outcome,
    post: Outcome,
    poisoned: bool,
    nonempty_detection: bool,
    precision: f64,
    recall: f64,
    res_pre: Option<f64>,
    res_post: Option<f64>,
    artifact: EpisodeArtifact,
}

fn evaluate_episode(
    world: &World,
    head: &PolicyHead,
    reference: &ReferenceDistribution,
    decoder: &MaeParams,
    ep: &StoredEpisode,
) -> Result<EvalUnit> {
    let out = encoder_forward(&world.encoder, &ep.image)?;
    let rng = world.detect_stream(ep.task_id, ep.episode_id);
    let det = detect_frame(&world.cfg, reference, &out, &rng)?;
    // Empty detections skip purification entirely, so the with-defense pass
    // reuses the recorded outcome bit for bit.
    let (purified, post) = if det.backdoor.is_empty() {
        (ep.image.clone(), ep.outcome)
    } else {
        let purified = purify_frame(
            world.cfg.ablation_decoder,
            decoder,
            &out.e,
            &ep.image,
            &det.backdoor,
            world.cfg.patch,
        )?;
        let re = encoder_forward(&world.encoder, &purified)?;
        let joints = policy_forward(head, &re.e)?;
        let post = judge(&joints, head, world.cfg.theta)?;
        (purified, post)
    };
    let dq = detection_quality(&det.backdoor, &ep.ground_truth, &ep.boundary);
    let (res_pre, res_post) = if ep.poisoned && !ep.ground_truth.is_empty() {
        (
            Some(region_correlation(
                &ep.image,
                &ep.image,
                &ep.ground_truth,
                world.cfg.patch,
            )?),
            Some(region_correlation(
                &purified,
                &ep.image,
                &ep.ground_truth,
                world.cfg.patch,
            )?),
        )
    } else {
        (None, None)
    };
    let row = EpisodeRow {
        episode_id: ep.episode_id,
        poisoned: ep.poisoned,
        trigger_type: ep.trigger_type.map(|t| t.as_str().to_string()),
        outcome_no_defense: ep.outcome.as_str().to_string(),
        outcome_with_defense: post.as_str().to_string(),
        flagged_tokens: det.backdoor.len(),
        detection_precision: dq.precision,
        detection_recall: dq.recall,
        residual_no_defense: res_pre,
        residual_with_defense: res_post,
    };
    Ok(EvalUnit {
        row,
        pre: ep.outcome,
        post,
        poisoned: ep.poisoned,
        nonempty_detection: !det.backdoor.is_empty(),
        precision: dq.precision,
        recall: dq.recall,
        res_pre,
        res_post,
        artifact: EpisodeArtifact {
            episode_id: ep.episode_id,
            backdoor: det.backdoor,
            purified,
        },
    })
}

/// Full defense pass over one task: detect, purify, re-infer, and judge each
/// episode, then aggregate the headline rates. Splits that come up empty
/// score vacuously (no clean episodes → CP 100, no poisoned → ASR 0, RP
/// 100), which only arises on degenerate configs.
pub fn evaluate_task(
    world: &World,
    episodes: &[StoredEpisode],
    reference: &ReferenceDistribution,
    decoder: &MaeParams,
    task_id: usize,
) -> Result<EvaluationOutput> {
    if episodes.is_empty() {
        return Err(BeraError::EmptyInput("no episodes to evaluate"));
    }
    let head = world.head(task_id);
    let units: Vec<Result<EvalUnit>> = par::map_indexed(episodes.len(), |i| {
        evaluate_episode(world, &head, reference, decoder, &episodes[i])
    });
    let units = units.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(units.len());
    let mut episode_artifacts = Vec::with_capacity(units.len());
    let (mut n_clean, mut n_poison) = (0usize, 0usize);
    let (mut clean_pre, mut clean_post) = (0usize, 0usize);
    let (mut atk_pre, mut atk_post) = (0usize, 0usize);
    let (mut recovered, mut failed_post) = (0usize, 0usize);
    let mut clean_false = 0usize;
    let (mut precisions, mut recalls) = (Vec::new(), Vec::new());
    let (mut res_pre, mut res_post) = (Vec::new(), Vec::new());
    for u in units {
        if u.poisoned {
            n_poison += 1;
            atk_pre += (u.pre == Outcome::AttackSuccess) as usize;
            atk_post += (u.post == Outcome::AttackSuccess) as usize;
            recovered += (u.post == Outcome::CleanSuccess) as usize;
            failed_post += (u.post == Outcome::Failure) as usize;
            precisions.push(u.precision);
            recalls.push(u.recall);
            if let (Some(a), Some(b)) = (u.res_pre, u.res_post) {
                res_pre.push(a);
                res_post.push(b);
            }
        } else {
            n_clean += 1;
            clean_pre += (u.pre == Outcome::CleanSuccess) as usize;
            clean_post += (u.post == Outcome::CleanSuccess) as usize;
            clean_false += u.nonempty_detection as usize;
        }
        rows.push(u.row);
        episode_artifacts.push(u.artifact);
    }

    let cp_no_defense = pct(clean_pre, n_clean).unwrap_or(100.0);
    let cp = pct(clean_post, n_clean).unwrap_or(100.0);
    let asr_no_defense = pct(atk_pre, n_poison).unwrap_or(0.0);
    let asr = pct(atk_post, n_poison).unwrap_or(0.0);
    let rp = pct(recovered, n_poison).unwrap_or(100.0);
    let poisoned_failure_rate = pct(failed_post, n_poison).unwrap_or(0.0);
    let mean = |v: &[f64], vac: f64| {
        if v.is_empty() {
            vac
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let report = MetricsReport {
        episodes_total: episodes.len(),
        episodes_poisoned: n_poison,
        cp_no_defense,
        cp,
        asr_no_defense,
        asr,
        tp: trade_off(cp, asr),
        rp,
        poisoned_failure_rate,
        detection: DetectionSummary {
            mean_precision: mean(&precisions, 1.0),
            mean_recall: mean(&recalls, 1.0),
            clean_false_detection_rate: if n_clean == 0 {
                0.0
            } else {
                clean_false as f64 / n_clean as f64
            },
        },
        residual_no_defense: summarize(&res_pre),
        residual_with_defense: summarize(&res_post),
        rows,
    };
    report.validate()?;
    Ok(EvaluationOutput {
        artifact: RunArtifact {
            version: env!("CARGO_PKG_VERSION").to_string(),
            task_id,
            config: world.cfg.to_string(),
            report,
        },
        episodes: episode_artifacts,
    })
}

pub fn report_json(artifact: &RunArtifact) -> Result<String> {
    let mut s = serde_json::to_string_pretty(artifact)
        .map_err(|e| BeraError::DomainError(format!("report serialization: {}", e)))?;
    s.push('\n');
    Ok(s)
}

// ---------------------------------------------------------------------------
// ablations

/// The four switch combinations, ablated variants first, full pipeline last.
pub const ABLATION_VARIANTS: [(&str, FblMode, AfmMode, DecoderMode); 4] = [
    (
        "fbl=random-10%",
        FblMode::RandomTenth,
        AfmMode::On,
        DecoderMode::On,
    ),
    ("afm=off", FblMode::On, AfmMode::Off, DecoderMode::On),
    (
        "decoder=zero-fill",
        FblMode::On,
        AfmMode::On,
        DecoderMode::ZeroFill,
    ),
    ("full", FblMode::On, AfmMode::On, DecoderMode::On),
];

/// Evaluate the same task under each switch combination. Dataset, reference,
/// decoder, and every random stream are shared across variants, so the rows
/// differ only through the switches themselves.
pub fn ablate_task(
    world: &World,
    episodes: &[StoredEpisode],
    reference: &ReferenceDistribution,
    decoder: &MaeParams,
    task_id: usize,
) -> Result<Vec<(String, MetricsReport)>> {
    let mut out = Vec::with_capacity(ABLATION_VARIANTS.len());
    for (name, fbl, afm, dec) in ABLATION_VARIANTS {
        let mut cfg = world.cfg.clone();
        cfg.ablation_fbl = fbl;
        cfg.ablation_afm = afm;
        cfg.ablation_decoder = dec;
        let w = world.with_config(cfg)?;
        let ev = evaluate_task(&w, episodes, reference, decoder, task_id)?;
        out.push((name.to_string(), ev.artifact.report));
    }
    Ok(out)
}

pub fn ablation_csv(task_id: usize, rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("task,variant,cp,asr,tp,rp\n");
    for (name, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            task_id,
            name,
            render_pct(r.cp),
            render_pct(r.asr),
            render_pct(r.tp),
            render_pct(r.rp),
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// sweeps

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub task_id: usize,
    pub fraction: f64,
    pub rate: f64,
    pub trigger: TriggerType,
    pub report: MetricsReport,
}

/// Evaluate the full pipeline over the fraction x rate x trigger grid. Each
/// cell regenerates and recalibrates on its own child stream; the decoder is
/// shared, since it trains on clean images the grid does not vary.
pub fn sweep(world: &World, decoder: &MaeParams, task_id: usize) -> Result<Vec<SweepCell>> {
    let cfg = &world.cfg;
    if cfg.sweep_fractions.is_empty() || cfg.sweep_rates.is_empty() || cfg.sweep_types.is_empty() {
        return Err(BeraError::EmptyInput("empty sweep grid"));
    }
    let head = world.head(task_id);
    let mut cells = Vec::new();
    for (fi, &fraction) in cfg.sweep_fractions.iter().enumerate() {
        for (ri, &rate) in cfg.sweep_rates.iter().enumerate() {
            for (ti, &trigger) in cfg.sweep_types.iter().enumerate() {
                let cell_rng = world
                    .root()
                    .derive_child(LBL_SWEEP)
                    .derive_child(fi as u64)
                    .derive_child(ri as u64)
                    .derive_child(ti as u64);
                let ds = DatasetCfg {
                    n: cfg.episodes,
                    poison_rate: rate,
                    mix: vec![trigger],
                    fraction,
                    task_id,
                    theta: cfg.theta,
                };
                let episodes: Vec<StoredEpisode> =
                    make_dataset(&world.encoder, &head, &ds, &cell_rng.derive_child(0))?
                        .into_iter()
                        .map(StoredEpisode::from)
                        .collect();
                let reference = fit_reference(world, &episodes, &mut cell_rng.derive_child(1))?;
                let ev = evaluate_task(world, &episodes, &reference, decoder, task_id)?;
                cells.push(SweepCell {
                    task_id,
                    fraction,
                    rate,
                    trigger,
                    report: ev.artifact.report,
                });
            }
        }
    }
    Ok(cells)
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out =
        String::from("task,fraction,rate,trigger,cp_no_defense,cp,asr_no_defense,asr,tp,rp\n");
    for c in cells {
        let r = &c.report;
        out.push_str(&format!(
            "{},{:.2},{:.2},{},{},{},{},{},{},{}\n",
            c.task_id,
            c.fraction,
            c.rate,
            c.trigger.as_str(),
            render_pct(r.cp_no_defense),
            render_pct(r.cp),
            render_pct(r.asr_no_defense),
            render_pct(r.asr),
            render_pct(r.tp),
            render_pct(r.rp),
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// artifact files

pub fn task_dir(root: &Path, task_id: usize) -> PathBuf {
    root.join(format!("task{}", task_id))
}

pub fn episode_filename(episode_id: usize) -> String {
    format!("ep_{:04}.btfa", episode_id)
}

/// Lay a generated task out on disk: archives, inspection PPMs, manifest.
pub fn write_episodes(task_root: &Path, episodes: &[StoredEpisode]) -> Result<()> {
    let ep_dir = task_root.join("episodes");
    let img_dir = task_root.join("images");
    fs::create_dir_all(&ep_dir)?;
    fs::create_dir_all(&img_dir)?;
    for ep in episodes {
        ep.save(&ep_dir.join(episode_filename(ep.episode_id)))?;
        write_ppm(
            &img_dir.join(format!("ep_{:04}.ppm", ep.episode_id)),
            &ep.image,
        )?;
    }
    fs::write(task_root.join("manifest.tsv"), manifest_tsv(episodes))?;
    Ok(())
}

/// Load a task's episodes back, ordered by file name (zero-padded ids).
pub fn load_episodes(task_root: &Path) -> Result<Vec<StoredEpisode>> {
    let ep_dir = task_root.join("episodes");
    let mut names: Vec<String> = fs::read_dir(&ep_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("ep_") && n.ends_with(".btfa"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(BeraError::EmptyInput("no stored episodes"));
    }
    names
        .iter()
        .map(|n| StoredEpisode::load(&ep_dir.join(n)))
        .collect()
}

/// Emit an evaluation: the report plus one token-mask PGM and one purified
/// PPM per episode. Re-running with the same config and seed reproduces
/// every byte.
pub fn write_evaluation(task_root: &Path, world: &World, ev: &EvaluationOutput) -> Result<()> {
    let mask_dir = task_root.join("masks");
    let pure_dir = task_root.join("purified");
    fs::create_dir_all(&mask_dir)?;
    fs::create_dir_all(&pure_dir)?;
    fs::write(task_root.join("report.json"), report_json(&ev.artifact)?)?;
    let (rows, cols) = world.token_grid();
    for ep in &ev.episodes {
        let mut grid = vec![0.0; rows * cols];
        for &i in &ep.backdoor {
            if i >= grid.len() {
                return Err(BeraError::IndexOutOfRange {
                    index: i,
                    size: grid.len(),
                });
            }
            grid[i] = 1.0;
        }
        write_pgm(
            &mask_dir.join(format!("ep_{:04}.pgm", ep.episode_id)),
            &grid,
            rows,
            cols,
        )?;
        write_ppm(
            &pure_dir.join(format!("ep_{:04}.ppm", ep.episode_id)),
            &ep.purified,
        )?;
    }
    Ok(())
}

/// Standalone detection artifact for one frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub episode_id: usize,
    pub tau: f64,
    pub anomalies: Vec<usize>,
    pub scores: Vec<f64>,
    pub per_layer: BTreeMap<usize, Vec<usize>>,
    pub filter: Vec<usize>,
    pub backdoor: Vec<usize>,
}

/// Write the detection JSON plus score and per-layer saliency heatmaps, all
/// at token resolution.
pub fn write_detection(
    dir: &Path,
    report: &DetectionReport,
    saliency: &BTreeMap<usize, Vec<f64>>,
    grid: (usize, usize),
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let id = report.episode_id;
    let mut body = serde_json::to_string_pretty(report)
        .map_err(|e| BeraError::DomainError(format!("detection serialization: {}", e)))?;
    body.push('\n');
    fs::write(dir.join(format!("det_ep_{:04}.json", id)), body)?;
    write_pgm(
        &dir.join(format!("heat_score_ep_{:04}.pgm", id)),
        &report.scores,
        grid.0,
        grid.1,
    )?;
    for (l, v) in saliency {
        write_pgm(
            &dir.join(format!("heat_sal_l{}_ep_{:04}.pgm", l, id)),
            v,
            grid.0,
            grid.1,
        )?;
    }
    Ok(())
}
