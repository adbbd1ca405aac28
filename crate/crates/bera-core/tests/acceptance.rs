//! Acceptance gate: one numbered test per criterion, so the harness prints
//! one pass/fail line for each. Oracles (dense inverses, bisection,
//! k-means, finite differences) are local to this file and deliberately
//! independent of the library's own numerics.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use bera_core::afm::mean_attention;
use bera_core::chi2::{chi2_cdf, chi2_quantile};
use bera_core::config::PipelineConfig;
use bera_core::fbl::{EpsilonSpec, ReferenceDistribution, ThresholdSpec};
use bera_core::gmm::{default_var_floor, fit_gmm_1d};
use bera_core::mae::{loss_and_gradients, make_backdoor_mask, LossMode, MaeDims, MaeParams};
use bera_core::metrics::trade_off;
use bera_core::pipeline::{self, RunArtifact, World};
use bera_core::rng::RandomStream;
use bera_core::tensor::Tensor;
use bera_core::testbed::{encoder_forward, BackdooredEncoder};

// ---------------------------------------------------------------------------
// shared fixtures (default config, built once)

struct Fix {
    world: World,
    twin: BackdooredEncoder,
    episodes: Vec<pipeline::StoredEpisode>,
    reference: ReferenceDistribution,
    decoder: bera_core::mae::MaeParams,
    report: bera_core::metrics::MetricsReport,
}

fn fixture() -> &'static Fix {
    static FIX: OnceLock<Fix> = OnceLock::new();
    FIX.get_or_init(|| {
        let cfg = PipelineConfig::default();
        let (world, twin) = World::build_with_twin(&cfg).expect("world");
        let episodes = pipeline::generate_task(&world, 0).expect("episodes");
        let reference = pipeline::calibrate_task(&world, &episodes, 0).expect("reference");
        let decoder = pipeline::train_task(&world, &episodes, 0)
            .expect("decoder")
            .params;
        let report = pipeline::evaluate_task(&world, &episodes, &reference, &decoder, 0)
            .expect("evaluation")
            .artifact
            .report;
        Fix {
            world,
            twin,
            episodes,
            reference,
            decoder,
            report,
        }
    })
}

/// Exactly `keep` triggered frames: generate at poison rate 0.8 and drop the
/// clean episodes.
fn triggered_episodes(world: &World, keep: usize) -> Vec<pipeline::StoredEpisode> {
    let mut cfg = world.cfg.clone();
    cfg.episodes = keep * 5 / 4;
    cfg.poison_rate = 0.8;
    let w = world.with_config(cfg).expect("triggered world");
    let eps: Vec<_> = pipeline::generate_task(&w, 0)
        .expect("triggered episodes")
        .into_iter()
        .filter(|e| e.poisoned)
        .collect();
    assert_eq!(eps.len(), keep);
    eps
}

/// 100 triggered frames evaluated under the default reference and decoder.
fn triggered_eval() -> &'static RunArtifact {
    static T: OnceLock<RunArtifact> = OnceLock::new();
    T.get_or_init(|| {
        let f = fixture();
        let eps = triggered_episodes(&f.world, 100);
        pipeline::evaluate_task(&f.world, &eps, &f.reference, &f.decoder, 0)
            .expect("triggered evaluation")
            .artifact
    })
}

// ---------------------------------------------------------------------------
// local oracles

/// Gauss–Jordan inverse with partial pivoting; fine at d <= 4.
fn dense_inverse(a: &[f64], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * 2 * d];
    for r in 0..d {
        for c in 0..d {
            m[r * 2 * d + c] = a[r * d + c];
        }
        m[r * 2 * d + d + r] = 1.0;
    }
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| {
                m[i * 2 * d + col]
                    .abs()
                    .total_cmp(&m[j * 2 * d + col].abs())
            })
            .unwrap();
        if pivot != col {
            for c in 0..2 * d {
                m.swap(col * 2 * d + c, pivot * 2 * d + c);
            }
        }
        let p = m[col * 2 * d + col];
        assert!(p.abs() > 1e-12, "singular oracle matrix");
        for c in 0..2 * d {
            m[col * 2 * d + c] /= p;
        }
        for r in 0..d {
            if r == col {
                continue;
            }
            let f = m[r * 2 * d + col];
            for c in 0..2 * d {
                m[r * 2 * d + c] -= f * m[col * 2 * d + c];
            }
        }
    }
    let mut inv = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            inv[r * d + c] = m[r * 2 * d + d + c];
        }
    }
    inv
}

/// One Lloyd run with min/max init; the standard 1-D two-means answer.
fn kmeans_two(values: &[f64]) -> (f64, f64) {
    let mut c0 = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut c1 = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for &v in values {
            if (v - c0).abs() <= (v - c1).abs() {
                s0 += v;
                n0 += 1;
            } else {
                s1 += v;
                n1 += 1;
            }
        }
        let (m0, m1) = (s0 / n0.max(1) as f64, s1 / n1.max(1) as f64);
        if (m0 - c0).abs() < 1e-12 && (m1 - c1).abs() < 1e-12 {
            break;
        }
        c0 = m0;
        c1 = m1;
    }
    (c0.min(c1), c0.max(c1))
}

fn gaussian_rows(
    n: usize,
    d: usize,
    mu: &[f64],
    a: &[f64],
    rng: &mut RandomStream,
) -> Vec<f64> {
    let mut out = vec![0.0; n * d];
    let mut z = vec![0.0; d];
    for row in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.next_normal();
        }
        for i in 0..d {
            let mut v = mu[i];
            for j in 0..d {
                v += a[i * d + j] * z[j];
            }
            out[row * d + i] = v;
        }
    }
    out
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

// ---------------------------------------------------------------------------
// criteria

#[test]
fn criterion_01_trade_off_reproduces_published_tables() {
    let started = Instant::now();
    // (CP, ASR, printed TP) for all eight rows of each method.
    let rows: [(f64, f64, f64); 16] = [
        (90.00, 6.67, 91.67),
        (73.33, 3.33, 85.00),
        (70.00, 3.33, 83.34),
        (86.67, 6.67, 90.00),
        (90.00, 3.33, 93.34),
        (86.67, 10.00, 88.34),
        (76.67, 13.33, 81.67),
        (90.00, 6.67, 91.67),
        (86.67, 63.33, 61.67),
        (70.00, 46.67, 61.67),
        (66.67, 43.33, 61.67),
        (83.33, 43.33, 70.00),
        (86.67, 60.00, 63.33),
        (80.00, 53.33, 63.33),
        (70.00, 23.33, 73.33),
        (86.67, 20.00, 83.33),
    ];
    for (cp, asr, tp) in rows {
        let got = trade_off(cp, asr);
        assert!(
            (got - tp).abs() <= 0.01,
            "trade_off({}, {}) = {} but table prints {}",
            cp,
            asr,
            got,
            tp
        );
    }
    assert!(started.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn criterion_02_flag_rate_calibrated_on_held_out_gaussian() {
    let started = Instant::now();
    let d = 16;
    let mut rng = RandomStream::new(0xACC2);
    let mu: Vec<f64> = (0..d).map(|i| 0.3 * i as f64 - 2.0).collect();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = 0.3 * rng.next_normal() + if i == j { 1.0 } else { 0.0 };
        }
    }
    let fit_rows = gaussian_rows(2000, d, &mu, &a, &mut rng);
    let fit = Tensor::new(vec![2000, d], fit_rows).unwrap();
    let reference =
        ReferenceDistribution::fit(&fit, EpsilonSpec::Auto, 0.05, ThresholdSpec::Analytic)
            .unwrap();
    let held_rows = gaussian_rows(10_000, d, &mu, &a, &mut rng);
    let held = Tensor::new(vec![10_000, d], held_rows).unwrap();
    let flagged = reference.flag_anomalies(&held).unwrap().indices.len();
    let rate = flagged as f64 / 10_000.0;
    assert!(
        (0.03..=0.07).contains(&rate),
        "flag rate {} outside [0.03, 0.07]",
        rate
    );
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn criterion_03_scores_match_dense_inverse_oracle() {
    for case in 0..100u64 {
        let d = 1 + (case as usize % 4);
        let mut rng = RandomStream::new(0x03AC).derive_child(case);
        let n = 40 + (case as usize % 3) * 30;
        let mu: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let mut b = vec![0.0; d * d];
        for v in b.iter_mut() {
            *v = rng.next_normal();
        }
        // Make B comfortably nonsingular so the sample covariance is SPD.
        for i in 0..d {
            b[i * d + i] += 2.0;
        }
        let rows = gaussian_rows(n, d, &mu, &b, &mut rng);
        let fit = Tensor::new(vec![n, d], rows.clone()).unwrap();
        let reference =
            ReferenceDistribution::fit(&fit, EpsilonSpec::Auto, 0.05, ThresholdSpec::Analytic)
                .unwrap();

        // Re-derive mean, ridge covariance, and its dense inverse locally.
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                mean[c] += rows[r * d + c] / n as f64;
            }
        }
        for (m, r) in mean.iter().zip(reference.mu()) {
            assert!((m - r).abs() < 1e-10);
        }
        let mut cov = vec![0.0; d * d];
        for r in 0..n {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] +=
                        (rows[r * d + i] - mean[i]) * (rows[r * d + j] - mean[j])
                            / (n as f64 - 1.0);
                }
            }
        }
        for i in 0..d {
            cov[i * d + i] += reference.epsilon();
        }
        let inv = dense_inverse(&cov, d);

        let probe_rows = gaussian_rows(10, d, &mu, &b, &mut rng);
        let probes = Tensor::new(vec![10, d], probe_rows.clone()).unwrap();
        let scores = reference.scores(&probes).unwrap();
        for (p, &score) in scores.iter().enumerate() {
            let x = &probe_rows[p * d..(p + 1) * d];
            let mut want = 0.0;
            for i in 0..d {
                for j in 0..d {
                    want += (x[i] - mean[i]) * inv[i * d + j] * (x[j] - mean[j]);
                }
            }
            let rel = (score - want).abs() / want.abs().max(1e-12);
            assert!(
                rel <= 1e-7,
                "case {} probe {}: score {} vs oracle {} (rel {})",
                case,
                p,
                score,
                want,
                rel
            );
        }
    }
}

#[test]
fn criterion_04_chi2_quantiles_round_trip_and_match_bisection() {
    for d in [1usize, 2, 8, 64] {
        for p in [0.5, 0.9, 0.95, 0.99] {
            let x = chi2_quantile(d, p).unwrap();
            let back = chi2_cdf(d, x).unwrap();
            assert!(
                (back - p).abs() <= 1e-6,
                "cdf_{}(quantile({})) = {}",
                d,
                p,
                back
            );
        }
    }
    // d = 2 has the closed form F(x) = 1 - exp(-x/2); bisect it blind.
    let (mut lo, mut hi) = (0.0f64, 100.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 1.0 - (-mid / 2.0).exp() < 0.95 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let oracle = 0.5 * (lo + hi);
    assert!((oracle - 5.99146).abs() < 5e-6);
    assert!((chi2_quantile(2, 0.95).unwrap() - oracle).abs() <= 1e-6);
}

#[test]
fn criterion_05_em_is_monotone_and_recovers_two_clumps() {
    for case in 0..50u64 {
        let mut rng = RandomStream::new(0x6E31).derive_child(case);
        let mu1 = -3.0 + 2.0 * rng.next_f64();
        let mu2 = mu1 + 2.5 + 2.0 * rng.next_f64();
        let sd = 0.15 + 0.2 * rng.next_f64();
        let n1 = 60 + (case as usize % 40);
        let n2 = 60 + ((case as usize * 7) % 40);
        let mut values = Vec::with_capacity(n1 + n2);
        for _ in 0..n1 {
            values.push(mu1 + sd * rng.next_normal());
        }
        for _ in 0..n2 {
            values.push(mu2 + sd * rng.next_normal());
        }
        let floor = default_var_floor(&values);
        let model = fit_gmm_1d(&values, 2, &mut rng, 1e-8, 500, floor).unwrap();
        for w in model.ll_history.windows(2) {
            assert!(
                w[1] + 1e-9 >= w[0],
                "case {}: log-likelihood dropped {} -> {}",
                case,
                w[0],
                w[1]
            );
        }
        let mut got = model.means.clone();
        got.sort_by(f64::total_cmp);
        let (k0, k1) = kmeans_two(&values);
        for (g, (k, planted)) in got.iter().zip([(k0, mu1), (k1, mu2)]) {
            assert!(
                (g - planted).abs() <= 0.2,
                "case {}: mean {} vs planted {}",
                case,
                g,
                planted
            );
            assert!((k - planted).abs() <= 0.2);
            assert!((g - k).abs() <= 0.2);
        }
    }
}

#[test]
fn criterion_06_every_parameter_group_passes_finite_differences() {
    let started = Instant::now();
    let dims = MaeDims {
        p: 8,
        d_p: 16,
        d_e: 8,
        rows: 2,
        cols: 2,
    };
    let mut rng = RandomStream::new(0x6D0C);
    let params = MaeParams::init(dims, &mut rng);
    let image = Tensor::new(
        vec![16, 16, 3],
        (0..16 * 16 * 3).map(|_| rng.next_f64()).collect(),
    )
    .unwrap();
    let e: Vec<f64> = (0..dims.d_e).map(|_| rng.next_normal()).collect();
    let mask = make_backdoor_mask(&[0, 3], 4).unwrap();
    for mode in [LossMode::FullImage, LossMode::MaskedOnly] {
        let (_, grads) = loss_and_gradients(&params, &e, &image, &mask, mode).unwrap();
        for gi in 0..grads.groups().len() {
            let (name, g) = {
                let groups = grads.groups();
                (groups[gi].0, groups[gi].1.clone())
            };
            let len = g.len();
            let mut idxs: Vec<usize> =
                (0..6).map(|k| k * len / 6).chain([len - 1]).collect();
            idxs.dedup();
            for idx in idxs {
                let theta = params.groups()[gi].1[idx];
                let h = 1e-5 * (1.0 + theta.abs());
                let mut plus = params.clone();
                plus.groups_mut()[gi].1[idx] = theta + h;
                let mut minus = params.clone();
                minus.groups_mut()[gi].1[idx] = theta - h;
                let lp = loss_and_gradients(&plus, &e, &image, &mask, mode).unwrap().0;
                let lm = loss_and_gradients(&minus, &e, &image, &mask, mode)
                    .unwrap()
                    .0;
                let fd = (lp - lm) / (2.0 * h);
                let an = g[idx];
                // The floor absorbs entries whose true gradient is zero,
                // where central differences only see cancellation noise.
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    rel <= 1e-4,
                    "{:?} {}[{}]: fd {} vs grad {} (rel {})",
                    mode,
                    name,
                    idx,
                    fd,
                    an,
                    rel
                );
            }
        }
    }
    assert!(started.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn criterion_07_trigger_attention_mass_is_deep_layer_only() {
    let f = fixture();
    let scenes = triggered_episodes(&f.world, 200);
    let layers = f.world.encoder.cfg.layers;
    let l_plant = f.world.encoder.cfg.l_plant;

    // Mean received attention on the trigger's ground-truth columns,
    // averaged over queries, then over layers of each depth band.
    let mass = |enc: &BackdooredEncoder, image: &Tensor, gt: &[usize]| -> (f64, f64) {
        let out = encoder_forward(enc, image).unwrap();
        let cols = out.stack.image_cols().to_vec();
        let t = out.stack.t();
        let (mut deep, mut shallow) = (0.0, 0.0);
        for l in 0..layers {
            let m = mean_attention(&out.stack, l).unwrap();
            let mut s = 0.0;
            for &j in gt {
                let col = cols[j];
                for row in 0..t {
                    s += m.at2(row, col);
                }
            }
            s /= t as f64;
            if l >= l_plant {
                deep += s / (layers - l_plant) as f64;
            } else {
                shallow += s / l_plant as f64;
            }
        }
        (deep, shallow)
    };

    let (mut deep_gap, mut shallow_gap) = (0.0, 0.0);
    for sc in &scenes {
        let (db, sb) = mass(&f.world.encoder, &sc.image, &sc.ground_truth);
        let (dc, sc_) = mass(&f.twin, &sc.image, &sc.ground_truth);
        deep_gap += (db - dc) / scenes.len() as f64;
        shallow_gap += (sb - sc_) / scenes.len() as f64;
    }
    assert!(
        deep_gap >= 0.3,
        "deep trigger mass gap {} below 0.3",
        deep_gap
    );
    assert!(
        shallow_gap.abs() < 0.02,
        "shallow trigger mass gap {} not consistent",
        shallow_gap
    );
}

#[test]
fn criterion_08_detection_quality_on_default_testbed() {
    let triggered = triggered_eval();
    let det = &triggered.report.detection;
    assert_eq!(triggered.report.episodes_poisoned, 100);
    assert!(det.mean_recall >= 0.9, "recall {}", det.mean_recall);
    assert!(det.mean_precision >= 0.8, "precision {}", det.mean_precision);
    let clean = fixture().report.detection.clean_false_detection_rate;
    assert!(clean <= 0.10, "clean false-detection rate {}", clean);
}

#[test]
fn criterion_09_end_to_end_defense_trend() {
    let started = Instant::now();
    let r = &fixture().report;
    assert!(r.asr_no_defense >= 90.0, "undefended ASR {}", r.asr_no_defense);
    assert!(r.asr <= 10.0, "defended ASR {}", r.asr);
    assert!(
        r.cp_no_defense - r.cp <= 5.0,
        "CP dropped {} -> {}",
        r.cp_no_defense,
        r.cp
    );
    assert!(r.rp >= 70.0, "RP {}", r.rp);
    assert!(started.elapsed().as_secs_f64() < 600.0);
}

#[test]
fn criterion_10_full_pipeline_beats_every_ablation() {
    let f = fixture();
    let rows =
        pipeline::ablate_task(&f.world, &f.episodes, &f.reference, &f.decoder, 0).unwrap();
    let full = rows
        .iter()
        .find(|(n, _)| n == "full")
        .map(|(_, r)| r.tp)
        .unwrap();
    for (name, r) in &rows {
        if name != "full" {
            assert!(
                full > r.tp,
                "full TP {} does not strictly exceed {} TP {}",
                full,
                name,
                r.tp
            );
        }
    }
}

#[test]
fn criterion_11_trigger_residual_is_erased() {
    let r = &triggered_eval().report;
    assert_eq!(r.residual_no_defense.n, 100);
    assert_eq!(r.residual_with_defense.n, 100);
    assert!(
        r.residual_no_defense.mean > 0.9,
        "pre-purification residual {}",
        r.residual_no_defense.mean
    );
    assert!(
        r.residual_with_defense.mean < 0.2,
        "post-purification residual {}",
        r.residual_with_defense.mean
    );
}

#[test]
fn criterion_12_evaluation_artifacts_are_byte_deterministic() {
    let f = fixture();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let ev = pipeline::evaluate_task(&f.world, &f.episodes, &f.reference, &f.decoder, 0)
            .unwrap();
        pipeline::write_evaluation(dir.path(), &f.world, &ev).unwrap();
        let det_dir = dir.path().join("detect");
        for ep in f.episodes.iter().take(4) {
            let out = encoder_forward(&f.world.encoder, &ep.image).unwrap();
            let rng = f.world.detect_stream(0, ep.episode_id);
            let det = pipeline::detect_frame(&f.world.cfg, &f.reference, &out, &rng).unwrap();
            let report = pipeline::DetectionReport {
                episode_id: ep.episode_id,
                tau: f.reference.tau(),
                anomalies: det.anomalies.indices.clone(),
                scores: det.anomalies.scores.clone(),
                per_layer: det.per_layer.clone(),
                filter: det.filter.clone(),
                backdoor: det.backdoor.clone(),
            };
            pipeline::write_detection(
                &det_dir,
                &report,
                &det.per_layer_saliency,
                f.world.token_grid(),
            )
            .unwrap();
        }
    }
    let a = read_tree(dirs[0].path());
    let b = read_tree(dirs[1].path());
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>(),
        "artifact sets differ"
    );
    for (name, bytes) in &a {
        assert_eq!(bytes, &b[name], "artifact {} differs between runs", name);
    }
    assert!(a.contains_key("report.json"));
    assert!(a.keys().any(|k| k.starts_with("masks/")));
    assert!(a.keys().any(|k| k.starts_with("detect/heat_score_")));
}
