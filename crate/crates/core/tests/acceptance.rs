//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line reaches stdout. Pass
//! criterion numbers as arguments to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ids_core::bench::BenchReport;
use ids_core::compress::{
    calibrate_windows, calibration_subset, profile, prune_filters, quantize_model,
    quantized_classify, reduction_pct, PruneConfig,
};
use ids_core::config::PipelineConfig;
use ids_core::container::{Container, QPARAMS_BYTES};
use ids_core::data::{make_windows, split, FeatureWindow, NormStats, FEATURES};
use ids_core::model::Model;
use ids_core::pipeline;
use ids_core::quant::{compute_qparams, dequantize, quantize_activation, quantize_weights, Scheme};
use ids_core::stage1::{
    build_bigan, classify_stage1, fit_thresholds, reconstruction_error, score_windows,
    stage1_metrics, train_stage1, value_on_tape, value_terms, wgan_gp_value, Bigan, BoundBigan,
    DeployMode, MahalanobisStats, PenaltyPoint, Stage1Config, Variant,
};
use ids_core::stage2::{
    build_classifier, ce_loss, classify_batch, evaluate, focal_loss, label_smoothing_loss,
    loss_on_tape, loss_value, recon_errors, recon_head, train_stage2, unseen_fit, LossKind,
    ReconHead, Stage2Config,
};
use ids_core::synth::{synth_generate, AttackSpec, SynthConfig};
use ids_tensor::{
    bind, forward, forward_on_tape, param_gradients, DType, GraphSpec, Layer, OptimizerConfig,
    ParamStore, Tape, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed <= limit, || {
        format!("{what} took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64())
    })
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn nudged(p: &ParamStore, name: &str, i: usize, delta: f64) -> ParamStore {
    let mut q = p.clone();
    let t = q.require(name).unwrap();
    let mut v = t.to_f64_vec();
    v[i] += delta;
    let shape = t.shape().to_vec();
    q.insert(name, Tensor::from_f64(shape, v).unwrap());
    q
}

/// Worst relative error between `analytic` and central differences of `f`.
fn fd_worst(
    p: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    f: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, t) in p.iter() {
        let g = analytic[name].to_f64_vec();
        for (i, &gi) in g.iter().enumerate().take(t.numel()) {
            let fd = (f(&nudged(p, name, i, FD_STEP)) - f(&nudged(p, name, i, -FD_STEP))) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(gi, fd));
        }
    }
    worst
}

fn micro_classifier() -> GraphSpec {
    GraphSpec::new(vec![
        Layer::Conv1d {
            name: "c".into(),
            in_ch: FEATURES,
            out_ch: 3,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        Layer::Relu,
        Layer::Lstm {
            name: "l".into(),
            input_size: 3,
            hidden_size: 4,
            bidirectional: false,
        },
        Layer::Linear {
            name: "fc".into(),
            in_features: 4,
            out_features: 4,
        },
        Layer::Softmax,
    ])
}

/// A BiGAN small enough for exhaustive finite differences.
fn micro_bigan(window: usize, latent: usize) -> Bigan {
    let flat = FEATURES * window;
    let lin = |name: &str, i, o| Layer::Linear {
        name: name.into(),
        in_features: i,
        out_features: o,
    };
    let e = GraphSpec::new(vec![Layer::Flatten, lin("head", flat, latent)]);
    let g = GraphSpec::new(vec![
        lin("stem", latent, flat),
        Layer::Unflatten {
            channels: FEATURES,
            length: window,
        },
        Layer::Conv1d {
            name: "c".into(),
            in_ch: FEATURES,
            out_ch: FEATURES,
            kernel: 1,
            stride: 1,
            padding: 0,
        },
    ]);
    let d = GraphSpec::new(vec![
        Layer::Flatten,
        Layer::ConcatSide { width: latent },
        lin("joint", flat + latent, 4),
        Layer::Relu,
        lin("out", 4, 1),
    ]);
    Bigan {
        encoder: Model::init(e, DType::F64, 1).unwrap(),
        generator: Model::init(g, DType::F64, 2).unwrap(),
        discriminator: Model::init(d, DType::F64, 3).unwrap(),
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn criterion_01() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lines = Vec::new();

    let g = micro_classifier();
    ensure(g.param_count() <= 500, || format!("classifier has {} params", g.param_count()))?;
    let p = ParamStore::init(&g, DType::F64, 5).unwrap();
    let x = random_tensor(vec![3, FEATURES, 5], &mut rng);
    let labels = [0, 3, 2];
    for kind in [
        LossKind::Ce,
        LossKind::LabelSmoothing { alpha_s: 0.1 },
        LossKind::Focal { gamma: 2.0 },
    ] {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &p, true).unwrap();
        let xv = tape.tensor(&x, false).unwrap();
        let probs = *forward_on_tape(&mut tape, &g, &bound, xv, None).unwrap().last().unwrap();
        let loss = loss_on_tape(&mut tape, kind, probs, &labels).unwrap();
        let grads = param_gradients(&mut tape, loss, &bound).unwrap();
        let worst = fd_worst(&p, &grads, |q| {
            let probs = forward(&g, q, &x).unwrap().output.to_f64_vec();
            loss_value(kind, &probs, 4, &labels).unwrap()
        });
        ensure(worst <= FD_TOL, || format!("{kind:?} rel err {worst:.2e}"))?;
        lines.push(format!("{kind:?} {worst:.1e}"));
    }

    let (window, latent) = (2, 2);
    let nets = micro_bigan(window, latent);
    let count = [&nets.encoder, &nets.generator, &nets.discriminator]
        .iter()
        .map(|m| m.graph.param_count())
        .sum::<usize>();
    ensure(count <= 500, || format!("BiGAN has {count} params"))?;
    let x = random_tensor(vec![3, FEATURES, window], &mut rng);
    for point in [PenaltyPoint::Generated, PenaltyPoint::Interpolated] {
        let mut tape = Tape::new();
        let bound = BoundBigan::new(&mut tape, &nets, true, true, true).unwrap();
        let xv = tape.tensor(&x, false).unwrap();
        let terms = value_terms(&mut tape, &nets, &bound, xv, true, point, 9).unwrap();
        let v = value_on_tape(&mut tape, &terms, 10.0).unwrap();
        let analytic = [&bound.e, &bound.g, &bound.d]
            .map(|b| param_gradients(&mut tape, v, b).unwrap());
        let value = |n: &Bigan| wgan_gp_value(n, &x, 10.0, point, 9).unwrap();
        let mut worst = 0.0f64;
        worst = worst.max(fd_worst(&nets.encoder.params, &analytic[0], |q| {
            let mut n = nets.clone();
            n.encoder.params = q.clone();
            value(&n)
        }));
        worst = worst.max(fd_worst(&nets.generator.params, &analytic[1], |q| {
            let mut n = nets.clone();
            n.generator.params = q.clone();
            value(&n)
        }));
        worst = worst.max(fd_worst(&nets.discriminator.params, &analytic[2], |q| {
            let mut n = nets.clone();
            n.discriminator.params = q.clone();
            value(&n)
        }));
        ensure(worst <= FD_TOL, || format!("value ({point:?} penalty) rel err {worst:.2e}"))?;
        lines.push(format!("value/{point:?} {worst:.1e}"));
    }
    within(t0.elapsed(), Duration::from_secs(30), "gradient checks")?;
    Ok(format!("{} in {:.1}s", lines.join(", "), t0.elapsed().as_secs_f64()))
}

fn criterion_02() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (b, c) = (rng.random_range(1..16), rng.random_range(2..20));
        let mut probs = Vec::with_capacity(b * c);
        for _ in 0..b {
            let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            probs.extend(logits.iter().map(|l| l.exp() / z));
        }
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let ce = ce_loss(&probs, c, &labels).unwrap();
        worst = worst
            .max((label_smoothing_loss(&probs, c, &labels, 0.0).unwrap() - ce).abs())
            .max((focal_loss(&probs, c, &labels, 0.0).unwrap() - ce).abs());
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:e} over 100 batches"))
}

fn criterion_03() -> Outcome {
    let cfg = Stage1Config::default();
    let mut nets = build_bigan(&cfg, DType::F64).unwrap();
    for name in nets.discriminator.params.trainable_names() {
        let t = nets.discriminator.params.require(&name).unwrap();
        let fill = if name == "out.bias" { 0.37 } else { 0.0 };
        let z = Tensor::from_f64(t.shape().to_vec(), vec![fill; t.numel()]).unwrap();
        nets.discriminator.params.insert(name, z);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(vec![4, FEATURES, cfg.window], &mut rng);
    let v = wgan_gp_value(&nets, &x, 10.0, PenaltyPoint::Generated, 0).unwrap();
    ensure(v == 10.0, || format!("value {v}"))?;
    Ok(format!("value {v}"))
}

fn criterion_04() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let dim = rng.random_range(1..40);
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect();
        let euclid = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max((MahalanobisStats::identity(dim).distance(&v) - euclid).abs());
    }
    ensure(worst <= 1e-12, || format!("identity deviation {worst:e}"))?;
    let e = reconstruction_error(&[3.5, 4.25], &[3.0, 4.0], &MahalanobisStats::identity(2), 0.5);
    ensure(
        e.mse == 0.15625 && e.d_m == 5.0 && e.combined == 2.578125,
        || format!("worked example gave {e:?}"),
    )?;
    Ok(format!("identity deviation {worst:e}; mse {} d_m {} combined {}", e.mse, e.d_m, e.combined))
}

/// Linear-interpolation quantile on sorted data.
fn quantile_oracle(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn criterion_05() -> Outcome {
    let fixtures: [(Vec<f64>, [f64; 4]); 2] = [
        ((0..=4).map(f64::from).collect(), [1.0, 3.0, -2.0, 6.0]),
        ((0..=100).map(f64::from).collect(), [25.0, 75.0, -50.0, 150.0]),
    ];
    for (scores, expected) in &fixtures {
        let t = fit_thresholds(scores, 0.5).unwrap();
        let q1 = quantile_oracle(scores, 0.25);
        let q3 = quantile_oracle(scores, 0.75);
        let oracle = [q1, q3, q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1)];
        let got = [t.q1, t.q3, t.ll, t.ul];
        ensure(got == oracle && got == *expected, || {
            format!("n={}: got {got:?}, oracle {oracle:?}", scores.len())
        })?;
    }
    ensure(fit_thresholds(&[1.0, 2.0, 3.0], 0.5).is_err(), || "3 scores accepted".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fit: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
    let t = fit_thresholds(&fit, 0.5).unwrap();
    let mut disagreements = 0;
    let mut overlap = 0;
    let mut decisions = Vec::new();
    for i in 0..10_000 {
        let s = rng.random_range(t.ll - 0.5..t.ul + 0.5);
        let anomaly = s < t.q1 || s > t.q3;
        let normal = t.ll <= s && s <= t.ul;
        overlap += (anomaly && normal) as usize;
        for mode in [DeployMode::BandLlUl, DeployMode::BandQ1Q3] {
            let d = classify_stage1(s, &t, mode);
            let deployed_anomalous = match mode {
                DeployMode::BandLlUl => !normal,
                DeployMode::BandQ1Q3 => !(t.q1 <= s && s <= t.q3),
            };
            let got = d.deployed_label == ids_core::stage1::Stage1Label::Anomalous;
            if d.anomaly_rule_fired != anomaly || d.normal_rule_fired != normal || got != deployed_anomalous {
                disagreements += 1;
            }
        }
        decisions.push((classify_stage1(s, &t, DeployMode::BandLlUl), i % 3 == 0));
    }
    let m = stage1_metrics(&decisions);
    let (mut a, mut ah, mut n, mut nh) = (0, 0, 0, 0);
    for (d, is_anomaly) in &decisions {
        let s = d.score;
        if *is_anomaly {
            a += 1;
            ah += (s < t.q1 || s > t.q3) as usize;
        } else {
            n += 1;
            nh += (t.ll <= s && s <= t.ul) as usize;
        }
    }
    ensure(
        m.anomaly_recall == Some(ah as f64 / a as f64) && m.normal_recall == Some(nh as f64 / n as f64),
        || "recall recount differs".into(),
    )?;
    ensure(disagreements == 0, || format!("{disagreements} disagreements"))?;
    ensure(overlap > 0, || "overlap band never sampled".into())?;
    Ok(format!("both fixtures exact; 0 disagreements on 10000 scores ({overlap} in overlap band)"))
}

// ------------------------------------------------------------- stage 1

fn stage1_fixture() -> (Vec<FeatureWindow>, Vec<FeatureWindow>, Vec<FeatureWindow>, Vec<FeatureWindow>) {
    let injectors = [
        "constant_position",
        "constant_offset",
        "random_position",
        "random_offset",
        "constant_speed",
        "speed_offset",
        "random_speed",
        "eventual_stop",
        "replay",
    ];
    let cfg = SynthConfig {
        normal_vehicles: 40,
        messages_per_vehicle: 200,
        attacks: injectors
            .iter()
            .map(|i| AttackSpec {
                injector: i.to_string(),
                vehicles: 3,
            })
            .collect(),
        ..Default::default()
    };
    let out = synth_generate(&cfg, 7).unwrap();
    let windows = make_windows(&out.records, 20, 20).unwrap();
    let (normal, anomalous): (Vec<_>, Vec<_>) = windows.into_iter().partition(|w| w.label == 0);
    let parts = split(&normal, &[0.6, 0.2], 1);
    let stats = NormStats::fit(&parts[0]).unwrap();
    (
        stats.apply(&parts[0]),
        stats.apply(&parts[1]),
        stats.apply(&parts[2]),
        stats.apply(&anomalous),
    )
}

fn criterion_06() -> Outcome {
    let t0 = Instant::now();
    let (train, val, test, anomalous) = stage1_fixture();
    let cfg = Stage1Config {
        variant: Variant::M1,
        epochs: 100,
        n_critic: 5,
        penalty_point: PenaltyPoint::Interpolated,
        optimizer: OptimizerConfig::rmsprop(5e-4),
        ..Default::default()
    };
    let mut nets = build_bigan(&cfg, DType::F32).unwrap();
    train_stage1(&cfg, &mut nets, &train).unwrap();
    let stats = MahalanobisStats::fit(&train).unwrap();
    let scores = |ws: &[FeatureWindow]| -> Vec<f64> {
        score_windows(&nets, &stats, cfg.alpha, ws, 64)
            .unwrap()
            .iter()
            .map(|e| e.combined)
            .collect()
    };
    let t = fit_thresholds(&scores(&val), cfg.alpha).unwrap();
    let mut decisions: Vec<_> = scores(&test)
        .into_iter()
        .map(|s| (classify_stage1(s, &t, DeployMode::BandLlUl), false))
        .collect();
    decisions.extend(
        scores(&anomalous)
            .into_iter()
            .map(|s| (classify_stage1(s, &t, DeployMode::BandLlUl), true)),
    );
    let m = stage1_metrics(&decisions);
    let (ar, nr) = (m.anomaly_recall.unwrap(), m.normal_recall.unwrap());
    let elapsed = t0.elapsed();
    let detail = format!(
        "anomaly recall {ar:.4} (n={}), normal recall {nr:.4} (n={}), {:.0}s",
        m.anomaly_count,
        m.normal_count,
        elapsed.as_secs_f64()
    );
    ensure(ar >= 0.80 && nr >= 0.90, || detail.clone())?;
    within(elapsed, Duration::from_secs(600), "stage-1 run")?;
    Ok(detail)
}

// ------------------------------------------------------------- stage 2

const STAGE2_INJECTORS: [&str; 4] = ["constant_position", "random_position", "constant_speed", "random_speed"];

struct Stage2Fixture {
    train: Vec<FeatureWindow>,
    val: Vec<FeatureWindow>,
    test: Vec<FeatureWindow>,
    config: Stage2Config,
}

/// Four attack classes relabeled 1..=4.
fn stage2_fixture() -> Stage2Fixture {
    let cfg = SynthConfig {
        normal_vehicles: 0,
        messages_per_vehicle: 200,
        attacks: STAGE2_INJECTORS
            .iter()
            .map(|i| AttackSpec {
                injector: i.to_string(),
                vehicles: 40,
            })
            .collect(),
        ..Default::default()
    };
    let out = synth_generate(&cfg, 7).unwrap();
    let labels: Vec<usize> = STAGE2_INJECTORS
        .iter()
        .map(|i| i.parse::<ids_core::synth::Injector>().unwrap().label())
        .collect();
    let windows: Vec<FeatureWindow> = make_windows(&out.records, 20, 20)
        .unwrap()
        .into_iter()
        .map(|mut w| {
            w.label = labels.iter().position(|&l| l == w.label).unwrap() + 1;
            w
        })
        .collect();
    let parts = split(&windows, &[0.6, 0.2], 1);
    let stats = NormStats::fit(&parts[0]).unwrap();
    let mut config = Stage2Config {
        num_classes: 4,
        epochs: 70,
        ..Default::default()
    };
    config.optimizer.learning_rate = 1e-3;
    config.optimizer.batch_size = 16;
    Stage2Fixture {
        train: stats.apply(&parts[0]),
        val: stats.apply(&parts[1]),
        test: stats.apply(&parts[2]),
        config,
    }
}

struct Stage2Run {
    fixture: Stage2Fixture,
    model: Model,
    final_val: f64,
    elapsed: Duration,
}

fn stage2_run() -> Stage2Run {
    let fixture = stage2_fixture();
    let mut model = build_classifier(&fixture.config, DType::F32).unwrap();
    let t0 = Instant::now();
    let log = train_stage2(&fixture.config, &mut model, None, &fixture.train, &fixture.val).unwrap();
    let elapsed = t0.elapsed();
    let final_val = log.last().and_then(|l| l.val_accuracy).unwrap();
    Stage2Run {
        fixture,
        model,
        final_val,
        elapsed,
    }
}

fn criterion_07(run: &Stage2Run) -> Outcome {
    let f = &run.fixture;
    let classes = f.config.num_classes;
    let cm = evaluate(&run.model, &f.val, classes).unwrap();

    // independent recount from raw predictions
    let refs: Vec<&FeatureWindow> = f.val.iter().collect();
    let pairs: Vec<(usize, usize)> = classify_batch(&run.model, &refs)
        .unwrap()
        .iter()
        .zip(&f.val)
        .map(|(p, w)| (w.label - 1, p.label - 1))
        .collect();
    let mut counts = vec![vec![0usize; classes]; classes];
    for &(t, p) in &pairs {
        counts[t][p] += 1;
    }
    ensure(cm.counts == counts, || "confusion counts differ from recount".into())?;
    let hits = pairs.iter().filter(|(t, p)| t == p).count();
    let accuracy = hits as f64 / pairs.len() as f64;
    let (mut precision, mut recall, mut f1) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..classes {
        let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let support = pairs.iter().filter(|&&(t, _)| t == c).count() as f64;
        let predicted = pairs.iter().filter(|&&(_, p)| p == c).count() as f64;
        if support == 0.0 {
            continue;
        }
        let p = if predicted == 0.0 { 0.0 } else { tp / predicted };
        let r = tp / support;
        precision.push(p);
        recall.push(r);
        f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let oracle = [accuracy, mean(&precision), mean(&recall), mean(&f1)];
    let got = [cm.accuracy(), cm.macro_precision(), cm.macro_recall(), cm.macro_f1()];
    ensure(got == oracle, || format!("metrics {got:?} vs oracle {oracle:?}"))?;
    ensure((run.final_val - accuracy).abs() < 1e-12, || "logged accuracy differs".into())?;

    let detail = format!(
        "val accuracy {:.4} (n={}), training {:.0}s, metrics match recount",
        accuracy,
        f.val.len(),
        run.elapsed.as_secs_f64()
    );
    ensure(accuracy >= 0.90, || detail.clone())?;
    within(run.elapsed, Duration::from_secs(120), "stage-2 training")?;
    Ok(detail)
}

fn criterion_08(run: &Stage2Run) -> Outcome {
    let f = &run.fixture;
    let held = 4;
    let known = |ws: &[FeatureWindow]| ws.iter().filter(|w| w.label != held).cloned().collect::<Vec<_>>();
    let unseen: Vec<FeatureWindow> = [&f.train, &f.val, &f.test]
        .iter()
        .flat_map(|ws| ws.iter().filter(|w| w.label == held).cloned())
        .collect();
    let config = Stage2Config {
        num_classes: 3,
        ..f.config.clone()
    };
    let mut model = build_classifier(&config, DType::F32).unwrap();
    let mut head = recon_head(&config, DType::F32).unwrap();
    train_stage2(
        &config,
        &mut model,
        Some(ReconHead {
            model: &mut head,
            beta: 1.0,
        }),
        &known(&f.train),
        &known(&f.val),
    )
    .unwrap();
    let val_errors: Vec<f64> = recon_errors(&model, &head, &known(&f.val))
        .unwrap()
        .iter()
        .map(|e| e.0)
        .collect();
    let threshold = unseen_fit(&val_errors, 91.0).unwrap();
    let rate = |ws: &[FeatureWindow]| {
        let e = recon_errors(&model, &head, ws).unwrap();
        e.iter().filter(|e| e.0 > threshold).count() as f64 / e.len() as f64
    };
    let flagged = rate(&unseen);
    let false_unknown = rate(&known(&f.test));
    let detail = format!(
        "held-out flagged {flagged:.4} (n={}), false-unknown {false_unknown:.4}",
        unseen.len()
    );
    ensure(flagged >= 0.80 && false_unknown <= 0.15, || detail.clone())?;
    Ok(detail)
}

fn criterion_09() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for i in 0..1_000_000 {
        let (lo, hi) = (rng.random_range(-10.0..0.0), rng.random_range(0.0..10.0));
        let scheme = if i % 2 == 0 {
            Scheme::AsymmetricActivation
        } else {
            Scheme::SymmetricWeight
        };
        let qp = compute_qparams(lo, hi, 8, scheme).unwrap();
        let (rlo, rhi) = qp.representable();
        let v = rng.random_range(rlo..=rhi);
        let back = dequantize(&quantize_activation(&[v], &qp), &qp)[0];
        worst = worst.max((v - back).abs() / qp.scale);
    }
    ensure(worst <= 0.5 + 1e-9, || format!("worst error {worst} steps"))?;
    let w = compute_qparams(-1.0, 1.0, 8, Scheme::SymmetricWeight).unwrap();
    ensure(w.scale == 2.0 / 255.0 && quantize_weights(&[0.5], &w) == [64], || {
        format!("weight example gave s {} q {:?}", w.scale, quantize_weights(&[0.5], &w))
    })?;
    let a = compute_qparams(0.0, 2.55, 8, Scheme::AsymmetricActivation).unwrap();
    ensure((a.scale - 0.01).abs() < 1e-15 && a.zero_point == 0, || {
        format!("activation example gave s {} z {}", a.scale, a.zero_point)
    })?;
    Ok(format!(
        "worst round trip {worst:.6}·s over 10^6 values; q(0.5)=64 at s=2/255; s={} z=0",
        a.scale
    ))
}

fn criterion_10(run: &Stage2Run) -> Outcome {
    let f = &run.fixture;
    let cal = calibrate_windows(&run.model, &calibration_subset(&f.train, 512, 0)).unwrap();
    let qm = quantize_model(&run.model, &cal, 8).unwrap();
    let refs: Vec<&FeatureWindow> = f.test.iter().collect();
    let fp = classify_batch(&run.model, &refs).unwrap();
    let qp = quantized_classify(&qm, &refs).unwrap();
    let agree = fp.iter().zip(&qp).filter(|(a, b)| a.label == b.label).count() as f64 / fp.len() as f64;
    let detail = format!("top-1 agreement {agree:.4} on {} test windows", fp.len());
    ensure(agree >= 0.95, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------- compression

/// Container bytes predicted from tensor shapes and dtypes alone.
fn byte_oracle(prefix: &str, graph: &GraphSpec, tensors: &[(String, Vec<usize>, usize, bool)], extra: usize) -> usize {
    let json = serde_json::to_string(graph).unwrap();
    let meta_key = format!("graph.{prefix}");
    let mut n = 4 + 1 + 4 + (2 + meta_key.len() + 4 + json.len()) + 4;
    for (name, shape, elem, quantized) in tensors {
        let numel: usize = shape.iter().product();
        n += 2 + prefix.len() + 1 + name.len() + 1 + 1 + 4 * shape.len() + 1;
        n += if *quantized { QPARAMS_BYTES } else { 0 };
        n += numel * elem;
    }
    n + extra + 4
}

fn criterion_11() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = Stage2Config::default();
    let input = [FEATURES, config.window];
    let model = build_classifier(&config, DType::F32).unwrap();
    let pruned = prune_filters(&model, &PruneConfig::default(), &input).unwrap().model;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let windows: Vec<FeatureWindow> = (0..64)
        .map(|i| FeatureWindow {
            values: (0..FEATURES * config.window).map(|_| rng.random_range(-2.0..2.0)).collect(),
            len: config.window,
            sender_id: i,
            label: 1,
        })
        .collect();
    let cal = calibrate_windows(&pruned, &windows.iter().collect::<Vec<_>>()).unwrap();
    let qm = quantize_model(&pruned, &cal, 8).unwrap();

    let (before_path, after_path) = (dir.path().join("float.fids"), dir.path().join("int8.fids"));
    let mut c = Container::new();
    c.put_model("stage2", &model.graph, &model.params);
    c.save(&before_path).unwrap();
    let mut c = Container::new();
    qm.put_into(&mut c, "stage2");
    c.save(&after_path).unwrap();
    let size = |p: &Path| std::fs::metadata(p).unwrap().len() as usize;
    let (before, after) = (size(&before_path), size(&after_path));

    // float: every parameter f32. int8: conv/linear/LSTM weights int8,
    // conv/linear biases int32, LSTM bias f32, all but the LSTM bias
    // carrying qparams; each activation site adds an empty f64 record.
    let float_tensors: Vec<_> = model
        .graph
        .layers
        .iter()
        .flat_map(|l| l.params())
        .map(|(name, shape, _)| (name, shape, 4, false))
        .collect();
    let mut int_tensors = Vec::new();
    for layer in &pruned.graph.layers {
        let is_lstm = matches!(layer, Layer::Lstm { .. });
        for (name, shape, _) in layer.params() {
            let bias = name.ends_with("bias");
            let (elem, q) = match (bias, is_lstm) {
                (false, _) => (1, true),
                (true, false) => (4, true),
                (true, true) => (4, false),
            };
            int_tensors.push((name, shape, elem, q));
        }
    }
    let sites = ids_core::compress::activation_sites(&pruned.graph);
    let site_bytes: usize = sites
        .iter()
        .map(|k| 2 + "stage2/site.".len() + k.to_string().len() + 1 + 1 + 4 + 1 + QPARAMS_BYTES)
        .sum();
    let oracle_before = byte_oracle("stage2", &model.graph, &float_tensors, 0);
    let oracle_after = byte_oracle("stage2", &pruned.graph, &int_tensors, site_bytes);
    ensure(before == oracle_before && after == oracle_after, || {
        format!("measured {before}/{after} bytes, oracle {oracle_before}/{oracle_after}")
    })?;
    let measured = reduction_pct(before as f64, after as f64);
    let oracle = reduction_pct(oracle_before as f64, oracle_after as f64);
    ensure(measured == oracle, || format!("reduction {measured} vs {oracle}"))?;

    let pb = profile(&model.graph, &input).unwrap();
    let pa = profile(&pruned.graph, &input).unwrap();
    Ok(format!(
        "size {before} -> {after} bytes ({measured:.2}% reduction, oracle exact); \
         FLOPs -{:.2}%, MACs -{:.2}%; reference targets 77.2% / 34.17% / 54.15%",
        reduction_pct(pb.flops as f64, pa.flops as f64),
        reduction_pct(pb.macs as f64, pa.macs as f64),
    ))
}

fn criterion_12() -> Outcome {
    let conv = |name: &str, i, o, k, s, p| Layer::Conv1d {
        name: name.into(),
        in_ch: i,
        out_ch: o,
        kernel: k,
        stride: s,
        padding: p,
    };
    let cases: [(GraphSpec, Vec<usize>, u64, usize); 3] = [
        // L_out 5, 1·5·1·3
        (GraphSpec::new(vec![conv("c", 1, 1, 3, 1, 0)]), vec![1, 7], 15, 4),
        // L_out 4, 4·4·2·3 = 96; then 16·5 = 80
        (
            GraphSpec::new(vec![
                conv("c", 2, 4, 3, 2, 1),
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear {
                    name: "fc".into(),
                    in_features: 16,
                    out_features: 5,
                },
            ]),
            vec![2, 8],
            176,
            28 + 85,
        ),
        // 4 gates · (3·2 + 2·2) · 5 steps
        (
            GraphSpec::new(vec![Layer::Lstm {
                name: "l".into(),
                input_size: 3,
                hidden_size: 2,
                bidirectional: false,
            }]),
            vec![3, 5],
            200,
            4 * 2 * (3 + 2) + 4 * 2,
        ),
    ];
    for (g, input, macs, params) in &cases {
        let p = profile(g, input).unwrap();
        ensure(p.macs == *macs && p.flops == 2 * macs && p.parameter_count == *params, || {
            format!("got macs {} flops {} params {}, expected {macs}/{}/{params}", p.macs, p.flops, p.parameter_count, 2 * macs)
        })?;
    }
    Ok("3 micro-architectures: 15, 176, 200 MACs exact".into())
}

fn criterion_13() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut removed_total = 0;
    for trial in 0..20 {
        let c0 = rng.random_range(1..4);
        let f1 = rng.random_range(2..16);
        let f2 = rng.random_range(2..16);
        let len = rng.random_range(8..16);
        let conv = |name: &str, i, o| Layer::Conv1d {
            name: name.into(),
            in_ch: i,
            out_ch: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let graph = GraphSpec::new(vec![
            conv("c1", c0, f1),
            Layer::Relu,
            conv("c2", f1, f2),
            Layer::Relu,
            Layer::Lstm {
                name: "l".into(),
                input_size: f2,
                hidden_size: 3,
                bidirectional: rng.random_bool(0.5),
            },
            Layer::Softmax,
        ]);
        let cfg = PruneConfig {
            ratio: rng.random_range(0.0..0.9),
            ..Default::default()
        };
        let mut model = Model::init(graph, DType::F64, trial).unwrap();
        let mut dead = BTreeMap::new();
        for (layer, filters) in [("c1", f1), ("c2", f2)] {
            let n = cfg.removed_count(filters);
            let mut chosen = rand::seq::index::sample(&mut rng, filters, n).into_vec();
            chosen.sort_unstable();
            for suffix in ["weight", "bias"] {
                let name = format!("{layer}.{suffix}");
                let t = model.params.require(&name).unwrap().clone();
                let per = t.numel() / filters;
                let mut v = t.to_f64_vec();
                for &f in &chosen {
                    v[f * per..(f + 1) * per].fill(0.0);
                }
                model.params.insert(name, Tensor::from_f64(t.shape().to_vec(), v).unwrap());
            }
            if n > 0 {
                dead.insert(layer.to_string(), chosen);
            }
            removed_total += n;
        }
        let out = prune_filters(&model, &cfg, &[c0, len]).unwrap();
        ensure(out.removed == dead, || format!("trial {trial}: removed {:?}, dead {dead:?}", out.removed))?;
        let x = random_tensor(vec![4, c0, len], &mut rng);
        let a = model.forward(&x).unwrap().to_f64_vec();
        let b = out.model.forward(&x).unwrap().to_f64_vec();
        let same = a.len() == b.len() && a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits());
        ensure(same, || format!("trial {trial}: outputs differ"))?;
    }
    Ok(format!("20 configs bit-identical, {removed_total} filters removed as floor(p·F)"))
}

// ---------------------------------------------------------- pipeline

fn tiny_config(out: &Path) -> PipelineConfig {
    let text = r#"
seed = 5
[synth]
normal_vehicles = 8
messages_per_vehicle = 100
attacks = [
  { injector = "constant_position", vehicles = 4 },
  { injector = "random_speed", vehicles = 4 },
]
[stage1]
epochs = 2
latent_dim = 8
[stage2]
epochs = 3
[unseen]
known_classes = [1]
[compress]
calibration_windows = 16
[compress.prune]
finetune_epochs = 1
[bench]
repetitions = 2
"#;
    let mut cfg = PipelineConfig::from_toml(text).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn artifacts(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn criterion_14_15() -> (Outcome, Outcome) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        if let Err(e) = pipeline::run_all_synthetic(&tiny_config(d.path())) {
            let msg = format!("pipeline failed: {e}");
            return (Err(msg.clone()), Err(msg));
        }
    }
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    let timed = |name: &str| name.starts_with("bench.");
    let mut compared = 0;
    let mut differing = Vec::new();
    for (name, bytes) in &fa {
        if timed(name) {
            continue;
        }
        compared += 1;
        if fb.get(name) != Some(bytes) {
            differing.push(name.clone());
        }
    }
    let containers = fa.keys().filter(|n| n.ends_with(".fids")).count();
    let det = if differing.is_empty() && fa.len() == fb.len() {
        Ok(format!("{compared} artifacts bit-identical ({containers} containers)"))
    } else {
        Err(format!("differing: {differing:?}"))
    };
    (det, bench_invariant(&fa))
}

fn bench_invariant(files: &BTreeMap<String, Vec<u8>>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..1000 {
        let vehicles = rng.random_range(1..50u64);
        let windows: Vec<FeatureWindow> = (0..rng.random_range(vehicles..200))
            .map(|i| FeatureWindow {
                values: vec![],
                len: 0,
                sender_id: i % vehicles,
                label: 0,
            })
            .collect();
        let reps = rng.random_range(1..6);
        let t = |r: &mut ChaCha8Rng| (0..reps).map(|_| r.random_range(0.0..500.0)).collect::<Vec<_>>();
        let report = BenchReport::from_timings(&windows, t(&mut rng), t(&mut rng), "test");
        let product = report.per_vehicle_ms * report.unique_vehicles as f64;
        ensure(
            report.unique_vehicles == vehicles as usize
                && (product - report.total_ms).abs() <= 1e-9 * report.total_ms.max(1.0),
            || format!("{report:?}"),
        )?;
    }
    let text = String::from_utf8(files.get("bench.txt").cloned().unwrap_or_default()).unwrap();
    let kv: BTreeMap<&str, f64> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| v.parse().ok().map(|v| (k, v)))
        .collect();
    let (per, n, total) = (kv.get("per_vehicle_ms"), kv.get("unique_vehicles"), kv.get("total_ms"));
    let (Some(per), Some(n), Some(total)) = (per, n, total) else {
        return Err("bench.txt lacks per_vehicle_ms, unique_vehicles or total_ms".into());
    };
    // printed with 6 decimals
    ensure((per * n - total).abs() <= 0.5e-6 * (n + 1.0) + 1e-9, || {
        format!("pipeline bench {per} × {n} != {total}")
    })?;
    Ok(format!(
        "1000 synthetic reports + pipeline report hold; measured {:.3} s per vehicle over {n} vehicles (reference 0.195 s)",
        per / 1e3
    ))
}

// ---------------------------------------------------------------- main

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    })
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    let simple: [(usize, fn() -> Outcome); 10] = [
        (1, criterion_01),
        (2, criterion_02),
        (3, criterion_03),
        (4, criterion_04),
        (5, criterion_05),
        (6, criterion_06),
        (9, criterion_09),
        (11, criterion_11),
        (12, criterion_12),
        (13, criterion_13),
    ];
    for (n, f) in simple {
        if run(n) {
            let r = guarded(f);
            print_line(n, &r);
            results.insert(n, r);
        }
    }
    if run(7) || run(8) || run(10) {
        match catch_unwind(stage2_run) {
            Ok(s2) => {
                for (n, f) in [(7, criterion_07 as fn(&Stage2Run) -> Outcome), (8, criterion_08), (10, criterion_10)] {
                    if run(n) {
                        let r = guarded(|| f(&s2));
                        print_line(n, &r);
                        results.insert(n, r);
                    }
                }
            }
            Err(_) => {
                for n in [7, 8, 10] {
                    if run(n) {
                        let r = Err("stage-2 fixture training panicked".into());
                        print_line(n, &r);
                        results.insert(n, r);
                    }
                }
            }
        }
    }
    if run(14) || run(15) {
        let (d, b) = catch_unwind(criterion_14_15).unwrap_or_else(|_| {
            let e = Err("pipeline panicked".to_string());
            (e.clone(), e)
        });
        for (n, r) in [(14, d), (15, b)] {
            if run(n) {
                print_line(n, &r);
                results.insert(n, r);
            }
        }
    }
    let failed = results.values().filter(|r| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn print_line(n: usize, r: &Outcome) {
    match r {
        Ok(d) => println!("criterion {n:02} PASS {d}"),
        Err(d) => println!("criterion {n:02} FAIL {d}"),
    }
}
