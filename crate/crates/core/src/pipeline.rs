//! Pipeline commands over artifacts in the output directory.
//!
//! | command | reads | writes |
//! |---|---|---|
//! | `ingest` | `data.records`, `data.labels` | `records.csv`, `windows.fids`, `norm.fids` |
//! | `synth` | | `synth.jsonl`, `synth_labels.csv`, `records.csv`, `windows.fids`, `norm.fids` |
//! | `train-stage1` | `records.csv`, `norm.fids` | `stage1.fids` |
//! | `fit-thresholds` | `stage1.fids` | `stage1.fids` with thresholds |
//! | `train-stage2` | `records.csv`, `norm.fids` | `stage2.fids` |
//! | `train-unseen` | `records.csv`, `norm.fids` | `unseen.fids` |
//! | `prune` | `stage2.fids` | `stage2_pruned.fids` |
//! | `finetune` | `stage2_pruned.fids` | `stage2_finetuned.fids` |
//! | `quantize` | `stage2.fids`, `stage2_finetuned.fids` | `stage2_quantized.fids` |
//! | `evaluate`, `detect`, `bench`, `profile` | all of the above that exist | reports |
//!
//! Every report is written twice, as `name.txt` (`key=value`) and
//! `name.csv`.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ids_tensor::{DType, Tensor};

use crate::bench::bench;
use crate::compress::{
    calibrate_windows, calibration_subset, finetune, profile, prune_filters, quantize_model,
    quantized_classify, reduction_pct, ModelProfile, ProfileReport, QuantizedModel, Snapshot,
    CONVENTION, PASSTHROUGH_BITS,
};
use crate::config::PipelineConfig;
use crate::container::Container;
use crate::data::{
    apply_labels, make_windows, parse_csv, parse_labels, parse_records, split, BsmRecord,
    FeatureWindow, NormStats, CSV_HEADER, FEATURES,
};
use crate::detect::{Classifier, Detector, UnseenDetector};
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::stage1::{
    build_bigan, classify_stage1, fit_thresholds, score_windows, stage1_metrics, train_stage1,
    Bigan, DeployMode, MahalanobisStats, ThresholdModel,
};
use crate::stage2::{
    build_classifier, evaluate, recon_errors, recon_head, train_stage2, unseen_fit,
    ConfusionMatrix, ReconHead,
};
use crate::synth::synth_generate;

pub const COMMANDS: [&str; 13] = [
    "ingest",
    "synth",
    "train-stage1",
    "fit-thresholds",
    "train-stage2",
    "train-unseen",
    "prune",
    "finetune",
    "quantize",
    "evaluate",
    "detect",
    "bench",
    "profile",
];

/// Runs one command. Unknown commands and invalid configs are errors.
pub fn run(command: &str, cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    match command {
        "ingest" => ingest(cfg),
        "synth" => synth(cfg),
        "train-stage1" => train_stage1_cmd(cfg),
        "fit-thresholds" => fit_thresholds_cmd(cfg),
        "train-stage2" => train_stage2_cmd(cfg),
        "train-unseen" => train_unseen_cmd(cfg),
        "prune" => prune_cmd(cfg),
        "finetune" => finetune_cmd(cfg),
        "quantize" => quantize_cmd(cfg),
        "evaluate" => evaluate_cmd(cfg),
        "detect" => detect_cmd(cfg),
        "bench" => bench_cmd(cfg),
        "profile" => profile_cmd(cfg),
        _ => Err(CoreError::Config(format!(
            "unknown command `{command}`; expected one of {}",
            COMMANDS.join(", ")
        ))),
    }
}

/// Runs every command from `synth` through `profile` in order.
pub fn run_all_synthetic(cfg: &PipelineConfig) -> Result<()> {
    for c in COMMANDS.iter().filter(|c| **c != "ingest") {
        run(c, cfg)?;
    }
    Ok(())
}

fn path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

/// Writes `stem.txt` as `key=value` lines and `stem.csv` as `key,value` rows.
pub fn write_report(dir: &Path, stem: &str, rows: &[(String, String)]) -> Result<()> {
    let mut txt = String::new();
    let mut csv = String::from("key,value\n");
    for (k, v) in rows {
        let _ = writeln!(txt, "{k}={v}");
        let _ = writeln!(csv, "{k},{v}");
    }
    fs::write(dir.join(format!("{stem}.txt")), txt)?;
    fs::write(dir.join(format!("{stem}.csv")), csv)?;
    Ok(())
}

fn row(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".into(), |x| x.to_string())
}

fn load(path: &Path, hint: &str) -> Result<Container> {
    if !path.exists() {
        return Err(CoreError::Container(format!(
            "`{}` not found; run `{hint}` first",
            path.display()
        )));
    }
    Container::load(path)
}

fn load_model(c: &Container, prefix: &str) -> Result<Model> {
    let (graph, params) = c.model(prefix)?;
    Ok(Model { graph, params })
}

// ---- data ----

fn write_records(cfg: &PipelineConfig, records: &[BsmRecord]) -> Result<()> {
    let mut s = String::with_capacity(records.len() * 96);
    let _ = writeln!(s, "{CSV_HEADER},label");
    for r in records {
        let _ = writeln!(s, "{},{}", r.to_csv_row(), r.label);
    }
    fs::write(path(cfg, "records.csv"), s)?;
    Ok(())
}

fn read_records(cfg: &PipelineConfig) -> Result<Vec<BsmRecord>> {
    let p = path(cfg, "records.csv");
    if !p.exists() {
        return Err(CoreError::Container(format!(
            "`{}` not found; run `ingest` or `synth` first",
            p.display()
        )));
    }
    Ok(parse_csv(fs::File::open(p)?)?.records)
}

/// Raw windows split into train, validation and test.
pub struct Splits {
    pub train: Vec<FeatureWindow>,
    pub val: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
}

impl Splits {
    pub fn new(cfg: &PipelineConfig, records: &[BsmRecord]) -> Result<Self> {
        let windows = make_windows(records, cfg.data.window, cfg.data.stride)?;
        let [train, val, test]: [Vec<FeatureWindow>; 3] = split(&windows, &cfg.data.split, cfg.seed)
            .try_into()
            .expect("two fractions give three parts");
        Ok(Self { train, val, test })
    }
}

pub fn normal(ws: &[FeatureWindow]) -> Vec<FeatureWindow> {
    ws.iter().filter(|w| w.label == 0).cloned().collect()
}

pub fn attacks(ws: &[FeatureWindow]) -> Vec<FeatureWindow> {
    ws.iter().filter(|w| w.label != 0).cloned().collect()
}

/// Stores raw windows as `windows/values` `[N, FEATURES, w]`, plus
/// `windows/sender` and `windows/label`.
pub fn windows_container(windows: &[FeatureWindow], w: usize) -> Result<Container> {
    let mut c = Container::new();
    let values: Vec<f64> = windows.iter().flat_map(|x| x.values.iter().copied()).collect();
    c.put("windows/values", Tensor::from_f64(vec![windows.len(), FEATURES, w], values)?);
    c.put(
        "windows/sender",
        Tensor::from_f64(vec![windows.len()], windows.iter().map(|x| x.sender_id as f64).collect())?,
    );
    c.put(
        "windows/label",
        Tensor::from_i32(vec![windows.len()], windows.iter().map(|x| x.label as i32).collect())?,
    );
    Ok(c)
}

fn fit_norm(cfg: &PipelineConfig, records: &[BsmRecord]) -> Result<NormStats> {
    let all = make_windows(records, cfg.data.window, cfg.data.stride)?;
    windows_container(&all, cfg.data.window)?.save(&path(cfg, "windows.fids"))?;
    let s = Splits::new(cfg, records)?;
    let norm = NormStats::fit(&normal(&s.train))?;
    let mut c = Container::new();
    c.put("norm", norm.to_tensor());
    c.save(&cfg.norm_stats_path())?;
    Ok(norm)
}

fn read_norm(cfg: &PipelineConfig) -> Result<NormStats> {
    NormStats::from_tensor(load(&cfg.norm_stats_path(), "ingest` or `synth")?.get("norm")?)
}

/// Splits plus normalization, the common prologue of the training commands.
struct Prepared {
    splits: Splits,
    norm: NormStats,
}

impl Prepared {
    fn new(cfg: &PipelineConfig) -> Result<Self> {
        let records = read_records(cfg)?;
        Ok(Self {
            splits: Splits::new(cfg, &records)?,
            norm: read_norm(cfg)?,
        })
    }

    fn n(&self, ws: &[FeatureWindow]) -> Vec<FeatureWindow> {
        self.norm.apply(ws)
    }
}

fn ingest(cfg: &PipelineConfig) -> Result<()> {
    let src = cfg
        .data
        .records
        .as_ref()
        .ok_or_else(|| CoreError::Config("data.records is not set".into()))?;
    for p in std::iter::once(src).chain(cfg.data.labels.as_ref()) {
        if !p.exists() {
            return Err(CoreError::Config(format!("`{}` does not exist", p.display())));
        }
    }
    let is_csv = src.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut parsed = if is_csv {
        parse_csv(fs::File::open(src)?)?
    } else {
        parse_records(BufReader::new(fs::File::open(src)?))?
    };
    if let Some(lp) = &cfg.data.labels {
        let labels = parse_labels(BufReader::new(fs::File::open(lp)?))?;
        apply_labels(&mut parsed.records, &labels);
    }
    write_records(cfg, &parsed.records)?;
    fit_norm(cfg, &parsed.records)?;
    write_report(
        &cfg.out_dir,
        "ingest_report",
        &[
            row("records", parsed.records.len()),
            row("skipped", parsed.skipped),
            row("ignored", parsed.ignored),
            row("errors", parsed.errors.len()),
        ],
    )
}

fn synth(cfg: &PipelineConfig) -> Result<()> {
    let out = synth_generate(&cfg.synth, cfg.seed)?;
    let mut jsonl = String::new();
    for r in &out.records {
        jsonl.push_str(&r.to_json_line());
        jsonl.push('\n');
    }
    fs::write(path(cfg, "synth.jsonl"), jsonl)?;
    let mut labels = String::from("sender_id,label\n");
    for (id, l) in &out.labels {
        let _ = writeln!(labels, "{id},{l}");
    }
    fs::write(path(cfg, "synth_labels.csv"), labels)?;
    write_records(cfg, &out.records)?;
    fit_norm(cfg, &out.records)?;
    let attacks = out.records.iter().filter(|r| r.label != 0).count();
    write_report(
        &cfg.out_dir,
        "synth_report",
        &[
            row("records", out.records.len()),
            row("attack_records", attacks),
            row("normal_records", out.records.len() - attacks),
        ],
    )
}

// ---- stage 1 ----

fn load_stage1(cfg: &PipelineConfig) -> Result<(Container, Bigan, MahalanobisStats)> {
    let c = load(&path(cfg, "stage1.fids"), "train-stage1")?;
    let bigan = Bigan {
        encoder: load_model(&c, "encoder")?,
        generator: load_model(&c, "generator")?,
        discriminator: load_model(&c, "discriminator")?,
    };
    let stats = MahalanobisStats::from_tensors(c.get("mahalanobis/mu")?, c.get("mahalanobis/sigma_inv")?)?;
    Ok((c, bigan, stats))
}

fn thresholds(c: &Container) -> Result<ThresholdModel> {
    if !c.tensors.contains_key("thresholds") {
        return Err(CoreError::Container(
            "stage1.fids has no thresholds; run `fit-thresholds` first".into(),
        ));
    }
    ThresholdModel::from_tensor(c.get("thresholds")?)
}

fn train_stage1_cmd(cfg: &PipelineConfig) -> Result<()> {
    let p = Prepared::new(cfg)?;
    let train = p.n(&normal(&p.splits.train));
    let mut bigan = build_bigan(&cfg.stage1, DType::F32)?;
    let log = train_stage1(&cfg.stage1, &mut bigan, &train)?;
    let stats = MahalanobisStats::fit(&train)?;
    let mut c = Container::new();
    c.put_model("encoder", &bigan.encoder.graph, &bigan.encoder.params);
    c.put_model("generator", &bigan.generator.graph, &bigan.generator.params);
    c.put_model("discriminator", &bigan.discriminator.graph, &bigan.discriminator.params);
    let (mu, si) = stats.to_tensors();
    c.put("mahalanobis/mu", mu);
    c.put("mahalanobis/sigma_inv", si);
    c.save(&path(cfg, "stage1.fids"))?;
    let mut csv = String::from("epoch,d_loss,eg_loss,value\n");
    for l in &log {
        let _ = writeln!(csv, "{},{},{},{}", l.epoch, l.d_loss, l.eg_loss, l.value);
    }
    fs::write(path(cfg, "stage1_log.csv"), csv)?;
    let last = log.last();
    write_report(
        &cfg.out_dir,
        "train_stage1",
        &[
            row("variant", format!("{:?}", cfg.stage1.variant)),
            row("train_windows", train.len()),
            row("epochs", log.len()),
            row("final_d_loss", opt(last.map(|l| l.d_loss))),
            row("final_eg_loss", opt(last.map(|l| l.eg_loss))),
            row("final_value", opt(last.map(|l| l.value))),
        ],
    )
}

fn fit_thresholds_cmd(cfg: &PipelineConfig) -> Result<()> {
    let p = Prepared::new(cfg)?;
    let (mut c, bigan, stats) = load_stage1(cfg)?;
    let val = p.n(&normal(&p.splits.val));
    let scores: Vec<f64> = score_windows(&bigan, &stats, cfg.stage1.alpha, &val, 256)?
        .iter()
        .map(|e| e.combined)
        .collect();
    let th = fit_thresholds(&scores, cfg.stage1.alpha)?;
    c.put("thresholds", th.to_tensor());
    c.save(&path(cfg, "stage1.fids"))?;
    write_report(
        &cfg.out_dir,
        "thresholds",
        &[
            row("alpha", th.alpha),
            row("q1", th.q1),
            row("q3", th.q3),
            row("iqr", th.iqr),
            row("ll", th.ll),
            row("ul", th.ul),
            row("quantile_convention", &th.quantile_convention),
            row("validation_windows", val.len()),
        ],
    )
}

// ---- stage 2 ----

fn save_classifier(model: &Model, file: &Path) -> Result<()> {
    let mut c = Container::new();
    c.put_model("classifier", &model.graph, &model.params);
    c.save(file)
}

fn load_classifier(cfg: &PipelineConfig, name: &str, hint: &str) -> Result<Model> {
    load_model(&load(&path(cfg, name), hint)?, "classifier")
}

fn train_log_csv(logs: &[crate::stage2::Stage2EpochLog]) -> String {
    let mut s = String::from("epoch,train_loss,val_accuracy,recon_loss\n");
    for l in logs {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            l.epoch,
            l.train_loss,
            opt(l.val_accuracy),
            opt(l.recon_loss)
        );
    }
    s
}

fn train_stage2_cmd(cfg: &PipelineConfig) -> Result<()> {
    let p = Prepared::new(cfg)?;
    let train = p.n(&attacks(&p.splits.train));
    let val = p.n(&attacks(&p.splits.val));
    let mut model = build_classifier(&cfg.stage2, DType::F32)?;
    let logs = train_stage2(&cfg.stage2, &mut model, None, &train, &val)?;
    save_classifier(&model, &path(cfg, "stage2.fids"))?;
    fs::write(path(cfg, "stage2_log.csv"), train_log_csv(&logs))?;
    let last = logs.last();
    write_report(
        &cfg.out_dir,
        "train_stage2",
        &[
            row("train_windows", train.len()),
            row("val_windows", val.len()),
            row("epochs", logs.len()),
            row("final_train_loss", opt(last.map(|l| l.train_loss))),
            row("final_val_accuracy", opt(last.and_then(|l| l.val_accuracy))),
        ],
    )
}

fn known(cfg: &PipelineConfig, ws: &[FeatureWindow]) -> (Vec<FeatureWindow>, Vec<FeatureWindow>) {
    attacks(ws)
        .into_iter()
        .partition(|w| cfg.unseen.known_classes.contains(&w.label))
}

fn train_unseen_cmd(cfg: &PipelineConfig) -> Result<()> {
    let p = Prepared::new(cfg)?;
    let (train, _) = known(cfg, &p.n(&p.splits.train));
    let (val, _) = known(cfg, &p.n(&p.splits.val));
    let mut model = build_classifier(&cfg.stage2, DType::F32)?;
    let mut head = recon_head(&cfg.stage2, DType::F32)?;
    let logs = train_stage2(
        &cfg.stage2,
        &mut model,
        Some(ReconHead {
            model: &mut head,
            beta: cfg.unseen.beta,
        }),
        &train,
        &val,
    )?;
    let errors: Vec<f64> = recon_errors(&model, &head, &val)?.iter().map(|e| e.0).collect();
    let threshold = unseen_fit(&errors, cfg.unseen.percentile)?;
    let mut c = Container::new();
    c.put_model("classifier", &model.graph, &model.params);
    c.put_model("recon", &head.graph, &head.params);
    c.put("threshold", Tensor::from_f64(vec![1], vec![threshold])?);
    c.save(&path(cfg, "unseen.fids"))?;
    fs::write(path(cfg, "unseen_log.csv"), train_log_csv(&logs))?;
    write_report(
        &cfg.out_dir,
        "train_unseen",
        &[
            row("known_classes", format!("{:?}", cfg.unseen.known_classes).replace(',', ";")),
            row("train_windows", train.len()),
            row("percentile", cfg.unseen.percentile),
            row("threshold", threshold),
        ],
    )
}

fn load_unseen(cfg: &PipelineConfig) -> Result<Option<UnseenDetector>> {
    let p = path(cfg, "unseen.fids");
    if !p.exists() {
        return Ok(None);
    }
    let c = Container::load(&p)?;
    Ok(Some(UnseenDetector {
        classifier: load_model(&c, "classifier")?,
        head: load_model(&c, "recon")?,
        threshold: c.get("threshold")?.to_f64_vec()[0],
    }))
}

// ---- compression ----

fn input_shape(cfg: &PipelineConfig) -> [usize; 2] {
    [FEATURES, cfg.data.window]
}

fn prune_cmd(cfg: &PipelineConfig) -> Result<()> {
    let model = load_classifier(cfg, "stage2.fids", "train-stage2")?;
    let out = prune_filters(&model, &cfg.compress.prune, &input_shape(cfg))?;
    save_classifier(&out.model, &path(cfg, "stage2_pruned.fids"))?;
    let mut rows = vec![row("ratio", cfg.compress.prune.ratio)];
    for (layer, removed) in &out.removed {
        rows.push(row(&format!("removed.{layer}"), removed.len()));
    }
    rows.push(row("parameters_before", model.graph.param_count()));
    rows.push(row("parameters_after", out.model.graph.param_count()));
    write_report(&cfg.out_dir, "prune", &rows)
}

fn finetune_cmd(cfg: &PipelineConfig) -> Result<()> {
    let p = Prepared::new(cfg)?;
    let mut model = load_classifier(cfg, "stage2_pruned.fids", "prune")?;
    let train = p.n(&attacks(&p.splits.train));
    let val = p.n(&attacks(&p.splits.val));
    let before = evaluate(&model, &val, cfg.stage2.num_classes)?.accuracy();
    let logs = finetune(&cfg.stage2, &mut model, &train, &val, cfg.compress.prune.finetune_epochs)?;
    let after = evaluate(&model, &val, cfg.stage2.num_classes)?.accuracy();
    save_classifier(&model, &path(cfg, "stage2_finetuned.fids"))?;
    fs::write(path(cfg, "finetune_log.csv"), train_log_csv(&logs))?;
    write_report(
        &cfg.out_dir,
        "finetune",
        &[
            row("epochs", logs.len()),
            row("val_accuracy_before", before),
            row("val_accuracy_after", after),
        ],
    )
}

fn file_len(p: &Path) -> Result<usize> {
    Ok(fs::metadata(p)?.len() as usize)
}

fn quantize_cmd(cfg: &PipelineConfig) -> Result<()> {
    let p = Prepared::new(cfg)?;
    let original = load_classifier(cfg, "stage2.fids", "train-stage2")?;
    let tuned = load_classifier(cfg, "stage2_finetuned.fids", "finetune")?;
    let qpath = path(cfg, "stage2_quantized.fids");
    let input = input_shape(cfg);
    let after_bytes = if cfg.compress.bits == PASSTHROUGH_BITS {
        if qpath.exists() {
            fs::remove_file(&qpath)?;
        }
        file_len(&path(cfg, "stage2_finetuned.fids"))?
    } else {
        let train = p.n(&attacks(&p.splits.train));
        let subset = calibration_subset(&train, cfg.compress.calibration_windows, cfg.seed);
        let cal = calibrate_windows(&tuned, &subset)?;
        let qm = quantize_model(&tuned, &cal, cfg.compress.bits)?;
        let mut c = Container::new();
        qm.put_into(&mut c, "classifier");
        c.save(&qpath)?;
        file_len(&qpath)?
    };
    let report = ProfileReport {
        before: Snapshot::new(
            &profile(&original.graph, &input)?,
            file_len(&path(cfg, "stage2.fids"))?,
        ),
        after: Snapshot::new(&profile(&tuned.graph, &input)?, after_bytes),
    };
    fs::write(path(cfg, "compression.txt"), report.to_key_values())?;
    fs::write(path(cfg, "compression.csv"), report.to_csv())?;
    Ok(())
}

fn load_quantized(cfg: &PipelineConfig) -> Result<Option<QuantizedModel>> {
    let p = path(cfg, "stage2_quantized.fids");
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(QuantizedModel::from_container(&Container::load(&p)?, "classifier")?))
}

// ---- evaluation and deployment ----

fn evaluate_cmd(cfg: &PipelineConfig) -> Result<()> {
    let p = Prepared::new(cfg)?;
    let (c, bigan, stats) = load_stage1(cfg)?;
    let th = thresholds(&c)?;
    let test = p.n(&p.splits.test);
    let scores = score_windows(&bigan, &stats, th.alpha, &test, 256)?;
    let decisions: Vec<_> = scores
        .iter()
        .zip(&test)
        .map(|(s, w)| (classify_stage1(s.combined, &th, cfg.mode), w.label != 0))
        .collect();
    let m1 = stage1_metrics(&decisions);
    let mut rows = vec![
        row("stage1.normal_recall", opt(m1.normal_recall)),
        row("stage1.anomaly_recall", opt(m1.anomaly_recall)),
        row("stage1.normal_windows", m1.normal_count),
        row("stage1.anomaly_windows", m1.anomaly_count),
    ];

    let classes = cfg.stage2.num_classes;
    let test_att = attacks(&test);
    let float = load_classifier(cfg, "stage2.fids", "train-stage2")?;
    let cm = evaluate(&float, &test_att, classes)?;
    fs::write(path(cfg, "confusion.csv"), cm.to_csv())?;
    push_confusion(&mut rows, "stage2", &cm);

    if let Some(qm) = load_quantized(cfg)? {
        let tuned = load_classifier(cfg, "stage2_finetuned.fids", "finetune")?;
        let refs: Vec<&FeatureWindow> = test_att.iter().collect();
        let q = quantized_classify(&qm, &refs)?;
        let f = crate::stage2::classify_batch(&tuned, &refs)?;
        let agree = q.iter().zip(&f).filter(|(a, b)| a.label == b.label).count();
        let qcm = ConfusionMatrix::from_pairs(
            classes,
            test_att.iter().zip(&q).map(|(w, p)| (w.label - 1, p.label - 1)),
        );
        fs::write(path(cfg, "confusion_quantized.csv"), qcm.to_csv())?;
        push_confusion(&mut rows, "quantized", &qcm);
        rows.push(row("quantized.top1_agreement", agree as f64 / refs.len().max(1) as f64));
    }

    if let Some(u) = load_unseen(cfg)? {
        let (kn, unk) = known(cfg, &test);
        let rate = |ws: &[FeatureWindow]| -> Result<Option<f64>> {
            if ws.is_empty() {
                return Ok(None);
            }
            let e = recon_errors(&u.classifier, &u.head, ws)?;
            Ok(Some(e.iter().filter(|(x, _)| *x > u.threshold).count() as f64 / ws.len() as f64))
        };
        rows.push(row("unseen.flag_rate_unknown", opt(rate(&unk)?)));
        rows.push(row("unseen.false_unknown_rate", opt(rate(&kn)?)));
    }
    write_report(&cfg.out_dir, "evaluation", &rows)
}

fn push_confusion(rows: &mut Vec<(String, String)>, prefix: &str, cm: &ConfusionMatrix) {
    for (k, v) in cm.summary() {
        rows.push(row(&format!("{prefix}.{k}"), v));
    }
}

fn detector(cfg: &PipelineConfig) -> Result<Detector> {
    let (c, bigan, stats) = load_stage1(cfg)?;
    let classifier = match load_quantized(cfg)? {
        Some(q) => Classifier::Quantized(q),
        None => Classifier::Float(load_classifier(cfg, "stage2.fids", "train-stage2")?),
    };
    Ok(Detector {
        norm: read_norm(cfg)?,
        bigan,
        stats,
        thresholds: thresholds(&c)?,
        mode: cfg.mode,
        classifier,
        unseen: load_unseen(cfg)?,
    })
}

fn detect_cmd(cfg: &PipelineConfig) -> Result<()> {
    let records = read_records(cfg)?;
    let raw = Splits::new(cfg, &records)?.test;
    let d = detector(cfg)?;
    let dets = d.detect(&raw)?;
    let mut csv = String::from("sender_id,true_label,score,stage1,stage2\n");
    let (mut flagged, mut unknown) = (0, 0);
    for (w, det) in raw.iter().zip(&dets) {
        let s1 = match det.stage1.deployed_label {
            crate::stage1::Stage1Label::Normal => "normal",
            crate::stage1::Stage1Label::Anomalous => {
                flagged += 1;
                "anomalous"
            }
        };
        unknown += matches!(det.stage2, crate::detect::Stage2Outcome::Unknown) as usize;
        let _ = writeln!(csv, "{},{},{},{s1},{}", det.sender_id, w.label, det.stage1.score, det.stage2);
    }
    fs::write(path(cfg, "detections.csv"), csv)?;
    write_report(
        &cfg.out_dir,
        "detect",
        &[
            row("windows", dets.len()),
            row("stage1_anomalous", flagged),
            row("stage2_unknown", unknown),
            row(
                "mode",
                match cfg.mode {
                    DeployMode::BandLlUl => "band_llul",
                    DeployMode::BandQ1Q3 => "band_q1q3",
                },
            ),
        ],
    )
}

fn bench_cmd(cfg: &PipelineConfig) -> Result<()> {
    let records = read_records(cfg)?;
    let raw = Splits::new(cfg, &records)?.test;
    let d = detector(cfg)?;
    let (report, _) = bench(&d, &raw, cfg.bench.repetitions, cfg.bench.warmup, &cfg.bench.environment)?;
    fs::write(path(cfg, "bench.txt"), report.to_key_values())?;
    fs::write(path(cfg, "bench.csv"), report.to_csv())?;
    Ok(())
}

fn profile_cmd(cfg: &PipelineConfig) -> Result<()> {
    let input = input_shape(cfg);
    let mut parts: Vec<(String, ModelProfile)> = Vec::new();
    if let Ok((_, bigan, _)) = load_stage1(cfg) {
        let e = profile(&bigan.encoder.graph, &input)?;
        let g = profile(&bigan.generator.graph, &[cfg.stage1.latent_dim])?;
        parts.push(("stage1".into(), ModelProfile::combined([&e, &g])));
    }
    for (name, file) in [
        ("stage2", "stage2.fids"),
        ("stage2_compressed", "stage2_finetuned.fids"),
    ] {
        let p = path(cfg, file);
        if p.exists() {
            let m = load_model(&Container::load(&p)?, "classifier")?;
            parts.push((name.into(), profile(&m.graph, &input)?));
        }
    }
    fn find(parts: &[(String, ModelProfile)], n: &str) -> Option<ModelProfile> {
        parts.iter().find(|(k, _)| k == n).map(|(_, p)| p.clone())
    }
    if let (Some(a), Some(b)) = (find(&parts, "stage1"), find(&parts, "stage2")) {
        parts.push(("combined".into(), ModelProfile::combined([&a, &b])));
    }
    if let (Some(a), Some(b)) = (find(&parts, "stage1"), find(&parts, "stage2_compressed")) {
        parts.push(("combined_compressed".into(), ModelProfile::combined([&a, &b])));
    }
    let mut txt = format!("# {CONVENTION}\n");
    let mut csv = String::from("model,parameter_count,macs,flops\n");
    for (name, p) in &parts {
        let _ = writeln!(txt, "{name}.parameter_count={}", p.parameter_count);
        let _ = writeln!(txt, "{name}.macs={}", p.macs);
        let _ = writeln!(txt, "{name}.flops={}", p.flops);
        let _ = writeln!(csv, "{name},{},{},{}", p.parameter_count, p.macs, p.flops);
    }
    if let (Some(a), Some(b)) = (find(&parts, "stage2"), find(&parts, "stage2_compressed")) {
        let _ = writeln!(
            txt,
            "stage2.macs_reduction_pct={:.4}",
            reduction_pct(a.macs as f64, b.macs as f64)
        );
    }
    fs::write(path(cfg, "profile.txt"), txt)?;
    fs::write(path(cfg, "profile.csv"), csv)?;
    Ok(())
}
