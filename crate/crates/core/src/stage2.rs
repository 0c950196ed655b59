//! CNN-LSTM attack classification and the reconstruction-based unseen-attack
//! flag.

use std::collections::BTreeMap;

use ids_tensor::{
    bind, forward_on_tape, optimizer_step, param_gradients, DType, GraphSpec, Layer,
    OptimizerConfig, Tape, Var,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensor, FeatureWindow, FEATURES};
use crate::error::{CoreError, Result};
use crate::model::{conv, linear, Model};
use crate::stats::quantile;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    LabelSmoothing { alpha_s: f64 },
    Focal { gamma: f64 },
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::LabelSmoothing { alpha_s } if !(0.0..1.0).contains(&alpha_s) => {
                Err(CoreError::Config(format!("alpha_s {alpha_s} outside [0, 1)")))
            }
            LossKind::Focal { gamma } if !(gamma >= 0.0) => {
                Err(CoreError::Config(format!("gamma {gamma} is negative")))
            }
            _ => Ok(()),
        }
    }

    /// Parses the CLI spelling: `ce`, `lsmooth` or `focal`, with default
    /// parameters.
    pub fn from_flag(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "lsmooth" => Ok(LossKind::LabelSmoothing { alpha_s: 0.1 }),
            "focal" => Ok(LossKind::Focal { gamma: 2.0 }),
            _ => Err(CoreError::Config(format!("unknown loss `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LstmKind {
    Unidirectional,
    Bidirectional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub conv_layers: usize,
    pub lstm_kind: LstmKind,
    pub hidden: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub num_classes: usize,
    pub window: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            conv_layers: 2,
            lstm_kind: LstmKind::Unidirectional,
            hidden: 64,
            loss: LossKind::LabelSmoothing { alpha_s: 0.1 },
            optimizer: OptimizerConfig::adam(3e-4),
            epochs: 100,
            num_classes: 19,
            window: 20,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.conv_layers) {
            return Err(CoreError::Config("conv_layers must be 1 or 2".into()));
        }
        if self.num_classes < 2 || self.hidden == 0 || self.window == 0 {
            return Err(CoreError::Config(
                "num_classes ≥ 2, hidden ≥ 1 and window ≥ 1 are required".into(),
            ));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        Ok(())
    }

    pub fn lstm_width(&self) -> usize {
        match self.lstm_kind {
            LstmKind::Unidirectional => self.hidden,
            LstmKind::Bidirectional => 2 * self.hidden,
        }
    }
}

pub fn classifier_graph(config: &Stage2Config) -> Result<GraphSpec> {
    config.validate()?;
    let widths = [32, 64];
    let mut layers = Vec::new();
    let mut ch = FEATURES;
    for (i, w) in widths[..config.conv_layers].iter().enumerate() {
        layers.push(conv(format!("conv{}", i + 1), ch, *w));
        layers.push(Layer::Relu);
        ch = *w;
    }
    layers.push(Layer::Lstm {
        name: "lstm".into(),
        input_size: ch,
        hidden_size: config.hidden,
        bidirectional: config.lstm_kind == LstmKind::Bidirectional,
    });
    layers.push(linear("fc", config.lstm_width(), config.num_classes));
    layers.push(Layer::Softmax);
    let g = GraphSpec::new(layers);
    g.infer_shapes(&[FEATURES, config.window])?;
    Ok(g)
}

pub fn build_classifier(config: &Stage2Config, dtype: DType) -> Result<Model> {
    Model::init(classifier_graph(config)?, dtype, config.optimizer.seed)
}

/// Class index of a 1-based attack label.
pub fn class_index(label: usize, num_classes: usize) -> Result<usize> {
    if label == 0 || label > num_classes {
        return Err(CoreError::LabelRange {
            label,
            classes: num_classes,
        });
    }
    Ok(label - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbs {
    pub probs: Vec<f64>,
    /// 1-based attack label of the most probable class.
    pub label: usize,
}

impl ClassProbs {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let idx = argmax(&probs);
        Self {
            probs,
            label: idx + 1,
        }
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn classify_batch(model: &Model, windows: &[&FeatureWindow]) -> Result<Vec<ClassProbs>> {
    let out = model.forward(&batch_tensor(windows)?)?;
    let c = out.shape()[1];
    Ok(out
        .to_f64_vec()
        .chunks(c)
        .map(|p| ClassProbs::from_probs(p.to_vec()))
        .collect())
}

pub fn classify_forward(model: &Model, window: &FeatureWindow) -> Result<ClassProbs> {
    Ok(classify_batch(model, &[window])?.remove(0))
}

fn check_labels(labels: &[usize], c: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= c) {
        Some(&l) => Err(CoreError::LabelRange {
            label: l,
            classes: c,
        }),
        None => Ok(()),
    }
}

fn floored_log(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Batch-mean cross-entropy. `probs` is row-major `[B, C]`; labels are class
/// indices.
pub fn ce_loss(probs: &[f64], c: usize, labels: &[usize]) -> Result<f64> {
    check_labels(labels, c)?;
    let n = labels.len() as f64;
    Ok(-labels
        .iter()
        .enumerate()
        .map(|(i, &y)| floored_log(probs[i * c + y]))
        .sum::<f64>()
        / n)
}

/// Cross-entropy against `(1 − α)·onehot + α/C`.
pub fn label_smoothing_loss(probs: &[f64], c: usize, labels: &[usize], alpha_s: f64) -> Result<f64> {
    check_labels(labels, c)?;
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..c {
            let q = if j == y { 1.0 - alpha_s } else { 0.0 } + alpha_s / c as f64;
            total += q * floored_log(probs[i * c + j]);
        }
    }
    Ok(-total / n)
}

/// `−mean (1 − p_y)^γ · log p_y`.
pub fn focal_loss(probs: &[f64], c: usize, labels: &[usize], gamma: f64) -> Result<f64> {
    check_labels(labels, c)?;
    let n = labels.len() as f64;
    Ok(-labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let p = probs[i * c + y];
            (1.0 - p).powf(gamma) * floored_log(p)
        })
        .sum::<f64>()
        / n)
}

pub fn loss_value(kind: LossKind, probs: &[f64], c: usize, labels: &[usize]) -> Result<f64> {
    match kind {
        LossKind::Ce => ce_loss(probs, c, labels),
        LossKind::LabelSmoothing { alpha_s } => label_smoothing_loss(probs, c, labels, alpha_s),
        LossKind::Focal { gamma } => focal_loss(probs, c, labels, gamma),
    }
}

/// The configured loss recorded on a tape, for `probs: [B, C]`.
pub fn loss_on_tape(tape: &mut Tape, kind: LossKind, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    let (b, c) = (shape[0], shape[1]);
    check_labels(labels, c)?;
    let mut onehot = vec![0.0; b * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let floored = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.ln(floored)?;
    let weighted = match kind {
        LossKind::Ce => {
            let m = tape.constant(shape, onehot);
            tape.mul(m, logp)?
        }
        LossKind::LabelSmoothing { alpha_s } => {
            let q = onehot
                .iter()
                .map(|o| (1.0 - alpha_s) * o + alpha_s / c as f64)
                .collect();
            let m = tape.constant(shape, q);
            tape.mul(m, logp)?
        }
        LossKind::Focal { gamma } => {
            let m = tape.constant(shape, onehot);
            let picked = tape.mul(m, logp)?;
            if gamma == 0.0 {
                picked
            } else {
                let neg = tape.scale(probs, -1.0)?;
                let one_minus = tape.add_scalar(neg, 1.0)?;
                let focus = tape.powf(one_minus, gamma)?;
                tape.mul(focus, picked)?
            }
        }
    };
    let s = tape.sum(weighted)?;
    Ok(tape.scale(s, -1.0 / b as f64)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
    pub recon_loss: Option<f64>,
}

/// Optional reconstruction head trained alongside the classifier.
pub struct ReconHead<'a> {
    pub model: &'a mut Model,
    /// Weight of the reconstruction MSE in the total loss.
    pub beta: f64,
}

fn labels_of(windows: &[&FeatureWindow], c: usize) -> Result<Vec<usize>> {
    windows.iter().map(|w| class_index(w.label, c)).collect()
}

/// Index of the LSTM layer's output among the activations.
fn lstm_index(g: &GraphSpec) -> Result<usize> {
    g.layers
        .iter()
        .position(|l| matches!(l, Layer::Lstm { .. }))
        .ok_or_else(|| CoreError::Config("classifier has no LSTM layer".into()))
}

/// Adam on the configured loss, optionally jointly with a reconstruction
/// head. Validation accuracy is logged when `val` is nonempty.
pub fn train_stage2(
    config: &Stage2Config,
    model: &mut Model,
    mut recon: Option<ReconHead<'_>>,
    train: &[FeatureWindow],
    val: &[FeatureWindow],
) -> Result<Vec<Stage2EpochLog>> {
    config.validate()?;
    if config.epochs > 0 && train.is_empty() {
        return Err(CoreError::Empty {
            what: "stage-2 training set",
        });
    }
    let c = config.num_classes;
    for w in train.iter().chain(val) {
        class_index(w.label, c)?;
    }
    let lstm_at = lstm_index(&model.graph)?;
    let opt = &config.optimizer;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x5354_4147_4532);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut rtotal, mut batches) = (0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(opt.batch_size).enumerate() {
            let refs: Vec<&FeatureWindow> = idx.iter().map(|&i| &train[i]).collect();
            let labels = labels_of(&refs, c)?;
            let xb = batch_tensor(&refs)?;
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &model.params, true)?;
            let x = tape.tensor(&xb, false)?;
            let acts = forward_on_tape(&mut tape, &model.graph, &bound, x, None)?;
            let probs = *acts.last().expect("nonempty graph");
            let mut loss = loss_on_tape(&mut tape, config.loss, probs, &labels)?;
            let mut rbound = None;
            if let Some(head) = recon.as_mut() {
                let rb = bind(&mut tape, &head.model.params, true)?;
                let r = recon_mse_on_tape(&mut tape, head.model, &rb, acts[lstm_at], x)?;
                rtotal += tape.item(r);
                let wr = tape.scale(r, head.beta)?;
                loss = tape.add(loss, wr)?;
                rbound = Some(rb);
            }
            let lv = tape.item(loss);
            if !lv.is_finite() {
                return Err(CoreError::NonFinite {
                    what: "stage-2",
                    epoch,
                    step,
                });
            }
            total += lv;
            batches += 1;
            let mut all = bound.clone();
            if let Some(rb) = &rbound {
                all.extend(rb.iter().map(|(k, v)| (format!("\u{1}{k}"), *v)));
            }
            let grads = param_gradients(&mut tape, loss, &all)?;
            let (mut gm, mut gr) = (BTreeMap::new(), BTreeMap::new());
            for (k, v) in grads {
                match k.strip_prefix('\u{1}') {
                    Some(n) => gr.insert(n.to_string(), v),
                    None => gm.insert(k, v),
                };
            }
            optimizer_step(&mut model.params, &gm, opt)?;
            if let Some(head) = recon.as_mut() {
                optimizer_step(&mut head.model.params, &gr, opt)?;
            }
        }
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, val, c)?.accuracy())
        };
        logs.push(Stage2EpochLog {
            epoch,
            train_loss: total / batches.max(1) as f64,
            val_accuracy,
            recon_loss: recon.as_ref().map(|_| rtotal / batches.max(1) as f64),
        });
    }
    Ok(logs)
}

fn recon_mse_on_tape(
    tape: &mut Tape,
    head: &Model,
    bound: &ids_tensor::Bound,
    state: Var,
    x: Var,
) -> Result<Var> {
    let rec = *forward_on_tape(tape, &head.graph, bound, state, None)?
        .last()
        .expect("nonempty head");
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, vec![s[0], s[1] * s[2]])?;
    let d = tape.sub(rec, flat)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// Row = true class index, column = predicted class index.
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_pairs(classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::new(classes);
        for (t, p) in pairs {
            m.counts[t][p] += 1;
        }
        m
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }

    fn predicted(&self, class: usize) -> usize {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let hit: usize = (0..self.classes).map(|i| self.counts[i][i]).sum();
        hit as f64 / self.total().max(1) as f64
    }

    /// `None` for classes without support.
    pub fn recall(&self, class: usize) -> Option<f64> {
        let s = self.support(class);
        (s > 0).then(|| self.counts[class][class] as f64 / s as f64)
    }

    /// 0 when the class is never predicted.
    pub fn precision(&self, class: usize) -> f64 {
        let p = self.predicted(class);
        if p == 0 {
            0.0
        } else {
            self.counts[class][class] as f64 / p as f64
        }
    }

    pub fn f1(&self, class: usize) -> f64 {
        let p = self.precision(class);
        let r = self.recall(class).unwrap_or(0.0);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn macro_over_support(&self, f: impl Fn(usize) -> f64) -> f64 {
        let supported: Vec<usize> = (0..self.classes).filter(|&c| self.support(c) > 0).collect();
        if supported.is_empty() {
            return 0.0;
        }
        supported.iter().map(|&c| f(c)).sum::<f64>() / supported.len() as f64
    }

    pub fn macro_precision(&self) -> f64 {
        self.macro_over_support(|c| self.precision(c))
    }

    pub fn macro_recall(&self) -> f64 {
        self.macro_over_support(|c| self.recall(c).unwrap_or(0.0))
    }

    pub fn macro_f1(&self) -> f64 {
        self.macro_over_support(|c| self.f1(c))
    }

    pub fn per_class_recall(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.recall(c)).collect()
    }

    /// Rows are true labels, columns predicted labels, both 1-based.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..self.classes {
            s.push_str(&format!(",{}", c + 1));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&(i + 1).to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("accuracy", self.accuracy()),
            ("macro_precision", self.macro_precision()),
            ("macro_recall", self.macro_recall()),
            ("macro_f1", self.macro_f1()),
        ])
    }
}

pub fn evaluate(model: &Model, test: &[FeatureWindow], classes: usize) -> Result<ConfusionMatrix> {
    if test.is_empty() {
        return Err(CoreError::Empty { what: "test set" });
    }
    let mut m = ConfusionMatrix::new(classes);
    for chunk in test.chunks(256) {
        let refs: Vec<&FeatureWindow> = chunk.iter().collect();
        for (w, p) in chunk.iter().zip(classify_batch(model, &refs)?) {
            m.counts[class_index(w.label, classes)?][p.label - 1] += 1;
        }
    }
    Ok(m)
}

/// The reconstruction head: a linear map from the LSTM state back to the
/// flattened window.
pub fn recon_head(config: &Stage2Config, dtype: DType) -> Result<Model> {
    let g = GraphSpec::new(vec![linear(
        "recon",
        config.lstm_width(),
        FEATURES * config.window,
    )]);
    Model::init(g, dtype, config.optimizer.seed.wrapping_add(7))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnseenConfig {
    /// 1-based attack labels the classifier is trained on.
    pub known_classes: Vec<usize>,
    pub percentile: f64,
    pub beta: f64,
}

impl Default for UnseenConfig {
    fn default() -> Self {
        Self {
            known_classes: (1..=9).collect(),
            percentile: 91.0,
            beta: 1.0,
        }
    }
}

/// Reconstruction MSE and class probabilities per window.
pub fn recon_errors(
    model: &Model,
    head: &Model,
    windows: &[FeatureWindow],
) -> Result<Vec<(f64, ClassProbs)>> {
    let lstm_at = lstm_index(&model.graph)?;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let refs: Vec<&FeatureWindow> = chunk.iter().collect();
        let xb = batch_tensor(&refs)?;
        let fwd = ids_tensor::forward(&model.graph, &model.params, &xb)?;
        let rec = head.forward(&fwd.activations[lstm_at])?.to_f64_vec();
        let probs = fwd.output.to_f64_vec();
        let c = fwd.output.shape()[1];
        let per = rec.len() / chunk.len();
        for (i, w) in chunk.iter().enumerate() {
            let r = &rec[i * per..(i + 1) * per];
            let mse = r
                .iter()
                .zip(&w.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / per as f64;
            out.push((mse, ClassProbs::from_probs(probs[i * c..(i + 1) * c].to_vec())));
        }
    }
    Ok(out)
}

/// The `percentile`-th percentile of validation reconstruction errors.
pub fn unseen_fit(errors: &[f64], percentile: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(CoreError::Empty {
            what: "validation set",
        });
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(CoreError::Config(format!("percentile {percentile} outside (0, 100]")));
    }
    Ok(quantile(errors, percentile / 100.0))
}

#[derive(Clone, Debug, PartialEq)]
pub enum UnseenVerdict {
    Known(ClassProbs),
    Unknown,
}

/// Unknown when the error is strictly above the threshold.
pub fn unseen_detect(error: f64, probs: ClassProbs, threshold: f64) -> UnseenVerdict {
    if error > threshold {
        UnseenVerdict::Unknown
    } else {
        UnseenVerdict::Known(probs)
    }
}
