//! BiGAN anomaly scoring.
//!
//! The encoder maps a window to a latent code, the generator maps the code
//! back to a window, and the discriminator judges `(window, code)` pairs.
//! A window's anomaly score mixes its reconstruction MSE with the
//! Mahalanobis distance of the reconstruction from the training data.

use std::collections::BTreeMap;

use ids_tensor::{
    bind, forward_on_tape, optimizer_step, param_gradients, Bound, DType, GraphSpec, Layer,
    OptimizerConfig, Tape, Tensor, Var,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensor, FeatureWindow, FEATURES};
use crate::error::{CoreError, Result};
use crate::model::{conv, linear, Model};
use crate::stats::quantile_sorted;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    WganGp,
    Wgan,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    M7,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::M1,
        Variant::M2,
        Variant::M3,
        Variant::M4,
        Variant::M5,
        Variant::M6,
        Variant::M7,
    ];

    /// `(encoder, generator, discriminator)` layer counts.
    pub fn layers(self) -> (usize, usize, usize) {
        match self {
            Variant::M2 => (6, 4, 4),
            Variant::M3 => (5, 5, 5),
            Variant::M4 => (4, 4, 4),
            Variant::M1 | Variant::M5 | Variant::M6 | Variant::M7 => (5, 4, 4),
        }
    }

    pub fn loss(self) -> GanLoss {
        match self {
            Variant::M5 => GanLoss::Wgan,
            Variant::M6 => GanLoss::Bce,
            _ => GanLoss::WganGp,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| format!("{v:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| CoreError::Config(format!("unknown variant `{s}`")))
    }
}

/// Where the gradient penalty is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyPoint {
    /// The reconstruction `G(E(x))` itself.
    #[default]
    Generated,
    /// A per-sample random mix of `x` and `G(E(x))`.
    Interpolated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub variant: Variant,
    pub window: usize,
    pub latent_dim: usize,
    pub lambda_gp: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Discriminator updates per encoder/generator update.
    pub n_critic: usize,
    pub penalty_point: PenaltyPoint,
    /// Discriminator weight clipping after each update, if set.
    pub clip: Option<f64>,
    /// Weight of the Mahalanobis term in the combined score.
    pub alpha: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            variant: Variant::M1,
            window: 20,
            latent_dim: 100,
            lambda_gp: 10.0,
            optimizer: OptimizerConfig::rmsprop(2e-4),
            epochs: 30,
            n_critic: 1,
            penalty_point: PenaltyPoint::Generated,
            clip: None,
            alpha: 0.5,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_gp < 0.0 || !self.lambda_gp.is_finite() {
            return Err(CoreError::Config("lambda_gp must be nonnegative".into()));
        }
        if self.latent_dim == 0 || self.window == 0 || self.n_critic == 0 {
            return Err(CoreError::Config(
                "latent_dim, window and n_critic must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::Config("alpha must lie in [0, 1]".into()));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

fn widths(convs: usize) -> Vec<usize> {
    match convs {
        0 => vec![],
        1 => vec![32],
        n => std::iter::once(32)
            .chain(std::iter::repeat_n(64, n - 2))
            .chain(std::iter::once(32))
            .collect(),
    }
}

fn too_shallow(net: &str, n: usize, min: usize) -> CoreError {
    CoreError::Config(format!("{net} needs at least {min} layers, got {n}"))
}

/// `n − 1` convolutions then a linear head to the latent code.
pub fn encoder_graph(n: usize, window: usize, latent: usize) -> Result<GraphSpec> {
    if n < 2 {
        return Err(too_shallow("encoder", n, 2));
    }
    let mut layers = Vec::new();
    let mut ch = FEATURES;
    for (i, w) in widths(n - 1).into_iter().enumerate() {
        layers.push(conv(format!("conv{}", i + 1), ch, w));
        layers.push(Layer::Relu);
        ch = w;
    }
    layers.push(Layer::Flatten);
    layers.push(linear("head", ch * window, latent));
    Ok(GraphSpec::new(layers))
}

/// A linear stem to `32 × window` then `n − 1` convolutions down to the
/// feature count. The last convolution is left linear.
pub fn generator_graph(n: usize, window: usize, latent: usize) -> Result<GraphSpec> {
    if n < 2 {
        return Err(too_shallow("generator", n, 2));
    }
    let stem = 32;
    let mut layers = vec![
        linear("stem", latent, stem * window),
        Layer::Relu,
        Layer::Unflatten {
            channels: stem,
            length: window,
        },
    ];
    let convs = n - 1;
    let outs: Vec<usize> = std::iter::repeat_n(64, convs.saturating_sub(2))
        .chain((convs >= 2).then_some(32))
        .chain(std::iter::once(FEATURES))
        .collect();
    let mut ch = stem;
    for (i, w) in outs.iter().enumerate() {
        layers.push(conv(format!("conv{}", i + 1), ch, *w));
        if i + 1 < outs.len() {
            layers.push(Layer::Relu);
        }
        ch = *w;
    }
    Ok(GraphSpec::new(layers))
}

/// Width of the discriminator's joint hidden layer.
pub const JOINT_HIDDEN: usize = 64;

/// `n − 2` convolutions over the window, then the flattened features are
/// joined with the latent code and passed through two linear layers.
pub fn discriminator_graph(n: usize, window: usize, latent: usize) -> Result<GraphSpec> {
    if n < 3 {
        return Err(too_shallow("discriminator", n, 3));
    }
    let mut layers = Vec::new();
    let mut ch = FEATURES;
    for (i, w) in widths(n - 2).into_iter().enumerate() {
        layers.push(conv(format!("conv{}", i + 1), ch, w));
        layers.push(Layer::Relu);
        ch = w;
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::ConcatSide { width: latent });
    layers.push(linear("joint", ch * window + latent, JOINT_HIDDEN));
    layers.push(Layer::Relu);
    layers.push(linear("out", JOINT_HIDDEN, 1));
    Ok(GraphSpec::new(layers))
}

/// Number of convolution and linear layers.
pub fn depth(g: &GraphSpec) -> usize {
    g.layers
        .iter()
        .filter(|l| matches!(l, Layer::Conv1d { .. } | Layer::Linear { .. }))
        .count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bigan {
    pub encoder: Model,
    pub generator: Model,
    pub discriminator: Model,
}

pub fn build_bigan(config: &Stage1Config, dtype: DType) -> Result<Bigan> {
    config.validate()?;
    let (e, g, d) = config.variant.layers();
    let (w, z) = (config.window, config.latent_dim);
    let seed = config.optimizer.seed;
    let bigan = Bigan {
        encoder: Model::init(encoder_graph(e, w, z)?, dtype, seed)?,
        generator: Model::init(generator_graph(g, w, z)?, dtype, seed.wrapping_add(1))?,
        discriminator: Model::init(discriminator_graph(d, w, z)?, dtype, seed.wrapping_add(2))?,
    };
    let out = bigan.generator.graph.output_shape(&[z])?;
    if out != [FEATURES, w] {
        return Err(CoreError::Config(format!(
            "generator emits {out:?}, expected [{FEATURES}, {w}]"
        )));
    }
    Ok(bigan)
}

impl Bigan {
    /// `G(E(x))` for a `[B, FEATURES, w]` batch.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encoder.forward(x)?;
        self.generator.forward(&z)
    }
}

/// The three networks bound on one tape.
pub struct BoundBigan {
    pub e: Bound,
    pub g: Bound,
    pub d: Bound,
}

impl BoundBigan {
    pub fn new(tape: &mut Tape, b: &Bigan, grad_e: bool, grad_g: bool, grad_d: bool) -> Result<Self> {
        Ok(Self {
            e: bind(tape, &b.encoder.params, grad_e)?,
            g: bind(tape, &b.generator.params, grad_g)?,
            d: bind(tape, &b.discriminator.params, grad_d)?,
        })
    }
}

/// Terms of the value function recorded on a tape.
pub struct ValueTerms {
    /// Batch mean of `D(x, E(x))`.
    pub real: Var,
    /// Batch mean of `D(G(E(x)), E(x))`.
    pub fake: Var,
    /// Batch mean of `(‖∇ D‖₂ − 1)²` at the penalty point, or `None` when
    /// `lambda_gp` is zero.
    pub penalty: Option<Var>,
    /// Per-sample raw discriminator outputs, `[B, 1]`.
    pub real_logits: Var,
    pub fake_logits: Var,
}

fn last(v: Vec<Var>) -> Var {
    *v.last().expect("graphs are nonempty")
}

/// Records the value-function terms for batch `x`.
///
/// The penalty point is the generated sample unless `point` asks for
/// interpolation, in which case each sample draws its own mixing weight from
/// `seed`. Gradients of `penalty` reach every bound parameter, including
/// those of `E` and `G` through the penalty point.
pub fn value_terms(
    tape: &mut Tape,
    nets: &Bigan,
    bound: &BoundBigan,
    x: Var,
    with_penalty: bool,
    point: PenaltyPoint,
    seed: u64,
) -> Result<ValueTerms> {
    let z = last(forward_on_tape(tape, &nets.encoder.graph, &bound.e, x, None)?);
    let xr = last(forward_on_tape(tape, &nets.generator.graph, &bound.g, z, None)?);
    let dg = &nets.discriminator.graph;
    let real_logits = last(forward_on_tape(tape, dg, &bound.d, x, Some(z))?);
    let fake_logits = last(forward_on_tape(tape, dg, &bound.d, xr, Some(z))?);
    let real = tape.mean(real_logits)?;
    let fake = tape.mean(fake_logits)?;
    let penalty = if with_penalty {
        let shape = tape.shape(x).to_vec();
        let batch = shape[0];
        let flat: usize = shape[1..].iter().product();
        let point = match point {
            PenaltyPoint::Generated => xr,
            PenaltyPoint::Interpolated => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let eps: Vec<f64> = (0..batch)
                    .flat_map(|_| {
                        let e = rng.random::<f64>();
                        std::iter::repeat_n(e, flat)
                    })
                    .collect();
                let e = tape.constant(shape.clone(), eps.clone());
                let one_minus = tape.constant(shape.clone(), eps.iter().map(|v| 1.0 - v).collect());
                let a = tape.mul(e, x)?;
                let b = tape.mul(one_minus, xr)?;
                tape.add(a, b)?
            }
        };
        // The penalty point must be differentiable even when E and G are frozen.
        let point = if tape.requires_grad(point) {
            point
        } else {
            tape.detach(point, true)?
        };
        let d_hat = last(forward_on_tape(tape, dg, &bound.d, point, Some(z))?);
        let s = tape.sum(d_hat)?;
        let g = tape.grad(s, &[point])?[0];
        let g = tape.reshape(g, vec![batch, flat])?;
        let g2 = tape.square(g)?;
        let n2 = tape.sum_rows(g2)?;
        let n = tape.sqrt(n2)?;
        let dev = tape.add_scalar(n, -1.0)?;
        let sq = tape.square(dev)?;
        Some(tape.mean(sq)?)
    } else {
        None
    };
    Ok(ValueTerms {
        real,
        fake,
        penalty,
        real_logits,
        fake_logits,
    })
}

/// `mean D(x,E(x)) − mean D(G(E(x)),E(x)) + λ·mean(‖∇D‖₂ − 1)²`.
pub fn wgan_gp_value(
    nets: &Bigan,
    batch: &Tensor,
    lambda_gp: f64,
    point: PenaltyPoint,
    seed: u64,
) -> Result<f64> {
    if batch.shape().first().copied().unwrap_or(0) == 0 {
        return Err(CoreError::Empty { what: "batch" });
    }
    let mut tape = Tape::new();
    let bound = BoundBigan::new(&mut tape, nets, false, false, false)?;
    let x = tape.tensor(batch, false)?;
    let t = value_terms(&mut tape, nets, &bound, x, lambda_gp != 0.0, point, seed)?;
    let v = value_on_tape(&mut tape, &t, lambda_gp)?;
    Ok(tape.item(v))
}

/// Combines recorded terms into the value function.
pub fn value_on_tape(tape: &mut Tape, t: &ValueTerms, lambda_gp: f64) -> Result<Var> {
    let adv = tape.sub(t.real, t.fake)?;
    Ok(match t.penalty {
        Some(p) => {
            let lp = tape.scale(p, lambda_gp)?;
            tape.add(adv, lp)?
        }
        None => adv,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub d_loss: f64,
    pub eg_loss: f64,
    pub value: f64,
}

fn mean_softplus(tape: &mut Tape, v: Var, sign: f64) -> Result<Var> {
    let s = tape.scale(v, sign)?;
    let sp = tape.softplus(s)?;
    Ok(tape.mean(sp)?)
}

fn check_finite(v: f64, what: &'static str, epoch: usize, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFinite { what, epoch, step })
    }
}

/// Alternating adversarial training.
///
/// The discriminator descends `−(real − fake) + λ·penalty` (the negated
/// value function), then the encoder and generator descend `real − fake`.
/// The BCE variant uses the logistic losses instead.
pub fn train_stage1(
    config: &Stage1Config,
    nets: &mut Bigan,
    train: &[FeatureWindow],
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if config.epochs > 0 && train.is_empty() {
        return Err(CoreError::Empty { what: "stage-1 training set" });
    }
    let opt = &config.optimizer;
    let loss_kind = config.variant.loss();
    let with_penalty = loss_kind == GanLoss::WganGp && config.lambda_gp > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed ^ 0x5354_4147_4531);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut log = EpochLog {
            epoch,
            ..Default::default()
        };
        let mut batches = 0usize;
        for (step, idx) in order.chunks(opt.batch_size).enumerate() {
            let refs: Vec<&FeatureWindow> = idx.iter().map(|&i| &train[i]).collect();
            let xb = batch_tensor(&refs)?;

            for _ in 0..config.n_critic {
                let mut tape = Tape::new();
                let bound = BoundBigan::new(&mut tape, nets, false, false, true)?;
                let x = tape.tensor(&xb, false)?;
                let t = value_terms(
                    &mut tape,
                    nets,
                    &bound,
                    x,
                    with_penalty,
                    config.penalty_point,
                    rng.random(),
                )?;
                let loss = match loss_kind {
                    GanLoss::Bce => {
                        let a = mean_softplus(&mut tape, t.real_logits, -1.0)?;
                        let b = mean_softplus(&mut tape, t.fake_logits, 1.0)?;
                        tape.add(a, b)?
                    }
                    _ => {
                        let adv = tape.sub(t.fake, t.real)?;
                        match t.penalty {
                            Some(p) => {
                                let lp = tape.scale(p, config.lambda_gp)?;
                                tape.add(adv, lp)?
                            }
                            None => adv,
                        }
                    }
                };
                let lv = tape.item(loss);
                check_finite(lv, "discriminator", epoch, step)?;
                let v = value_on_tape(&mut tape, &t, config.lambda_gp)?;
                log.value += tape.item(v);
                log.d_loss += lv;
                let grads = param_gradients(&mut tape, loss, &bound.d)?;
                optimizer_step(&mut nets.discriminator.params, &grads, opt)?;
                if let Some(c) = config.clip {
                    clip_params(&mut nets.discriminator, c)?;
                }
            }

            let mut tape = Tape::new();
            let bound = BoundBigan::new(&mut tape, nets, true, true, false)?;
            let x = tape.tensor(&xb, false)?;
            let t = value_terms(&mut tape, nets, &bound, x, false, config.penalty_point, 0)?;
            let loss = match loss_kind {
                GanLoss::Bce => {
                    let a = mean_softplus(&mut tape, t.real_logits, 1.0)?;
                    let b = mean_softplus(&mut tape, t.fake_logits, -1.0)?;
                    tape.add(a, b)?
                }
                _ => tape.sub(t.real, t.fake)?,
            };
            let lv = tape.item(loss);
            check_finite(lv, "encoder/generator", epoch, step)?;
            log.eg_loss += lv;
            let mut both: Bound = bound.e.clone();
            both.extend(bound.g.iter().map(|(k, v)| (format!("\u{1}{k}"), *v)));
            let grads = param_gradients(&mut tape, loss, &both)?;
            let (mut ge, mut gg) = (BTreeMap::new(), BTreeMap::new());
            for (k, v) in grads {
                match k.strip_prefix('\u{1}') {
                    Some(n) => gg.insert(n.to_string(), v),
                    None => ge.insert(k, v),
                };
            }
            optimizer_step(&mut nets.encoder.params, &ge, opt)?;
            optimizer_step(&mut nets.generator.params, &gg, opt)?;
            batches += 1;
        }
        let critic_steps = (batches * config.n_critic).max(1) as f64;
        log.d_loss /= critic_steps;
        log.value /= critic_steps;
        log.eg_loss /= batches.max(1) as f64;
        logs.push(log);
    }
    Ok(logs)
}

fn clip_params(m: &mut Model, c: f64) -> Result<()> {
    let names = m.params.trainable_names();
    for n in names {
        let t = m.params.require(&n)?;
        let v: Vec<f64> = t.to_f64_vec().iter().map(|x| x.clamp(-c, c)).collect();
        let clipped = Tensor::from_values(t.shape().to_vec(), t.dtype(), &v)?;
        // keep optimizer memory across the in-place edit
        m.params.replace_values(&n, clipped)?;
    }
    Ok(())
}

/// Mean and regularized inverse covariance of flattened training windows.
#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisStats {
    pub mu: Vec<f64>,
    /// Row-major `dim × dim`.
    pub sigma_inv: Vec<f64>,
}

/// Ridge added to the covariance diagonal, relative to its mean variance.
pub const RIDGE: f64 = 1e-6;

impl MahalanobisStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Fits on flattened windows with population covariance, regularized by
    /// `Σ + εI`, `ε = 1e-6·trace(Σ)/dim`.
    pub fn fit(windows: &[FeatureWindow]) -> Result<Self> {
        let first = windows.first().ok_or(CoreError::Empty {
            what: "Mahalanobis training set",
        })?;
        let dim = first.values.len();
        let n = windows.len() as f64;
        let mut mu = vec![0.0; dim];
        for w in windows {
            for (m, v) in mu.iter_mut().zip(&w.values) {
                *m += v / n;
            }
        }
        let data = DMatrix::from_fn(windows.len(), dim, |r, c| windows[r].values[c] - mu[c]);
        let mut cov = data.transpose() * &data / n;
        let eps = RIDGE * cov.trace() / dim as f64;
        let eps = if eps > 0.0 { eps } else { RIDGE };
        for i in 0..dim {
            cov[(i, i)] += eps;
        }
        Self::from_covariance(mu, cov)
    }

    pub fn from_covariance(mu: Vec<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let dim = mu.len();
        let chol = cov.cholesky().ok_or(CoreError::NotPositiveDefinite)?;
        let inv = chol.inverse();
        let sym = (&inv + inv.transpose()) * 0.5;
        // row-major copy; nalgebra stores columns
        let sigma_inv = (0..dim * dim).map(|k| sym[(k / dim, k % dim)]).collect();
        Ok(Self { mu, sigma_inv })
    }

    pub fn identity(dim: usize) -> Self {
        let mut sigma_inv = vec![0.0; dim * dim];
        for i in 0..dim {
            sigma_inv[i * dim + i] = 1.0;
        }
        Self {
            mu: vec![0.0; dim],
            sigma_inv,
        }
    }

    /// `sqrt((v − μ)ᵀ Σ⁻¹ (v − μ))`.
    pub fn distance(&self, v: &[f64]) -> f64 {
        let d = DVector::from_iterator(self.dim(), v.iter().zip(&self.mu).map(|(a, m)| a - m));
        let s = DMatrix::from_row_slice(self.dim(), self.dim(), &self.sigma_inv);
        (d.dot(&(s * &d))).max(0.0).sqrt()
    }

    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let dim = self.dim();
        (
            Tensor::from_f64(vec![dim], self.mu.clone()).expect("vector"),
            Tensor::from_f64(vec![dim, dim], self.sigma_inv.clone()).expect("matrix"),
        )
    }

    pub fn from_tensors(mu: &Tensor, sigma_inv: &Tensor) -> Result<Self> {
        let dim = mu.numel();
        if sigma_inv.shape() != [dim, dim] {
            return Err(CoreError::Container("Mahalanobis matrix shape".into()));
        }
        Ok(Self {
            mu: mu.to_f64_vec(),
            sigma_inv: sigma_inv.to_f64_vec(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconError {
    pub mse: f64,
    pub d_m: f64,
    pub combined: f64,
}

/// MSE between `x` and `x_rec`, Mahalanobis distance of `x_rec`, and their
/// mix `α·d_m + (1 − α)·mse`.
pub fn reconstruction_error(
    x: &[f64],
    x_rec: &[f64],
    stats: &MahalanobisStats,
    alpha: f64,
) -> ReconError {
    assert_eq!(x.len(), x_rec.len(), "window and reconstruction differ in size");
    let mse = x
        .iter()
        .zip(x_rec)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    let d_m = stats.distance(x_rec);
    ReconError {
        mse,
        d_m,
        combined: alpha * d_m + (1.0 - alpha) * mse,
    }
}

/// Scores windows in batches of `batch`.
pub fn score_windows(
    nets: &Bigan,
    stats: &MahalanobisStats,
    alpha: f64,
    windows: &[FeatureWindow],
    batch: usize,
) -> Result<Vec<ReconError>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch.max(1)) {
        let refs: Vec<&FeatureWindow> = chunk.iter().collect();
        let rec = nets.reconstruct(&batch_tensor(&refs)?)?.to_f64_vec();
        let per = rec.len() / chunk.len();
        for (w, r) in chunk.iter().zip(rec.chunks(per)) {
            out.push(reconstruction_error(&w.values, r, stats, alpha));
        }
    }
    Ok(out)
}

pub const QUANTILE_CONVENTION: &str = "linear_interpolation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdModel {
    pub alpha: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub ll: f64,
    pub ul: f64,
    pub quantile_convention: String,
}

pub fn fit_thresholds(scores: &[f64], alpha: f64) -> Result<ThresholdModel> {
    if scores.len() < 4 {
        return Err(CoreError::Config(format!(
            "threshold fitting needs at least 4 scores, got {}",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Config("non-finite score".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    Ok(ThresholdModel {
        alpha,
        q1,
        q3,
        iqr,
        ll: q1 - 1.5 * iqr,
        ul: q3 + 1.5 * iqr,
        quantile_convention: QUANTILE_CONVENTION.into(),
    })
}

impl ThresholdModel {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(
            vec![6],
            vec![self.alpha, self.q1, self.q3, self.iqr, self.ll, self.ul],
        )
        .expect("fixed shape")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let v = t.to_f64_vec();
        let [alpha, q1, q3, iqr, ll, ul] = v[..] else {
            return Err(CoreError::Container("threshold tensor must hold 6 values".into()));
        };
        Ok(Self {
            alpha,
            q1,
            q3,
            iqr,
            ll,
            ul,
            quantile_convention: QUANTILE_CONVENTION.into(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeployMode {
    /// Anomalous outside `[ll, ul]`.
    #[default]
    #[serde(rename = "band_llul")]
    BandLlUl,
    /// Anomalous outside `[q1, q3]`.
    #[serde(rename = "band_q1q3")]
    BandQ1Q3,
}

impl std::str::FromStr for DeployMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "band_llul" => Ok(DeployMode::BandLlUl),
            "band_q1q3" => Ok(DeployMode::BandQ1Q3),
            _ => Err(CoreError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Decision {
    pub score: f64,
    /// `score < q1 || score > q3`.
    pub anomaly_rule_fired: bool,
    /// `ll ≤ score ≤ ul`.
    pub normal_rule_fired: bool,
    pub deployed_label: Stage1Label,
}

pub fn classify_stage1(score: f64, model: &ThresholdModel, mode: DeployMode) -> Stage1Decision {
    let anomaly_rule_fired = score < model.q1 || score > model.q3;
    let normal_rule_fired = model.ll <= score && score <= model.ul;
    let anomalous = match mode {
        DeployMode::BandLlUl => !normal_rule_fired,
        DeployMode::BandQ1Q3 => !(model.q1 <= score && score <= model.q3),
    };
    Stage1Decision {
        score,
        anomaly_rule_fired,
        normal_rule_fired,
        deployed_label: if anomalous {
            Stage1Label::Anomalous
        } else {
            Stage1Label::Normal
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Metrics {
    pub normal_recall: Option<f64>,
    pub anomaly_recall: Option<f64>,
    pub normal_count: usize,
    pub anomaly_count: usize,
}

/// Recall per ground-truth group: normal windows count as recalled when the
/// normal rule fires, anomalous ones when the anomaly rule fires.
pub fn stage1_metrics(decisions: &[(Stage1Decision, bool)]) -> Stage1Metrics {
    let (mut n, mut nh, mut a, mut ah) = (0usize, 0usize, 0usize, 0usize);
    for (d, is_anomaly) in decisions {
        if *is_anomaly {
            a += 1;
            ah += d.anomaly_rule_fired as usize;
        } else {
            n += 1;
            nh += d.normal_rule_fired as usize;
        }
    }
    let frac = |hit: usize, tot: usize| (tot > 0).then(|| hit as f64 / tot as f64);
    Stage1Metrics {
        normal_recall: frac(nh, n),
        anomaly_recall: frac(ah, a),
        normal_count: n,
        anomaly_count: a,
    }
}
