//! Structured pruning, fine-tuning, static quantization and profiling.

mod profile;
mod prune;
mod quantized;

pub use profile::{
    profile, reduction_pct, LayerProfile, ModelProfile, ProfileReport, Snapshot, CONVENTION,
};
pub use prune::{
    filter_importance, lowest_filters, prune_filters, select_axis, PruneConfig, PruneOutcome,
    Ranking,
};
pub use quantized::{
    activation_sites, calibrate, quantize_model, Calibration, Observer, QuantizedModel,
};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::data::{batch_tensor, FeatureWindow, FEATURES};
use crate::error::Result;
use crate::model::Model;
use crate::stage2::{train_stage2, ClassProbs, Stage2Config, Stage2EpochLog};

/// Bit width that skips quantization.
pub const PASSTHROUGH_BITS: u8 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressConfig {
    pub prune: PruneConfig,
    /// 2..=8, or 32 to keep float weights.
    pub bits: u8,
    pub calibration_windows: usize,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            prune: PruneConfig::default(),
            bits: 8,
            calibration_windows: 512,
        }
    }
}

/// Runs `epochs` epochs of the classifier objective with fresh optimizer
/// state.
pub fn finetune(
    config: &Stage2Config,
    model: &mut Model,
    train: &[FeatureWindow],
    val: &[FeatureWindow],
    epochs: usize,
) -> Result<Vec<Stage2EpochLog>> {
    model.params.reset_optimizer();
    let cfg = Stage2Config {
        epochs,
        ..config.clone()
    };
    train_stage2(&cfg, model, None, train, val)
}

/// Seeded subset of at most `n` windows, in original order.
pub fn calibration_subset(windows: &[FeatureWindow], n: usize, seed: u64) -> Vec<&FeatureWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, windows.len(), n.min(windows.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &windows[i]).collect()
}

/// Calibrates a classifier on windows, in batches of 256.
pub fn calibrate_windows(model: &Model, windows: &[&FeatureWindow]) -> Result<Calibration> {
    let batches = windows
        .chunks(256)
        .map(batch_tensor)
        .collect::<Result<Vec<_>>>()?;
    calibrate(model, &batches, None)
}

pub fn quantized_classify(qm: &QuantizedModel, windows: &[&FeatureWindow]) -> Result<Vec<ClassProbs>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let y = qm.forward(&batch_tensor(chunk)?, None)?;
        let c = y.shape()[1];
        out.extend(y.to_f64_vec().chunks(c).map(|p| ClassProbs::from_probs(p.to_vec())));
    }
    Ok(out)
}

/// Serialized size of a float model stored under `prefix`.
pub fn float_model_bytes(model: &Model, prefix: &str) -> usize {
    let mut c = Container::new();
    c.put_model(prefix, &model.graph, &model.params);
    c.encoded_len()
}

pub fn quantized_model_bytes(qm: &QuantizedModel, prefix: &str) -> usize {
    let mut c = Container::new();
    qm.put_into(&mut c, prefix);
    c.encoded_len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compressed {
    pub pruned: Model,
    pub quantized: Option<QuantizedModel>,
    pub finetune_log: Vec<Stage2EpochLog>,
    pub report: ProfileReport,
}

/// Prune, fine-tune, calibrate and quantize a trained classifier.
pub fn compress_pipeline(
    model: &Model,
    s2: &Stage2Config,
    config: &CompressConfig,
    train: &[FeatureWindow],
    val: &[FeatureWindow],
) -> Result<Compressed> {
    let input = [FEATURES, s2.window];
    let mut pruned = prune_filters(model, &config.prune, &input)?.model;
    let finetune_log = finetune(s2, &mut pruned, train, val, config.prune.finetune_epochs)?;
    let quantized = if config.bits == PASSTHROUGH_BITS {
        None
    } else {
        let subset = calibration_subset(train, config.calibration_windows, config.prune.seed);
        let cal = calibrate_windows(&pruned, &subset)?;
        Some(quantize_model(&pruned, &cal, config.bits)?)
    };
    let before = Snapshot::new(&profile(&model.graph, &input)?, float_model_bytes(model, "stage2"));
    let after_bytes = match &quantized {
        Some(q) => quantized_model_bytes(q, "stage2"),
        None => float_model_bytes(&pruned, "stage2"),
    };
    let after = Snapshot::new(&profile(&pruned.graph, &input)?, after_bytes);
    Ok(Compressed {
        pruned,
        quantized,
        finetune_log,
        report: ProfileReport { before, after },
    })
}
