//! The deployed two-stage path: score, gate, classify, flag unknowns.

use serde::{Deserialize, Serialize};

use crate::compress::{quantized_classify, QuantizedModel};
use crate::data::{FeatureWindow, NormStats};
use crate::error::Result;
use crate::model::Model;
use crate::stage1::{
    classify_stage1, score_windows, Bigan, DeployMode, MahalanobisStats, Stage1Decision,
    Stage1Label, ThresholdModel,
};
use crate::stage2::{classify_batch, recon_errors, ClassProbs};

pub enum Classifier {
    Float(Model),
    Quantized(QuantizedModel),
}

impl Classifier {
    pub fn classify(&self, windows: &[&FeatureWindow]) -> Result<Vec<ClassProbs>> {
        match self {
            Classifier::Float(m) => classify_batch(m, windows),
            Classifier::Quantized(q) => quantized_classify(q, windows),
        }
    }
}

pub struct UnseenDetector {
    pub classifier: Model,
    pub head: Model,
    pub threshold: f64,
}

pub struct Detector {
    pub norm: NormStats,
    pub bigan: Bigan,
    pub stats: MahalanobisStats,
    pub thresholds: ThresholdModel,
    pub mode: DeployMode,
    pub classifier: Classifier,
    pub unseen: Option<UnseenDetector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Outcome {
    /// Stage 1 judged the window normal.
    Skipped,
    Class(usize),
    Unknown,
}

impl std::fmt::Display for Stage2Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage2Outcome::Skipped => f.write_str("-"),
            Stage2Outcome::Class(c) => write!(f, "{c}"),
            Stage2Outcome::Unknown => f.write_str("unknown"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub sender_id: u64,
    pub stage1: Stage1Decision,
    pub stage2: Stage2Outcome,
}

impl Detector {
    pub fn normalize(&self, raw: &[FeatureWindow]) -> Vec<FeatureWindow> {
        self.norm.apply(raw)
    }

    /// Runs both stages on normalized windows. Stage 2 sees only the
    /// windows Stage 1 labels anomalous.
    pub fn detect_normalized(&self, windows: &[FeatureWindow]) -> Result<Vec<Detection>> {
        let alpha = self.thresholds.alpha;
        let scores = score_windows(&self.bigan, &self.stats, alpha, windows, 256)?;
        let decisions: Vec<Stage1Decision> = scores
            .iter()
            .map(|s| classify_stage1(s.combined, &self.thresholds, self.mode))
            .collect();
        let flagged: Vec<usize> = (0..windows.len())
            .filter(|&i| decisions[i].deployed_label == Stage1Label::Anomalous)
            .collect();
        let mut outcomes = vec![Stage2Outcome::Skipped; windows.len()];
        if !flagged.is_empty() {
            let refs: Vec<&FeatureWindow> = flagged.iter().map(|&i| &windows[i]).collect();
            let probs = self.classifier.classify(&refs)?;
            let unknown = match &self.unseen {
                Some(u) => {
                    let owned: Vec<FeatureWindow> = refs.iter().map(|w| (*w).clone()).collect();
                    recon_errors(&u.classifier, &u.head, &owned)?
                        .iter()
                        .map(|(e, _)| *e > u.threshold)
                        .collect()
                }
                None => vec![false; flagged.len()],
            };
            for ((&i, p), unk) in flagged.iter().zip(probs).zip(unknown) {
                outcomes[i] = if unk {
                    Stage2Outcome::Unknown
                } else {
                    Stage2Outcome::Class(p.label)
                };
            }
        }
        Ok(windows
            .iter()
            .zip(decisions)
            .zip(outcomes)
            .map(|((w, stage1), stage2)| Detection {
                sender_id: w.sender_id,
                stage1,
                stage2,
            })
            .collect())
    }

    pub fn detect(&self, raw: &[FeatureWindow]) -> Result<Vec<Detection>> {
        self.detect_normalized(&self.normalize(raw))
    }
}
