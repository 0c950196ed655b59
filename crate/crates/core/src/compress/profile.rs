//! Analytic parameter, MAC and FLOP counts plus before/after reports.

use std::fmt::Write as _;

use ids_tensor::{GraphSpec, Layer};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Header line stating the counting convention.
pub const CONVENTION: &str =
    "MACs count multiply-accumulates per sample; FLOPs = 2 x MACs; bias adds excluded";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub index: usize,
    pub kind: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub parameter_count: usize,
    pub macs: u64,
    pub flops: u64,
    pub layers: Vec<LayerProfile>,
}

impl ModelProfile {
    /// Sums several models, for example both stages of a deployment.
    pub fn combined<'a>(parts: impl IntoIterator<Item = &'a ModelProfile>) -> Self {
        let mut out = ModelProfile::default();
        for p in parts {
            out.parameter_count += p.parameter_count;
            out.macs += p.macs;
            out.flops += p.flops;
        }
        out
    }
}

/// Per-sample counts for `graph` on an input of shape `input` (no batch
/// axis).
pub fn profile(graph: &GraphSpec, input: &[usize]) -> Result<ModelProfile> {
    let shapes = graph.infer_shapes(input)?;
    let mut layers = Vec::with_capacity(graph.layers.len());
    let mut prev = input.to_vec();
    for (index, layer) in graph.layers.iter().enumerate() {
        let macs = match layer {
            Layer::Conv1d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => (out_ch * shapes[index][1] * in_ch * kernel) as u64,
            Layer::Linear {
                in_features,
                out_features,
                ..
            } => (in_features * out_features) as u64,
            Layer::Lstm {
                input_size,
                hidden_size,
                bidirectional,
                ..
            } => {
                let dirs = if *bidirectional { 2 } else { 1 };
                let per_step = 4 * (input_size * hidden_size + hidden_size * hidden_size);
                (dirs * per_step * prev[1]) as u64
            }
            _ => 0,
        };
        let params = layer.params().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
        layers.push(LayerProfile {
            index,
            kind: layer.kind().to_string(),
            params,
            macs,
        });
        prev = shapes[index].clone();
    }
    let macs = layers.iter().map(|l| l.macs).sum::<u64>();
    Ok(ModelProfile {
        parameter_count: graph.param_count(),
        macs,
        flops: 2 * macs,
        layers,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub parameter_count: usize,
    pub serialized_bytes: usize,
    pub flops: u64,
    pub macs: u64,
}

impl Snapshot {
    pub fn new(profile: &ModelProfile, serialized_bytes: usize) -> Self {
        Self {
            parameter_count: profile.parameter_count,
            serialized_bytes,
            flops: profile.flops,
            macs: profile.macs,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub before: Snapshot,
    pub after: Snapshot,
}

/// `100·(1 − after/before)`, 0 when `before` is 0.
pub fn reduction_pct(before: f64, after: f64) -> f64 {
    if before == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - after / before)
    }
}

impl ProfileReport {
    pub fn rows(&self) -> Vec<(&'static str, f64, f64)> {
        let (b, a) = (&self.before, &self.after);
        vec![
            ("parameter_count", b.parameter_count as f64, a.parameter_count as f64),
            ("serialized_bytes", b.serialized_bytes as f64, a.serialized_bytes as f64),
            ("flops", b.flops as f64, a.flops as f64),
            ("macs", b.macs as f64, a.macs as f64),
        ]
    }

    pub fn size_reduction_pct(&self) -> f64 {
        reduction_pct(
            self.before.serialized_bytes as f64,
            self.after.serialized_bytes as f64,
        )
    }

    pub fn flops_reduction_pct(&self) -> f64 {
        reduction_pct(self.before.flops as f64, self.after.flops as f64)
    }

    pub fn macs_reduction_pct(&self) -> f64 {
        reduction_pct(self.before.macs as f64, self.after.macs as f64)
    }

    pub fn to_key_values(&self) -> String {
        let mut s = format!("# {CONVENTION}\n");
        for (k, b, a) in self.rows() {
            let _ = writeln!(s, "{k}_before={b}");
            let _ = writeln!(s, "{k}_after={a}");
            let _ = writeln!(s, "{k}_reduction_pct={:.4}", reduction_pct(b, a));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,before,after,reduction_pct\n");
        for (k, b, a) in self.rows() {
            let _ = writeln!(s, "{k},{b},{a},{:.4}", reduction_pct(b, a));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::linear;

    #[test]
    fn hand_counts() {
        let g = GraphSpec::new(vec![Layer::Conv1d {
            name: "c".into(),
            in_ch: 1,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            padding: 0,
        }]);
        let p = profile(&g, &[1, 7]).unwrap();
        assert_eq!((p.macs, p.flops), (15, 30));
        let p = profile(&GraphSpec::new(vec![linear("fc", 4, 3)]), &[4]).unwrap();
        assert_eq!((p.macs, p.parameter_count), (12, 15));
    }

    #[test]
    fn passthrough_reports_zero() {
        let s = Snapshot {
            parameter_count: 10,
            serialized_bytes: 100,
            flops: 4,
            macs: 2,
        };
        let r = ProfileReport {
            before: s.clone(),
            after: s,
        };
        assert_eq!(r.size_reduction_pct(), 0.0);
        assert!(r.to_key_values().contains("macs_reduction_pct=0.0000"));
    }
}
