//! L1 structured filter pruning with downstream rewiring.

use std::collections::BTreeMap;

use ids_tensor::{GraphSpec, Layer, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    #[default]
    L1,
    /// Seeded random scores, the ablation baseline.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub ratio: f64,
    pub finetune_epochs: usize,
    pub ranking: Ranking,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            finetune_epochs: 10,
            ranking: Ranking::L1,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(CoreError::Config(format!(
                "prune ratio {} outside [0, 1)",
                self.ratio
            )));
        }
        Ok(())
    }

    /// `⌊p·F⌋`.
    pub fn removed_count(&self, filters: usize) -> usize {
        (self.ratio * filters as f64).floor() as usize
    }
}

/// L1 norm of each filter, indexed on the leading (output-channel) axis.
pub fn filter_importance(weight: &Tensor) -> Vec<f64> {
    let shape = weight.shape();
    let filters = shape.first().copied().unwrap_or(0);
    let per = shape.iter().skip(1).product::<usize>();
    weight
        .to_f64_vec()
        .chunks(per.max(1))
        .take(filters)
        .map(|f| f.iter().map(|v| v.abs()).sum())
        .collect()
}

/// Indices of the `count` lowest scores, lower index first on ties, sorted.
pub fn lowest_filters(scores: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = order[..count.min(scores.len())].to_vec();
    out.sort_unstable();
    out
}

/// Copy of `t` restricted to `keep` along `axis`.
pub fn select_axis(t: &Tensor, axis: usize, keep: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let v = t.to_f64_vec();
    let mut out = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * n + k) * inner;
            out.extend_from_slice(&v[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Ok(Tensor::from_values(new_shape, t.dtype(), &out)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub model: Model,
    /// Removed filter indices per pruned conv layer, in original numbering.
    pub removed: BTreeMap<String, Vec<usize>>,
}

/// How a conv layer's output channels reach the next parametric layer.
enum Consumer {
    Conv(usize),
    Lstm(usize),
    /// Linear after a flatten; channels occupy column blocks of `length`.
    FlatLinear { index: usize, length: usize },
}

fn consumer(graph: &GraphSpec, shapes: &[Vec<usize>], conv: usize) -> Option<Consumer> {
    let mut flat_len = None;
    for j in conv + 1..graph.layers.len() {
        match &graph.layers[j] {
            Layer::Relu => {}
            Layer::Flatten if flat_len.is_none() => flat_len = Some(shapes[conv][1]),
            Layer::ConcatSide { .. } if flat_len.is_some() => {}
            Layer::Conv1d { .. } if flat_len.is_none() => return Some(Consumer::Conv(j)),
            Layer::Lstm { .. } if flat_len.is_none() => return Some(Consumer::Lstm(j)),
            Layer::Linear { .. } => {
                return flat_len.map(|length| Consumer::FlatLinear { index: j, length })
            }
            _ => return None,
        }
    }
    None
}

/// Removes the `⌊p·F⌋` least important filters of every conv layer whose
/// output feeds another parametric layer, rewiring that consumer. Scores are
/// taken from the unpruned weights. A conv whose output leaves the graph
/// unchanged in shape (such as a final reconstruction layer) is left intact.
///
/// `input` is the per-sample input shape.
pub fn prune_filters(model: &Model, config: &PruneConfig, input: &[usize]) -> Result<PruneOutcome> {
    config.validate()?;
    let shapes = model.graph.infer_shapes(input)?;
    model.params.validate(&model.graph)?;
    let mut layers = model.graph.layers.clone();
    let mut tensors: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut removed = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    for i in 0..layers.len() {
        let Layer::Conv1d { name, out_ch, .. } = &model.graph.layers[i] else {
            continue;
        };
        let Some(cons) = consumer(&model.graph, &shapes, i) else {
            continue;
        };
        let count = config.removed_count(*out_ch);
        if count == 0 {
            continue;
        }
        if count >= *out_ch {
            return Err(CoreError::EmptyLayer { layer: name.clone() });
        }
        let wname = format!("{name}.weight");
        let scores = match config.ranking {
            Ranking::L1 => filter_importance(model.params.require(&wname)?),
            Ranking::Random => (0..*out_ch).map(|_| rng.random::<f64>()).collect(),
        };
        let drop = lowest_filters(&scores, count);
        let keep: Vec<usize> = (0..*out_ch).filter(|c| drop.binary_search(c).is_err()).collect();

        let bname = format!("{name}.bias");
        let w = select_axis(&tensors[&wname], 0, &keep)?;
        let b = select_axis(&tensors[&bname], 0, &keep)?;
        tensors.insert(wname, w);
        tensors.insert(bname, b);
        if let Layer::Conv1d { out_ch, .. } = &mut layers[i] {
            *out_ch = keep.len();
        }

        match cons {
            Consumer::Conv(j) => {
                let Layer::Conv1d { name: next, in_ch, .. } = &mut layers[j] else {
                    unreachable!()
                };
                *in_ch = keep.len();
                let key = format!("{next}.weight");
                let t = select_axis(&tensors[&key], 1, &keep)?;
                tensors.insert(key, t);
            }
            Consumer::Lstm(j) => {
                let Layer::Lstm {
                    name: next,
                    input_size,
                    bidirectional,
                    ..
                } = &mut layers[j]
                else {
                    unreachable!()
                };
                *input_size = keep.len();
                let suffixes: &[&str] = if *bidirectional { &["", "_rev"] } else { &[""] };
                for s in suffixes {
                    let key = format!("{next}.w_ih{s}");
                    let t = select_axis(&tensors[&key], 1, &keep)?;
                    tensors.insert(key, t);
                }
            }
            Consumer::FlatLinear { index, length } => {
                let old_blocks = out_ch * length;
                let Layer::Linear {
                    name: next,
                    in_features,
                    ..
                } = &mut layers[index]
                else {
                    unreachable!()
                };
                let cols: Vec<usize> = keep
                    .iter()
                    .flat_map(|&c| c * length..(c + 1) * length)
                    .chain(old_blocks..*in_features)
                    .collect();
                *in_features = cols.len();
                let key = format!("{next}.weight");
                let t = select_axis(&tensors[&key], 1, &cols)?;
                tensors.insert(key, t);
            }
        }
        removed.insert(name.clone(), drop);
    }

    let graph = GraphSpec::new(layers);
    let mut params = ParamStore::new();
    for (k, v) in tensors {
        params.insert(k, v);
    }
    params.validate(&graph)?;
    graph.infer_shapes(input)?;
    Ok(PruneOutcome {
        model: Model { graph, params },
        removed,
    })
}
