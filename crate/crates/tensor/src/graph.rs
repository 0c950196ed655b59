//! Declarative layer stacks.
//!
//! A [`GraphSpec`] is an ordered list of layers applied to a batch. Inputs are
//! laid out `(batch, features, sequence_length)`; the batch axis is implicit
//! in every shape handled here.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv1d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Runs over the sequence axis and emits the final hidden state
    /// (forward and backward final states concatenated when bidirectional).
    Lstm {
        name: String,
        input_size: usize,
        hidden_size: usize,
        bidirectional: bool,
    },
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
    Softmax,
    /// `[C, L]` to `[C*L]`, channel-major.
    Flatten,
    /// `[C*L]` to `[C, L]`.
    Unflatten { channels: usize, length: usize },
    /// Appends a per-sample side input of `width` features to a flat activation.
    ConcatSide { width: usize },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv1d { .. } => "conv1d",
            Layer::Relu => "relu",
            Layer::Lstm { .. } => "lstm",
            Layer::Linear { .. } => "linear",
            Layer::Softmax => "softmax",
            Layer::Flatten => "flatten",
            Layer::Unflatten { .. } => "unflatten",
            Layer::ConcatSide { .. } => "concat_side",
        }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv1d { name, .. } | Layer::Lstm { name, .. } | Layer::Linear { name, .. } => {
                Some(name)
            }
            _ => None,
        }
    }

    /// Parameter tensors owned by this layer as `(name, shape, fan_in)`.
    pub fn params(&self) -> Vec<(String, Vec<usize>, usize)> {
        match self {
            Layer::Conv1d {
                name,
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let fan = in_ch * kernel;
                vec![
                    (format!("{name}.weight"), vec![*out_ch, *in_ch, *kernel], fan),
                    (format!("{name}.bias"), vec![*out_ch], fan),
                ]
            }
            Layer::Linear {
                name,
                in_features,
                out_features,
            } => vec![
                (
                    format!("{name}.weight"),
                    vec![*out_features, *in_features],
                    *in_features,
                ),
                (format!("{name}.bias"), vec![*out_features], *in_features),
            ],
            Layer::Lstm {
                name,
                input_size,
                hidden_size,
                bidirectional,
            } => {
                let h = *hidden_size;
                let mut out = Vec::new();
                for suffix in lstm_directions(*bidirectional) {
                    out.push((format!("{name}.w_ih{suffix}"), vec![4 * h, *input_size], h));
                    out.push((format!("{name}.w_hh{suffix}"), vec![4 * h, h], h));
                    out.push((format!("{name}.bias{suffix}"), vec![4 * h], h));
                }
                out
            }
            _ => vec![],
        }
    }
}

pub(crate) fn lstm_directions(bidirectional: bool) -> &'static [&'static str] {
    if bidirectional {
        &["", "_rev"]
    } else {
        &[""]
    }
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub layers: Vec<Layer>,
}

impl GraphSpec {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Output shape of every layer for a per-sample input shape, validating
    /// compatibility along the way.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for (index, layer) in self.layers.iter().enumerate() {
            let fail = |message: String| TensorError::LayerShape {
                index,
                kind: layer.kind(),
                message,
            };
            cur = match layer {
                Layer::Conv1d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 2 || cur[0] != *in_ch {
                        return Err(fail(format!(
                            "expects [{in_ch}, L] input, got {cur:?}"
                        )));
                    }
                    let l = conv_out_len(cur[1], *kernel, *stride, *padding).ok_or_else(|| {
                        fail(format!("kernel {kernel} does not fit length {}", cur[1]))
                    })?;
                    vec![*out_ch, l]
                }
                Layer::Relu => cur,
                Layer::Lstm {
                    input_size,
                    hidden_size,
                    bidirectional,
                    ..
                } => {
                    if cur.len() != 2 || cur[0] != *input_size || cur[1] == 0 {
                        return Err(fail(format!(
                            "expects [{input_size}, L>0] input, got {cur:?}"
                        )));
                    }
                    vec![hidden_size * lstm_directions(*bidirectional).len()]
                }
                Layer::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if cur.len() != 1 || cur[0] != *in_features {
                        return Err(fail(format!(
                            "expects [{in_features}] input, got {cur:?}"
                        )));
                    }
                    vec![*out_features]
                }
                Layer::Softmax => {
                    if cur.len() != 1 {
                        return Err(fail(format!("expects a flat input, got {cur:?}")));
                    }
                    cur
                }
                Layer::Flatten => {
                    if cur.len() != 2 {
                        return Err(fail(format!("expects [C, L] input, got {cur:?}")));
                    }
                    vec![cur[0] * cur[1]]
                }
                Layer::Unflatten { channels, length } => {
                    if cur.len() != 1 || cur[0] != channels * length {
                        return Err(fail(format!(
                            "cannot view {cur:?} as [{channels}, {length}]"
                        )));
                    }
                    vec![*channels, *length]
                }
                Layer::ConcatSide { width } => {
                    if cur.len() != 1 {
                        return Err(fail(format!("expects a flat input, got {cur:?}")));
                    }
                    vec![cur[0] + width]
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(self
            .infer_shapes(input)?
            .pop()
            .unwrap_or_else(|| input.to_vec()))
    }

    /// All parameter tensors as `(name, shape, fan_in)`, in layer order.
    pub fn param_specs(&self) -> Result<Vec<(String, Vec<usize>, usize)>> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for layer in &self.layers {
            for p in layer.params() {
                if !seen.insert(p.0.clone()) {
                    return Err(TensorError::DuplicateParam(p.0));
                }
                out.push(p);
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Index of the layer named `name`.
    pub fn find(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == Some(name))
    }
}
