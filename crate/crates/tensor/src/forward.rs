//! Executes a [`GraphSpec`] on a tape.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{conv_out_len, lstm_directions, GraphSpec, Layer};
use crate::params::ParamStore;
use crate::tape::{Tape, Var, ZERO};
use crate::tensor::Tensor;

/// Parameter tensors recorded on a tape, by name.
pub type Bound = BTreeMap<String, Var>;

/// Records every tensor of `params` on `tape`.
pub fn bind(tape: &mut Tape, params: &ParamStore, requires_grad: bool) -> Result<Bound> {
    let mut out = Bound::new();
    for (name, t) in params.iter() {
        if requires_grad && !t.dtype().is_float() {
            return Err(TensorError::QuantizedGradient(name.clone()));
        }
        out.insert(name.clone(), tape.tensor(t, requires_grad)?);
    }
    Ok(out)
}

fn param(bound: &Bound, name: &str) -> Result<Var> {
    bound
        .get(name)
        .copied()
        .ok_or_else(|| TensorError::MissingParam(name.to_string()))
}

/// 1-D convolution of `x: [B, C, L]` with `w: [O, C, K]` and `b: [O]`,
/// lowered to im2col followed by a matrix product.
pub fn conv1d(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    let (batch, ch, len) = (xs[0], xs[1], xs[2]);
    let (out_ch, kernel) = (ws[0], ws[2]);
    let lout = conv_out_len(len, kernel, stride, padding).ok_or(TensorError::ShapeMismatch {
        op: "conv1d",
        lhs: xs.clone(),
        rhs: ws.clone(),
    })?;
    let ck = ch * kernel;
    let mut map = Vec::with_capacity(batch * lout * ck);
    for bi in 0..batch {
        for t in 0..lout {
            for c in 0..ch {
                for k in 0..kernel {
                    let pos = (t * stride + k) as isize - padding as isize;
                    map.push(if pos < 0 || pos as usize >= len {
                        ZERO
                    } else {
                        (bi * ch * len + c * len + pos as usize) as u32
                    });
                }
            }
        }
    }
    let cols = tape.gather(x, map.into(), vec![batch * lout, ck])?;
    let wm = tape.reshape(w, vec![out_ch, ck])?;
    let y = tape.matmul_t(cols, wm, false, true)?; // [B*Lout, O]
    let perm: Arc<[u32]> = (0..batch * out_ch * lout)
        .map(|i| {
            let (bi, rest) = (i / (out_ch * lout), i % (out_ch * lout));
            let (o, t) = (rest / lout, rest % lout);
            ((bi * lout + t) * out_ch + o) as u32
        })
        .collect();
    let y = tape.gather(y, perm, vec![batch, out_ch, lout])?;
    let bmap: Arc<[u32]> = (0..batch * out_ch * lout)
        .map(|i| ((i / lout) % out_ch) as u32)
        .collect();
    let bias = tape.gather(b, bmap, vec![batch, out_ch, lout])?;
    tape.add(y, bias)
}

/// `x: [B, in] · wᵀ + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let batch = tape.shape(x)[0];
    let y = tape.matmul_t(x, w, false, true)?;
    let bias = tape.broadcast_rows(b, batch)?;
    tape.add(y, bias)
}

/// One LSTM cell step. `h`/`c` are `None` at the first step (zero state).
pub fn lstm_cell(
    tape: &mut Tape,
    x_t: Var,
    state: Option<(Var, Var)>,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let batch = tape.shape(x_t)[0];
    let hidden = tape.shape(w_hh)[1];
    let mut gates = tape.matmul_t(x_t, w_ih, false, true)?;
    if let Some((h, _)) = state {
        let rec = tape.matmul_t(h, w_hh, false, true)?;
        gates = tape.add(gates, rec)?;
    }
    let bb = tape.broadcast_rows(bias, batch)?;
    gates = tape.add(gates, bb)?;
    let i = tape.slice_cols(gates, 0, hidden)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice_cols(gates, hidden, 2 * hidden)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
    let g = tape.tanh(g)?;
    let o = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
    let o = tape.sigmoid(o)?;
    let ig = tape.mul(i, g)?;
    let c = match state {
        Some((_, c_prev)) => {
            let fc = tape.mul(f, c_prev)?;
            tape.add(fc, ig)?
        }
        None => ig,
    };
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Column `t` of a `[B, C, L]` sequence as a `[B, C]` matrix.
pub fn time_step(tape: &mut Tape, x: Var, t: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (batch, ch, len) = (s[0], s[1], s[2]);
    let map: Arc<[u32]> = (0..batch * ch)
        .map(|i| (i * len + t) as u32)
        .collect();
    tape.gather(x, map, vec![batch, ch])
}

/// Runs an LSTM over the sequence axis, returning the final hidden state.
pub fn lstm(
    tape: &mut Tape,
    x: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    reverse: bool,
) -> Result<Var> {
    let len = tape.shape(x)[2];
    let mut state = None;
    let steps: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    };
    for t in steps {
        let xt = time_step(tape, x, t)?;
        state = Some(lstm_cell(tape, xt, state, w_ih, w_hh, bias)?);
    }
    Ok(state.expect("sequence length checked > 0").0)
}

/// Applies every layer of `graph` and returns each layer's output.
///
/// `side` feeds [`Layer::ConcatSide`] layers.
pub fn forward_on_tape(
    tape: &mut Tape,
    graph: &GraphSpec,
    bound: &Bound,
    input: Var,
    side: Option<Var>,
) -> Result<Vec<Var>> {
    let in_shape = tape.shape(input).to_vec();
    if in_shape.is_empty() {
        return Err(TensorError::LayerShape {
            index: 0,
            kind: graph.layers.first().map(Layer::kind).unwrap_or("input"),
            message: "input has no batch axis".into(),
        });
    }
    graph.infer_shapes(&in_shape[1..])?;
    let batch = in_shape[0];
    let mut acts = Vec::with_capacity(graph.layers.len());
    let mut cur = input;
    for (index, layer) in graph.layers.iter().enumerate() {
        cur = match layer {
            Layer::Conv1d {
                name,
                stride,
                padding,
                ..
            } => {
                let w = param(bound, &format!("{name}.weight"))?;
                let b = param(bound, &format!("{name}.bias"))?;
                conv1d(tape, cur, w, b, *stride, *padding)?
            }
            Layer::Relu => tape.relu(cur)?,
            Layer::Lstm {
                name,
                bidirectional,
                ..
            } => {
                let mut outs = Vec::new();
                for suffix in lstm_directions(*bidirectional) {
                    let w_ih = param(bound, &format!("{name}.w_ih{suffix}"))?;
                    let w_hh = param(bound, &format!("{name}.w_hh{suffix}"))?;
                    let b = param(bound, &format!("{name}.bias{suffix}"))?;
                    outs.push(lstm(tape, cur, w_ih, w_hh, b, !suffix.is_empty())?);
                }
                match outs.as_slice() {
                    [h] => *h,
                    [f, r] => tape.concat_cols(*f, *r)?,
                    _ => unreachable!(),
                }
            }
            Layer::Linear { name, .. } => {
                let w = param(bound, &format!("{name}.weight"))?;
                let b = param(bound, &format!("{name}.bias"))?;
                linear(tape, cur, w, b)?
            }
            Layer::Softmax => tape.softmax_rows(cur)?,
            Layer::Flatten => {
                let s = tape.shape(cur).to_vec();
                tape.reshape(cur, vec![batch, s[1..].iter().product()])?
            }
            Layer::Unflatten { channels, length } => {
                tape.reshape(cur, vec![batch, *channels, *length])?
            }
            Layer::ConcatSide { width } => {
                let side = side.ok_or_else(|| TensorError::LayerShape {
                    index,
                    kind: layer.kind(),
                    message: "no side input supplied".into(),
                })?;
                if tape.shape(side) != [batch, *width] {
                    return Err(TensorError::LayerShape {
                        index,
                        kind: layer.kind(),
                        message: format!(
                            "side input {:?} is not [{batch}, {width}]",
                            tape.shape(side)
                        ),
                    });
                }
                tape.concat_cols(cur, side)?
            }
        };
        acts.push(cur);
    }
    Ok(acts)
}

/// Result of a standalone forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub output: Tensor,
    /// Output of every layer, in order.
    pub activations: Vec<Tensor>,
}

pub fn forward(graph: &GraphSpec, params: &ParamStore, input: &Tensor) -> Result<ForwardOutput> {
    forward_with_side(graph, params, input, None)
}

pub fn forward_with_side(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    side: Option<&Tensor>,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false)?;
    let x = tape.tensor(input, false)?;
    let side = side.map(|s| tape.tensor(s, false)).transpose()?;
    let acts = forward_on_tape(&mut tape, graph, &bound, x, side)?;
    let activations: Vec<Tensor> = acts.iter().map(|&v| tape.to_tensor(v)).collect();
    let output = activations
        .last()
        .cloned()
        .unwrap_or_else(|| input.clone());
    Ok(ForwardOutput {
        output,
        activations,
    })
}

/// Gradients of `loss` for every bound parameter, as tensors.
pub fn param_gradients(
    tape: &mut Tape,
    loss: Var,
    bound: &Bound,
) -> Result<BTreeMap<String, Tensor>> {
    let names: Vec<&String> = bound.keys().collect();
    let vars: Vec<Var> = bound.values().copied().collect();
    let grads = tape.grad(loss, &vars)?;
    Ok(names
        .into_iter()
        .zip(grads)
        .map(|(n, g)| (n.clone(), tape.to_tensor(g)))
        .collect())
}
