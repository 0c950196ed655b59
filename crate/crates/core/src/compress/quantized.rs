//! Min-max calibration, static quantization and the integer execution path.

use std::collections::BTreeMap;

use ids_tensor::{forward, forward_with_side, DType, GraphSpec, Layer, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Entry};
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::quant::{compute_qparams, quantize_weights, QuantParams, Scheme};

/// Running min and max of one observed tensor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observer {
    pub min: f64,
    pub max: f64,
}

impl Default for Observer {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl Observer {
    pub fn update(&mut self, values: &[f64]) {
        for &v in values {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    pub fn merge(&mut self, other: &Observer) {
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn is_ready(&self) -> bool {
        self.min.is_finite() && self.max.is_finite() && self.min <= self.max
    }

    pub fn qparams(&self, bits: u8, scheme: Scheme) -> Result<QuantParams> {
        compute_qparams(self.min, self.max, bits, scheme)
    }
}

/// Activation sites of a graph. Site 0 is the input; site `i + 1` is the
/// output of layer `i`. Conv and linear layers are observed after a
/// following ReLU, LSTM and side-concat outputs directly.
pub fn activation_sites(graph: &GraphSpec) -> Vec<usize> {
    let mut sites = vec![0];
    for (i, layer) in graph.layers.iter().enumerate() {
        match layer {
            Layer::Conv1d { .. } | Layer::Linear { .. } => {
                if matches!(graph.layers.get(i + 1), Some(Layer::Relu)) {
                    sites.push(i + 2);
                } else {
                    sites.push(i + 1);
                }
            }
            Layer::Lstm { .. } | Layer::ConcatSide { .. } => sites.push(i + 1),
            _ => {}
        }
    }
    sites
}

/// For each layer, the site whose quantized values reach its input, if any.
fn feeding_sites(graph: &GraphSpec, sites: &BTreeMap<usize, QuantParams>) -> Vec<Option<usize>> {
    let mut cur = sites.contains_key(&0).then_some(0);
    let mut out = Vec::with_capacity(graph.layers.len());
    for (i, layer) in graph.layers.iter().enumerate() {
        out.push(cur);
        cur = if sites.contains_key(&(i + 1)) {
            Some(i + 1)
        } else if matches!(layer, Layer::Relu | Layer::Flatten | Layer::Unflatten { .. }) {
            cur
        } else {
            None
        };
    }
    out
}

/// Names of the tensors stored as int8.
fn weight_names(graph: &GraphSpec) -> Vec<String> {
    let mut out = Vec::new();
    for layer in &graph.layers {
        for (name, _, _) in layer.params() {
            let is_bias = name.rsplit('.').next().is_some_and(|s| s.starts_with("bias"));
            if !is_bias {
                out.push(name);
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub weights: BTreeMap<String, Observer>,
    pub sites: BTreeMap<usize, Observer>,
    pub batches: usize,
}

/// Min-max observers over the calibration batches. `sides` supplies the
/// side input per batch for graphs with a side concat.
pub fn calibrate(model: &Model, batches: &[Tensor], sides: Option<&[Tensor]>) -> Result<Calibration> {
    if batches.is_empty() {
        return Err(CoreError::Empty {
            what: "calibration set",
        });
    }
    let mut cal = Calibration::default();
    for name in weight_names(&model.graph) {
        let mut o = Observer::default();
        o.update(&model.params.require(&name)?.to_f64_vec());
        cal.weights.insert(name, o);
    }
    let sites = activation_sites(&model.graph);
    for (k, x) in batches.iter().enumerate() {
        let side = sides.map(|s| &s[k]);
        let fwd = forward_with_side(&model.graph, &model.params, x, side)?;
        for &s in &sites {
            let values = if s == 0 {
                x.to_f64_vec()
            } else {
                fwd.activations[s - 1].to_f64_vec()
            };
            cal.sites.entry(s).or_default().update(&values);
        }
        cal.batches += 1;
    }
    Ok(cal)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub graph: GraphSpec,
    /// Int8 weights and int32 biases with their parameters; LSTM biases stay
    /// float.
    pub tensors: BTreeMap<String, Entry>,
    pub sites: BTreeMap<usize, QuantParams>,
}

const SITE_PREFIX: &str = "site.";

/// Quantizes weights symmetrically to `bits` and fixes asymmetric
/// parameters for every activation site. Conv and linear biases move to
/// the accumulator domain with scale `s_w·s_x`.
pub fn quantize_model(model: &Model, cal: &Calibration, bits: u8) -> Result<QuantizedModel> {
    if !(2..=8).contains(&bits) {
        return Err(CoreError::Config(format!(
            "weights are stored as int8; bit width {bits} outside 2..=8"
        )));
    }
    let mut sites = BTreeMap::new();
    for s in activation_sites(&model.graph) {
        let o = cal
            .sites
            .get(&s)
            .filter(|o| o.is_ready())
            .ok_or_else(|| CoreError::MissingQParams(format!("site {s}")))?;
        sites.insert(s, o.qparams(bits, Scheme::AsymmetricActivation)?);
    }
    let feed = feeding_sites(&model.graph, &sites);
    let mut tensors = BTreeMap::new();
    for name in weight_names(&model.graph) {
        let w = model.params.require(&name)?;
        let o = cal
            .weights
            .get(&name)
            .ok_or_else(|| CoreError::MissingQParams(name.clone()))?;
        let qp = o.qparams(bits, Scheme::SymmetricWeight)?;
        let q = quantize_weights(&w.to_f64_vec(), &qp);
        tensors.insert(
            name,
            Entry {
                tensor: Tensor::from_i8(w.shape().to_vec(), q)?,
                qparams: Some(qp),
            },
        );
    }
    for (i, layer) in model.graph.layers.iter().enumerate() {
        match layer {
            Layer::Conv1d { name, .. } | Layer::Linear { name, .. } => {
                let site = feed[i].ok_or_else(|| CoreError::MissingQParams(format!("input of layer {i}")))?;
                let s_w = tensors[&format!("{name}.weight")]
                    .qparams
                    .expect("weights carry qparams")
                    .scale;
                let scale = s_w * sites[&site].scale;
                let bname = format!("{name}.bias");
                let b = model.params.require(&bname)?;
                let values = b.to_f64_vec();
                let mut o = Observer::default();
                o.update(&values);
                let q: Vec<i32> = values
                    .iter()
                    .map(|v| (v / scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect();
                tensors.insert(
                    bname,
                    Entry {
                        tensor: Tensor::from_i32(b.shape().to_vec(), q)?,
                        qparams: Some(QuantParams {
                            scale,
                            zero_point: 0,
                            bits: 32,
                            scheme: Scheme::SymmetricWeight,
                            observed_min: o.min,
                            observed_max: o.max,
                        }),
                    },
                );
            }
            Layer::Lstm { .. } => {
                for (name, _, _) in layer.params() {
                    if !tensors.contains_key(&name) {
                        let t = model.params.require(&name)?.clone();
                        tensors.insert(
                            name,
                            Entry {
                                tensor: t,
                                qparams: None,
                            },
                        );
                    }
                }
            }
            _ => {}
        }
    }
    Ok(QuantizedModel {
        graph: model.graph.clone(),
        tensors,
        sites,
    })
}

/// Values flowing between layers.
enum Act {
    Real(Vec<f64>),
    Quant(Vec<i64>, QuantParams),
}

impl Act {
    fn real(self) -> Vec<f64> {
        match self {
            Act::Real(v) => v,
            Act::Quant(q, qp) => q.iter().map(|&v| qp.dequantize(v)).collect(),
        }
    }
}

impl QuantizedModel {
    fn entry(&self, name: &str) -> Result<&Entry> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::MissingQParams(name.to_string()))
    }

    fn int_weight(&self, name: &str) -> Result<(&[i8], QuantParams)> {
        let e = self.entry(name)?;
        let qp = e.qparams.ok_or_else(|| CoreError::MissingQParams(name.to_string()))?;
        Ok((e.tensor.as_i8()?, qp))
    }

    fn int_bias(&self, name: &str) -> Result<(&[i32], f64)> {
        let e = self.entry(name)?;
        let qp = e.qparams.ok_or_else(|| CoreError::MissingQParams(name.to_string()))?;
        Ok((e.tensor.as_i32()?, qp.scale))
    }

    /// Float copy of a layer's parameters with int8 tensors dequantized.
    fn dequantized_params(&self, layer: &Layer) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, shape, _) in layer.params() {
            let e = self.entry(&name)?;
            let values = match (&e.qparams, e.tensor.dtype()) {
                (Some(qp), DType::I8) => e
                    .tensor
                    .as_i8()?
                    .iter()
                    .map(|&q| qp.dequantize(q as i64))
                    .collect(),
                _ => e.tensor.to_f64_vec(),
            };
            store.insert(name, Tensor::from_f64(shape, values)?);
        }
        Ok(store)
    }

    /// Integer conv/linear execution with requantization at each site.
    /// `x` carries a batch axis; the result is real-valued.
    pub fn forward(&self, x: &Tensor, side: Option<&Tensor>) -> Result<Tensor> {
        let feed = feeding_sites(&self.graph, &self.sites);
        let mut shape = x.shape().to_vec();
        let batch = shape[0];
        self.graph.infer_shapes(&shape[1..])?;
        let input_qp = self
            .sites
            .get(&0)
            .ok_or_else(|| CoreError::MissingQParams("site 0".into()))?;
        let mut act = Act::Quant(
            x.to_f64_vec().iter().map(|&v| input_qp.quantize(v)).collect(),
            *input_qp,
        );
        for (i, layer) in self.graph.layers.iter().enumerate() {
            let (next, next_shape) = match layer {
                Layer::Conv1d {
                    name,
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => {
                    let Act::Quant(q, qp) = act else {
                        return Err(CoreError::MissingQParams(format!("input of layer {i}")));
                    };
                    debug_assert!(feed[i].is_some());
                    let (w, _) = self.int_weight(&format!("{name}.weight"))?;
                    let (b, scale) = self.int_bias(&format!("{name}.bias"))?;
                    let len = shape[2];
                    let lout = (len + 2 * padding - kernel) / stride + 1;
                    let z = qp.zero_point as i64;
                    let mut out = vec![0.0; batch * out_ch * lout];
                    for n in 0..batch {
                        for o in 0..*out_ch {
                            for t in 0..lout {
                                let mut acc = b[o];
                                for c in 0..*in_ch {
                                    for k in 0..*kernel {
                                        let pos = (t * stride + k) as isize - *padding as isize;
                                        if pos < 0 || pos as usize >= len {
                                            continue;
                                        }
                                        let xv = q[(n * in_ch + c) * len + pos as usize] - z;
                                        let wv = w[(o * in_ch + c) * kernel + k] as i64;
                                        acc = i32::try_from(wv * xv)
                                            .ok()
                                            .and_then(|p| acc.checked_add(p))
                                            .ok_or(CoreError::AccumulatorOverflow { layer: i })?;
                                    }
                                }
                                out[(n * out_ch + o) * lout + t] = acc as f64 * scale;
                            }
                        }
                    }
                    (Act::Real(out), vec![batch, *out_ch, lout])
                }
                Layer::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    let Act::Quant(q, qp) = act else {
                        return Err(CoreError::MissingQParams(format!("input of layer {i}")));
                    };
                    let (w, _) = self.int_weight(&format!("{name}.weight"))?;
                    let (b, scale) = self.int_bias(&format!("{name}.bias"))?;
                    let z = qp.zero_point as i64;
                    let mut out = vec![0.0; batch * out_features];
                    for n in 0..batch {
                        let row = &q[n * in_features..(n + 1) * in_features];
                        for o in 0..*out_features {
                            let mut acc = b[o];
                            for (f, &xv) in row.iter().enumerate() {
                                let wv = w[o * in_features + f] as i64;
                                acc = i32::try_from(wv * (xv - z))
                                    .ok()
                                    .and_then(|p| acc.checked_add(p))
                                    .ok_or(CoreError::AccumulatorOverflow { layer: i })?;
                            }
                            out[n * out_features + o] = acc as f64 * scale;
                        }
                    }
                    (Act::Real(out), vec![batch, *out_features])
                }
                Layer::Relu => (
                    match act {
                        Act::Real(v) => Act::Real(v.into_iter().map(|x| x.max(0.0)).collect()),
                        Act::Quant(q, qp) => {
                            let z = qp.zero_point as i64;
                            Act::Quant(q.into_iter().map(|v| v.max(z)).collect(), qp)
                        }
                    },
                    shape.clone(),
                ),
                Layer::Flatten => (act, vec![batch, shape[1] * shape[2]]),
                Layer::Unflatten { channels, length } => (act, vec![batch, *channels, *length]),
                Layer::ConcatSide { width } => {
                    let side = side.ok_or_else(|| {
                        CoreError::Config(format!("layer {i} needs a side input"))
                    })?;
                    let s = side.to_f64_vec();
                    let x = act.real();
                    let f = shape[1];
                    let mut out = Vec::with_capacity(batch * (f + width));
                    for n in 0..batch {
                        out.extend_from_slice(&x[n * f..(n + 1) * f]);
                        out.extend_from_slice(&s[n * width..(n + 1) * width]);
                    }
                    (Act::Real(out), vec![batch, f + width])
                }
                Layer::Lstm { .. } | Layer::Softmax => {
                    let params = self.dequantized_params(layer)?;
                    let xin = Tensor::from_f64(shape.clone(), act.real())?;
                    let g = GraphSpec::new(vec![layer.clone()]);
                    let out = forward(&g, &params, &xin)?.output;
                    let s = out.shape().to_vec();
                    (Act::Real(out.to_f64_vec()), s)
                }
            };
            shape = next_shape;
            act = match self.sites.get(&(i + 1)) {
                Some(qp) => {
                    let real = next.real();
                    Act::Quant(real.iter().map(|&v| qp.quantize(v)).collect(), *qp)
                }
                None => next,
            };
        }
        Ok(Tensor::from_f64(shape, act.real())?)
    }

    /// Stores the model under `prefix`. Activation parameters are kept as
    /// empty tensors named `prefix/site.<k>` that carry the qparams.
    pub fn put_into(&self, c: &mut Container, prefix: &str) {
        c.set_meta(
            format!("graph.{prefix}"),
            serde_json::to_string(&self.graph).expect("graph serializes"),
        );
        for (name, e) in &self.tensors {
            c.tensors.insert(format!("{prefix}/{name}"), e.clone());
        }
        for (k, qp) in &self.sites {
            c.put_quantized(
                format!("{prefix}/{SITE_PREFIX}{k}"),
                Tensor::from_f64(vec![0], vec![]).expect("empty tensor"),
                *qp,
            );
        }
    }

    pub fn from_container(c: &Container, prefix: &str) -> Result<Self> {
        let graph: GraphSpec = serde_json::from_str(c.meta(&format!("graph.{prefix}"))?)
            .map_err(|e| CoreError::Container(format!("graph `{prefix}`: {e}")))?;
        let lead = format!("{prefix}/");
        let mut tensors = BTreeMap::new();
        let mut sites = BTreeMap::new();
        for (name, e) in c.tensors.range(lead.clone()..) {
            let Some(local) = name.strip_prefix(&lead) else {
                break;
            };
            match local.strip_prefix(SITE_PREFIX) {
                Some(k) => {
                    let k: usize = k
                        .parse()
                        .map_err(|_| CoreError::Container(format!("bad site `{local}`")))?;
                    let qp = e.qparams.ok_or_else(|| CoreError::MissingQParams(local.into()))?;
                    sites.insert(k, qp);
                }
                None => {
                    tensors.insert(local.to_string(), e.clone());
                }
            }
        }
        for (name, _, _) in graph.param_specs()? {
            if !tensors.contains_key(&name) {
                return Err(CoreError::Container(format!("missing tensor `{name}`")));
            }
        }
        for s in activation_sites(&graph) {
            if !sites.contains_key(&s) {
                return Err(CoreError::MissingQParams(format!("site {s}")));
            }
        }
        Ok(Self {
            graph,
            tensors,
            sites,
        })
    }
}
