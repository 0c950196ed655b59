use ids_tensor::{forward_with_side, DType, GraphSpec, Layer, ParamStore, Tensor};

use crate::error::Result;

/// A layer list with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub graph: GraphSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn init(graph: GraphSpec, dtype: DType, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&graph, dtype, seed)?;
        Ok(Self { graph, params })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(forward_with_side(&self.graph, &self.params, x, None)?.output)
    }

    pub fn forward_side(&self, x: &Tensor, side: &Tensor) -> Result<Tensor> {
        Ok(forward_with_side(&self.graph, &self.params, x, Some(side))?.output)
    }
}

pub(crate) fn conv(name: String, in_ch: usize, out_ch: usize) -> Layer {
    Layer::Conv1d {
        name,
        in_ch,
        out_ch,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

pub(crate) fn linear(name: impl Into<String>, in_features: usize, out_features: usize) -> Layer {
    Layer::Linear {
        name: name.into(),
        in_features,
        out_features,
    }
}
