//! Storage-level tensor: a shape plus a contiguous row-major buffer in one of
//! four element types.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I8,
    I32,
}

impl DType {
    /// Stable on-disk code.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I8 => 2,
            DType::I32 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::I8),
            3 => Some(DType::I32),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 => 8,
            DType::I8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "float32",
            DType::F64 => "float64",
            DType::I8 => "int8",
            DType::I32 => "int32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl Storage {
    pub fn len(&self) -> usize {
        match self {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
            Storage::I8(v) => v.len(),
            Storage::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
            Storage::I8(_) => DType::I8,
            Storage::I32(_) => DType::I32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, storage: Storage) -> Result<Self> {
        let expected = numel(&shape);
        if expected != storage.len() {
            return Err(TensorError::ElementCount {
                shape,
                expected,
                actual: storage.len(),
            });
        }
        Ok(Self { shape, storage })
    }

    pub fn from_f64(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(shape, Storage::F64(data))
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, Storage::F32(data))
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::new(shape, Storage::I8(data))
    }

    pub fn from_i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        Self::new(shape, Storage::I32(data))
    }

    /// Builds a float tensor of `dtype`, rounding each value to that precision.
    pub fn from_values(shape: Vec<usize>, dtype: DType, values: &[f64]) -> Result<Self> {
        let storage = match dtype {
            DType::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => Storage::F64(values.to_vec()),
            other => {
                return Err(TensorError::DType {
                    expected: "float32 or float64",
                    actual: other.name(),
                })
            }
        };
        Self::new(shape, storage)
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Self {
        let n = numel(&shape);
        let storage = match dtype {
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::F64 => Storage::F64(vec![0.0; n]),
            DType::I8 => Storage::I8(vec![0; n]),
            DType::I32 => Storage::I32(vec![0; n]),
        };
        Self { shape, storage }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            storage: Storage::F64(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.storage.dtype()
    }

    pub fn numel(&self) -> usize {
        self.storage.len()
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn into_storage(self) -> Storage {
        self.storage
    }

    /// Element values widened to f64 (integers converted exactly).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.storage {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
            Storage::I8(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.storage {
            Storage::F64(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: "float64",
                actual: other.dtype().name(),
            }),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.storage {
            Storage::I8(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: "int8",
                actual: other.dtype().name(),
            }),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.storage {
            Storage::I32(v) => Ok(v),
            other => Err(TensorError::DType {
                expected: "int32",
                actual: other.dtype().name(),
            }),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.numel() {
            return Err(TensorError::ElementCount {
                expected: numel(&shape),
                actual: self.numel(),
                shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Serialized payload size in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        let (a, b) = (start * row, end * row);
        let storage = match &self.storage {
            Storage::F32(v) => Storage::F32(v[a..b].to_vec()),
            Storage::F64(v) => Storage::F64(v[a..b].to_vec()),
            Storage::I8(v) => Storage::I8(v[a..b].to_vec()),
            Storage::I32(v) => Storage::I32(v[a..b].to_vec()),
        };
        Self::new(shape, storage)
    }
}
