//! Binary weight container. The byte layout is described in `docs/format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use ids_tensor::{DType, GraphSpec, ParamStore, Storage, Tensor};

use crate::error::{CoreError, Result};
use crate::quant::{QuantParams, Scheme};

pub const MAGIC: &[u8; 4] = b"FIDS";
pub const VERSION: u8 = 1;
/// Bytes of an encoded [`QuantParams`] record.
pub const QPARAMS_BYTES: usize = 8 + 4 + 1 + 1 + 8 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub tensor: Tensor,
    pub qparams: Option<QuantParams>,
}

/// Named tensors plus string metadata, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(
            name.into(),
            Entry {
                tensor,
                qparams: None,
            },
        );
    }

    pub fn put_quantized(&mut self, name: impl Into<String>, tensor: Tensor, qp: QuantParams) {
        self.tensors.insert(
            name.into(),
            Entry {
                tensor,
                qparams: Some(qp),
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| CoreError::Container(format!("no tensor `{name}`")))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CoreError::Container(format!("no metadata `{key}`")))
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Stores a model under `prefix`: its graph as JSON metadata and every
    /// parameter as `prefix/name`.
    pub fn put_model(&mut self, prefix: &str, graph: &GraphSpec, params: &ParamStore) {
        self.set_meta(
            format!("graph.{prefix}"),
            serde_json::to_string(graph).expect("graph serializes"),
        );
        for (name, t) in params.iter() {
            self.put(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn model(&self, prefix: &str) -> Result<(GraphSpec, ParamStore)> {
        let graph: GraphSpec = serde_json::from_str(self.meta(&format!("graph.{prefix}"))?)
            .map_err(|e| CoreError::Container(format!("graph `{prefix}`: {e}")))?;
        let mut params = ParamStore::new();
        let lead = format!("{prefix}/");
        for (name, e) in self.tensors.range(lead.clone()..) {
            let Some(local) = name.strip_prefix(&lead) else {
                break;
            };
            params.insert(local, e.tensor.clone());
        }
        params.validate(&graph)?;
        Ok((graph, params))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.encoded_len());
        b.extend_from_slice(MAGIC);
        b.push(VERSION);
        b.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            b.extend_from_slice(&(k.len() as u16).to_le_bytes());
            b.extend_from_slice(k.as_bytes());
            b.extend_from_slice(&(v.len() as u32).to_le_bytes());
            b.extend_from_slice(v.as_bytes());
        }
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, e) in &self.tensors {
            let t = &e.tensor;
            b.extend_from_slice(&(name.len() as u16).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.push(t.dtype().code());
            b.push(t.shape().len() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.qparams {
                None => b.push(0),
                Some(q) => {
                    b.push(1);
                    b.extend_from_slice(&q.scale.to_le_bytes());
                    b.extend_from_slice(&q.zero_point.to_le_bytes());
                    b.push(q.bits);
                    b.push(q.scheme.code());
                    b.extend_from_slice(&q.observed_min.to_le_bytes());
                    b.extend_from_slice(&q.observed_max.to_le_bytes());
                }
            }
            match t.storage() {
                Storage::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                Storage::F64(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                Storage::I8(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                Storage::I32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        b
    }

    /// Exact size of [`Container::to_bytes`], computed from the layout alone.
    pub fn encoded_len(&self) -> usize {
        let mut n = MAGIC.len() + 1 + 4;
        for (k, v) in &self.metadata {
            n += 2 + k.len() + 4 + v.len();
        }
        n += 4;
        for (name, e) in &self.tensors {
            n += 2 + name.len() + 1 + 1 + 4 * e.tensor.shape().len() + 1;
            if e.qparams.is_some() {
                n += QPARAMS_BYTES;
            }
            n += e.tensor.payload_bytes();
        }
        n + 4
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(CoreError::Container("bad magic".into()));
        }
        if bytes.len() < 5 {
            return Err(CoreError::Container("truncated header".into()));
        }
        if bytes[4] != VERSION {
            return Err(CoreError::Container(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        if bytes.len() < 9 {
            return Err(CoreError::Container("checksum mismatch".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(CoreError::Container("checksum mismatch".into()));
        }
        let mut r = Reader { b: body, at: 5 };
        let mut c = Container::new();
        for _ in 0..r.u32()? {
            let kl = r.u16()? as usize;
            let k = r.string(kl)?;
            let vl = r.u32()? as usize;
            let v = r.string(vl)?;
            c.metadata.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let nl = r.u16()? as usize;
            let name = r.string(nl)?;
            let code = r.u8()?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| CoreError::Container(format!("unknown dtype code {code}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let qparams = match r.u8()? {
                0 => None,
                1 => {
                    let scale = f64::from_le_bytes(r.take(8)?.try_into().expect("8"));
                    let zero_point = i32::from_le_bytes(r.take(4)?.try_into().expect("4"));
                    let bits = r.u8()?;
                    let sc = r.u8()?;
                    let scheme = Scheme::from_code(sc)
                        .ok_or_else(|| CoreError::Container(format!("unknown scheme {sc}")))?;
                    let observed_min = f64::from_le_bytes(r.take(8)?.try_into().expect("8"));
                    let observed_max = f64::from_le_bytes(r.take(8)?.try_into().expect("8"));
                    Some(QuantParams {
                        scale,
                        zero_point,
                        bits,
                        scheme,
                        observed_min,
                        observed_max,
                    })
                }
                f => return Err(CoreError::Container(format!("bad qparams flag {f}"))),
            };
            let n: usize = shape.iter().product();
            let raw = r.take(n * dtype.size_bytes())?;
            let storage = match dtype {
                DType::F32 => Storage::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                DType::F64 => Storage::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                DType::I8 => Storage::I8(raw.iter().map(|&x| x as i8).collect()),
                DType::I32 => Storage::I32(
                    raw.chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
            };
            c.tensors.insert(
                name,
                Entry {
                    tensor: Tensor::new(shape, storage)?,
                    qparams,
                },
            );
        }
        if r.at != body.len() {
            return Err(CoreError::Container(format!(
                "{} trailing bytes before checksum",
                body.len() - r.at
            )));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| CoreError::Container(format!("truncated at byte {}", self.at)))?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CoreError::Container("name is not UTF-8".into()))
    }
}
