//! Self-describing binary checkpoint container.
//!
//! ```text
//! magic        8 bytes   "FNCKPT01"
//! header_len   u64 LE
//! header       header_len bytes of UTF-8 JSON:
//!              { "topology": {...}, "norm": {"<layer>": {"epsilon", "momentum"}},
//!                "tensors": [{"name": "...", "shape": [..]}, ...] }
//! payload      for each header tensor in order: prod(shape) f64 LE values
//! ```
//!
//! Tensors are all entries of `params`, then for every norm layer
//! `<layer>.gamma`, `<layer>.beta`, `<layer>.running_mean`, `<layer>.running_var`.
//! Values are stored as f64 whatever the in-memory scalar, so f32 and f64
//! models both round-trip bit-exactly.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelState, NormHyper, Topology};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FNCKPT01";

#[derive(Serialize, Deserialize)]
struct Header {
    topology: Topology,
    norm: IndexMap<String, NormHyper>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

const NORM_FIELDS: [&str; 4] = ["gamma", "beta", "running_mean", "running_var"];

pub fn to_bytes<T: Scalar>(model: &ModelState<T>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<T>)> = model.params.iter().map(|(n, t)| (n.clone(), t)).collect();
    let mut norm = IndexMap::new();
    for (name, st) in &model.norm_states {
        norm.insert(
            name.clone(),
            NormHyper {
                epsilon: st.epsilon.as_f64(),
                momentum: st.momentum.as_f64(),
            },
        );
        for (field, t) in NORM_FIELDS
            .iter()
            .zip([&st.gamma, &st.beta, &st.running_mean, &st.running_var])
        {
            tensors.push((format!("{name}.{field}"), t));
        }
    }
    let header = Header {
        topology: model.topology.clone(),
        norm,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], origin: &str) -> Result<ModelState<T>> {
    let fail = |reason: String| Error::format(origin, reason);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("missing checkpoint magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail(format!("header length {header_len} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    let mut model = ModelState::<T>::init(header.topology, 0, NormHyper::default())?;
    for (name, hyper) in &header.norm {
        let st = model
            .norm_states
            .get_mut(name)
            .ok_or_else(|| fail(format!("norm layer {name} not in topology")))?;
        st.epsilon = T::lit(hyper.epsilon);
        st.momentum = T::lit(hyper.momentum);
    }
    let mut offset = header_end;
    let mut seen = 0usize;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let end = offset + len * 8;
        if end > bytes.len() {
            return Err(fail(format!("payload truncated in tensor {}", entry.name)));
        }
        let data: Vec<T> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        offset = end;
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        let slot = lookup(&mut model, &entry.name).ok_or_else(|| fail(format!("unknown tensor {}", entry.name)))?;
        slot.same_shape(&tensor, "checkpoint")?;
        *slot = tensor;
        seen += 1;
    }
    let expected = model.params.len() + 4 * model.norm_states.len();
    if seen != expected {
        return Err(fail(format!("expected {expected} tensors, found {seen}")));
    }
    if offset != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok(model)
}

fn lookup<'a, T: Scalar>(model: &'a mut ModelState<T>, name: &str) -> Option<&'a mut Tensor<T>> {
    if model.params.contains_key(name) {
        return model.params.get_mut(name);
    }
    let (layer, field) = name.rsplit_once('.')?;
    let st = model.norm_states.get_mut(layer)?;
    match field {
        "gamma" => Some(&mut st.gamma),
        "beta" => Some(&mut st.beta),
        "running_mean" => Some(&mut st.running_mean),
        "running_var" => Some(&mut st.running_var),
        _ => None,
    }
}

pub fn save<T: Scalar>(model: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}
