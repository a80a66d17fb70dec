//! Checkpoint layout: `SCKP`, u32 header length, JSON header, u32 blob
//! count, then per blob a u16 name length, the UTF-8 name, u32 rank, u32
//! extents and little-endian f32 values.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Hyper, Registry, SemptModel, TEXT_PROMPT, VISUAL_PROMPT};
use crate::encoder::bank::Reader;
use crate::encoder::{Backend, EmbeddingBank, Encoder, EncoderConfig, Prompt, Tokenizer};
use crate::enhancement::{FusionMlp, MLP_PARAM_NAMES};
use crate::error::{Error, Result};
use crate::knowledge::DescriptionSet;
use crate::numcore::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SCKP";
pub const FORMAT: u32 = 1;
const TEXT_PREFIX: &str = "text/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub version: String,
    /// Resolved run configuration, stored verbatim.
    pub run_config: serde_json::Value,
    pub encoder: EncoderConfig,
    pub tokenizer: Option<Tokenizer>,
    pub hyper: Hyper,
    pub model_seed: u64,
    pub registry: Registry,
    pub per_category: usize,
    pub descriptions: IndexMap<String, Vec<String>>,
    pub frozen_checksum: String,
}

fn write_blob(out: &mut Vec<u8>, name: &str, shape: &[usize], values: impl Iterator<Item = f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("blob name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in values {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

pub fn checkpoint_bytes<T: Real>(model: &SemptModel<T>, run_config: serde_json::Value) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: FORMAT,
        version: crate::VERSION.to_string(),
        run_config,
        encoder: model.encoder().config().clone(),
        tokenizer: model.encoder().tokenizer().cloned(),
        hyper: *model.hyper(),
        model_seed: model.seed(),
        registry: model.registry().clone(),
        per_category: model.descriptions().per_category(),
        descriptions: model
            .descriptions()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        frozen_checksum: model.encoder().frozen_checksum(),
    };
    let json = serde_json::to_vec(&header)?;
    let params = model.named_parameters();
    let bank = model.encoder().bank();
    let count = params.len() + bank.map_or(0, EmbeddingBank::len);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in &params {
        write_blob(&mut out, name, t.shape(), t.data().iter().map(|x| x.as_f64() as f32))?;
    }
    if let Some(bank) = bank {
        for (key, v) in bank.iter() {
            write_blob(&mut out, &format!("{TEXT_PREFIX}{key}"), &[v.len()], v.iter().copied())?;
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(model: &SemptModel<T>, run_config: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model, run_config)?).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(SemptModel<f32>, CheckpointHeader)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing SCKP magic".into()));
    }
    let hlen = r.u32()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {}", header.format)));
    }
    let count = r.u32()? as usize;
    let mut params: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut bank = EmbeddingBank::new(header.encoder.embed_dim);
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::Format(format!("blob name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n * 4 > r.remaining() {
            return Err(Error::Format(format!("blob {name:?} is truncated")));
        }
        let values = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if let Some(key) = name.strip_prefix(TEXT_PREFIX) {
            bank.insert(key, values)?;
        } else {
            params.push((name, Tensor::new(shape, values)?));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", r.remaining())));
    }

    let encoder = match header.encoder.backend {
        Backend::Toy => {
            let tok = header
                .tokenizer
                .clone()
                .ok_or_else(|| Error::Format("toy checkpoint lacks a tokenizer".into()))?;
            Encoder::toy(header.encoder.clone(), tok)?
        }
        Backend::Precomputed => Encoder::precomputed(header.encoder.clone(), bank)?,
    };
    if encoder.frozen_checksum() != header.frozen_checksum {
        return Err(Error::Format("frozen encoder checksum does not match the checkpoint".into()));
    }

    let mut descriptions = DescriptionSet::new(header.per_category);
    for (c, d) in &header.descriptions {
        descriptions.insert(c.clone(), d.clone())?;
    }
    let take = |name: &str| params.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());
    let prompt = |name: &str| match take(name) {
        Some(t) => Prompt::from_tensor(t),
        None => Ok(Prompt::empty(header.encoder.input_width)),
    };
    let mlp_tensors = MLP_PARAM_NAMES.map(take);
    if mlp_tensors.iter().any(Option::is_none) {
        return Err(Error::Format("checkpoint lacks fusion MLP tensors".into()));
    }
    let mlp = FusionMlp::from_tensors(mlp_tensors.map(|t| t.expect("checked")))?;
    let model = SemptModel::assemble(
        encoder,
        &descriptions,
        header.registry.clone(),
        header.hyper,
        header.model_seed,
        prompt(VISUAL_PROMPT)?,
        prompt(TEXT_PROMPT)?,
        mlp,
    )?;
    if model.named_parameters().len() != params.len() {
        return Err(Error::Format("checkpoint carries unexpected parameter blobs".into()));
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SemptModel<f32>, CheckpointHeader)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
