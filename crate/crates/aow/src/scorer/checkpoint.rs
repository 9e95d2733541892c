//! Binary model checkpoints.
//!
//! Layout: magic `AOW1`, version (u32 LE), kind byte, vocab size (u64 LE),
//! length-prefixed config and metadata JSON blobs, then length-prefixed named
//! tensors: name (u32 + UTF-8), dim count (u32), dims (u64 each), payload of
//! little-endian 32-bit floats. Neural parameters are kept on the f32 grid in
//! memory, so a save/load round trip reproduces identical scores.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ItemId;
use crate::error::{Error, Result};

use super::markov::MarkovScorer;
use super::neural::NeuralScorer;
use super::{ScorerModel, TrainConfig};

const MAGIC: &[u8; 4] = b"AOW1";
const VERSION: u32 = 1;
const KIND_MARKOV: u8 = 0;
const KIND_NEURAL: u8 = 1;

// Counts ride in f32 payloads; beyond 2^24 they would silently lose
// precision, so refuse to write them.
const MAX_EXACT_F32: u64 = 1 << 24;

#[derive(Serialize, Deserialize)]
struct MarkovConfig {
    order: usize,
    smoothing: f64,
}

#[derive(Serialize, Deserialize, Default)]
struct NeuralMeta {
    trained_epochs: usize,
    best_epoch: usize,
    final_loss: f64,
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn write_tensor(out: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    out.write_all(&(t.name.len() as u32).to_le_bytes())?;
    out.write_all(t.name.as_bytes())?;
    out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for &d in &t.dims {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    debug_assert_eq!(t.dims.iter().product::<usize>(), t.data.len());
    for &v in &t.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let name = self.string()?;
        let dim_count = self.u32()? as usize;
        if dim_count > 8 {
            return Err(Error::Checkpoint(format!(
                "implausible dim count {dim_count} for tensor `{name}`"
            )));
        }
        let mut dims = Vec::with_capacity(dim_count);
        for _ in 0..dim_count {
            dims.push(self.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let bytes = self.take(len * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor { name, dims, data })
    }
}

fn markov_tensors(m: &MarkovScorer) -> Result<Vec<Tensor>> {
    let to_f32 = |v: u64| -> Result<f32> {
        if v > MAX_EXACT_F32 {
            return Err(Error::Checkpoint(format!(
                "count {v} exceeds exact f32 range"
            )));
        }
        Ok(v as f32)
    };
    let popularity: Vec<f32> = m
        .popularity()
        .iter()
        .map(|&c| to_f32(c))
        .collect::<Result<_>>()?;
    let contexts = m.contexts();
    let num_ctx = contexts.len();
    let mut ctx_items = Vec::with_capacity(num_ctx * m.order());
    let mut row_offsets = Vec::with_capacity(num_ctx + 1);
    let mut entry_items = Vec::new();
    let mut entry_counts = Vec::new();
    row_offsets.push(0.0f32);
    for (ctx, counts) in contexts {
        for &item in ctx {
            ctx_items.push(item as f32);
        }
        for (&item, &count) in counts {
            entry_items.push(item as f32);
            entry_counts.push(to_f32(count as u64)?);
        }
        row_offsets.push(to_f32(entry_items.len() as u64)?);
    }
    Ok(vec![
        Tensor {
            name: "popularity".into(),
            dims: vec![popularity.len()],
            data: popularity,
        },
        Tensor {
            name: "ctx.items".into(),
            dims: vec![num_ctx, m.order()],
            data: ctx_items,
        },
        Tensor {
            name: "ctx.row_offsets".into(),
            dims: vec![num_ctx + 1],
            data: row_offsets,
        },
        Tensor {
            name: "ctx.entry_items".into(),
            dims: vec![entry_items.len()],
            data: entry_items,
        },
        Tensor {
            name: "ctx.entry_counts".into(),
            dims: vec![entry_counts.len()],
            data: entry_counts,
        },
    ])
}

/// Serialize a model to the binary checkpoint format.
pub fn save_checkpoint(model: &ScorerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    buf.write_all(MAGIC).map_err(io_err)?;
    buf.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    match model {
        ScorerModel::Markov(m) => {
            buf.push(KIND_MARKOV);
            buf.write_all(&(m.vocab_size() as u64).to_le_bytes())
                .map_err(io_err)?;
            let config = serde_json::to_vec(&MarkovConfig {
                order: m.order(),
                smoothing: m.smoothing(),
            })
            .expect("markov config serializes");
            buf.write_all(&(config.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            buf.write_all(&config).map_err(io_err)?;
            let meta = b"{}";
            buf.write_all(&(meta.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            buf.write_all(meta).map_err(io_err)?;
            let tensors = markov_tensors(m)?;
            buf.write_all(&(tensors.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            for t in &tensors {
                write_tensor(&mut buf, t).map_err(io_err)?;
            }
        }
        ScorerModel::Neural(m) => {
            buf.push(KIND_NEURAL);
            buf.write_all(&(m.vocab_size() as u64).to_le_bytes())
                .map_err(io_err)?;
            let config = serde_json::to_vec(m.config()).expect("train config serializes");
            buf.write_all(&(config.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            buf.write_all(&config).map_err(io_err)?;
            let meta = serde_json::to_vec(&NeuralMeta {
                trained_epochs: m.trained_epochs(),
                best_epoch: m.best_epoch(),
                final_loss: m.final_loss(),
            })
            .expect("meta serializes");
            buf.write_all(&(meta.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            buf.write_all(&meta).map_err(io_err)?;
            let layout = m.layout();
            let params = m.params();
            buf.write_all(&(layout.segments.len() as u32).to_le_bytes())
                .map_err(io_err)?;
            for seg in &layout.segments {
                let t = Tensor {
                    name: seg.name.clone(),
                    dims: seg.dims.clone(),
                    data: params[seg.range()].iter().map(|&p| p as f32).collect(),
                };
                write_tensor(&mut buf, &t).map_err(io_err)?;
            }
        }
    }
    std::fs::write(path, &buf).map_err(io_err)
}

/// Load a model saved by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ScorerModel> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader { buf: &bytes };

    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}, expected `AOW1`",
            magic
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let kind = r.u8()?;
    let vocab = r.u64()? as usize;
    let config_json = r.string()?;
    let meta_json = r.string()?;
    let tensor_count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        tensors.push(r.tensor()?);
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            r.buf.len()
        )));
    }

    match kind {
        KIND_MARKOV => {
            let config: MarkovConfig = serde_json::from_str(&config_json)
                .map_err(|e| Error::Checkpoint(format!("invalid markov config: {e}")))?;
            load_markov(vocab, config, tensors)
        }
        KIND_NEURAL => {
            let config: TrainConfig = serde_json::from_str(&config_json)
                .map_err(|e| Error::Checkpoint(format!("invalid train config: {e}")))?;
            let meta: NeuralMeta = serde_json::from_str(&meta_json)
                .map_err(|e| Error::Checkpoint(format!("invalid metadata: {e}")))?;
            load_neural(vocab, config, meta, tensors)
        }
        other => Err(Error::Checkpoint(format!("unknown model kind {other}"))),
    }
}

fn tensor_by_name<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
}

fn load_markov(vocab: usize, config: MarkovConfig, tensors: Vec<Tensor>) -> Result<ScorerModel> {
    let popularity_t = tensor_by_name(&tensors, "popularity")?;
    if popularity_t.dims != [vocab] {
        return Err(Error::Checkpoint(format!(
            "popularity dims {:?} do not match vocab {vocab}",
            popularity_t.dims
        )));
    }
    let popularity: Vec<u64> = popularity_t.data.iter().map(|&c| c as u64).collect();

    let ctx_items = tensor_by_name(&tensors, "ctx.items")?;
    let row_offsets = tensor_by_name(&tensors, "ctx.row_offsets")?;
    let entry_items = tensor_by_name(&tensors, "ctx.entry_items")?;
    let entry_counts = tensor_by_name(&tensors, "ctx.entry_counts")?;
    if ctx_items.dims.len() != 2 || ctx_items.dims[1] != config.order {
        return Err(Error::Checkpoint(format!(
            "ctx.items dims {:?} inconsistent with order {}",
            ctx_items.dims, config.order
        )));
    }
    let num_ctx = ctx_items.dims[0];
    if row_offsets.data.len() != num_ctx + 1
        || entry_items.data.len() != entry_counts.data.len()
    {
        return Err(Error::Checkpoint("inconsistent context tensors".into()));
    }
    let mut contexts: BTreeMap<Vec<ItemId>, BTreeMap<ItemId, u32>> = BTreeMap::new();
    for c in 0..num_ctx {
        let ctx: Vec<ItemId> = ctx_items.data[c * config.order..(c + 1) * config.order]
            .iter()
            .map(|&x| x as ItemId)
            .collect();
        let start = row_offsets.data[c] as usize;
        let end = row_offsets.data[c + 1] as usize;
        if end > entry_items.data.len() || start > end {
            return Err(Error::Checkpoint("row offsets out of range".into()));
        }
        let mut counts = BTreeMap::new();
        for e in start..end {
            counts.insert(entry_items.data[e] as ItemId, entry_counts.data[e] as u32);
        }
        contexts.insert(ctx, counts);
    }
    Ok(ScorerModel::Markov(MarkovScorer::from_parts(
        vocab,
        config.order,
        config.smoothing,
        contexts,
        popularity,
    )))
}

fn load_neural(
    vocab: usize,
    config: TrainConfig,
    meta: NeuralMeta,
    tensors: Vec<Tensor>,
) -> Result<ScorerModel> {
    config.validate().map_err(|e| {
        Error::Checkpoint(format!("checkpoint carries an invalid train config: {e}"))
    })?;
    let layout = super::neural::Layout::new(vocab, &config);
    if tensors.len() != layout.segments.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            layout.segments.len(),
            tensors.len()
        )));
    }
    let mut params = vec![0.0f64; layout.total];
    for (seg, tensor) in layout.segments.iter().zip(&tensors) {
        if tensor.name != seg.name || tensor.dims != seg.dims {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{}` {:?}",
                tensor.name, tensor.dims, seg.name, seg.dims
            )));
        }
        for (p, &v) in params[seg.range()].iter_mut().zip(&tensor.data) {
            *p = v as f64;
        }
    }
    Ok(ScorerModel::Neural(NeuralScorer::from_parts(
        config,
        vocab,
        params,
        meta.trained_epochs,
        meta.best_epoch,
        meta.final_loss,
    )?))
}
