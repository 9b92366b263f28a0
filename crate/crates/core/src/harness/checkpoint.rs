//! The `APNETv1` checkpoint format.
//!
//! ```text
//! b"APNETv1\n"
//! u64 LE   header length
//! bytes    TOML header (model spec, epoch, seed, ...)
//! u32 LE   array count
//! per array:
//!   u16 LE name length, name bytes (UTF-8)
//!   u8     ndim, then ndim × u64 LE dims
//!   f64 LE data, row-major
//! ```
//!
//! Array names are `param/<name>`, `norm/<layer>/level<j>/{mean,var}` and,
//! for resumable checkpoints, `momentum/<name>`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, IxDyn};
use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, Network};
use crate::error::{Error, Result};
use crate::tape::Tensor;

pub const MAGIC: &[u8; 8] = b"APNETv1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelSpec,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub global_step: u64,
    pub best_top1: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub network: Network,
    /// SGD momentum buffers in parameter order, when saved.
    pub momentum: Option<Vec<Tensor>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn collect_arrays(network: &Network, momentum: Option<&[Tensor]>) -> Vec<(String, Tensor)> {
    let state = network.state();
    let mut arrays = Vec::new();
    for (_, p) in state.params.iter() {
        arrays.push((format!("param/{}", p.name), p.value.clone()));
    }
    for e in state.norms.entries() {
        for (j, (m, v)) in e.running_mean.iter().zip(&e.running_var).enumerate() {
            arrays.push((format!("norm/{}/level{}/mean", e.name, j + 1), m.clone().into_dyn()));
            arrays.push((format!("norm/{}/level{}/var", e.name, j + 1), v.clone().into_dyn()));
        }
    }
    if let Some(mom) = momentum {
        for ((_, p), m) in state.params.iter().zip(mom) {
            arrays.push((format!("momentum/{}", p.name), m.clone()));
        }
    }
    arrays
}

pub fn encode(header: &CheckpointHeader, network: &Network, momentum: Option<&[Tensor]>) -> Result<Vec<u8>> {
    let text = toml::to_string(header).map_err(|e| bad(format!("header: {e}")))?;
    let arrays = collect_arrays(network, momentum);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in &arrays {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place, so a crash
/// never leaves a truncated checkpoint at `path`.
pub fn save(path: &Path, header: &CheckpointHeader, network: &Network, momentum: Option<&[Tensor]>) -> Result<()> {
    let bytes = encode(header, network, momentum)?;
    let tmp = path.with_extension("apnet.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&bytes)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| bad(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0; N];
        self.r
            .read_exact(&mut buf)
            .map_err(|e| bad(format!("truncated file: {e}")))?;
        Ok(buf)
    }
}

pub fn decode(reader: impl Read) -> Result<Checkpoint> {
    let mut c = Cursor { r: reader };
    if &c.array::<8>()? != MAGIC {
        return Err(bad("not an APNETv1 checkpoint"));
    }
    let len = u64::from_le_bytes(c.array()?) as usize;
    if len > 1 << 24 {
        return Err(bad(format!("implausible header length {len}")));
    }
    let text = String::from_utf8(c.bytes(len)?).map_err(|_| bad("header is not UTF-8"))?;
    let header: CheckpointHeader = toml::from_str(&text).map_err(|e| bad(format!("header: {e}")))?;
    let mut network = Network::build(&header.model, 0)?;
    let count = u32::from_le_bytes(c.array()?) as usize;
    let mut arrays = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = u16::from_le_bytes(c.array()?) as usize;
        let name = String::from_utf8(c.bytes(n)?).map_err(|_| bad("array name is not UTF-8"))?;
        let ndim = c.array::<1>()?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u64::from_le_bytes(c.array()?) as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = c.bytes(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_shape_vec(IxDyn(&dims), data).map_err(|e| bad(e.to_string()))?;
        arrays.insert(name, t);
    }
    fn take(arrays: &mut HashMap<String, Tensor>, name: String, shape: &[usize]) -> Result<Tensor> {
        let t = arrays
            .remove(&name)
            .ok_or_else(|| bad(format!("missing array {name}")))?;
        if t.shape() != shape {
            return Err(bad(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }
    let state = network.state_mut();
    let ids: Vec<_> = state
        .params
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (id, name, shape) in &ids {
        *state.params.value_mut(*id) = take(&mut arrays, format!("param/{name}"), shape)?;
    }
    for e in state.norms.entries_mut() {
        for j in 0..e.level_channels.len() {
            let shape = [e.level_channels[j]];
            let to1 = |t: Tensor| -> Array1<f64> { t.into_dimensionality().expect("checked 1-d") };
            e.running_mean[j] = to1(take(
                &mut arrays,
                format!("norm/{}/level{}/mean", e.name, j + 1),
                &shape,
            )?);
            e.running_var[j] = to1(take(
                &mut arrays,
                format!("norm/{}/level{}/var", e.name, j + 1),
                &shape,
            )?);
        }
    }
    let momentum = if ids
        .iter()
        .any(|(_, n, _)| arrays.contains_key(&format!("momentum/{n}")))
    {
        Some(
            ids.iter()
                .map(|(_, n, s)| take(&mut arrays, format!("momentum/{n}"), s))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(bad(format!("unexpected array {extra}")));
    }
    if c.r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes after the last array"));
    }
    Ok(Checkpoint {
        header,
        network,
        momentum,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let f =
        File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(BufReader::new(f))
}
