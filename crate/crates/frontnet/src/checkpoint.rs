//! Binary checkpoints: the run config as text followed by every named tensor.
//!
//! Layout (little endian): magic `FNCKPT01`, `u64` config length, config
//! bytes, `u64` tensor count, then per tensor `u64` name length, name bytes,
//! `u8` kind, `u64` rank, `u64` dims, `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use frontnet_core::model::Model;
use frontnet_core::nn::{ParamKind, ParamStore};
use frontnet_core::Tensor;

use crate::config::RunConfig;

const MAGIC: &[u8; 8] = b"FNCKPT01";

pub fn save(path: &Path, cfg: &RunConfig, store: &ParamStore<f32>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let text = cfg.to_text();
    buf.extend_from_slice(&(text.len() as u64).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for e in store.entries() {
        buf.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(match e.kind {
            ParamKind::Weight => 0,
            ParamKind::NoDecay => 1,
            ParamKind::Buffer => 2,
        });
        buf.extend_from_slice(&(e.value.rank() as u64).to_le_bytes());
        for &d in e.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            bail!("truncated checkpoint");
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.0.len() * 8 + 8).context("corrupt length field")
    }
}

/// The config and the `(name, tensor)` list stored in a checkpoint.
pub fn read(path: &Path) -> Result<(RunConfig, Vec<(String, Tensor<f32>)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let mut c = Cursor(&bytes);
    if c.take(8)? != MAGIC {
        bail!("{} is not a checkpoint", path.display());
    }
    let n = c.len()?;
    let text = std::str::from_utf8(c.take(n)?)?.to_string();
    let cfg = RunConfig::from_text(&text)?;
    let count = c.len()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.len()?;
        let name = std::str::from_utf8(c.take(n)?)?.to_string();
        c.take(1)?;
        let rank = c.len()?;
        let shape: Vec<usize> = (0..rank).map(|_| c.len()).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if !c.0.is_empty() {
        bail!("trailing bytes in {}", path.display());
    }
    Ok((cfg, tensors))
}

/// Rebuilds the model described by the checkpoint and loads its tensors.
pub fn load(path: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let (cfg, tensors) = read(path)?;
    let (model, mut store) = Model::new::<f32>(cfg.train.model.clone(), 0)?;
    store.load_from(&tensors).with_context(|| format!("loading {}", path.display()))?;
    Ok((cfg, model, store))
}
