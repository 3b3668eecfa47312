//! `HEDU1` checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"HEDU1"
//! u32 config_len, config as canonical JSON (config_len bytes)
//! u32 blob_count
//! per blob: u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dims, f32 values
//! ```
//!
//! Blobs hold the parameters in model order, followed by the input and DEM
//! standardization (`input_norm.mean`, `input_norm.std`, `dem_norm.*`) and
//! batch-norm running statistics (`<layer>.running_mean`, `.running_var`).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{ChannelNorm, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"HEDU1";
const FORMAT: &str = "HEDU1";

fn blobs(model: &Model) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .param_names()
        .iter()
        .zip(model.params())
        .map(|(n, p)| (n.clone(), p.shape().to_vec(), p.data().to_vec()))
        .collect();
    let vec_blob = |name: String, v: &[f32]| (name, vec![v.len()], v.to_vec());
    out.push(vec_blob("input_norm.mean".into(), &model.input_norm.mean));
    out.push(vec_blob("input_norm.std".into(), &model.input_norm.std));
    out.push(vec_blob("dem_norm.mean".into(), &model.dem_norm.mean));
    out.push(vec_blob("dem_norm.std".into(), &model.dem_norm.std));
    for (name, stats) in model.norm_names().iter().zip(model.running_stats()) {
        out.push(vec_blob(format!("{name}.running_mean"), &stats.mean));
        out.push(vec_blob(format!("{name}.running_var"), &stats.var));
    }
    out
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(FORMAT, format!("{what} {n} exceeds u32")))
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let json = serde_json::to_string(model.config())?;
    w.write_all(MAGIC)?;
    w.write_all(&u32_of(json.len(), "config length")?.to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    let blobs = blobs(model);
    w.write_all(&u32_of(blobs.len(), "blob count")?.to_le_bytes())?;
    for (name, shape, data) in &blobs {
        w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(shape.len(), "rank")?.to_le_bytes())?;
        for &d in shape {
            w.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(FORMAT, "truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(FORMAT, "bad magic"));
    }
    let len = c.u32()?;
    let config: ModelConfig = serde_json::from_slice(c.take(len)?)?;
    let mut model = Model::build(config)?;

    let count = c.u32()?;
    let mut found: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()?;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::format(FORMAT, "blob name is not UTF-8"))?
            .to_string();
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(FORMAT, "blob size overflows"))?;
        let data = c
            .take(bytes)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if found.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::format(FORMAT, format!("duplicate blob {name}")));
        }
    }
    if c.pos != buf.len() {
        return Err(Error::format(FORMAT, "trailing bytes"));
    }

    let expected = blobs(&model);
    if found.len() != expected.len() {
        return Err(Error::format(FORMAT, format!("expected {} blobs, found {}", expected.len(), found.len())));
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let (s, d) = found.remove(name).ok_or_else(|| Error::format(FORMAT, format!("missing blob {name}")))?;
        if s != shape {
            return Err(Error::format(FORMAT, format!("blob {name} has shape {s:?}, expected {shape:?}")));
        }
        Ok(d)
    };
    let names = model.param_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let shape = model.params()[i].shape().to_vec();
        model.params_mut()[i] = Tensor::new(shape.clone(), take(name, &shape)?)?;
    }
    let ch = model.config().in_channels;
    model.input_norm = ChannelNorm { mean: take("input_norm.mean", &[ch])?, std: take("input_norm.std", &[ch])? };
    model.dem_norm = ChannelNorm { mean: take("dem_norm.mean", &[1])?, std: take("dem_norm.std", &[1])? };
    let norm_names = model.norm_names().to_vec();
    for (i, name) in norm_names.iter().enumerate() {
        let c = model.running_stats()[i].mean.len();
        let mean = take(&format!("{name}.running_mean"), &[c])?;
        let var = take(&format!("{name}.running_var"), &[c])?;
        let stats = &mut model.running_stats_mut()[i];
        stats.mean = mean;
        stats.var = var;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
