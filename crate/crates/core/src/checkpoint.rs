//! `IBGC1` checkpoints: magic, version, JSON config block, parameter
//! manifest, little-endian f64 payload and the reference scores.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchSpec, FlowModel};
use crate::ood::ScoreSet;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 5] = b"IBGC1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    arch: ArchSpec,
    train: Option<TrainConfig>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub train: Option<TrainConfig>,
    /// Log-likelihoods of the training set.
    pub refs: Option<ScoreSet>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let block = serde_json::to_vec(&ConfigBlock {
        arch: ck.model.arch.clone(),
        train: ck.train.clone(),
    })?;
    out.extend_from_slice(&(block.len() as u64).to_le_bytes());
    out.extend_from_slice(&block);
    let params = &ck.model.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let refs = ck.refs.as_ref().map_or(&[][..], |r| r.scores());
    out.extend_from_slice(&(refs.len() as u64).to_le_bytes());
    for v in refs {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("implausible length {}", v)))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(5).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not an IBGC1 checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
    }
    let block_len = r.len()?;
    let block: ConfigBlock = serde_json::from_slice(r.take(block_len)?)
        .map_err(|e| Error::Format(format!("config block: {}", e)))?;
    let mut model = FlowModel::new(block.arch)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "manifest lists {} parameters, architecture has {}",
            count,
            model.params.len()
        )));
    }
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let nd = r.u32()? as usize;
        let mut shape = Vec::with_capacity(nd);
        for _ in 0..nd {
            shape.push(r.len()?);
        }
        manifest.push((name, shape));
    }
    for ((name, _), p) in manifest.iter().zip(model.params.iter()) {
        if *name != p.name {
            return Err(Error::Format(format!("manifest has '{}' where '{}' was expected", name, p.name)));
        }
    }
    let mut values = Vec::with_capacity(count);
    for (_, shape) in &manifest {
        let n: usize = shape.iter().product();
        values.push(Tensor::new(shape.clone(), r.f64s(n)?)?);
    }
    model.params.load_values(values)?;
    let n_refs = r.len()?;
    let refs = r.f64s(n_refs)?;
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let refs = if refs.is_empty() { None } else { Some(ScoreSet::new(refs)?) };
    Ok(Checkpoint {
        model,
        train: block.train,
        refs,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}
