use std::path::{Path, PathBuf};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;

use super::AdamW;

pub const MAGIC: [u8; 8] = *b"NXLCKPT\0";
pub const VERSION: u32 = 1;

/// Parameters, optimizer state and provenance of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub epoch: u64,
    pub corpus_hash: u64,
    pub params: ParamStore,
    pub opt: AdamW,
}

/// Text sidecar listing tensor names and shapes.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn from_model(model: &Model, opt: &AdamW, epoch: u64, corpus_hash: u64) -> Self {
        Checkpoint {
            cfg: model.cfg.clone(),
            epoch,
            corpus_hash,
            params: model.store.clone(),
            opt: opt.clone(),
        }
    }

    /// Header, embedded config text, then per tensor its name, shape and
    /// the value, first-moment and second-moment blobs.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let cfg_text = toml::to_string(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.cfg.hash().to_le_bytes());
        out.extend_from_slice(&self.corpus_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.opt.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        put_str(&mut out, &cfg_text);
        for (i, (name, t)) in self
            .params
            .names()
            .iter()
            .zip(self.params.tensors())
            .enumerate()
        {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, t.data());
            put_f64s(&mut out, &self.opt.m[i]);
            put_f64s(&mut out, &self.opt.v[i]);
        }
        Ok(out)
    }

    /// Parses a checkpoint. With `expected` given, a differing config hash is refused.
    pub fn from_bytes(buf: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hash = r.u64()?;
        if let Some(want) = expected {
            if want.hash() != hash {
                return Err(Error::Checkpoint(format!(
                    "config hash mismatch: checkpoint has {hash:016x}, run config has {:016x}",
                    want.hash()
                )));
            }
        }
        let corpus_hash = r.u64()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.len()?;
        let cfg: ModelConfig =
            toml::from_str(&r.string()?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if cfg.hash() != hash {
            return Err(Error::Checkpoint(
                "embedded config does not match header hash".into(),
            ));
        }
        let reference = Model::new(cfg.clone(), 0)?;
        if reference.store.len() != count {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                reference.store.len()
            )));
        }
        let mut params = reference.store;
        let mut opt = AdamW::new(&params);
        opt.step = step;
        for i in 0..count {
            let name = r.string()?;
            let rank = r.len()?;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let id = params
                .find(&name)
                .filter(|id| id.index() == i)
                .ok_or_else(|| {
                    Error::Checkpoint(format!("unexpected tensor {name} at position {i}"))
                })?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {shape:?}, expected {:?}",
                    params.get(id).shape()
                )));
            }
            let n = params.get(id).numel();
            params.get_mut(id).data_mut().copy_from_slice(&r.f64s(n)?);
            opt.m[i] = r.f64s(n)?;
            opt.v[i] = r.f64s(n)?;
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint {
            cfg,
            epoch,
            corpus_hash,
            params,
            opt,
        })
    }

    pub fn manifest(&self) -> String {
        let mut out = format!(
            "config_hash\t{:016x}\ncorpus_hash\t{:016x}\nepoch\t{}\nstep\t{}\n",
            self.cfg.hash(),
            self.corpus_hash,
            self.epoch,
            self.opt.step
        );
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("{name}\t{}\n", dims.join("x")));
        }
        out
    }

    /// Writes the binary file and its manifest sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        std::fs::write(&mpath, self.manifest()).map_err(|e| Error::io(mpath, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, expected)
    }

    pub fn model(&self) -> Result<Model> {
        let mut m = Model::new(self.cfg.clone(), 0)?;
        m.store = self.params.clone();
        Ok(m)
    }
}
