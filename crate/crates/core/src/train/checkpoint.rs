//! Single-file binary checkpoint: magic `SFCK`, little-endian throughout.
//!
//! ```text
//! magic[4] version:u32
//! config_len:u32 config_json   spec_len:u32 spec_json
//! epoch:u64 step:u64 rng_seed:u64 rng_stream:u64 rng_word_pos:u128 adam_step:u64
//! n_entries:u64, then per entry:
//!   key_len:u32 key_utf8 ndim:u32 dims:u64[ndim] data:f64[prod(dims)]
//! ```
//! Entry keys are `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::adam::Adam;
use super::model::ModelSpec;
use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub adam: Adam,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_tensor(out: &mut Vec<u8>, key: &str, t: &Tensor) {
    put_bytes(out, key.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.spec).expect("spec serializes").as_bytes());
        for v in [self.epoch, self.step, self.rng.seed, self.rng.stream] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());

        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        entries.extend(self.params.iter().map(|(k, t)| (format!("param/{k}"), t)));
        entries.extend(self.adam.m.iter().map(|(k, t)| (format!("adam.m/{k}"), t)));
        entries.extend(self.adam.v.iter().map(|(k, t)| (format!("adam.v/{k}"), t)));
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (key, t) in entries {
            put_tensor(&mut out, &key, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, file };
        if r.take(4)? != MAGIC {
            return Err(Error::format(file, "byte 0", "missing SFCK magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                file,
                "byte 4",
                format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }
        let config: TrainConfig = r.json()?;
        let spec: ModelSpec = r.json()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes")),
        };
        let mut adam = Adam::new(config.lr);
        adam.step = r.u64()?;
        let mut params = ParamStore::new();
        let n = r.u64()?;
        for _ in 0..n {
            let at = r.pos;
            let key = r.string()?;
            let t = r.tensor()?;
            match key.split_once('/') {
                Some(("param", name)) => params.insert(name, t),
                Some(("adam.m", name)) => {
                    adam.m.insert(name.to_string(), t);
                }
                Some(("adam.v", name)) => {
                    adam.v.insert(name.to_string(), t);
                }
                _ => return Err(Error::format(file, format!("byte {at}"), format!("unknown entry key {key:?}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(file, format!("byte {}", r.pos), "trailing bytes"));
        }
        Ok(Checkpoint {
            config,
            spec,
            epoch,
            step,
            rng,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.file,
                format!("byte {}", self.pos),
                format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            )
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.file, format!("byte {at}"), "invalid UTF-8"))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
        let at = self.pos;
        let s = self.string()?;
        serde_json::from_str(&s).map_err(|e| Error::format(self.file, format!("byte {at}"), e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let ndim = self.u32()? as usize;
        let dims = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= (self.bytes.len() - self.pos) / 8)
            .ok_or_else(|| Error::format(self.file, format!("byte {at}"), format!("tensor dims {dims:?} exceed file size")))?;
        let raw = self.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&dims, data).map_err(|e| Error::format(self.file, format!("byte {at}"), e.to_string()))
    }
}

