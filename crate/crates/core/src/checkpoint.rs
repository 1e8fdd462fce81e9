//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"STRFCKPT"
//! u32    format version
//! u64 + UTF-8   run config in canonical `key = value` form
//! u64 + UTF-8   vocabulary, space separated
//! u32    parameter count, then per parameter:
//!        u32 name length, name, u32 rank, u64 per dim, f64 payload
//! u8     1 if training state follows, else 0
//!        u64 step, u64 epoch, u64 batch position
//!        per parameter: f64 first moment, f64 second moment
//!        u32 lane count, then per lane and per memory (encoder, decoder)
//!        and layer: u64 rows, f64 payload
//! ```

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::symbols::Vocabulary;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STRFCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub position: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    /// Per lane: encoder memory layers, then decoder memory layers.
    pub lanes: Vec<(Vec<Tensor>, Vec<Tensor>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub train: Option<TrainState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, xs: &[f64]) {
        for x in xs {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|e| e.to_string())
    }
    fn text(&mut self) -> std::result::Result<String, String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.text(&self.config.to_text());
        w.text(&self.vocab.symbols().join(" "));
        w.u32(self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            w.u32(name.len() as u32);
            w.0.extend_from_slice(name.as_bytes());
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.floats(t.data());
        }
        match &self.train {
            None => w.u8(0),
            Some(ts) => {
                w.u8(1);
                w.u64(ts.step);
                w.u64(ts.epoch);
                w.u64(ts.position);
                for (m, v) in ts.adam_m.iter().zip(&ts.adam_v) {
                    w.floats(m);
                    w.floats(v);
                }
                w.u32(ts.lanes.len() as u32);
                for (enc, dec) in &ts.lanes {
                    for t in enc.iter().chain(dec) {
                        w.u64(t.shape()[0] as u64);
                        w.floats(t.data());
                    }
                }
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).map_err(fmt)? != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(fmt)?;
        if version != VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let config = RunConfig::parse(&r.text().map_err(fmt)?)?;
        let symbols = r.text().map_err(fmt)?;
        let vocab = Vocabulary::new(symbols.split_whitespace().map(String::from).collect())?;

        let mut params = ParamStore::new();
        let count = r.u32().map_err(fmt)?;
        for _ in 0..count {
            let n = r.u32().map_err(fmt)? as usize;
            let name = String::from_utf8(r.take(n).map_err(fmt)?.to_vec()).map_err(|e| fmt(e.to_string()))?;
            let rank = r.u32().map_err(fmt)? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<std::result::Result<Vec<_>, _>>().map_err(fmt)?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| fmt(format!("shape overflow in `{name}`")))?;
            let data = r.floats(numel).map_err(fmt)?;
            params.add(name, Tensor::new(&shape, data)?)?;
        }

        let train = match r.u8().map_err(fmt)? {
            0 => None,
            1 => {
                let step = r.u64().map_err(fmt)?;
                let epoch = r.u64().map_err(fmt)?;
                let position = r.u64().map_err(fmt)?;
                let mut adam_m = Vec::with_capacity(params.len());
                let mut adam_v = Vec::with_capacity(params.len());
                for (_, _, t) in params.iter() {
                    adam_m.push(r.floats(t.numel()).map_err(fmt)?);
                    adam_v.push(r.floats(t.numel()).map_err(fmt)?);
                }
                let n_lanes = r.u32().map_err(fmt)?;
                let d = config.model.d_model;
                let mut read_layers = |n: usize| -> Result<Vec<Tensor>> {
                    (0..n)
                        .map(|_| {
                            let rows = r.len().map_err(fmt)?;
                            let data = r.floats(rows * d).map_err(fmt)?;
                            Tensor::new(&[rows, d], data)
                        })
                        .collect()
                };
                let mut lanes = Vec::with_capacity(n_lanes as usize);
                for _ in 0..n_lanes {
                    let enc = read_layers(config.model.n_layers_enc)?;
                    let dec = read_layers(config.model.n_layers_dec)?;
                    lanes.push((enc, dec));
                }
                Some(TrainState {
                    step,
                    epoch,
                    position,
                    adam_m,
                    adam_v,
                    lanes,
                })
            }
            flag => return Err(fmt(format!("bad training-state flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(fmt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            vocab,
            params,
            train,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
