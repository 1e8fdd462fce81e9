//! On-disk corpus: a `|`-separated manifest plus one binary mel file per
//! utterance.
//!
//! Manifest line: `utt_id | symbols | durations | sentence_type | mel_path`,
//! with space-separated symbols and integer durations. Relative mel paths are
//! resolved against the manifest's directory.
//!
//! Mel file: four little-endian `u32` header words (magic, version, n_frames,
//! n_mels) followed by row-major little-endian `f32` frames.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::chunker::AlignedUtterance;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MEL_MAGIC: u32 = u32::from_le_bytes(*b"SMEL");
pub const MEL_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub symbols: Vec<String>,
    pub durations: Vec<u32>,
    pub sentence_type: usize,
    pub mel_path: String,
}

impl ManifestRecord {
    pub fn to_line(&self) -> String {
        let durs: Vec<String> = self.durations.iter().map(u32::to_string).collect();
        format!(
            "{}|{}|{}|{}|{}",
            self.utt_id,
            self.symbols.join(" "),
            durs.join(" "),
            self.sentence_type,
            self.mel_path
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split('|').map(str::trim).collect();
        let utt_id = fields.first().copied().unwrap_or("").to_string();
        let bad = |reason: String| Error::CorruptRecord {
            utt_id: utt_id.clone(),
            reason,
        };
        if fields.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        }
        if utt_id.is_empty() {
            return Err(bad("empty utterance id".into()));
        }
        let symbols: Vec<String> = fields[1].split_whitespace().map(String::from).collect();
        let durations = fields[2]
            .split_whitespace()
            .map(|d| d.parse::<u32>().map_err(|e| bad(format!("duration `{d}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if symbols.len() != durations.len() {
            return Err(bad(format!(
                "{} symbols but {} durations",
                symbols.len(),
                durations.len()
            )));
        }
        let sentence_type = fields[3]
            .parse()
            .map_err(|e| bad(format!("sentence type `{}`: {e}", fields[3])))?;
        Ok(ManifestRecord {
            utt_id: utt_id.clone(),
            symbols,
            durations,
            sentence_type,
            mel_path: fields[4].to_string(),
        })
    }
}

pub fn write_mel(path: &Path, mel: &Tensor) -> Result<()> {
    let (frames, n_mels) = mel.dims2()?;
    let mut buf = Vec::with_capacity(16 + 4 * mel.numel());
    for word in [MEL_MAGIC, MEL_VERSION, frames as u32, n_mels as u32] {
        buf.extend_from_slice(&word.to_le_bytes());
    }
    for &v in mel.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 {
        return Err(bad("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != MEL_MAGIC {
        return Err(bad("bad magic"));
    }
    if word(1) != MEL_VERSION {
        return Err(bad("unsupported version"));
    }
    let (frames, n_mels) = (word(2) as usize, word(3) as usize);
    if bytes.len() != 16 + 4 * frames * n_mels {
        return Err(bad("payload length does not match header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    Tensor::new(&[frames, n_mels], data)
}

/// Writes the manifest and one mel file per utterance into `dir`.
pub fn write_corpus(dir: &Path, utterances: &[AlignedUtterance]) -> Result<()> {
    fs::create_dir_all(dir.join("mels")).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = BufWriter::new(file);
    for u in utterances {
        let rel = format!("mels/{}.mel", u.utt_id);
        write_mel(&dir.join(&rel), &u.mel)?;
        let rec = ManifestRecord {
            utt_id: u.utt_id.clone(),
            symbols: u.symbols.clone(),
            durations: u.durations.clone(),
            sentence_type: u.sentence_type,
            mel_path: rel,
        };
        writeln!(out, "{}", rec.to_line()).map_err(|e| Error::io(&manifest, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(ManifestRecord::parse)
        .collect()
}

/// Loads every utterance listed in `dir/manifest.txt`, in manifest order.
pub fn load_corpus(dir: &Path) -> Result<Vec<AlignedUtterance>> {
    let manifest = manifest_path(dir);
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(&manifest)?
        .into_iter()
        .map(|rec| {
            let mel_path = base.join(&rec.mel_path);
            let mel = read_mel(&mel_path).map_err(|e| Error::CorruptRecord {
                utt_id: rec.utt_id.clone(),
                reason: e.to_string(),
            })?;
            let u = AlignedUtterance {
                utt_id: rec.utt_id,
                symbols: rec.symbols,
                durations: rec.durations,
                mel,
                sentence_type: rec.sentence_type,
            };
            u.validate()?;
            Ok(u)
        })
        .collect()
}

/// Accepts either a corpus directory or a manifest file path.
pub fn manifest_path(dir: &Path) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join(MANIFEST_NAME)
    }
}
