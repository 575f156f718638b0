//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! `PARSEQCK`, u32 version, u64 config length + UTF-8 `key=value` lines,
//! u64 tensor count, then per tensor: u64 name length + UTF-8 name, u64 rank,
//! rank x u64 extents, and the values as f64.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ModelError, RecognizerConfig};
use crate::shaping::{GlyphForm, GlyphVocabulary, Position};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PARSEQCK";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RecognizerConfig,
    pub vocab: GlyphVocabulary,
    pub step: usize,
    pub seed: u64,
    pub best_cer: Option<f64>,
    /// Training loss accumulated since the last validation.
    pub loss_sum: f64,
    pub loss_steps: usize,
    pub params: ParamStore,
    /// Optimizer slots, same names and shapes as `params`.
    pub momentum: Option<ParamStore>,
}

fn bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn from_bits(s: &str) -> Result<f64, CheckpointError> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| CheckpointError::Malformed(format!("bad float bits {s:?}")))
}

fn vocab_field(v: &GlyphVocabulary) -> String {
    v.forms()
        .iter()
        .map(|f| format!("{:04X}:{}", f.base as u32, f.position.name()))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_vocab(s: &str) -> Result<GlyphVocabulary, CheckpointError> {
    let bad = || CheckpointError::Malformed(format!("bad vocabulary field {s:?}"));
    let mut forms = Vec::new();
    for item in s.split(',').filter(|i| !i.is_empty()) {
        let (hex, pos) = item.split_once(':').ok_or_else(bad)?;
        let base = u32::from_str_radix(hex, 16).ok().and_then(char::from_u32).ok_or_else(bad)?;
        let position = Position::from_name(pos).ok_or_else(bad)?;
        forms.push(GlyphForm::new(base, position));
    }
    let vocab = GlyphVocabulary::from_forms(forms.iter().copied());
    if vocab.forms() != forms.as_slice() {
        return Err(CheckpointError::Malformed("vocabulary not in canonical order".into()));
    }
    Ok(vocab)
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut meta = String::new();
        for (k, v) in self.config.to_pairs() {
            meta.push_str(&format!("{k}={v}\n"));
        }
        meta.push_str(&format!("step={}\n", self.step));
        meta.push_str(&format!("seed={}\n", self.seed));
        meta.push_str(&format!(
            "best_cer={}\n",
            self.best_cer.map_or_else(|| "none".to_string(), bits)
        ));
        meta.push_str(&format!("loss_sum={}\n", bits(self.loss_sum)));
        meta.push_str(&format!("loss_steps={}\n", self.loss_steps));
        meta.push_str(&format!("vocab={}\n", vocab_field(&self.vocab)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());

        let mut tensors: Vec<(String, &Tensor)> =
            self.params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
        if let Some(m) = &self.momentum {
            tensors.extend(m.iter().map(|(_, n, t)| (format!("{MOMENTUM_PREFIX}{n}"), t)));
        }
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims().len() as u64).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let meta_len = read_len(&mut r)?;
        let meta = std::str::from_utf8(take_slice(&mut r, meta_len)?)
            .map_err(|_| CheckpointError::Malformed("config block is not UTF-8".into()))?;

        let mut config = RecognizerConfig::default();
        let (mut step, mut seed, mut best_cer, mut loss_sum, mut loss_steps, mut vocab) =
            (None, None, None, None, None, None);
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("config line {line:?}")))?;
            let int = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| CheckpointError::Malformed(format!("{k}={v}")))
            };
            match k {
                "step" => step = Some(int(v)? as usize),
                "seed" => seed = Some(int(v)?),
                "best_cer" => best_cer = Some(if v == "none" { None } else { Some(from_bits(v)?) }),
                "loss_sum" => loss_sum = Some(from_bits(v)?),
                "loss_steps" => loss_steps = Some(int(v)? as usize),
                "vocab" => vocab = Some(parse_vocab(v)?),
                _ => config.set(k, v)?,
            }
        }
        let missing = |k: &str| CheckpointError::Malformed(format!("config block lacks {k}"));
        let vocab = vocab.ok_or_else(|| missing("vocab"))?;
        if vocab.len() != config.vocab_size {
            return Err(CheckpointError::Malformed(format!(
                "vocab has {} entries, config says {}",
                vocab.len(),
                config.vocab_size
            )));
        }

        let count = read_len(&mut r)?;
        let mut params = ParamStore::new();
        let mut momentum = ParamStore::new();
        for _ in 0..count {
            let name_len = read_len(&mut r)?;
            let name = std::str::from_utf8(take_slice(&mut r, name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = read_len(&mut r)?;
            let dims = (0..rank).map(|_| read_len(&mut r)).collect::<Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or(CheckpointError::Truncated)?;
            let raw = take_slice(&mut r, n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(dims, data).map_err(ModelError::from)?;
            let (store, key) = match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(rest) => (&mut momentum, rest.to_string()),
                None => (&mut params, name),
            };
            store.insert(key, t).map_err(ModelError::from)?;
        }
        if !r.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.len())));
        }
        if !momentum.is_empty() {
            let same_layout = momentum.len() == params.len()
                && params.iter().all(|(_, n, t)| {
                    momentum.id(n).map(|id| momentum.get(id).dims()) == Some(t.dims())
                });
            if !same_layout {
                return Err(CheckpointError::Malformed(
                    "momentum tensors do not match parameters".into(),
                ));
            }
        }
        Ok(Self {
            config,
            vocab,
            step: step.ok_or_else(|| missing("step"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            best_cer: best_cer.ok_or_else(|| missing("best_cer"))?,
            loss_sum: loss_sum.unwrap_or(0.0),
            loss_steps: loss_steps.unwrap_or(0),
            params,
            momentum: (!momentum.is_empty()).then_some(momentum),
        })
    }

    /// Write atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&self.encode()).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
    Ok(buf)
}

fn read_len(r: &mut &[u8]) -> Result<usize, CheckpointError> {
    usize::try_from(u64::from_le_bytes(take(r)?)).map_err(|_| CheckpointError::Truncated)
}

fn take_slice<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if r.len() < n {
        return Err(CheckpointError::Truncated);
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Recognizer;

    fn sample() -> Checkpoint {
        let vocab = GlyphVocabulary::build(["بابا", "کتاب"]).unwrap();
        let config = RecognizerConfig {
            embed_dim: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ff_dim: 16,
            image_height: 4,
            image_width: 8,
            patch_height: 2,
            patch_width: 4,
            max_label_len: 5,
            vocab_size: vocab.len(),
            ..RecognizerConfig::default()
        };
        let params = Recognizer::new(config.clone(), 3).unwrap().into_params();
        let momentum = Recognizer::new(config.clone(), 4).unwrap().into_params();
        Checkpoint {
            config,
            vocab,
            step: 17,
            seed: 99,
            best_cer: Some(0.1),
            loss_sum: 1.0 / 3.0,
            loss_steps: 5,
            params,
            momentum: Some(momentum),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.encode();
        assert_eq!(&bytes[..8], b"PARSEQCK");
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
        let no_momentum = Checkpoint {
            momentum: None,
            best_cer: None,
            ..ck
        };
        assert_eq!(Checkpoint::decode(&no_momentum.encode()).unwrap(), no_momentum);
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = sample().encode();
        assert!(matches!(Checkpoint::decode(b"NOTACKPT...."), Err(CheckpointError::BadMagic)));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/last.ck");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
