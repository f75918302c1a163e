//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MIMICDET" | u32 version | u32 config length | config text
//! u32 record count | records...
//! record: u16 name length | name | u8 dtype (0 = f32, 1 = u64) | u8 rank
//!         | u64 per dimension | raw values
//! ```
//!
//! Records hold every parameter under its own name, its momentum buffer
//! under `<name>#momentum`, the step counter as `train/step` and the
//! sampling rng as `train/rng` (seed words, stream, word position).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::train::TrainState;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{config_diff, Detector};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIMICDET";
pub const VERSION: u32 = 1;

const MOMENTUM_SUFFIX: &str = "#momentum";
const STEP_RECORD: &str = "train/step";
const RNG_RECORD: &str = "train/rng";

#[derive(Clone, Debug, PartialEq)]
enum Values {
    F32(Vec<f32>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
struct Record {
    name: String,
    shape: Vec<usize>,
    values: Values,
}

fn put_record(out: &mut Vec<u8>, r: &Record) {
    out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
    out.extend_from_slice(r.name.as_bytes());
    out.push(match r.values {
        Values::F32(_) => 0,
        Values::U64(_) => 1,
    });
    out.push(r.shape.len() as u8);
    for &d in &r.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &r.values {
        Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Values::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u16()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?;
        let dtype = self.u8()?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
        let values = match dtype {
            0 => {
                let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                Values::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => {
                let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
                Values::U64(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            other => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {other}"))),
        };
        Ok(Record { name, shape, values })
    }
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut w: Vec<u64> = seed.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
    w.push(rng.get_stream());
    let pos = rng.get_word_pos();
    w.push(pos as u64);
    w.push((pos >> 64) as u64);
    w
}

fn rng_from_words(w: &[u64]) -> Result<ChaCha8Rng> {
    if w.len() != 7 {
        return Err(Error::Checkpoint("rng record needs 7 words".into()));
    }
    let mut seed = [0u8; 32];
    for (i, word) in w[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(w[4]);
    rng.set_word_pos(w[5] as u128 | ((w[6] as u128) << 64));
    Ok(rng)
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = state.model.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());

    let mut records = Vec::new();
    for (_, p) in state.model.store.iter() {
        records.push(Record {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: Values::F32(p.value.data().to_vec()),
        });
        records.push(Record {
            name: format!("{}{MOMENTUM_SUFFIX}", p.name),
            shape: p.momentum.shape().to_vec(),
            values: Values::F32(p.momentum.data().to_vec()),
        });
    }
    records.push(Record {
        name: STEP_RECORD.into(),
        shape: vec![1],
        values: Values::U64(vec![state.step as u64]),
    });
    records.push(Record {
        name: RNG_RECORD.into(),
        shape: vec![7],
        values: Values::U64(rng_words(&state.rng)),
    });
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in &records {
        put_record(&mut out, r);
    }
    out
}

/// Rebuilds a training state. With `expected`, the checkpoint's parameters
/// must match the model that config would build.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<TrainState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads {VERSION}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config echo is not utf-8".into()))?;
    let saved_cfg = TrainConfig::parse(cfg_text)?;
    let count = r.u32()? as usize;
    let mut records: HashMap<String, Record> = HashMap::with_capacity(count);
    for _ in 0..count {
        let rec = r.record()?;
        records.insert(rec.name.clone(), rec);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    if let Some(exp) = expected {
        let want = Detector::new(exp)?;
        let have = Detector::new(&saved_cfg)?;
        if want.layout() != have.layout() {
            return Err(Error::Config(format!(
                "checkpoint model layout differs from the requested config ({})",
                config_diff(&saved_cfg, exp)
            )));
        }
    }

    let mut model = Detector::new(&saved_cfg)?;
    for id in model.store.ids() {
        let p = model.store.get_mut(id);
        for (suffix, is_momentum) in [("", false), (MOMENTUM_SUFFIX, true)] {
            let name = format!("{}{suffix}", p.name);
            let rec = records
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing record `{name}`")))?;
            let Values::F32(v) = rec.values else {
                return Err(Error::Checkpoint(format!("`{name}` must be f32")));
            };
            if rec.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    rec.shape,
                    p.value.shape()
                )));
            }
            let t = Tensor::new(&rec.shape, v)?;
            if is_momentum {
                p.momentum = t;
            } else {
                p.value = t;
            }
        }
    }
    let step = match records.remove(STEP_RECORD).map(|r| r.values) {
        Some(Values::U64(v)) if v.len() == 1 => v[0] as usize,
        _ => return Err(Error::Checkpoint("missing or malformed step record".into())),
    };
    let rng = match records.remove(RNG_RECORD).map(|r| r.values) {
        Some(Values::U64(v)) => rng_from_words(&v)?,
        _ => return Err(Error::Checkpoint("missing or malformed rng record".into())),
    };
    if let Some(extra) = records.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected record `{extra}`")));
    }
    Ok(TrainState { model, step, rng })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    // write then rename so a crash never leaves a half-written file behind
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(state)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
