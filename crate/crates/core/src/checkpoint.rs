//! Binary checkpoints.
//!
//! Layout (little endian): the magic `PRAMCK01`; a `u64` length and that many
//! bytes of UTF-8 config text (`key = value` lines, including `state.*`
//! entries for the step counter, class list and rng position); a `u64`
//! record count; then per parameter: `u32` name length, name bytes, `u8`
//! dtype tag, `u32` rank, `u64` per dim, raw values.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::PramModel;
use crate::param::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"PRAMCK01";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

pub fn encode<T: Scalar>(config_text: &str, store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_values() * DType::F64.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (_, p) in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// A decoded parameter record with values widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Record>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a PRAMCK01 checkpoint)".into()));
    }
    let len = r.u64()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("config block is not UTF-8: {e}")))?
        .to_string();
    let count = r.u64()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(numel.checked_mul(dtype.size()).ok_or_else(|| {
            Error::Checkpoint(format!("{name}: size overflow"))
        })?)?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
        };
        records.push(Record {
            name,
            dtype,
            shape,
            values,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((text, records))
}

/// Copies records into a store with exactly the same names and shapes.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, records: &[Record]) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            store.len()
        )));
    }
    for rec in records {
        let id = store
            .id(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", rec.name)))?;
        let p = store.get_mut(id);
        if p.tensor.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                rec.name,
                rec.shape,
                p.tensor.shape()
            )));
        }
        if rec.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "`{}` stored as {:?}, model uses {:?}",
                rec.name,
                rec.dtype,
                T::DTYPE
            )));
        }
        p.tensor = Tensor::new(
            rec.shape.clone(),
            rec.values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?;
        p.grad = None;
    }
    Ok(())
}

fn state_text(trainer: &Trainer) -> String {
    let rng = trainer.rng();
    let classes: Vec<String> = trainer.classes().iter().map(|c| c.to_string()).collect();
    format!(
        "state.step = {}\nstate.classes = {}\nstate.rng_seed = {}\nstate.rng_stream = {}\nstate.rng_word_pos = {}\n",
        trainer.step(),
        classes.join(","),
        hex(&rng.get_seed()),
        rng.get_stream(),
        rng.get_word_pos()
    )
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let text = format!("{}{}", trainer.config().to_text(), state_text(trainer));
    let bytes = encode(&text, trainer.store());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits the text block into the training config and `state.*` entries.
fn split_text(text: &str) -> Result<(TrainConfig, Vec<(String, String)>)> {
    let mut config_lines = String::new();
    let mut state = Vec::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim().starts_with("state.") => {
                state.push((k.trim().to_string(), v.trim().to_string()))
            }
            _ => {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
    }
    let config = TrainConfig::from_text(&config_lines)
        .map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
    Ok((config, state))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (text, records) = decode(&bytes)?;
    let (config, state) = split_text(&text)?;
    let get = |key: &str| -> Result<&str> {
        state
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))
    };
    let bad = |key: &str| Error::Checkpoint(format!("malformed `{key}`"));
    let step: usize = get("state.step")?.parse().map_err(|_| bad("state.step"))?;
    let classes = get("state.classes")?
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| bad("state.classes"))?;
    let seed: [u8; 32] = unhex(get("state.rng_seed")?)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("state.rng_seed"))?;
    let stream: u64 = get("state.rng_stream")?
        .parse()
        .map_err(|_| bad("state.rng_stream"))?;
    let word_pos: u128 = get("state.rng_word_pos")?
        .parse()
        .map_err(|_| bad("state.rng_word_pos"))?;

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let model = PramModel::new(config.model_config(classes.len()), &mut store, &mut init_rng)?;
    restore(&mut store, &records)?;
    Ok(Trainer::from_parts(config, model, store, rng, step, classes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let mut store = ParamStore::<f64>::new();
        store.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2)).unwrap();
        store.add("b", Tensor::scalar(-1.5)).unwrap();
        let bytes = encode("x = 1\n", &store);
        assert_eq!(&bytes[..8], b"PRAMCK01");
        let (text, recs) = decode(&bytes).unwrap();
        assert_eq!(text, "x = 1\n");
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].shape, vec![2, 3]);
        assert_eq!(recs[0].values, store.by_name("a.weight").unwrap().tensor.data());
        let mut other = store.clone();
        other.iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        restore(&mut other, &recs).unwrap();
        assert_eq!(other.by_name("a.weight").unwrap().tensor, store.by_name("a.weight").unwrap().tensor);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::full(&[4], 1.0)).unwrap();
        let bytes = encode("", &store);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let (_, recs) = decode(&bytes).unwrap();
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("w", Tensor::full(&[5], 1.0)).unwrap();
        assert!(restore(&mut wrong, &recs).is_err());
        let mut f64_store = ParamStore::<f64>::new();
        f64_store.add("w", Tensor::full(&[4], 1.0)).unwrap();
        assert!(restore(&mut f64_store, &recs).is_err());
    }
}
