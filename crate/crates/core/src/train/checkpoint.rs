//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "RGAN" | u32 version | u32 len, config text (key=value lines)
//! u32 count | count × (u32 name_len, name, u8 dtype, u32 rank, rank × u64 dim, data)
//! rng: [u8; 32] seed, u64 stream, u128 word position
//! u64 step | u32 count | count × (u32 name_len, name, u64 value)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{AdamState, FakePool, ModelSet, TrainConfig, TrainState};
use crate::nn::NetworkParams;
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RGAN";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint header")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated checkpoint: file ends inside {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_str(out, name);
    out.push(T::DTYPE.tag());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Tensors in their serialised order.
fn tensor_table(state: &TrainState) -> Vec<(String, &Tensor<f32>)> {
    let mut table = Vec::new();
    for (role, p) in state.params.iter() {
        table.extend(p.iter().map(|(k, t)| (format!("{role}/{k}"), t)));
    }
    for (role, a) in state.adam.iter() {
        table.extend(a.m.iter().map(|(k, t)| (format!("{role}.adam_m/{k}"), t)));
        table.extend(a.v.iter().map(|(k, t)| (format!("{role}.adam_v/{k}"), t)));
    }
    for (tag, pool) in [("pool_x", &state.pool_x), ("pool_y", &state.pool_y)] {
        table.extend(pool.images().iter().enumerate().map(|(i, t)| (format!("{tag}/{i:04}"), t)));
    }
    table
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &state.config.to_text());
    let table = tensor_table(state);
    put_u32(&mut out, table.len() as u32);
    for (name, t) in &table {
        put_tensor(&mut out, name, t);
    }
    out.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut out, state.rng.get_stream());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    put_u64(&mut out, state.step);
    let counters: Vec<(String, u64)> = state.adam.iter().map(|(r, a)| (format!("{r}.adam_t"), a.t)).collect();
    put_u32(&mut out, counters.len() as u32);
    for (name, v) in &counters {
        put_str(&mut out, name);
        put_u64(&mut out, *v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &'static str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str("tensor name")?.to_string();
        let tag = self.u8("tensor dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("{name}: dtype tag {tag}")))?;
        if dtype != f32::DTYPE {
            return Err(CheckpointError::Malformed(format!("{name}: expected f32 values, found {dtype:?}")));
        }
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("tensor dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape {shape:?} overflows")))?;
        let raw = self.take(n.saturating_mul(dtype.size()), "tensor data")?;
        let data = raw.chunks_exact(dtype.size()).map(f32::read_le).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

fn malformed(e: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Malformed(e.to_string())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "header")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config = TrainConfig::from_text(r.str("config block")?).map_err(malformed)?;
    config.validate().map_err(malformed)?;
    let count = r.u32("tensor table")?;
    let mut tensors = IndexMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    let seed: [u8; 32] = r.take(32, "rng state")?.try_into().expect("32 bytes");
    let stream = r.u64("rng state")?;
    let word_pos = u128::from_le_bytes(r.take(16, "rng state")?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let step = r.u64("step")?;
    let n_counters = r.u32("counters")?;
    let mut counters = IndexMap::new();
    for _ in 0..n_counters {
        let name = r.str("counters")?.to_string();
        counters.insert(name, r.u64("counters")?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut take_group = |prefix: &str| -> IndexMap<String, Tensor<f32>> {
        let keys: Vec<String> = tensors.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let t = tensors.shift_remove(&k).expect("listed key");
                (k[prefix.len()..].to_string(), t)
            })
            .collect()
    };
    let model = config.model;
    let predictor = model.predictor().map_err(malformed)?;
    let params = ModelSet::try_from_fn(|role| {
        let arch = match &role[..1] {
            "g" => model.generator(),
            "d" => model.discriminator(),
            _ => predictor.clone(),
        };
        NetworkParams::from_tensors(arch, take_group(&format!("{role}/"))).map_err(malformed)
    })?;
    let adam = ModelSet::try_from_fn(|role| {
        let a = AdamState {
            t: counters
                .get(&format!("{role}.adam_t"))
                .copied()
                .ok_or_else(|| CheckpointError::Malformed(format!("missing counter {role}.adam_t")))?,
            m: take_group(&format!("{role}.adam_m/")),
            v: take_group(&format!("{role}.adam_v/")),
        };
        if !a.matches(params.get(role).expect("role")) {
            return Err(CheckpointError::Malformed(format!("{role}: optimizer moments do not match parameters")));
        }
        Ok(a)
    })?;
    let mut pool = |tag: &str| -> Result<FakePool<f32>> {
        let images: Vec<Tensor<f32>> = take_group(&format!("{tag}/")).into_values().collect();
        if images.len() > config.pool_size {
            return Err(CheckpointError::Malformed(format!(
                "{tag} holds {} images, capacity {}",
                images.len(),
                config.pool_size
            )));
        }
        Ok(FakePool::from_images(config.pool_size, images))
    };
    let (pool_x, pool_y) = (pool("pool_x")?, pool("pool_y")?);
    if let Some(extra) = tensors.keys().next() {
        return Err(CheckpointError::Malformed(format!("unexpected tensor {extra}")));
    }
    Ok(TrainState {
        config,
        params,
        adam,
        step,
        rng,
        pool_x,
        pool_y,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, encode_checkpoint(state)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::{fit, FitSinks, ModelConfig};
    use super::*;
    use crate::data::{generate_synthetic_domains, SyntheticSceneConfig};

    fn trained(steps: u64) -> TrainState {
        resumed(None, steps)
    }

    fn resumed(from: Option<TrainState>, steps: u64) -> TrainState {
        let cfg = TrainConfig {
            steps: 4,
            decay_start: 2,
            pool_size: 2,
            checkpoint_interval: 0,
            model: ModelConfig {
                image_size: 16,
                channels: 3,
                gen_width: 2,
                gen_blocks: 1,
                disc_width: 2,
                disc_layers: 1,
                disc_padding: 0,
                pred_width: 2,
            },
            ..TrainConfig::default()
        };
        let scene = SyntheticSceneConfig {
            image_size: 16,
            length: 8,
            ..SyntheticSceneConfig::default()
        };
        let d = generate_synthetic_domains(&scene, 1, 2).unwrap();
        let mut s = from.unwrap_or_else(|| TrainState::new(cfg).unwrap());
        fit(
            &mut s,
            &d.x,
            &d.y,
            FitSinks {
                stop_at: Some(steps),
                ..FitSinks::default()
            },
        )
        .unwrap();
        s
    }

    #[test]
    fn round_trip_is_lossless_and_byte_stable() {
        let s = trained(3);
        let bytes = encode_checkpoint(&s);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert_eq!(back.pool_x.len(), 2);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let straight = trained(4);
        let half = decode_checkpoint(&encode_checkpoint(&trained(2))).unwrap();
        assert_eq!(resumed(Some(half), 4), straight);
    }

    #[test]
    fn header_errors_are_distinct() {
        let bytes = encode_checkpoint(&trained(1));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e = decode_checkpoint(&bad).unwrap_err();
        assert!(matches!(e, CheckpointError::BadMagic));
        assert_eq!(e.to_string(), "bad checkpoint header");

        let mut newer = bytes.clone();
        newer[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&newer).unwrap_err(),
            CheckpointError::Version { found: 7, expected: 1 }
        ));

        for cut in [2, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint(&bytes[..cut]).unwrap_err(),
                CheckpointError::Truncated(_)
            ));
        }

        let mut longer = bytes;
        longer.push(0);
        assert!(matches!(decode_checkpoint(&longer).unwrap_err(), CheckpointError::Malformed(_)));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("a.rgan");
        let s = trained(2);
        save_checkpoint(&s, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), s);
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.rgan")).unwrap_err(),
            CheckpointError::Io { .. }
        ));
    }
}
