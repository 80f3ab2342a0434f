//! Binary checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! b"CLDL"            magic
//! u32                format version (1)
//! [u8; 32]           SHA-256 of the canonical topology JSON
//! u64                seed
//! tensors            u32 count, then per tensor: u32 rank, rank × u64 dims, f64 data
//! u8                 1 if optimizer state follows, else 0
//!   u64              completed epochs
//!   tensors          velocity, same encoding
//! [u8; 32]           SHA-256 of every preceding byte
//! ```
//!
//! The topology covers input shape, class count, body and head layer lists
//! (initializers excluded) and attach points. A checkpoint is only loaded into
//! a model with the same digest.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::network::{Init, LayerSpec, Model};
use crate::tensor::Tensor;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"CLDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct Topology<'a> {
    input_shape: &'a [usize],
    classes: usize,
    body: Vec<LayerSpec>,
    heads: Vec<(usize, Vec<LayerSpec>)>,
}

fn strip_init(specs: impl Iterator<Item = LayerSpec>) -> Vec<LayerSpec> {
    specs.map(|s| s.with_init(Init::Xavier)).collect()
}

pub fn topology_digest(model: &Model) -> [u8; 32] {
    let topo = Topology {
        input_shape: model.input_shape(),
        classes: model.classes(),
        body: strip_init(model.body().stack().specs().cloned()),
        heads: model
            .heads()
            .iter()
            .map(|h| (h.attach, strip_init(h.stack().specs().cloned())))
            .collect(),
    };
    let json = serde_json::to_vec(&topo).expect("topology serializes");
    Sha256::digest(&json).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub seed: u64,
    pub tensors: Vec<Tensor>,
    pub state: Option<TrainState>,
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[&Tensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(model: &Model, seed: u64, state: Option<&TrainState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&topology_digest(model));
    out.extend_from_slice(&seed.to_le_bytes());
    put_tensors(&mut out, &model.tensors());
    match state {
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&(s.epoch as u64).to_le_bytes());
            put_tensors(&mut out, &s.velocity.iter().collect::<Vec<_>>());
        }
        None => out.push(0),
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

pub fn save(path: &Path, model: &Model, seed: u64, state: Option<&TrainState>) -> Result<()> {
    write_atomic(path, &encode(model, seed, state))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let rank = self.u32()? as usize;
            let dims = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
                .ok_or_else(|| Error::Checkpoint(format!("implausible tensor shape {dims:?}")))?;
            let raw = self.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            out.push(Tensor::new(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        Ok(out)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let seen: Vec<u8> = bytes.iter().take(4).copied().collect();
        return Err(Error::Checkpoint(format!("bad magic {seen:02X?}, expected \"CLDL\"")));
    }
    if bytes.len() < 4 + 4 + 32 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let seed = r.u64()?;
    let tensors = r.tensors()?;
    let state = match r.take(1)?[0] {
        0 => None,
        1 => {
            let epoch = r.u64()? as usize;
            Some(TrainState { epoch, velocity: r.tensors()? })
        }
        other => return Err(Error::Checkpoint(format!("bad state flag {other}"))),
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint body".into()));
    }
    Ok(Checkpoint { version, digest, seed, tensors, state })
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Copies the checkpoint's weights into `model` after checking topology.
pub fn restore(model: &mut Model, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.digest != topology_digest(model) {
        return Err(Error::Checkpoint(
            "topology digest differs from the configured model".into(),
        ));
    }
    let shapes_match = ckpt.tensors.len() == model.tensors().len()
        && ckpt.tensors.iter().zip(model.tensors()).all(|(a, b)| a.shape() == b.shape());
    let state_ok = ckpt.state.as_ref().is_none_or(|s| {
        s.velocity.len() == ckpt.tensors.len()
            && s.velocity.iter().zip(&ckpt.tensors).all(|(v, t)| v.shape() == t.shape())
    });
    if !shapes_match || !state_ok {
        return Err(Error::Checkpoint("tensor shapes differ from the configured model".into()));
    }
    for (dst, src) in model.tensors_mut().into_iter().zip(&ckpt.tensors) {
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

/// [`read`] then [`restore`].
pub fn load(path: &Path, model: &mut Model) -> Result<Checkpoint> {
    let ckpt = read(path)?;
    restore(model, &ckpt)?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::HeadSpec;
    use crate::rng::RngState;

    fn model(seed: u64, hidden: usize) -> Model {
        let body = vec![LayerSpec::dense(hidden), LayerSpec::Relu, LayerSpec::dense(3)];
        Model::build(&body, &[4], &[HeadSpec::Linear { init: Init::Xavier }, HeadSpec::Softmax], &[1, 2], 3, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cldl");
        let src = model(1, 5);
        let mut state = TrainState::fresh(&src);
        state.epoch = 7;
        state.velocity[0].data_mut()[0] = -0.125;
        save(&path, &src, 1, Some(&state)).unwrap();

        let mut dst = model(2, 5);
        let ck = load(&path, &mut dst).unwrap();
        assert_eq!(ck.seed, 1);
        assert_eq!(ck.state.as_ref(), Some(&state));
        for (a, b) in src.tensors().iter().zip(dst.tensors()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"CLDL");
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode(&model(3, 5), 3, None), encode(&model(3, 5), 3, None));
    }

    #[test]
    fn topology_mismatch_refuses_load() {
        let bytes = encode(&model(1, 5), 1, None);
        let ck = decode(&bytes).unwrap();
        let mut other = model(1, 6);
        assert!(matches!(restore(&mut other, &ck), Err(Error::Checkpoint(m)) if m.contains("topology")));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&model(1, 5), 1, None);
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("magic"));
        let good = encode(&model(1, 5), 1, None);
        let mut flipped = good.clone();
        flipped[60] ^= 1;
        assert!(decode(&flipped).is_err());
        assert!(decode(&good[..good.len() - 5]).is_err());
    }
}
