//! Binary checkpoints. All integers and floats are little-endian.
//!
//! ```text
//! "SMRE"            magic
//! u32               format version
//! u64 u64           completed epochs, optimiser step
//! u8 [u64 f64]      best-epoch flag, then its epoch and validation score
//! u32 + bytes       configuration text
//! u32 u32 + bytes   vocabulary min_count, newline-joined words
//! u32               tensor count
//! per tensor:       u32 + name bytes, u8 dtype (0 = f64), u32 ndim,
//!                   u64 dims, u64 payload offset
//! u64               payload length in bytes
//! payload           raw tensor data in manifest order
//! ```
//!
//! Tensors are named `param/<name>`, `adam.m/<name>`, `adam.v/<name>` and,
//! when a best epoch is recorded, `best/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{parse_config, to_config_text};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::{ModelDims, ModelParams};
use crate::tensor::Tensor;
use crate::training::{Selection, TrainConfig, TrainState};
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"SMRE";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let state = &ckpt.state;
    let mut named: Vec<(String, &[usize], &[f64])> = Vec::new();
    for (name, t) in state.params.iter() {
        named.push((format!("param/{name}"), t.shape(), t.data()));
    }
    for (prefix, moments) in [("adam.m", &state.adam.m), ("adam.v", &state.adam.v)] {
        for (name, values) in moments {
            let shape = state.params.get(name).map_or(&[][..], Tensor::shape);
            named.push((format!("{prefix}/{name}"), shape, values));
        }
    }
    if let Some(best) = &state.best {
        for (name, t) in best.params.iter() {
            named.push((format!("best/{name}"), t.shape(), t.data()));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u64(&mut out, state.epoch as u64);
    put_u64(&mut out, state.adam.step);
    match &state.best {
        Some(b) => {
            out.push(1);
            put_u64(&mut out, b.epoch as u64);
            out.extend_from_slice(&b.score.to_le_bytes());
        }
        None => out.push(0),
    }
    put_bytes(&mut out, to_config_text(&ckpt.config).as_bytes());
    put_u32(&mut out, state.vocab.min_count() as u32);
    put_bytes(&mut out, state.vocab.words().join("\n").as_bytes());
    put_u32(&mut out, named.len() as u32);
    let mut offset = 0u64;
    for (name, shape, data) in &named {
        put_bytes(&mut out, name.as_bytes());
        out.push(DTYPE_F64);
        let dims: Vec<usize> = if shape.is_empty() {
            vec![data.len()]
        } else {
            shape.to_vec()
        };
        put_u32(&mut out, dims.len() as u32);
        for d in dims {
            put_u64(&mut out, d as u64);
        }
        put_u64(&mut out, offset);
        offset += 8 * data.len() as u64;
    }
    put_u64(&mut out, offset);
    for (_, _, data) in &named {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated file while reading {what} at byte {}",
                    self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let epoch = r.u64("epoch")? as usize;
    let step = r.u64("step")?;
    let best_header = match r.u8("best flag")? {
        0 => None,
        1 => Some((
            r.u64("best epoch")? as usize,
            f64::from_le_bytes(r.take(8, "best score")?.try_into().expect("8 bytes")),
        )),
        f => return Err(Error::Checkpoint(format!("invalid best-epoch flag {f}"))),
    };
    let config = parse_config(&r.string("config")?)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let min_count = r.u32("vocabulary")? as usize;
    let words = r.string("vocabulary")?;
    let words = words
        .split('\n')
        .filter(|w| !w.is_empty())
        .map(str::to_owned);
    let vocab =
        Vocabulary::from_tokens(words, min_count).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let count = r.u32("tensor count")? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has unknown dtype {dtype}"
            )));
        }
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("dims")? as usize);
        }
        let offset = r.u64("offset")?;
        manifest.push((name, shape, offset));
    }
    let payload_len = r.u64("payload length")? as usize;
    let payload = r.take(payload_len, "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut params = ModelParams::new();
    let mut best_params = ModelParams::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, shape, offset) in manifest {
        let numel: usize = shape.iter().product();
        let start = offset as usize;
        let end = start
            .checked_add(numel.saturating_mul(8))
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` runs past the payload")))?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match name.split_once('/') {
            Some(("param", p)) => {
                let t = Tensor::new(shape, data)
                    .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
                params.insert(p, t);
            }
            Some(("best", p)) => {
                let t = Tensor::new(shape, data)
                    .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
                best_params.insert(p, t);
            }
            Some(("adam.m", p)) => {
                m.insert(p.to_string(), data);
            }
            Some(("adam.v", p)) => {
                v.insert(p.to_string(), data);
            }
            _ => return Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
        }
    }
    params.check_shapes(&config.dims, vocab.len())?;
    let best = match best_header {
        Some((epoch, score)) => {
            best_params.check_shapes(&config.dims, vocab.len())?;
            Some(Selection {
                epoch,
                score,
                params: best_params,
            })
        }
        None if best_params.is_empty() => None,
        None => {
            return Err(Error::Checkpoint(
                "best-epoch tensors without a best-epoch header".into(),
            ))
        }
    };
    for (kind, moments) in [("adam.m", &m), ("adam.v", &v)] {
        for (name, t) in params.iter() {
            match moments.get(name) {
                Some(x) if x.len() == t.numel() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{kind}/{name}` is missing or misshapen"
                    )))
                }
            }
        }
    }
    Ok(Checkpoint {
        config,
        state: TrainState {
            params,
            adam: AdamState { step, m, v },
            vocab,
            epoch,
            best,
        },
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Checks the stored parameters against externally supplied sizes.
    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        self.state.params.check_shapes(dims, self.state.vocab.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        let config = TrainConfig {
            dims: ModelDims {
                d_v: 4,
                d_h: 3,
                d_s: 3,
                d_e: 2,
                d_dec: 3,
                d_att: 2,
                d_text: 2,
                clips: 2,
            },
            ..Default::default()
        };
        let vocab = Vocabulary::from_tokens(["a".to_string(), "dog".to_string()], 2).unwrap();
        let params = ModelParams::init(&config.dims, vocab.len(), 3).unwrap();
        let adam = AdamState::for_params(&params);
        let best = Some(Selection {
            epoch: 1,
            score: 0.25,
            params: ModelParams::init(&config.dims, vocab.len(), 4).unwrap(),
        });
        Checkpoint {
            config,
            state: TrainState {
                params,
                adam,
                vocab,
                epoch: 2,
                best,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = tiny();
        let bytes = encode_checkpoint(&c);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&tiny());
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        let e = decode_checkpoint(&bad).unwrap_err().to_string();
        assert!(e.contains("version"), "{e}");
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }

    #[test]
    fn wrong_dims_name_the_tensor() {
        let c = tiny();
        let mut dims = c.config.dims;
        dims.d_h = 7;
        dims.d_s = 7;
        let e = c.check_dims(&dims).unwrap_err().to_string();
        assert!(e.contains("`dec.att_lstm.w_ih`"), "{e}");
    }
}
