//! Named parameter collection, model dimensions and seeded initialisation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ENC_W: &str = "enc.w";
pub const ENC_BIAS: &str = "enc.bias";
pub const TEXT_EMBED: &str = "text.embed";
pub const TEXT_PROJ: &str = "text.proj";
pub const TEXT_BIAS: &str = "text.bias";
pub const DEC_EMBED: &str = "dec.embed";
pub const ATT_W_IH: &str = "dec.att_lstm.w_ih";
pub const ATT_W_HH: &str = "dec.att_lstm.w_hh";
pub const ATT_BIAS: &str = "dec.att_lstm.bias";
pub const ATTN_KEY: &str = "dec.attn.w_key";
pub const ATTN_QUERY: &str = "dec.attn.w_query";
pub const ATTN_SCORE: &str = "dec.attn.v";
pub const LANG_W_IH: &str = "dec.lang_lstm.w_ih";
pub const LANG_W_HH: &str = "dec.lang_lstm.w_hh";
pub const LANG_BIAS: &str = "dec.lang_lstm.bias";
pub const OUT_W: &str = "dec.out.w";
pub const OUT_BIAS: &str = "dec.out.bias";

/// Layer sizes of the encoder, text stand-in and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Raw per-clip feature size.
    pub d_v: usize,
    /// Encoder middle-state size.
    pub d_h: usize,
    /// Shared semantic-space size; pooled video states live here too, so it
    /// must equal `d_h`.
    pub d_s: usize,
    /// Decoder word-embedding size.
    pub d_e: usize,
    /// Hidden size of both decoder LSTMs.
    pub d_dec: usize,
    /// Additive-attention size.
    pub d_att: usize,
    /// Token-embedding size of the text encoder.
    pub d_text: usize,
    /// Clips per video.
    pub clips: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_v: 64,
            d_h: 128,
            d_s: 128,
            d_e: 128,
            d_dec: 128,
            d_att: 128,
            d_text: 128,
            clips: 26,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_v,
            self.d_h,
            self.d_s,
            self.d_e,
            self.d_dec,
            self.d_att,
            self.d_text,
            self.clips,
        ];
        if all.contains(&0) {
            return Err(Error::Config(format!(
                "every dimension must be positive: {self:?}"
            )));
        }
        if self.d_h != self.d_s {
            return Err(Error::Config(format!(
                "pooled video states live in the semantic space, so d_h ({}) must equal d_s ({})",
                self.d_h, self.d_s
            )));
        }
        Ok(())
    }

    /// Expected shape of every parameter for a vocabulary of `vocab` tokens.
    pub fn param_shapes(&self, vocab: usize) -> BTreeMap<&'static str, Vec<usize>> {
        let gates = 4 * self.d_dec;
        BTreeMap::from([
            (ENC_W, vec![self.d_v, self.d_h]),
            (ENC_BIAS, vec![self.d_h]),
            (TEXT_EMBED, vec![vocab, self.d_text]),
            (TEXT_PROJ, vec![self.d_text, self.d_s]),
            (TEXT_BIAS, vec![self.d_s]),
            (DEC_EMBED, vec![vocab, self.d_e]),
            (ATT_W_IH, vec![self.d_e + self.d_h + self.d_dec, gates]),
            (ATT_W_HH, vec![self.d_dec, gates]),
            (ATT_BIAS, vec![gates]),
            (ATTN_KEY, vec![self.d_h, self.d_att]),
            (ATTN_QUERY, vec![self.d_dec, self.d_att]),
            (ATTN_SCORE, vec![self.d_att, 1]),
            (LANG_W_IH, vec![self.d_h + self.d_dec, gates]),
            (LANG_W_HH, vec![self.d_dec, gates]),
            (LANG_BIAS, vec![gates]),
            (OUT_W, vec![self.d_dec, vocab]),
            (OUT_BIAS, vec![vocab]),
        ])
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-parameter gradients, keyed like [`ModelParams`].
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Seeded initialisation. Weights are uniform in `±1/sqrt(fan_in)`,
    /// embeddings are uniform in `±0.1`, biases start at zero except the LSTM
    /// forget gates, which start at one.
    pub fn init(dims: &ModelDims, vocab: usize, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::new();
        for (name, shape) in dims.param_shapes(vocab) {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("bias") {
                let mut b = vec![0.0; numel];
                if name == ATT_BIAS || name == LANG_BIAS {
                    let d = dims.d_dec;
                    b[d..2 * d].iter_mut().for_each(|v| *v = 1.0);
                }
                b
            } else if name.ends_with("embed") {
                (0..numel).map(|_| rng.random_range(-0.1..0.1)).collect()
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                (0..numel)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        Ok(params)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Pulls parameter gradients out of a finished backward pass; parameters
    /// the loss never reached get zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &crate::autodiff::Gradients) -> ParamGrads {
        bound
            .iter()
            .map(|(name, var)| {
                let numel = self.tensors[name].numel();
                (name.to_string(), grads.wrt_or_zeros(var, numel))
            })
            .collect()
    }

    /// Checks every parameter against the shapes `dims` implies.
    pub fn check_shapes(&self, dims: &ModelDims, vocab: usize) -> Result<()> {
        let expected = dims.param_shapes(vocab);
        for (name, shape) in &expected {
            match self.tensors.get(*name) {
                None => return Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.names().find(|n| !expected.contains_key(n)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// FNV-1a digest over names, shapes and value bits; equal digests mean
    /// bit-identical parameters for all practical purposes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let dims = ModelDims::default();
        let a = ModelParams::init(&dims, 30, 7).unwrap();
        let b = ModelParams::init(&dims, 30, 7).unwrap();
        let c = ModelParams::init(&dims, 30, 8).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        a.check_shapes(&dims, 30).unwrap();
        assert!(a.check_shapes(&dims, 31).is_err());
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let dims = ModelDims {
            d_dec: 3,
            ..ModelDims::default()
        };
        let p = ModelParams::init(&dims, 5, 0).unwrap();
        let b = p.get(ATT_BIAS).unwrap().data();
        assert_eq!(b, &[0., 0., 0., 1., 1., 1., 0., 0., 0., 0., 0., 0.]);
    }

    #[test]
    fn mismatched_semantic_dims_rejected() {
        let dims = ModelDims {
            d_s: 64,
            ..ModelDims::default()
        };
        assert!(matches!(dims.validate(), Err(Error::Config(_))));
    }
}
