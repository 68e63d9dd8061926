//! Video encoder, temporal pooling and the trainable text-embedding stand-in.
//!
//! The text side replaces a pretrained sentence encoder with a token
//! embedding table, a masked mean and an affine projection into the shared
//! semantic space. Mean pooling makes it blind to word order.

use crate::autodiff::{Tape, Var};
use crate::counters;
use crate::error::{Error, Result};
use crate::params::{Bound, ENC_BIAS, ENC_W, TEXT_BIAS, TEXT_EMBED, TEXT_PROJ};
use crate::support_set::SupportBranch;
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

/// Padded `[B, L]` matrix of caption token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Captions {
    rows: usize,
    cols: usize,
    ids: Vec<usize>,
}

impl Captions {
    /// Pads `captions` with PAD to a common length. Each must begin with BOS
    /// and contain exactly one EOS.
    pub fn new(captions: &[Vec<usize>]) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Contract("caption batch is empty".into()));
        }
        let cols = captions.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(captions.len() * cols);
        for (i, cap) in captions.iter().enumerate() {
            if cap.first() != Some(&BOS) {
                return Err(Error::Contract(format!(
                    "caption {i} does not start with BOS"
                )));
            }
            let eos = cap.iter().filter(|&&t| t == EOS).count();
            if eos != 1 || cap.last() != Some(&EOS) {
                return Err(Error::Contract(format!(
                    "caption {i} must end with its single EOS (found {eos})"
                )));
            }
            if cap.contains(&PAD) {
                return Err(Error::Contract(format!(
                    "caption {i} contains PAD before its end"
                )));
            }
            ids.extend_from_slice(cap);
            ids.resize((i + 1) * cols, PAD);
        }
        Ok(Self {
            rows: captions.len(),
            cols,
            ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> usize {
        self.ids[row * self.cols + col]
    }

    pub fn mask(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != PAD
    }

    pub fn row(&self, row: usize) -> &[usize] {
        &self.ids[row * self.cols..(row + 1) * self.cols]
    }
}

/// Minibatch of raw clip features with their tokenised captions.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, d_v]`.
    pub features: Tensor,
    pub captions: Captions,
}

impl Batch {
    pub fn new(features: Tensor, captions: Captions, clips: usize) -> Result<Self> {
        match features.shape() {
            [b, t, _] if *b == captions.rows() && *t == clips => Ok(Self { features, captions }),
            s => Err(Error::Dimension(format!(
                "features {s:?} do not match {} captions with {clips} clips",
                captions.rows()
            ))),
        }
    }

    pub fn size(&self) -> usize {
        self.captions.rows()
    }
}

/// Tape handles for one encoded minibatch.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `V_O'`, `[B, T, d_h]`.
    pub vo_mid: Var,
    /// `[B, d_s]`.
    pub vo_pooled: Var,
    /// Ground-truth text embedding, `[B, d_s]`; absent when no loss needs it.
    pub t_gt: Option<Var>,
    pub support: Option<SupportBranch>,
}

/// Per-clip affine projection `[B,T,d_v] -> [B,T,d_h]`.
pub fn encode_video(tape: &mut Tape, v: Var, params: &Bound) -> Result<Var> {
    let (b, t, d_v) = match tape.shape(v) {
        [b, t, d] => (*b, *t, *d),
        s => {
            return Err(Error::Dimension(format!(
                "encode_video expects [B,T,d_v], got {s:?}"
            )))
        }
    };
    let w = params.get(ENC_W)?;
    if tape.shape(w)[0] != d_v {
        return Err(Error::Contract(format!(
            "feature size {d_v} does not match encoder input size {}",
            tape.shape(w)[0]
        )));
    }
    let d_h = tape.shape(w)[1];
    let flat = tape.reshape(v, &[b * t, d_v])?;
    let proj = tape.matmul(flat, w)?;
    let proj = tape.add_row(proj, params.get(ENC_BIAS)?)?;
    tape.reshape(proj, &[b, t, d_h])
}

/// Mean over the clip axis.
pub fn pool_temporal(tape: &mut Tape, x: Var) -> Result<Var> {
    if tape.shape(x).len() == 3 && tape.shape(x)[1] == 0 {
        return Err(Error::Dimension("cannot pool over zero clips".into()));
    }
    tape.mean_axis1(x)
}

/// Text embedding of each caption: masked mean of token embeddings, then an
/// affine map into the semantic space. With `freeze` the result is cut off
/// from gradient flow.
pub fn encode_text_gt(
    tape: &mut Tape,
    captions: &Captions,
    params: &Bound,
    freeze: bool,
) -> Result<Var> {
    counters::bump_text_encoder();
    let mut flat_ids = Vec::new();
    let mut counts = Vec::with_capacity(captions.rows());
    for r in 0..captions.rows() {
        let before = flat_ids.len();
        flat_ids.extend(captions.row(r).iter().copied().filter(|&t| t != PAD));
        let n = flat_ids.len() - before;
        if n == 0 {
            return Err(Error::Degenerate(format!("caption {r} is all padding")));
        }
        counts.push(n);
    }
    let mut avg = vec![0.0; captions.rows() * flat_ids.len()];
    let mut offset = 0;
    for (r, &n) in counts.iter().enumerate() {
        for j in offset..offset + n {
            avg[r * flat_ids.len() + j] = 1.0 / n as f64;
        }
        offset += n;
    }
    let avg = tape.constant(Tensor::new(vec![captions.rows(), flat_ids.len()], avg)?);
    let emb = tape.gather_rows(params.get(TEXT_EMBED)?, &flat_ids)?;
    let pooled = tape.matmul(avg, emb)?;
    let proj = tape.matmul(pooled, params.get(TEXT_PROJ)?)?;
    let out = tape.add_row(proj, params.get(TEXT_BIAS)?)?;
    Ok(if freeze { tape.detach(out) } else { out })
}

/// Encodes the original video branch, plus the text embedding when `with_text`.
pub fn encode_batch(
    tape: &mut Tape,
    batch: &Batch,
    params: &Bound,
    with_text: bool,
    freeze_text: bool,
) -> Result<(Var, EncodedBatch)> {
    let v_o = tape.constant(batch.features.clone());
    let vo_mid = encode_video(tape, v_o, params)?;
    let vo_pooled = pool_temporal(tape, vo_mid)?;
    let t_gt = if with_text {
        Some(encode_text_gt(tape, &batch.captions, params, freeze_text)?)
    } else {
        None
    };
    Ok((
        v_o,
        EncodedBatch {
            vo_mid,
            vo_pooled,
            t_gt,
            support: None,
        },
    ))
}
