//! Support-set construction: every video in a minibatch gets a companion
//! feature sequence mixed from the whole batch, weighted by how well each
//! video matches its ground-truth text.
//!
//! ```text
//! S   = cos(T_GT, V_O')      rows = captions, columns = videos
//! W   = softmax_j(theta * S)
//! V_S = W x V_O              mixing the raw features, per clip and channel
//! ```
//!
//! The branch exists only during training. It reads ground-truth captions,
//! so it must never run while decoding for evaluation.

use crate::autodiff::{cosine_similarity_matrix, Tape, Var};
use crate::counters;
use crate::encoders::{encode_video, pool_temporal, EncodedBatch};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportConfig {
    pub theta_scale: f64,
    /// Keep `W[i,i]`; when false the diagonal is masked before the softmax
    /// (a single-video batch still mixes only itself).
    pub include_self: bool,
    pub enabled: bool,
}

impl Default for SupportConfig {
    fn default() -> Self {
        Self {
            theta_scale: 10.0,
            include_self: true,
            enabled: true,
        }
    }
}

impl SupportConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta_scale > 0.0 && self.theta_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "theta_scale must be > 0, got {}",
                self.theta_scale
            )))
        }
    }
}

/// Tape handles of the support branch.
#[derive(Clone, Debug)]
pub struct SupportBranch {
    /// Mixing weights `W`, `[B,B]`.
    pub weights: Var,
    /// Support features `V_S`, `[B,T,d_v]`.
    pub vs: Var,
    /// `V_S'`, `[B,T,d_h]`.
    pub vs_mid: Var,
    /// `[B,d_s]`.
    pub vs_pooled: Var,
}

/// Row-stochastic mixing weights from text/video similarity.
pub fn compute_weights(
    tape: &mut Tape,
    t_gt: Var,
    vo_pooled: Var,
    cfg: &SupportConfig,
) -> Result<Var> {
    cfg.validate()?;
    counters::bump_support_weights();
    let sim = cosine_similarity_matrix(tape, t_gt, vo_pooled)?;
    let b = tape.shape(sim)[0];
    let logits = if !cfg.include_self && b > 1 {
        // exp(-1e6) underflows to exactly zero after scaling.
        let penalty = -1e6 / cfg.theta_scale;
        let mut mask = Tensor::zeros(&[b, b]);
        for i in 0..b {
            mask.data_mut()[i * b + i] = penalty;
        }
        let mask = tape.constant(mask);
        tape.add(sim, mask)?
    } else {
        sim
    };
    tape.softmax_lastdim(logits, cfg.theta_scale)
}

/// `V_S[i] = sum_j W[i,j] V_O[j]` at every clip and channel.
pub fn build_support_set(tape: &mut Tape, w: Var, v_o: Var) -> Result<Var> {
    let (b, t, d) = match tape.shape(v_o) {
        [b, t, d] => (*b, *t, *d),
        s => {
            return Err(Error::Dimension(format!(
                "support features expect [B,T,d], got {s:?}"
            )))
        }
    };
    if tape.shape(w) != [b, b] {
        return Err(Error::Dimension(format!(
            "weights {:?} do not match a batch of {b}",
            tape.shape(w)
        )));
    }
    for (i, row) in tape.value(w).data().chunks(b).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!(
                "weight row {i} sums to {sum}, not 1"
            )));
        }
    }
    let flat = tape.reshape(v_o, &[b, t * d])?;
    let mixed = tape.matmul(w, flat)?;
    tape.reshape(mixed, &[b, t, d])
}

/// Adds the support branch to `encoded`. `V_S` is encoded with the same
/// encoder weights as `V_O`.
pub fn forward_support_branch(
    tape: &mut Tape,
    v_o: Var,
    mut encoded: EncodedBatch,
    params: &Bound,
    cfg: &SupportConfig,
    mode: Mode,
) -> Result<EncodedBatch> {
    if mode == Mode::Inference {
        return Err(Error::Mode(
            "the support set uses ground-truth captions and is training-only".into(),
        ));
    }
    if !cfg.enabled {
        encoded.support = None;
        return Ok(encoded);
    }
    let t_gt = encoded
        .t_gt
        .ok_or_else(|| Error::Contract("support branch needs the text embedding".into()))?;
    let weights = compute_weights(tape, t_gt, encoded.vo_pooled, cfg)?;
    let vs = build_support_set(tape, weights, v_o)?;
    let vs_mid = encode_video(tape, vs, params)?;
    let vs_pooled = pool_temporal(tape, vs_mid)?;
    encoded.support = Some(SupportBranch {
        weights,
        vs,
        vs_mid,
        vs_pooled,
    });
    Ok(encoded)
}
