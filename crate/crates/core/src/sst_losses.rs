//! Semantic-space losses between the video, text and support embeddings.
//!
//! * Inter-modality: max-of-hinges triplet loss between pooled video states
//!   and text embeddings, using only the hardest in-batch negative per side.
//! * Intra-modality: a contrastive loss on the cosine distance between each
//!   video and its own support mixture, blended by a control signal `Y`.
//!
//! Both reduce over the batch with the mean.

use crate::autodiff::{cosine_similarity_matrix, paired_cosine, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SstConfig {
    /// Triplet margin.
    pub alpha: f64,
    /// Contrastive margin.
    pub m: f64,
    /// Blend between pulling pairs together (0) and pushing them apart (1).
    pub y_signal: f64,
}

impl Default for SstConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            m: 0.2,
            y_signal: 1.0,
        }
    }
}

impl SstConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_nan() || self.m.is_nan() || self.alpha <= 0.0 || self.m <= 0.0 {
            return Err(Error::Config(format!(
                "margins must be positive (alpha {}, m {})",
                self.alpha, self.m
            )));
        }
        if !(0.0..=1.0).contains(&self.y_signal) {
            return Err(Error::Config(format!(
                "Y must lie in [0, 1], got {}",
                self.y_signal
            )));
        }
        Ok(())
    }
}

/// For `sim[i,j] = s(v_i, t_j)`: the hardest negative caption of each video
/// (`argmax_{j != i} sim[i,j]`) and the hardest negative video of each caption
/// (`argmax_{i != j} sim[i,j]`). Ties go to the lowest index.
pub fn hardest_negatives(sim: &Tensor) -> Result<(Vec<usize>, Vec<usize>)> {
    let b = match sim.shape() {
        [r, c] if r == c => *r,
        s => {
            return Err(Error::Dimension(format!(
                "similarity must be square, got {s:?}"
            )))
        }
    };
    if b < 2 {
        return Err(Error::NoNegatives(b));
    }
    let argmax = |vals: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in vals {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        best.expect("b >= 2 leaves a candidate").0
    };
    let neg_text = (0..b)
        .map(|i| argmax(&mut (0..b).filter(|&j| j != i).map(|j| (j, sim.get(&[i, j])))))
        .collect();
    let neg_video = (0..b)
        .map(|j| argmax(&mut (0..b).filter(|&i| i != j).map(|i| (i, sim.get(&[i, j])))))
        .collect();
    Ok((neg_text, neg_video))
}

/// Max-of-hinges triplet loss on a precomputed `[B,B]` similarity matrix.
/// A batch of one has no negatives and yields 0.
pub fn triplet_from_similarity(tape: &mut Tape, sim: Var, cfg: &SstConfig) -> Result<Var> {
    let b = tape.shape(sim)[0];
    if b < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (neg_text, neg_video) = hardest_negatives(tape.value(sim))?;
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let row_neg: Vec<(usize, usize)> = (0..b).map(|i| (i, neg_text[i])).collect();
    let col_neg: Vec<(usize, usize)> = (0..b).map(|i| (neg_video[i], i)).collect();

    let pos = tape.gather_entries(sim, &diag)?;
    let s_t = tape.gather_entries(sim, &row_neg)?;
    let s_v = tape.gather_entries(sim, &col_neg)?;

    let d_t = tape.sub(s_t, pos)?;
    let d_t = tape.add_scalar(d_t, cfg.alpha)?;
    let h_t = tape.relu(d_t)?;
    let d_v = tape.sub(s_v, pos)?;
    let d_v = tape.add_scalar(d_v, cfg.alpha)?;
    let h_v = tape.relu(d_v)?;
    let per_pair = tape.add(h_t, h_v)?;
    tape.mean_all(per_pair)
}

/// Triplet loss between pooled video states and text embeddings.
pub fn triplet_loss_inter(
    tape: &mut Tape,
    vo_pooled: Var,
    t_gt: Var,
    cfg: &SstConfig,
) -> Result<Var> {
    cfg.validate()?;
    let sim = cosine_similarity_matrix(tape, vo_pooled, t_gt)?;
    triplet_from_similarity(tape, sim, cfg)
}

/// `mean_i (1-Y) D_i^2 + Y max(0, m - D_i)^2` with `D_i = 1 - cos(vo_i, vs_i)`.
pub fn contrastive_loss_intra(
    tape: &mut Tape,
    vo_pooled: Var,
    vs_pooled: Var,
    cfg: &SstConfig,
) -> Result<Var> {
    cfg.validate()?;
    if tape.shape(vo_pooled) != tape.shape(vs_pooled) {
        return Err(Error::Dimension(format!(
            "paired embeddings {:?} and {:?} differ",
            tape.shape(vo_pooled),
            tape.shape(vs_pooled)
        )));
    }
    let cos = paired_cosine(tape, vo_pooled, vs_pooled)?;
    let neg = tape.scale(cos, -1.0)?;
    let dist = tape.add_scalar(neg, 1.0)?;

    let pull = tape.square(dist)?;
    let pull = tape.scale(pull, 1.0 - cfg.y_signal)?;
    let gap = tape.scale(dist, -1.0)?;
    let gap = tape.add_scalar(gap, cfg.m)?;
    let hinge = tape.relu(gap)?;
    let push = tape.square(hinge)?;
    let push = tape.scale(push, cfg.y_signal)?;
    let per_pair = tape.add(pull, push)?;
    tape.mean_all(per_pair)
}
