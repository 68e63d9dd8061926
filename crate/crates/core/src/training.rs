//! Composite objective, epoch loop, model selection, the five-row ablation
//! and the `Y` sweep.
//!
//! ```text
//! l_overall = λ1·l_inter + λ2·l_intra + λ3·l_sup_cap + l_ori_cap
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::corpus::{Corpus, Split, VideoRecord};
use crate::counters::{self, Counters};
use crate::decoder::{beam_search_decode, caption_cross_entropy, teacher_forced_decode};
use crate::encoders::{encode_batch, Batch, Captions};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use crate::params::{Bound, ModelDims, ModelParams};
use crate::sst_losses::{contrastive_loss_intra, triplet_loss_inter, SstConfig};
use crate::support_set::{forward_support_branch, Mode, SupportConfig};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

/// Tolerance of the loss recomposition identity.
pub const IDENTITY_TOL: f64 = 1e-6;
pub const DEFAULT_Y_GRID: [f64; 5] = [0.0, 0.2, 0.5, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub sst: SstConfig,
    pub support: SupportConfig,
    pub use_inter: bool,
    pub use_intra: bool,
    pub use_sup_cap: bool,
    /// Cut gradients into the text encoder.
    pub freeze_text: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beam_size: usize,
    pub tel_prob: f64,
    pub seed: u64,
    pub dims: ModelDims,
    pub max_len: usize,
    pub length_norm: bool,
    pub grad_clip: f64,
    pub min_count: usize,
    /// Every reduction already runs in a fixed order; the flag is recorded
    /// with the run for reproducibility.
    pub determinism: bool,
    /// Keep the parameters of the epoch with the best validation BLEU-4.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            sst: SstConfig::default(),
            support: SupportConfig::default(),
            use_inter: true,
            use_intra: true,
            use_sup_cap: true,
            freeze_text: false,
            lr: 1e-4,
            epochs: 20,
            batch_size: 8,
            beam_size: 5,
            tel_prob: 1.0,
            seed: 0,
            dims: ModelDims::default(),
            max_len: 20,
            length_norm: false,
            grad_clip: 5.0,
            min_count: 2,
            determinism: false,
            select_best: true,
        }
    }
}

/// Which loss terms a configuration actually computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Branches {
    pub inter: bool,
    pub intra: bool,
    pub sup_cap: bool,
}

impl Branches {
    pub fn support(&self) -> bool {
        self.intra || self.sup_cap
    }

    pub fn needs_text(&self) -> bool {
        self.inter || self.support()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 || self.beam_size == 0 || self.max_len == 0 {
            return bad("epochs, batch_size, beam_size and max_len must be >= 1".into());
        }
        if self.min_count == 0 {
            return bad("min_count must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.tel_prob) {
            return bad(format!(
                "tel_prob must lie in [0, 1], got {}",
                self.tel_prob
            ));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        self.dims
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.sst.validate()?;
        self.support.validate()
    }

    pub fn branches(&self) -> Branches {
        Branches {
            inter: self.use_inter,
            intra: self.support.enabled && self.use_intra,
            sup_cap: self.support.enabled && self.use_sup_cap,
        }
    }
}

/// Scalar loss values; disabled terms are exactly 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub l_ori_cap: f64,
    pub l_sup_cap: f64,
    pub l_inter: f64,
    pub l_intra: f64,
    pub l_overall: f64,
}

impl LossReport {
    /// The weighted sum of the components.
    pub fn recompose(&self, cfg: &TrainConfig) -> f64 {
        cfg.lambda1 * self.l_inter
            + cfg.lambda2 * self.l_intra
            + cfg.lambda3 * self.l_sup_cap
            + self.l_ori_cap
    }

    pub fn identity_holds(&self, cfg: &TrainConfig) -> bool {
        (self.l_overall - self.recompose(cfg)).abs() <= IDENTITY_TOL
    }

    fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.l_ori_cap += r.l_ori_cap / n;
            m.l_sup_cap += r.l_sup_cap / n;
            m.l_inter += r.l_inter / n;
            m.l_intra += r.l_intra / n;
            m.l_overall += r.l_overall / n;
        }
        m
    }
}

/// Loss handles on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub ori_cap: Var,
    pub sup_cap: Option<Var>,
    pub inter: Option<Var>,
    pub intra: Option<Var>,
}

impl LossComponents {
    pub fn report(&self, tape: &Tape, overall: Var) -> LossReport {
        let val = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        LossReport {
            l_ori_cap: val(Some(self.ori_cap)),
            l_sup_cap: val(self.sup_cap),
            l_inter: val(self.inter),
            l_intra: val(self.intra),
            l_overall: val(Some(overall)),
        }
    }
}

/// Weighted sum of the enabled components. A disabled component must be
/// absent and contributes nothing.
pub fn overall_loss(tape: &mut Tape, parts: &LossComponents, cfg: &TrainConfig) -> Result<Var> {
    let br = cfg.branches();
    let terms = [
        ("l_inter", br.inter, parts.inter, cfg.lambda1),
        ("l_intra", br.intra, parts.intra, cfg.lambda2),
        ("l_sup_cap", br.sup_cap, parts.sup_cap, cfg.lambda3),
    ];
    let mut total = parts.ori_cap;
    for (name, enabled, var, lambda) in terms {
        match (enabled, var) {
            (true, Some(v)) => {
                let weighted = tape.scale(v, lambda)?;
                total = tape.add(total, weighted)?;
            }
            (true, None) => {
                return Err(Error::Contract(format!(
                    "{name} is enabled but was not computed"
                )))
            }
            (false, Some(_)) => {
                return Err(Error::Contract(format!(
                    "{name} is disabled but was computed"
                )))
            }
            (false, None) => {}
        }
    }
    Ok(total)
}

/// Builds every enabled loss for one minibatch and their weighted sum.
pub fn forward_losses<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &Bound,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(LossComponents, Var)> {
    let br = cfg.branches();
    let (v_o, encoded) = encode_batch(tape, batch, params, br.needs_text(), cfg.freeze_text)?;
    let encoded = if br.support() {
        forward_support_branch(tape, v_o, encoded, params, &cfg.support, Mode::Train)?
    } else {
        encoded
    };
    let logits = teacher_forced_decode(
        tape,
        encoded.vo_mid,
        &batch.captions,
        params,
        cfg.tel_prob,
        rng,
    )?;
    let ori_cap = caption_cross_entropy(tape, logits, &batch.captions)?;

    let support = encoded.support.as_ref();
    let sup_cap = match (br.sup_cap, support) {
        (true, Some(s)) => {
            let logits =
                teacher_forced_decode(tape, s.vs_mid, &batch.captions, params, cfg.tel_prob, rng)?;
            Some(caption_cross_entropy(tape, logits, &batch.captions)?)
        }
        _ => None,
    };
    let inter = match (br.inter, encoded.t_gt) {
        (true, Some(t)) => Some(triplet_loss_inter(tape, encoded.vo_pooled, t, &cfg.sst)?),
        _ => None,
    };
    let intra = match (br.intra, support) {
        (true, Some(s)) => Some(contrastive_loss_intra(
            tape,
            encoded.vo_pooled,
            s.vs_pooled,
            &cfg.sst,
        )?),
        _ => None,
    };
    let parts = LossComponents {
        ori_cap,
        sup_cap,
        inter,
        intra,
    };
    let overall = overall_loss(tape, &parts, cfg)?;
    Ok((parts, overall))
}

/// Training videos with features converted once and captions encoded.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub ids: Vec<String>,
    pub features: Vec<Tensor>,
    pub captions: Vec<Vec<Vec<usize>>>,
    pub clips: usize,
    pub d_v: usize,
}

impl TrainSet {
    pub fn new(records: &[&VideoRecord], vocab: &Vocabulary) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Contract("training needs at least one video".into()))?;
        let clips = first.features.len();
        let d_v = first.features[0].len();
        let mut features = Vec::with_capacity(records.len());
        for r in records {
            let t = r.feature_tensor()?;
            if t.shape() != [clips, d_v] {
                return Err(Error::Validation {
                    id: r.video_id.clone(),
                    msg: format!("features {:?} differ from [{clips}, {d_v}]", t.shape()),
                });
            }
            features.push(t);
        }
        Ok(Self {
            ids: records.iter().map(|r| r.video_id.clone()).collect(),
            features,
            captions: records
                .iter()
                .map(|r| r.captions.iter().map(|c| vocab.encode_caption(c)).collect())
                .collect(),
            clips,
            d_v,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Minibatch of the given videos, each with the chosen caption.
    pub fn batch(&self, picks: &[(usize, usize)]) -> Result<Batch> {
        let mut data = Vec::with_capacity(picks.len() * self.clips * self.d_v);
        let mut caps = Vec::with_capacity(picks.len());
        for &(v, c) in picks {
            data.extend_from_slice(self.features[v].data());
            caps.push(self.captions[v][c].clone());
        }
        let features = Tensor::new(vec![picks.len(), self.clips, self.d_v], data)?;
        Batch::new(features, Captions::new(&caps)?, self.clips)
    }
}

/// Loss values of one optimiser step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossReport,
    pub grad_norm: f64,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// One pass over shuffled minibatches, one random caption per video.
/// `epoch` selects the shuffle, so a resumed run replays the same order.
pub fn train_epoch(
    data: &TrainSet,
    params: &mut ModelParams,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(LossReport, Vec<StepLog>)> {
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let picks: Vec<(usize, usize)> = order
        .into_iter()
        .map(|v| (v, rng.random_range(0..data.captions[v].len())))
        .collect();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut logs = Vec::new();
    for chunk in picks.chunks(cfg.batch_size) {
        let batch = data.batch(chunk)?;
        let step = opt.step;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let (parts, overall) = forward_losses(&mut tape, &bound, &batch, cfg, &mut rng)
            .map_err(|e| step_error(epoch, step, e))?;
        let losses = parts.report(&tape, overall);
        let grads = tape
            .backward(overall)
            .map_err(|e| step_error(epoch, step, e))?;
        let mut grads = params.collect_grads(&bound, &grads);
        drop(tape);
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch} step {step}: gradient norm {grad_norm}, losses {losses:?}"
            )));
        }
        adam_step(params, &grads, opt, &adam)?;
        logs.push(StepLog {
            epoch,
            step,
            losses,
            grad_norm,
        });
    }
    let reports: Vec<LossReport> = logs.iter().map(|l| l.losses).collect();
    Ok((LossReport::mean(&reports), logs))
}

fn step_error(epoch: usize, step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} step {step}: {msg}")),
        other => other,
    }
}

/// Beam-decodes every record (support branch off) and scores the captions
/// against the record's references. Results are in record order.
pub fn evaluate(
    params: &ModelParams,
    vocab: &Vocabulary,
    records: &[&VideoRecord],
    beam_size: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<(MetricReport, Vec<Vec<String>>)> {
    let mut hyps = Vec::with_capacity(records.len());
    for r in records {
        let ids = beam_search_decode(
            params,
            &r.feature_tensor()?,
            beam_size,
            max_len,
            length_norm,
        )?;
        hyps.push(vocab.decode(&ids));
    }
    let ids: Vec<String> = records.iter().map(|r| r.video_id.clone()).collect();
    let refs: Vec<Vec<Vec<String>>> = records.iter().map(|r| r.captions.clone()).collect();
    Ok((MetricReport::compute(&ids, &hyps, &refs)?, hyps))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub losses: LossReport,
    pub val_bleu4: Option<f64>,
}

/// Best epoch so far by validation BLEU-4.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub epoch: usize,
    pub score: f64,
    pub params: ModelParams,
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub vocab: Vocabulary,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best: Option<Selection>,
}

impl TrainState {
    /// Fresh parameters seeded from `cfg.seed`, vocabulary from the training
    /// split.
    pub fn init(corpus: &Corpus, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let train = corpus.split(Split::Train);
        let vocab = Vocabulary::build(
            train
                .iter()
                .flat_map(|r| r.captions.iter().map(Vec::as_slice)),
            cfg.min_count,
        )?;
        let params = ModelParams::init(&cfg.dims, vocab.len(), cfg.seed)?;
        let adam = AdamState::for_params(&params);
        Ok(Self {
            params,
            adam,
            vocab,
            epoch: 0,
            best: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters chosen by validation BLEU-4, or the final ones.
    pub selected: ModelParams,
    pub selected_epoch: usize,
    pub history: Vec<EpochSummary>,
    pub steps: Vec<StepLog>,
    /// Branch invocations during this run.
    pub counters: Counters,
}

/// Runs the epochs from `state.epoch` up to `until` (exclusive bound on the
/// epoch index, at most `cfg.epochs`).
pub fn train_until(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut state: TrainState,
    until: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = corpus.split(Split::Train);
    let val = corpus.split(Split::Val);
    let data = TrainSet::new(&train, &state.vocab)?;
    if data.d_v != cfg.dims.d_v || data.clips != cfg.dims.clips {
        return Err(Error::Config(format!(
            "corpus has {} clips of size {}, config expects {} of size {}",
            data.clips, data.d_v, cfg.dims.clips, cfg.dims.d_v
        )));
    }
    let before = counters::snapshot();
    let mut history = Vec::new();
    let mut steps = Vec::new();
    let until = until.min(cfg.epochs);
    while state.epoch < until {
        let (losses, logs) =
            train_epoch(&data, &mut state.params, &mut state.adam, cfg, state.epoch)?;
        steps.extend(logs);
        state.epoch += 1;
        let val_bleu4 = if cfg.select_best && !val.is_empty() {
            let (report, _) = evaluate(
                &state.params,
                &state.vocab,
                &val,
                cfg.beam_size,
                cfg.max_len,
                cfg.length_norm,
            )?;
            Some(report.bleu4)
        } else {
            None
        };
        if let Some(score) = val_bleu4 {
            if state.best.as_ref().is_none_or(|b| score > b.score) {
                state.best = Some(Selection {
                    epoch: state.epoch,
                    score,
                    params: state.params.clone(),
                });
            }
        }
        history.push(EpochSummary {
            epoch: state.epoch,
            losses,
            val_bleu4,
        });
    }
    let (selected, selected_epoch) = match (&state.best, cfg.select_best) {
        (Some(b), true) => (b.params.clone(), b.epoch),
        _ => (state.params.clone(), state.epoch),
    };
    Ok(TrainOutcome {
        state,
        selected,
        selected_epoch,
        history,
        steps,
        counters: counters::snapshot() - before,
    })
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let state = TrainState::init(corpus, cfg)?;
    train_until(corpus, cfg, state, cfg.epochs)
}

/// Outcome of one configuration in a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub name: String,
    pub branches: Branches,
    pub support_enabled: bool,
    pub lambdas: [f64; 3],
    pub y_signal: f64,
    pub final_losses: LossReport,
    pub val: MetricReport,
    pub initial_fingerprint: u64,
    pub support_weight_calls: u64,
    pub text_encoder_calls: u64,
}

fn run_row(corpus: &Corpus, name: &str, cfg: &TrainConfig) -> Result<ResultRow> {
    let state = TrainState::init(corpus, cfg)?;
    let initial_fingerprint = state.params.fingerprint();
    let outcome = train_until(corpus, cfg, state, cfg.epochs)?;
    let val_split = corpus.split(Split::Val);
    let records = if val_split.is_empty() {
        corpus.split(Split::Train)
    } else {
        val_split
    };
    let (val, _) = evaluate(
        &outcome.selected,
        &outcome.state.vocab,
        &records,
        cfg.beam_size,
        cfg.max_len,
        cfg.length_norm,
    )?;
    Ok(ResultRow {
        name: name.to_string(),
        branches: cfg.branches(),
        support_enabled: cfg.support.enabled,
        lambdas: [cfg.lambda1, cfg.lambda2, cfg.lambda3],
        y_signal: cfg.sst.y_signal,
        final_losses: outcome.history.last().map(|h| h.losses).unwrap_or_default(),
        val,
        initial_fingerprint,
        support_weight_calls: outcome.counters.support_weights,
        text_encoder_calls: outcome.counters.text_encoder,
    })
}

/// The five ablation configurations derived from `base`, in table order.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |inter: bool, intra: bool, sup: bool, support: bool| {
        let mut c = base.clone();
        c.use_inter = inter;
        c.use_intra = intra;
        c.use_sup_cap = sup;
        c.support.enabled = support;
        if !inter {
            c.lambda1 = 0.0;
        }
        if !intra {
            c.lambda2 = 0.0;
        }
        if !sup {
            c.lambda3 = 0.0;
        }
        c
    };
    vec![
        ("baseline", with(false, false, false, false)),
        ("l_sup", with(false, false, true, true)),
        ("l_sup+l_inter", with(true, false, true, true)),
        ("l_sup+l_intra", with(false, true, true, true)),
        ("l_overall", with(true, true, true, true)),
    ]
}

pub fn run_ablation(corpus: &Corpus, base: &TrainConfig) -> Result<Vec<ResultRow>> {
    base.validate()?;
    ablation_configs(base)
        .iter()
        .map(|(name, cfg)| run_row(corpus, name, cfg))
        .collect()
}

/// One full training per `Y`, everything else fixed.
pub fn sweep_y(corpus: &Corpus, cfg: &TrainConfig, ys: &[f64]) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    if !cfg.branches().intra {
        return Err(Error::Config(
            "the Y sweep needs the support branch and l_intra enabled".into(),
        ));
    }
    ys.iter()
        .map(|&y| {
            let mut c = cfg.clone();
            c.sst.y_signal = y;
            run_row(corpus, &format!("Y={y}"), &c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &mut Tape, v: f64) -> Var {
        tape.constant(Tensor::scalar(v))
    }

    fn parts(tape: &mut Tape, vals: [f64; 4], cfg: &TrainConfig) -> LossComponents {
        let br = cfg.branches();
        let [inter, intra, sup, ori] = vals;
        LossComponents {
            ori_cap: scalar(tape, ori),
            sup_cap: br.sup_cap.then(|| scalar(tape, sup)),
            inter: br.inter.then(|| scalar(tape, inter)),
            intra: br.intra.then(|| scalar(tape, intra)),
        }
    }

    #[test]
    fn weighted_sums() {
        let cfg = TrainConfig::default();
        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.1, 0.2, 0.3, 0.4], &cfg);
        let l = overall_loss(&mut tape, &p, &cfg).unwrap();
        assert!((tape.value(l).item().unwrap() - 1.0).abs() < 1e-12);

        let cfg = TrainConfig {
            lambda1: 2.0,
            lambda2: 0.0,
            lambda3: 1.0,
            ..Default::default()
        };
        let p = parts(&mut tape, [0.5, 7.0, 0.25, 0.125], &cfg);
        let l = overall_loss(&mut tape, &p, &cfg).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.0 * 0.5 + 0.25 + 0.125);
    }

    #[test]
    fn disabled_support_is_caption_loss_only() {
        let mut cfg = TrainConfig::default();
        cfg.support.enabled = false;
        cfg.use_inter = false;
        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.1, 0.2, 0.3, 0.4], &cfg);
        let l = overall_loss(&mut tape, &p, &cfg).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.4);
    }

    #[test]
    fn missing_component_is_contract_error() {
        let cfg = TrainConfig::default();
        let mut tape = Tape::new();
        let mut p = parts(&mut tape, [0.1, 0.2, 0.3, 0.4], &cfg);
        p.intra = None;
        assert!(matches!(
            overall_loss(&mut tape, &p, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ablation_matrix() {
        let rows = ablation_configs(&TrainConfig::default());
        let flags: Vec<(bool, bool, bool, bool)> = rows
            .iter()
            .map(|(_, c)| {
                let b = c.branches();
                (c.support.enabled, b.inter, b.intra, b.sup_cap)
            })
            .collect();
        assert_eq!(
            flags,
            vec![
                (false, false, false, false),
                (true, false, false, true),
                (true, true, false, true),
                (true, false, true, true),
                (true, true, true, true),
            ]
        );
        assert_eq!((rows[1].1.lambda1, rows[1].1.lambda2), (0.0, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lambda2: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
