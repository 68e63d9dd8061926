//! Two-layer top-down caption decoder.
//!
//! Each step runs an attention LSTM on `[word embedding ; mean clip state ;
//! previous language state]`, attends additively over the clip states with
//! the attention LSTM's output as query, and feeds `[context ; h_att]` to a
//! language LSTM whose output is projected onto the vocabulary.

use rand::Rng;

use crate::autodiff::{log_softmax, Tape, Var};
use crate::encoders::{encode_video, Captions};
use crate::error::{Error, Result};
use crate::params::{
    Bound, ModelParams, ATTN_KEY, ATTN_QUERY, ATTN_SCORE, ATT_BIAS, ATT_W_HH, ATT_W_IH, DEC_EMBED,
    LANG_BIAS, LANG_W_HH, LANG_W_IH, OUT_BIAS, OUT_W,
};
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS, PAD};

/// Recurrent state of both LSTMs, each `[B, d_dec]`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h_att: Var,
    pub c_att: Var,
    pub h_lang: Var,
    pub c_lang: Var,
    pub step: usize,
}

/// Per-sequence encoder quantities computed once before decoding.
#[derive(Clone, Copy, Debug)]
pub struct VisualContext {
    /// `[B,T,d_h]`.
    pub v_mid: Var,
    /// Attention keys `v_mid x W_key`, `[B,T,d_att]`.
    pub keys: Var,
    /// `[B,d_h]`.
    pub v_mean: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[B,|V|]`.
    pub logits: Var,
    pub state: DecoderState,
    /// Attention weights over clips, `[B,T]`.
    pub attention: Var,
}

pub fn prepare_context(tape: &mut Tape, v_mid: Var, params: &Bound) -> Result<VisualContext> {
    let (b, t, d_h) = match tape.shape(v_mid) {
        [b, t, d] => (*b, *t, *d),
        s => {
            return Err(Error::Dimension(format!(
                "decoder expects [B,T,d_h] states, got {s:?}"
            )))
        }
    };
    let w_key = params.get(ATTN_KEY)?;
    let d_att = tape.shape(w_key)[1];
    let flat = tape.reshape(v_mid, &[b * t, d_h])?;
    let keys = tape.matmul(flat, w_key)?;
    let keys = tape.reshape(keys, &[b, t, d_att])?;
    let v_mean = tape.mean_axis1(v_mid)?;
    Ok(VisualContext {
        v_mid,
        keys,
        v_mean,
    })
}

pub fn initial_state(tape: &mut Tape, batch: usize, d_dec: usize) -> DecoderState {
    let z = Tensor::zeros(&[batch, d_dec]);
    DecoderState {
        h_att: tape.constant(z.clone()),
        c_att: tape.constant(z.clone()),
        h_lang: tape.constant(z.clone()),
        c_lang: tape.constant(z),
        step: 0,
    }
}

/// Word embeddings for `ids`, `[len, d_e]`.
pub fn embed_tokens(tape: &mut Tape, ids: &[usize], params: &Bound) -> Result<Var> {
    tape.gather_rows(params.get(DEC_EMBED)?, ids)
}

/// One LSTM cell with gate layout `[i | f | g | o]`.
fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    w_ih: Var,
    w_hh: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let d = tape.shape(w_hh)[0];
    let xi = tape.matmul(x, w_ih)?;
    let hh = tape.matmul(h, w_hh)?;
    let gates = tape.add(xi, hh)?;
    let gates = tape.add_row(gates, bias)?;
    let i = tape.slice_cols(gates, 0, d)?;
    let f = tape.slice_cols(gates, d, d)?;
    let g = tape.slice_cols(gates, 2 * d, d)?;
    let o = tape.slice_cols(gates, 3 * d, d)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next)?;
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

pub fn decode_step(
    tape: &mut Tape,
    ctx: &VisualContext,
    prev_emb: Var,
    state: &DecoderState,
    params: &Bound,
) -> Result<StepOutput> {
    let w_hh = params.get(ATT_W_HH)?;
    let d_dec = tape.shape(w_hh)[0];
    let (b, t) = (tape.shape(ctx.v_mid)[0], tape.shape(ctx.v_mid)[1]);
    for (name, v) in [
        ("h_att", state.h_att),
        ("c_att", state.c_att),
        ("h_lang", state.h_lang),
        ("c_lang", state.c_lang),
    ] {
        if tape.shape(v) != [b, d_dec] {
            return Err(Error::Contract(format!(
                "decoder state {name} has shape {:?}, expected [{b}, {d_dec}]",
                tape.shape(v)
            )));
        }
    }
    if tape.shape(prev_emb).first() != Some(&b) {
        return Err(Error::Contract(format!(
            "word embeddings {:?} do not match batch {b}",
            tape.shape(prev_emb)
        )));
    }

    let x_att = tape.concat_cols(&[prev_emb, ctx.v_mean, state.h_lang])?;
    let (h_att, c_att) = lstm_cell(
        tape,
        x_att,
        state.h_att,
        state.c_att,
        params.get(ATT_W_IH)?,
        w_hh,
        params.get(ATT_BIAS)?,
    )?;

    let query = tape.matmul(h_att, params.get(ATTN_QUERY)?)?;
    let pre = tape.add_broadcast_mid(ctx.keys, query)?;
    let pre = tape.tanh(pre)?;
    let d_att = tape.shape(pre)[2];
    let pre = tape.reshape(pre, &[b * t, d_att])?;
    let scores = tape.matmul(pre, params.get(ATTN_SCORE)?)?;
    let scores = tape.reshape(scores, &[b, t])?;
    let attention = tape.softmax_lastdim(scores, 1.0)?;
    let context = tape.weighted_sum_mid(attention, ctx.v_mid)?;

    let x_lang = tape.concat_cols(&[context, h_att])?;
    let (h_lang, c_lang) = lstm_cell(
        tape,
        x_lang,
        state.h_lang,
        state.c_lang,
        params.get(LANG_W_IH)?,
        params.get(LANG_W_HH)?,
        params.get(LANG_BIAS)?,
    )?;
    let logits = tape.matmul(h_lang, params.get(OUT_W)?)?;
    let logits = tape.add_row(logits, params.get(OUT_BIAS)?)?;
    Ok(StepOutput {
        logits,
        state: DecoderState {
            h_att,
            c_att,
            h_lang,
            c_lang,
            step: state.step + 1,
        },
        attention,
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Unrolls the decoder over `captions`, predicting token `s+1` from the
/// prefix up to `s`. Each input after BOS is the gold token with probability
/// `tel_prob`, otherwise the previous step's argmax. Returns `[B, L-1, |V|]`.
pub fn teacher_forced_decode<R: Rng + ?Sized>(
    tape: &mut Tape,
    v_mid: Var,
    captions: &Captions,
    params: &Bound,
    tel_prob: f64,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&tel_prob) {
        return Err(Error::Contract(format!(
            "teacher forcing probability {tel_prob} outside [0, 1]"
        )));
    }
    let b = captions.rows();
    let steps = captions.cols().saturating_sub(1);
    if steps == 0 {
        return Err(Error::Contract("captions need at least BOS and EOS".into()));
    }
    if tape.shape(v_mid).first() != Some(&b) {
        return Err(Error::Dimension(format!(
            "{} captions for encoder states {:?}",
            b,
            tape.shape(v_mid)
        )));
    }
    let ctx = prepare_context(tape, v_mid, params)?;
    let d_dec = tape.shape(params.get(ATT_W_HH)?)[0];
    let mut state = initial_state(tape, b, d_dec);
    let mut outputs = Vec::with_capacity(steps);
    let mut prev_logits: Option<Var> = None;
    for s in 0..steps {
        let ids: Vec<usize> = (0..b)
            .map(|r| {
                let gold = captions.get(r, s);
                match prev_logits {
                    None => gold,
                    Some(_) if tel_prob >= 1.0 => gold,
                    Some(_) if tel_prob > 0.0 && rng.random_bool(tel_prob) => gold,
                    Some(l) => {
                        let v = tape.shape(l)[1];
                        argmax(&tape.value(l).data()[r * v..(r + 1) * v])
                    }
                }
            })
            .collect();
        let emb = embed_tokens(tape, &ids, params)?;
        let out = decode_step(tape, &ctx, emb, &state, params)?;
        state = out.state;
        prev_logits = Some(out.logits);
        outputs.push(out.logits);
    }
    tape.stack_mid(&outputs)
}

/// Mean negative log-likelihood of `captions[:, 1..]` over non-PAD targets.
pub fn caption_cross_entropy(tape: &mut Tape, logits: Var, captions: &Captions) -> Result<Var> {
    let (b, s, v) = match tape.shape(logits) {
        [b, s, v] => (*b, *s, *v),
        sh => {
            return Err(Error::Dimension(format!(
                "caption logits expect [B,S,V], got {sh:?}"
            )))
        }
    };
    if b != captions.rows() || s + 1 != captions.cols() {
        return Err(Error::Dimension(format!(
            "logits [{b},{s},{v}] do not match captions [{}, {}]",
            captions.rows(),
            captions.cols()
        )));
    }
    let mut targets = Vec::with_capacity(b * s);
    let mut weights = Vec::with_capacity(b * s);
    for r in 0..b {
        for step in 0..s {
            targets.push(captions.get(r, step + 1));
            weights.push(if captions.mask(r, step + 1) { 1.0 } else { 0.0 });
        }
    }
    let flat = tape.reshape(logits, &[b * s, v])?;
    tape.cross_entropy(flat, &targets, &weights)
}

/// A next-token distribution that beam search can query.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn start(&mut self) -> Result<Self::State>;

    /// Log-probabilities of every next token after feeding `token`. Tokens
    /// that may never be emitted carry `-inf`.
    fn next_log_probs(
        &mut self,
        state: &Self::State,
        token: usize,
    ) -> Result<(Vec<f64>, Self::State)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Starts with BOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Generated tokens without the leading BOS.
    pub fn output(&self) -> &[usize] {
        &self.tokens[1..]
    }

    fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / (self.tokens.len() - 1).max(1) as f64
        } else {
            self.log_prob
        }
    }
}

/// Length-synchronous beam search. Finished hypotheses stay in the pool and
/// compete with open ones; ties keep generation order, so lower token ids
/// win. Returns the best finished hypothesis, or the best open one when
/// nothing finished within `max_len` tokens.
pub fn beam_search<M: StepModel>(
    model: &mut M,
    beam_size: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<BeamHypothesis> {
    if beam_size < 1 {
        return Err(Error::Contract("beam size must be at least 1".into()));
    }
    if max_len < 1 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut beams: Vec<(BeamHypothesis, Option<M::State>)> = vec![(
        BeamHypothesis {
            tokens: vec![BOS],
            log_prob: 0.0,
            finished: false,
        },
        Some(model.start()?),
    )];
    for _ in 0..max_len {
        if beams.iter().all(|(h, _)| h.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for (hyp, state) in beams {
            let Some(state) = state.filter(|_| !hyp.finished) else {
                candidates.push((hyp, None));
                continue;
            };
            let last = *hyp.tokens.last().expect("hypotheses start with BOS");
            let (log_probs, next) = model.next_log_probs(&state, last)?;
            for (tok, &lp) in log_probs.iter().enumerate() {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                let finished = tok == EOS;
                candidates.push((
                    BeamHypothesis {
                        tokens,
                        log_prob: hyp.log_prob + lp,
                        finished,
                    },
                    (!finished).then(|| next.clone()),
                ));
            }
        }
        candidates.sort_by(|a, b| b.0.score(length_norm).total_cmp(&a.0.score(length_norm)));
        candidates.truncate(beam_size);
        beams = candidates;
    }
    // `beams` is sorted best-first.
    let chosen = beams
        .iter()
        .find(|(h, _)| h.finished)
        .or_else(|| beams.first())
        .expect("beam is never empty");
    Ok(chosen.0.clone())
}

/// Argmax decoding, stopping at EOS or after `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: usize) -> Result<Vec<usize>> {
    let mut state = model.start()?;
    let mut last = BOS;
    let mut out = Vec::new();
    for _ in 0..max_len {
        let (log_probs, next) = model.next_log_probs(&state, last)?;
        last = argmax(&log_probs);
        out.push(last);
        if last == EOS {
            break;
        }
        state = next;
    }
    Ok(out)
}

/// Decoder bound to one video for inference. Only the video encoder and the
/// decoder run; nothing touches captions.
pub struct VideoDecoder {
    tape: Tape,
    params: Bound,
    ctx: VisualContext,
    d_dec: usize,
    vocab: usize,
}

impl VideoDecoder {
    /// `features` is the `[T, d_v]` raw clip matrix of a single video.
    pub fn new(params: &ModelParams, features: &Tensor) -> Result<Self> {
        let (t, d_v) = match features.shape() {
            [t, d] => (*t, *d),
            s => {
                return Err(Error::Dimension(format!(
                    "video features expect [T,d_v], got {s:?}"
                )))
            }
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let v = tape.constant(features.clone().reshape(vec![1, t, d_v])?);
        let v_mid = encode_video(&mut tape, v, &bound)?;
        Self::from_encoded(tape, bound, v_mid)
    }

    /// Decoder over precomputed `[1,T,d_h]` encoder states on `tape`.
    pub fn from_encoded(mut tape: Tape, params: Bound, v_mid: Var) -> Result<Self> {
        if tape.shape(v_mid).first() != Some(&1) {
            return Err(Error::Dimension(
                "a video decoder handles exactly one video".into(),
            ));
        }
        let ctx = prepare_context(&mut tape, v_mid, &params)?;
        let d_dec = tape.shape(params.get(ATT_W_HH)?)[0];
        let vocab = tape.shape(params.get(OUT_BIAS)?)[0];
        Ok(Self {
            tape,
            params,
            ctx,
            d_dec,
            vocab,
        })
    }
}

impl StepModel for VideoDecoder {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&mut self) -> Result<DecoderState> {
        Ok(initial_state(&mut self.tape, 1, self.d_dec))
    }

    fn next_log_probs(
        &mut self,
        state: &DecoderState,
        token: usize,
    ) -> Result<(Vec<f64>, DecoderState)> {
        let emb = embed_tokens(&mut self.tape, &[token], &self.params)?;
        let out = decode_step(&mut self.tape, &self.ctx, emb, state, &self.params)?;
        let mut lp = log_softmax(self.tape.value(out.logits).data());
        lp[PAD] = f64::NEG_INFINITY;
        lp[BOS] = f64::NEG_INFINITY;
        Ok((lp, out.state))
    }
}

/// Beam-decodes one video's `[T, d_v]` features; BOS is stripped and the
/// result ends with EOS when the search finished.
pub fn beam_search_decode(
    params: &ModelParams,
    features: &Tensor,
    beam_size: usize,
    max_len: usize,
    length_norm: bool,
) -> Result<Vec<usize>> {
    let mut model = VideoDecoder::new(params, features)?;
    let best = beam_search(&mut model, beam_size, max_len, length_norm)?;
    Ok(best.output().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            d_v: 4,
            d_h: 5,
            d_s: 5,
            d_e: 3,
            d_dec: 4,
            d_att: 3,
            d_text: 3,
            clips: 3,
        }
    }

    fn features(b: usize, t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![b, t, d],
            (0..b * t * d)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_clip_attention_is_one() {
        let p = ModelParams::init(&dims(), 9, 1).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let v = tape.constant(features(2, 1, 5, 0));
        let ctx = prepare_context(&mut tape, v, &bound).unwrap();
        let st = initial_state(&mut tape, 2, 4);
        let emb = embed_tokens(&mut tape, &[BOS, BOS], &bound).unwrap();
        let out = decode_step(&mut tape, &ctx, emb, &st, &bound).unwrap();
        assert_eq!(tape.value(out.attention).data(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_params_give_output_bias() {
        let d = dims();
        let mut p = ModelParams::init(&d, 9, 1).unwrap();
        let names: Vec<String> = p.names().map(String::from).collect();
        for n in names {
            let shape = p.get(&n).unwrap().shape().to_vec();
            p.insert(n, Tensor::zeros(&shape));
        }
        let bias = Tensor::new(vec![9], (0..9).map(|i| i as f64 * 0.1).collect()).unwrap();
        p.insert(OUT_BIAS, bias.clone());
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let v = tape.constant(Tensor::zeros(&[1, 3, 5]));
        let ctx = prepare_context(&mut tape, v, &bound).unwrap();
        let st = initial_state(&mut tape, 1, 4);
        let emb = embed_tokens(&mut tape, &[BOS], &bound).unwrap();
        let out = decode_step(&mut tape, &ctx, emb, &st, &bound).unwrap();
        assert_eq!(tape.value(out.logits).data(), bias.data());
    }

    #[test]
    fn wrong_state_shape_rejected() {
        let p = ModelParams::init(&dims(), 9, 1).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let v = tape.constant(features(2, 3, 5, 0));
        let ctx = prepare_context(&mut tape, v, &bound).unwrap();
        let st = initial_state(&mut tape, 2, 7);
        let emb = embed_tokens(&mut tape, &[BOS, BOS], &bound).unwrap();
        assert!(matches!(
            decode_step(&mut tape, &ctx, emb, &st, &bound),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_step_caption() {
        let p = ModelParams::init(&dims(), 9, 1).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let v = tape.constant(features(1, 3, 5, 2));
        let caps = Captions::new(&[vec![BOS, EOS]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = teacher_forced_decode(&mut tape, v, &caps, &bound, 1.0, &mut rng).unwrap();
        assert_eq!(tape.shape(logits), &[1, 1, 9]);
    }

    #[test]
    fn cross_entropy_hand_batch() {
        // B=1, L=3 (two predictions), |V|=3.
        let rows = [[0.5, -1.0, 2.0], [1.5, 0.2, -0.3]];
        // Only PAD, BOS and EOS exist; the middle token reuses id 1.
        let caps = Captions::new(&[vec![BOS, 1, EOS]]).unwrap();
        let mut tape = Tape::new();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let logits = tape.constant(Tensor::new(vec![1, 2, 3], flat).unwrap());
        let ce = caption_cross_entropy(&mut tape, logits, &caps).unwrap();
        let nll = |row: &[f64; 3], t: usize| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            -(row[t].exp() / z).ln()
        };
        let expected = (nll(&rows[0], BOS) + nll(&rows[1], EOS)) / 2.0;
        assert!((tape.value(ce).item().unwrap() - expected).abs() < 1e-12);
    }

    /// Fixed next-token table: the distribution depends only on the last token.
    struct Markov {
        table: Vec<Vec<f64>>,
    }

    impl StepModel for Markov {
        type State = ();
        fn vocab_size(&self) -> usize {
            self.table.len()
        }
        fn start(&mut self) -> Result<()> {
            Ok(())
        }
        fn next_log_probs(&mut self, _: &(), token: usize) -> Result<(Vec<f64>, ())> {
            Ok((self.table[token].clone(), ()))
        }
    }

    #[test]
    fn forced_chain_for_any_beam() {
        let ln = |p: f64| if p == 0.0 { f64::NEG_INFINITY } else { p.ln() };
        // BOS -> 3 -> 4 -> EOS with certainty.
        let mut table = vec![vec![f64::NEG_INFINITY; 5]; 5];
        table[BOS] = [0.0, 0.0, 0.0, 1.0, 0.0].map(ln).to_vec();
        table[3] = [0.0, 0.0, 0.0, 0.0, 1.0].map(ln).to_vec();
        table[4] = [0.0, 0.0, 1.0, 0.0, 0.0].map(ln).to_vec();
        let mut m = Markov { table };
        for k in 1..=4 {
            let best = beam_search(&mut m, k, 10, false).unwrap();
            assert_eq!(best.output(), &[3, 4, EOS]);
            assert!(best.finished);
            assert_eq!(best.log_prob, 0.0);
        }
        assert_eq!(greedy_decode(&mut m, 10).unwrap(), vec![3, 4, EOS]);
        assert!(beam_search(&mut m, 0, 3, false).is_err());
    }
}
