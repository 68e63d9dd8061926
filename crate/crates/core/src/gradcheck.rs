//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{Batch, Captions};
use crate::params::{Bound, ModelDims, ModelParams};
use crate::tensor::Tensor;
use crate::training::{forward_losses, TrainConfig};
use crate::vocab::{BOS, EOS, UNK};

/// Worst disagreement found for one named parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &ModelParams) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = f(&mut tape, &bound)?;
    let v = tape.value(out).item()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("objective evaluated to {v}")))
    }
}

/// Compares the tape gradient of the scalar `f` with central differences of
/// step `h` at every entry of every parameter.
pub fn finite_diff_check<F>(f: F, params: &ModelParams, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Contract(format!(
            "finite-difference step {h} outside (0, 1e-2]"
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let analytic = params.collect_grads(&bound, &grads);
    drop(tape);

    let mut work = params.clone();
    let mut report = Vec::new();
    for (name, tensor) in params.iter() {
        let mut check = ParamCheck {
            name: name.to_string(),
            entries: tensor.numel(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &original) in tensor.data().iter().enumerate() {
            work.get_mut(name).expect("cloned params").data_mut()[i] = original + h;
            let plus = evaluate(&f, &work)
                .map_err(|e| Error::NonFinite(format!("f at {name}[{i}] + h: {e}")))?;
            work.get_mut(name).expect("cloned params").data_mut()[i] = original - h;
            let minus = evaluate(&f, &work)
                .map_err(|e| Error::NonFinite(format!("f at {name}[{i}] - h: {e}")))?;
            work.get_mut(name).expect("cloned params").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[name][i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_err || i == 0 {
                check.max_rel_err = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

/// Tolerance on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Small model sizes for finite-difference checks.
pub fn tiny_dims() -> ModelDims {
    ModelDims {
        d_v: 3,
        d_h: 3,
        d_s: 3,
        d_e: 2,
        d_dec: 2,
        d_att: 2,
        d_text: 2,
        clips: 4,
    }
}

/// Vocabulary size used by the suite: the reserved ids plus two words.
pub const TINY_VOCAB: usize = 6;

/// Gain applied to the fan-in bound of the check point.
pub const CHECK_GAIN: f64 = 3.0;

/// A generic point for gradient checks: matrices uniform in
/// `±CHECK_GAIN/sqrt(fan_in)`, vectors uniform in `±1`. At the initial point
/// additive attention is almost linear, which leaves the query gradient
/// below the rounding noise of the objective.
pub fn check_point(dims: &ModelDims, vocab: usize, seed: u64) -> Result<ModelParams> {
    let template = ModelParams::init(dims, vocab, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, t) in template.iter() {
        let bound = match t.shape() {
            [fan_in, _] if !name.ends_with("embed") => CHECK_GAIN / (*fan_in as f64).sqrt(),
            _ => 1.0,
        };
        let data = (0..t.numel())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        params.insert(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(params)
}

/// Seeded random minibatch of `b` videos over a vocabulary of `vocab` ids.
pub fn random_batch(dims: &ModelDims, vocab: usize, b: usize, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * dims.clips * dims.d_v;
    let features = Tensor::new(
        vec![b, dims.clips, dims.d_v],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let captions: Vec<Vec<usize>> = (0..b)
        .map(|_| {
            let len = rng.random_range(1..=4);
            let mut c = vec![BOS];
            c.extend((0..len).map(|_| rng.random_range(UNK..vocab)));
            c.push(EOS);
            c
        })
        .collect();
    Batch::new(features, Captions::new(&captions)?, dims.clips)
}

/// One named finite-difference case of the standard suite.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
}

/// Checks the composite objective and its parts on a B=4 batch at tiny
/// sizes for the given seed.
pub fn standard_suite(seed: u64) -> Result<Vec<SuiteResult>> {
    let dims = tiny_dims();
    let vocab = TINY_VOCAB;
    let params = check_point(&dims, vocab, seed)?;
    let batch = random_batch(&dims, vocab, 4, seed.wrapping_add(1))?;
    let base = TrainConfig {
        dims,
        ..Default::default()
    };
    let mut cases: Vec<(&str, TrainConfig)> = vec![("l_overall", base.clone())];
    let mut c = base.clone();
    c.support.include_self = false;
    c.sst.y_signal = 0.5;
    cases.push(("l_overall, masked diagonal, Y=0.5", c));
    let mut c = base.clone();
    c.sst.y_signal = 0.0;
    c.lambda3 = 0.0;
    cases.push(("l_overall, Y=0, lambda3=0", c));
    let mut c = base.clone();
    c.support.enabled = false;
    cases.push(("l_ori_cap + l_inter", c));
    let mut c = base;
    c.tel_prob = 0.0;
    cases.push(("l_overall, free-running decoder", c));

    let mut out = Vec::new();
    for (name, cfg) in cases {
        let report = finite_diff_check(
            |tape, bound| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                Ok(forward_losses(tape, bound, &batch, &cfg, &mut rng)?.1)
            },
            &params,
            GRADCHECK_STEP,
        )?;
        out.push(SuiteResult {
            name: name.to_string(),
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        p.insert(
            "b",
            Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        );
        let report = finite_diff_check(
            |tape, bound| {
                let a = tape.sum_all(bound.get("a")?)?;
                let b = tape.sum_all(bound.get("b")?)?;
                tape.add(a, b)
            },
            &p,
            1e-5,
        )
        .unwrap();
        for c in &report.params {
            assert_eq!(c.analytic, 1.0);
        }
        assert!(report.max_rel_err() < 1e-9);
    }

    #[test]
    fn step_out_of_range_rejected() {
        let p = ModelParams::new();
        let f = |tape: &mut Tape, _: &Bound| Ok(tape.constant(Tensor::scalar(0.0)));
        assert!(finite_diff_check(f, &p, 0.0).is_err());
        assert!(finite_diff_check(f, &p, 0.1).is_err());
    }
}
