//! Caption metrics over pre-tokenised sentences: corpus BLEU-4, ROUGE-L and
//! CIDEr. METEOR is not provided.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

/// Added to a zero clipped-match count so the geometric mean stays defined.
pub const BLEU_SMOOTHING: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
const MAX_N: usize = 4;

type NgramCounts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> NgramCounts<'_> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_inputs(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Contract("no hypotheses to score".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("hypothesis {i} has no references")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuDetail {
    pub score: f64,
    /// Modified precisions for n = 1..4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// True when some order had zero matches and was smoothed.
    pub smoothed: bool,
}

/// Corpus-level BLEU-4 with clipped counts and the closest-reference
/// brevity penalty (ties prefer the shorter reference). An order with no
/// hypothesis n-grams anywhere in the corpus has vacuous precision 1.
pub fn bleu4_detail(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<BleuDetail> {
    check_inputs(hyps, refs)?;
    let mut matches = [0usize; MAX_N];
    let mut totals = [0usize; MAX_N];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (hyp, rs) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let h = ngrams(hyp, n);
            let mut max_ref: NgramCounts = BTreeMap::new();
            for r in rs {
                for (g, c) in ngrams(r, n) {
                    let slot = max_ref.entry(g).or_insert(0);
                    *slot = (*slot).max(c);
                }
            }
            matches[n - 1] += h
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += h.values().sum::<usize>();
        }
    }
    let mut precisions = [1.0; MAX_N];
    let mut smoothed = false;
    for n in 0..MAX_N {
        if totals[n] == 0 {
            continue;
        }
        let mut m = matches[n] as f64;
        if matches[n] == 0 {
            m += BLEU_SMOOTHING;
            smoothed = true;
        }
        precisions[n] = m / totals[n] as f64;
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_N as f64;
    let score = (brevity_penalty * log_mean.exp()).clamp(0.0, 1.0);
    Ok(BleuDetail {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
        smoothed,
    })
}

pub fn bleu4(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<f64> {
    Ok(bleu4_detail(hyps, refs)?.score)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { above.max(row[j]) };
            diag = above;
        }
    }
    row[b.len()]
}

/// LCS F-measure of one hypothesis against its best reference.
pub fn rouge_l_sentence(hyp: &[String], refs: &[Sentence]) -> f64 {
    let beta2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let lcs = lcs_len(hyp, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / hyp.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + beta2) * p * rec / (rec + beta2 * p)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<f64> {
    check_inputs(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| rouge_l_sentence(h, r))
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Per-video CIDEr scores. Document frequency counts the reference sets
/// containing an n-gram; n-gram vectors hold raw counts times
/// `ln(N) - ln(max(1, df))`.
pub fn cider_per_video(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<Vec<f64>> {
    check_inputs(hyps, refs)?;
    let log_n = (refs.len() as f64).ln();
    let mut df: Vec<BTreeMap<&[String], usize>> = vec![BTreeMap::new(); MAX_N];
    for rs in refs {
        for n in 1..=MAX_N {
            let set: BTreeSet<&[String]> =
                rs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in set {
                *df[n - 1].entry(g).or_insert(0) += 1;
            }
        }
    }
    let vectorise = |tokens: &'_ [String], n: usize| -> (BTreeMap<Vec<String>, f64>, f64) {
        let mut v = BTreeMap::new();
        let mut norm = 0.0;
        for (g, c) in ngrams(tokens, n) {
            let d = df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64;
            let w = c as f64 * (log_n - d.ln());
            norm += w * w;
            v.insert(g.to_vec(), w);
        }
        (v, norm.sqrt())
    };
    let mut scores = Vec::with_capacity(hyps.len());
    for (hyp, rs) in hyps.iter().zip(refs) {
        let mut total = 0.0;
        for r in rs {
            let mut per_n = 0.0;
            for n in 1..=MAX_N {
                let (vh, nh) = vectorise(hyp, n);
                let (vr, nr) = vectorise(r, n);
                if nh > 0.0 && nr > 0.0 {
                    let dot: f64 = vh
                        .iter()
                        .map(|(g, w)| w * vr.get(g).copied().unwrap_or(0.0))
                        .sum();
                    per_n += dot / (nh * nr);
                }
            }
            total += per_n / MAX_N as f64;
        }
        scores.push(10.0 * total / rs.len() as f64);
    }
    Ok(scores)
}

pub fn cider(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<f64> {
    let per = cider_per_video(hyps, refs)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VideoScore {
    pub video_id: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Always `None`; METEOR needs external synonym resources.
    pub meteor: Option<f64>,
    pub bleu_smoothed: bool,
    pub per_video: Vec<VideoScore>,
}

impl MetricReport {
    pub fn compute(ids: &[String], hyps: &[Sentence], refs: &[Vec<Sentence>]) -> Result<Self> {
        if ids.len() != hyps.len() {
            return Err(Error::Contract(format!(
                "{} ids for {} hypotheses",
                ids.len(),
                hyps.len()
            )));
        }
        let detail = bleu4_detail(hyps, refs)?;
        let ciders = cider_per_video(hyps, refs)?;
        let mut per_video = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let one_h = std::slice::from_ref(&hyps[i]);
            let one_r = std::slice::from_ref(&refs[i]);
            per_video.push(VideoScore {
                video_id: id.clone(),
                bleu4: bleu4(one_h, one_r)?,
                rouge_l: rouge_l_sentence(&hyps[i], &refs[i]),
                cider: ciders[i],
            });
        }
        Ok(Self {
            bleu4: detail.score,
            rouge_l: rouge_l(hyps, refs)?,
            cider: ciders.iter().sum::<f64>() / ciders.len() as f64,
            meteor: None,
            bleu_smoothed: detail.smoothed,
            per_video,
        })
    }

    pub fn summary_line(&self) -> String {
        format!(
            "BLEU-4 {:.4}  ROUGE-L {:.4}  CIDEr {:.4}  METEOR n/a{}",
            self.bleu4,
            self.rouge_l,
            self.cider,
            if self.bleu_smoothed {
                "  (BLEU smoothed)"
            } else {
                ""
            }
        )
    }
}

/// Splits on whitespace.
pub fn tokenize(text: &str) -> Sentence {
    text.split_whitespace().map(str::to_owned).collect()
}
