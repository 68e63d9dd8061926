//! Synthetic compositional caption corpus and its JSON-lines file format.
//!
//! Every video has a latent `(subject, verb, object, scene)` tuple. Its clip
//! features are the concatenation of one unit code vector per factor, tiled
//! over all clips, plus Gaussian noise. Codes of different values of the
//! same factor are orthogonal, so in the noiseless case the cosine between
//! two prototypes is exactly the fraction of shared factors. Captions realise
//! the tuple through a few templates with synonym variation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CLIPS: usize = 26;

const SUBJECTS: &[&[&str]] = &[
    &["man", "guy"],
    &["woman", "lady"],
    &["dog", "puppy"],
    &["cat", "kitten"],
    &["boy", "kid"],
    &["girl"],
    &["chef", "cook"],
    &["player"],
];
const VERBS: &[&[&str]] = &[
    &["riding"],
    &["holding", "carrying"],
    &["throwing", "tossing"],
    &["eating"],
    &["washing", "cleaning"],
    &["pushing"],
    &["kicking"],
    &["cutting", "slicing"],
];
const OBJECTS: &[&[&str]] = &[
    &["ball"],
    &["bike", "bicycle"],
    &["car"],
    &["guitar"],
    &["apple"],
    &["box", "crate"],
    &["bottle"],
    &["chair"],
];
const SCENES: &[&[&str]] = &[
    &["park"],
    &["kitchen"],
    &["street", "road"],
    &["beach"],
    &["garden"],
    &["room"],
    &["field"],
    &["yard"],
];

/// Words appended to a small fraction of captions so the UNK path is
/// exercised; most of them fall below the vocabulary threshold.
pub const RARE_TOKENS: &[&str] = &[
    "quickly",
    "slowly",
    "happily",
    "carefully",
    "outside",
    "today",
    "again",
    "alone",
    "together",
    "calmly",
    "briskly",
    "proudly",
];
const RARE_PROB: f64 = 0.04;
const PRIMARY_SYNONYM_PROB: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One video: `[T, d_v]` clip features and its reference captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub split: Split,
    pub features: Vec<Vec<f64>>,
    pub captions: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<[usize; 4]>,
}

impl VideoRecord {
    pub fn feature_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.features)
    }

    pub fn validate(&self, clips: usize) -> Result<()> {
        let fail = |msg: String| Error::Validation {
            id: self.video_id.clone(),
            msg,
        };
        if self.features.len() != clips {
            return Err(fail(format!(
                "expected {clips} feature rows, found {}",
                self.features.len()
            )));
        }
        let d = self.features[0].len();
        if d == 0 || self.features.iter().any(|r| r.len() != d) {
            return Err(fail("feature rows are empty or ragged".into()));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(fail("non-finite feature value".into()));
        }
        if self.captions.is_empty() || self.captions.iter().any(Vec::is_empty) {
            return Err(fail("needs at least one non-empty caption".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_videos: usize,
    pub n_subjects: usize,
    pub n_verbs: usize,
    pub n_objects: usize,
    pub n_scenes: usize,
    pub captions_per_video: usize,
    pub noise_sigma: f64,
    pub d_v: usize,
    pub clips: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_videos: 200,
            n_subjects: 6,
            n_verbs: 5,
            n_objects: 6,
            n_scenes: 4,
            captions_per_video: 3,
            noise_sigma: 0.1,
            d_v: 64,
            clips: DEFAULT_CLIPS,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    fn factor_sizes(&self) -> [usize; 4] {
        [self.n_subjects, self.n_verbs, self.n_objects, self.n_scenes]
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.n_videos, self.captions_per_video, self.d_v, self.clips];
        if counts.contains(&0) || self.factor_sizes().contains(&0) {
            return Err(Error::Contract(format!(
                "corpus counts must be positive: {self:?}"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Contract(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        let block = self.d_v / 4;
        let lists = [SUBJECTS.len(), VERBS.len(), OBJECTS.len(), SCENES.len()];
        for (i, (&n, &avail)) in self.factor_sizes().iter().zip(&lists).enumerate() {
            if n > avail || n > block {
                return Err(Error::Contract(format!(
                    "factor {i} asks for {n} values; at most {} are available with d_v = {}",
                    avail.min(block),
                    self.d_v
                )));
            }
        }
        Ok(())
    }
}

/// Generated records in `video_id` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<VideoRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&VideoRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn get(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id == video_id)
    }
}

/// `count` mutually orthogonal unit vectors of size `dim`.
fn orthonormal_codes(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(count);
    while codes.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for c in &codes {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            codes.push(v);
        }
    }
    codes
}

fn pick<'a>(words: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    if words.len() == 1 || rng.random_bool(PRIMARY_SYNONYM_PROB) {
        words[0]
    } else {
        words[rng.random_range(1..words.len())]
    }
}

fn realise(latent: [usize; 4], rng: &mut ChaCha8Rng) -> Vec<String> {
    let s = pick(SUBJECTS[latent[0]], rng);
    let v = pick(VERBS[latent[1]], rng);
    let o = pick(OBJECTS[latent[2]], rng);
    let sc = pick(SCENES[latent[3]], rng);
    let roll: f64 = rng.random();
    let mut words: Vec<&str> = if roll < 0.6 {
        vec!["a", s, "is", v, "a", o, "in", "the", sc]
    } else if roll < 0.85 {
        vec!["the", s, "is", v, "the", o, "in", "the", sc]
    } else {
        vec!["a", s, v, "a", o, "at", "the", sc]
    };
    if rng.random_bool(RARE_PROB) {
        words.push(RARE_TOKENS[rng.random_range(0..RARE_TOKENS.len())]);
    }
    words.into_iter().map(String::from).collect()
}

/// Noiseless `[d_v]` prototype of a latent tuple.
pub fn prototype(codes: &[Vec<Vec<f64>>; 4], latent: [usize; 4], d_v: usize) -> Vec<f64> {
    let mut proto = Vec::with_capacity(d_v);
    for (f, &value) in latent.iter().enumerate() {
        proto.extend_from_slice(&codes[f][value]);
    }
    proto.resize(d_v, 0.0);
    proto
}

/// Factor code books derived from the corpus seed.
pub fn factor_codes(spec: &CorpusSpec) -> Result<[Vec<Vec<f64>>; 4]> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c0de);
    let block = spec.d_v / 4;
    let sizes = spec.factor_sizes();
    Ok(sizes.map(|n| orthonormal_codes(n, block, &mut rng)))
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let codes = factor_codes(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let sizes = spec.factor_sizes();

    let mut order: Vec<usize> = (0..spec.n_videos).collect();
    order.shuffle(&mut rng);
    let n_train = (spec.n_videos as f64 * 0.6).round() as usize;
    let n_val = (spec.n_videos as f64 * 0.2).round() as usize;
    let mut split_of = vec![Split::Test; spec.n_videos];
    for (rank, &v) in order.iter().enumerate() {
        split_of[v] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut records = Vec::with_capacity(spec.n_videos);
    for (v, &split) in split_of.iter().enumerate() {
        let latent = [0, 1, 2, 3].map(|f| rng.random_range(0..sizes[f]));
        let proto = prototype(&codes, latent, spec.d_v);
        let features = (0..spec.clips)
            .map(|_| {
                proto
                    .iter()
                    .map(|&x| {
                        if spec.noise_sigma > 0.0 {
                            x + noise.sample(&mut rng)
                        } else {
                            x
                        }
                    })
                    .collect()
            })
            .collect();
        let captions = (0..spec.captions_per_video)
            .map(|_| realise(latent, &mut rng))
            .collect();
        records.push(VideoRecord {
            video_id: format!("vid{v:04}"),
            split,
            features,
            captions,
            latent: Some(latent),
        });
    }
    Ok(Corpus { records })
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in &corpus.records {
        serde_json::to_writer(&mut out, record).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Loads a corpus file with the default clip count.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Corpus> {
    load_dataset_with_clips(path, DEFAULT_CLIPS)
}

/// Loads and validates a corpus file; records come back sorted by id.
pub fn load_dataset_with_clips(path: impl AsRef<Path>, clips: usize) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut by_id: BTreeMap<String, VideoRecord> = BTreeMap::new();
    let mut d_v: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: VideoRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        record.validate(clips)?;
        let width = record.features[0].len();
        if *d_v.get_or_insert(width) != width {
            return Err(Error::Validation {
                id: record.video_id,
                msg: format!("feature size {width} differs from {}", d_v.unwrap_or(0)),
            });
        }
        if by_id.contains_key(&record.video_id) {
            return Err(Error::Validation {
                id: record.video_id,
                msg: "duplicate video id".into(),
            });
        }
        by_id.insert(record.video_id.clone(), record);
    }
    if by_id.is_empty() {
        return Err(Error::Validation {
            id: "<corpus>".into(),
            msg: "no records".into(),
        });
    }
    Ok(Corpus {
        records: by_id.into_values().collect(),
    })
}

/// Token counts over the captions of one split.
pub fn token_counts(corpus: &Corpus, split: Split) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in corpus.split(split) {
        for tok in r.captions.iter().flatten() {
            *counts.entry(tok.clone()).or_default() += 1;
        }
    }
    counts
}

pub fn ids(records: &[&VideoRecord]) -> BTreeSet<String> {
    records.iter().map(|r| r.video_id.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            n_videos: 30,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_twins_share_features() {
        let spec = CorpusSpec {
            n_videos: 400,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let mut seen: BTreeMap<[usize; 4], &VideoRecord> = BTreeMap::new();
        let mut twins = 0;
        for r in &c.records {
            if let Some(prev) = seen.insert(r.latent.unwrap(), r) {
                assert_eq!(prev.features, r.features);
                twins += 1;
            }
        }
        assert!(twins > 0);
    }

    #[test]
    fn split_ratios() {
        let c = generate_corpus(&CorpusSpec::default()).unwrap();
        assert_eq!(c.split(Split::Train).len(), 120);
        assert_eq!(c.split(Split::Val).len(), 40);
        assert_eq!(c.split(Split::Test).len(), 40);
    }

    #[test]
    fn oversized_factor_rejected() {
        let spec = CorpusSpec {
            n_subjects: 9,
            ..small()
        };
        assert!(matches!(generate_corpus(&spec), Err(Error::Contract(_))));
        let spec = CorpusSpec { d_v: 16, ..small() };
        assert!(matches!(generate_corpus(&spec), Err(Error::Contract(_))));
    }

    #[test]
    fn captions_mention_every_factor() {
        let c = generate_corpus(&small()).unwrap();
        for r in &c.records {
            let l = r.latent.unwrap();
            for cap in &r.captions {
                assert!(SUBJECTS[l[0]].iter().any(|w| cap.iter().any(|t| t == w)));
                assert!(SCENES[l[3]].iter().any(|w| cap.iter().any(|t| t == w)));
            }
        }
    }
}
