//! Shared fixtures for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smre_core::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
use smre_core::encoders::Batch;
use smre_core::metrics::Sentence;
use smre_core::training::{forward_losses, TrainSet, TrainState};
use smre_core::{Result, Tape, TrainConfig};

/// A default-sized corpus with freshly initialised model state.
pub struct Fixture {
    pub corpus: Corpus,
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub data: TrainSet,
}

impl Fixture {
    pub fn new(n_videos: usize) -> Self {
        let corpus = generate_corpus(&CorpusSpec {
            n_videos,
            ..Default::default()
        })
        .expect("default corpus spec is valid");
        let cfg = TrainConfig::default();
        let state = TrainState::init(&corpus, &cfg).expect("default config is valid");
        let data =
            TrainSet::new(&corpus.split(Split::Train), &state.vocab).expect("consistent corpus");
        Self {
            corpus,
            cfg,
            state,
            data,
        }
    }

    /// The first `size` training videos with their first caption.
    pub fn batch(&self, size: usize) -> Batch {
        let picks: Vec<(usize, usize)> = (0..size.min(self.data.len())).map(|v| (v, 0)).collect();
        self.data.batch(&picks).expect("valid picks")
    }

    /// Forward pass of every enabled loss plus the backward sweep.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape, true);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, overall) = forward_losses(&mut tape, &bound, batch, &self.cfg, &mut rng)?;
        let grads = tape.backward(overall)?;
        Ok(grads.wrt(overall).map_or(0.0, |g| g[0]))
    }

    /// References of the test split, used as both hypotheses and references.
    pub fn caption_corpus(&self) -> (Vec<Sentence>, Vec<Vec<Sentence>>) {
        let test = self.corpus.split(Split::Test);
        let hyps = test.iter().map(|r| r.captions[0].clone()).collect();
        let refs = test.iter().map(|r| r.captions[1..].to_vec()).collect();
        (hyps, refs)
    }
}
