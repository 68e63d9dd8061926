use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smre_core::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use smre_core::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
use smre_core::counters;
use smre_core::encoders::encode_batch;
use smre_core::params::{TEXT_BIAS, TEXT_EMBED, TEXT_PROJ};
use smre_core::support_set::forward_support_branch;
use smre_core::training::{
    evaluate, forward_losses, run_ablation, sweep_y, train, train_epoch, train_until, TrainSet,
    TrainState, DEFAULT_Y_GRID,
};
use smre_core::{Error, Mode, ModelDims, Tape, TrainConfig};

/// Step size used wherever a test needs the model to actually fit.
const FIT_LR: f64 = 3e-3;

fn small_corpus() -> Corpus {
    generate_corpus(&CorpusSpec {
        n_videos: 24,
        n_subjects: 3,
        n_verbs: 3,
        n_objects: 3,
        n_scenes: 3,
        d_v: 12,
        clips: 4,
        seed: 1,
        ..Default::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        dims: ModelDims {
            d_v: 12,
            d_h: 10,
            d_s: 10,
            d_e: 6,
            d_dec: 8,
            d_att: 6,
            d_text: 6,
            clips: 4,
        },
        epochs: 2,
        batch_size: 5,
        beam_size: 2,
        max_len: 12,
        lr: FIT_LR,
        determinism: true,
        ..Default::default()
    }
}

fn training_data(corpus: &Corpus, state: &TrainState) -> TrainSet {
    TrainSet::new(&corpus.split(Split::Train), &state.vocab).unwrap()
}

#[test]
fn single_pair_is_memorised() {
    let started = Instant::now();
    let mut corpus = generate_corpus(&CorpusSpec::default()).unwrap();
    let mut record = corpus.split(Split::Train)[0].clone();
    record.captions.truncate(1);
    corpus.records = vec![record];
    let cfg = TrainConfig {
        lr: FIT_LR,
        min_count: 1,
        select_best: false,
        ..Default::default()
    };
    let mut state = TrainState::init(&corpus, &cfg).unwrap();
    let data = training_data(&corpus, &state);
    let mut last = f64::INFINITY;
    for step in 0..200 {
        let (losses, logs) =
            train_epoch(&data, &mut state.params, &mut state.adam, &cfg, step).unwrap();
        assert_eq!(logs.len(), 1);
        last = losses.l_ori_cap;
    }
    assert!(last < 0.05, "l_ori_cap {last} after 200 steps");
    assert!(started.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let corpus = small_corpus();
    let cfg = TrainConfig {
        lr: 0.0,
        ..small_config()
    };
    let mut state = TrainState::init(&corpus, &cfg).unwrap();
    let before = state.params.clone();
    let data = training_data(&corpus, &state);
    let (losses, logs) = train_epoch(&data, &mut state.params, &mut state.adam, &cfg, 0).unwrap();
    assert_eq!(state.params, before);
    assert!(losses.l_ori_cap > 0.0 && !logs.is_empty());
}

#[test]
fn repeated_runs_are_identical_and_keep_the_identity() {
    let corpus = small_corpus();
    let cfg = small_config();
    let a = train(&corpus, &cfg).unwrap();
    let b = train(&corpus, &cfg).unwrap();
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.state, b.state);
    assert_eq!(a.steps.len(), 2 * 3);
    for log in &a.steps {
        assert!(log.losses.identity_holds(&cfg), "{log:?}");
        assert!(log.losses.l_inter >= 0.0 && log.losses.l_intra >= 0.0);
    }
}

#[test]
fn zero_lambdas_match_discarded_auxiliary_gradients() {
    let corpus = small_corpus();
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        ..small_config()
    };
    let state = TrainState::init(&corpus, &cfg).unwrap();
    let data = training_data(&corpus, &state);
    let batch = data.batch(&[(0, 0), (1, 1), (2, 2), (3, 0)]).unwrap();

    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (parts, overall) = forward_losses(&mut tape, &bound, &batch, &cfg, &mut rng).unwrap();
    assert!(parts.sup_cap.is_some() && parts.inter.is_some() && parts.intra.is_some());
    let full = state
        .params
        .collect_grads(&bound, &tape.backward(overall).unwrap());
    let ori_only = state
        .params
        .collect_grads(&bound, &tape.backward(parts.ori_cap).unwrap());
    for (name, g) in &full {
        for (x, y) in g.iter().zip(&ori_only[name]) {
            assert!((x - y).abs() < 1e-6, "{name}: {x} vs {y}");
        }
    }

    // A whole epoch with lambda = 0 moves the parameters exactly like a run
    // that never builds the auxiliary terms.
    let baseline = TrainConfig {
        use_inter: false,
        use_intra: false,
        use_sup_cap: false,
        ..cfg.clone()
    };
    let (mut p1, mut o1) = (state.params.clone(), state.adam.clone());
    let (mut p2, mut o2) = (state.params.clone(), state.adam.clone());
    train_epoch(&data, &mut p1, &mut o1, &cfg, 0).unwrap();
    train_epoch(&data, &mut p2, &mut o2, &baseline, 0).unwrap();
    for (name, t) in p1.iter() {
        let diff = t.max_abs_diff(p2.get(name).unwrap());
        assert!(diff < 1e-6, "{name} differs by {diff}");
    }
}

#[test]
fn y_zero_intra_is_mean_squared_distance() {
    let corpus = small_corpus();
    let mut cfg = small_config();
    cfg.sst.y_signal = 0.0;
    let state = TrainState::init(&corpus, &cfg).unwrap();
    let data = training_data(&corpus, &state);
    let batch = data
        .batch(&[(0, 0), (4, 1), (7, 2), (9, 0), (11, 1)])
        .unwrap();

    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (parts, overall) = forward_losses(&mut tape, &bound, &batch, &cfg, &mut rng).unwrap();
    let reported = parts.report(&tape, overall).l_intra;

    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, false);
    let (v_o, enc) = encode_batch(&mut tape, &batch, &bound, true, false).unwrap();
    let enc =
        forward_support_branch(&mut tape, v_o, enc, &bound, &cfg.support, Mode::Train).unwrap();
    let vo = tape.value(enc.vo_pooled).clone();
    let vs = tape.value(enc.support.unwrap().vs_pooled).clone();
    let d = cfg.dims.d_s;
    let mut manual = 0.0;
    for (a, b) in vo.data().chunks(d).zip(vs.data().chunks(d)) {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dist = 1.0 - dot / (na * nb);
        manual += dist * dist / 5.0;
    }
    assert!((reported - manual).abs() < 1e-12, "{reported} vs {manual}");
}

#[test]
fn frozen_text_encoder_gets_no_gradient() {
    let corpus = small_corpus();
    let cfg = TrainConfig {
        freeze_text: true,
        ..small_config()
    };
    let state = TrainState::init(&corpus, &cfg).unwrap();
    let data = training_data(&corpus, &state);
    let batch = data.batch(&[(0, 0), (1, 0), (2, 0)]).unwrap();
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, overall) = forward_losses(&mut tape, &bound, &batch, &cfg, &mut rng).unwrap();
    let grads = state
        .params
        .collect_grads(&bound, &tape.backward(overall).unwrap());
    for name in [TEXT_EMBED, TEXT_PROJ, TEXT_BIAS] {
        assert!(grads[name].iter().all(|&g| g == 0.0), "{name} moved");
    }
    assert!(grads["enc.w"].iter().any(|&g| g != 0.0));
}

#[test]
fn ablation_rows_enable_the_right_terms() {
    let corpus = small_corpus();
    let cfg = TrainConfig {
        epochs: 1,
        ..small_config()
    };
    let rows = run_ablation(&corpus, &cfg).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "baseline",
            "l_sup",
            "l_sup+l_inter",
            "l_sup+l_intra",
            "l_overall"
        ]
    );
    let expect = [
        (false, false, false),
        (false, false, true),
        (true, false, true),
        (false, true, true),
        (true, true, true),
    ];
    for (row, (inter, intra, sup)) in rows.iter().zip(expect) {
        let l = row.final_losses;
        assert_eq!(row.branches.inter, inter, "{}", row.name);
        assert_eq!(row.branches.intra, intra, "{}", row.name);
        assert_eq!(row.branches.sup_cap, sup, "{}", row.name);
        assert_eq!(l.l_intra > 0.0, intra, "{}", row.name);
        assert_eq!(l.l_sup_cap > 0.0, sup, "{}", row.name);
        if !inter {
            assert_eq!(l.l_inter, 0.0);
        }
        assert_eq!(
            row.support_weight_calls > 0,
            row.support_enabled,
            "{}",
            row.name
        );
        assert_eq!(row.initial_fingerprint, rows[0].initial_fingerprint);
    }
    assert_eq!(rows[0].support_weight_calls, 0);
    assert_eq!(rows[0].text_encoder_calls, 0);
    assert!(rows[2].text_encoder_calls > 0);
}

#[test]
fn y_sweep_has_one_row_per_value() {
    let corpus = small_corpus();
    let cfg = TrainConfig {
        epochs: 1,
        select_best: false,
        ..small_config()
    };
    let rows = sweep_y(&corpus, &cfg, &DEFAULT_Y_GRID).unwrap();
    assert_eq!(rows.len(), 5);
    for (row, y) in rows.iter().zip(DEFAULT_Y_GRID) {
        assert_eq!(row.y_signal, y);
        assert_eq!(row.initial_fingerprint, rows[0].initial_fingerprint);
    }
    let no_support = TrainConfig {
        support: smre_core::SupportConfig {
            enabled: false,
            ..Default::default()
        },
        ..cfg
    };
    assert!(matches!(
        sweep_y(&corpus, &no_support, &DEFAULT_Y_GRID),
        Err(Error::Config(_))
    ));
}

#[test]
fn evaluation_never_touches_training_branches() {
    let corpus = small_corpus();
    let cfg = small_config();
    let outcome = train(&corpus, &cfg).unwrap();
    assert!(outcome.counters.support_weights > 0);
    let before = counters::snapshot();
    let (report, hyps) = evaluate(
        &outcome.selected,
        &outcome.state.vocab,
        &corpus.split(Split::Test),
        cfg.beam_size,
        cfg.max_len,
        false,
    )
    .unwrap();
    let used = counters::snapshot() - before;
    assert_eq!(used.support_weights, 0);
    assert_eq!(used.text_encoder, 0);
    assert_eq!(hyps.len(), corpus.split(Split::Test).len());
    assert!(report.bleu4.is_finite());
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let corpus = small_corpus();
    let cfg = TrainConfig {
        epochs: 4,
        ..small_config()
    };
    let straight = train(&corpus, &cfg).unwrap();

    let first = train_until(&corpus, &cfg, TrainState::init(&corpus, &cfg).unwrap(), 2).unwrap();
    let bytes = encode_checkpoint(&Checkpoint {
        config: cfg.clone(),
        state: first.state,
    });
    let restored = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&restored), bytes);
    let second = train_until(&corpus, &restored.config, restored.state, 4).unwrap();

    let mut steps = first.steps;
    steps.extend(second.steps);
    assert_eq!(steps, straight.steps);
    assert_eq!(second.state, straight.state);
    assert_eq!(second.selected, straight.selected);
}

#[test]
fn checkpoint_for_other_dims_names_the_tensor() {
    let corpus = small_corpus();
    let cfg = small_config();
    let state = TrainState::init(&corpus, &cfg).unwrap();
    let ckpt = Checkpoint {
        config: cfg.clone(),
        state,
    };
    let mut dims = cfg.dims;
    dims.d_h = 14;
    dims.d_s = 14;
    let err = ckpt.check_dims(&dims).unwrap_err().to_string();
    assert!(err.contains("enc.") || err.contains("dec."), "{err}");
}

#[test]
fn caption_loss_falls_over_the_first_epochs() {
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
    let mut monotone = 0;
    for seed in 0..5 {
        let cfg = TrainConfig {
            seed,
            epochs: 5,
            select_best: false,
            ..Default::default()
        };
        let run = train(&corpus, &cfg).unwrap();
        let curve: Vec<f64> = run.history.iter().map(|h| h.losses.l_ori_cap).collect();
        if curve.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    assert!(
        monotone as f64 >= 0.9 * 5.0,
        "{monotone}/5 runs decreased monotonically"
    );
}
