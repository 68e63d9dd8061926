use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use smre_core::corpus::{
    factor_codes, generate_corpus, ids, load_dataset, load_dataset_with_clips, prototype,
    token_counts, write_corpus, CorpusSpec, Split, RARE_TOKENS,
};
use smre_core::Error;

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec {
        n_videos: 40,
        seed: 17,
        ..Default::default()
    };
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_corpus(&a, &generate_corpus(&spec).unwrap()).unwrap();
    write_corpus(&b, &generate_corpus(&spec).unwrap()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let other = dir.path().join("c.jsonl");
    let spec2 = CorpusSpec { seed: 18, ..spec };
    write_corpus(&other, &generate_corpus(&spec2).unwrap()).unwrap();
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn splits_partition_the_ids() {
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
    let all: BTreeSet<String> = corpus.records.iter().map(|r| r.video_id.clone()).collect();
    assert_eq!(all.len(), 200);
    let parts: Vec<BTreeSet<String>> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| ids(&corpus.split(s)))
        .collect();
    assert_eq!(
        parts.iter().map(BTreeSet::len).collect::<Vec<_>>(),
        vec![120, 40, 40]
    );
    for i in 0..3 {
        for j in i + 1..3 {
            assert!(parts[i].is_disjoint(&parts[j]));
        }
    }
    let union: BTreeSet<String> = parts.into_iter().flatten().collect();
    assert_eq!(union, all);
}

#[test]
fn shared_factors_mean_closer_prototypes() {
    let spec = CorpusSpec::default();
    let codes = factor_codes(&spec).unwrap();
    let sizes = [spec.n_subjects, spec.n_verbs, spec.n_objects, spec.n_scenes];
    let mut tuples = Vec::new();
    for s in 0..sizes[0] {
        for v in 0..sizes[1] {
            for o in 0..sizes[2] {
                for sc in 0..sizes[3] {
                    tuples.push([s, v, o, sc]);
                }
            }
        }
    }
    let protos: Vec<Vec<f64>> = tuples
        .iter()
        .map(|&t| prototype(&codes, t, spec.d_v))
        .collect();
    let mut close_min = f64::INFINITY;
    let mut far_max = f64::NEG_INFINITY;
    for i in (0..tuples.len()).step_by(7) {
        for j in 0..tuples.len() {
            if i == j {
                continue;
            }
            let shared = (0..4).filter(|&f| tuples[i][f] == tuples[j][f]).count();
            let c = cosine(&protos[i], &protos[j]);
            if shared >= 3 {
                close_min = close_min.min(c);
            } else if shared <= 1 {
                far_max = far_max.max(c);
            }
        }
    }
    assert!(close_min > far_max, "{close_min} <= {far_max}");
}

#[test]
fn noiseless_twins_are_identical() {
    let corpus = generate_corpus(&CorpusSpec {
        noise_sigma: 0.0,
        ..Default::default()
    })
    .unwrap();
    let mut seen = std::collections::BTreeMap::new();
    let mut twins = 0;
    for r in &corpus.records {
        if let Some(prev) = seen.insert(r.latent.unwrap(), &r.features) {
            assert_eq!(prev, &r.features);
            twins += 1;
        }
    }
    assert!(twins > 0);
}

#[test]
fn tokens_are_frequent_or_deliberately_rare() {
    for seed in 0..5 {
        let corpus = generate_corpus(&CorpusSpec {
            seed,
            ..Default::default()
        })
        .unwrap();
        let train = token_counts(&corpus, Split::Train);
        for split in [Split::Train, Split::Val, Split::Test] {
            for (tok, _) in token_counts(&corpus, split) {
                let n = train.get(&tok).copied().unwrap_or(0);
                assert!(
                    n >= 2 || RARE_TOKENS.contains(&tok.as_str()),
                    "seed {seed}: `{tok}` seen {n} times in training"
                );
            }
        }
    }
}

#[test]
fn round_trip_and_load_speed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
    write_corpus(&path, &corpus).unwrap();
    let started = Instant::now();
    let loaded = load_dataset(&path).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    assert_eq!(loaded, corpus);
    assert!(elapsed < 1.0, "loading took {elapsed:.3}s");
}

fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f
}

fn record_line(id: &str, rows: usize, width: usize) -> String {
    let features = vec![vec![0.5; width]; rows];
    serde_json::json!({
        "video_id": id,
        "split": "train",
        "features": features,
        "captions": [["a", "dog", "runs"]],
    })
    .to_string()
}

#[test]
fn short_record_is_rejected_by_id() {
    let f = write_lines(&[record_line("vid0001", 26, 4), record_line("vid0002", 25, 4)]);
    match load_dataset(f.path()) {
        Err(Error::Validation { id, msg }) => {
            assert_eq!(id, "vid0002");
            assert!(msg.contains("25"), "{msg}");
        }
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn malformed_line_reports_its_number() {
    let f = write_lines(&[
        record_line("a", 3, 2),
        String::new(),
        "{\"video_id\": \"b\", ".into(),
    ]);
    match load_dataset_with_clips(f.path(), 3) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn duplicates_and_width_changes_are_rejected() {
    let dup = write_lines(&[record_line("x", 3, 2), record_line("x", 3, 2)]);
    assert!(matches!(
        load_dataset_with_clips(dup.path(), 3),
        Err(Error::Validation { id, .. }) if id == "x"
    ));
    let ragged = write_lines(&[record_line("x", 3, 2), record_line("y", 3, 5)]);
    assert!(matches!(
        load_dataset_with_clips(ragged.path(), 3),
        Err(Error::Validation { id, .. }) if id == "y"
    ));
}

#[test]
fn records_come_back_sorted() {
    let f = write_lines(&[
        record_line("c", 2, 2),
        record_line("a", 2, 2),
        record_line("b", 2, 2),
    ]);
    let loaded = load_dataset_with_clips(f.path(), 2).unwrap();
    let order: Vec<&str> = loaded.records.iter().map(|r| r.video_id.as_str()).collect();
    assert_eq!(order, ["a", "b", "c"]);
}

#[test]
fn oversized_factors_are_contract_errors() {
    let spec = CorpusSpec {
        n_subjects: 9,
        ..Default::default()
    };
    assert!(matches!(generate_corpus(&spec), Err(Error::Contract(_))));
}
