//! `smre` command-line interface.
//!
//! Exit codes: 0 on success, 1 for bad input (usage, files, configs,
//! checkpoints), 2 when the pipeline itself fails.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use smre_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use smre_core::config::load_config;
use smre_core::corpus::{
    generate_corpus, load_dataset_with_clips, write_corpus, Corpus, CorpusSpec, Split,
    DEFAULT_CLIPS,
};
use smre_core::counters;
use smre_core::decoder::beam_search_decode;
use smre_core::gradcheck::{standard_suite, GRADCHECK_TOL};
use smre_core::training::{
    evaluate, run_ablation, sweep_y, train_until, ResultRow, TrainConfig, TrainState,
    DEFAULT_Y_GRID,
};
use smre_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "smre",
    version,
    about = "Support-set video captioning: data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus file.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a loss log.
    Train(TrainArgs),
    /// Beam-decode a split and report caption metrics.
    Eval(EvalArgs),
    /// Print captions for the given video ids.
    Decode(DecodeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train the five ablation configurations and tabulate them.
    Ablate(TableArgs),
    /// Train once per contrastive control value Y and tabulate.
    SweepY(SweepArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_videos: usize,
    #[arg(long, default_value_t = 6)]
    n_subjects: usize,
    #[arg(long, default_value_t = 5)]
    n_verbs: usize,
    #[arg(long, default_value_t = 6)]
    n_objects: usize,
    #[arg(long, default_value_t = 4)]
    n_scenes: usize,
    #[arg(long, default_value_t = 3)]
    captions_per_video: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 64)]
    d_v: usize,
    #[arg(long, default_value_t = DEFAULT_CLIPS)]
    clips: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Corpus file (one JSON record per line).
    #[arg(long)]
    data: PathBuf,
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for `model.ckpt`, `last.ckpt` and `loss_log.jsonl`.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Resume from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Stop after this many completed epochs (resumable).
    #[arg(long)]
    until: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    beam_size: Option<usize>,
    #[arg(required = true)]
    video_ids: Vec<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TableArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Write one JSON row per configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    table: TableArgs,
    /// Comma-separated Y values.
    #[arg(long, value_delimiter = ',')]
    y: Option<Vec<f64>>,
}

fn determinism_requested() -> bool {
    std::env::var("SMRE_DETERMINISM").is_ok_and(|v| v == "1")
}

fn resolve_config(run: &RunArgs) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, run)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, run: &RunArgs) -> Result<()> {
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(b) = run.beam_size {
        cfg.beam_size = b;
    }
    if let Some(e) = run.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = run.lr {
        cfg.lr = lr;
    }
    if determinism_requested() {
        cfg.determinism = true;
    }
    cfg.validate()
}

fn load_corpus(path: &Path, cfg: &TrainConfig) -> Result<Corpus> {
    load_dataset_with_clips(path, cfg.dims.clips)
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(|e| Error::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = CorpusSpec {
        n_videos: a.n_videos,
        n_subjects: a.n_subjects,
        n_verbs: a.n_verbs,
        n_objects: a.n_objects,
        n_scenes: a.n_scenes,
        captions_per_video: a.captions_per_video,
        noise_sigma: a.noise_sigma,
        d_v: a.d_v,
        clips: a.clips,
        seed: a.seed,
    };
    let corpus = generate_corpus(&spec).map_err(|e| match e {
        Error::Contract(m) => Error::Config(m),
        other => other,
    })?;
    write_corpus(&a.out, &corpus)?;
    let count = |s| corpus.split(s).len();
    println!(
        "wrote {} videos to {} (train {}, val {}, test {})",
        corpus.records.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (cfg, state, corpus) = match &a.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut cfg = match &a.run.config {
                Some(p) => load_config(p)?,
                None => ckpt.config.clone(),
            };
            apply_overrides(&mut cfg, &a.run)?;
            ckpt.check_dims(&cfg.dims)?;
            let corpus = load_corpus(&a.run.data, &cfg)?;
            (cfg, ckpt.state, corpus)
        }
        None => {
            let cfg = resolve_config(&a.run)?;
            let corpus = load_corpus(&a.run.data, &cfg)?;
            let state = TrainState::init(&corpus, &cfg)?;
            (cfg, state, corpus)
        }
    };
    fs::create_dir_all(&a.out)?;
    let until = a.until.unwrap_or(cfg.epochs);
    let start = state.epoch;
    let outcome = train_until(&corpus, &cfg, state, until)?;
    for h in &outcome.history {
        let l = &h.losses;
        println!(
            "epoch {:>3}  l_overall {:.5}  l_ori_cap {:.5}  l_sup_cap {:.5}  l_inter {:.5}  l_intra {:.5}{}",
            h.epoch,
            l.l_overall,
            l.l_ori_cap,
            l.l_sup_cap,
            l.l_inter,
            l.l_intra,
            h.val_bleu4.map(|b| format!("  val BLEU-4 {b:.4}")).unwrap_or_default()
        );
    }
    let log_name = if start == 0 {
        "loss_log.jsonl".to_string()
    } else {
        format!("loss_log.from{start}.jsonl")
    };
    write_jsonl(&a.out.join(log_name), &outcome.steps)?;
    write_jsonl(&a.out.join("history.jsonl"), &outcome.history)?;
    let last = Checkpoint {
        config: cfg.clone(),
        state: outcome.state.clone(),
    };
    save_checkpoint(a.out.join("last.ckpt"), &last)?;
    let mut model_state = outcome.state;
    model_state.params = outcome.selected;
    model_state.best = None;
    save_checkpoint(
        a.out.join("model.ckpt"),
        &Checkpoint {
            config: cfg,
            state: model_state,
        },
    )?;
    println!(
        "selected epoch {}; checkpoints in {}",
        outcome.selected_epoch,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.data, &ckpt.config)?;
    let records = corpus.split(a.split.into());
    if records.is_empty() {
        return Err(Error::Validation {
            id: format!("{:?}", a.split),
            msg: "split has no videos".into(),
        });
    }
    let beam = a.beam_size.unwrap_or(ckpt.config.beam_size);
    let before = counters::snapshot();
    let (report, _) = evaluate(
        &ckpt.state.params,
        &ckpt.state.vocab,
        &records,
        beam,
        ckpt.config.max_len,
        ckpt.config.length_norm,
    )?;
    let used = counters::snapshot() - before;
    println!("videos {}  beam {}", records.len(), beam);
    println!("{}", report.summary_line());
    println!("support_weight_calls {}", used.support_weights);
    println!("text_encoder_calls {}", used.text_encoder);
    if let Some(out) = &a.out {
        let json = serde_json::json!({
            "report": report,
            "support_weight_calls": used.support_weights,
            "text_encoder_calls": used.text_encoder,
        });
        fs::write(
            out,
            serde_json::to_string_pretty(&json).map_err(|e| Error::Io(e.into()))? + "\n",
        )?;
    }
    Ok(())
}

fn cmd_decode(a: &DecodeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.data, &ckpt.config)?;
    let beam = a.beam_size.unwrap_or(ckpt.config.beam_size);
    for id in &a.video_ids {
        let record = corpus.get(id).ok_or_else(|| Error::Validation {
            id: id.clone(),
            msg: "no such video".into(),
        })?;
        let tokens = beam_search_decode(
            &ckpt.state.params,
            &record.feature_tensor()?,
            beam,
            ckpt.config.max_len,
            ckpt.config.length_norm,
        )?;
        println!("{id}\t{}", ckpt.state.vocab.decode(&tokens).join(" "));
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let mut ok = true;
    for case in standard_suite(a.seed)? {
        let err = case.report.max_rel_err();
        let pass = err < GRADCHECK_TOL;
        ok &= pass;
        let worst = case
            .report
            .worst()
            .map(|w| format!("{}[{}]", w.name, w.worst_index))
            .unwrap_or_default();
        println!(
            "{}  {:<36} max rel err {:.3e}  worst {}",
            if pass { "PASS" } else { "FAIL" },
            case.name,
            err,
            worst
        );
    }
    Ok(ok)
}

fn print_table(rows: &[ResultRow]) {
    println!(
        "{:<14} {:>3} {:>3} {:>3} {:>3} {:>9} {:>9} {:>9} {:>9} {:>9} {:>6} {:>6} {:>7} {:>7} {:>7}",
        "config", "sup", "int", "ntr", "cap", "l_ori", "l_sup", "l_inter", "l_intra", "l_overall", "W", "text",
        "BLEU-4", "ROUGE-L", "CIDEr"
    );
    let flag = |b: bool| if b { "on" } else { "-" };
    for r in rows {
        let l = &r.final_losses;
        println!(
            "{:<14} {:>3} {:>3} {:>3} {:>3} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>6} {:>6} {:>7.4} {:>7.4} {:>7.4}",
            r.name,
            flag(r.support_enabled),
            flag(r.branches.inter),
            flag(r.branches.intra),
            flag(r.branches.sup_cap),
            l.l_ori_cap,
            l.l_sup_cap,
            l.l_inter,
            l.l_intra,
            l.l_overall,
            r.support_weight_calls,
            r.text_encoder_calls,
            r.val.bleu4,
            r.val.rouge_l,
            r.val.cider
        );
    }
}

/// Table rows without the per-video score lists.
fn compact(rows: &[ResultRow]) -> Vec<ResultRow> {
    rows.iter()
        .cloned()
        .map(|mut r| {
            r.val.per_video.clear();
            r
        })
        .collect()
}

fn cmd_ablate(a: &TableArgs) -> Result<()> {
    let cfg = resolve_config(&a.run)?;
    let corpus = load_corpus(&a.run.data, &cfg)?;
    let rows = run_ablation(&corpus, &cfg)?;
    print_table(&rows);
    if let Some(out) = &a.out {
        write_jsonl(out, &compact(&rows))?;
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = resolve_config(&a.table.run)?;
    let corpus = load_corpus(&a.table.run.data, &cfg)?;
    let ys = a.y.clone().unwrap_or_else(|| DEFAULT_Y_GRID.to_vec());
    let rows = sweep_y(&corpus, &cfg, &ys)?;
    print_table(&rows);
    if let Some(out) = &a.table.out {
        write_jsonl(out, &compact(&rows))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Decode(a) => cmd_decode(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a).map(|_| true),
        Command::SweepY(a) => cmd_sweep(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
