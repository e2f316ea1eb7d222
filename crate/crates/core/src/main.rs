use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use unseen_nmt::corpus::{Sentence, VocabMode};
use unseen_nmt::harness::pipeline::encode_source;
use unseen_nmt::harness::run::{
    build_table, evaluate_stage, materialize_synthetic, prepare, train_stage, InputLedger, RunDir, StageExt,
};
use unseen_nmt::harness::{ExperimentConfig, HarnessError, RunManifest, Stage};
use unseen_nmt::parallel::{init_threads, map_ordered};
use unseen_nmt::search::{translate_nbest, SearchConfig};
use unseen_nmt::synthetic::{generate_synthetic_languages, vocab_overlap_stats};
use unseen_nmt::trainer::Checkpoint;
use unseen_nmt::corpus::{load_parallel, Split};

#[derive(Parser)]
#[command(name = "unseen-nmt", version, about = "Multilingual NMT transfer to unseen languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.batch_size=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run name (directory under the run root).
    #[arg(long)]
    name: Option<String>,
    /// Defaults to $NMT_RUN_ROOT, then `runs`.
    #[arg(long)]
    run_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess corpora and write the vocabulary.
    Preprocess(Common),
    /// Build the cross-lingual embedding table.
    BuildEmbeddings(Common),
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `checkpoints/last.json`.
        #[arg(long)]
        resume: bool,
    },
    /// Translate a tokenized text file.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        target_lang: String,
        /// Required for language-origin vocabularies.
        #[arg(long)]
        source_lang: Option<String>,
        /// Also write `index<TAB>score<TAB>tokens` for every finished hypothesis.
        #[arg(long)]
        nbest: Option<PathBuf>,
    },
    /// Evaluate a trained model on the configured test sets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to the run's final checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the full protocol end to end.
    Experiment(Common),
    /// Generate synthetic languages from the `[synthetic]` section.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise vocabulary overlap of the configured corpora.
    OverlapStats(Common),
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(n) = &c.name {
        overrides.push(format!("name=\"{n}\""));
    }
    match &c.config {
        Some(p) => ExperimentConfig::load(p, &overrides),
        None => ExperimentConfig::from_toml("", &overrides, Path::new(".")),
    }
    .stage(Stage::Config)
}

fn run_root(c: &Common) -> PathBuf {
    c.run_root
        .clone()
        .or_else(|| std::env::var_os("NMT_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn write_manifest(run: &RunDir, cfg: &ExperimentConfig, ledger: InputLedger, extra: impl FnOnce(&mut RunManifest)) -> Result<(), HarnessError> {
    let mut m = RunManifest {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs: ledger.inputs,
        config: Some(cfg.clone()),
        ..Default::default()
    };
    extra(&mut m);
    m.write(&run.path("manifest.toml"))
}

fn cmd_translate(
    common: &Common,
    model: &Path,
    input: &Path,
    output: Option<&Path>,
    search: SearchConfig,
    target: &str,
    source: Option<&str>,
    nbest: Option<&Path>,
) -> Result<(), HarnessError> {
    let cfg = load_config(common)?;
    let ck = Checkpoint::load(model, None).stage(Stage::Translate)?;
    let (model, _, vocab) = ck.restore().stage(Stage::Translate)?;
    if vocab.mode() == VocabMode::LanguageOrigin && source.is_none() {
        return Err(HarnessError::new(Stage::Translate, "--source-lang is required for a language-origin vocabulary"));
    }
    let src_lang = source.unwrap_or("");
    let f = fs::File::open(input).map_err(|e| HarnessError::new(Stage::Translate, format!("{}: {e}", input.display())))?;
    let lines: Vec<String> = io::BufReader::new(f).lines().collect::<Result<_, _>>().stage(Stage::Translate)?;
    let sources: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| encode_source(&Sentence::from_line(src_lang, l), target, &vocab))
        .collect::<Result<_, _>>()
        .stage(Stage::Translate)?;
    let results = map_ordered(&sources, cfg.parallelism, |s| translate_nbest(&model, s, &search));
    let mut out = String::new();
    let mut nb = String::new();
    for (i, r) in results.into_iter().enumerate() {
        let list = r.stage(Stage::Translate)?;
        out.push_str(&list.first().map(|t| vocab.decode(&t.tokens).join(" ")).unwrap_or_default());
        out.push('\n');
        for t in &list {
            nb.push_str(&format!("{i}\t{}\t{}\n", t.log_prob, vocab.decode(&t.tokens).join(" ")));
        }
    }
    match output {
        Some(p) => fs::write(p, out).stage(Stage::Translate)?,
        None => io::stdout().write_all(out.as_bytes()).stage(Stage::Translate)?,
    }
    if let Some(p) = nbest {
        fs::write(p, nb).stage(Stage::Translate)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Preprocess(c) => {
            let cfg = load_config(&c)?;
            let run = RunDir::open(&run_root(&c), &cfg.name)?;
            let cfg = materialize_synthetic(&cfg, &run)?;
            let mut ledger = InputLedger::default();
            let p = prepare(&cfg, &mut ledger)?;
            p.vocab.write(&run.path("vocab/vocab.tsv")).stage(Stage::Preprocess)?;
            write_manifest(&run, &cfg, ledger, |m| {
                m.vocab_size = p.vocab.len();
                m.corpus_sizes = p.sizes.clone();
            })
        }
        Command::BuildEmbeddings(c) => {
            let cfg = load_config(&c)?;
            let run = RunDir::open(&run_root(&c), &cfg.name)?;
            let cfg = materialize_synthetic(&cfg, &run)?;
            let mut ledger = InputLedger::default();
            let p = prepare(&cfg, &mut ledger)?;
            let table = build_table(&cfg, &p)?;
            p.vocab.write(&run.path("vocab/vocab.tsv")).stage(Stage::Preprocess)?;
            table
                .write(&p.vocab, &run.path("embeddings/table.vec"), &run.path("embeddings/provenance.tsv"))
                .stage(Stage::Embeddings)?;
            write_manifest(&run, &cfg, ledger, |m| {
                m.vocab_size = p.vocab.len();
                m.embedding_dim = table.dim();
                m.corpus_sizes = p.sizes.clone();
            })
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let run = RunDir::open(&run_root(&common), &cfg.name)?;
            let cfg = materialize_synthetic(&cfg, &run)?;
            let mut ledger = InputLedger::default();
            let p = prepare(&cfg, &mut ledger)?;
            let table = build_table(&cfg, &p)?;
            let dim = table.dim();
            p.vocab.write(&run.path("vocab/vocab.tsv")).stage(Stage::Preprocess)?;
            let trained = train_stage(&cfg, &p, table, &run, resume)?;
            write_manifest(&run, &cfg, ledger, |m| {
                m.vocab_size = p.vocab.len();
                m.embedding_dim = dim;
                m.epochs = trained.trainer.schedule.epochs_done;
                m.corpus_sizes = p.sizes.clone();
            })
        }
        Command::Translate { common, model, input, output, beam, max_len, target_lang, source_lang, nbest } => {
            let cfg = load_config(&common)?;
            let search = SearchConfig { beam_size: beam, max_len: max_len.unwrap_or(cfg.search.max_len), ..cfg.search };
            cmd_translate(&common, &model, &input, output.as_deref(), search, &target_lang, source_lang.as_deref(), nbest.as_deref())
        }
        Command::Evaluate { common, model } => {
            let cfg = load_config(&common)?;
            let run = RunDir::open(&run_root(&common), &cfg.name)?;
            let cfg = materialize_synthetic(&cfg, &run)?;
            let mut ledger = InputLedger::default();
            let p = prepare(&cfg, &mut ledger)?;
            let ck_path = model.unwrap_or_else(|| run.path("checkpoints/final.json"));
            let ck = Checkpoint::load(&ck_path, Some(p.vocab.len())).stage(Stage::Evaluate)?;
            let (m, _, _) = ck.restore().stage(Stage::Evaluate)?;
            let mut sizes = p.sizes.clone();
            evaluate_stage(&cfg, &p, &m, &run, &mut ledger, &mut sizes)?;
            write_manifest(&run, &cfg, ledger, |mf| {
                mf.vocab_size = p.vocab.len();
                mf.corpus_sizes = sizes;
            })
        }
        Command::Experiment(c) => {
            let cfg = load_config(&c)?;
            let out = unseen_nmt::harness::run_experiment(&cfg, &run_root(&c))?;
            println!("{}", out.run_dir.join("reports").display());
            Ok(())
        }
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let spec = cfg.synthetic.clone().unwrap_or_default();
            let data = generate_synthetic_languages(&spec).stage(Stage::Synth)?;
            data.write(&out).stage(Stage::Synth)?;
            Ok(())
        }
        Command::OverlapStats(c) => {
            let cfg = load_config(&c)?;
            let (train, test) = cfg.languages();
            if let Some(spec) = &cfg.synthetic {
                let data = generate_synthetic_languages(spec).stage(Stage::Synth)?;
                let refs: Vec<_> = data.corpora.values().collect();
                print!("{}", vocab_overlap_stats(&data.languages, &refs).tsv());
                return Ok(());
            }
            let dir = &cfg.data.corpus_dir;
            let mut corpora = Vec::new();
            for [a, b] in cfg.train_pairs() {
                corpora.push(load_parallel(dir, Split::Train, &a, &b).stage(Stage::Preprocess)?.0);
            }
            for u in &test {
                for t in &train {
                    corpora.push(load_parallel(dir, Split::Test, u, t).stage(Stage::Preprocess)?.0);
                }
            }
            let langs: Vec<String> = train.iter().chain(&test).cloned().collect();
            let refs: Vec<_> = corpora.iter().collect();
            print!("{}", vocab_overlap_stats(&langs, &refs).tsv());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("error\tstage=usage\t{first}");
            return ExitCode::from(2);
        }
    };
    let threads = std::env::var("NMT_THREADS").ok().and_then(|v| v.parse().ok());
    init_threads(threads);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\t{e}");
            ExitCode::FAILURE
        }
    }
}
