use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use distillforge::decode::DecodeConfig;
use distillforge::distill::{self, DatasetRecipe, RecipeInputs};
use distillforge::eval::corpus_bleu;
use distillforge::harness::{self, ExperimentConfig, GridSpec, Pipeline};
use distillforge::model::Seq2SeqConfig;
use distillforge::synth::{SyntheticTask, SyntheticTaskSpec};
use distillforge::textproc::{read_lines, Bitext, Codec};
use distillforge::train::{train_loop, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(
    name = "distillforge",
    version,
    about = "Desk-scale NMT with sequence-level knowledge distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus and its oracle.
    Synth(SynthArgs),
    /// Train a model on a parallel corpus.
    Train(TrainArgs),
    /// Translate a file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Build a distilled or augmented training set.
    Distill(DistillArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Score(ScoreArgs),
    /// Run one experiment cell, or the full matrix with --all.
    Experiment(ExperimentArgs),
    /// Architecture grid over BPE sizes and widths.
    Grid(GridArgs),
    /// Rebuild tables and curves from a results directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON task spec; defaults are used for missing fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Training sentences.
    #[arg(long, default_value_t = 20000)]
    n: usize,
    #[arg(long, default_value_t = 1000)]
    n_valid: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Large,
    Small,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory holding `<name>.src` / `<name>.trg` files.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "train")]
    train: String,
    #[arg(long, default_value = "valid")]
    valid: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Large)]
    preset: Preset,
    /// JSON model config, overrides --preset.
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    bpe_merges: Option<usize>,
    #[arg(long)]
    num_embed: Option<usize>,
    #[arg(long)]
    num_hidden: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    /// Dropout on RNN inputs and states.
    #[arg(long)]
    rnn_dropout: Option<f64>,
    #[arg(long, default_value_t = 0.0003)]
    initial_learning_rate: f64,
    /// Target tokens per batch.
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    gradient_clipping_threshold: f64,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    #[arg(long, default_value_t = 4000)]
    checkpoint_frequency: usize,
    #[arg(long, default_value_t = 30)]
    max_num_checkpoint: usize,
    #[arg(long, default_value_t = 0.7)]
    learning_rate_reduce_factor: f64,
    #[arg(long, default_value_t = 8)]
    learning_rate_reduce_num_not_improved: usize,
    #[arg(long, default_value_t = 3)]
    keep_last_params: usize,
    #[arg(long, default_value_t = 1)]
    word_min_count: usize,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    /// Candidates per line, tab-separated.
    #[arg(long, default_value_t = 1)]
    nbest: usize,
    #[arg(long)]
    no_length_norm: bool,
}

#[derive(Args)]
struct DistillArgs {
    /// Components joined by `+`, e.g. `base+kd+bt`.
    #[arg(long)]
    recipe: DatasetRecipe,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "train")]
    train: String,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    reverse_teacher: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Train both teachers and run every table cell.
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [10000, 750, 500])]
    bpe: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256])]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values = ["base", "base+kd"])]
    variants: Vec<DatasetRecipe>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results_dir: PathBuf,
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec: SyntheticTaskSpec = load_json(a.spec.as_deref())?;
    let task = SyntheticTask::new(spec)?;
    let c = task.generate_bitext(a.n, a.n_valid, a.n_test);
    for b in [&c.train, &c.valid, &c.test] {
        b.save(&a.out_dir)?;
    }
    task.save(&a.out_dir.join("oracle.json"))?;
    println!(
        "wrote {} / {} / {} pairs to {}",
        c.train.len(),
        c.valid.len(),
        c.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut model = match (&a.model_config, a.preset) {
        (Some(p), _) => load_json(Some(p))?,
        (None, Preset::Large) => Seq2SeqConfig::large(),
        (None, Preset::Small) => Seq2SeqConfig::small(),
    };
    model.bpe_merges = a.bpe_merges.unwrap_or(model.bpe_merges);
    model.embed_size = a.num_embed.unwrap_or(model.embed_size);
    model.hidden_size = a.num_hidden.unwrap_or(model.hidden_size);
    model.num_layers = a.num_layers.unwrap_or(model.num_layers);
    if let Some(p) = a.rnn_dropout {
        model = model.with_dropout(p);
    }
    model.validate()?;
    let config = TrainConfig {
        initial_lr: a.initial_learning_rate,
        batch_size: a.batch_size,
        grad_clip: a.gradient_clipping_threshold,
        label_smoothing: a.label_smoothing,
        checkpoint_every: a.checkpoint_frequency,
        max_checkpoints: a.max_num_checkpoint,
        lr_reduce_factor: a.learning_rate_reduce_factor,
        lr_reduce_patience: a.learning_rate_reduce_num_not_improved,
        keep_last_params: a.keep_last_params,
        min_count: a.word_min_count,
        valid_beam: a.beam_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    let train = Bitext::load(&a.data_dir, &a.train)?;
    let valid = Bitext::load(&a.data_dir, &a.valid)?;
    let codec = Codec::fit(&train, model.bpe_merges, config.min_count)?;
    let out = train_loop(&model, &config, &codec, &train, &valid, Some(&a.out_dir))?;
    println!(
        "best checkpoint {} of {}; {} pairs dropped; {} lr reductions",
        out.checkpoint.meta.best_checkpoint,
        out.metrics.len(),
        out.dropped,
        out.lr_reductions
    );
    Ok(())
}

fn translate(a: TranslateArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let input = read_lines(&a.input)?;
    let config = DecodeConfig {
        beam_size: a.beam_size,
        length_norm: !a.no_length_norm,
        nbest: a.nbest,
    };
    let out = ckpt.translate(&input, &config)?;
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&a.output)
            .with_context(|| format!("creating {}", a.output.display()))?,
    );
    for cands in &out.nbest {
        let line: Vec<String> = cands.iter().map(|c| c.join(" ")).collect();
        writeln!(w, "{}", line.join("\t"))?;
    }
    w.flush()?;
    if out.failures > 0 {
        log::warn!("{} lines produced no translation", out.failures);
    }
    Ok(())
}

fn distill_cmd(a: DistillArgs) -> Result<()> {
    let base = Bitext::load(&a.data_dir, &a.train)?;
    let teacher = a.teacher.as_deref().map(Checkpoint::load).transpose()?;
    let reverse = a
        .reverse_teacher
        .as_deref()
        .map(Checkpoint::load)
        .transpose()?;
    let inputs = RecipeInputs {
        base: &base,
        teacher: teacher.as_ref(),
        reverse_teacher: reverse.as_ref(),
        beam: a.beam_size,
    };
    let (joined, parts) = distill::build_recipe(&a.recipe, &inputs)?;
    joined.save(&a.out_dir)?;
    let m = distill::manifest(
        &joined,
        &parts,
        a.teacher.as_deref(),
        a.reverse_teacher.as_deref(),
        a.beam_size,
    );
    m.save(&a.out_dir.join("manifest.json"))?;
    println!("{}: {} pairs", joined.name, joined.len());
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let hyp = read_lines(&a.hyp)?;
    let reference = read_lines(&a.reference)?;
    let r = corpus_bleu(&hyp, &reference)?;
    println!("{}", r.tsv());
    println!("{r}");
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<bool> {
    let config: ExperimentConfig = load_json(a.config.as_deref())?;
    config.validate()?;
    if a.all {
        let report = harness::run_pipeline(&config, Some(&a.out_dir))?;
        for r in &report.rows {
            println!(
                "{}\t{:.2}\t{:.2}",
                r.cell().id(),
                r.mean_bleu,
                r.mean_train_ppl
            );
        }
        return Ok(report.all_complete());
    }
    let row = harness::run_experiment(&config, Some(&a.out_dir))?;
    if let Some(s) = row.summary() {
        println!("{}", s.table_row(&row.dataset));
    }
    Ok(row.is_complete())
}

fn grid(a: GridArgs) -> Result<bool> {
    let config: ExperimentConfig = load_json(a.config.as_deref())?;
    let mut pipeline = Pipeline::new(config, Some(&a.out_dir))?;
    let points = pipeline.grid_search(
        &GridSpec {
            bpe: a.bpe,
            sizes: a.sizes,
        },
        &a.variants,
        Some(&a.out_dir),
    )?;
    print!("{}", harness::grid_tsv(&points));
    Ok(points.iter().all(|p| p.error.is_none()))
}

fn report(a: ReportArgs) -> Result<()> {
    if !a.results_dir.is_dir() {
        bail!("{} is not a directory", a.results_dir.display());
    }
    let r = harness::emit_tables_and_curves(&a.results_dir)?;
    print!("{}", r.summary);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Translate(a) => translate(a).map(|_| true),
        Command::Distill(a) => distill_cmd(a).map(|_| true),
        Command::Score(a) => score(a).map(|_| true),
        Command::Experiment(a) => experiment(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some runs failed; see the log");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
