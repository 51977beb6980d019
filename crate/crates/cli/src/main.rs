use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ctarate::corpus::{read_corpus, write_corpus};
use ctarate::dialog::Conversation;
use ctarate::features::{extract_all, write_feature_csv, Lexicons};
use ctarate::models::{coefficient_report, ModelFamily};
use ctarate::numeric::checkpoint::Checkpoint;
use ctarate::synth::{generate, GeneratorConfig, Preset};
use ctarate::train::{
    ablation_suite, checkpoint, evaluate, load_model, prepare, report_csv, report_markdown, runs_csv, train,
    EvalReport, RunResult, TrainConfig, TrainedModel, DEFAULT_SEEDS,
};

/// Rating prediction for conversational task assistants.
///
/// Config files are TOML with optional `[generator]` and `[train]` tables.
/// Values are resolved as: built-in defaults (or `--preset`), then the
/// config file, then command-line flags. Log verbosity comes from `CTA_LOG`.
#[derive(Parser)]
#[command(name = "ctarate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic rated corpus as JSON lines.
    Generate(GenerateArgs),
    /// Write the behavioral feature matrix of a corpus as CSV.
    Extract(ExtractArgs),
    /// Train one model family over several seeds.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of a corpus.
    Evaluate(EvaluateArgs),
    /// Run the five ablation configurations.
    Ablate(AblateArgs),
    /// List the largest coefficients of a linear checkpoint.
    ReportImportance(ImportanceArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n: Option<usize>,
    /// default, fusion or truncation
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory holding positive.txt and negative.txt.
    #[arg(long)]
    lexicon_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// lr, svm, flow or tbrater
    #[arg(long)]
    model: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    lexicon_dir: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// JSON report path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional CSV of per-conversation predictions.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lexicon_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 14)]
    k: usize,
    /// CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    generator: Option<toml::Table>,
    train: Option<toml::Table>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CTA_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ReportImportance(a) => cmd_importance(a),
    }
}

fn read_config(path: Option<&Path>) -> Result<ConfigFile> {
    let Some(path) = path else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

/// Applies the keys of `layer` on top of `base`, recursing into tables.
fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (key, value) in layer {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn layered<T: Serialize + DeserializeOwned + Clone>(base: &T, layer: Option<toml::Table>, what: &str) -> Result<T> {
    let Some(layer) = layer else {
        return Ok(base.clone());
    };
    let mut table = toml::Table::try_from(base).with_context(|| format!("encoding {what} defaults"))?;
    merge(&mut table, layer);
    table.try_into().with_context(|| format!("invalid [{what}] table"))
}

fn load_corpus(path: &Path) -> Result<Vec<Conversation>> {
    read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_lexicons(dir: Option<&Path>) -> Result<Lexicons> {
    match dir {
        Some(d) => Lexicons::load_dir(d).with_context(|| format!("reading lexicons from {}", d.display())),
        None => Ok(Lexicons::shipped()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let file = read_config(path)?;
    let cfg: TrainConfig = layered(&TrainConfig::default(), file.train, "train")?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let preset = match &a.preset {
        Some(name) => Preset::from_name(name)?,
        None => Preset::Default,
    };
    let file = read_config(a.config.as_deref())?;
    let mut cfg: GeneratorConfig = layered(&preset.config(), file.generator, "generator")?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(n) = a.n {
        cfg.n_conversations = n;
    }
    let corpus = generate(&cfg)?;
    write_corpus(&a.out, &corpus).with_context(|| format!("writing corpus {}", a.out.display()))?;
    log::info!("wrote {} conversations to {}", corpus.len(), a.out.display());
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let lex = load_lexicons(a.lexicon_dir.as_deref())?;
    let vectors = extract_all(&corpus, &lex);
    let file = fs::File::create(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    write_feature_csv(io::BufWriter::new(file), &corpus, &vectors)?;
    log::info!("wrote {} feature rows to {}", vectors.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let family = ModelFamily::from_short_name(&a.model)
        .with_context(|| format!("unknown model {:?}; expected lr, svm, flow or tbrater", a.model))?;
    let mut cfg = train_config(a.config.as_deref())?;
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    let corpus = load_corpus(&a.corpus)?;
    let lex = load_lexicons(a.lexicon_dir.as_deref())?;
    let seeds = a.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    let data = prepare(&corpus, &cfg, &lex)?;
    log::info!(
        "split: {} train, {} validation, {} test",
        data.train.len(),
        data.validation.len(),
        data.test.len()
    );
    let outcome = train(family, &data, &cfg, &seeds)?;
    create_dir(&a.out_dir)?;
    for run in &outcome.runs {
        let path = a.out_dir.join(format!("{family}-seed{}.ckpt", run.seed));
        checkpoint(run, &data, &cfg)
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let name = family.short_name();
    write_file(&a.out_dir.join("report.json"), json_text(&outcome.report)?.as_bytes())?;
    write_file(&a.out_dir.join("report.csv"), report_csv(&[(name, &outcome.report)]).as_bytes())?;
    write_file(&a.out_dir.join("runs.csv"), runs_csv(&outcome.report).as_bytes())?;
    write_file(&a.out_dir.join("train_config.toml"), toml::to_string(&cfg)?.as_bytes())?;
    let m = &outcome.report.mean;
    log::info!("{name}: accuracy {:.4}, macro-F1 {:.4}", m.accuracy, m.f1);
    Ok(())
}

fn json_text<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let (_, meta) = load_model(&ckpt)?;
    let (metrics, predictions) = evaluate(&ckpt, &corpus)?;
    let report = EvalReport::from_runs(vec![RunResult {
        seed: meta.seed,
        best_epoch: meta.best_epoch,
        metrics,
    }]);
    write_or_print(a.out.as_deref(), &json_text(&report)?)?;
    if let Some(path) = a.predictions.as_deref() {
        let mut text = String::from("conversation_id,label,prediction\n");
        for p in &predictions {
            text.push_str(&format!("{},{},{}\n", p.conversation_id, p.label, p.prediction));
        }
        write_file(path, text.as_bytes())?;
    }
    log::info!("{}: accuracy {:.4} on {} test conversations", meta.family, metrics.accuracy, predictions.len());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = train_config(a.config.as_deref())?;
    let corpus = load_corpus(&a.corpus)?;
    let lex = load_lexicons(a.lexicon_dir.as_deref())?;
    let seeds = a.seeds.unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
    let rows = ablation_suite(&corpus, &cfg, &lex, &seeds)?;
    let table: Vec<(&str, &EvalReport)> = rows.iter().map(|r| (r.ablation.label(), &r.report)).collect();
    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("ablation.csv"), report_csv(&table).as_bytes())?;
    write_file(&a.out_dir.join("ablation.md"), report_markdown(&table).as_bytes())?;
    Ok(())
}

fn cmd_importance(a: ImportanceArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (model, _) = load_model(&ckpt)?;
    let TrainedModel::Linear(linear) = model else {
        bail!("{} holds a {} model; coefficients need lr or svm", a.checkpoint.display(), ckpt.family);
    };
    let mut text = String::from("rank,feature,coefficient\n");
    for (rank, (name, w)) in coefficient_report(&linear, a.k).iter().enumerate() {
        text.push_str(&format!("{},{name},{w}\n", rank + 1));
    }
    write_or_print(a.out.as_deref(), &text)
}
