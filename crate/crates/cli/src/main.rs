//! `pnrnet`: generate corpora, train, evaluate, predict, inspect attention
//! and check gradients.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use pnrnet_core::data::{generate_synthetic, load_corpus, nesting_ratio, write_corpus, SynthConfig};
use pnrnet_core::metrics::evaluate;
use pnrnet_core::model::TrainConfig;
use pnrnet_core::numerics::GradCheckOptions;
use pnrnet_core::trainer::{
    check_model_gradients, inspect_attention, predict, toy_config, toy_sentence, train, Checkpoint,
    MODEL_GRAD_CHECK_EPS,
};
use pnrnet_core::Error;

/// Largest relative gradient error `grad-check` accepts.
const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "pnrnet",
    version,
    about = "Propose-and-refine nested named-entity recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic nested-entity corpus as JSON Lines.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Score a model's predictions against a gold corpus.
    Eval(EvalArgs),
    /// Write predicted mentions with confidences as JSON Lines.
    Predict(PredictArgs),
    /// Export one decoder head's cross-attention over the spans of a sentence.
    InspectAttention(InspectArgs),
    /// Compare analytic and finite-difference gradients on a toy model.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    sentences: usize,
    /// Number of entity types.
    #[arg(long, default_value_t = 3)]
    types: usize,
    /// Target fraction of mentions nested inside another mention.
    #[arg(long, default_value_t = 0.4)]
    nesting: f64,
    #[arg(long, default_value_t = 8)]
    max_entity_len: usize,
    #[arg(long, default_value_t = 20)]
    max_sentence_len: usize,
    /// Number of distinct filler words.
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON file with training settings; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Checkpoint destination.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch log as JSON Lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["model", "predictions"])))]
struct EvalArgs {
    /// Checkpoint whose predictions are scored.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score an existing prediction file instead of running a model.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Gold corpus.
    #[arg(long)]
    data: PathBuf,
    /// Add scores bucketed by mention length.
    #[arg(long)]
    buckets: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// 0-based line of the sentence in `--data`.
    #[arg(long)]
    sentence: usize,
    /// 0-based decoder layer.
    #[arg(long)]
    layer: usize,
    /// 0-based attention head.
    #[arg(long)]
    head: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// JSON overrides of the toy configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Central-difference step, within [1e-7, 1e-3].
    #[arg(long, default_value_t = MODEL_GRAD_CHECK_EPS)]
    eps: f64,
    /// Parameter coordinates to check; 0 checks all of them.
    #[arg(long, default_value_t = 200)]
    samples: usize,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Numeric(_) => 3,
            Error::Load { .. } | Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::Version { .. } => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

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
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::InspectAttention(a) => cmd_inspect(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = SynthConfig {
        sentences: a.sentences,
        vocab_size: a.vocab_size,
        types: a.types,
        nesting_ratio: a.nesting,
        max_entity_len: a.max_entity_len,
        max_sentence_len: a.max_sentence_len,
        seed: a.seed,
    };
    let corpus = generate_synthetic(&cfg)?;
    write_corpus(&a.out, &corpus)?;
    let mentions: usize = corpus.iter().map(|s| s.entities.len()).sum();
    println!(
        "wrote {} sentences, {mentions} mentions to {}",
        corpus.len(),
        a.out.display()
    );
    println!("nesting ratio {:.2}", nesting_ratio(&corpus));
    Ok(())
}

/// Reads a JSON object of settings over `base`. Unknown or mistyped keys
/// are usage errors.
fn read_config(path: &Path, base: &TrainConfig) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })?;
    let bad = |e: serde_json::Error| Failure::usage(format!("{}: {e}", path.display()));
    let overrides: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
    let serde_json::Value::Object(overrides) = overrides else {
        return Err(Failure::usage(format!("{}: expected a JSON object", path.display())));
    };
    let mut merged = serde_json::to_value(base).map_err(bad)?;
    let fields = merged.as_object_mut().expect("config serializes to an object");
    for (k, v) in overrides {
        fields.insert(k, v);
    }
    let cfg: TrainConfig = serde_json::from_value(merged).map_err(bad)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => read_config(p, &TrainConfig::default())?,
        None => TrainConfig::default(),
    };
    let train_set = load_corpus(&a.train)?;
    let dev_set = load_corpus(&a.dev)?;
    let outcome = train(&cfg, &train_set, &dev_set, |e| {
        let refine: Vec<String> = e.refine_losses.iter().map(|r| format!("{r:.4}")).collect();
        println!(
            "epoch {:>3}  proposal {:.4}  refine [{}]  total {:.4}  dev f1 {:.4}",
            e.epoch,
            e.proposal_loss,
            refine.join(", "),
            e.total_loss,
            e.dev_f1
        );
    })?;
    if let Some(p) = &a.log {
        let io = |e| Error::Io {
            path: p.clone(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(p).map_err(io)?);
        for entry in &outcome.log {
            serde_json::to_writer(&mut w, entry).map_err(Error::from)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    outcome.checkpoint.save(&a.out)?;
    println!(
        "saved epoch {} (dev f1 {:.4}) to {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.dev_f1,
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let gold = load_corpus(&a.data)?;
    let pred = match (&a.model, &a.predictions) {
        (Some(m), _) => predict(&Checkpoint::load(m)?, &gold)?,
        (None, Some(p)) => load_corpus(p)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    let report = evaluate(&gold, &pred)?;
    print!("{}", report.to_table(a.buckets));
    if let Some(p) = &a.json {
        let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        fs::write(p, text + "\n").map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.model)?;
    let corpus = load_corpus(&a.data)?;
    let pred = predict(&ckpt, &corpus)?;
    write_corpus(&a.out, &pred)?;
    let mentions: usize = pred.iter().map(|s| s.entities.len()).sum();
    println!(
        "wrote {mentions} mentions for {} sentences to {}",
        pred.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let ckpt = Checkpoint::load(&a.model)?;
    let corpus = load_corpus(&a.data)?;
    let sentence = corpus.get(a.sentence).ok_or_else(|| {
        Failure::usage(format!(
            "sentence {} out of range ({} sentences)",
            a.sentence,
            corpus.len()
        ))
    })?;
    let export = inspect_attention(&ckpt, sentence, a.layer, a.head)?;
    let text = serde_json::to_string_pretty(&export).map_err(Error::from)?;
    fs::write(&a.out, text + "\n").map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    println!(
        "wrote layer {} head {} attention for {} proposals to {}",
        a.layer,
        a.head,
        export.proposals.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => read_config(p, &toy_config())?,
        None => toy_config(),
    };
    let options = GradCheckOptions {
        eps: a.eps,
        samples: a.samples,
        ..GradCheckOptions::default()
    };
    let report = check_model_gradients(&cfg, &toy_sentence(), &options)?;
    println!("checked {} coordinates, eps {:e}", report.checked, a.eps);
    println!("max relative error {:.3e}", report.max_rel_error);
    if let Some(w) = &report.worst {
        println!(
            "worst {}[{}]: analytic {:.6e}, numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if report.max_rel_error < GRAD_TOLERANCE {
        println!("ok");
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: format!(
                "max relative error {:.3e} is not below {GRAD_TOLERANCE:e}",
                report.max_rel_error
            ),
        })
    }
}
