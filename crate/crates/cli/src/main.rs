use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use steerkit::eval::{run_eval, EvalSpec};
use steerkit::generators::{label_sae_features, SaeModel};
use steerkit::hparams::{load_config_with_overrides, GenerateConfig, ResolvedConfig, SaeSource};
use steerkit::merge::{merge, MergeInput, MergeInputRef, MergeRequest, MergeSpec, MergeStrategy};
use steerkit::store::VectorStore;
use steerkit::{Error, Result};
use steerkit_cli::pipeline::{Pipeline, Stage};
use steerkit_cli::server::{serve, AppState};

#[derive(Parser)]
#[command(name = "steerkit", version, about = "Test-time steering for small language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Top-level run config.
    #[arg(long)]
    config: PathBuf,
    /// Override a resolved config key, as `key.path=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory, relative to the working directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ResolvedConfig> {
        let mut overrides = self.set.clone();
        if let Some(out) = &self.out {
            let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
            overrides.push(format!("output_dir={}", json!(cwd.join(out).to_string_lossy())));
        }
        load_config_with_overrides(&self.config, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate, apply and evaluate.
    Run(ConfigArgs),
    /// Generate steering vectors into the store.
    GenVector(ConfigArgs),
    /// Generate outputs for the evaluation prompts with the configured plan.
    Apply(ConfigArgs),
    /// Score outputs, either as a pipeline stage or standalone.
    Eval {
        #[arg(long, conflicts_with_all = ["input", "spec"])]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
        set: Vec<String>,
        #[arg(long, requires = "config")]
        out: Option<PathBuf>,
        /// JSONL rows with `prompt` and `output`.
        #[arg(long, requires = "spec")]
        input: Option<PathBuf>,
        /// Evaluation spec JSON.
        #[arg(long, requires = "input")]
        spec: Option<PathBuf>,
        /// Where to write the report; stdout if absent.
        #[arg(long, requires = "input")]
        report: Option<PathBuf>,
    },
    /// Merge stored vectors and save the result.
    Merge(MergeArgs),
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// SAE checkpoint for feature search and SAE-based generation.
        #[arg(long)]
        sae: Option<PathBuf>,
    },
    /// Train and label an SAE on the configured corpus.
    SaeTrain(ConfigArgs),
    /// Relabel an SAE checkpoint against the configured corpus.
    SaeLabel {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        sae: PathBuf,
        /// Destination; defaults to overwriting `--sae`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct MergeArgs {
    /// Vector store directory.
    #[arg(long)]
    store: PathBuf,
    /// Merge request JSON; replaces the inline flags.
    #[arg(long, conflicts_with_all = ["input", "strategy"])]
    spec: Option<PathBuf>,
    /// Input as `id` or `id:weight`. Repeatable.
    #[arg(long = "input", value_name = "ID[:WEIGHT]")]
    input: Vec<String>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<MergeStrategy>,
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    #[arg(long, default_value_t = 0.0)]
    drop_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    name: Option<String>,
}

fn parse_strategy(s: &str) -> std::result::Result<MergeStrategy, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown strategy {s:?}; expected linear, ties or dare_ties"))
}

fn parse_input(raw: &str) -> Result<MergeInputRef> {
    let (id, weight) = match raw.split_once(':') {
        Some((id, w)) => {
            let w: f64 = w
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad weight in --input {raw:?}")))?;
            (id, w)
        }
        None => (raw, 1.0),
    };
    Ok(MergeInputRef {
        vector_id: id.to_string(),
        weight,
    })
}

fn merge_request(args: &MergeArgs) -> Result<MergeRequest> {
    if let Some(path) = &args.spec {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(serde_json::from_slice(&bytes)?);
    }
    let strategy = args
        .strategy
        .ok_or_else(|| Error::InvalidArgument("merge needs --strategy or --spec".into()))?;
    Ok(MergeRequest {
        strategy,
        inputs: args.input.iter().map(|s| parse_input(s)).collect::<Result<_>>()?,
        density: args.density,
        drop_rate: args.drop_rate,
        seed: args.seed,
        name: args.name.clone(),
    })
}

fn run_merge(args: &MergeArgs) -> Result<()> {
    let req = merge_request(args)?;
    let store = VectorStore::open(&args.store)?;
    let inputs = req
        .inputs
        .iter()
        .map(|i| {
            Ok(MergeInput {
                vector: store.load_vector(&i.vector_id)?.vector,
                weight: i.weight,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = MergeSpec {
        strategy: req.strategy,
        inputs,
        density: req.density,
        drop_rate: req.drop_rate,
        seed: req.seed,
    };
    let merged = merge(&spec)?;
    let name = req.name.unwrap_or_else(|| req.strategy.method_name().to_string());
    let id = store.save_vector(&name, &merged)?;
    println!("{id}");
    Ok(())
}

fn run_stages(args: &ConfigArgs, stages: &[Stage]) -> Result<()> {
    let cfg = args.load()?;
    let mut p = Pipeline::new(&cfg);
    let result = p.run(stages).map(|_| ());
    eprintln!(
        "manifest: {}",
        p.out_dir().join(steerkit_cli::pipeline::MANIFEST_FILE).display()
    );
    result
}

fn sae_source(cfg: &ResolvedConfig) -> SaeSource {
    cfg.generate
        .iter()
        .find_map(|(_, g)| match g {
            GenerateConfig::SaeFeature(c) => Some(c.sae.clone()),
            GenerateConfig::Sta(c) => Some(c.sae.clone()),
            _ => None,
        })
        .unwrap_or_default()
}

fn write_report<T: serde::Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => run_stages(&a, &Stage::ALL),
        Command::GenVector(a) => run_stages(&a, &[Stage::Generate]),
        Command::Apply(a) => run_stages(&a, &[Stage::Apply]),
        Command::Eval {
            config,
            set,
            out,
            input,
            spec,
            report,
        } => match (config, input, spec) {
            (Some(config), _, _) => run_stages(&ConfigArgs { config, set, out }, &[Stage::Evaluate]),
            (None, Some(input), Some(spec)) => {
                let bytes = std::fs::read(&spec).map_err(|e| Error::io(&spec, e))?;
                let spec: EvalSpec = serde_json::from_slice(&bytes)?;
                let r = run_eval(&input, &spec)?;
                write_report(report.as_deref(), &r)
            }
            _ => Err(Error::InvalidArgument(
                "eval needs --config, or --input with --spec".into(),
            )),
        },
        Command::Merge(a) => run_merge(&a),
        Command::Serve { config, addr, sae } => {
            let cfg = config.load()?;
            let state = AppState::from_config(&cfg, sae.as_deref())?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(serve(state, addr))
        }
        Command::SaeTrain(a) => {
            let cfg = a.load()?;
            let mut src = sae_source(&cfg);
            src.checkpoint = None;
            let mut p = Pipeline::new(&cfg);
            p.sae(&src)?;
            let name = p
                .manifest()
                .sae_checkpoint
                .clone()
                .expect("training records the checkpoint");
            println!("{}", p.out_dir().join(name).display());
            Ok(())
        }
        Command::SaeLabel { config, sae, output } => {
            let cfg = config.load()?;
            let src = sae_source(&cfg);
            let mut p = Pipeline::new(&cfg);
            let model = p.model()?;
            let corpus = p.sae_corpus()?;
            let model_sae = SaeModel::load(&sae)?;
            let labeled = label_sae_features(&model_sae, &model, &corpus, src.label_top_k)?;
            let dest = output.unwrap_or(sae);
            labeled.save(&dest)?;
            println!("{}", dest.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}
