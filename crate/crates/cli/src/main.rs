use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mcl_core::cohort::DeploymentNetwork;
use mcl_core::train::{
    final_accuracy, linear_eval, random_feature_control, read_config_file, train, Checkpoint, LinearEvalOptions,
    Mode, TrainConfig,
};
use mcl_core::verify::{run_suite, SuiteOptions};

#[derive(Parser)]
#[command(name = "mcl", about = "Mutual contrastive learning for network cohorts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for metrics.jsonl and checkpoint.json
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Continue from a checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Field overrides as `--key value` pairs
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised cohort training
    TrainSup(RunArgs),
    /// Self-supervised cohort training, followed by linear evaluation
    TrainSelfsup(RunArgs),
    /// Linear evaluation of an exported network's frozen features
    LinearEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Write one cohort member as a standalone network
    ExportModel {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 0-based network index
        #[arg(long, default_value_t = 0)]
        network: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the verification suite; exits nonzero when any check fails
    Verify {
        #[arg(long, default_value = "verify_report.json")]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write projection embeddings as raw little-endian f32 plus labels.csv
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        network: usize,
        /// train or test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            bail!("expected --key, got `{arg}`");
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("missing value for --{key}"))?;
                (key.to_string(), v.clone())
            }
        };
        pairs.push((key.replace('-', "_"), value));
    }
    Ok(pairs)
}

fn load_config(mode: Mode, file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut pairs = match file {
        Some(f) => read_config_file(f)?,
        None => Vec::new(),
    };
    pairs.extend(parse_overrides(overrides)?);
    Ok(TrainConfig::from_pairs(mode, &pairs)?)
}

fn run_training(mode: Mode, args: &RunArgs) -> Result<()> {
    let mut config = load_config(mode, args.config.as_deref(), &args.overrides)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    config.metrics_path.get_or_insert_with(|| args.out.join("metrics.jsonl"));
    config.checkpoint_path.get_or_insert_with(|| args.out.join("checkpoint.json"));
    let resume = match &args.resume {
        Some(p) => Some(Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let outcome = train(&config, resume)?;
    let mut summary = serde_json::json!({
        "epochs": outcome.metrics.len(),
        "metrics": config.metrics_path,
        "checkpoint": config.checkpoint_path,
    });
    match mode {
        Mode::Supervised => {
            if let Some((mean, best)) = final_accuracy(&outcome.metrics) {
                summary["accuracy"] = serde_json::json!(outcome.metrics.last().map(|m| m.accuracy.clone()));
                summary["mean_accuracy"] = serde_json::json!(mean);
                summary["best_accuracy"] = serde_json::json!(best);
            }
        }
        Mode::Selfsup => {
            let cfg = &outcome.checkpoint.config;
            let (train_set, test_set) = cfg.dataset.load(cfg.data_dir.as_deref())?;
            let opts = LinearEvalOptions::default();
            let mut accs = Vec::new();
            for m in 0..outcome.cohort.networks() {
                let net = outcome.cohort.extract_deployment_network(m)?;
                accs.push(linear_eval(&net, &train_set, &test_set, &opts)?);
            }
            let control = random_feature_control(&train_set, &test_set, outcome.cohort.feature_dim(), &opts)?;
            summary["linear_eval"] = serde_json::json!(accs);
            summary["random_feature_control"] = serde_json::json!(control);
        }
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn export_embeddings(checkpoint: &Path, network: usize, split: &str, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    if network >= ck.cohort.networks() {
        bail!("network {network} outside cohort of {}", ck.cohort.networks());
    }
    let (train_set, test_set) = ck.config.dataset.load(ck.config.data_dir.as_deref())?;
    let data = match split {
        "train" => train_set,
        "test" => test_set,
        other => bail!("unknown split `{other}`"),
    };
    std::fs::create_dir_all(out)?;
    let mut raw = std::io::BufWriter::new(std::fs::File::create(out.join("embeddings.f32"))?);
    let mut rows = 0;
    let mut dim = 0;
    let index: Vec<usize> = (0..data.len()).collect();
    for chunk in index.chunks(256) {
        let (x, _) = data.batch(chunk);
        let outs = ck.cohort.evaluate(&x)?;
        let emb = &outs[network].1;
        dim = emb.row_len();
        rows += emb.rows();
        for v in emb.data() {
            raw.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    raw.flush()?;
    let mut labels = std::fs::File::create(out.join("labels.csv"))?;
    writeln!(labels, "index,label")?;
    for (i, y) in data.labels.iter().enumerate() {
        writeln!(labels, "{i},{y}")?;
    }
    println!("{}", serde_json::json!({ "rows": rows, "dim": dim, "dtype": "f32le" }));
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainSup(args) => run_training(Mode::Supervised, &args)?,
        Command::TrainSelfsup(args) => run_training(Mode::Selfsup, &args)?,
        Command::LinearEval {
            model,
            config,
            overrides,
        } => {
            let cfg = load_config(Mode::Selfsup, config.as_deref(), &overrides)?;
            let net = DeploymentNetwork::load(&model)?;
            let (train_set, test_set) = cfg.dataset.load(cfg.data_dir.as_deref())?;
            let opts = LinearEvalOptions {
                seed: cfg.seed,
                ..LinearEvalOptions::default()
            };
            let acc = linear_eval(&net, &train_set, &test_set, &opts)?;
            println!("{}", serde_json::json!({ "top1": acc }));
        }
        Command::ExportModel {
            checkpoint,
            network,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let net = ck.cohort.extract_deployment_network(network)?;
            net.save(&out)?;
            println!(
                "{}",
                serde_json::json!({ "parameters": net.num_params(), "macs": net.macs()?, "path": out })
            );
        }
        Command::Verify { report, seed } => {
            let opts = SuiteOptions {
                seed,
                ..SuiteOptions::default()
            };
            let result = run_suite(&opts)?;
            std::fs::write(&report, serde_json::to_string_pretty(&result)?)
                .with_context(|| format!("writing {}", report.display()))?;
            for g in &result.gradient_checks {
                println!("{:<24} max rel err {:.2e}  {}", g.op, g.max_relative_error, verdict(g.passed));
            }
            println!("oracle agreement        max diff {:.2e}  {}", result.oracle.max_abs_diff, verdict(result.oracle.passed));
            let mi_ok = result.mi.iter().all(|m| m.passed);
            println!("mi bound                {} configs  {}", result.mi.len(), verdict(mi_ok));
            println!("stop gradient           {}", verdict(result.stop_gradient.passed));
            println!("degenerate cohort       {}", verdict(result.degenerate.passed));
            println!("weight-zero reduction   {}", verdict(result.weight_zero.passed));
            println!("report written to {}", report.display());
            return Ok(result.passed);
        }
        Command::ExportEmbeddings {
            checkpoint,
            network,
            split,
            out,
        } => export_embeddings(&checkpoint, network, &split, &out)?,
    }
    Ok(true)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAILED"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
