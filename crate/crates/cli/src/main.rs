use std::fs;
use std::io::{self, Read};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use misinfo_cli::{
    cmd_demo_retrieve, cmd_eval, cmd_gen_data, cmd_parse_batch, cmd_parse_text, cmd_sft, cmd_train_grpo, CliError,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "misinfo-lab", version, about = "Toy GRPO lab for bilingual misinformation detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long = "deadline-ms", global = true)]
    deadline_ms: Option<u64>,
    /// Rate at which Chinese subtitle characters are corrupted during eval.
    #[arg(long = "ocr-noise", global = true)]
    ocr_noise: Option<f64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples (overrides `n_samples`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Supervised fine-tuning on manifest targets.
    Sft {
        #[command(flatten)]
        common: Common,
    },
    /// GRPO training from an optional starting checkpoint.
    TrainGrpo {
        #[command(flatten)]
        common: Common,
        /// Number of steps (overrides `grpo_steps`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint on a manifest (greedy unless `decoding = sample`).
    Eval {
        #[command(flatten)]
        common: Common,
        /// none, fixture or timeout (overrides `retriever`).
        #[arg(long)]
        retriever: Option<String>,
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Parse a response given as an argument, or one response per line of
    /// `--file` (use `-` for stdin).
    Parse {
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Show the prompt assembled for one subtitle pair.
    DemoRetrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        en: String,
        #[arg(long)]
        zh: String,
        #[arg(long, default_value = "image-0")]
        image: String,
        #[arg(long)]
        retriever: Option<String>,
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
}

fn build_config(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags = [
        ("seed", common.seed.map(|v| v.to_string())),
        ("out", path(&common.out)),
        ("manifest", path(&common.manifest)),
        ("checkpoint", path(&common.checkpoint)),
        ("deadline_ms", common.deadline_ms.map(|v| v.to_string())),
        ("ocr_noise", common.ocr_noise.map(|v| v.to_string())),
    ];
    for (k, v) in flags.iter().chain(extra) {
        if let Some(v) = v {
            config.set(k, v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::GenData { common, n } => {
            let config = build_config(&common, &[("n_samples", n.map(|v| v.to_string()))])?;
            cmd_gen_data(&config)?;
        }
        Command::Sft { common } => {
            let outcome = cmd_sft(&build_config(&common, &[])?)?;
            for (epoch, nll) in outcome.nll_curve.iter().enumerate() {
                println!("epoch={epoch} mean_nll={nll:.9}");
            }
        }
        Command::TrainGrpo { common, steps } => {
            let config = build_config(&common, &[("grpo_steps", steps.map(|v| v.to_string()))])?;
            let log = cmd_train_grpo(&config)?;
            if let Some(last) = log.lines().last() {
                println!("{last}");
            }
        }
        Command::Eval { common, retriever, fixtures } => {
            let fixtures = fixtures.map(|p| p.display().to_string());
            let config = build_config(&common, &[("retriever", retriever), ("fixtures", fixtures)])?;
            let outcome = cmd_eval(&config)?;
            print!("{}", outcome.report.to_text());
            if config.retriever != misinfo_cli::RetrieverKind::None {
                println!("retrieval_degraded = {}", outcome.degraded);
            }
        }
        Command::Parse { text, file } => {
            let (output, ok) = match (text, file) {
                (Some(t), None) => cmd_parse_text(&t),
                (None, Some(path)) => {
                    let input = if path.as_os_str() == "-" {
                        let mut s = String::new();
                        io::stdin().read_to_string(&mut s).map_err(|e| CliError::Io(format!("stdin: {e}")))?;
                        s
                    } else {
                        fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?
                    };
                    cmd_parse_batch(&input)
                }
                _ => return Err(CliError::Validation("give either TEXT or --file".into())),
            };
            println!("{}", output.trim_end());
            return Ok(ok);
        }
        Command::DemoRetrieve { common, en, zh, image, retriever, fixtures } => {
            let fixtures = fixtures.map(|p| p.display().to_string());
            let config = build_config(&common, &[("retriever", retriever), ("fixtures", fixtures)])?;
            print!("{}", cmd_demo_retrieve(&config, &en, &zh, &image)?);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
