use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cyclebalance::evaluation::{inception_table_csv, MetricsReport, TableMetric};
use cyclebalance::experiment::{
    collect_reports, emit_table, eval_gan, plan, pretrain_gan, run_experiment, sweep, ExperimentConfig, Method,
    OutputPolicy, ProfileSpec,
};
use cyclebalance::Error;

#[derive(Parser)]
#[command(name = "cyclebalance", version, about = "Translation-augmented classifiers for imbalanced binary images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one method with repeated runs.
    Run(Common),
    /// Run several methods over several minority counts and write result tables.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods, e.g. `vanilla,cs,smote:k=5,aug`.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// Comma-separated minority training counts.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
    },
    /// Pretrain only the translation GAN.
    PretrainGan(Common),
    /// Score a GAN checkpoint with the proxy classifier.
    EvalGan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Row label in the output table.
        #[arg(long, default_value = "gan")]
        model: String,
    },
    /// Build a method-by-count table from saved `metrics.json` files or directories.
    Report {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = MetricArg::F1Minority)]
        metric: MetricArg,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, env = "CYCLEBALANCE_CONFIG")]
    config: PathBuf,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the model profile with a preset.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Override the method.
    #[arg(long)]
    method: Option<String>,
    /// Validate the configuration and data, print the plan, train nothing.
    #[arg(long)]
    dry_run: bool,
    /// Continue in an existing output directory.
    #[arg(long, conflicts_with = "overwrite")]
    resume: bool,
    /// Replace an existing output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    F1Minority,
    F1Majority,
    Acsa,
    InceptionAccuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = self.profile {
            let name = match p {
                ProfileArg::Paper => "paper",
                ProfileArg::Desk => "desk",
            };
            cfg.profile = ProfileSpec::Preset(name.into());
        }
        if let Some(m) = &self.method {
            cfg.method = m.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn policy(&self) -> OutputPolicy {
        if self.resume {
            OutputPolicy::Resume
        } else if self.overwrite {
            OutputPolicy::Overwrite
        } else {
            OutputPolicy::Fresh
        }
    }

    /// Prints the plan when `--dry-run` is set; returns whether it was.
    fn dry_run(&self, cfg: &ExperimentConfig) -> Result<bool, Error> {
        if self.dry_run {
            let p = plan(cfg)?;
            println!("{}", serde_json::to_string_pretty(&p).expect("plan serializes"));
        }
        Ok(self.dry_run)
    }
}

fn summary(r: &MetricsReport) -> String {
    let mut line = format!(
        "{} n_majority={} n_minority={} runs={} f1_minority={:.4} f1_majority={:.4} acsa={:.4}",
        r.method, r.n_majority, r.n_minority, r.run_count, r.mean.f1_minority, r.mean.f1_majority, r.mean.acsa
    );
    if let Some(ia) = r.mean.inception_accuracy {
        line.push_str(&format!(" inception_accuracy={ia:.4}"));
    }
    line
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(common) => {
            let cfg = common.load()?;
            if common.dry_run(&cfg)? {
                return Ok(());
            }
            let report = run_experiment(&cfg, common.policy())?;
            println!("{}", summary(&report));
        }
        Command::Sweep { common, methods, counts } => {
            let cfg = common.load()?;
            let methods = methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?;
            if common.dry_run(&cfg)? {
                return Ok(());
            }
            for r in sweep(&cfg, &methods, &counts, common.policy())? {
                println!("{}", summary(&r));
            }
        }
        Command::PretrainGan(common) => {
            let cfg = common.load()?;
            if common.dry_run(&cfg)? {
                return Ok(());
            }
            let path = pretrain_gan(&cfg, common.policy())?;
            println!("{}", path.display());
        }
        Command::EvalGan {
            common,
            checkpoint,
            model,
        } => {
            let cfg = common.load()?;
            if common.dry_run(&cfg)? {
                return Ok(());
            }
            let row = eval_gan(&cfg, &checkpoint, &model)?;
            print!("{}", inception_table_csv(&[row]));
        }
        Command::Report { paths, metric, format } => {
            let metric = match metric {
                MetricArg::F1Minority => TableMetric::F1Minority,
                MetricArg::F1Majority => TableMetric::F1Majority,
                MetricArg::Acsa => TableMetric::Acsa,
                MetricArg::InceptionAccuracy => TableMetric::InceptionAccuracy,
            };
            let table = emit_table(&collect_reports(&paths)?, metric);
            match format {
                Format::Text => print!("{}", table.to_text()),
                Format::Csv => print!("{}", table.to_csv()),
            }
        }
    }
    Ok(())
}

fn error_json(e: &Error) -> serde_json::Value {
    let mut body = serde_json::json!({ "kind": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { field, .. } => body["field"] = field.clone().into(),
        Error::Io { path, .. } | Error::Image { path, .. } => body["path"] = path.display().to_string().into(),
        _ => {}
    }
    serde_json::json!({ "error": body })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            match e {
                Error::Numerical { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
