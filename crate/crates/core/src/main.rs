use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use freeknot::cli::{run, Command, FoldScheme, RunConfig};
use freeknot::dataprep::Transform;
use freeknot::sampler::Updater;
use freeknot::Error;

/// Bayesian surface regression with free-knot thin-plate splines.
///
/// Settings come from built-in defaults, then the `--config` TOML file, then
/// flags; later sources win. Exit codes: 0 ok, 1 numerical failure, 2 usage
/// or I/O error.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration (a previous run's config.toml works too).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct DataArgs {
    /// Headed CSV; non-response columns are covariates.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated response column names.
    #[arg(long, value_delimiter = ',')]
    responses: Option<Vec<String>>,
    #[arg(long, value_parser = parse_transform)]
    transform: Option<Transform>,
}

#[derive(Args, Default)]
struct ModelArgs {
    #[arg(long)]
    surface_knots: Option<usize>,
    /// Additive knots per covariate.
    #[arg(long)]
    additive_knots: Option<usize>,
}

#[derive(Args, Default)]
struct ChainArgs {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    /// bmh, smh or srwm.
    #[arg(long, value_parser = parse_updater)]
    updater: Option<Updater>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the sampler on a data file.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        chain: ChainArgs,
    },
    /// Draw a synthetic data set.
    Simulate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        responses: Option<usize>,
        #[arg(long)]
        covariates: Option<usize>,
    },
    /// Fixed- versus free-knot loss study on synthetic data.
    Benchmark {
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        chain: ChainArgs,
    },
    /// Cross-validated log predictive density score.
    Cv {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long)]
        folds: Option<usize>,
        /// strided or contiguous.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<FoldScheme>,
    },
    /// Inefficiency factors and effective sample sizes of stored draws.
    Diagnose {
        /// A fit output directory or a draws CSV.
        draws: Option<PathBuf>,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase())).map_err(|e| e.to_string())
}

fn parse_transform(s: &str) -> Result<Transform, String> {
    parse_enum(s)
}

fn parse_updater(s: &str) -> Result<Updater, String> {
    parse_enum(s)
}

fn parse_scheme(s: &str) -> Result<FoldScheme, String> {
    parse_enum(s)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if self.data.is_some() {
            cfg.data.path = self.data;
        }
        set(&mut cfg.data.responses, self.responses);
        set(&mut cfg.data.transform, self.transform);
    }
}

impl ModelArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.knots.surface, self.surface_knots);
        if let Some(a) = self.additive_knots {
            cfg.knots.additive = a;
            cfg.knots.additive_counts.clear();
        }
    }
}

impl ChainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.sampler.iterations, self.iterations);
        set(&mut cfg.sampler.burn_in, self.burn_in);
        set(&mut cfg.sampler.mh.updater, self.updater);
    }
}

fn resolve(cli: Cli) -> Result<(Command, RunConfig), Error> {
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.global.seed);
    set(&mut cfg.workers, cli.global.workers);
    set(&mut cfg.out, cli.global.out);
    let cmd = match cli.command {
        Cmd::Fit { data, model, chain } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg);
            chain.apply(&mut cfg);
            Command::Fit
        }
        Cmd::Simulate { n, responses, covariates } => {
            set(&mut cfg.simulate.n, n);
            set(&mut cfg.simulate.p, responses);
            set(&mut cfg.simulate.covariates, covariates);
            Command::Simulate
        }
        Cmd::Benchmark { replicates, n, chain } => {
            set(&mut cfg.benchmark.replicates, replicates);
            set(&mut cfg.simulate.n, n);
            chain.apply(&mut cfg);
            Command::Benchmark
        }
        Cmd::Cv {
            data,
            model,
            chain,
            folds,
            scheme,
        } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg);
            chain.apply(&mut cfg);
            set(&mut cfg.cv.folds, folds);
            set(&mut cfg.cv.scheme, scheme);
            Command::Cv
        }
        Cmd::Diagnose { draws } => {
            if draws.is_some() {
                cfg.diagnose.draws = draws;
            }
            Command::Diagnose
        }
    };
    Ok((cmd, cfg))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = resolve(cli).and_then(|(cmd, cfg)| {
        let manifest = run(cmd, &cfg)?;
        println!("{} finished: {} files in {}", cmd.name(), manifest.outputs.len() + 2, cfg.out.display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
