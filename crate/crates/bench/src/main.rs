use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use knn_attention::forward::Estimator;
use knn_bench::{
    run, write_csv, write_csv_file, BenchError, BenchResult, Experiment, ExperimentSpec, Gradient, IndexChoice, KChoice,
    Loss, Upstream, DEFAULT_ORACLE_CAP,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum IndexArg {
    Exact,
    Lsh,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimatorArg {
    Mom,
    Weighted,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UpstreamArg {
    Normal,
    Zero,
}

/// Run a kNN attention experiment and write one CSV row per metric.
#[derive(Debug, Parser)]
#[command(name = "bench", version)]
struct Cli {
    /// error-vs-k | runtime-vs-n | grad-bounds | grad-descent
    experiment: String,
    /// Sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "256")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Top-k sizes: integers, `n^p`, `n^a/b`, `sqrt` or `auto`.
    #[arg(long, value_delimiter = ',', default_value = "sqrt")]
    k: Vec<String>,
    /// Spill sample size; defaults to k.
    #[arg(long)]
    l: Option<usize>,
    /// Input half-widths for uniform inputs.
    #[arg(long = "B", value_delimiter = ',', default_value = "1")]
    b: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Learning rates (grad-descent).
    #[arg(long, value_delimiter = ',', default_value = "0.1")]
    lr: Vec<f64>,
    /// mse | cross-entropy (grad-descent).
    #[arg(long, default_value = "mse")]
    loss: String,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Gradients to estimate; defaults depend on the experiment.
    #[arg(long, value_delimiter = ',')]
    grads: Option<Vec<String>>,
    #[arg(long, value_enum, default_value = "normal")]
    upstream: UpstreamArg,
    /// Output file; must not exist. Standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    causal: bool,
    #[arg(long, value_enum, default_value = "exact")]
    index: IndexArg,
    #[arg(long, default_value_t = 4)]
    lsh_tables: usize,
    #[arg(long, value_enum, default_value = "weighted")]
    estimator: EstimatorArg,
    /// Do not fold 1/sqrt(d) into the keys.
    #[arg(long)]
    no_prefold_scale: bool,
    #[arg(long, default_value_t = DEFAULT_ORACLE_CAP)]
    oracle_cap: usize,
    /// Leave wall-clock fields empty so reruns are byte-identical.
    #[arg(long)]
    omit_timing: bool,
}

fn build_spec(cli: Cli) -> BenchResult<ExperimentSpec> {
    let experiment: Experiment = cli.experiment.parse()?;
    let mut spec = ExperimentSpec::new(experiment);
    spec.n = cli.n;
    spec.d = cli.d;
    spec.k = cli.k.iter().map(|s| s.parse::<KChoice>()).collect::<BenchResult<_>>()?;
    spec.l = cli.l;
    spec.b = cli.b;
    spec.epsilon = cli.epsilon;
    spec.delta = cli.delta;
    spec.lr = cli.lr;
    spec.loss = cli.loss.parse::<Loss>()?;
    spec.iterations = cli.iterations;
    spec.seeds = cli.seeds;
    spec.reps = cli.reps;
    if let Some(grads) = cli.grads {
        spec.gradients = grads.iter().map(|g| g.parse::<Gradient>()).collect::<BenchResult<_>>()?;
    }
    spec.upstream = match cli.upstream {
        UpstreamArg::Normal => Upstream::Normal,
        UpstreamArg::Zero => Upstream::Zero,
    };
    spec.causal = cli.causal;
    spec.index = match cli.index {
        IndexArg::Exact => IndexChoice::Exact,
        IndexArg::Lsh => IndexChoice::Lsh { tables: cli.lsh_tables },
    };
    spec.estimator = match cli.estimator {
        EstimatorArg::Mom => Estimator::MedianOfMeans,
        EstimatorArg::Weighted => Estimator::Weighted,
    };
    spec.prefold_scale = !cli.no_prefold_scale;
    spec.oracle_cap = cli.oracle_cap;
    spec.omit_timing = cli.omit_timing;
    spec.out = cli.out;
    spec.validate()?;
    Ok(spec)
}

fn execute(cli: Cli) -> BenchResult<()> {
    let spec = build_spec(cli)?;
    if let Some(path) = &spec.out {
        if path.exists() {
            return Err(BenchError::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} already exists", path.display()),
            )));
        }
    }
    let rows = run(&spec)?;
    match &spec.out {
        Some(path) => write_csv_file(&rows, path),
        None => write_csv(&rows, std::io::stdout().lock()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
