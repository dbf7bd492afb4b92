use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use incidental::inference::{component_interval, two_step_fit};
use incidental::io::{
    coverage_tsv, json_summary, parse_experiment_file, qq_tsv, read_csv, rmse_tsv, ExperimentFile, Table,
};
use incidental::lambda::{ci_lambda, data_driven_lambda, LambdaProcedureConfig};
use incidental::simulation::{coverage_experiment, qq_experiment, rmse_experiment, selection_experiment};
use incidental::{fit, Error, Penalty, PenaltyKind, SolverConfig};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "incidental",
    version,
    about = "Penalized least squares with sparse incidental intercepts"
)]
struct Cli {
    /// Worker threads for experiments (0 = all cores).
    #[arg(long, global = true, env = "INCIDENTAL_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the penalized estimator and the two-step refit to a CSV file.
    Fit(FitArgs),
    /// Run a simulation suite from a TOML experiment file.
    Experiment(ExperimentArgs),
    /// Run the data-driven lambda procedure on a CSV file.
    SelectLambda(SelectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    /// Minimize held-out prediction error over a grid.
    Grid,
    /// A multiple of the pure-set residual SD, intended for intervals.
    Ci,
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row; the first column is the response.
    input: PathBuf,
    #[arg(long, value_parser = parse_penalty, default_value = "soft")]
    penalty: PenaltyKind,
    /// Seed of the lambda procedure's random test split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "grid")]
    rule: Rule,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// A positive number, or `auto` for the data-driven choice.
    #[arg(long, default_value = "auto", allow_hyphen_values = true)]
    lambda: String,
    /// Intervals have level 1 - alpha.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Output directory.
    #[arg(long, default_value = "incidental-out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Rmse,
    Coverage,
    Qq,
    Selection,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Rmse => "rmse",
            Suite::Coverage => "coverage",
            Suite::Qq => "qq",
            Suite::Selection => "selection",
        }
    }
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(value_enum)]
    suite: Suite,
    /// TOML experiment file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "incidental-out")]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured number of replicates.
    #[arg(long)]
    reps: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Also write the test-loss curve here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_penalty(s: &str) -> Result<PenaltyKind, String> {
    s.parse::<PenaltyKind>().map_err(|e| e.to_string())
}

/// Record of one invocation, written as `run.json` next to the artifacts.
#[derive(Serialize)]
struct CliRunRecord {
    command: String,
    config: Value,
    seed: Option<u64>,
    artifacts: Vec<String>,
    wall_time_secs: f64,
    status: &'static str,
    error: Option<String>,
}

struct Run {
    out: Option<PathBuf>,
    config: Value,
    seed: Option<u64>,
    artifacts: Vec<String>,
}

impl Run {
    fn new(out: Option<PathBuf>) -> Self {
        Self {
            out,
            config: Value::Null,
            seed: None,
            artifacts: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Error> {
        let dir = self.out.as_ref().expect("writing requires an output directory");
        fs::create_dir_all(dir)?;
        let path = dir.join(name);
        fs::write(&path, contents)?;
        self.artifacts.push(path.display().to_string());
        Ok(())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. }
        | Error::Config(_)
        | Error::InvalidParameter(_)
        | Error::Io(_)
        | Error::DimensionMismatch { .. } => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

fn load(path: &Path) -> Result<Table, Error> {
    read_csv(fs::File::open(path)?)
}

fn procedure(seed: u64) -> LambdaProcedureConfig {
    LambdaProcedureConfig {
        seed,
        ..LambdaProcedureConfig::default()
    }
}

fn cmd_fit(args: &FitArgs, run: &mut Run) -> Result<String, Error> {
    let solver = SolverConfig {
        tol: args.tol,
        max_iter: args.max_iter,
        ..SolverConfig::default()
    };
    let kind = args.data.penalty;
    let proc = procedure(args.data.seed);
    run.config = json!({
        "input": args.data.input.display().to_string(),
        "penalty": kind.to_string(),
        "lambda": args.lambda,
        "rule": if matches!(args.data.rule, Rule::Ci) { "ci" } else { "grid" },
        "alpha": args.alpha,
        "tol": args.tol,
        "max_iter": args.max_iter,
    });
    run.seed = Some(args.data.seed);
    let table = load(&args.data.input)?;
    let data = &table.data;
    let lambda = if args.lambda == "auto" {
        match args.data.rule {
            Rule::Grid => data_driven_lambda(data, kind, &proc, &solver)?.lambda_opt,
            Rule::Ci => ci_lambda(data, &proc)?,
        }
    } else {
        args.lambda
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("--lambda must be a number or `auto`, got `{}`", args.lambda)))?
    };
    let res = fit(data, &Penalty::new(kind, lambda)?, &solver)?;
    let ts = two_step_fit(data, &res)?;

    let mut coef = String::from("term\testimate\ttwo_step\tlower\tupper\n");
    for (j, name) in table.covariates.iter().enumerate() {
        let ci = component_interval(&ts, j, args.alpha)?;
        coef.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\n",
            res.beta[j],
            ts.beta_tilde[j],
            ci.lower(),
            ci.upper()
        ));
    }
    let mut mu = String::from("row\tmu\n");
    for i in res.active_set.iter() {
        mu.push_str(&format!("{}\t{}\n", i + 1, res.mu[i]));
    }
    let summary = json!({
        "penalty": kind.to_string(),
        "lambda": lambda,
        "n": data.n(),
        "d": data.d(),
        "iterations": res.iterations,
        "converged": res.converged,
        "objective": res.objective,
        "active": res.active_set.len(),
        "selected": ts.m,
        "sigma_hat": ts.sigma_hat,
    });
    run.write("coefficients.tsv", &coef)?;
    run.write("incidental.tsv", &mu)?;
    run.write("summary.json", &json_summary("fit", &run.config, &summary)?)?;
    Ok(format!(
        "lambda = {lambda}, {} of {} rows flagged, converged = {}\n{coef}",
        res.active_set.len(),
        data.n(),
        res.converged
    ))
}

fn cmd_experiment(args: &ExperimentArgs, run: &mut Run) -> Result<String, Error> {
    let text = fs::read_to_string(&args.config)?;
    let mut file: ExperimentFile = parse_experiment_file(&text)?;
    if let Some(seed) = args.seed {
        file.experiment.seed = seed;
    }
    if let Some(reps) = args.reps {
        file.experiment.reps = reps;
        file.experiment.validate()?;
    }
    run.seed = Some(file.experiment.seed);
    run.config = serde_json::to_value(&file).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = &file.experiment;
    let suite = args.suite.name();
    let fixed = |setting: Option<incidental::io::FixedLambda>| {
        setting
            .map(|s| s.lambda)
            .ok_or_else(|| Error::Config(format!("the {suite} suite needs a [{suite}] section with `lambda`")))
    };
    match args.suite {
        Suite::Rmse => {
            let report = rmse_experiment(cfg)?;
            run.write("rmse.tsv", &rmse_tsv(&report))?;
            run.write("summary.json", &json_summary(suite, &file, &report)?)?;
            let mut msg = String::from("method\tlambda\trmse\n");
            for m in &report.methods {
                let p = m.best_point();
                msg.push_str(&format!(
                    "{}\t{}\t{:.4}\n",
                    m.method.label(),
                    p.lambda.map_or("-".into(), |l| format!("{l:.3}")),
                    p.rmse()
                ));
            }
            Ok(msg)
        }
        Suite::Coverage => {
            let report = coverage_experiment(cfg, file.coverage.alpha, &file.coverage.cells)?;
            run.write("coverage.tsv", &coverage_tsv(&report))?;
            run.write("summary.json", &json_summary(suite, &file, &report)?)?;
            Ok(report
                .cells
                .iter()
                .map(|c| format!("p1 = {}, p2 = {}: coverage {:?}\n", c.p1, c.p2, c.coverage))
                .collect())
        }
        Suite::Qq => {
            let report = qq_experiment(cfg, fixed(file.qq)?)?;
            let mut msg = String::new();
            for s in &report.series {
                run.write(&format!("qq_{}_{}.tsv", s.estimator, s.component + 1), &qq_tsv(s))?;
                msg.push_str(&format!(
                    "{} beta{}: KS {:.4} (p = {:.4})\n",
                    s.estimator,
                    s.component + 1,
                    s.ks.statistic,
                    s.ks.p_value
                ));
            }
            run.write("summary.json", &json_summary(suite, &file, &report)?)?;
            Ok(msg)
        }
        Suite::Selection => {
            let report = selection_experiment(cfg, fixed(file.selection)?)?;
            run.write("summary.json", &json_summary(suite, &file, &report)?)?;
            Ok(format!(
                "selection frequency {:.4} (se {:.4})\n",
                report.frequency, report.std_error
            ))
        }
    }
}

fn cmd_select(args: &SelectArgs, run: &mut Run) -> Result<String, Error> {
    let table = load(&args.data.input)?;
    let proc = procedure(args.data.seed);
    run.seed = Some(args.data.seed);
    run.config = json!({
        "input": args.data.input.display().to_string(),
        "penalty": args.data.penalty.to_string(),
        "procedure": proc,
    });
    match args.data.rule {
        Rule::Ci => {
            let lambda = ci_lambda(&table.data, &proc)?;
            if run.out.is_some() {
                run.write(
                    "summary.json",
                    &json_summary("select-lambda", &run.config, &json!({ "lambda": lambda }))?,
                )?;
            }
            Ok(format!("{lambda}\n"))
        }
        Rule::Grid => {
            let sel = data_driven_lambda(&table.data, args.data.penalty, &proc, &SolverConfig::default())?;
            if run.out.is_some() {
                let mut curve = String::from("lambda\ttest_loss\n");
                for (l, loss) in &sel.test_loss_curve {
                    curve.push_str(&format!("{l}\t{loss}\n"));
                }
                run.write("lambda_curve.tsv", &curve)?;
                let report = json!({
                    "lambda": sel.lambda_opt,
                    "lambda_low": sel.lambda_low,
                    "lambda_high": sel.lambda_high,
                    "low_clamped": sel.low_clamped,
                });
                run.write("summary.json", &json_summary("select-lambda", &run.config, &report)?)?;
            }
            Ok(format!("{}\n", sel.lambda_opt))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }

    let start = Instant::now();
    let (name, out) = match &cli.command {
        Command::Fit(a) => ("fit", Some(a.out.clone())),
        Command::Experiment(a) => ("experiment", Some(a.out.clone())),
        Command::SelectLambda(a) => ("select-lambda", a.out.clone()),
    };
    let mut run = Run::new(out);
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a, &mut run),
        Command::Experiment(a) => cmd_experiment(a, &mut run),
        Command::SelectLambda(a) => cmd_select(a, &mut run),
    };

    let code = match &result {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e)
        }
    };
    if let Some(dir) = run.out.clone() {
        let record = CliRunRecord {
            command: match &cli.command {
                Command::Experiment(a) => format!("{name} {}", a.suite.name()),
                _ => name.to_string(),
            },
            config: run.config.clone(),
            seed: run.seed,
            artifacts: run.artifacts.clone(),
            wall_time_secs: start.elapsed().as_secs_f64(),
            status: if code == 0 { "ok" } else { "error" },
            error: result.as_ref().err().map(ToString::to_string),
        };
        let written = fs::create_dir_all(&dir).and_then(|_| {
            fs::write(
                dir.join("run.json"),
                serde_json::to_string_pretty(&record).unwrap_or_default() + "\n",
            )
        });
        if let Err(e) = written {
            eprintln!("error: could not write run record: {e}");
            if code == 0 {
                return ExitCode::from(EXIT_USAGE);
            }
        }
    }
    ExitCode::from(code)
}
