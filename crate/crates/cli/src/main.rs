//! `chebds` command-line front end.
//!
//! Every command reads an optional JSON config (`--config`); explicit flags win.
//! Exit codes: 0 success, 2 bad input, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use chebds::demo::{self, Demonstration};
use chebds::diffeo::{DiffeoModel, WidthPolicy};
use chebds::dynamics::RolloutTrace;
use chebds::eval::{self, GridSpec};
use chebds::pipeline::{self, DemoSource, GeneratorKind, GeneratorSpec, PipelineConfig};
use chebds::spectral::{self, GraphSpec};
use chebds::Error;

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "chebds",
    version,
    about = "Learn a stable dynamical system from one demonstration"
)]
struct Cli {
    /// JSON pipeline config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs that are not given an explicit path.
    #[arg(long, global = true, env = "CHEBDS_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads for batch rollouts and grid search.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an analytic demonstration as CSV.
    Generate(GenerateArgs),
    /// Write the latent coordinates (and optionally the dense Laplacian).
    Embed(EmbedArgs),
    /// Fit the latent-to-demonstration map.
    Fit(FitArgs),
    /// Roll out a fitted model from one or many starts.
    Rollout(RolloutArgs),
    /// Score a trace against a demonstration with FastDTW.
    Eval(EvalArgs),
    /// Grid search over (mu, beta, layers).
    Tune(TuneArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// unstable-spiral, stable-spiral or archimedean.
    kind: String,
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Demonstration CSV (falls back to the config's demo source).
    #[arg(long)]
    demo: Option<PathBuf>,
    /// Resample the demonstration to this many points first.
    #[arg(long)]
    resample: Option<usize>,
    /// Number of path copies in the graph (default: dimension + 1).
    #[arg(long)]
    copies: Option<usize>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    demo: DemoArgs,
    /// Map the latent points affinely onto the demonstration's endpoints.
    #[arg(long)]
    aligned: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the dense graph Laplacian (small graphs only).
    #[arg(long)]
    laplacian: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitParamArgs {
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Maximum number of layers.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    mse_stop: Option<f64>,
    /// `line-search` or `residual:<factor>`.
    #[arg(long)]
    width: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    demo: DemoArgs,
    #[command(flatten)]
    params: FitParamArgs,
    /// Model JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fit report JSON path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated start point (default: the model's image of the latent start).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    start: Option<Vec<f64>>,
    /// Use the first point of this demonstration as the start.
    #[arg(long, conflicts_with = "start")]
    from_demo: Option<PathBuf>,
    /// `RADIUS COUNT [SEED]`: random starts in a ball around the start.
    #[arg(long, num_args = 2..=3, value_names = ["RADIUS", "COUNT", "SEED"])]
    perturb: Option<Vec<String>>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    rate: Option<f64>,
    /// Output directory for traces and the summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    demo: PathBuf,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    demo: DemoArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    mus: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    layers: Vec<usize>,
    #[arg(long, default_value_t = chebds::diffeo::DEFAULT_MSE_STOP)]
    threshold: f64,
    #[arg(long)]
    width: Option<String>,
    /// Directory for the report and heat maps.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Input(String),
    Numerical(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("numerical error: {msg}");
            ExitCode::from(EXIT_NUMERICAL)
        }
    }
}

/// Global settings after merging the config file with flags.
struct Context {
    config: PipelineConfig,
    out_dir: PathBuf,
}

impl Context {
    fn output(&self, explicit: Option<PathBuf>, default_name: &str) -> CliResult<PathBuf> {
        let path = explicit.unwrap_or_else(|| self.out_dir.join(default_name));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        Ok(path)
    }

    fn load_demo(&mut self, args: &DemoArgs) -> CliResult<Demonstration> {
        if let Some(path) = &args.demo {
            self.config.demo = Some(DemoSource::Csv(path.clone()));
        }
        if args.resample.is_some() {
            self.config.resample = args.resample;
        }
        if args.copies.is_some() {
            self.config.n_copies = args.copies;
        }
        Ok(self.config.load_demo()?)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<PipelineConfig>(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Input(e.to_string()))?;
    }
    let mut ctx = Context { config, out_dir };
    match cli.command {
        Command::Generate(args) => cmd_generate(&ctx, args),
        Command::Embed(args) => cmd_embed(&mut ctx, args),
        Command::Fit(args) => cmd_fit(&mut ctx, args),
        Command::Rollout(args) => cmd_rollout(&ctx, args),
        Command::Eval(args) => cmd_eval(&ctx, args),
        Command::Tune(args) => cmd_tune(&mut ctx, args),
    }
}

fn parse_width(text: &str) -> CliResult<WidthPolicy> {
    if text == "line-search" {
        return Ok(WidthPolicy::LineSearch);
    }
    if let Some(factor) = text.strip_prefix("residual:") {
        let factor = factor
            .parse::<f64>()
            .map_err(|_| CliError::Input(format!("bad width factor '{factor}'")))?;
        return Ok(WidthPolicy::ResidualProportional { factor });
    }
    Err(CliError::Input(format!("unknown width policy '{text}'")))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_generate(ctx: &Context, args: GenerateArgs) -> CliResult<()> {
    let kind: GeneratorKind = args.kind.parse()?;
    let spec = GeneratorSpec {
        kind,
        c: args.c.unwrap_or(1.0),
        n: args.n.unwrap_or(500),
    };
    let demo = spec.generate()?;
    let path = ctx.output(args.out, &format!("{}.csv", demo.label))?;
    demo::save_csv(&demo, &path)?;
    println!(
        "N={} n={} label={} -> {}",
        demo.n_points(),
        demo.n_dims(),
        demo.label,
        path.display()
    );
    Ok(())
}

fn cmd_embed(ctx: &mut Context, args: EmbedArgs) -> CliResult<()> {
    let demo = ctx.load_demo(&args.demo)?;
    let embedding = pipeline::embed(demo.n_points(), demo.n_dims(), ctx.config.n_copies)?;
    let points = if args.aligned {
        embedding.align_to_demo(&demo)?
    } else {
        embedding.points.clone()
    };
    let latent = Demonstration::new(points, format!("latent-{}", demo.label))?;
    let path = ctx.output(args.out, "latent.csv")?;
    demo::save_csv(&latent, &path)?;
    let k = embedding.selection.n_copies;
    println!(
        "N={} n={} K={} eigenvalues={:?} bound={:?} -> {}",
        embedding.n_points(),
        embedding.n_dims(),
        k,
        embedding.selection.eigenvalues,
        embedding.selection.bound,
        path.display()
    );
    if let Some(lap_path) = args.laplacian {
        let spec = GraphSpec::new(demo.n_points(), demo.n_dims(), k)?;
        let lap = spectral::dense_laplacian(&spec)?;
        let file = fs::File::create(&lap_path)?;
        spectral::write_matrix_csv(&lap, std::io::BufWriter::new(file))?;
    }
    Ok(())
}

fn cmd_fit(ctx: &mut Context, args: FitArgs) -> CliResult<()> {
    let demo = ctx.load_demo(&args.demo)?;
    let p = &args.params;
    let fit = &mut ctx.config.fit;
    if let Some(mu) = p.mu {
        fit.mu = mu;
    }
    if let Some(beta) = p.beta {
        fit.beta = beta;
    }
    if let Some(layers) = p.layers {
        fit.max_layers = layers;
    }
    if let Some(stop) = p.mse_stop {
        fit.mse_stop = stop;
    }
    if let Some(w) = &p.width {
        fit.width = parse_width(w)?;
    }
    let params = *fit;
    let outcome = pipeline::fit_demo(&demo, ctx.config.n_copies, &params)?;
    let model_path = ctx.output(args.out, "model.json")?;
    outcome.model.save(&model_path)?;
    let report = json!({
        "label": demo.label,
        "n_points": demo.n_points(),
        "n_dims": demo.n_dims(),
        "n_copies": outcome.embedding.selection.n_copies,
        "eigenvalues": outcome.embedding.selection.eigenvalues,
        "params": params,
        "layers": outcome.model.layers.len(),
        "normalized_mse": outcome.model.normalized_mse,
        "layer_mse": outcome.model.layer_mse,
    });
    let report_path = ctx.output(args.report, "fit_report.json")?;
    write_json(&report_path, &report)?;
    println!(
        "layers={} normalized_mse={:e} -> {}",
        outcome.model.layers.len(),
        outcome.model.normalized_mse,
        model_path.display()
    );
    Ok(())
}

fn cmd_rollout(ctx: &Context, args: RolloutArgs) -> CliResult<()> {
    let model = DiffeoModel::load(&args.model).map_err(|e| match CliError::from(e) {
        CliError::Input(msg) => CliError::Input(format!("{}: {msg}", args.model.display())),
        other => other,
    })?;
    let mut rc = ctx.config.rollout;
    if let Some(dt) = args.dt {
        rc.dt = dt;
    }
    if args.t_max.is_some() {
        rc.t_max = args.t_max;
    }
    if let Some(eps) = args.eps {
        rc.eps = eps;
    }
    if let Some(rate) = args.rate {
        rc.rate = rate;
    }
    let settings = rc.settings();
    let center = match (&args.start, &args.from_demo) {
        (Some(s), _) => s.clone(),
        (None, Some(path)) => demo::load_csv(path)?.start(),
        (None, None) => model.forward(&model.meta.latent_start),
    };
    if center.len() != model.n_dims() {
        return Err(CliError::Input(format!(
            "start has {} coordinates, model has {} dimensions",
            center.len(),
            model.n_dims()
        )));
    }
    let starts = match &args.perturb {
        None => vec![center.clone()],
        Some(values) => {
            let radius: f64 = values[0]
                .parse()
                .map_err(|_| CliError::Input(format!("bad radius '{}'", values[0])))?;
            let count: usize = values[1]
                .parse()
                .map_err(|_| CliError::Input(format!("bad count '{}'", values[1])))?;
            let seed: u64 = match values.get(2) {
                Some(s) => s.parse().map_err(|_| CliError::Input(format!("bad seed '{s}'")))?,
                None => ctx.config.seed,
            };
            demo::perturb_starts(&center, radius, count, seed)?
        }
    };
    let traces: Vec<chebds::Result<RolloutTrace>> = starts
        .par_iter()
        .map(|y0| pipeline::rollout_from(&model, rc.rate, y0, &settings))
        .collect();
    let out_dir = ctx.output(args.out, "rollout")?;
    fs::create_dir_all(&out_dir)?;
    let single = starts.len() == 1 && args.perturb.is_none();
    let mut entries = Vec::with_capacity(traces.len());
    let mut converged = 0;
    for (i, (y0, trace)) in starts.iter().zip(traces).enumerate() {
        let trace = trace?;
        let name = if single {
            "trace.csv".to_string()
        } else {
            format!("trace_{i:03}.csv")
        };
        trace.save_csv(out_dir.join(&name))?;
        let summary = trace.summary();
        converged += usize::from(summary.converged);
        entries.push(json!({
            "trace": name,
            "start": y0,
            "converged": summary.converged,
            "final_distance": summary.final_distance,
            "steps": summary.steps,
        }));
    }
    let total = entries.len();
    let summary = json!({
        "settings": settings,
        "rate": rc.rate,
        "all_converged": converged == total,
        "converged": converged,
        "rollouts": entries,
    });
    write_json(&out_dir.join("summary.json"), &summary)?;
    println!("{converged}/{total} rollouts converged -> {}", out_dir.display());
    Ok(())
}

fn cmd_eval(ctx: &Context, args: EvalArgs) -> CliResult<()> {
    let demo = demo::load_csv(&args.demo)?;
    let trace = demo::load_csv(&args.trace)?;
    let radius = args.radius.unwrap_or(ctx.config.dtw_radius);
    let score = eval::fast_dtw(&demo.rows(), &trace.rows(), radius)?;
    let value = json!({
        "demo": args.demo,
        "trace": args.trace,
        "score": score,
    });
    let text = serde_json::to_string_pretty(&value)?;
    println!("{text}");
    if let Some(path) = args.out {
        let path = ctx.output(Some(path), "")?;
        write_json(&path, &value)?;
    }
    Ok(())
}

fn cmd_tune(ctx: &mut Context, args: TuneArgs) -> CliResult<()> {
    let demo = ctx.load_demo(&args.demo)?;
    let embedding = pipeline::embed(demo.n_points(), demo.n_dims(), ctx.config.n_copies)?;
    let aligned = embedding.align_to_demo(&demo)?;
    let width = match &args.width {
        Some(w) => parse_width(w)?,
        None => ctx.config.fit.width,
    };
    let spec = GridSpec {
        mus: args.mus,
        betas: args.betas,
        layer_budgets: args.layers,
        threshold: args.threshold,
        width,
    };
    let report = eval::grid_search(&demo.points, &aligned, &spec)?;
    let dir = ctx.output(args.out, "tune")?;
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("tuning_report.json"), &serde_json::to_value(&report)?)?;
    for (m, table) in report.heat_maps() {
        fs::write(dir.join(format!("heatmap_M{m}.csv")), table)?;
    }
    let cell = report.selected_cell();
    println!(
        "selected mu={:?} beta={:?} M={} mse={:?} rule={:?} -> {}",
        cell.mu,
        cell.beta,
        cell.layers,
        cell.mse,
        report.selection_rule,
        dir.display()
    );
    Ok(())
}
