//! Command-line front end: single runs, parameter sweeps, networked
//! cloud/edge processes, the gradient-inversion demo, and IDX inspection.

use std::io::Write;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use afdp::engine::{self, Algorithm, DelayModel, RunConfig};
use afdp::experiment::{self, ConvergenceRule, ExperimentPlan, SweepVariable};
use afdp::idx;
use afdp::models::{self, Dataset, ModelKind, ModelSpec, Sample};
use afdp::net;
use afdp::{AfdpError, Result};

#[derive(Parser)]
#[command(name = "afdp", about = "Asynchronous federated optimization with differential privacy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training simulation and write its iteration log as CSV.
    Run(RunArgs),
    /// Run a sweep plan over algorithms, one variable, and seeds.
    Plan(PlanArgs),
    /// Start the cloud server for a networked run.
    Serve(ServeArgs),
    /// Start one edge worker and join a networked run.
    Edge(EdgeArgs),
    /// Demonstrate single-sample recovery from unprotected gradients.
    Invert(InvertArgs),
    /// Print the header of an IDX file.
    IdxInfo(IdxInfoArgs),
}

/// Flags shared by everything that needs a model, dataset, and run config.
#[derive(Args, Clone)]
struct CommonArgs {
    /// Training algorithm: csgd, asgd, audp, or mapa.
    #[arg(long, default_value = "audp")]
    algo: String,
    /// Objective: logistic, svm, or quadratic.
    #[arg(long, default_value = "logistic")]
    model: String,
    /// Dataset: quadratic, gauss, mnist, or mnist2 (two-class 0-vs-1).
    #[arg(long, default_value = "gauss")]
    dataset: String,
    /// Per-edge privacy budget; repeat for per-edge values.
    #[arg(long, default_value = "0.1")]
    epsilon: Vec<f64>,
    /// Privacy failure probability.
    #[arg(long, default_value_t = 1e-3)]
    delta: f64,
    /// Per-stage sensitivity reduction ratio (mapa).
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    /// Mini-batch size.
    #[arg(long, default_value_t = 12)]
    batch: usize,
    /// Number of edges.
    #[arg(long, default_value_t = 5)]
    edges: usize,
    /// Staleness bound.
    #[arg(long, default_value_t = 5)]
    tau_max: u64,
    /// Delay model: cyclic or uniform.
    #[arg(long, default_value = "cyclic")]
    delay_model: String,
    /// Number of global updates.
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    /// Per-sample gradient noise level sigma.
    #[arg(long, default_value_t = 30.0)]
    sigma: f64,
    /// Gradient smoothness constant L (doubles as the quadratic's condition
    /// number).
    #[arg(long, default_value_t = 10.0)]
    lipschitz: f64,
    /// Upper bound G on per-sample gradient norms.
    #[arg(long, default_value_t = 10.0)]
    g_bound: f64,
    /// Radius R of the iterate region (non-private rate schedules).
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    /// Initial optimality gap estimate (mapa); defaults to the initial loss.
    #[arg(long)]
    f_gap: Option<f64>,
    /// Override of the starting sensitivity.
    #[arg(long)]
    sensitivity: Option<f64>,
    /// RNG seed.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Feature dimension for synthetic datasets.
    #[arg(long, default_value_t = 20)]
    dim: usize,
    /// Sample count for synthetic datasets.
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// Evaluate metrics every this many iterations (0: first and last only).
    #[arg(long, default_value_t = 1)]
    eval_stride: u64,
    /// L2 regularization strength.
    #[arg(long, default_value_t = 1e-4)]
    reg_lambda: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Algorithms to sweep, comma separated.
    #[arg(long, default_value = "audp,mapa")]
    algos: String,
    /// Variable to sweep: epsilon, edges, batch, sigma, smoothness, delta,
    /// theta.
    #[arg(long, default_value = "epsilon")]
    sweep: String,
    /// Sweep values, comma separated.
    #[arg(long, default_value = "0.1,0.2,0.5")]
    values: String,
    /// Seeds, comma separated.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    /// Convergence window length.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Convergence loss threshold (derived from a reference run if absent).
    #[arg(long)]
    threshold: Option<f64>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional JSON results path.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:4810")]
    listen: String,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EdgeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Cloud address to connect to.
    #[arg(long, default_value = "127.0.0.1:4810")]
    connect: String,
    /// This edge's id, in 0..edges.
    #[arg(long)]
    edge_id: usize,
    /// Artificial think time per gradient, in milliseconds.
    #[arg(long)]
    inject_delay_ms: Option<u64>,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of independent recovery trials.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IdxInfoArgs {
    /// IDX file to inspect.
    path: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Serve(args) => cmd_serve(args),
        Command::Edge(args) => cmd_edge(args),
        Command::Invert(args) => cmd_invert(args),
        Command::IdxInfo(args) => cmd_idx_info(args),
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os("AFL_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data"))
}

/// Materialize (model spec, train dataset, test samples) from the flags.
fn build_problem(args: &CommonArgs) -> Result<(ModelSpec, Dataset, Option<Vec<Sample>>)> {
    let kind = match args.model.as_str() {
        "logistic" => ModelKind::Logistic,
        "svm" => ModelKind::Svm,
        "quadratic" => ModelKind::Quadratic,
        other => return Err(AfdpError::InvalidConfig(format!("unknown model '{other}'"))),
    };
    match args.dataset.as_str() {
        "quadratic" => {
            if kind != ModelKind::Quadratic {
                return Err(AfdpError::InvalidConfig(
                    "the quadratic dataset requires --model quadratic".into(),
                ));
            }
            let (mut spec, ds) = models::make_quadratic(args.dim, args.lipschitz, args.sigma)?;
            spec.grad_bound_g = args.g_bound;
            spec.radius_r = args.radius;
            Ok((spec, ds, None))
        }
        "gauss" => {
            let mut rng = ChaCha12Rng::seed_from_u64(args.seed ^ 0x5eed_da7a);
            let train = models::make_gauss2(args.dim, args.samples, 2.0, &mut rng);
            let test = models::make_gauss2(args.dim, args.samples / 4 + 1, 2.0, &mut rng);
            let spec = classifier_spec(kind, args.dim, 2, args)?;
            Ok((spec, Dataset::InMemory(train), Some(test)))
        }
        "mnist" | "mnist2" => {
            let dir = data_dir();
            let keep: Option<&[u8]> = if args.dataset == "mnist2" { Some(&[0, 1]) } else { None };
            let train = idx::load_split(&dir, "train", keep)?;
            let test = idx::load_split(&dir, "t10k", keep)?;
            let classes = if args.dataset == "mnist2" { 2 } else { 10 };
            let dim = train[0].features.len();
            let spec = classifier_spec(kind, dim, classes, args)?;
            Ok((spec, Dataset::InMemory(train), Some(test)))
        }
        other => Err(AfdpError::InvalidConfig(format!("unknown dataset '{other}'"))),
    }
}

fn classifier_spec(
    kind: ModelKind,
    dim: usize,
    classes: usize,
    args: &CommonArgs,
) -> Result<ModelSpec> {
    if kind == ModelKind::Quadratic {
        return Err(AfdpError::InvalidConfig(
            "the quadratic model requires --dataset quadratic".into(),
        ));
    }
    if kind == ModelKind::Logistic && classes != 2 {
        return Err(AfdpError::InvalidConfig(format!(
            "logistic regression is two-class; dataset has {classes}"
        )));
    }
    let spec = ModelSpec {
        kind,
        dim,
        num_classes: classes,
        reg_lambda: args.reg_lambda,
        smoothness_l: args.lipschitz,
        grad_bound_g: args.g_bound,
        sample_variance_sigma2: args.sigma * args.sigma,
        radius_r: args.radius,
        quad_spectrum: None,
    };
    spec.validate()?;
    Ok(spec)
}

fn build_config(args: &CommonArgs) -> Result<RunConfig> {
    let algorithm: Algorithm = args.algo.parse()?;
    let delay = match args.delay_model.as_str() {
        "cyclic" => DelayModel::Cyclic,
        "uniform" | "uniform_random" => DelayModel::UniformRandom,
        other => return Err(AfdpError::InvalidConfig(format!("unknown delay model '{other}'"))),
    };
    Ok(RunConfig {
        algorithm,
        edges: args.edges,
        tau_max: args.tau_max,
        delay,
        batch: args.batch,
        epsilons: args.epsilon.clone(),
        delta: args.delta,
        theta: args.theta,
        iters: args.iters,
        seed: args.seed,
        eval_stride: args.eval_stride,
        f_gap: args.f_gap,
        sensitivity: args.sensitivity,
        initial_model: None,
    })
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (spec, dataset, test) = build_problem(&args.common)?;
    let config = build_config(&args.common)?;
    let record = engine::run(&config, &spec, &dataset, test.as_deref())?;
    engine::write_csv(&record, open_out(&args.out)?)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| AfdpError::InvalidConfig(format!("bad {what} value '{p}'")))
        })
        .collect()
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let (spec, dataset, test) = build_problem(&args.common)?;
    let base = build_config(&args.common)?;
    let plan = ExperimentPlan {
        algorithms: args
            .algos
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Algorithm>>>()?,
        sweep: args.sweep.parse::<SweepVariable>()?,
        values: parse_list(&args.values, "sweep")?,
        seeds: parse_list(&args.seeds, "seed")?,
        base,
        convergence: ConvergenceRule { window: args.window, threshold: args.threshold },
    };
    let results = experiment::run_plan(&plan, &spec, &dataset, test.as_deref())?;
    experiment::write_plan_csv(&results, open_out(&args.out)?)?;
    if let Some(p) = &args.json_out {
        std::fs::write(p, serde_json::to_vec_pretty(&results)?)?;
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let (spec, dataset, test) = build_problem(&args.common)?;
    let config = build_config(&args.common)?;
    eprintln!("cloud listening on {} for {} edge(s)", args.listen, config.edges);
    let record = net::serve_cloud(args.listen.as_str(), &config, &spec, &dataset, test.as_deref())?;
    engine::write_csv(&record, open_out(&args.out)?)?;
    if record.meta.assumption_violated {
        eprintln!(
            "warning: observed staleness {} exceeded the configured bound",
            record.meta.tau_max_observed
        );
    }
    Ok(())
}

fn cmd_edge(args: EdgeArgs) -> Result<()> {
    let (spec, dataset, _) = build_problem(&args.common)?;
    let config = build_config(&args.common)?;
    let produced = net::run_edge(
        args.connect.as_str(),
        args.edge_id,
        &config,
        &spec,
        &dataset,
        args.inject_delay_ms.map(Duration::from_millis),
    )?;
    eprintln!("edge {} sent {produced} gradient(s)", args.edge_id);
    Ok(())
}

/// Recover per-sample feature directions from batch-size-1 logistic
/// gradients, with and without privacy noise, and report the cosine between
/// the truth and the reconstruction.
fn cmd_invert(args: InvertArgs) -> Result<()> {
    use afdp::dp::{self, PrivacySpec};
    use afdp::vecmath;
    use rand::Rng;

    let common = &args.common;
    let epsilon = common.epsilon[0];
    // Use real image samples when available, synthetic nonnegative feature
    // vectors otherwise.
    let samples: Vec<Sample> = match idx::load_split(&data_dir(), "train", Some(&[0, 1])) {
        Ok(s) => s,
        Err(_) => {
            let mut rng = ChaCha12Rng::seed_from_u64(common.seed);
            (0..args.trials.max(1))
                .map(|i| Sample {
                    features: (0..common.dim)
                        .map(|_| rng.random_range(0.0..1.0))
                        .collect(),
                    label: i % 2,
                })
                .collect()
        }
    };
    let dim = samples[0].features.len();
    let spec = classifier_spec(ModelKind::Logistic, dim, 2, common)?;
    let sensitivity = match common.sensitivity {
        Some(s) => s,
        None => dp::initial_sensitivity(common.sigma, 1, common.delta)?,
    };

    let mut rng = ChaCha12Rng::seed_from_u64(common.seed ^ 0x7e57);
    let mut w = Vec::new();
    let mut out = open_out(&args.out)?;
    writeln!(out, "trial,epsilon,cosine_clean,cosine_noisy")?;
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for trial in 0..args.trials {
        w.clear();
        w.extend((0..dim).map(|_| rng.random_range(-0.5..0.5)));
        let sample = &samples[trial % samples.len()];
        let g = models::gradient(&spec, &w, std::slice::from_ref(sample))?;
        let rec = experiment::invert_gradient(&w, &g, spec.reg_lambda)?;
        let c_clean = experiment::cosine(&rec, &sample.features)?;

        let noise_spec = PrivacySpec::new(epsilon, 0.5, sensitivity)?;
        let eta = dp::sample_noise(&noise_spec, dim, &mut rng)?;
        let mut g_noisy = g.clone();
        vecmath::axpy(1.0, &eta.vector, &mut g_noisy);
        let rec_noisy = experiment::invert_gradient(&w, &g_noisy, spec.reg_lambda)?;
        let c_noisy = experiment::cosine(&rec_noisy, &sample.features)?;
        writeln!(out, "{trial},{epsilon},{c_clean},{c_noisy}")?;
        clean.push(c_clean);
        noisy.push(c_noisy);
    }
    eprintln!(
        "median cosine: clean {:.6}, noisy {:.6} (epsilon {epsilon}, sensitivity {sensitivity:.3})",
        experiment::median(&clean).unwrap_or(f64::NAN),
        experiment::median(&noisy).unwrap_or(f64::NAN),
    );
    Ok(())
}

fn cmd_idx_info(args: IdxInfoArgs) -> Result<()> {
    let mut f = std::io::BufReader::new(std::fs::File::open(&args.path)?);
    let header = idx::read_header(&mut f)?;
    let kind = match header.magic {
        idx::MAGIC_IMAGES => "images (rank-3 u8)",
        idx::MAGIC_LABELS => "labels (rank-1 u8)",
        _ => "u8 tensor",
    };
    println!("file: {}", args.path.display());
    println!("magic: 0x{:08x} ({kind})", header.magic);
    println!(
        "dims: {}",
        header.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" x ")
    );
    println!("elements: {}", header.dims.iter().map(|&d| d as u64).product::<u64>());
    Ok(())
}
