//! Command-line entry point.
//!
//! Exit status is 0 on success, 1 for invalid arguments or input content and
//! 2 for filesystem errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calibration::{fit_temperature, LogitSequence, DEFAULT_ECE_BINS};
use crate::error::{Error, Result};
use crate::inference::{self, Boundary, BoundaryPolicy, BoundaryStrength, CostModel, LikelihoodSequence};
use crate::io;
use crate::metrics::{render_table, EvalReport, Metrics, SequenceMetrics};
use crate::simulator::{simulate_walk, WalkConfig, DEFAULT_DWELL, DEFAULT_NOISE};
use crate::tree::{AirwayTree, PHANTOM_TREE_NAME};
use crate::tuning::{self, Grid, Method, TuningProblem, DEFAULT_LAMBDA};

pub const TREE_ENV: &str = "BRONCHONAV_TREE";

#[derive(Debug, Parser)]
#[command(name = "bronchonav", version, about = "Topological airway localization from per-frame likelihoods")]
struct Cli {
    /// Airway tree document; `phantom_tree` selects the built-in tree.
    #[arg(long, global = true, env = TREE_ENV)]
    tree: Option<PathBuf>,

    /// Seed for simulated walks.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for output files.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a softmax temperature on labelled logits.
    Calibrate {
        #[arg(long)]
        logits: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ECE_BINS)]
        bins: usize,
    },
    /// MAP label path of a likelihood sequence.
    Decode(DecodeArgs),
    /// Two-pass min-sum marginals of a likelihood sequence.
    Marginals {
        #[command(flatten)]
        decode: DecodeArgs,
        /// Also write sum-product posteriors.
        #[arg(long)]
        exact: bool,
    },
    /// Fit the regularization weight on a set of sequences.
    TuneLambda {
        #[arg(long)]
        sequences: PathBuf,
        #[arg(long, default_value_t = tuning::DEFAULT_GRID.lo)]
        lo: f64,
        #[arg(long, default_value_t = tuning::DEFAULT_GRID.hi)]
        hi: f64,
        #[arg(long, default_value_t = tuning::DEFAULT_GRID.samples)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        /// Starting lambda for gradient descent.
        #[arg(long, default_value_t = 1.0)]
        init: f64,
        #[command(flatten)]
        boundary: BoundaryArgs,
    },
    /// Metric table for predicted paths against ground truth.
    Evaluate {
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true)]
        truth: Vec<PathBuf>,
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
    },
    /// Simulate a walk with noisy likelihoods.
    Simulate {
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = DEFAULT_DWELL)]
        dwell: f64,
        #[arg(long, default_value_t = DEFAULT_NOISE)]
        noise: f64,
        #[arg(long)]
        no_return: bool,
    },
    /// Print the hop-distance matrix of the tree.
    Distances,
}

#[derive(Debug, Args)]
struct DecodeArgs {
    #[arg(long)]
    likelihoods: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Write frame x label cost matrices in depth-first label order.
    #[arg(long)]
    emit_costs: bool,
    #[command(flatten)]
    boundary: BoundaryArgs,
}

#[derive(Debug, Args)]
struct BoundaryArgs {
    #[arg(long, value_enum, default_value_t = BoundaryArg::BothEnds)]
    boundary: BoundaryArg,
    /// Pin boundary frames to the root instead of the soft one-hot data row.
    #[arg(long)]
    hard_boundary: bool,
}

impl BoundaryArgs {
    fn boundary(&self) -> Boundary {
        Boundary {
            policy: match self.boundary {
                BoundaryArg::BothEnds => BoundaryPolicy::BothEnds,
                BoundaryArg::StartOnly => BoundaryPolicy::StartOnly,
                BoundaryArg::None => BoundaryPolicy::None,
            },
            strength: if self.hard_boundary {
                BoundaryStrength::Hard
            } else {
                BoundaryStrength::Soft
            },
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BoundaryArg {
    BothEnds,
    StartOnly,
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Grid,
    Gd,
    Both,
}

struct Context<'a> {
    tree: Option<PathBuf>,
    seed: u64,
    out_dir: Option<PathBuf>,
    stdout: &'a mut dyn Write,
}

impl Context<'_> {
    fn tree(&self) -> Result<AirwayTree> {
        AirwayTree::load(self.tree.as_deref().unwrap_or(Path::new(PHANTOM_TREE_NAME)))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.as_deref().unwrap_or(Path::new(".")).join(name)
    }

    fn say(&mut self, text: &str) -> Result<()> {
        self.stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))
    }
}

/// Runs the CLI on `args` (including the program name), writing human output
/// to `stdout` and diagnostics to stderr. Returns the exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut ctx = Context {
        tree: cli.tree,
        seed: cli.seed,
        out_dir: cli.out_dir,
        stdout,
    };
    match execute(cli.command, &mut ctx) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(command: Command, ctx: &mut Context<'_>) -> Result<()> {
    match command {
        Command::Calibrate { logits, labels, bins } => calibrate(ctx, &logits, &labels, bins),
        Command::Decode(args) => decode(ctx, &args, false),
        Command::Marginals { decode: args, exact } => decode(ctx, &args, exact).map(|_| ()),
        Command::TuneLambda {
            sequences,
            lo,
            hi,
            samples,
            method,
            init,
            boundary,
        } => tune_lambda(ctx, &sequences, Grid { lo, hi, samples }, method, init, boundary.boundary()),
        Command::Evaluate { pred, truth, scores } => evaluate(ctx, &pred, &truth, &scores),
        Command::Simulate {
            frames,
            dwell,
            noise,
            no_return,
        } => simulate(ctx, frames, dwell, noise, !no_return),
        Command::Distances => distances(ctx),
    }
}

fn calibrate(ctx: &mut Context<'_>, logits: &Path, labels: &Path, bins: usize) -> Result<()> {
    let tree = ctx.tree()?;
    let z = LogitSequence::new(io::read_matrix(logits, &tree)?)
        .map_err(|e| Error::parse(logits, e.to_string()))?;
    let y = io::read_labels(labels, &tree, &["label", "truth"])?;
    let report = fit_temperature(&z, &y, bins)?;
    io::write_toml(&ctx.out("calibration.toml"), &report)?;
    let p = z.scaled_probabilities(report.t_star);
    io::write_matrix(&ctx.out("calibrated.csv"), tree.labels(), &identity(tree.len()), &p)?;
    let msg = format!(
        "T* = {:.6}  NLL {:.6} -> {:.6}  ECE {:.6} -> {:.6}{}\n",
        report.t_star.value(),
        report.nll_before,
        report.nll_after,
        report.ece_before,
        report.ece_after,
        if report.flat { "  (flat logits)" } else { "" }
    );
    ctx.say(&msg)
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn decode(ctx: &mut Context<'_>, args: &DecodeArgs, exact: bool) -> Result<()> {
    let tree = ctx.tree()?;
    let p = LikelihoodSequence::new(io::read_matrix(&args.likelihoods, &tree)?)
        .map_err(|e| Error::parse(&args.likelihoods, e.to_string()))?;
    let truth = args
        .truth
        .as_deref()
        .map(|t| {
            let y = io::read_labels(t, &tree, &["label", "truth"])?;
            if y.len() != p.frames() {
                return Err(Error::Dimension(format!(
                    "{}: {} labels for {} frames",
                    t.display(),
                    y.len(),
                    p.frames()
                )));
            }
            Ok(y)
        })
        .transpose()?;
    let reg = tree.distance_matrix().regularization()?;
    let cost = CostModel::from_likelihoods(&p, &reg, args.lambda, tree.root(), args.boundary.boundary())?;
    let result = inference::decode(&cost);
    let labels = tree.labels();
    let order = identity(tree.len());

    io::write_path(&ctx.out("path.csv"), &tree, &result.path, truth.as_deref())?;
    io::write_matrix(&ctx.out("marginals.csv"), labels, &order, &result.marginals)?;
    if exact {
        let post = inference::exact_posteriors(&cost);
        io::write_matrix(&ctx.out("exact_posteriors.csv"), labels, &order, &post)?;
    }
    if args.emit_costs {
        let dfs = tree.depth_first_order();
        io::write_matrix(&ctx.out("costs.csv"), labels, &dfs, &result.combined)?;
        io::write_matrix(&ctx.out("data_costs.csv"), labels, &dfs, cost.data())?;
    }

    let mut msg = format!(
        "{} frames, lambda = {}, total cost = {}\n",
        p.frames(),
        args.lambda,
        io::format_f64(result.total_cost)
    );
    if let Some(truth) = &truth {
        let d = tree.distance_matrix();
        let frame = Metrics::compute(&p.frame_argmax(), truth, p.matrix(), &d)?;
        let viterbi = Metrics::compute(&result.path, truth, &result.marginals, &d)?;
        msg.push_str(&render_table(&[("0", "frame-based", frame), ("0", "viterbi", viterbi)]));
    }
    ctx.say(&msg)
}

fn tune_lambda(
    ctx: &mut Context<'_>,
    manifest_path: &Path,
    grid: Grid,
    method: MethodArg,
    init: f64,
    boundary: Boundary,
) -> Result<()> {
    let manifest = io::SequenceManifest::load(manifest_path)?;
    let tree = match (&ctx.tree, &manifest.tree) {
        (None, Some(t)) => AirwayTree::load(t)?,
        _ => ctx.tree()?,
    };
    let sequences = manifest
        .sequences
        .iter()
        .map(|e| {
            let truth = e.truth.as_deref().ok_or_else(|| {
                Error::parse(manifest_path, format!("sequence {:?} has no truth file", e.id))
            })?;
            let p = LikelihoodSequence::new(io::read_matrix(&e.likelihoods, &tree)?)
                .map_err(|err| Error::parse(&e.likelihoods, err.to_string()))?;
            Ok((p, io::read_labels(truth, &tree, &["label", "truth"])?))
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = TuningProblem::new(&tree, sequences, grid, boundary)?;
    let method = match method {
        MethodArg::Grid => Method::Grid,
        MethodArg::Gd => Method::Gd,
        MethodArg::Both => Method::Both,
    };
    let result = tuning::tune(&problem, method, init)?;
    io::write_toml(&ctx.out("tuning.toml"), &result)?;
    if !result.nll_curve.is_empty() {
        io::write_curve(&ctx.out("nll_curve.csv"), "nll", &result.nll_curve)?;
        io::write_curve(&ctx.out("acc_curve.csv"), "acc1", &result.acc_curve)?;
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_owned(), |v| format!("{v:.4}"));
    let msg = format!(
        "lambda_gd = {} ({} iterations)  lambda_bf = {}\n",
        fmt(result.lambda_gd),
        result.iterations,
        fmt(result.lambda_bf)
    );
    ctx.say(&msg)
}

fn evaluate(ctx: &mut Context<'_>, pred: &[PathBuf], truth: &[PathBuf], scores: &[PathBuf]) -> Result<()> {
    if pred.len() != truth.len() || pred.len() != scores.len() {
        return Err(Error::invalid(
            "--pred, --truth and --scores must be given the same number of times",
        ));
    }
    let tree = ctx.tree()?;
    let d = tree.distance_matrix();
    let per_sequence = pred
        .iter()
        .zip(truth)
        .zip(scores)
        .enumerate()
        .map(|(i, ((p, t), s))| {
            let pred = io::read_labels(p, &tree, &["predicted", "label"])?;
            let truth = io::read_labels(t, &tree, &["label", "truth"])?;
            let scores = io::read_matrix(s, &tree)?;
            let metrics = Metrics::compute(&pred, &truth, &scores, &d)
                .map_err(|e| Error::invalid(format!("sequence {i}: {e}")))?;
            Ok(SequenceMetrics {
                id: i.to_string(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::new(per_sequence)?;
    io::write_toml(&ctx.out("eval.toml"), &report)?;
    let mut rows: Vec<(&str, &str, Metrics)> = report
        .per_sequence
        .iter()
        .map(|s| (s.id.as_str(), "", s.metrics))
        .collect();
    rows.push(("average", "", report.average));
    let table = render_table(&rows);
    ctx.say(&table)
}

fn simulate(ctx: &mut Context<'_>, frames: usize, dwell: f64, noise: f64, return_to_root: bool) -> Result<()> {
    let tree = ctx.tree()?;
    let cfg = WalkConfig {
        frames,
        dwell,
        noise,
        seed: ctx.seed,
        return_to_root,
    };
    let sim = simulate_walk(&tree, &cfg)?;
    let order = identity(tree.len());
    io::write_labels(&ctx.out("truth.csv"), &tree, &sim.truth)?;
    io::write_matrix(&ctx.out("likelihoods.csv"), tree.labels(), &order, sim.likelihoods.matrix())?;
    io::write_matrix(&ctx.out("logits.csv"), tree.labels(), &order, sim.logits.matrix())?;
    let msg = format!("simulated {frames} frames (seed {})\n", ctx.seed);
    ctx.say(&msg)
}

fn distances(ctx: &mut Context<'_>) -> Result<()> {
    let tree = ctx.tree()?;
    let d = tree.distance_matrix();
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::invalid(e.to_string());
    let mut header = vec![String::new()];
    header.extend(tree.labels().iter().cloned());
    w.write_record(&header).map_err(to_err)?;
    for (i, label) in tree.labels().iter().enumerate() {
        let mut row = vec![label.clone()];
        row.extend(d.row(i).iter().map(u32::to_string));
        w.write_record(&row).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    if ctx.out_dir.is_some() {
        io::write_atomic(&ctx.out("distances.csv"), &bytes)?;
    }
    ctx.say(&String::from_utf8_lossy(&bytes))
}
