use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gastereo::complexity::{ratio_table, render_report, time_kernel, KernelKind};
use gastereo::gradcheck::{self, Fault};
use gastereo::head::{evaluate, Metrics};
use gastereo::io;
use gastereo::par;
use gastereo::pipeline::{match_pair, MatchOptions, Method, DEFAULT_P1, DEFAULT_P2};
use gastereo::trainer::{self, generate_scene, DisparityLayout, SceneConfig, TrainConfig};
use gastereo::{Error, Shape};

#[derive(Parser)]
#[command(
    name = "gastereo",
    version,
    about = "Stereo matching with semi-global and local guided aggregation"
)]
struct Cli {
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    serial: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate disparity for a rectified PGM pair and write a PFM map.
    Match(MatchArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Learn aggregation logits on a synthetic scene.
    Train(TrainArgs),
    /// Print the FLOP table and kernel timings.
    Bench(BenchArgs),
    /// Compare a predicted PFM map with ground truth.
    Eval(EvalArgs),
    /// Write a synthetic stereo pair and its ground truth.
    Synth(SynthArgs),
}

#[derive(Args)]
struct MatchArgs {
    left: PathBuf,
    right: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    dmax: usize,
    #[arg(long, default_value = "sgm")]
    method: Method,
    #[arg(long, default_value_t = DEFAULT_P1)]
    p1: f64,
    #[arg(long, default_value_t = DEFAULT_P2)]
    p2: f64,
    #[arg(long)]
    sga_layers: Option<usize>,
    #[arg(long)]
    lga: bool,
    /// Learned logits for the `ga` method.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Ground-truth PFM; prints metrics when given.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 3.0])]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    sga_layers: usize,
    #[arg(long)]
    lga: bool,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = trainer::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    band: usize,
    #[arg(long, default_value_t = trainer::SCENE_DMAX)]
    dmax: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Only print the FLOP table.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    pred: PathBuf,
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 3.0])]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving left.pgm, right.pgm and gt.pfm.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    band: usize,
    #[arg(long, default_value_t = trainer::SCENE_DMAX)]
    dmax: usize,
    /// One disparity everywhere instead of random stripes.
    #[arg(long)]
    shift: Option<usize>,
}

enum Failure {
    Module(Error),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Module(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io { .. } | Error::Parse { .. } | Error::Write(_) => 2,
        Error::Divergence { .. } => 4,
        Error::Dimension(_)
        | Error::Index { .. }
        | Error::Shape(_)
        | Error::Numeric(_)
        | Error::EmptyGroundTruth => 3,
    }
}

/// Files this invocation created, removed again if it fails.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), Error> {
        self.0.push(path.to_path_buf());
        io::write_file(path, bytes)
    }

    fn discard(&self) {
        for p in &self.0 {
            let _ = std::fs::remove_file(p);
        }
    }
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label}: epe {:.6} over {} pixels", m.epe, m.valid);
    for (t, r) in &m.rates {
        println!("  >{t} px: {:.4}%", r * 100.0);
    }
    let rates: String = m
        .rates
        .iter()
        .map(|(t, r)| format!(" rate_{t}={r:.9}"))
        .collect();
    println!("#METRIC {label} epe={:.9} valid={}{rates}", m.epe, m.valid);
}

fn run_match(a: &MatchArgs, out: &mut Outputs) -> Result<(), Failure> {
    let left = io::read_pgm(&a.left)?;
    let right = io::read_pgm(&a.right)?;
    let mut opts = MatchOptions::new(a.dmax, a.method);
    opts.p1 = a.p1;
    opts.p2 = a.p2;
    opts.use_lga = a.lga;
    if let Some(n) = a.sga_layers {
        opts.sga_layers = n;
    }
    if let Some(path) = &a.weights {
        if a.method != Method::Ga {
            return Err(Error::Config("--weights only applies to --method ga".into()).into());
        }
        let model = io::read_weights(path)?;
        if a.sga_layers.is_some_and(|n| n != model.sga.len()) || (a.lga && model.lga.is_none()) {
            return Err(Error::Config(format!(
                "{} holds {} SGA layers{}, which contradicts the flags",
                path.display(),
                model.sga.len(),
                if model.lga.is_some() { " and LGA" } else { "" }
            ))
            .into());
        }
        opts.model = Some(model);
    }
    let map = match_pair(&left, &right, &opts)?;
    let metrics = match &a.gt {
        Some(p) => Some(evaluate(&map, &io::read_pfm(p)?, &a.thresholds)?),
        None => None,
    };
    out.write(&a.out, &io::encode_pfm(&map)?)?;
    println!(
        "wrote {} ({}x{}, method {})",
        a.out.display(),
        map.width(),
        map.height(),
        a.method
    );
    if let Some(m) = metrics {
        print_metrics("match", &m);
    }
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<(), Failure> {
    let fault = if a.inject_fault {
        Fault::ScaleAnalytic
    } else {
        Fault::None
    };
    let reports = gradcheck::run_all(a.seeds, fault)?;
    let mut ok = true;
    for r in &reports {
        println!(
            "{:<12} {} checked {:>6} skipped {:>4} failures {:>4} max rel {:.3e} max abs {:.3e}",
            r.name,
            if r.passed() { "PASS" } else { "FAIL" },
            r.checked,
            r.skipped,
            r.failures,
            r.max_rel,
            r.max_abs
        );
        println!(
            "#METRIC gradcheck suite={} passed={} checked={} skipped={} failures={} max_rel={:.6e} max_abs={:.6e}",
            r.name,
            r.passed(),
            r.checked,
            r.skipped,
            r.failures,
            r.max_rel,
            r.max_abs
        );
        ok &= r.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Gradcheck)
    }
}

fn run_train(a: &TrainArgs, out: &mut Outputs) -> Result<(), Failure> {
    let mut scfg = SceneConfig::new(a.height, a.width, a.band, a.seed);
    scfg.d_max = a.dmax;
    let scene = generate_scene(&scfg)?;
    let cfg = TrainConfig {
        sga_layers: a.sga_layers,
        use_lga: a.lga,
        steps: a.steps,
        lr: a.lr,
        seed: a.seed,
    };
    let outcome = trainer::train(&scene, &cfg)?;
    for r in &outcome.history {
        println!("#METRIC train {r}");
    }
    out.write(&a.out, &io::encode_weights(&outcome.model)?)?;
    print_metrics("train", &outcome.metrics);
    println!("#METRIC train_ambiguous epe={:.9}", outcome.ambiguous_epe);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<(), Failure> {
    let rows = ratio_table()?;
    let mut timings = Vec::new();
    if !a.no_timing {
        let shape = Shape::new(64, 64, 32, 1);
        for kind in KernelKind::ALL {
            timings.push(time_kernel(kind, shape, a.reps)?);
        }
    }
    print!("{}", render_report(&rows, &timings)?);
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<(), Failure> {
    let pred = io::read_pfm(&a.pred)?;
    let gt = io::read_pfm(&a.gt)?;
    print_metrics("eval", &evaluate(&pred, &gt, &a.thresholds)?);
    Ok(())
}

fn run_synth(a: &SynthArgs, out: &mut Outputs) -> Result<(), Failure> {
    let mut cfg = SceneConfig::new(a.height, a.width, a.band, a.seed);
    cfg.d_max = a.dmax;
    if let Some(d) = a.shift {
        cfg.layout = DisparityLayout::Constant(d);
    }
    let scene = generate_scene(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    out.write(&a.out.join("left.pgm"), &io::encode_pgm(&scene.left)?)?;
    out.write(&a.out.join("right.pgm"), &io::encode_pgm(&scene.right)?)?;
    out.write(&a.out.join("gt.pfm"), &io::encode_pfm(&scene.gt)?)?;
    println!("wrote scene to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let mut outputs = Outputs::default();
    let mut run = || match &cli.command {
        Command::Match(a) => run_match(a, &mut outputs),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Train(a) => run_train(a, &mut outputs),
        Command::Bench(a) => run_bench(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a, &mut outputs),
    };
    let result = if cli.serial { par::serial(run) } else { run() };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            outputs.discard();
            match f {
                Failure::Module(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(exit_code(&e))
                }
                Failure::Gradcheck => {
                    eprintln!("error: gradient check failed");
                    ExitCode::from(3)
                }
            }
        }
    }
}
