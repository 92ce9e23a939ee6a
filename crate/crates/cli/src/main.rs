//! `im2win`: verify, transform, run and benchmark convolutions.
//!
//! Exit status: 0 on success, 1 when verification finds a disagreement,
//! 2 on usage, geometry or file-format errors.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use im2win_core::bench::{
    self, benchmark_names, find_benchmark, footprint_report, render_footprint_table, report_csv,
    run_ablation, run_comparison, Algorithm, BenchConfig, BenchRecord, Benchmark, Variant,
    BENCHMARKS, DEFAULT_BATCH, DEFAULT_REPEATS, DEFAULT_SEED,
};
use im2win_core::fixture::{tensor_read, tensor_write};
use im2win_core::optimized::default_plan_for;
use im2win_core::parallel::{with_workers, WORKERS_ENV};
use im2win_core::{
    conv_direct, conv_im2col_gemm, conv_im2win_basic, conv_im2win_opt, conv_implicit_gemm, im2col,
    im2win, max_rel_diff, ConvError, ConvParams, ConvShape, Layout, Tensor4, TilePlan, Toggles,
};

#[derive(Parser, Debug)]
#[command(name = "im2win", version, about = "im2win convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check that every algorithm agrees on seeded random operands.
    Verify(VerifyArgs),
    /// Rewrite an input fixture into the im2col or im2win layout.
    Transform(TransformArgs),
    /// Convolve an input fixture with a filter fixture.
    Conv(ConvArgs),
    /// Time algorithms on the built-in benchmarks.
    Bench(BenchArgs),
    /// Time the tiled kernel with each optimization removed in turn.
    Ablate(AblateArgs),
    /// Print layout element counts for the built-in benchmarks.
    Footprint(FootprintArgs),
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run every built-in benchmark instead of a custom geometry.
    #[arg(long)]
    all_benchmarks: bool,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(
        long,
        required_unless_present = "all_benchmarks",
        conflicts_with = "all_benchmarks"
    )]
    cin: Option<usize>,
    #[arg(
        long,
        required_unless_present = "all_benchmarks",
        conflicts_with = "all_benchmarks"
    )]
    hin: Option<usize>,
    #[arg(
        long,
        required_unless_present = "all_benchmarks",
        conflicts_with = "all_benchmarks"
    )]
    win: Option<usize>,
    #[arg(
        long,
        required_unless_present = "all_benchmarks",
        conflicts_with = "all_benchmarks"
    )]
    cout: Option<usize>,
    #[arg(
        long,
        required_unless_present = "all_benchmarks",
        conflicts_with = "all_benchmarks"
    )]
    hf: Option<usize>,
    #[arg(
        long,
        required_unless_present = "all_benchmarks",
        conflicts_with = "all_benchmarks"
    )]
    wf: Option<usize>,
    #[arg(long, conflicts_with = "all_benchmarks")]
    stride: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Largest accepted max_rel_diff between any two algorithms.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Args, Debug)]
struct TransformArgs {
    /// Input fixture (N, C, H, W).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_layout)]
    layout: Layout,
    #[arg(long)]
    hf: usize,
    #[arg(long)]
    wf: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Debug)]
struct ConvArgs {
    /// Input fixture (N, C_i, H_i, W_i).
    #[arg(long = "in")]
    input: PathBuf,
    /// Filter fixture (C_o, C_i, H_f, W_f).
    #[arg(long)]
    filter: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value = "im2win-opt")]
    algo: Algorithm,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Benchmark name (conv1..conv12) or `all`.
    #[arg(long, value_parser = parse_benchmarks)]
    bench: Selection,
    /// Algorithm name, or `all` for direct, im2col-gemm, implicit-gemm and im2win-opt.
    #[arg(long, default_value = "all", value_parser = parse_algorithms)]
    algo: AlgoSelection,
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Benchmark name (conv1..conv12) or `all`.
    #[arg(long, value_parser = parse_benchmarks)]
    bench: Selection,
    #[command(flatten)]
    run: RunArgs,
    /// Base plan `m_b,n_b,k_b,m_t,n_t`; defaults to the per-benchmark plan.
    #[arg(long, value_parser = parse_plan)]
    plan: Option<TilePlan>,
}

#[derive(Args, Debug)]
struct FootprintArgs {
    /// Benchmark name (conv1..conv12) or `all`.
    #[arg(long, default_value = "all", value_parser = parse_benchmarks)]
    bench: Selection,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_REPEATS)]
    repeats: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Tile plan `m_b,n_b,k_b,m_t,n_t` for the tiled kernel.
    #[arg(long, value_parser = parse_plan)]
    plan: Option<TilePlan>,
    #[arg(long)]
    no_micro_kernel: bool,
    #[arg(long)]
    no_vectorized_load: bool,
    #[arg(long)]
    no_prefetch: bool,
}

impl PlanArgs {
    fn is_set(&self) -> bool {
        self.plan.is_some() || self.no_micro_kernel || self.no_vectorized_load || self.no_prefetch
    }

    fn toggles(&self) -> Toggles {
        Toggles {
            micro_kernel: !self.no_micro_kernel,
            vectorized_load: !self.no_vectorized_load,
            prefetch_double_buffer: !self.no_prefetch,
        }
    }

    /// The requested plan for `shape`, starting from its default plan.
    fn resolve(&self, shape: &ConvShape) -> Result<TilePlan, ConvError> {
        let base = self.plan.unwrap_or_else(|| default_plan_for(shape));
        let plan = base.with_toggles(self.toggles());
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Clone, Debug)]
struct Selection(Vec<Benchmark>);

#[derive(Clone, Debug)]
struct AlgoSelection(Vec<Algorithm>);

fn parse_benchmarks(s: &str) -> Result<Selection, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(Selection(BENCHMARKS.to_vec()));
    }
    find_benchmark(s)
        .map(|b| Selection(vec![b]))
        .ok_or_else(|| {
            format!(
                "unknown benchmark {s:?}; valid names: {}, all",
                benchmark_names().join(", ")
            )
        })
}

fn parse_algorithms(s: &str) -> Result<AlgoSelection, String> {
    if s == "all" {
        return Ok(AlgoSelection(Algorithm::COMPARISON.to_vec()));
    }
    s.parse().map(|a| AlgoSelection(vec![a]))
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    match s.parse::<Layout>() {
        Ok(Layout::Raw) | Err(_) => Err(format!("unknown layout {s:?}; expected im2col or im2win")),
        Ok(l) => Ok(l),
    }
}

fn parse_plan(s: &str) -> Result<TilePlan, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("plan {s:?}: {e}"))?;
    let [m_b, n_b, k_b, m_t, n_t] = parts[..] else {
        return Err(format!(
            "plan {s:?} needs five integers m_b,n_b,k_b,m_t,n_t"
        ));
    };
    TilePlan::new(m_b, n_b, k_b, m_t, n_t).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Mismatch,
}

impl From<ConvError> for Failure {
    fn from(e: ConvError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => with_workers(n, || run(cli)),
            _ => Err(Failure::Usage(format!(
                "{WORKERS_ENV}={v:?} is not a positive integer"
            ))),
        },
        Err(_) => run(cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Mismatch) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Verify(a) => verify(a),
        Command::Transform(a) => transform(a),
        Command::Conv(a) => conv(a),
        Command::Bench(a) => bench(a),
        Command::Ablate(a) => ablate(a),
        Command::Footprint(a) => footprint(a),
    }
}

fn verify(a: VerifyArgs) -> Outcome {
    if a.tol.is_nan() || a.tol < 0.0 {
        return Err(Failure::Usage(format!(
            "--tol {} must be non-negative",
            a.tol
        )));
    }
    let cases = if a.all_benchmarks {
        BENCHMARKS.to_vec()
    } else {
        vec![Benchmark {
            name: "custom",
            c_in: a.cin.unwrap_or_default(),
            h_in: a.hin.unwrap_or_default(),
            w_in: a.win.unwrap_or_default(),
            c_out: a.cout.unwrap_or_default(),
            h_f: a.hf.unwrap_or_default(),
            w_f: a.wf.unwrap_or_default(),
            stride: a.stride.unwrap_or(1),
        }]
    };
    // Reject bad geometry before computing anything.
    let configs: Vec<(BenchConfig, TilePlan)> = cases
        .into_iter()
        .map(|b| {
            let cfg = BenchConfig::new(b, Algorithm::Im2winOpt)
                .with_batch(a.batch)
                .with_seed(a.seed);
            let plan = a.plan.resolve(&cfg.shape()?)?;
            Ok((cfg, plan))
        })
        .collect::<Result<_, ConvError>>()?;

    println!("seed: {}  batch: {}  tol: {:e}", a.seed, a.batch, a.tol);
    let mut failed = false;
    for (cfg, plan) in configs {
        let p = cfg.shape()?.params();
        let (input, filter) = cfg.operands()?;
        let outputs = [
            (Algorithm::Direct, conv_direct(&input, &filter, &p)?),
            (
                Algorithm::Im2colGemm,
                conv_im2col_gemm(&input, &filter, &p)?,
            ),
            (
                Algorithm::ImplicitGemm,
                conv_implicit_gemm(&input, &filter, &p)?,
            ),
            (
                Algorithm::Im2winBasic,
                conv_im2win_basic(&input, &filter, &p)?,
            ),
            (
                Algorithm::Im2winOpt,
                conv_im2win_opt(&input, &filter, &p, &plan)?,
            ),
        ];
        println!("{} (plan {plan})", cfg.benchmark.name);
        for (i, (x, out_x)) in outputs.iter().enumerate() {
            for (y, out_y) in &outputs[i + 1..] {
                let d = max_rel_diff(out_x, out_y)?;
                let ok = d <= a.tol;
                failed |= !ok;
                println!(
                    "  {:<14} vs {:<14} max_rel_diff {:<10.3e} {}",
                    x.name(),
                    y.name(),
                    d,
                    if ok { "ok" } else { "FAIL" }
                );
            }
        }
    }
    if failed {
        println!("result: FAIL");
        Err(Failure::Mismatch)
    } else {
        println!("result: ok");
        Ok(())
    }
}

fn transform(a: TransformArgs) -> Outcome {
    let input = tensor_read(&a.input)?;
    let p = ConvParams::new(input.dims()[1], 1, a.hf, a.wf, a.stride)?;
    ConvShape::new(input.dims(), &p)?;
    let out = match a.layout {
        Layout::Im2col => {
            let mut data = Vec::new();
            let mut cols = 0;
            for image in 0..input.dims()[0] {
                let m = im2col(&input, image, &p)?;
                cols = m.cols();
                data.extend_from_slice(m.data());
            }
            Tensor4::from_vec([1, 1, data.len() / cols, cols], data)?
        }
        Layout::Im2win => {
            let w = im2win(&input, &p)?;
            Tensor4::from_vec(w.dims(), w.data().to_vec())?
        }
        Layout::Raw => unreachable!("rejected by the argument parser"),
    };
    tensor_write(&out, &a.out)?;
    println!("layout: {}", a.layout.name());
    println!("dims: {:?}", out.dims());
    println!("elements: {}", out.len());
    Ok(())
}

fn conv(a: ConvArgs) -> Outcome {
    if a.plan.is_set() && a.algo != Algorithm::Im2winOpt {
        return Err(Failure::Usage(format!(
            "plan flags only apply to im2win-opt, not {}",
            a.algo
        )));
    }
    let input = tensor_read(&a.input)?;
    let filter = tensor_read(&a.filter)?;
    let shape = ConvShape::for_tensors(&input, &filter, a.stride)?;
    let p = shape.params();
    let out = match a.algo {
        Algorithm::Direct => conv_direct(&input, &filter, &p)?,
        Algorithm::Im2colGemm => conv_im2col_gemm(&input, &filter, &p)?,
        Algorithm::ImplicitGemm => conv_implicit_gemm(&input, &filter, &p)?,
        Algorithm::Im2winBasic => conv_im2win_basic(&input, &filter, &p)?,
        Algorithm::Im2winOpt => conv_im2win_opt(&input, &filter, &p, &a.plan.resolve(&shape)?)?,
    };
    tensor_write(&out, &a.out)?;
    println!("algorithm: {}", a.algo);
    println!("dims: {:?}", out.dims());
    println!("checksum: {:016x}", bench::checksum(&out));
    Ok(())
}

fn bench(a: BenchArgs) -> Outcome {
    let algos = a.algo.0;
    if a.plan.is_set() && !algos.contains(&Algorithm::Im2winOpt) {
        return Err(Failure::Usage(format!(
            "plan flags only apply to im2win-opt, not {}",
            algos[0]
        )));
    }
    let configs = configs(&a.bench, &a.run, |shape| {
        if a.plan.is_set() {
            Ok(Some(a.plan.resolve(shape)?))
        } else {
            Ok(None)
        }
    })?;
    let mut records = Vec::new();
    for cfg in configs {
        let mut recs = run_comparison(&cfg, &algos)?;
        for r in &mut recs {
            if r.algorithm == Algorithm::Im2winOpt {
                r.variant = r
                    .plan
                    .map_or(Variant::Full, |p| Variant::for_toggles(p.toggles));
            }
        }
        records.extend(recs);
    }
    emit(&records, &a.run)
}

fn ablate(a: AblateArgs) -> Outcome {
    let configs = configs(&a.bench, &a.run, |_| Ok(a.plan))?;
    let mut records = Vec::new();
    for cfg in configs {
        records.extend(run_ablation(&cfg)?);
    }
    emit(&records, &a.run)
}

/// One config per selected benchmark; geometry and plans are checked
/// before anything runs.
fn configs(
    sel: &Selection,
    run: &RunArgs,
    plan: impl Fn(&ConvShape) -> Result<Option<TilePlan>, ConvError>,
) -> Result<Vec<BenchConfig>, Failure> {
    if run.repeats == 0 {
        return Err(Failure::Usage("--repeats must be at least 1".into()));
    }
    sel.0
        .iter()
        .map(|&b| {
            let cfg = BenchConfig::new(b, Algorithm::Im2winOpt)
                .with_batch(run.batch)
                .with_repeats(run.repeats)
                .with_seed(run.seed);
            let p = plan(&cfg.shape()?)?;
            Ok(cfg.with_plan(p))
        })
        .collect()
}

fn emit(records: &[BenchRecord], run: &RunArgs) -> Outcome {
    let csv = report_csv(records)?;
    match &run.csv {
        Some(path) => {
            fs::write(path, &csv)?;
            println!("seed: {}", run.seed);
            println!(
                "{:<8} {:<14} {:<17} {:>11} {:>9} {:>16} {:>12}",
                "name", "algorithm", "variant", "total_s", "GFLOP/s", "checksum", "rel_diff"
            );
            for r in records {
                println!(
                    "{:<8} {:<14} {:<17} {:>11} {:>9.2} {:016x} {:>12}",
                    r.name,
                    r.algorithm.name(),
                    r.variant.name(),
                    bench::sig6(r.total_s),
                    r.tflops * 1e3,
                    r.checksum,
                    r.reference_diff.map_or("-".into(), |d| format!("{d:.3e}")),
                );
            }
            println!("csv: {}", path.display());
        }
        None => {
            eprintln!("seed: {}", run.seed);
            print!("{csv}");
        }
    }
    Ok(())
}

fn footprint(a: FootprintArgs) -> Outcome {
    let rows = footprint_report(&a.bench.0, a.batch)?;
    println!("batch: {}", a.batch);
    print!("{}", render_footprint_table(&rows));
    Ok(())
}
