//! Benchmark set, best-of-R timing, FLOP and footprint accounting, and the
//! one-technique-removed ablation.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ConvError, Result};
use crate::optimized::{default_plan_for, im2win_opt_compute, TilePlan, Toggles};
use crate::reference::{
    conv_direct, conv_im2col_gemm_timed, conv_implicit_gemm, im2win_basic_compute,
};
use crate::tensor::{max_rel_diff, ConvParams, ConvShape, Tensor4};
use crate::transforms::{footprint_elems, im2win, Layout};

/// Geometry of one benchmark layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Benchmark {
    pub name: &'static str,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub h_f: usize,
    pub w_f: usize,
    pub stride: usize,
}

impl Benchmark {
    pub const fn square(
        name: &'static str,
        c_in: usize,
        hw: usize,
        c_out: usize,
        f: usize,
        stride: usize,
    ) -> Self {
        Self {
            name,
            c_in,
            h_in: hw,
            w_in: hw,
            c_out,
            h_f: f,
            w_f: f,
            stride,
        }
    }

    pub fn params(&self) -> ConvParams {
        ConvParams {
            c_in: self.c_in,
            c_out: self.c_out,
            h_f: self.h_f,
            w_f: self.w_f,
            stride: self.stride,
        }
    }

    pub fn input_dims(&self, batch: usize) -> [usize; 4] {
        [batch, self.c_in, self.h_in, self.w_in]
    }

    pub fn shape(&self, batch: usize) -> Result<ConvShape> {
        ConvShape::new(self.input_dims(batch), &self.params())
    }
}

/// The twelve layers: input `C×H×W`, filter `C_o×H_f×W_f`, stride.
pub const BENCHMARKS: [Benchmark; 12] = [
    Benchmark::square("conv1", 3, 227, 96, 11, 4),
    Benchmark::square("conv2", 3, 231, 96, 11, 4),
    Benchmark::square("conv3", 3, 227, 64, 7, 2),
    Benchmark::square("conv4", 64, 224, 64, 7, 2),
    Benchmark::square("conv5", 96, 24, 256, 5, 1),
    Benchmark::square("conv6", 256, 12, 512, 3, 1),
    Benchmark::square("conv7", 3, 224, 64, 3, 1),
    Benchmark::square("conv8", 64, 112, 128, 3, 1),
    Benchmark::square("conv9", 64, 56, 64, 3, 1),
    Benchmark::square("conv10", 128, 28, 128, 3, 1),
    Benchmark::square("conv11", 256, 14, 256, 3, 1),
    Benchmark::square("conv12", 512, 7, 512, 3, 1),
];

pub fn find_benchmark(name: &str) -> Option<Benchmark> {
    let lower = name.to_ascii_lowercase();
    BENCHMARKS.iter().copied().find(|b| b.name == lower)
}

pub fn benchmark_names() -> Vec<&'static str> {
    BENCHMARKS.iter().map(|b| b.name).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Direct,
    Im2colGemm,
    ImplicitGemm,
    Im2winBasic,
    Im2winOpt,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Direct,
        Algorithm::Im2colGemm,
        Algorithm::ImplicitGemm,
        Algorithm::Im2winBasic,
        Algorithm::Im2winOpt,
    ];

    /// The comparison set run by `--algo all`.
    pub const COMPARISON: [Algorithm; 4] = [
        Algorithm::Direct,
        Algorithm::Im2colGemm,
        Algorithm::ImplicitGemm,
        Algorithm::Im2winOpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Direct => "direct",
            Algorithm::Im2colGemm => "im2col-gemm",
            Algorithm::ImplicitGemm => "implicit-gemm",
            Algorithm::Im2winBasic => "im2win-basic",
            Algorithm::Im2winOpt => "im2win-opt",
        }
    }

    pub fn transform_layout(self) -> Option<Layout> {
        match self {
            Algorithm::Im2colGemm => Some(Layout::Im2col),
            Algorithm::Im2winBasic | Algorithm::Im2winOpt => Some(Layout::Im2win),
            Algorithm::Direct | Algorithm::ImplicitGemm => None,
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Algorithm::ALL.iter().map(|a| a.name()).collect();
                format!(
                    "unknown algorithm {s:?}; expected one of {}",
                    names.join(", ")
                )
            })
    }
}

/// Which optimization, if any, was removed from the tiled kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Algorithms without a tile plan.
    Baseline,
    Full,
    NoPrefetch,
    NoVectorizedLoad,
    NoMicroKernel,
    /// Any other toggle combination, carried by the plan.
    Custom,
}

impl Variant {
    pub const ABLATION: [Variant; 4] = [
        Variant::Full,
        Variant::NoPrefetch,
        Variant::NoVectorizedLoad,
        Variant::NoMicroKernel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Full => "full",
            Variant::NoPrefetch => "-prefetch",
            Variant::NoVectorizedLoad => "-vectorized-load",
            Variant::NoMicroKernel => "-micro-kernel",
            Variant::Custom => "custom",
        }
    }

    /// The variant whose toggles are `t`.
    pub fn for_toggles(t: Toggles) -> Variant {
        Variant::ABLATION
            .into_iter()
            .find(|v| v.apply(Toggles::ALL_ON) == t)
            .unwrap_or(Variant::Custom)
    }

    pub fn apply(self, toggles: Toggles) -> Toggles {
        match self {
            Variant::Baseline | Variant::Full | Variant::Custom => toggles,
            Variant::NoPrefetch => Toggles {
                prefetch_double_buffer: false,
                ..toggles
            },
            Variant::NoVectorizedLoad => Toggles {
                vectorized_load: false,
                ..toggles
            },
            Variant::NoMicroKernel => Toggles {
                micro_kernel: false,
                ..toggles
            },
        }
    }
}

pub const DEFAULT_BATCH: usize = 2;
pub const DEFAULT_REPEATS: usize = 10;
pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_MEM_LIMIT: u64 = 4 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub benchmark: Benchmark,
    pub batch: usize,
    pub repeats: usize,
    pub algorithm: Algorithm,
    /// Overrides the default plan of the tiled kernel.
    pub plan: Option<TilePlan>,
    pub variant: Variant,
    pub seed: u64,
    /// Runs whose estimated working set exceeds this are refused.
    pub mem_limit: u64,
}

impl BenchConfig {
    /// Desk-scale settings: batch 2, 10 repeats, seed 7.
    pub fn new(benchmark: Benchmark, algorithm: Algorithm) -> Self {
        Self {
            benchmark,
            batch: DEFAULT_BATCH,
            repeats: DEFAULT_REPEATS,
            algorithm,
            plan: None,
            variant: if algorithm == Algorithm::Im2winOpt {
                Variant::Full
            } else {
                Variant::Baseline
            },
            seed: DEFAULT_SEED,
            mem_limit: DEFAULT_MEM_LIMIT,
        }
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn with_repeats(mut self, repeats: usize) -> Self {
        self.repeats = repeats;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_plan(mut self, plan: Option<TilePlan>) -> Self {
        self.plan = plan;
        self
    }

    pub fn shape(&self) -> Result<ConvShape> {
        if self.batch == 0 {
            return Err(ConvError::Geometry("batch must be at least 1".into()));
        }
        self.benchmark.shape(self.batch)
    }

    /// Tile plan the tiled kernel will run with, variant applied.
    pub fn resolved_plan(&self) -> Result<TilePlan> {
        let base = match self.plan {
            Some(p) => p,
            None => default_plan_for(&self.shape()?),
        };
        let plan = base.with_toggles(self.variant.apply(base.toggles));
        plan.validate()?;
        Ok(plan)
    }

    /// Seeded input and filter tensors.
    pub fn operands(&self) -> Result<(Tensor4, Tensor4)> {
        let shape = self.shape()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let input = Tensor4::random_with(shape.input_dims(), &mut rng)?;
        let filter = Tensor4::random_with(shape.filter_dims(), &mut rng)?;
        Ok((input, filter))
    }

    /// Estimated peak bytes: operands, output and transform buffers.
    pub fn required_bytes(&self) -> Result<u64> {
        let s = self.shape()?;
        let elems = |d: [usize; 4]| d.iter().map(|&x| x as u64).product::<u64>();
        let base = elems(s.input_dims()) + elems(s.filter_dims()) + elems(s.output_dims());
        let plane = (s.h_out * s.w_out) as u64;
        let transform = match self.algorithm {
            Algorithm::Im2colGemm => {
                plane * (s.c_in * s.h_f * s.w_f) as u64 + plane * s.c_out as u64
            }
            Algorithm::Im2winBasic => footprint_elems(Layout::Im2win, s.input_dims(), &s.params())?,
            Algorithm::Im2winOpt => {
                // block tiles are padded to full blocks before the scatter
                let plan = self.resolved_plan()?;
                let dims = crate::reference::GemmDims::from_shape(&s);
                let padded = (dims.m.div_ceil(plan.m_b) * plan.m_b) as u64
                    * (dims.n.div_ceil(plan.n_b) * plan.n_b) as u64;
                footprint_elems(Layout::Im2win, s.input_dims(), &s.params())? + padded
            }
            Algorithm::Direct | Algorithm::ImplicitGemm => 0,
        };
        Ok(4 * (base + transform))
    }
}

/// Element counts of each layout for one configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    pub raw: u64,
    pub im2col: u64,
    pub im2win: u64,
}

impl Footprint {
    pub fn of(shape: &ConvShape) -> Result<Self> {
        let (dims, p) = (shape.input_dims(), shape.params());
        Ok(Self {
            raw: footprint_elems(Layout::Raw, dims, &p)?,
            im2col: footprint_elems(Layout::Im2col, dims, &p)?,
            im2win: footprint_elems(Layout::Im2win, dims, &p)?,
        })
    }

    /// `1 - im2win / im2col`, as a fraction.
    pub fn reduction(&self) -> f64 {
        1.0 - self.im2win as f64 / self.im2col as f64
    }

    pub fn bytes(&self, layout: Layout) -> u64 {
        4 * match layout {
            Layout::Raw => self.raw,
            Layout::Im2col => self.im2col,
            Layout::Im2win => self.im2win,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub name: String,
    pub algorithm: Algorithm,
    pub variant: Variant,
    pub plan: Option<TilePlan>,
    pub batch: usize,
    pub repeats: usize,
    pub seed: u64,
    pub h_out: usize,
    pub w_out: usize,
    pub flops: u64,
    /// Components of the fastest run; `total_s == transform_s + compute_s`.
    pub transform_s: f64,
    pub compute_s: f64,
    pub total_s: f64,
    /// Variance of the total time over the measured runs.
    pub total_var: f64,
    pub tflops: f64,
    pub footprint: Footprint,
    pub checksum: u64,
    /// `max_rel_diff` against the reference output, when one was compared.
    pub reference_diff: Option<f64>,
}

/// FNV-1a over the little-endian bytes of every value.
pub fn checksum(t: &Tensor4) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

struct Timed {
    out: Tensor4,
    transform: Duration,
    compute: Duration,
}

fn execute(cfg: &BenchConfig, input: &Tensor4, filter: &Tensor4, p: &ConvParams) -> Result<Timed> {
    let t0 = Instant::now();
    match cfg.algorithm {
        Algorithm::Direct => {
            let out = conv_direct(input, filter, p)?;
            Ok(Timed {
                out,
                transform: Duration::ZERO,
                compute: t0.elapsed(),
            })
        }
        Algorithm::ImplicitGemm => {
            let out = conv_implicit_gemm(input, filter, p)?;
            Ok(Timed {
                out,
                transform: Duration::ZERO,
                compute: t0.elapsed(),
            })
        }
        Algorithm::Im2colGemm => {
            let (out, transform) = conv_im2col_gemm_timed(input, filter, p)?;
            let total = t0.elapsed();
            Ok(Timed {
                out,
                transform,
                compute: total.saturating_sub(transform),
            })
        }
        Algorithm::Im2winBasic | Algorithm::Im2winOpt => {
            let win = im2win(input, p)?;
            let transform = t0.elapsed();
            let t1 = Instant::now();
            let out = if cfg.algorithm == Algorithm::Im2winBasic {
                im2win_basic_compute(&win, filter)?
            } else {
                im2win_opt_compute(&win, filter, &cfg.resolved_plan()?)?
            };
            Ok(Timed {
                out,
                transform,
                compute: t1.elapsed(),
            })
        }
    }
}

/// Runs `cfg` once untimed, then `cfg.repeats` timed runs; returns the
/// record of the fastest run and the output it produced.
pub fn run_bench_with_output(cfg: &BenchConfig) -> Result<(BenchRecord, Tensor4)> {
    let shape = cfg.shape()?;
    let required = cfg.required_bytes()?;
    if required > cfg.mem_limit {
        return Err(ConvError::OutOfMemory {
            required,
            limit: cfg.mem_limit,
        });
    }
    let plan = match cfg.algorithm {
        Algorithm::Im2winOpt => Some(cfg.resolved_plan()?),
        _ => None,
    };
    let p = shape.params();
    let (input, filter) = cfg.operands()?;

    let mut last = execute(cfg, &input, &filter, &p)?;
    let mut best: Option<(Duration, Duration)> = None;
    let mut totals = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats.max(1) {
        let run = execute(cfg, &input, &filter, &p)?;
        let total = run.transform + run.compute;
        totals.push(total.as_secs_f64());
        if best.is_none_or(|(t, c)| total < t + c) {
            best = Some((run.transform, run.compute));
        }
        last = run;
    }
    let (transform, compute) = best.expect("at least one timed run");
    let total_s = (transform + compute).as_secs_f64();
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    let total_var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / totals.len() as f64;
    let flops = shape.flops();
    let record = BenchRecord {
        name: cfg.benchmark.name.to_string(),
        algorithm: cfg.algorithm,
        variant: cfg.variant,
        plan,
        batch: cfg.batch,
        repeats: cfg.repeats.max(1),
        seed: cfg.seed,
        h_out: shape.h_out,
        w_out: shape.w_out,
        flops,
        transform_s: transform.as_secs_f64(),
        compute_s: compute.as_secs_f64(),
        total_s,
        total_var,
        tflops: if total_s > 0.0 {
            flops as f64 / total_s / 1e12
        } else {
            0.0
        },
        footprint: Footprint::of(&shape)?,
        checksum: checksum(&last.out),
        reference_diff: None,
    };
    Ok((record, last.out))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchRecord> {
    run_bench_with_output(cfg).map(|(r, _)| r)
}

/// Runs every algorithm in `algorithms` on `cfg`'s benchmark, recording each
/// output's distance from the direct convolution.
pub fn run_comparison(cfg: &BenchConfig, algorithms: &[Algorithm]) -> Result<Vec<BenchRecord>> {
    let (input, filter) = cfg.operands()?;
    let reference = conv_direct(&input, &filter, &cfg.shape()?.params())?;
    algorithms
        .iter()
        .map(|&algorithm| {
            let c = BenchConfig {
                algorithm,
                variant: if algorithm == Algorithm::Im2winOpt {
                    Variant::Full
                } else {
                    Variant::Baseline
                },
                ..cfg.clone()
            };
            let (mut rec, out) = run_bench_with_output(&c)?;
            rec.reference_diff = Some(max_rel_diff(&reference, &out)?);
            Ok(rec)
        })
        .collect()
}

/// Full plan, then the plan with each optimization removed in turn.
/// Each record carries its output's distance from the full-plan output.
pub fn run_ablation(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    let mut full_out: Option<Tensor4> = None;
    let mut records = Vec::with_capacity(Variant::ABLATION.len());
    for variant in Variant::ABLATION {
        let c = BenchConfig {
            algorithm: Algorithm::Im2winOpt,
            variant,
            ..cfg.clone()
        };
        let (mut rec, out) = run_bench_with_output(&c)?;
        let reference = full_out.get_or_insert_with(|| out.clone());
        rec.reference_diff = Some(max_rel_diff(reference, &out)?);
        records.push(rec);
    }
    Ok(records)
}

pub const CSV_HEADER: &str = "name,algorithm,variant,batch,repeats,h_o,w_o,flops,transform_s,compute_s,total_s,tflops,raw_elems,im2col_elems,im2win_elems,footprint_reduction_pct,checksum";

/// `%g`-style formatting with six significant digits.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    } else {
        format!(
            "{}e{}{:02}",
            trim_zeros(mantissa),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        )
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `("conv", 10)` for `"conv10"`, so `conv2` sorts before `conv10`.
fn natural_key(name: &str) -> (String, u64) {
    let digits = name.len() - name.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (head, tail) = name.split_at(name.len() - digits);
    (head.to_string(), tail.parse().unwrap_or(0))
}

/// CSV with one header row and one row per record, ordered by
/// (benchmark, algorithm, variant).
pub fn report_csv(records: &[BenchRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(ConvError::Shape("no records to report".into()));
    }
    let mut sorted: Vec<&BenchRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (natural_key(&r.name), r.algorithm, r.variant));
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:016x}",
            r.name,
            r.algorithm.name(),
            r.variant.name(),
            r.batch,
            r.repeats,
            r.h_out,
            r.w_out,
            r.flops,
            sig6(r.transform_s),
            sig6(r.compute_s),
            sig6(r.total_s),
            sig6(r.tflops),
            r.footprint.raw,
            r.footprint.im2col,
            r.footprint.im2win,
            sig6(100.0 * r.footprint.reduction()),
            r.checksum,
        )
        .expect("writing to a String");
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FootprintRow {
    pub name: String,
    pub footprint: Footprint,
}

impl FootprintRow {
    pub fn reduction_pct(&self) -> f64 {
        100.0 * self.footprint.reduction()
    }
}

/// Layout element counts for each benchmark at `batch`.
pub fn footprint_report(benchmarks: &[Benchmark], batch: usize) -> Result<Vec<FootprintRow>> {
    benchmarks
        .iter()
        .map(|b| {
            Ok(FootprintRow {
                name: b.name.to_string(),
                footprint: Footprint::of(&b.shape(batch)?)?,
            })
        })
        .collect()
}

pub fn render_footprint_table(rows: &[FootprintRow]) -> String {
    let mut out = format!(
        "{:<8} {:>14} {:>14} {:>14} {:>10}\n",
        "name", "raw", "im2col", "im2win", "reduction"
    );
    for r in rows {
        let f = &r.footprint;
        writeln!(
            out,
            "{:<8} {:>14} {:>14} {:>14} {:>9.2}%",
            r.name,
            f.raw,
            f.im2col,
            f.im2win,
            r.reduction_pct()
        )
        .expect("writing to a String");
    }
    out
}

/// Best-of-`repeats` compute time of the tiled kernel for each plan, on
/// one transformed input. Plans that fail validation are skipped.
pub fn grid_search(
    cfg: &BenchConfig,
    plans: impl IntoIterator<Item = TilePlan>,
    repeats: usize,
) -> Result<Vec<(TilePlan, f64)>> {
    let shape = cfg.shape()?;
    let (input, filter) = cfg.operands()?;
    let win = im2win(&input, &shape.params())?;
    let mut results = Vec::new();
    for plan in plans {
        if plan.validate().is_err() {
            continue;
        }
        im2win_opt_compute(&win, &filter, &plan)?;
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            im2win_opt_compute(&win, &filter, &plan)?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        results.push((plan, best));
    }
    Ok(results)
}
