//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gating criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use im2win_core::bench::{
    run_ablation, run_bench, Algorithm, BenchConfig, Benchmark, Variant, BENCHMARKS,
};
use im2win_core::optimized::{conv_im2win_opt_instrumented, default_plan_for};
use im2win_core::parallel::{max_workers, with_workers};
use im2win_core::{
    conv_direct, conv_im2col_gemm, conv_im2win_basic, conv_im2win_opt, conv_implicit_gemm,
    footprint_elems, im2col, im2win, max_rel_diff, output_dims, ConvParams, ConvShape, Layout,
    Tensor4, TilePlan, Toggles,
};

const TOL: f64 = 1e-4;
const SEED: u64 = 7;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bits_equal(a: &Tensor4, b: &Tensor4) -> bool {
    a.dims() == b.dims()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Input dims and params with `s ∈ 1..=4` and filters up to 7×7.
fn random_geometry(rng: &mut ChaCha8Rng) -> ([usize; 4], ConvParams) {
    let h_f = rng.gen_range(1..=7);
    let w_f = rng.gen_range(1..=7);
    let s = rng.gen_range(1..=4);
    let c_in = rng.gen_range(1..=5);
    let c_out = rng.gen_range(1..=6);
    let dims = [
        rng.gen_range(1..=3),
        c_in,
        h_f + rng.gen_range(0..=12),
        w_f + rng.gen_range(0..=12),
    ];
    (dims, ConvParams::new(c_in, c_out, h_f, w_f, s).unwrap())
}

fn random_plan(rng: &mut ChaCha8Rng) -> TilePlan {
    let m_t = [1, 2, 3, 4, 8][rng.gen_range(0..5)];
    let n_t = [1, 2, 4, 5, 8, 16][rng.gen_range(0..6)];
    TilePlan::new(
        m_t * rng.gen_range(1..=4),
        n_t * rng.gen_range(1..=4),
        rng.gen_range(1..=40),
        m_t,
        n_t,
    )
    .unwrap()
}

fn operands(dims: [usize; 4], p: &ConvParams, seed: u64) -> (Tensor4, Tensor4) {
    (
        Tensor4::random(dims, seed).unwrap(),
        Tensor4::random(p.filter_dims(), seed ^ 0x5eed).unwrap(),
    )
}

fn ac1() -> Verdict {
    let table: [(usize, usize); 12] = [
        (55, 55),
        (56, 56),
        (111, 111),
        (109, 109),
        (20, 20),
        (10, 10),
        (222, 222),
        (110, 110),
        (54, 54),
        (26, 26),
        (12, 12),
        (5, 5),
    ];
    let bad: Vec<_> = BENCHMARKS
        .iter()
        .zip(table)
        .filter(|(b, want)| output_dims(b.h_in, b.w_in, &b.params()).ok() != Some(*want))
        .map(|(b, _)| b.name)
        .collect();
    verdict(
        bad.is_empty(),
        format!(
            "{}/12 output rows match, mismatched {bad:?}",
            12 - bad.len()
        ),
    )
}

fn ac2() -> Verdict {
    let p = ConvParams::new(3, 1, 2, 2, 1).unwrap();
    let input = Tensor4::from_fn([1, 3, 3, 3], |[_, c, h, w]| (c * 9 + h * 3 + w) as f32).unwrap();
    let col = im2col(&input, 0, &p).unwrap().data().len();
    let win = im2win(&input, &p).unwrap().len();
    let fp_col = footprint_elems(Layout::Im2col, input.dims(), &p).unwrap();
    let fp_win = footprint_elems(Layout::Im2win, input.dims(), &p).unwrap();
    verdict(
        col == 48 && win == 36 && fp_col == 48 && fp_win == 36,
        format!("im2col {col} (formula {fp_col}), im2win {win} (formula {fp_win})"),
    )
}

fn ac3() -> Verdict {
    let mut notes = Vec::new();
    for b in BENCHMARKS {
        let dims = b.input_dims(1);
        let p = b.params();
        let col = footprint_elems(Layout::Im2col, dims, &p).unwrap();
        let win = footprint_elems(Layout::Im2win, dims, &p).unwrap();
        let input = Tensor4::zeros(dims).unwrap();
        let col_real = im2col(&input, 0, &p).unwrap().data().len() as u64;
        let win_real = im2win(&input, &p).unwrap().len() as u64;
        if win >= col || col != col_real || win != win_real {
            notes.push(format!(
                "{}: im2col {col}/{col_real} im2win {win}/{win_real}",
                b.name
            ));
        }
    }
    verdict(
        notes.is_empty(),
        if notes.is_empty() {
            "im2win < im2col on 12/12, materialized counts equal the formulas".to_string()
        } else {
            notes.join("; ")
        },
    )
}

/// Worst `max_rel_diff` against direct over every algorithm and toggle set.
fn worst_against_direct(input: &Tensor4, filter: &Tensor4, p: &ConvParams, plan: TilePlan) -> f64 {
    let reference = conv_direct(input, filter, p).unwrap();
    let mut worst: f64 = 0.0;
    let mut check = |out: Tensor4| worst = worst.max(max_rel_diff(&reference, &out).unwrap());
    check(conv_im2col_gemm(input, filter, p).unwrap());
    check(conv_implicit_gemm(input, filter, p).unwrap());
    check(conv_im2win_basic(input, filter, p).unwrap());
    for t in Toggles::combinations() {
        check(conv_im2win_opt(input, filter, p, &plan.with_toggles(t)).unwrap());
    }
    worst
}

fn ac4() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for b in BENCHMARKS {
        let cfg = BenchConfig::new(b, Algorithm::Direct).with_seed(SEED);
        let shape = cfg.shape().unwrap();
        let (input, filter) = cfg.operands().unwrap();
        worst = worst.max(worst_against_direct(
            &input,
            &filter,
            &b.params(),
            default_plan_for(&shape),
        ));
    }
    let bench_worst = worst;
    for case in 0..200 {
        let (dims, p) = random_geometry(&mut rng);
        let (input, filter) = operands(dims, &p, 1000 + case);
        let shape = ConvShape::new(dims, &p).unwrap();
        let plan = if case % 2 == 0 {
            default_plan_for(&shape)
        } else {
            random_plan(&mut rng)
        };
        worst = worst.max(worst_against_direct(&input, &filter, &p, plan));
    }
    verdict(
        worst <= TOL,
        format!(
            "12 benchmarks at batch 2 + 200 random geometries, 8 toggle sets: worst max_rel_diff {bench_worst:.3e} (benchmarks), {worst:.3e} (all) <= {TOL:e}"
        ),
    )
}

fn ac5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let unit = TilePlan::new(1, 1, 1, 1, 1).unwrap();
    let mut equal = 0;
    for case in 0..50 {
        let (dims, p) = random_geometry(&mut rng);
        let (input, filter) = operands(dims, &p, 5000 + case);
        let basic = conv_im2win_basic(&input, &filter, &p).unwrap();
        let opt = conv_im2win_opt(&input, &filter, &p, &unit).unwrap();
        equal += bits_equal(&basic, &opt) as usize;
    }
    verdict(
        equal == 50,
        format!("{equal}/50 cases bit-identical with plan 1,1,1,1,1"),
    )
}

fn ac6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    let mut cases: Vec<([usize; 4], ConvParams)> =
        (0..8).map(|_| random_geometry(&mut rng)).collect();
    cases.push((BENCHMARKS[11].input_dims(2), BENCHMARKS[11].params()));
    cases.push((BENCHMARKS[5].input_dims(2), BENCHMARKS[5].params()));
    let mut workers = vec![1, 2, max_workers()];
    workers.sort_unstable();
    workers.dedup();
    let mut unstable = Vec::new();
    for (i, (dims, p)) in cases.iter().enumerate() {
        let (input, filter) = operands(*dims, p, 6000 + i as u64);
        let plan = default_plan_for(&ConvShape::new(*dims, p).unwrap());
        let run = |alg: Algorithm| {
            match alg {
                Algorithm::Direct => conv_direct(&input, &filter, p),
                Algorithm::Im2colGemm => conv_im2col_gemm(&input, &filter, p),
                Algorithm::ImplicitGemm => conv_implicit_gemm(&input, &filter, p),
                Algorithm::Im2winBasic => conv_im2win_basic(&input, &filter, p),
                Algorithm::Im2winOpt => conv_im2win_opt(&input, &filter, p, &plan),
            }
            .unwrap()
        };
        for alg in Algorithm::ALL {
            let first = run(alg);
            let same = workers
                .iter()
                .flat_map(|&w| [w, w])
                .all(|w| bits_equal(&first, &with_workers(w, || run(alg))));
            if !same {
                unstable.push(format!("{alg} on case {i}"));
            }
        }
    }
    verdict(
        unstable.is_empty(),
        format!(
            "{} cases x 5 kernels, workers {workers:?}, each run twice: {}",
            cases.len(),
            if unstable.is_empty() {
                "all bitwise identical".to_string()
            } else {
                unstable.join(", ")
            }
        ),
    )
}

fn throughput(b: Benchmark, alg: Algorithm) -> f64 {
    let r = run_bench(&BenchConfig::new(b, alg).with_repeats(1).with_seed(SEED)).unwrap();
    r.flops as f64 / r.total_s
}

fn ac7a() -> Verdict {
    let mut wins = 0;
    let mut ratios = Vec::new();
    for b in BENCHMARKS {
        let ratio = throughput(b, Algorithm::Im2winOpt) / throughput(b, Algorithm::Im2winBasic);
        wins += (ratio >= 2.0) as usize;
        ratios.push(format!("{}={ratio:.1}x", b.name));
    }
    verdict(
        wins >= 8,
        format!(
            "opt/basic throughput >= 2x on {wins}/12 (need 8): {}",
            ratios.join(" ")
        ),
    )
}

fn ac7b() -> Verdict {
    let mut majority = 0;
    let mut notes = Vec::new();
    for b in BENCHMARKS {
        let recs = run_ablation(
            &BenchConfig::new(b, Algorithm::Im2winOpt)
                .with_repeats(1)
                .with_seed(SEED),
        )
        .unwrap();
        let slowest = recs
            .iter()
            .filter(|r| r.variant != Variant::Full)
            .max_by(|x, y| x.total_s.total_cmp(&y.total_s))
            .unwrap();
        majority += (slowest.variant == Variant::NoMicroKernel) as usize;
        notes.push(format!("{}:{}", b.name, slowest.variant.name()));
    }
    verdict(
        majority > 6,
        format!(
            "-micro-kernel is the largest loss on {majority}/12: {}",
            notes.join(" ")
        ),
    )
}

fn ac8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 8);
    let mut cases: Vec<([usize; 4], ConvParams)> =
        (0..20).map(|_| random_geometry(&mut rng)).collect();
    for b in [BENCHMARKS[4], BENCHMARKS[5], BENCHMARKS[11]] {
        cases.push((b.input_dims(2), b.params()));
    }
    let mut in_loop = 0;
    let mut staged = 0;
    let mut scratch = 0;
    let mut noncontiguous = 0;
    for (i, (dims, p)) in cases.iter().enumerate() {
        let (input, filter) = operands(*dims, p, 8000 + i as u64);
        let base = if i % 2 == 0 {
            default_plan_for(&ConvShape::new(*dims, p).unwrap())
        } else {
            random_plan(&mut rng)
        };
        for t in Toggles::combinations() {
            let (_, c) =
                conv_im2win_opt_instrumented(&input, &filter, p, &base.with_toggles(t)).unwrap();
            in_loop += c.global_reads_in_k_loop;
            staged += c.global_reads_staging;
            scratch += c.scratch_reads;
            noncontiguous += c.noncontiguous_loads;
        }
    }
    verdict(
        in_loop == 0 && staged > 0 && scratch > 0 && noncontiguous == 0,
        format!(
            "{} cases x 8 toggle sets: {in_loop} global reads in K loops, {staged} while staging, {scratch} scratch reads, {noncontiguous} non-contiguous vector loads",
            cases.len()
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--quiet`; a name filter
    // that matches nothing here skips the suite.
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if filter.as_deref().is_some_and(|f| !"acceptance".contains(f)) {
        return;
    }

    type Check = fn() -> Verdict;
    let criteria: [(&str, &str, Check, Option<Duration>, bool); 9] = [
        (
            "AC1",
            "geometry reproduction",
            ac1,
            Some(Duration::from_secs(1)),
            true,
        ),
        (
            "AC2",
            "small-example layout counts",
            ac2,
            Some(Duration::from_secs(1)),
            true,
        ),
        (
            "AC3",
            "footprint dominance",
            ac3,
            Some(Duration::from_secs(10)),
            true,
        ),
        (
            "AC4",
            "oracle equivalence",
            ac4,
            Some(Duration::from_secs(300)),
            true,
        ),
        (
            "AC5",
            "degenerate-tiling bit-equality",
            ac5,
            Some(Duration::from_secs(60)),
            true,
        ),
        (
            "AC6",
            "determinism and worker independence",
            ac6,
            None,
            true,
        ),
        ("AC7a", "opt vs basic throughput", ac7a, None, true),
        (
            "AC7b",
            "ablation ranking (reported, non-gating)",
            ac7b,
            None,
            false,
        ),
        ("AC8", "scratch residency", ac8, None, true),
    ];
    let mut failed = 0;
    for (id, name, check, budget, gating) in criteria {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_time = budget.is_none_or(|b| elapsed <= b);
        let pass = v.pass && in_time;
        let budget_note = match budget {
            Some(b) if !in_time => format!(", over the {}s budget", b.as_secs()),
            _ => String::new(),
        };
        println!(
            "{} {id} {name}: {} ({:.2}s{budget_note})",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64()
        );
        if !pass && gating {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} gating criteria failed");
        std::process::exit(1);
    }
}
