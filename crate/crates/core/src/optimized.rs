//! Tiled im2win convolution with packed panels, outer-product micro-kernels
//! and double-buffered prefetching.
//!
//! The convolution is treated as `O[M×N] = F[M×K] · Ĩ[K×N]` with
//! `M = C_o`, `N = N_i·H_o·W_o`, `K = C_i·H_f·W_f`. The `M×N` space is cut
//! into `m_b × n_b` blocks that run independently on the worker pool. Inside
//! a block:
//!
//! * the `k_b × n_b` panel of `Ĩ` and the `m_b × k_b` panel of `F` for one
//!   K-block are packed into dense scratch panels (zero-filled past the
//!   matrix edge);
//! * the block is split into `(m_b/m_t)·(n_b/n_t)` work items, each owning an
//!   `m_t × n_t` accumulator tile that lives across all K-blocks and is
//!   written back once;
//! * each step of the K loop loads an `m_t` column of the filter panel and
//!   an `n_t` row of the input panel (contiguous in the panels) and applies
//!   one rank-1 update.
//!
//! With prefetching enabled, the next K-block's panels are staged into the
//! second buffer before the current one is consumed, and inside a K-block
//! the next pair of register vectors is loaded before the current pair is
//! multiplied. Both schedules accumulate in ascending `k`, so every toggle
//! combination produces the same bits as the reference kernels.

use rayon::prelude::*;

use crate::error::{ConvError, Result};
use crate::reference::{check_filter, GemmDims, IndexMap};
use crate::tensor::{ConvParams, ConvShape, Tensor4};
use crate::transforms::{im2win, Im2winTensor};

/// Width of one vectorized register load, in `f32` lanes.
pub const VEC_WIDTH: usize = 8;

/// Optimizations that can be switched off for ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Toggles {
    /// `m_t × n_t` tiles per work item; off forces one output per work item.
    pub micro_kernel: bool,
    /// Load register vectors in 8-wide chunks instead of element by element.
    pub vectorized_load: bool,
    /// Two panel and register buffers with fetch-ahead.
    pub prefetch_double_buffer: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        micro_kernel: true,
        vectorized_load: true,
        prefetch_double_buffer: true,
    };

    /// All eight on/off combinations.
    pub fn combinations() -> impl Iterator<Item = Toggles> {
        (0..8u8).map(|bits| Toggles {
            micro_kernel: bits & 1 != 0,
            vectorized_load: bits & 2 != 0,
            prefetch_double_buffer: bits & 4 != 0,
        })
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL_ON
    }
}

/// Block and micro-tile extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TilePlan {
    pub m_b: usize,
    pub n_b: usize,
    pub k_b: usize,
    pub m_t: usize,
    pub n_t: usize,
    pub toggles: Toggles,
}

impl TilePlan {
    /// A validated plan with every optimization enabled.
    pub fn new(m_b: usize, n_b: usize, k_b: usize, m_t: usize, n_t: usize) -> Result<Self> {
        let plan = Self {
            m_b,
            n_b,
            k_b,
            m_t,
            n_t,
            toggles: Toggles::ALL_ON,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("m_b", self.m_b),
            ("n_b", self.n_b),
            ("k_b", self.k_b),
            ("m_t", self.m_t),
            ("n_t", self.n_t),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(ConvError::Config(format!("{name} must be at least 1")));
        }
        if self.toggles.micro_kernel {
            if !self.m_b.is_multiple_of(self.m_t) {
                return Err(ConvError::Config(format!(
                    "m_t = {} does not divide m_b = {}",
                    self.m_t, self.m_b
                )));
            }
            if !self.n_b.is_multiple_of(self.n_t) {
                return Err(ConvError::Config(format!(
                    "n_t = {} does not divide n_b = {}",
                    self.n_t, self.n_b
                )));
            }
        }
        Ok(())
    }

    /// The plan actually executed: without the micro-kernel each work item
    /// owns a single output element.
    pub fn effective(&self) -> TilePlan {
        let mut p = *self;
        if !p.toggles.micro_kernel {
            p.m_t = 1;
            p.n_t = 1;
        }
        p
    }

    pub fn workers_per_block(&self) -> usize {
        let p = self.effective();
        (p.m_b / p.m_t) * (p.n_b / p.n_t)
    }
}

impl std::fmt::Display for TilePlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.m_b, self.n_b, self.k_b, self.m_t, self.n_t
        )
    }
}

const DEFAULT_N_B: usize = 128;
const DEFAULT_M_B: usize = 64;
const DEFAULT_K_B: usize = 16;
const DEFAULT_TILE: usize = 8;

fn pow2_floor(x: usize) -> usize {
    1 << (usize::BITS - 1 - x.leading_zeros())
}

/// A plan for `dims`: 128-column input panels 16 rows deep, 64-row filter
/// panels (1024 elements, a multiple of 128) and 8×8 micro-tiles, each
/// clamped to the problem size.
pub fn default_plan(dims: GemmDims) -> TilePlan {
    let GemmDims { m, n, k } = dims;
    let m_t = DEFAULT_TILE.min(pow2_floor(m.max(1)));
    let n_t = DEFAULT_TILE.min(pow2_floor(n.max(1)));
    let m_b = DEFAULT_M_B.min(m.max(1).div_ceil(m_t) * m_t);
    let n_b = DEFAULT_N_B.min(n.max(1).div_ceil(n_t) * n_t);
    let k_b = DEFAULT_K_B.min(k.max(1));
    TilePlan {
        m_b,
        n_b,
        k_b,
        m_t,
        n_t,
        toggles: Toggles::ALL_ON,
    }
}

/// Observation hooks compiled into the kernel. The no-op implementation
/// vanishes after monomorphization; [`KernelCounters`] records everything.
pub trait Probe: Default + Send {
    #[inline(always)]
    fn global_read(&mut self, _n: u64) {}
    #[inline(always)]
    fn scratch_read(&mut self, _n: u64) {}
    #[inline(always)]
    fn enter_k_loop(&mut self) {}
    #[inline(always)]
    fn exit_k_loop(&mut self) {}
    #[inline(always)]
    fn panel_staged(&mut self, _prefetch: bool) {}
    #[inline(always)]
    fn register_prefetch(&mut self) {}
    #[inline(always)]
    fn vector_load(&mut self, _contiguous: bool) {}
    #[inline(always)]
    fn scalar_load(&mut self) {}
    #[inline(always)]
    fn micro_kernel(&mut self) {}
    #[inline(always)]
    fn writeback(&mut self) {}
    #[inline(always)]
    fn merge(&mut self, _other: Self) {}
}

#[derive(Default)]
struct NoProbe;

impl Probe for NoProbe {}

/// Event counts from an instrumented run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KernelCounters {
    /// Elements read from `Ĩ` or `F` while packing panels.
    pub global_reads_staging: u64,
    /// Elements read from `Ĩ` or `F` while a work item runs its K loop.
    pub global_reads_in_k_loop: u64,
    /// Elements read from the scratch panels into register vectors.
    pub scratch_reads: u64,
    /// Panel pairs packed, including prefetches.
    pub panels_staged: u64,
    /// Panel pairs packed ahead of their K-block.
    pub panel_prefetches: u64,
    /// Register vector pairs loaded ahead of the rank-1 update using them.
    pub register_prefetches: u64,
    pub vector_loads: u64,
    pub scalar_loads: u64,
    /// Vector loads whose source crossed a panel row.
    pub noncontiguous_loads: u64,
    /// Rank-1 updates executed.
    pub micro_kernels: u64,
    /// Accumulator tiles written to the output.
    pub writebacks: u64,
    /// Work-item K-block steps.
    pub k_loops: u64,
    in_k_loop: bool,
}

impl Probe for KernelCounters {
    fn global_read(&mut self, n: u64) {
        if self.in_k_loop {
            self.global_reads_in_k_loop += n;
        } else {
            self.global_reads_staging += n;
        }
    }
    fn scratch_read(&mut self, n: u64) {
        self.scratch_reads += n;
    }
    fn enter_k_loop(&mut self) {
        self.in_k_loop = true;
        self.k_loops += 1;
    }
    fn exit_k_loop(&mut self) {
        self.in_k_loop = false;
    }
    fn panel_staged(&mut self, prefetch: bool) {
        self.panels_staged += 1;
        self.panel_prefetches += prefetch as u64;
    }
    fn register_prefetch(&mut self) {
        self.register_prefetches += 1;
    }
    fn vector_load(&mut self, contiguous: bool) {
        self.vector_loads += 1;
        self.noncontiguous_loads += !contiguous as u64;
    }
    fn scalar_load(&mut self) {
        self.scalar_loads += 1;
    }
    fn micro_kernel(&mut self) {
        self.micro_kernels += 1;
    }
    fn writeback(&mut self) {
        self.writebacks += 1;
    }
    fn merge(&mut self, o: Self) {
        self.global_reads_staging += o.global_reads_staging;
        self.global_reads_in_k_loop += o.global_reads_in_k_loop;
        self.scratch_reads += o.scratch_reads;
        self.panels_staged += o.panels_staged;
        self.panel_prefetches += o.panel_prefetches;
        self.register_prefetches += o.register_prefetches;
        self.vector_loads += o.vector_loads;
        self.scalar_loads += o.scalar_loads;
        self.noncontiguous_loads += o.noncontiguous_loads;
        self.micro_kernels += o.micro_kernels;
        self.writebacks += o.writebacks;
        self.k_loops += o.k_loops;
    }
}

/// Per-block staging panels and the accumulator tiles of its work items.
///
/// `input_panel(b)[k'·n_b + n']` holds `Ĩ(kk·k_b + k', by·n_b + n')` and
/// `filter_panel(b)[k'·m_b + m']` holds `F(bx·m_b + m', kk·k_b + k')`, both
/// in the logical GEMM view. Work item `w` owns
/// `tiles[w·m_t·n_t .. (w+1)·m_t·n_t]`, row-major `m_t × n_t`.
#[derive(Clone, Debug)]
pub struct ScratchBuffers {
    plan: TilePlan,
    s_i: [Vec<f32>; 2],
    s_f: [Vec<f32>; 2],
    tiles: Vec<f32>,
}

impl ScratchBuffers {
    pub fn new(plan: &TilePlan) -> Self {
        let plan = plan.effective();
        let si = plan.k_b * plan.n_b;
        let sf = plan.m_b * plan.k_b;
        let second = plan.toggles.prefetch_double_buffer as usize;
        Self {
            plan,
            s_i: [vec![0.0; si], vec![0.0; si * second]],
            s_f: [vec![0.0; sf], vec![0.0; sf * second]],
            tiles: vec![0.0; plan.m_b * plan.n_b],
        }
    }

    pub fn plan(&self) -> &TilePlan {
        &self.plan
    }

    pub fn input_panel(&self, buf: usize) -> &[f32] {
        &self.s_i[buf]
    }

    pub fn filter_panel(&self, buf: usize) -> &[f32] {
        &self.s_f[buf]
    }

    /// Accumulator tile of work item `worker`.
    pub fn tile(&self, worker: usize) -> &[f32] {
        let len = self.plan.m_t * self.plan.n_t;
        &self.tiles[worker * len..(worker + 1) * len]
    }

    fn buffers(&self) -> usize {
        if self.s_i[1].is_empty() {
            1
        } else {
            2
        }
    }
}

/// Everything a block needs to address the global operands.
struct Operands<'a> {
    win: &'a Im2winTensor,
    filter: &'a [f32],
    dims: GemmDims,
    map: IndexMap,
}

impl<'a> Operands<'a> {
    fn new(win: &'a Im2winTensor, filter: &'a Tensor4) -> Result<Self> {
        let shape = *win.shape();
        check_filter(filter, &shape.params())?;
        Ok(Self {
            win,
            filter: filter.data(),
            dims: GemmDims::from_shape(&shape),
            map: IndexMap::new(&shape),
        })
    }

    fn k_blocks(&self, plan: &TilePlan) -> usize {
        self.dims.k.div_ceil(plan.k_b)
    }
}

/// Packs the K-block `kk` panels of block `(bx, by)` into buffer `buf`.
fn stage<P: Probe>(
    ops: &Operands<'_>,
    plan: &TilePlan,
    (bx, by, kk): (usize, usize, usize),
    s_i: &mut [f32],
    s_f: &mut [f32],
    probe: &mut P,
) {
    let TilePlan { m_b, n_b, k_b, .. } = *plan;
    let GemmDims { m, n, k } = ops.dims;
    let shape = ops.win.shape();
    let src = ops.win.data();
    let step = shape.stride * shape.h_f;
    let n0 = by * n_b;
    let n_valid = n.saturating_sub(n0).min(n_b);

    for (kp, row) in s_i.chunks_exact_mut(n_b).enumerate() {
        let kg = kk * k_b + kp;
        if kg >= k {
            row.fill(0.0);
            continue;
        }
        let (i_c, f_h, f_w) = ops.map.split_k(kg);
        let (mut i_n, mut o_h, mut o_w) = ops.map.split_n(n0);
        let mut off = ops.win.offset(i_n, i_c, o_h, f_h, f_w, o_w);
        for dst in &mut row[..n_valid] {
            *dst = src[off];
            o_w += 1;
            if o_w == shape.w_out {
                o_w = 0;
                o_h += 1;
                if o_h == shape.h_out {
                    o_h = 0;
                    i_n += 1;
                }
                if i_n < shape.batch {
                    off = ops.win.offset(i_n, i_c, o_h, f_h, f_w, o_w);
                }
            } else {
                off += step;
            }
        }
        row[n_valid..].fill(0.0);
        probe.global_read(n_valid as u64);
    }

    let m0 = bx * m_b;
    let m_valid = m.saturating_sub(m0).min(m_b);
    let k0 = kk * k_b;
    let k_valid = k.saturating_sub(k0).min(k_b);
    for (kp, row) in s_f.chunks_exact_mut(m_b).enumerate() {
        if kp >= k_valid {
            row.fill(0.0);
            continue;
        }
        for (mp, dst) in row[..m_valid].iter_mut().enumerate() {
            *dst = ops.filter[(m0 + mp) * k + k0 + kp];
        }
        row[m_valid..].fill(0.0);
        probe.global_read(m_valid as u64);
    }
}

/// Packs the panels of block `(bx, by)` for K-block `kk` into buffer `buf`.
///
/// Slots past the edge of the logical `K × N` and `M × K` matrices are
/// zero-filled.
pub fn stage_panels(
    win: &Im2winTensor,
    filter: &Tensor4,
    block: (usize, usize, usize),
    scratch: &mut ScratchBuffers,
    buf: usize,
) -> Result<()> {
    let ops = Operands::new(win, filter)?;
    let plan = scratch.plan;
    let (bx, by, kk) = block;
    let limits = [
        ("bx", bx, ops.dims.m.div_ceil(plan.m_b)),
        ("by", by, ops.dims.n.div_ceil(plan.n_b)),
        ("kk", kk, ops.k_blocks(&plan)),
        ("buf", buf, scratch.buffers()),
    ];
    for (name, v, bound) in limits {
        if v >= bound {
            return Err(ConvError::Index(format!("{name} = {v} >= {bound}")));
        }
    }
    let ScratchBuffers { s_i, s_f, .. } = scratch;
    stage(
        &ops,
        &plan,
        block,
        &mut s_i[buf],
        &mut s_f[buf],
        &mut NoProbe,
    );
    Ok(())
}

/// Rank-1 update `r_o[a·n_t + b] += r_f[a]·r_i[b]`.
pub fn micro_kernel(r_f: &[f32], r_i: &[f32], r_o: &mut [f32]) {
    assert_eq!(r_o.len(), r_f.len() * r_i.len(), "accumulator tile size");
    for (row, &f) in r_o.chunks_exact_mut(r_i.len()).zip(r_f) {
        for (o, &x) in row.iter_mut().zip(r_i) {
            *o += f * x;
        }
    }
}

#[inline(always)]
fn outer_product<const MT: usize, const NT: usize>(
    acc: &mut [[f32; NT]; MT],
    r_f: &[f32; MT],
    r_i: &[f32; NT],
) {
    for a in 0..MT {
        let f = r_f[a];
        for b in 0..NT {
            acc[a][b] += f * r_i[b];
        }
    }
}

/// Copies `dst.len()` values starting at `panel[start]` into a register vector.
#[inline(always)]
fn load_vector<P: Probe>(
    dst: &mut [f32],
    panel: &[f32],
    start: usize,
    row_width: usize,
    vectorized: bool,
    probe: &mut P,
) {
    let len = dst.len();
    probe.scratch_read(len as u64);
    if vectorized && len >= VEC_WIDTH && start.is_multiple_of(VEC_WIDTH) {
        let src = &panel[start..start + len];
        let (chunks, _) = src.as_chunks::<VEC_WIDTH>();
        let (dst_chunks, dst_tail) = dst.as_chunks_mut::<VEC_WIDTH>();
        for (d, s) in dst_chunks.iter_mut().zip(chunks) {
            *d = *s;
            probe.vector_load(start / row_width == (start + len - 1) / row_width);
        }
        let done = dst_chunks.len() * VEC_WIDTH;
        for (i, d) in dst_tail.iter_mut().enumerate() {
            *d = panel[start + done + i];
            probe.scalar_load();
        }
    } else {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = panel[start + i];
            probe.scalar_load();
        }
    }
}

/// Location of one work item inside its block, plus the panel extents.
#[derive(Clone, Copy)]
struct StepArgs<'a> {
    s_f: &'a [f32],
    s_i: &'a [f32],
    m_b: usize,
    n_b: usize,
    k_b: usize,
    m0: usize,
    n0: usize,
    vectorized: bool,
    prefetch: bool,
}

/// One work item's pass over one K-block, with `MT × NT` fixed at compile time.
#[inline(always)]
fn step_fixed<const MT: usize, const NT: usize, P: Probe>(
    a: StepArgs<'_>,
    r_o: &mut [f32],
    probe: &mut P,
) {
    let mut acc = [[0.0f32; NT]; MT];
    for (row, src) in acc.iter_mut().zip(r_o.chunks_exact(NT)) {
        row.copy_from_slice(src);
    }
    let mut r_f = [[0.0f32; MT]; 2];
    let mut r_i = [[0.0f32; NT]; 2];
    let load = |r_f: &mut [f32; MT], r_i: &mut [f32; NT], kp: usize, probe: &mut P| {
        load_vector(r_f, a.s_f, kp * a.m_b + a.m0, a.m_b, a.vectorized, probe);
        load_vector(r_i, a.s_i, kp * a.n_b + a.n0, a.n_b, a.vectorized, probe);
    };
    if a.prefetch {
        let [f0, f1] = &mut r_f;
        let [i0, i1] = &mut r_i;
        load(f0, i0, 0, probe);
        let (mut cur_f, mut cur_i, mut next_f, mut next_i) = (f0, i0, f1, i1);
        for kp in 1..a.k_b {
            load(next_f, next_i, kp, probe);
            probe.register_prefetch();
            outer_product(&mut acc, cur_f, cur_i);
            probe.micro_kernel();
            std::mem::swap(&mut cur_f, &mut next_f);
            std::mem::swap(&mut cur_i, &mut next_i);
        }
        outer_product(&mut acc, cur_f, cur_i);
        probe.micro_kernel();
    } else {
        let [f0, _] = &mut r_f;
        let [i0, _] = &mut r_i;
        for kp in 0..a.k_b {
            load(f0, i0, kp, probe);
            outer_product(&mut acc, f0, i0);
            probe.micro_kernel();
        }
    }
    for (row, dst) in acc.iter().zip(r_o.chunks_exact_mut(NT)) {
        dst.copy_from_slice(row);
    }
}

/// Fallback for micro-tile shapes without a specialization.
fn step_dynamic<P: Probe>(a: StepArgs<'_>, mt: usize, nt: usize, r_o: &mut [f32], probe: &mut P) {
    let mut r_f = [vec![0.0f32; mt], vec![0.0f32; mt]];
    let mut r_i = [vec![0.0f32; nt], vec![0.0f32; nt]];
    let mut cur = 0;
    if a.prefetch {
        load_vector(&mut r_f[0], a.s_f, a.m0, a.m_b, a.vectorized, probe);
        load_vector(&mut r_i[0], a.s_i, a.n0, a.n_b, a.vectorized, probe);
        for kp in 1..a.k_b {
            let nxt = cur ^ 1;
            load_vector(
                &mut r_f[nxt],
                a.s_f,
                kp * a.m_b + a.m0,
                a.m_b,
                a.vectorized,
                probe,
            );
            load_vector(
                &mut r_i[nxt],
                a.s_i,
                kp * a.n_b + a.n0,
                a.n_b,
                a.vectorized,
                probe,
            );
            probe.register_prefetch();
            micro_kernel(&r_f[cur], &r_i[cur], r_o);
            probe.micro_kernel();
            cur = nxt;
        }
        micro_kernel(&r_f[cur], &r_i[cur], r_o);
        probe.micro_kernel();
    } else {
        for kp in 0..a.k_b {
            load_vector(
                &mut r_f[0],
                a.s_f,
                kp * a.m_b + a.m0,
                a.m_b,
                a.vectorized,
                probe,
            );
            load_vector(
                &mut r_i[0],
                a.s_i,
                kp * a.n_b + a.n0,
                a.n_b,
                a.vectorized,
                probe,
            );
            micro_kernel(&r_f[0], &r_i[0], r_o);
            probe.micro_kernel();
        }
    }
}

type StepFn<P> = fn(StepArgs<'_>, &mut [f32], &mut P);

fn step_portable<const MT: usize, const NT: usize, P: Probe>(
    a: StepArgs<'_>,
    r_o: &mut [f32],
    probe: &mut P,
) {
    step_fixed::<MT, NT, P>(a, r_o, probe)
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::*;

    #[target_feature(enable = "avx2")]
    unsafe fn step_avx2_impl<const MT: usize, const NT: usize, P: Probe>(
        a: StepArgs<'_>,
        r_o: &mut [f32],
        probe: &mut P,
    ) {
        step_fixed::<MT, NT, P>(a, r_o, probe)
    }

    /// Only handed out after runtime detection of AVX2.
    pub(super) fn step_avx2<const MT: usize, const NT: usize, P: Probe>(
        a: StepArgs<'_>,
        r_o: &mut [f32],
        probe: &mut P,
    ) {
        // SAFETY: `select_step` returns this function only when AVX2 is available.
        unsafe { step_avx2_impl::<MT, NT, P>(a, r_o, probe) }
    }

    /// `NT` must be a multiple of 8 and at most 16; the panel rows must keep
    /// every `r_i` load 8-aligned.
    #[target_feature(enable = "avx2")]
    unsafe fn step_simd_impl<const MT: usize, const NT: usize, P: Probe>(
        a: StepArgs<'_>,
        r_o: &mut [f32],
        probe: &mut P,
    ) {
        use std::arch::x86_64::*;
        let nv = NT / VEC_WIDTH;
        assert!(NT.is_multiple_of(VEC_WIDTH) && nv <= 2 && r_o.len() == MT * NT);
        assert!(a.k_b >= 1 && (a.k_b - 1) * a.n_b + a.n0 + NT <= a.s_i.len());
        let o = r_o.as_mut_ptr();
        let si = a.s_i.as_ptr();
        let mut acc = [[_mm256_setzero_ps(); 2]; MT];
        for (m, row) in acc.iter_mut().enumerate() {
            for (v, x) in row.iter_mut().take(nv).enumerate() {
                *x = _mm256_loadu_ps(o.add(m * NT + v * VEC_WIDTH));
            }
        }
        let mut r_f = [[0.0f32; MT]; 2];
        macro_rules! load_i {
            ($kp:expr) => {{
                let p = si.add($kp * a.n_b + a.n0);
                probe.scratch_read(NT as u64);
                let mut r = [_mm256_setzero_ps(); 2];
                for (v, x) in r.iter_mut().take(nv).enumerate() {
                    *x = _mm256_loadu_ps(p.add(v * VEC_WIDTH));
                    probe.vector_load(true);
                }
                r
            }};
        }
        macro_rules! load_f {
            ($dst:expr, $kp:expr) => {
                load_vector($dst, a.s_f, $kp * a.m_b + a.m0, a.m_b, true, probe)
            };
        }
        macro_rules! update {
            ($f:expr, $ri:expr) => {{
                for (m, row) in acc.iter_mut().enumerate() {
                    let b = _mm256_set1_ps($f[m]);
                    for (v, x) in row.iter_mut().take(nv).enumerate() {
                        *x = _mm256_add_ps(*x, _mm256_mul_ps(b, $ri[v]));
                    }
                }
                probe.micro_kernel();
            }};
        }
        if a.prefetch {
            let mut cur_i = load_i!(0);
            load_f!(&mut r_f[0], 0);
            let mut c = 0;
            for kp in 1..a.k_b {
                let next_i = load_i!(kp);
                load_f!(&mut r_f[c ^ 1], kp);
                probe.register_prefetch();
                update!(r_f[c], cur_i);
                cur_i = next_i;
                c ^= 1;
            }
            update!(r_f[c], cur_i);
        } else {
            for kp in 0..a.k_b {
                let r_i = load_i!(kp);
                load_f!(&mut r_f[0], kp);
                update!(r_f[0], r_i);
            }
        }
        for (m, row) in acc.iter().enumerate() {
            for (v, x) in row.iter().take(nv).enumerate() {
                _mm256_storeu_ps(o.add(m * NT + v * VEC_WIDTH), *x);
            }
        }
    }

    pub(super) fn step_simd<const MT: usize, const NT: usize, P: Probe>(
        a: StepArgs<'_>,
        r_o: &mut [f32],
        probe: &mut P,
    ) {
        // SAFETY: handed out by `select_step` only when AVX2 is available.
        unsafe { step_simd_impl::<MT, NT, P>(a, r_o, probe) }
    }

    pub(super) fn has_avx2() -> bool {
        std::is_x86_feature_detected!("avx2")
    }
}

macro_rules! dispatch_tiles {
    ($mt:expr, $nt:expr, $f:ident, $P:ty; $(($m:literal, $n:literal)),* $(,)?) => {
        match ($mt, $nt) {
            $(($m, $n) => Some($f::<$m, $n, $P> as StepFn<$P>),)*
            _ => None,
        }
    };
}

macro_rules! tile_table {
    ($mt:expr, $nt:expr, $f:ident, $P:ty) => {
        dispatch_tiles!($mt, $nt, $f, $P;
            (1, 1), (1, 2), (1, 4), (1, 8), (1, 16),
            (2, 1), (2, 2), (2, 4), (2, 8), (2, 16),
            (4, 1), (4, 2), (4, 4), (4, 8), (4, 16),
            (8, 1), (8, 2), (8, 4), (8, 8), (8, 16),
            (16, 1), (16, 2), (16, 4), (16, 8), (16, 16),
        )
    };
}

/// Specialized step for the plan's micro-tile, if one exists.
fn select_step<P: Probe>(plan: &TilePlan) -> Option<StepFn<P>> {
    let (mt, nt) = (plan.m_t, plan.n_t);
    #[cfg(target_arch = "x86_64")]
    if x86::has_avx2() {
        use x86::{step_avx2, step_simd};
        let aligned = plan.n_b.is_multiple_of(VEC_WIDTH) && nt % VEC_WIDTH == 0;
        if plan.toggles.vectorized_load && aligned {
            let simd = dispatch_tiles!(mt, nt, step_simd, P;
                (1, 8), (2, 8), (4, 8), (6, 8), (8, 8), (12, 8), (16, 8),
                (1, 16), (2, 16), (4, 16), (6, 16), (8, 16),
            );
            if simd.is_some() {
                return simd;
            }
        }
        return tile_table!(mt, nt, step_avx2, P);
    }
    tile_table!(mt, nt, step_portable, P)
}

fn run_step<P: Probe>(
    step: Option<StepFn<P>>,
    plan: &TilePlan,
    args: StepArgs<'_>,
    r_o: &mut [f32],
    probe: &mut P,
) {
    probe.enter_k_loop();
    match step {
        Some(f) => f(args, r_o, probe),
        None => step_dynamic(args, plan.m_t, plan.n_t, r_o, probe),
    }
    probe.exit_k_loop();
}

fn step_args<'a>(scratch: &'a ScratchBuffers, buf: usize, worker: usize) -> StepArgs<'a> {
    let p = &scratch.plan;
    let per_row = p.n_b / p.n_t;
    StepArgs {
        s_f: &scratch.s_f[buf],
        s_i: &scratch.s_i[buf],
        m_b: p.m_b,
        n_b: p.n_b,
        k_b: p.k_b,
        m0: (worker / per_row) * p.m_t,
        n0: (worker % per_row) * p.n_t,
        vectorized: p.toggles.vectorized_load,
        prefetch: p.toggles.prefetch_double_buffer,
    }
}

/// Runs work item `worker` over the K-block staged in buffer `buf`,
/// accumulating into its tile. With prefetching on, the register pair for
/// `k' + 1` is loaded before the update for `k'`.
pub fn pipeline_step(
    scratch: &mut ScratchBuffers,
    buf: usize,
    worker: usize,
    counters: &mut KernelCounters,
) -> Result<()> {
    let plan = scratch.plan;
    if buf >= scratch.buffers() || worker >= plan.workers_per_block() {
        return Err(ConvError::Index(format!(
            "buffer {buf} / work item {worker} out of range"
        )));
    }
    let len = plan.m_t * plan.n_t;
    let mut tile = scratch.tiles[worker * len..(worker + 1) * len].to_vec();
    let step = select_step::<KernelCounters>(&plan);
    run_step(
        step,
        &plan,
        step_args(scratch, buf, worker),
        &mut tile,
        counters,
    );
    scratch.tiles[worker * len..(worker + 1) * len].copy_from_slice(&tile);
    Ok(())
}

/// Computes one `m_b × n_b` block; returns its accumulator tiles.
fn run_block<P: Probe>(
    ops: &Operands<'_>,
    plan: &TilePlan,
    bx: usize,
    by: usize,
    probe: &mut P,
) -> Vec<f32> {
    let mut scratch = ScratchBuffers::new(plan);
    let plan = scratch.plan;
    let k_blocks = ops.k_blocks(&plan);
    let double = plan.toggles.prefetch_double_buffer;
    let step = select_step::<P>(&plan);

    // Work items entirely past the matrix edge only ever see zero padding.
    let m_valid = ops.dims.m - bx * plan.m_b;
    let n_valid = ops.dims.n - by * plan.n_b;
    let rows = (plan.m_b / plan.m_t).min(m_valid.div_ceil(plan.m_t));
    let cols = (plan.n_b / plan.n_t).min(n_valid.div_ceil(plan.n_t));
    let per_row = plan.n_b / plan.n_t;
    let len = plan.m_t * plan.n_t;

    {
        let ScratchBuffers { s_i, s_f, .. } = &mut scratch;
        stage(ops, &plan, (bx, by, 0), &mut s_i[0], &mut s_f[0], probe);
        probe.panel_staged(false);
    }
    let mut cur = 0;
    for kk in 0..k_blocks {
        let last = kk + 1 == k_blocks;
        if double && !last {
            let ScratchBuffers { s_i, s_f, .. } = &mut scratch;
            stage(
                ops,
                &plan,
                (bx, by, kk + 1),
                &mut s_i[cur ^ 1],
                &mut s_f[cur ^ 1],
                probe,
            );
            probe.panel_staged(true);
        }
        // Panels for `cur` are complete from here on.
        let ScratchBuffers {
            s_i, s_f, tiles, ..
        } = &mut scratch;
        for wm in 0..rows {
            for wn in 0..cols {
                let worker = wm * per_row + wn;
                let args = StepArgs {
                    s_f: &s_f[cur],
                    s_i: &s_i[cur],
                    m_b: plan.m_b,
                    n_b: plan.n_b,
                    k_b: plan.k_b,
                    m0: wm * plan.m_t,
                    n0: wn * plan.n_t,
                    vectorized: plan.toggles.vectorized_load,
                    prefetch: double,
                };
                run_step(step, &plan, args, &mut tiles[worker * len..][..len], probe);
            }
        }
        if !last {
            if double {
                cur ^= 1;
            } else {
                let ScratchBuffers { s_i, s_f, .. } = &mut scratch;
                stage(
                    ops,
                    &plan,
                    (bx, by, kk + 1),
                    &mut s_i[0],
                    &mut s_f[0],
                    probe,
                );
                probe.panel_staged(false);
            }
        }
    }
    for _ in 0..rows * cols {
        probe.writeback();
    }
    scratch.tiles
}

fn compute<P: Probe>(
    win: &Im2winTensor,
    filter: &Tensor4,
    plan: &TilePlan,
) -> Result<(Tensor4, P)> {
    plan.validate()?;
    let ops = Operands::new(win, filter)?;
    let plan = plan.effective();
    let GemmDims { m, n, .. } = ops.dims;
    let bxs = m.div_ceil(plan.m_b);
    let bys = n.div_ceil(plan.n_b);

    let blocks: Vec<(usize, Vec<f32>, P)> = (0..bxs * bys)
        .into_par_iter()
        .map(|b| {
            let (by, bx) = (b / bxs, b % bxs);
            let mut probe = P::default();
            let tiles = run_block(&ops, &plan, bx, by, &mut probe);
            (b, tiles, probe)
        })
        .collect();

    let shape = *win.shape();
    let plane = shape.h_out * shape.w_out;
    let mut out = Tensor4::zeros(shape.output_dims())?;
    let dst = out.data_mut();
    let per_row = plan.n_b / plan.n_t;
    let len = plan.m_t * plan.n_t;
    let mut total = P::default();
    for (b, tiles, probe) in blocks {
        let (by, bx) = (b / bxs, b % bxs);
        for (worker, tile) in tiles.chunks_exact(len).enumerate() {
            let m0 = bx * plan.m_b + (worker / per_row) * plan.m_t;
            let n0 = by * plan.n_b + (worker % per_row) * plan.n_t;
            for (a, row) in tile.chunks_exact(plan.n_t).enumerate() {
                let mg = m0 + a;
                if mg >= m {
                    break;
                }
                for (bb, &v) in row.iter().enumerate() {
                    let ng = n0 + bb;
                    if ng >= n {
                        break;
                    }
                    let (i_n, rem) = (ng / plane, ng % plane);
                    dst[(i_n * m + mg) * plane + rem] = v;
                }
            }
        }
        total.merge(probe);
    }
    Ok((out, total))
}

/// Compute phase of [`conv_im2win_opt`] on an existing im2win tensor.
pub fn im2win_opt_compute(
    win: &Im2winTensor,
    filter: &Tensor4,
    plan: &TilePlan,
) -> Result<Tensor4> {
    compute::<NoProbe>(win, filter, plan).map(|(out, _)| out)
}

/// High-performance im2win convolution.
pub fn conv_im2win_opt(
    input: &Tensor4,
    filter: &Tensor4,
    p: &ConvParams,
    plan: &TilePlan,
) -> Result<Tensor4> {
    plan.validate()?;
    check_filter(filter, p)?;
    let win = im2win(input, p)?;
    im2win_opt_compute(&win, filter, plan)
}

/// [`conv_im2win_opt`] with event counters.
pub fn conv_im2win_opt_instrumented(
    input: &Tensor4,
    filter: &Tensor4,
    p: &ConvParams,
    plan: &TilePlan,
) -> Result<(Tensor4, KernelCounters)> {
    plan.validate()?;
    check_filter(filter, p)?;
    let win = im2win(input, p)?;
    compute::<KernelCounters>(&win, filter, plan)
}

/// [`default_plan`] for a concrete problem.
pub fn default_plan_for(shape: &ConvShape) -> TilePlan {
    default_plan(GemmDims::from_shape(shape))
}
