//! Effective action, discounted solutions and weak KAM solutions.
//!
//! Two independent routes give the effective action: Karp's minimum cycle
//! mean on the kernel graph, and the discounted limit `tau delta u_{tau,delta}`
//! as `delta -> 0`.

use std::time::Instant;

use log::debug;
use rayon::prelude::*;

use crate::error::{Result, WeakKamError};
use crate::grid::{format_f64, GridFunction, PeriodicGrid};
use crate::laxoleinik::{backward_lax_oleinik, discount_factor, tabulate_kernel, ActionKernel, ArgminField};
use crate::models::{estimate_bounds, AprioriBounds, DiscreteAction, LagrangianModel};

pub const DEFAULT_MAX_ITER: usize = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Karp,
    Discounted,
    DiscountedLimit,
    MeanPerSite,
    WeakKam,
    Selected,
}

impl Route {
    pub fn as_str(&self) -> &'static str {
        match self {
            Route::Karp => "karp",
            Route::Discounted => "discounted",
            Route::DiscountedLimit => "discounted-limit",
            Route::MeanPerSite => "mean-per-site",
            Route::WeakKam => "weak-kam",
            Route::Selected => "selected",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub route: Route,
    pub tau: f64,
    pub delta: Option<f64>,
    /// Nodes per axis.
    pub n: usize,
    pub effective_action: f64,
    /// `effective_action / tau`, the approximation of `-H(P)`.
    pub normalized_effective: f64,
    pub iterations: usize,
    pub final_residual: f64,
    /// Seconds.
    pub wall_time: f64,
}

impl SolveReport {
    pub const CSV_HEADER: [&'static str; 9] = [
        "route",
        "tau",
        "delta",
        "n",
        "effective_action",
        "normalized_effective",
        "iterations",
        "final_residual",
        "wall_time",
    ];

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.route.as_str().to_string(),
            format_f64(self.tau),
            self.delta.map(format_f64).unwrap_or_default(),
            self.n.to_string(),
            format_f64(self.effective_action),
            format_f64(self.normalized_effective),
            self.iterations.to_string(),
            format_f64(self.final_residual),
            format_f64(self.wall_time),
        ]
    }
}

/// Weighted digraph that can relax one min-plus step at a time.
pub trait MinPlusGraph: Sync {
    fn num_nodes(&self) -> usize;
    /// `next[v] = min over edges (u -> v) of prev[u] + w`, with the edge code in `pred`.
    fn relax(&self, prev: &[f64], next: &mut [f64], pred: &mut [u32]);
    fn edge_source(&self, v: usize, code: u32) -> usize;
    fn edge_weight(&self, v: usize, code: u32) -> f64;
}

impl MinPlusGraph for ActionKernel {
    fn num_nodes(&self) -> usize {
        self.grid().len()
    }

    fn relax(&self, prev: &[f64], next: &mut [f64], pred: &mut [u32]) {
        self.relax_into(prev, 1.0, next, Some(pred));
    }

    fn edge_source(&self, v: usize, code: u32) -> usize {
        self.source(v, code as usize)
    }

    fn edge_weight(&self, v: usize, code: u32) -> f64 {
        self.weight(self.source(v, code as usize), code as usize)
    }
}

/// Plain digraph stored as incoming adjacency lists.
#[derive(Debug, Clone)]
pub struct Digraph {
    incoming: Vec<Vec<(usize, f64)>>,
}

impl Digraph {
    pub fn new(nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut incoming = vec![Vec::new(); nodes];
        for &(u, v, w) in edges {
            if u >= nodes || v >= nodes || !w.is_finite() {
                return Err(WeakKamError::InvalidInput(format!("bad edge ({u}, {v}, {w})")));
            }
            incoming[v].push((u, w));
        }
        Ok(Self { incoming })
    }
}

impl MinPlusGraph for Digraph {
    fn num_nodes(&self) -> usize {
        self.incoming.len()
    }

    fn relax(&self, prev: &[f64], next: &mut [f64], pred: &mut [u32]) {
        for v in 0..self.incoming.len() {
            let mut best = f64::INFINITY;
            let mut code = 0;
            for (c, &(u, w)) in self.incoming[v].iter().enumerate() {
                let val = prev[u] + w;
                if val < best {
                    best = val;
                    code = c as u32;
                }
            }
            next[v] = best;
            pred[v] = code;
        }
    }

    fn edge_source(&self, v: usize, code: u32) -> usize {
        self.incoming[v][code as usize].0
    }

    fn edge_weight(&self, v: usize, code: u32) -> f64 {
        self.incoming[v][code as usize].1
    }
}

/// A cycle as its edges in forward order: `(source node, edge code at the target)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCycle {
    /// Karp's value `min_v max_k (D_n(v) - D_k(v)) / (n - k)`.
    pub karp_value: f64,
    /// Mean weight of the recovered cycle.
    pub mean: f64,
    pub nodes: Vec<usize>,
    pub codes: Vec<u32>,
}

/// Karp's minimum mean cycle with a virtual source joined to every node.
pub fn karp_min_mean_cycle<G: MinPlusGraph>(g: &G) -> Option<MeanCycle> {
    let n = g.num_nodes();
    let mut d = vec![f64::INFINITY; (n + 1) * n];
    let mut pred = vec![0u32; (n + 1) * n];
    d[..n].iter_mut().for_each(|v| *v = 0.0);
    for k in 1..=n {
        let (done, rest) = d.split_at_mut(k * n);
        g.relax(&done[(k - 1) * n..], &mut rest[..n], &mut pred[k * n..(k + 1) * n]);
    }
    let dn = &d[n * n..];
    let (best_v, karp_value) = (0..n)
        .into_par_iter()
        .filter(|&v| dn[v].is_finite())
        .map(|v| {
            let worst = (0..n)
                .filter(|&k| d[k * n + v].is_finite())
                .map(|k| (dn[v] - d[k * n + v]) / (n - k) as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            (v, worst)
        })
        .reduce(|| (usize::MAX, f64::INFINITY), |a, b| if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
    if best_v == usize::MAX {
        return None;
    }
    // Walk the optimal n-step walk backwards until a node repeats.
    let mut seen = vec![usize::MAX; n];
    let mut walk = Vec::with_capacity(n + 1);
    let mut codes = Vec::with_capacity(n);
    let mut v = best_v;
    let mut level = n;
    loop {
        if seen[v] != usize::MAX {
            let start = seen[v];
            let mut nodes: Vec<usize> = walk[start + 1..].to_vec();
            nodes.push(v);
            let mut cyc_codes: Vec<u32> = codes[start..].to_vec();
            nodes.reverse();
            cyc_codes.reverse();
            // edge i runs nodes[i] -> nodes[i+1]; its code is stored at the target
            let len = cyc_codes.len();
            let total: f64 = (0..len).map(|i| g.edge_weight(nodes[(i + 1) % len], cyc_codes[i])).sum();
            return Some(MeanCycle { karp_value, mean: total / len as f64, nodes, codes: cyc_codes });
        }
        seen[v] = walk.len();
        walk.push(v);
        if level == 0 {
            return None;
        }
        let c = pred[level * n + v];
        codes.push(c);
        v = g.edge_source(v, c);
        level -= 1;
    }
}

/// Minimizing cycle on the kernel graph as `(source node, offset index)` edges.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCycle {
    pub edges: Vec<(usize, usize)>,
    pub mean: f64,
}

/// Exact minimum cycle mean of the kernel graph.
pub fn effective_action_karp(kernel: &ActionKernel) -> Result<(SolveReport, KernelCycle)> {
    let start = Instant::now();
    if !kernel.is_strongly_connected() {
        return Err(WeakKamError::DisconnectedGraph);
    }
    let c = karp_min_mean_cycle(kernel).ok_or(WeakKamError::DisconnectedGraph)?;
    let edges: Vec<(usize, usize)> = c.nodes.iter().zip(&c.codes).map(|(&s, &k)| (s, k as usize)).collect();
    let tau = kernel.tau();
    let report = SolveReport {
        route: Route::Karp,
        tau,
        delta: None,
        n: kernel.grid().nodes_per_axis(),
        effective_action: c.mean,
        normalized_effective: c.mean / tau,
        iterations: kernel.grid().len(),
        final_residual: (c.mean - c.karp_value).abs(),
        wall_time: start.elapsed().as_secs_f64(),
    };
    debug!("karp: n={} mean={:e} cycle length {}", report.n, c.mean, edges.len());
    Ok((report, KernelCycle { edges, mean: c.mean }))
}

/// Effective action of the kernel graph. Every cycle mean lies above the
/// smallest edge weight, so when a self-loop attains that weight its value is
/// exact and Karp's `O(V E)` recursion is skipped.
pub fn effective_action(kernel: &ActionKernel) -> Result<f64> {
    if !kernel.is_strongly_connected() {
        return Err(WeakKamError::DisconnectedGraph);
    }
    let (_, loop_min) = kernel.min_self_loop();
    if loop_min <= kernel.min_weight() {
        return Ok(loop_min);
    }
    Ok(effective_action_karp(kernel)?.0.effective_action)
}

/// `[E(1), ..., E(steps)]` with `E(k) = min_y T^k[0](y)`, the minimal action of
/// chains of length `k`. The sequence is superadditive and `E(k) / k` tends to
/// the effective action.
pub fn mean_per_site_sequence(kernel: &ActionKernel, steps: usize) -> Vec<f64> {
    let mut u = vec![0.0; kernel.grid().len()];
    let mut next = vec![0.0; u.len()];
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        kernel.relax_values(&u, 1.0, &mut next);
        std::mem::swap(&mut u, &mut next);
        out.push(u.iter().copied().fold(f64::INFINITY, f64::min));
    }
    out
}

/// Effective action estimated as `E(k) / k` after `steps` steps. Superadditivity
/// brackets the error by `max_k E(k)/k - E(steps)/steps`, reported as the residual.
pub fn effective_action_mean_per_site(kernel: &ActionKernel, steps: usize) -> Result<SolveReport> {
    if steps == 0 {
        return Err(WeakKamError::InvalidInput("mean-per-site needs at least one step".into()));
    }
    let start = Instant::now();
    let seq = mean_per_site_sequence(kernel, steps);
    let last = seq[steps - 1] / steps as f64;
    // Fekete: the limit is sup_k E(k)/k
    let best = seq.iter().enumerate().map(|(k, e)| e / (k + 1) as f64).fold(f64::NEG_INFINITY, f64::max);
    Ok(SolveReport {
        route: Route::MeanPerSite,
        tau: kernel.tau(),
        delta: None,
        n: kernel.grid().nodes_per_axis(),
        effective_action: best,
        normalized_effective: best / kernel.tau(),
        iterations: steps,
        final_residual: best - last,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Fixed-point iteration of the discounted operator from `init` until the
/// sup-norm step is at most `threshold`.
pub(crate) fn iterate_discounted(
    kernel: &ActionKernel,
    factor: f64,
    init: Vec<f64>,
    threshold: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, f64)> {
    let mut u = init;
    let mut next = vec![0.0; u.len()];
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        kernel.relax_values(&u, factor, &mut next);
        residual = u.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut u, &mut next);
        if residual <= threshold {
            return Ok((u, it, residual));
        }
    }
    Err(WeakKamError::MaxIterExceeded { iterations: max_iter, residual })
}

/// Banach iteration for `u = T_delta[u]` starting from zero; stops when
/// `|u_{k+1} - u_k| <= tol tau delta`, so the fixed-point error is below `tol`.
pub fn solve_discounted(kernel: &ActionKernel, delta: f64, tol: f64, max_iter: usize) -> Result<(GridFunction, SolveReport)> {
    let start = Instant::now();
    let factor = discount_factor(kernel.tau(), delta)?;
    let td = kernel.tau() * delta;
    let (u, iterations, residual) = iterate_discounted(kernel, factor, vec![0.0; kernel.grid().len()], tol * td, max_iter)?;
    let u = GridFunction::from_raw(*kernel.grid(), u);
    let e = td * u.mean();
    let report = SolveReport {
        route: Route::Discounted,
        tau: kernel.tau(),
        delta: Some(delta),
        n: kernel.grid().nodes_per_axis(),
        effective_action: e,
        normalized_effective: e / kernel.tau(),
        iterations,
        final_residual: residual,
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok((u, report))
}

/// Solves along a decreasing delta schedule, warm-starting each entry from
/// the previous one shifted by the change in `E / (tau delta)`.
struct DiscountedSweep<'a> {
    kernel: &'a ActionKernel,
    tol: f64,
    prev: Option<(f64, Vec<f64>)>,
    iterations: usize,
    residual: f64,
}

impl<'a> DiscountedSweep<'a> {
    fn new(kernel: &'a ActionKernel, tol: f64) -> Self {
        Self { kernel, tol, prev: None, iterations: 0, residual: 0.0 }
    }

    fn solve(&mut self, delta: f64) -> Result<Vec<f64>> {
        let tau = self.kernel.tau();
        let factor = discount_factor(tau, delta)?;
        let td = tau * delta;
        let init = match &self.prev {
            None => vec![0.0; self.kernel.grid().len()],
            Some((d0, u0)) => {
                let e = tau * d0 * u0.iter().sum::<f64>() / u0.len() as f64;
                let shift = e / td - e / (tau * d0);
                u0.iter().map(|v| v + shift).collect()
            }
        };
        let (u, it, res) = iterate_discounted(self.kernel, factor, init, self.tol * td, DEFAULT_MAX_ITER)?;
        debug!("discounted solve tau={tau} delta={delta}: {it} iterations");
        self.iterations += it;
        self.residual = res;
        self.prev = Some((delta, u.clone()));
        Ok(u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedLimit {
    pub report: SolveReport,
    pub deltas: Vec<f64>,
    /// `mean(tau delta u_{tau,delta})` per schedule entry.
    pub estimates: Vec<f64>,
    /// `max - min` of `tau delta u_{tau,delta}` per schedule entry.
    pub spreads: Vec<f64>,
}

/// Effective action from the discounted solutions, extrapolated linearly in
/// delta across the last two schedule entries.
pub fn effective_action_discounted(kernel: &ActionKernel, schedule: &[f64], tol: f64) -> Result<DiscountedLimit> {
    if schedule.is_empty() {
        return Err(WeakKamError::InvalidInput("empty delta schedule".into()));
    }
    let start = Instant::now();
    let tau = kernel.tau();
    let mut sweep = DiscountedSweep::new(kernel, tol);
    let mut estimates = Vec::new();
    let mut spreads = Vec::new();
    for &delta in schedule {
        let u = sweep.solve(delta)?;
        let td = tau * delta;
        let g = GridFunction::from_raw(*kernel.grid(), u);
        estimates.push(td * g.mean());
        spreads.push(td * g.oscillation());
    }
    let k = estimates.len();
    let value = if k >= 2 {
        let (d1, d0) = (schedule[k - 1], schedule[k - 2]);
        (d0 * estimates[k - 1] - d1 * estimates[k - 2]) / (d0 - d1)
    } else {
        estimates[0]
    };
    let report = SolveReport {
        route: Route::DiscountedLimit,
        tau,
        delta: schedule.last().copied(),
        n: kernel.grid().nodes_per_axis(),
        effective_action: value,
        normalized_effective: value / tau,
        iterations: sweep.iterations,
        final_residual: spreads[k - 1],
        wall_time: start.elapsed().as_secs_f64(),
    };
    Ok(DiscountedLimit { report, deltas: schedule.to_vec(), estimates, spreads })
}

/// `delta_k = 0.4 * 2^{-k}` for `k = 0..len`.
pub fn default_delta_schedule(len: usize) -> Vec<f64> {
    (0..len).map(|k| 0.4 * 0.5f64.powi(k as i32)).collect()
}

/// `u(y) + E - min_x { u(x) + E(x, y) }` at every node.
pub fn calibration_defect(u: &GridFunction, kernel: &ActionKernel, effective_action: f64) -> Result<GridFunction> {
    let (t, _) = backward_lax_oleinik(u, kernel)?;
    let v = u.values().iter().zip(t.values()).map(|(a, b)| a + effective_action - b).collect();
    Ok(GridFunction::from_raw(*u.grid(), v))
}

#[derive(Debug, Clone)]
pub struct WeakKamSolution {
    pub u: GridFunction,
    pub effective_action: f64,
    pub calibration_defect: GridFunction,
    /// Minimizing offsets of `T[u]`, for chain extraction.
    pub argmin: ArgminField,
    pub report: SolveReport,
    /// `|w_k - w_{k-1}|` along the delta schedule.
    pub cauchy_gaps: Vec<f64>,
    pub deltas: Vec<f64>,
}

fn discounted_cauchy_limit(kernel: &ActionKernel, schedule: &[f64], tol: f64, route: Route, normalize: bool) -> Result<WeakKamSolution> {
    if schedule.len() < 2 {
        return Err(WeakKamError::InvalidInput("delta schedule needs at least two entries".into()));
    }
    let start = Instant::now();
    let ebar = effective_action(kernel)?;
    let tau = kernel.tau();
    let mut sweep = DiscountedSweep::new(kernel, 0.1 * tol);
    let mut gaps = Vec::new();
    let mut prev: Option<GridFunction> = None;
    for (k, &delta) in schedule.iter().enumerate() {
        let u = sweep.solve(delta)?;
        let shift = ebar / (tau * delta);
        let w = GridFunction::from_raw(*kernel.grid(), u.into_iter().map(|v| v - shift).collect());
        let gap = prev.as_ref().map(|p| w.sup_norm_diff(p)).transpose()?;
        prev = Some(w);
        if let Some(gap) = gap {
            gaps.push(gap);
            let w = prev.as_ref().expect("set above");
            let defect = calibration_defect(w, kernel, ebar)?;
            let worst = defect.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gap <= tol && worst <= tol {
                let u = if normalize { w.normalized() } else { w.clone() };
                let defect = calibration_defect(&u, kernel, ebar)?;
                let (_, argmin) = backward_lax_oleinik(&u, kernel)?;
                let report = SolveReport {
                    route,
                    tau,
                    delta: Some(delta),
                    n: kernel.grid().nodes_per_axis(),
                    effective_action: ebar,
                    normalized_effective: ebar / tau,
                    iterations: sweep.iterations,
                    final_residual: gap,
                    wall_time: start.elapsed().as_secs_f64(),
                };
                return Ok(WeakKamSolution {
                    u,
                    effective_action: ebar,
                    calibration_defect: defect,
                    argmin,
                    report,
                    cauchy_gaps: gaps,
                    deltas: schedule[..=k].to_vec(),
                });
            }
        }
    }
    Err(WeakKamError::ScheduleExhausted { gap: gaps.last().copied().unwrap_or(f64::INFINITY) })
}

/// Weak KAM solution as the limit of `u_{tau,delta} - E / (tau delta)`,
/// normalized to minimum zero.
pub fn solve_weak_kam(kernel: &ActionKernel, schedule: &[f64], tol: f64) -> Result<WeakKamSolution> {
    discounted_cauchy_limit(kernel, schedule, tol, Route::WeakKam, true)
}

/// The same limit without normalization: the solution selected by vanishing discount.
pub fn selected_solution(kernel: &ActionKernel, schedule: &[f64], tol: f64) -> Result<WeakKamSolution> {
    discounted_cauchy_limit(kernel, schedule, tol, Route::Selected, false)
}

/// `E - min over windowed pairs { E(x, y) - u(y) + u(x) }`; at most zero for a sub-action.
pub fn supinf_gap(u: &GridFunction, kernel: &ActionKernel, effective_action: f64) -> Result<f64> {
    if u.grid() != kernel.grid() {
        return Err(WeakKamError::GridMismatch);
    }
    let uv = u.values();
    let m = kernel.num_offsets();
    let inf = (0..kernel.grid().len())
        .into_par_iter()
        .map(|x| {
            (0..m)
                .map(|k| kernel.weight(x, k) - uv[kernel.target(x, k)] + uv[x])
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| f64::INFINITY, f64::min);
    Ok(effective_action - inf)
}

#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub safety: f64,
    pub schedule: Vec<f64>,
    pub tol: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { safety: 1.5, schedule: default_delta_schedule(8), tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub tau: f64,
    pub n: usize,
    pub effective_action: f64,
    pub normalized_effective: f64,
    pub u: GridFunction,
    pub lipschitz: f64,
    pub max_jump: f64,
    pub bounds: AprioriBounds,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// `|u_{k+1} - u_k|` compared on the coarser of the two grids.
    pub cauchy_gaps: Vec<f64>,
}

/// Effective action and weak KAM solution for each `(tau, n)` of a ladder.
pub fn continuum_limit_sweep(model: &LagrangianModel, momentum: &[f64], ladder: &[(f64, usize)], settings: &SweepSettings) -> Result<SweepResult> {
    let entries = ladder
        .par_iter()
        .map(|&(tau, n)| {
            let action = DiscreteAction::new(model.clone(), tau, momentum.to_vec())?;
            let bounds = estimate_bounds(&action, settings.safety)?;
            let grid = PeriodicGrid::new(model.dim(), n)?;
            let kernel = tabulate_kernel(&action, &grid, &bounds)?;
            let sol = solve_weak_kam(&kernel, &settings.schedule, settings.tol)?;
            Ok(SweepEntry {
                tau,
                n,
                effective_action: sol.effective_action,
                normalized_effective: sol.effective_action / tau,
                lipschitz: sol.u.discrete_lipschitz(),
                max_jump: sol.u.max_adjacent_jump(),
                u: sol.u,
                bounds,
                report: sol.report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cauchy_gaps = entries
        .windows(2)
        .map(|w| {
            let (a, b) = (&w[0].u, &w[1].u);
            let (coarse, fine) = if a.grid().nodes_per_axis() <= b.grid().nodes_per_axis() { (a, b) } else { (b, a) };
            fine.resample(coarse.grid())?.sup_norm_diff(coarse)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { entries, cauchy_gaps })
}
