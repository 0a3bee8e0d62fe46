//! Mañé potentials, minimizing measures and calibrated chains on the kernel graph.
//!
//! Measures live on edges `(node, offset)` of a kernel window. A measure is
//! holonomic when the mass leaving every node equals the mass entering it.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::Arc;

use log::debug;
use rayon::prelude::*;

use crate::error::{Result, WeakKamError};
use crate::grid::{format_f64, GridFunction, PeriodicGrid};
use crate::laxoleinik::{ActionKernel, ArgminField, OffsetSet};
use crate::solvers::{effective_action, effective_action_karp};

/// Sweep changes below this (times `1 + |E|`) count as stable.
const STABLE: f64 = 1e-12;
/// A sweep past the node count that still moves a value by more than this
/// exposes a negative reduced cycle.
const NEGATIVE_CYCLE: f64 = 1e-9;

/// Nonnegative weights on the edges `(node, offset index)` of a kernel window.
#[derive(Debug, Clone, PartialEq)]
pub struct HolonomicMeasure {
    grid: PeriodicGrid,
    offsets: Arc<OffsetSet>,
    weights: BTreeMap<(usize, usize), f64>,
}

impl HolonomicMeasure {
    /// Build from `((node, offset index), weight)` entries; repeated edges add up.
    pub fn new(grid: PeriodicGrid, offsets: Arc<OffsetSet>, entries: impl IntoIterator<Item = ((usize, usize), f64)>) -> Result<Self> {
        if offsets.dim() != grid.dim() {
            return Err(WeakKamError::GridMismatch);
        }
        let mut weights = BTreeMap::new();
        for ((node, k), w) in entries {
            if node >= grid.len() || k >= offsets.len() {
                return Err(WeakKamError::InvalidInput(format!("edge ({node}, {k}) is outside the grid or window")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(WeakKamError::InvalidInput(format!("measure weight {w} must be finite and nonnegative")));
            }
            if w > 0.0 {
                *weights.entry((node, k)).or_insert(0.0) += w;
            }
        }
        Ok(Self { grid, offsets, weights })
    }

    /// Uniform measure on the edges of a cycle.
    pub fn from_cycle(kernel: &ActionKernel, edges: &[(usize, usize)]) -> Result<Self> {
        if edges.is_empty() {
            return Err(WeakKamError::InvalidInput("a cycle needs at least one edge".into()));
        }
        let w = 1.0 / edges.len() as f64;
        Self::new(*kernel.grid(), kernel.offsets_arc().clone(), edges.iter().map(|&e| (e, w)))
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn offsets(&self) -> &OffsetSet {
        &self.offsets
    }

    /// `(node, offset index, weight)` over the support, in edge order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.weights.iter().map(|(&(x, k), &w)| (x, k, w))
    }

    pub fn support_len(&self) -> usize {
        self.weights.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.values().sum()
    }

    /// Projection on the starting node: `x -> sum_o weight(x, o)`.
    pub fn marginal(&self) -> GridFunction {
        let mut m = vec![0.0; self.grid.len()];
        for (&(x, _), &w) in &self.weights {
            m[x] += w;
        }
        GridFunction::from_raw(self.grid, m)
    }

    /// `max_x |sum_o weight(x, o) - sum_o weight(x - o, o)|`.
    pub fn holonomy_residual(&self) -> f64 {
        let mut balance = vec![0.0; self.grid.len()];
        for (&(x, k), &w) in &self.weights {
            balance[x] += w;
            balance[self.grid.shift(x, self.offsets.get(k))] -= w;
        }
        balance.iter().fold(0.0, |m, b| m.max(b.abs()))
    }

    /// `sum weight * E` with `E` read from `kernel`.
    pub fn action(&self, kernel: &ActionKernel) -> Result<f64> {
        if kernel.grid() != &self.grid {
            return Err(WeakKamError::GridMismatch);
        }
        let same = Arc::ptr_eq(kernel.offsets_arc(), &self.offsets) || kernel.offsets() == &*self.offsets;
        let mut total = 0.0;
        for (&(x, k), &w) in &self.weights {
            let kk = if same {
                k
            } else {
                kernel
                    .offsets()
                    .index_of(self.offsets.get(k))
                    .ok_or_else(|| WeakKamError::InvalidInput("measure edge outside the kernel window".into()))?
            };
            total += w * kernel.weight(x, kk);
        }
        Ok(total)
    }

    /// `sum_x marginal(x) f(x)`.
    pub fn integrate(&self, f: &GridFunction) -> Result<f64> {
        if f.grid() != &self.grid {
            return Err(WeakKamError::GridMismatch);
        }
        Ok(self.weights.iter().map(|(&(x, _), &w)| w * f.values()[x]).sum())
    }

    /// CSV with header `node_index,offset,weight`; offset components are joined by `;`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["node_index", "offset", "weight"])?;
        for (&(x, k), &m) in &self.weights {
            let o: Vec<String> = self.offsets.get(k).iter().map(|c| c.to_string()).collect();
            w.write_record([x.to_string(), o.join(";"), format_f64(m)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One column `Phi(source, .)` of the Mañé potential together with both
/// readings of the return value at the source.
#[derive(Debug, Clone)]
pub struct ManeColumn {
    /// `Phi(source, y)`; at `y = source` the return value capped below by 0.
    pub phi: GridFunction,
    /// Cheapest reduced return chain of length at least one, self-loop allowed.
    pub return_with_self_loop: f64,
    /// Cheapest reduced return chain whose last edge is not the self-loop.
    pub return_without_self_loop: f64,
    pub sweeps: usize,
}

/// `Phi(source, .)`: the least reduced action `sum (E - Ebar)` of chains from
/// `source`, by synchronous Bellman-Ford sweeps.
pub fn mane_potential(kernel: &ActionKernel, effective_action: f64, source: usize) -> Result<GridFunction> {
    Ok(mane_column(kernel, effective_action, source)?.phi)
}

pub fn mane_column(kernel: &ActionKernel, effective_action: f64, source: usize) -> Result<ManeColumn> {
    let nodes = kernel.grid().len();
    if source >= nodes {
        return Err(WeakKamError::InvalidInput(format!("source node {source} outside a grid of {nodes} nodes")));
    }
    let threshold = STABLE * (1.0 + effective_action.abs());
    let mut v = vec![f64::INFINITY; nodes];
    v[source] = 0.0;
    let mut next = vec![0.0; nodes];
    let mut sweeps = 0usize;
    loop {
        sweeps += 1;
        kernel.relax_values(&v, 1.0, &mut next);
        let change = v
            .par_iter_mut()
            .zip(next.par_iter())
            .map(|(old, &new)| {
                let cand = new - effective_action;
                if cand < *old {
                    let d = if old.is_finite() { *old - cand } else { f64::INFINITY };
                    *old = cand;
                    d
                } else {
                    0.0
                }
            })
            .reduce(|| 0.0, f64::max);
        if change <= threshold {
            break;
        }
        if sweeps > nodes {
            if change > NEGATIVE_CYCLE {
                return Err(WeakKamError::NegativeCycle { sum: -change });
            }
            // rounding drift along zero-mean cycles
            break;
        }
    }
    let zero = kernel.offsets().zero_index().expect("kernels contain the zero offset");
    let (mut with_loop, mut without_loop) = (f64::INFINITY, f64::INFINITY);
    for k in 0..kernel.num_offsets() {
        let x = kernel.source(source, k);
        let r = v[x] + kernel.weight(x, k) - effective_action;
        with_loop = with_loop.min(r);
        if k != zero {
            without_loop = without_loop.min(r);
        }
    }
    v[source] = with_loop.max(0.0);
    debug!("mane column from {source}: {sweeps} sweeps");
    Ok(ManeColumn {
        phi: GridFunction::from_raw(*kernel.grid(), v),
        return_with_self_loop: with_loop,
        return_without_self_loop: without_loop,
        sweeps,
    })
}

/// Uniform measure on the minimum-mean cycle found by Karp's algorithm.
pub fn minimizing_measure(kernel: &ActionKernel) -> Result<HolonomicMeasure> {
    let (_, cycle) = effective_action_karp(kernel)?;
    HolonomicMeasure::from_cycle(kernel, &cycle.edges)
}

/// Nodes on a closed walk of length at most the node count whose mean weight
/// is within `tolerance` of the effective action.
pub fn mather_set(kernel: &ActionKernel, tolerance: f64) -> Result<Vec<usize>> {
    let ebar = effective_action(kernel)?;
    let level = ebar + tolerance;
    let nodes = kernel.grid().len();
    let zero = kernel.offsets().zero_index().expect("kernels contain the zero offset");
    let set = (0..nodes)
        .into_par_iter()
        .filter(|&r| {
            if kernel.weight(r, zero) <= level {
                return true;
            }
            let mut d = vec![f64::INFINITY; nodes];
            d[r] = 0.0;
            let mut next = vec![0.0; nodes];
            for k in 1..=nodes {
                kernel.relax_values(&d, 1.0, &mut next);
                std::mem::swap(&mut d, &mut next);
                if d[r] <= level * k as f64 {
                    return true;
                }
            }
            false
        })
        .collect();
    Ok(set)
}

/// Backward chain `x_0, x_{-1}, ..., x_{-K}` read off an argmin field.
#[derive(Debug, Clone)]
pub struct CalibratedChain {
    grid: PeriodicGrid,
    offsets: Arc<OffsetSet>,
    /// `x_0, x_{-1}, ...` as node indices.
    pub nodes: Vec<usize>,
    /// The same points unwrapped to `R^d`, starting from the coordinates of `x_0`.
    pub positions: Vec<Vec<f64>>,
    /// `steps[k]`: offset index of the edge `x_{-k-1} -> x_{-k}`.
    pub steps: Vec<usize>,
    /// `defects[k]`: calibration defect of that edge.
    pub defects: Vec<f64>,
}

impl CalibratedChain {
    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn offsets(&self) -> &OffsetSet {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Largest step length `|x_{-k} - x_{-k-1}|`.
    pub fn max_increment(&self) -> f64 {
        let h = self.grid.spacing();
        self.steps
            .iter()
            .map(|&k| self.offsets.get(k).iter().map(|&c| (c as f64 * h).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn min_defect(&self) -> f64 {
        self.defects.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_defect(&self) -> f64 {
        self.defects.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Walk `argmin` backwards `steps` times from `start`. Defects are
/// `E(x, y) - [u(y) - u(x)] - Ebar`, or `E(x, y) + (1 - tau delta) u(x) - u(y)`
/// when `discounted = Some(tau delta)`.
pub fn extract_calibrated_chain(
    u: &GridFunction,
    kernel: &ActionKernel,
    argmin: &ArgminField,
    effective_action: f64,
    start: usize,
    steps: usize,
    discounted: Option<f64>,
) -> Result<CalibratedChain> {
    let grid = *kernel.grid();
    if u.grid() != &grid || argmin.grid() != &grid {
        return Err(WeakKamError::GridMismatch);
    }
    if argmin.offsets() != kernel.offsets() {
        return Err(WeakKamError::InvalidInput("argmin field was produced with another window".into()));
    }
    if start >= grid.len() {
        return Err(WeakKamError::InvalidInput(format!("start node {start} outside the grid")));
    }
    let h = grid.spacing();
    let uv = u.values();
    let mut nodes = vec![start];
    let mut positions = vec![grid.coords(start)];
    let mut offs = Vec::with_capacity(steps);
    let mut defects = Vec::with_capacity(steps);
    for _ in 0..steps {
        let y = *nodes.last().expect("nonempty");
        let k = argmin.offset_index(y);
        let x = argmin.predecessor(y);
        let e = kernel.weight(x, k);
        defects.push(match discounted {
            None => e - (uv[y] - uv[x]) - effective_action,
            Some(td) => e + (1.0 - td) * uv[x] - uv[y],
        });
        let pos: Vec<f64> = positions
            .last()
            .expect("nonempty")
            .iter()
            .zip(argmin.offsets().get(k))
            .map(|(p, &c)| p - c as f64 * h)
            .collect();
        nodes.push(x);
        positions.push(pos);
        offs.push(k);
    }
    Ok(CalibratedChain { grid, offsets: argmin.offsets_arc().clone(), nodes, positions, steps: offs, defects })
}

/// Geometric occupation measure `tau delta (1 - tau delta)^k` on the chain's
/// edges, renormalized over the truncated chain.
pub fn discounted_occupation_measure(chain: &CalibratedChain, tau_delta: f64) -> Result<HolonomicMeasure> {
    if !(tau_delta > 0.0 && tau_delta < 1.0) {
        return Err(WeakKamError::InvalidDiscount(tau_delta));
    }
    let k = chain.len();
    let tail = (1.0 - tau_delta).powi(k.min(i32::MAX as usize) as i32);
    if tail > 1e-12 {
        let need = (1e-12f64.ln() / (1.0 - tau_delta).ln()).ceil();
        return Err(WeakKamError::ChainTooShort(format!("{k} steps leave tail mass {tail:e}; need at least {need}")));
    }
    let raw: Vec<f64> = (0..k).map(|i| tau_delta * (1.0 - tau_delta).powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    HolonomicMeasure::new(
        chain.grid,
        chain.offsets.clone(),
        (0..k).map(|i| ((chain.nodes[i + 1], chain.steps[i]), raw[i] / total)),
    )
}

/// `y -> min over measures of sum_x marginal(x) Phi(x, y)`.
pub fn selected_solution_dual(kernel: &ActionKernel, effective_action: f64, measures: &[HolonomicMeasure]) -> Result<GridFunction> {
    if measures.is_empty() {
        return Err(WeakKamError::InvalidInput("at least one measure is required".into()));
    }
    let grid = *kernel.grid();
    let mut columns: HashMap<usize, GridFunction> = HashMap::new();
    let mut best = vec![f64::INFINITY; grid.len()];
    for mu in measures {
        if mu.grid() != &grid {
            return Err(WeakKamError::GridMismatch);
        }
        let marginal = mu.marginal();
        let mass = mu.total_mass();
        let mut acc = vec![0.0; grid.len()];
        for (x, &m) in marginal.values().iter().enumerate().filter(|(_, &m)| m > 0.0) {
            if let std::collections::hash_map::Entry::Vacant(e) = columns.entry(x) {
                e.insert(mane_potential(kernel, effective_action, x)?);
            }
            for (a, p) in acc.iter_mut().zip(columns[&x].values()) {
                *a += m / mass * p;
            }
        }
        for (b, a) in best.iter_mut().zip(&acc) {
            *b = b.min(*a);
        }
    }
    Ok(GridFunction::from_raw(grid, best))
}
