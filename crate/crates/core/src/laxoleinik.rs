//! Tabulated action kernels and the discrete Lax-Oleinik operators.
//!
//! A kernel stores `E_tau(x_i, x_i + o h)` for every node `i` and every offset
//! `o` of the window `|o| h <= tau R`. Offsets are kept in lexicographic order,
//! so scanning them with a strict comparison breaks ties toward the
//! lexicographically smallest offset.

use std::borrow::Cow;
use std::collections::{BTreeSet, VecDeque};
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use crate::error::{Result, WeakKamError};
use crate::grid::{GridFunction, PeriodicGrid};
use crate::models::{estimate_bounds, AprioriBounds, DiscreteAction, ModelKind};

/// Rows per rayon task in the operator loops.
const CHUNK: usize = 256;

/// Lexicographically sorted, duplicate-free integer displacements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetSet {
    dim: usize,
    data: Vec<i64>,
}

impl OffsetSet {
    pub fn from_vectors(dim: usize, vectors: impl IntoIterator<Item = Vec<i64>>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for v in vectors {
            if v.len() != dim {
                return Err(WeakKamError::InvalidInput("offset has wrong dimension".into()));
            }
            set.insert(v);
        }
        Ok(Self { dim, data: set.into_iter().flatten().collect() })
    }

    /// All torus representatives `o` (components in `(-n/2, n/2]`) with `|o| h <= radius`.
    pub fn window(grid: &PeriodicGrid, radius: f64) -> Self {
        let n = grid.nodes_per_axis() as i64;
        let h = grid.spacing();
        let lo = -((n - 1) / 2);
        let hi = n / 2;
        let reach = ((radius / h) * (1.0 + 1e-12)).floor() as i64;
        let (lo, hi) = (lo.max(-reach), hi.min(reach));
        let d = grid.dim();
        let limit = (radius / h).powi(2) * (1.0 + 1e-12);
        let mut data = Vec::new();
        let mut cur = vec![lo; d];
        loop {
            let norm2: f64 = cur.iter().map(|&c| (c * c) as f64).sum();
            if norm2 <= limit {
                data.extend_from_slice(&cur);
            }
            let mut j = d;
            loop {
                if j == 0 {
                    return Self { dim: d, data };
                }
                j -= 1;
                if cur[j] < hi {
                    cur[j] += 1;
                    for c in cur.iter_mut().skip(j + 1) {
                        *c = lo;
                    }
                    break;
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, k: usize) -> &[i64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[i64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn index_of(&self, o: &[i64]) -> Option<usize> {
        let (mut lo, mut hi) = (0, self.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.get(mid).cmp(o) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return Some(mid),
            }
        }
        None
    }

    pub fn zero_index(&self) -> Option<usize> {
        self.index_of(&vec![0; self.dim])
    }

    fn first_components(&self) -> Vec<i64> {
        self.iter().map(|o| o[0]).collect()
    }
}

/// Lower envelope of the parabolas `g(p) + a (q - p)^2` over integer positions
/// `p` in `[p0, p1]`, queried at nondecreasing `q`. Positions with `g = inf`
/// are skipped.
struct Envelope {
    pos: Vec<i64>,
    val: Vec<f64>,
    /// `bound[k]`: left end of the interval where parabola `k` is lowest.
    bound: Vec<f64>,
}

impl Envelope {
    fn build(p0: i64, p1: i64, a: f64, g: impl Fn(i64) -> f64) -> Self {
        let cap = (p1 - p0 + 1).max(0) as usize;
        let mut env = Self { pos: Vec::with_capacity(cap), val: Vec::with_capacity(cap), bound: Vec::with_capacity(cap) };
        for p in p0..=p1 {
            let gp = g(p);
            if !gp.is_finite() {
                continue;
            }
            loop {
                let Some(k) = env.pos.len().checked_sub(1) else {
                    env.pos.push(p);
                    env.val.push(gp);
                    env.bound.push(f64::NEG_INFINITY);
                    break;
                };
                let (q, gq) = (env.pos[k], env.val[k]);
                let s = (gp - gq) / (2.0 * a * (p - q) as f64) + 0.5 * (p + q) as f64;
                if s <= env.bound[k] {
                    env.pos.pop();
                    env.val.pop();
                    env.bound.pop();
                    continue;
                }
                env.pos.push(p);
                env.val.push(gp);
                env.bound.push(s);
                break;
            }
        }
        env
    }

    /// Position of the lowest parabola at `q`. `cursor` carries the segment
    /// between calls with increasing `q`.
    #[inline]
    fn argmin(&self, q: f64, cursor: &mut usize) -> i64 {
        while *cursor + 1 < self.pos.len() && self.bound[*cursor + 1] < q {
            *cursor += 1;
        }
        self.pos[*cursor]
    }
}

/// Kernel weights, either as a full node-major table or in the separable
/// form `E(x_i, x_i + o_k h) = site[i] + jump[k]` of the mechanical family.
#[derive(Debug, Clone)]
enum Weights {
    Table(Vec<f64>),
    Separable {
        site: Vec<f64>,
        jump: Vec<f64>,
        /// `(a, c)` with `jump(o) = a (o - c)^2 - a c^2` on a one-dimensional grid.
        parabola: Option<(f64, f64)>,
    },
}

/// Node-major weights regrouped by destination node, plus source indices for `d > 1`.
#[derive(Debug, Clone)]
struct Incoming {
    weights: Option<Vec<f64>>,
    sources: Option<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct ActionKernel {
    grid: PeriodicGrid,
    tau: f64,
    radius: f64,
    offsets: Arc<OffsetSet>,
    weights: Weights,
    incoming: OnceLock<Incoming>,
}

impl ActionKernel {
    /// Kernel with explicit weights laid out node-major over `offsets`.
    pub fn from_weights(grid: PeriodicGrid, tau: f64, radius: f64, offsets: OffsetSet, weights: Vec<f64>) -> Result<Self> {
        Self::check_offsets(&grid, &offsets)?;
        if weights.len() != grid.len() * offsets.len() {
            return Err(WeakKamError::InvalidInput("kernel weight table has the wrong size".into()));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(WeakKamError::InvalidInput("kernel weights must be finite".into()));
        }
        Ok(Self { grid, tau, radius, offsets: Arc::new(offsets), weights: Weights::Table(weights), incoming: OnceLock::new() })
    }

    fn check_offsets(grid: &PeriodicGrid, offsets: &OffsetSet) -> Result<()> {
        if offsets.dim() != grid.dim() {
            return Err(WeakKamError::GridMismatch);
        }
        if offsets.zero_index().is_none() {
            return Err(WeakKamError::InvalidInput("kernel offsets must contain the zero offset".into()));
        }
        Ok(())
    }

    /// The min-plus identity: only the zero offset, with weight zero.
    pub fn identity(grid: PeriodicGrid) -> Self {
        let offsets = OffsetSet { dim: grid.dim(), data: vec![0; grid.dim()] };
        Self {
            grid,
            tau: 0.0,
            radius: 0.0,
            offsets: Arc::new(offsets),
            weights: Weights::Table(vec![0.0; grid.len()]),
            incoming: OnceLock::new(),
        }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Window radius in torus units.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn offsets(&self) -> &OffsetSet {
        &self.offsets
    }

    pub(crate) fn offsets_arc(&self) -> &Arc<OffsetSet> {
        &self.offsets
    }

    pub fn num_offsets(&self) -> usize {
        self.offsets.len()
    }

    #[inline]
    pub fn weight(&self, node: usize, k: usize) -> f64 {
        match &self.weights {
            Weights::Table(t) => t[node * self.offsets.len() + k],
            Weights::Separable { site, jump, .. } => site[node] + jump[k],
        }
    }

    /// Node-major weight table (materialized for separable kernels).
    pub fn weights(&self) -> Cow<'_, [f64]> {
        match &self.weights {
            Weights::Table(t) => Cow::Borrowed(t),
            Weights::Separable { .. } => {
                let m = self.offsets.len();
                Cow::Owned((0..self.grid.len() * m).map(|i| self.weight(i / m, i % m)).collect())
            }
        }
    }

    /// Smallest weight over all windowed edges.
    pub fn min_weight(&self) -> f64 {
        if let Weights::Separable { site, jump, .. } = &self.weights {
            let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
            return lo(site) + lo(jump);
        }
        (0..self.grid.len())
            .into_par_iter()
            .map(|i| (0..self.offsets.len()).map(|k| self.weight(i, k)).fold(f64::INFINITY, f64::min))
            .reduce(|| f64::INFINITY, f64::min)
    }

    /// Smallest self-loop weight and the node attaining it.
    pub fn min_self_loop(&self) -> (usize, f64) {
        let z = self.offsets.zero_index().expect("kernels contain the zero offset");
        (0..self.grid.len())
            .map(|i| (i, self.weight(i, z)))
            .fold((0, f64::INFINITY), |acc, (i, w)| if w < acc.1 { (i, w) } else { acc })
    }

    /// Target node of the edge leaving `node` along offset `k`.
    pub fn target(&self, node: usize, k: usize) -> usize {
        self.grid.shift(node, self.offsets.get(k))
    }

    /// Source node of the edge entering `node` along offset `k`.
    pub fn source(&self, node: usize, k: usize) -> usize {
        let o: Vec<i64> = self.offsets.get(k).iter().map(|c| -c).collect();
        self.grid.shift(node, &o)
    }

    fn incoming(&self) -> &Incoming {
        self.incoming.get_or_init(|| {
            let m = self.offsets.len();
            let n = self.grid.len();
            let weights = match &self.weights {
                Weights::Separable { .. } => None,
                Weights::Table(t) => {
                    let mut w = vec![0.0; n * m];
                    w.par_chunks_mut(m).enumerate().for_each(|(y, row)| {
                        for (k, v) in row.iter_mut().enumerate() {
                            *v = t[self.source(y, k) * m + k];
                        }
                    });
                    Some(w)
                }
            };
            let sources = (self.grid.dim() > 1).then(|| {
                let mut s = vec![0u32; n * m];
                s.par_chunks_mut(m).enumerate().for_each(|(y, row)| {
                    for (k, v) in row.iter_mut().enumerate() {
                        *v = self.source(y, k) as u32;
                    }
                });
                s
            });
            Incoming { weights, sources }
        })
    }

    /// `min_o { factor u(y - o) + w(y - o, o) }` over the window by direct scan,
    /// returning the value and the first minimizing offset index.
    #[inline]
    fn scan_node(&self, inc: &Incoming, first: &[i64], u: &[f64], factor: f64, y: usize) -> (f64, usize) {
        let m = self.offsets.len();
        let n = self.grid.nodes_per_axis() as i64;
        let mut best = f64::INFINITY;
        let mut bk = 0usize;
        let src_of = |k: usize| -> usize {
            match &inc.sources {
                Some(s) => s[y * m + k] as usize,
                None => {
                    let mut s = y as i64 - first[k];
                    if s < 0 {
                        s += n;
                    } else if s >= n {
                        s -= n;
                    }
                    s as usize
                }
            }
        };
        match (&self.weights, &inc.weights) {
            (Weights::Separable { site, jump, .. }, _) => {
                for k in 0..m {
                    let s = src_of(k);
                    let v = factor * u[s] + (site[s] + jump[k]);
                    if v < best {
                        best = v;
                        bk = k;
                    }
                }
            }
            (Weights::Table(_), Some(w)) => {
                let row = &w[y * m..(y + 1) * m];
                for k in 0..m {
                    let v = factor * u[src_of(k)] + row[k];
                    if v < best {
                        best = v;
                        bk = k;
                    }
                }
            }
            (Weights::Table(_), None) => unreachable!("table kernels regroup their weights"),
        }
        (best, bk)
    }

    /// `out(y) = min_o { factor u(y - o) + w(y - o, o) }`, recording the first minimizing offset.
    pub(crate) fn relax_into(&self, u: &[f64], factor: f64, out: &mut [f64], arg: Option<&mut [u32]>) {
        let inc = self.incoming();
        let first = self.offsets.first_components();
        match arg {
            Some(arg) => out
                .par_chunks_mut(CHUNK)
                .zip(arg.par_chunks_mut(CHUNK))
                .enumerate()
                .for_each(|(c, (o, a))| {
                    for (j, (oy, ay)) in o.iter_mut().zip(a.iter_mut()).enumerate() {
                        let (v, k) = self.scan_node(inc, &first, u, factor, c * CHUNK + j);
                        *oy = v;
                        *ay = k as u32;
                    }
                }),
            None => out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, o)| {
                for (j, oy) in o.iter_mut().enumerate() {
                    *oy = self.scan_node(inc, &first, u, factor, c * CHUNK + j).0;
                }
            }),
        }
    }

    /// Same values as [`relax_into`](Self::relax_into) without the argmin. One-dimensional
    /// mechanical kernels use the lower envelope of the parabolas `G(p) + a (q - p)^2`,
    /// falling back to the direct scan wherever the envelope minimizer leaves the window.
    pub(crate) fn relax_values(&self, u: &[f64], factor: f64, out: &mut [f64]) {
        let (site, jump, a, c) = match &self.weights {
            Weights::Separable { site, jump, parabola: Some((a, c)) } => (site, jump, *a, *c),
            _ => return self.relax_into(u, factor, out, None),
        };
        let n = self.grid.nodes_per_axis() as i64;
        let first = self.offsets.first_components();
        let (omin, omax) = (first[0], *first.last().expect("nonempty window"));
        // unrolled source positions p in [-omax, n - 1 - omin]
        let env = Envelope::build(-omax, n - 1 - omin, a, |p| {
            let x = p.rem_euclid(n) as usize;
            factor * u[x] + site[x]
        });
        let inc = self.incoming();
        let mut cursor = 0usize;
        for (y, oy) in out.iter_mut().enumerate() {
            let p = env.argmin(y as f64 - c, &mut cursor);
            let o = y as i64 - p;
            *oy = if o >= omin && o <= omax {
                let x = p.rem_euclid(n) as usize;
                factor * u[x] + (site[x] + jump[(o - omin) as usize])
            } else {
                self.scan_node(inc, &first, u, factor, y).0
            };
        }
    }

    /// True when every node reaches every other node along kernel edges.
    pub fn is_strongly_connected(&self) -> bool {
        let d = self.grid.dim();
        let has_axes = (0..d).all(|j| {
            [1i64, -1].iter().all(|&s| {
                let mut e = vec![0i64; d];
                e[j] = s;
                self.offsets.index_of(&e).is_some()
            })
        });
        if has_axes {
            return true;
        }
        let n = self.grid.len();
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([0usize]);
            seen[0] = true;
            let mut count = 1;
            while let Some(v) = queue.pop_front() {
                for k in 0..self.offsets.len() {
                    let w = if forward { self.target(v, k) } else { self.source(v, k) };
                    if !seen[w] {
                        seen[w] = true;
                        count += 1;
                        queue.push_back(w);
                    }
                }
            }
            count == n
        };
        reach(true) && reach(false)
    }
}

/// Minimizing offset per node of the last backward (or discounted) application.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgminField {
    grid: PeriodicGrid,
    offsets: Arc<OffsetSet>,
    best: Vec<u32>,
}

impl ArgminField {
    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn offsets(&self) -> &OffsetSet {
        &self.offsets
    }

    pub(crate) fn offsets_arc(&self) -> &Arc<OffsetSet> {
        &self.offsets
    }

    pub fn offset_index(&self, node: usize) -> usize {
        self.best[node] as usize
    }

    pub fn best_offset(&self, node: usize) -> &[i64] {
        self.offsets.get(self.best[node] as usize)
    }

    /// Predecessor of `node`: the node the minimizing edge starts from.
    pub fn predecessor(&self, node: usize) -> usize {
        let o: Vec<i64> = self.best_offset(node).iter().map(|c| -c).collect();
        self.grid.shift(node, &o)
    }
}

/// Tabulate `E_tau` on the window given by the a-priori bounds. Mechanical
/// models are stored in separable form `tau V(x) + jump(o)`.
pub fn tabulate_kernel(action: &DiscreteAction, grid: &PeriodicGrid, bounds: &AprioriBounds) -> Result<ActionKernel> {
    if action.dim() != grid.dim() {
        return Err(WeakKamError::GridMismatch);
    }
    let tau = action.tau();
    let radius = tau * bounds.window_radius;
    let h = grid.spacing();
    if radius < h {
        return Err(WeakKamError::WindowTooSmall { radius, spacing: h });
    }
    let offsets = OffsetSet::window(grid, radius);
    ActionKernel::check_offsets(grid, &offsets)?;
    let m = offsets.len();
    let d = grid.dim();
    let p = action.momentum();
    let weights = match action.model().kind() {
        ModelKind::Mechanical { mass, potential } => {
            let site = (0..grid.len()).into_par_iter().map(|i| tau * potential.value(&grid.coords(i))).collect();
            let jump = offsets
                .iter()
                .map(|o| {
                    let kin: f64 = o.iter().map(|&c| (c as f64 * h / tau).powi(2)).sum();
                    let pair: f64 = o.iter().zip(p).map(|(&c, pj)| pj * c as f64 * h).sum();
                    tau * (0.5 * mass * kin) - pair
                })
                .collect();
            let parabola = (d == 1).then(|| {
                let a = mass * h * h / (2.0 * tau);
                (a, p[0] * h / (2.0 * a))
            });
            Weights::Separable { site, jump, parabola }
        }
        ModelKind::CustomTable(_) => {
            let mut w = vec![0.0; grid.len() * m];
            w.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
                let x = grid.coords(i);
                let mut y = x.clone();
                for (k, wk) in row.iter_mut().enumerate() {
                    for (j, yj) in y.iter_mut().enumerate() {
                        *yj = x[j] + offsets.get(k)[j] as f64 * h;
                    }
                    *wk = action.eval(&x, &y);
                }
            });
            if w.iter().any(|v| !v.is_finite()) {
                return Err(WeakKamError::InvalidInput("kernel weights must be finite".into()));
            }
            Weights::Table(w)
        }
    };
    Ok(ActionKernel { grid: *grid, tau, radius, offsets: Arc::new(offsets), weights, incoming: OnceLock::new() })
}

fn check_grid(u: &GridFunction, kernel: &ActionKernel) -> Result<()> {
    if u.grid() != kernel.grid() {
        return Err(WeakKamError::GridMismatch);
    }
    Ok(())
}

fn relax(u: &GridFunction, kernel: &ActionKernel, factor: f64) -> (GridFunction, ArgminField) {
    let n = kernel.grid.len();
    let mut out = vec![0.0; n];
    let mut best = vec![0u32; n];
    kernel.relax_into(u.values(), factor, &mut out, Some(&mut best));
    (
        GridFunction::from_raw(kernel.grid, out),
        ArgminField { grid: kernel.grid, offsets: Arc::clone(&kernel.offsets), best },
    )
}

/// `T[u](y) = min_o { u(y - o) + E(y - o, y) }`.
pub fn backward_lax_oleinik(u: &GridFunction, kernel: &ActionKernel) -> Result<(GridFunction, ArgminField)> {
    check_grid(u, kernel)?;
    Ok(relax(u, kernel, 1.0))
}

/// `T^+[u](x) = max_o { u(x + o) - E(x, x + o) }`.
pub fn forward_lax_oleinik(u: &GridFunction, kernel: &ActionKernel) -> Result<GridFunction> {
    check_grid(u, kernel)?;
    let m = kernel.offsets.len();
    let g = kernel.grid;
    let uv = u.values();
    let mut out = vec![0.0; g.len()];
    out.par_iter_mut().enumerate().for_each(|(x, o)| {
        *o = (0..m).map(|k| uv[kernel.target(x, k)] - kernel.weight(x, k)).fold(f64::NEG_INFINITY, f64::max);
    });
    Ok(GridFunction::from_raw(g, out))
}

/// `T_delta[u](y) = min_o { (1 - tau delta) u(y - o) + E(y - o, y) }`.
pub fn discounted_lax_oleinik(u: &GridFunction, kernel: &ActionKernel, delta: f64) -> Result<(GridFunction, ArgminField)> {
    check_grid(u, kernel)?;
    let factor = discount_factor(kernel.tau, delta)?;
    Ok(relax(u, kernel, factor))
}

/// `1 - tau delta`, after checking `tau delta` lies in `(0, 1)`.
pub fn discount_factor(tau: f64, delta: f64) -> Result<f64> {
    let td = tau * delta;
    if !(td > 0.0 && td < 1.0) {
        return Err(WeakKamError::InvalidDiscount(td));
    }
    Ok(1.0 - td)
}

/// Min-plus product `(a * b)(x, z) = min_y a(x, y) + b(y, z)` restricted to
/// displacements `o1 + o2` with `o1` in `a`'s window and `o2` in `b`'s.
pub fn min_plus_convolve(a: &ActionKernel, b: &ActionKernel) -> Result<ActionKernel> {
    if a.grid != b.grid {
        return Err(WeakKamError::GridMismatch);
    }
    let g = a.grid;
    let d = g.dim();
    let n = g.nodes_per_axis() as i64;
    let (cap_lo, cap_hi) = (-((n - 1) / 2), n / 2);
    let mut lo = vec![i64::MAX; d];
    let mut hi = vec![i64::MIN; d];
    for j in 0..d {
        let (amin, amax) = a.offsets.iter().fold((i64::MAX, i64::MIN), |(l, h), o| (l.min(o[j]), h.max(o[j])));
        let (bmin, bmax) = b.offsets.iter().fold((i64::MAX, i64::MIN), |(l, h), o| (l.min(o[j]), h.max(o[j])));
        lo[j] = (amin + bmin).max(cap_lo);
        hi[j] = (amax + bmax).min(cap_hi);
    }
    let extent: Vec<usize> = (0..d).map(|j| (hi[j] - lo[j] + 1) as usize).collect();
    let box_index = |o: &[i64]| -> Option<usize> {
        let mut idx = 0usize;
        for j in 0..d {
            if o[j] < lo[j] || o[j] > hi[j] {
                return None;
            }
            idx = idx * extent[j] + (o[j] - lo[j]) as usize;
        }
        Some(idx)
    };
    let mut sums = BTreeSet::new();
    let mut s = vec![0i64; d];
    for oa in a.offsets.iter() {
        for ob in b.offsets.iter() {
            for j in 0..d {
                s[j] = oa[j] + ob[j];
            }
            if box_index(&s).is_some() {
                sums.insert(s.clone());
            }
        }
    }
    let offsets = OffsetSet::from_vectors(d, sums)?;
    let mut slot = vec![u32::MAX; extent.iter().product()];
    for (k, o) in offsets.iter().enumerate() {
        slot[box_index(o).expect("offset inside box")] = k as u32;
    }
    // For each pair (k1, k2) the destination slot, or MAX when outside the cap.
    let (ma, mb, mr) = (a.offsets.len(), b.offsets.len(), offsets.len());
    let mut pair_slot = vec![u32::MAX; ma * mb];
    for (k1, oa) in a.offsets.iter().enumerate() {
        for (k2, ob) in b.offsets.iter().enumerate() {
            for j in 0..d {
                s[j] = oa[j] + ob[j];
            }
            if let Some(bi) = box_index(&s) {
                pair_slot[k1 * mb + k2] = slot[bi];
            }
        }
    }
    let (aw, bw) = (a.weights(), b.weights());
    let mut weights = vec![f64::INFINITY; g.len() * mr];
    weights.par_chunks_mut(mr).enumerate().for_each(|(i, row)| {
        for k1 in 0..ma {
            let wa = aw[i * ma + k1];
            let j = a.target(i, k1);
            let brow = &bw[j * mb..(j + 1) * mb];
            let slots = &pair_slot[k1 * mb..(k1 + 1) * mb];
            for k2 in 0..mb {
                let t = slots[k2];
                if t != u32::MAX {
                    let v = wa + brow[k2];
                    let r = &mut row[t as usize];
                    if v < *r {
                        *r = v;
                    }
                }
            }
        }
    });
    let radius = (a.radius + b.radius).min(0.5 * (d as f64).sqrt());
    ActionKernel::from_weights(g, a.tau + b.tau, radius, offsets, weights)
}

/// Kernel of the `steps`-fold min-plus power of the sub-step action
/// `E_{tau/steps}`, computed by repeated squaring. `steps` must be a power of two.
pub fn min_plus_power(action: &DiscreteAction, grid: &PeriodicGrid, steps: usize, safety: f64) -> Result<ActionKernel> {
    if steps == 0 || !steps.is_power_of_two() {
        return Err(WeakKamError::InvalidInput(format!("step count must be a power of two, got {steps}")));
    }
    let sub = action.with_tau(action.tau() / steps as f64)?;
    let bounds = estimate_bounds(&sub, safety)?;
    let mut k = tabulate_kernel(&sub, grid, &bounds)?;
    if let Some(p) = separable_power(&k, steps) {
        return p;
    }
    let mut m = 1;
    while m < steps {
        k = min_plus_convolve(&k, &k)?;
        m *= 2;
    }
    Ok(k)
}

/// `steps`-fold min-plus power of a one-dimensional separable kernel by one
/// dynamic program per source node. Returns `None` when some chain would leave
/// the half torus, where repeated convolution drops out-of-range sums.
fn separable_power(k: &ActionKernel, steps: usize) -> Option<Result<ActionKernel>> {
    let Weights::Separable { site, jump, parabola: Some((a, c)) } = &k.weights else {
        return None;
    };
    let (a, c) = (*a, *c);
    let n = k.grid.nodes_per_axis() as i64;
    let first = k.offsets.first_components();
    let (omin, omax) = (first[0], *first.last().expect("nonempty window"));
    let s = steps as i64;
    let (lo, hi) = (s * omin, s * omax);
    if lo < -((n - 1) / 2) || hi > n / 2 {
        return None;
    }
    let width = (hi - lo + 1) as usize;
    let offsets = OffsetSet { dim: 1, data: (lo..=hi).collect() };
    let mut weights = vec![f64::INFINITY; k.grid.len() * width];
    weights.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
        let at = |p: i64| site[(i as i64 + p).rem_euclid(n) as usize];
        let mut f = vec![f64::INFINITY; width];
        let mut next = vec![f64::INFINITY; width];
        f[(-lo) as usize] = 0.0;
        for j in 0..s {
            let (r0, r1) = (j * omin, j * omax);
            let env = Envelope::build(r0, r1, a, |p| f[(p - lo) as usize] + at(p));
            let mut cursor = 0usize;
            for q in (j + 1) * omin..=(j + 1) * omax {
                let p = env.argmin(q as f64 - c, &mut cursor);
                let o = q - p;
                next[(q - lo) as usize] = if o >= omin && o <= omax {
                    f[(p - lo) as usize] + (at(p) + jump[(o - omin) as usize])
                } else {
                    (omin..=omax)
                        .filter(|&o| (r0..=r1).contains(&(q - o)))
                        .map(|o| f[(q - o - lo) as usize] + (at(q - o) + jump[(o - omin) as usize]))
                        .fold(f64::INFINITY, f64::min)
                };
            }
            std::mem::swap(&mut f, &mut next);
        }
        row.copy_from_slice(&f);
    });
    let radius = (k.radius * steps as f64).min(0.5);
    Some(ActionKernel::from_weights(k.grid, k.tau * steps as f64, radius, offsets, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LagrangianModel, TrigPotential};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pendulum_kernel(n: usize, tau: f64) -> ActionKernel {
        let a = DiscreteAction::new(LagrangianModel::pendulum(1.0), tau, vec![0.0]).unwrap();
        let b = estimate_bounds(&a, 1.5).unwrap();
        tabulate_kernel(&a, &PeriodicGrid::new(1, n).unwrap(), &b).unwrap()
    }

    #[test]
    fn window_has_expected_offsets() {
        let g = PeriodicGrid::new(1, 100).unwrap();
        let o = OffsetSet::window(&g, 0.1 * 2.0);
        assert_eq!(o.len(), 41);
        assert_eq!(o.get(0), &[-20]);
        assert_eq!(o.get(40), &[20]);
        let g2 = PeriodicGrid::new(2, 16).unwrap();
        let o2 = OffsetSet::window(&g2, 2.0 / 16.0);
        assert_eq!(o2.len(), 13);
    }

    #[test]
    fn window_is_capped_at_half_torus() {
        let g = PeriodicGrid::new(1, 8).unwrap();
        let o = OffsetSet::window(&g, 10.0);
        let v: Vec<i64> = o.iter().map(|c| c[0]).collect();
        assert_eq!(v, vec![-3, -2, -1, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn tabulation_rejects_small_windows() {
        let a = DiscreteAction::new(LagrangianModel::pendulum(1.0), 0.001, vec![0.0]).unwrap();
        let b = estimate_bounds(&a, 1.0).unwrap();
        let err = tabulate_kernel(&a, &PeriodicGrid::new(1, 16).unwrap(), &b).unwrap_err();
        assert!(matches!(err, WeakKamError::WindowTooSmall { .. }));
    }

    #[test]
    fn backward_operator_matches_brute_force_on_small_grid() {
        let k = pendulum_kernel(8, 0.25);
        assert_eq!(k.num_offsets(), 8);
        let a = DiscreteAction::new(LagrangianModel::pendulum(1.0), 0.25, vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = *k.grid();
        let u = GridFunction::new(g, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let (t, _) = backward_lax_oleinik(&u, &k).unwrap();
        for y in 0..8 {
            let mut best = f64::INFINITY;
            for x in 0..8i64 {
                // smallest-norm representative of the displacement y - x
                let mut o = (y as i64 - x).rem_euclid(8);
                if o > 4 {
                    o -= 8;
                }
                let xc = x as f64 / 8.0;
                let e = a.eval(&[xc], &[xc + o as f64 / 8.0]);
                best = best.min(u.values()[x as usize] + e);
            }
            assert!((t.values()[y] - best).abs() < 1e-15);
        }
    }

    #[test]
    fn envelope_relaxation_matches_direct_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(n, tau, p) in &[(64usize, 0.1, 0.0), (200, 0.05, 0.37), (37, 0.3, -1.2), (12, 2.0, 0.5)] {
            let a = DiscreteAction::new(LagrangianModel::pendulum(1.0), tau, vec![p]).unwrap();
            let b = estimate_bounds(&a, 1.5).unwrap();
            let k = tabulate_kernel(&a, &PeriodicGrid::new(1, n).unwrap(), &b).unwrap();
            for rough in [0.0, 0.01, 1.0] {
                let u: Vec<f64> = (0..n)
                    .map(|i| (i as f64 / n as f64 * 6.0).sin() + rough * rng.gen_range(-1.0..1.0))
                    .collect();
                let factor = 0.97;
                let mut direct = vec![0.0; n];
                let mut fast = vec![0.0; n];
                k.relax_into(&u, factor, &mut direct, None);
                k.relax_values(&u, factor, &mut fast);
                for (d, f) in direct.iter().zip(&fast) {
                    assert!((d - f).abs() <= 1e-13 * (1.0 + d.abs()), "n={n} p={p} rough={rough}: {d} vs {f}");
                }
            }
        }
    }

    #[test]
    fn ties_go_to_smallest_offset() {
        let g = PeriodicGrid::new(1, 8).unwrap();
        let offsets = OffsetSet::window(&g, 2.0 / 8.0);
        let k = ActionKernel::from_weights(g, 0.1, 0.25, offsets, vec![1.0; 8 * 5]).unwrap();
        let (_, arg) = backward_lax_oleinik(&GridFunction::constant(g, 0.0), &k).unwrap();
        for y in 0..8 {
            assert_eq!(arg.best_offset(y), &[-2]);
        }
    }

    #[test]
    fn forward_operator_on_free_particle_fixes_constants() {
        let a = DiscreteAction::new(LagrangianModel::free(1, 1.0).unwrap(), 0.1, vec![0.0]).unwrap();
        let b = estimate_bounds(&a, 1.5).unwrap();
        let k = tabulate_kernel(&a, &PeriodicGrid::new(1, 32).unwrap(), &b).unwrap();
        let u = GridFunction::constant(*k.grid(), 0.3);
        let f = forward_lax_oleinik(&u, &k).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.3));
        let (t, _) = backward_lax_oleinik(&u, &k).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn discount_bounds_are_checked() {
        let k = pendulum_kernel(16, 0.1);
        let u = GridFunction::constant(*k.grid(), 0.0);
        assert!(matches!(discounted_lax_oleinik(&u, &k, 10.0), Err(WeakKamError::InvalidDiscount(_))));
        assert!(matches!(discounted_lax_oleinik(&u, &k, 0.0), Err(WeakKamError::InvalidDiscount(_))));
        assert!(discounted_lax_oleinik(&u, &k, 1.0).is_ok());
    }

    #[test]
    fn identity_kernel_is_neutral() {
        let k = pendulum_kernel(16, 0.1);
        let id = ActionKernel::identity(*k.grid());
        let c = min_plus_convolve(&k, &id).unwrap();
        assert_eq!(c.offsets(), k.offsets());
        assert_eq!(c.weights(), k.weights());
        let c2 = min_plus_convolve(&id, &k).unwrap();
        assert_eq!(c2.weights(), k.weights());
    }

    #[test]
    fn convolution_matches_brute_force_chains() {
        let k = pendulum_kernel(16, 0.1);
        let c = min_plus_convolve(&k, &k).unwrap();
        for i in 0..16 {
            for (kc, o) in c.offsets().iter().enumerate() {
                let mut best = f64::INFINITY;
                for (k1, o1) in k.offsets().iter().enumerate() {
                    let o2 = [o[0] - o1[0]];
                    if let Some(k2) = k.offsets().index_of(&o2) {
                        best = best.min(k.weight(i, k1) + k.weight(k.target(i, k1), k2));
                    }
                }
                assert_eq!(c.weight(i, kc), best);
            }
        }
    }

    #[test]
    fn power_of_free_particle_keeps_straight_line_action() {
        let a = DiscreteAction::new(LagrangianModel::free(1, 1.0).unwrap(), 0.2, vec![0.0]).unwrap();
        let g = PeriodicGrid::new(1, 64).unwrap();
        let p = min_plus_power(&a, &g, 4, 1.5).unwrap();
        // displacement divisible by 4 nodes: straight chain is on the grid
        let k = p.offsets().index_of(&[8]).unwrap();
        let exact = a.eval(&[0.0], &[8.0 / 64.0]);
        assert!((p.weight(3, k) - exact).abs() < 1e-14);
    }

    #[test]
    fn separable_power_matches_repeated_convolution() {
        for &(n, tau, p, steps) in &[(160usize, 0.1, 0.0, 4usize), (240, 0.05, 0.45, 8), (97, 0.02, -0.8, 2)] {
            let a = DiscreteAction::new(LagrangianModel::pendulum(1.0), tau, vec![p]).unwrap();
            let g = PeriodicGrid::new(1, n).unwrap();
            let fast = min_plus_power(&a, &g, steps, 1.5).unwrap();
            let sub = a.with_tau(tau / steps as f64).unwrap();
            let mut slow = tabulate_kernel(&sub, &g, &estimate_bounds(&sub, 1.5).unwrap()).unwrap();
            let base = slow.clone();
            assert!(separable_power(&base, steps).is_some(), "n={n}: chains must stay inside the half torus");
            for _ in 1..steps {
                slow = min_plus_convolve(&slow, &base).unwrap();
            }
            assert_eq!(fast.offsets(), slow.offsets(), "n={n}");
            for (x, y) in fast.weights().iter().zip(slow.weights().iter()) {
                assert!((x - y).abs() < 1e-13, "n={n}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn two_dimensional_kernel_sources_are_consistent() {
        let pot = TrigPotential::new(
            2,
            vec![crate::models::PotentialTerm { frequency: vec![1, 1], cos_coeff: 0.02, sin_coeff: 0.0 }],
        )
        .unwrap();
        let a = DiscreteAction::new(LagrangianModel::mechanical(1.0, pot).unwrap(), 0.25, vec![0.0, 0.0]).unwrap();
        let b = estimate_bounds(&a, 1.0).unwrap();
        let g = PeriodicGrid::new(2, 6).unwrap();
        let k = tabulate_kernel(&a, &g, &b).unwrap();
        let u = GridFunction::from_fn(g, |x| (x[0] * 5.0).sin() + x[1]).unwrap();
        let (t, arg) = backward_lax_oleinik(&u, &k).unwrap();
        for y in 0..g.len() {
            let x = arg.predecessor(y);
            let kk = arg.offset_index(y);
            assert_eq!(k.target(x, kk), y);
            assert!((t.values()[y] - (u.values()[x] + k.weight(x, kk))).abs() < 1e-15);
        }
        assert!(k.is_strongly_connected());
    }
}
