//! Continuum reference values: the effective Hamiltonian at zero for mechanical
//! models, the pendulum weak KAM profile, a self-refined discounted solution,
//! and the residual of the discounted discrete Euler-Lagrange equation.

use std::f64::consts::PI;
use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;

use crate::error::{Result, WeakKamError};
use crate::grid::{GridFunction, PeriodicGrid};
use crate::laxoleinik::tabulate_kernel;
use crate::mather::CalibratedChain;
use crate::models::{estimate_bounds, DiscreteAction, LagrangianModel, ModelKind, TrigPotential};
use crate::solvers::{solve_discounted, DEFAULT_MAX_ITER};

/// Scan points per axis before local refinement of `min V`.
const SCAN_1D: usize = 4096;
const SCAN_2D: usize = 256;

/// Analytic reference for a model at zero momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuumReference {
    pub effective_hamiltonian_at_zero: f64,
    pub closed_form_u: Option<PendulumProfile>,
    pub provenance: String,
}

pub fn continuum_reference(model: &LagrangianModel) -> Result<ContinuumReference> {
    let hbar = analytic_effective_hamiltonian(model)?;
    let closed = PendulumProfile::recognize(model);
    let provenance = match &closed {
        Some(p) => format!("Hbar(0) = -min V; pendulum profile with K = {}", p.k),
        None => "Hbar(0) = -min V".to_string(),
    };
    Ok(ContinuumReference { effective_hamiltonian_at_zero: hbar, closed_form_u: closed, provenance })
}

/// `Hbar(0) = -min V` for `L = m/2 |v|^2 + V`: the cheapest closed orbit rests
/// at a minimum of the potential.
pub fn analytic_effective_hamiltonian(model: &LagrangianModel) -> Result<f64> {
    match model.kind() {
        ModelKind::Mechanical { potential, .. } => Ok(-minimize_potential(potential).1),
        ModelKind::CustomTable(_) => Err(WeakKamError::UnsupportedModel(
            "no analytic effective Hamiltonian for tabulated Lagrangians".into(),
        )),
    }
}

/// Location and value of `min V` by a dense scan followed by a shrinking
/// pattern search down to steps of `1e-10`.
pub fn minimize_potential(v: &TrigPotential) -> (Vec<f64>, f64) {
    let d = v.dim();
    let per = if d == 1 { SCAN_1D } else { SCAN_2D };
    let total = per.pow(d as u32);
    let (best_i, _) = (0..total)
        .into_par_iter()
        .map(|i| {
            let x = scan_point(i, per, d);
            (i, v.value(&x))
        })
        .reduce(|| (0, f64::INFINITY), |a, b| if b.1 < a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
    let mut x = scan_point(best_i, per, d);
    let mut fx = v.value(&x);
    let mut step = 1.0 / per as f64;
    while step > 1e-10 {
        let mut moved = false;
        for j in 0..d {
            for s in [step, -step] {
                let mut y = x.clone();
                y[j] += s;
                let fy = v.value(&y);
                if fy < fx {
                    x = y;
                    fx = fy;
                    moved = true;
                }
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    (x.iter().map(|&c| crate::models::wrap_unit(c)).collect(), fx)
}

fn scan_point(mut i: usize, per: usize, d: usize) -> Vec<f64> {
    let mut x = vec![0.0; d];
    for j in (0..d).rev() {
        x[j] = (i % per) as f64 / per as f64;
        i /= per;
    }
    x
}

/// Min-normalized periodic viscosity solution of `1/2 (u')^2 = K/(4 pi^2)(1 - cos 2 pi x)`:
/// `u(x) = sqrt(K)/pi^2 (1 - cos pi x)` on `[0, 1/2]`, mirrored on `[1/2, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumProfile {
    pub k: f64,
}

pub fn pendulum_closed_form(k: f64) -> Result<PendulumProfile> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(WeakKamError::InvalidInput(format!("pendulum strength must be positive, got {k}")));
    }
    Ok(PendulumProfile { k })
}

impl PendulumProfile {
    /// The profile of a unit-mass model whose potential is `c (1 - cos 2 pi x)` with `c > 0`.
    pub fn recognize(model: &LagrangianModel) -> Option<Self> {
        let ModelKind::Mechanical { mass, potential } = model.kind() else {
            return None;
        };
        if model.dim() != 1 || *mass != 1.0 {
            return None;
        }
        let (mut c0, mut c1) = (0.0, 0.0);
        for t in potential.terms() {
            match t.frequency[0] {
                0 => c0 += t.cos_coeff,
                1 | -1 if t.sin_coeff == 0.0 => c1 += t.cos_coeff,
                _ => return None,
            }
        }
        let rel = (c0 + c1).abs() <= 1e-14 * c0.abs();
        (c0 > 0.0 && rel).then_some(Self { k: 4.0 * PI * PI * c0 })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let x = crate::models::wrap_unit(x);
        // 1 + cos(pi x) = 1 - cos(pi (1 - x)) on the right half
        self.peak() * (1.0 - (PI * x.min(1.0 - x)).cos())
    }

    /// `sqrt(K)/pi^2`, attained at `x = 1/2`.
    pub fn peak(&self) -> f64 {
        self.k.sqrt() / (PI * PI)
    }

    pub fn to_grid(&self, grid: &PeriodicGrid) -> Result<GridFunction> {
        if grid.dim() != 1 {
            return Err(WeakKamError::InvalidInput("the pendulum profile is one-dimensional".into()));
        }
        GridFunction::from_fn(*grid, |x| self.eval(x[0]))
    }

    /// Largest gap between the formula and composite Simpson quadrature of
    /// `min(int_0^x, int_x^1) sqrt(2 V)` at `samples` points.
    pub fn quadrature_check(&self, samples: usize) -> f64 {
        let speed = |s: f64| (2.0 * self.k / (4.0 * PI * PI) * (1.0 - (2.0 * PI * s).cos())).max(0.0).sqrt();
        let simpson = |a: f64, b: f64| {
            let m = 2000;
            let h = (b - a) / m as f64;
            let mut acc = speed(a) + speed(b);
            for i in 1..m {
                acc += speed(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        (0..=samples)
            .map(|i| {
                let x = i as f64 / samples as f64;
                let q = simpson(0.0, x).min(simpson(x, 1.0));
                (q - self.eval(x)).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, grid: &PeriodicGrid, out: W) -> Result<()> {
        let f = self.to_grid(grid)?;
        f.write_csv(out, &[format!("provenance: pendulum closed form, K = {}", self.k)])
    }
}

/// Fine-`tau` approximation of the continuum discounted solution.
#[derive(Debug, Clone)]
pub struct DiscountedReference {
    /// Solution at the smallest `tau`, on its own grid.
    pub finest: GridFunction,
    /// The same solution on the coarsest ladder grid.
    pub coarse: GridFunction,
    pub taus: Vec<f64>,
    /// `|u_{k+1} - u_k|` on the coarser of the two grids.
    pub cauchy_gaps: Vec<f64>,
    /// First-order Richardson estimate of the error of `finest`.
    pub error_estimate: f64,
    /// False when the last two gaps shrink by less than a factor 1.5.
    pub reliable: bool,
}

/// Solve the discounted equation at fixed `delta` along a ladder of `(tau, n)`
/// and use the finest rung as the continuum solution.
pub fn reference_discounted_solution(
    model: &LagrangianModel,
    momentum: &[f64],
    delta: f64,
    ladder: &[(f64, usize)],
    safety: f64,
    tol: f64,
) -> Result<DiscountedReference> {
    if ladder.len() < 3 {
        return Err(WeakKamError::InvalidInput("the refinement ladder needs at least three entries".into()));
    }
    if ladder.windows(2).any(|w| w[1].0 >= w[0].0) {
        return Err(WeakKamError::InvalidInput("ladder time steps must decrease".into()));
    }
    let solutions = ladder
        .iter()
        .map(|&(tau, n)| {
            let action = DiscreteAction::new(model.clone(), tau, momentum.to_vec())?;
            let bounds = estimate_bounds(&action, safety)?;
            let grid = PeriodicGrid::new(model.dim(), n)?;
            let kernel = tabulate_kernel(&action, &grid, &bounds)?;
            let (u, report) = solve_discounted(&kernel, delta, tol, DEFAULT_MAX_ITER)?;
            info!("reference rung tau={tau} n={n}: {} iterations", report.iterations);
            Ok(u)
        })
        .collect::<Result<Vec<_>>>()?;
    let gaps = solutions
        .windows(2)
        .map(|w| compare_on_coarser(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let m = gaps.len();
    let (g_prev, g_last) = (gaps[m - 2], gaps[m - 1]);
    if g_last > g_prev {
        return Err(WeakKamError::LadderNotConverging(format!("Cauchy gaps grow: {g_prev:e} -> {g_last:e}")));
    }
    let reliable = g_last == 0.0 || g_prev / g_last >= 1.5;
    if !reliable {
        warn!("reference ladder gaps shrink slowly: {g_prev:e} -> {g_last:e}");
    }
    let taus: Vec<f64> = ladder.iter().map(|e| e.0).collect();
    let (t_prev, t_last) = (taus[m - 1], taus[m]);
    let error_estimate = g_last * t_last / (t_prev - t_last);
    let finest = solutions.last().expect("nonempty").clone();
    let coarse = finest.resample(solutions[0].grid())?;
    Ok(DiscountedReference { finest, coarse, taus, cauchy_gaps: gaps, error_estimate, reliable })
}

/// Sup-norm difference after resampling the finer function onto the coarser grid.
pub fn compare_on_coarser(a: &GridFunction, b: &GridFunction) -> Result<f64> {
    if a.grid().len() <= b.grid().len() {
        a.sup_norm_diff(&b.resample(a.grid())?)
    } else {
        a.resample(b.grid())?.sup_norm_diff(b)
    }
}

/// Largest residual of
/// `(1 - tau delta) dL/dv(z_{n-1}, v_{n-1}) - dL/dv(z_n, v_n) + tau dL/dx(z_n, v_n) + tau delta P`
/// over interior points of the chain, with `v_n = (z_{n+1} - z_n)/tau`.
pub fn discounted_el_residual(model: &LagrangianModel, momentum: &[f64], tau: f64, delta: f64, chain: &CalibratedChain) -> Result<f64> {
    if chain.positions.len() < 3 {
        return Err(WeakKamError::ChainTooShort(format!("{} points; the residual needs at least 3", chain.positions.len())));
    }
    if !model.is_mechanical() {
        return Err(WeakKamError::UnsupportedModel("the residual uses analytic derivatives".into()));
    }
    let d = model.dim();
    if momentum.len() != d {
        return Err(WeakKamError::InvalidInput("momentum has the wrong dimension".into()));
    }
    // forward order z_0 = x_{-K}, ..., z_K = x_0
    let z: Vec<&Vec<f64>> = chain.positions.iter().rev().collect();
    let vel = |n: usize| -> Vec<f64> { (0..d).map(|j| (z[n + 1][j] - z[n][j]) / tau).collect() };
    let td = tau * delta;
    let mut worst = 0.0f64;
    let (mut p_prev, mut p_now, mut f_now) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for n in 1..z.len() - 1 {
        let (v0, v1) = (vel(n - 1), vel(n));
        model.momentum(z[n - 1], &v0, &mut p_prev);
        model.momentum(z[n], &v1, &mut p_now);
        model.force(z[n], &v1, &mut f_now);
        let r: f64 = (0..d)
            .map(|j| ((1.0 - td) * p_prev[j] - p_now[j] + tau * f_now[j] + td * momentum[j]).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(r);
    }
    Ok(worst)
}
