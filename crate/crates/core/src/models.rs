//! Lagrangians on the torus, their discrete actions and a-priori window bounds.
//!
//! The built-in family is `L(x, v) = m/2 |v|^2 + V(x)` with `V` a trigonometric
//! polynomial. A tabulated one-dimensional Lagrangian is also supported for
//! experiments with non-quadratic kinetic terms.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Result, WeakKamError};

/// Reduce a coordinate to `[0, 1)`.
#[inline]
pub fn wrap_unit(x: f64) -> f64 {
    let w = x - x.floor();
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTerm {
    pub frequency: Vec<i64>,
    pub cos_coeff: f64,
    pub sin_coeff: f64,
}

/// `V(x) = sum a_cos cos(2 pi k.x) + a_sin sin(2 pi k.x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigPotential {
    dim: usize,
    terms: Vec<PotentialTerm>,
}

impl TrigPotential {
    pub fn new(dim: usize, terms: Vec<PotentialTerm>) -> Result<Self> {
        if dim == 0 {
            return Err(WeakKamError::InvalidInput("dimension must be positive".into()));
        }
        for t in &terms {
            if t.frequency.len() != dim {
                return Err(WeakKamError::InvalidInput(format!(
                    "potential term has {} frequency components, expected {dim}",
                    t.frequency.len()
                )));
            }
            if !t.cos_coeff.is_finite() || !t.sin_coeff.is_finite() {
                return Err(WeakKamError::InvalidInput("non-finite potential coefficient".into()));
            }
        }
        Ok(Self { dim, terms })
    }

    pub fn zero(dim: usize) -> Self {
        Self { dim, terms: Vec::new() }
    }

    /// `V(x) = K/(4 pi^2) (1 - cos 2 pi x)`.
    pub fn pendulum(k: f64) -> Self {
        let a = k / (4.0 * PI * PI);
        Self {
            dim: 1,
            terms: vec![
                PotentialTerm { frequency: vec![0], cos_coeff: a, sin_coeff: 0.0 },
                PotentialTerm { frequency: vec![1], cos_coeff: -a, sin_coeff: 0.0 },
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[PotentialTerm] {
        &self.terms
    }

    fn phase(&self, t: &PotentialTerm, x: &[f64]) -> f64 {
        2.0 * PI * t.frequency.iter().zip(x).map(|(&k, &xi)| k as f64 * wrap_unit(xi)).sum::<f64>()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                if t.frequency.iter().all(|&k| k == 0) {
                    return t.cos_coeff;
                }
                let ph = self.phase(t, x);
                t.cos_coeff * ph.cos() + t.sin_coeff * ph.sin()
            })
            .sum()
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        for t in &self.terms {
            let ph = self.phase(t, x);
            let s = -t.cos_coeff * ph.sin() + t.sin_coeff * ph.cos();
            for (g, &k) in out.iter_mut().zip(&t.frequency) {
                *g += 2.0 * PI * k as f64 * s;
            }
        }
    }
}

/// One-dimensional Lagrangian sampled on a periodic x-grid times a uniform
/// velocity grid. Evaluation interpolates linearly in both variables and
/// continues quadratically outside the velocity range.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomTable {
    x_nodes: usize,
    v_min: f64,
    v_max: f64,
    v_nodes: usize,
    values: Vec<f64>,
    legendre_radius: f64,
}

impl CustomTable {
    pub fn new(x_nodes: usize, v_min: f64, v_max: f64, v_nodes: usize, values: Vec<f64>) -> Result<Self> {
        if x_nodes == 0 || v_nodes < 3 || !(v_max > v_min) {
            return Err(WeakKamError::InvalidInput("custom table needs x_nodes >= 1, v_nodes >= 3, v_max > v_min".into()));
        }
        if values.len() != x_nodes * v_nodes {
            return Err(WeakKamError::InvalidInput(format!(
                "custom table has {} samples, expected {}",
                values.len(),
                x_nodes * v_nodes
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(WeakKamError::InvalidInput("custom table has non-finite samples".into()));
        }
        for row in 0..x_nodes {
            let r = &values[row * v_nodes..(row + 1) * v_nodes];
            for j in 1..v_nodes - 1 {
                if r[j - 1] - 2.0 * r[j] + r[j + 1] <= 0.0 {
                    return Err(WeakKamError::NonConvexModel { row, col: j });
                }
            }
        }
        let legendre_radius = 4.0 * v_min.abs().max(v_max.abs());
        Ok(Self { x_nodes, v_min, v_max, v_nodes, values, legendre_radius })
    }

    /// Radius of the velocity ball searched by the Legendre transform.
    pub fn with_legendre_radius(mut self, radius: f64) -> Self {
        self.legendre_radius = radius;
        self
    }

    pub fn legendre_radius(&self) -> f64 {
        self.legendre_radius
    }

    fn row_eval(&self, row: usize, v: f64) -> f64 {
        let r = &self.values[row * self.v_nodes..(row + 1) * self.v_nodes];
        let dv = (self.v_max - self.v_min) / (self.v_nodes - 1) as f64;
        let last = self.v_nodes - 1;
        if v > self.v_max {
            let slope = (r[last] - r[last - 1]) / dv;
            let e = v - self.v_max;
            return r[last] + slope * e + 0.5 * e * e;
        }
        if v < self.v_min {
            let slope = (r[1] - r[0]) / dv;
            let e = v - self.v_min;
            return r[0] + slope * e + 0.5 * e * e;
        }
        let s = (v - self.v_min) / dv;
        let j = (s.floor() as usize).min(last - 1);
        let t = s - j as f64;
        r[j] * (1.0 - t) + r[j + 1] * t
    }

    pub fn eval(&self, x: f64, v: f64) -> f64 {
        let s = wrap_unit(x) * self.x_nodes as f64;
        let i0 = (s.floor() as usize).min(self.x_nodes - 1);
        let t = s - i0 as f64;
        let i1 = (i0 + 1) % self.x_nodes;
        self.row_eval(i0, v) * (1.0 - t) + self.row_eval(i1, v) * t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Mechanical { mass: f64, potential: TrigPotential },
    CustomTable(CustomTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianModel {
    dim: usize,
    kind: ModelKind,
}

impl LagrangianModel {
    pub fn mechanical(mass: f64, potential: TrigPotential) -> Result<Self> {
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(WeakKamError::InvalidInput(format!("mass must be positive, got {mass}")));
        }
        Ok(Self { dim: potential.dim(), kind: ModelKind::Mechanical { mass, potential } })
    }

    /// Pendulum with unit mass and `V(x) = K/(4 pi^2)(1 - cos 2 pi x)`.
    pub fn pendulum(k: f64) -> Self {
        Self { dim: 1, kind: ModelKind::Mechanical { mass: 1.0, potential: TrigPotential::pendulum(k) } }
    }

    /// `L = m/2 |v|^2` with no potential.
    pub fn free(dim: usize, mass: f64) -> Result<Self> {
        Self::mechanical(mass, TrigPotential::zero(dim))
    }

    pub fn custom(table: CustomTable) -> Self {
        Self { dim: 1, kind: ModelKind::CustomTable(table) }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn is_mechanical(&self) -> bool {
        matches!(self.kind, ModelKind::Mechanical { .. })
    }

    pub fn lagrangian(&self, x: &[f64], v: &[f64]) -> f64 {
        match &self.kind {
            ModelKind::Mechanical { mass, potential } => {
                0.5 * mass * v.iter().map(|c| c * c).sum::<f64>() + potential.value(x)
            }
            ModelKind::CustomTable(t) => t.eval(x[0], v[0]),
        }
    }

    /// Velocity derivative of `L`.
    pub fn momentum(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Mechanical { mass, .. } => {
                for (o, &vi) in out.iter_mut().zip(v) {
                    *o = mass * vi;
                }
            }
            ModelKind::CustomTable(t) => {
                let e = 1e-6;
                out[0] = (t.eval(x[0], v[0] + e) - t.eval(x[0], v[0] - e)) / (2.0 * e);
            }
        }
    }

    /// Position derivative of `L`.
    pub fn force(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match &self.kind {
            ModelKind::Mechanical { potential, .. } => potential.gradient(x, out),
            ModelKind::CustomTable(t) => {
                let e = 1e-6;
                out[0] = (t.eval(x[0] + e, v[0]) - t.eval(x[0] - e, v[0])) / (2.0 * e);
            }
        }
    }
}

/// `H(x, p) = sup_v { p.v - L(x, v) }`.
///
/// Closed form for the mechanical family; a concave line search over the
/// configured velocity ball for tabulated models.
pub fn legendre_transform(model: &LagrangianModel, x: &[f64], p: &[f64]) -> Result<f64> {
    if x.len() != model.dim() || p.len() != model.dim() {
        return Err(WeakKamError::InvalidInput("dimension mismatch in Legendre transform".into()));
    }
    match model.kind() {
        ModelKind::Mechanical { mass, potential } => {
            Ok(p.iter().map(|c| c * c).sum::<f64>() / (2.0 * mass) - potential.value(x))
        }
        ModelKind::CustomTable(t) => {
            let r = t.legendre_radius();
            let f = |v: f64| p[0] * v - t.eval(x[0], v);
            let samples = 4000;
            let step = 2.0 * r / samples as f64;
            let (mut best_v, mut best) = (-r, f(-r));
            for i in 1..=samples {
                let v = -r + i as f64 * step;
                let fv = f(v);
                if fv > best {
                    best = fv;
                    best_v = v;
                }
            }
            let (mut a, mut b) = ((best_v - step).max(-r), (best_v + step).min(r));
            let g = (5f64.sqrt() - 1.0) / 2.0;
            while b - a > 1e-12 {
                let c = b - g * (b - a);
                let d = a + g * (b - a);
                if f(c) >= f(d) {
                    b = d;
                } else {
                    a = c;
                }
            }
            Ok(best.max(f(0.5 * (a + b))))
        }
    }
}

/// `E_tau(x, y) = tau L(x, (y - x)/tau) - P.(y - x)`.
#[derive(Debug, Clone)]
pub struct DiscreteAction {
    model: Arc<LagrangianModel>,
    tau: f64,
    momentum: Vec<f64>,
}

impl DiscreteAction {
    pub fn new(model: LagrangianModel, tau: f64, momentum: Vec<f64>) -> Result<Self> {
        Self::shared(Arc::new(model), tau, momentum)
    }

    pub fn shared(model: Arc<LagrangianModel>, tau: f64, momentum: Vec<f64>) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(WeakKamError::InvalidInput(format!("time step must be positive, got {tau}")));
        }
        if momentum.len() != model.dim() {
            return Err(WeakKamError::InvalidInput("cohomology class has wrong dimension".into()));
        }
        Ok(Self { model, tau, momentum })
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::shared(Arc::clone(&self.model), tau, self.momentum.clone())
    }

    pub fn model(&self) -> &LagrangianModel {
        &self.model
    }

    pub fn model_arc(&self) -> &Arc<LagrangianModel> {
        &self.model
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn momentum(&self) -> &[f64] {
        &self.momentum
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dim();
        let mut v = [0.0f64; 8];
        let mut heap;
        let v: &mut [f64] = if d <= 8 {
            &mut v[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut pairing = 0.0;
        for j in 0..d {
            let dy = y[j] - x[j];
            v[j] = dy / self.tau;
            pairing += self.momentum[j] * dy;
        }
        self.tau * self.model.lagrangian(x, v) - pairing
    }
}

pub fn eval_discrete_action(action: &DiscreteAction, x: &[f64], y: &[f64]) -> f64 {
    action.eval(x, y)
}

/// Scan-based constants controlling the window of admissible jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct AprioriBounds {
    /// Window radius in velocity units: jumps with `|y - x| <= tau * window_radius` are kept.
    pub window_radius: f64,
    /// Radius before the safety factor was applied.
    pub raw_radius: f64,
    pub lipschitz_bound: f64,
    /// `inf E / tau` over scanned pairs.
    pub action_lower: f64,
    /// `sup_x E(x, x) / tau`.
    pub diagonal_upper: f64,
    /// Jump constant `2 sup_{|y-x|<=tau} (E - E_est)/tau`.
    pub jump_constant: f64,
    /// `min_x E(x, x)`, the upper bracket of the effective action.
    pub effective_estimate: f64,
}

const RADIUS_CEILING: f64 = 64.0;

fn scan_points(dim: usize) -> Vec<Vec<f64>> {
    let m: usize = match dim {
        1 => 256,
        2 => 32,
        3 => 10,
        _ => 4,
    };
    let total = m.pow(dim as u32);
    (0..total)
        .map(|mut idx| {
            let mut x = vec![0.0; dim];
            for c in x.iter_mut().rev() {
                *c = (idx % m) as f64 / m as f64;
                idx /= m;
            }
            x
        })
        .collect()
}

fn scan_directions(dim: usize) -> Vec<Vec<f64>> {
    match dim {
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..16)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / 16.0;
                vec![a.cos(), a.sin()]
            })
            .collect(),
        _ => {
            let mut dirs = Vec::new();
            for j in 0..dim {
                for s in [1.0, -1.0] {
                    let mut e = vec![0.0; dim];
                    e[j] = s;
                    dirs.push(e);
                }
            }
            let norm = (dim as f64).sqrt();
            for mask in 0..(1usize << dim) {
                dirs.push((0..dim).map(|j| if mask >> j & 1 == 1 { -1.0 / norm } else { 1.0 / norm }).collect());
            }
            dirs
        }
    }
}

/// Radii `1.01, 1.02, ..., 8, 8.05, ..., 64`, then a tail up to `2 * 64`.
fn radius_ladder() -> (Vec<f64>, usize) {
    let mut r: Vec<f64> = (101..=800).map(|j| j as f64 / 100.0).collect();
    r.extend((161..=1280).map(|j| j as f64 / 20.0));
    let ceiling_index = r.len() - 1;
    r.extend((129..=256).map(|j| j as f64 / 2.0));
    (r, ceiling_index)
}

/// Scan the action for the window radius, Lipschitz bound and action brackets.
pub fn estimate_bounds(action: &DiscreteAction, safety: f64) -> Result<AprioriBounds> {
    if !(safety >= 1.0) {
        return Err(WeakKamError::InvalidInput(format!("window safety factor must be >= 1, got {safety}")));
    }
    let d = action.dim();
    let tau = action.tau();
    let points = scan_points(d);
    let dirs = scan_directions(d);
    let mut y = vec![0.0; d];
    let mut e_at = |x: &[f64], w: &[f64], r: f64| {
        for j in 0..d {
            y[j] = x[j] + tau * r * w[j];
        }
        action.eval(x, &y)
    };

    let diag: Vec<f64> = points.iter().map(|x| action.eval(x, x)).collect();
    let e_est = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let diagonal_upper = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;

    let mut sup_unit: f64 = 0.0;
    let mut lower = e_est;
    for x in &points {
        for w in &dirs {
            for j in 1..=100 {
                let e = e_at(x, w, j as f64 / 100.0);
                sup_unit = sup_unit.max(e - e_est);
                lower = lower.min(e);
            }
        }
    }
    let jump_constant = 2.0 * sup_unit / tau;

    let (ladder, ceiling_index) = radius_ladder();
    let mut last_bad: Option<usize> = None;
    for (i, &r) in ladder.iter().enumerate() {
        let mut q = f64::INFINITY;
        for x in &points {
            for w in &dirs {
                let e = e_at(x, w, r);
                lower = lower.min(e);
                q = q.min((e - e_est) / (tau * r));
            }
        }
        if !(q > jump_constant) {
            last_bad = Some(i);
        }
    }
    let raw_radius = match last_bad {
        None => ladder[0],
        Some(i) if i < ceiling_index => ladder[i + 1],
        Some(_) => return Err(WeakKamError::WindowSearchFailed { ceiling: RADIUS_CEILING }),
    };
    let window_radius = safety * raw_radius;

    let outer = window_radius + 1.0;
    let steps = 400;
    let mut slope: f64 = 0.0;
    for x in &points {
        for w in &dirs {
            let mut prev = e_at(x, w, 0.0);
            for j in 1..=steps {
                let r = outer * j as f64 / steps as f64;
                let e = e_at(x, w, r);
                slope = slope.max((e - prev).abs() / (tau * outer / steps as f64));
                prev = e;
            }
        }
    }

    Ok(AprioriBounds {
        window_radius,
        raw_radius,
        lipschitz_bound: jump_constant.max(slope),
        action_lower: lower / tau,
        diagonal_upper,
        jump_constant,
        effective_estimate: e_est,
    })
}
