//! Uniform periodic grids on the unit torus and functions sampled on them.

use std::io::{Read, Write};

use crate::error::{Result, WeakKamError};

/// `n^d` nodes `i h` with `h = 1/n` on `[0, 1)^d`. Flat indices are row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PeriodicGrid {
    dim: usize,
    n: usize,
}

impl PeriodicGrid {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if dim == 0 {
            return Err(WeakKamError::InvalidInput("grid dimension must be positive".into()));
        }
        if n < 4 {
            return Err(WeakKamError::InvalidInput(format!("grid needs at least 4 nodes per axis, got {n}")));
        }
        if (n as f64).powi(dim as i32) > u32::MAX as f64 {
            return Err(WeakKamError::InvalidInput("grid too large".into()));
        }
        Ok(Self { dim, n })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for c in out.iter_mut().rev() {
            *c = idx % self.n;
            idx /= self.n;
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        let mut m = vec![0; self.dim];
        self.multi_index(idx, &mut m);
        m.iter().map(|&i| i as f64 / self.n as f64).collect()
    }

    /// Node reached from `idx` by the integer displacement `offset`, wrapped.
    pub fn shift(&self, idx: usize, offset: &[i64]) -> usize {
        let n = self.n as i64;
        if self.dim == 1 {
            return (idx as i64 + offset[0]).rem_euclid(n) as usize;
        }
        let mut rest = idx;
        let mut out = 0usize;
        let mut scale = 1usize;
        for j in (0..self.dim).rev() {
            let c = (rest % self.n) as i64;
            rest /= self.n;
            out += ((c + offset[j]).rem_euclid(n) as usize) * scale;
            scale *= self.n;
        }
        out
    }
}

/// Euclidean distance on the torus, using the nearest periodic image.
pub fn dist_torus(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = (a - b).abs() % 1.0;
            let d = d.min(1.0 - d);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `max - min`.
pub fn oscillation(values: &[f64]) -> f64 {
    let (lo, hi) = min_max(values);
    hi - lo
}

/// Shift so that the minimum is exactly zero.
pub fn normalize_min_zero(values: &[f64]) -> Vec<f64> {
    let (lo, _) = min_max(values);
    values.iter().map(|v| v - lo).collect()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: PeriodicGrid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(WeakKamError::InvalidInput(format!(
                "grid function has {} values for {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(WeakKamError::InvalidInput("grid function values must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_raw(grid: PeriodicGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn constant(grid: PeriodicGrid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.len()] }
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = (0..grid.len()).map(|i| f(&grid.coords(i))).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn min(&self) -> f64 {
        min_max(&self.values).0
    }

    pub fn max(&self) -> f64 {
        min_max(&self.values).1
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn oscillation(&self) -> f64 {
        oscillation(&self.values)
    }

    pub fn normalized(&self) -> Self {
        Self { grid: self.grid, values: normalize_min_zero(&self.values) }
    }

    pub fn add_constant(&self, c: f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|v| v + c).collect() }
    }

    pub fn sup_norm_diff(&self, other: &Self) -> Result<f64> {
        if self.grid != other.grid {
            return Err(WeakKamError::GridMismatch);
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Largest difference quotient between axis-adjacent nodes.
    pub fn discrete_lipschitz(&self) -> f64 {
        let n = self.grid.n;
        let h = self.grid.spacing();
        let mut best: f64 = 0.0;
        let mut stride = 1usize;
        for _axis in 0..self.grid.dim {
            for i in 0..self.values.len() {
                let coord = (i / stride) % n;
                let j = if coord + 1 == n { i + stride - n * stride } else { i + stride };
                best = best.max((self.values[j] - self.values[i]).abs() / h);
            }
            stride *= n;
        }
        best
    }

    /// Largest jump between axis-adjacent nodes.
    pub fn max_adjacent_jump(&self) -> f64 {
        self.discrete_lipschitz() * self.grid.spacing()
    }

    /// Multilinear periodic interpolation at an arbitrary point.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let d = self.grid.dim;
        let n = self.grid.n;
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for j in 0..d {
            let s = crate::models::wrap_unit(x[j]) * n as f64;
            let i = (s.floor() as usize).min(n - 1);
            base[j] = i;
            frac[j] = s - i as f64;
        }
        self.blend(&base, &frac)
    }

    fn blend(&self, base: &[usize], frac: &[f64]) -> f64 {
        let d = self.grid.dim;
        let n = self.grid.n;
        let mut acc = 0.0;
        let mut corner = vec![0usize; d];
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            for j in 0..d {
                if mask >> j & 1 == 1 {
                    w *= frac[j];
                    corner[j] = (base[j] + 1) % n;
                } else {
                    w *= 1.0 - frac[j];
                    corner[j] = base[j];
                }
            }
            if w != 0.0 {
                acc += w * self.values[self.grid.flat_index(&corner)];
            }
        }
        acc
    }

    /// Values on another grid of the same dimension. Coincident nodes are
    /// copied exactly; other nodes are interpolated multilinearly.
    pub fn resample(&self, target: &PeriodicGrid) -> Result<Self> {
        if target.dim != self.grid.dim {
            return Err(WeakKamError::GridMismatch);
        }
        let (ns, nt) = (self.grid.n, target.n);
        let d = target.dim;
        let mut multi = vec![0usize; d];
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        let values = (0..target.len())
            .map(|i| {
                target.multi_index(i, &mut multi);
                for j in 0..d {
                    let num = multi[j] * ns;
                    base[j] = num / nt;
                    frac[j] = (num % nt) as f64 / nt as f64;
                }
                self.blend(&base, &frac)
            })
            .collect();
        Ok(Self { grid: *target, values })
    }

    /// CSV with columns `index_0.., x_0.., value` in 17 significant digits.
    /// Optional provenance lines are written first as `#` comments.
    pub fn write_csv<W: Write>(&self, out: W, provenance: &[String]) -> Result<()> {
        self.write_csv_digits(out, provenance, 17)
    }

    /// As [`write_csv`](Self::write_csv) with `digits` significant digits.
    pub fn write_csv_digits<W: Write>(&self, out: W, provenance: &[String], digits: usize) -> Result<()> {
        let mut out = out;
        for line in provenance {
            writeln!(out, "# {line}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        let d = self.grid.dim;
        let header: Vec<String> = (0..d)
            .map(|j| format!("index_{j}"))
            .chain((0..d).map(|j| format!("x_{j}")))
            .chain(std::iter::once("value".to_string()))
            .collect();
        w.write_record(&header)?;
        let mut multi = vec![0usize; d];
        let h = self.grid.spacing();
        for (i, v) in self.values.iter().enumerate() {
            self.grid.multi_index(i, &mut multi);
            let rec: Vec<String> = multi
                .iter()
                .map(|m| m.to_string())
                .chain(multi.iter().map(|&m| format_digits(m as f64 * h, digits)))
                .chain(std::iter::once(format_digits(*v, digits)))
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(grid: PeriodicGrid, input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut values = vec![f64::NAN; grid.len()];
        let d = grid.dim;
        let mut multi = vec![0usize; d];
        for rec in r.records() {
            let rec = rec?;
            for j in 0..d {
                multi[j] = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| WeakKamError::InvalidInput(format!("bad index '{}'", &rec[j])))?;
            }
            if multi.iter().any(|&m| m >= grid.n) {
                return Err(WeakKamError::GridMismatch);
            }
            let v: f64 = rec[2 * d]
                .trim()
                .parse()
                .map_err(|_| WeakKamError::InvalidInput(format!("bad value '{}'", &rec[2 * d])))?;
            values[grid.flat_index(&multi)] = v;
        }
        Self::new(grid, values)
    }
}

/// Full double precision: 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Scientific notation with `digits` significant digits (at least one).
pub fn format_digits(v: f64, digits: usize) -> String {
    format!("{v:.*e}", digits.max(1) - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn oscillation_and_normalization() {
        assert_eq!(oscillation(&[0.0, 1.0, 2.0]), 2.0);
        assert_eq!(normalize_min_zero(&[1.0, 3.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn torus_distance_uses_nearest_image() {
        assert!((dist_torus(&[0.1], &[0.9]) - 0.2).abs() < 1e-15);
        assert!((dist_torus(&[0.0, 0.0], &[0.5, 0.5]) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_of_sawtooth_is_one() {
        let g = PeriodicGrid::new(1, 64).unwrap();
        let f = GridFunction::from_fn(g, |x| dist_torus(x, &[0.0])).unwrap();
        assert!((f.discrete_lipschitz() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_of_sine_within_two_percent() {
        let g = PeriodicGrid::new(1, 64).unwrap();
        let a = 0.7;
        let f = GridFunction::from_fn(g, |x| a * (2.0 * PI * x[0]).sin()).unwrap();
        let l = f.discrete_lipschitz();
        assert!((l - 2.0 * PI * a).abs() / (2.0 * PI * a) < 0.02);
    }

    #[test]
    fn lipschitz_in_two_dimensions_sees_both_axes() {
        let g = PeriodicGrid::new(2, 8).unwrap();
        let f = GridFunction::from_fn(g, |x| 3.0 * dist_torus(&[x[1]], &[0.0])).unwrap();
        assert!((f.discrete_lipschitz() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sup_norm_rejects_mismatched_grids() {
        let a = GridFunction::constant(PeriodicGrid::new(1, 8).unwrap(), 0.0);
        let b = GridFunction::constant(PeriodicGrid::new(1, 16).unwrap(), 0.0);
        assert!(matches!(a.sup_norm_diff(&b), Err(WeakKamError::GridMismatch)));
    }

    #[test]
    fn shift_wraps_each_axis() {
        let g = PeriodicGrid::new(2, 5).unwrap();
        let idx = g.flat_index(&[4, 0]);
        assert_eq!(g.shift(idx, &[1, -1]), g.flat_index(&[0, 4]));
        let g1 = PeriodicGrid::new(1, 6).unwrap();
        assert_eq!(g1.shift(1, &[-3]), 4);
    }

    #[test]
    fn resample_copies_nested_nodes_exactly() {
        let fine = PeriodicGrid::new(1, 64).unwrap();
        let coarse = PeriodicGrid::new(1, 16).unwrap();
        let f = GridFunction::from_fn(fine, |x| (2.0 * PI * x[0]).sin()).unwrap();
        let r = f.resample(&coarse).unwrap();
        for i in 0..16 {
            assert_eq!(r.values()[i], f.values()[4 * i]);
        }
        let up = r.resample(&PeriodicGrid::new(1, 32).unwrap()).unwrap();
        assert_eq!(up.values()[1], 0.5 * (r.values()[0] + r.values()[1]));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let g = PeriodicGrid::new(2, 4).unwrap();
        let f = GridFunction::from_fn(g, |x| (x[0] * 7.3).sin() / 3.0 + x[1]).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf, &["seed = 1".to_string()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed = 1\nindex_0,index_1,x_0,x_1,value\n"));
        let back = GridFunction::read_csv(g, buf.as_slice()).unwrap();
        assert_eq!(back, f);
    }
}
