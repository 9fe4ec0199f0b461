//! Local central velocity moments and a quadrature oracle for them.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{canonical_indices, SymTensor};
use crate::trajectory::{self, NeighborhoodIndex, VelocitySeries};

const MOMENT_VERSION: u16 = 2;
const SECTION_TAG: &[u8; 4] = b"MOMS";

/// Central velocity moments of one neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentTensors {
    pub mean_velocity: Vec<f64>,
    /// Tensors of orders `2..=max_order`, index 0 is order 2.
    pub tensors: Vec<SymTensor>,
    pub sample_count: usize,
}

impl MomentTensors {
    pub fn dim(&self) -> usize {
        self.mean_velocity.len()
    }

    pub fn max_order(&self) -> usize {
        self.tensors.len() + 1
    }

    pub fn order(&self, k: usize) -> Option<&SymTensor> {
        k.checked_sub(2).and_then(|i| self.tensors.get(i))
    }

    pub fn c2(&self) -> &SymTensor {
        &self.tensors[0]
    }

    pub fn c4(&self) -> Option<&SymTensor> {
        self.order(4)
    }

    pub fn c2_matrix(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        nalgebra::DMatrix::from_fn(n, n, |i, j| self.c2().get(&[i, j]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentField {
    pub cells: Vec<MomentTensors>,
}

/// Product of centred components over an index tuple; shared by the sample
/// estimator and the empirical measure so both sum identical terms.
#[inline]
fn centered_product(u: &[f64], idx: &[usize]) -> f64 {
    idx.iter().fold(1.0, |p, &k| p * u[k])
}

fn cell_moments<'a>(
    velocities: impl Iterator<Item = &'a [f64]> + Clone,
    dim: usize,
    max_order: usize,
    tuples: &[Vec<Vec<usize>>],
) -> MomentTensors {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for v in velocities.clone() {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
        count += 1;
    }
    let nf = count as f64;
    for m in &mut mean {
        *m /= nf;
    }
    let mut sums: Vec<Vec<f64>> = tuples.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut u = vec![0.0; dim];
    for v in velocities {
        for k in 0..dim {
            u[k] = v[k] - mean[k];
        }
        for (s, ts) in sums.iter_mut().zip(tuples) {
            for (acc, idx) in s.iter_mut().zip(ts) {
                *acc += centered_product(&u, idx);
            }
        }
    }
    let tensors = sums
        .into_iter()
        .enumerate()
        .map(|(i, s)| SymTensor::from_canonical(dim, i + 2, s.into_iter().map(|x| x / nf).collect()))
        .collect();
    debug_assert_eq!(max_order, tuples.len() + 1);
    MomentTensors {
        mean_velocity: mean,
        tensors,
        sample_count: count,
    }
}

fn tuple_table(dim: usize, max_order: usize) -> Vec<Vec<Vec<usize>>> {
    (2..=max_order).map(|k| canonical_indices(dim, k)).collect()
}

pub fn local_moments(vs: &VelocitySeries, idx: &NeighborhoodIndex, max_order: usize) -> Result<MomentField> {
    if !(2..=8).contains(&max_order) {
        return Err(Error::InvalidParameter(format!("max_order {max_order} outside [2, 8]")));
    }
    if let Some((cell, c)) = idx.cells.iter().enumerate().find(|(_, c)| c.members.len() < 2) {
        return Err(Error::TooFewMembers {
            cell,
            count: c.members.len(),
        });
    }
    let dim = vs.dim();
    let tuples = tuple_table(dim, max_order);
    let cells = idx
        .cells
        .par_iter()
        .map(|c| cell_moments(c.members.iter().map(|&i| vs.velocity(i)), dim, max_order, &tuples))
        .collect();
    Ok(MomentField { cells })
}

/// Moments of a single set of velocity vectors (one neighbourhood).
pub fn moments_of(velocities: &[Vec<f64>], max_order: usize) -> Result<MomentTensors> {
    if velocities.len() < 2 {
        return Err(Error::TooFewMembers {
            cell: 0,
            count: velocities.len(),
        });
    }
    let dim = velocities[0].len();
    let tuples = tuple_table(dim, max_order);
    Ok(cell_moments(velocities.iter().map(Vec::as_slice), dim, max_order, &tuples))
}

/// A measure over velocity space at a point of state space.
pub trait VelocityMeasure {
    fn dim(&self) -> usize;

    /// Returns `∫ ρ(x, v) f(v) dv` for a vector-valued `f` with `n_out`
    /// components; `f` writes into its output slice.
    fn integrate(&self, point: &[f64], n_out: usize, f: &dyn Fn(&[f64], &mut [f64])) -> Result<Vec<f64>>;
}

/// Finite sum of point masses; integration is exact.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    pub velocities: Vec<Vec<f64>>,
}

impl VelocityMeasure for EmpiricalMeasure {
    fn dim(&self) -> usize {
        self.velocities.first().map_or(0, Vec::len)
    }

    fn integrate(&self, _point: &[f64], n_out: usize, f: &dyn Fn(&[f64], &mut [f64])) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; n_out];
        let mut buf = vec![0.0; n_out];
        for v in &self.velocities {
            f(v, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    pub nodes_per_panel: usize,
    pub initial_panels: usize,
    pub max_refinements: usize,
    /// Absolute tolerance on successive refinements, scaled by the mass.
    pub tolerance: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            nodes_per_panel: 8,
            initial_panels: 2,
            max_refinements: 6,
            tolerance: 1e-10,
        }
    }
}

/// Density `ρ(x, v)` integrated by composite Gauss-Legendre over a box
/// of velocity space supplied per point.
pub struct DensityMeasure<F, B> {
    pub dim: usize,
    pub density: F,
    pub support: B,
    pub config: QuadratureConfig,
}

impl<F, B> DensityMeasure<F, B>
where
    F: Fn(&[f64], &[f64]) -> f64,
    B: Fn(&[f64]) -> Vec<(f64, f64)>,
{
    pub fn new(dim: usize, density: F, support: B) -> Self {
        DensityMeasure {
            dim,
            density,
            support,
            config: QuadratureConfig::default(),
        }
    }

    fn integrate_with(
        &self,
        point: &[f64],
        panels: usize,
        n_out: usize,
        f: &dyn Fn(&[f64], &mut [f64]),
    ) -> Vec<f64> {
        let (gx, gw) = gauss_legendre(self.config.nodes_per_panel);
        let bounds = (self.support)(point);
        // 1-D composite rule per axis
        let axes: Vec<(Vec<f64>, Vec<f64>)> = bounds
            .iter()
            .map(|&(lo, hi)| {
                let h = (hi - lo) / panels as f64;
                let mut xs = Vec::with_capacity(panels * gx.len());
                let mut ws = Vec::with_capacity(panels * gx.len());
                for p in 0..panels {
                    let a = lo + p as f64 * h;
                    for (x, w) in gx.iter().zip(&gw) {
                        xs.push(a + 0.5 * h * (x + 1.0));
                        ws.push(0.5 * h * w);
                    }
                }
                (xs, ws)
            })
            .collect();
        let per_axis = axes[0].0.len();
        let total = per_axis.pow(self.dim as u32);
        let mut acc = vec![0.0; n_out];
        let mut buf = vec![0.0; n_out];
        let mut v = vec![0.0; self.dim];
        for flat in 0..total {
            let mut r = flat;
            let mut w = 1.0;
            for k in (0..self.dim).rev() {
                let i = r % per_axis;
                r /= per_axis;
                v[k] = axes[k].0[i];
                w *= axes[k].1[i];
            }
            let rho = (self.density)(point, &v);
            if rho == 0.0 {
                continue;
            }
            f(&v, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += w * rho * b;
            }
        }
        acc
    }
}

impl<F, B> VelocityMeasure for DensityMeasure<F, B>
where
    F: Fn(&[f64], &[f64]) -> f64,
    B: Fn(&[f64]) -> Vec<(f64, f64)>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn integrate(&self, point: &[f64], n_out: usize, f: &dyn Fn(&[f64], &mut [f64])) -> Result<Vec<f64>> {
        let mut panels = self.config.initial_panels.max(1);
        let mut prev = self.integrate_with(point, panels, n_out, f);
        let mut change = f64::INFINITY;
        for _ in 0..self.config.max_refinements {
            panels *= 2;
            let cur = self.integrate_with(point, panels, n_out, f);
            let scale = prev.iter().chain(&cur).fold(1.0f64, |m, v| m.max(v.abs()));
            change = prev.iter().zip(&cur).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
            prev = cur;
            if change <= self.config.tolerance {
                return Ok(prev);
            }
        }
        Err(Error::QuadratureNonConvergence {
            change,
            tol: self.config.tolerance,
        })
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        xs[i] = x;
        ws[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (xs, ws)
}

/// Central moment tensor of the given order from a velocity measure at `point`.
pub fn moments_from_density(measure: &dyn VelocityMeasure, point: &[f64], order: usize) -> Result<SymTensor> {
    let dim = measure.dim();
    let first = measure.integrate(point, dim + 1, &|v, out| {
        out[0] = 1.0;
        out[1..].copy_from_slice(v);
    })?;
    let mass = first[0];
    if !(mass > 0.0) {
        return Err(Error::InvalidParameter("density has zero mass at point".into()));
    }
    let mean: Vec<f64> = first[1..].iter().map(|m| m / mass).collect();
    let tuples = canonical_indices(dim, order);
    let sums = measure.integrate(point, tuples.len(), &|v, out| {
        let u: Vec<f64> = v.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for (o, idx) in out.iter_mut().zip(&tuples) {
            *o = centered_product(&u, idx);
        }
    })?;
    Ok(SymTensor::from_canonical(
        dim,
        order,
        sums.into_iter().map(|s| s / mass).collect(),
    ))
}

/// Writes a moment field as a section-tagged binary container.
pub fn write_moment_field<W: Write>(field: &MomentField, w: &mut W) -> std::io::Result<()> {
    let dim = field.cells.first().map_or(0, MomentTensors::dim);
    let max_order = field.cells.first().map_or(2, MomentTensors::max_order);
    trajectory::write_header(w, MOMENT_VERSION, dim, field.cells.len(), 0.0)?;
    w.write_all(SECTION_TAG)?;
    w.write_all(&(max_order as u16).to_le_bytes())?;
    for c in &field.cells {
        w.write_all(&(c.sample_count as u64).to_le_bytes())?;
        for v in c.mean_velocity.iter().chain(c.tensors.iter().flat_map(|t| t.values())) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_moment_field<R: Read>(r: &mut R) -> Result<MomentField> {
    let bad = |reason: &str| Error::Malformed {
        row: 0,
        reason: reason.into(),
    };
    let h = trajectory::read_header(r)?;
    if h.version != MOMENT_VERSION {
        return Err(bad("not a moment checkpoint"));
    }
    let mut tag = [0u8; 6];
    r.read_exact(&mut tag).map_err(|_| bad("truncated section"))?;
    if &tag[..4] != SECTION_TAG {
        return Err(bad("unknown section tag"));
    }
    let max_order = u16::from_le_bytes([tag[4], tag[5]]) as usize;
    let mut cells = Vec::with_capacity(h.len);
    for _ in 0..h.len {
        let mut cnt = [0u8; 8];
        r.read_exact(&mut cnt).map_err(|_| bad("truncated cell"))?;
        let mean_velocity = trajectory::read_f64s(r, h.dim)?;
        let tensors = (2..=max_order)
            .map(|k| {
                let n = crate::tensor::canonical_count(h.dim, k);
                trajectory::read_f64s(r, n).map(|v| SymTensor::from_canonical(h.dim, k, v))
            })
            .collect::<Result<Vec<_>>>()?;
        cells.push(MomentTensors {
            mean_velocity,
            tensors,
            sample_count: u64::from_le_bytes(cnt) as usize,
        });
    }
    Ok(MomentField { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_set() {
        let v = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let m = moments_of(&v, 5).unwrap();
        assert_eq!(m.mean_velocity, vec![0.0, 0.0]);
        assert_eq!(m.c2().get(&[0, 0]), 0.5);
        assert_eq!(m.c2().get(&[1, 1]), 0.5);
        assert_eq!(m.c2().get(&[0, 1]), 0.0);
        assert!(m.order(3).unwrap().values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equal_velocities_vanish() {
        let v = vec![vec![0.7, -2.0]; 9];
        let m = moments_of(&v, 5).unwrap();
        for k in 2..=5 {
            assert!(m.order(k).unwrap().max_abs() < 1e-30);
        }
    }

    #[test]
    fn too_few_members() {
        assert!(matches!(moments_of(&[vec![1.0, 2.0]], 3), Err(Error::TooFewMembers { .. })));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    fn std_normal() -> DensityMeasure<impl Fn(&[f64], &[f64]) -> f64, impl Fn(&[f64]) -> Vec<(f64, f64)>> {
        DensityMeasure::new(
            2,
            |_: &[f64], v: &[f64]| (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp(),
            |_: &[f64]| vec![(-12.0, 12.0); 2],
        )
    }

    #[test]
    fn normal_density_moments() {
        let m = std_normal();
        let c2 = moments_from_density(&m, &[0.0, 0.0], 2).unwrap();
        assert!((c2.get(&[0, 0]) - 1.0).abs() < 1e-6);
        assert!((c2.get(&[1, 1]) - 1.0).abs() < 1e-6);
        assert!(c2.get(&[0, 1]).abs() < 1e-6);
        let c3 = moments_from_density(&m, &[0.0, 0.0], 3).unwrap();
        assert!(c3.max_abs() < 1e-6);
    }

    #[test]
    fn uniform_fourth_moment() {
        let m = DensityMeasure::new(2, |_: &[f64], _: &[f64]| 0.25, |_: &[f64]| vec![(-1.0, 1.0); 2]);
        let c4 = moments_from_density(&m, &[0.0, 0.0], 4).unwrap();
        assert!((c4.get(&[0, 0, 0, 0]) - 0.2).abs() < 1e-6);
        assert!((c4.get(&[0, 0, 1, 1]) - 1.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn non_convergence_reported() {
        let mut m = DensityMeasure::new(
            2,
            |_: &[f64], v: &[f64]| if v[0] * v[0] + v[1] * v[1] < 0.5 { 1.0 } else { 0.0 },
            |_: &[f64]| vec![(-1.0, 1.0); 2],
        );
        m.config.max_refinements = 2;
        assert!(matches!(
            moments_from_density(&m, &[0.0, 0.0], 2),
            Err(Error::QuadratureNonConvergence { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let v: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let field = MomentField {
            cells: vec![moments_of(&v, 5).unwrap(), moments_of(&v[3..], 5).unwrap()],
        };
        let mut buf = Vec::new();
        write_moment_field(&field, &mut buf).unwrap();
        assert_eq!(read_moment_field(&mut buf.as_slice()).unwrap(), field);
    }
}
