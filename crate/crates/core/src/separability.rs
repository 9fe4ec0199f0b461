//! Verdicts: does the joint density of the recovered coordinates and their
//! rates factor across the two groups, which grouping of channels achieves
//! that, and are the sources linear in the measurements.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::sorted_eigen;
use crate::invariants::{build_multiplets, IndexGrouping, InvariantField};
use crate::linalg::lstsq;
use crate::manifold::{
    estimate_dimension, evaluate_sigma, fit_chart, multiplet_cloud, Chart, ChartConfig, ManifoldTest, SourceMap,
};
use crate::trajectory::{NeighborhoodIndex, VelocitySeries};

/// Per-sample source coordinates and their time derivatives, split into
/// groups A (`..d_a`) and B (`d_a..`).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStreams {
    pub d_a: usize,
    pub d_b: usize,
    pub values: Vec<Vec<f64>>,
    pub rates: Vec<Vec<f64>>,
}

impl SourceStreams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// How the rate of a cell-quantised coordinate is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRate {
    /// `(σ[i+1] − σ[i−1]) / 2dt`.
    CentralDifference,
    /// Local gradient of σ over the cell field applied to the measured
    /// velocity. Avoids the simultaneous jumps of all coordinates at cell
    /// crossings.
    Chain { radius: usize },
}

impl Default for SigmaRate {
    fn default() -> Self {
        SigmaRate::Chain { radius: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorizationConfig {
    /// Library size per group (monomials in graded order).
    pub n_functions: usize,
    pub threshold: f64,
    /// Circular shifts of group B used to estimate the null; 0 disables.
    pub null_shifts: usize,
    pub rate: SigmaRate,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        FactorizationConfig {
            n_functions: 64,
            threshold: 0.05,
            null_shifts: 0,
            rate: SigmaRate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub a: String,
    pub b: String,
    pub corr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub statistic: f64,
    pub threshold: f64,
    pub factorizes: bool,
    pub samples: usize,
    pub breakdown: Vec<PairCorrelation>,
    /// Test functions dropped for zero variance.
    pub skipped: Vec<String>,
    pub null_statistics: Vec<f64>,
}

/// Exponent vectors of all monomials of total degree 1..=3 in `vars` variables.
fn monomials(vars: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for deg in 1..=3u8 {
        let mut e = vec![0u8; vars];
        fill(&mut e, 0, deg, &mut out);
    }
    out
}

fn fill(e: &mut Vec<u8>, pos: usize, left: u8, out: &mut Vec<Vec<u8>>) {
    if pos + 1 == e.len() {
        e[pos] = left;
        out.push(e.clone());
        e[pos] = 0;
        return;
    }
    for k in (0..=left).rev() {
        e[pos] = k;
        fill(e, pos + 1, left - k, out);
    }
    e[pos] = 0;
}

fn monomial_name(e: &[u8], d: usize, group: char) -> String {
    let parts: Vec<String> = e
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0)
        .map(|(i, &p)| {
            let base = if i < d { format!("s{group}{}", i + 1) } else { format!("v{group}{}", i - d + 1) };
            if p == 1 {
                base
            } else {
                format!("{base}^{p}")
            }
        })
        .collect();
    parts.join("*")
}

fn standardize_clip(col: &mut [f64]) {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    for x in col.iter_mut() {
        *x = if sd > 0.0 { ((*x - m) / sd).clamp(-3.0, 3.0) } else { 0.0 };
    }
}

/// Centred, unit-norm test functions for one group; returns (names, columns, skipped).
fn library(vars: &[Vec<f64>], d: usize, group: char, n_functions: usize) -> (Vec<String>, Vec<Vec<f64>>, Vec<String>) {
    let n = vars.first().map_or(0, Vec::len);
    let mut names = Vec::new();
    let mut cols = Vec::new();
    let mut skipped = Vec::new();
    for e in monomials(vars.len()).into_iter().take(n_functions) {
        let name = monomial_name(&e, d, group);
        let mut col: Vec<f64> = (0..n)
            .map(|t| e.iter().zip(vars).map(|(&p, v)| v[t].powi(p as i32)).product())
            .collect();
        let m = col.iter().sum::<f64>() / n as f64;
        col.iter_mut().for_each(|x| *x -= m);
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-12 * (n as f64).sqrt() {
            skipped.push(name);
            continue;
        }
        col.iter_mut().for_each(|x| *x /= norm);
        names.push(name);
        cols.push(col);
    }
    (names, cols, skipped)
}

fn max_abs_corr(a: &[Vec<f64>], b: &[Vec<f64>], shift: usize) -> f64 {
    let n = a.first().map_or(0, Vec::len);
    a.iter()
        .flat_map(|x| {
            b.iter().map(move |y| {
                (0..n).map(|t| x[t] * y[(t + shift) % n]).sum::<f64>().abs()
            })
        })
        .fold(0.0, f64::max)
}

/// Dependence statistic between the two groups of a stream set.
pub fn factorize_streams(streams: &SourceStreams, cfg: &FactorizationConfig) -> Result<FactorizationReport> {
    if cfg.n_functions < 4 {
        return Err(Error::InvalidParameter("n_functions must be at least 4".into()));
    }
    let n = streams.len();
    if n < 10 {
        return Err(Error::TooFewDefined { defined: n, total: n });
    }
    let dim = streams.d_a + streams.d_b;
    let column = |k: usize, rates: bool| -> Vec<f64> {
        let src = if rates { &streams.rates } else { &streams.values };
        let mut c: Vec<f64> = src.iter().map(|v| v[k]).collect();
        standardize_clip(&mut c);
        c
    };
    let group_vars = |range: std::ops::Range<usize>| -> Vec<Vec<f64>> {
        range.clone().map(|k| column(k, false)).chain(range.map(|k| column(k, true))).collect()
    };
    let (na, ca, mut skipped) = library(&group_vars(0..streams.d_a), streams.d_a, 'A', cfg.n_functions);
    let (nb, cb, sb) = library(&group_vars(streams.d_a..dim), streams.d_b, 'B', cfg.n_functions);
    skipped.extend(sb);
    if ca.is_empty() || cb.is_empty() {
        return Err(Error::InsufficientVariation("every test function is constant".into()));
    }
    let breakdown: Vec<PairCorrelation> = ca
        .par_iter()
        .zip(&na)
        .flat_map_iter(|(x, xa)| {
            cb.iter().zip(&nb).map(move |(y, yb)| PairCorrelation {
                a: xa.clone(),
                b: yb.clone(),
                corr: x.iter().zip(y).map(|(p, q)| p * q).sum(),
            })
        })
        .collect();
    let statistic = breakdown.iter().map(|p| p.corr.abs()).fold(0.0, f64::max);
    let null_statistics: Vec<f64> = (1..=cfg.null_shifts)
        .into_par_iter()
        .map(|k| max_abs_corr(&ca, &cb, k * n / (cfg.null_shifts + 1)))
        .collect();
    let threshold = if null_statistics.is_empty() {
        cfg.threshold
    } else {
        let mut s = null_statistics.clone();
        s.sort_by(f64::total_cmp);
        let q = s[((0.95 * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        cfg.threshold.max(q)
    };
    Ok(FactorizationReport {
        statistic,
        threshold,
        factorizes: statistic <= threshold,
        samples: n,
        breakdown,
        skipped,
        null_statistics,
    })
}

/// Samples within `radius` adjacency hops of each cell (the cell included).
fn hop_neighbourhoods(idx: &NeighborhoodIndex, radius: usize) -> Vec<Vec<usize>> {
    let adj = idx.neighbors();
    (0..idx.len())
        .map(|start| {
            let mut depth = vec![usize::MAX; idx.len()];
            depth[start] = 0;
            let mut queue = VecDeque::from([start]);
            let mut out = Vec::new();
            while let Some(c) = queue.pop_front() {
                out.push(c);
                if depth[c] == radius {
                    continue;
                }
                for &nb in &adj[c] {
                    if depth[nb] == usize::MAX {
                        depth[nb] = depth[c] + 1;
                        queue.push_back(nb);
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// Local linear fit of per-cell values against cell centres.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    /// Fitted value at the cell centre.
    pub value: Vec<f64>,
    /// Rows: value components, columns: measurement coordinates.
    pub gradient: DMatrix<f64>,
    /// Residual covariance between value components.
    pub residual_cov: DMatrix<f64>,
    /// Gradient block of `(XᵀX)⁻¹`; times a residual variance it is the
    /// covariance of one gradient row.
    pub design_inv: DMatrix<f64>,
}

/// Least-squares linear fit of per-cell values against cell centres over
/// each cell's hop neighbourhood.
/// `centres` locates each cell, normally [`NeighborhoodIndex::centroids`].
pub fn cell_fits(
    values: &[Option<Vec<f64>>],
    centres: &[Vec<f64>],
    idx: &NeighborhoodIndex,
    radius: usize,
) -> Vec<Option<LocalFit>> {
    let n = idx.dim();
    let hoods = hop_neighbourhoods(idx, radius);
    hoods
        .par_iter()
        .enumerate()
        .map(|(c, hood)| {
            let own = values[c].as_ref()?;
            let members: Vec<usize> = hood.iter().copied().filter(|&h| values[h].is_some()).collect();
            if members.len() < n + 2 {
                return None;
            }
            let c0 = &centres[c];
            let x = DMatrix::from_fn(members.len(), n + 1, |r, j| {
                if j == 0 {
                    1.0
                } else {
                    centres[members[r]][j - 1] - c0[j - 1]
                }
            });
            let svd = x.clone().svd(false, false);
            let sv = &svd.singular_values;
            if sv.min() <= 1e-9 * sv.max() {
                return None;
            }
            let y = DMatrix::from_fn(members.len(), own.len(), |r, k| values[members[r]].as_ref().unwrap()[k]);
            let beta = lstsq(&x, &y);
            // Noise level from a quadratic fit where the neighbourhood allows,
            // so that curvature is not mistaken for noise.
            let quad_terms = n * (n + 1) / 2;
            let (resid, dof) = if members.len() >= n + 1 + quad_terms + 3 {
                let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
                let xq = DMatrix::from_fn(members.len(), n + 1 + quad_terms, |r, j| {
                    if j <= n {
                        x[(r, j)]
                    } else {
                        let (a, b) = pairs[j - n - 1];
                        x[(r, a + 1)] * x[(r, b + 1)]
                    }
                });
                let bq = lstsq(&xq, &y);
                (&y - &xq * bq, (members.len() - n - 1 - quad_terms) as f64)
            } else {
                (&y - &x * &beta, (members.len() - n - 1) as f64)
            };
            let xtx_inv = (x.transpose() * &x).try_inverse()?;
            Some(LocalFit {
                value: (0..own.len()).map(|k| beta[(0, k)]).collect(),
                gradient: DMatrix::from_fn(own.len(), n, |k, j| beta[(j + 1, k)]),
                residual_cov: resid.transpose() * &resid / dof,
                design_inv: xtx_inv.view((1, 1), (n, n)).into_owned(),
            })
        })
        .collect()
}

fn per_cell_sigma(map: &SourceMap, cells: usize) -> Vec<Option<Vec<f64>>> {
    let mut out = vec![None; cells];
    for (s, c) in map.sigma.iter().zip(&map.cell) {
        if let (Some(s), Some(c)) = (s, c) {
            out[*c].get_or_insert_with(|| s.clone());
        }
    }
    out
}

/// Source streams from a map of σ, keeping samples where σ and its rate exist.
pub fn sigma_streams(map: &SourceMap, vs: &VelocitySeries, idx: &NeighborhoodIndex, rate: SigmaRate) -> Result<SourceStreams> {
    let total = map.len();
    let mut values = Vec::new();
    let mut rates = Vec::new();
    match rate {
        SigmaRate::CentralDifference => {
            for i in 1..total.saturating_sub(1) {
                if let (Some(a), Some(s), Some(b)) = (&map.sigma[i - 1], &map.sigma[i], &map.sigma[i + 1]) {
                    values.push(s.clone());
                    rates.push(a.iter().zip(b).map(|(a, b)| (b - a) / (2.0 * map.dt)).collect());
                }
            }
        }
        SigmaRate::Chain { radius } => {
            let centres = idx.centroids(vs);
            let fits = cell_fits(&per_cell_sigma(map, idx.len()), &centres, idx, radius);
            for i in 0..total {
                if let (Some(s), Some(c)) = (&map.sigma[i], map.cell[i]) {
                    if let Some(fit) = &fits[c] {
                        let g = &fit.gradient;
                        let v = DMatrix::from_column_slice(vs.dim(), 1, vs.velocity(i));
                        let off = DMatrix::from_fn(vs.dim(), 1, |k, _| vs.position(i)[k] - centres[c][k]);
                        let corr = g * off;
                        values.push(s.iter().zip(corr.iter()).map(|(a, b)| a + b).collect());
                        rates.push((g * v).iter().copied().collect());
                    }
                }
            }
        }
    }
    if (values.len() as f64) < 0.8 * total as f64 {
        return Err(Error::TooFewDefined {
            defined: values.len(),
            total,
        });
    }
    Ok(SourceStreams {
        d_a: map.d_a,
        d_b: map.d_b,
        values,
        rates,
    })
}

pub fn factorization_test(
    map: &SourceMap,
    vs: &VelocitySeries,
    idx: &NeighborhoodIndex,
    cfg: &FactorizationConfig,
) -> Result<FactorizationReport> {
    factorize_streams(&sigma_streams(map, vs, idx, cfg.rate)?, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimensionConfig {
    pub k: usize,
    pub threshold: f64,
}

impl Default for DimensionConfig {
    fn default() -> Self {
        DimensionConfig { k: 12, threshold: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub dimension: DimensionConfig,
    pub chart: ChartConfig,
    pub factorization: FactorizationConfig,
    /// Candidates whose charts fold back on themselves fail. Off by default:
    /// the fold heuristic misfires on thin, noisy clouds.
    pub reject_non_injective: bool,
    /// Enumeration stops after this many groupings.
    pub max_groupings: usize,
}

impl PartitionConfig {
    /// Gradient radius used for σ rates, 2 when rates are differenced.
    pub fn factorization_radius(&self) -> usize {
        match self.factorization.rate {
            SigmaRate::Chain { radius } => radius,
            SigmaRate::CentralDifference => 2,
        }
    }
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            dimension: DimensionConfig::default(),
            chart: ChartConfig::default(),
            // σ carries cell-level estimation error shared between the groups,
            // so the dependence floor sits well above that of clean streams.
            factorization: FactorizationConfig {
                threshold: 0.15,
                ..FactorizationConfig::default()
            },
            reject_non_injective: false,
            max_groupings: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub grouping: IndexGrouping,
    pub test_a: Option<ManifoldTest>,
    pub test_b: Option<ManifoldTest>,
    pub chart_injective: Option<bool>,
    pub factorization: Option<FactorizationReport>,
    /// Why the candidate stopped early, if it did.
    pub error: Option<String>,
    #[serde(skip)]
    pub source_map: Option<SourceMap>,
    #[serde(skip)]
    pub charts: Option<(Chart, Chart)>,
    #[serde(skip)]
    pub multiplets: Option<InvariantField>,
}

impl Candidate {
    pub fn passes(&self) -> bool {
        self.factorization.as_ref().is_some_and(|f| f.factorizes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Separable { grouping: IndexGrouping },
    Inseparable,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionSearchResult {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub candidates: Vec<Candidate>,
    pub truncated: bool,
}

impl PartitionSearchResult {
    pub fn winner(&self) -> Option<&Candidate> {
        match &self.verdict {
            Verdict::Separable { grouping } => self.candidates.iter().find(|c| &c.grouping == grouping),
            Verdict::Inseparable => None,
        }
    }
}

/// Bipartitions up to exchange, ascending `d_a`, groups in lexicographic order.
pub fn enumerate_groupings(n: usize) -> Vec<IndexGrouping> {
    let mut out = Vec::new();
    for d_a in 1..=n / 2 {
        let mut subsets = Vec::new();
        combos(n, d_a, 0, &mut Vec::new(), &mut subsets);
        for a in subsets {
            if 2 * d_a == n && a[0] != 0 {
                continue;
            }
            out.push(IndexGrouping::new(a, n).expect("valid subset"));
        }
    }
    out
}

fn combos(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() == k {
        out.push(cur.clone());
        return;
    }
    for i in start..n {
        cur.push(i);
        combos(n, k, i + 1, cur, out);
        cur.pop();
    }
}

/// Runs one grouping through multiplets, dimension tests, charts, σ and the
/// factorization test.
pub fn evaluate_grouping(
    field: &InvariantField,
    grouping: &IndexGrouping,
    idx: &NeighborhoodIndex,
    vs: &VelocitySeries,
    cfg: &PartitionConfig,
) -> Candidate {
    let mut cand = Candidate {
        grouping: grouping.clone(),
        test_a: None,
        test_b: None,
        chart_injective: None,
        factorization: None,
        error: None,
        source_map: None,
        charts: None,
        multiplets: None,
    };
    let result = (|| -> Result<()> {
        let inv = build_multiplets(field, grouping)?;
        let dc = &cfg.dimension;
        let cloud_a = multiplet_cloud(&inv, idx, true)?;
        let cloud_b = multiplet_cloud(&inv, idx, false)?;
        let ta = estimate_dimension(&cloud_a, dc.k, grouping.d_a(), dc.threshold)?;
        let tb = estimate_dimension(&cloud_b, dc.k, grouping.d_b(), dc.threshold)?;
        let pass = ta.passes && tb.passes;
        cand.test_a = Some(ta);
        cand.test_b = Some(tb);
        if !pass {
            cand.multiplets = Some(inv);
            return Ok(());
        }
        let ca = fit_chart(&cloud_a, grouping.d_a(), &cfg.chart)?;
        let cb = fit_chart(&cloud_b, grouping.d_b(), &cfg.chart)?;
        let injective = !(ca.injectivity_flag || cb.injectivity_flag);
        cand.chart_injective = Some(injective);
        let map = evaluate_sigma((&ca, &cb), &inv, idx, vs)?;
        cand.charts = Some((ca, cb));
        cand.multiplets = Some(inv);
        if injective || !cfg.reject_non_injective {
            cand.factorization = Some(factorization_test(&map, vs, idx, &cfg.factorization)?);
        }
        cand.source_map = Some(map);
        Ok(())
    })();
    if let Err(e) = result {
        cand.error = Some(e.to_string());
    }
    cand
}

pub fn partition_search(
    field: &InvariantField,
    idx: &NeighborhoodIndex,
    vs: &VelocitySeries,
    cfg: &PartitionConfig,
) -> Result<PartitionSearchResult> {
    let n = idx.dim();
    if n < 2 {
        return Err(Error::InvalidParameter("partition search needs N >= 2".into()));
    }
    if field.is_empty() {
        return Err(Error::InsufficientCells { have: 0, need: 1 });
    }
    let mut groupings = enumerate_groupings(n);
    let truncated = groupings.len() > cfg.max_groupings;
    groupings.truncate(cfg.max_groupings);
    let candidates: Vec<Candidate> = groupings
        .par_iter()
        .map(|g| evaluate_grouping(field, g, idx, vs, cfg))
        .collect();
    let verdict = candidates
        .iter()
        .find(|c| c.passes())
        .map_or(Verdict::Inseparable, |c| Verdict::Separable {
            grouping: c.grouping.clone(),
        });
    Ok(PartitionSearchResult {
        verdict,
        candidates,
        truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearityConfig {
    /// Adjacency hops pooled into each local gradient fit.
    pub radius: usize,
    pub direction_threshold: f64,
    pub min_cells: usize,
    pub factorization: FactorizationConfig,
}

impl Default for LinearityConfig {
    fn default() -> Self {
        LinearityConfig {
            radius: 2,
            direction_threshold: 0.05,
            min_cells: 10,
            factorization: FactorizationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDirections {
    pub group: char,
    /// Orthonormal rows spanning the consensus gradient subspace.
    pub mean_direction: Vec<Vec<f64>>,
    /// Dispersion of the cells' gradient row spaces about the consensus
    /// subspace with the share explained by fit noise removed:
    /// `sqrt(max(0, raw² − noise²))`.
    pub direction_cov: f64,
    /// Root weighted mean squared sine of the principal angles between each
    /// cell's gradient rows and the consensus subspace.
    pub raw_dispersion: f64,
    /// What `raw_dispersion` would be from local fit noise alone.
    pub noise_dispersion: f64,
    pub cells_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityReport {
    /// Grouping of the source map the test ran on.
    pub grouping: IndexGrouping,
    pub groups: Vec<GroupDirections>,
    /// Largest dispersion over the groups.
    pub direction_cov: f64,
    pub threshold: f64,
    pub u_vectors: Option<Vec<Vec<f64>>>,
    pub linear: bool,
    pub hat_s_factorizes: Option<bool>,
    pub hat_s: Option<FactorizationReport>,
    pub skipped_cells: usize,
}

/// Orthonormal basis (rows) of the row space of `g`, `None` if rank deficient.
fn row_basis(g: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (vals, vecs) = sorted_eigen(&(g.transpose() * g));
    let r = g.nrows();
    if vals[r - 1] <= 1e-12 * vals[0] || vals[0] <= 0.0 {
        return None;
    }
    Some(DMatrix::from_fn(r, g.ncols(), |i, j| vecs[(j, i)]))
}

/// One cell's gradient rows for a group, with what is needed to predict how
/// far estimation noise alone tilts them.
struct CellDirection {
    basis: DMatrix<f64>,
    gradient: DMatrix<f64>,
    residual_cov: DMatrix<f64>,
    design_inv: DMatrix<f64>,
    weight: f64,
}

impl CellDirection {
    fn new(fit: &LocalFit, rows: std::ops::Range<usize>, weight: f64) -> Option<Self> {
        let (r0, d) = (rows.start, rows.len());
        let gradient = fit.gradient.rows(r0, d).into_owned();
        Some(CellDirection {
            basis: row_basis(&gradient)?,
            residual_cov: fit.residual_cov.view((r0, r0), (d, d)).into_owned(),
            design_inv: fit.design_inv.clone(),
            gradient,
            weight,
        })
    }

    fn sin2(&self, u: &DMatrix<f64>) -> f64 {
        let d = u.nrows() as f64;
        ((d - (&self.basis * u.transpose()).norm_squared()) / d).max(0.0)
    }

    /// Expected mean squared sine between the noisy and the noise-free row
    /// space, to first order: `Σ_kl [(GGᵀ)⁻¹]_kl Σ_kl tr(P⊥ V) / d`.
    fn noise_sin2(&self, u: &DMatrix<f64>) -> f64 {
        let Some(ggt_inv) = (&self.gradient * self.gradient.transpose()).try_inverse() else {
            return 0.0;
        };
        let n = u.ncols();
        let perp = DMatrix::<f64>::identity(n, n) - u.transpose() * u;
        let spread = (&perp * &self.design_inv).trace();
        // A gradient swamped by noise points anywhere, which caps the
        // expectation at that of an isotropic direction.
        let isotropic = (n - u.nrows()) as f64 / n as f64;
        (ggt_inv.component_mul(&self.residual_cov).sum() * spread / u.nrows() as f64).min(isotropic)
    }
}

fn group_directions(cells: &[CellDirection], d: usize, label: char) -> GroupDirections {
    let n = cells[0].basis.ncols();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for c in cells {
        s += c.basis.transpose() * &c.basis * c.weight;
    }
    let (_, vecs) = sorted_eigen(&s);
    let u = DMatrix::from_fn(d, n, |i, j| vecs[(j, i)]);
    let den: f64 = cells.iter().map(|c| c.weight).sum();
    let raw = cells.iter().map(|c| c.weight * c.sin2(&u)).sum::<f64>() / den;
    let noise = cells.iter().map(|c| c.weight * c.noise_sin2(&u)).sum::<f64>() / den;
    GroupDirections {
        group: label,
        mean_direction: u.row_iter().map(|r| r.iter().copied().collect()).collect(),
        direction_cov: (raw - noise).max(0.0).sqrt(),
        raw_dispersion: raw.sqrt(),
        noise_dispersion: noise.sqrt(),
        cells_used: cells.len(),
    }
}

pub fn linearity_test(
    map: &SourceMap,
    vs: &VelocitySeries,
    idx: &NeighborhoodIndex,
    cfg: &LinearityConfig,
) -> Result<LinearityReport> {
    let per_cell = per_cell_sigma(map, idx.len());
    let defined = per_cell.iter().filter(|v| v.is_some()).count();
    if defined < cfg.min_cells {
        return Err(Error::InsufficientCells {
            have: defined,
            need: cfg.min_cells,
        });
    }
    for k in 0..map.d_a + map.d_b {
        let vals: Vec<f64> = per_cell.iter().flatten().map(|v| v[k]).collect();
        let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &x| (a.0.min(x), a.1.max(x)));
        if !(hi > lo) {
            return Err(Error::InsufficientVariation(format!("source coordinate {k} is constant")));
        }
    }
    let fits = cell_fits(&per_cell, &idx.centroids(vs), idx, cfg.radius);
    let mut rows_a = Vec::new();
    let mut rows_b = Vec::new();
    let mut skipped = 0;
    for (c, fit) in fits.iter().enumerate() {
        if per_cell[c].is_none() {
            continue;
        }
        let w = idx.cells[c].members.len() as f64;
        let split = fit.as_ref().and_then(|f| {
            Some((
                CellDirection::new(f, 0..map.d_a, w)?,
                CellDirection::new(f, map.d_a..map.d_a + map.d_b, w)?,
            ))
        });
        match split {
            Some((a, b)) => {
                rows_a.push(a);
                rows_b.push(b);
            }
            None => skipped += 1,
        }
    }
    if rows_a.len() < cfg.min_cells {
        return Err(Error::InsufficientCells {
            have: rows_a.len(),
            need: cfg.min_cells,
        });
    }
    let groups = vec![
        group_directions(&rows_a, map.d_a, 'A'),
        group_directions(&rows_b, map.d_b, 'B'),
    ];
    let direction_cov = groups.iter().map(|g| g.direction_cov).fold(0.0, f64::max);
    let mut report = LinearityReport {
        grouping: map.grouping.clone(),
        groups,
        direction_cov,
        threshold: cfg.direction_threshold,
        u_vectors: None,
        linear: false,
        hat_s_factorizes: None,
        hat_s: None,
        skipped_cells: skipped,
    };
    if direction_cov > cfg.direction_threshold {
        return Ok(report);
    }
    let u: Vec<Vec<f64>> = report.groups.iter().flat_map(|g| g.mean_direction.clone()).collect();
    let project = |p: &[f64]| -> Vec<f64> { u.iter().map(|r| r.iter().zip(p).map(|(a, b)| a * b).sum()).collect() };
    let streams = SourceStreams {
        d_a: map.d_a,
        d_b: map.d_b,
        values: vs.positions().map(project).collect(),
        rates: vs.velocities().map(project).collect(),
    };
    let fact = factorize_streams(&streams, &cfg.factorization)?;
    report.linear = fact.factorizes;
    report.hat_s_factorizes = Some(fact.factorizes);
    report.hat_s = Some(fact);
    report.u_vectors = Some(u);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    fn streams(a: &[f64], b: &[f64], ra: &[f64], rb: &[f64]) -> SourceStreams {
        SourceStreams {
            d_a: 1,
            d_b: 1,
            values: a.iter().zip(b).map(|(x, y)| vec![*x, *y]).collect(),
            rates: ra.iter().zip(rb).map(|(x, y)| vec![*x, *y]).collect(),
        }
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2).len(), 9);
        assert_eq!(monomials(4).len(), 34);
        assert_eq!(monomial_name(&[2, 1], 1, 'A'), "sA1^2*vA1");
    }

    #[test]
    fn independent_white_factorizes() {
        let n = 100_000;
        let (a, b, c, d) = (white(n, 1), white(n, 2), white(n, 3), white(n, 4));
        let r = factorize_streams(&streams(&a, &b, &c, &d), &FactorizationConfig::default()).unwrap();
        assert!(r.statistic < 0.05 && r.factorizes, "{}", r.statistic);
        assert_eq!(r.breakdown.len(), 81);
    }

    #[test]
    fn identical_streams_fail() {
        let a = white(5000, 1);
        let c = white(5000, 3);
        let r = factorize_streams(&streams(&a, &a, &c, &c), &FactorizationConfig::default()).unwrap();
        assert!((r.statistic - 1.0).abs() < 1e-9 && !r.factorizes);
    }

    #[test]
    fn affine_rescaling_keeps_statistic() {
        let n = 20_000;
        let (a, b, c, d) = (white(n, 5), white(n, 6), white(n, 7), white(n, 8));
        let cfg = FactorizationConfig::default();
        let r1 = factorize_streams(&streams(&a, &b, &c, &d), &cfg).unwrap();
        let a2: Vec<f64> = a.iter().map(|x| 3.0 * x - 7.0).collect();
        let r2 = factorize_streams(&streams(&a2, &b, &c, &d), &cfg).unwrap();
        assert!((r1.statistic - r2.statistic).abs() < 1e-9);
    }

    #[test]
    fn null_shifts_raise_threshold_only() {
        let n = 2000;
        let (a, b, c, d) = (white(n, 9), white(n, 10), white(n, 11), white(n, 12));
        let cfg = FactorizationConfig {
            null_shifts: 19,
            ..Default::default()
        };
        let r = factorize_streams(&streams(&a, &b, &c, &d), &cfg).unwrap();
        assert_eq!(r.null_statistics.len(), 19);
        assert!(r.threshold >= 0.05);
    }

    #[test]
    fn constant_library_rejected() {
        let z = vec![1.0; 100];
        let r = factorize_streams(&streams(&z, &z, &z, &z), &FactorizationConfig::default());
        assert!(matches!(r, Err(Error::InsufficientVariation(_))));
    }

    #[test]
    fn groupings_enumerated_in_order() {
        let g2 = enumerate_groupings(2);
        assert_eq!(g2.len(), 1);
        assert_eq!(g2[0].group_a, vec![0]);
        let g3: Vec<Vec<usize>> = enumerate_groupings(3).into_iter().map(|g| g.group_a).collect();
        assert_eq!(g3, vec![vec![0], vec![1], vec![2]]);
        let g4 = enumerate_groupings(4);
        // 4 singletons plus 3 balanced splits
        assert_eq!(g4.len(), 7);
        assert!(g4[4..].iter().all(|g| g.group_a[0] == 0));
    }
}
