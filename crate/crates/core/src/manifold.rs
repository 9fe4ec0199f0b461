//! Dimension tests and charts for multiplet point clouds, and the per-sample
//! source coordinates they induce.

use std::io::Write;

use petgraph::algo::{astar, dijkstra, min_spanning_tree};
use petgraph::data::Element;
use petgraph::graph::{NodeIndex, UnGraph};
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invariants::{IndexGrouping, InvariantField};
use crate::linalg::{dist, sq_dist, Pca};
use crate::stitch::{stitch, StitchConfig, StitchedChart};
use crate::trajectory::{k_smallest, NeighborhoodIndex, VelocitySeries};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(Error::InvalidParameter("points and weights differ in length".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput);
        }
        Ok(PointCloud { points, weights })
    }

    pub fn unweighted(points: Vec<Vec<f64>>) -> Result<Self> {
        let w = vec![1.0; points.len()];
        Self::new(points, w)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldTest {
    pub target_dim: usize,
    pub residual_fraction: f64,
    pub threshold: f64,
    pub passes: bool,
    pub skipped: usize,
}

/// Indices of the `k` nearest cloud points to each point (itself included).
fn all_knn(points: &[Vec<f64>], k: usize) -> Vec<Vec<usize>> {
    points
        .par_iter()
        .map(|p| {
            let d: Vec<f64> = points.iter().map(|q| sq_dist(p, q)).collect();
            k_smallest(&d, k)
        })
        .collect()
}

pub fn estimate_dimension(cloud: &PointCloud, k: usize, target_dim: usize, threshold: f64) -> Result<ManifoldTest> {
    if k < 2 * target_dim + 2 || cloud.len() <= k {
        return Err(Error::InvalidParameter(format!(
            "need cloud size > k >= 2*dim + 2 (size {}, k {k}, dim {target_dim})",
            cloud.len()
        )));
    }
    let dim = cloud.dim();
    let knn = all_knn(&cloud.points, k);
    let fractions: Vec<Option<f64>> = knn
        .par_iter()
        .map(|nb| Pca::fit(nb.iter().map(|&i| cloud.points[i].as_slice()), dim).residual_fraction(target_dim))
        .collect();
    let skipped = fractions.iter().filter(|f| f.is_none()).count();
    if 2 * skipped > cloud.len() {
        return Err(Error::DegenerateNeighborhoods {
            skipped,
            total: cloud.len(),
        });
    }
    let (num, den) = fractions
        .iter()
        .zip(&cloud.weights)
        .filter_map(|(f, w)| f.map(|f| (f * w, *w)))
        .fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let residual_fraction = if den > 0.0 { num / den } else { 0.0 };
    Ok(ManifoldTest {
        target_dim,
        residual_fraction,
        threshold,
        passes: residual_fraction <= threshold,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudScaling {
    /// Affine whitening by the cloud covariance.
    Whiten,
    /// Each coordinate divided by its standard deviation.
    #[default]
    PerAxis,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChartConfig {
    /// Neighbours for the mutual-kNN graph.
    pub k: usize,
    /// Points averaged when smoothing the curve parameter.
    pub smooth: usize,
    /// Spanning-tree edges longer than this multiple of the median kNN edge are cut.
    pub cut_factor: f64,
    pub scaling: CloudScaling,
    /// Patches per point for charts of dimension > 1.
    pub points_per_patch: usize,
}

impl Default for ChartConfig {
    fn default() -> Self {
        ChartConfig {
            k: 6,
            smooth: 3,
            cut_factor: 10.0,
            scaling: CloudScaling::PerAxis,
            points_per_patch: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Normalizer {
    mean: Vec<f64>,
    /// Rows map centred points to chart space.
    map: Vec<Vec<f64>>,
}

impl Normalizer {
    fn fit(cloud: &PointCloud, scaling: CloudScaling) -> Normalizer {
        let d = cloud.dim();
        let pca = Pca::fit(cloud.points.iter().map(Vec::as_slice), d);
        let ident = |i: usize, s: f64| (0..d).map(|j| if i == j { s } else { 0.0 }).collect::<Vec<_>>();
        let map = match scaling {
            CloudScaling::Raw => (0..d).map(|i| ident(i, 1.0)).collect(),
            CloudScaling::PerAxis => (0..d)
                .map(|i| {
                    let var = cloud.points.iter().map(|p| (p[i] - pca.mean[i]).powi(2)).sum::<f64>()
                        / cloud.len() as f64;
                    ident(i, if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 })
                })
                .collect(),
            CloudScaling::Whiten => {
                let top = pca.values.first().copied().unwrap_or(0.0);
                (0..d)
                    .filter(|&c| pca.values[c] > 1e-12 * top)
                    .map(|c| (0..d).map(|i| pca.vectors[(i, c)] / pca.values[c].sqrt()).collect())
                    .collect()
            }
        };
        Normalizer { mean: pca.mean, map }
    }

    fn apply(&self, p: &[f64]) -> Vec<f64> {
        self.map
            .iter()
            .map(|row| row.iter().zip(p).zip(&self.mean).map(|((r, x), m)| r * (x - m)).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ChartKind {
    Curve,
    Stitched(StitchedChart),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chart {
    pub dim: usize,
    pub kind: ChartKind,
    normalizer: Normalizer,
    /// Cloud points in normalised coordinates.
    pub nodes: Vec<Vec<f64>>,
    /// Chart coordinates of each cloud point, each axis scaled to [0, 1].
    pub params: Vec<Vec<f64>>,
    /// Set when distant cloud points share a parameter value (a fold or a
    /// closed loop cut at the farthest pair).
    pub injectivity_flag: bool,
    /// Share of points whose chart-space nearest neighbour is far away in the cloud.
    pub fold_fraction: f64,
    /// Share of points far from the geodesic path (curves only).
    pub off_path_fraction: f64,
    pub largest_component: usize,
}

impl Chart {
    /// Parameter of the nearest cloud point.
    pub fn evaluate(&self, multiplet: &[f64]) -> Vec<f64> {
        let z = self.normalizer.apply(multiplet);
        let d: Vec<f64> = self.nodes.iter().map(|n| sq_dist(n, &z)).collect();
        self.params[k_smallest(&d, 1)[0]].clone()
    }
}

fn scale_unit(v: &mut [f64]) {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &x| (a.0.min(x), a.1.max(x)));
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

pub fn fit_chart(cloud: &PointCloud, dim: usize, cfg: &ChartConfig) -> Result<Chart> {
    if dim == 0 {
        return Err(Error::InvalidParameter("chart dimension must be positive".into()));
    }
    if cloud.len() < cfg.k.max(dim + 2) + 1 {
        return Err(Error::InvalidParameter(format!("cloud of {} points is too small to chart", cloud.len())));
    }
    let normalizer = Normalizer::fit(cloud, cfg.scaling);
    let nodes: Vec<Vec<f64>> = cloud.points.iter().map(|p| normalizer.apply(p)).collect();
    if dim == 1 {
        curve_chart(nodes, normalizer, cfg)
    } else {
        let stitch_cfg = StitchConfig {
            patches: (nodes.len() / cfg.points_per_patch.max(1)).max(1),
            max_seed_points: usize::MAX,
            ..StitchConfig::default()
        };
        let (chart, coords) = stitch(&nodes, dim, &stitch_cfg)?;
        let mut params = coords;
        for axis in 0..dim {
            let mut col: Vec<f64> = params.iter().map(|p| p[axis]).collect();
            scale_unit(&mut col);
            for (p, v) in params.iter_mut().zip(col) {
                p[axis] = v;
            }
        }
        let folds = fold_fraction(&nodes, &params);
        Ok(Chart {
            dim,
            kind: ChartKind::Stitched(chart),
            normalizer,
            largest_component: nodes.len(),
            nodes,
            params,
            injectivity_flag: folds > 0.05,
            fold_fraction: folds,
            off_path_fraction: 0.0,
        })
    }
}

fn curve_chart(nodes: Vec<Vec<f64>>, normalizer: Normalizer, cfg: &ChartConfig) -> Result<Chart> {
    let n = nodes.len();
    let knn = all_knn(&nodes, cfg.k + 1);
    let is_nb = |i: usize, j: usize| knn[i][1..].contains(&j);
    let mut graph: UnGraph<(), f64> = UnGraph::with_capacity(n, n * cfg.k);
    let ids: Vec<NodeIndex> = (0..n).map(|_| graph.add_node(())).collect();
    let mut knn_edges = Vec::new();
    for i in 0..n {
        for &j in &knn[i][1..] {
            if i < j && is_nb(j, i) {
                knn_edges.push((i, j, dist(&nodes[i], &nodes[j])));
            }
        }
    }
    let mut lens: Vec<f64> = knn_edges.iter().map(|e| e.2).collect();
    lens.sort_by(f64::total_cmp);
    let median_edge = lens.get(lens.len() / 2).copied().unwrap_or(f64::INFINITY);

    // Minimum spanning tree of the complete graph.
    let mut complete: UnGraph<(), f64> = UnGraph::with_capacity(n, n * (n - 1) / 2);
    for _ in 0..n {
        complete.add_node(());
    }
    for i in 0..n {
        for j in i + 1..n {
            complete.add_edge(NodeIndex::new(i), NodeIndex::new(j), dist(&nodes[i], &nodes[j]));
        }
    }
    let mut edges = knn_edges.clone();
    for el in min_spanning_tree(&complete) {
        if let Element::Edge { source, target, weight } = el {
            if weight <= cfg.cut_factor * median_edge {
                edges.push((source.min(target), source.max(target), weight));
            }
        }
    }
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    edges.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
    let mut uf = UnionFind::new(n);
    for &(a, b, w) in &edges {
        graph.add_edge(ids[a], ids[b], w);
        uf.union(a, b);
    }
    let labels = uf.into_labeling();
    let mut sizes = std::collections::BTreeMap::new();
    for &l in &labels {
        *sizes.entry(l).or_insert(0usize) += 1;
    }
    let (&big_label, &largest) = sizes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).unwrap();
    if (largest as f64) < 0.8 * n as f64 {
        return Err(Error::Disconnected { largest, total: n });
    }
    let first = (0..n).find(|&i| labels[i] == big_label).unwrap();
    let farthest = |src: usize| -> usize {
        let d = dijkstra(&graph, ids[src], None, |e| *e.weight());
        let mut best = (src, 0.0);
        for (node, &dd) in &d {
            if dd > best.1 || (dd == best.1 && node.index() < best.0) {
                best = (node.index(), dd);
            }
        }
        best.0
    };
    let a = farthest(first);
    let b = farthest(a);
    let (_, path) = astar(&graph, ids[a], |x| x == ids[b], |e| *e.weight(), |_| 0.0)
        .expect("b is reachable from a");
    let poly: Vec<Vec<f64>> = path.iter().map(|x| nodes[x.index()].clone()).collect();
    let proj: Vec<(f64, f64)> = project_all(&nodes, &poly);
    let total_len = arc_lengths(&poly).last().copied().unwrap_or(0.0);
    // A closed loop leaves part of the cloud far from the geodesic path.
    let off_path = proj.iter().filter(|p| p.1 > 0.1 * total_len).count() as f64 / n as f64;
    let raw: Vec<f64> = proj.iter().map(|p| p.0).collect();
    let mut sigma: Vec<f64> = if cfg.smooth > 1 {
        let nb = all_knn(&nodes, cfg.smooth);
        nb.iter().map(|ii| ii.iter().map(|&i| raw[i]).sum::<f64>() / ii.len() as f64).collect()
    } else {
        raw
    };
    scale_unit(&mut sigma);
    let params: Vec<Vec<f64>> = sigma.into_iter().map(|s| vec![s]).collect();
    let folds = fold_fraction(&nodes, &params);
    Ok(Chart {
        dim: 1,
        kind: ChartKind::Curve,
        normalizer,
        largest_component: largest,
        nodes,
        params,
        injectivity_flag: off_path > 0.05 || folds > 0.05,
        fold_fraction: folds,
        off_path_fraction: off_path,
    })
}

fn arc_lengths(poly: &[Vec<f64>]) -> Vec<f64> {
    let mut arc = vec![0.0];
    for w in poly.windows(2) {
        arc.push(arc.last().unwrap() + dist(&w[0], &w[1]));
    }
    arc
}

/// (arc-length parameter, distance) of each point's projection onto a polyline.
fn project_all(points: &[Vec<f64>], poly: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let arc = arc_lengths(poly);
    let project = |p: &[f64]| -> (f64, f64) {
        if poly.len() == 1 {
            return (0.0, dist(p, &poly[0]));
        }
        let mut best = (f64::INFINITY, 0.0);
        for (s, w) in poly.windows(2).enumerate() {
            let seg: Vec<f64> = w[1].iter().zip(&w[0]).map(|(x, y)| x - y).collect();
            let l2: f64 = seg.iter().map(|x| x * x).sum();
            let u = if l2 > 0.0 {
                (p.iter().zip(&w[0]).zip(&seg).map(|((x, o), s)| (x - o) * s).sum::<f64>() / l2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d2: f64 = p.iter().zip(&w[0]).zip(&seg).map(|((x, o), s)| (o + u * s - x).powi(2)).sum();
            if d2 < best.0 {
                best = (d2, arc[s] + u * l2.sqrt());
            }
        }
        (best.1, best.0.sqrt())
    };
    points.par_iter().map(|p| project(p)).collect()
}

/// Fraction of points whose parameter-space nearest neighbour is far away in
/// the cloud: beyond four median nearest-neighbour spacings and beyond a
/// tenth of the cloud's extent, so that noisy thickness is not a fold.
fn fold_fraction(nodes: &[Vec<f64>], params: &[Vec<f64>]) -> f64 {
    let n = nodes.len();
    if n < 3 {
        return 0.0;
    }
    let mut spacing: Vec<f64> = all_knn(nodes, 2).iter().map(|nb| dist(&nodes[nb[0]], &nodes[nb[1]])).collect();
    spacing.sort_by(f64::total_cmp);
    let centre = crate::linalg::mean_of(nodes.iter().map(Vec::as_slice), nodes[0].len());
    let rms = (nodes.iter().map(|p| sq_dist(p, &centre)).sum::<f64>() / n as f64).sqrt();
    let scale = (4.0 * spacing[n / 2]).max(0.2 * rms);
    let flagged = all_knn(params, 2)
        .iter()
        .filter(|nb| dist(&nodes[nb[0]], &nodes[nb[1]]) > scale)
        .count();
    flagged as f64 / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceMap {
    pub dt: f64,
    pub d_a: usize,
    pub d_b: usize,
    /// Per velocity sample: `d_a + d_b` values, `None` where undefined.
    pub sigma: Vec<Option<Vec<f64>>>,
    /// Neighbourhood cell each sample was evaluated in.
    pub cell: Vec<Option<usize>>,
    pub grouping: IndexGrouping,
}

impl SourceMap {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn defined_count(&self) -> usize {
        self.sigma.iter().filter(|s| s.is_some()).count()
    }

    /// One source coordinate over all samples (NaN where undefined).
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.sigma.iter().map(|s| s.as_ref().map_or(f64::NAN, |v| v[k])).collect()
    }

    /// Swaps the roles of the two groups.
    pub fn swapped(&self) -> SourceMap {
        SourceMap {
            dt: self.dt,
            d_a: self.d_b,
            d_b: self.d_a,
            sigma: self
                .sigma
                .iter()
                .map(|s| s.as_ref().map(|v| v[self.d_a..].iter().chain(&v[..self.d_a]).copied().collect()))
                .collect(),
            cell: self.cell.clone(),
            grouping: self.grouping.swapped(),
        }
    }

    /// Writes `t, sigma_A..., sigma_B...` for defined samples; `t` is the time
    /// of the underlying trajectory sample.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let name = |g: char, d: usize, k: usize| if d == 1 { format!("sigma_{g}") } else { format!("sigma_{g}{}", k + 1) };
        let mut header = vec!["t".to_string()];
        header.extend((0..self.d_a).map(|k| name('A', self.d_a, k)));
        header.extend((0..self.d_b).map(|k| name('B', self.d_b, k)));
        out.write_record(&header)?;
        for (i, s) in self.sigma.iter().enumerate() {
            if let Some(v) = s {
                let mut rec = vec![((i + 1) as f64 * self.dt).to_string()];
                rec.extend(v.iter().map(f64::to_string));
                out.write_record(&rec)?;
            }
        }
        out.flush().map_err(|e| Error::io("<csv>", e))
    }
}

/// Each sample takes the chart parameters of its cell's multiplets.
pub fn evaluate_sigma(
    charts: (&Chart, &Chart),
    inv: &InvariantField,
    idx: &NeighborhoodIndex,
    samples: &VelocitySeries,
) -> Result<SourceMap> {
    let grouping = inv
        .grouping
        .clone()
        .ok_or_else(|| Error::InvalidParameter("invariant field has no multiplets".into()))?;
    let rows = inv.row_of();
    let per_cell: Vec<Option<Vec<f64>>> = (0..idx.len())
        .map(|c| {
            rows.get(&c).map(|&r| {
                let mut v = charts.0.evaluate(&inv.multiplet_a[r]);
                v.extend(charts.1.evaluate(&inv.multiplet_b[r]));
                v
            })
        })
        .collect();
    let cell: Vec<Option<usize>> = (0..samples.len())
        .map(|i| idx.home_cell.get(i).copied().flatten().filter(|&c| per_cell[c].is_some()))
        .collect();
    let sigma = cell.iter().map(|c| c.and_then(|c| per_cell[c].clone())).collect();
    Ok(SourceMap {
        dt: samples.dt(),
        d_a: charts.0.dim,
        d_b: charts.1.dim,
        sigma,
        cell,
        grouping,
    })
}

/// Cloud of multiplet values with member-count weights.
pub fn multiplet_cloud(inv: &InvariantField, idx: &NeighborhoodIndex, group_a: bool) -> Result<PointCloud> {
    let pts = if group_a { &inv.multiplet_a } else { &inv.multiplet_b };
    let w = inv.cell_ids.iter().map(|&c| idx.cells[c].members.len() as f64).collect();
    PointCloud::new(pts.clone(), w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spearman;

    fn circle(n: usize, arc: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let t = arc * i as f64 / n as f64;
                vec![t.cos(), t.sin(), 0.3 * t.cos() + 0.1]
            })
            .collect()
    }

    #[test]
    fn circle_is_one_dimensional() {
        let c = PointCloud::unweighted(circle(500, std::f64::consts::TAU)).unwrap();
        let t = estimate_dimension(&c, 12, 1, 0.10).unwrap();
        assert!(t.residual_fraction <= 0.02 && t.passes, "{t:?}");
    }

    #[test]
    fn precondition_checked() {
        let c = PointCloud::unweighted(circle(10, 1.0)).unwrap();
        assert!(estimate_dimension(&c, 12, 1, 0.1).is_err());
        assert!(estimate_dimension(&c, 3, 1, 0.1).is_err());
    }

    #[test]
    fn line_segment_chart_is_arclength() {
        let pts: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64 * 0.1, -0.05 * i as f64]).collect();
        let c = PointCloud::unweighted(pts).unwrap();
        let cfg = ChartConfig {
            smooth: 1,
            ..Default::default()
        };
        let ch = fit_chart(&c, 1, &cfg).unwrap();
        let truth: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let s: Vec<f64> = ch.params.iter().map(|p| p[0]).collect();
        assert!((crate::linalg::pearson(&s, &truth).abs() - 1.0).abs() < 1e-12);
        assert!(!ch.injectivity_flag);
    }

    #[test]
    fn open_arc_monotone() {
        let pts = circle(300, 4.0);
        let ch = fit_chart(&PointCloud::unweighted(pts).unwrap(), 1, &ChartConfig::default()).unwrap();
        let s: Vec<f64> = ch.params.iter().map(|p| p[0]).collect();
        let t: Vec<f64> = (0..300).map(|i| i as f64).collect();
        assert!(spearman(&s, &t).abs() > 0.999);
    }

    #[test]
    fn closed_loop_flagged() {
        let pts = circle(300, std::f64::consts::TAU);
        let ch = fit_chart(&PointCloud::unweighted(pts).unwrap(), 1, &ChartConfig::default()).unwrap();
        assert!(ch.injectivity_flag);
    }

    #[test]
    fn disconnected_clusters_rejected() {
        let mut pts: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 * 0.01, 0.0]).collect();
        pts.extend((0..40).map(|i| vec![100.0 + i as f64 * 0.01, 0.0]));
        let cfg = ChartConfig {
            scaling: CloudScaling::Raw,
            ..Default::default()
        };
        let r = fit_chart(&PointCloud::unweighted(pts).unwrap(), 1, &cfg);
        assert!(matches!(r, Err(Error::Disconnected { largest: 40, total: 80 })), "{r:?}");
    }
}
