//! Local-PCA patches stitched into one continuous chart.
//!
//! Patch centres come from farthest-point seeding refined by Lloyd
//! iterations; each centre owns its `k` nearest points. Patch coordinates are
//! chained into a common frame by affine maps fitted on shared members along a
//! maximum-overlap spanning tree, then refined against every overlapping
//! patch, and finally blended with Gaussian weights over the nearest centres.

use std::collections::BinaryHeap;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, sq_dist, Pca};
use crate::trajectory::k_smallest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StitchConfig {
    pub patches: usize,
    /// Members per patch as a multiple of `n / patches`.
    pub overlap: f64,
    pub lloyd_iters: usize,
    pub refine_sweeps: usize,
    /// Centres blended per point.
    pub blend: usize,
    /// Gaussian width relative to the median second-nearest-centre distance.
    pub blend_width: f64,
    pub max_seed_points: usize,
    pub seed: u64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            patches: 32,
            overlap: 3.0,
            lloyd_iters: 10,
            refine_sweeps: 5,
            blend: 3,
            blend_width: 1.0,
            max_seed_points: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub center: Vec<f64>,
    pub mean: Vec<f64>,
    /// Leading principal directions, one per row.
    pub basis: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Affine map from local to stitched coordinates: `g = A u + b`.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub placed: bool,
}

impl Patch {
    fn local(&self, p: &[f64]) -> Vec<f64> {
        self.basis
            .iter()
            .map(|row| row.iter().zip(p).zip(&self.mean).map(|((r, x), m)| r * (x - m)).sum())
            .collect()
    }

    fn global(&self, p: &[f64]) -> Vec<f64> {
        let u = self.local(p);
        self.a
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(&u).map(|(a, u)| a * u).sum::<f64>() + b)
            .collect()
    }

    pub fn residual_fraction(&self, dim: usize) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total > 0.0 {
            self.eigenvalues.iter().skip(dim).sum::<f64>() / total
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchedChart {
    pub dim: usize,
    pub patches: Vec<Patch>,
    pub bandwidth: f64,
    pub blend: usize,
    /// Mean over patches of the variance fraction beyond `dim`.
    pub residual: f64,
    /// Per-patch residual fraction at each dimension `0..=D`.
    pub residual_profile: Vec<f64>,
}

impl StitchedChart {
    /// Blended chart coordinates of an arbitrary point.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let placed: Vec<&Patch> = self.patches.iter().filter(|q| q.placed).collect();
        let d: Vec<f64> = placed.iter().map(|q| sq_dist(p, &q.center)).collect();
        let near = k_smallest(&d, self.blend);
        let ws: Vec<f64> = near.iter().map(|&j| (-d[j] / (self.bandwidth * self.bandwidth)).exp()).collect();
        let wsum: f64 = ws.iter().sum();
        let mut out = vec![0.0; self.dim];
        for (&j, w) in near.iter().zip(&ws) {
            let w = if wsum > 0.0 { w / wsum } else { 1.0 / near.len() as f64 };
            for (o, g) in out.iter_mut().zip(placed[j].global(p)) {
                *o += w * g;
            }
        }
        out
    }
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> Vec<usize> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let d: Vec<f64> = centers.iter().map(|c| sq_dist(p, c)).collect();
    k_smallest(&d, 1)[0]
}

/// Fits a stitched chart and returns it with the chart coordinates of every input point.
pub fn stitch(points: &[Vec<f64>], dim: usize, cfg: &StitchConfig) -> Result<(StitchedChart, Vec<Vec<f64>>)> {
    let n = points.len();
    let big_d = points.first().map_or(0, Vec::len);
    if dim == 0 || dim > big_d {
        return Err(Error::InvalidParameter(format!("chart dimension {dim} for {big_d}-D data")));
    }
    let n_patch = cfg.patches.clamp(1, n.max(1));
    let k = (((cfg.overlap * n as f64) / n_patch as f64).ceil() as usize).clamp(dim + 2, n);
    if n < dim + 2 {
        return Err(Error::InvalidParameter(format!("{n} points are too few for a {dim}-D chart")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seed_idx: Vec<usize> = if n > cfg.max_seed_points {
        let mut v = sample(&mut rng, n, cfg.max_seed_points).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let sub: Vec<&[f64]> = seed_idx.iter().map(|&i| points[i].as_slice()).collect();

    let mut centers = vec![sub[0].to_vec()];
    let mut dmin: Vec<f64> = sub.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < n_patch {
        let far = (0..sub.len()).fold(0, |b, i| if dmin[i] > dmin[b] { i } else { b });
        centers.push(sub[far].to_vec());
        let c = centers.last().unwrap().clone();
        dmin.par_iter_mut().zip(&sub).for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
    }
    for _ in 0..cfg.lloyd_iters {
        let labels: Vec<usize> = sub.par_iter().map(|p| nearest(p, &centers)).collect();
        let mut sums = vec![vec![0.0; big_d]; n_patch];
        let mut counts = vec![0usize; n_patch];
        for (p, &l) in sub.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        for j in 0..n_patch {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }

    let members: Vec<Vec<usize>> = centers
        .par_iter()
        .map(|c| {
            let d: Vec<f64> = points.iter().map(|p| sq_dist(p, c)).collect();
            let mut m = k_smallest(&d, k);
            m.sort_unstable();
            m
        })
        .collect();
    let mut patches: Vec<Patch> = members
        .par_iter()
        .zip(&centers)
        .map(|(m, c)| {
            let pca = Pca::fit(m.iter().map(|&i| points[i].as_slice()), big_d);
            Patch {
                center: c.clone(),
                basis: (0..dim).map(|r| pca.vectors.column(r).iter().copied().collect()).collect(),
                mean: pca.mean,
                eigenvalues: pca.values,
                a: (0..dim).map(|r| (0..dim).map(|c| f64::from(u8::from(r == c))).collect()).collect(),
                b: vec![0.0; dim],
                placed: false,
            }
        })
        .collect();

    let mut overlaps: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); n_patch];
    for a in 0..n_patch {
        for b in a + 1..n_patch {
            let shared = sorted_intersection(&members[a], &members[b]);
            if shared.len() >= dim + 2 {
                overlaps[a].push((b, shared.clone()));
                overlaps[b].push((a, shared));
            }
        }
    }

    let fit_map = |c: usize, refs: &[(usize, &[usize])], patches: &[Patch]| -> (Vec<Vec<f64>>, Vec<f64>) {
        let rows: usize = refs.iter().map(|(_, s)| s.len()).sum();
        let mut x = DMatrix::zeros(rows, dim + 1);
        let mut y = DMatrix::zeros(rows, dim);
        let mut r = 0;
        for &(p, shared) in refs {
            for &i in shared {
                let u = patches[c].local(&points[i]);
                let g = patches[p].global(&points[i]);
                for j in 0..dim {
                    x[(r, j)] = u[j];
                    y[(r, j)] = g[j];
                }
                x[(r, dim)] = 1.0;
                r += 1;
            }
        }
        let sol = lstsq(&x, &y);
        let a = (0..dim).map(|o| (0..dim).map(|i| sol[(i, o)]).collect()).collect();
        let b = (0..dim).map(|o| sol[(dim, o)]).collect();
        (a, b)
    };

    // Prim over overlap sizes from patch 0.
    patches[0].placed = true;
    let mut heap: BinaryHeap<(usize, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>)> = BinaryHeap::new();
    for (j, s) in &overlaps[0] {
        heap.push((s.len(), std::cmp::Reverse(*j), std::cmp::Reverse(0)));
    }
    while let Some((_, std::cmp::Reverse(c), std::cmp::Reverse(p))) = heap.pop() {
        if patches[c].placed {
            continue;
        }
        let shared = &overlaps[c].iter().find(|(j, _)| *j == p).unwrap().1;
        let (a, b) = fit_map(c, &[(p, shared)], &patches);
        patches[c].a = a;
        patches[c].b = b;
        patches[c].placed = true;
        for (j, s) in &overlaps[c] {
            if !patches[*j].placed {
                heap.push((s.len(), std::cmp::Reverse(*j), std::cmp::Reverse(c)));
            }
        }
    }
    for _ in 0..cfg.refine_sweeps {
        for c in 1..n_patch {
            if !patches[c].placed {
                continue;
            }
            let refs: Vec<(usize, &[usize])> = overlaps[c]
                .iter()
                .filter(|(j, _)| patches[*j].placed)
                .map(|(j, s)| (*j, s.as_slice()))
                .collect();
            if refs.is_empty() {
                continue;
            }
            let (a, b) = fit_map(c, &refs, &patches);
            patches[c].a = a;
            patches[c].b = b;
        }
    }

    let placed_centers: Vec<&[f64]> = patches.iter().filter(|p| p.placed).map(|p| p.center.as_slice()).collect();
    let blend = cfg.blend.clamp(1, placed_centers.len());
    let mut second: Vec<f64> = points
        .par_iter()
        .map(|p| {
            let d: Vec<f64> = placed_centers.iter().map(|c| sq_dist(p, c)).collect();
            let near = k_smallest(&d, 2);
            d[*near.last().unwrap()].sqrt()
        })
        .collect();
    second.sort_by(f64::total_cmp);
    let bandwidth = (cfg.blend_width * second[second.len() / 2]).max(1e-12);
    let residual_profile: Vec<f64> = (0..=big_d)
        .map(|d| patches.iter().map(|p| p.residual_fraction(d)).sum::<f64>() / n_patch as f64)
        .collect();
    let chart = StitchedChart {
        dim,
        residual: residual_profile[dim],
        residual_profile,
        patches,
        bandwidth,
        blend,
    };
    let coords = points.par_iter().map(|p| chart.apply(p)).collect();
    Ok((chart, coords))
}
