//! End-to-end separation of one measured trajectory.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{align_frames, alignment_violations, construct_frames, AlignConfig, FrameField, FrameTolerances};
use crate::invariants::{invariant_field, IndexGrouping, InvariantField};
use crate::manifold::SourceMap;
use crate::moments::{local_moments, MomentField};
use crate::separability::{
    cell_fits, linearity_test, partition_search, Candidate, LinearityConfig, LinearityReport, PartitionConfig,
    PartitionSearchResult, Verdict,
};
use crate::trajectory::{
    build_neighborhoods, default_min_count, estimate_velocity, NeighborhoodIndex, Strategy, TimeSeries, VelocityScheme,
    VelocitySeries,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BssConfig {
    pub strategy: Strategy,
    /// Defaults to [`default_min_count`] for the input dimension.
    pub min_count: Option<usize>,
    pub max_order: usize,
    pub frames: FrameTolerances,
    pub align: AlignConfig,
    pub partition: PartitionConfig,
    pub linearity: LinearityConfig,
    pub run_linearity: bool,
    /// Re-run the search on each multi-dimensional group of a separable
    /// verdict. Off by default: the recovered coordinates are piecewise
    /// constant over cells and only a first-order reconstruction of them is
    /// available as a trajectory.
    pub recurse: bool,
}

impl Default for BssConfig {
    fn default() -> Self {
        BssConfig {
            strategy: Strategy::default(),
            min_count: None,
            max_order: 5,
            frames: FrameTolerances::default(),
            align: AlignConfig::default(),
            partition: PartitionConfig::default(),
            linearity: LinearityConfig::default(),
            run_linearity: true,
            recurse: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellStats {
    pub retained: usize,
    pub dropped: usize,
    pub singular: usize,
    pub degenerate: usize,
    pub usable: usize,
    pub alignment_violations: usize,
}

#[derive(Debug, Clone)]
pub struct BssOutput {
    pub velocities: VelocitySeries,
    pub index: NeighborhoodIndex,
    pub moments: MomentField,
    pub frames: FrameField,
    pub invariants: InvariantField,
    pub search: PartitionSearchResult,
    /// Run on the winner's source map, else on the first charted candidate.
    pub linearity: Option<std::result::Result<LinearityReport, String>>,
    pub cells: CellStats,
    pub recursion: Vec<RecursionOutcome>,
    /// Wall-clock seconds per stage; not part of the report.
    pub timings: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct RecursionOutcome {
    pub group: char,
    pub result: std::result::Result<Box<BssOutput>, String>,
}

impl BssOutput {
    pub fn winner(&self) -> Option<&Candidate> {
        self.search.winner()
    }

    pub fn source_map(&self) -> Option<&SourceMap> {
        self.winner().and_then(|c| c.source_map.as_ref())
    }

    pub fn report(&self, threshold: f64) -> BssReport {
        let winner = self.winner();
        let statistic = match winner {
            Some(w) => w.factorization.as_ref().map(|f| f.statistic),
            None => self
                .search
                .candidates
                .iter()
                .filter_map(|c| c.factorization.as_ref().map(|f| f.statistic))
                .reduce(f64::min),
        };
        let (linearity, linearity_error) = match &self.linearity {
            Some(Ok(r)) => (Some(r.clone()), None),
            Some(Err(e)) => (None, Some(e.clone())),
            None => (None, None),
        };
        BssReport {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            verdict: match self.search.verdict {
                Verdict::Separable { .. } => "separable".into(),
                Verdict::Inseparable => "inseparable".into(),
            },
            grouping: winner.map(|w| w.grouping.clone()),
            statistic,
            threshold: winner.and_then(|w| w.factorization.as_ref()).map_or(threshold, |f| f.threshold),
            direction_cov: linearity.as_ref().map(|l| l.direction_cov),
            linear: linearity.as_ref().map(|l| l.linear),
            candidates: self.search.candidates.clone(),
            truncated: self.search.truncated,
            linearity,
            linearity_error,
            cells: self.cells,
            recursion: self
                .recursion
                .iter()
                .map(|r| SubReport {
                    group: r.group,
                    report: r.result.as_ref().ok().map(|o| Box::new(o.report(threshold))),
                    error: r.result.as_ref().err().cloned(),
                })
                .collect(),
        }
    }
}

/// Deterministic summary of a run; timings are kept elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BssReport {
    pub tool_version: String,
    pub verdict: String,
    pub grouping: Option<IndexGrouping>,
    pub statistic: Option<f64>,
    pub threshold: f64,
    pub direction_cov: Option<f64>,
    pub linear: Option<bool>,
    pub candidates: Vec<Candidate>,
    pub truncated: bool,
    pub linearity: Option<LinearityReport>,
    pub linearity_error: Option<String>,
    pub cells: CellStats,
    pub recursion: Vec<SubReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubReport {
    pub group: char,
    pub report: Option<Box<BssReport>>,
    pub error: Option<String>,
}

/// Frames and invariants for a trajectory, without the search.
pub struct Invariants {
    pub velocities: VelocitySeries,
    pub index: NeighborhoodIndex,
    pub moments: MomentField,
    pub frames: FrameField,
    pub invariants: InvariantField,
    pub cells: CellStats,
}

pub fn compute_invariants(ts: &TimeSeries, cfg: &BssConfig, timings: &mut Vec<(String, f64)>) -> Result<Invariants> {
    let mut clock = Instant::now();
    let mut lap = |name: &str, timings: &mut Vec<(String, f64)>| {
        timings.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let velocities = estimate_velocity(ts, VelocityScheme::Central)?;
    let min_count = cfg.min_count.unwrap_or_else(|| default_min_count(ts.dim()));
    let index = build_neighborhoods(&velocities, cfg.strategy, min_count)?;
    lap("neighborhoods", timings);
    let moments = local_moments(&velocities, &index, cfg.max_order)?;
    lap("moments", timings);
    let raw = construct_frames(&moments, &cfg.frames);
    let frames = align_frames(&raw, &index, &cfg.align);
    lap("frames", timings);
    let invariants = invariant_field(&frames, &moments, cfg.max_order)?;
    lap("invariants", timings);
    let cells = CellStats {
        retained: index.len(),
        dropped: index.dropped_cells,
        singular: frames.singular_count(),
        degenerate: frames.degenerate_count(),
        usable: invariants.len(),
        alignment_violations: alignment_violations(&frames, &index),
    };
    Ok(Invariants {
        velocities,
        index,
        moments,
        frames,
        invariants,
        cells,
    })
}

pub fn run_bss(ts: &TimeSeries, cfg: &BssConfig) -> Result<BssOutput> {
    let mut timings = Vec::new();
    let inv = compute_invariants(ts, cfg, &mut timings)?;
    if inv.invariants.is_empty() {
        return Err(Error::InsufficientCells { have: 0, need: 1 });
    }
    let clock = Instant::now();
    let search = partition_search(&inv.invariants, &inv.index, &inv.velocities, &cfg.partition)?;
    timings.push(("partition_search".into(), clock.elapsed().as_secs_f64()));
    let winner_map = search.winner().and_then(|c| c.source_map.clone());
    // Without a winner the linear question is still worth answering on the
    // first grouping that was charted.
    let charted = winner_map
        .clone()
        .or_else(|| search.candidates.iter().find_map(|c| c.source_map.clone()));
    let linearity = match (&charted, cfg.run_linearity) {
        (Some(map), true) => {
            let clock = Instant::now();
            let r = linearity_test(map, &inv.velocities, &inv.index, &cfg.linearity).map_err(|e| e.to_string());
            timings.push(("linearity".into(), clock.elapsed().as_secs_f64()));
            Some(r)
        }
        _ => None,
    };
    let mut recursion = Vec::new();
    if let (Some(map), true) = (&winner_map, cfg.recurse) {
        for (label, range) in [('A', 0..map.d_a), ('B', map.d_a..map.d_a + map.d_b)] {
            if range.len() < 2 {
                continue;
            }
            let result = refined_sigma(map, &inv.velocities, &inv.index, cfg.partition.factorization_radius())
                .and_then(|full| full.select_channels(&range.collect::<Vec<_>>()))
                .and_then(|sub| run_bss(&sub, cfg))
                .map(Box::new)
                .map_err(|e| e.to_string());
            recursion.push(RecursionOutcome { group: label, result });
        }
    }
    Ok(BssOutput {
        velocities: inv.velocities,
        index: inv.index,
        moments: inv.moments,
        frames: inv.frames,
        invariants: inv.invariants,
        search,
        linearity,
        cells: inv.cells,
        recursion,
        timings,
    })
}

/// σ with a first-order correction inside each cell,
/// `σ_cell + ∇σ·(x − centre)`, as a regular trajectory. Every sample must
/// lie in a cell with a gradient.
pub fn refined_sigma(map: &SourceMap, vs: &VelocitySeries, idx: &NeighborhoodIndex, radius: usize) -> Result<TimeSeries> {
    let mut per_cell = vec![None; idx.len()];
    for (s, c) in map.sigma.iter().zip(&map.cell) {
        if let (Some(s), Some(c)) = (s, c) {
            per_cell[*c].get_or_insert_with(|| s.clone());
        }
    }
    let centres = idx.centroids(vs);
    let grads: Vec<_> = cell_fits(&per_cell, &centres, idx, radius).into_iter().map(|f| f.map(|f| f.gradient)).collect();
    let dim = map.d_a + map.d_b;
    let mut data = Vec::with_capacity(map.len() * dim);
    for i in 0..map.len() {
        let (s, g, c) = match (&map.sigma[i], map.cell[i]) {
            (Some(s), Some(c)) => match &grads[c] {
                Some(g) => (s, g, c),
                None => return Err(Error::TooFewDefined { defined: i, total: map.len() }),
            },
            _ => return Err(Error::TooFewDefined { defined: i, total: map.len() }),
        };
        let off = DMatrix::from_fn(vs.dim(), 1, |k, _| vs.position(i)[k] - centres[c][k]);
        let corr = g * off;
        data.extend(s.iter().zip(corr.iter()).map(|(a, b)| a + b));
    }
    TimeSeries::from_flat(map.dt, dim, data)
}
