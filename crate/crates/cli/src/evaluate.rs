//! Scoring recovered coordinates against ground truth up to relabelling and
//! reflection.

use std::path::Path;

use anyhow::{bail, Context, Result};
use ibss::linalg::spearman;
use itertools::Itertools;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Pair {
    pub sigma: String,
    pub truth: String,
    /// Signed; the sign is the reflection that was quotiented out.
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub samples: usize,
    pub pairs: Vec<Pair>,
    /// Largest |ρ| between a recovered coordinate and a truth column it was not paired with.
    pub max_cross: f64,
    /// `matrix[i][j]` = Spearman of recovered `i` against truth `j`.
    pub matrix: Vec<Vec<f64>>,
}

/// Columns with their header names.
pub struct Table {
    pub names: Vec<String>,
    pub t: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let names: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_owned).collect();
    let mut t = Vec::new();
    let mut columns = vec![Vec::new(); names.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().with_context(|| format!("{} row {}: cannot parse `{s}`", path.display(), row + 1))
        };
        t.push(parse(&rec[0])?);
        for (c, col) in columns.iter_mut().enumerate() {
            col.push(parse(&rec[c + 1])?);
        }
    }
    Ok(Table { names, t, columns })
}

/// Pairs every recovered column with a truth column (requires equal counts)
/// so that the summed |ρ| is largest.
pub fn evaluate(sigma: &Table, truth: &Table) -> Result<Evaluation> {
    if sigma.columns.len() != truth.columns.len() {
        bail!(
            "{} recovered coordinates but {} ground-truth columns",
            sigma.columns.len(),
            truth.columns.len()
        );
    }
    if truth.t.len() < 2 {
        bail!("ground truth needs at least two rows");
    }
    let dt = truth.t[1] - truth.t[0];
    // Truth row for every recovered sample, by time.
    let rows: Vec<(usize, usize)> = sigma
        .t
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| {
            let j = ((t - truth.t[0]) / dt).round();
            (j >= 0.0 && (j as usize) < truth.t.len()).then_some((i, j as usize))
        })
        .collect();
    if rows.len() < 3 {
        bail!("recovered and ground-truth times barely overlap");
    }
    let n = sigma.columns.len();
    let matrix: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            let s: Vec<f64> = rows.iter().map(|&(i, _)| sigma.columns[a][i]).collect();
            (0..n)
                .map(|b| spearman(&s, &rows.iter().map(|&(_, j)| truth.columns[b][j]).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let best = (0..n)
        .permutations(n)
        .max_by(|p, q| {
            let score = |p: &Vec<usize>| p.iter().enumerate().map(|(a, &b)| matrix[a][b].abs()).sum::<f64>();
            score(p).total_cmp(&score(q)).then_with(|| q.cmp(p))
        })
        .expect("n >= 1");
    let max_cross = (0..n)
        .flat_map(|a| (0..n).map(move |b| (a, b)))
        .filter(|&(a, b)| best[a] != b)
        .map(|(a, b)| matrix[a][b].abs())
        .fold(0.0, f64::max);
    Ok(Evaluation {
        samples: rows.len(),
        pairs: best
            .iter()
            .enumerate()
            .map(|(a, &b)| Pair {
                sigma: sigma.names[a].clone(),
                truth: truth.names[b].clone(),
                spearman: matrix[a][b],
            })
            .collect(),
        max_cross,
        matrix,
    })
}
