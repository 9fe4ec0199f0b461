//! Frame-transformed velocity moments and the grouped multiplets built from them.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::{signed_permutations, FrameField, MFrame, SignedPermutation};
use crate::moments::{MomentField, MomentTensors};
use crate::tensor::{canonical_indices, SymTensor};
use crate::trajectory::NeighborhoodIndex;

/// Bipartition of channel indices (zero-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexGrouping {
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
}

impl IndexGrouping {
    pub fn new(group_a: Vec<usize>, n: usize) -> Result<Self> {
        let mut a = group_a;
        a.sort_unstable();
        a.dedup();
        if a.is_empty() || a.len() >= n || a.iter().any(|&k| k >= n) {
            return Err(Error::InvalidParameter(format!("invalid group {a:?} for N = {n}")));
        }
        let group_b = (0..n).filter(|k| !a.contains(k)).collect();
        Ok(IndexGrouping { group_a: a, group_b })
    }

    pub fn d_a(&self) -> usize {
        self.group_a.len()
    }

    pub fn d_b(&self) -> usize {
        self.group_b.len()
    }

    pub fn swapped(&self) -> Self {
        IndexGrouping {
            group_a: self.group_b.clone(),
            group_b: self.group_a.clone(),
        }
    }
}

/// Invariant tensors of orders `3..=max_order` for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantMap {
    pub tensors: Vec<SymTensor>,
}

impl InvariantMap {
    pub fn max_order(&self) -> usize {
        self.tensors.len() + 2
    }

    pub fn order(&self, k: usize) -> Option<&SymTensor> {
        k.checked_sub(3).and_then(|i| self.tensors.get(i))
    }

    pub fn get(&self, idx: &[usize]) -> Option<f64> {
        self.order(idx.len()).map(|t| t.get(idx))
    }

    /// Relabels indices by a signed permutation acting as a frame change `Q M`.
    pub fn relabel(&self, q: &SignedPermutation) -> InvariantMap {
        let qm = q.matrix();
        InvariantMap {
            tensors: self.tensors.iter().map(|t| t.transform(&qm)).collect(),
        }
    }
}

const DELTA_TOL: f64 = 1e-8;

pub fn transform_correlations(frame: &MFrame, mt: &MomentTensors, max_order: usize) -> Result<InvariantMap> {
    if let Some(missing) = (2..=max_order).find(|&k| mt.order(k).is_none()) {
        return Err(Error::MissingOrder(missing));
    }
    let i2 = mt.c2().transform(&frame.m);
    for (idx, v) in i2.iter() {
        let delta = if idx[0] == idx[1] { 1.0 } else { 0.0 };
        assert!(
            (v - delta).abs() <= DELTA_TOL,
            "second-order invariant {idx:?} = {v}, frame does not whiten"
        );
    }
    let tensors = (3..=max_order)
        .map(|k| mt.order(k).unwrap().transform(&frame.m))
        .collect();
    Ok(InvariantMap { tensors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantField {
    /// Cell indices (into the neighbourhood index) having invariants.
    pub cell_ids: Vec<usize>,
    pub maps: Vec<InvariantMap>,
    pub grouping: Option<IndexGrouping>,
    pub multiplet_a: Vec<Vec<f64>>,
    pub multiplet_b: Vec<Vec<f64>>,
}

impl InvariantField {
    pub fn len(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_ids.is_empty()
    }

    pub fn row_of(&self) -> HashMap<usize, usize> {
        self.cell_ids.iter().enumerate().map(|(r, &c)| (c, r)).collect()
    }
}

/// Invariants for every cell whose frame is usable (non-singular, non-degenerate).
pub fn invariant_field(frames: &FrameField, moments: &MomentField, max_order: usize) -> Result<InvariantField> {
    let usable: Vec<usize> = (0..frames.frames.len()).filter(|&c| frames.usable(c).is_some()).collect();
    let maps = usable
        .par_iter()
        .map(|&c| transform_correlations(frames.usable(c).unwrap(), &moments.cells[c], max_order))
        .collect::<Result<Vec<_>>>()?;
    Ok(InvariantField {
        cell_ids: usable,
        maps,
        grouping: None,
        multiplet_a: Vec::new(),
        multiplet_b: Vec::new(),
    })
}

/// Index strings lying entirely in `group`, ordered by length then lexicographically.
pub fn multiplet_strings(group: &[usize], max_order: usize) -> Vec<Vec<usize>> {
    (3..=max_order)
        .flat_map(|k| {
            canonical_indices(group.len(), k)
                .into_iter()
                .map(|local| local.into_iter().map(|i| group[i]).collect::<Vec<_>>())
        })
        .collect()
}

fn check_count(group: &[usize], max_order: usize, label: char) -> Result<Vec<Vec<usize>>> {
    let strings = multiplet_strings(group, max_order);
    let needed = 2 * group.len();
    if strings.len() <= needed {
        return Err(Error::TooFewInvariants {
            group: label,
            available: strings.len(),
            needed,
        });
    }
    Ok(strings)
}

pub fn build_multiplets(field: &InvariantField, grouping: &IndexGrouping) -> Result<InvariantField> {
    let max_order = field.maps.first().map_or(2, InvariantMap::max_order);
    let sa = check_count(&grouping.group_a, max_order, 'A')?;
    let sb = check_count(&grouping.group_b, max_order, 'B')?;
    let pick = |strings: &[Vec<usize>]| -> Vec<Vec<f64>> {
        field
            .maps
            .iter()
            .map(|m| strings.iter().map(|s| m.get(s).unwrap()).collect())
            .collect()
    };
    Ok(InvariantField {
        cell_ids: field.cell_ids.clone(),
        maps: field.maps.clone(),
        grouping: Some(grouping.clone()),
        multiplet_a: pick(&sa),
        multiplet_b: pick(&sb),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarityResult {
    pub best: SignedPermutation,
    pub median_relative_error: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Compares invariant fields computed in two coordinate systems.
///
/// `correspondence` lists, per sample, the cell of that sample in each
/// system. Each discrepancy is scaled by the RMS of that invariant over
/// the cells of `field_x`.
pub fn scalarity_residual(
    field_x: &InvariantField,
    field_y: &InvariantField,
    correspondence: &[(usize, usize)],
) -> Result<ScalarityResult> {
    let rx = field_x.row_of();
    let ry = field_y.row_of();
    let pairs: Vec<(usize, usize)> = correspondence
        .iter()
        .filter_map(|(a, b)| Some((*rx.get(a)?, *ry.get(b)?)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCorrespondence);
    }
    let n = field_x.maps[0].tensors[0].dim();
    let max_order = field_x.maps[0].max_order().min(field_y.maps[0].max_order());
    let strings: Vec<Vec<usize>> = (3..=max_order).flat_map(|k| canonical_indices(n, k)).collect();
    let flat = |m: &InvariantMap| -> Vec<f64> { strings.iter().map(|s| m.get(s).unwrap()).collect() };
    let xs: Vec<Vec<f64>> = field_x.maps.iter().map(flat).collect();
    let scale: Vec<f64> = (0..strings.len())
        .map(|j| (xs.iter().map(|v| v[j] * v[j]).sum::<f64>() / xs.len() as f64).sqrt().max(f64::MIN_POSITIVE))
        .collect();
    // Count multiplicity of each cell pair to keep the median cheap.
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    for p in &pairs {
        *counts.entry(*p).or_default() += 1;
    }
    let mut weighted: Vec<((usize, usize), usize)> = counts.into_iter().collect();
    weighted.sort_unstable();
    let results: Vec<(SignedPermutation, f64)> = signed_permutations(n)
        .into_par_iter()
        .map(|q| {
            let ys: Vec<Vec<f64>> = field_y.maps.iter().map(|m| flat(&m.relabel(&q))).collect();
            let mut errs: Vec<(f64, usize)> = Vec::new();
            for &((a, b), w) in &weighted {
                for j in 0..strings.len() {
                    errs.push(((xs[a][j] - ys[b][j]).abs() / scale[j], w));
                }
            }
            (q, weighted_median(errs))
        })
        .collect();
    let (best, err) = results
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one permutation");
    Ok(ScalarityResult {
        best,
        median_relative_error: err,
    })
}

fn weighted_median(mut v: Vec<(f64, usize)>) -> f64 {
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: usize = v.iter().map(|e| e.1).sum();
    let mut acc = 0;
    for (x, w) in &v {
        acc += w;
        if 2 * acc >= total {
            return *x;
        }
    }
    median(v.into_iter().map(|e| e.0).collect())
}

/// Writes `cell_id, x_center..., IA_1..IA_m, IB_1..IB_m`.
pub fn write_multiplets_csv<W: Write>(field: &InvariantField, idx: &NeighborhoodIndex, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dim = idx.dim();
    let ma = field.multiplet_a.first().map_or(0, Vec::len);
    let mb = field.multiplet_b.first().map_or(0, Vec::len);
    let mut header = vec!["cell_id".to_string()];
    header.extend((1..=dim).map(|k| format!("x{k}_center")));
    header.extend((1..=ma).map(|k| format!("IA_{k}")));
    header.extend((1..=mb).map(|k| format!("IB_{k}")));
    out.write_record(&header)?;
    for (r, &c) in field.cell_ids.iter().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(idx.cells[c].center.iter().map(f64::to_string));
        rec.extend(field.multiplet_a[r].iter().map(f64::to_string));
        rec.extend(field.multiplet_b[r].iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn frame(m: DMatrix<f64>) -> MFrame {
        MFrame {
            m,
            d: vec![2.0, 1.0],
            degenerate: false,
            spectral_gap: 1.0,
        }
    }

    fn unit_c2_tensors(c3: SymTensor) -> MomentTensors {
        let mut c2 = SymTensor::zeros(2, 2);
        c2.set(&[0, 0], 1.0);
        c2.set(&[1, 1], 1.0);
        MomentTensors {
            mean_velocity: vec![0.0; 2],
            tensors: vec![c2, c3, SymTensor::zeros(2, 4), SymTensor::zeros(2, 5)],
            sample_count: 10,
        }
    }

    #[test]
    fn identity_frame_copies_moments() {
        let mut c3 = SymTensor::zeros(2, 3);
        c3.set(&[0, 1, 1], 0.3);
        c3.set(&[1, 1, 1], -1.2);
        let mt = unit_c2_tensors(c3.clone());
        let inv = transform_correlations(&frame(DMatrix::identity(2, 2)), &mt, 5).unwrap();
        assert_eq!(inv.order(3).unwrap(), &c3);
    }

    #[test]
    fn diagonal_scaling_cubes() {
        let mut c3 = SymTensor::zeros(2, 3);
        c3.set(&[0, 0, 0], 1.0);
        let mut mt = unit_c2_tensors(c3);
        mt.tensors[0].set(&[0, 0], 0.25);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let inv = transform_correlations(&frame(m), &mt, 3).unwrap();
        let t = inv.order(3).unwrap();
        assert_eq!(t.get(&[0, 0, 0]), 8.0);
        assert_eq!(t.get(&[0, 0, 1]), 0.0);
        assert_eq!(t.get(&[1, 1, 1]), 0.0);
    }

    #[test]
    fn missing_order() {
        let mut mt = unit_c2_tensors(SymTensor::zeros(2, 3));
        mt.tensors.truncate(2);
        assert!(matches!(
            transform_correlations(&frame(DMatrix::identity(2, 2)), &mt, 5),
            Err(Error::MissingOrder(4))
        ));
    }

    #[test]
    fn multiplet_string_order() {
        let s = multiplet_strings(&[0], 5);
        assert_eq!(s, vec![vec![0, 0, 0], vec![0, 0, 0, 0], vec![0, 0, 0, 0, 0]]);
        let s = multiplet_strings(&[1, 2], 4);
        assert_eq!(s[..4], [vec![1, 1, 1], vec![1, 1, 2], vec![1, 2, 2], vec![2, 2, 2]]);
        assert_eq!(s.len(), 9);
    }

    #[test]
    fn too_few_invariants() {
        let field = InvariantField {
            cell_ids: vec![0],
            maps: vec![InvariantMap {
                tensors: vec![SymTensor::zeros(2, 3)],
            }],
            grouping: None,
            multiplet_a: vec![],
            multiplet_b: vec![],
        };
        let g = IndexGrouping::new(vec![0], 2).unwrap();
        assert!(matches!(
            build_multiplets(&field, &g),
            Err(Error::TooFewInvariants { group: 'A', available: 1, needed: 2 })
        ));
    }

    #[test]
    fn grouping_validation() {
        assert!(IndexGrouping::new(vec![0, 1], 2).is_err());
        assert!(IndexGrouping::new(vec![], 2).is_err());
        let g = IndexGrouping::new(vec![2, 0], 3).unwrap();
        assert_eq!(g.group_a, vec![0, 2]);
        assert_eq!(g.group_b, vec![1]);
    }
}
