//! Local frames `M(x)`: whitening of the second-order moment followed by the
//! rotation that diagonalises the contracted fourth-order moment.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moments::{MomentField, MomentTensors};
use crate::tensor::SymTensor;
use crate::trajectory::NeighborhoodIndex;

/// `K_kl = sum_m c4[k, l, m, m]`.
pub fn contract_fourth(c4: &SymTensor) -> DMatrix<f64> {
    assert_eq!(c4.order(), 4);
    weighted_contraction(c4, &DMatrix::identity(c4.dim(), c4.dim()))
}

/// `B_kl = sum_ab w_ab c4[k, l, a, b]`.
fn weighted_contraction(c4: &SymTensor, w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c4.dim();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in k..n {
            let mut s = 0.0;
            for a in 0..n {
                for b in 0..n {
                    if w[(a, b)] != 0.0 {
                        s += w[(a, b)] * c4.get(&[k, l, a, b]);
                    }
                }
            }
            out[(k, l)] = s;
            out[(l, k)] = s;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameTolerances {
    /// Smallest admissible eigenvalue of c2, relative to `trace / N`.
    pub pd_rel: f64,
    /// Degeneracy threshold on the spectral gap, relative to `max |d|`.
    pub gap_rel: f64,
}

impl Default for FrameTolerances {
    fn default() -> Self {
        FrameTolerances {
            pd_rel: 1e-10,
            gap_rel: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MFrame {
    pub m: DMatrix<f64>,
    pub d: Vec<f64>,
    pub degenerate: bool,
    pub spectral_gap: f64,
}

/// Eigen-decomposition sorted by descending eigenvalue.
pub(crate) fn sorted_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

pub fn construct_frame(mt: &MomentTensors, tol: &FrameTolerances) -> Result<MFrame> {
    let n = mt.dim();
    let c4 = mt.c4().ok_or(Error::MissingOrder(4))?;
    let c2 = mt.c2_matrix();
    let (lam, r1) = sorted_eigen(&c2);
    let eps_pd = tol.pd_rel * c2.trace() / n as f64;
    if lam.iter().any(|&l| !(l > eps_pd)) {
        return Err(Error::SingularCovariance { cell: 0 });
    }
    let inv_sqrt = DVector::from_iterator(n, lam.iter().map(|l| 1.0 / l.sqrt()));
    let w = DMatrix::from_diagonal(&inv_sqrt) * r1.transpose();
    let c2_inv = w.transpose() * &w;
    let k = &w * weighted_contraction(c4, &c2_inv) * w.transpose();
    let (d, r2) = sorted_eigen(&k);
    let mut m = r2.transpose() * w;
    for mut row in m.row_iter_mut() {
        let lead = row.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            row *= -1.0;
        }
    }
    let spectral_gap = d.windows(2).map(|p| p[0] - p[1]).fold(f64::INFINITY, f64::min);
    let eps_gap = tol.gap_rel * d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(MFrame {
        m,
        degenerate: spectral_gap < eps_gap,
        d,
        spectral_gap,
    })
}

/// `(max |M C2 Mᵀ - I|, max off-diagonal / max |diagonal|)` of the
/// transformed contracted fourth-order matrix.
pub fn frame_residuals(frame: &MFrame, mt: &MomentTensors) -> (f64, f64) {
    let n = mt.dim();
    let white = &frame.m * mt.c2_matrix() * frame.m.transpose();
    let eq7 = (white - DMatrix::<f64>::identity(n, n)).amax();
    let i4 = mt.c4().expect("fourth order present").transform(&frame.m);
    let k = contract_fourth(&i4);
    let diag = (0..n).fold(0.0f64, |a, i| a.max(k[(i, i)].abs()));
    let off = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .fold(0.0f64, |a, (i, j)| a.max(k[(i, j)].abs()));
    (eq7, if diag > 0.0 { off / diag } else { off })
}

/// `Q` with `Q[r, perm[r]] = signs[r]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignedPermutation {
    pub perm: Vec<usize>,
    pub signs: Vec<i8>,
}

impl SignedPermutation {
    pub fn identity(n: usize) -> Self {
        SignedPermutation {
            perm: (0..n).collect(),
            signs: vec![1; n],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.perm.iter().enumerate().all(|(i, &p)| i == p) && self.signs.iter().all(|&s| s == 1)
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.perm.len();
        let mut q = DMatrix::zeros(n, n);
        for (r, (&p, &s)) in self.perm.iter().zip(&self.signs).enumerate() {
            q[(r, p)] = s as f64;
        }
        q
    }

    /// `Q · A`
    pub fn apply_rows(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| self.signs[r] as f64 * a[(self.perm[r], c)])
    }

    pub fn compose(&self, inner: &SignedPermutation) -> SignedPermutation {
        // (self ∘ inner)[r] picks row perm[r] of inner
        let perm = self.perm.iter().map(|&p| inner.perm[p]).collect();
        let signs = self
            .perm
            .iter()
            .zip(&self.signs)
            .map(|(&p, &s)| s * inner.signs[p])
            .collect();
        SignedPermutation { perm, signs }
    }
}

/// All `2^n · n!` signed permutations in a fixed order (identity first).
pub fn signed_permutations(n: usize) -> Vec<SignedPermutation> {
    let mut perms: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..n {
        let mut next = Vec::new();
        for p in &perms {
            for v in (0..n).filter(|v| !p.contains(v)) {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        perms = next;
    }
    let mut out = Vec::with_capacity(perms.len() << n);
    for p in perms {
        for mask in 0..(1u32 << n) {
            let signs = (0..n).map(|i| if mask >> i & 1 == 1 { -1 } else { 1 }).collect();
            out.push(SignedPermutation {
                perm: p.clone(),
                signs,
            });
        }
    }
    out
}

const EXHAUSTIVE_MAX_DIM: usize = 4;

/// Signed permutation `Q` minimising `sum_i w_i ‖Q A_i − I‖_F`.
/// Exhaustive for `n <= 4`; greedy row matching on `sum_i w_i A_i` above.
pub fn nearest_signed_permutation(terms: &[(DMatrix<f64>, f64)], candidates: Option<&[SignedPermutation]>) -> SignedPermutation {
    let n = terms[0].0.nrows();
    if n <= EXHAUSTIVE_MAX_DIM {
        let owned;
        let cands = match candidates {
            Some(c) => c,
            None => {
                owned = signed_permutations(n);
                &owned
            }
        };
        let cost = |q: &SignedPermutation| -> f64 {
            terms
                .iter()
                .map(|(a, w)| {
                    let qa = q.apply_rows(a);
                    w * (qa - DMatrix::<f64>::identity(n, n)).norm()
                })
                .sum()
        };
        let mut best = (f64::INFINITY, 0usize);
        for (i, q) in cands.iter().enumerate() {
            let c = cost(q);
            if c < best.0 {
                best = (c, i);
            }
        }
        return cands[best.1].clone();
    }
    let s = terms.iter().fold(DMatrix::<f64>::zeros(n, n), |acc, (a, w)| acc + a * *w);
    // maximise trace(Q S) = sum_r sign_r S[perm_r, r]
    let mut perm = vec![usize::MAX; n];
    let mut signs = vec![1i8; n];
    let mut used_rows = vec![false; n];
    let mut used_cols = vec![false; n];
    for _ in 0..n {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in (0..n).filter(|&i| !used_rows[i]) {
            for j in (0..n).filter(|&j| !used_cols[j]) {
                if s[(i, j)].abs() > best.0 {
                    best = (s[(i, j)].abs(), i, j);
                }
            }
        }
        let (_, i, j) = best;
        used_rows[i] = true;
        used_cols[j] = true;
        perm[j] = i;
        signs[j] = if s[(i, j)] < 0.0 { -1 } else { 1 };
    }
    SignedPermutation { perm, signs }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Grid cells within this Chebyshev distance vote on each alignment.
    pub radius: usize,
    /// Passes re-deciding each cell against all its neighbours afterwards.
    pub relax_sweeps: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            radius: 2,
            relax_sweeps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameField {
    /// One entry per cell; `None` where c2 was singular.
    pub frames: Vec<Option<MFrame>>,
    pub alignment_applied: bool,
    pub components: usize,
}

impl FrameField {
    pub fn usable(&self, cell: usize) -> Option<&MFrame> {
        self.frames[cell].as_ref().filter(|f| !f.degenerate)
    }

    pub fn singular_count(&self) -> usize {
        self.frames.iter().filter(|f| f.is_none()).count()
    }

    pub fn degenerate_count(&self) -> usize {
        self.frames.iter().flatten().filter(|f| f.degenerate).count()
    }
}

pub fn construct_frames(field: &MomentField, tol: &FrameTolerances) -> FrameField {
    let frames = field
        .cells
        .par_iter()
        .map(|mt| construct_frame(mt, tol).ok())
        .collect();
    FrameField {
        frames,
        alignment_applied: false,
        components: 0,
    }
}

/// Voting neighbours of every cell with their weights.
fn voting_neighbors(idx: &NeighborhoodIndex, radius: usize) -> Vec<Vec<(usize, f64)>> {
    let grid = idx.cells.iter().all(|c| c.coords.is_some());
    if !grid || radius <= 1 {
        return idx
            .neighbors()
            .into_iter()
            .map(|v| v.into_iter().map(|j| (j, 1.0)).collect())
            .collect();
    }
    let coords: Vec<&[usize]> = idx.cells.iter().map(|c| c.coords.as_deref().unwrap()).collect();
    let r = radius as i64;
    coords
        .iter()
        .enumerate()
        .map(|(i, ci)| {
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(j, cj)| {
                    let diffs: Vec<i64> = ci.iter().zip(cj.iter()).map(|(a, b)| *a as i64 - *b as i64).collect();
                    let cheb = diffs.iter().map(|d| d.abs()).max().unwrap_or(0);
                    (cheb <= r).then(|| {
                        let e: f64 = diffs.iter().map(|d| (d * d) as f64).sum::<f64>().sqrt();
                        (j, 1.0 / e)
                    })
                })
                .collect()
        })
        .collect()
}

#[derive(PartialEq)]
struct Queued {
    gap: f64,
    cell: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gap.total_cmp(&other.gap).then(other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Makes the frame field continuous by left-multiplying frames with signed
/// permutations. Cells are visited in order of decreasing spectral gap among
/// those touching the aligned set; each votes against every aligned cell in
/// its neighbourhood.
pub fn align_frames(field: &FrameField, idx: &NeighborhoodIndex, cfg: &AlignConfig) -> FrameField {
    let n_cells = field.frames.len();
    let mut out = field.clone();
    let usable: Vec<bool> = (0..n_cells).map(|c| field.usable(c).is_some()).collect();
    let neighbors = voting_neighbors(idx, cfg.radius);
    let inverses: Vec<Option<DMatrix<f64>>> = out
        .frames
        .iter()
        .map(|f| f.as_ref().and_then(|f| f.m.clone().try_inverse()))
        .collect();
    let dim = idx.dim();
    let cands = signed_permutations(dim.min(EXHAUSTIVE_MAX_DIM));
    let cands = (dim <= EXHAUSTIVE_MAX_DIM).then_some(cands.as_slice());
    let mut aligned: Vec<bool> = vec![false; n_cells];
    let mut inv: Vec<Option<DMatrix<f64>>> = inverses;
    let mut components = 0;

    let decide = |c: usize, out: &FrameField, inv: &[Option<DMatrix<f64>>], aligned: &[bool]| {
        let m = &out.frames[c].as_ref().unwrap().m;
        let terms: Vec<(DMatrix<f64>, f64)> = neighbors[c]
            .iter()
            .filter(|(j, _)| aligned[*j])
            .map(|&(j, w)| (m * inv[j].as_ref().unwrap(), w))
            .collect();
        (!terms.is_empty()).then(|| nearest_signed_permutation(&terms, cands))
    };
    let apply = |c: usize, q: &SignedPermutation, out: &mut FrameField, inv: &mut [Option<DMatrix<f64>>]| {
        let f = out.frames[c].as_mut().unwrap();
        f.m = q.apply_rows(&f.m);
        let qm = q.matrix();
        f.d = q.perm.iter().map(|&p| f.d[p]).collect();
        inv[c] = inv[c].take().map(|i| i * qm.transpose());
    };

    loop {
        let start = (0..n_cells)
            .filter(|&c| usable[c] && !aligned[c])
            .max_by(|&a, &b| {
                let (ga, gb) = (field.usable(a).unwrap().spectral_gap, field.usable(b).unwrap().spectral_gap);
                ga.total_cmp(&gb).then(b.cmp(&a))
            });
        let Some(start) = start else { break };
        components += 1;
        aligned[start] = true;
        let mut heap = BinaryHeap::new();
        let push = |heap: &mut BinaryHeap<Queued>, c: usize, aligned: &[bool]| {
            for &(j, _) in &neighbors[c] {
                if usable[j] && !aligned[j] {
                    heap.push(Queued {
                        gap: field.usable(j).unwrap().spectral_gap,
                        cell: j,
                    });
                }
            }
        };
        push(&mut heap, start, &aligned);
        while let Some(Queued { cell, .. }) = heap.pop() {
            if aligned[cell] {
                continue;
            }
            if let Some(q) = decide(cell, &out, &inv, &aligned) {
                apply(cell, &q, &mut out, &mut inv);
            }
            aligned[cell] = true;
            push(&mut heap, cell, &aligned);
        }
    }

    for _ in 0..cfg.relax_sweeps {
        let mut changed = 0;
        for c in (0..n_cells).filter(|&c| usable[c]) {
            if let Some(q) = decide(c, &out, &inv, &aligned) {
                if !q.is_identity() {
                    apply(c, &q, &mut out, &mut inv);
                    changed += 1;
                }
            }
        }
        if changed == 0 {
            break;
        }
    }
    out.alignment_applied = true;
    out.components = components;
    out
}

/// Face-adjacent pairs whose relative frame is closer to some nontrivial
/// signed permutation than to the identity.
pub fn alignment_violations(field: &FrameField, idx: &NeighborhoodIndex) -> usize {
    idx.adjacency
        .iter()
        .filter(|&&(a, b)| {
            let (Some(fa), Some(fb)) = (field.usable(a), field.usable(b)) else {
                return false;
            };
            let Some(ib) = fb.m.clone().try_inverse() else {
                return false;
            };
            let rel = &fa.m * ib;
            !nearest_signed_permutation(&[(rel, 1.0)], None).is_identity()
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensors(c2: [[f64; 2]; 2], c4_diag: [f64; 2]) -> MomentTensors {
        let mut t2 = SymTensor::zeros(2, 2);
        t2.set(&[0, 0], c2[0][0]);
        t2.set(&[0, 1], c2[0][1]);
        t2.set(&[1, 1], c2[1][1]);
        let mut t4 = SymTensor::zeros(2, 4);
        t4.set(&[0, 0, 0, 0], c4_diag[0]);
        t4.set(&[1, 1, 1, 1], c4_diag[1]);
        MomentTensors {
            mean_velocity: vec![0.0, 0.0],
            tensors: vec![t2, SymTensor::zeros(2, 3), t4],
            sample_count: 100,
        }
    }

    #[test]
    fn contraction_examples() {
        assert_eq!(contract_fourth(&SymTensor::zeros(2, 4)), DMatrix::zeros(2, 2));
        let mut c4 = SymTensor::zeros(2, 4);
        c4.set(&[0, 0, 0, 0], 3.0);
        assert_eq!(contract_fourth(&c4), DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn identity_frame() {
        let f = construct_frame(&tensors([[1.0, 0.0], [0.0, 1.0]], [5.0, 2.0]), &FrameTolerances::default()).unwrap();
        let q = nearest_signed_permutation(&[(f.m.clone(), 1.0)], None);
        assert!((q.apply_rows(&f.m) - DMatrix::<f64>::identity(2, 2)).amax() < 1e-12);
        assert!(f.d[0] > f.d[1]);
    }

    #[test]
    fn rescaling_frame() {
        // whitened c4 diagonal entries: 16*a/16 and b
        let f = construct_frame(&tensors([[4.0, 0.0], [0.0, 1.0]], [48.0, 1.0]), &FrameTolerances::default()).unwrap();
        let m: Vec<f64> = f.m.iter().map(|v| v.abs()).collect();
        // column-major: m[0]=M00, m[3]=M11
        assert!((m[0] - 0.5).abs() < 1e-12 && (m[3] - 1.0).abs() < 1e-12, "{:?}", f.m);
    }

    #[test]
    fn singular_c2_rejected() {
        let r = construct_frame(&tensors([[1.0, 1.0], [1.0, 1.0]], [1.0, 2.0]), &FrameTolerances::default());
        assert!(matches!(r, Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn equal_spectrum_degenerate() {
        let mt = tensors([[1.0, 0.0], [0.0, 1.0]], [3.0, 3.0]);
        assert!(construct_frame(&mt, &FrameTolerances::default()).unwrap().degenerate);
    }

    #[test]
    fn signed_permutation_count_and_identity_first() {
        let all = signed_permutations(3);
        assert_eq!(all.len(), 48);
        assert!(all[0].is_identity());
    }

    #[test]
    fn nearest_recovers_row_swap() {
        let q = SignedPermutation {
            perm: vec![1, 0, 2],
            signs: vec![1, -1, 1],
        };
        let a = q.matrix().transpose() * 1.01;
        let found = nearest_signed_permutation(&[(a.clone(), 1.0)], None);
        assert_eq!(found, q);
        // greedy branch agrees on larger matrices
        let q6 = SignedPermutation {
            perm: vec![2, 0, 1, 5, 3, 4],
            signs: vec![1, -1, 1, -1, 1, 1],
        };
        let a6 = q6.matrix().transpose();
        assert_eq!(nearest_signed_permutation(&[(a6, 1.0)], None), q6);
    }

    #[test]
    fn compose_matches_matrix_product() {
        let all = signed_permutations(3);
        let (a, b) = (&all[17], &all[40]);
        assert_eq!(a.compose(b).matrix(), a.matrix() * b.matrix());
    }
}
