//! Fully symmetric tensors stored by canonical (non-decreasing) index tuples.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

fn binom(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of non-decreasing tuples of length `order` over `dim` symbols.
pub fn canonical_count(dim: usize, order: usize) -> usize {
    if dim == 0 {
        return usize::from(order == 0);
    }
    binom(dim + order - 1, order)
}

/// All non-decreasing index tuples in lexicographic order.
pub fn canonical_indices(dim: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(canonical_count(dim, order));
    let mut cur = Vec::with_capacity(order);
    fn rec(dim: usize, order: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == order {
            out.push(cur.clone());
            return;
        }
        for v in start..dim {
            cur.push(v);
            rec(dim, order, v, cur, out);
            cur.pop();
        }
    }
    rec(dim, order, 0, &mut cur, &mut out);
    out
}

/// Number of distinct orderings of a tuple (multinomial coefficient).
pub fn multiplicity(idx: &[usize]) -> usize {
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    let mut total = 1usize;
    let mut placed = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        total *= binom(placed + (j - i), j - i);
        placed += j - i;
        i = j;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymTensor {
    dim: usize,
    order: usize,
    values: Vec<f64>,
}

impl SymTensor {
    pub fn zeros(dim: usize, order: usize) -> Self {
        SymTensor {
            dim,
            order,
            values: vec![0.0; canonical_count(dim, order)],
        }
    }

    /// Wraps canonical values listed in [`canonical_indices`] order.
    pub fn from_canonical(dim: usize, order: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), canonical_count(dim, order), "canonical length mismatch");
        SymTensor { dim, order, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Position of an index tuple (any ordering) in canonical storage.
    pub fn rank(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.order);
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        let mut rank = 0;
        let mut prev = 0;
        for (j, &i) in sorted.iter().enumerate() {
            assert!(i < self.dim, "index {i} out of range");
            let rest = self.order - j - 1;
            rank += (prev..i).map(|v| canonical_count(self.dim - v, rest)).sum::<usize>();
            prev = i;
        }
        rank
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.rank(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let r = self.rank(idx);
        self.values[r] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Vec<usize>, f64)> + '_ {
        canonical_indices(self.dim, self.order).into_iter().zip(self.values.iter().copied())
    }

    /// Row-major expansion to `dim^order` entries.
    pub fn to_dense(&self) -> Vec<f64> {
        let total = self.dim.pow(self.order as u32);
        let mut idx = vec![0usize; self.order];
        (0..total)
            .map(|flat| {
                let mut f = flat;
                for p in (0..self.order).rev() {
                    idx[p] = f % self.dim;
                    f /= self.dim;
                }
                self.get(&idx)
            })
            .collect()
    }

    /// Reads the canonical entries of a dense tensor, which is assumed symmetric.
    pub fn from_dense(dim: usize, order: usize, dense: &[f64]) -> Self {
        let values = canonical_indices(dim, order)
            .iter()
            .map(|idx| dense[idx.iter().fold(0, |acc, &i| acc * dim + i)])
            .collect();
        SymTensor { dim, order, values }
    }

    /// `T'_{a1..ak} = sum M_{a1 b1} ... M_{ak bk} T_{b1..bk}`.
    pub fn transform(&self, m: &DMatrix<f64>) -> SymTensor {
        assert_eq!(m.ncols(), self.dim);
        let out_dim = m.nrows();
        let mut cur = self.to_dense();
        // shape of `cur` as we contract mode by mode: first p modes have out_dim
        for p in 0..self.order {
            let before = out_dim.pow(p as u32);
            let after = self.dim.pow((self.order - p - 1) as u32);
            let mut next = vec![0.0; before * out_dim * after];
            for a in 0..before {
                for r in 0..out_dim {
                    for b in 0..self.dim {
                        let w = m[(r, b)];
                        if w == 0.0 {
                            continue;
                        }
                        let src = &cur[(a * self.dim + b) * after..(a * self.dim + b + 1) * after];
                        let dst = &mut next[(a * out_dim + r) * after..(a * out_dim + r + 1) * after];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
            cur = next;
        }
        SymTensor::from_dense(out_dim, self.order, &cur)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
