//! Small dense helpers shared by the charting and feature modules.

use nalgebra::DMatrix;

use crate::frames::sorted_eigen;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

pub(crate) fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
        n += 1;
    }
    m.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    m
}

/// Principal axes of a point set: mean, eigenvalues (descending) and
/// eigenvectors as matrix columns. Covariance uses `1/n`.
#[derive(Debug, Clone)]
pub(crate) struct Pca {
    pub mean: Vec<f64>,
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl Pca {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Pca {
        let mean = mean_of(rows.clone(), dim);
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut n = 0usize;
        let mut u = vec![0.0; dim];
        for r in rows {
            for k in 0..dim {
                u[k] = r[k] - mean[k];
            }
            for i in 0..dim {
                for j in i..dim {
                    cov[(i, j)] += u[i] * u[j];
                }
            }
            n += 1;
        }
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] /= n.max(1) as f64;
                cov[(j, i)] = cov[(i, j)];
            }
        }
        let (values, vectors) = sorted_eigen(&cov);
        let values = values.into_iter().map(|v| v.max(0.0)).collect();
        Pca { mean, values, vectors }
    }

    /// Fraction of variance beyond the leading `k` components, `None` if the
    /// total variance is zero.
    pub fn residual_fraction(&self, k: usize) -> Option<f64> {
        let total: f64 = self.values.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        Some(self.values.iter().skip(k).sum::<f64>() / total)
    }
}

/// Least squares `X β ≈ Y` by SVD.
pub(crate) fn lstsq(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = x.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    svd.solve(y, tol).expect("svd with both factors")
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 0.0;
    }
    let ma = a[..n].iter().sum::<f64>() / n as f64;
    let mb = b[..n].iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

pub(crate) fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_monotone_and_ties() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 8.0, 27.0, 64.0];
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![1.5, 0.0, 1.5]);
    }

    #[test]
    fn pca_of_line() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let p = Pca::fit(pts.iter().map(Vec::as_slice), 2);
        assert!(p.residual_fraction(1).unwrap() < 1e-12);
    }

    #[test]
    fn lstsq_exact() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DMatrix::from_row_slice(3, 1, &[1.0, 3.0, 5.0]);
        let b = lstsq(&x, &y);
        assert!((b[(0, 0)] - 1.0).abs() < 1e-12 && (b[(1, 0)] - 2.0).abs() < 1e-12);
    }
}
