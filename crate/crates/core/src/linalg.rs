//! Dense least squares on column-pivoted Householder QR.
//!
//! Rank-deficient systems resolve to the minimum-norm solution through a
//! complete orthogonal decomposition: after `A P = Q [R11 R12; 0 0]`, the
//! trapezoid `[R11 R12]` is factored again from the right.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Column-pivoted Householder QR of an `m x k` matrix.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// `R` on and above the diagonal, Householder vectors (implicit unit
    /// leading entry) below it.
    qr: Array2<f64>,
    tau: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    pub fn new(a: ArrayView2<f64>) -> Self {
        let (m, k) = a.dim();
        let mut qr = a.to_owned();
        let steps = m.min(k);
        let mut tau = vec![0.0; steps];
        let mut perm: Vec<usize> = (0..k).collect();
        for j in 0..steps {
            let (best, _) = (j..k)
                .map(|c| (c, col_norm_sq(qr.view(), c, j)))
                .fold((j, -1.0), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc });
            if best != j {
                for i in 0..m {
                    qr.swap((i, j), (i, best));
                }
                perm.swap(j, best);
            }
            tau[j] = householder_in_place(&mut qr, j, j);
            apply_reflector_to_columns(&mut qr, j, j, tau[j], j + 1..k);
        }
        let r00 = if steps > 0 { qr[(0, 0)].abs() } else { 0.0 };
        let tol = (m.max(k) as f64) * f64::EPSILON * r00;
        let rank = (0..steps).take_while(|&i| qr[(i, i)].abs() > tol).count();
        Self { qr, tau, perm, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nrows(&self) -> usize {
        self.qr.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.qr.ncols()
    }

    /// Ratio of the largest to the smallest retained diagonal of `R`.
    pub fn condition_estimate(&self) -> f64 {
        if self.rank == 0 {
            return f64::INFINITY;
        }
        self.qr[(0, 0)].abs() / self.qr[(self.rank - 1, self.rank - 1)].abs()
    }

    /// `Q^T b`.
    pub fn qt_mul(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let mut out = b.to_owned();
        for j in 0..self.tau.len() {
            apply_reflector_to_vector(self.qr.view(), j, j, self.tau[j], &mut out);
        }
        out
    }

    /// Minimum-norm least-squares solution of `A x ≈ b`.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let k = self.ncols();
        let r = self.rank;
        let c = self.qt_mul(b);
        let mut x_perm = Array1::zeros(k);
        if r == k {
            for i in (0..k).rev() {
                let s: f64 = (i + 1..k).map(|j| self.qr[(i, j)] * x_perm[j]).sum();
                x_perm[i] = (c[i] - s) / self.qr[(i, i)];
            }
        } else if r > 0 {
            // [R11 R12]^T = Z T, so [R11 R12] = T^T Z^T
            let mut mt = Array2::zeros((k, r));
            for i in 0..r {
                for j in i..k {
                    mt[(j, i)] = self.qr[(i, j)];
                }
            }
            let mut ztau = vec![0.0; r];
            for j in 0..r {
                ztau[j] = householder_in_place(&mut mt, j, j);
                apply_reflector_to_columns(&mut mt, j, j, ztau[j], j + 1..r);
            }
            // T^T y = c[..r], T upper triangular
            let mut y = Array1::zeros(k);
            for i in 0..r {
                let s: f64 = (0..i).map(|j| mt[(j, i)] * y[j]).sum();
                y[i] = (c[i] - s) / mt[(i, i)];
            }
            // x = Z y = H_0 ... H_{r-1} y
            for j in (0..r).rev() {
                apply_reflector_to_vector(mt.view(), j, j, ztau[j], &mut y);
            }
            x_perm = y;
        }
        let mut x = Array1::zeros(k);
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = x_perm[i];
        }
        x
    }

    /// Diagonal of the orthogonal projector onto the column space of `A`.
    pub fn projection_diag(&self) -> Array1<f64> {
        let m = self.nrows();
        let mut h = Array1::zeros(m);
        let mut e = Array1::zeros(m);
        for c in 0..self.rank {
            e.fill(0.0);
            e[c] = 1.0;
            for j in (0..self.tau.len()).rev() {
                apply_reflector_to_vector(self.qr.view(), j, j, self.tau[j], &mut e);
            }
            h.zip_mut_with(&e, |h, q| *h += q * q);
        }
        h
    }
}

fn col_norm_sq(a: ArrayView2<f64>, col: usize, from_row: usize) -> f64 {
    (from_row..a.nrows()).map(|i| a[(i, col)].powi(2)).sum()
}

/// Turns `a[row.., col]` into `beta * e_1`, storing the reflector below the
/// diagonal. Returns `tau`.
fn householder_in_place(a: &mut Array2<f64>, row: usize, col: usize) -> f64 {
    let m = a.nrows();
    let x0 = a[(row, col)];
    let tail: f64 = (row + 1..m).map(|i| a[(i, col)].powi(2)).sum();
    if tail == 0.0 {
        return 0.0;
    }
    let norm = (x0 * x0 + tail).sqrt();
    let beta = if x0 >= 0.0 { -norm } else { norm };
    let scale = 1.0 / (x0 - beta);
    for i in row + 1..m {
        a[(i, col)] *= scale;
    }
    a[(row, col)] = beta;
    (beta - x0) / beta
}

fn apply_reflector_to_columns(
    a: &mut Array2<f64>,
    row: usize,
    col: usize,
    tau: f64,
    cols: std::ops::Range<usize>,
) {
    if tau == 0.0 {
        return;
    }
    let m = a.nrows();
    for c in cols {
        let mut s = a[(row, c)];
        for i in row + 1..m {
            s += a[(i, col)] * a[(i, c)];
        }
        s *= tau;
        a[(row, c)] -= s;
        for i in row + 1..m {
            let v = a[(i, col)];
            a[(i, c)] -= s * v;
        }
    }
}

fn apply_reflector_to_vector(a: ArrayView2<f64>, row: usize, col: usize, tau: f64, x: &mut Array1<f64>) {
    if tau == 0.0 {
        return;
    }
    let m = a.nrows();
    let mut s = x[row];
    for i in row + 1..m {
        s += a[(i, col)] * x[i];
    }
    s *= tau;
    x[row] -= s;
    for i in row + 1..m {
        x[i] -= s * a[(i, col)];
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            if i == j {
                let d = a[(i, i)] - s;
                if d <= 0.0 {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn random(m: usize, k: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((m, k), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn full_rank_matches_normal_equations() {
        let a = random(50, 5, 3);
        let b = random(50, 1, 4).column(0).to_owned();
        let x = PivotedQr::new(a.view()).solve(b.view());
        let na = nalgebra::DMatrix::from_fn(50, 5, |i, j| a[(i, j)]);
        let nb = nalgebra::DVector::from_iterator(50, b.iter().copied());
        let expected = (na.transpose() * &na).cholesky().unwrap().solve(&(na.transpose() * nb));
        for i in 0..5 {
            assert_abs_diff_eq!(x[i], expected[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn min_norm_on_duplicated_column() {
        let a = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let qr = PivotedQr::new(a.view());
        assert_eq!(qr.rank(), 1);
        let x = qr.solve(array![2.0, 4.0, 6.0].view());
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn min_norm_matches_pseudo_inverse() {
        let mut a = random(30, 6, 8);
        for i in 0..30 {
            a[(i, 5)] = a[(i, 0)] - 2.0 * a[(i, 3)];
            a[(i, 4)] = a[(i, 1)];
        }
        let b = random(30, 1, 9).column(0).to_owned();
        let qr = PivotedQr::new(a.view());
        assert_eq!(qr.rank(), 4);
        let x = qr.solve(b.view());
        let na = nalgebra::DMatrix::from_fn(30, 6, |i, j| a[(i, j)]);
        let nb = nalgebra::DVector::from_iterator(30, b.iter().copied());
        let expected = na.svd(true, true).solve(&nb, 1e-10).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(x[i], expected[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn projection_diagonal() {
        let ones = Array2::from_elem((4, 1), 1.0);
        let h = PivotedQr::new(ones.view()).projection_diag();
        for v in h {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        let a = random(20, 5, 1);
        let h = PivotedQr::new(a.view()).projection_diag();
        let na = nalgebra::DMatrix::from_fn(20, 5, |i, j| a[(i, j)]);
        let p = &na * (na.transpose() * &na).try_inverse().unwrap() * na.transpose();
        for i in 0..20 {
            assert_abs_diff_eq!(h[i], p[(i, i)], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(h.sum(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky_factor() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        assert_abs_diff_eq!(l.dot(&l.t()), a, epsilon = 1e-14);
        assert!(cholesky(array![[1.0, 2.0], [2.0, 1.0]].view()).is_none());
    }

    #[test]
    fn wide_and_empty_systems() {
        let a = array![[1.0, 2.0, 3.0]];
        let x = PivotedQr::new(a.view()).solve(array![14.0].view());
        // minimum norm solution is a^T * 14 / |a|^2 = (1, 2, 3)
        assert_abs_diff_eq!(x, array![1.0, 2.0, 3.0], epsilon = 1e-13);
        let z = Array2::<f64>::zeros((3, 2));
        let qr = PivotedQr::new(z.view());
        assert_eq!(qr.rank(), 0);
        assert_eq!(qr.solve(array![1.0, 2.0, 3.0].view()), array![0.0, 0.0]);
    }
}
