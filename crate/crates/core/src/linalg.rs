//! Small dense linear-algebra helpers on top of nalgebra.
//!
//! Covariances in this crate are frequently semidefinite (a student aligned
//! with a teacher, a zero orthogonal component), so factorizations here pivot
//! and truncate instead of failing on rank deficiency.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Smallest eigenvalue accepted for a matrix that should be PSD.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Relative level below which a Schur-complement pivot counts as zero.
const PIVOT_RELATIVE_TOL: f64 = 1e-13;

/// Rank-revealing factor `A ≈ L Lᵀ` with `L` of shape `n × rank`.
///
/// Rows of `factor` are in the original ordering of `A`, so `L u` with
/// `u ~ N(0, I_rank)` is directly a draw from `N(0, A)`.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    pub factor: DMatrix<f64>,
    pub rank: usize,
}

/// Diagonally pivoted Cholesky factorization of a symmetric PSD matrix.
///
/// Stops when the largest remaining Schur-complement diagonal drops below a
/// relative tolerance; any remaining diagonal below `-PSD_TOLERANCE` (scaled
/// by the matrix magnitude) is reported as a PSD failure.
pub fn pivoted_cholesky(a: &DMatrix<f64>) -> Result<PivotedCholesky> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("pivoted_cholesky on {}x{}", n, a.ncols())));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(1.0_f64, f64::max);
    let stop = PIVOT_RELATIVE_TOL * scale;
    let src = a.as_slice();
    let mut diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut used = vec![false; n];
    let mut pivots: Vec<usize> = Vec::with_capacity(n);
    // Column-major n × rank factor.
    let mut l: Vec<f64> = Vec::with_capacity(n * n);

    for _ in 0..n {
        let mut piv = None;
        let mut best = stop;
        for i in 0..n {
            if !used[i] && diag[i] > best {
                best = diag[i];
                piv = Some(i);
            }
        }
        let Some(piv) = piv else { break };
        let root = best.sqrt();
        let base = l.len();
        l.extend_from_slice(&src[piv * n..piv * n + n]);
        let (prev, cur) = l.split_at_mut(base);
        for col in prev.chunks_exact(n) {
            let lp = col[piv];
            if lp != 0.0 {
                for (x, y) in cur.iter_mut().zip(col) {
                    *x -= y * lp;
                }
            }
        }
        for i in 0..n {
            if used[i] || i == piv {
                l[base + i] = 0.0;
            } else {
                let v = l[base + i] / root;
                l[base + i] = v;
                diag[i] -= v * v;
            }
        }
        l[base + piv] = root;
        used[piv] = true;
        diag[piv] = 0.0;
        pivots.push(piv);
    }

    let worst = (0..n)
        .filter(|&i| !used[i])
        .map(|i| diag[i])
        .fold(f64::INFINITY, f64::min);
    if worst < -PSD_TOLERANCE * scale {
        return Err(Error::NotPsd { min_eig: worst });
    }
    let rank = pivots.len();
    let factor = DMatrix::from_vec(n, rank, l);
    Ok(PivotedCholesky { factor, rank })
}

/// Fixed-capacity variant of [`pivoted_cholesky`] for the ≤4-dimensional
/// marginal covariances evaluated in the inner loops of the expectation engine.
/// Returns the factor (row-major, original ordering) and the rank.
pub(crate) fn pivoted_cholesky_small(cov: &[[f64; 4]; 4], n: usize) -> Result<([[f64; 4]; 4], usize)> {
    debug_assert!(n <= 4);
    let scale = (0..n).map(|i| cov[i][i].abs()).fold(1.0_f64, f64::max);
    let stop = PIVOT_RELATIVE_TOL * scale;
    let mut diag = [0.0; 4];
    for i in 0..n {
        diag[i] = cov[i][i];
    }
    let mut used = [false; 4];
    let mut l = [[0.0; 4]; 4];
    let mut rank = 0;
    while rank < n {
        let mut piv = usize::MAX;
        let mut best = stop;
        for i in 0..n {
            if !used[i] && diag[i] > best {
                best = diag[i];
                piv = i;
            }
        }
        if piv == usize::MAX {
            break;
        }
        let root = best.sqrt();
        let j = rank;
        l[piv][j] = root;
        for i in 0..n {
            if used[i] || i == piv {
                continue;
            }
            let mut s = cov[i][piv];
            for c in 0..j {
                s -= l[i][c] * l[piv][c];
            }
            l[i][j] = s / root;
            diag[i] -= l[i][j] * l[i][j];
        }
        used[piv] = true;
        rank += 1;
    }
    for i in 0..n {
        if !used[i] && diag[i] < -PSD_TOLERANCE * scale {
            return Err(Error::NotPsd { min_eig: diag[i] });
        }
    }
    Ok((l, rank))
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `(A + Aᵀ) / 2` in place.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{}x{} matrix is not positive definite", a.nrows(), a.ncols())))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Assemble the block matrix `[[Q, M], [Mᵀ, P]]`.
pub fn block_omega(q: &DMatrix<f64>, m: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let (ns, nt) = (q.nrows(), p.nrows());
    let mut out = DMatrix::zeros(ns + nt, ns + nt);
    out.view_mut((0, 0), (ns, ns)).copy_from(q);
    out.view_mut((0, ns), (ns, nt)).copy_from(m);
    out.view_mut((ns, 0), (nt, ns)).copy_from(&m.transpose());
    out.view_mut((ns, ns), (nt, nt)).copy_from(p);
    out
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Serde adapter writing a matrix as `{ "rows", "cols", "data" }` with
/// `data` in row-major order.
pub mod serde_matrix {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Shaped {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        Shaped { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    /// Nested row arrays are accepted too, for hand-written files.
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum AnyForm {
        Shaped(Shaped),
        Rows(Vec<Vec<f64>>),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let sh = match AnyForm::deserialize(d)? {
            AnyForm::Shaped(sh) => sh,
            AnyForm::Rows(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != cols) {
                    return Err(serde::de::Error::custom("matrix rows have unequal lengths"));
                }
                Shaped { rows: rows.len(), cols, data: rows.concat() }
            }
        };
        if sh.data.len() != sh.rows * sh.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                sh.data.len(),
                sh.rows,
                sh.cols
            )));
        }
        Ok(DMatrix::from_row_slice(sh.rows, sh.cols, &sh.data))
    }
}

/// Serde adapter writing a vector as a plain JSON array.
pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrices_deserialize_from_nested_rows() {
        #[derive(Deserialize)]
        struct W {
            #[serde(with = "serde_matrix")]
            m: DMatrix<f64>,
        }
        let w: W = serde_json::from_str(r#"{"m": [[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]}"#).unwrap();
        assert_eq!(w.m, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert!(serde_json::from_str::<W>(r#"{"m": [[1.0], [2.0, 3.0]]}"#).is_err());
    }

    #[test]
    fn pivoted_cholesky_reconstructs_full_rank() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = pivoted_cholesky(&a).unwrap();
        assert_eq!(f.rank, 3);
        let back = &f.factor * f.factor.transpose();
        assert!(max_abs_diff(&back, &a) < 1e-14);
    }

    #[test]
    fn pivoted_cholesky_handles_semidefinite() {
        // Rows 0 and 2 identical, row 1 zero.
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 2.0]);
        let f = pivoted_cholesky(&a).unwrap();
        assert_eq!(f.rank, 1);
        let back = &f.factor * f.factor.transpose();
        assert!(max_abs_diff(&back, &a) < 1e-14);
    }

    #[test]
    fn pivoted_cholesky_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(pivoted_cholesky(&a), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn small_factor_matches_dense() {
        let cov = [[1.0, 0.3, 0.2, 0.0], [0.3, 1.5, 0.1, 0.0], [0.2, 0.1, 0.7, 0.0], [0.0; 4]];
        let (l, r) = pivoted_cholesky_small(&cov, 3).unwrap();
        assert_eq!(r, 3);
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..r).map(|c| l[i][c] * l[j][c]).sum();
                assert!((v - cov[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn block_layout() {
        let q = DMatrix::from_element(2, 2, 1.0);
        let m = DMatrix::from_row_slice(2, 1, &[0.5, 0.25]);
        let p = DMatrix::from_element(1, 1, 2.0);
        let o = block_omega(&q, &m, &p);
        assert_eq!(o[(2, 1)], 0.25);
        assert_eq!(o[(0, 2)], 0.5);
        assert_eq!(o[(2, 2)], 2.0);
    }
}
