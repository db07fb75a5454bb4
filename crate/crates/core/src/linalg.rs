//! Dense symmetric positive-definite solves for the ridge scorer.

use crate::{Error, Result};

/// Lower-triangular Cholesky factor of the row-major `n x n` matrix `a`.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::InvalidInput(format!("matrix of {} values is not {n}x{n}", a.len())));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            let v = a[i * n + j] - dot;
            if i == j {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Singular(format!("pivot {i} is {v}")));
                }
                l[i * n + i] = v.sqrt();
            } else {
                l[i * n + j] = v / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves `A X = B` for SPD `A` (`n x n`) and row-major `B` (`n x m`).
pub fn solve_spd(a: &[f64], n: usize, b: &[f64], m: usize) -> Result<Vec<f64>> {
    if b.len() != n * m {
        return Err(Error::InvalidInput(format!("right-hand side of {} values is not {n}x{m}", b.len())));
    }
    let l = cholesky(a, n)?;
    let mut x = b.to_vec();
    for c in 0..m {
        // Forward substitution L y = b.
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
        // Back substitution L^T x = y.
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn solves_known_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = solve_spd(&a, 2, &[2.0, 1.0], 1).unwrap();
        // 4x + 2y = 2, 2x + 3y = 1 -> x = 0.5, y = 0
        assert!((x[0] - 0.5).abs() < 1e-12 && x[1].abs() < 1e-12);
    }

    #[test]
    fn rejects_singular() {
        assert!(matches!(cholesky(&[1.0, 1.0, 1.0, 1.0], 2), Err(Error::Singular(_))));
    }

    proptest! {
        #[test]
        fn residual_is_small(vals in prop::collection::vec(-1.0f64..1.0, 16), rhs in prop::collection::vec(-5.0f64..5.0, 8)) {
            let n = 4;
            // A = M^T M + I is SPD.
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = (0..n).map(|k| vals[k * n + i] * vals[k * n + j]).sum::<f64>()
                        + if i == j { 1.0 } else { 0.0 };
                }
            }
            let x = solve_spd(&a, n, &rhs, 2).unwrap();
            for c in 0..2 {
                for i in 0..n {
                    let r: f64 = (0..n).map(|k| a[i * n + k] * x[k * 2 + c]).sum::<f64>() - rhs[i * 2 + c];
                    prop_assert!(r.abs() < 1e-9);
                }
            }
        }
    }
}
