//! Dense symmetric positive-definite solves for the ridge normal equations.

/// Error: a non-positive pivot showed up during factorization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite;

/// Solves `a x = b` for symmetric positive-definite `a` (row-major, n×n).
///
/// The matrix is Jacobi-scaled to unit diagonal before the Cholesky
/// factorization so columns on very different scales (dollars next to
/// indicators) do not swamp each other.
pub fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>, NotPositiveDefinite> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let aii = a[i * n + i];
            if aii > 0.0 {
                1.0 / aii.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j] * d[i] * d[j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 1e-14) {
                    return Err(NotPositiveDefinite);
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // Forward then backward substitution on the scaled system.
    let mut z = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i] * d[i];
        for k in 0..i {
            sum -= l[i * n + k] * z[k];
        }
        z[i] = sum / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut sum = z[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * z[k];
        }
        z[i] = sum / l[i * n + i];
    }
    Ok(z.iter().zip(&d).map(|(zi, di)| zi * di).collect())
}

/// Builds `XᵀWX + λD` and `XᵀWy` from row-major design rows, where `D` is
/// diagonal with 1 for penalized columns and 0 otherwise.
pub fn normal_equations(
    rows: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    ridge: f64,
    penalized: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let p = rows.first().map_or(0, Vec::len);
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for ((row, yi), wi) in rows.iter().zip(y).zip(w) {
        for j in 0..p {
            let wx = wi * row[j];
            b[j] += wx * yi;
            for k in 0..=j {
                a[j * p + k] += wx * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[k * p + j] = a[j * p + k];
        }
        if penalized[j] {
            a[j * p + j] += ridge;
        }
    }
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // [[4, 2], [2, 3]] x = [2, 1] -> x = [0.5, 0]
        let x = solve_spd(&[4.0, 2.0, 2.0, 3.0], &[2.0, 1.0], 2).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
    }

    #[test]
    fn rejects_singular() {
        assert_eq!(solve_spd(&[1.0, 1.0, 1.0, 1.0], &[1.0, 1.0], 2), Err(NotPositiveDefinite));
    }

    #[test]
    fn badly_scaled_columns() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![1.0, 30000.0 + 100.0 * i as f64]).collect();
        let y: Vec<f64> = rows.iter().map(|r| 0.25 + 2e-5 * r[1]).collect();
        let (a, b) = normal_equations(&rows, &y, &vec![1.0; 50], 0.0, &[false, true]);
        let beta = solve_spd(&a, &b, 2).unwrap();
        assert!((beta[0] - 0.25).abs() < 1e-8, "{beta:?}");
        assert!((beta[1] - 2e-5).abs() < 1e-12);
    }
}
