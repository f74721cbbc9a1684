//! Dense solvers for the small systems this crate needs (antenna counts and
//! user counts, so n <= a few dozen). LU with partial pivoting, one complex
//! and one real variant.

use num_complex::Complex64;

/// Solve `A x = b` for square complex `A` (row-major, n x n). Returns None
/// if the matrix is numerically singular.
pub fn solve_complex(a: &[Complex64], n: usize, b: &[Complex64]) -> Option<Vec<Complex64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].norm_sqr();
        for row in col + 1..n {
            let mag = m[row * n + col].norm_sqr();
            if mag > best {
                best = mag;
                piv = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / d;
            if factor.norm_sqr() == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m[col * n + j];
                m[row * n + j] -= factor * v;
            }
            let xc = x[col];
            x[row] -= factor * xc;
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for j in col + 1..n {
            acc -= m[col * n + j] * x[j];
        }
        x[col] = acc / m[col * n + col];
        if !x[col].re.is_finite() || !x[col].im.is_finite() {
            return None;
        }
    }
    Some(x)
}

/// Solve `A x = b` for square real `A` (row-major, n x n).
pub fn solve_real(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let mag = m[row * n + col].abs();
            if mag > best {
                best = mag;
                piv = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if piv != col {
            for j in 0..n {
                m.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let d = m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] / d;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                let v = m[col * n + j];
                m[row * n + j] -= factor * v;
            }
            let xc = x[col];
            x[row] -= factor * xc;
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for j in col + 1..n {
            acc -= m[col * n + j] * x[j];
        }
        x[col] = acc / m[col * n + col];
        if !x[col].is_finite() {
            return None;
        }
    }
    Some(x)
}

/// y = A x for row-major square complex A.
pub fn matvec_complex(a: &[Complex64], n: usize, x: &[Complex64]) -> Vec<Complex64> {
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn complex_solve_known_system() {
        // [[2, i], [-i, 1]] x = [1+i, 0]  =>  x = (1+i) * inv rows.
        let a = [c(2.0, 0.0), c(0.0, 1.0), c(0.0, -1.0), c(1.0, 0.0)];
        let b = [c(1.0, 1.0), c(0.0, 0.0)];
        let x = solve_complex(&a, 2, &b).unwrap();
        let r0 = a[0] * x[0] + a[1] * x[1] - b[0];
        let r1 = a[2] * x[0] + a[3] * x[1] - b[1];
        assert!(r0.norm() < 1e-12 && r1.norm() < 1e-12);
    }

    #[test]
    fn complex_solve_rejects_singular() {
        let a = [c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(4.0, 0.0)];
        assert!(solve_complex(&a, 2, &[c(1.0, 0.0), c(1.0, 0.0)]).is_none());
    }

    #[test]
    fn complex_solve_random_residuals() {
        use rand::Rng;
        let mut rng = crate::rng::substream(3, crate::rng::tag::ORACLE, 0);
        for n in [1usize, 3, 8, 16] {
            let a: Vec<Complex64> = (0..n * n)
                .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let b: Vec<Complex64> = (0..n)
                .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let x = solve_complex(&a, n, &b).unwrap();
            let y = matvec_complex(&a, n, &x);
            for (yi, bi) in y.iter().zip(&b) {
                assert!((yi - bi).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn real_solve_known_system() {
        let a = [3.0, 1.0, 1.0, 2.0];
        let b = [9.0, 8.0];
        let x = solve_real(&a, 2, &b).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn real_solve_needs_pivoting() {
        // Zero on the leading diagonal forces a row swap.
        let a = [0.0, 1.0, 1.0, 0.0];
        let b = [5.0, 7.0];
        let x = solve_real(&a, 2, &b).unwrap();
        assert_eq!(x, vec![7.0, 5.0]);
    }
}
