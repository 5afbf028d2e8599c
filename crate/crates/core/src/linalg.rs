//! Small dense linear algebra over any [`Scalar`].

use nalgebra::{DMatrix, DVector};

use crate::scalar::{Rational, Scalar};
use num_traits::{Signed, Zero};

/// Largest magnitude among the entries of `m` restricted to `idx × idx`.
pub fn max_magnitude<T: Scalar>(m: &DMatrix<T>, idx: &[usize]) -> f64 {
    let mut best = 0.0f64;
    for &i in idx {
        for &j in idx {
            best = best.max(m[(i, j)].magnitude());
        }
    }
    best
}

/// Solves `m[idx, idx] · x = rhs[idx]` by Gaussian elimination.
///
/// Float inputs use partial pivoting and report singularity when the best
/// pivot falls below `PIVOT_RTOL · max|entry|`; exact inputs take the first
/// non-zero pivot. Returns `None` for singular systems.
pub fn solve_restricted<T: Scalar>(m: &DMatrix<T>, rhs: &DVector<T>, idx: &[usize]) -> Option<Vec<T>> {
    let s = idx.len();
    if s == 0 {
        return Some(Vec::new());
    }
    let scale = max_magnitude(m, idx);
    let width = s + 1;
    let mut a: Vec<T> = Vec::with_capacity(s * width);
    for &i in idx {
        for &j in idx {
            a.push(m[(i, j)].clone());
        }
        a.push(rhs[i].clone());
    }
    eliminate(&mut a, s, scale)
}

/// Solves a dense square system given row-major `a` (s × s) and `b`.
pub fn solve_dense<T: Scalar>(a: &[T], b: &[T]) -> Option<Vec<T>> {
    let s = b.len();
    assert_eq!(a.len(), s * s);
    let scale = a.iter().map(|v| v.magnitude()).fold(0.0, f64::max);
    let mut aug = Vec::with_capacity(s * (s + 1));
    for i in 0..s {
        aug.extend_from_slice(&a[i * s..(i + 1) * s]);
        aug.push(b[i].clone());
    }
    eliminate(&mut aug, s, scale)
}

fn eliminate<T: Scalar>(a: &mut [T], s: usize, scale: f64) -> Option<Vec<T>> {
    let width = s + 1;
    for col in 0..s {
        let pivot_row = if T::EXACT {
            (col..s).find(|&r| !a[r * width + col].is_zero())?
        } else {
            let r = (col..s)
                .max_by(|&x, &y| {
                    a[x * width + col]
                        .magnitude()
                        .total_cmp(&a[y * width + col].magnitude())
                })
                .expect("non-empty range");
            if a[r * width + col].negligible(scale) {
                return None;
            }
            r
        };
        if pivot_row != col {
            for k in 0..width {
                a.swap(pivot_row * width + k, col * width + k);
            }
        }
        let pivot = a[col * width + col].clone();
        for r in (col + 1)..s {
            if a[r * width + col].is_zero() {
                continue;
            }
            let factor = a[r * width + col].div_ref(&pivot);
            a[r * width + col] = T::zero();
            for k in (col + 1)..width {
                let (upper, lower) = a.split_at_mut(r * width);
                lower[k].sub_mul_assign(&factor, &upper[col * width + k]);
            }
        }
    }
    let mut x = vec![T::zero(); s];
    for row in (0..s).rev() {
        let mut acc = a[row * width + s].clone();
        for k in (row + 1)..s {
            acc.sub_mul_assign(&a[row * width + k], &x[k]);
        }
        x[row] = acc.div_ref(&a[row * width + row]);
    }
    Some(x)
}

/// `xᵀ m x` over the index set, with `x` given in restricted coordinates.
pub fn quad_form_restricted<T: Scalar>(m: &DMatrix<T>, idx: &[usize], x: &[T]) -> T {
    let mut total = T::zero();
    for (a, &i) in idx.iter().enumerate() {
        if x[a].is_zero() {
            continue;
        }
        let mut row = T::zero();
        for (b, &j) in idx.iter().enumerate() {
            row.add_mul_assign(&m[(i, j)], &x[b]);
        }
        total.add_mul_assign(&x[a], &row);
    }
    total
}

/// Scatters restricted coordinates into a full-length vector.
pub fn scatter<T: Scalar>(d: usize, idx: &[usize], values: &[T]) -> DVector<T> {
    let mut out = DVector::from_element(d, T::zero());
    for (k, &i) in idx.iter().enumerate() {
        out[i] = values[k].clone();
    }
    out
}

pub fn is_symmetric<T: Scalar>(m: &DMatrix<T>, rtol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    let scale = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)].magnitude())
        .fold(0.0, f64::max);
    for i in 0..n {
        for j in (i + 1)..n {
            if T::EXACT {
                if m[(i, j)] != m[(j, i)] {
                    return false;
                }
            } else if (m[(i, j)].to_f64() - m[(j, i)].to_f64()).abs() > rtol * scale.max(1e-300) {
                return false;
            }
        }
    }
    true
}

pub fn to_f64_matrix<T: Scalar>(m: &DMatrix<T>) -> DMatrix<f64> {
    m.map(|v| v.to_f64())
}

pub fn to_f64_vector<T: Scalar>(v: &DVector<T>) -> DVector<f64> {
    v.map(|x| x.to_f64())
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.is_square() && nalgebra::Cholesky::new(m.clone()).is_some()
}

/// Smallest and largest eigenvalue of a symmetric float matrix.
pub fn eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let lo = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Definiteness {
    PositiveDefinite,
    PositiveSemidefinite,
    Indefinite,
}

/// Exact definiteness of a symmetric rational matrix by symmetric elimination.
pub fn rational_definiteness(m: &DMatrix<Rational>) -> Definiteness {
    let n = m.nrows();
    let mut a = m.clone();
    let mut singular = false;
    let mut alive: Vec<usize> = (0..n).collect();
    while let Some(&p) = alive.first() {
        let pivot = a[(p, p)].clone();
        if pivot.is_negative() {
            return Definiteness::Indefinite;
        }
        if pivot.is_zero() {
            // a PSD matrix with a zero diagonal entry has a zero row there
            if alive.iter().any(|&j| !a[(p, j)].is_zero()) {
                return Definiteness::Indefinite;
            }
            singular = true;
            alive.remove(0);
            continue;
        }
        alive.remove(0);
        for &i in &alive {
            if a[(i, p)].is_zero() {
                continue;
            }
            let factor = &a[(i, p)] / &pivot;
            for &j in &alive {
                let delta = &factor * &a[(p, j)];
                a[(i, j)] -= delta;
            }
        }
    }
    if singular {
        Definiteness::PositiveSemidefinite
    } else {
        Definiteness::PositiveDefinite
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_and_exact_solves_agree() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = solve_restricted(&m, &b, &[0, 1, 2]).unwrap();
        let direct = m.clone().lu().solve(&b).unwrap();
        for i in 0..3 {
            assert!((x[i] - direct[i]).abs() < 1e-14);
        }
        let mq = m.map(|v| Rational::from_float(v).unwrap());
        let bq = b.map(|v| Rational::from_float(v).unwrap());
        let xq = solve_restricted(&mq, &bq, &[0, 2]).unwrap();
        let residual0 = &mq[(0, 0)] * &xq[0] + &mq[(0, 2)] * &xq[1] - &bq[0];
        assert!(residual0.is_zero());
    }

    #[test]
    fn singular_detected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        assert!(solve_restricted(&m, &b, &[0, 1]).is_none());
        assert!(solve_restricted(&m, &b, &[1]).is_some());
        let mq = m.map(|v| Rational::from_float(v).unwrap());
        let bq = b.map(|v| Rational::from_float(v).unwrap());
        assert!(solve_restricted(&mq, &bq, &[0, 1]).is_none());
    }

    #[test]
    fn exact_definiteness() {
        let q = |v: &[i64]| DMatrix::from_row_slice(2, 2, &v.iter().map(|&x| Rational::from_integer(x.into())).collect::<Vec<_>>());
        assert_eq!(rational_definiteness(&q(&[2, 1, 1, 2])), Definiteness::PositiveDefinite);
        assert_eq!(rational_definiteness(&q(&[1, 1, 1, 1])), Definiteness::PositiveSemidefinite);
        assert_eq!(rational_definiteness(&q(&[1, 2, 2, 1])), Definiteness::Indefinite);
        assert_eq!(rational_definiteness(&q(&[0, 1, 1, 0])), Definiteness::Indefinite);
    }
}
