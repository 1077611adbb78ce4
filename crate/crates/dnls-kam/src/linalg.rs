//! Dense complex LU with partial pivoting.

use crate::error::{Error, Result};
use crate::{Real, C};
use num_traits::Zero;

/// Solves A u = b for a row-major n×n matrix.
pub fn solve<T: Real>(mut a: Vec<C<T>>, n: usize, mut b: Vec<C<T>>) -> Result<Vec<C<T>>> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let scale = a.iter().fold(T::zero(), |m, c| m.max(c.norm()));
    for col in 0..n {
        let (piv, best) = (col..n)
            .map(|r| (r, a[r * n + col].norm()))
            .fold((col, T::zero()), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !(best > scale * T::epsilon() * T::lit(1e-3)) {
            return Err(Error::SolveFailure(format!("singular pivot at column {col}")));
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f.is_zero() {
                continue;
            }
            for c in col..n {
                let v = a[col * n + c];
                a[r * n + c] = a[r * n + c] - f * v;
            }
            let v = b[col];
            b[r] = b[r] - f * v;
        }
    }
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in r + 1..n {
            acc = acc - a[r * n + c] * b[c];
        }
        b[r] = acc / a[r * n + r];
    }
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_system() {
        let c = |re: f64, im: f64| C::new(re, im);
        let a = vec![c(0.0, 1.0), c(2.0, 0.0), c(1.0, 0.0), c(1.0, -1.0)];
        let u = vec![c(1.0, 2.0), c(-3.0, 0.5)];
        let b = vec![a[0] * u[0] + a[1] * u[1], a[2] * u[0] + a[3] * u[1]];
        let got = solve(a, 2, b).unwrap();
        for (g, w) in got.iter().zip(&u) {
            assert!((g - w).norm() < 1e-14);
        }
    }

    #[test]
    fn singular_is_reported() {
        let a = vec![C::new(1.0, 0.0), C::new(2.0, 0.0), C::new(2.0, 0.0), C::new(4.0, 0.0)];
        assert!(solve(a, 2, vec![C::zero(); 2]).is_err());
    }
}
