//! Truncated Fourier series on the n-torus.

use crate::{Real, C};
use num_traits::Zero;
use smallvec::SmallVec;
use std::collections::BTreeMap;

pub type Mode = SmallVec<[i32; 4]>;

pub fn l1(k: &[i32]) -> u32 {
    k.iter().map(|x| x.unsigned_abs()).sum()
}

/// Σ û_k e^{ik·x}, carrying the site values j_b and a momentum tag 𝐦 so that
/// π(k,𝐦) = Σ k_b j_b + 𝐦.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierFunction<T: Real> {
    js: Vec<i32>,
    pub tag: i64,
    coeffs: BTreeMap<Mode, C<T>>,
}

impl<T: Real> FourierFunction<T> {
    pub fn zero(js: &[i32], tag: i64) -> Self {
        Self { js: js.to_vec(), tag, coeffs: BTreeMap::new() }
    }

    pub fn constant(js: &[i32], c: C<T>) -> Self {
        let mut f = Self::zero(js, 0);
        f.set(&vec![0; js.len()], c);
        f
    }

    pub fn n(&self) -> usize {
        self.js.len()
    }

    pub fn sites(&self) -> &[i32] {
        &self.js
    }

    pub fn get(&self, k: &[i32]) -> C<T> {
        self.coeffs.get(k).copied().unwrap_or_else(C::zero)
    }

    pub fn set(&mut self, k: &[i32], c: C<T>) {
        debug_assert_eq!(k.len(), self.js.len());
        if c.is_zero() {
            self.coeffs.remove(k);
        } else {
            self.coeffs.insert(k.into(), c);
        }
    }

    pub fn add_at(&mut self, k: &[i32], c: C<T>) {
        let v = self.get(k) + c;
        self.set(k, v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Mode, &C<T>)> {
        self.coeffs.iter()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn max_mode(&self) -> u32 {
        self.coeffs.keys().map(|k| l1(k)).max().unwrap_or(0)
    }

    pub fn average(&self) -> C<T> {
        self.get(&vec![0; self.n()])
    }

    pub fn without_average(&self) -> Self {
        let mut f = self.clone();
        f.set(&vec![0; self.n()], C::zero());
        f
    }

    pub fn momentum(&self, k: &[i32]) -> i64 {
        k.iter().zip(&self.js).map(|(a, b)| *a as i64 * *b as i64).sum::<i64>() + self.tag
    }

    /// (Γ_K f, f − Γ_K f).
    pub fn truncate(&self, kmax: u32) -> (Self, Self) {
        let mut lo = Self::zero(&self.js, self.tag);
        let mut hi = Self::zero(&self.js, self.tag);
        for (k, c) in &self.coeffs {
            if l1(k) <= kmax {
                lo.coeffs.insert(k.clone(), *c);
            } else {
                hi.coeffs.insert(k.clone(), *c);
            }
        }
        (lo, hi)
    }

    /// |u|_{s,𝐚,𝐦} = Σ|û_k| e^{|k|s} e^{𝐚|π(k,𝐦)|}.
    pub fn norm(&self, s: T, a_mom: T) -> T {
        self.coeffs.iter().fold(T::zero(), |acc, (k, c)| {
            let pi = T::from_i64(self.momentum(k).abs()).unwrap();
            acc + c.norm() * (T::from_u32(l1(k)).unwrap() * s + a_mom * pi).exp()
        })
    }

    /// |u|_{s,τ+1} = Σ|û_k||k|^{τ+1}e^{|k|s}.
    pub fn norm_tau(&self, s: T, tau1: T) -> T {
        self.coeffs.iter().fold(T::zero(), |acc, (k, c)| {
            let kk = T::from_u32(l1(k)).unwrap();
            acc + c.norm() * kk.powf(tau1) * (kk * s).exp()
        })
    }

    pub fn sup_coeff(&self) -> T {
        self.coeffs.values().fold(T::zero(), |a, c| a.max(c.norm()))
    }

    pub fn scale(&self, c: C<T>) -> Self {
        let mut f = Self::zero(&self.js, self.tag);
        for (k, v) in &self.coeffs {
            f.set(k, *v * c);
        }
        f
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut f = self.clone();
        for (k, v) in &o.coeffs {
            f.add_at(k, *v);
        }
        f
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.add(&o.scale(-C::new(T::one(), T::zero())))
    }

    /// Product (convolution of coefficients), untruncated.
    pub fn mul(&self, o: &Self) -> Self {
        let mut f = Self::zero(&self.js, self.tag + o.tag);
        for (a, ca) in &self.coeffs {
            for (b, cb) in &o.coeffs {
                let k: Mode = a.iter().zip(b).map(|(x, y)| x + y).collect();
                f.add_at(&k, *ca * *cb);
            }
        }
        f
    }

    /// ∂_ω f = Σ i⟨k,ω⟩ f̂_k e^{ik·x}.
    pub fn d_omega(&self, omega: &[T]) -> Self {
        let mut f = Self::zero(&self.js, self.tag);
        for (k, c) in &self.coeffs {
            let d = dot(k, omega);
            f.set(k, *c * C::new(T::zero(), d));
        }
        f
    }
}

pub fn dot<T: Real>(k: &[i32], omega: &[T]) -> T {
    k.iter().zip(omega).fold(T::zero(), |a, (x, w)| a + T::from_i32(*x).unwrap() * *w)
}

/// All k ∈ Z^n with |k|_1 ≤ kmax, in lexicographic order.
pub fn modes_upto(n: usize, kmax: u32) -> Vec<Mode> {
    fn rec(n: usize, left: i32, cur: &mut Mode, out: &mut Vec<Mode>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for v in -left..=left {
            cur.push(v);
            rec(n, left - v.abs(), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, kmax as i32, &mut Mode::new(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_and_tail_bound() {
        let js = [-1, 2];
        let mut f = FourierFunction::<f64>::zero(&js, 0);
        for (ix, k) in modes_upto(2, 6).iter().enumerate() {
            f.set(k, C::new(1.0 / (1.0 + ix as f64), 0.5));
        }
        let (lo, hi) = f.truncate(100);
        assert_eq!(lo, f);
        assert!(hi.is_empty());
        let (lo, _) = f.truncate(0);
        assert_eq!(lo.len(), 1);
        let (s, sig, a, kk) = (0.5, 0.1, 0.01, 3);
        let (_, tail) = f.truncate(kk);
        assert!(tail.norm(s - sig, a) <= (-(kk as f64) * sig).exp() * f.norm(s, a));
    }

    #[test]
    fn mode_count() {
        // |{k ∈ Z² : |k|_1 ≤ K}| = 2K² + 2K + 1
        assert_eq!(modes_upto(2, 4).len(), 41);
        assert_eq!(modes_upto(0, 4).len(), 1);
    }
}
