//! Sparse truncated power series in (x, y, z, z̄) and their Poisson algebra.
//!
//! A series with an empty site set (see [`SiteSet::fourier`]) lives in the
//! complex q-coordinates; the same bracket formula then has no x/y part.

use crate::error::{Error, Result};
use crate::index::{lower, momentum_scalar, sgn, MultiIndex, Powers};
use crate::{Real, SiteSet, C};
use num_traits::{One, Zero};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

/// Truncation applied to every stored index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationBudget {
    /// Max of 2|i| + |α| + |β|.
    pub degree_max: u32,
    /// Max ℓ1 length of k.
    pub fourier_max: u32,
}

impl TruncationBudget {
    pub fn new(degree_max: u32, fourier_max: u32) -> Self {
        Self { degree_max, fourier_max }
    }

    pub fn admits(&self, m: &MultiIndex) -> bool {
        m.weighted_degree() <= self.degree_max && m.k_norm() <= self.fourier_max
    }
}

const CHUNK: usize = 128;

/// Truncated formal series Σ c e^{ik·x} y^i z^α z̄^β.
#[derive(Clone, Debug)]
pub struct FormalSeries<T: Real> {
    sites: Arc<SiteSet>,
    budget: TruncationBudget,
    prune: T,
    pruned_mass: T,
    terms: BTreeMap<MultiIndex, C<T>>,
}

impl<T: Real> PartialEq for FormalSeries<T> {
    fn eq(&self, o: &Self) -> bool {
        self.same_sites(o) && self.budget == o.budget && self.terms == o.terms
    }
}

/// Options for [`FormalSeries::lie_transform`].
#[derive(Clone, Copy, Debug)]
pub struct LieOptions {
    /// Fixed number of orders; `None` picks the exact order when the degree
    /// grading allows it and a norm-based stop otherwise.
    pub order_max: Option<usize>,
    pub rel_tol: f64,
    pub hard_cap: usize,
}

impl Default for LieOptions {
    fn default() -> Self {
        Self { order_max: None, rel_tol: 1e-17, hard_cap: 60 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LieReport {
    pub orders: usize,
    /// ‖ad^k‖/(k‖ad^{k−1}‖) at the last retained order (0 if terminated exactly).
    pub last_ratio: f64,
    pub converged: bool,
}

impl<T: Real> FormalSeries<T> {
    pub fn new(sites: Arc<SiteSet>, budget: TruncationBudget) -> Self {
        Self { sites, budget, prune: T::lit(1e-300), pruned_mass: T::zero(), terms: BTreeMap::new() }
    }

    pub fn with_prune(mut self, prune: T) -> Self {
        self.prune = prune;
        self
    }

    /// Fresh empty series sharing site set, budget and prune threshold.
    pub fn empty_like(&self) -> Self {
        Self {
            sites: self.sites.clone(),
            budget: self.budget,
            prune: self.prune,
            pruned_mass: T::zero(),
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(sites: Arc<SiteSet>, budget: TruncationBudget, c: C<T>) -> Self {
        let n = sites.n();
        let mut s = Self::new(sites, budget);
        s.add_term(MultiIndex::zero(n), c);
        s
    }

    pub fn monomial(sites: Arc<SiteSet>, budget: TruncationBudget, m: MultiIndex, c: C<T>) -> Self {
        let mut s = Self::new(sites, budget);
        s.add_term(m, c);
        s
    }

    pub fn sites(&self) -> &Arc<SiteSet> {
        &self.sites
    }
    pub fn budget(&self) -> TruncationBudget {
        self.budget
    }
    pub fn prune_threshold(&self) -> T {
        self.prune
    }
    /// Σ|c| over coefficients dropped by pruning since construction.
    pub fn pruned_mass(&self) -> T {
        self.pruned_mass
    }
    pub fn len(&self) -> usize {
        self.terms.len()
    }
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
    pub fn iter(&self) -> impl Iterator<Item = (&MultiIndex, &C<T>)> {
        self.terms.iter()
    }
    pub fn coeff(&self, m: &MultiIndex) -> C<T> {
        self.terms.get(m).copied().unwrap_or_else(C::zero)
    }

    fn same_sites(&self, o: &Self) -> bool {
        Arc::ptr_eq(&self.sites, &o.sites) || *self.sites == *o.sites
    }

    fn check(&self, o: &Self) -> Result<()> {
        if self.same_sites(o) {
            Ok(())
        } else {
            Err(Error::SiteMismatch)
        }
    }

    /// Adds c to the coefficient of m (dropped if outside the budget).
    pub fn add_term(&mut self, m: MultiIndex, c: C<T>) -> bool {
        debug_assert_eq!(m.n(), self.sites.n());
        if !self.budget.admits(&m) {
            return false;
        }
        let v = self.coeff(&m) + c;
        let norm = v.norm();
        if norm <= self.prune {
            self.pruned_mass = self.pruned_mass + norm;
            self.terms.remove(&m);
        } else {
            self.terms.insert(m, v);
        }
        true
    }

    fn absorb(&mut self, acc: HashMap<MultiIndex, C<T>>) {
        for (m, c) in acc {
            let e = self.terms.entry(m).or_insert_with(C::zero);
            *e = *e + c;
        }
        self.prune_now();
    }

    fn prune_now(&mut self) {
        let p = self.prune;
        let mut mass = T::zero();
        self.terms.retain(|_, c| {
            let a = c.norm();
            if a <= p {
                mass = mass + a;
                false
            } else {
                true
            }
        });
        self.pruned_mass = self.pruned_mass + mass;
    }

    /// Keeps only the terms satisfying `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&MultiIndex, &C<T>) -> bool) -> Self {
        let mut out = self.empty_like();
        out.terms = self.terms.iter().filter(|(m, c)| keep(m, c)).map(|(m, c)| (m.clone(), *c)).collect();
        out
    }

    pub fn map_coeffs(&self, mut f: impl FnMut(&MultiIndex, C<T>) -> C<T>) -> Self {
        let mut out = self.empty_like();
        out.terms = self.terms.iter().map(|(m, c)| (m.clone(), f(m, *c))).collect();
        out.prune_now();
        out
    }

    /// Re-truncates under a different budget.
    pub fn with_budget(&self, budget: TruncationBudget) -> Self {
        let mut out = self.filter(|m, _| budget.admits(m));
        out.budget = budget;
        out
    }

    pub fn scale(&self, c: C<T>) -> Self {
        self.map_coeffs(|_, v| v * c)
    }

    pub fn neg(&self) -> Self {
        self.map_coeffs(|_, v| -v)
    }

    /// self += c·o.
    pub fn axpy(&mut self, c: C<T>, o: &Self) -> Result<()> {
        self.check(o)?;
        for (m, v) in &o.terms {
            if self.budget.admits(m) {
                let e = self.terms.entry(m.clone()).or_insert_with(C::zero);
                *e = *e + c * v;
            }
        }
        self.prune_now();
        Ok(())
    }

    pub fn add(&self, o: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(C::one(), o)?;
        Ok(out)
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-C::<T>::one(), o)?;
        Ok(out)
    }

    /// Σ|c|.
    pub fn l1(&self) -> T {
        self.terms.values().fold(T::zero(), |a, c| a + c.norm())
    }

    pub fn max_abs(&self) -> T {
        self.terms.values().fold(T::zero(), |a, c| a.max(c.norm()))
    }

    pub fn min_degree(&self) -> Option<u32> {
        self.terms.keys().map(|m| m.weighted_degree()).min()
    }

    pub fn max_degree(&self) -> Option<u32> {
        self.terms.keys().map(|m| m.weighted_degree()).max()
    }

    /// Homogeneous part of weighted degree d.
    pub fn degree_part(&self, d: u32) -> Self {
        self.filter(|m, _| m.weighted_degree() == d)
    }

    /// The x-average [·].
    pub fn x_average(&self) -> Self {
        self.filter(|m, _| m.k.iter().all(|k| *k == 0))
    }

    pub fn is_momentum_conserving(&self) -> bool {
        self.terms.keys().all(|m| momentum_scalar(m, &self.sites) == 0)
    }

    /// Largest |c_m − c'_m| relative to max(1-normalised scale).
    pub fn max_diff(&self, o: &Self) -> T {
        let mut d = T::zero();
        for (m, c) in &self.terms {
            d = d.max((*c - o.coeff(m)).norm());
        }
        for (m, c) in &o.terms {
            if !self.terms.contains_key(m) {
                d = d.max(c.norm());
            }
        }
        d
    }

    // ---- derivatives -------------------------------------------------

    pub fn d_x(&self, b: usize) -> Self {
        let mut out = self.empty_like();
        for (m, c) in &self.terms {
            if m.k[b] != 0 {
                out.terms.insert(m.clone(), *c * C::new(T::zero(), T::from_i32(m.k[b]).unwrap()));
            }
        }
        out
    }

    pub fn d_y(&self, b: usize) -> Self {
        let mut out = self.empty_like();
        for (m, c) in &self.terms {
            if m.i[b] > 0 {
                let mut l = m.clone();
                l.i[b] -= 1;
                out.terms.insert(l, *c * T::from_u32(m.i[b]).unwrap());
            }
        }
        out
    }

    fn d_powers(&self, j: i32, bar: bool) -> Self {
        let mut out = self.empty_like();
        for (m, c) in &self.terms {
            let src = if bar { &m.beta } else { &m.alpha };
            if let Some((p, e)) = lower(src, j) {
                let mut l = m.clone();
                if bar {
                    l.beta = p;
                } else {
                    l.alpha = p;
                }
                out.terms.insert(l, *c * T::from_u32(e).unwrap());
            }
        }
        out
    }

    pub fn d_z(&self, j: i32) -> Self {
        self.d_powers(j, false)
    }

    pub fn d_zbar(&self, j: i32) -> Self {
        self.d_powers(j, true)
    }

    // ---- products -----------------------------------------------------

    /// Truncated product.
    pub fn mul(&self, o: &Self) -> Result<Self> {
        self.check(o)?;
        let rhs: Vec<(&MultiIndex, &C<T>)> = o.terms.iter().collect();
        let lhs: Vec<(&MultiIndex, &C<T>)> = self.terms.iter().collect();
        let budget = self.budget;
        let parts: Vec<HashMap<MultiIndex, C<T>>> = lhs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = HashMap::new();
                for (a, ca) in chunk {
                    for (b, cb) in &rhs {
                        if a.weighted_degree() + b.weighted_degree() > budget.degree_max {
                            continue;
                        }
                        let p = a.mul(b);
                        if budget.admits(&p) {
                            let e = acc.entry(p).or_insert_with(C::zero);
                            *e = *e + **ca * **cb;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut out = self.empty_like();
        for p in parts {
            out.absorb(p);
        }
        Ok(out)
    }

    /// {self, F} = Σσ_{j_b}(H_x F_y − H_y F_x) − iΣσ_j(H_z F_z̄ − H_z̄ F_z).
    pub fn bracket(&self, f: &Self) -> Result<Self> {
        self.check(f)?;
        let mut out = self.empty_like();
        if self.is_empty() || f.is_empty() {
            return Ok(out);
        }
        let idx = BracketIndex::new(f);
        let lhs: Vec<(&MultiIndex, &C<T>)> = self.terms.iter().collect();
        let budget = self.budget;
        let site_signs: SmallVec<[i32; 4]> = (0..self.sites.n()).map(|b| self.sites.site_sign(b)).collect();
        let parts: Vec<HashMap<MultiIndex, C<T>>> = lhs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc: HashMap<MultiIndex, C<T>> = HashMap::new();
                let mut stamp = vec![usize::MAX; idx.terms.len()];
                let mut cand: Vec<usize> = Vec::new();
                for (ci, (a, ca)) in chunk.iter().enumerate() {
                    cand.clear();
                    idx.candidates(a, ci, &mut stamp, &mut cand);
                    cand.sort_unstable();
                    let da = a.weighted_degree();
                    for &t in &cand {
                        let (b, cb) = &idx.terms[t];
                        if da + b.weighted_degree() < 2 || da + b.weighted_degree() - 2 > budget.degree_max {
                            continue;
                        }
                        bracket_pair(a, **ca, b, **cb, &site_signs, &budget, &mut acc);
                    }
                }
                acc
            })
            .collect();
        for p in parts {
            out.absorb(p);
        }
        Ok(out)
    }

    /// Successive ad_F^k(self) = {…{self,F},…,F}, k = 0..; stops at an exact
    /// order (degree grading) or once the scaled terms fall below tolerance.
    pub fn lie_terms(&self, f: &Self, opts: LieOptions) -> Result<(Vec<Self>, LieReport)> {
        self.lie_terms_with(f, opts, |s| s.l1().to_f64().unwrap_or(f64::INFINITY))
    }

    /// As [`lie_terms`](Self::lie_terms) with a caller-chosen size for the
    /// tolerance stop (e.g. a vector-field norm on a shrunken domain).
    pub fn lie_terms_with(
        &self,
        f: &Self,
        opts: LieOptions,
        size_of: impl Fn(&Self) -> f64,
    ) -> Result<(Vec<Self>, LieReport)> {
        self.check(f)?;
        let mut terms = vec![self.clone()];
        if f.is_empty() || self.is_empty() {
            return Ok((terms, LieReport { orders: 0, last_ratio: 0.0, converged: true }));
        }
        let exact = match (opts.order_max, f.min_degree(), self.min_degree()) {
            (Some(k), _, _) => Some(k),
            (None, Some(df), Some(dh)) if df >= 3 => {
                let step = (df - 2) as usize;
                Some(((self.budget.degree_max.saturating_sub(dh)) as usize).div_ceil(step))
            }
            _ => None,
        };
        let cap = exact.unwrap_or(opts.hard_cap);
        let base = size_of(self).max(f64::MIN_POSITIVE);
        let mut prev = base;
        let mut fact = 1.0f64;
        let mut last_ratio = 0.0;
        for k in 1..=cap {
            let next = terms.last().unwrap().bracket(f)?;
            fact *= k as f64;
            let size = size_of(&next) / fact;
            let empty = next.is_empty();
            last_ratio = if prev > 0.0 { size / prev } else { 0.0 };
            terms.push(next);
            if empty {
                terms.pop();
                return Ok((terms, LieReport { orders: k - 1, last_ratio: 0.0, converged: true }));
            }
            if exact.is_none() && size <= opts.rel_tol * base {
                return Ok((terms, LieReport { orders: k, last_ratio, converged: last_ratio <= 1.0 }));
            }
            prev = size;
        }
        let converged = exact.is_some() || last_ratio <= 1.0;
        let orders = terms.len() - 1;
        Ok((terms, LieReport { orders, last_ratio, converged }))
    }

    /// self ∘ Φ_F^1 = Σ ad_F^k(self)/k!.
    pub fn lie_transform(&self, f: &Self, opts: LieOptions) -> Result<(Self, LieReport)> {
        let (terms, rep) = self.lie_terms(f, opts)?;
        let mut out = self.empty_like();
        let mut fact = T::one();
        for (k, t) in terms.iter().enumerate() {
            if k > 0 {
                fact = fact * T::from_usize(k).unwrap();
            }
            out.axpy(C::new(fact.recip(), T::zero()), t)?;
        }
        Ok((out, rep))
    }

    /// (R, normal part): R keeps weighted degree ≤ 2, the normal part is
    /// [R^x] + ⟨[R^y],y⟩ + ⟨diag[R^{zz̄}] z, z̄⟩.
    pub fn taylor_truncate_r(&self) -> (Self, Self) {
        let r = self.filter(|m, _| m.weighted_degree() <= 2);
        let normal = r.filter(|m, _| m.k.iter().all(|k| *k == 0) && is_normal_shape(m));
        (r, normal)
    }

    // ---- serialization ------------------------------------------------

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "series v1").unwrap();
        writeln!(s, "sites{}", join(self.sites.sites().iter())).unwrap();
        writeln!(s, "cutoff {}", self.sites.mode_cutoff()).unwrap();
        writeln!(s, "budget {} {}", self.budget.degree_max, self.budget.fourier_max).unwrap();
        for (m, c) in &self.terms {
            let pairs = |p: &Powers| p.iter().map(|(j, e)| format!(" {j}:{e}")).collect::<String>();
            writeln!(
                s,
                "{} |{} |{} |{} | {:e} {:e}",
                join(m.k.iter()).trim_start(),
                join(m.i.iter()),
                pairs(&m.alpha),
                pairs(&m.beta),
                c.re,
                c.im
            )
            .unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |w: &str| Error::Parse(w.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("series v1") {
            return Err(bad("missing header"));
        }
        let sites_line = lines.next().ok_or_else(|| bad("missing sites"))?;
        let sites: Vec<i64> = sites_line
            .strip_prefix("sites")
            .ok_or_else(|| bad("sites"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(t)))
            .collect::<Result<_>>()?;
        let cutoff: i64 = lines
            .next()
            .and_then(|l| l.strip_prefix("cutoff "))
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| bad("cutoff"))?;
        let b: Vec<u32> = lines
            .next()
            .and_then(|l| l.strip_prefix("budget "))
            .map(|t| t.split_whitespace().filter_map(|x| x.parse().ok()).collect())
            .ok_or_else(|| bad("budget"))?;
        if b.len() != 2 {
            return Err(bad("budget"));
        }
        let ss = if sites.is_empty() { SiteSet::fourier(cutoff)? } else { SiteSet::new(&sites, cutoff)? };
        let n = ss.n();
        let mut out = Self::new(Arc::new(ss), TruncationBudget::new(b[0], b[1]));
        for line in lines {
            let f: Vec<&str> = line.split('|').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            let ints = |t: &str| -> Result<Vec<i64>> {
                t.split_whitespace().map(|x| x.parse::<i64>().map_err(|_| bad(x))).collect()
            };
            let pairs = |t: &str| -> Result<Vec<(i32, u32)>> {
                t.split_whitespace()
                    .map(|x| {
                        let (a, e) = x.split_once(':').ok_or_else(|| bad(x))?;
                        Ok((a.parse().map_err(|_| bad(x))?, e.parse().map_err(|_| bad(x))?))
                    })
                    .collect()
            };
            let k: Vec<i32> = ints(f[0])?.into_iter().map(|v| v as i32).collect();
            let i: Vec<u32> = ints(f[1])?.into_iter().map(|v| v as u32).collect();
            if k.len() != n || i.len() != n {
                return Err(bad(line));
            }
            let c: Vec<T> = f[4]
                .split_whitespace()
                .map(|x| x.parse::<T>().map_err(|_| bad(x)))
                .collect::<Result<_>>()?;
            if c.len() != 2 {
                return Err(bad(line));
            }
            let m = MultiIndex::new(&k, &i, &pairs(f[2])?, &pairs(f[3])?);
            out.terms.insert(m, C::new(c[0], c[1]));
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = b"DKS1".to_vec();
        v.push(T::TAG);
        let put_u32 = |v: &mut Vec<u8>, x: u32| v.extend_from_slice(&x.to_le_bytes());
        let put_i32 = |v: &mut Vec<u8>, x: i32| v.extend_from_slice(&x.to_le_bytes());
        put_u32(&mut v, self.sites.n() as u32);
        for j in self.sites.sites() {
            put_i32(&mut v, *j);
        }
        put_i32(&mut v, self.sites.mode_cutoff());
        put_u32(&mut v, self.budget.degree_max);
        put_u32(&mut v, self.budget.fourier_max);
        v.extend_from_slice(&(self.terms.len() as u64).to_le_bytes());
        for (m, c) in &self.terms {
            m.k.iter().for_each(|x| put_i32(&mut v, *x));
            m.i.iter().for_each(|x| put_u32(&mut v, *x));
            for p in [&m.alpha, &m.beta] {
                put_u32(&mut v, p.len() as u32);
                for (j, e) in p.iter() {
                    put_i32(&mut v, *j);
                    put_u32(&mut v, *e);
                }
            }
            v.extend_from_slice(&c.re.to_bits64().to_le_bytes());
            v.extend_from_slice(&c.im.to_bits64().to_le_bytes());
        }
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4)? != b"DKS1" {
            return Err(Error::Parse("bad magic".into()));
        }
        if r.take(1)?[0] != T::TAG {
            return Err(Error::Parse("scalar type mismatch".into()));
        }
        let n = r.u32()? as usize;
        let sites: Vec<i64> = (0..n).map(|_| r.i32().map(i64::from)).collect::<Result<_>>()?;
        let cutoff = r.i32()? as i64;
        let budget = TruncationBudget::new(r.u32()?, r.u32()?);
        let ss = if n == 0 { SiteSet::fourier(cutoff)? } else { SiteSet::new(&sites, cutoff)? };
        let mut out = Self::new(Arc::new(ss), budget);
        let count = r.u64()?;
        for _ in 0..count {
            let k: Vec<i32> = (0..n).map(|_| r.i32()).collect::<Result<_>>()?;
            let i: Vec<u32> = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
            let mut ab = [Powers::new(), Powers::new()];
            for p in ab.iter_mut() {
                let len = r.u32()?;
                for _ in 0..len {
                    p.push((r.i32()?, r.u32()?));
                }
            }
            let [alpha, beta] = ab;
            let re = T::from_bits64(r.u64()?);
            let im = T::from_bits64(r.u64()?);
            out.terms.insert(MultiIndex { k: k.into(), i: i.into(), alpha, beta }, C::new(re, im));
        }
        if r.at != bytes.len() {
            return Err(Error::Parse("trailing bytes".into()));
        }
        Ok(out)
    }
}

fn join<D: std::fmt::Display>(it: impl Iterator<Item = D>) -> String {
    it.map(|x| format!(" {x}")).collect()
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.b.get(self.at..self.at + n).ok_or_else(|| Error::Parse("truncated dump".into()))?;
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Constant, y_b, or z_j z̄_j.
pub(crate) fn is_normal_shape(m: &MultiIndex) -> bool {
    match (m.y_degree(), m.z_degree()) {
        (0, 0) | (1, 0) => true,
        (0, 2) => m.alpha.len() == 1 && m.beta.len() == 1 && m.alpha[0] == m.beta[0],
        _ => false,
    }
}

/// Inverted index of a series by the variables it can pair with.
struct BracketIndex<'a, T: Real> {
    terms: Vec<(&'a MultiIndex, &'a C<T>)>,
    with_k: Vec<Vec<usize>>,
    with_y: Vec<Vec<usize>>,
    with_alpha: HashMap<i32, Vec<usize>>,
    with_beta: HashMap<i32, Vec<usize>>,
}

impl<'a, T: Real> BracketIndex<'a, T> {
    fn new(f: &'a FormalSeries<T>) -> Self {
        let n = f.sites.n();
        let terms: Vec<_> = f.terms.iter().collect();
        let mut s = Self {
            with_k: vec![Vec::new(); n],
            with_y: vec![Vec::new(); n],
            with_alpha: HashMap::new(),
            with_beta: HashMap::new(),
            terms: Vec::new(),
        };
        for (t, (m, _)) in terms.iter().enumerate() {
            for b in 0..n {
                if m.k[b] != 0 {
                    s.with_k[b].push(t);
                }
                if m.i[b] > 0 {
                    s.with_y[b].push(t);
                }
            }
            for (j, _) in &m.alpha {
                s.with_alpha.entry(*j).or_default().push(t);
            }
            for (j, _) in &m.beta {
                s.with_beta.entry(*j).or_default().push(t);
            }
        }
        s.terms = terms;
        s
    }

    fn candidates(&self, a: &MultiIndex, tag: usize, stamp: &mut [usize], out: &mut Vec<usize>) {
        let mut push = |list: Option<&Vec<usize>>| {
            for &t in list.into_iter().flatten() {
                if stamp[t] != tag {
                    stamp[t] = tag;
                    out.push(t);
                }
            }
        };
        for b in 0..a.k.len() {
            if a.k[b] != 0 {
                push(Some(&self.with_y[b]));
            }
            if a.i[b] > 0 {
                push(Some(&self.with_k[b]));
            }
        }
        for (j, _) in &a.alpha {
            push(self.with_beta.get(j));
        }
        for (j, _) in &a.beta {
            push(self.with_alpha.get(j));
        }
    }
}

fn bracket_pair<T: Real>(
    a: &MultiIndex,
    ca: C<T>,
    b: &MultiIndex,
    cb: C<T>,
    site_signs: &[i32],
    budget: &TruncationBudget,
    acc: &mut HashMap<MultiIndex, C<T>>,
) {
    let k: SmallVec<[i32; 4]> = a.k.iter().zip(&b.k).map(|(x, y)| x + y).collect();
    if k.iter().map(|x| x.unsigned_abs()).sum::<u32>() > budget.fourier_max {
        return;
    }
    let cc = ca * cb;
    let i_unit = C::new(T::zero(), T::one());
    // x–y part: σ_b i (k_b i'_b − i_b k'_b) y^{i+i'−e_b}
    for (bix, &sb) in site_signs.iter().enumerate() {
        let w = a.k[bix] as i64 * b.i[bix] as i64 - a.i[bix] as i64 * b.k[bix] as i64;
        if w == 0 {
            continue;
        }
        let mut m = MultiIndex {
            k: k.clone(),
            i: a.i.iter().zip(&b.i).map(|(x, y)| x + y).collect(),
            alpha: crate::index::merge(&a.alpha, &b.alpha),
            beta: crate::index::merge(&a.beta, &b.beta),
        };
        m.i[bix] -= 1;
        let f = T::from_i64(sb as i64 * w).unwrap();
        let e = acc.entry(m).or_insert_with(C::zero);
        *e = *e + cc * i_unit * f;
    }
    // z part: −iσ_j (α_j β'_j − β_j α'_j) with z_j, z̄_j lowered
    let mut modes: SmallVec<[i32; 8]> = SmallVec::new();
    for (j, _) in a.alpha.iter().chain(a.beta.iter()) {
        if !modes.contains(j) {
            modes.push(*j);
        }
    }
    for j in modes {
        let w = a.alpha_of(j) as i64 * b.beta_of(j) as i64 - a.beta_of(j) as i64 * b.alpha_of(j) as i64;
        if w == 0 {
            continue;
        }
        let alpha = crate::index::merge(&a.alpha, &b.alpha);
        let beta = crate::index::merge(&a.beta, &b.beta);
        let m = MultiIndex {
            k: k.clone(),
            i: a.i.iter().zip(&b.i).map(|(x, y)| x + y).collect(),
            alpha: lower(&alpha, j).expect("paired mode").0,
            beta: lower(&beta, j).expect("paired mode").0,
        };
        let f = T::from_i64(-(sgn(j) as i64) * w).unwrap();
        let e = acc.entry(m).or_insert_with(C::zero);
        *e = *e + cc * i_unit * f;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q_sites(cut: i64) -> Arc<SiteSet> {
        Arc::new(SiteSet::fourier(cut).unwrap())
    }

    fn q_mono(a: &[(i32, u32)], b: &[(i32, u32)]) -> MultiIndex {
        MultiIndex::new(&[], &[], a, b)
    }

    #[test]
    fn canonical_pairs() {
        let ss = Arc::new(SiteSet::new(&[-1, 2], 6).unwrap());
        let bud = TruncationBudget::new(6, 10);
        let ex = FormalSeries::<f64>::monomial(ss.clone(), bud, MultiIndex::new(&[1, 0], &[0, 0], &[], &[]), C::one());
        let y = FormalSeries::monomial(ss.clone(), bud, MultiIndex::new(&[0, 0], &[1, 0], &[], &[]), C::one());
        let br = ex.bracket(&y).unwrap();
        // {e^{ix_1}, y_1} = σ_{j_1} i e^{ix_1}, σ_{j_1} = −1
        assert_eq!(br.coeff(&MultiIndex::new(&[1, 0], &[0, 0], &[], &[])), C::new(0.0, -1.0));
        let z = FormalSeries::monomial(ss.clone(), bud, MultiIndex::new(&[0, 0], &[0, 0], &[(3, 1)], &[]), C::one());
        let zb = FormalSeries::monomial(ss.clone(), bud, MultiIndex::new(&[0, 0], &[0, 0], &[], &[(3, 1)]), C::one());
        assert_eq!(z.bracket(&zb).unwrap().coeff(&MultiIndex::zero(2)), C::new(0.0, -1.0));
        let z = FormalSeries::monomial(ss.clone(), bud, MultiIndex::new(&[0, 0], &[0, 0], &[(-3, 1)], &[]), C::one());
        let zb = FormalSeries::monomial(ss, bud, MultiIndex::new(&[0, 0], &[0, 0], &[], &[(-3, 1)]), C::one());
        assert_eq!(z.bracket(&zb).unwrap().coeff(&MultiIndex::zero(2)), C::new(0.0, 1.0));
    }

    #[test]
    fn lambda_bracket_on_quartic() {
        let ss = q_sites(4);
        let bud = TruncationBudget::new(6, 0);
        let mut lam = FormalSeries::<f64>::new(ss.clone(), bud);
        for &j in ss.normal_modes() {
            lam.add_term(q_mono(&[(j, 1)], &[(j, 1)]), C::new((sgn(j) * j * j) as f64, 0.0));
        }
        let (j, k, l, m) = (1, 2, 3, 2);
        let mono = q_mono(&[(j, 1), (l, 1)], &[(k, 1), (m, 1)]);
        let f = FormalSeries::monomial(ss, bud, mono.clone(), C::one());
        let br = lam.bracket(&f).unwrap();
        let d = (k * k + m * m - j * j - l * l) as f64;
        assert_eq!(br.len(), 1);
        assert!((br.coeff(&mono) - C::new(0.0, -d)).norm() < 1e-14);
    }

    #[test]
    fn text_and_binary_roundtrip() {
        let ss = Arc::new(SiteSet::new(&[-1, 2], 5).unwrap());
        let bud = TruncationBudget::new(4, 8);
        let mut s = FormalSeries::<f64>::new(ss, bud);
        s.add_term(MultiIndex::new(&[1, -2], &[1, 0], &[(3, 1)], &[(-4, 1)]), C::new(0.1, -1.0 / 3.0));
        s.add_term(MultiIndex::zero(2), C::new(1e-250, 7.0));
        let t = FormalSeries::<f64>::from_text(&s.to_text()).unwrap();
        assert_eq!(t, s);
        let b = FormalSeries::<f64>::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(b, s);
        assert!(FormalSeries::<f32>::from_bytes(&s.to_bytes()).is_err());
    }

    #[test]
    fn taylor_shapes() {
        let ss = Arc::new(SiteSet::new(&[-1, 2], 5).unwrap());
        let bud = TruncationBudget::new(4, 8);
        let mut p = FormalSeries::<f64>::new(ss, bud);
        let y2 = MultiIndex::new(&[0, 0], &[2, 0], &[], &[]);
        let diag = MultiIndex::new(&[0, 0], &[0, 0], &[(3, 1)], &[(3, 1)]);
        let off = MultiIndex::new(&[1, 0], &[0, 0], &[(3, 1)], &[(4, 1)]);
        for m in [&y2, &diag, &off] {
            p.add_term(m.clone(), C::one());
        }
        let (r, nf) = p.taylor_truncate_r();
        assert_eq!(r.coeff(&y2), C::zero());
        assert_eq!(r.coeff(&diag), C::one());
        assert_eq!(nf.coeff(&diag), C::one());
        assert_eq!(r.coeff(&off), C::one());
        assert_eq!(nf.coeff(&off), C::zero());
    }

    #[test]
    fn momentum_check() {
        let ss = Arc::new(SiteSet::new(&[-1, 2], 5).unwrap());
        let bud = TruncationBudget::new(4, 8);
        let m = MultiIndex::new(&[1, 0], &[0, 0], &[(3, 1)], &[(4, 1)]);
        let s = FormalSeries::<f64>::monomial(ss.clone(), bud, m, C::one());
        assert!(!s.is_momentum_conserving());
        assert!(FormalSeries::<f64>::new(ss, bud).is_momentum_conserving());
    }

    #[test]
    fn lie_identity_cases() {
        let ss = Arc::new(SiteSet::new(&[-1, 2], 5).unwrap());
        let bud = TruncationBudget::new(4, 8);
        let h = FormalSeries::<f64>::monomial(ss.clone(), bud, MultiIndex::new(&[0, 0], &[1, 1], &[], &[]), C::one());
        let f = FormalSeries::monomial(ss.clone(), bud, MultiIndex::new(&[0, 0], &[0, 1], &[], &[]), C::new(2.0, 0.0));
        let (g, _) = h.lie_transform(&f, LieOptions::default()).unwrap();
        assert_eq!(g, h);
        let zero = FormalSeries::new(ss, bud);
        let (g, rep) = h.lie_transform(&zero, LieOptions::default()).unwrap();
        assert_eq!(g, h);
        assert!(rep.converged);
    }
}
