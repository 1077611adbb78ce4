//! Index sets, signs, multi-indices and momentum bookkeeping.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use std::fmt;

/// σ_j: +1 for positive modes, −1 for negative ones.
pub fn sign(j: i64) -> Result<i64> {
    match j.signum() {
        0 => Err(Error::ZeroIndex),
        s => Ok(s),
    }
}

#[inline]
pub(crate) fn sgn(j: i32) -> i32 {
    debug_assert!(j != 0);
    if j > 0 {
        1
    } else {
        -1
    }
}

/// The tangential sites J together with the retained normal modes Z_*.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSet {
    n: usize,
    sites: Vec<i32>,
    c_j: i32,
    mode_cutoff: i32,
    normal: Vec<i32>,
}

/// Outcome of the admissibility test on J.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Admissibility {
    Admissible,
    ViolatesDivisibility,
    ViolatesSignCondition,
}

impl SiteSet {
    /// Builds J ⊂ Z∖{0} (any order; stored increasing) with modes |j| ≤ `mode_cutoff`.
    pub fn new(sites: &[i64], mode_cutoff: i64) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::InvalidSites("J is empty".into()));
        }
        let mut s: Vec<i32> = Vec::with_capacity(sites.len());
        for &j in sites {
            if j == 0 {
                return Err(Error::InvalidSites("site 0".into()));
            }
            let j = i32::try_from(j).map_err(|_| Error::InvalidSites(format!("site {j} too large")))?;
            s.push(j);
        }
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidSites("repeated site".into()));
        }
        let cutoff = i32::try_from(mode_cutoff)
            .ok()
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::InvalidSites(format!("mode cutoff {mode_cutoff}")))?;
        let c_j = s.iter().map(|j| j.abs()).max().unwrap();
        let normal = (-cutoff..=cutoff).filter(|j| *j != 0 && !s.contains(j)).collect();
        Ok(Self { n: s.len(), sites: s, c_j, mode_cutoff: cutoff, normal })
    }

    /// The J = ∅ convention used for the complex q-coordinates: every nonzero
    /// mode up to the cutoff is "normal" and there are no angles.
    pub fn fourier(mode_cutoff: i64) -> Result<Self> {
        let cutoff = i32::try_from(mode_cutoff)
            .ok()
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::InvalidSites(format!("mode cutoff {mode_cutoff}")))?;
        let normal = (-cutoff..=cutoff).filter(|j| *j != 0).collect();
        Ok(Self { n: 0, sites: vec![], c_j: 0, mode_cutoff: cutoff, normal })
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn sites(&self) -> &[i32] {
        &self.sites
    }
    pub fn c_j(&self) -> i32 {
        self.c_j
    }
    pub fn mode_cutoff(&self) -> i32 {
        self.mode_cutoff
    }
    /// Z_* = {0<|j|≤J_max} ∖ J, increasing.
    pub fn normal_modes(&self) -> &[i32] {
        &self.normal
    }
    pub fn is_fourier(&self) -> bool {
        self.n == 0
    }
    pub fn is_normal(&self, j: i32) -> bool {
        j != 0 && j.abs() <= self.mode_cutoff && !self.sites.contains(&j)
    }
    pub fn site_sign(&self, b: usize) -> i32 {
        sgn(self.sites[b])
    }
    pub fn sum_abs(&self) -> i64 {
        self.sites.iter().map(|j| j.abs() as i64).sum()
    }

    /// Theorem-1.1 conditions: (2n−1) ∤ Σ j_b, and j_1 j_2 < 0 when n = 2.
    pub fn admissible(&self) -> Result<Admissibility> {
        admissible(&self.sites.iter().map(|&j| j as i64).collect::<Vec<_>>())
    }
}

/// Admissibility of J, independent of any mode cutoff.
pub fn admissible(sites: &[i64]) -> Result<Admissibility> {
    let n = sites.len();
    if n < 2 {
        return Err(Error::InvalidSites(format!("n = {n}, need n ≥ 2")));
    }
    let mut s = sites.to_vec();
    s.sort_unstable();
    if s.iter().any(|&j| j == 0) || s.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidSites("sites must be nonzero and distinct".into()));
    }
    if n == 2 && s[0] * s[1] > 0 {
        return Ok(Admissibility::ViolatesSignCondition);
    }
    let sum: i64 = s.iter().sum();
    if sum.rem_euclid(2 * n as i64 - 1) == 0 {
        return Ok(Admissibility::ViolatesDivisibility);
    }
    Ok(Admissibility::Admissible)
}

/// Sparse exponent list: (mode, power) pairs, increasing in mode, powers > 0.
pub type Powers = SmallVec<[(i32, u32); 6]>;

/// (k, i, α, β): e^{ik·x} y^i z^α z̄^β.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct MultiIndex {
    pub k: SmallVec<[i32; 4]>,
    pub i: SmallVec<[u32; 4]>,
    pub alpha: Powers,
    pub beta: Powers,
}

impl MultiIndex {
    pub fn zero(n: usize) -> Self {
        Self { k: SmallVec::from_elem(0, n), i: SmallVec::from_elem(0, n), alpha: Powers::new(), beta: Powers::new() }
    }

    pub fn new(k: &[i32], i: &[u32], alpha: &[(i32, u32)], beta: &[(i32, u32)]) -> Self {
        assert_eq!(k.len(), i.len(), "k and i must have length n");
        Self { k: k.into(), i: i.into(), alpha: normalize(alpha), beta: normalize(beta) }
    }

    pub fn n(&self) -> usize {
        self.k.len()
    }

    /// ℓ1 length of the Fourier index.
    pub fn k_norm(&self) -> u32 {
        self.k.iter().map(|x| x.unsigned_abs()).sum()
    }

    pub fn y_degree(&self) -> u32 {
        self.i.iter().sum()
    }

    pub fn z_degree(&self) -> u32 {
        self.alpha.iter().chain(self.beta.iter()).map(|p| p.1).sum()
    }

    /// 2|i| + |α| + |β|.
    pub fn weighted_degree(&self) -> u32 {
        2 * self.y_degree() + self.z_degree()
    }

    pub fn alpha_of(&self, j: i32) -> u32 {
        power_of(&self.alpha, j)
    }

    pub fn beta_of(&self, j: i32) -> u32 {
        power_of(&self.beta, j)
    }

    /// Exponent sum (index of a product of monomials).
    pub fn mul(&self, o: &Self) -> Self {
        Self {
            k: self.k.iter().zip(&o.k).map(|(a, b)| a + b).collect(),
            i: self.i.iter().zip(&o.i).map(|(a, b)| a + b).collect(),
            alpha: merge(&self.alpha, &o.alpha),
            beta: merge(&self.beta, &o.beta),
        }
    }

    pub fn max_mode(&self) -> i32 {
        self.alpha.iter().chain(self.beta.iter()).map(|p| p.0.abs()).max().unwrap_or(0)
    }

    /// l = β − α as a sparse signed map.
    pub fn l_vector(&self) -> SmallVec<[(i32, i32); 4]> {
        let mut out: SmallVec<[(i32, i32); 4]> = SmallVec::new();
        let (mut a, mut b) = (self.alpha.iter().peekable(), self.beta.iter().peekable());
        loop {
            match (a.peek(), b.peek()) {
                (None, None) => break,
                (Some(&&(ja, pa)), Some(&&(jb, pb))) if ja == jb => {
                    if pb != pa {
                        out.push((ja, pb as i32 - pa as i32));
                    }
                    a.next();
                    b.next();
                }
                (Some(&&(ja, pa)), Some(&&(jb, _))) if ja < jb => {
                    out.push((ja, -(pa as i32)));
                    a.next();
                }
                (Some(&&(ja, pa)), None) => {
                    out.push((ja, -(pa as i32)));
                    a.next();
                }
                (_, Some(&&(jb, pb))) => {
                    out.push((jb, pb as i32));
                    b.next();
                }
            }
        }
        out
    }
}

fn power_of(p: &Powers, j: i32) -> u32 {
    p.binary_search_by_key(&j, |e| e.0).map(|ix| p[ix].1).unwrap_or(0)
}

pub(crate) fn normalize(p: &[(i32, u32)]) -> Powers {
    let mut v: Powers = p.iter().copied().filter(|e| e.1 > 0).collect();
    v.sort_unstable_by_key(|e| e.0);
    let mut out = Powers::new();
    for (j, e) in v {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += e,
            _ => out.push((j, e)),
        }
    }
    out
}

pub(crate) fn merge(a: &Powers, b: &Powers) -> Powers {
    if b.is_empty() {
        return a.clone();
    }
    if a.is_empty() {
        return b.clone();
    }
    let mut out = Powers::with_capacity(a.len() + b.len());
    let (mut x, mut y) = (0, 0);
    while x < a.len() && y < b.len() {
        match a[x].0.cmp(&b[y].0) {
            std::cmp::Ordering::Less => {
                out.push(a[x]);
                x += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[y]);
                y += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push((a[x].0, a[x].1 + b[y].1));
                x += 1;
                y += 1;
            }
        }
    }
    out.extend_from_slice(&a[x..]);
    out.extend_from_slice(&b[y..]);
    out
}

/// Lowers the power of mode j by one; `None` if absent.
pub(crate) fn lower(p: &Powers, j: i32) -> Option<(Powers, u32)> {
    let ix = p.binary_search_by_key(&j, |e| e.0).ok()?;
    let e = p[ix].1;
    let mut out = p.clone();
    if e == 1 {
        out.remove(ix);
    } else {
        out[ix].1 -= 1;
    }
    Some((out, e))
}

/// Σ k_b j_b + Σ (α_j − β_j) j, checked against overflow.
pub fn momentum_scalar(m: &MultiIndex, sites: &SiteSet) -> i64 {
    let mut acc: i64 = 0;
    for (kb, jb) in m.k.iter().zip(sites.sites()) {
        acc = acc.checked_add(*kb as i64 * *jb as i64).expect("momentum overflow");
    }
    for (j, e) in &m.alpha {
        acc = acc.checked_add(*j as i64 * *e as i64).expect("momentum overflow");
    }
    for (j, e) in &m.beta {
        acc = acc.checked_sub(*j as i64 * *e as i64).expect("momentum overflow");
    }
    acc
}

/// Vector-field component labels x̃_b, ỹ_b, z̃_j, z̄̃_j.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentLabel {
    X(usize),
    Y(usize),
    Z(i32),
    Zbar(i32),
}

impl fmt::Display for ComponentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::X(b) => write!(f, "x{b}"),
            Self::Y(b) => write!(f, "y{b}"),
            Self::Z(j) => write!(f, "z{j}"),
            Self::Zbar(j) => write!(f, "zb{j}"),
        }
    }
}

/// π(k,α,β;v): scalar momentum shifted by ∓j on the z̃_j / z̄̃_j components.
pub fn momentum_vf(m: &MultiIndex, component: ComponentLabel, sites: &SiteSet) -> i64 {
    let p = momentum_scalar(m, sites);
    match component {
        ComponentLabel::X(_) | ComponentLabel::Y(_) => p,
        ComponentLabel::Z(j) => p - j as i64,
        ComponentLabel::Zbar(j) => p + j as i64,
    }
}
