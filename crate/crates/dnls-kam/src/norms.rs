//! Weighted phase-space norms, vector fields and the momentum majorant norm.

use crate::error::{Error, Result};
use crate::index::{momentum_vf, MultiIndex};
use crate::series::{FormalSeries, TruncationBudget};
use crate::{ComponentLabel, Real, SiteSet, C};
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Weights of the (s,r)-norm and the majorant norm.
///
/// `p` is the regularity of the domain ball, `q` the regularity used when
/// measuring the image. `domain` optionally decouples the domain D(s',r')
/// over which monomials are bounded from the weights (s,r) of the norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormWeights {
    pub s: f64,
    pub r: f64,
    pub p: f64,
    pub q: f64,
    pub a_exp: f64,
    pub a_mom: f64,
    pub domain: Option<(f64, f64)>,
}

impl NormWeights {
    pub fn new(s: f64, r: f64, p: f64, q: f64, a_exp: f64, a_mom: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0 && r > 0.0 && r < 1.0) {
            return Err(Error::Config(format!("need 0<s,r<1, got s={s}, r={r}")));
        }
        if a_exp < 0.0 || a_mom < 0.0 {
            return Err(Error::Config("mode and momentum weights must be ≥ 0".into()));
        }
        Ok(Self { s, r, p, q, a_exp, a_mom, domain: None })
    }

    /// Weights for coordinates already rescaled by the radius (y = r²Y,
    /// z = rZ, H ↦ H/r²), where the ball has radius one.
    pub fn unit_radius(s: f64, p: f64, q: f64, a_exp: f64, a_mom: f64) -> Result<Self> {
        let mut w = Self::new(s, 0.5, p, q, a_exp, a_mom)?;
        w.r = 1.0;
        Ok(w)
    }

    /// Same weights, monomials bounded over D(s', r').
    pub fn on_domain(mut self, s: f64, r: f64) -> Self {
        self.domain = Some((s, r));
        self
    }

    fn dom(&self) -> (f64, f64) {
        self.domain.unwrap_or((self.s, self.r))
    }

    /// e^{a|j|}|j|^e.
    pub fn mode_weight(&self, j: i32, e: f64) -> f64 {
        (self.a_exp * j.abs() as f64).exp() * (j.abs() as f64).powf(e)
    }

    /// ‖z‖_{a,e}.
    pub fn seq_norm(&self, z: &BTreeMap<i32, f64>, e: f64) -> f64 {
        z.iter().map(|(j, v)| (self.mode_weight(*j, e) * v).powi(2)).sum::<f64>().sqrt()
    }
}

/// A point of the truncated phase space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<C<f64>>,
    pub y: Vec<C<f64>>,
    pub z: BTreeMap<i32, C<f64>>,
    pub zbar: BTreeMap<i32, C<f64>>,
}

/// |x|/s + |y|_1/r² + ‖z‖_{a,p}/r + ‖z̄‖_{a,p}/r.
pub fn weighted_phase_norm(v: &PhasePoint, w: &NormWeights) -> f64 {
    let x = v.x.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let y: f64 = v.y.iter().map(|c| c.norm()).sum();
    let abs = |m: &BTreeMap<i32, C<f64>>| m.iter().map(|(j, c)| (*j, c.norm())).collect::<BTreeMap<_, _>>();
    x / w.s + y / (w.r * w.r) + w.seq_norm(&abs(&v.z), w.p) / w.r + w.seq_norm(&abs(&v.zbar), w.p) / w.r
}

/// Component-indexed vector field.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T: Real> {
    sites: Arc<SiteSet>,
    budget: TruncationBudget,
    components: BTreeMap<ComponentLabel, FormalSeries<T>>,
}

impl<T: Real> VectorField<T> {
    pub fn zero(sites: Arc<SiteSet>, budget: TruncationBudget) -> Self {
        Self { sites, budget, components: BTreeMap::new() }
    }

    pub fn sites(&self) -> &Arc<SiteSet> {
        &self.sites
    }

    pub fn budget(&self) -> TruncationBudget {
        self.budget
    }

    pub fn set(&mut self, v: ComponentLabel, s: FormalSeries<T>) {
        if s.is_empty() {
            self.components.remove(&v);
        } else {
            self.components.insert(v, s);
        }
    }

    pub fn get(&self, v: ComponentLabel) -> Option<&FormalSeries<T>> {
        self.components.get(&v)
    }

    pub fn components(&self) -> impl Iterator<Item = (&ComponentLabel, &FormalSeries<T>)> {
        self.components.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.components.values().all(|s| s.is_empty())
    }

    fn empty(&self) -> FormalSeries<T> {
        FormalSeries::new(self.sites.clone(), self.budget)
    }

    pub fn combine(&self, a: C<T>, o: &Self, b: C<T>) -> Result<Self> {
        let mut out = Self::zero(self.sites.clone(), self.budget);
        let labels: std::collections::BTreeSet<_> = self.components.keys().chain(o.components.keys()).copied().collect();
        for v in labels {
            let mut s = self.empty();
            if let Some(x) = self.get(v) {
                s.axpy(a, x)?;
            }
            if let Some(x) = o.get(v) {
                s.axpy(b, x)?;
            }
            out.set(v, s);
        }
        Ok(out)
    }

    pub fn sub(&self, o: &Self) -> Result<Self> {
        self.combine(C::one(), o, -C::<T>::one())
    }

    pub fn scale(&self, c: C<T>) -> Self {
        let mut out = Self::zero(self.sites.clone(), self.budget);
        for (v, s) in &self.components {
            out.set(*v, s.scale(c));
        }
        out
    }

    /// Directional derivative Σ_u X^u ∂_u S.
    pub fn apply(&self, s: &FormalSeries<T>) -> Result<FormalSeries<T>> {
        let mut out = self.empty();
        for (u, xu) in &self.components {
            let d = partial(s, *u);
            if !d.is_empty() {
                out.axpy(C::one(), &xu.mul(&d)?)?;
            }
        }
        Ok(out)
    }

    /// [X,Y]^v = X(Y^v) − Y(X^v).
    pub fn commutator(&self, o: &Self) -> Result<Self> {
        let labels: std::collections::BTreeSet<_> = self.components.keys().chain(o.components.keys()).copied().collect();
        let mut out = Self::zero(self.sites.clone(), self.budget);
        let zero = self.empty();
        for v in labels {
            let yv = o.get(v).unwrap_or(&zero);
            let xv = self.get(v).unwrap_or(&zero);
            out.set(v, self.apply(yv)?.sub(&o.apply(xv)?)?);
        }
        Ok(out)
    }
}

/// ∂_u S for a component label u.
pub fn partial<T: Real>(s: &FormalSeries<T>, u: ComponentLabel) -> FormalSeries<T> {
    match u {
        ComponentLabel::X(b) => s.d_x(b),
        ComponentLabel::Y(b) => s.d_y(b),
        ComponentLabel::Z(j) => s.d_z(j),
        ComponentLabel::Zbar(j) => s.d_zbar(j),
    }
}

/// X_P = (σ_{j_b}P_{y_b}, −σ_{j_b}P_{x_b}, −iσ_jP_{z̄_j}, iσ_jP_{z_j}).
pub fn hamiltonian_vector_field<T: Real>(h: &FormalSeries<T>) -> VectorField<T> {
    let sites = h.sites().clone();
    let mut out = VectorField::zero(sites.clone(), h.budget());
    let re = |x: i32| C::new(T::from_i32(x).unwrap(), T::zero());
    let im = |x: i32| C::new(T::zero(), T::from_i32(x).unwrap());
    for b in 0..sites.n() {
        let sb = sites.site_sign(b);
        out.set(ComponentLabel::X(b), h.d_y(b).scale(re(sb)));
        out.set(ComponentLabel::Y(b), h.d_x(b).scale(re(-sb)));
    }
    let mut modes: Vec<i32> = Vec::new();
    for (m, _) in h.iter() {
        modes.extend(m.alpha.iter().chain(m.beta.iter()).map(|p| p.0));
    }
    modes.sort_unstable();
    modes.dedup();
    for j in modes {
        let sj = if j > 0 { 1 } else { -1 };
        out.set(ComponentLabel::Z(j), h.d_zbar(j).scale(im(-sj)));
        out.set(ComponentLabel::Zbar(j), h.d_z(j).scale(im(sj)));
    }
    out
}

/// sup over D(r) of one monomial: r^{2|i|}Π(r e^{−a|j|}|j|^{−p})^{α_j+β_j}.
fn corner<T: Real>(m: &MultiIndex, w: &NormWeights) -> T {
    let (_, r) = w.dom();
    let mut v = r.powi(2 * m.y_degree() as i32);
    for (j, e) in m.alpha.iter().chain(m.beta.iter()) {
        v *= (r / w.mode_weight(*j, w.p)).powi(*e as i32);
    }
    T::lit(v)
}

fn component_bound<T: Real>(s: &FormalSeries<T>, v: ComponentLabel, w: &NormWeights) -> T {
    let (sd, _) = w.dom();
    let mut acc = T::zero();
    for (m, c) in s.iter() {
        let pi = momentum_vf(m, v, s.sites()).unsigned_abs() as f64;
        let fac = (w.a_mom * pi + sd * m.k_norm() as f64).exp();
        acc = acc + c.norm() * T::lit(fac) * corner::<T>(m, w);
    }
    acc
}

/// Per-term corner bound of the momentum majorant norm ‖X‖_{s,r,q,𝐚}.
pub fn majorant_norm<T: Real>(x: &VectorField<T>, w: &NormWeights) -> T {
    let mut xs = T::zero();
    let mut ys = T::zero();
    let mut zs = Vec::new();
    let mut zbs = Vec::new();
    for (v, s) in x.components() {
        let b = component_bound(s, *v, w);
        match v {
            ComponentLabel::X(_) => xs = xs.max(b),
            ComponentLabel::Y(_) => ys = ys + b,
            ComponentLabel::Z(j) => zs.push(b * T::lit(w.mode_weight(*j, w.q))),
            ComponentLabel::Zbar(j) => zbs.push(b * T::lit(w.mode_weight(*j, w.q))),
        }
    }
    let (s, r) = (T::lit(w.s), T::lit(w.r));
    xs / s + ys / (r * r) + l2(&zs) / r + l2(&zbs) / r
}

/// ℓ2 norm without squaring tiny or huge entries directly.
fn l2<T: Real>(v: &[T]) -> T {
    let m = v.iter().fold(T::zero(), |a, b| a.max(*b));
    if m == T::zero() || !m.is_finite() {
        return m;
    }
    m * v.iter().fold(T::zero(), |a, b| a + (*b / m).powi(2)).sqrt()
}

/// Finite sample of parameters together with the pairs used for difference quotients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    pub points: Vec<Vec<f64>>,
    pub pairs: Vec<(usize, usize)>,
    /// Per-axis bounds of the box the grid was built on.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ParameterGrid {
    /// Cell-centre tensor grid on Π[lo_b, hi_b] with `counts[b]` cells per axis;
    /// pairs join each point to its axis and diagonal successors.
    pub fn boxed(lo: &[f64], hi: &[f64], counts: &[usize]) -> Result<Self> {
        let n = lo.len();
        if n == 0 || hi.len() != n || counts.len() != n || counts.iter().any(|c| *c == 0) {
            return Err(Error::Config("grid bounds and counts must have equal positive length".into()));
        }
        if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
            return Err(Error::EmptyRange("grid box".into()));
        }
        let total: usize = counts.iter().product();
        let mut points = Vec::with_capacity(total);
        let mut multi = vec![0usize; n];
        for _ in 0..total {
            points.push((0..n).map(|b| lo[b] + (hi[b] - lo[b]) * (multi[b] as f64 + 0.5) / counts[b] as f64).collect());
            for b in 0..n {
                multi[b] += 1;
                if multi[b] < counts[b] {
                    break;
                }
                multi[b] = 0;
            }
        }
        let flat = |m: &[usize]| m.iter().rev().zip(counts.iter().rev()).fold(0usize, |acc, (x, c)| acc * c + x);
        let mut pairs = Vec::new();
        let mut multi = vec![0usize; n];
        for p in 0..total {
            for b in 0..n {
                if multi[b] + 1 < counts[b] {
                    let mut m = multi.clone();
                    m[b] += 1;
                    pairs.push((p, flat(&m)));
                }
            }
            if n > 1 && multi.iter().zip(counts).all(|(x, c)| x + 1 < *c) {
                let m: Vec<usize> = multi.iter().map(|x| x + 1).collect();
                pairs.push((p, flat(&m)));
            }
            for b in 0..n {
                multi[b] += 1;
                if multi[b] < counts[b] {
                    break;
                }
                multi[b] = 0;
            }
        }
        Ok(Self { points, pairs, lo: lo.to_vec(), hi: hi.to_vec(), counts: counts.to_vec() })
    }

    /// Explicit points with all pairs.
    pub fn from_points(points: Vec<Vec<f64>>) -> Self {
        let n = points.first().map_or(0, |p| p.len());
        let mut pairs = Vec::new();
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                pairs.push((a, b));
            }
        }
        let lo = (0..n).map(|b| points.iter().map(|p| p[b]).fold(f64::INFINITY, f64::min)).collect();
        let hi = (0..n).map(|b| points.iter().map(|p| p[b]).fold(f64::NEG_INFINITY, f64::max)).collect();
        Self { points, pairs, lo, hi, counts: vec![] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// ρ: ℓ∞ diameter of the sampled box.
    pub fn diameter(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).fold(0.0, f64::max)
    }

    pub fn cell_volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).zip(&self.counts).map(|((a, b), c)| (b - a) / *c as f64).product()
    }

    pub fn box_volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    /// ℓ∞ distance.
    pub fn dist(&self, a: usize, b: usize) -> f64 {
        self.points[a].iter().zip(&self.points[b]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

/// max over declared pairs of ‖X(ξ)−X(ζ)‖/|ξ−ζ|.
pub fn lipschitz_seminorm<T: Real>(fields: &[VectorField<T>], grid: &ParameterGrid, w: &NormWeights) -> Result<T> {
    lipschitz_over(fields, grid, &grid.pairs, w)
}

/// Same, over an explicit pair subset (e.g. pairs of still-active points).
pub fn lipschitz_over<T: Real>(
    fields: &[VectorField<T>],
    grid: &ParameterGrid,
    pairs: &[(usize, usize)],
    w: &NormWeights,
) -> Result<T> {
    if pairs.is_empty() {
        return Err(Error::EmptyRange("no parameter pairs".into()));
    }
    let mut best = T::zero();
    for &(a, b) in pairs {
        let d = fields[a].sub(&fields[b])?;
        best = best.max(majorant_norm(&d, w) / T::lit(grid.dist(a, b)));
    }
    Ok(best)
}

/// Evaluates a series at a phase point.
pub fn evaluate(s: &FormalSeries<f64>, v: &PhasePoint) -> C<f64> {
    let mut acc = C::zero();
    for (m, c) in s.iter() {
        let mut t = *c;
        for (b, k) in m.k.iter().enumerate() {
            t *= (C::new(0.0, *k as f64) * v.x[b]).exp();
        }
        for (b, i) in m.i.iter().enumerate() {
            t *= v.y[b].powu(*i);
        }
        for (j, e) in &m.alpha {
            t *= v.z.get(j).copied().unwrap_or_default().powu(*e);
        }
        for (j, e) in &m.beta {
            t *= v.zbar.get(j).copied().unwrap_or_default().powu(*e);
        }
        acc += t;
    }
    acc
}

/// Uniform-ish sample of D(s,r) over the given modes, drawn inside the
/// open domain (each coordinate strictly within its own bound).
pub fn sample_domain<R: Rng>(rng: &mut R, sites: &SiteSet, modes: &[i32], w: &NormWeights) -> PhasePoint {
    let (s, r) = w.dom();
    let n = sites.n();
    let yw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>().max(1e-3)).collect();
    let mut unit = || {
        let rho: f64 = rng.gen::<f64>().sqrt();
        let th: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
        C::from_polar(rho, th)
    };
    let x = (0..n).map(|_| C::new(unit().re * std::f64::consts::PI, unit().im * s)).collect();
    let ysum: f64 = yw.iter().sum::<f64>().max(1.0);
    let y = yw.iter().map(|a| unit() * (a / ysum) * r * r).collect();
    let m = modes.len().max(1) as f64;
    let mut z = BTreeMap::new();
    let mut zbar = BTreeMap::new();
    for &j in modes {
        z.insert(j, unit() * r / (w.mode_weight(j, w.p) * m.sqrt()));
        zbar.insert(j, unit() * r / (w.mode_weight(j, w.p) * m.sqrt()));
    }
    PhasePoint { x, y, z, zbar }
}

/// Largest ‖X(v)‖_{s,r,q} over `samples` points of D(s,r): a lower bound
/// for the true supremum.
pub fn sampled_sup_norm<R: Rng>(x: &VectorField<f64>, w: &NormWeights, samples: usize, rng: &mut R) -> f64 {
    let sites = x.sites().clone();
    let mut modes: Vec<i32> = Vec::new();
    for (v, s) in x.components() {
        match v {
            ComponentLabel::Z(j) | ComponentLabel::Zbar(j) => modes.push(*j),
            _ => {}
        }
        for (m, _) in s.iter() {
            modes.extend(m.alpha.iter().chain(m.beta.iter()).map(|p| p.0));
        }
    }
    modes.sort_unstable();
    modes.dedup();
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let pt = sample_domain(rng, &sites, &modes, w);
        let mut img = PhasePoint { x: vec![C::zero(); sites.n()], y: vec![C::zero(); sites.n()], ..Default::default() };
        for (v, s) in x.components() {
            let val = evaluate(s, &pt);
            match v {
                ComponentLabel::X(b) => img.x[*b] = val,
                ComponentLabel::Y(b) => img.y[*b] = val,
                ComponentLabel::Z(j) => {
                    img.z.insert(*j, val);
                }
                ComponentLabel::Zbar(j) => {
                    img.zbar.insert(*j, val);
                }
            }
        }
        let ww = NormWeights { p: w.q, ..*w };
        best = best.max(weighted_phase_norm(&img, &ww));
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w() -> NormWeights {
        NormWeights::new(0.3, 0.2, 2.0, 1.0, 0.1, 0.05).unwrap()
    }

    #[test]
    fn phase_norm_normalisation() {
        let w = w();
        assert_eq!(weighted_phase_norm(&PhasePoint { x: vec![C::zero(); 2], y: vec![C::zero(); 2], ..Default::default() }, &w), 0.0);
        let v = PhasePoint { x: vec![C::new(w.s, 0.0), C::zero()], y: vec![C::zero(); 2], ..Default::default() };
        assert!((weighted_phase_norm(&v, &w) - 1.0).abs() < 1e-15);
        let mut z = BTreeMap::new();
        z.insert(3, C::new(w.r / w.mode_weight(3, w.p), 0.0));
        let v = PhasePoint { x: vec![], y: vec![], z, zbar: BTreeMap::new() };
        assert!((weighted_phase_norm(&v, &w) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn vector_field_of_normal_form() {
        let ss = Arc::new(SiteSet::new(&[-1, 2], 5).unwrap());
        let bud = TruncationBudget::new(4, 6);
        let mut h = FormalSeries::<f64>::new(ss.clone(), bud);
        h.add_term(MultiIndex::new(&[0, 0], &[1, 0], &[], &[]), C::new(-0.7, 0.0));
        h.add_term(MultiIndex::new(&[0, 0], &[0, 0], &[(-3, 1)], &[(-3, 1)]), C::new(-8.1, 0.0));
        let x = hamiltonian_vector_field(&h);
        assert_eq!(x.get(ComponentLabel::X(0)).unwrap().coeff(&MultiIndex::zero(2)), C::new(0.7, 0.0));
        let zc = x.get(ComponentLabel::Z(-3)).unwrap();
        assert_eq!(zc.coeff(&MultiIndex::new(&[0, 0], &[0, 0], &[(-3, 1)], &[])), C::new(0.0, -8.1));
        let zbc = x.get(ComponentLabel::Zbar(-3)).unwrap();
        assert_eq!(zbc.coeff(&MultiIndex::new(&[0, 0], &[0, 0], &[], &[(-3, 1)])), C::new(0.0, 8.1));
        assert!(hamiltonian_vector_field(&FormalSeries::<f64>::new(ss, bud)).is_zero());
    }

    #[test]
    fn majorant_single_term() {
        let ss = Arc::new(SiteSet::new(&[-1, 2], 5).unwrap());
        let bud = TruncationBudget::new(4, 6);
        let mut x = VectorField::zero(ss.clone(), bud);
        // k = (2,1): momentum −2+2 = 0
        let m = MultiIndex::new(&[2, 1], &[0, 0], &[], &[]);
        x.set(ComponentLabel::X(1), FormalSeries::monomial(ss, bud, m, C::new(0.0, 3.0)));
        let w = w();
        let want = 3.0 * (3.0 * w.s).exp() / w.s;
        assert!((majorant_norm(&x, &w) - want).abs() < 1e-12 * want);
    }

    #[test]
    fn grid_pairs_include_axes_and_diagonals() {
        let g = ParameterGrid::boxed(&[0.0, 0.0], &[1.0, 2.0], &[2, 3]).unwrap();
        assert_eq!(g.len(), 6);
        // 3 vertical + 4 horizontal + 2 diagonal
        assert_eq!(g.pairs.len(), 9);
        assert_eq!(g.points[0], vec![0.25, 1.0 / 3.0]);
        assert!((g.cell_volume() - 1.0 / 3.0).abs() < 1e-15);
    }
}
