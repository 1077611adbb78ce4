//! Run configuration: a TOML document with a schema version. Unknown keys
//! are rejected.

use dnls_kam::dnls::{DnlsConfig, FrequencyData, QuinticTerm};
use dnls_kam::kam::{KamGlobals, KamSetup};
use dnls_kam::nonres::{audit_assumptions, AuditReport, EnumRange};
use dnls_kam::norms::ParameterGrid;
use dnls_kam::{Error, Result, SiteSet, C};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<String>,
    pub sites: Sites,
    #[serde(default)]
    pub model: Model,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default)]
    pub truncation: Truncation,
    #[serde(default)]
    pub schedule: Schedule,
    pub grid: Grid,
    #[serde(default)]
    pub enumeration: Enumeration,
    #[serde(default)]
    pub measure: Measure,
    #[serde(default)]
    pub verify: Verify,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sites {
    pub j: Vec<i64>,
    /// Lets `assumptions` and `measure` run on an inadmissible J.
    #[serde(default)]
    pub allow_inadmissible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quintic {
    pub m: i32,
    pub a: u32,
    pub b: u32,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    #[serde(default = "one")]
    pub mu: f64,
    #[serde(default)]
    pub quintic: Vec<Quintic>,
}

impl Default for Model {
    fn default() -> Self {
        Self { mu: 1.0, quintic: vec![] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentumWeight {
    /// 𝐚_ν = σ_ν / C_J.
    SigmaOverCj,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Norm {
    pub a: f64,
    pub p: f64,
    pub q: f64,
    pub s0: f64,
    pub r0: f64,
    pub momentum_weight: MomentumWeight,
}

impl Default for Norm {
    fn default() -> Self {
        Self { a: 0.0, p: 2.0, q: 1.0, s0: 0.4, r0: 0.01, momentum_weight: MomentumWeight::SigmaOverCj }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Truncation {
    /// Weighted degree kept in the reduced coordinates.
    pub degree_max: u32,
    pub fourier_max: u32,
    pub j_max: i64,
    /// N of the Δ1 split; max|j_b| when absent.
    pub n_split: Option<i64>,
    /// Degree budget in the q-coordinates for the Birkhoff step.
    pub birkhoff_degree: u32,
    pub binomial_order: u32,
}

impl Default for Truncation {
    fn default() -> Self {
        Self { degree_max: 4, fourier_max: 24, j_max: 8, n_split: None, birkhoff_degree: 6, binomial_order: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub alpha0: f64,
    pub beta: f64,
    /// n + 3 when absent.
    pub tau: Option<f64>,
    /// β′/(800 max{C_{0,0}, C_J}) when absent.
    pub gamma0: Option<f64>,
    pub c: f64,
    pub max_steps: usize,
    /// γ of the advisory smallness gate.
    pub gamma: f64,
    pub eps_floor_log10: f64,
    pub halt_at_horizon: bool,
    /// Refuse to iterate when the ε_0 smallness gate fails; otherwise warn.
    pub require_gate: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            alpha0: 1e-3,
            beta: 1.0 / 13.0,
            tau: None,
            gamma0: None,
            c: 1.0,
            max_steps: 4,
            gamma: 1.0,
            eps_floor_log10: -30.0,
            halt_at_horizon: true,
            require_gate: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// Tensor grid with `counts` points per axis.
    Box,
    /// `samples` uniform points drawn from the seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    #[serde(default = "box_kind")]
    pub kind: GridKind,
    #[serde(default)]
    pub counts: Vec<usize>,
    #[serde(default)]
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Enumeration {
    pub k_max: u32,
    pub mode_max: i32,
}

impl Default for Enumeration {
    fn default() -> Self {
        let d = EnumRange::default();
        Self { k_max: d.k_max, mode_max: d.mode_max }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Measure {
    /// n + 3 when absent.
    pub tau: Option<f64>,
    pub alphas: Vec<f64>,
    /// Steps of the schedule whose zone totals are reported.
    pub steps: usize,
    /// log10 ε_0 for the schedule; measured from the model when absent.
    pub eps0_log10: Option<f64>,
}

impl Default for Measure {
    fn default() -> Self {
        Self { tau: None, alphas: vec![], steps: 4, eps0_log10: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Verify {
    /// Instances per appendix check.
    pub samples: usize,
}

impl Default for Verify {
    fn default() -> Self {
        Self { samples: 500 }
    }
}

fn one() -> f64 {
    1.0
}

fn box_kind() -> GridKind {
    GridKind::Box
}

fn bad<T>(m: impl Into<String>) -> Result<T> {
    Err(Error::Config(m.into()))
}

fn in_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        bad(format!("{name} = {v} must lie in (0,1)"))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn n(&self) -> usize {
        self.sites.j.len()
    }

    pub fn tau(&self) -> f64 {
        self.schedule.tau.unwrap_or(self.n() as f64 + 3.0)
    }

    pub fn measure_tau(&self) -> f64 {
        self.measure.tau.unwrap_or(self.n() as f64 + 3.0)
    }

    pub fn c_j(&self) -> f64 {
        self.sites.j.iter().map(|j| j.abs()).max().unwrap_or(1) as f64
    }

    /// Checks every constraint with a named diagnostic.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let n = self.n();
        if n < 2 {
            return bad(format!("n = {n}: at least two sites are required"));
        }
        if self.tau() < n as f64 + 3.0 {
            return bad(format!("tau = {} violates τ ≥ n+3 = {}", self.tau(), n + 3));
        }
        if self.measure_tau() < n as f64 + 3.0 {
            return bad(format!("measure.tau = {} violates τ ≥ n+3", self.measure_tau()));
        }
        if (self.norm.p - self.norm.q - 1.0).abs() > 1e-12 {
            return bad(format!("p − q = {} must equal 1", self.norm.p - self.norm.q));
        }
        in_unit("norm.s0", self.norm.s0)?;
        in_unit("norm.r0", self.norm.r0)?;
        if self.norm.a < 0.0 {
            return bad("norm.a must be ≥ 0");
        }
        if self.model.mu != 1.0 {
            return bad("model.mu: only μ = 1 is supported");
        }
        for (i, q) in self.model.quintic.iter().enumerate() {
            if q.a + q.b < 5 {
                return bad(format!("model.quintic[{i}]: u^{}ū^{} has order < 5", q.a, q.b));
            }
        }
        let t = &self.truncation;
        if t.degree_max < 2 {
            return bad("truncation.degree_max must be ≥ 2");
        }
        if t.birkhoff_degree < 4 {
            return bad("truncation.birkhoff_degree must be ≥ 4");
        }
        if t.j_max < self.c_j() as i64 {
            return bad("truncation.j_max must cover the sites");
        }
        if let Some(ns) = t.n_split {
            if ns < 1 || ns > t.j_max {
                return bad(format!("truncation.n_split = {ns} must lie in [1, j_max]"));
            }
        }
        let s = &self.schedule;
        if !(s.beta > 0.0) || !(s.alpha0 > 0.0) || !(s.c > 0.0) || !(s.gamma > 0.0) {
            return bad("schedule: β, α_0, c and γ must be positive");
        }
        if let Some(g) = s.gamma0 {
            in_unit("schedule.gamma0", g)?;
        }
        let g = &self.grid;
        if g.lo.len() != n || g.hi.len() != n {
            return bad(format!("grid.lo/hi must have {n} entries"));
        }
        if g.lo.iter().zip(&g.hi).any(|(a, b)| !(a < b)) {
            return bad("grid: lo < hi required on every axis");
        }
        match g.kind {
            GridKind::Box if g.counts.len() != n || g.counts.iter().any(|c| *c == 0) => {
                return bad(format!("grid.counts must have {n} positive entries"));
            }
            GridKind::Random if g.samples < 2 => return bad("grid.samples must be ≥ 2"),
            _ => {}
        }
        if self.enumeration.mode_max < 1 {
            return bad("enumeration.mode_max must be ≥ 1");
        }
        if self.verify.samples == 0 {
            return bad("verify.samples must be ≥ 1");
        }
        if self.measure.alphas.iter().any(|a| !(*a > 0.0)) {
            return bad("measure.alphas must be positive");
        }
        Ok(())
    }

    pub fn site_set(&self) -> Result<SiteSet> {
        SiteSet::new(&self.sites.j, self.truncation.j_max)
    }

    pub fn grid(&self) -> Result<ParameterGrid> {
        let g = &self.grid;
        match g.kind {
            GridKind::Box => ParameterGrid::boxed(&g.lo, &g.hi, &g.counts),
            GridKind::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let pts = (0..g.samples)
                    .map(|_| g.lo.iter().zip(&g.hi).map(|(a, b)| rng.gen_range(*a..*b)).collect())
                    .collect();
                Ok(ParameterGrid::from_points(pts))
            }
        }
    }

    pub fn enum_range(&self) -> EnumRange {
        EnumRange { k_max: self.enumeration.k_max, mode_max: self.enumeration.mode_max }
    }

    pub fn dnls(&self) -> DnlsConfig {
        let t = &self.truncation;
        let mut d = DnlsConfig::new(t.j_max, t.n_split.unwrap_or(self.c_j() as i64));
        d.mu = self.model.mu;
        d.degree_max = t.birkhoff_degree;
        d.quintic = self
            .model
            .quintic
            .iter()
            .map(|q| QuinticTerm { m: q.m, a: q.a, b: q.b, c: C::new(q.re, q.im) })
            .collect();
        d
    }

    /// Schedule globals with m, M_1, M_2, M_3 taken from the audit and
    /// E = sup|ω| over the grid.
    pub fn kam_globals(&self, audit: &AuditReport, grid: &ParameterGrid) -> Result<KamGlobals> {
        let sites = self.site_set()?;
        let fd = FrequencyData::new(&sites);
        let e0 = grid.points.iter().flat_map(|x| fd.omega(x)).fold(0.0f64, |a, w| a.max(w.abs()));
        let s = &self.schedule;
        let mut g = KamGlobals {
            n: self.n(),
            beta: s.beta,
            tau: self.tau(),
            gamma0: 0.0,
            c: s.c,
            s0: self.norm.s0,
            r0: self.norm.r0,
            alpha0: s.alpha0,
            m0: audit.m,
            e0,
            m1_0: audit.m1,
            m2_0: audit.m2,
            m3_0: audit.m3_estimate,
            c_j: self.c_j(),
            p: self.norm.p,
            q: self.norm.q,
            a_exp: self.norm.a,
            fourier_max: self.truncation.fourier_max,
            j_max: self.truncation.j_max,
            gamma: s.gamma,
            eps_floor_log10: s.eps_floor_log10,
            halt_at_horizon: s.halt_at_horizon,
        };
        g.gamma0 = s.gamma0.unwrap_or_else(|| g.default_gamma0());
        g.validate()?;
        Ok(g)
    }

    /// Everything `kam` needs, with the audit it was derived from.
    pub fn kam_setup(&self) -> Result<(KamSetup, AuditReport)> {
        let grid = self.grid()?;
        let audit = audit_assumptions(&self.site_set()?, &grid, self.enum_range())?;
        let globals = self.kam_globals(&audit, &grid)?;
        let setup = KamSetup {
            dnls: self.dnls(),
            sites: self.sites.j.clone(),
            grid,
            globals,
            binomial_order: self.truncation.binomial_order,
            enum_range: self.enum_range(),
        };
        Ok((setup, audit))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
[sites]
j = [-1, 2]
[grid]
lo = [0.01, 0.01]
hi = [0.02, 0.02]
counts = [2, 2]
"#;

    #[test]
    fn minimal_config_parses() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.tau(), 5.0);
        assert_eq!(c.dnls().n_split, 2);
        assert!(c.schedule.halt_at_horizon);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("[grid]", "colour = 3\n[grid]");
        assert!(RunConfig::from_toml(&text).is_err());
        let text = MINIMAL.replace("counts", "count");
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn constraint_violations_are_named() {
        let cases = [
            ("schema_version = 1", "schema_version = 2", "schema_version"),
            ("j = [-1, 2]", "j = [3]", "n = 1"),
            ("[grid]", "[schedule]\ntau = 4.0\n[grid]", "τ ≥ n+3"),
            ("[grid]", "[norm]\np = 3.0\n[grid]", "p − q"),
            ("[grid]", "[norm]\nr0 = 1.5\n[grid]", "norm.r0"),
        ];
        for (from, to, needle) in cases {
            let e = RunConfig::from_toml(&MINIMAL.replace(from, to)).unwrap_err().to_string();
            assert!(e.contains(needle), "{e}");
        }
    }
}
