//! JSON run configuration. Every block has defaults; `resolve` validates the
//! whole document and returns the fully populated copy that is echoed into
//! every output artifact.

use std::path::Path;
use std::sync::Arc;

use beamkam_core::decay_matrix::NormContext;
use beamkam_core::lattice::{LatticeGeometry, Preset};
use beamkam_core::linop::{positivity_margin, OperatorParams};
use beamkam_core::measure::diophantine_check;
use beamkam_core::multiscale::MultiscaleParams;
use beamkam_core::nashmoser::{BeamProblem, SolverSettings};
use beamkam_core::sobolev::{FourierField, Nonlinearity, Polynomial};
use beamkam_core::Complex64;
use serde::{Deserialize, Serialize};

use crate::sampled::{Sampled, ScalarFn};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

/// One Fourier coefficient `{l, j, re, im}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub l: Vec<i32>,
    pub j: Vec<i32>,
    pub re: Vec<f64>,
    #[serde(default)]
    pub im: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryBlock {
    pub nu: usize,
    pub d: usize,
}

impl Default for GeometryBlock {
    fn default() -> Self {
        GeometryBlock { nu: 1, d: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PotentialBlock {
    pub m: f64,
    pub vbar: Vec<Mode>,
    pub kappa0: f64,
}

impl Default for PotentialBlock {
    fn default() -> Self {
        PotentialBlock {
            m: 1.0,
            vbar: Vec::new(),
            kappa0: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub power: u32,
    pub coeff: Vec<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearityBlock {
    /// `Σ c_k(φ,x) u^k`.
    Polynomial { terms: Vec<Term> },
    /// `c(φ,x)·g(u) + q(φ,x)` on a collocation grid.
    Sampled {
        function: ScalarFn,
        coeff: Vec<Mode>,
        #[serde(default)]
        forcing: Vec<Mode>,
        #[serde(default)]
        grid: Option<usize>,
        #[serde(default = "default_q")]
        q: u32,
    },
}

fn default_q() -> u32 {
    u32::MAX
}

impl Default for NonlinearityBlock {
    fn default() -> Self {
        NonlinearityBlock::Polynomial { terms: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencyBlock {
    pub omega0: Vec<f64>,
    pub gamma0: f64,
    pub diophantine_lmax: u32,
    pub lambda: f64,
    pub lambda_grid: usize,
}

impl Default for FrequencyBlock {
    fn default() -> Self {
        FrequencyBlock {
            omega0: vec![(5f64.sqrt() - 1.0) / 2.0],
            gamma0: 0.05,
            diophantine_lmax: 100,
            lambda: 1.0,
            lambda_grid: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub eps: f64,
    pub n0: u32,
    pub gamma: f64,
    /// Replace `gamma` and `n0` by `γ = ε₀^{1/(s₂+1)}`, `N₀ = ⌈32/γ⌉`.
    pub coupled_gamma: bool,
    pub tol: f64,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub max_steps: usize,
    pub min_steps: usize,
    pub eps0: f64,
    pub assemble_limit: usize,
    pub cross_check: bool,
    pub membership: bool,
}

impl Default for SolverBlock {
    fn default() -> Self {
        SolverBlock {
            eps: 1e-3,
            n0: 8,
            gamma: 0.1,
            coupled_gamma: false,
            tol: 1e-10,
            picard_tol: 1e-14,
            max_picard: 200,
            max_steps: 6,
            min_steps: 1,
            eps0: 1e-2,
            assemble_limit: 2000,
            cross_check: false,
            membership: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsPreset {
    Desk,
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiscaleBlock {
    pub preset: MsPreset,
    pub tau: Option<f64>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub delta: Option<f64>,
    pub chi: Option<f64>,
    pub c1: Option<f64>,
    pub theta: Option<f64>,
    pub upsilon: Option<f64>,
    pub s0: Option<f64>,
    pub s1: Option<f64>,
    pub s2: Option<f64>,
}

impl Default for MultiscaleBlock {
    fn default() -> Self {
        MultiscaleBlock {
            preset: MsPreset::Desk,
            tau: None,
            tau1: None,
            tau2: None,
            delta: None,
            chi: None,
            c1: None,
            theta: None,
            upsilon: None,
            s0: None,
            s1: None,
            s2: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverModeName {
    Exact,
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureBlock {
    pub mode: CoverModeName,
    /// `None` uses `[−3N, 3N]`.
    pub theta_range: Option<(f64, f64)>,
    /// Sweep resolution as a fraction of `N^{−τ}`.
    pub resolution_fraction: f64,
    pub scan_n: u32,
    pub check_good: bool,
}

impl Default for MeasureBlock {
    fn default() -> Self {
        MeasureBlock {
            mode: CoverModeName::Exact,
            theta_range: None,
            resolution_fraction: 0.125,
            scan_n: 4,
            check_good: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: String,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            dir: String::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub geometry: GeometryBlock,
    pub potential: PotentialBlock,
    pub nonlinearity: NonlinearityBlock,
    pub frequency: FrequencyBlock,
    pub solver: SolverBlock,
    pub multiscale: MultiscaleBlock,
    pub measure: MeasureBlock,
    pub output: OutputBlock,
}

/// A validated configuration with the objects built from it.
#[derive(Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub ctx: Arc<NormContext>,
    pub problem: BeamProblem,
    pub settings: SolverSettings,
    pub positivity: f64,
    pub diophantine_margin: f64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// The reference instance: `ν = d = 1`, `V = 1 + 0.1 cos x`,
    /// `f = u³ + cos φ cos x`, `ε = 10⁻³`, `λ = 1`, `N₀ = 8`.
    pub fn reference() -> Self {
        let m = |l: i32, j: i32, re: f64| Mode {
            l: vec![l],
            j: vec![j],
            re: vec![re],
            im: vec![],
        };
        RunConfig {
            potential: PotentialBlock {
                m: 1.0,
                vbar: vec![m(0, -1, 0.05), m(0, 1, 0.05)],
                kappa0: 0.5,
            },
            nonlinearity: NonlinearityBlock::Polynomial {
                terms: vec![
                    Term {
                        power: 3,
                        coeff: vec![m(0, 0, 1.0)],
                    },
                    Term {
                        power: 0,
                        coeff: vec![m(-1, -1, 0.25), m(-1, 1, 0.25), m(1, -1, 0.25), m(1, 1, 0.25)],
                    },
                ],
            },
            ..RunConfig::default()
        }
    }

    pub fn multiscale_params(&self, geom: &LatticeGeometry) -> MultiscaleParams {
        let b = &self.multiscale;
        let mut p = match b.preset {
            MsPreset::Desk => MultiscaleParams::desk(geom),
            MsPreset::Asymptotic => MultiscaleParams::asymptotic(geom),
        };
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut p.tau, b.tau);
        set(&mut p.tau1, b.tau1);
        set(&mut p.tau2, b.tau2);
        set(&mut p.delta, b.delta);
        set(&mut p.chi, b.chi);
        set(&mut p.c1, b.c1);
        set(&mut p.s0, b.s0);
        set(&mut p.s1, b.s1);
        set(&mut p.s2, b.s2);
        if b.theta.is_some() {
            p.theta = b.theta;
        }
        if b.upsilon.is_some() {
            p.upsilon = b.upsilon;
        }
        p
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let mut cfg = self.clone();
        let g = &cfg.geometry;
        if g.nu == 0 || g.d == 0 {
            return Err(invalid("geometry", "nu and d must be positive"));
        }
        let geom = Arc::new(LatticeGeometry::torus(g.nu, g.d).map_err(|e| invalid("geometry", e.to_string()))?);
        debug_assert_eq!(geom.preset, Preset::Torus);
        let mut ms = cfg.multiscale_params(&geom);
        for (name, v) in [("tau", ms.tau), ("tau1", ms.tau1), ("tau2", ms.tau2), ("s1", ms.s1), ("s2", ms.s2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(&format!("multiscale.{name}"), "must be finite and nonnegative"));
            }
        }
        if ms.s0 * 2.0 <= (geom.nu + geom.r) as f64 {
            return Err(invalid("multiscale.s0", "must exceed (nu+r)/2"));
        }
        let ctx = NormContext::new(geom.clone(), ms.s0).map_err(|e| invalid("multiscale.s0", e.to_string()))?;

        let vbar = field(&geom, &cfg.potential.vbar, "potential.vbar")?;
        let pm = &cfg.potential;
        if !pm.m.is_finite() {
            return Err(invalid("potential.m", "must be finite"));
        }
        let fr = &cfg.frequency;
        if fr.omega0.len() != geom.nu {
            return Err(invalid("frequency.omega0", format!("expected {} components", geom.nu)));
        }
        if !(0.5..=1.5).contains(&fr.lambda) {
            return Err(invalid("frequency.lambda", "must lie in [0.5, 1.5]"));
        }
        if fr.lambda_grid == 0 {
            return Err(invalid("frequency.lambda_grid", "must be positive"));
        }
        if fr.diophantine_lmax == 0 {
            return Err(invalid("frequency.diophantine_lmax", "must be at least 1"));
        }
        let dio = diophantine_check(&fr.omega0, fr.gamma0, fr.diophantine_lmax);
        if !dio.holds {
            return Err(invalid(
                "frequency.omega0",
                format!("Diophantine condition fails at l = {:?} (margin {:.3e})", dio.worst, dio.margin),
            ));
        }

        let so = &mut cfg.solver;
        if !(so.eps.is_finite() && so.eps >= 0.0) {
            return Err(invalid("solver.eps", "must be finite and nonnegative"));
        }
        if !(so.eps0.is_finite() && so.eps0 > 0.0) {
            return Err(invalid("solver.eps0", "must be positive"));
        }
        if so.coupled_gamma {
            so.gamma = so.eps0.powf(1.0 / (ms.s2 + 1.0));
            so.n0 = (32.0 / so.gamma).ceil() as u32;
        }
        if so.n0 == 0 {
            return Err(invalid("solver.n0", "must be at least 1"));
        }
        if !(so.gamma > 0.0 && so.gamma.is_finite()) {
            return Err(invalid("solver.gamma", "must be positive"));
        }
        if !(so.tol > 0.0 && so.picard_tol > 0.0) {
            return Err(invalid("solver.tol", "tolerances must be positive"));
        }
        if so.max_picard == 0 {
            return Err(invalid("solver.max_picard", "must be positive"));
        }
        let mb = &cfg.measure;
        if !(mb.resolution_fraction > 0.0 && mb.resolution_fraction <= 1.0) {
            return Err(invalid("measure.resolution_fraction", "must lie in (0, 1]"));
        }
        if let Some((lo, hi)) = mb.theta_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid("measure.theta_range", "needs finite lo < hi"));
            }
        }
        if mb.scan_n == 0 {
            return Err(invalid("measure.scan_n", "must be at least 1"));
        }

        let f = nonlinearity(&geom, &cfg.nonlinearity)?;
        let problem = BeamProblem::new(ctx.clone(), so.eps, fr.lambda, fr.omega0.clone(), pm.m, vbar.clone(), f)
            .map_err(|e| invalid("potential", e.to_string()))?;
        let op = OperatorParams::new(0.0, fr.lambda, fr.omega0.clone(), 0.0, pm.m, vbar, FourierField::zero(geom.clone()))
            .map_err(|e| invalid("potential.vbar", e.to_string()))?;
        let positivity = positivity_margin(&ctx, &op, so.n0);
        if positivity < pm.kappa0 || pm.kappa0 <= 0.0 {
            return Err(invalid(
                "potential.kappa0",
                format!("smallest eigenvalue of the spatial block is {positivity:.6}, below kappa0 = {}", pm.kappa0),
            ));
        }
        ms.theta = ms.theta.filter(|t| t.is_finite());
        let settings = SolverSettings {
            n0: so.n0,
            gamma: so.gamma,
            ms,
            tol: so.tol,
            picard_tol: so.picard_tol,
            max_picard: so.max_picard,
            max_steps: so.max_steps,
            min_steps: so.min_steps,
            eps0: so.eps0,
            assemble_limit: so.assemble_limit,
            cross_check: so.cross_check,
            membership: so.membership,
        };
        Ok(Resolved {
            config: cfg,
            ctx,
            problem,
            settings,
            positivity,
            diophantine_margin: dio.margin,
        })
    }
}

/// Builds a real field from modes; the mirror of every listed mode is added
/// unless it is listed too.
pub fn field(geom: &Arc<LatticeGeometry>, modes: &[Mode], path: &str) -> Result<FourierField, ConfigError> {
    let mut u = FourierField::zero(geom.clone());
    for (k, m) in modes.iter().enumerate() {
        let p = format!("{path}[{k}]");
        if m.l.len() != geom.nu || m.j.len() != geom.r {
            return Err(invalid(&p, format!("expected l of length {} and j of length {}", geom.nu, geom.r)));
        }
        if m.re.len() != 1 || m.im.len() > 1 {
            return Err(invalid(&p, "torus coefficients are scalars: re and im hold one value"));
        }
        let z = Complex64::new(m.re[0], m.im.first().copied().unwrap_or(0.0));
        if !(z.re.is_finite() && z.im.is_finite()) {
            return Err(invalid(&p, "coefficient must be finite"));
        }
        u.add_block(geom.site(&m.l, &m.j), &[z]);
    }
    if u.reality_defect() > 1e-14 * u.max_abs().max(1.0) {
        return Err(invalid(path, "coefficients violate u(-n) = conj(u(n)); the field must be real"));
    }
    Ok(u)
}

fn nonlinearity(geom: &Arc<LatticeGeometry>, b: &NonlinearityBlock) -> Result<Arc<dyn Nonlinearity>, ConfigError> {
    Ok(match b {
        NonlinearityBlock::Polynomial { terms } => {
            let mut out = Vec::new();
            for (k, t) in terms.iter().enumerate() {
                out.push((t.power, field(geom, &t.coeff, &format!("nonlinearity.polynomial.terms[{k}].coeff"))?));
            }
            Arc::new(Polynomial::new(out))
        }
        NonlinearityBlock::Sampled {
            function,
            coeff,
            forcing,
            grid,
            q,
        } => {
            if let Some(m) = grid {
                if *m < 8 {
                    return Err(invalid("nonlinearity.sampled.grid", "must be at least 8"));
                }
            }
            Arc::new(Sampled {
                g: *function,
                coeff: field(geom, coeff, "nonlinearity.sampled.coeff")?,
                forcing: field(geom, forcing, "nonlinearity.sampled.forcing")?,
                grid: *grid,
                q: *q,
            })
        }
    })
}
