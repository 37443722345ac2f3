//! The Nash–Moser scheme on Galerkin spaces `H_{N_n}`, `N_{n+1} = N_n²`.
//!
//! Every fixed point below is computed by the defect correction
//! `h ← h − G·P_N(L_λ(u+h) − εF(u+h))`. When `G` is the exact inverse of the
//! linearization this is the Picard map of the contraction; other
//! choices of `G` (a multiscale or dense inverse, or the `ε = 0` block
//! inverse) converge to the same fixed point.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use nalgebra::LU;
use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

use crate::decay_matrix::{DecayMatrix, NormContext, SiteSet};
use crate::dense::{self, CMat};
use crate::lattice::{Preset, SiteIndex};
use crate::linop::{assemble, diagonal_entry, spatial_block, LinopError, OperatorParams};
use crate::measure::{self, GapCheck};
use crate::multiscale::{self, InvertDiagnostics, MultiscaleParams};
use crate::sobolev::{Block, FourierField, Nonlinearity, SobolevError};

/// Solver outputs below this modulus are dropped to keep fields sparse.
pub const SOLVE_DROP: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NashMoserError {
    #[error("epsilon = {eps} exceeds the contraction budget eps0 = {eps0}")]
    EpsilonBudget { eps: f64, eps0: f64 },
    #[error("first-Melnikov gap {gap:.3e} < {bound:.3e} at l = {l:?}, eigenvalue {eigenvalue:.6}")]
    Gap {
        gap: f64,
        bound: f64,
        l: Vec<i32>,
        eigenvalue: f64,
    },
    #[error("fixed point at step {step} stalls: increment ratio {ratio:.3} >= 1")]
    ContractionStall { step: usize, ratio: f64 },
    #[error("fixed point at step {step} not converged after {iterations} iterations")]
    PicardLimit { step: usize, iterations: usize },
    #[error("linearized operator at step {step} could not be inverted: {reason}")]
    Inversion { step: usize, reason: String },
    #[error("the scheme needs the torus preset")]
    NotTorus,
    #[error(transparent)]
    Params(#[from] LinopError),
    #[error(transparent)]
    Sobolev(#[from] SobolevError),
}

/// `(λω₀·∂_φ)²u + Δ²u + (m + V̄)u = εf(φ, x, u)`.
#[derive(Clone)]
pub struct BeamProblem {
    pub ctx: Arc<NormContext>,
    pub eps: f64,
    pub lambda: f64,
    pub omega0: Vec<f64>,
    pub m: f64,
    pub vbar: FourierField,
    pub f: Arc<dyn Nonlinearity>,
}

impl core::fmt::Debug for BeamProblem {
    fn fmt(&self, fm: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        fm.debug_struct("BeamProblem")
            .field("eps", &self.eps)
            .field("lambda", &self.lambda)
            .field("omega0", &self.omega0)
            .field("m", &self.m)
            .finish_non_exhaustive()
    }
}

impl BeamProblem {
    pub fn new(
        ctx: Arc<NormContext>,
        eps: f64,
        lambda: f64,
        omega0: Vec<f64>,
        m: f64,
        vbar: FourierField,
        f: Arc<dyn Nonlinearity>,
    ) -> Result<Self, NashMoserError> {
        if ctx.geom.preset != Preset::Torus {
            return Err(NashMoserError::NotTorus);
        }
        let zero = FourierField::zero(ctx.geom.clone());
        OperatorParams::new(eps, lambda, omega0.clone(), 0.0, m, vbar.clone(), zero)?;
        Ok(BeamProblem {
            ctx,
            eps,
            lambda,
            omega0,
            m,
            vbar,
            f,
        })
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        BeamProblem {
            lambda,
            ..self.clone()
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        BeamProblem { eps, ..self.clone() }
    }

    pub fn zero(&self) -> FourierField {
        FourierField::zero(self.ctx.geom.clone())
    }

    /// Parameters of `L_λ − εT_a` at `θ = 0`.
    pub fn operator(&self, a: FourierField) -> OperatorParams {
        OperatorParams {
            eps: self.eps,
            lambda: self.lambda,
            omega0: self.omega0.clone(),
            theta: 0.0,
            m: self.m,
            vbar: self.vbar.clone(),
            mbar: a.mean().re,
            a,
        }
    }

    /// `L_λu` computed mode by mode.
    pub fn apply_l(&self, u: &FourierField) -> Result<FourierField, NashMoserError> {
        let p = self.operator(self.zero());
        let mut out = self.zero();
        for (s, b) in u.iter() {
            let d = diagonal_entry(s, &p);
            let x: Block = b.iter().map(|z| z * d).collect();
            out.add_block(s.clone(), &x);
        }
        Ok(out.add(&self.vbar.multiply(u)?)?)
    }

    /// `P_N(L_λu − εF(u))`.
    pub fn defect(&self, u: &FourierField, n: u32) -> Result<FourierField, NashMoserError> {
        let lu = self.apply_l(&u.low(n))?;
        let fu = self.f.compose(u)?;
        Ok(lu.axpy(-self.eps, &fu)?.low(n))
    }
}

/// `‖P_N(L_λu − εF(u))‖_s`.
pub fn residual(pb: &BeamProblem, u: &FourierField, n: u32, s: f64) -> Result<f64, NashMoserError> {
    Ok(pb.defect(u, n)?.hs_norm(s))
}

/// Same quantity through the assembled matrix of `L_λ` on the box.
pub fn residual_assembled(pb: &BeamProblem, u: &FourierField, n: u32, s: f64) -> Result<f64, NashMoserError> {
    let l0 = vec![0; pb.ctx.geom.nu];
    let j0 = vec![0; pb.ctx.geom.r];
    let free = OperatorParams {
        eps: 0.0,
        ..pb.operator(pb.zero())
    };
    let a = assemble(&pb.ctx, &free, n, &l0, &j0);
    let lu = a.apply(&u.low(n)).map_err(|e| NashMoserError::Inversion {
        step: 0,
        reason: format!("{e}"),
    })?;
    let fu = pb.f.compose(u)?.low(n);
    Ok(lu.axpy(-pb.eps, &fu)?.hs_norm(s))
}

/// `‖P⊥_N(V̄u − εF(u))‖_s`, the part of the defect created above `N`.
pub fn tail_residual(pb: &BeamProblem, u: &FourierField, n: u32, s: f64) -> Result<f64, NashMoserError> {
    let vu = pb.vbar.multiply(u)?;
    let fu = pb.f.compose(u)?;
    Ok(vu.axpy(-pb.eps, &fu)?.project(n).1.hs_norm(s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub n0: u32,
    pub gamma: f64,
    pub ms: MultiscaleParams,
    /// Stop once projected plus tail residual in `‖·‖_{s₁}` is below this.
    pub tol: f64,
    pub picard_tol: f64,
    pub max_picard: usize,
    pub max_steps: usize,
    /// Steps performed even when the initial residual is already below `tol`.
    pub min_steps: usize,
    /// Contraction budget `ε₀`.
    pub eps0: f64,
    /// Largest box dimension for which the linearization is assembled.
    pub assemble_limit: usize,
    /// Recompute each multiscale step with the dense inverse and record the gap.
    pub cross_check: bool,
    /// Evaluate `𝒰_N` and `𝒢⁰_N` membership at every step.
    pub membership: bool,
}

impl SolverSettings {
    pub fn desk(ctx: &NormContext, n0: u32, gamma: f64) -> Self {
        SolverSettings {
            n0,
            gamma,
            ms: MultiscaleParams::desk(&ctx.geom),
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

/// Exact inverse of the `ε = 0` operator `P_N(D + T′)P_N`, block by block
/// in the time index.
pub struct BlockSolver {
    n: u32,
    freqs_lambda: f64,
    omega0: Vec<f64>,
    ssites: Arc<SiteSet>,
    spatial: CMat,
    eigenvalues: Vec<f64>,
    cache: RefCell<BTreeMap<Vec<i32>, LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>>>,
}

impl BlockSolver {
    pub fn new(pb: &BeamProblem, n: u32) -> Self {
        let j0 = vec![0; pb.ctx.geom.r];
        let blk = spatial_block(&pb.ctx, &pb.operator(pb.zero()), n, &j0);
        let spatial = blk.to_dense();
        let eigenvalues = dense::hermitian_eigenvalues(&spatial);
        BlockSolver {
            n,
            freqs_lambda: pb.lambda,
            omega0: pb.omega0.clone(),
            ssites: blk.row_sites().clone(),
            spatial,
            eigenvalues,
            cache: RefCell::new(BTreeMap::new()),
        }
    }

    fn frequency(&self, l: &[i32]) -> f64 {
        self.freqs_lambda * self.omega0.iter().zip(l).map(|(w, &k)| w * k as f64).sum::<f64>()
    }

    /// `‖P_N(D + T′)⁻¹P_N‖₀ = 1/min |λ̂_p − (λω₀·l)²|`.
    pub fn inverse_norm(&self) -> f64 {
        let mut g = f64::INFINITY;
        for l in measure::time_indices(self.omega0.len(), self.n) {
            let f = self.frequency(&l);
            for &e in &self.eigenvalues {
                g = g.min((e - f * f).abs());
            }
        }
        1.0 / g
    }

    pub fn apply(&self, r: &FourierField) -> FourierField {
        let geom = r.geometry().clone();
        let mut by_l: BTreeMap<Vec<i32>, Vec<(usize, Complex64)>> = BTreeMap::new();
        for (s, b) in r.iter() {
            if s.norm() > self.n {
                continue;
            }
            let zs = geom.site(&vec![0; s.l.len()], &s.j);
            if let Some(p) = self.ssites.position(&zs) {
                by_l.entry(s.l.to_vec()).or_default().push((self.ssites.start(p), b[0]));
            }
        }
        let dim = self.spatial.nrows();
        let mut out = FourierField::zero(geom.clone());
        let mut cache = self.cache.borrow_mut();
        for (l, entries) in by_l {
            let lu = cache.entry(l.clone()).or_insert_with(|| {
                let f = self.frequency(&l);
                let mut m = self.spatial.clone();
                for k in 0..dim {
                    m[(k, k)] -= Complex64::new(f * f, 0.0);
                }
                m.lu()
            });
            let mut v = nalgebra::DVector::from_element(dim, Complex64::new(0.0, 0.0));
            for (k, z) in entries {
                v[k] = z;
            }
            let x = lu.solve(&v).expect("block is invertible under the gap condition");
            for (k, s) in self.ssites.sites().iter().enumerate() {
                let z = x[k];
                if z.norm() > SOLVE_DROP {
                    out.add_block(geom.site(&l, &s.j), &[z]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionPath {
    /// `ε = 0` block inverse (exact for the initial operator).
    Block,
    Multiscale,
    Dense,
}

impl InversionPath {
    pub fn name(&self) -> &'static str {
        match self {
            InversionPath::Block => "block",
            InversionPath::Multiscale => "multiscale",
            InversionPath::Dense => "dense",
        }
    }
}

enum Inverse {
    Block(BlockSolver),
    Matrix(DecayMatrix),
}

impl Inverse {
    fn apply(&self, r: &FourierField, n: u32) -> FourierField {
        match self {
            Inverse::Block(b) => b.apply(r),
            Inverse::Matrix(m) => {
                let x = m.apply(&r.low(n)).expect("defect lives on the box");
                x.restrict(|_| true).dropped(SOLVE_DROP)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PicardReport {
    pub iterations: usize,
    /// Largest ratio of successive increments.
    pub max_ratio: f64,
    pub increments: Vec<f64>,
}

fn defect_correction(
    pb: &BeamProblem,
    base: &FourierField,
    n: u32,
    g: &Inverse,
    st: &SolverSettings,
    step: usize,
) -> Result<(FourierField, PicardReport), NashMoserError> {
    let s1 = st.ms.s1;
    let mut h = pb.zero();
    let mut rep = PicardReport {
        iterations: 0,
        max_ratio: 0.0,
        increments: Vec::new(),
    };
    for it in 0..st.max_picard {
        let phi = pb.defect(&base.add(&h)?, n)?;
        let delta = g.apply(&phi, n);
        h = h.sub(&delta)?.dropped(SOLVE_DROP);
        if !h.is_finite() {
            return Err(SobolevError::NonFinite.into());
        }
        let inc = delta.hs_norm(s1);
        rep.iterations = it + 1;
        if let Some(&prev) = rep.increments.last() {
            if prev > 0.0 {
                let ratio = inc / prev;
                rep.max_ratio = rep.max_ratio.max(ratio);
                if ratio >= 1.0 && inc >= st.picard_tol {
                    return Err(NashMoserError::ContractionStall { step, ratio });
                }
            }
        }
        rep.increments.push(inc);
        if inc < st.picard_tol {
            return Ok((h, rep));
        }
    }
    Err(NashMoserError::PicardLimit {
        step,
        iterations: st.max_picard,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Membership {
    /// First-Melnikov condition at `N₀`.
    pub in_u: bool,
    /// Upper bound for `‖𝔏_N⁻¹‖₀` and the test `≤ N^τ`.
    pub inverse_norm_bound: f64,
    pub in_u_n: bool,
    /// `𝒢⁰_N` through the exact bad-θ covers (`None` when skipped).
    pub in_g0: Option<bool>,
}

impl Membership {
    pub fn member(&self) -> bool {
        self.in_u && self.in_u_n && self.in_g0 != Some(false)
    }
}

fn membership(
    pb: &BeamProblem,
    st: &SolverSettings,
    gap: &GapCheck,
    block: &BlockSolver,
    a: &FourierField,
    n: u32,
) -> Membership {
    let b = block.inverse_norm();
    let q = pb.eps.abs() * b * a.wiener_norm();
    let bound = if q < 1.0 { b / (1.0 - q) } else { f64::INFINITY };
    let in_u_n = bound <= (n as f64).powf(st.ms.tau);
    let in_g0 = if st.membership {
        let j0s = measure::j0_list(&pb.ctx.geom, n);
        let p = pb.operator(a.clone());
        Some(measure::parameter_good(&pb.ctx, &p, n, st.ms.tau, &j0s).good)
    } else {
        None
    };
    Membership {
        in_u: gap.holds,
        inverse_norm_bound: bound,
        in_u_n,
        in_g0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialReport {
    pub u: FourierField,
    pub picard: PicardReport,
    pub gap: GapCheck,
    pub u_s1: f64,
}

/// Fixed point of `U₀(u) = ε𝔏_{N₀}⁻¹P_{N₀}F(u)`.
pub fn initial_solve(pb: &BeamProblem, st: &SolverSettings) -> Result<InitialReport, NashMoserError> {
    let gap = measure::first_melnikov(&pb.ctx, &pb.operator(pb.zero()), st.n0, st.gamma, st.ms.tau1);
    let empty = PicardReport {
        iterations: 0,
        max_ratio: 0.0,
        increments: Vec::new(),
    };
    if pb.eps == 0.0 {
        return Ok(InitialReport {
            u: pb.zero(),
            picard: empty,
            gap,
            u_s1: 0.0,
        });
    }
    if pb.eps.abs() > st.eps0 {
        return Err(NashMoserError::EpsilonBudget {
            eps: pb.eps,
            eps0: st.eps0,
        });
    }
    if !gap.holds {
        return Err(NashMoserError::Gap {
            gap: gap.min_gap,
            bound: gap.bound,
            l: gap.worst_l.clone(),
            eigenvalue: gap.worst_eigenvalue,
        });
    }
    let g = Inverse::Block(BlockSolver::new(pb, st.n0));
    let (u, picard) = defect_correction(pb, &pb.zero(), st.n0, &g, st, 0)?;
    let u_s1 = u.hs_norm(st.ms.s1);
    Ok(InitialReport { u, picard, gap, u_s1 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub n: usize,
    pub big_n: u32,
    /// `‖P_{N_n}(L_λu_n − εF(u_n))‖_{s₁}`.
    pub projected_residual: f64,
    /// `‖P⊥_{N_n}(V̄u_n − εF(u_n))‖_{s₁}`.
    pub tail_residual: f64,
    /// `‖u_n − u_{n−1}‖_{s₁}`.
    pub increment_s1: f64,
    pub u_s1: f64,
    pub u_s2: f64,
    pub inversion_path: InversionPath,
    /// Multiscale was attempted and failed; the dense inverse was used.
    pub fallback: Option<String>,
    pub multiscale: Option<InvertDiagnostics>,
    pub picard: PicardReport,
    pub membership: Membership,
    /// `‖h_multiscale − h_dense‖_{s₁}` when cross-checking.
    pub cross_check: Option<f64>,
}

impl StepRecord {
    pub fn residual(&self) -> f64 {
        self.projected_residual + self.tail_residual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationState {
    pub n: usize,
    pub big_n: u32,
    pub u: FourierField,
    pub history: Vec<StepRecord>,
}

fn finish_record(
    pb: &BeamProblem,
    st: &SolverSettings,
    state: &IterationState,
) -> Result<(f64, f64, f64, f64), NashMoserError> {
    let (s1, s2) = (st.ms.s1, st.ms.s2);
    let proj = residual(pb, &state.u, state.big_n, s1)?;
    let tail = tail_residual(pb, &state.u, state.big_n, s1)?;
    Ok((proj, tail, state.u.hs_norm(s1), state.u.hs_norm(s2)))
}

/// Runs the initial solve and records step 0.
pub fn start(pb: &BeamProblem, st: &SolverSettings) -> Result<IterationState, NashMoserError> {
    let init = initial_solve(pb, st)?;
    let block = BlockSolver::new(pb, st.n0);
    let mship = membership(pb, st, &init.gap, &block, &pb.zero(), st.n0);
    let mut state = IterationState {
        n: 0,
        big_n: st.n0,
        u: init.u,
        history: Vec::new(),
    };
    let (proj, tail, u_s1, u_s2) = finish_record(pb, st, &state)?;
    state.history.push(StepRecord {
        n: 0,
        big_n: st.n0,
        projected_residual: proj,
        tail_residual: tail,
        increment_s1: u_s1,
        u_s1,
        u_s2,
        inversion_path: InversionPath::Block,
        fallback: None,
        multiscale: None,
        picard: init.picard,
        membership: mship,
        cross_check: None,
    });
    Ok(state)
}

/// `u_{n+1} = u_n + h` on `H_{N_n²}` with `h` the fixed point of the step map.
pub fn iterate_step(pb: &BeamProblem, st: &SolverSettings, state: &mut IterationState) -> Result<(), NashMoserError> {
    let step = state.n + 1;
    let n_old = state.big_n;
    let n_new = n_old.checked_mul(n_old).ok_or(NashMoserError::Inversion {
        step,
        reason: String::from("truncation overflows"),
    })?;
    let a = pb.f.derivative(&state.u)?;
    let block = BlockSolver::new(pb, n_new);
    let gap = measure::first_melnikov(&pb.ctx, &pb.operator(pb.zero()), st.n0, st.gamma, st.ms.tau1);
    let mship = membership(pb, st, &gap, &block, &a, n_new);

    let geom = &pb.ctx.geom;
    let side = 2 * n_new as usize + 1;
    let dim = side.checked_pow((geom.nu + geom.r) as u32).unwrap_or(usize::MAX);
    let mut fallback = None;
    let mut ms_diag = None;
    let mut dense_inv = None;
    let (g, path) = if dim <= st.assemble_limit {
        let l0 = vec![0; geom.nu];
        let j0 = vec![0; geom.r];
        let lin = assemble(&pb.ctx, &pb.operator(a.clone()), n_new, &l0, &j0);
        match multiscale::invert(&lin, n_old, n_new, &st.ms) {
            Ok((inv, diag)) => {
                ms_diag = Some(diag);
                if st.cross_check {
                    dense_inv = multiscale::dense_inverse(&lin);
                }
                (Inverse::Matrix(inv), InversionPath::Multiscale)
            }
            Err(e) => {
                fallback = Some(format!("{e}"));
                let inv = multiscale::dense_inverse(&lin).ok_or(NashMoserError::Inversion {
                    step,
                    reason: String::from("dense inverse failed"),
                })?;
                (Inverse::Matrix(inv), InversionPath::Dense)
            }
        }
    } else {
        (Inverse::Block(block), InversionPath::Block)
    };
    let (h, picard) = defect_correction(pb, &state.u, n_new, &g, st, step)?;
    let cross_check = match dense_inv {
        Some(d) => {
            let (h2, _) = defect_correction(pb, &state.u, n_new, &Inverse::Matrix(d), st, step)?;
            Some(h.sub(&h2)?.hs_norm(st.ms.s1))
        }
        None => None,
    };
    let inc = h.hs_norm(st.ms.s1);
    state.u = state.u.add(&h)?;
    state.n = step;
    state.big_n = n_new;
    let (proj, tail, u_s1, u_s2) = finish_record(pb, st, state)?;
    state.history.push(StepRecord {
        n: step,
        big_n: n_new,
        projected_residual: proj,
        tail_residual: tail,
        increment_s1: inc,
        u_s1,
        u_s2,
        inversion_path: path,
        fallback,
        multiscale: ms_diag,
        picard,
        membership: mship,
        cross_check,
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Converged,
    /// `λ` left the good set at this step.
    CantorExcluded(usize),
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub status: Status,
    pub steps: Vec<StepRecord>,
    pub final_residual: f64,
    /// `ε N₀^{s₂}`, the size of the smallness quantity of the existence theory.
    pub smallness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub u: FourierField,
    pub big_n: u32,
    pub certificate: Certificate,
}

pub fn solve(pb: &BeamProblem, st: &SolverSettings) -> Result<Solution, NashMoserError> {
    let smallness = pb.eps.abs() * (st.n0 as f64).powf(st.ms.s2);
    let mut state = match start(pb, st) {
        Ok(s) => s,
        Err(NashMoserError::Gap { .. }) => {
            let gap = measure::first_melnikov(&pb.ctx, &pb.operator(pb.zero()), st.n0, st.gamma, st.ms.tau1);
            let block = BlockSolver::new(pb, st.n0);
            let mship = membership(pb, st, &gap, &block, &pb.zero(), st.n0);
            let rec = StepRecord {
                n: 0,
                big_n: st.n0,
                projected_residual: f64::NAN,
                tail_residual: f64::NAN,
                increment_s1: 0.0,
                u_s1: 0.0,
                u_s2: 0.0,
                inversion_path: InversionPath::Block,
                fallback: None,
                multiscale: None,
                picard: PicardReport {
                    iterations: 0,
                    max_ratio: 0.0,
                    increments: Vec::new(),
                },
                membership: mship,
                cross_check: None,
            };
            return Ok(Solution {
                u: pb.zero(),
                big_n: st.n0,
                certificate: Certificate {
                    status: Status::CantorExcluded(0),
                    steps: vec![rec],
                    final_residual: f64::NAN,
                    smallness,
                },
            });
        }
        Err(e) => return Err(e),
    };
    let status = loop {
        let last = state.history.last().unwrap();
        if !last.membership.member() {
            break Status::CantorExcluded(state.n);
        }
        if pb.eps == 0.0 || (last.residual() <= st.tol && state.n >= st.min_steps) {
            break Status::Converged;
        }
        if state.n >= st.max_steps {
            break Status::MaxSteps;
        }
        iterate_step(pb, st, &mut state)?;
    };
    let final_residual = state.history.last().unwrap().residual();
    Ok(Solution {
        u: state.u,
        big_n: state.big_n,
        certificate: Certificate {
            status,
            steps: state.history,
            final_residual,
            smallness,
        },
    })
}

/// Central difference `(u(λ+h) − u(λ−h))/2h` at a common truncation.
pub fn lambda_derivative(pb: &BeamProblem, st: &SolverSettings, h: f64) -> Result<FourierField, NashMoserError> {
    let plus = solve(&pb.with_lambda(pb.lambda + h), st)?;
    let minus = solve(&pb.with_lambda(pb.lambda - h), st)?;
    for s in [&plus, &minus] {
        if s.certificate.status != Status::Converged {
            return Err(NashMoserError::Inversion {
                step: s.certificate.steps.len(),
                reason: String::from("neighbouring parameter not converged"),
            });
        }
    }
    Ok(plus.u.sub(&minus.u)?.scale_re(0.5 / h))
}

/// Site list of `H_N` (for callers that need an explicit basis).
pub fn galerkin_sites(pb: &BeamProblem, n: u32) -> Vec<SiteIndex> {
    let geom = &pb.ctx.geom;
    geom.enumerate_box(&geom.site(&vec![0; geom.nu], &vec![0; geom.r]), n, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeGeometry;
    use crate::sobolev::Polynomial;

    fn c(x: f64) -> Complex64 {
        Complex64::new(x, 0.0)
    }

    fn problem(eps: f64, f: Polynomial) -> (BeamProblem, SolverSettings) {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let ctx = NormContext::new(g.clone(), 2.0).unwrap();
        let vbar = FourierField::from_modes(g.clone(), &[(&[0], &[1], c(0.05)), (&[0], &[-1], c(0.05))]);
        let w = (5f64.sqrt() - 1.0) / 2.0;
        let pb = BeamProblem::new(ctx.clone(), eps, 1.0, vec![w], 1.0, vbar, Arc::new(f)).unwrap();
        let mut st = SolverSettings::desk(&ctx, 4, 0.1);
        st.membership = false;
        (pb, st)
    }

    fn forcing(g: &Arc<LatticeGeometry>) -> FourierField {
        FourierField::from_modes(
            g.clone(),
            &[
                (&[1], &[1], c(0.25)),
                (&[1], &[-1], c(0.25)),
                (&[-1], &[1], c(0.25)),
                (&[-1], &[-1], c(0.25)),
            ],
        )
    }

    fn cubic(g: &Arc<LatticeGeometry>) -> Polynomial {
        Polynomial::new(vec![(3, FourierField::constant(g.clone(), 1.0)), (0, forcing(g))])
    }

    #[test]
    fn zero_eps_gives_zero() {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let (pb, st) = problem(0.0, cubic(&g));
        let sol = solve(&pb, &st).unwrap();
        assert!(sol.u.is_empty());
        assert_eq!(sol.certificate.status, Status::Converged);
        assert_eq!(sol.certificate.final_residual, 0.0);
    }

    #[test]
    fn pure_forcing_is_one_solve() {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let (pb, st) = problem(1e-3, Polynomial::new(vec![(0, forcing(&g))]));
        let init = initial_solve(&pb, &st).unwrap();
        let want = BlockSolver::new(&pb, st.n0).apply(&forcing(&g)).scale_re(1e-3);
        assert!(init.u.sub(&want).unwrap().hs_norm(0.0) < 1e-18);
        assert!(init.picard.increments[1] < 1e-16);
    }

    #[test]
    fn residual_paths_agree() {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let (pb, st) = problem(1e-3, cubic(&g));
        let u = initial_solve(&pb, &st).unwrap().u.add(&forcing(&g).scale_re(1e-2)).unwrap();
        let a = residual(&pb, &u, 4, 6.5).unwrap();
        let b = residual_assembled(&pb, &u, 4, 6.5).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{a} {b}");
    }

    #[test]
    fn linear_step_is_exact() {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let f = Polynomial::new(vec![(1, FourierField::constant(g.clone(), 0.5)), (0, forcing(&g))]);
        let (pb, st) = problem(1e-3, f);
        let init = initial_solve(&pb, &st).unwrap();
        let lin = OperatorParams {
            eps: 0.0,
            ..pb.operator(pb.zero())
        };
        let a = assemble(&pb.ctx, &lin, 4, &[0], &[0]);
        let mut m = a.to_dense();
        for k in 0..m.nrows() {
            m[(k, k)] -= c(0.5e-3);
        }
        let inv = DecayMatrix::from_dense(a.ctx(), a.col_sites().clone(), a.row_sites().clone(), &dense::inverse(&m).unwrap());
        let want = inv.apply(&forcing(&g)).unwrap().scale_re(1e-3);
        assert!(init.u.sub(&want).unwrap().hs_norm(2.0) < 1e-15);
    }

    #[test]
    fn multiscale_step_matches_dense() {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let (pb, mut st) = problem(1e-3, cubic(&g));
        st.n0 = 2;
        st.cross_check = true;
        let mut state = start(&pb, &st).unwrap();
        iterate_step(&pb, &st, &mut state).unwrap();
        let rec = &state.history[1];
        assert_eq!(rec.big_n, 4);
        assert_eq!(rec.inversion_path, InversionPath::Multiscale);
        assert!(rec.cross_check.unwrap() < 1e-8);
        assert!(rec.projected_residual < 1e-12);
    }

    #[test]
    fn budget_violation_is_named() {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let (pb, st) = problem(5e-2, cubic(&g));
        assert!(matches!(solve(&pb, &st), Err(NashMoserError::EpsilonBudget { .. })));
    }
}
