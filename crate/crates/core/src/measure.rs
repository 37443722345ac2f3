//! Small-divisor bookkeeping: Diophantine checks, bad-θ interval covers,
//! parameter goodness and λ-grid scans.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

use crate::decay_matrix::{DecayMatrix, NormContext};
use crate::dense::{self, CMat};
use crate::lattice::LatticeGeometry;
use crate::linop::{assemble, spatial_eigenvalues, OperatorParams};
use crate::par;

/// Bisection tolerance for sweep crossings.
pub const BISECT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalCover {
    /// Disjoint closed intervals in increasing order.
    pub intervals: Vec<(f64, f64)>,
    pub count_budget: f64,
    pub length_budget: f64,
}

impl IntervalCover {
    /// Merges overlapping input intervals.
    pub fn new(mut raw: Vec<(f64, f64)>, count_budget: f64, length_budget: f64) -> Self {
        raw.retain(|(a, b)| b >= a);
        raw.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(raw.len());
        for (a, b) in raw {
            match out.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        IntervalCover {
            intervals: out,
            count_budget,
            length_budget,
        }
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn total_measure(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    pub fn max_length(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).fold(0.0, f64::max)
    }

    /// Number of intervals of length `≤ length_budget` needed to cover the
    /// set: `Σ max(1, ⌈len/η⌉)`.
    pub fn covering_count(&self) -> f64 {
        let eta = self.length_budget;
        self.intervals
            .iter()
            .map(|(a, b)| {
                if eta <= 0.0 {
                    f64::INFINITY
                } else {
                    ((b - a) / eta).ceil().max(1.0)
                }
            })
            .sum()
    }

    /// Coverable by at most `count_budget` intervals of measure `≤ η`.
    pub fn within_budget(&self) -> bool {
        self.is_empty() || self.covering_count() <= self.count_budget
    }

    /// The merged intervals themselves meet both budgets.
    pub fn raw_within_budget(&self) -> bool {
        self.len() as f64 <= self.count_budget && self.max_length() <= self.length_budget
    }

    pub fn contains(&self, x: f64) -> bool {
        let i = self.intervals.partition_point(|iv| iv.1 < x);
        i < self.intervals.len() && self.intervals[i].0 <= x
    }

    /// Measure of `[lo, hi] ∩ cover`.
    pub fn measure_within(&self, lo: f64, hi: f64) -> f64 {
        self.intervals
            .iter()
            .map(|&(a, b)| (b.min(hi) - a.max(lo)).max(0.0))
            .sum()
    }

    /// Measure of the symmetric difference.
    pub fn symmetric_difference(&self, other: &IntervalCover) -> f64 {
        let both = intersect(&self.intervals, &other.intervals);
        self.total_measure() + other.total_measure() - 2.0 * both
    }

    /// Up to `k` points of `[lo, hi]` outside the cover: midpoints of the
    /// largest gaps, in increasing order.
    pub fn complement_points(&self, lo: f64, hi: f64, k: usize) -> Vec<f64> {
        let mut gaps = Vec::new();
        let mut cur = lo;
        for &(a, b) in &self.intervals {
            if a > cur {
                gaps.push((cur, a.min(hi)));
            }
            cur = cur.max(b);
            if cur >= hi {
                break;
            }
        }
        if cur < hi {
            gaps.push((cur, hi));
        }
        gaps.retain(|(a, b)| b > a);
        gaps.sort_by(|x, y| (y.1 - y.0).partial_cmp(&(x.1 - x.0)).unwrap().then(x.0.partial_cmp(&y.0).unwrap()));
        let mut pts: Vec<f64> = gaps.iter().take(k).map(|(a, b)| 0.5 * (a + b)).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts
    }
}

fn intersect(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j, mut m) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            m += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diophantine {
    pub holds: bool,
    /// `l` minimizing `|ω₀·l| − 2γ₀|l|^{−ν}`.
    pub worst: Vec<i32>,
    pub margin: f64,
}

/// Brute force `|ω₀·l| ≥ 2γ₀|l|^{−ν}` over `0 < |l| ≤ L`.
pub fn diophantine_check(omega0: &[f64], gamma0: f64, lmax: u32) -> Diophantine {
    let nu = omega0.len();
    let lm = lmax as i32;
    let mut l = vec![-lm; nu];
    let mut best = (f64::INFINITY, vec![0; nu]);
    if nu == 0 {
        return Diophantine {
            holds: true,
            worst: Vec::new(),
            margin: f64::INFINITY,
        };
    }
    loop {
        let norm = l.iter().map(|x| x.unsigned_abs()).max().unwrap();
        if norm > 0 {
            let dot: f64 = omega0.iter().zip(&l).map(|(w, &k)| w * k as f64).sum();
            let m = dot.abs() - 2.0 * gamma0 * (norm as f64).powi(-(nu as i32));
            if m < best.0 {
                best = (m, l.clone());
            }
        }
        let mut k = nu;
        loop {
            if k == 0 {
                return Diophantine {
                    holds: best.0 >= 0.0,
                    worst: best.1,
                    margin: best.0,
                };
            }
            k -= 1;
            if l[k] < lm {
                l[k] += 1;
                for x in l.iter_mut().skip(k + 1) {
                    *x = -lm;
                }
                break;
            }
        }
    }
}

/// `N^{−τ}`.
pub fn eta(n: u32, tau: f64) -> f64 {
    (n as f64).powf(-tau)
}

/// `N^{ν+d+r+5}`.
pub fn count_budget(geom: &LatticeGeometry, n: u32) -> f64 {
    (n as f64).powi((geom.nu + geom.d + geom.r + 5) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoverMode {
    Exact,
    Sweep { resolution: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverReport {
    pub cover: IntervalCover,
    pub eta: f64,
    /// Eigenvalue widening `ε‖T″‖₀` applied in exact mode.
    pub widening: f64,
    pub evaluations: usize,
}

/// Time indices `|l| ≤ N` in lexicographic order.
pub fn time_indices(nu: usize, n: u32) -> Vec<Vec<i32>> {
    let n = n as i32;
    let mut out = Vec::new();
    let mut l = vec![-n; nu];
    loop {
        out.push(l.clone());
        let mut k = nu;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if l[k] < n {
                l[k] += 1;
                for x in l.iter_mut().skip(k + 1) {
                    *x = -n;
                }
                break;
            }
        }
    }
}

/// Closed-form θ-intervals with `|x² − λ̂| ≤ h`, `x = θ + λω₀·l`.
fn resonance_intervals(freqs: &[f64], lhat: &[f64], h: f64) -> Vec<(f64, f64)> {
    let mut raw = Vec::new();
    for &f in freqs {
        for &lh in lhat {
            if lh + h < 0.0 {
                continue;
            }
            let outer = (lh + h).sqrt();
            if lh - h <= 0.0 {
                raw.push((-outer - f, outer - f));
            } else {
                let inner = (lh - h).sqrt();
                raw.push((-outer - f, -inner - f));
                raw.push((inner - f, outer - f));
            }
        }
    }
    raw
}

/// Cover of `ℬ⁰_N(j₀) = {θ : 𝒜_{N,j₀}(θ) has an eigenvalue of modulus ≤ N^{−τ}}`
/// intersected with `range` (all of `R` when `None`, exact mode only).
pub fn bad_theta_cover(
    ctx: &Arc<NormContext>,
    p: &OperatorParams,
    n: u32,
    j0: &[i32],
    range: Option<(f64, f64)>,
    tau: f64,
    mode: CoverMode,
) -> CoverReport {
    let geom = &ctx.geom;
    let e = eta(n, tau);
    let budget = count_budget(geom, n);
    match mode {
        CoverMode::Exact => {
            let widening = p.eps.abs() * p.a.wiener_norm();
            let lhat = spatial_eigenvalues(ctx, p, n, j0);
            let freqs: Vec<f64> = time_indices(geom.nu, n).iter().map(|l| p.frequency(l)).collect();
            let mut raw = resonance_intervals(&freqs, &lhat, e + widening);
            if let Some((lo, hi)) = range {
                raw = raw
                    .into_iter()
                    .filter(|&(a, b)| b >= lo && a <= hi)
                    .map(|(a, b)| (a.max(lo), b.min(hi)))
                    .collect();
            }
            CoverReport {
                cover: IntervalCover::new(raw, budget, e),
                eta: e,
                widening,
                evaluations: 0,
            }
        }
        CoverMode::Sweep { resolution } => {
            let (lo, hi) = range.expect("sweep needs a finite theta range");
            let l0 = vec![0; geom.nu];
            let a0 = assemble(ctx, &p.with_theta(0.0), n, &l0, j0);
            let comps = a0.components();
            let res = par::map(&comps, |c| sweep_component(&a0, c, p, e, lo, hi, resolution));
            let mut raw = Vec::new();
            let mut evals = 0;
            for (iv, k) in res {
                raw.extend(iv);
                evals += k;
            }
            CoverReport {
                cover: IntervalCover::new(raw, budget, e),
                eta: e,
                widening: 0.0,
                evaluations: evals,
            }
        }
    }
}

/// One connected block of `𝒜(θ) = 𝒜(0) + diag(f_l² − (f_l+θ)²)`.
struct ThetaBlock {
    base: CMat,
    freqs: Vec<f64>,
}

impl ThetaBlock {
    fn new(a0: &DecayMatrix, comp: &[usize], p: &OperatorParams) -> Self {
        let sites = a0.row_sites();
        let mut comps = Vec::new();
        let mut freqs = Vec::new();
        for &i in comp {
            let f = p.frequency(&sites.sites()[i].l);
            for c in sites.start(i)..sites.start(i + 1) {
                comps.push(c);
                freqs.push(f);
            }
        }
        let mut base = CMat::zeros(comps.len(), comps.len());
        for (a, &r) in comps.iter().enumerate() {
            for (b, &c) in comps.iter().enumerate() {
                base[(a, b)] = a0.get(r, c);
            }
        }
        ThetaBlock { base, freqs }
    }

    fn min_modulus(&self, theta: f64) -> f64 {
        let mut m = self.base.clone();
        for (k, f) in self.freqs.iter().enumerate() {
            m[(k, k)] += Complex64::new(f * f - (f + theta) * (f + theta), 0.0);
        }
        dense::hermitian_eigenvalues(&m)
            .iter()
            .map(|x| x.abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// `max_l |f_l + θ|`.
    fn reach(&self, theta: f64) -> f64 {
        self.freqs.iter().map(|f| (f + theta).abs()).fold(0.0, f64::max)
    }

    /// Largest `Δ` with `max_l |2x_lΔ + Δ²| ≤ v`, `x_l = f_l + θ`.
    fn safe_step(&self, theta: f64, v: f64) -> f64 {
        let c = self.reach(theta);
        v / (c + (c * c + v).sqrt())
    }
}

fn sweep_component(
    a0: &DecayMatrix,
    comp: &[usize],
    p: &OperatorParams,
    eta: f64,
    lo: f64,
    hi: f64,
    resolution: f64,
) -> (Vec<(f64, f64)>, usize) {
    let blk = ThetaBlock::new(a0, comp, p);
    let mut evals = 0usize;
    let mut g = |t: f64| {
        evals += 1;
        blk.min_modulus(t) - eta
    };
    let mut out = Vec::new();
    let mut t = lo;
    let mut v = g(t);
    let mut start = if v <= 0.0 { Some(lo) } else { None };
    while t < hi {
        let safe = blk.safe_step(t, v.abs());
        let step = safe.max(resolution);
        let tn = (t + step).min(hi);
        let vn = g(tn);
        let inside_a = v <= 0.0;
        if inside_a != (vn <= 0.0) {
            let x = bisect(&mut g, t, tn, inside_a);
            if inside_a {
                out.push((start.take().unwrap(), x.0));
            } else {
                start = Some(x.1);
            }
        } else if tn - t > safe {
            // A forced step may hide a short excursion to the other side.
            let lip = 2.0 * (blk.reach(t) + (tn - t));
            if v.abs() + vn.abs() <= lip * (tn - t) {
                let sign = if inside_a { -1.0 } else { 1.0 };
                let (m, hm) = golden_min(&mut g, t, tn, sign);
                if hm <= 0.0 {
                    let enter = bisect(&mut g, t, m, inside_a);
                    let leave = bisect(&mut g, m, tn, !inside_a);
                    if inside_a {
                        out.push((start.take().unwrap(), enter.0));
                        start = Some(leave.1);
                    } else {
                        out.push((enter.1, leave.0));
                    }
                }
            }
        }
        t = tn;
        v = vn;
    }
    if let Some(s) = start {
        out.push((s, hi));
    }
    (out, evals)
}

/// Brackets the sign change of `g` on `[a, b]` to `BISECT_TOL`; `inside_a`
/// says whether `g(a) ≤ 0`. Returns the last point on `a`'s side and the
/// first on the other.
fn bisect(g: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64, inside_a: bool) -> (f64, f64) {
    while b - a > BISECT_TOL {
        let m = 0.5 * (a + b);
        if (g(m) <= 0.0) == inside_a {
            a = m;
        } else {
            b = m;
        }
    }
    (a, b)
}

/// Golden-section minimum of `sign·g` on `[a, b]`.
fn golden_min(g: &mut impl FnMut(f64) -> f64, mut a: f64, mut b: f64, sign: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = sign * g(c);
    let mut fd = sign * g(d);
    while b - a > BISECT_TOL {
        if fc <= 0.0 {
            return (c, fc);
        }
        if fd <= 0.0 {
            return (d, fd);
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = sign * g(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = sign * g(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// `min |eig 𝒜|` of a self-adjoint decay matrix, block by connected component.
pub fn min_eig_modulus(a: &DecayMatrix) -> f64 {
    let comps = a.components();
    let sites = a.row_sites().clone();
    let vals = par::map(&comps, |c| {
        let idx: Vec<usize> = c
            .iter()
            .flat_map(|&i| sites.start(i)..sites.start(i + 1))
            .collect();
        let m = CMat::from_fn(idx.len(), idx.len(), |x, y| a.get(idx[x], idx[y]));
        dense::hermitian_eigenvalues(&m)
            .iter()
            .map(|x| x.abs())
            .fold(f64::INFINITY, f64::min)
    });
    vals.into_iter().fold(f64::INFINITY, f64::min)
}

/// `min |eig 𝒜_{N,j₀}(θ)|`.
pub fn min_eig_at(ctx: &Arc<NormContext>, p: &OperatorParams, n: u32, j0: &[i32], theta: f64) -> f64 {
    let l0 = vec![0; ctx.geom.nu];
    min_eig_modulus(&assemble(ctx, &p.with_theta(theta), n, &l0, j0))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GapError {
    #[error("matrices must be self-adjoint")]
    NotSelfAdjoint,
    #[error("dimension mismatch")]
    Dimension,
}

/// `(max_k |e_k(M1) − e_k(M2)|, ‖M1 − M2‖₀)` with sorted eigenvalues.
pub fn eigenvalue_lipschitz_gap(m1: &CMat, m2: &CMat) -> Result<(f64, f64), GapError> {
    if m1.shape() != m2.shape() || m1.nrows() != m1.ncols() {
        return Err(GapError::Dimension);
    }
    for m in [m1, m2] {
        if dense::hermitian_defect(m) > 1e-12 * dense::max_abs(m).max(1.0) {
            return Err(GapError::NotSelfAdjoint);
        }
    }
    let e1 = dense::hermitian_eigenvalues(m1);
    let e2 = dense::hermitian_eigenvalues(m2);
    let shift = e1
        .iter()
        .zip(&e2)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((shift, dense::op_norm(&(m1 - m2))))
}

/// Spatial indices `j₀` with `|j₀| ≤ (b₁+3)N/b₁` (in the lattice).
pub fn j0_list(geom: &LatticeGeometry, n: u32) -> Vec<Vec<i32>> {
    let rad = ((geom.b1 + 3.0) * n as f64 / geom.b1).floor() as u32;
    let l0 = vec![0; geom.nu];
    let z = vec![0; geom.r];
    geom.enumerate_box(&geom.site(&l0, &z), rad, None)
        .into_iter()
        .filter(|s| s.l.iter().all(|&x| x == 0))
        .map(|s| s.j.to_vec())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGood {
    pub good: bool,
    /// `(j₀, covering count)` with the largest count.
    pub worst: Option<(Vec<i32>, f64)>,
    pub budget: f64,
}

/// `λ` is good when `ℬ⁰_N(j₀)` fits the budgets for every listed `j₀`;
/// since `ℬ_N(j₀) ⊂ ℬ⁰_N(j₀)` this certifies N-goodness.
pub fn parameter_good(
    ctx: &Arc<NormContext>,
    p: &OperatorParams,
    n: u32,
    tau: f64,
    j0s: &[Vec<i32>],
) -> ParameterGood {
    let covers = par::map(j0s, |j0| {
        bad_theta_cover(ctx, p, n, j0, None, tau, CoverMode::Exact).cover
    });
    let budget = count_budget(&ctx.geom, n);
    let mut worst: Option<(Vec<i32>, f64)> = None;
    let mut good = true;
    for (j0, c) in j0s.iter().zip(&covers) {
        let k = c.covering_count();
        good &= c.within_budget();
        if worst.as_ref().is_none_or(|w| k > w.1) {
            worst = Some((j0.clone(), k));
        }
    }
    ParameterGood { good, worst, budget }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapCheck {
    pub holds: bool,
    /// `min |−(λω₀·l)² + λ̂_{j,p}|` over `|l| ≤ N₀` and the spatial spectrum.
    pub min_gap: f64,
    pub bound: f64,
    /// Minimizing time index and spatial eigenvalue.
    pub worst_l: Vec<i32>,
    pub worst_eigenvalue: f64,
}

/// First-Melnikov condition `|−(λω₀·l)² + λ̂_{j,p}| ≥ γN₀^{−τ₁}`, with `λ̂`
/// the eigenvalues of the spatial block on `|j| ≤ N₀`.
pub fn first_melnikov(ctx: &Arc<NormContext>, p: &OperatorParams, n0: u32, gamma: f64, tau1: f64) -> GapCheck {
    let z = vec![0; ctx.geom.r];
    let lhat = spatial_eigenvalues(ctx, p, n0, &z);
    first_melnikov_with(&lhat, &time_indices(ctx.geom.nu, n0), p, n0, gamma, tau1)
}

fn first_melnikov_with(lhat: &[f64], ls: &[Vec<i32>], p: &OperatorParams, n0: u32, gamma: f64, tau1: f64) -> GapCheck {
    let bound = gamma * (n0 as f64).powf(-tau1);
    let mut best = (f64::INFINITY, Vec::new(), 0.0);
    for l in ls {
        let f = p.frequency(l);
        for &lh in lhat {
            let g = (lh - f * f).abs();
            if g < best.0 {
                best = (g, l.clone(), lh);
            }
        }
    }
    GapCheck {
        holds: best.0 >= bound,
        min_gap: best.0,
        bound,
        worst_l: best.1,
        worst_eigenvalue: best.2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanSettings {
    pub grid: usize,
    pub gamma: f64,
    pub n0: u32,
    pub tau1: f64,
    pub n: u32,
    pub tau: f64,
    /// Skip the `𝒢⁰_N` test (cost grows with the number of `j₀`).
    pub check_good: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub lambda: f64,
    pub in_u: bool,
    pub in_u_n: bool,
    pub n_good: Option<bool>,
    /// `min |−(λω₀·l)² + λ̂_{j,p}|` over `|l|, |j| ≤ N₀`.
    pub min_gap: f64,
    pub min_eig: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub points: Vec<ScanPoint>,
    pub excluded_u: f64,
    pub excluded_u_n: f64,
    pub excluded_good: Option<f64>,
    /// Grid fractions carry a `±1/grid` resolution bar.
    pub resolution: f64,
}

/// Grid `λ_k = ½ + (k + ½)/grid`.
pub fn lambda_grid(grid: usize) -> Vec<f64> {
    (0..grid).map(|k| 0.5 + (k as f64 + 0.5) / grid as f64).collect()
}

pub fn scan_lambda(ctx: &Arc<NormContext>, base: &OperatorParams, st: &ScanSettings) -> ScanReport {
    let geom = &ctx.geom;
    let z = vec![0; geom.r];
    let l0 = vec![0; geom.nu];
    let lhat0 = spatial_eigenvalues(ctx, base, st.n0, &z);
    let ls = time_indices(geom.nu, st.n0);
    let eta_n = eta(st.n, st.tau);
    let j0s = j0_list(geom, st.n);
    let lams = lambda_grid(st.grid);
    let points = par::map(&lams, |&lam| {
        let p = base.with_lambda(lam).with_theta(0.0);
        let gap = first_melnikov_with(&lhat0, &ls, &p, st.n0, st.gamma, st.tau1);
        let a = assemble(ctx, &p, st.n, &l0, &z);
        let min_eig = min_eig_modulus(&a);
        let n_good = if st.check_good {
            Some(parameter_good(ctx, &p, st.n, st.tau, &j0s).good)
        } else {
            None
        };
        ScanPoint {
            lambda: lam,
            in_u: gap.holds,
            in_u_n: min_eig >= eta_n,
            n_good,
            min_gap: gap.min_gap,
            min_eig,
        }
    });
    let g = st.grid as f64;
    let frac = |f: &dyn Fn(&ScanPoint) -> bool| points.iter().filter(|x| !f(x)).count() as f64 / g;
    let excluded_u = frac(&|x| x.in_u);
    let excluded_u_n = frac(&|x| x.in_u_n);
    let excluded_good = if st.check_good {
        Some(frac(&|x| x.n_good == Some(true)))
    } else {
        None
    };
    ScanReport {
        points,
        excluded_u,
        excluded_u_n,
        excluded_good,
        resolution: 1.0 / g,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sobolev::FourierField;

    fn setup(m: f64) -> (Arc<NormContext>, OperatorParams) {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let ctx = NormContext::new(g.clone(), 2.0).unwrap();
        let p = OperatorParams::new(0.0, 1.0, vec![0.618_034], 0.0, m, FourierField::zero(g.clone()), FourierField::zero(g)).unwrap();
        (ctx, p)
    }

    #[test]
    fn diophantine_examples() {
        assert!(diophantine_check(&[1.0], 0.4, 100).holds);
        let d = diophantine_check(&[0.6, -0.3], 0.01, 5);
        assert!(!d.holds);
        assert_eq!(d.worst.len(), 2);
        let w = [1.0, 2f64.sqrt() - 1.0];
        let nrm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let d = diophantine_check(&[w[0] / nrm, w[1] / nrm], 0.05, 200);
        assert!(d.holds && d.margin > 0.0);
    }

    #[test]
    fn closed_form_cover() {
        let (ctx, p) = setup(1.0);
        let n = 2;
        let tau = 3.0;
        let e = eta(n, tau);
        let r = bad_theta_cover(&ctx, &p, n, &[0], None, tau, CoverMode::Exact);
        // j = 0 with l = 0: λ̂ = 1 gives intervals centered at ±1
        let hw = e / 2.0;
        assert!(r.cover.contains(1.0) && r.cover.contains(-1.0));
        assert!(r.cover.contains(1.0 + 0.9 * hw) && !r.cover.contains(1.0 + 1.2 * hw));
        let empty = bad_theta_cover(&ctx, &p, n, &[0], None, f64::INFINITY, CoverMode::Exact);
        assert_eq!(empty.cover.total_measure(), 0.0);
    }

    #[test]
    fn far_j0_is_empty_near_origin() {
        let (ctx, p) = setup(1.0);
        let n = 2u32;
        let j0 = [(4 * n + 1) as i32 + 2];
        let r = bad_theta_cover(&ctx, &p, n, &j0, Some((-3.0 * n as f64, 3.0 * n as f64)), 4.0, CoverMode::Exact);
        assert!(r.cover.is_empty());
    }

    #[test]
    fn sweep_matches_exact() {
        let (ctx, p) = setup(1.0);
        let n = 2;
        let tau = 2.0;
        let range = Some((-2.5, 2.5));
        let e = bad_theta_cover(&ctx, &p, n, &[1], range, tau, CoverMode::Exact);
        let res = eta(n, tau) / 8.0;
        let s = bad_theta_cover(&ctx, &p, n, &[1], range, tau, CoverMode::Sweep { resolution: res });
        assert!(!e.cover.is_empty());
        assert!(e.cover.symmetric_difference(&s.cover) <= 2.0 * res);
    }

    #[test]
    fn lipschitz_gap_diag() {
        let a = CMat::from_diagonal(&nalgebra::DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0)]));
        let b = a.map(|z| if z.re != 0.0 { z + 0.1 } else { z });
        let (s, d) = eigenvalue_lipschitz_gap(&a, &b).unwrap();
        assert!((s - 0.1).abs() < 1e-14 && (d - 0.1).abs() < 1e-14);
        assert_eq!(eigenvalue_lipschitz_gap(&a, &a).unwrap().0, 0.0);
    }

    #[test]
    fn cover_algebra() {
        let c = IntervalCover::new(vec![(0.0, 1.0), (0.5, 2.0), (3.0, 3.5)], 10.0, 1.0);
        assert_eq!(c.intervals, vec![(0.0, 2.0), (3.0, 3.5)]);
        assert_eq!(c.covering_count(), 3.0);
        assert!(c.within_budget() && !c.raw_within_budget());
        let d = IntervalCover::new(vec![(1.0, 3.25)], 10.0, 1.0);
        assert!((c.symmetric_difference(&d) - 2.25).abs() < 1e-15);
        let zero = IntervalCover::new(vec![(0.0, 0.1)], 0.0, 1.0);
        assert!(!zero.within_budget());
    }
}
