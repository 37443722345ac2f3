//! Site classification, N-goodness, bad-site clusters and the four-stage
//! multiscale inversion.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

use crate::decay_matrix::{
    perturb_left_inverse, perturb_left_inverse_with, DecayError, DecayMatrix, NeumannReport,
    SiteSet, DENSE_LIMIT,
};
use crate::dense::{self, CMat};
use crate::lattice::{diameter, distance, distance_to_set, BoxRegion, LatticeGeometry, SiteIndex};
use crate::linop::varrho;
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleParams {
    pub tau: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub delta: f64,
    pub chi0: f64,
    pub chi: f64,
    pub c1: f64,
    /// `Θ̃`; `None` means `2(1 + |𝒬|_{s₀})` measured on the matrix.
    pub theta: Option<f64>,
    /// `Υ`; `None` means the measured `|𝒬|_{s₁−ϱ}`.
    pub upsilon: Option<f64>,
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub sigma: f64,
    pub varrho: f64,
    pub nu_r: f64,
}

impl MultiscaleParams {
    /// The asymptotic constants of the iteration with `C₁ = 2`.
    pub fn asymptotic(geom: &LatticeGeometry) -> Self {
        let (nu, d, r) = (geom.nu as f64, geom.d as f64, geom.r as f64);
        let c1 = 2.0;
        let delta = 0.25;
        let tau1 = 3.0 * nu + d + 1.0;
        let chi0 = 3.0 * c1 + 9.0;
        let tau = (tau1 + 3.0).max(2.0 * chi0 * nu + 1.0);
        let tau2 = 3.0 * tau + 2.0 * (nu + r) + (nu + d);
        let s0 = nu + d;
        let s1 = 12.0 * chi0 * (tau + (nu + r) + (nu + d));
        let s2 = 12.0 * tau2 + 8.0 * s1 + 12.0;
        MultiscaleParams {
            tau,
            tau1,
            tau2,
            delta,
            chi0,
            chi: chi0,
            c1,
            theta: None,
            upsilon: None,
            s0,
            s1,
            s2,
            sigma: tau2 + 3.0 * delta * s1 + 3.0,
            varrho: varrho(geom),
            nu_r: nu + r,
        }
    }

    /// Desk-scale preset: same exponent formulas for `τ₁, τ₂`, with
    /// `τ = τ₁ + 3`, `χ₀ = 2`, `s₁ = s₀ + ϱ + 2`, `s₂ = s₁ + 4`.
    pub fn desk(geom: &LatticeGeometry) -> Self {
        let (nu, d, r) = (geom.nu as f64, geom.d as f64, geom.r as f64);
        let delta = 0.25;
        let tau1 = 3.0 * nu + d + 1.0;
        let tau = tau1 + 3.0;
        let tau2 = 3.0 * tau + 2.0 * (nu + r) + (nu + d);
        let s0 = nu + d;
        let rho = varrho(geom);
        let s1 = s0 + rho + 2.0;
        MultiscaleParams {
            tau,
            tau1,
            tau2,
            delta,
            chi0: 2.0,
            chi: 2.0,
            c1: 2.0,
            theta: None,
            upsilon: None,
            s0,
            s1,
            s2: s1 + 4.0,
            sigma: tau2 + 3.0 * delta * s1 + 3.0,
            varrho: rho,
            nu_r: nu + r,
        }
    }

    /// `𝔢 = τ₂ + ν + r + s₀`.
    pub fn e(&self) -> f64 {
        self.tau2 + self.nu_r + self.s0
    }

    /// Sobolev indices probed by the N-good test.
    pub fn good_indices(&self) -> [f64; 2] {
        [self.s0, self.s1 - self.varrho]
    }

    /// Indices at which stage norms and the final bound are reported.
    pub fn report_indices(&self) -> Vec<f64> {
        let mut v = vec![self.s0, self.s1 - self.varrho, self.s1, self.s2];
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MultiscaleError {
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("(A1) fails: |Q|_(s1-rho) = {q:.4e} > Upsilon = {upsilon:.4e}")]
    A1 { q: f64, upsilon: f64 },
    #[error("(A2) fails: ||A^-1|| = {norm:.4e} > N'^tau = {bound:.4e}")]
    A2 { norm: f64, bound: f64 },
    #[error("(A3) fails: {0} cluster(s) violate diam <= N^C1 or separation >= N^2")]
    A3(usize),
    #[error("stage {stage}: {source}")]
    Stage { stage: u8, source: DecayError },
    #[error("stage 4: cluster {0} has no left inverse")]
    ClusterLeftInverse(usize),
    #[error("matrix of dimension {0} exceeds the dense limit")]
    TooLarge(usize),
}

fn stage(k: u8) -> impl Fn(DecayError) -> MultiscaleError {
    move |source| MultiscaleError::Stage { stage: k, source }
}

/// `(regular, singular)` positions: regular iff `|μ̃_𝔫| ≥ Θ̃`.
pub fn classify_sites(a: &DecayMatrix, theta: f64) -> (Vec<usize>, Vec<usize>) {
    let mut reg = Vec::new();
    let mut sing = Vec::new();
    for i in 0..a.row_sites().len() {
        if a.diagonal_scalar(i).norm() >= theta {
            reg.push(i);
        } else {
            sing.push(i);
        }
    }
    (reg, sing)
}

/// `Θ̃` from the params, or the default `2(1 + |𝒬|_{s₀})`.
pub fn resolve_theta(a: &DecayMatrix, p: &MultiscaleParams) -> f64 {
    p.theta
        .unwrap_or_else(|| 2.0 * (1.0 + a.off_diagonal().s_norm(p.s0)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormCheck {
    pub s: f64,
    pub log_norm: f64,
    pub log_bound: f64,
}

impl NormCheck {
    pub fn holds(&self) -> bool {
        self.log_norm <= self.log_bound
    }
}

#[derive(Debug, Clone)]
pub struct NGood {
    pub good: bool,
    pub invertible: bool,
    pub checks: Vec<NormCheck>,
    pub inverse: Option<DecayMatrix>,
}

/// `|𝒜⁻¹|_s ≤ N^{τ₂+δs}` on `s ∈ [s₀, s₁−ϱ]`. Since `log|M|_s` is convex in
/// `s` and the bound is affine, the two endpoints decide the whole range.
pub fn check_n_good(a: &DecayMatrix, n: u32, p: &MultiscaleParams) -> Result<NGood, MultiscaleError> {
    let diam = diameter(a.row_sites().sites());
    if diam > 4 * n {
        return Err(MultiscaleError::Precondition(alloc::format!(
            "N-good test needs diam <= 4N, got {diam} > {}",
            4 * n
        )));
    }
    if a.nrows() > DENSE_LIMIT {
        return Err(MultiscaleError::TooLarge(a.nrows()));
    }
    let inv = match dense::inverse(&a.to_dense()) {
        Some(m) => m,
        None => {
            return Ok(NGood {
                good: false,
                invertible: false,
                checks: Vec::new(),
                inverse: None,
            })
        }
    };
    let inv = DecayMatrix::from_dense(a.ctx(), a.col_sites().clone(), a.row_sites().clone(), &inv);
    let prof = inv.profile();
    let ln = (n as f64).ln();
    let checks: Vec<NormCheck> = p
        .good_indices()
        .iter()
        .map(|&s| NormCheck {
            s,
            log_norm: prof.log_s_norm(s),
            log_bound: (p.tau2 + p.delta * s) * ln,
        })
        .collect();
    Ok(NGood {
        good: checks.iter().all(|c| c.holds()),
        invertible: true,
        checks,
        inverse: Some(inv),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteLabel {
    Regular,
    BoxGood,
    Bad,
}

#[derive(Debug, Clone)]
pub struct BoxInverse {
    pub sites: Arc<SiteSet>,
    pub inverse: DecayMatrix,
}

#[derive(Debug, Clone)]
pub struct Labeling {
    pub n: u32,
    pub theta: f64,
    /// One label per site of the matrix, in site order.
    pub labels: Vec<SiteLabel>,
    /// N-good box inverses keyed by site position.
    pub boxes: BTreeMap<usize, BoxInverse>,
    pub box_checks: usize,
}

impl Labeling {
    pub fn count(&self, l: SiteLabel) -> usize {
        self.labels.iter().filter(|&&x| x == l).count()
    }

    pub fn positions(&self, l: SiteLabel) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == l).collect()
    }

    pub fn is_good(&self, i: usize) -> bool {
        self.labels[i] != SiteLabel::Bad
    }
}

/// Good iff regular, or the clamped `2N`-box around the site (intersected
/// with `region`, default the bounding box of the matrix sites) is N-good.
pub fn label_good_bad(
    a: &DecayMatrix,
    n: u32,
    p: &MultiscaleParams,
    theta: f64,
    region: Option<&BoxRegion>,
) -> Result<Labeling, MultiscaleError> {
    let sites = a.row_sites().clone();
    let geom = a.geometry().clone();
    let bounding;
    let region = match region {
        Some(r) => r,
        None => {
            bounding = BoxRegion::bounding(sites.sites())
                .ok_or_else(|| MultiscaleError::Precondition("empty site set".into()))?;
            &bounding
        }
    };
    let (_, singular) = classify_sites(a, theta);
    let checked = par::map(&singular, |&i| -> Result<Option<BoxInverse>, MultiscaleError> {
        let center = &sites.sites()[i];
        let f: Vec<SiteIndex> = geom
            .enumerate_box(center, n, Some(region))
            .into_iter()
            .filter(|s| sites.position(s).is_some())
            .collect();
        let fs = SiteSet::new(f);
        let sub = a.submatrix(&fs, &fs).map_err(stage(1))?;
        let g = check_n_good(&sub, n, p)?;
        Ok(if g.good {
            Some(BoxInverse {
                sites: fs,
                inverse: g.inverse.unwrap(),
            })
        } else {
            None
        })
    });
    let mut labels = vec![SiteLabel::Regular; sites.len()];
    let mut boxes = BTreeMap::new();
    for (&i, r) in singular.iter().zip(checked) {
        match r? {
            Some(b) => {
                labels[i] = SiteLabel::BoxGood;
                boxes.insert(i, b);
            }
            None => labels[i] = SiteLabel::Bad,
        }
    }
    Ok(Labeling {
        n,
        theta,
        labels,
        boxes,
        box_checks: singular.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    pub clusters: Vec<Vec<SiteIndex>>,
    pub b: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClusterFlag {
    Diameter { cluster: usize, diam: u32 },
    Separation { a: usize, b: usize, dist: u32 },
}

impl ClusterPartition {
    pub fn diameters(&self) -> Vec<u32> {
        self.clusters.iter().map(|c| diameter(c)).collect()
    }

    /// Smallest distance between distinct clusters.
    pub fn min_separation(&self) -> Option<u32> {
        let mut best: Option<u32> = None;
        for a in 0..self.clusters.len() {
            for b in a + 1..self.clusters.len() {
                let d = cluster_distance(&self.clusters[a], &self.clusters[b]);
                best = Some(best.map_or(d, |x| x.min(d)));
            }
        }
        best
    }

    /// Violations of `diam ≤ N^{C₁}` and `d(𝔒_α, 𝔒_β) ≥ N²`.
    pub fn contract_flags(&self, n: u32, c1: f64) -> Vec<ClusterFlag> {
        let mut flags = Vec::new();
        let dmax = (n as f64).powf(c1);
        for (i, d) in self.diameters().into_iter().enumerate() {
            if d as f64 > dmax {
                flags.push(ClusterFlag::Diameter { cluster: i, diam: d });
            }
        }
        let sep = n * n;
        for a in 0..self.clusters.len() {
            for b in a + 1..self.clusters.len() {
                let d = cluster_distance(&self.clusters[a], &self.clusters[b]);
                if d < sep {
                    flags.push(ClusterFlag::Separation { a, b, dist: d });
                }
            }
        }
        flags
    }

    /// Largest cluster cardinality; every `B`-chain of distinct sites lies
    /// in one cluster, so this bounds the chain length.
    pub fn max_chain_bound(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).max().unwrap_or(0)
    }
}

fn cluster_distance(a: &[SiteIndex], b: &[SiteIndex]) -> u32 {
    a.iter().map(|x| distance_to_set(x, b)).min().unwrap_or(u32::MAX)
}

/// Connected components of the graph joining sites at distance `≤ B`,
/// ordered by their smallest site.
pub fn partition_clusters(bad: &[SiteIndex], b: u32) -> ClusterPartition {
    let mut sites: Vec<SiteIndex> = bad.to_vec();
    sites.sort();
    sites.dedup();
    let n = sites.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            if distance(&sites[i], &sites[j]) <= b {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<SiteIndex>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(sites[i].clone());
    }
    ClusterPartition {
        clusters: groups.into_values().collect(),
        b,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageNorms {
    pub name: &'static str,
    /// `(s, ln |M|_s)` pairs.
    pub log_norms: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub s: f64,
    pub log_norm: f64,
    pub log_bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertDiagnostics {
    pub n: u32,
    pub nprime: u32,
    pub dim: usize,
    pub theta_tilde: f64,
    pub upsilon: f64,
    pub q_s0: f64,
    pub log_q_s1_rho: f64,
    pub inverse_op_norm: f64,
    pub log_a2_bound: f64,
    pub regular: usize,
    pub box_good: usize,
    pub bad: usize,
    pub cluster_diameters: Vec<u32>,
    pub cluster_flags: usize,
    pub stage2: Option<NeumannReport>,
    pub stage4: Option<NeumannReport>,
    pub stage_norms: Vec<StageNorms>,
    pub bound_check: Vec<BoundCheck>,
}

fn norms_of(name: &'static str, m: &DecayMatrix, s_list: &[f64]) -> StageNorms {
    let prof = m.profile();
    StageNorms {
        name,
        log_norms: s_list.iter().map(|&s| (s, prof.log_s_norm(s))).collect(),
    }
}

fn ln_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Smallest singular value of a square matrix (absolute eigenvalue when
/// Hermitian).
fn min_singular(m: &CMat) -> f64 {
    let scale = dense::max_abs(m);
    if dense::hermitian_defect(m) <= 1e-14 * scale.max(1.0) {
        dense::hermitian_eigenvalues(m)
            .iter()
            .map(|x| x.abs())
            .fold(f64::INFINITY, f64::min)
    } else if m.iter().all(|z| z.im == 0.0) {
        m.map(|z| z.re).singular_values().min()
    } else {
        m.clone().singular_values().min()
    }
}

/// Multiscale inverse of `A` (square on its site set) at scales `N`, `N′`.
pub fn invert(
    a: &DecayMatrix,
    n: u32,
    nprime: u32,
    p: &MultiscaleParams,
) -> Result<(DecayMatrix, InvertDiagnostics), MultiscaleError> {
    let ctx = a.ctx().clone();
    let sites = a.row_sites().clone();
    if sites.sites() != a.col_sites().sites() {
        return Err(MultiscaleError::Precondition("A must be square on one site set".into()));
    }
    let dim = a.nrows();
    if dim > DENSE_LIMIT {
        return Err(MultiscaleError::TooLarge(dim));
    }
    let diam = diameter(sites.sites());
    if diam > 4 * nprime {
        return Err(MultiscaleError::Precondition(alloc::format!(
            "diam(A) = {diam} exceeds 4N' = {}",
            4 * nprime
        )));
    }
    let s_list = p.report_indices();
    let q = a.off_diagonal();
    let q_prof = q.profile();
    let q_s0 = q_prof.s_norm(p.s0);
    let log_q = q_prof.log_s_norm(p.s1 - p.varrho);
    let upsilon = p.upsilon.unwrap_or(log_q.exp());
    if log_q > upsilon.ln() {
        return Err(MultiscaleError::A1 {
            q: log_q.exp(),
            upsilon,
        });
    }
    let smin = min_singular(&a.to_dense());
    let inv_op = 1.0 / smin;
    let log_a2 = p.tau * (nprime as f64).ln();
    if !(inv_op.is_finite() && inv_op.ln() <= log_a2) {
        return Err(MultiscaleError::A2 {
            norm: inv_op,
            bound: log_a2.exp(),
        });
    }
    let theta = p.theta.unwrap_or(2.0 * (1.0 + q_s0));
    let lab = label_good_bad(a, n, p, theta, None)?;

    // stage 1: local elimination of good sites
    let good_pos = (0..sites.len()).filter(|&i| lab.is_good(i)).collect::<Vec<_>>();
    let bad_pos = lab.positions(SiteLabel::Bad);
    let g_set = SiteSet::new(good_pos.iter().map(|&i| sites.sites()[i].clone()).collect());
    let b_set = SiteSet::new(bad_pos.iter().map(|&i| sites.sites()[i].clone()).collect());
    let rows = par::map(&good_pos, |&i| stage1_rows(a, &q, &lab, i));
    let mut p_rows = Vec::with_capacity(g_set.dim());
    let mut s_rows = Vec::with_capacity(g_set.dim());
    for (pr, sr) in rows {
        p_rows.extend(pr);
        s_rows.extend(sr);
    }
    let pm = DecayMatrix::from_rows(&ctx, g_set.clone(), sites.clone(), p_rows);
    let sm = DecayMatrix::from_rows(&ctx, g_set.clone(), sites.clone(), s_rows);
    let mut stage_norms = vec![norms_of("P", &pm, &s_list), norms_of("S", &sm, &s_list)];

    // stage 2: invert I + P_GG
    let p_gg = pm.submatrix(&g_set, &g_set).map_err(stage(2))?;
    let p_gb = pm.submatrix(&g_set, &b_set).map_err(stage(2))?;
    let id_g = DecayMatrix::identity(&ctx, g_set.clone());
    let (inv_gg, rep2) = perturb_left_inverse_with(&id_g, &p_gg, Some(1.0)).map_err(stage(2))?;
    let p_tilde = inv_gg.matmul(&p_gb).map_err(stage(2))?.neg();
    let s_tilde = inv_gg.matmul(&sm).map_err(stage(2))?;
    stage_norms.push(norms_of("P~", &p_tilde, &s_list));
    stage_norms.push(norms_of("S~", &s_tilde, &s_list));

    let mut diag = InvertDiagnostics {
        n,
        nprime,
        dim,
        theta_tilde: theta,
        upsilon,
        q_s0,
        log_q_s1_rho: log_q,
        inverse_op_norm: inv_op,
        log_a2_bound: log_a2,
        regular: lab.count(SiteLabel::Regular),
        box_good: lab.count(SiteLabel::BoxGood),
        bad: bad_pos.len(),
        cluster_diameters: Vec::new(),
        cluster_flags: 0,
        stage2: Some(rep2),
        stage4: None,
        stage_norms,
        bound_check: Vec::new(),
    };

    let inverse = if b_set.is_empty() {
        s_tilde
    } else {
        // stage 3: reduced system on the bad sites
        let a_ag = a.submatrix(&sites, &g_set).map_err(stage(3))?;
        let a_ab = a.submatrix(&sites, &b_set).map_err(stage(3))?;
        let p_hat = a_ag.matmul(&p_tilde).map_err(stage(3))?.add(&a_ab).map_err(stage(3))?;
        let s_hat = DecayMatrix::identity(&ctx, sites.clone())
            .sub(&a_ag.matmul(&s_tilde).map_err(stage(3))?)
            .map_err(stage(3))?;
        diag.stage_norms.push(norms_of("P^", &p_hat, &s_list));
        diag.stage_norms.push(norms_of("S^", &s_hat, &s_list));

        // stage 4: clusters, block left inverse, Neumann correction
        let part = partition_clusters(b_set.sites(), n * n);
        let flags = part.contract_flags(n, p.c1);
        diag.cluster_diameters = part.diameters();
        diag.cluster_flags = flags.len();
        if !flags.is_empty() {
            return Err(MultiscaleError::A3(flags.len()));
        }
        let (y, z, y_op) = stage4_split(&p_hat, &part, n)?;
        diag.stage_norms.push(norms_of("X-residual Z", &z, &s_list));
        diag.stage_norms.push(norms_of("Y", &y, &s_list));
        let (l, rep4) = perturb_left_inverse_with(&y, &z, Some(y_op)).map_err(stage(4))?;
        diag.stage4 = Some(rep4);
        let inv_b = l.matmul(&s_hat).map_err(stage(4))?;
        let inv_g = p_tilde
            .matmul(&inv_b)
            .map_err(stage(4))?
            .add(&s_tilde)
            .map_err(stage(4))?;
        merge_rows(&ctx, &sites, &inv_g, &inv_b)
    };

    let prof = inverse.profile();
    let ln_np = (nprime as f64).ln();
    diag.bound_check = s_list
        .iter()
        .map(|&s| {
            let log_norm = prof.log_s_norm(s);
            let log_bound =
                (0.25f64).ln() + p.tau2 * ln_np + ln_add(p.delta * s * ln_np, q_prof.log_s_norm(s));
            BoundCheck {
                s,
                log_norm,
                log_bound,
                holds: log_norm <= log_bound,
            }
        })
        .collect();
    diag.stage_norms.push(norms_of("A^-1", &inverse, &s_list));
    Ok((inverse, diag))
}

type Rows = Vec<Vec<(u32, Complex64)>>;

/// Rows of `P` and `S` for the good site at position `i`.
fn stage1_rows(a: &DecayMatrix, q: &DecayMatrix, lab: &Labeling, i: usize) -> (Rows, Rows) {
    let sites = a.row_sites();
    let c0 = sites.start(i);
    let c1 = sites.start(i + 1);
    let mut pr = Vec::new();
    let mut sr = Vec::new();
    match lab.boxes.get(&i) {
        None => {
            let mu = a.diagonal_scalar(i);
            for c in c0..c1 {
                pr.push(q.row(c).iter().map(|&(j, v)| (j, v / mu)).collect());
                sr.push(vec![(c as u32, Complex64::new(1.0, 0.0) / mu)]);
            }
        }
        Some(bx) => {
            let f = &bx.sites;
            let fmap: Vec<u32> = f
                .sites()
                .iter()
                .flat_map(|s| {
                    let k = sites.position(s).unwrap();
                    (sites.start(k)..sites.start(k + 1)).map(|c| c as u32)
                })
                .collect();
            let fi = f.position(&sites.sites()[i]).unwrap();
            for c in 0..(c1 - c0) {
                let row = bx.inverse.row(f.start(fi) + c);
                sr.push(row.iter().map(|&(k, v)| (fmap[k as usize], v)).collect());
                let mut acc: Vec<(u32, Complex64)> = Vec::new();
                for &(k, v) in row {
                    for &(j, w) in a.row(fmap[k as usize] as usize) {
                        if fmap.binary_search(&j).is_err() {
                            acc.push((j, v * w));
                        }
                    }
                }
                acc.sort_by_key(|e| e.0);
                let mut out: Vec<(u32, Complex64)> = Vec::with_capacity(acc.len());
                for (j, v) in acc {
                    match out.last_mut() {
                        Some(last) if last.0 == j => last.1 += v,
                        _ => out.push((j, v)),
                    }
                }
                pr.push(out);
            }
        }
    }
    (pr, sr)
}

/// Splits `P̂ = X + Z` with `X` kept on cluster × halo pairs, and returns the
/// block-diagonal left inverse `Y` of `X`, `Z`, and `‖Y‖₀`.
fn stage4_split(
    p_hat: &DecayMatrix,
    part: &ClusterPartition,
    n: u32,
) -> Result<(DecayMatrix, DecayMatrix, f64), MultiscaleError> {
    let ctx = p_hat.ctx().clone();
    let rows = p_hat.row_sites().clone();
    let cols = p_hat.col_sites().clone();
    let halo_r = n * n / 4;
    // halo membership per row site; halos are disjoint when clusters are N²-separated
    let halo_of: Vec<Option<usize>> = par::map(rows.sites(), |s| {
        part.clusters
            .iter()
            .position(|c| distance_to_set(s, c) <= halo_r)
    });
    let mut cluster_of_col = vec![usize::MAX; cols.len()];
    for (k, c) in part.clusters.iter().enumerate() {
        for s in c {
            cluster_of_col[cols.position(s).unwrap()] = k;
        }
    }
    let mut x_rows: Rows = Vec::with_capacity(rows.dim());
    let mut z_rows: Rows = Vec::with_capacity(rows.dim());
    for r in 0..rows.dim() {
        let h = halo_of[rows.site_of(r)];
        let (mut xr, mut zr) = (Vec::new(), Vec::new());
        for &(j, v) in p_hat.row(r) {
            if Some(cluster_of_col[cols.site_of(j as usize)]) == h {
                xr.push((j, v));
            } else {
                zr.push((j, v));
            }
        }
        x_rows.push(xr);
        z_rows.push(zr);
    }
    let x = DecayMatrix::from_rows(&ctx, rows.clone(), cols.clone(), x_rows);
    let z = DecayMatrix::from_rows(&ctx, rows.clone(), cols.clone(), z_rows);
    let idx: Vec<usize> = (0..part.clusters.len()).collect();
    let blocks = par::map(&idx, |&k| {
        let rc: Vec<usize> = (0..rows.dim())
            .filter(|&r| halo_of[rows.site_of(r)] == Some(k))
            .collect();
        let cc: Vec<usize> = (0..cols.dim())
            .filter(|&c| cluster_of_col[cols.site_of(c)] == k)
            .collect();
        let mut m = CMat::zeros(rc.len(), cc.len());
        for (a, &r) in rc.iter().enumerate() {
            for (b, &c) in cc.iter().enumerate() {
                m[(a, b)] = x.get(r, c);
            }
        }
        let yk = dense::left_inverse(&m);
        let op = yk.as_ref().map(dense::op_norm);
        (rc, cc, yk, op)
    });
    let mut y_rows: Rows = vec![Vec::new(); cols.dim()];
    let mut y_op = 0.0f64;
    for (k, (rc, cc, yk, op)) in blocks.into_iter().enumerate() {
        let yk = yk.ok_or(MultiscaleError::ClusterLeftInverse(k))?;
        y_op = y_op.max(op.unwrap());
        for (a, &c) in cc.iter().enumerate() {
            for (b, &r) in rc.iter().enumerate() {
                let v = yk[(a, b)];
                if v != Complex64::new(0.0, 0.0) {
                    y_rows[c].push((r as u32, v));
                }
            }
        }
    }
    let y = DecayMatrix::from_rows(&ctx, cols, rows, y_rows);
    Ok((y, z, y_op))
}

fn merge_rows(
    ctx: &Arc<crate::decay_matrix::NormContext>,
    sites: &Arc<SiteSet>,
    inv_g: &DecayMatrix,
    inv_b: &DecayMatrix,
) -> DecayMatrix {
    let mut data: Rows = Vec::with_capacity(sites.dim());
    for s in sites.sites() {
        let (m, k) = match inv_g.row_sites().position(s) {
            Some(k) => (inv_g, k),
            None => (inv_b, inv_b.row_sites().position(s).unwrap()),
        };
        let rs = m.row_sites();
        for c in rs.start(k)..rs.start(k + 1) {
            data.push(m.row(c).to_vec());
        }
    }
    DecayMatrix::from_rows(ctx, sites.clone(), sites.clone(), data)
}

/// Dense inverse oracle with the same site labels.
pub fn dense_inverse(a: &DecayMatrix) -> Option<DecayMatrix> {
    dense::inverse(&a.to_dense()).map(|m| {
        DecayMatrix::from_dense(a.ctx(), a.col_sites().clone(), a.row_sites().clone(), &m)
    })
}

/// Perturbative inverse around the diagonal when every site is regular and
/// the off-diagonal part is small; used for quick checks.
pub fn diagonal_neumann_inverse(a: &DecayMatrix) -> Result<(DecayMatrix, NeumannReport), DecayError> {
    let sites = a.row_sites().clone();
    let inv_d: Vec<f64> = (0..sites.len()).map(|i| 1.0 / a.diagonal_scalar(i).re).collect();
    let dinv = DecayMatrix::diagonal(a.ctx(), sites, &inv_d);
    perturb_left_inverse(&dinv, &a.off_diagonal())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decay_matrix::NormContext;
    use crate::lattice::LatticeGeometry;
    use crate::linop::{assemble, OperatorParams};
    use crate::sobolev::FourierField;

    fn ctx() -> Arc<NormContext> {
        NormContext::new(Arc::new(LatticeGeometry::torus(1, 1).unwrap()), 2.0).unwrap()
    }

    fn site(c: &Arc<NormContext>, l: i32, j: i32) -> SiteIndex {
        c.geom.site(&[l], &[j])
    }

    #[test]
    fn classify_edges() {
        let c = ctx();
        let s = SiteSet::new(vec![site(&c, 0, 0), site(&c, 1, 0)]);
        let d = DecayMatrix::diagonal(&c, s.clone(), &[78.0, 0.0]);
        assert_eq!(classify_sites(&d, 10.0), (vec![0], vec![1]));
        assert_eq!(classify_sites(&d, 0.0).0.len(), 2);
    }

    #[test]
    fn n_good_cases() {
        let c = ctx();
        let p = MultiscaleParams::desk(&c.geom);
        let s = SiteSet::new(c.geom.enumerate_box(&site(&c, 0, 0), 1, None));
        let id = DecayMatrix::identity(&c, s.clone());
        assert!(check_n_good(&id, 2, &p).unwrap().good);
        let mut vals = vec![1.0; s.len()];
        vals[4] = 0.0;
        let d = DecayMatrix::diagonal(&c, s.clone(), &vals);
        let g = check_n_good(&d, 2, &p).unwrap();
        assert!(!g.invertible && !g.good);
        // a near resonance μ = N^{-τ₂-1} pushes the inverse above the bound
        let n = 2u32;
        vals[4] = (n as f64).powf(-(p.tau2 + 1.0));
        let d = DecayMatrix::diagonal(&c, s.clone(), &vals);
        let g = check_n_good(&d, n, &p).unwrap();
        assert!(g.invertible && !g.good);
        let want = c.k0.sqrt() * (n as f64).powf(p.tau2 + 1.0);
        assert!((g.checks[0].log_norm - want.ln()).abs() < 1e-9);
    }

    #[test]
    fn clusters_1d() {
        let c = ctx();
        let sites: Vec<SiteIndex> = [0, 1, 2, 100].iter().map(|&l| site(&c, l, 0)).collect();
        let part = partition_clusters(&sites, 2);
        assert_eq!(part.clusters.len(), 2);
        assert_eq!(part.clusters[0].len(), 3);
        assert_eq!(part.min_separation(), Some(98));
        assert!(partition_clusters(&[], 4).clusters.is_empty());
    }

    #[test]
    fn diagonal_inverse_is_reciprocal() {
        let c = ctx();
        let p = MultiscaleParams::desk(&c.geom);
        let s = SiteSet::new(c.geom.enumerate_box(&site(&c, 0, 0), 4, None));
        let vals: Vec<f64> = (0..s.len()).map(|i| 20.0 + i as f64).collect();
        let d = DecayMatrix::diagonal(&c, s.clone(), &vals);
        let (inv, diag) = invert(&d, 2, 4, &p).unwrap();
        assert_eq!(diag.bad, 0);
        for i in 0..s.len() {
            assert!((inv.get(i, i).re - 1.0 / vals[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn beam_operator_matches_dense() {
        let c = ctx();
        let g = c.geom.clone();
        let vbar = FourierField::from_modes(
            g.clone(),
            &[(&[0], &[1], Complex64::new(0.05, 0.0)), (&[0], &[-1], Complex64::new(0.05, 0.0))],
        );
        let op = OperatorParams::new(0.0, 1.0, vec![0.618_034], 0.37, 1.0, vbar, FourierField::zero(g.clone())).unwrap();
        let a = assemble(&c, &op, 8, &[0], &[0]);
        let p = MultiscaleParams::desk(&g);
        let (inv, diag) = invert(&a, 3, 8, &p).unwrap();
        let want = dense_inverse(&a).unwrap();
        let err = dense::op_norm(&(inv.to_dense() - want.to_dense()));
        assert!(err <= 1e-8 * dense::op_norm(&want.to_dense()), "err {err} {diag:?}");
    }

    #[test]
    fn single_bad_cluster_matches_dense() {
        let c = ctx();
        let g = c.geom.clone();
        let vbar = FourierField::from_modes(
            g.clone(),
            &[(&[0], &[1], Complex64::new(0.05, 0.0)), (&[0], &[-1], Complex64::new(0.05, 0.0))],
        );
        // θ puts (l,j) = (0,1) at μ ≈ 1e-3, and a tiny τ₂ makes its box N-bad
        let theta = (2.0f64 - 1e-3).sqrt();
        let op = OperatorParams::new(0.0, 1.0, vec![0.618_034], theta, 1.0, vbar, FourierField::zero(g.clone())).unwrap();
        let a = assemble(&c, &op, 8, &[0], &[0]);
        let mut p = MultiscaleParams::desk(&g);
        p.tau2 = 1.0;
        p.tau = 12.0;
        let (inv, diag) = invert(&a, 3, 8, &p).unwrap();
        assert!(diag.bad >= 1, "{diag:?}");
        assert_eq!(diag.cluster_diameters.len(), 1);
        let want = dense_inverse(&a).unwrap();
        let err = dense::op_norm(&(inv.to_dense() - want.to_dense()));
        assert!(err <= 1e-8 * dense::op_norm(&want.to_dense()), "err {err} {diag:?}");
    }
}
