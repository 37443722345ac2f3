//! The linearized beam operator `𝒜 = D(λ,θ) + T′ − εT″(u)` on lattice
//! boxes, with `μ_𝔫 = −(λω₀·l+θ)² + λ_j² + m` on the diagonal.

use alloc::sync::Arc;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::decay_matrix::{DecayMatrix, NormContext, SiteSet};
use crate::dense;
use crate::lattice::{LatticeGeometry, SiteIndex};
use crate::sobolev::FourierField;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinopError {
    #[error("lambda = {0} outside [1/2, 3/2]")]
    Lambda(f64),
    #[error("|omega0| = {0} exceeds 1")]
    Omega(f64),
    #[error("omega0 has {got} components, expected nu = {want}")]
    OmegaDim { got: usize, want: usize },
    #[error("Vbar has a nonzero mean coefficient {0}")]
    VbarMean(f64),
    #[error("Vbar must be time independent")]
    VbarTime,
}

#[derive(Debug, Clone)]
pub struct OperatorParams {
    pub eps: f64,
    pub lambda: f64,
    pub omega0: Vec<f64>,
    pub theta: f64,
    pub m: f64,
    pub vbar: FourierField,
    pub a: FourierField,
    pub mbar: f64,
}

impl OperatorParams {
    /// Validated parameters; `mbar` is taken as the mean of `a`.
    pub fn new(
        eps: f64,
        lambda: f64,
        omega0: Vec<f64>,
        theta: f64,
        m: f64,
        vbar: FourierField,
        a: FourierField,
    ) -> Result<Self, LinopError> {
        let geom = vbar.geometry().clone();
        if !(0.5..=1.5).contains(&lambda) {
            return Err(LinopError::Lambda(lambda));
        }
        if omega0.len() != geom.nu {
            return Err(LinopError::OmegaDim {
                got: omega0.len(),
                want: geom.nu,
            });
        }
        let w = omega0.iter().map(|x| x * x).sum::<f64>().sqrt();
        if w > 1.0 + 1e-15 {
            return Err(LinopError::Omega(w));
        }
        let mean = vbar.mean().norm();
        if mean > 0.0 {
            return Err(LinopError::VbarMean(mean));
        }
        if vbar.iter().any(|(s, _)| s.l.iter().any(|&x| x != 0)) {
            return Err(LinopError::VbarTime);
        }
        let mbar = a.mean().re;
        Ok(OperatorParams {
            eps,
            lambda,
            omega0,
            theta,
            m,
            vbar,
            a,
            mbar,
        })
    }

    pub fn geometry(&self) -> &Arc<LatticeGeometry> {
        self.vbar.geometry()
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        OperatorParams {
            theta,
            ..self.clone()
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        OperatorParams {
            lambda,
            ..self.clone()
        }
    }

    /// `λ ω₀·l`.
    pub fn frequency(&self, l: &[i32]) -> f64 {
        self.lambda
            * self
                .omega0
                .iter()
                .zip(l)
                .map(|(w, &k)| w * k as f64)
                .sum::<f64>()
    }
}

/// `ϱ = (2ν+d+r+1)/2`.
pub fn varrho(geom: &LatticeGeometry) -> f64 {
    (2 * geom.nu + geom.d + geom.r + 1) as f64 / 2.0
}

/// `μ_𝔫(λ,θ)`.
pub fn diagonal_entry(n: &SiteIndex, p: &OperatorParams) -> f64 {
    let w = p.frequency(&n.l) + p.theta;
    let lj = p.geometry().laplacian_eigenvalue(&n.j);
    -w * w + lj * lj + p.m
}

/// `μ̃_𝔫 = μ_𝔫 − εm̄`, the scalar of the diagonal block of `𝒜`.
pub fn shifted_diagonal(n: &SiteIndex, p: &OperatorParams) -> f64 {
    diagonal_entry(n, p) - p.eps * p.mbar
}

/// Sites with `|l − l₀| ≤ N`, `|j − j₀| ≤ N`.
pub fn box_sites(geom: &LatticeGeometry, n: u32, l0: &[i32], j0: &[i32]) -> Arc<SiteSet> {
    SiteSet::new(geom.enumerate_box(&geom.site(l0, j0), n, None))
}

/// `𝒜` restricted to the given sites.
pub fn assemble_on(ctx: &Arc<NormContext>, p: &OperatorParams, sites: &Arc<SiteSet>) -> DecayMatrix {
    let diag: Vec<f64> = sites.sites().iter().map(|s| diagonal_entry(s, p)).collect();
    let mut a = DecayMatrix::diagonal(ctx, sites.clone(), &diag);
    if !p.vbar.is_empty() {
        let t1 = DecayMatrix::from_multiplier(ctx, &p.vbar, sites.clone(), sites.clone());
        a = a.add(&t1).expect("same sites");
    }
    if p.eps != 0.0 && !p.a.is_empty() {
        let t2 = DecayMatrix::from_multiplier(ctx, &p.a, sites.clone(), sites.clone());
        a = a.sub(&t2.scale_re(p.eps)).expect("same sites");
    }
    a
}

/// `𝒜_{N,l₀,j₀}(ε,λ,u,θ)`.
pub fn assemble(
    ctx: &Arc<NormContext>,
    p: &OperatorParams,
    n: u32,
    l0: &[i32],
    j0: &[i32],
) -> DecayMatrix {
    assemble_on(ctx, p, &box_sites(&ctx.geom, n, l0, j0))
}

/// The spatial block `P̌(Δ² + V)` on `|j − j₀| ≤ N` (time index 0).
pub fn spatial_block(ctx: &Arc<NormContext>, p: &OperatorParams, n: u32, j0: &[i32]) -> DecayMatrix {
    let geom = &ctx.geom;
    let l0: Vec<i32> = alloc::vec![0; geom.nu];
    let sites: Vec<SiteIndex> = geom
        .enumerate_box(&geom.site(&l0, j0), n, None)
        .into_iter()
        .filter(|s| s.l.iter().all(|&x| x == 0))
        .collect();
    let free = OperatorParams {
        eps: 0.0,
        theta: 0.0,
        ..p.clone()
    };
    assemble_on(ctx, &free, &SiteSet::new(sites))
}

/// Sorted eigenvalues `λ̂_{j,p}` of the spatial block.
pub fn spatial_eigenvalues(ctx: &Arc<NormContext>, p: &OperatorParams, n: u32, j0: &[i32]) -> Vec<f64> {
    dense::hermitian_eigenvalues(&spatial_block(ctx, p, n, j0).to_dense())
}

/// Smallest eigenvalue of `Δ² + V` on `|j| ≤ N`, to compare with `κ₀`.
pub fn positivity_margin(ctx: &Arc<NormContext>, p: &OperatorParams, n: u32) -> f64 {
    let j0: Vec<i32> = alloc::vec![0; ctx.geom.r];
    spatial_eigenvalues(ctx, p, n, &j0)
        .first()
        .copied()
        .unwrap_or(f64::INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn setup() -> (Arc<NormContext>, OperatorParams) {
        let g = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
        let ctx = NormContext::new(g.clone(), 2.0).unwrap();
        let vbar = FourierField::from_modes(
            g.clone(),
            &[(&[0], &[1], Complex64::new(0.05, 0.0)), (&[0], &[-1], Complex64::new(0.05, 0.0))],
        );
        let a = FourierField::from_modes(
            g.clone(),
            &[
                (&[0], &[0], Complex64::new(0.3, 0.0)),
                (&[1], &[1], Complex64::new(0.1, 0.0)),
                (&[-1], &[-1], Complex64::new(0.1, 0.0)),
            ],
        );
        let p = OperatorParams::new(1e-3, 1.0, alloc::vec![0.618], 0.2, 1.0, vbar, a).unwrap();
        (ctx, p)
    }

    #[test]
    fn diagonal_values() {
        let (_, p) = setup();
        let g = p.geometry().clone();
        let p0 = OperatorParams {
            omega0: alloc::vec![1.0],
            theta: 0.0,
            ..p.clone()
        };
        assert_eq!(diagonal_entry(&g.site(&[0], &[0]), &p0), 1.0);
        assert_eq!(diagonal_entry(&g.site(&[2], &[3]), &p0), 78.0);
        let n = g.site(&[1], &[2]);
        let shifted = diagonal_entry(&n, &p.with_theta(p.theta + p.frequency(&[3])));
        assert!((shifted - diagonal_entry(&g.site(&[4], &[2]), &p)).abs() < 1e-12);
    }

    #[test]
    fn assembled_is_hermitian_and_covariant() {
        let (ctx, p) = setup();
        let a = assemble(&ctx, &p, 3, &[2], &[1]);
        assert!(a.hermitian_defect() < 1e-15);
        let b = assemble(&ctx, &p.with_theta(p.theta + p.frequency(&[2])), 3, &[0], &[1]);
        for (i, s) in a.row_sites().sites().iter().enumerate() {
            for (k, t) in a.row_sites().sites().iter().enumerate() {
                let s2 = ctx.geom.site(&[s.l[0] - 2], &s.j);
                let t2 = ctx.geom.site(&[t.l[0] - 2], &t.j);
                let v = b.get_sites(&s2, &t2).unwrap();
                assert!((a.get(i, k) - v).norm() < 1e-12);
            }
        }
        let d = a.to_dense();
        let i0 = a.row_sites().position(&ctx.geom.site(&[2], &[1])).unwrap();
        let want = shifted_diagonal(&ctx.geom.site(&[2], &[1]), &p);
        assert!((d[(i0, i0)].re - want).abs() < 1e-14);
    }

    #[test]
    fn spatial_positivity() {
        let (ctx, p) = setup();
        let m = positivity_margin(&ctx, &p, 6);
        assert!(m > 0.89 && m <= 1.0);
    }
}
