//! Fourier fields on `T^ν × M`, the `H^s` norm, Galerkin projectors and
//! the composition operator `u ↦ f(φ, x, u)`.
//!
//! Products are exact coefficient convolutions, so polynomial
//! nonlinearities are composed without aliasing.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;
use smallvec::SmallVec;

use crate::lattice::{LatticeGeometry, Preset, SiteIndex};

pub type Block = SmallVec<[Complex64; 1]>;

/// Coefficients below this modulus are dropped after nonlinear operations.
pub const DROP_TOL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SobolevError {
    #[error("fields live on different geometries")]
    GeometryMismatch,
    #[error("products of fields are only defined on the torus preset")]
    NotTorus,
    #[error("block length {got} does not match block dimension {want}")]
    BlockLength { got: usize, want: usize },
    #[error("non-finite value produced by the nonlinearity")]
    NonFinite,
    #[error("collocation grid {grid} too small for support {support}; aliasing risk")]
    Aliasing { grid: usize, support: usize },
}

#[derive(Debug, Clone)]
pub struct FourierField {
    geom: Arc<LatticeGeometry>,
    coeffs: BTreeMap<SiteIndex, Block>,
}

impl PartialEq for FourierField {
    fn eq(&self, other: &Self) -> bool {
        self.coeffs == other.coeffs && same_geometry(&self.geom, &other.geom)
    }
}

fn same_geometry(a: &Arc<LatticeGeometry>, b: &Arc<LatticeGeometry>) -> bool {
    Arc::ptr_eq(a, b) || **a == **b
}

impl FourierField {
    pub fn zero(geom: Arc<LatticeGeometry>) -> Self {
        FourierField {
            geom,
            coeffs: BTreeMap::new(),
        }
    }

    /// Scalar-block field from `(l, j, value)` triples (torus-style sites).
    pub fn from_modes(geom: Arc<LatticeGeometry>, modes: &[(&[i32], &[i32], Complex64)]) -> Self {
        let mut f = Self::zero(geom);
        for (l, j, v) in modes {
            let s = f.geom.site(l, j);
            let mut b = Block::from_elem(Complex64::new(0.0, 0.0), s.block_dim as usize);
            b[0] = *v;
            f.add_block(s, &b);
        }
        f
    }

    /// Constant function `c`.
    pub fn constant(geom: Arc<LatticeGeometry>, c: f64) -> Self {
        let l = alloc::vec![0; geom.nu];
        let j = alloc::vec![0; geom.r];
        Self::from_modes(geom, &[(&l, &j, Complex64::new(c, 0.0))])
    }

    pub fn geometry(&self) -> &Arc<LatticeGeometry> {
        &self.geom
    }

    pub fn insert(&mut self, site: SiteIndex, block: Block) -> Result<(), SobolevError> {
        if block.len() != site.block_dim as usize {
            return Err(SobolevError::BlockLength {
                got: block.len(),
                want: site.block_dim as usize,
            });
        }
        self.coeffs.insert(site, block);
        Ok(())
    }

    pub fn add_block(&mut self, site: SiteIndex, block: &[Complex64]) {
        let e = self
            .coeffs
            .entry(site)
            .or_insert_with(|| Block::from_elem(Complex64::new(0.0, 0.0), block.len()));
        for (a, b) in e.iter_mut().zip(block) {
            *a += *b;
        }
    }

    pub fn get(&self, site: &SiteIndex) -> Option<&Block> {
        self.coeffs.get(site)
    }

    /// First component of the block at `(l, j)`, zero if absent.
    pub fn coeff(&self, l: &[i32], j: &[i32]) -> Complex64 {
        self.coeffs
            .get(&self.geom.site(l, j))
            .map(|b| b[0])
            .unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteIndex, &Block)> {
        self.coeffs.iter()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn sites(&self) -> Vec<SiteIndex> {
        self.coeffs.keys().cloned().collect()
    }

    /// Largest `|𝔫|` carrying a nonzero coefficient.
    pub fn support_radius(&self) -> u32 {
        self.coeffs
            .iter()
            .filter(|(_, b)| b.iter().any(|z| *z != Complex64::new(0.0, 0.0)))
            .map(|(s, _)| s.norm())
            .max()
            .unwrap_or(0)
    }

    /// `‖u‖_s = (Σ ⟨w_𝔫⟩^{2s} 2π Σ_p |u_{𝔫,p}|²)^{1/2}`.
    pub fn hs_norm(&self, s: f64) -> f64 {
        let mut acc = 0.0;
        for (site, b) in &self.coeffs {
            let w = self.geom.weight_norm(site);
            let m: f64 = b.iter().map(|z| z.norm_sqr()).sum();
            acc += w.powf(2.0 * s) * m;
        }
        (2.0 * PI * acc).sqrt()
    }

    /// Largest coefficient modulus.
    pub fn max_abs(&self) -> f64 {
        self.coeffs
            .values()
            .flat_map(|b| b.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `Σ |u_𝔫|`, an upper bound for the sup norm of the function.
    pub fn wiener_norm(&self) -> f64 {
        self.coeffs
            .values()
            .flat_map(|b| b.iter())
            .map(|z| z.norm())
            .sum()
    }

    /// `(P_N u, P⊥_N u)`.
    pub fn project(&self, n: u32) -> (FourierField, FourierField) {
        let mut low = Self::zero(self.geom.clone());
        let mut high = Self::zero(self.geom.clone());
        for (s, b) in &self.coeffs {
            if s.norm() <= n {
                low.coeffs.insert(s.clone(), b.clone());
            } else {
                high.coeffs.insert(s.clone(), b.clone());
            }
        }
        (low, high)
    }

    pub fn low(&self, n: u32) -> FourierField {
        self.project(n).0
    }

    /// Restriction to the given sites.
    pub fn restrict(&self, keep: impl Fn(&SiteIndex) -> bool) -> FourierField {
        FourierField {
            geom: self.geom.clone(),
            coeffs: self
                .coeffs
                .iter()
                .filter(|(s, _)| keep(s))
                .map(|(s, b)| (s.clone(), b.clone()))
                .collect(),
        }
    }

    pub fn scale(&self, c: Complex64) -> FourierField {
        FourierField {
            geom: self.geom.clone(),
            coeffs: self
                .coeffs
                .iter()
                .map(|(s, b)| (s.clone(), b.iter().map(|z| z * c).collect()))
                .collect(),
        }
    }

    pub fn scale_re(&self, c: f64) -> FourierField {
        self.scale(Complex64::new(c, 0.0))
    }

    pub fn axpy(&self, c: f64, other: &FourierField) -> Result<FourierField, SobolevError> {
        if !same_geometry(&self.geom, &other.geom) {
            return Err(SobolevError::GeometryMismatch);
        }
        let mut out = self.clone();
        let c = Complex64::new(c, 0.0);
        for (s, b) in &other.coeffs {
            let scaled: Block = b.iter().map(|z| z * c).collect();
            out.add_block(s.clone(), &scaled);
        }
        Ok(out)
    }

    pub fn add(&self, other: &FourierField) -> Result<FourierField, SobolevError> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &FourierField) -> Result<FourierField, SobolevError> {
        self.axpy(-1.0, other)
    }

    /// Removes blocks whose entries are all below `tol` in modulus.
    pub fn drop_small(&mut self, tol: f64) {
        self.coeffs.retain(|_, b| b.iter().any(|z| z.norm() >= tol));
    }

    pub fn dropped(mut self, tol: f64) -> Self {
        self.drop_small(tol);
        self
    }

    /// Largest violation of `u_{−𝔫} = conj(u_𝔫)` (torus preset).
    pub fn reality_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (s, b) in &self.coeffs {
            let partner = s.neg();
            let zero = Complex64::new(0.0, 0.0);
            for (p, z) in b.iter().enumerate() {
                let w = self
                    .coeffs
                    .get(&partner)
                    .and_then(|pb| pb.get(p).copied())
                    .unwrap_or(zero);
                worst = worst.max((z - w.conj()).norm());
            }
        }
        worst
    }

    /// Projection onto real-valued functions, `(u + ū(−·))/2`.
    pub fn realified(&self) -> FourierField {
        let mut out = Self::zero(self.geom.clone());
        let half = Complex64::new(0.5, 0.0);
        for (s, b) in &self.coeffs {
            let x: Block = b.iter().map(|z| z * half).collect();
            out.add_block(s.clone(), &x);
            let y: Block = b.iter().map(|z| z.conj() * half).collect();
            out.add_block(s.neg(), &y);
        }
        out
    }

    /// Exact product of two real fields (coefficient convolution).
    pub fn multiply(&self, other: &FourierField) -> Result<FourierField, SobolevError> {
        if !same_geometry(&self.geom, &other.geom) {
            return Err(SobolevError::GeometryMismatch);
        }
        if self.geom.preset != Preset::Torus {
            return Err(SobolevError::NotTorus);
        }
        let mut acc: BTreeMap<SiteIndex, Complex64> = BTreeMap::new();
        for (s1, b1) in &self.coeffs {
            for (s2, b2) in &other.coeffs {
                let l = s1.l.iter().zip(&s2.l).map(|(a, b)| a + b).collect();
                let j = s1.j.iter().zip(&s2.j).map(|(a, b)| a + b).collect();
                let s = SiteIndex { l, j, block_dim: 1 };
                *acc.entry(s).or_default() += b1[0] * b2[0];
            }
        }
        let coeffs = acc
            .into_iter()
            .filter(|(_, z)| z.norm() >= DROP_TOL)
            .map(|(s, z)| (s, Block::from_elem(z, 1)))
            .collect();
        Ok(FourierField {
            geom: self.geom.clone(),
            coeffs,
        })
    }

    /// Mean value (the `(0,0)` coefficient).
    pub fn mean(&self) -> Complex64 {
        self.coeffs
            .iter()
            .find(|(s, _)| s.is_origin())
            .map(|(_, b)| b[0])
            .unwrap_or_default()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs
            .values()
            .flat_map(|b| b.iter())
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// A nonlinearity `f(φ, x, u)` acting on fields.
pub trait Nonlinearity: Send + Sync {
    /// `F(u) = f(·, ·, u)`.
    fn compose(&self, u: &FourierField) -> Result<FourierField, SobolevError>;
    /// `∂_u f(·, ·, u)`.
    fn derivative(&self, u: &FourierField) -> Result<FourierField, SobolevError>;
    /// Differentiability order `q`.
    fn order(&self) -> u32;

    /// `(a, m̄)` with `a = ∂_u f(·,·,u)` and `m̄` its space-time average.
    fn compose_derivative(&self, u: &FourierField) -> Result<(FourierField, f64), SobolevError> {
        let a = self.derivative(u)?;
        let m = a.mean().re;
        Ok((a, m))
    }
}

/// `f = Σ_k c_k(φ, x) u^k`.
#[derive(Debug, Clone)]
pub struct Polynomial {
    pub terms: Vec<(u32, FourierField)>,
}

impl Polynomial {
    pub fn new(terms: Vec<(u32, FourierField)>) -> Self {
        Polynomial { terms }
    }

    pub fn degree(&self) -> u32 {
        self.terms.iter().map(|(k, _)| *k).max().unwrap_or(0)
    }

    fn powers(&self, u: &FourierField, upto: u32) -> Result<Vec<FourierField>, SobolevError> {
        let mut p = Vec::with_capacity(upto as usize + 1);
        p.push(FourierField::constant(u.geometry().clone(), 1.0));
        for k in 1..=upto as usize {
            let next = if k == 1 {
                u.clone()
            } else {
                p[k - 1].multiply(u)?
            };
            p.push(next);
        }
        Ok(p)
    }
}

impl Nonlinearity for Polynomial {
    fn compose(&self, u: &FourierField) -> Result<FourierField, SobolevError> {
        let pw = self.powers(u, self.degree())?;
        let mut out = FourierField::zero(u.geometry().clone());
        for (k, c) in &self.terms {
            out = out.add(&c.multiply(&pw[*k as usize])?)?;
        }
        out.drop_small(DROP_TOL);
        Ok(out)
    }

    fn derivative(&self, u: &FourierField) -> Result<FourierField, SobolevError> {
        let deg = self.degree();
        let pw = self.powers(u, deg.saturating_sub(1))?;
        let mut out = FourierField::zero(u.geometry().clone());
        for (k, c) in &self.terms {
            if *k == 0 {
                continue;
            }
            let t = c.multiply(&pw[*k as usize - 1])?.scale_re(*k as f64);
            out = out.add(&t)?;
        }
        out.drop_small(DROP_TOL);
        Ok(out)
    }

    fn order(&self) -> u32 {
        u32::MAX
    }
}
