//! Index lattice `Z^ν × Γ₊`, its norms and box enumeration.
//!
//! A site is a pair `(l, j)` with `l ∈ Z^ν` a time frequency and `j` the
//! lattice coordinates of a weight `Σ j_k w_k`. On the torus preset the
//! spatial lattice is all of `Z^r`; with user weights it is the positive
//! cone `j_k ≥ 0`.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use smallvec::SmallVec;

pub type Coords = SmallVec<[i32; 4]>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LatticeError {
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("weights w{0}·w{1} = {2} is not in (1/z)Z")]
    Rationality(usize, usize, f64),
    #[error("weights are linearly dependent (gram determinant {0:e})")]
    DependentWeights(f64),
    #[error("torus preset requires d == r (got d={d}, r={r})")]
    TorusRank { d: usize, r: usize },
    #[error("rho must equal the sum of the weights")]
    Rho,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// `Γ = Z^r`, standard basis, `ρ = 0`, unit blocks.
    Torus,
    /// Positive cone of user weights with block dimensions `⌊‖j+ρ‖^{d−r}⌋`.
    Weights,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SiteIndex {
    pub l: Coords,
    pub j: Coords,
    pub block_dim: u32,
}

impl SiteIndex {
    pub fn new(l: &[i32], j: &[i32]) -> Self {
        SiteIndex {
            l: Coords::from_slice(l),
            j: Coords::from_slice(j),
            block_dim: 1,
        }
    }

    /// `|𝔫| = max(|l|_∞, |j|_∞)`.
    pub fn norm(&self) -> u32 {
        let a = self.l.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
        let b = self.j.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
        a.max(b)
    }

    pub fn is_origin(&self) -> bool {
        self.l.iter().all(|&x| x == 0) && self.j.iter().all(|&x| x == 0)
    }

    /// Coordinate-wise negation (reality partner on the torus).
    pub fn neg(&self) -> Self {
        SiteIndex {
            l: self.l.iter().map(|x| -x).collect(),
            j: self.j.iter().map(|x| -x).collect(),
            block_dim: self.block_dim,
        }
    }

    pub fn coord(&self, k: usize) -> i32 {
        let nu = self.l.len();
        if k < nu {
            self.l[k]
        } else {
            self.j[k - nu]
        }
    }
}

/// Raw coordinate difference `a − b`.
pub fn difference(a: &SiteIndex, b: &SiteIndex) -> Offset {
    Offset {
        l: a.l.iter().zip(&b.l).map(|(x, y)| x - y).collect(),
        j: a.j.iter().zip(&b.j).map(|(x, y)| x - y).collect(),
    }
}

/// `|a − b|`, the lattice distance.
pub fn distance(a: &SiteIndex, b: &SiteIndex) -> u32 {
    let dl = a.l.iter().zip(&b.l).map(|(x, y)| (x - y).unsigned_abs());
    let dj = a.j.iter().zip(&b.j).map(|(x, y)| (x - y).unsigned_abs());
    dl.chain(dj).max().unwrap_or(0)
}

/// Offset between two sites, keyed for the decay norm.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Offset {
    pub l: Coords,
    pub j: Coords,
}

impl Offset {
    pub fn norm(&self) -> u32 {
        self.l
            .iter()
            .chain(self.j.iter())
            .map(|x| x.unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    /// `⟨𝔫⟩ = max(1, |𝔫|)`.
    pub fn bracket(&self) -> f64 {
        self.norm().max(1) as f64
    }

    pub fn zero(nu: usize, r: usize) -> Self {
        Offset {
            l: Coords::from_elem(0, nu),
            j: Coords::from_elem(0, r),
        }
    }
}

/// Axis-aligned integer box over the `ν + r` coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxRegion {
    pub lo: Vec<i32>,
    pub hi: Vec<i32>,
}

impl BoxRegion {
    pub fn around(center: &SiteIndex, n: u32) -> Self {
        let n = n as i32;
        let c: Vec<i32> = center.l.iter().chain(center.j.iter()).copied().collect();
        BoxRegion {
            lo: c.iter().map(|x| x - n).collect(),
            hi: c.iter().map(|x| x + n).collect(),
        }
    }

    /// Smallest box containing every site.
    pub fn bounding(sites: &[SiteIndex]) -> Option<Self> {
        let first = sites.first()?;
        let dim = first.l.len() + first.j.len();
        let mut lo = vec![i32::MAX; dim];
        let mut hi = vec![i32::MIN; dim];
        for s in sites {
            for k in 0..dim {
                let c = s.coord(k);
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c);
            }
        }
        Some(BoxRegion { lo, hi })
    }

    pub fn contains(&self, s: &SiteIndex) -> bool {
        (0..self.lo.len()).all(|k| {
            let c = s.coord(k);
            self.lo[k] <= c && c <= self.hi[k]
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGeometry {
    pub nu: usize,
    pub d: usize,
    pub r: usize,
    /// Row `k` is the weight `w_k ∈ R^r`.
    pub weights: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub z: u32,
    pub preset: Preset,
    pub c1: f64,
    pub c2: f64,
    pub b1: f64,
    pub b2: f64,
}

const SCAN_RADIUS: i32 = 6;

impl LatticeGeometry {
    pub fn torus(nu: usize, d: usize) -> Result<Self, LatticeError> {
        Self::new(nu, d, d, Vec::new(), Vec::new(), 1, Preset::Torus)
    }

    pub fn new(
        nu: usize,
        d: usize,
        r: usize,
        weights: Vec<Vec<f64>>,
        rho: Vec<f64>,
        z: u32,
        preset: Preset,
    ) -> Result<Self, LatticeError> {
        if nu == 0 || r == 0 {
            return Err(LatticeError::Dimension("nu and r must be positive"));
        }
        if d < r {
            return Err(LatticeError::Dimension("d must be at least r"));
        }
        if preset == Preset::Torus {
            if d != r {
                return Err(LatticeError::TorusRank { d, r });
            }
            let weights = (0..r)
                .map(|k| (0..r).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
                .collect();
            let b2 = (r as f64).sqrt();
            return Ok(LatticeGeometry {
                nu,
                d,
                r,
                weights,
                rho: vec![0.0; r],
                z: 1,
                preset,
                c1: 1.0,
                c2: ((nu + r) as f64).sqrt(),
                b1: 1.0,
                b2,
            });
        }
        if z == 0 {
            return Err(LatticeError::Dimension("z must be positive"));
        }
        if weights.len() != r || weights.iter().any(|w| w.len() != r) || rho.len() != r {
            return Err(LatticeError::Dimension("weights must be r vectors in R^r, rho in R^r"));
        }
        for a in 0..r {
            for b in a..r {
                let dot: f64 = weights[a].iter().zip(&weights[b]).map(|(x, y)| x * y).sum();
                let scaled = dot * z as f64;
                if (scaled - scaled.round()).abs() > 1e-12 {
                    return Err(LatticeError::Rationality(a, b, dot));
                }
            }
        }
        let det = gram_det(&weights);
        if det.abs() < 1e-12 {
            return Err(LatticeError::DependentWeights(det));
        }
        for i in 0..r {
            let s: f64 = weights.iter().map(|w| w[i]).sum();
            if (s - rho[i]).abs() > 1e-12 {
                return Err(LatticeError::Rho);
            }
        }
        let mut g = LatticeGeometry {
            nu,
            d,
            r,
            weights,
            rho,
            z,
            preset,
            c1: 1.0,
            c2: 1.0,
            b1: 1.0,
            b2: 1.0,
        };
        g.scan_constants();
        Ok(g)
    }

    /// Brute-force `c1, c2, b1, b2` over a box of radius `SCAN_RADIUS`.
    fn scan_constants(&mut self) {
        let mut c1 = f64::INFINITY;
        let mut c2 = 0.0f64;
        let mut b1 = f64::INFINITY;
        let mut b2 = 0.0f64;
        let origin = SiteIndex::new(&vec![0; self.nu], &vec![0; self.r]);
        for s in self.enumerate_box(&origin, SCAN_RADIUS as u32, None) {
            let n = s.norm();
            if n == 0 {
                continue;
            }
            let e = self.euclid(&s);
            c1 = c1.min(e / n as f64);
            c2 = c2.max(e / n as f64);
            let jn = s.j.iter().map(|x| x.unsigned_abs()).max().unwrap_or(0);
            if jn > 0 && s.l.iter().all(|&x| x == 0) {
                let p = self.weight_point(&s.j);
                let nj = p.iter().map(|x| x * x).sum::<f64>().sqrt();
                b1 = b1.min(nj / jn as f64);
                b2 = b2.max(nj / jn as f64);
            }
        }
        // strict inequalities c2 > c1, b2 > b1 as required by the norm equivalences
        self.c1 = c1;
        self.c2 = if c2 > c1 { c2 } else { c1 * (1.0 + 1e-12) };
        self.b1 = b1;
        self.b2 = if b2 > b1 { b2 } else { b1 * (1.0 + 1e-12) };
    }

    pub fn dim(&self) -> usize {
        self.nu + self.r
    }

    /// Whether spatial coordinates are restricted to `j_k ≥ 0`.
    pub fn positive_cone(&self) -> bool {
        self.preset == Preset::Weights
    }

    /// `Σ j_k w_k`.
    pub fn weight_point(&self, j: &[i32]) -> Vec<f64> {
        let mut p = vec![0.0; self.r];
        for (k, &jk) in j.iter().enumerate() {
            for i in 0..self.r {
                p[i] += jk as f64 * self.weights[k][i];
            }
        }
        p
    }

    /// `‖j + ρ‖²`.
    pub fn shifted_sq(&self, j: &[i32]) -> f64 {
        let p = self.weight_point(j);
        p.iter().zip(&self.rho).map(|(x, r)| (x + r) * (x + r)).sum()
    }

    /// `sqrt(‖l‖² + ‖j+ρ‖²)`.
    pub fn euclid(&self, s: &SiteIndex) -> f64 {
        let l2: f64 = s.l.iter().map(|&x| (x as f64) * (x as f64)).sum();
        (l2 + self.shifted_sq(&s.j)).sqrt()
    }

    /// `⟨w_𝔫⟩ = max(c1, 1, sqrt(‖l‖² + ‖j+ρ‖²))`.
    pub fn weight_norm(&self, s: &SiteIndex) -> f64 {
        self.euclid(s).max(self.c1).max(1.0)
    }

    /// `λ_j = −‖j+ρ‖² + ‖ρ‖²`.
    pub fn laplacian_eigenvalue(&self, j: &[i32]) -> f64 {
        let rho2: f64 = self.rho.iter().map(|x| x * x).sum();
        -self.shifted_sq(j) + rho2
    }

    pub fn block_dim(&self, j: &[i32]) -> u32 {
        match self.preset {
            Preset::Torus => 1,
            Preset::Weights => {
                let e = self.d - self.r;
                if e == 0 {
                    1
                } else {
                    let v = self.shifted_sq(j).sqrt().powi(e as i32);
                    (v.floor() as u32).max(1)
                }
            }
        }
    }

    pub fn site(&self, l: &[i32], j: &[i32]) -> SiteIndex {
        SiteIndex {
            l: Coords::from_slice(l),
            j: Coords::from_slice(j),
            block_dim: self.block_dim(j),
        }
    }

    /// Offset `a − b` for the decay norm; differences whose spatial part
    /// leaves the positive cone are mapped to the zero offset.
    pub fn offset(&self, a: &SiteIndex, b: &SiteIndex) -> Offset {
        let o = difference(a, b);
        if self.positive_cone() && o.j.iter().any(|&x| x < 0) {
            Offset::zero(self.nu, self.r)
        } else {
            o
        }
    }

    pub fn in_lattice(&self, j: &[i32]) -> bool {
        !self.positive_cone() || j.iter().all(|&x| x >= 0)
    }

    /// Sites with `|l − l₀| ≤ N`, `|j − j₀| ≤ N` in the lattice, in
    /// lexicographic order. With `clamp`, each coordinate window of width
    /// `2N` is shifted to lie inside the region and then intersected with it.
    pub fn enumerate_box(
        &self,
        center: &SiteIndex,
        n: u32,
        clamp: Option<&BoxRegion>,
    ) -> Vec<SiteIndex> {
        let dim = self.dim();
        let n = n as i32;
        let mut lo = Vec::with_capacity(dim);
        let mut hi = Vec::with_capacity(dim);
        for k in 0..dim {
            let c = center.coord(k);
            let (mut a, mut b) = (c - n, c + n);
            if let Some(reg) = clamp {
                let (rl, rh) = (reg.lo[k], reg.hi[k]);
                if c - rl <= n {
                    a = rl;
                    b = rl + 2 * n;
                } else if rh - c <= n {
                    a = rh - 2 * n;
                    b = rh;
                }
                a = a.max(rl);
                b = b.min(rh);
            }
            if k >= self.nu && self.positive_cone() {
                a = a.max(0);
            }
            lo.push(a);
            hi.push(b);
        }
        let mut out = Vec::new();
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return out;
        }
        let mut cur = lo.clone();
        loop {
            let (l, j) = cur.split_at(self.nu);
            out.push(self.site(l, j));
            let mut k = dim;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                if cur[k] < hi[k] {
                    cur[k] += 1;
                    for kk in k + 1..dim {
                        cur[kk] = lo[kk];
                    }
                    break;
                }
            }
        }
    }
}

/// Diameter `sup |𝔫 − 𝔫'|` of a site set.
pub fn diameter(sites: &[SiteIndex]) -> u32 {
    match BoxRegion::bounding(sites) {
        None => 0,
        Some(b) => b
            .lo
            .iter()
            .zip(&b.hi)
            .map(|(a, c)| (c - a) as u32)
            .max()
            .unwrap_or(0),
    }
}

/// `d(𝔫, U) = inf |𝔫 − 𝔫'|`; `u32::MAX` for empty `U`.
pub fn distance_to_set(s: &SiteIndex, set: &[SiteIndex]) -> u32 {
    set.iter().map(|t| distance(s, t)).min().unwrap_or(u32::MAX)
}

fn gram_det(w: &[Vec<f64>]) -> f64 {
    let r = w.len();
    let mut g: Vec<Vec<f64>> = (0..r)
        .map(|a| {
            (0..r)
                .map(|b| w[a].iter().zip(&w[b]).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    let mut det = 1.0;
    for c in 0..r {
        let p = (c..r)
            .max_by(|&a, &b| g[a][c].abs().partial_cmp(&g[b][c].abs()).unwrap())
            .unwrap();
        if g[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            g.swap(p, c);
            det = -det;
        }
        det *= g[c][c];
        for row in c + 1..r {
            let f = g[row][c] / g[c][c];
            for col in c..r {
                g[row][col] -= f * g[c][col];
            }
        }
    }
    det
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torus_constants() {
        let g = LatticeGeometry::torus(1, 1).unwrap();
        assert_eq!(g.c1, 1.0);
        assert!((g.c2 - 2f64.sqrt()).abs() < 1e-15);
        let g = LatticeGeometry::torus(2, 2).unwrap();
        assert!((g.c2 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn torus_c2_matches_scan() {
        let g = LatticeGeometry::torus(2, 2).unwrap();
        let o = g.site(&[0, 0], &[0, 0]);
        let worst = g
            .enumerate_box(&o, 5, None)
            .iter()
            .filter(|s| s.norm() > 0)
            .map(|s| g.euclid(s) / s.norm() as f64)
            .fold(0.0, f64::max);
        assert!((worst - g.c2).abs() < 1e-12);
    }

    #[test]
    fn weight_lattice_accepts_half_integral() {
        let w = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let g = LatticeGeometry::new(1, 2, 2, w, vec![1.5, 0.5], 2, Preset::Weights).unwrap();
        assert!(g.c1 > 0.0 && g.c2 > g.c1);
        let w = vec![vec![1.0, 0.0], vec![0.3, 0.5]];
        assert!(matches!(
            LatticeGeometry::new(1, 2, 2, w, vec![1.3, 0.5], 2, Preset::Weights),
            Err(LatticeError::Rationality(..))
        ));
        let w = vec![vec![1.0, 0.0], vec![2.0, 0.0]];
        assert!(matches!(
            LatticeGeometry::new(1, 2, 2, w, vec![3.0, 0.0], 1, Preset::Weights),
            Err(LatticeError::DependentWeights(_))
        ));
    }

    #[test]
    fn norms_and_eigenvalues() {
        let g = LatticeGeometry::torus(1, 1).unwrap();
        assert_eq!(g.site(&[0], &[0]).norm(), 0);
        assert_eq!(SiteIndex::new(&[3, -1], &[2]).norm(), 3);
        assert_eq!(distance(&g.site(&[0], &[5]), &g.site(&[0], &[2])), 3);
        assert_eq!(g.weight_norm(&g.site(&[0], &[0])), 1.0);
        assert_eq!(g.weight_norm(&g.site(&[3], &[4])), 5.0);
        assert_eq!(g.weight_norm(&g.site(&[1], &[0])), 1.0);
        assert_eq!(g.laplacian_eigenvalue(&[0]), 0.0);
        assert_eq!(g.laplacian_eigenvalue(&[3]), -9.0);
        let g2 = LatticeGeometry::torus(1, 2).unwrap();
        assert_eq!(g2.laplacian_eigenvalue(&[1, 2]), -5.0);
    }

    #[test]
    fn boxes() {
        let w = vec![vec![1.0]];
        let g = LatticeGeometry::new(1, 1, 1, w, vec![1.0], 1, Preset::Weights).unwrap();
        let o = g.site(&[0], &[0]);
        assert_eq!(g.enumerate_box(&o, 1, None).len(), 6);
        assert_eq!(g.enumerate_box(&o, 0, None), vec![o.clone()]);

        let t = LatticeGeometry::torus(1, 1).unwrap();
        let region = BoxRegion {
            lo: vec![-4, -4],
            hi: vec![4, 4],
        };
        let corner = t.site(&[-4], &[-4]);
        let b = t.enumerate_box(&corner, 2, Some(&region));
        assert_eq!(b.len(), 25);
        assert_eq!(b.first().unwrap(), &t.site(&[-4], &[-4]));
        assert_eq!(b.last().unwrap(), &t.site(&[0], &[0]));
        assert_eq!(diameter(&b), 4);
    }

    #[test]
    fn ordering_is_lexicographic() {
        let t = LatticeGeometry::torus(1, 1).unwrap();
        let b = t.enumerate_box(&t.site(&[0], &[0]), 2, None);
        let mut s = b.clone();
        s.sort();
        assert_eq!(s, b);
    }
}
