//! Block matrices between site sets with the s-decay norm
//! `|M|_s² = K₀ Σ_𝔫 [M(𝔫)]² ⟨𝔫⟩^{2s}`, where `[M(𝔫)]` is the largest block
//! operator norm among blocks at offset `𝔫`.
//!
//! Storage is sparse by scalar component. With unit blocks (torus) the
//! block norm is the entry modulus; larger blocks are gathered and measured
//! by SVD.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
#[allow(unused_imports)]
use num_traits::Float;

use crate::dense::{self, CMat};
use crate::lattice::{LatticeGeometry, Offset, SiteIndex};
use crate::par;
use crate::sobolev::{Block, FourierField};

/// Dense assembly limit for singular-value computations.
pub const DENSE_LIMIT: usize = 5000;
/// Neumann series stop: term s₀-norm below this fraction of the sum.
pub const NEUMANN_TOL: f64 = 1e-14;
const NEUMANN_MAX_TERMS: usize = 400;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecayError {
    #[error("site sets do not match: {0}")]
    Mismatch(&'static str),
    #[error("matrix with {0} rows exceeds the dense limit")]
    TooLarge(usize),
    #[error("site not present in the matrix index set")]
    MissingSite,
    #[error("K0 series diverges: need 2 s0 > nu + r (s0 = {0})")]
    K0Diverges(f64),
    #[error("smallness fails: |Minv|_s0 |P|_s0 = {s_product:.3e}, ||Minv|| ||P|| <= {op_product:.3e} (both > 1/2)")]
    Smallness { s_product: f64, op_product: f64 },
    #[error("Neumann series did not reach tolerance after {0} terms")]
    NotConverged(usize),
}

/// Geometry, Sobolev index `s₀` and normalization `K₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormContext {
    pub geom: Arc<LatticeGeometry>,
    pub s0: f64,
    pub k0: f64,
}

impl NormContext {
    pub fn new(geom: Arc<LatticeGeometry>, s0: f64) -> Result<Arc<Self>, DecayError> {
        let k0 = compute_k0(geom.nu + geom.r, s0)?;
        Ok(Arc::new(NormContext { geom, s0, k0 }))
    }
}

/// `K₀ = 4(S_R + T_R)` where `S_R` sums `⟨𝔫⟩^{−2s₀}` over `|𝔫| ≤ R` on
/// `Z^D` and `T_R` bounds the tail; `R ≥ 200` grows until `T_R < 1e-6 S_R`.
pub fn compute_k0(dim: usize, s0: f64) -> Result<f64, DecayError> {
    let dd = dim as f64;
    if 2.0 * s0 <= dd {
        return Err(DecayError::K0Diverges(s0));
    }
    let shell = |k: f64| (2.0 * k + 1.0).powi(dim as i32) - (2.0 * k - 1.0).powi(dim as i32);
    let tail = |r: f64| {
        2.0 * dd * (2.0 + 1.0 / (r + 1.0)).powi(dim as i32 - 1) * r.powf(dd - 2.0 * s0)
            / (2.0 * s0 - dd)
    };
    let mut sum = 1.0;
    let mut k = 1u64;
    loop {
        sum += shell(k as f64) * (k as f64).powf(-2.0 * s0);
        if k >= 200 && tail(k as f64) < 1e-6 * sum {
            return Ok(4.0 * (sum + tail(k as f64)));
        }
        if k > 10_000_000 {
            return Ok(4.0 * (sum + tail(k as f64)));
        }
        k += 1;
    }
}

/// Ordered site list with component offsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteSet {
    sites: Vec<SiteIndex>,
    start: Vec<usize>,
    comp_site: Vec<u32>,
}

impl SiteSet {
    pub fn new(mut sites: Vec<SiteIndex>) -> Arc<Self> {
        sites.sort();
        sites.dedup();
        let mut start = Vec::with_capacity(sites.len() + 1);
        let mut comp_site = Vec::new();
        let mut c = 0;
        for (i, s) in sites.iter().enumerate() {
            start.push(c);
            for _ in 0..s.block_dim {
                comp_site.push(i as u32);
            }
            c += s.block_dim as usize;
        }
        start.push(c);
        Arc::new(SiteSet {
            sites,
            start,
            comp_site,
        })
    }

    pub fn sites(&self) -> &[SiteIndex] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Number of scalar components.
    pub fn dim(&self) -> usize {
        *self.start.last().unwrap()
    }

    pub fn position(&self, s: &SiteIndex) -> Option<usize> {
        self.sites.binary_search(s).ok()
    }

    pub fn start(&self, site: usize) -> usize {
        self.start[site]
    }

    pub fn site_of(&self, comp: usize) -> usize {
        self.comp_site[comp] as usize
    }

    pub fn unit_blocks(&self) -> bool {
        self.dim() == self.len()
    }

    pub fn subset(&self, keep: impl Fn(&SiteIndex) -> bool) -> Arc<SiteSet> {
        SiteSet::new(self.sites.iter().filter(|s| keep(s)).cloned().collect())
    }
}

fn same_set(a: &Arc<SiteSet>, b: &Arc<SiteSet>) -> bool {
    Arc::ptr_eq(a, b) || a.sites == b.sites
}

type Row = Vec<(u32, Complex64)>;

#[derive(Debug, Clone)]
pub struct DecayMatrix {
    ctx: Arc<NormContext>,
    rows: Arc<SiteSet>,
    cols: Arc<SiteSet>,
    data: Vec<Row>,
}

/// `[M(𝔫)]` for every offset present.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayProfile {
    pub k0: f64,
    pub entries: BTreeMap<Offset, f64>,
}

impl DecayProfile {
    pub fn log_s_norm(&self, s: f64) -> f64 {
        let terms: Vec<f64> = self
            .entries
            .iter()
            .filter(|(_, &v)| v > 0.0)
            .map(|(o, &v)| 2.0 * v.ln() + 2.0 * s * o.bracket().ln())
            .collect();
        if terms.is_empty() {
            return f64::NEG_INFINITY;
        }
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        0.5 * (self.k0.ln() + m + sum.ln())
    }

    pub fn s_norm(&self, s: f64) -> f64 {
        self.log_s_norm(s).exp()
    }
}

impl DecayMatrix {
    pub fn zeros(ctx: &Arc<NormContext>, rows: Arc<SiteSet>, cols: Arc<SiteSet>) -> Self {
        let n = rows.dim();
        DecayMatrix {
            ctx: ctx.clone(),
            rows,
            cols,
            data: vec![Vec::new(); n],
        }
    }

    pub fn identity(ctx: &Arc<NormContext>, sites: Arc<SiteSet>) -> Self {
        let data = (0..sites.dim())
            .map(|i| vec![(i as u32, Complex64::new(1.0, 0.0))])
            .collect();
        DecayMatrix {
            ctx: ctx.clone(),
            rows: sites.clone(),
            cols: sites,
            data,
        }
    }

    /// Scalar-times-identity diagonal blocks.
    pub fn diagonal(ctx: &Arc<NormContext>, sites: Arc<SiteSet>, values: &[f64]) -> Self {
        let mut data = vec![Vec::new(); sites.dim()];
        for (i, v) in values.iter().enumerate() {
            for c in sites.start(i)..sites.start(i + 1) {
                if *v != 0.0 {
                    data[c].push((c as u32, Complex64::new(*v, 0.0)));
                }
            }
        }
        DecayMatrix {
            ctx: ctx.clone(),
            rows: sites.clone(),
            cols: sites,
            data,
        }
    }

    pub fn from_rows(
        ctx: &Arc<NormContext>,
        rows: Arc<SiteSet>,
        cols: Arc<SiteSet>,
        mut data: Vec<Row>,
    ) -> Self {
        assert_eq!(data.len(), rows.dim());
        for r in data.iter_mut() {
            r.sort_by_key(|e| e.0);
            r.retain(|e| e.1 != Complex64::new(0.0, 0.0));
        }
        DecayMatrix {
            ctx: ctx.clone(),
            rows,
            cols,
            data,
        }
    }

    pub fn from_dense(
        ctx: &Arc<NormContext>,
        rows: Arc<SiteSet>,
        cols: Arc<SiteSet>,
        m: &CMat,
    ) -> Self {
        assert_eq!((m.nrows(), m.ncols()), (rows.dim(), cols.dim()));
        let data = (0..m.nrows())
            .map(|i| {
                (0..m.ncols())
                    .filter(|&j| m[(i, j)] != Complex64::new(0.0, 0.0))
                    .map(|j| (j as u32, m[(i, j)]))
                    .collect()
            })
            .collect();
        DecayMatrix {
            ctx: ctx.clone(),
            rows,
            cols,
            data,
        }
    }

    pub fn to_dense(&self) -> CMat {
        let mut m = CMat::zeros(self.nrows(), self.ncols());
        for (i, r) in self.data.iter().enumerate() {
            for &(j, v) in r {
                m[(i, j as usize)] = v;
            }
        }
        m
    }

    pub fn ctx(&self) -> &Arc<NormContext> {
        &self.ctx
    }

    pub fn geometry(&self) -> &Arc<LatticeGeometry> {
        &self.ctx.geom
    }

    pub fn k0(&self) -> f64 {
        self.ctx.k0
    }

    pub fn row_sites(&self) -> &Arc<SiteSet> {
        &self.rows
    }

    pub fn col_sites(&self) -> &Arc<SiteSet> {
        &self.cols
    }

    pub fn nrows(&self) -> usize {
        self.rows.dim()
    }

    pub fn ncols(&self) -> usize {
        self.cols.dim()
    }

    pub fn row(&self, i: usize) -> &[(u32, Complex64)] {
        &self.data[i]
    }

    pub fn nnz(&self) -> usize {
        self.data.iter().map(|r| r.len()).sum()
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let r = &self.data[i];
        match r.binary_search_by_key(&(j as u32), |e| e.0) {
            Ok(k) => r[k].1,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn get_sites(&self, a: &SiteIndex, b: &SiteIndex) -> Option<Complex64> {
        let i = self.rows.position(a)?;
        let j = self.cols.position(b)?;
        Some(self.get(self.rows.start(i), self.cols.start(j)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|r| r.iter())
            .map(|e| e.1.norm())
            .fold(0.0, f64::max)
    }

    pub fn hermitian_defect(&self) -> f64 {
        if !same_set(&self.rows, &self.cols) {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for (i, r) in self.data.iter().enumerate() {
            for &(j, v) in r {
                worst = worst.max((v - self.get(j as usize, i).conj()).norm());
            }
        }
        worst
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        for r in out.data.iter_mut() {
            for e in r.iter_mut() {
                e.1 *= c;
            }
        }
        out
    }

    pub fn scale_re(&self, c: f64) -> Self {
        self.scale(Complex64::new(c, 0.0))
    }

    pub fn neg(&self) -> Self {
        self.scale(Complex64::new(-1.0, 0.0))
    }

    pub fn adjoint(&self) -> Self {
        let mut data = vec![Vec::new(); self.ncols()];
        for (i, r) in self.data.iter().enumerate() {
            for &(j, v) in r {
                data[j as usize].push((i as u32, v.conj()));
            }
        }
        DecayMatrix {
            ctx: self.ctx.clone(),
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            data,
        }
    }

    fn combine(&self, other: &Self, c: Complex64) -> Result<Self, DecayError> {
        if !same_set(&self.rows, &other.rows) || !same_set(&self.cols, &other.cols) {
            return Err(DecayError::Mismatch("sum needs equal row and column sets"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| merge_rows(a, b, c))
            .collect();
        Ok(DecayMatrix {
            ctx: self.ctx.clone(),
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self, DecayError> {
        self.combine(other, Complex64::new(1.0, 0.0))
    }

    pub fn sub(&self, other: &Self) -> Result<Self, DecayError> {
        self.combine(other, Complex64::new(-1.0, 0.0))
    }

    /// Block product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self, DecayError> {
        if !same_set(&self.cols, &other.rows) {
            return Err(DecayError::Mismatch("inner site sets differ"));
        }
        let sparse_flops: usize = self
            .data
            .iter()
            .flat_map(|r| r.iter())
            .map(|e| other.data[e.0 as usize].len())
            .sum();
        let dense_flops = self.nrows() * self.ncols() * other.ncols();
        if sparse_flops > 0 && sparse_flops >= dense_flops / 8 && self.nrows().max(other.ncols()) <= DENSE_LIMIT {
            let m = dense::matmul(&self.to_dense(), &other.to_dense());
            return Ok(DecayMatrix::from_dense(&self.ctx, self.rows.clone(), other.cols.clone(), &m));
        }
        let data = par::map_range(self.nrows(), |i| {
            let mut acc: Vec<(u32, Complex64)> = Vec::new();
            for &(k, a) in &self.data[i] {
                for &(j, b) in &other.data[k as usize] {
                    acc.push((j, a * b));
                }
            }
            compress(acc)
        });
        Ok(DecayMatrix {
            ctx: self.ctx.clone(),
            rows: self.rows.clone(),
            cols: other.cols.clone(),
            data,
        })
    }

    /// Drops entries below `tol` in modulus.
    pub fn pruned(mut self, tol: f64) -> Self {
        for r in self.data.iter_mut() {
            r.retain(|e| e.1.norm() >= tol);
        }
        self
    }

    /// Restriction to the given row and column sites (which must be present).
    pub fn submatrix(&self, rows: &Arc<SiteSet>, cols: &Arc<SiteSet>) -> Result<Self, DecayError> {
        let mut col_map = vec![u32::MAX; self.ncols()];
        for (k, s) in cols.sites().iter().enumerate() {
            let p = self.cols.position(s).ok_or(DecayError::MissingSite)?;
            for c in 0..s.block_dim as usize {
                col_map[self.cols.start(p) + c] = (cols.start(k) + c) as u32;
            }
        }
        let mut data = Vec::with_capacity(rows.dim());
        for s in rows.sites() {
            let p = self.rows.position(s).ok_or(DecayError::MissingSite)?;
            for c in 0..s.block_dim as usize {
                let src = &self.data[self.rows.start(p) + c];
                let mut r: Row = src
                    .iter()
                    .filter(|e| col_map[e.0 as usize] != u32::MAX)
                    .map(|e| (col_map[e.0 as usize], e.1))
                    .collect();
                r.sort_by_key(|e| e.0);
                data.push(r);
            }
        }
        Ok(DecayMatrix {
            ctx: self.ctx.clone(),
            rows: rows.clone(),
            cols: cols.clone(),
            data,
        })
    }

    /// Site positions grouped into connected components of the coupling
    /// graph (square matrices on one site set), ordered by smallest site.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.rows.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (i, r) in self.data.iter().enumerate() {
            let a = self.rows.site_of(i);
            for e in r {
                let b = self.cols.site_of(e.0 as usize);
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    /// `Q = M − Diag(M)`: only blocks between distinct sites.
    pub fn off_diagonal(&self) -> Self {
        let mut out = self.clone();
        for (i, r) in out.data.iter_mut().enumerate() {
            let rs = &self.rows.sites()[self.rows.site_of(i)];
            r.retain(|e| &self.cols.sites()[self.cols.site_of(e.0 as usize)] != rs);
        }
        out
    }

    /// Scalar on the diagonal block of site `i` (row and column sets equal).
    pub fn diagonal_scalar(&self, i: usize) -> Complex64 {
        let c = self.rows.start(i);
        self.get(c, c)
    }

    /// Offset profile `[M(𝔫)]`.
    pub fn profile(&self) -> DecayProfile {
        let geom = &self.ctx.geom;
        let unit = self.rows.unit_blocks() && self.cols.unit_blocks();
        let site_rows: Vec<usize> = (0..self.rows.len()).collect();
        let chunk = 256;
        let chunks: Vec<&[usize]> = site_rows.chunks(chunk).collect();
        let partial = par::map(&chunks, |idx| {
            let mut m: BTreeMap<Offset, f64> = BTreeMap::new();
            for &si in idx.iter() {
                let rs = &self.rows.sites()[si];
                if unit {
                    for &(j, v) in &self.data[si] {
                        let cs = &self.cols.sites()[j as usize];
                        let o = geom.offset(rs, cs);
                        let e = m.entry(o).or_insert(0.0);
                        *e = e.max(v.norm());
                    }
                } else {
                    let r0 = self.rows.start(si);
                    let r1 = self.rows.start(si + 1);
                    let mut by_col: BTreeMap<usize, Vec<(usize, usize, Complex64)>> =
                        BTreeMap::new();
                    for rc in r0..r1 {
                        for &(j, v) in &self.data[rc] {
                            let cj = self.cols.site_of(j as usize);
                            by_col.entry(cj).or_default().push((
                                rc - r0,
                                j as usize - self.cols.start(cj),
                                v,
                            ));
                        }
                    }
                    for (cj, ents) in by_col {
                        let cs = &self.cols.sites()[cj];
                        let mut b = CMat::zeros(rs.block_dim as usize, cs.block_dim as usize);
                        for (a, c, v) in ents {
                            b[(a, c)] = v;
                        }
                        let o = geom.offset(rs, cs);
                        let e = m.entry(o).or_insert(0.0);
                        *e = e.max(dense::op_norm(&b));
                    }
                }
            }
            m
        });
        let mut entries: BTreeMap<Offset, f64> = BTreeMap::new();
        for m in partial {
            for (o, v) in m {
                let e = entries.entry(o).or_insert(0.0);
                *e = e.max(v);
            }
        }
        DecayProfile {
            k0: self.ctx.k0,
            entries,
        }
    }

    pub fn s_norm(&self, s: f64) -> f64 {
        self.profile().s_norm(s)
    }

    pub fn log_s_norm(&self, s: f64) -> f64 {
        self.profile().log_s_norm(s)
    }

    /// Largest singular value of the dense assembly.
    pub fn op_norm(&self) -> Result<f64, DecayError> {
        let n = self.nrows().max(self.ncols());
        if n > DENSE_LIMIT {
            return Err(DecayError::TooLarge(n));
        }
        Ok(dense::op_norm(&self.to_dense()))
    }

    /// `sqrt(‖M‖_1 ‖M‖_∞) ≥ ‖M‖₀`, computed sparsely.
    pub fn op_norm_bound(&self) -> f64 {
        let row = self
            .data
            .iter()
            .map(|r| r.iter().map(|e| e.1.norm()).sum::<f64>())
            .fold(0.0, f64::max);
        let mut colsum = vec![0.0; self.ncols()];
        for r in &self.data {
            for &(j, v) in r {
                colsum[j as usize] += v.norm();
            }
        }
        let col = colsum.into_iter().fold(0.0, f64::max);
        (row * col).sqrt()
    }

    /// Exact operator norm when affordable, the Schur bound otherwise.
    pub fn op_norm_upper(&self) -> f64 {
        let b = self.op_norm_bound();
        if self.nrows().max(self.ncols()) <= 1200 {
            self.op_norm().unwrap_or(b).min(b)
        } else {
            b
        }
    }

    pub fn apply_vec(&self, x: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(x.len(), self.ncols());
        self.data
            .iter()
            .map(|r| r.iter().map(|&(j, v)| v * x[j as usize]).sum())
            .collect()
    }

    /// Matrix-vector product on fields; the support of `h` must lie in the
    /// column sites.
    pub fn apply(&self, h: &FourierField) -> Result<FourierField, DecayError> {
        let mut x = vec![Complex64::new(0.0, 0.0); self.ncols()];
        for (s, b) in h.iter() {
            let p = self.cols.position(s).ok_or(DecayError::MissingSite)?;
            for (c, z) in b.iter().enumerate() {
                x[self.cols.start(p) + c] = *z;
            }
        }
        let y = self.apply_vec(&x);
        let mut out = FourierField::zero(self.ctx.geom.clone());
        for (i, s) in self.rows.sites().iter().enumerate() {
            let blk: Block = y[self.rows.start(i)..self.rows.start(i + 1)].iter().copied().collect();
            if blk.iter().any(|z| *z != Complex64::new(0.0, 0.0)) {
                out.add_block(s.clone(), &blk);
            }
        }
        Ok(out)
    }

    /// Multiplication operator `u ↦ g u`: block `(𝔫, 𝔫')` is `g_{𝔫−𝔫'}`
    /// times the rectangular identity.
    pub fn from_multiplier(
        ctx: &Arc<NormContext>,
        g: &FourierField,
        rows: Arc<SiteSet>,
        cols: Arc<SiteSet>,
    ) -> Self {
        let geom = &ctx.geom;
        let coeffs: Vec<(&SiteIndex, Complex64)> = g.iter().map(|(s, b)| (s, b[0])).collect();
        let data = par::map_range(rows.len(), |ri| {
            let rs = &rows.sites()[ri];
            let mut out: Vec<Row> = vec![Vec::new(); rs.block_dim as usize];
            for (gs, gv) in &coeffs {
                let l: Vec<i32> = rs.l.iter().zip(&gs.l).map(|(a, b)| a - b).collect();
                let j: Vec<i32> = rs.j.iter().zip(&gs.j).map(|(a, b)| a - b).collect();
                if !geom.in_lattice(&j) {
                    continue;
                }
                let cs = geom.site(&l, &j);
                if let Some(ci) = cols.position(&cs) {
                    let k = rs.block_dim.min(cs.block_dim) as usize;
                    for (p, row) in out.iter_mut().enumerate().take(k) {
                        row.push(((cols.start(ci) + p) as u32, *gv));
                    }
                }
            }
            for r in out.iter_mut() {
                r.sort_by_key(|e| e.0);
            }
            out
        });
        let data = data.into_iter().flatten().collect();
        DecayMatrix::from_rows(ctx, rows.clone(), cols, data)
    }
}

fn merge_rows(a: &Row, b: &Row, c: Complex64) -> Row {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j >= b.len() || (i < a.len() && a[i].0 < b[j].0) {
            out.push(a[i]);
            i += 1;
        } else if i >= a.len() || b[j].0 < a[i].0 {
            out.push((b[j].0, b[j].1 * c));
            j += 1;
        } else {
            let v = a[i].1 + b[j].1 * c;
            if v != Complex64::new(0.0, 0.0) {
                out.push((a[i].0, v));
            }
            i += 1;
            j += 1;
        }
    }
    out
}

fn compress(mut acc: Vec<(u32, Complex64)>) -> Row {
    acc.sort_by_key(|e| e.0);
    let mut out: Row = Vec::with_capacity(acc.len());
    for (j, v) in acc {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += v,
            _ => out.push((j, v)),
        }
    }
    out.retain(|e| e.1 != Complex64::new(0.0, 0.0));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallnessKind {
    /// `|M⁻¹|_{s₀} |P|_{s₀} ≤ ½`.
    DecayNorm,
    /// `‖M⁻¹‖₀ ‖P‖₀ ≤ ½`.
    OperatorNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeumannReport {
    pub kind: SmallnessKind,
    pub s_product: f64,
    pub op_product: Option<f64>,
    pub terms: usize,
    pub minv_s0: f64,
    pub result_s0: f64,
}

/// Left inverse of `M + P` from a left inverse `Minv` of `M`:
/// `Σ_k (−Minv P)^k Minv`.
pub fn perturb_left_inverse(
    minv: &DecayMatrix,
    p: &DecayMatrix,
) -> Result<(DecayMatrix, NeumannReport), DecayError> {
    perturb_left_inverse_with(minv, p, None)
}

/// As [`perturb_left_inverse`], with a known bound on `‖Minv‖₀` for the
/// operator-norm smallness test.
pub fn perturb_left_inverse_with(
    minv: &DecayMatrix,
    p: &DecayMatrix,
    minv_op: Option<f64>,
) -> Result<(DecayMatrix, NeumannReport), DecayError> {
    if !same_set(&minv.cols, &p.rows) || !same_set(&minv.rows, &p.cols) {
        return Err(DecayError::Mismatch("Minv must map the rows of P back to its columns"));
    }
    let s0 = minv.ctx.s0;
    let minv_s0 = minv.s_norm(s0);
    let p_s0 = p.s_norm(s0);
    let s_product = minv_s0 * p_s0;
    let mut op_product = None;
    let kind = if s_product <= 0.5 {
        SmallnessKind::DecayNorm
    } else {
        let mo = minv_op.unwrap_or_else(|| minv.op_norm_upper());
        let prod = mo * p.op_norm_upper();
        op_product = Some(prod);
        if prod <= 0.5 {
            SmallnessKind::OperatorNorm
        } else {
            return Err(DecayError::Smallness {
                s_product,
                op_product: prod,
            });
        }
    };
    let floor = 1e-18 * minv.max_abs();
    let k = minv.matmul(p)?.pruned(floor);
    let mut sum = minv.clone();
    let mut term = minv.clone();
    let mut terms = 1;
    loop {
        if k.nnz() == 0 {
            break;
        }
        term = k.matmul(&term)?.neg().pruned(floor);
        sum = sum.add(&term)?;
        terms += 1;
        let lt = term.log_s_norm(s0);
        if lt == f64::NEG_INFINITY || lt < NEUMANN_TOL.ln() + sum.log_s_norm(s0) {
            break;
        }
        if terms > NEUMANN_MAX_TERMS {
            return Err(DecayError::NotConverged(terms));
        }
    }
    let result_s0 = sum.s_norm(s0);
    Ok((
        sum,
        NeumannReport {
            kind,
            s_product,
            op_product,
            terms,
            minv_s0,
            result_s0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> Arc<NormContext> {
        NormContext::new(Arc::new(LatticeGeometry::torus(1, 1).unwrap()), 2.0).unwrap()
    }

    fn sites(c: &Arc<NormContext>, n: u32) -> Arc<SiteSet> {
        let g = &c.geom;
        SiteSet::new(g.enumerate_box(&g.site(&[0], &[0]), n, None))
    }

    #[test]
    fn k0_value() {
        // 4(1 + 8 ζ(3)) for Z² and s0 = 2
        let k = compute_k0(2, 2.0).unwrap();
        let exact = 4.0 * (1.0 + 8.0 * 1.202_056_903_159_594);
        assert!(k > exact && k < exact * (1.0 + 2e-6));
    }

    #[test]
    fn basic_norms() {
        let c = ctx();
        let s = sites(&c, 2);
        let z = DecayMatrix::zeros(&c, s.clone(), s.clone());
        assert_eq!(z.s_norm(3.0), 0.0);
        let id = DecayMatrix::identity(&c, s.clone());
        assert!((id.s_norm(5.0) - c.k0.sqrt()).abs() < 1e-12);
        let mut d = CMat::zeros(s.dim(), s.dim());
        let a = s.position(&c.geom.site(&[1], &[0])).unwrap();
        let b = s.position(&c.geom.site(&[-1], &[0])).unwrap();
        d[(a, b)] = Complex64::new(3.0, 0.0);
        let m = DecayMatrix::from_dense(&c, s.clone(), s.clone(), &d);
        for sv in [0.0, 1.0, 2.5] {
            let want = c.k0.sqrt() * 3.0 * 2f64.powf(sv);
            assert!((m.s_norm(sv) - want).abs() < 1e-10 * want);
        }
        let diag = DecayMatrix::diagonal(&c, s.clone(), &vec![1.0; s.len()]);
        assert!((diag.op_norm().unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn multiplier_of_cos() {
        let c = ctx();
        let s = sites(&c, 2);
        let g = FourierField::from_modes(
            c.geom.clone(),
            &[(&[0], &[1], Complex64::new(0.5, 0.0)), (&[0], &[-1], Complex64::new(0.5, 0.0))],
        );
        let m = DecayMatrix::from_multiplier(&c, &g, s.clone(), s.clone());
        for (i, a) in s.sites().iter().enumerate() {
            for (j, b) in s.sites().iter().enumerate() {
                let want = if a.l == b.l && (a.j[0] - b.j[0]).abs() == 1 { 0.5 } else { 0.0 };
                assert_eq!(m.get(i, j).re, want);
            }
        }
        let one = FourierField::constant(c.geom.clone(), 2.0);
        let m = DecayMatrix::from_multiplier(&c, &one, s.clone(), s.clone());
        assert_eq!(m.to_dense(), CMat::identity(s.dim(), s.dim()) * Complex64::new(2.0, 0.0));
    }

    #[test]
    fn neumann_scalar() {
        let c = ctx();
        let s = sites(&c, 1);
        let id = DecayMatrix::identity(&c, s.clone());
        let z = DecayMatrix::zeros(&c, s.clone(), s.clone());
        let (r, _) = perturb_left_inverse(&id, &z).unwrap();
        assert_eq!(r.to_dense(), id.to_dense());
        let p = id.scale(Complex64::new(0.01, 0.0));
        let (r, rep) = perturb_left_inverse(&id, &p).unwrap();
        let want = 1.0 / 1.01;
        for i in 0..s.dim() {
            assert!((r.get(i, i).re - want).abs() < 1e-14);
        }
        assert!(rep.result_s0 <= 2.0 * c.k0.sqrt());
        // 0.1 I fails the decay-norm test (√K₀ ≈ 6.5) but passes the operator one
        let p = id.scale(Complex64::new(0.1, 0.0));
        let (r, rep) = perturb_left_inverse(&id, &p).unwrap();
        assert_eq!(rep.kind, SmallnessKind::OperatorNorm);
        assert!((r.get(0, 0).re - 1.0 / 1.1).abs() < 1e-13);
        let p = id.scale(Complex64::new(0.9, 0.0));
        assert!(matches!(perturb_left_inverse(&id, &p), Err(DecayError::Smallness { .. })));
    }

    #[test]
    fn submatrix_and_apply() {
        let c = ctx();
        let s = sites(&c, 2);
        let m = CMat::from_fn(s.dim(), s.dim(), |i, j| Complex64::new((i * 31 + j * 7) as f64 % 5.0, 0.0));
        let m = DecayMatrix::from_dense(&c, s.clone(), s.clone(), &m);
        let sub = s.subset(|x| x.norm() <= 1);
        let ms = m.submatrix(&sub, &sub).unwrap();
        for (i, a) in sub.sites().iter().enumerate() {
            for (j, b) in sub.sites().iter().enumerate() {
                assert_eq!(ms.get(i, j), m.get_sites(a, b).unwrap());
            }
        }
        let h = FourierField::from_modes(c.geom.clone(), &[(&[1], &[1], Complex64::new(1.0, 0.0))]);
        let id = DecayMatrix::identity(&c, s.clone());
        assert_eq!(id.apply(&h).unwrap(), h);
    }
}
