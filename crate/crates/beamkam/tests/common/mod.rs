#![allow(dead_code)]

use std::sync::Arc;

use beamkam_core::dense::CMat;
use beamkam_core::decay_matrix::DecayMatrix;
use beamkam_core::lattice::LatticeGeometry;
use beamkam_core::sobolev::FourierField;
use beamkam_core::Complex64;
use faer::complex_native::c64;
use faer::prelude::*;
use faer::Mat;

/// Even-even Galerkin model of the beam equation with
/// `V̄ = v1·cos x`, `f = u³ + cos φ cos x`, solved by dense Newton in the
/// basis `cos(lφ)cos(jx)`, `0 ≤ l, j ≤ k`.
pub struct CosOracle {
    pub k: usize,
    pub grid: usize,
    pub eps: f64,
    pub freq: f64,
    pub m: f64,
    pub v1: f64,
    cos: Vec<f64>,
}

impl CosOracle {
    pub fn new(k: usize, grid: usize, eps: f64, freq: f64, m: f64, v1: f64) -> Self {
        let nmax = 2 * k + 1;
        let mut cos = vec![0.0; grid * nmax];
        for a in 0..grid {
            for p in 0..nmax {
                let t = 2.0 * std::f64::consts::PI * ((a * p) % grid) as f64 / grid as f64;
                cos[a * nmax + p] = t.cos();
            }
        }
        CosOracle { k, grid, eps, freq, m, v1, cos }
    }

    fn nb(&self) -> usize {
        self.k + 1
    }

    fn c(&self, a: usize, p: usize) -> f64 {
        self.cos[a * (2 * self.k + 1) + p]
    }

    /// Grid values of `Σ c_{lj} cos(lφ)cos(jx)` with `l, j < deg`.
    fn synth(&self, c: &[f64], deg: usize) -> Vec<f64> {
        let m = self.grid;
        let mut t = vec![0.0; deg * m];
        for l in 0..deg {
            for b in 0..m {
                t[l * m + b] = (0..deg).map(|j| c[l * deg + j] * self.c(b, j)).sum();
            }
        }
        let mut out = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                out[a * m + b] = (0..deg).map(|l| self.c(a, l) * t[l * m + b]).sum();
            }
        }
        out
    }

    /// Cosine coefficients with `l, j < deg` of grid values.
    fn analyze(&self, g: &[f64], deg: usize) -> Vec<f64> {
        let m = self.grid;
        let w = |p: usize| if p == 0 { 1.0 / m as f64 } else { 2.0 / m as f64 };
        let mut t = vec![0.0; m * deg];
        for a in 0..m {
            for j in 0..deg {
                t[a * deg + j] = w(j) * (0..m).map(|b| g[a * m + b] * self.c(b, j)).sum::<f64>();
            }
        }
        let mut out = vec![0.0; deg * deg];
        for l in 0..deg {
            for j in 0..deg {
                out[l * deg + j] = w(l) * (0..m).map(|a| self.c(a, l) * t[a * deg + j]).sum::<f64>();
            }
        }
        out
    }

    fn diag(&self, l: usize, j: usize) -> f64 {
        let om = self.freq * l as f64;
        -om * om + (j as f64).powi(4) + self.m
    }

    fn linear(&self, c: &[f64]) -> Vec<f64> {
        let nb = self.nb();
        let mut out = vec![0.0; nb * nb];
        for l in 0..nb {
            for j in 0..nb {
                let v = c[l * nb + j];
                out[l * nb + j] += self.diag(l, j) * v;
                let h = 0.5 * self.v1 * v;
                out[l * nb + j.abs_diff(1)] += h;
                if j + 1 < nb {
                    out[l * nb + j + 1] += h;
                }
            }
        }
        out
    }

    pub fn residual(&self, c: &[f64]) -> Vec<f64> {
        let nb = self.nb();
        let u = self.synth(c, nb);
        let cube: Vec<f64> = u.iter().map(|x| x * x * x).collect();
        let f = self.analyze(&cube, nb);
        let mut r = self.linear(c);
        for (ri, fi) in r.iter_mut().zip(&f) {
            *ri -= self.eps * fi;
        }
        r[nb + 1] -= self.eps;
        r
    }

    fn jacobian(&self, c: &[f64]) -> Mat<f64> {
        let nb = self.nb();
        let wd = 2 * self.k + 1;
        let u = self.synth(c, nb);
        let sq: Vec<f64> = u.iter().map(|x| 3.0 * x * x).collect();
        let w = self.analyze(&sq, wd);
        let coupling = |l: usize, lp: usize| -> Vec<(usize, f64)> {
            let mut cand = vec![l + lp, l.abs_diff(lp)];
            cand.sort_unstable();
            cand.dedup();
            cand.into_iter()
                .map(|p| {
                    let mut r = 0.0;
                    if p.abs_diff(lp) == l {
                        r += 0.5;
                    }
                    if p + lp == l {
                        r += 0.5;
                    }
                    (p, r)
                })
                .filter(|&(p, r)| r != 0.0 && p < wd)
                .collect()
        };
        let table: Vec<Vec<(usize, f64)>> = (0..nb * nb).map(|i| coupling(i / nb, i % nb)).collect();
        let mut jm = Mat::<f64>::zeros(nb * nb, nb * nb);
        for lp in 0..nb {
            for jp in 0..nb {
                let col = lp * nb + jp;
                let mut e = vec![0.0; nb * nb];
                e[col] = 1.0;
                let lin = self.linear(&e);
                for l in 0..nb {
                    let rl = &table[l * nb + lp];
                    for j in 0..nb {
                        let rj = &table[j * nb + jp];
                        let mut s = 0.0;
                        for &(p, a) in rl {
                            for &(q, b) in rj {
                                s += a * b * w[p * wd + q];
                            }
                        }
                        jm.write(l * nb + j, col, lin[l * nb + j] - self.eps * s);
                    }
                }
            }
        }
        jm
    }

    /// Newton iteration from `0`; returns the coefficients and the final
    /// residual max-norm.
    pub fn solve(&self, max_iter: usize) -> (Vec<f64>, f64) {
        let nb = self.nb();
        let mut c = vec![0.0; nb * nb];
        let mut res = f64::INFINITY;
        for _ in 0..max_iter {
            let r = self.residual(&c);
            res = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            if res < 1e-15 {
                break;
            }
            let jm = self.jacobian(&c);
            let rhs = Mat::<f64>::from_fn(nb * nb, 1, |i, _| r[i]);
            let delta = jm.partial_piv_lu().solve(&rhs);
            for (i, ci) in c.iter_mut().enumerate() {
                *ci -= delta.read(i, 0);
            }
        }
        (c, res)
    }

    /// The same function as a complex exponential series.
    pub fn to_field(&self, geom: &Arc<LatticeGeometry>, c: &[f64]) -> FourierField {
        let nb = self.nb() as i32;
        let mut u = FourierField::zero(geom.clone());
        for l in -(nb - 1)..nb {
            for j in -(nb - 1)..nb {
                let mut v = c[(l.unsigned_abs() as usize) * nb as usize + j.unsigned_abs() as usize];
                if l != 0 {
                    v *= 0.5;
                }
                if j != 0 {
                    v *= 0.5;
                }
                if v != 0.0 {
                    u.add_block(geom.site(&[l], &[j]), &[Complex64::new(v, 0.0)]);
                }
            }
        }
        u
    }
}

pub fn to_faer(m: &CMat) -> Mat<c64> {
    Mat::<c64>::from_fn(m.nrows(), m.ncols(), |i, j| {
        let z = m[(i, j)];
        c64 { re: z.re, im: z.im }
    })
}

/// Dense inverse by partial-pivot LU.
pub fn faer_inverse(a: &DecayMatrix) -> Mat<c64> {
    to_faer(&a.to_dense()).partial_piv_lu().inverse()
}

pub struct InverseError {
    /// `‖X − A⁻¹‖_F / max_k ‖A⁻¹e_k‖`.
    pub relative: f64,
    /// `‖XA − I‖_F`.
    pub residual: f64,
}

/// Compares a computed inverse with the dense reference; the residual uses
/// the sparse rows of `A`.
pub fn inverse_error(x: &DecayMatrix, a: &DecayMatrix, reference: &Mat<c64>) -> InverseError {
    let n = a.nrows();
    let xd = x.to_dense();
    let mut diff = 0.0;
    let mut colmax = 0.0f64;
    for k in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            let r = reference.read(i, k);
            let r = Complex64::new(r.re, r.im);
            diff += (xd[(i, k)] - r).norm_sqr();
            col += r.norm_sqr();
        }
        colmax = colmax.max(col);
    }
    let mut xa = CMat::zeros(n, n);
    for j in 0..n {
        for &(k, v) in a.row(j) {
            let k = k as usize;
            for i in 0..n {
                xa[(i, k)] += xd[(i, j)] * v;
            }
        }
    }
    for i in 0..n {
        xa[(i, i)] -= Complex64::new(1.0, 0.0);
    }
    let residual = xa.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    InverseError {
        relative: diff.sqrt() / colmax.sqrt(),
        residual,
    }
}
