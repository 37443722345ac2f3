//! Grid-sampled nonlinearities `f(φ,x,u) = c(φ,x)·g(u) + q(φ,x)` evaluated
//! by FFT on a collocation grid of `T^{ν+d}`.

use std::sync::Arc;

use beamkam_core::lattice::{LatticeGeometry, Preset};
use beamkam_core::sobolev::{FourierField, Nonlinearity, SobolevError, DROP_TOL};
use beamkam_core::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

/// Equispaced grid with `m` points per axis.
pub struct Grid {
    geom: Arc<LatticeGeometry>,
    m: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Grid {
    pub fn new(geom: Arc<LatticeGeometry>, m: usize) -> Self {
        let mut planner = FftPlanner::new();
        Grid {
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
            geom,
            m,
        }
    }

    /// Smallest power of two `> 4·support` (at least 8). Cubic terms are
    /// then alias-free on `|𝔫| ≤ support`.
    pub fn auto_size(support: u32) -> usize {
        (4 * support.max(1) as usize + 1).next_power_of_two().max(8)
    }

    pub fn size(&self) -> usize {
        self.m
    }

    fn axes(&self) -> usize {
        self.geom.nu + self.geom.r
    }

    fn index(&self, s: &[i32]) -> usize {
        let m = self.m as i64;
        s.iter().fold(0usize, |acc, &k| acc * self.m + (k as i64).rem_euclid(m) as usize)
    }

    fn transform(&self, data: &mut [Complex64], forward: bool) {
        let plan = if forward { &self.fwd } else { &self.inv };
        let axes = self.axes();
        let m = self.m;
        let mut line = vec![Complex64::new(0.0, 0.0); m];
        for a in 0..axes {
            let stride = m.pow((axes - 1 - a) as u32);
            let outer = data.len() / (m * stride);
            for o in 0..outer {
                for i in 0..stride {
                    let base = o * m * stride + i;
                    for k in 0..m {
                        line[k] = data[base + k * stride];
                    }
                    plan.process(&mut line);
                    for k in 0..m {
                        data[base + k * stride] = line[k];
                    }
                }
            }
        }
    }

    /// Point values of `u`.
    pub fn values(&self, u: &FourierField) -> Result<Vec<Complex64>, SobolevError> {
        let support = u.support_radius() as usize;
        if 2 * support >= self.m {
            return Err(SobolevError::Aliasing {
                grid: self.m,
                support,
            });
        }
        let mut data = vec![Complex64::new(0.0, 0.0); self.m.pow(self.axes() as u32)];
        for (s, b) in u.iter() {
            let key: Vec<i32> = s.l.iter().chain(s.j.iter()).copied().collect();
            data[self.index(&key)] += b[0];
        }
        self.transform(&mut data, false);
        Ok(data)
    }

    /// Coefficients with `|𝔫| ≤ keep` of the sampled function.
    pub fn coefficients(&self, values: &[Complex64], keep: u32) -> FourierField {
        let mut data = values.to_vec();
        self.transform(&mut data, true);
        let scale = 1.0 / data.len() as f64;
        let geom = self.geom.clone();
        let (nu, r) = (geom.nu, geom.r);
        let mut out = FourierField::zero(geom.clone());
        let k = keep as i32;
        let mut idx = vec![-k; nu + r];
        loop {
            let z = data[self.index(&idx)] * scale;
            if z.norm() >= DROP_TOL {
                out.add_block(geom.site(&idx[..nu], &idx[nu..]), &[z]);
            }
            let mut a = nu + r;
            loop {
                if a == 0 {
                    return out.realified();
                }
                a -= 1;
                if idx[a] < k {
                    idx[a] += 1;
                    for x in idx.iter_mut().skip(a + 1) {
                        *x = -k;
                    }
                    break;
                }
            }
        }
    }
}

/// Pointwise product through the grid (an oracle for the convolution).
pub fn grid_product(u: &FourierField, v: &FourierField) -> Result<FourierField, SobolevError> {
    let support = u.support_radius() + v.support_radius();
    let grid = Grid::new(u.geometry().clone(), Grid::auto_size(support));
    let a = grid.values(u)?;
    let b = grid.values(v)?;
    let prod: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    Ok(grid.coefficients(&prod, support))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarFn {
    Identity,
    Square,
    Cube,
    Sin,
    Sinh,
    Tanh,
}

impl ScalarFn {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            ScalarFn::Identity => u,
            ScalarFn::Square => u * u,
            ScalarFn::Cube => u * u * u,
            ScalarFn::Sin => u.sin(),
            ScalarFn::Sinh => u.sinh(),
            ScalarFn::Tanh => u.tanh(),
        }
    }

    pub fn derivative(&self, u: f64) -> f64 {
        match self {
            ScalarFn::Identity => 1.0,
            ScalarFn::Square => 2.0 * u,
            ScalarFn::Cube => 3.0 * u * u,
            ScalarFn::Sin => u.cos(),
            ScalarFn::Sinh => u.cosh(),
            ScalarFn::Tanh => 1.0 - u.tanh().powi(2),
        }
    }
}

pub struct Sampled {
    pub g: ScalarFn,
    pub coeff: FourierField,
    pub forcing: FourierField,
    /// Fixed grid size; `None` picks `Grid::auto_size`.
    pub grid: Option<usize>,
    pub q: u32,
}

impl Sampled {
    fn eval(&self, u: &FourierField, h: impl Fn(f64) -> f64) -> Result<FourierField, SobolevError> {
        let geom = u.geometry();
        if geom.preset != Preset::Torus {
            return Err(SobolevError::NotTorus);
        }
        let support = u.support_radius().max(self.coeff.support_radius());
        let m = self.grid.unwrap_or_else(|| Grid::auto_size(support));
        if m <= 4 * support as usize {
            return Err(SobolevError::Aliasing {
                grid: m,
                support: support as usize,
            });
        }
        let grid = Grid::new(geom.clone(), m);
        let uv = grid.values(u)?;
        let cv = grid.values(&self.coeff)?;
        let mut vals = Vec::with_capacity(uv.len());
        for (x, c) in uv.iter().zip(&cv) {
            let y = c.re * h(x.re);
            if !y.is_finite() {
                return Err(SobolevError::NonFinite);
            }
            vals.push(Complex64::new(y, 0.0));
        }
        Ok(grid.coefficients(&vals, (m / 4) as u32))
    }
}

impl Nonlinearity for Sampled {
    fn compose(&self, u: &FourierField) -> Result<FourierField, SobolevError> {
        let g = self.g;
        let mut out = self.eval(u, |x| g.eval(x))?.add(&self.forcing)?;
        out.drop_small(DROP_TOL);
        Ok(out)
    }

    fn derivative(&self, u: &FourierField) -> Result<FourierField, SobolevError> {
        let g = self.g;
        self.eval(u, |x| g.derivative(x))
    }

    fn order(&self) -> u32 {
        self.q
    }
}
