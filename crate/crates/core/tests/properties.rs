use std::sync::Arc;

use beamkam_core::decay_matrix::{DecayMatrix, NormContext, SiteSet};
use beamkam_core::dense::CMat;
use beamkam_core::lattice::{distance, LatticeGeometry, SiteIndex};
use beamkam_core::measure::IntervalCover;
use beamkam_core::sobolev::FourierField;
use beamkam_core::Complex64;
use proptest::prelude::*;

fn ctx() -> Arc<NormContext> {
    let geom = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
    NormContext::new(geom, 2.0).unwrap()
}

fn box_sites(ctx: &Arc<NormContext>, n: u32) -> Arc<SiteSet> {
    let g = &ctx.geom;
    SiteSet::new(g.enumerate_box(&g.site(&[0], &[0]), n, None))
}

/// Square matrix on the box of radius `n` with entries of size ≤ `amp`
/// decaying like `2^{-|i−j|}`.
fn matrix(n: u32, vals: &[(f64, f64)], amp: f64) -> DecayMatrix {
    let c = ctx();
    let sites = box_sites(&c, n);
    let dim = sites.dim();
    let m = CMat::from_fn(dim, dim, |i, j| {
        let (re, im) = vals[(i * 31 + j * 7) % vals.len()];
        let dist = distance(&sites.sites()[i], &sites.sites()[j]);
        Complex64::new(re, im) * amp * 0.5f64.powi(dist as i32)
    });
    DecayMatrix::from_dense(&c, sites.clone(), sites, &m)
}

fn entries() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8..40)
}

fn field(vals: &[(f64, f64)], radius: i32) -> FourierField {
    let geom = Arc::new(LatticeGeometry::torus(1, 1).unwrap());
    let mut u = FourierField::zero(geom.clone());
    let mut k = 0;
    for l in -radius..=radius {
        for j in -radius..=radius {
            let (re, im) = vals[k % vals.len()];
            k += 1;
            u.add_block(geom.site(&[l], &[j]), &[Complex64::new(re, im)]);
        }
    }
    u.realified()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn s_norm_is_monotone_in_s(v in entries(), n in 1u32..4, s in 0.0f64..4.0, ds in 0.0f64..3.0) {
        let m = matrix(n, &v, 1.0);
        prop_assert!(m.s_norm(s) <= m.s_norm(s + ds) * (1.0 + 1e-12));
    }

    #[test]
    fn operator_norm_below_s0_norm(v in entries(), n in 1u32..4) {
        let m = matrix(n, &v, 1.0);
        prop_assert!(m.op_norm().unwrap() <= m.s_norm(2.0) * (1.0 + 1e-12));
    }

    #[test]
    fn s0_norm_is_submultiplicative(v in entries(), w in entries(), n in 1u32..4) {
        let a = matrix(n, &v, 1.0);
        let b = matrix(n, &w, 1.0);
        let ab = a.matmul(&b).unwrap();
        prop_assert!(ab.s_norm(2.0) <= a.s_norm(2.0) * b.s_norm(2.0) * (1.0 + 1e-12));
    }

    #[test]
    fn adjoint_preserves_s_norm(v in entries(), n in 1u32..4, s in 0.0f64..4.0) {
        let m = matrix(n, &v, 1.0);
        let d = (m.adjoint().s_norm(s) - m.s_norm(s)).abs();
        prop_assert!(d <= 1e-12 * m.s_norm(s).max(1.0));
    }

    #[test]
    fn dense_round_trip(v in entries(), n in 1u32..4) {
        let m = matrix(n, &v, 1.0);
        let c = m.ctx().clone();
        let back = DecayMatrix::from_dense(&c, m.row_sites().clone(), m.col_sites().clone(), &m.to_dense());
        prop_assert_eq!(back.to_dense(), m.to_dense());
    }

    #[test]
    fn projections_split_the_norm(v in entries(), radius in 1i32..6, n in 0u32..5, s in 0.0f64..4.0) {
        let u = field(&v, radius);
        let (low, high) = u.project(n);
        let total = u.hs_norm(s).powi(2);
        let parts = low.hs_norm(s).powi(2) + high.hs_norm(s).powi(2);
        prop_assert!((total - parts).abs() <= 1e-10 * total.max(1.0));
        prop_assert!(low.support_radius() <= n);
    }

    #[test]
    fn high_modes_gain_decay(v in entries(), radius in 2i32..6, n in 1u32..4, s in 0.0f64..3.0, b in 0.0f64..3.0) {
        let u = field(&v, radius);
        let high = u.project(n).1;
        let bound = (n as f64).powf(-b) * high.hs_norm(s + b);
        prop_assert!(high.hs_norm(s) <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn multiply_is_commutative_and_real(v in entries(), w in entries(), r1 in 0i32..4, r2 in 0i32..4) {
        let u = field(&v, r1);
        let x = field(&w, r2);
        let a = u.multiply(&x).unwrap();
        let b = x.multiply(&u).unwrap();
        prop_assert!(a.sub(&b).unwrap().max_abs() <= 1e-14);
        prop_assert!(a.reality_defect() <= 1e-13);
        prop_assert!(a.support_radius() <= (r1 + r2) as u32);
    }

    #[test]
    fn cover_merging(raw in prop::collection::vec((-10.0f64..10.0, 0.0f64..2.0), 0..20), x in -12.0f64..12.0) {
        let iv: Vec<(f64, f64)> = raw.iter().map(|&(a, l)| (a, a + l)).collect();
        let c = IntervalCover::new(iv.clone(), 1.0, 1.0);
        prop_assert!(c.intervals.windows(2).all(|w| w[0].1 < w[1].0));
        let inside = iv.iter().any(|&(a, b)| a <= x && x <= b);
        prop_assert_eq!(c.contains(x), inside);
        prop_assert!(c.symmetric_difference(&c).abs() <= 1e-12);
        for p in c.complement_points(-12.0, 12.0, 4) {
            prop_assert!(!c.contains(p));
        }
    }

    #[test]
    fn lattice_distance_is_a_metric(a in prop::array::uniform2(-9i32..9), b in prop::array::uniform2(-9i32..9), c in prop::array::uniform2(-9i32..9)) {
        let s = |p: [i32; 2]| SiteIndex::new(&p[..1], &p[1..]);
        let (x, y, z) = (s(a), s(b), s(c));
        prop_assert_eq!(distance(&x, &y), distance(&y, &x));
        prop_assert!(distance(&x, &z) <= distance(&x, &y) + distance(&y, &z));
        prop_assert_eq!(distance(&x, &x), 0);
    }
}
