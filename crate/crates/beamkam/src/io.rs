//! JSON and CSV encodings of fields, covers, scan reports, multiscale
//! diagnostics and certificates.

use std::sync::Arc;

use beamkam_core::decay_matrix::{DecayMatrix, NeumannReport, NormContext, SiteSet, SmallnessKind};
use beamkam_core::lattice::LatticeGeometry;
use beamkam_core::measure::{CoverReport, ScanReport};
use beamkam_core::multiscale::InvertDiagnostics;
use beamkam_core::nashmoser::{Certificate, Status, StepRecord};
use beamkam_core::sobolev::FourierField;
use beamkam_core::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Mode;

/// Finite floats as numbers, everything else as `null`.
pub fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}

pub fn field_to_modes(u: &FourierField) -> Vec<Mode> {
    u.iter()
        .map(|(s, b)| Mode {
            l: s.l.to_vec(),
            j: s.j.to_vec(),
            re: b.iter().map(|z| z.re).collect(),
            im: b.iter().map(|z| z.im).collect(),
        })
        .collect()
}

pub fn field_to_json(u: &FourierField) -> Value {
    serde_json::to_value(field_to_modes(u)).expect("modes serialize")
}

pub fn field_from_json(geom: &Arc<LatticeGeometry>, v: &Value) -> anyhow::Result<FourierField> {
    let modes: Vec<Mode> = serde_json::from_value(v.clone())?;
    let mut u = FourierField::zero(geom.clone());
    for m in modes {
        let b: Vec<Complex64> = m
            .re
            .iter()
            .enumerate()
            .map(|(k, &re)| Complex64::new(re, m.im.get(k).copied().unwrap_or(0.0)))
            .collect();
        u.add_block(geom.site(&m.l, &m.j), &b);
    }
    Ok(u)
}

pub fn cover_to_json(r: &CoverReport, n: u32, j0: &[i32]) -> Value {
    let c = &r.cover;
    json!({
        "N": n,
        "j0": j0,
        "eta": num(r.eta),
        "widening": num(r.widening),
        "evaluations": r.evaluations,
        "intervals": c.intervals.iter().map(|(a, b)| json!([num(*a), num(*b)])).collect::<Vec<_>>(),
        "count": c.len(),
        "total_measure": num(c.total_measure()),
        "max_length": num(c.max_length()),
        "covering_count": num(c.covering_count()),
        "count_budget": num(c.count_budget),
        "length_budget": num(c.length_budget),
        "within_budget": c.within_budget(),
        "raw_within_budget": c.raw_within_budget(),
    })
}

/// CSV rows `lambda,in_U,in_U_N,N_good,min_gap,min_eig`.
pub fn scan_csv(r: &ScanReport) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["lambda", "in_U", "in_U_N", "N_good", "min_gap", "min_eig"])?;
    for p in &r.points {
        w.write_record([
            format!("{:.17e}", p.lambda),
            p.in_u.to_string(),
            p.in_u_n.to_string(),
            p.n_good.map(|b| b.to_string()).unwrap_or_default(),
            format!("{:.17e}", p.min_gap),
            format!("{:.17e}", p.min_eig),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn scan_summary(r: &ScanReport) -> Value {
    json!({
        "grid": r.points.len(),
        "resolution": num(r.resolution),
        "excluded": {
            "U": num(r.excluded_u),
            "U_N": num(r.excluded_u_n),
            "G0_N": r.excluded_good.map(num),
        },
    })
}

fn neumann_json(r: &Option<NeumannReport>) -> Value {
    match r {
        None => Value::Null,
        Some(r) => json!({
            "kind": match r.kind { SmallnessKind::DecayNorm => "decay_norm", SmallnessKind::OperatorNorm => "operator_norm" },
            "s_product": num(r.s_product),
            "op_product": r.op_product.map(num),
            "terms": r.terms,
            "minv_s0": num(r.minv_s0),
            "result_s0": num(r.result_s0),
        }),
    }
}

pub fn diagnostics_to_json(d: &InvertDiagnostics) -> Value {
    json!({
        "N": d.n,
        "N_prime": d.nprime,
        "dim": d.dim,
        "theta_tilde": num(d.theta_tilde),
        "upsilon": num(d.upsilon),
        "q_s0": num(d.q_s0),
        "log_q_s1_minus_rho": num(d.log_q_s1_rho),
        "inverse_op_norm": num(d.inverse_op_norm),
        "log_a2_bound": num(d.log_a2_bound),
        "sites": { "regular": d.regular, "box_good": d.box_good, "bad": d.bad },
        "cluster_diameters": d.cluster_diameters,
        "cluster_flags": d.cluster_flags,
        "stage2": neumann_json(&d.stage2),
        "stage4": neumann_json(&d.stage4),
        "stage_norms": d.stage_norms.iter().map(|s| json!({
            "name": s.name,
            "log_norms": s.log_norms.iter().map(|(s, v)| json!([num(*s), num(*v)])).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "bound_check": d.bound_check.iter().map(|b| json!({
            "s": num(b.s), "log_norm": num(b.log_norm), "log_bound": num(b.log_bound), "holds": b.holds,
        })).collect::<Vec<_>>(),
    })
}

fn step_json(r: &StepRecord) -> Value {
    json!({
        "n": r.n,
        "N_n": r.big_n,
        "residual_s1": num(r.residual()),
        "projected_residual_s1": num(r.projected_residual),
        "tail_residual_s1": num(r.tail_residual),
        "increment_s1": num(r.increment_s1),
        "u_s1_norm": num(r.u_s1),
        "u_s2_norm": num(r.u_s2),
        "inversion_path": r.inversion_path.name(),
        "fallback": r.fallback,
        "multiscale": r.multiscale.as_ref().map(diagnostics_to_json),
        "picard_iterations": r.picard.iterations,
        "contraction_ratio": num(r.picard.max_ratio),
        "cross_check_s1": r.cross_check.map(num),
        "lambda_member_flags": {
            "U": r.membership.in_u,
            "U_N": r.membership.in_u_n,
            "G0_N": r.membership.in_g0,
            "inverse_norm_bound": num(r.membership.inverse_norm_bound),
        },
    })
}

pub fn status_name(s: &Status) -> String {
    match s {
        Status::Converged => String::from("converged"),
        Status::CantorExcluded(n) => format!("Cantor-excluded at {n}"),
        Status::MaxSteps => String::from("max-steps"),
    }
}

pub fn certificate_to_json(c: &Certificate, config: &Value) -> Value {
    json!({
        "status": status_name(&c.status),
        "final_residual_s1": num(c.final_residual),
        "smallness_eps_n0_s2": num(c.smallness),
        "steps": c.steps.iter().map(step_json).collect::<Vec<_>>(),
        "config": config,
    })
}

/// On-disk matrix: site list plus sparse entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixFile {
    pub sites: Vec<SiteRecord>,
    pub entries: Vec<(usize, usize, f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteRecord {
    pub l: Vec<i32>,
    pub j: Vec<i32>,
}

pub fn matrix_from_file(ctx: &Arc<NormContext>, f: &MatrixFile) -> anyhow::Result<DecayMatrix> {
    let geom = &ctx.geom;
    let sites: Vec<_> = f.sites.iter().map(|s| geom.site(&s.l, &s.j)).collect();
    let set = SiteSet::new(sites.clone());
    let n = set.dim();
    let mut dense = beamkam_core::dense::CMat::zeros(n, n);
    for &(i, j, re, im) in &f.entries {
        anyhow::ensure!(i < sites.len() && j < sites.len(), "entry ({i}, {j}) outside the site list");
        let a = set.start(set.position(&sites[i]).unwrap());
        let b = set.start(set.position(&sites[j]).unwrap());
        dense[(a, b)] = Complex64::new(re, im);
    }
    Ok(DecayMatrix::from_dense(ctx, set.clone(), set, &dense))
}

pub fn write_json(path: &std::path::Path, v: &Value) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
