//! Deterministic CSV/JSON report emission.
//!
//! Every emitter renders to a `String` first (UTF-8, LF line endings, header
//! row, constant column count), so identical inputs always produce identical
//! bytes and callers can diff files across runs. Floats are printed with 9
//! significant digits in scientific notation — enough to distinguish any two
//! values the metrics pipeline can tell apart at desk scale.

use crate::harness::{GradAlignReport, LrStressRow, MetricsLog, RankSweepRow, SpecializationReport};
use crate::moe::GradCheckReport;
use serde_json::json;
use std::fmt::Write as _;

pub const METRICS_CSV: &str = "metrics.csv";
pub const SIMILARITY_CSV: &str = "similarity.csv";
pub const GATE_ALIGNMENT_CSV: &str = "gate_alignment.csv";
pub const GRAD_ALIGNMENT_CSV: &str = "grad_alignment.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const STRESS_CSV: &str = "stress.csv";
pub const GRADCHECK_JSON: &str = "gradcheck.json";

/// 9 significant digits, scientific notation. `1.0` → `1.00000000e0`.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

/// One row per logged training step.
pub fn metrics_csv(log: &MetricsLog) -> String {
    let mut s = String::from(
        "step,task_loss,aux_loss,expert_similarity,grad_similarity,ortho_residual,dropped_energy\n",
    );
    for r in &log.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            fmt_float(r.task_loss),
            fmt_float(r.aux_loss),
            fmt_float(r.expert_similarity),
            fmt_float(r.grad_similarity),
            fmt_float(r.ortho_residual),
            fmt_float(r.dropped_energy),
        )
        .expect("string write");
    }
    s
}

/// Upper triangle (including the diagonal) of the expert-head similarity
/// matrix, one `i,j,value` row per pair.
pub fn similarity_csv(report: &SpecializationReport) -> String {
    let mut s = String::from("expert_i,expert_j,similarity\n");
    let m = &report.pairwise;
    for i in 0..m.n() {
        for j in i..m.n() {
            writeln!(s, "{i},{j},{}", fmt_float(m.get(i, j))).expect("string write");
        }
    }
    s
}

/// One row per (expert, singular direction): how strongly the router's row
/// for that expert points along the direction.
pub fn gate_alignment_csv(report: &SpecializationReport) -> String {
    let mut s = String::from("expert,component,alignment\n");
    for (e, profile) in report.gate_profiles.iter().enumerate() {
        for (c, v) in profile.iter().enumerate() {
            writeln!(s, "{e},{c},{}", fmt_float(*v)).expect("string write");
        }
    }
    s
}

/// One row per expert that received tokens. `mean_pairwise` averages the
/// expert's raw-gradient subspace similarity against the other active
/// experts (NaN when it has no peers); `unique_align_to_c` is NaN for the
/// baseline variant, which has no gradient split.
pub fn grad_alignment_csv(report: &GradAlignReport) -> String {
    let mut s = String::from("expert,mean_pairwise,align_to_c,unique_align_to_c\n");
    for (slot, &e) in report.active.iter().enumerate() {
        let mean_pairwise = match &report.pairwise {
            Some(m) if m.n() >= 2 => {
                let others: f64 = (0..m.n()).filter(|&j| j != slot).map(|j| m.get(slot, j)).sum();
                others / (m.n() - 1) as f64
            }
            _ => f64::NAN,
        };
        let unique = report
            .unique_align_to_c
            .as_ref()
            .map_or(f64::NAN, |u| u[slot]);
        writeln!(
            s,
            "{e},{},{},{}",
            fmt_float(mean_pairwise),
            fmt_float(report.align_to_c[slot]),
            fmt_float(unique),
        )
        .expect("string write");
    }
    s
}

/// One row per common-subspace rank tried.
pub fn sweep_csv(rows: &[RankSweepRow]) -> String {
    let mut s = String::from("k,final_loss,mean_expert_similarity\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{}",
            r.k,
            fmt_float(r.final_loss),
            fmt_float(r.mean_expert_similarity),
        )
        .expect("string write");
    }
    s
}

/// One row per (variant, learning rate); `divergence_step` is -1 for runs
/// that survived the full schedule.
pub fn stress_csv(rows: &[LrStressRow]) -> String {
    let mut s = String::from("variant,lr,diverged,divergence_step,peak_aux_loss\n");
    for r in rows {
        let step = r.divergence_step.map_or(-1i64, |v| v as i64);
        writeln!(
            s,
            "{},{},{},{step},{}",
            r.variant,
            fmt_float(r.lr),
            u8::from(r.diverged),
            fmt_float(r.peak_aux_loss),
        )
        .expect("string write");
    }
    s
}

/// JSON document over one gradient check per variant. Keys are sorted, the
/// layout is pretty-printed, and the file ends with a newline.
pub fn gradcheck_json(reports: &[GradCheckReport]) -> String {
    let checks: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "variant": r.variant,
                "max_rel_error": r.max_rel_error,
                "worst_parameter": r.worst_parameter,
                "entries_checked": r.entries_checked,
                "entries_total": r.entries_total,
                "step_size": r.step_size,
            })
        })
        .collect();
    let doc = json!({ "checks": checks });
    let mut s = serde_json::to_string_pretty(&doc).expect("in-memory json");
    s.push('\n');
    s
}
