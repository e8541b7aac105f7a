//! CSV tables: the per-iteration training trace, benchmark rows,
//! reconstruction metrics and feature-match reports. Headers are fixed;
//! floats are written in shortest round-trip form so likelihood columns
//! compare byte-for-byte across runs.

use crate::eval::{BenchmarkRow, MatchReport};
use crate::sampler::SweepReport;

pub const TRACE_HEADER: &str = "iteration,joint_log_likelihood,k_plus,\
flip_proposed,flip_accepted,exchange_proposed,exchange_accepted,births_accepted,\
resample_proposed,resample_accepted,swap_proposed,swap_accepted,recenter_proposed,recenter_accepted,\
t_flips,t_exchange,t_resample,t_mask_gibbs,t_swaps,t_feature_gibbs,t_hyper,t_prune";

pub fn trace_row(r: &SweepReport) -> String {
    let t = &r.phase_seconds;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.iteration,
        r.joint_log_likelihood,
        r.k_plus,
        r.flips.proposed,
        r.flips.accepted,
        r.exchanges.proposed,
        r.exchanges.accepted,
        r.births_accepted,
        r.resamples.proposed,
        r.resamples.accepted,
        r.order_swaps.proposed,
        r.order_swaps.accepted,
        r.recenters.proposed,
        r.recenters.accepted,
        t[0],
        t[1],
        t[2],
        t[3],
        t[4],
        t[5],
        t[6],
        t[7],
    )
}

pub const BENCHMARK_HEADER: &str =
    "sampler,image_size,d_pixels,iteration,k_plus,seconds,joint_log_likelihood";

pub fn benchmark_row(r: &BenchmarkRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.sampler,
        r.image_size,
        r.d_pixels,
        r.iteration,
        r.k_plus,
        r.seconds,
        r.joint_log_likelihood
    )
}

pub const METRICS_HEADER: &str = "image,rmse";

pub const MATCH_HEADER: &str = "truth_index,truth_name,learned_index,rmse";

pub fn match_rows(report: &MatchReport, names: &[String]) -> Vec<String> {
    let mut rows: Vec<String> = report
        .pairs
        .iter()
        .map(|p| {
            format!(
                "{},{},{},{}",
                p.truth,
                names.get(p.truth).map(String::as_str).unwrap_or("?"),
                p.learned,
                p.rmse
            )
        })
        .collect();
    for &li in &report.unmatched_learned {
        rows.push(format!(",,{li},"));
    }
    rows
}
