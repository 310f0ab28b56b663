//! CSV summaries of single runs and seed sweeps.
//!
//! Numbers are written with Rust's shortest round-trip float formatting, so
//! identical runs produce byte-identical files.

use std::fmt::Write as _;

use super::{SimResult, SweepRow};

/// Per-round metrics for one run.
///
/// Columns: the round number, the diameter of the union of values the correct
/// nodes accepted for that round, the largest pairwise distance between final
/// outputs (constant per run), and how many correct nodes had terminated by
/// the end of that round.
pub fn metrics_csv(result: &SimResult) -> String {
    let mut out = String::from("round,diameter_union,max_pairwise_output,nodes_terminated\n");
    let max_output = result.max_pairwise_output();
    for (round, diameter) in &result.round_diameters {
        let terminated = result.rounds.values().filter(|r| **r <= *round).count();
        let _ = writeln!(out, "{round},{diameter},{max_output},{terminated}");
    }
    out
}

/// One row per seed of a sweep.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("seed,final_rounds_max,max_pairwise_output,all_monitors_pass\n");
    for row in rows {
        let final_rounds_max = row.result.rounds.values().copied().max().unwrap_or(0);
        let max_output = row.result.max_pairwise_output();
        let pass = row.result.monitor_report.all_passed();
        let _ = writeln!(out, "{},{final_rounds_max},{max_output},{pass}", row.seed);
    }
    out
}
