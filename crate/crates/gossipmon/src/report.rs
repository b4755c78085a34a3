//! Metrics assembly and machine-readable outputs: per-round message counts,
//! convergence detection, overhead ratios, CSV/JSON reports and the
//! JSON-lines event trace.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::Scheme;
use crate::sim::{RoundSnapshot, TraceEvent};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("central total must be positive to compute an overhead ratio")]
    ZeroCentralTotal,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TierCounts {
    pub initiated: u64,
    pub forwarded: u64,
    pub dropped: u64,
}

impl TierCounts {
    pub fn sent(&self) -> u64 {
        self.initiated + self.forwarded
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundCounts {
    pub round: u64,
    pub intra_group: TierCounts,
    pub inter_group: TierCounts,
    pub inter_cloud: TierCounts,
}

impl RoundCounts {
    pub fn sent(&self) -> u64 {
        self.intra_group.sent() + self.inter_group.sent() + self.inter_cloud.sent()
    }

    pub fn dropped(&self) -> u64 {
        self.intra_group.dropped + self.inter_group.dropped + self.inter_cloud.dropped
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scheme: Scheme,
    pub population: u64,
    pub groups: u64,
    pub regions: u64,
    pub rounds: u64,
    pub seed: u64,
    pub per_round: Vec<RoundCounts>,
    pub total_messages: u64,
    pub total_dropped: u64,
    pub convergence_round: Option<u64>,
    /// Present only for paired comparisons against a centralized run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overhead_ratio_pct: Option<f64>,
}

impl MetricsReport {
    pub fn totals_consistent(&self) -> bool {
        self.total_messages == self.per_round.iter().map(RoundCounts::sent).sum::<u64>()
            && self.total_dropped == self.per_round.iter().map(RoundCounts::dropped).sum::<u64>()
    }
}

/// Extra messages a scheme sent relative to centralized collection, as a
/// percentage of the centralized total.
pub fn overhead_ratio(scheme_total: u64, central_total: u64) -> Result<f64, ReportError> {
    if central_total == 0 {
        return Err(ReportError::ZeroCentralTotal);
    }
    Ok(100.0 * (scheme_total as f64 - central_total as f64) / central_total as f64)
}

/// First round at which every VM's view covers the whole system: all group
/// and region digests for the layered scheme, all origin records for flat.
/// Centralized collection has no node-side view, so no convergence round.
pub fn convergence_round(snapshots: &[RoundSnapshot], scheme: Scheme) -> Option<u64> {
    if scheme == Scheme::Central {
        return None;
    }
    snapshots
        .iter()
        .find(|snap| {
            !snap.per_vm.is_empty()
                && snap.per_vm.iter().all(|vm| match scheme {
                    Scheme::Flat => vm.origins >= snap.alive,
                    _ => vm.groups >= snap.total_groups && vm.regions >= snap.total_regions,
                })
        })
        .map(|snap| snap.round)
}

pub const CSV_HEADER: &str =
    "scheme,population,groups,regions,round,intra_group_msgs,inter_group_msgs,inter_cloud_msgs,dropped,total";

/// Render the per-round CSV plus a trailing TOTAL row. Deterministic: the
/// same report always yields the same bytes.
pub fn render_csv(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    let prefix = format!(
        "{},{},{},{}",
        report.scheme, report.population, report.groups, report.regions
    );
    let mut totals = RoundCounts::default();
    for rc in &report.per_round {
        writeln!(
            out,
            "{prefix},{},{},{},{},{},{}",
            rc.round,
            rc.intra_group.sent(),
            rc.inter_group.sent(),
            rc.inter_cloud.sent(),
            rc.dropped(),
            rc.sent()
        )
        .unwrap();
        totals.intra_group.initiated += rc.intra_group.sent();
        totals.intra_group.dropped += rc.intra_group.dropped;
        totals.inter_group.initiated += rc.inter_group.sent();
        totals.inter_group.dropped += rc.inter_group.dropped;
        totals.inter_cloud.initiated += rc.inter_cloud.sent();
        totals.inter_cloud.dropped += rc.inter_cloud.dropped;
    }
    writeln!(
        out,
        "{prefix},TOTAL,{},{},{},{},{}",
        totals.intra_group.sent(),
        totals.inter_group.sent(),
        totals.inter_cloud.sent(),
        totals.dropped(),
        totals.sent()
    )
    .unwrap();
    out
}

pub fn render_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// One event per line, fields: tick, kind, node, msg_kind, msg_id.
pub fn render_trace_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev).expect("trace event serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub fn emit_report(
    report: &MetricsReport,
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<(), ReportError> {
    let body = match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Json => render_json(report),
    };
    write_text(path, &body)
}

pub fn write_text(path: impl AsRef<Path>, body: &str) -> Result<(), ReportError> {
    let path = path.as_ref();
    std::fs::write(path, body).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}
