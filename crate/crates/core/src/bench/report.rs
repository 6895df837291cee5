use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use super::{checkpoint_counts, WorkflowReport};
use crate::autoscaler::metrics_csv;

pub const TIMINGS_HEADER: &str = "workflow,images,elapsed_seconds";

pub fn timings_csv(reports: &[WorkflowReport]) -> String {
    let mut out = String::from(TIMINGS_HEADER);
    out.push('\n');
    for r in reports {
        for (images, secs) in &r.checkpoints {
            let _ = writeln!(out, "{},{},{:.3}", r.workflow, images, secs);
        }
    }
    out
}

/// Fixed-width table, one row per report and one column per checkpoint.
pub fn render_table(reports: &[WorkflowReport]) -> String {
    let batch = reports
        .iter()
        .flat_map(|r| r.checkpoints.iter().map(|c| c.0))
        .max()
        .unwrap_or(0);
    let columns = checkpoint_counts(batch.max(1));
    let mut out = format!("{:<14}", "workflow");
    for c in &columns {
        let _ = write!(out, "{:>12}", format!("n={c}"));
    }
    let _ = writeln!(out, "{:>12}{:>10}", "total_s", "failures");
    for r in reports {
        let _ = write!(out, "{:<14}", r.workflow.name());
        for c in &columns {
            match r.checkpoints.iter().find(|(k, _)| k == c) {
                Some((_, s)) => {
                    let _ = write!(out, "{s:>12.3}");
                }
                None => {
                    let _ = write!(out, "{:>12}", "-");
                }
            }
        }
        let _ = writeln!(out, "{:>12.3}{:>10}", r.total_seconds, r.failures);
    }
    out
}

fn details(r: &WorkflowReport) -> String {
    let mut out = format!("[{}]\n", r.workflow.name());
    for (k, v) in &r.config {
        let _ = writeln!(out, "  {k} = {v}");
    }
    let _ = writeln!(out, "  slides_committed = {}", r.slides_committed);
    let _ = writeln!(out, "  instances_committed = {}", r.instances_committed);
    if let Some(ev) = &r.event {
        let s = &ev.subscription;
        let _ = writeln!(out, "  published = {}", s.published);
        let _ = writeln!(out, "  acked = {}", s.acked);
        let _ = writeln!(out, "  dead_lettered = {}", s.dead_lettered);
        let _ = writeln!(out, "  deliveries = {}", s.deliveries);
        let _ = writeln!(out, "  injected_faults = {}", ev.injected_faults);
        let _ = writeln!(out, "  instances_created = {}", ev.instances_created);
        let _ = writeln!(out, "  peak_active = {}", ev.peak_active);
        let _ = writeln!(out, "  instance_seconds = {:.3}", ev.instance_seconds);
        let _ = writeln!(out, "  metered_cost = {:.3}", ev.metered_cost);
        let _ = writeln!(out, "  settled_seconds = {:.3}", ev.settled_seconds);
    }
    out
}

/// Write `timings.csv`, `instances.csv` and `report.txt` to `out_dir` and
/// return the table for stdout. Scaling samples come from the event-driven
/// report, if any; otherwise `instances.csv` holds only its header.
pub fn emit_report(reports: &[WorkflowReport], out_dir: &Path) -> io::Result<String> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("timings.csv"), timings_csv(reports))?;
    let series = reports
        .iter()
        .find(|r| r.event.is_some())
        .map_or(&[][..], |r| r.series());
    fs::write(out_dir.join("instances.csv"), metrics_csv(series))?;
    let table = render_table(reports);
    let mut text = table.clone();
    for r in reports {
        text.push('\n');
        text.push_str(&details(r));
    }
    fs::write(out_dir.join("report.txt"), text)?;
    Ok(table)
}
