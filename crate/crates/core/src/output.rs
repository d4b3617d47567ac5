//! Artifact writers: per-run trajectory/event CSVs and a structured JSON
//! summary, plus the sweep table CSV.
//!
//! All floating-point fields use fixed-decimal formatting so identical runs
//! produce byte-identical files on any platform.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::engine::{RunResult, TimedEvent, TrajectoryRow, WorldStats};
use crate::error::SimError;
use crate::metrics::FleetSummary;
use crate::scenario::ScenarioConfig;
use crate::sweep::SweepTable;

fn create(path: &Path) -> Result<BufWriter<fs::File>, SimError> {
    let file = fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SimError + Copy + '_ {
    move |e| SimError::io(path, e)
}

/// `trajectories.csv`: one row per vehicle per step, fixed 6-decimal floats.
pub fn write_trajectories(path: &Path, rows: &[TrajectoryRow]) -> Result<(), SimError> {
    let mut w = create(path)?;
    let err = io_err(path);
    writeln!(
        w,
        "t,vehicle_id,class,lane,x_m,v_mps,a_mps2,platoon_id,fuel_rate_lps,delay_s"
    )
    .map_err(err)?;
    for r in rows {
        let platoon = r.platoon.map(|p| p.0.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{:.6},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6}",
            r.t_s,
            r.vehicle.0,
            r.class.code(),
            r.lane,
            r.x_m,
            r.v_mps,
            r.a_mps2,
            platoon,
            r.fuel_rate_lps,
            r.delay_s
        )
        .map_err(err)?;
    }
    w.flush().map_err(err)
}

/// `events.csv`: the platoon lifecycle log in (time, lane, position) order.
pub fn write_events(path: &Path, events: &[TimedEvent]) -> Result<(), SimError> {
    let mut w = create(path)?;
    let err = io_err(path);
    writeln!(w, "t,event,lane,vehicle_id,platoon_id").map_err(err)?;
    for e in events {
        writeln!(
            w,
            "{:.6},{},{},{},{}",
            e.t_s,
            e.event.name(),
            e.lane,
            e.event.vehicle().0,
            e.event.platoon().0
        )
        .map_err(err)?;
    }
    w.flush().map_err(err)
}

/// The structured run summary serialized to `summary.json`.
#[derive(Debug, Serialize)]
pub struct RunSummaryDoc<'a> {
    pub seed: u64,
    pub completed_trips: usize,
    pub summary: Option<&'a FleetSummary>,
    pub event_counts: BTreeMap<&'static str, usize>,
    pub stats: &'a WorldStats,
    pub warnings: &'a [String],
    /// Fully resolved configuration echo: every run is self-describing.
    pub config: &'a ScenarioConfig,
}

/// Count events by type for the summary.
pub fn event_counts(events: &[TimedEvent]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for e in events {
        *counts.entry(e.event.name()).or_insert(0) += 1;
    }
    counts
}

/// `summary.json`: per-class and fleet means, event counts, run stats and
/// the resolved config echo.
pub fn write_summary(path: &Path, result: &RunResult) -> Result<(), SimError> {
    let doc = RunSummaryDoc {
        seed: result.config.sim.seed,
        completed_trips: result.records.len(),
        summary: result.summary.as_ref(),
        event_counts: event_counts(&result.events),
        stats: &result.stats,
        warnings: &result.warnings,
        config: &result.config,
    };
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &doc)
        .map_err(|e| SimError::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Write the full per-run artifact set into `dir` (created if missing):
/// `trajectories.csv`, `events.csv`, `summary.json`.
pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<Vec<PathBuf>, SimError> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))?;
    let trajectories = dir.join("trajectories.csv");
    let events = dir.join("events.csv");
    let summary = dir.join("summary.json");
    write_trajectories(&trajectories, &result.trajectories)?;
    write_events(&events, &result.events)?;
    write_summary(&summary, result)?;
    Ok(vec![trajectories, events, summary])
}

/// `sweep.csv`: one row per MPR, means and reduction percentages against
/// the MPR = 0 baseline row (reductions are negative).
pub fn write_sweep(path: &Path, table: &SweepTable) -> Result<(), SimError> {
    let mut w = create(path)?;
    let err = io_err(path);
    writeln!(
        w,
        "mpr_pct,trips,travel_time_s,total_delay_s,fuel_l,\
         travel_time_reduction_pct,delay_reduction_pct,fuel_reduction_pct"
    )
    .map_err(err)?;
    for row in &table.rows {
        writeln!(
            w,
            "{:.2},{},{:.4},{:.4},{:.4},{:.2},{:.2},{:.2}",
            row.mpr_pct,
            row.means.trips,
            row.means.travel_time_s,
            row.means.delay_s,
            row.means.fuel_l,
            row.reduction.travel_time_pct,
            row.reduction.delay_pct,
            row.reduction.fuel_pct
        )
        .map_err(err)?;
    }
    w.flush().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run;
    use crate::scenario::parse_scenario;

    #[test]
    fn zero_vehicle_run_writes_header_only() {
        let (config, _) =
            parse_scenario("[demand]\nper_lane_vph = 0.0\n[sim]\nduration_s = 1.0\n").unwrap();
        let result = run(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&result, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("trajectories.csv")).unwrap();
        assert_eq!(
            text,
            "t,vehicle_id,class,lane,x_m,v_mps,a_mps2,platoon_id,fuel_rate_lps,delay_s\n"
        );
    }

    #[test]
    fn summary_means_match_records() {
        let (config, _) = parse_scenario(concat!(
            "[corridor]\nlanes = 1\n[[corridor.links]]\nlength_m = 400.0\n",
            "[demand]\nper_lane_vph = 900.0\n",
            "[sim]\nduration_s = 240.0\nseed = 3\npreset = \"C\"\n",
        ))
        .unwrap();
        let result = run(&config).unwrap();
        let summary = result.summary.as_ref().expect("trips completed");
        let mean: f64 = result.records.iter().map(|r| r.travel_time_s).sum::<f64>()
            / result.records.len() as f64;
        assert!((summary.fleet.travel_time_s - mean).abs() < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        write_outputs(&result, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(
            parsed["completed_trips"].as_u64().unwrap() as usize,
            result.records.len()
        );
        // Config echo makes the run self-describing.
        assert_eq!(parsed["config"]["sim"]["seed"].as_u64().unwrap(), 3);
        assert!(parsed["config"]["controller"]["jam_spacing_m"].is_number());
    }

    #[test]
    fn event_rows_are_time_ordered_fixed_point() {
        let (config, _) = parse_scenario(concat!(
            "[demand]\nper_lane_vph = 1600.0\nmpr = 1.0\n",
            "[sim]\nduration_s = 120.0\nseed = 5\npreset = \"E\"\nrecord_trajectories = false\n",
        ))
        .unwrap();
        let result = run(&config).unwrap();
        assert!(!result.events.is_empty());
        let dir = tempfile::tempdir().unwrap();
        write_events(&dir.path().join("events.csv"), &result.events).unwrap();
        let text = fs::read_to_string(dir.path().join("events.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,event,lane,vehicle_id,platoon_id");
        let mut last_t = -1.0f64;
        for line in lines {
            let t: f64 = line.split(',').next().unwrap().parse().unwrap();
            assert!(t >= last_t, "events out of order: {line}");
            last_t = t;
            // 6-decimal fixed formatting.
            assert_eq!(line.split(',').next().unwrap().split('.').nth(1).unwrap().len(), 6);
        }
    }
}
