//! Seeded market-penetration-rate sweeps.
//!
//! Every (MPR, seed) pair is an independent run sharing only the immutable
//! base configuration, so the fan-out is embarrassingly parallel. The same
//! seed set is reused at every MPR point for paired comparisons, and the
//! output rows are ordered by MPR regardless of completion order.

use rayon::prelude::*;
use serde::Serialize;

use crate::engine::run;
use crate::error::SimError;
use crate::metrics::{reductions, ClassMeans, Reductions};
use crate::scenario::SweepSpec;

/// One output row: per-seed-averaged fleet means at an MPR point and the
/// percentage change against the MPR = 0 row.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub mpr_pct: f64,
    /// Fleet means averaged across seeds; `trips` totals all seeds.
    pub means: ClassMeans,
    pub reduction: Reductions,
}

/// The completed sweep, rows ordered by ascending MPR.
#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub seeds: Vec<u64>,
}

/// Run the sweep. Any failed run (including one that completes zero trips)
/// aborts the sweep with the failing (MPR, seed) identified.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepTable, SimError> {
    spec.validate()?;
    let mut base = spec.base.clone();
    base.resolve()?;
    // Trajectory recording would dominate memory across the fan-out.
    base.sim.record_trajectories = false;

    let mut mprs = spec.mpr_percents.clone();
    mprs.sort_by(|a, b| a.partial_cmp(b).expect("finite MPRs"));
    mprs.dedup();
    let seeds: Vec<u64> = (0..spec.seeds as u64)
        .map(|i| base.sim.seed.wrapping_add(i))
        .collect();

    let jobs: Vec<(f64, u64)> = mprs
        .iter()
        .flat_map(|&mpr| seeds.iter().map(move |&seed| (mpr, seed)))
        .collect();

    let per_run: Vec<Result<(f64, ClassMeans), SimError>> = jobs
        .par_iter()
        .map(|&(mpr_pct, seed)| {
            let config = base.with_mpr_and_seed(mpr_pct / 100.0, seed);
            let wrap = |source: SimError| SimError::SweepRun {
                mpr_pct,
                seed,
                source: Box::new(source),
            };
            let result = run(&config).map_err(wrap)?;
            let summary = result
                .summary
                .ok_or(crate::error::ModelError::NoCompletedTrips)
                .map_err(|e| wrap(e.into()))?;
            Ok((mpr_pct, summary.fleet))
        })
        .collect();

    // Surface the first error deterministically (job order).
    if let Some(err) = per_run.iter().find_map(|r| r.as_ref().err()) {
        return Err(clone_sweep_error(err));
    }

    let mut rows: Vec<SweepRow> = Vec::with_capacity(mprs.len());
    for &mpr_pct in &mprs {
        let fleet: Vec<ClassMeans> = per_run
            .iter()
            .filter_map(|r| r.as_ref().ok())
            .filter(|(m, _)| *m == mpr_pct)
            .map(|(_, means)| *means)
            .collect();
        let n = fleet.len() as f64;
        let means = ClassMeans {
            trips: fleet.iter().map(|m| m.trips).sum(),
            travel_time_s: fleet.iter().map(|m| m.travel_time_s).sum::<f64>() / n,
            delay_s: fleet.iter().map(|m| m.delay_s).sum::<f64>() / n,
            fuel_l: fleet.iter().map(|m| m.fuel_l).sum::<f64>() / n,
        };
        rows.push(SweepRow {
            mpr_pct,
            means,
            reduction: Reductions {
                travel_time_pct: 0.0,
                delay_pct: 0.0,
                fuel_pct: 0.0,
            },
        });
    }

    let baseline = rows
        .iter()
        .find(|r| r.mpr_pct == 0.0)
        .map(|r| r.means)
        .expect("validated: MPR list contains 0");
    for row in &mut rows {
        row.reduction = reductions(&baseline, &row.means);
    }

    Ok(SweepTable { rows, seeds })
}

/// `SimError` is not `Clone` (it wraps `io::Error`); rebuild the sweep-run
/// identification for reporting.
fn clone_sweep_error(err: &SimError) -> SimError {
    match err {
        SimError::SweepRun {
            mpr_pct,
            seed,
            source,
        } => SimError::SweepRun {
            mpr_pct: *mpr_pct,
            seed: *seed,
            source: Box::new(SimError::Internal(source.to_string())),
        },
        other => SimError::Internal(other.to_string()),
    }
}
