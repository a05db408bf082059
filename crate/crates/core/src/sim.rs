//! Whole-program two-lane timeline, its overlap breakdown, and report
//! writers.

use std::fmt::Write as _;

use serde::Serialize;

use crate::cost::{CostDb, CostError};
use crate::ir::{Lane, Program};
use crate::time::Time;
use crate::timeline::{lane_slot, lane_times};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TimelineEntry {
    pub index: usize,
    pub op: String,
    pub lane: Lane,
    #[serde(rename = "start_us")]
    pub start: Time,
    #[serde(rename = "end_us")]
    pub end: Time,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Timeline {
    pub entries: Vec<TimelineEntry>,
    #[serde(rename = "iteration_time_us")]
    pub iteration_time: Time,
}

impl Timeline {
    pub fn lane_busy(&self, lane: Lane) -> Time {
        self.entries.iter().filter(|e| e.lane == lane).map(|e| e.end - e.start).sum()
    }
}

/// Applies the two-lane timing rule over the whole instruction sequence.
pub fn simulate(program: &Program, db: &CostDb) -> Result<Timeline, CostError> {
    let costs = db.program_costs(program)?;
    Ok(timeline_from_costs(program, &costs))
}

pub fn timeline_from_costs(program: &Program, costs: &[Time]) -> Timeline {
    let times = lane_times(program, costs);
    let entries: Vec<TimelineEntry> = program
        .instructions
        .iter()
        .zip(times)
        .map(|(i, (start, end))| TimelineEntry { index: i.index, op: i.op.tag().to_string(), lane: i.lane(), start, end })
        .collect();
    let iteration_time = entries.iter().map(|e| e.end).max().unwrap_or(Time::ZERO);
    Timeline { entries, iteration_time }
}

/// Wall-clock partition of the iteration interval.
///
/// `non_overlapped_compute + non_overlapped_comm + overlapped = iteration_time`;
/// instants where neither lane is busy are charged to
/// `non_overlapped_compute` and also reported as `idle`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    #[serde(rename = "non_overlapped_compute_us")]
    pub non_overlapped_compute: Time,
    #[serde(rename = "non_overlapped_comm_us")]
    pub non_overlapped_comm: Time,
    #[serde(rename = "overlapped_us")]
    pub overlapped: Time,
    #[serde(rename = "idle_us")]
    pub idle: Time,
    #[serde(rename = "iteration_time_us")]
    pub iteration_time: Time,
}

pub fn decompose(timeline: &Timeline) -> Breakdown {
    // +1 / -1 busy-count deltas per lane at each boundary.
    let mut events: Vec<(Time, usize, i32)> = Vec::with_capacity(timeline.entries.len() * 2);
    for e in &timeline.entries {
        if e.end > e.start {
            let l = lane_slot(e.lane);
            events.push((e.start, l, 1));
            events.push((e.end, l, -1));
        }
    }
    events.sort();
    let mut busy = [0i32; 2];
    let mut b = Breakdown {
        non_overlapped_compute: Time::ZERO,
        non_overlapped_comm: Time::ZERO,
        overlapped: Time::ZERO,
        idle: Time::ZERO,
        iteration_time: timeline.iteration_time,
    };
    let mut prev = Time::ZERO;
    for (t, lane, delta) in events {
        if t > prev {
            let span = t - prev;
            match (busy[0] > 0, busy[1] > 0) {
                (true, true) => b.overlapped += span,
                (true, false) => b.non_overlapped_compute += span,
                (false, true) => b.non_overlapped_comm += span,
                (false, false) => {
                    b.idle += span;
                    b.non_overlapped_compute += span;
                }
            }
            prev = t;
        }
        busy[lane] += delta;
    }
    if timeline.iteration_time > prev {
        let tail = timeline.iteration_time - prev;
        b.idle += tail;
        b.non_overlapped_compute += tail;
    }
    b
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: Breakdown,
    pub optimized: Breakdown,
    pub speedup: f64,
    /// Fraction of baseline non-overlapped communication removed.
    pub comm_reduction: f64,
}

pub fn compare(baseline: &Program, optimized: &Program, db: &CostDb) -> Result<Comparison, CostError> {
    let b = decompose(&simulate(baseline, db)?);
    let o = decompose(&simulate(optimized, db)?);
    Ok(compare_breakdowns(b, o))
}

pub fn compare_breakdowns(b: Breakdown, o: Breakdown) -> Comparison {
    let speedup = if o.iteration_time == Time::ZERO {
        1.0
    } else {
        b.iteration_time.as_nanos() as f64 / o.iteration_time.as_nanos() as f64
    };
    let comm_reduction = if b.non_overlapped_comm == Time::ZERO {
        0.0
    } else {
        1.0 - o.non_overlapped_comm.as_nanos() as f64 / b.non_overlapped_comm.as_nanos() as f64
    };
    Comparison { baseline: b, optimized: o, speedup, comm_reduction }
}

/// `bucket,time_us,fraction` rows.
pub fn breakdown_csv(b: &Breakdown) -> String {
    let total = b.iteration_time.as_nanos().max(1) as f64;
    let mut s = String::from("bucket,time_us,fraction\n");
    for (name, t) in [
        ("non_overlapped_compute", b.non_overlapped_compute),
        ("non_overlapped_comm", b.non_overlapped_comm),
        ("overlapped", b.overlapped),
        ("idle", b.idle),
        ("iteration_time", b.iteration_time),
    ] {
        let _ = writeln!(s, "{name},{:.3},{:.6}", t.as_us(), t.as_nanos() as f64 / total);
    }
    s
}

/// One row per lane; rectangles labelled with instruction index and op tag.
pub fn gantt_svg(timeline: &Timeline) -> String {
    const WIDTH: f64 = 1600.0;
    const ROW: f64 = 40.0;
    const LEFT: f64 = 90.0;
    let total = timeline.iteration_time.as_nanos().max(1) as f64;
    let scale = (WIDTH - LEFT - 10.0) / total;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{}" font-family="monospace" font-size="9">"#,
        ROW * 2.0 + 40.0
    );
    for (row, (lane, name, fill)) in [(Lane::Compute, "compute", "#4a7fd4"), (Lane::Network, "network", "#3caa5a")].into_iter().enumerate() {
        let y = 10.0 + row as f64 * (ROW + 5.0);
        let _ = writeln!(s, r#"<text x="4" y="{:.1}" font-size="12">{name}</text>"#, y + ROW / 2.0 + 4.0);
        for e in timeline.entries.iter().filter(|e| e.lane == lane) {
            let x = LEFT + e.start.as_nanos() as f64 * scale;
            let w = ((e.end - e.start).as_nanos() as f64 * scale).max(0.5);
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.1}" width="{w:.2}" height="{ROW}" fill="{fill}" stroke="white" stroke-width="0.3"><title>#{} {} [{:.3}, {:.3}] us</title></rect>"#,
                e.index,
                e.op,
                e.start.as_us(),
                e.end.as_us()
            );
            if w > 40.0 {
                let _ = writeln!(s, r#"<text x="{:.2}" y="{:.1}" fill="white">{}:{}</text>"#, x + 2.0, y + ROW / 2.0 + 3.0, e.index, e.op);
            }
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{LEFT}" y="{:.1}" font-size="11">iteration {:.3} us</text>"#,
        ROW * 2.0 + 32.0,
        timeline.iteration_time.as_us()
    );
    s.push_str("</svg>\n");
    s
}
