//! Scoring detector event logs against simulator ground truth.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Indication;
use crate::simgen::GroundTruth;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("ground truth is empty; nothing to match onsets against")]
    EmptyTruth,
    #[error("event timestamps are not increasing at row {0}")]
    Unordered(usize),
    #[error("invalid evaluation settings: {0}")]
    InvalidConfig(String),
}

/// One row of the detector event log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRow {
    pub timestamp: f64,
    pub state: Indication,
    /// NaN during warm-up.
    pub correlator: f64,
    pub gamma: f64,
    pub margin: f64,
}

pub fn read_events<R: Read>(r: R) -> Result<Vec<EventRow>, EvalError> {
    let mut rows: Vec<EventRow> = Vec::new();
    for (i, row) in csv::Reader::from_reader(r).deserialize().enumerate() {
        let row: EventRow = row?;
        if rows.last().is_some_and(|l| row.timestamp <= l.timestamp) {
            return Err(EvalError::Unordered(i + 1));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Times of GAP -> TRAFFIC transitions.
pub fn onsets(events: &[EventRow]) -> Vec<f64> {
    events
        .windows(2)
        .filter(|w| w[0].state == Indication::Gap && w[1].state == Indication::Traffic)
        .map(|w| w[1].timestamp)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// An onset may precede a vehicle's first visibility by this much.
    pub slack: f64,
    pub bin_width: f64,
    /// Thin the ROC curve to at most this many points.
    pub roc_points: usize,
    /// Accept an empty truth file (only false alarms are then scored).
    pub allow_empty_truth: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            slack: 2.0,
            bin_width: 1.0,
            roc_points: 256,
            allow_empty_truth: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub vehicle_id: usize,
    pub onset: f64,
    pub arrival: f64,
    /// `arrival - onset`.
    pub warning: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub gamma: f64,
    pub p_fa: f64,
    pub p_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub vehicles: usize,
    pub detections: Vec<Detection>,
    pub missed: Vec<usize>,
    /// Missed vehicles whose whole visibility interval was already TRAFFIC.
    pub covered: Vec<usize>,
    pub false_alarms: usize,
    /// False alarms per hour of logged time.
    pub false_alarm_rate: f64,
    pub duration: f64,
    pub histogram: Vec<HistogramBin>,
    pub roc: Vec<RocPoint>,
}

impl EvalReport {
    pub fn detection_count(&self) -> usize {
        self.detections.len()
    }

    pub fn miss_count(&self) -> usize {
        self.missed.len()
    }

    pub fn warnings(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.warning).collect()
    }

    pub fn write_histogram<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "bin_start,bin_end,count")?;
        for b in &self.histogram {
            writeln!(w, "{},{},{}", b.start, b.end, b.count)?;
        }
        Ok(())
    }

    pub fn write_roc<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "gamma,p_fa,p_d")?;
        for p in &self.roc {
            writeln!(w, "{},{},{}", p.gamma, p.p_fa, p.p_d)?;
        }
        Ok(())
    }

    pub fn write_detections<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "vehicle_id,onset,arrival,warning")?;
        for d in &self.detections {
            writeln!(w, "{},{},{},{}", d.vehicle_id, d.onset, d.arrival, d.warning)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "vehicles      {}", self.vehicles)?;
        writeln!(f, "detected      {}", self.detections.len())?;
        writeln!(f, "missed        {} ({} covered by an earlier episode)", self.missed.len(), self.covered.len())?;
        writeln!(f, "false alarms  {} ({:.2}/h)", self.false_alarms, self.false_alarm_rate)?;
        let w = self.warnings();
        if w.is_empty() {
            write!(f, "warning time  n/a")
        } else {
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let min = w.iter().copied().fold(f64::INFINITY, f64::min);
            write!(f, "warning time  mean {mean:.2} s, min {min:.2} s")
        }
    }
}

/// Greedy matching of onsets to vehicles.
///
/// Vehicles are taken in order of arrival; each claims the latest unmatched
/// onset in `[first_visible - slack, arrival]`.
pub fn match_onsets(onsets: &[f64], truth: &GroundTruth, slack: f64) -> (Vec<Detection>, Vec<usize>, Vec<bool>) {
    let mut used = vec![false; onsets.len()];
    let mut order: Vec<usize> = (0..truth.vehicles.len()).collect();
    order.sort_by(|&a, &b| truth.vehicles[a].arrival.total_cmp(&truth.vehicles[b].arrival));
    let mut detections = Vec::new();
    let mut missed = Vec::new();
    for i in order {
        let v = &truth.vehicles[i];
        let pick = onsets
            .iter()
            .enumerate()
            .filter(|&(k, &t)| !used[k] && t <= v.arrival && t >= v.first_visible - slack)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k);
        match pick {
            Some(k) => {
                used[k] = true;
                detections.push(Detection {
                    vehicle_id: v.vehicle_id,
                    onset: onsets[k],
                    arrival: v.arrival,
                    warning: v.arrival - onsets[k],
                });
            }
            None => missed.push(v.vehicle_id),
        }
    }
    detections.sort_by_key(|d| d.vehicle_id);
    missed.sort_unstable();
    (detections, missed, used)
}

fn histogram(values: &[f64], width: f64) -> Vec<HistogramBin> {
    if values.is_empty() {
        return Vec::new();
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let bins = ((max / width).floor() as usize) + 1;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            start: b as f64 * width,
            end: (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        out[((v.max(0.0) / width).floor() as usize).min(bins - 1)].count += 1;
    }
    out
}

/// ROC over per-step correlator values: steps inside a vehicle's visibility
/// interval are positives, all others negatives. Warm-up rows are skipped.
pub fn roc(events: &[EventRow], truth: &GroundTruth, max_points: usize) -> Vec<RocPoint> {
    let mut labeled: Vec<(f64, bool)> = events
        .iter()
        .filter(|e| e.correlator.is_finite())
        .map(|e| {
            let pos = truth
                .vehicles
                .iter()
                .any(|v| e.timestamp >= v.first_visible && e.timestamp <= v.arrival);
            (e.correlator, pos)
        })
        .collect();
    let n_pos = labeled.iter().filter(|l| l.1).count();
    let n_neg = labeled.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Vec::new();
    }
    labeled.sort_by(|a, b| b.0.total_cmp(&a.0));
    // cumulative counts above each distinct threshold, strongest first
    let mut curve = vec![RocPoint {
        gamma: f64::INFINITY,
        p_fa: 0.0,
        p_d: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < labeled.len() {
        let g = labeled[i].0;
        while i < labeled.len() && labeled[i].0 == g {
            if labeled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // y > next-lower value is equivalent to y >= g
        let next = labeled.get(i).map_or(f64::NEG_INFINITY, |l| l.0);
        curve.push(RocPoint {
            gamma: next,
            p_fa: fp as f64 / n_neg as f64,
            p_d: tp as f64 / n_pos as f64,
        });
    }
    thin(curve, max_points.max(2))
}

fn thin(curve: Vec<RocPoint>, max: usize) -> Vec<RocPoint> {
    if curve.len() <= max {
        return curve;
    }
    let last = curve.len() - 1;
    (0..max).map(|k| curve[k * last / (max - 1)]).collect()
}

pub fn evaluate(events: &[EventRow], truth: &GroundTruth, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    if !(cfg.bin_width > 0.0) || !(cfg.slack >= 0.0) {
        return Err(EvalError::InvalidConfig(format!("bin width {}, slack {}", cfg.bin_width, cfg.slack)));
    }
    if truth.vehicles.is_empty() && !cfg.allow_empty_truth {
        return Err(EvalError::EmptyTruth);
    }
    let on = onsets(events);
    let (detections, missed, used) = match_onsets(&on, truth, cfg.slack);
    let covered = missed
        .iter()
        .copied()
        .filter(|&id| {
            let v = truth.vehicles.iter().find(|v| v.vehicle_id == id).expect("id from truth");
            let inside: Vec<&EventRow> = events
                .iter()
                .filter(|e| e.timestamp >= v.first_visible && e.timestamp <= v.arrival)
                .collect();
            !inside.is_empty() && inside.iter().all(|e| e.state == Indication::Traffic)
        })
        .collect();
    let false_alarms = used.iter().filter(|u| !**u).count();
    let duration = match (events.first(), events.last()) {
        (Some(a), Some(b)) => b.timestamp - a.timestamp,
        _ => 0.0,
    };
    let warnings: Vec<f64> = detections.iter().map(|d| d.warning).collect();
    Ok(EvalReport {
        vehicles: truth.vehicles.len(),
        histogram: histogram(&warnings, cfg.bin_width),
        detections,
        missed,
        covered,
        false_alarms,
        false_alarm_rate: if duration > 0.0 { false_alarms as f64 * 3600.0 / duration } else { 0.0 },
        duration,
        roc: roc(events, truth, cfg.roc_points),
    })
}
