//! Scores detections over several seeded scenes and prints the warning-time
//! histogram, miss count and false-alarm rate.
//!
//! ```text
//! cargo run --release --example eval_warning_times -- /tmp/model.json [preset] [runs]
//! ```

use std::io::Cursor;

use crossgap::detector::DetectorConfig;
use crossgap::eval::{evaluate, read_events, EvalConfig, EvalReport};
use crossgap::model::Model;
use crossgap::pipeline::detect;
use crossgap::simgen::{self, Renderer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args.next().ok_or("usage: eval_warning_times <model.json> [preset] [runs]")?;
    let model = Model::load(path.as_ref())?;
    let preset = args.next().unwrap_or_else(|| "single-car".into());
    let runs: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let cfg = DetectorConfig {
        rate: model.rate,
        ..DetectorConfig::default()
    };

    let mut warnings = Vec::new();
    let (mut vehicles, mut missed, mut false_alarms, mut hours) = (0, 0, 0, 0.0);
    for seed in 0..runs {
        let renderer = Renderer::new(simgen::preset(&preset, seed)?)?;
        let truth = renderer.ground_truth();
        let run = detect(renderer.into_frames().into_stream(), &model, cfg, |_| {})?;

        // Round-trip through the CSV event log, as the CLI does.
        let mut log = Vec::new();
        run.write_events(&mut log)?;
        let events = read_events(Cursor::new(log))?;
        let eval_cfg = EvalConfig {
            allow_empty_truth: true,
            ..EvalConfig::default()
        };
        let report: EvalReport = evaluate(&events, &truth, &eval_cfg)?;
        println!(
            "seed {seed:3}: {} detected, {} missed, {} false alarms, warnings {:?}",
            report.detection_count(),
            report.miss_count(),
            report.false_alarms,
            report.warnings().iter().map(|w| (w * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
        vehicles += report.vehicles;
        missed += report.miss_count();
        false_alarms += report.false_alarms;
        hours += report.duration / 3600.0;
        warnings.extend(report.warnings());
    }

    println!("\n{vehicles} vehicles, {missed} missed, {false_alarms} false alarms ({:.2}/h)", false_alarms as f64 / hours);
    if warnings.is_empty() {
        return Ok(());
    }
    let lo = warnings.iter().copied().fold(f64::INFINITY, f64::min).floor() as i64;
    let hi = warnings.iter().copied().fold(f64::NEG_INFINITY, f64::max).floor() as i64;
    println!("warning time histogram (1 s bins):");
    for b in lo..=hi {
        let n = warnings.iter().filter(|&&w| w.floor() as i64 == b).count();
        println!("  [{b:3}, {:3}) {:3} {}", b + 1, n, "#".repeat(n));
    }
    Ok(())
}
