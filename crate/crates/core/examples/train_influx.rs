//! Trains a model on the `car-train` preset and draws the influx map.
//!
//! ```text
//! cargo run --release --example train_influx -- [model.json]
//! ```

use std::path::PathBuf;

use crossgap::pipeline::{train, TrainConfig};
use crossgap::simgen::{self, Renderer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("crossgap-model.json"));
    let script = simgen::preset("car-train", 0)?;
    println!("training on {} s of car-train ({} vehicles)...", script.duration, script.vehicles.len());

    let cfg = TrainConfig::default();
    let trained = train(|| Ok(Renderer::new(script.clone()).expect("preset is valid").into_frames().into_stream()), &cfg)?;
    println!("{}", trained.summary);
    trained.model.save(&out)?;
    println!("model written to {}\n", out.display());

    // One character per grid cell: influx direction where the map has support.
    let map = trained.model.influx_map()?;
    let g = map.geometry;
    let pfa = map.pfa.expect("trained maps have a pfa");
    let pfa_cell = g.cell_of(pfa[0], pfa[1]);
    for row in 0..g.rows {
        let line: String = (0..g.cols)
            .map(|col| {
                if pfa_cell == Some((col, row)) {
                    return '@';
                }
                let v = map.get(col, row);
                if v.norm() == 0.0 {
                    '.'
                } else if v.dy.abs() >= 2.0 * v.dx.abs() {
                    if v.dy > 0.0 { 'v' } else { '^' }
                } else if v.dx > 0.0 {
                    if v.dy > 0.0 { '\\' } else { '/' }
                } else if v.dy > 0.0 {
                    '/'
                } else {
                    '\\'
                }
            })
            .collect();
        println!("{line}");
    }

    let a = trained.activity.values();
    let peak = a.iter().copied().fold(f64::MIN, f64::max);
    println!(
        "\ntraining activity: {} samples at {} Hz, peak {:.3}, {} salient maxima",
        a.len(),
        cfg.rate,
        peak,
        trained.maxima.len()
    );
    Ok(())
}
