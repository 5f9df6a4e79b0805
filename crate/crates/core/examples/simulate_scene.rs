//! Renders a simulator preset to disk and prints its ground truth.
//!
//! ```text
//! cargo run --example simulate_scene -- [preset] [seed] [out_dir]
//! ```

use std::path::PathBuf;

use crossgap::simgen::{self, PRESETS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "single-car".into());
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join(format!("crossgap-{name}-{seed}")));

    let script = simgen::preset(&name, seed).map_err(|e| format!("{e}; presets: {}", PRESETS.join(", ")))?;
    println!(
        "{name}: {}x{} at {} fps, {} s, {} vehicles, {} distractors",
        script.width,
        script.height,
        script.fps,
        script.duration,
        script.vehicles.len(),
        script.distractors.len()
    );

    let (frames, truth) = simgen::write_scene(&script, &out)?;
    println!("wrote {frames} frames to {}", out.join("frames").display());

    println!("vehicle  first_visible  arrival  visible_for");
    for v in &truth.vehicles {
        println!(
            "{:7}  {:13.2}  {:7.2}  {:11.2}",
            v.vehicle_id,
            v.first_visible,
            v.arrival,
            v.arrival - v.first_visible
        );
    }
    if let Some(v) = truth.vehicles.first() {
        let step = (v.path.len() / 6).max(1);
        println!("\npath of vehicle {}:", v.vehicle_id);
        for p in v.path.iter().step_by(step) {
            println!("  t={:6.2}  ({:6.1}, {:6.1})  size {:4.1}", p.time, p.x, p.y, p.size);
        }
    }
    Ok(())
}
