//! Runs the online detector over the `single-car` preset and reports the
//! advance warning. Trains a model first unless one is given.
//!
//! ```text
//! cargo run --release --example train_influx -- /tmp/model.json
//! cargo run --release --example detect_single_car -- /tmp/model.json [seed] [decimation]
//! ```

use crossgap::detector::DetectorConfig;
use crossgap::frame_io::decimate;
use crossgap::model::Model;
use crossgap::pipeline::{detect, train, TrainConfig};
use crossgap::simgen::{self, Renderer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) => Model::load(path.as_ref())?,
        None => {
            eprintln!("no model given; training on car-train (this takes a while)");
            let script = simgen::preset("car-train", 0)?;
            train(|| Ok(Renderer::new(script.clone()).expect("preset is valid").into_frames().into_stream()), &TrainConfig::default())?.model
        }
    };
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let k: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let script = simgen::preset("single-car", seed)?;
    let renderer = Renderer::new(script)?;
    let truth = renderer.ground_truth();
    let cfg = DetectorConfig {
        rate: model.rate,
        ..DetectorConfig::default()
    };
    let frames = decimate(renderer.into_frames().into_stream(), k);
    let run = detect(frames, &model, cfg, |s| println!("t={:.3} STATE={}", s.timestamp, s.state))?;

    let car = &truth.vehicles[0];
    println!(
        "\n{} frames, gamma {:.4}; car visible {:.2}..{:.2} s",
        run.frames, run.gamma, car.first_visible, car.arrival
    );
    match run.onsets().iter().find(|&&t| t <= car.arrival) {
        Some(t) => println!("TRAFFIC at {t:.3} s, {:.2} s before arrival", car.arrival - t),
        None => println!("vehicle missed"),
    }
    let peak = run.activity.iter().max_by(|a, b| a.2.total_cmp(&b.2));
    if let Some((_, t, a, _)) = peak {
        println!("activity peak {a:.3} at {t:.2} s");
    }
    Ok(())
}
