//! Pyramidal Lucas-Kanade on a rendered scene: recovers a vehicle's motion
//! and compares it with the analytic trajectory.
//!
//! ```text
//! cargo run --example optical_flow
//! ```

use crossgap::optflow::{build_pyramid, dense_flow_pyr, sparse_flow_pyr, GridGeometry, LkParams};
use crossgap::simgen::{self, Renderer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let script = simgen::preset("single-car", 1)?;
    let renderer = Renderer::new(script.clone())?;
    let truth = renderer.ground_truth();
    let car = &truth.vehicles[0];
    let params = LkParams::default();

    // Late in the approach, when the car is large and fast.
    let i = ((car.arrival - 2.0) * script.fps).round() as u64;
    let (a, b) = (renderer.render_frame(i), renderer.render_frame(i + 1));
    let pa = build_pyramid(&a, params.levels, params.window())?;
    let pb = build_pyramid(&b, params.levels, params.window())?;

    let at = |t: f64| {
        car.path
            .iter()
            .min_by(|p, q| (p.time - t).abs().total_cmp(&(q.time - t).abs()))
            .copied()
            .expect("vehicle has a path")
    };
    let (p0, p1) = (at(a.timestamp), at(b.timestamp));
    println!(
        "frame {i}: car at ({:.1}, {:.1}), true motion ({:.3}, {:.3}) px/frame",
        p0.x,
        p0.y,
        p1.x - p0.x,
        p1.y - p0.y
    );

    let half = (p0.size * 0.25) as f32;
    let points: Vec<[f32; 2]> = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
        .iter()
        .map(|(sx, sy)| [p0.x as f32 + sx * half, p0.y as f32 + sy * half])
        .collect();
    let flow = sparse_flow_pyr(&pa, &pb, &points, &params)?;
    for ((p, v), ok) in flow.points.iter().zip(&flow.vectors).zip(&flow.valid) {
        println!("  LK at ({:6.1}, {:6.1}): ({:+.3}, {:+.3}) {}", p[0], p[1], v.dx, v.dy, if *ok { "" } else { "(invalid)" });
    }

    let geometry = GridGeometry::new(a.width, a.height, 8, 0)?;
    let dense = dense_flow_pyr(&pa, &pb, geometry, &params)?;
    let moving = dense.vectors.iter().filter(|v| v.norm() > 0.25).count();
    println!(
        "dense grid {}x{}: {} valid nodes, {} moving faster than 0.25 px/frame",
        geometry.cols,
        geometry.rows,
        dense.valid.iter().filter(|v| **v).count(),
        moving
    );
    Ok(())
}
