//! Neyman-Pearson matched filter on a synthetic pulse in white Gaussian
//! noise: empirical false-alarm and detection rates against the closed form.
//!
//! ```text
//! cargo run --release --example matched_filter
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crossgap::detector::{correlate, pd_for, q_func, q_inv, threshold_for};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sigma = 1.0;
    let trials = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, sigma)?;

    println!("q_inv(1e-3) = {:.7}, q_func of that = {:.3e}", q_inv(1e-3)?, q_func(q_inv(1e-3)?));
    println!("\n  snr   p_fa    gamma     fa_emp    pd_emp   pd_pred");
    for snr in [1.0, 2.0, 3.0, 5.0] {
        // A 60-sample raised-cosine pulse scaled to the requested snr.
        let shape: Vec<f64> = (0..60).map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / 59.0).cos()).collect();
        let e: f64 = shape.iter().map(|v| v * v).sum();
        let k = snr * sigma / e.sqrt();
        let template: Vec<f64> = shape.iter().map(|v| v * k).collect();
        let energy: f64 = template.iter().map(|v| v * v).sum();

        for p_fa in [1e-2, 1e-3] {
            let th = threshold_for(p_fa, sigma, energy)?;
            let (mut fa, mut hits) = (0usize, 0usize);
            let mut window = vec![0.0; template.len()];
            for _ in 0..trials {
                window.iter_mut().for_each(|w| *w = noise.sample(&mut rng));
                fa += (correlate(&window, &template)? > th.gamma) as usize;
                window.iter_mut().zip(&template).for_each(|(w, s)| *w += s);
                hits += (correlate(&window, &template)? > th.gamma) as usize;
            }
            println!(
                "{snr:5.1}  {p_fa:5.0e}  {:7.3}  {:8.5}  {:8.4}  {:8.4}",
                th.gamma,
                fa as f64 / trials as f64,
                hits as f64 / trials as f64,
                pd_for(p_fa, sigma, energy)?
            );
        }
    }
    Ok(())
}
