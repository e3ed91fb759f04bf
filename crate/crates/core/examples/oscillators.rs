//! Fits each benchmark oscillator from 25 noisy points over its training
//! span and reports the forecast error over the two following cycles.
//!
//! `cargo run --release -p gpode --example oscillators [restarts] [lengthscale]`

use std::time::Instant;

use gpode::bench::{add_noise, field_error, linspace, rmse, simulate_benchmark, BenchmarkSystem};
use gpode::field::GridSpec;
use gpode::model::{fit, Dataset, FitConfig};
use gpode::odeint::SolverConfig;

fn main() -> gpode::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let restarts = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let lengthscale: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let solver = SolverConfig::default();
    for system in BenchmarkSystem::ALL {
        let start = Instant::now();
        let x0 = system.initial_state();
        let period = system.period(x0, &solver)?;
        let span = system.training_cycles() * period;
        let clean = simulate_benchmark(system, &x0, &linspace(span, 25), &solver)?;
        let data = Dataset::single(add_noise(&clean, 0.1, 1)?)?;
        let grid = GridSpec::covering(data.series()[0].states(), 5, 0.1)?;
        let cfg = FitConfig {
            restarts,
            ..FitConfig::default()
        };
        let fitted = fit(&data, &grid, &[lengthscale; 2], &cfg)?;

        let future: Vec<f64> = (1..=50).map(|i| span + 2.0 * period * i as f64 / 50.0).collect();
        let truth = simulate_benchmark(system, &x0, &future, &solver)?;
        let pred = fitted.model.predict(&future, Some(&x0))?;
        let score = rmse(&pred.trajectory, &truth, &future, None)?;
        let covered = simulate_benchmark(system, &x0, &linspace(span, 200), &solver)?;
        let ferr = field_error(&fitted.model.inducing()?, system, covered.states())?;
        println!(
            "{system}: period {period:.4} forecast rmse {score:.4} field error {ferr:.3} noise {:?} ({:.1?})",
            fitted.model.noise_std(),
            start.elapsed()
        );
    }
    Ok(())
}
