//! Median forward latency of the unified single-pass backbone against the
//! three-stage extraction/fusion/relation baseline at equal layer budget.
//!
//! `cargo run --release --example latency_bench -- [samples]`

use fusetrack::harness::{bench_sizes, latency_csv, measure_latency, ThreeStageBaseline};

fn main() -> fusetrack::Result<()> {
    let samples: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let mut reports = Vec::new();
    for cfg in bench_sizes() {
        let phases = ThreeStageBaseline::new(cfg.clone(), 0)?.phases();
        println!("{}: unified {} joint layers, baseline {} phases", fusetrack::harness::describe(&cfg), cfg.depth, phases);
        reports.push(measure_latency(&cfg, 10, samples)?);
    }
    print!("{}", latency_csv(&reports));
    Ok(())
}
