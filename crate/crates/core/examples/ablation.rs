//! Trains every arm of an ablation under one seed and budget and prints the
//! held-out comparison table as CSV.
//!
//! `cargo run --release --example ablation -- heads|embedding [steps]`

use fusetrack::harness::{run_ablation, AblationConfig, AblationKind};

fn main() -> fusetrack::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind = args.next().and_then(|k| AblationKind::parse(&k)).unwrap_or(AblationKind::Embedding);
    let mut cfg = AblationConfig::default();
    cfg.train.steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    cfg.eval_sequences = 5;
    let table = run_ablation(kind, &cfg, &mut |arm, step, loss| {
        if step % 50 == 0 {
            eprintln!("{arm} step {step} loss {loss:.3}");
        }
    })?;
    print!("{}", table.to_csv());
    Ok(())
}
