//! Trains the dual-head model briefly, saves a checkpoint, then tracks a
//! held-out sequence with a thermal noise span and scores it.
//!
//! `cargo run --release --example train_and_track -- [steps]`

use fusetrack::harness::{
    curve_csv, held_out_set, track_sequence, Checkpoint, Model, ModelConfig, TrackOptions, TrainConfig, Trainer,
};
use fusetrack::metrics::{evaluate, DEFAULT_TAU};

fn main() -> fusetrack::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let mut trainer = Trainer::new(Model::new(ModelConfig::default(), 7)?, TrainConfig::default());
    println!("{} trainable scalars, {steps} steps", trainer.model.param_count());
    trainer.train(steps, |step, b| {
        if step % 25 == 0 {
            println!(
                "step {step:4}  L_RGB {:.3}  L_T {:.3}  lambda_RGB {:.3}  total {:.3}",
                b.rgb.total, b.thermal.total, b.lambda_rgb, b.total
            );
        }
    })?;
    let dir = std::env::temp_dir().join("fusetrack-example");
    std::fs::create_dir_all(&dir).map_err(|e| fusetrack::Error::Contract(e.to_string()))?;
    std::fs::write(dir.join("curves.csv"), curve_csv(&trainer.curve)).map_err(|e| fusetrack::Error::Contract(e.to_string()))?;
    let ckpt = Checkpoint::of_trainer(&trainer);
    ckpt.save(&dir.join("checkpoint.bin"))?;
    println!("checkpoint sha256 {}", ckpt.digest());

    let model = Checkpoint::load(&dir.join("checkpoint.bin"))?.to_model()?;
    let seq = held_out_set(1_000_003, 1, 60, 128)?.remove(0);
    let out = track_sequence(&model, &seq.frames, seq.init, &TrackOptions::default())?;
    for (f, o) in out.iter().enumerate().step_by(10) {
        println!(
            "frame {f:2} {:?}  chose {:<7}  R_RGB {:+.2}  R_T {:+.2}",
            seq.schedule[f],
            o.chosen.as_str(),
            o.reliability.r_rgb,
            o.reliability.r_t
        );
    }
    let boxes: Vec<_> = out.iter().map(|o| o.bbox).collect();
    println!("{}", evaluate(&boxes, &seq.annotations, DEFAULT_TAU)?.summary());
    Ok(())
}
