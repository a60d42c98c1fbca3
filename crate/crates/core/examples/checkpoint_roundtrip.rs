//! Saves a model to the versioned binary format, reloads it and compares
//! forward outputs bit for bit.

use fusetrack::harness::{sample_pair, Checkpoint, CropConfig, Curriculum, Model, ModelConfig};
use fusetrack::numkernel::seeded;

fn main() -> fusetrack::Result<()> {
    let model = Model::new(ModelConfig::default(), 5)?;
    let sample = sample_pair(&mut seeded(1), &Curriculum::default(), &CropConfig::default())?;
    let bytes = Checkpoint::of_model(&model).to_bytes();
    let restored = Checkpoint::from_bytes(&bytes)?.to_model()?;
    let a = model.infer(&sample.template, &sample.search)?;
    let b = restored.infer(&sample.template, &sample.search)?;
    println!("{} bytes, {} tensors", bytes.len(), model.store.len());
    println!("forward outputs identical: {}", a == b);
    let mut corrupted = bytes.clone();
    corrupted[4] = 9;
    println!("wrong version: {}", Checkpoint::from_bytes(&corrupted).unwrap_err());
    Ok(())
}
