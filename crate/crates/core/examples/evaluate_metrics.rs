//! PR, SR, MPR and MSR on a hand-made five-frame track where the two
//! modalities' ground truths are slightly misaligned.

use fusetrack::heads::BoundingBox;
use fusetrack::metrics::{evaluate, FrameAnnotation};

fn main() -> fusetrack::Result<()> {
    let rgb = |x: f64| BoundingBox::from_xywh(x, 20.0, 30.0, 30.0);
    let thermal = |x: f64| BoundingBox::from_xywh(x + 6.0, 22.0, 30.0, 30.0);
    let ann: Vec<FrameAnnotation> = (0..5).map(|f| FrameAnnotation::new(Some(rgb(10.0 * f as f64)), Some(thermal(10.0 * f as f64)))).collect();
    let pred = vec![rgb(0.0), thermal(10.0), rgb(35.0), thermal(48.0), rgb(70.0)];
    let report = evaluate(&pred, &ann, 20.0)?;
    println!("{}", report.summary());
    print!("success curve\n{}", report.success_csv());
    Ok(())
}
