//! Renders a synthetic dual-modality sequence with a thermal noise span and
//! crops a template/search pair from it.

use fusetrack::embedding::Modality;
use fusetrack::harness::{crop_search, crop_template, degrade_span, generate_sequence, CropConfig, Degradation, SyntheticScenario};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> fusetrack::Result<()> {
    let mut scenario = SyntheticScenario::random(11, 40, 128);
    degrade_span(&mut scenario.schedule, Modality::Thermal, Degradation::Noise, 10..20);
    degrade_span(&mut scenario.schedule, Modality::Rgb, Degradation::Dim, 25..30);
    let (frames, ann) = generate_sequence(&scenario)?;

    for f in [0, 15, 27] {
        let b = ann[f].reference().expect("synthetic frames always have ground truth");
        println!(
            "frame {f:2}: {:?}  box ({:.1}, {:.1}, {:.1}×{:.1})  mean rgb {:.3}  mean thermal {:.3}",
            scenario.schedule[f],
            b.cx,
            b.cy,
            b.w,
            b.h,
            mean(frames[f].rgb.data()),
            mean(frames[f].thermal.data())
        );
    }

    let crop = CropConfig::default();
    let b0 = ann[0].reference().expect("gt");
    let (template, _) = crop_template(&frames[0], &b0, &crop)?;
    let (search, window) = crop_search(&frames[5], &b0, &crop)?;
    let gt = window.to_crop(&ann[5].reference().expect("gt"));
    println!("template {:?}, search {:?}", template.rgb.shape(), search.rgb.shape());
    println!("frame-5 target in search crop: center ({:.3}, {:.3}) size {:.3}×{:.3}", gt.cx, gt.cy, gt.w, gt.h);
    Ok(())
}
