//! Reliability-weighted loss composition: the softmax of the two reliability
//! scores weights the per-head losses.

use fusetrack::heads::BoundingBox;
use fusetrack::losses::{gaussian_target, giou_loss, l1_box_loss, total_loss};

fn main() -> fusetrack::Result<()> {
    let gt = BoundingBox::new(0.5, 0.5, 0.2, 0.3);
    let pred = BoundingBox::new(0.55, 0.48, 0.25, 0.28);
    println!("GIoU loss {:.4}, L1 loss {:.4}", giou_loss(&pred, &gt)?, l1_box_loss(&pred, &gt));

    let target = gaussian_target(&gt, 8);
    println!("8×8 Gaussian target peak {:.3}, sum {:.3}", target.data().iter().cloned().fold(0.0, f64::max), target.data().iter().sum::<f64>());

    let (l_rgb, l_t) = (0.4, 1.6);
    println!("{:>7} {:>7} {:>9} {:>9} {:>8}", "R_RGB", "R_T", "lambda_R", "lambda_T", "total");
    for (r_rgb, r_t) in [(0.0, 0.0), (2.0, -2.0), (-2.0, 2.0), (5.0, 5.0)] {
        let (total, a, b) = total_loss(l_rgb, l_t, r_rgb, r_t);
        println!("{r_rgb:>7.1} {r_t:>7.1} {a:>9.4} {b:>9.4} {total:>8.4}");
    }
    Ok(())
}
