//! Central finite differences against reverse mode, for one op and for the
//! full two-layer model objective.

use fusetrack::cli::selftest::{model_gradients, tiny_config};
use fusetrack::numkernel::{check_gradients, seeded, uniform};

fn main() -> fusetrack::Result<()> {
    let inputs = vec![uniform(&mut seeded(1), &[4, 6], -2.0, 2.0), uniform(&mut seeded(2), &[6], 0.5, 1.5)];
    let r = check_gradients(&inputs, 1e-6, |tape, v| {
        let x = tape.mul_row(v[0], v[1])?;
        let p = tape.softmax_rows(x)?;
        let g = tape.gelu(p)?;
        tape.sum(g)
    })?;
    println!("softmax∘gelu: rel error {:.2e} over {} entries", r.rel_error, r.entries);

    let (ok, detail) = model_gradients(tiny_config(), 3)?;
    println!("two-layer model objective: {detail} ({})", if ok { "pass" } else { "fail" });
    Ok(())
}
