//! Splits one joint attention pass into its 16 stream-to-stream blocks and
//! rebuilds the output from them.

use fusetrack::backbone::{joint_attention, reconstruct_from_blocks, EncoderLayer, JointTokenState, SegmentLayout};
use fusetrack::embedding::StreamId;
use fusetrack::numkernel::{seeded, uniform, ParamStore};

fn main() -> fusetrack::Result<()> {
    let (n_x, n_z, dim, heads) = (16, 4, 16, 2);
    let mut store = ParamStore::new();
    let mut rng = seeded(3);
    let layer = EncoderLayer::init(&mut store, &mut rng, "layer", dim, heads, 4)?;
    // wider weights than the training init so the attention is far from uniform
    for (id, p) in store.clone().iter() {
        *store.value_mut(id) = uniform(&mut rng, p.value.shape(), -0.6, 0.6);
    }
    let layout = SegmentLayout::new(n_x, n_z);
    let state = JointTokenState::new(uniform(&mut rng, &[layout.total(), dim], -1.0, 1.0), layout)?;

    let joint = joint_attention(&state, &layer, &store)?;
    let rebuilt = reconstruct_from_blocks(&joint.decomposition, &joint.values)?;
    println!("tokens {}  max |joint - rebuilt| = {:.2e}", layout.total(), rebuilt.max_abs_diff(&joint.output));

    println!("share of each query token's attention going to each stream (rows sum to 1):");
    print!("{:>8}", "");
    for k in StreamId::ALL {
        print!("{:>8}", k.as_str());
    }
    println!();
    for q in StreamId::ALL {
        print!("{:>8}", q.as_str());
        for k in StreamId::ALL {
            print!("{:>8.3}", joint.decomposition.mean_mass(q, k).unwrap_or(0.0) * layout.count(k) as f64);
        }
        println!();
    }
    Ok(())
}
