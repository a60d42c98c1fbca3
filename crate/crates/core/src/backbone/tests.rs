use super::*;
use crate::numkernel::{check_gradients, seeded, uniform, weighted_sum};

fn layer(seed: u64, dim: usize, heads: usize) -> (ParamStore, EncoderLayer) {
    let mut store = ParamStore::new();
    let mut rng = seeded(seed);
    let l = EncoderLayer::init(&mut store, &mut rng, "l", dim, heads, 4).unwrap();
    // larger weights than the 0.02 init so attention is far from uniform
    for (id, p) in store.clone().iter() {
        if p.value.shape().len() == 2 {
            *store.value_mut(id) = uniform(&mut rng, p.value.shape(), -0.5, 0.5);
        } else if p.name.ends_with("bq") || p.name.ends_with("bk") || p.name.ends_with("bv") {
            *store.value_mut(id) = uniform(&mut rng, p.value.shape(), -0.1, 0.1);
        }
    }
    (store, l)
}

fn state(seed: u64, n_x: usize, n_z: usize, dim: usize) -> JointTokenState {
    let layout = SegmentLayout::new(n_x, n_z);
    let tokens = uniform(&mut seeded(seed), &[layout.total(), dim], -1.0, 1.0);
    JointTokenState::new(tokens, layout).unwrap()
}

/// Dense multi-head attention with explicit loops, independent of the tape.
fn dense_attention_oracle(x: &Tensor, store: &ParamStore, l: &EncoderLayer) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let proj = |w: ParamId, b: ParamId| -> Vec<Vec<f64>> {
        let (w, b) = (store.value(w), store.value(b));
        (0..n)
            .map(|i| (0..d).map(|j| b.data()[j] + (0..d).map(|k| x.at(i, k) * w.at(k, j)).sum::<f64>()).collect())
            .collect()
    };
    let (q, k, v) = (proj(l.wq, l.bq), proj(l.wk, l.bk), proj(l.wv, l.bv));
    let dk = d / l.heads;
    let mut out = vec![0.0; n * d];
    for h in 0..l.heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i * d + c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    Tensor::new(&[n, d], out).unwrap()
}

#[test]
fn single_token_attends_to_itself() {
    let (store, l) = layer(1, 8, 2);
    let layout = SegmentLayout::from_counts([1, 0, 0, 0]).unwrap();
    let s = JointTokenState::new(uniform(&mut seeded(2), &[1, 8], -1.0, 1.0), layout).unwrap();
    let r = joint_attention(&s, &l, &store).unwrap();
    let v = r.values[0].as_ref().unwrap();
    assert!(r.output.max_abs_diff(v) < 1e-15);
}

#[test]
fn identical_queries_give_identical_rows() {
    let (store, l) = layer(3, 8, 2);
    let mut s = state(4, 4, 2, 8);
    let row0 = s.tokens.row(0).to_vec();
    s.tokens.data_mut()[8 * 5..8 * 6].copy_from_slice(&row0);
    let r = joint_attention(&s, &l, &store).unwrap();
    assert_eq!(r.output.row(0), r.output.row(5));
}

#[test]
fn seed_42_matches_dense_oracle() {
    let (store, l) = layer(42, 8, 2);
    let s = state(42, 4, 2, 8);
    let r = joint_attention(&s, &l, &store).unwrap();
    let oracle = dense_attention_oracle(&s.tokens, &store, &l);
    assert!(r.output.max_abs_diff(&oracle) < 1e-12);
    let rebuilt = reconstruct_from_blocks(&r.decomposition, &r.values).unwrap();
    assert!(rebuilt.max_abs_diff(&r.output) < 1e-10);
}

#[test]
fn blocks_are_row_stochastic_and_cross_modal_mass_is_positive() {
    let (store, l) = layer(5, 16, 4);
    let s = state(6, 9, 4, 16);
    let r = joint_attention(&s, &l, &store).unwrap();
    for h in 0..4 {
        for sum in r.decomposition.row_sums(h) {
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for blocks in &r.decomposition.per_head {
            for b in blocks.iter().flatten().flatten() {
                assert!(b.data().iter().all(|&v| v >= 0.0));
            }
        }
    }
    assert!(r.decomposition.mean_mass(StreamId::SearchRgb, StreamId::SearchThermal).unwrap() > 0.0);
}

#[test]
fn dropping_relation_blocks_removes_exactly_their_terms() {
    let (store, l) = layer(7, 8, 2);
    let s = state(8, 4, 2, 8);
    let r = joint_attention(&s, &l, &store).unwrap();
    let mut pruned = r.decomposition.clone();
    for h in pruned.per_head.iter_mut() {
        h[0][2] = Some(Tensor::zeros(&[4, 2]));
        h[0][3] = Some(Tensor::zeros(&[4, 2]));
    }
    let full = reconstruct_from_blocks(&r.decomposition, &r.values).unwrap();
    let cut = reconstruct_from_blocks(&pruned, &r.values).unwrap();
    // the dropped terms, computed directly from the blocks
    let dk = 4;
    for h in 0..2 {
        for row in 0..4 {
            for c in 0..dk {
                let mut dropped = 0.0;
                for (ki, seg) in [(2usize, StreamId::TemplateRgb), (3, StreamId::TemplateThermal)] {
                    let w = r.decomposition.per_head[h][0][ki].as_ref().unwrap();
                    let v = r.values[ki].as_ref().unwrap();
                    assert_eq!(v.rows(), s.layout.count(seg));
                    dropped += (0..w.cols()).map(|j| w.at(row, j) * v.at(j, h * dk + c)).sum::<f64>();
                }
                let col = h * dk + c;
                assert!((full.at(row, col) - cut.at(row, col) - dropped).abs() < 1e-14);
            }
        }
    }
    // other query segments untouched
    assert_eq!(full.slice_rows(4..12).unwrap(), cut.slice_rows(4..12).unwrap());
}

#[test]
fn constant_values_reconstruct_to_the_constant() {
    let (store, l) = layer(9, 8, 2);
    let layout = SegmentLayout::new(4, 2);
    let row: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    let tokens = Tensor::new(&[12, 8], row.repeat(12)).unwrap();
    let s = JointTokenState::new(tokens, layout).unwrap();
    let r = joint_attention(&s, &l, &store).unwrap();
    let rebuilt = reconstruct_from_blocks(&r.decomposition, &r.values).unwrap();
    let v0 = r.values[0].as_ref().unwrap().row(0).to_vec();
    for i in 0..12 {
        for (a, b) in rebuilt.row(i).iter().zip(&v0) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn stale_decomposition_is_rejected() {
    let (store, l) = layer(10, 8, 2);
    let r = joint_attention(&state(11, 4, 2, 8), &l, &store).unwrap();
    let other = joint_attention(&state(12, 9, 4, 8), &l, &store).unwrap();
    assert!(matches!(reconstruct_from_blocks(&r.decomposition, &other.values), Err(Error::Contract(_))));
}

#[test]
fn zeroed_output_projections_make_the_layer_identity() {
    let (mut store, l) = layer(13, 8, 2);
    for id in [l.wo, l.bo, l.mlp_out, l.mlp_out_bias] {
        store.value_mut(id).data_mut().fill(0.0);
    }
    let s = state(14, 4, 2, 8);
    let out = encoder_layer(&s, &l, &store).unwrap();
    assert_eq!(out, s);
}

#[test]
fn layer_preserves_shape_for_any_layout() {
    let (store, l) = layer(15, 8, 2);
    for (nx, nz) in [(1, 1), (4, 1), (9, 4)] {
        let s = state(16, nx, nz, 8);
        let out = encoder_layer(&s, &l, &store).unwrap();
        assert_eq!(out.tokens.shape(), s.tokens.shape());
        assert_eq!(out.layout, s.layout);
    }
}

#[test]
fn encoder_layer_gradient_check() {
    let (store, l) = layer(17, 8, 2);
    let s = state(18, 2, 1, 8); // six tokens
    let w = uniform(&mut seeded(19), &[6, 8], -1.0, 1.0);
    let mut inputs = vec![s.tokens.clone()];
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    let r = check_gradients(&inputs, 1e-5, |tape, v| {
        let bound = bound_from(&v[1..]);
        let y = l.forward(tape, &bound, v[0], &[AttentionGroup::within(0..6)])?;
        weighted_sum(tape, y, &w)
    })
    .unwrap();
    assert!(r.rel_error < 1e-4, "{r:?}");
}

fn bound_from(vars: &[Var]) -> Bound {
    Bound::from_vars(vars.to_vec())
}

#[test]
fn two_layer_backbone_gradient_check() {
    let mut store = ParamStore::new();
    let bb = Backbone::init(&mut store, &mut seeded(20), 2, 8, 2, 2).unwrap();
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let x = uniform(&mut seeded(21), &[6, 8], -1.0, 1.0);
    let w = uniform(&mut seeded(22), &[6, 8], -1.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend(ids.iter().map(|&id| store.value(id).clone()));
    let r = check_gradients(&inputs, 1e-5, |tape, v| {
        let bound = bound_from(&v[1..]);
        let y = bb.forward(tape, &bound, v[0], 1)?;
        weighted_sum(tape, y, &w)
    })
    .unwrap();
    assert!(r.rel_error < 1e-4, "{r:?}");
}

fn streams(seed: u64, n_x: usize, n_z: usize, dim: usize) -> [TokenStream; 4] {
    let mut rng = seeded(seed);
    StreamId::ALL.map(|s| TokenStream {
        tokens: uniform(&mut rng, &[if s.is_search() { n_x } else { n_z }, dim], -1.0, 1.0),
        stream: s,
    })
}

#[test]
fn template_thermal_tokens_influence_rgb_search_output() {
    let mut store = ParamStore::new();
    let bb = Backbone::init(&mut store, &mut seeded(23), 1, 8, 2, 4).unwrap();
    let s = streams(24, 4, 2, 8);
    let (x_rgb, x_t) = backbone_forward(&s, &bb, &store).unwrap();
    assert_eq!(x_rgb.shape(), &[4, 8]);
    assert_eq!(x_t.shape(), &[4, 8]);
    let mut perturbed = s.clone();
    perturbed[3].tokens.data_mut()[0] += 0.5;
    let (x_rgb2, _) = backbone_forward(&perturbed, &bb, &store).unwrap();
    assert!(x_rgb.max_abs_diff(&x_rgb2) > 0.0);
}

#[test]
fn swapping_modalities_swaps_outputs() {
    let mut store = ParamStore::new();
    let bb = Backbone::init(&mut store, &mut seeded(25), 2, 8, 2, 4).unwrap();
    let s = streams(26, 4, 2, 8);
    let swapped = [
        TokenStream { tokens: s[1].tokens.clone(), stream: StreamId::SearchRgb },
        TokenStream { tokens: s[0].tokens.clone(), stream: StreamId::SearchThermal },
        TokenStream { tokens: s[3].tokens.clone(), stream: StreamId::TemplateRgb },
        TokenStream { tokens: s[2].tokens.clone(), stream: StreamId::TemplateThermal },
    ];
    let (a_rgb, a_t) = backbone_forward(&s, &bb, &store).unwrap();
    let (b_rgb, b_t) = backbone_forward(&swapped, &bb, &store).unwrap();
    // permutation equivariance; only the summation order inside softmax differs
    assert!(a_rgb.max_abs_diff(&b_t) < 1e-12);
    assert!(a_t.max_abs_diff(&b_rgb) < 1e-12);
}

#[test]
fn zero_depth_is_rejected() {
    let mut store = ParamStore::new();
    assert!(Backbone::init(&mut store, &mut seeded(1), 0, 8, 2, 4).is_err());
}
