//! Invariant suite behind the `selftest` command.

use std::time::Instant;

use rand::Rng as _;

use crate::backbone::{joint_attention, reconstruct_from_blocks, EncoderLayer, JointTokenState, SegmentLayout};
use crate::harness::train::objective;
use crate::harness::{sample_pair, CropConfig, Curriculum, Model, ModelConfig};
use crate::heads::{BnTrace, BoundingBox};
use crate::losses::{total_loss, LossWeights};
use crate::metrics::{evaluate, FrameAnnotation};
use crate::numkernel::{check_gradients, seeded, uniform, weighted_sum, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub const GRAD_TOL: f64 = 1e-4;
pub const DECOMP_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Knobs for sensitivity fixtures; the default runs the real suite.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SelftestOptions {
    /// Added to one entry of every block reconstruction before comparing.
    pub reconstruction_perturbation: f64,
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// `(name, input shapes, input range, op)` for every differentiable tape op.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), OpFn)> {
    fn w(t: &mut Tape, out: Var) -> Result<Var> {
        let shape = t.value(out).shape().to_vec();
        let weights = uniform(&mut seeded(99), &shape, -1.0, 1.0);
        weighted_sum(t, out, &weights)
    }
    let m = |r: usize, c: usize| vec![r, c];
    vec![
        ("matmul", vec![m(3, 4), m(4, 2)], (-1.0, 1.0), |t, v| { let o = t.matmul(v[0], v[1])?; w(t, o) }),
        ("matmul_nt", vec![m(3, 4), m(2, 4)], (-1.0, 1.0), |t, v| { let o = t.matmul_nt(v[0], v[1])?; w(t, o) }),
        ("add", vec![m(2, 3), m(2, 3)], (-1.0, 1.0), |t, v| { let o = t.add(v[0], v[1])?; w(t, o) }),
        ("sub", vec![m(2, 3), m(2, 3)], (-1.0, 1.0), |t, v| { let o = t.sub(v[0], v[1])?; w(t, o) }),
        ("mul", vec![m(2, 3), m(2, 3)], (-1.0, 1.0), |t, v| { let o = t.mul(v[0], v[1])?; w(t, o) }),
        ("div", vec![m(2, 3), m(2, 3)], (0.5, 2.0), |t, v| { let o = t.div(v[0], v[1])?; w(t, o) }),
        ("add_row", vec![m(3, 4), vec![4]], (-1.0, 1.0), |t, v| { let o = t.add_row(v[0], v[1])?; w(t, o) }),
        ("mul_row", vec![m(3, 4), vec![4]], (-1.0, 1.0), |t, v| { let o = t.mul_row(v[0], v[1])?; w(t, o) }),
        ("scale", vec![m(2, 3)], (-1.0, 1.0), |t, v| { let o = t.scale(v[0], -1.7)?; w(t, o) }),
        ("add_scalar", vec![m(2, 3)], (-1.0, 1.0), |t, v| { let o = t.add_scalar(v[0], 0.3)?; w(t, o) }),
        ("mean", vec![m(2, 3)], (-1.0, 1.0), |t, v| { let o = t.mul(v[0], v[0])?; t.mean(o) }),
        ("row_sum", vec![m(3, 4)], (-1.0, 1.0), |t, v| { let o = t.row_sum(v[0])?; w(t, o) }),
        ("softmax_rows", vec![m(3, 5)], (-2.0, 2.0), |t, v| { let o = t.softmax_rows(v[0])?; w(t, o) }),
        ("layer_norm", vec![m(3, 5), vec![5], vec![5]], (-1.0, 1.0), |t, v| {
            let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            w(t, o)
        }),
        ("batch_norm", vec![m(6, 3), vec![3], vec![3]], (-1.0, 1.0), |t, v| {
            let o = t.batch_norm(v[0], v[1], v[2], 1e-5)?;
            w(t, o)
        }),
        ("gelu", vec![m(3, 4)], (-2.0, 2.0), |t, v| { let o = t.gelu(v[0])?; w(t, o) }),
        ("relu", vec![m(3, 4)], (0.1, 1.0), |t, v| { let n = t.scale(v[0], -1.0)?; let c = t.concat_rows(&[v[0], n])?; let o = t.relu(c)?; w(t, o) }),
        ("sigmoid", vec![m(3, 4)], (-3.0, 3.0), |t, v| { let o = t.sigmoid(v[0])?; w(t, o) }),
        ("sigmoid_clamped", vec![m(3, 4)], (-3.0, 3.0), |t, v| { let o = t.sigmoid_clamped(v[0], 1e-4, 1.0 - 1e-4)?; w(t, o) }),
        ("log", vec![m(3, 4)], (0.5, 2.0), |t, v| { let o = t.log(v[0])?; w(t, o) }),
        ("exp", vec![m(3, 4)], (-1.0, 1.0), |t, v| { let o = t.exp(v[0])?; w(t, o) }),
        ("abs", vec![m(3, 4)], (0.2, 1.0), |t, v| { let n = t.scale(v[0], -1.0)?; let c = t.concat_cols(&[v[0], n])?; let o = t.abs(c)?; w(t, o) }),
        ("minimum_maximum", vec![m(2, 3), m(2, 3)], (-1.0, 1.0), |t, v| {
            let lo = t.minimum(v[0], v[1])?;
            let hi = t.maximum(v[0], v[1])?;
            let o = t.concat_rows(&[lo, hi])?;
            w(t, o)
        }),
        ("slice_concat", vec![m(4, 5)], (-1.0, 1.0), |t, v| {
            let a = t.slice(v[0], 1..3, 2..5)?;
            let b = t.slice_rows(v[0], 0..2)?;
            let c = t.slice_cols(b, 0..3)?;
            let o = t.concat_rows(&[a, c])?;
            w(t, o)
        }),
        ("reshape", vec![m(2, 6)], (-1.0, 1.0), |t, v| { let o = t.reshape(v[0], &[3, 4])?; w(t, o) }),
        ("gather_rows", vec![m(4, 3)], (-1.0, 1.0), |t, v| {
            let o = t.gather_rows(v[0], vec![Some(0), None, Some(3), Some(0), Some(2), None], 2)?;
            w(t, o)
        }),
        ("focal_loss", vec![m(2, 4)], (-1.0, 1.0), |t, v| {
            let p = t.sigmoid_clamped(v[0], 1e-4, 1.0 - 1e-4)?;
            let target = t.constant(Tensor::new(&[2, 4], vec![1.0, 0.5, 0.1, 0.0, 0.2, 1.0, 0.7, 0.3]).expect("shape"));
            let o = t.focal_loss(p, target)?;
            w(t, o)
        }),
    ]
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
}

pub fn op_gradients() -> Result<(bool, String)> {
    let mut worst = ("", 0.0f64);
    for (i, (name, shapes, (lo, hi), op)) in op_cases().into_iter().enumerate() {
        let mut rng = seeded(1000 + i as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut rng, s, lo, hi)).collect();
        let r = check_gradients(&inputs, 1e-6, op)?;
        if r.rel_error > worst.1 || worst.0.is_empty() {
            worst = (name, r.rel_error);
        }
    }
    Ok((worst.1 < GRAD_TOL, format!("worst rel error {:.2e} ({})", worst.1, worst.0)))
}

/// The tiny two-layer model used by the full gradient check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        patch: 4,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        template_size: 8,
        search_size: 16,
        head_width: 8,
        ..ModelConfig::default()
    }
}

/// Central differences of the full training objective against reverse mode,
/// over every trainable scalar of a two-layer model.
pub fn model_gradients(config: ModelConfig, seed: u64) -> Result<(bool, String)> {
    let model = Model::new(config.clone(), seed)?;
    let crop = CropConfig { template_size: config.template_size, search_size: config.search_size, ..CropConfig::default() };
    let mut rng = seeded(seed ^ 0x9c);
    let batch = (0..2).map(|_| sample_pair(&mut rng, &Curriculum::default(), &crop)).collect::<Result<Vec<_>>>()?;
    let inputs = model.store.trainable_values();
    let r = check_gradients(&inputs, 1e-6, |tape, leaves| {
        let params = model.store.bind_leaves(tape, leaves)?;
        let mut trace = BnTrace::default();
        Ok(objective(&model, tape, &params, &batch, LossWeights::default(), &mut trace)?.0)
    })?;
    Ok((r.rel_error < GRAD_TOL, format!("rel error {:.2e} over {} scalars", r.rel_error, r.entries)))
}

/// Max reconstruction error over `configs` random layouts and layers.
pub fn decomposition_error(configs: usize, perturbation: f64) -> Result<f64> {
    let mut rng = seeded(2024);
    let mut worst = 0.0f64;
    for k in 0..configs {
        let heads = rng.gen_range(1..=4);
        let dim = heads * rng.gen_range(2..=6);
        let n_z = rng.gen_range(1..=6);
        let n_x = rng.gen_range(1..=3) * n_z + rng.gen_range(0..3);
        let mut store = ParamStore::new();
        let mut lrng = seeded(k as u64);
        let layer = EncoderLayer::init(&mut store, &mut lrng, "l", dim, heads, 2)?;
        for (id, p) in store.clone().iter() {
            *store.value_mut(id) = uniform(&mut lrng, p.value.shape(), -0.6, 0.6);
        }
        let layout = SegmentLayout::new(n_x, n_z);
        let state = JointTokenState::new(uniform(&mut lrng, &[layout.total(), dim], -1.0, 1.0), layout)?;
        let joint = joint_attention(&state, &layer, &store)?;
        let mut rebuilt = reconstruct_from_blocks(&joint.decomposition, &joint.values)?;
        rebuilt.data_mut()[0] += perturbation;
        worst = worst.max(rebuilt.max_abs_diff(&joint.output));
    }
    Ok(worst)
}

fn decomposition(perturbation: f64) -> Result<(bool, String)> {
    let e = decomposition_error(20, perturbation)?;
    Ok((e < DECOMP_TOL, format!("max abs diff {e:.2e} over 20 configs")))
}

/// Hand fixtures whose metric values are known in closed form.
fn metric_oracles() -> Result<(bool, String)> {
    let gt = BoundingBox::from_xywh(0.0, 0.0, 10.0, 10.0);
    let ann = vec![FrameAnnotation::aligned(gt); 3];
    let shifted = |dx: f64| BoundingBox::from_xywh(dx, 0.0, 10.0, 10.0);
    let pr = evaluate(&[shifted(0.0), shifted(5.0), shifted(25.0)], &ann, 20.0)?.pr;
    let sr = evaluate(&[gt, gt, gt], &ann, 20.0)?.sr;
    // quarter overlap: 25 / (100 + 100 - 25)
    let quarter = BoundingBox::from_xywh(5.0, 5.0, 10.0, 10.0);
    let iou = crate::metrics::iou(&gt, &quarter)?;
    let ok = (pr - 2.0 / 3.0).abs() < 1e-15 && (sr - 20.0 / 21.0).abs() < 1e-15 && (iou - 1.0 / 7.0).abs() < 1e-15;
    Ok((ok, format!("PR {pr:.6} SR {sr:.6} IoU {iou:.6}")))
}

fn softmax_properties() -> Result<(bool, String)> {
    let x = uniform(&mut seeded(5), &[4, 7], -30.0, 30.0);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let shifted = tape.add_scalar(a, 123.0)?;
    let p = tape.softmax_rows(a)?;
    let q = tape.softmax_rows(shifted)?;
    let (p, q) = (tape.value(p).clone(), tape.value(q).clone());
    let sums = (0..4).map(|r| (p.row(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let shift = p.max_abs_diff(&q);
    let positive = p.data().iter().all(|&v| v >= 0.0);
    Ok((sums < 1e-12 && shift < 1e-12 && positive, format!("row-sum err {sums:.1e}, shift err {shift:.1e}")))
}

fn loss_contracts() -> Result<(bool, String)> {
    let mut rng = seeded(11);
    let mut ok = true;
    for _ in 0..100 {
        let (lr, lt) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
        let (rr, rt) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
        let (total, a, b) = total_loss(lr, lt, rr, rt);
        let (shifted, ..) = total_loss(lr, lt, rr + 3.0, rt + 3.0);
        ok &= (a + b - 1.0).abs() <= 1e-15;
        ok &= total >= lr.min(lt) - 1e-12 && total <= lr.max(lt) + 1e-12;
        ok &= (total - shifted).abs() < 1e-12;
        let h = 1e-6;
        let d = (total_loss(lr, lt, rr + h, rt).0 - total_loss(lr, lt, rr - h, rt).0) / (2.0 * h);
        if (lr - lt).abs() > 1e-3 {
            ok &= d.signum() == (lr - lt).signum();
        }
    }
    Ok((ok, "100 random draws".into()))
}

pub fn run(opts: SelftestOptions) -> Vec<CheckResult> {
    vec![
        timed("op_gradients", op_gradients),
        timed("model_gradients", || model_gradients(tiny_config(), 3)),
        timed("attention_decomposition", || decomposition(opts.reconstruction_perturbation)),
        timed("metric_oracles", metric_oracles),
        timed("softmax_properties", softmax_properties),
        timed("loss_contracts", loss_contracts),
    ]
}

pub fn table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<26} {:<6} {:>8}  {}\n", "check", "status", "seconds", "detail");
    for r in results {
        s.push_str(&format!(
            "{:<26} {:<6} {:>8.2}  {}\n",
            r.name,
            if r.passed { "pass" } else { "FAIL" },
            r.seconds,
            r.detail
        ));
    }
    s
}
