//! Central-difference checks for every differentiable op and for full tiny
//! model losses, all in f64.
#![allow(dead_code)]

use convctl_core::encode::{EncodedSample, TokenType};
use convctl_core::model::{forward, BoundParams, ForwardOptions, LatentNoise, ModelConfig, TransformerParams, Variant};
use convctl_core::tensor::check::{grad_check, grad_check_many};
use convctl_core::tensor::{Graph, Result, Tensor, Var};
use convctl_core::train::loss_for;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_f64_slice(shape, &data).unwrap()
}

/// Reduces an arbitrary output to a scalar through a fixed random weighting,
/// so every output coordinate contributes a distinct gradient.
fn weigh(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, g.shape(out), 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    g.sum(p)
}

type Errors = Vec<(&'static str, f64)>;

fn check_many<F>(out: &mut Errors, name: &'static str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    out.push((name, grad_check_many(f, inputs, EPS, None).unwrap()));
}

fn elementwise_and_linear_ops(out: &mut Errors) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_t(&mut rng, &[3, 4], 1.0);
    let b = rand_t(&mut rng, &[3, 4], 1.0);
    let m = rand_t(&mut rng, &[4, 5], 1.0);
    let bt = rand_t(&mut rng, &[5, 4], 1.0);
    let row = rand_t(&mut rng, &[4], 1.0);

    check_many(out, "matmul", &[a.clone(), m.clone()], |g, v| {
        let o = g.matmul(v[0], v[1])?;
        weigh(g, o, 10)
    });
    check_many(out, "matmul_bt", &[a.clone(), bt.clone()], |g, v| {
        let o = g.matmul_bt(v[0], v[1])?;
        weigh(g, o, 11)
    });
    check_many(out, "add", &[a.clone(), b.clone()], |g, v| {
        let o = g.add(v[0], v[1])?;
        weigh(g, o, 12)
    });
    check_many(out, "sub", &[a.clone(), b.clone()], |g, v| {
        let o = g.sub(v[0], v[1])?;
        weigh(g, o, 13)
    });
    check_many(out, "mul", &[a.clone(), b.clone()], |g, v| {
        let o = g.mul(v[0], v[1])?;
        weigh(g, o, 14)
    });
    check_many(out, "add_row", &[a.clone(), row.clone()], |g, v| {
        let o = g.add_row(v[0], v[1])?;
        weigh(g, o, 15)
    });
    check_many(out, "scale", std::slice::from_ref(&a), |g, v| {
        let o = g.scale(v[0], -1.7)?;
        weigh(g, o, 16)
    });
    check_many(out, "add_scalar", std::slice::from_ref(&a), |g, v| {
        let o = g.add_scalar(v[0], 0.3)?;
        weigh(g, o, 17)
    });
    check_many(out, "gelu", &[rand_t(&mut rng, &[3, 4], 3.0)], |g, v| {
        let o = g.gelu(v[0])?;
        weigh(g, o, 18)
    });
    check_many(out, "exp", std::slice::from_ref(&a), |g, v| {
        let o = g.exp(v[0])?;
        weigh(g, o, 19)
    });
    check_many(out, "sum", std::slice::from_ref(&a), |g, v| {
        let o = g.sum(v[0])?;
        g.mul(o, o)
    });
    check_many(out, "mean", std::slice::from_ref(&a), |g, v| {
        let o = g.mean(v[0])?;
        g.mul(o, o)
    });
    check_many(out, "reshape", std::slice::from_ref(&a), |g, v| {
        let o = g.reshape(v[0], &[2, 6])?;
        weigh(g, o, 20)
    });
}

fn normalization_and_softmax_ops(out: &mut Errors) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_t(&mut rng, &[4, 6], 2.0);
    for axis in 0..2 {
        check_many(out, "softmax", std::slice::from_ref(&x), |g, v| {
            let o = g.softmax(v[0], axis)?;
            weigh(g, o, 30 + axis as u64)
        });
    }
    let sq = rand_t(&mut rng, &[5, 5], 2.0);
    check_many(out, "causal_softmax", &[sq], |g, v| {
        let o = g.causal_softmax(v[0])?;
        weigh(g, o, 32)
    });
    let gain = rand_t(&mut rng, &[6], 1.5);
    let bias = rand_t(&mut rng, &[6], 1.0);
    check_many(out, "layer_norm", &[x.clone(), gain, bias], |g, v| {
        let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weigh(g, o, 33)
    });
    let logits = rand_t(&mut rng, &[4, 7], 2.0);
    check_many(out, "cross_entropy", &[logits], |g, v| {
        g.cross_entropy(v[0], &[3, 0, 6, 2], &[1.0, 0.0, 1.0, 1.0])
    });
}

fn structural_ops(out: &mut Errors) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = rand_t(&mut rng, &[6, 3], 1.0);
    check_many(out, "embedding", &[table], |g, v| {
        // Repeated ids accumulate.
        let o = g.embedding(v[0], &[1, 4, 1, 0])?;
        weigh(g, o, 40)
    });
    let a = rand_t(&mut rng, &[2, 3], 1.0);
    let b = rand_t(&mut rng, &[4, 3], 1.0);
    check_many(out, "concat_rows", &[a.clone(), b.clone()], |g, v| {
        let o = g.concat_rows(&[v[0], v[1]])?;
        weigh(g, o, 41)
    });
    let c = rand_t(&mut rng, &[2, 5], 1.0);
    check_many(out, "concat_cols", &[a.clone(), c], |g, v| {
        let o = g.concat_cols(&[v[0], v[1]])?;
        weigh(g, o, 42)
    });
    check_many(out, "slice_rows", std::slice::from_ref(&b), |g, v| {
        let o = g.slice_rows(v[0], 1, 2)?;
        weigh(g, o, 43)
    });
    check_many(out, "slice_cols", &[b], |g, v| {
        let o = g.slice_cols(v[0], 1, 2)?;
        weigh(g, o, 44)
    });
    // Single-input helper agrees with the many-input one.
    let x = rand_t(&mut rng, &[3], 1.0);
    out.push(("grad_check", grad_check(|g, v| g.mul(v, v).and_then(|o| g.sum(o)), &x, EPS).unwrap()));
}

fn tiny_sample() -> EncodedSample {
    use TokenType::*;
    let token_ids = vec![14, 3, 14, 5, 15, 1, 2, 13, 4, 6, 13, 7, 13];
    let type_ids = vec![
        RefParent, RefParent, RefReply, RefReply, Other, Other, Other, Other, Target, Target, Target, Other, Other,
    ];
    let loss_mask = type_ids.iter().map(|t| u8::from(*t == Target)).collect();
    EncodedSample {
        conversation_id: "c".into(),
        target_speaker: "B".into(),
        position_ids: (0..13).collect(),
        token_ids,
        type_ids,
        loss_mask,
        ref_len: 4,
        conv_len: 9,
    }
}

/// Worst relative error over a strided subset of every parameter tensor of
/// a tiny model, for the full training loss.
pub fn model_loss_error(variant: Variant) -> f64 {
    let cfg = ModelConfig {
        max_positions: 16,
        ..ModelConfig::new(variant, 8, 1, 2, 16)
    };
    // Larger-than-init weights so every path carries an O(1) gradient.
    let mut params = TransformerParams::<f64>::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in params.tensors.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = params.tensors.values().cloned().collect();
    let sample = tiny_sample();
    let opts = ForwardOptions {
        noise: LatentNoise::Fixed(vec![0.7, -0.4, 1.1, 0.2, -1.3, 0.5, 0.9, -0.8]),
        dropout_seed: None,
    };
    let f = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var> {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let fwd = forward(g, &bound, &cfg, &sample, &opts).expect("forward");
        Ok(loss_for(g, &fwd, 0.5)?.total)
    };
    grad_check_many(f, &inputs, EPS, Some(24)).unwrap()
}

/// Worst relative error per differentiable op.
pub fn op_errors() -> Errors {
    let mut out = Vec::new();
    elementwise_and_linear_ops(&mut out);
    normalization_and_softmax_ops(&mut out);
    structural_ops(&mut out);
    out
}
