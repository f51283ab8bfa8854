//! Central finite-difference oracle for the differentiation primitives.
//!
//! Each case builds a graph from gradient-carrying inputs, reduces the operator output
//! to a scalar with a fixed random weighting, and compares the reverse-mode
//! input gradients with `(f(x+ε) − f(x−ε)) / 2ε` evaluated in `f64`.

#![allow(dead_code, clippy::vec_init_then_push, clippy::needless_range_loop)]

use hgm_core::diffcore::{AttnShape, Graph, Var};
use hgm_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<Build>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let mag = rng.random_range(0.05f32..1.0);
            if rng.random_bool(0.5) { mag } else { -mag }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Columns whose group entries are pairwise separated, so the max is stable
/// under ±ε perturbations.
fn separated_groups(rng: &mut ChaCha8Rng, groups: usize, per: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0f32; groups * per * cols];
    for g in 0..groups {
        for c in 0..cols {
            let base = rng.random_range(-1.0f32..1.0);
            let mut order: Vec<usize> = (0..per).collect();
            for i in (1..per).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for (rank, r) in order.into_iter().enumerate() {
                data[(g * per + r) * cols + c] = base + 0.05 * rank as f32;
            }
        }
    }
    Tensor::new(vec![groups * per, cols], data).unwrap()
}

pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Case> = Vec::new();

    out.push(Case {
        name: "matmul",
        inputs: vec![uniform(&mut rng, &[4, 3], -1.0, 1.0), uniform(&mut rng, &[3, 5], -1.0, 1.0)],
        build: Box::new(|g, v| g.matmul(v[0], v[1])),
    });
    out.push(Case {
        name: "add_bias",
        inputs: vec![uniform(&mut rng, &[2, 3, 4], -1.0, 1.0), uniform(&mut rng, &[4], -1.0, 1.0)],
        build: Box::new(|g, v| g.add_bias(v[0], v[1])),
    });
    out.push(Case {
        name: "affine",
        inputs: vec![
            uniform(&mut rng, &[5, 3], -1.0, 1.0),
            uniform(&mut rng, &[3, 7], -1.0, 1.0),
            uniform(&mut rng, &[7], -1.0, 1.0),
        ],
        build: Box::new(|g, v| g.affine(v[0], v[1], v[2])),
    });
    out.push(Case {
        name: "add",
        inputs: vec![uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| g.add(v[0], v[1])),
    });
    out.push(Case {
        name: "mul",
        inputs: vec![uniform(&mut rng, &[3, 4], -1.0, 1.0), uniform(&mut rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| g.mul(v[0], v[1])),
    });
    let s = rng.random_range(-2.0f32..2.0);
    out.push(Case {
        name: "scale",
        inputs: vec![uniform(&mut rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(move |g, v| g.scale(v[0], s)),
    });
    out.push(Case {
        name: "relu",
        inputs: vec![away_from_zero(&mut rng, &[4, 5])],
        build: Box::new(|g, v| g.relu(v[0])),
    });
    out.push(Case {
        name: "silu",
        inputs: vec![uniform(&mut rng, &[4, 5], -3.0, 3.0)],
        build: Box::new(|g, v| g.silu(v[0])),
    });
    out.push(Case {
        name: "softmax",
        inputs: vec![uniform(&mut rng, &[3, 6], -2.0, 2.0)],
        build: Box::new(|g, v| g.softmax(v[0])),
    });
    out.push(Case {
        name: "layer_norm",
        inputs: vec![
            uniform(&mut rng, &[4, 6], -2.0, 2.0),
            uniform(&mut rng, &[6], 0.5, 1.5),
            uniform(&mut rng, &[6], -0.5, 0.5),
        ],
        build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
    });
    let shape = AttnShape { batch: 2, queries: 3, keys: 4, heads: 2 };
    out.push(Case {
        name: "attention",
        inputs: vec![
            uniform(&mut rng, &[6, 8], -1.0, 1.0),
            uniform(&mut rng, &[8, 8], -1.0, 1.0),
            uniform(&mut rng, &[8, 8], -1.0, 1.0),
        ],
        build: Box::new(move |g, v| g.attention(v[0], v[1], v[2], shape)),
    });
    out.push(Case {
        name: "concat_cols",
        inputs: vec![uniform(&mut rng, &[3, 2], -1.0, 1.0), uniform(&mut rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
    });
    out.push(Case {
        name: "segment_max",
        inputs: vec![separated_groups(&mut rng, 3, 4, 5)],
        build: Box::new(|g, v| g.segment_max(v[0], 3)),
    });
    out.push(Case {
        name: "segment_mean",
        inputs: vec![uniform(&mut rng, &[6, 5], -1.0, 1.0)],
        build: Box::new(|g, v| g.segment_mean(v[0], 2)),
    });
    out.push(Case {
        name: "reshape",
        inputs: vec![uniform(&mut rng, &[6, 4], -1.0, 1.0)],
        build: Box::new(|g, v| g.reshape(v[0], &[3, 8])),
    });
    let target = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    out.push(Case {
        name: "mse",
        inputs: vec![uniform(&mut rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(move |g, v| g.mse(v[0], &target)),
    });
    out.push(Case {
        name: "sum",
        inputs: vec![uniform(&mut rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| g.sum(v[0])),
    });
    out
}

fn weights_for(seed: u64, len: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn forward(case: &Case, inputs: &[Tensor]) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    g.value(out).clone()
}

fn weighted(out: &Tensor, w: &[f32]) -> f64 {
    out.data().iter().zip(w).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Worst norm-wise relative error over the case's inputs.
pub fn relative_error(case: &Case, seed: u64) -> f64 {
    let out0 = forward(case, &case.inputs);
    let w = weights_for(seed, out0.len());
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let wt = g.constant(Tensor::new(out0.shape().to_vec(), w.clone()).unwrap()).unwrap();
    let prod = g.mul(out, wt).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.gradients(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[i]) {
            Some(t) => t.data().iter().map(|v| *v as f64).collect(),
            None => vec![0.0; input.len()],
        };
        let mut numeric = vec![0.0f64; input.len()];
        for j in 0..input.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += EPS;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= EPS;
            let fp = weighted(&forward(case, &plus), &w);
            let fm = weighted(&forward(case, &minus), &w);
            // Step actually taken in f32, not the nominal ε.
            let h = (plus[i].data()[j] as f64) - (minus[i].data()[j] as f64);
            numeric[j] = (fp - fm) / h;
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn).max(1e-6);
        worst = worst.max(diff / denom);
    }
    worst
}
