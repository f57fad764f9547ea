//! Central finite-difference oracle for every differentiable tape op.
//!
//! Each case builds a scalar loss `Σ op(inputs) ⊙ R` for a fixed random `R`
//! and compares the tape gradient of every input against
//! `(L(x + h) − L(x − h)) / 2h`.

use calibra_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

type Build = fn(&mut Tape, &[Var], &mut ChaCha8Rng) -> Var;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Vec<usize>>,
    /// Keeps inputs this far from kinks (relu at 0, clamp bounds, pool ties).
    pub kink_margin: f64,
    pub build: Build,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if v.abs() > margin && (v.abs() - 1.0).abs() > margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Loss value with `inputs` as parameters; output weighted by `weights`.
fn evaluate(case: &OpCase, inputs: &[Tensor], weights_seed: u64) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let out = (case.build)(&mut tape, &vars, &mut rng);
    let shape = tape.value(out).shape().to_vec();
    let w = tape.constant(rand_tensor(&shape, &mut rng, 0.0));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    (tape, loss, vars)
}

/// Largest relative error over all inputs for one seed:
/// `‖g_tape − g_fd‖ / max(‖g_tape‖ + ‖g_fd‖, 1e-10)`.
pub fn max_relative_error(case: &OpCase, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> =
        case.inputs.iter().map(|s| rand_tensor(s, &mut rng, case.kink_margin)).collect();
    let weights_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xC0FFEE;
    let (tape, loss, vars) = evaluate(case, &inputs, weights_seed);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*var);
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let (tp, lp, _) = evaluate(case, &plus, weights_seed);
            let (tm, lm, _) = evaluate(case, &minus, weights_seed);
            *slot = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / (na + nn).max(1e-10));
    }
    worst
}

pub fn all_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "conv2d",
            inputs: vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]],
            kink_margin: 0.0,
            build: |t, v, _| t.conv2d(v[0], v[1], 1, 1).unwrap(),
        },
        OpCase {
            name: "conv2d_strided",
            inputs: vec![vec![1, 2, 6, 6], vec![2, 2, 3, 3]],
            kink_margin: 0.0,
            build: |t, v, _| t.conv2d(v[0], v[1], 2, 1).unwrap(),
        },
        OpCase {
            name: "channel_bias",
            inputs: vec![vec![2, 3, 2, 2], vec![3]],
            kink_margin: 0.0,
            build: |t, v, _| t.channel_bias(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "linear",
            inputs: vec![vec![3, 5], vec![4, 5], vec![4]],
            kink_margin: 0.0,
            build: |t, v, _| t.linear(v[0], v[1], v[2]).unwrap(),
        },
        OpCase {
            name: "relu",
            inputs: vec![vec![4, 6]],
            kink_margin: 1e-3,
            build: |t, v, _| t.relu(v[0]),
        },
        OpCase {
            name: "tanh",
            inputs: vec![vec![4, 6]],
            kink_margin: 0.0,
            build: |t, v, _| t.tanh(v[0]),
        },
        OpCase {
            name: "upsample2",
            inputs: vec![vec![1, 2, 3, 3]],
            kink_margin: 0.0,
            build: |t, v, _| t.upsample2(v[0]).unwrap(),
        },
        OpCase {
            name: "max_pool2",
            inputs: vec![vec![1, 2, 4, 4]],
            kink_margin: 0.0,
            build: |t, v, _| t.max_pool2(v[0]).unwrap(),
        },
        OpCase {
            name: "add",
            inputs: vec![vec![3, 4], vec![3, 4]],
            kink_margin: 0.0,
            build: |t, v, _| t.add(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "sub",
            inputs: vec![vec![3, 4], vec![3, 4]],
            kink_margin: 0.0,
            build: |t, v, _| t.sub(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "mul",
            inputs: vec![vec![3, 4], vec![3, 4]],
            kink_margin: 0.0,
            build: |t, v, _| t.mul(v[0], v[1]).unwrap(),
        },
        OpCase {
            name: "scalar_mul",
            inputs: vec![vec![3, 4]],
            kink_margin: 0.0,
            build: |t, v, _| t.scalar_mul(v[0], -0.37),
        },
        OpCase {
            name: "clamp",
            inputs: vec![vec![4, 5]],
            kink_margin: 1e-3,
            build: |t, v, _| t.clamp(v[0], -1.0, 1.0),
        },
        OpCase {
            name: "residual_clip",
            inputs: vec![vec![4, 5], vec![4, 5]],
            kink_margin: 1e-3,
            build: |t, v, _| {
                // small residual so x alone decides most clipping, some mixed
                let d = t.scalar_mul(v[1], 0.05);
                t.residual_clip(v[0], d, -1.0, 1.0).unwrap()
            },
        },
        OpCase {
            name: "reshape",
            inputs: vec![vec![2, 3, 2]],
            kink_margin: 0.0,
            build: |t, v, _| t.reshape(v[0], &[3, 4]).unwrap(),
        },
        OpCase {
            name: "gather",
            inputs: vec![vec![2, 9]],
            kink_margin: 0.0,
            build: |t, v, rng| {
                // repeated indices exercise scatter-add
                let index: Vec<usize> = (0..12).map(|_| rng.gen_range(0..18)).collect();
                t.gather(v[0], index, &[2, 6]).unwrap()
            },
        },
        OpCase {
            name: "softmax",
            inputs: vec![vec![3, 5]],
            kink_margin: 0.0,
            build: |t, v, _| t.softmax(v[0]),
        },
        OpCase {
            name: "cross_entropy",
            inputs: vec![vec![4, 5]],
            kink_margin: 0.0,
            build: |t, v, rng| {
                let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
                t.cross_entropy(v[0], &targets).unwrap()
            },
        },
        OpCase {
            name: "sum",
            inputs: vec![vec![3, 3]],
            kink_margin: 0.0,
            build: |t, v, _| t.sum(v[0]),
        },
        OpCase {
            name: "mean",
            inputs: vec![vec![3, 3]],
            kink_margin: 0.0,
            build: |t, v, _| t.mean(v[0]),
        },
        OpCase {
            name: "flatten",
            inputs: vec![vec![2, 2, 2, 2]],
            kink_margin: 0.0,
            build: |t, v, _| t.flatten(v[0]).unwrap(),
        },
    ]
}
