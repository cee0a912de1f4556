//! Central finite-difference oracle for taped ops.
//!
//! The op under test is rebuilt from scratch for every perturbed input, so
//! the numeric gradient never touches the reverse sweep.

use poisonlink::numerics::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Projects a non-scalar output to a scalar with fixed random weights.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    if tape.value(out).len() == 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..tape.value(out).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let wv = tape
        .constant_from(tape.shape(out).to_vec(), w)
        .expect("weights match output");
    let prod = tape.mul(out, wv).expect("same shape");
    tape.sum(prod)
}

fn evaluate<F>(build: &F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = build(&mut tape, &vars);
    let s = project(&mut tape, out, seed);
    tape.scalar(s)
}

/// Worst relative error over all differentiable inputs, measured as
/// `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖, 1e-8)`.
pub fn max_rel_error<F>(build: F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars);
    let s = project(&mut tape, out, seed);
    let grads = tape.backward(s).expect("scalar");

    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let ad: Vec<f64> = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut fd = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            fd[j] = (evaluate(&build, &plus, seed) - evaluate(&build, &minus, seed))
                / (2.0 * FD_STEP);
        }
        let diff: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = ad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nf).max(1e-8));
    }
    worst
}

/// Random tensor whose entries stay at least `gap` away from zero, so
/// kinked ops (ReLU) are differentiable at every sample point.
pub fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng, gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

pub fn random_probs(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], data).unwrap().with_grad()
}

/// One named op with a generator of random cases.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng, u64) -> f64,
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            run: |rng, seed| {
                let (m, k, n) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
                let a = random_tensor(vec![m, k], rng, 0.0);
                let b = random_tensor(vec![k, n], rng, 0.0);
                max_rel_error(|t, v| t.matmul(v[0], v[1]).unwrap(), &[a, b], seed)
            },
        },
        OpCase {
            name: "add",
            run: |rng, seed| {
                let s = vec![dims(rng, 1, 3), dims(rng, 1, 4)];
                let a = random_tensor(s.clone(), rng, 0.0);
                let b = random_tensor(s, rng, 0.0);
                max_rel_error(|t, v| t.add(v[0], v[1]).unwrap(), &[a, b], seed)
            },
        },
        OpCase {
            name: "add_bias",
            run: |rng, seed| {
                let (r, c) = (dims(rng, 1, 4), dims(rng, 1, 5));
                let a = random_tensor(vec![r, c], rng, 0.0);
                let b = random_tensor(vec![c], rng, 0.0);
                max_rel_error(|t, v| t.add_bias(v[0], v[1]).unwrap(), &[a, b], seed)
            },
        },
        OpCase {
            name: "mul",
            run: |rng, seed| {
                let s = vec![dims(rng, 1, 3), dims(rng, 1, 4)];
                let a = random_tensor(s.clone(), rng, 0.0);
                let b = random_tensor(s, rng, 0.0);
                max_rel_error(|t, v| t.mul(v[0], v[1]).unwrap(), &[a, b], seed)
            },
        },
        OpCase {
            name: "scale",
            run: |rng, seed| {
                let a = random_tensor(vec![dims(rng, 1, 6)], rng, 0.0);
                let f = rng.gen_range(-3.0..3.0);
                max_rel_error(move |t, v| t.scale(v[0], f), &[a], seed)
            },
        },
        OpCase {
            name: "relu",
            run: |rng, seed| {
                let a = random_tensor(vec![dims(rng, 1, 4), dims(rng, 1, 4)], rng, 0.01);
                max_rel_error(|t, v| t.relu(v[0]), &[a], seed)
            },
        },
        OpCase {
            name: "tanh",
            run: |rng, seed| {
                let a = random_tensor(vec![dims(rng, 1, 4), dims(rng, 1, 4)], rng, 0.0);
                max_rel_error(|t, v| t.tanh(v[0]), &[a], seed)
            },
        },
        OpCase {
            name: "softmax",
            run: |rng, seed| {
                let shape = vec![dims(rng, 1, 3), dims(rng, 2, 4), dims(rng, 1, 3)];
                let axis = rng.gen_range(0..3);
                let a = random_tensor(shape, rng, 0.0);
                max_rel_error(move |t, v| t.softmax(v[0], axis).unwrap(), &[a], seed)
            },
        },
        OpCase {
            name: "cross_entropy",
            run: |rng, seed| {
                let (n, c) = (dims(rng, 1, 8), 4);
                let p = random_probs(n, c, rng);
                let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
                max_rel_error(move |t, v| t.cross_entropy(v[0], &labels).unwrap(), &[p], seed)
            },
        },
        OpCase {
            name: "softmax_cross_entropy",
            run: |rng, seed| {
                let (n, c) = (dims(rng, 1, 8), dims(rng, 2, 6));
                let z = random_tensor(vec![n, c], rng, 0.0);
                let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
                max_rel_error(
                    move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap(),
                    &[z],
                    seed,
                )
            },
        },
        OpCase {
            name: "concat_cols",
            run: |rng, seed| {
                let r = dims(rng, 1, 4);
                let a = random_tensor(vec![r, dims(rng, 1, 3)], rng, 0.0);
                let b = random_tensor(vec![r, dims(rng, 1, 3)], rng, 0.0);
                let c = random_tensor(vec![r, dims(rng, 1, 3)], rng, 0.0);
                max_rel_error(
                    |t, v| t.concat_cols(&[v[0], v[1], v[2]]).unwrap(),
                    &[a, b, c],
                    seed,
                )
            },
        },
        OpCase {
            name: "reshape",
            run: |rng, seed| {
                let (r, c) = (dims(rng, 1, 4), dims(rng, 1, 4));
                let a = random_tensor(vec![r, c], rng, 0.0);
                max_rel_error(move |t, v| t.reshape(v[0], vec![c, r]).unwrap(), &[a], seed)
            },
        },
        OpCase {
            name: "sum",
            run: |rng, seed| {
                let a = random_tensor(vec![dims(rng, 1, 4), dims(rng, 1, 4)], rng, 0.0);
                max_rel_error(
                    |t, v| {
                        let sq = t.mul(v[0], v[0]).unwrap();
                        t.sum(sq)
                    },
                    &[a],
                    seed,
                )
            },
        },
        OpCase {
            name: "mean",
            run: |rng, seed| {
                let a = random_tensor(vec![dims(rng, 1, 4), dims(rng, 1, 4)], rng, 0.0);
                max_rel_error(
                    |t, v| {
                        let th = t.tanh(v[0]);
                        t.mean(th)
                    },
                    &[a],
                    seed,
                )
            },
        },
        OpCase {
            name: "conv3x3_small_image",
            run: |rng, seed| {
                let (b, h, w) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 4));
                let (cin, cout) = (dims(rng, 1, 3), dims(rng, 1, 3));
                let x = random_tensor(vec![b, h, w, cin], rng, 0.0);
                let k = random_tensor(vec![9 * cin, cout], rng, 0.0);
                max_rel_error(|t, v| t.conv3x3(v[0], v[1]).unwrap(), &[x, k], seed)
            },
        },
        // more than 16 pixels takes the patch-matrix path
        OpCase {
            name: "conv3x3_large_image",
            run: |rng, seed| {
                let (b, h, w) = (dims(rng, 1, 2), dims(rng, 4, 5), dims(rng, 5, 6));
                let (cin, cout) = (dims(rng, 1, 2), dims(rng, 1, 2));
                let x = random_tensor(vec![b, h, w, cin], rng, 0.0);
                let k = random_tensor(vec![9 * cin, cout], rng, 0.0);
                max_rel_error(|t, v| t.conv3x3(v[0], v[1]).unwrap(), &[x, k], seed)
            },
        },
        OpCase {
            name: "batch_norm_train",
            run: |rng, seed| {
                let (r, c) = (dims(rng, 3, 6), dims(rng, 1, 3));
                let x = random_tensor(vec![r, c], rng, 0.0);
                let g = random_tensor(vec![c], rng, 0.2);
                let b = random_tensor(vec![c], rng, 0.0);
                max_rel_error(
                    |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0,
                    &[x, g, b],
                    seed,
                )
            },
        },
        OpCase {
            name: "batch_norm_eval",
            run: |rng, seed| {
                let (r, c) = (dims(rng, 1, 5), dims(rng, 1, 3));
                let x = random_tensor(vec![r, c], rng, 0.0);
                let g = random_tensor(vec![c], rng, 0.2);
                let b = random_tensor(vec![c], rng, 0.0);
                let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
                let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
                max_rel_error(
                    move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap(),
                    &[x, g, b],
                    seed,
                )
            },
        },
        OpCase {
            name: "global_avg_pool",
            run: |rng, seed| {
                let shape = vec![dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
                let x = random_tensor(shape, rng, 0.0);
                max_rel_error(|t, v| t.global_avg_pool(v[0]).unwrap(), &[x], seed)
            },
        },
    ]
}
