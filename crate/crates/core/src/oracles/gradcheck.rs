//! Central finite differences against independent f64 reference forwards.
//!
//! Each case pairs a graph construction (the implementation under test) with
//! a scalar-loop f64 reimplementation of the same function. The scalar loss is
//! `Σ out ⊙ R` for a fixed random projection `R`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Tensor, Var};
use crate::Result;

type Build = Box<dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>>;
type Reference = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
    reference: Reference,
}

/// Denominator floor for the relative error, so near-zero gradients are
/// compared on an absolute 1e-6 scale.
pub const REL_FLOOR: f64 = 1e-2;
pub const FD_STEP: f64 = 1e-3;

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(2..=8)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mut v: f32 = rng.random_range(-1.5..1.5);
            if away_from_zero && v.abs() < 0.05 {
                v = if v < 0.0 { v - 0.1 } else { v + 0.1 };
            }
            v
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Rows with at least `min_var` spread; layer norm is too curved near
/// zero variance for a 1e-3 difference step.
fn spread_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, min_var: f32) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        loop {
            let row: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mean = row.iter().sum::<f32>() / cols as f32;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / cols as f32;
            if var >= min_var {
                data.extend(row);
                break;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn scaled(mut t: Tensor, factor: f32) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= factor);
    t
}

fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn ln_ref(x: &[f64], g: &[f64], b: &[f64], d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            out[r * d + c] = g[c] * (row[c] - mean) / (var + eps).sqrt() + b[c];
        }
    }
    out
}

fn softmax_ref(x: &[f64], cols: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, row) in x.chunks(cols).enumerate() {
        let vis = if causal { (r + 1).min(cols) } else { cols };
        let z: f64 = row[..vis].iter().map(|v| v.exp()).sum();
        for c in 0..vis {
            out[r * cols + c] = row[c].exp() / z;
        }
    }
    out
}

fn gelu_ref(v: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh())
}

fn ce_ref(logits: &[f64], vocab: usize, targets: &[Option<u32>], normalizer: f64) -> f64 {
    let mut total = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let row = &logits[r * vocab..(r + 1) * vocab];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total -= row[*t as usize] - z.ln();
    }
    total / normalizer
}

/// One randomized case per differentiable op, plus two composites.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let (m, k, n) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "matmul",
        inputs: vec![rand_tensor(&mut rng, &[m, k], false), rand_tensor(&mut rng, &[k, n], false)],
        build: Box::new(|g, v| g.matmul(v[0], v[1])),
        reference: Box::new(move |x| mm(&x[0], &x[1], m, k, n)),
    });

    let (m, k, n) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "matmul_t",
        inputs: vec![rand_tensor(&mut rng, &[m, k], false), rand_tensor(&mut rng, &[n, k], false)],
        build: Box::new(|g, v| g.matmul_t(v[0], v[1])),
        reference: Box::new(move |x| mm(&x[0], &transpose(&x[1], n, k), m, k, n)),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "add",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false), rand_tensor(&mut rng, &[r, c], false)],
        build: Box::new(|g, v| g.add(v[0], v[1])),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "add_bias",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false), rand_tensor(&mut rng, &[c], false)],
        build: Box::new(|g, v| g.add_bias(v[0], v[1])),
        reference: Box::new(move |x| {
            x[0].iter().enumerate().map(|(i, a)| a + x[1][i % c]).collect()
        }),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "mul",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false), rand_tensor(&mut rng, &[r, c], false)],
        build: Box::new(|g, v| g.mul(v[0], v[1])),
        reference: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    let factor: f32 = rng.random_range(-2.0..2.0);
    cases.push(OpCase {
        name: "scale",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false)],
        build: Box::new(move |g, v| g.scale(v[0], factor)),
        reference: Box::new(move |x| x[0].iter().map(|a| a * factor as f64).collect()),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "relu",
        inputs: vec![rand_tensor(&mut rng, &[r, c], true)],
        build: Box::new(|g, v| g.relu(v[0])),
        reference: Box::new(|x| x[0].iter().map(|&a| a.max(0.0)).collect()),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "gelu",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false)],
        build: Box::new(|g, v| g.gelu(v[0])),
        reference: Box::new(|x| x[0].iter().map(|&a| gelu_ref(a)).collect()),
    });

    let (r, d) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "layer_norm",
        inputs: vec![
            spread_rows(&mut rng, r, d, 0.25),
            rand_tensor(&mut rng, &[d], false),
            rand_tensor(&mut rng, &[d], false),
        ],
        build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        reference: Box::new(move |x| ln_ref(&x[0], &x[1], &x[2], d, 1e-5)),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "softmax_rows",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false)],
        build: Box::new(|g, v| g.softmax_rows(v[0])),
        reference: Box::new(move |x| softmax_ref(&x[0], c, false)),
    });

    let s = dims(&mut rng);
    cases.push(OpCase {
        name: "causal_softmax",
        inputs: vec![rand_tensor(&mut rng, &[s, s], false)],
        build: Box::new(|g, v| g.causal_softmax(v[0])),
        reference: Box::new(move |x| softmax_ref(&x[0], s, true)),
    });

    let (vocab, d, len) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
    let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
    let ids_ref = ids.clone();
    cases.push(OpCase {
        name: "embedding",
        inputs: vec![rand_tensor(&mut rng, &[vocab, d], false)],
        build: Box::new(move |g, v| g.embedding(v[0], &ids)),
        reference: Box::new(move |x| {
            ids_ref
                .iter()
                .flat_map(|&id| x[0][id as usize * d..(id as usize + 1) * d].to_vec())
                .collect()
        }),
    });

    let (rows, vocab) = (dims(&mut rng), dims(&mut rng));
    let targets: Vec<Option<u32>> = (0..rows)
        .map(|i| (i % 3 != 1).then(|| rng.random_range(0..vocab as u32)))
        .collect();
    let normalizer = rows as f32 + 0.5;
    let targets_ref = targets.clone();
    cases.push(OpCase {
        name: "cross_entropy",
        inputs: vec![rand_tensor(&mut rng, &[rows, vocab], false)],
        build: Box::new(move |g, v| g.cross_entropy_masked(v[0], &targets, normalizer)),
        reference: Box::new(move |x| vec![ce_ref(&x[0], vocab, &targets_ref, normalizer as f64)]),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng).max(3));
    let start = rng.random_range(0..c - 1);
    let width = rng.random_range(1..=c - start);
    cases.push(OpCase {
        name: "slice_cols",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false)],
        build: Box::new(move |g, v| g.slice_cols(v[0], start, width)),
        reference: Box::new(move |x| {
            (0..r)
                .flat_map(|i| x[0][i * c + start..i * c + start + width].to_vec())
                .collect()
        }),
    });

    let (r, c1, c2) = (dims(&mut rng), dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "concat_cols",
        inputs: vec![rand_tensor(&mut rng, &[r, c1], false), rand_tensor(&mut rng, &[r, c2], false)],
        build: Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        reference: Box::new(move |x| {
            (0..r)
                .flat_map(|i| {
                    let mut row = x[0][i * c1..(i + 1) * c1].to_vec();
                    row.extend_from_slice(&x[1][i * c2..(i + 1) * c2]);
                    row
                })
                .collect()
        }),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "mean_rows",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false)],
        build: Box::new(|g, v| g.mean_rows(v[0])),
        reference: Box::new(move |x| {
            (0..c)
                .map(|j| (0..r).map(|i| x[0][i * c + j]).sum::<f64>() / r as f64)
                .collect()
        }),
    });

    let (r, c) = (dims(&mut rng), dims(&mut rng));
    cases.push(OpCase {
        name: "sum",
        inputs: vec![rand_tensor(&mut rng, &[r, c], false)],
        build: Box::new(|g, v| g.sum(v[0])),
        reference: Box::new(|x| vec![x[0].iter().sum()]),
    });

    cases.push(mlp_case(&mut rng));
    cases.push(attention_case(&mut rng));
    cases
}

/// Two-layer perceptron with a cross-entropy head.
fn mlp_case(rng: &mut ChaCha8Rng) -> OpCase {
    let (n, din, hid, classes) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes as u32)).collect();
    let targets_ref: Vec<Option<u32>> = targets.iter().map(|&t| Some(t)).collect();
    OpCase {
        name: "mlp_composite",
        inputs: vec![
            rand_tensor(rng, &[n, din], false),
            rand_tensor(rng, &[din, hid], false),
            rand_tensor(rng, &[hid], false),
            rand_tensor(rng, &[hid, classes], false),
            rand_tensor(rng, &[classes], false),
        ],
        build: Box::new(move |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_bias(h, v[2])?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, v[3])?;
            let o = g.add_bias(o, v[4])?;
            g.cross_entropy(o, &targets)
        }),
        reference: Box::new(move |x| {
            let mut h = mm(&x[0], &x[1], n, din, hid);
            for (i, v) in h.iter_mut().enumerate() {
                *v = gelu_ref(*v + x[2][i % hid]);
            }
            let mut o = mm(&h, &x[3], n, hid, classes);
            for (i, v) in o.iter_mut().enumerate() {
                *v += x[4][i % classes];
            }
            vec![ce_ref(&o, classes, &targets_ref, n as f64)]
        }),
    }
}

/// Pre-norm causal self-attention head with a residual connection.
fn attention_case(rng: &mut ChaCha8Rng) -> OpCase {
    let (s, d) = (dims(rng), dims(rng));
    let scale = 1.0 / (d as f32).sqrt();
    // fan-in scaled projections, as a real initializer would produce
    let w_scale = 1.0 / (d as f32).sqrt();
    OpCase {
        name: "attention_composite",
        inputs: vec![
            spread_rows(rng, s, d, 0.25),
            rand_tensor(rng, &[d], false),
            rand_tensor(rng, &[d], false),
            scaled(rand_tensor(rng, &[d, d], false), w_scale),
            scaled(rand_tensor(rng, &[d, d], false), w_scale),
            scaled(rand_tensor(rng, &[d, d], false), w_scale),
        ],
        build: Box::new(move |g, v| {
            let a = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let q = g.matmul(a, v[3])?;
            let k = g.matmul(a, v[4])?;
            let val = g.matmul(a, v[5])?;
            let sc = g.matmul_t(q, k)?;
            let sc = g.scale(sc, scale)?;
            let p = g.causal_softmax(sc)?;
            let o = g.matmul(p, val)?;
            g.add(o, v[0])
        }),
        reference: Box::new(move |x| {
            let a = ln_ref(&x[0], &x[1], &x[2], d, 1e-5);
            let q = mm(&a, &x[3], s, d, d);
            let k = mm(&a, &x[4], s, d, d);
            let val = mm(&a, &x[5], s, d, d);
            let mut sc = mm(&q, &transpose(&k, s, d), s, d, s);
            for v in sc.iter_mut() {
                *v *= scale as f64;
            }
            let p = softmax_ref(&sc, s, true);
            let o = mm(&p, &val, s, s, d);
            o.iter().zip(&x[0]).map(|(a, b)| a + b).collect()
        }),
    }
}

/// Maximum relative error between analytic gradients and central
/// differences of the reference, over every input element.
pub fn check_case(case: &OpCase, seed: u64) -> Result<f64> {
    check_case_with_step(case, seed, FD_STEP)
}

pub fn check_case_with_step(case: &OpCase, seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut graph = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| graph.param(t)).collect();
    let out = (case.build)(&mut graph, &vars)?;
    let out_shape = graph.value(out).shape().to_vec();
    let projection = rand_tensor(&mut rng, &out_shape, false);
    let proj64: Vec<f64> = projection.data().iter().map(|&v| v as f64).collect();
    let r = graph.leaf(projection, false);
    let weighted = graph.mul(out, r)?;
    let loss = graph.sum(weighted)?;
    graph.backward(loss)?;

    let base: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();
    let eval = |xs: &[Vec<f64>]| -> f64 {
        (case.reference)(xs)
            .iter()
            .zip(&proj64)
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = graph.grad(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; base[i].len()]);
        for j in 0..base[i].len() {
            let mut plus = base.clone();
            plus[i][j] += step;
            let mut minus = base.clone();
            minus[i][j] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[j] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
