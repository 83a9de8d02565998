#![allow(dead_code)]

use idmlab::autodiff::{Tape, Tensor, Var};
use rand::Rng;
use idmlab::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Builds a scalar from input leaves on a fresh tape.
pub type Builder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor], f: &Builder) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    tape.value(out).data()[0]
}

/// Relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` of the
/// gradient of `f` against central differences, maximized over inputs.
pub fn gradient_rel_error(inputs: &[Tensor], f: &Builder) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let grads = tape.backward(out).expect("backward");

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            numeric[i] = (eval(&plus, f) - eval(&minus, f)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Dense values in ±[lo, hi] with random sign, keeping clear of 0.
pub fn away_from_zero(rng: &mut impl rand::Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// A shuffled ladder of distinct values: no ties anywhere.
pub fn distinct_values(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05).collect();
    v.shuffle(rng);
    v
}

pub fn uniform(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reduces any output to a scalar through a fixed random projection, so
/// every output element contributes a distinct weight.
pub fn project(tape: &mut Tape, out: Var, weights: &[f64]) -> Result<Var> {
    let flat = tape.reshape(out, vec![1, weights.len()])?;
    let w = tape.constant(Tensor::new(vec![1, weights.len()], weights.to_vec())?);
    tape.linear(flat, w, None)
}

/// One randomized gradient case per named layer; returns the relative error.
pub fn layer_case(layer: &str, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let t = |shape: &[usize], data: Vec<f64>| Tensor::new(shape.to_vec(), data).unwrap();
    match layer {
        "linear" => {
            let (b, i, o) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5));
            let inputs = vec![
                t(&[b, i], uniform(&mut rng, b * i)),
                t(&[o, i], uniform(&mut rng, o * i)),
                t(&[o], uniform(&mut rng, o)),
            ];
            let w = uniform(&mut rng, b * o);
            gradient_rel_error(&inputs, &|tp, v| {
                let y = tp.linear(v[0], v[1], Some(v[2]))?;
                project(tp, y, &w)
            })
        }
        "conv2d" => {
            let (b, c, f) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
            let padding = rng.random_range(0..2);
            let stride = rng.random_range(1..3);
            // odd spatial size keeps (h + 2p - 3) divisible by both strides
            let h = 2 * rng.random_range(2..4) + 1;
            let w_ = 2 * rng.random_range(2..4) + 1;
            let inputs = vec![
                t(&[b, c, h, w_], uniform(&mut rng, b * c * h * w_)),
                t(&[f, c, 3, 3], uniform(&mut rng, f * c * 9)),
                t(&[f], uniform(&mut rng, f)),
            ];
            let oh = (h + 2 * padding - 3) / stride + 1;
            let ow = (w_ + 2 * padding - 3) / stride + 1;
            let w = uniform(&mut rng, b * f * oh * ow);
            gradient_rel_error(&inputs, &|tp, v| {
                let y = tp.conv2d(v[0], v[1], Some(v[2]), padding, stride)?;
                project(tp, y, &w)
            })
        }
        "relu" => {
            let n = rng.random_range(2..20);
            let inputs = vec![t(&[1, n], away_from_zero(&mut rng, n, 0.05, 1.0))];
            let w = uniform(&mut rng, n);
            gradient_rel_error(&inputs, &|tp, v| {
                let y = tp.relu(v[0])?;
                project(tp, y, &w)
            })
        }
        "maxpool2x2" => {
            let (b, c) = (rng.random_range(1..3), rng.random_range(1..3));
            let (h, w_) = (rng.random_range(2..7), rng.random_range(2..7));
            let inputs = vec![t(&[b, c, h, w_], distinct_values(&mut rng, b * c * h * w_))];
            let w = uniform(&mut rng, b * c * (h / 2) * (w_ / 2));
            gradient_rel_error(&inputs, &|tp, v| {
                let y = tp.maxpool2x2(v[0])?;
                project(tp, y, &w)
            })
        }
        "global_max_pool" => {
            let (b, c) = (rng.random_range(1..3), rng.random_range(1..4));
            let (h, w_) = (rng.random_range(1..5), rng.random_range(1..5));
            let inputs = vec![t(&[b, c, h, w_], distinct_values(&mut rng, b * c * h * w_))];
            let w = uniform(&mut rng, b * c);
            gradient_rel_error(&inputs, &|tp, v| {
                let y = tp.global_max_pool(v[0])?;
                project(tp, y, &w)
            })
        }
        "softmax" | "log_softmax" => {
            let (b, k) = (rng.random_range(1..4), rng.random_range(2..6));
            let inputs = vec![t(&[b, k], uniform(&mut rng, b * k))];
            let w = uniform(&mut rng, b * k);
            let log = layer == "log_softmax";
            gradient_rel_error(&inputs, &|tp, v| {
                let y = if log { tp.log_softmax(v[0])? } else { tp.softmax(v[0])? };
                project(tp, y, &w)
            })
        }
        "cross_entropy_loss" => {
            let (b, k) = (rng.random_range(1..6), rng.random_range(2..6));
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let inputs = vec![t(&[b, k], uniform(&mut rng, b * k))];
            gradient_rel_error(&inputs, &|tp, v| tp.cross_entropy_loss(v[0], &labels))
        }
        "mse_loss" => {
            let n = rng.random_range(1..12);
            let inputs = vec![t(&[1, n], uniform(&mut rng, n)), t(&[1, n], uniform(&mut rng, n))];
            gradient_rel_error(&inputs, &|tp, v| tp.mse_loss(v[0], v[1]))
        }
        "concat_cols" => {
            let (b, wa, wb) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            let inputs = vec![t(&[b, wa], uniform(&mut rng, b * wa)), t(&[b, wb], uniform(&mut rng, b * wb))];
            let w = uniform(&mut rng, b * (wa + wb));
            gradient_rel_error(&inputs, &|tp, v| {
                let y = tp.concat_cols(v[0], v[1])?;
                project(tp, y, &w)
            })
        }
        "gather_rows" => {
            let (k, d) = (rng.random_range(2..6), rng.random_range(1..4));
            let idx: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..k)).collect();
            let inputs = vec![t(&[k, d], uniform(&mut rng, k * d))];
            let w = uniform(&mut rng, idx.len() * d);
            gradient_rel_error(&inputs, &|tp, v| {
                let y = tp.gather_rows(v[0], &idx)?;
                project(tp, y, &w)
            })
        }
        "add_sub_scale" => {
            let n = rng.random_range(1..8);
            let c = rng.random_range(-2.0..2.0);
            let inputs = vec![t(&[1, n], uniform(&mut rng, n)), t(&[1, n], uniform(&mut rng, n))];
            let w = uniform(&mut rng, n);
            gradient_rel_error(&inputs, &|tp, v| {
                let s = tp.add(v[0], v[1])?;
                let d = tp.sub(s, v[1])?;
                let d = tp.sub(d, v[1])?;
                let y = tp.scale(d, c)?;
                project(tp, y, &w)
            })
        }
        other => panic!("unknown layer {other}"),
    }
}

pub const LAYERS: &[&str] = &[
    "linear",
    "conv2d",
    "relu",
    "maxpool2x2",
    "global_max_pool",
    "softmax",
    "log_softmax",
    "cross_entropy_loss",
    "mse_loss",
    "concat_cols",
    "gather_rows",
    "add_sub_scale",
];
