#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidlang_core::autodiff::grad_check;
use vidlang_core::{Graph, Result, Tensor, Var};

pub const H: f64 = 1e-5;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contract an arbitrary output with fixed random weights so every output
/// coordinate contributes a distinct amount.
pub fn contract(g: &mut Graph<'_, f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(random(&shape, 999));
    let p = g.mul(out, w)?;
    g.sum(p)
}

type Check = (&'static str, Box<dyn Fn() -> Result<f64>>);

fn unary(
    shape: &'static [usize],
    seed: u64,
    f: impl for<'a> Fn(&mut Graph<'a, f64>, Var) -> Result<Var> + 'static,
) -> Box<dyn Fn() -> Result<f64>> {
    Box::new(move || {
        grad_check(
            |g, x| {
                let y = f(g, x)?;
                contract(g, y)
            },
            &random(shape, seed),
            H,
        )
    })
}

/// Finite-difference checks of every primitive, each with respect to each of
/// its differentiable inputs.
pub fn primitive_checks() -> Vec<Check> {
    vec![
        ("matmul/lhs", unary(&[3, 4], 1, |g, x| {
            let b = g.constant(random(&[4, 2], 2));
            g.matmul(x, b)
        })),
        ("matmul/rhs", unary(&[4, 2], 3, |g, x| {
            let a = g.constant(random(&[3, 4], 4));
            g.matmul(a, x)
        })),
        ("add", unary(&[2, 3], 5, |g, x| {
            let b = g.constant(random(&[2, 3], 6));
            g.add(x, b)
        })),
        ("add/self", unary(&[2, 3], 7, |g, x| g.add(x, x))),
        ("add_bias/bias", unary(&[1, 3], 8, |g, b| {
            let x = g.constant(random(&[4, 3], 9));
            g.add_bias(x, b)
        })),
        ("elementwise_mul", unary(&[2, 3], 10, |g, x| {
            let b = g.constant(random(&[2, 3], 11));
            g.mul(x, b)
        })),
        ("elementwise_mul/square", unary(&[2, 3], 12, |g, x| g.mul(x, x))),
        ("concat_rows", unary(&[2, 3], 13, |g, x| {
            let b = g.constant(random(&[1, 3], 14));
            let y = g.concat_rows(&[b, x, x])?;
            g.tanh(y)
        })),
        ("concat_cols", unary(&[2, 3], 15, |g, x| {
            let b = g.constant(random(&[2, 1], 16));
            let y = g.concat_cols(&[x, b, x])?;
            g.tanh(y)
        })),
        ("gather_rows", unary(&[3, 2], 17, |g, x| g.gather_rows(x, &[2, 0, 2, 1]))),
        ("slice_rows", unary(&[4, 2], 18, |g, x| g.slice_rows(x, 1, 3))),
        ("slice_cols", unary(&[2, 4], 19, |g, x| g.slice_cols(x, 1, 3))),
        ("mean_over_axis/0", unary(&[3, 4], 20, |g, x| g.mean_axis(x, 0))),
        ("mean_over_axis/1", unary(&[3, 4], 21, |g, x| g.mean_axis(x, 1))),
        ("sum", unary(&[3, 2], 22, |g, x| {
            let s = g.sum(x)?;
            g.mul(s, s)
        })),
        ("softmax/rows", unary(&[3, 4], 23, |g, x| g.softmax(x, 1, 0.7))),
        ("softmax/cols", unary(&[4, 2], 24, |g, x| g.softmax(x, 0, 1.3))),
        ("tanh", unary(&[2, 3], 25, |g, x| g.tanh(x))),
        ("gelu", unary(&[2, 5], 26, |g, x| {
            let y = g.scale(x, 3.0)?;
            g.gelu(y)
        })),
        ("exp", unary(&[2, 3], 27, |g, x| g.exp(x))),
        ("layer_norm/x", unary(&[3, 5], 28, |g, x| {
            let gain = g.constant(random(&[1, 5], 29));
            let bias = g.constant(random(&[1, 5], 30));
            g.layer_norm(x, gain, bias)
        })),
        ("layer_norm/gain", unary(&[1, 5], 31, |g, gain| {
            let x = g.constant(random(&[3, 5], 32));
            let bias = g.constant(random(&[1, 5], 33));
            g.layer_norm(x, gain, bias)
        })),
        ("layer_norm/bias", unary(&[1, 5], 34, |g, bias| {
            let x = g.constant(random(&[3, 5], 35));
            let gain = g.constant(random(&[1, 5], 36));
            g.layer_norm(x, gain, bias)
        })),
        ("l2_normalize_rows", unary(&[3, 4], 37, |g, x| g.l2_normalize_rows(x))),
        ("embedding_lookup", unary(&[5, 3], 38, |g, t| g.embedding(t, &[4, 0, 4, 2]))),
        ("transpose", unary(&[2, 3], 39, |g, x| {
            let y = g.transpose(x)?;
            let b = g.constant(random(&[2, 2], 40));
            g.matmul(y, b)
        })),
        ("scale_by_scalar", unary(&[2, 3], 41, |g, x| g.scale(x, -2.5))),
        ("add_scalar", unary(&[2, 3], 42, |g, x| {
            let y = g.add_scalar(x, 0.3)?;
            g.mul(y, y)
        })),
        ("mul_scalar/x", unary(&[2, 3], 43, |g, x| {
            let s = g.constant(random(&[1, 1], 44));
            g.mul_scalar(x, s)
        })),
        ("mul_scalar/s", unary(&[1, 1], 45, |g, s| {
            let x = g.constant(random(&[2, 3], 46));
            g.mul_scalar(x, s)
        })),
        ("mul_rows/x", unary(&[3, 2], 47, |g, x| {
            let w = g.constant(random(&[3, 1], 48));
            g.mul_rows(x, w)
        })),
        ("mul_rows/w", unary(&[3, 1], 49, |g, w| {
            let x = g.constant(random(&[3, 2], 50));
            g.mul_rows(x, w)
        })),
        ("cross_entropy_with_onehot", unary(&[3, 4], 51, |g, x| {
            let y = g.scale(x, 2.0)?;
            g.cross_entropy(y, &[3, 0, 1])
        })),
    ]
}
