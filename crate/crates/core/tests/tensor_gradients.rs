//! Every primitive's analytic gradient against central differences (f64).

use std::sync::Arc;

use cuedepth::tensor::{gradient_check, Tape, Tensor, Var};
use cuedepth::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-6;
const SEEDS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// every output coordinate contributes.
fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, t.shape(y), -1.0, 1.0);
    let w = t.input(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn check_unary<F>(name: &str, shape: &[usize], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, shape, lo, hi);
        let err = gradient_check(
            |t, x| {
                let y = f(t, x)?;
                weighted_sum(t, y, seed)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

/// Checks a binary op with respect to each operand in turn.
fn check_binary<F>(name: &str, sa: &[usize], sb: &[usize], lo: f64, hi: f64, f: F)
where
    F: Fn(&mut Tape<f64>, Var, Var) -> Result<Var> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = random(&mut rng, sa, lo, hi);
        let b = random(&mut rng, sb, lo, hi);
        let (a2, b2) = (a.clone(), b.clone());
        let err_a = gradient_check(
            move |t, x| {
                let other = t.input(b2.clone());
                let y = f(t, x, other)?;
                weighted_sum(t, y, seed)
            },
            &a,
            STEP,
        )
        .unwrap();
        let err_b = gradient_check(
            move |t, x| {
                let other = t.input(a2.clone());
                let y = f(t, other, x)?;
                weighted_sum(t, y, seed)
            },
            &b,
            STEP,
        )
        .unwrap();
        assert!(err_a < TOL && err_b < TOL, "{name} seed {seed}: {err_a:e} / {err_b:e}");
    }
}

#[test]
fn elementwise_binary() {
    check_binary("add", &[3, 4], &[3, 4], -1.0, 1.0, |t, a, b| t.add(a, b));
    check_binary("sub", &[3, 4], &[3, 4], -1.0, 1.0, |t, a, b| t.sub(a, b));
    check_binary("mul", &[3, 4], &[3, 4], -1.0, 1.0, |t, a, b| t.mul(a, b));
    check_binary("div", &[3, 4], &[3, 4], 0.5, 2.0, |t, a, b| t.div(a, b));
    check_binary("add_bcast", &[2, 3, 4], &[4], -1.0, 1.0, |t, a, b| t.add_bcast(a, b));
    check_binary("mul_bcast", &[2, 3, 4], &[3, 4], -1.0, 1.0, |t, a, b| t.mul_bcast(a, b));
    check_binary("mul_col", &[3, 5], &[3], -1.0, 1.0, |t, a, b| t.mul_col(a, b));
    check_binary("mul_scalar", &[3, 5], &[1], -1.0, 1.0, |t, a, b| t.mul_scalar(a, b));
}

#[test]
fn lerp_all_operands() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[4, 3], -1.0, 1.0);
        let b = random(&mut rng, &[4, 3], -1.0, 1.0);
        let tt = random(&mut rng, &[1], 0.1, 0.9);
        let (b2, t2) = (b.clone(), tt.clone());
        let err = gradient_check(
            move |t, x| {
                let bb = t.input(b2.clone());
                let g = t.input(t2.clone());
                let y = t.lerp(x, bb, g)?;
                weighted_sum(t, y, seed)
            },
            &a,
            STEP,
        )
        .unwrap();
        let err_t = gradient_check(
            move |t, g| {
                let aa = t.input(a.clone());
                let bb = t.input(b.clone());
                let y = t.lerp(aa, bb, g)?;
                weighted_sum(t, y, seed)
            },
            &tt,
            STEP,
        )
        .unwrap();
        assert!(err < TOL && err_t < TOL, "lerp seed {seed}: {err:e} {err_t:e}");
    }
}

#[test]
fn pointwise_unary() {
    check_unary("selu", &[5, 4], -2.0, 2.0, |t, x| t.selu(x));
    check_unary("sigmoid", &[5, 4], -3.0, 3.0, |t, x| t.sigmoid(x));
    check_unary("gelu", &[5, 4], -3.0, 3.0, |t, x| t.gelu(x));
    check_unary("exp", &[5, 4], -2.0, 2.0, |t, x| t.exp(x));
    check_unary("log", &[5, 4], 0.2, 3.0, |t, x| t.log(x));
    check_unary("square", &[5, 4], -2.0, 2.0, |t, x| t.square(x));
    check_unary("abs", &[5, 4], 0.1, 2.0, |t, x| t.abs(x));
    check_unary("abs_neg", &[5, 4], -2.0, -0.1, |t, x| t.abs(x));
    check_unary("recip", &[5, 4], 0.5, 2.0, |t, x| t.recip(x));
    check_unary("scale", &[5, 4], -2.0, 2.0, |t, x| t.scale(x, -1.7));
    check_unary("add_const", &[5, 4], -2.0, 2.0, |t, x| t.add_const(x, 0.3));
    check_unary("clamp_min", &[5, 4], 0.5, 2.0, |t, x| t.clamp_min(x, 0.1));
}

#[test]
fn reductions() {
    check_unary("sum", &[3, 4], -1.0, 1.0, |t, x| t.sum(x));
    check_unary("mean", &[3, 4], -1.0, 1.0, |t, x| t.mean(x));
    check_unary("mean_rows", &[2, 3, 4], -1.0, 1.0, |t, x| t.mean_rows(x));
    check_unary("sum_last", &[2, 3, 4], -1.0, 1.0, |t, x| t.sum_last(x));
}

#[test]
fn linear_algebra() {
    check_binary("matmul", &[3, 4], &[4, 5], -1.0, 1.0, |t, a, b| t.matmul(a, b));
    check_binary("matmul_nt", &[3, 4], &[5, 4], -1.0, 1.0, |t, a, b| t.matmul_nt(a, b));
    check_binary("matmul_tn", &[4, 3], &[4, 5], -1.0, 1.0, |t, a, b| {
        t.matmul_t(a, b, true, false)
    });
    check_binary("matmul_tt", &[4, 3], &[5, 4], -1.0, 1.0, |t, a, b| {
        t.matmul_t(a, b, true, true)
    });
    check_binary("bmm", &[2, 3, 4], &[2, 4, 5], -1.0, 1.0, |t, a, b| t.bmm(a, b, false, false));
    check_binary("bmm_nt", &[2, 3, 4], &[2, 5, 4], -1.0, 1.0, |t, a, b| t.bmm(a, b, false, true));
    check_unary("transpose", &[3, 4], -1.0, 1.0, |t, x| t.transpose(x));
    check_unary("softmax", &[3, 5], -2.0, 2.0, |t, x| t.softmax(x));
    check_unary("layer_norm", &[3, 6], -2.0, 2.0, |t, x| t.layer_norm(x));
    check_unary("standardize", &[9, 4], -1.0, 1.0, |t, x| t.standardize_cols(x));
}

#[test]
fn shape_ops() {
    check_unary("reshape", &[3, 4], -1.0, 1.0, |t, x| t.reshape(x, &[2, 6]));
    check_unary("permute", &[2, 3, 4], -1.0, 1.0, |t, x| t.permute(x, &[2, 0, 1]));
    check_unary("slice", &[3, 6], -1.0, 1.0, |t, x| t.slice_last(x, 2, 3));
    check_unary("concat", &[3, 2], -1.0, 1.0, |t, x| {
        let y = t.square(x)?;
        t.concat(&[x, y, x])
    });
    check_unary("gather", &[4, 3], -1.0, 1.0, |t, x| {
        t.gather_rows(x, Arc::from(vec![3u32, u32::MAX, 0, 3, 1]))
    });
}

#[test]
fn spatial_ops() {
    // strided convolution, input and kernel gradients
    check_binary("conv2d", &[7, 6, 3], &[27, 4], -1.0, 1.0, |t, x, w| t.conv2d(x, w, 3, 2, 1));
    check_binary("conv2d_s1", &[5, 5, 2], &[18, 3], -1.0, 1.0, |t, x, w| t.conv2d(x, w, 3, 1, 0));
    check_binary("depthwise", &[6, 5, 3], &[25, 3], -1.0, 1.0, |t, x, w| {
        t.depthwise_conv2d(x, w, 5, 2)
    });
    check_unary("resize_up", &[3, 4, 2], -1.0, 1.0, |t, x| t.resize_bilinear(x, 7, 9));
    check_unary("resize_down", &[8, 6, 1], -1.0, 1.0, |t, x| t.resize_bilinear(x, 3, 2));
    check_unary("box_filter", &[9, 8, 2], -1.0, 1.0, |t, x| t.box_filter(x, 2));
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random(&mut rng, &[8, 8, 3], -1.0, 1.0).cast::<f32>();
        let w = random(&mut rng, &[27, 5], -1.0, 1.0).cast::<f32>();
        let mut t = Tape::<f32>::new();
        let xv = t.input(x);
        let wv = t.param(w);
        let y = t.conv2d(xv, wv, 3, 2, 1).unwrap();
        let y = t.selu(y).unwrap();
        let l = t.mean(y).unwrap();
        let g = t.backward(l).unwrap();
        (t.value(l).clone(), g.get(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::zeros(&[2]));
    let y = t.scale(x, 2.0).unwrap();
    // non-scalar output needs an explicit seed
    assert!(t.backward(y).is_err());
    assert!(t
        .backward_with_seed(y, &Tensor::zeros(&[3]))
        .is_err());
    let g = t.backward_with_seed(y, &Tensor::full(&[2], 1.0)).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);

    let empty = Tape::<f64>::new();
    assert!(matches!(
        empty.backward(y),
        Err(cuedepth::Error::BackwardBeforeForward)
    ));
}
