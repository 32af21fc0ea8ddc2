//! Central finite-difference verification of tape gradients.
//!
//! The forward evaluation is the independent oracle here: it never touches
//! the backward rules. Used by the test suites and by the `gradcheck`
//! command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::tape::{concat, scaled_dot_attention, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

/// Step mandated for every check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// A scalar-valued differentiable program over a list of input tensors.
pub trait ScalarFn: Sync {
    fn eval<'g>(&self, tape: &'g Tape, inputs: &[Var<'g>]) -> Result<Var<'g>>;
}

impl<F> ScalarFn for F
where
    F: for<'g> Fn(&'g Tape, &[Var<'g>]) -> Result<Var<'g>> + Sync,
{
    fn eval<'g>(&self, tape: &'g Tape, inputs: &[Var<'g>]) -> Result<Var<'g>> {
        self(tape, inputs)
    }
}

/// Pins a closure to the `ScalarFn` signature; rustc cannot infer the
/// higher-ranked lifetime on its own.
pub fn as_scalar_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Tape, &[Var<'g>]) -> Result<Var<'g>> + Sync,
{
    f
}

fn eval_loss(f: &dyn ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f.eval(&tape, &vars)?.scalar_value()
}

/// Agreement between analytic and numeric derivatives at one coordinate.
///
/// Entries whose magnitude stays below `floor` cannot be resolved relatively
/// by the finite difference, so they are compared against the floor instead;
/// a genuinely missing gradient still shows up as a large value.
fn coordinate_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let m = analytic.abs().max(numeric.abs());
    if m > floor {
        (analytic - numeric).abs() / m
    } else {
        (analytic - numeric).abs() / floor
    }
}

/// Checks every coordinate of every input. Returns the worst agreement error.
///
/// `floor_frac` scales the resolvability floor relative to the gradient
/// magnitude (1e-3 is right for single ops, 1e-2 for deep graphs).
pub fn check_scalar_fn(inputs: &[Tensor], floor_frac: f64, f: &dyn ScalarFn) -> Result<f64> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    spot_check_scalar_fn(inputs, &coords, floor_frac, f)
}

/// Checks only the listed `(input_index, flat_entry)` coordinates.
pub fn spot_check_scalar_fn(
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    floor_frac: f64,
    f: &dyn ScalarFn,
) -> Result<f64> {
    // Analytic gradients in one backward pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f.eval(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let scale = analytic
        .iter()
        .flat_map(|t| t.data())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = floor_frac * scale.max(1.0);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + FD_STEP;
        let plus = eval_loss(f, &work)?;
        work[i].data_mut()[j] = orig - FD_STEP;
        let minus = eval_loss(f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = coordinate_error(analytic[i].data()[j], numeric, floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct PrimitiveReport {
    pub name: &'static str,
    pub max_err: f64,
}

fn shifted_positive(t: &Tensor) -> Tensor {
    t.map(|v| v.abs() + 0.5)
}

/// Moves every value away from zero so kinked activations (relu, min/max)
/// see no sign change inside the finite-difference stencil.
fn away_from_zero(t: &Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

/// Gradient-checks every tape primitive on `shapes_per_op` random shapes.
///
/// Each case reduces the op output to a scalar through a fixed random
/// weighting so all output coordinates influence the loss.
pub fn check_primitives(seed: u64, shapes_per_op: usize) -> Result<Vec<PrimitiveReport>> {
    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Each closure receives freshly drawn inputs; `w` is the output weighting.
    type Builder = Box<dyn for<'g> Fn(&'g Tape, &[Var<'g>]) -> Result<Var<'g>> + Sync>;
    let run_case = |name: &'static str,
                        reports: &mut Vec<PrimitiveReport>,
                        rng: &mut ChaCha8Rng,
                        make: &dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Builder)|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..shapes_per_op {
            let (inputs, f) = make(rng);
            let err = check_scalar_fn(&inputs, 1e-3, &f)?;
            worst = worst.max(err);
        }
        reports.push(PrimitiveReport {
            name,
            max_err: worst,
        });
        Ok(())
    };

    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
        (rng.gen_range(1..6), rng.gen_range(1..6))
    }

    fn weight_to_scalar<'g>(out: Var<'g>, tape: &'g Tape, w: &Tensor) -> Result<Var<'g>> {
        let wv = tape.constant(w.clone());
        out.mul(wv)?.sum_all().pipe_ok()
    }

    trait PipeOk: Sized {
        fn pipe_ok(self) -> Result<Self> {
            Ok(self)
        }
    }
    impl<T> PipeOk for T {}

    macro_rules! binary_case {
        ($name:literal, $method:ident, $prep_b:expr) => {
            run_case($name, &mut reports, &mut rng, &|rng| {
                let (m, n) = dims(rng);
                let a = Tensor::randn(&[m, n], 1.0, rng);
                let b = $prep_b(&Tensor::randn(&[m, n], 1.0, rng));
                let w = Tensor::randn(&[m, n], 1.0, rng);
                let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
                    weight_to_scalar(vars[0].$method(vars[1])?, tape, &w)
                });
                (vec![a, b], f)
            })?;
        };
    }

    binary_case!("add", add, |b: &Tensor| b.clone());
    binary_case!("sub", sub, |b: &Tensor| b.clone());
    binary_case!("mul", mul, |b: &Tensor| b.clone());
    binary_case!("div", div, shifted_positive);

    // min/max kink: keep operands separated.
    run_case("min_max", &mut reports, &mut rng, &|rng| {
        let (m, n) = dims(rng);
        let a = Tensor::randn(&[m, n], 1.0, rng);
        let b = a.zip(&Tensor::randn(&[m, n], 1.0, rng), |av, r| {
            av + if r >= 0.0 { r + 0.1 } else { r - 0.1 }
        });
        let w = Tensor::randn(&[m, n], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            let lo = vars[0].min_elem(vars[1])?;
            let hi = vars[0].max_elem(vars[1])?;
            weight_to_scalar(lo.add(hi.scale(0.5))?, tape, &w)
        });
        (vec![a, b], f)
    })?;

    macro_rules! unary_case {
        ($name:literal, $prep:expr, $body:expr) => {
            run_case($name, &mut reports, &mut rng, &|rng| {
                let (m, n) = dims(rng);
                let x = $prep(&Tensor::randn(&[m, n], 1.0, rng));
                let w = Tensor::randn(&[m, n], 1.0, rng);
                let body: fn(Var<'_>) -> Result<Var<'_>> = $body;
                let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
                    weight_to_scalar(body(vars[0])?, tape, &w)
                });
                (vec![x], f)
            })?;
        };
    }

    unary_case!("scale_addscalar", |x: &Tensor| x.clone(), |v| Ok(v
        .scale(1.7)
        .add_scalar(0.3)
        .neg()));
    unary_case!("pow_const", shifted_positive, |v| Ok(v.pow_const(2.317)));
    unary_case!("relu", away_from_zero, |v| Ok(v.relu()));
    unary_case!("gelu", |x: &Tensor| x.clone(), |v| Ok(v.gelu()));
    unary_case!("sigmoid", |x: &Tensor| x.clone(), |v| Ok(v.sigmoid()));
    unary_case!("softplus", |x: &Tensor| x.clone(), |v| Ok(v.softplus()));
    unary_case!("tanh", |x: &Tensor| x.clone(), |v| Ok(v.tanh_act()));
    unary_case!("exp", |x: &Tensor| x.clone(), |v| Ok(v.exp()));
    unary_case!("log", shifted_positive, |v| Ok(v.log()));
    unary_case!("sqrt", shifted_positive, |v| Ok(v.sqrt()));
    // Rows get a deterministic alternating spread: near-constant rows make
    // 1/sqrt(var+eps) huge and the finite difference itself inaccurate.
    unary_case!(
        "layer_norm",
        |x: &Tensor| {
            let cols = x.shape()[x.rank() - 1];
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += if (i % cols) % 2 == 0 { 0.75 } else { -0.75 };
            }
            out
        },
        |v| Ok(v.layer_norm(1e-5))
    );
    unary_case!("softmax", |x: &Tensor| x.clone(), |v| v.softmax_masked(None));

    run_case("transpose", &mut reports, &mut rng, &|rng| {
        let (m, n) = dims(rng);
        let x = Tensor::randn(&[m, n], 1.0, rng);
        let w = Tensor::randn(&[n, m], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            weight_to_scalar(vars[0].transpose()?, tape, &w)
        });
        (vec![x], f)
    })?;

    run_case("softmax_masked", &mut reports, &mut rng, &|rng| {
        let m = rng.gen_range(1..5);
        let n = rng.gen_range(2..6);
        let x = Tensor::randn(&[m, n], 1.0, rng);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        mask[0] = true;
        let w = Tensor::randn(&[m, n], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            weight_to_scalar(vars[0].softmax_masked(Some(&mask))?, tape, &w)
        });
        (vec![x], f)
    })?;

    run_case("logsumexp", &mut reports, &mut rng, &|rng| {
        let n = rng.gen_range(1..8);
        let x = Tensor::randn(&[n], 1.5, rng);
        let f: Builder = Box::new(move |_, vars: &[Var<'_>]| Ok(vars[0].logsumexp()));
        (vec![x], f)
    })?;

    run_case("matmul", &mut reports, &mut rng, &|rng| {
        let (m, k) = dims(rng);
        let n = rng.gen_range(1..6);
        let a = Tensor::randn(&[m, k], 1.0, rng);
        let b = Tensor::randn(&[k, n], 1.0, rng);
        let w = Tensor::randn(&[m, n], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            weight_to_scalar(vars[0].matmul(vars[1])?, tape, &w)
        });
        (vec![a, b], f)
    })?;

    run_case("add_mul_row_col", &mut reports, &mut rng, &|rng| {
        let (m, n) = dims(rng);
        let x = Tensor::randn(&[m, n], 1.0, rng);
        let row = Tensor::randn(&[n], 1.0, rng);
        let col = shifted_positive(&Tensor::randn(&[m], 1.0, rng));
        let w = Tensor::randn(&[m, n], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            let y = vars[0]
                .add_row(vars[1])?
                .mul_row(vars[1])?
                .mul_col(vars[2])?
                .div_col(vars[2])?;
            weight_to_scalar(y, tape, &w)
        });
        (vec![x, row, col], f)
    })?;

    run_case("conv1d", &mut reports, &mut rng, &|rng| {
        let t = rng.gen_range(3..9);
        let c_in = rng.gen_range(1..4);
        let c_out = rng.gen_range(1..4);
        let k = if rng.gen_bool(0.5) { 3 } else { 5 };
        let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
        let x = Tensor::randn(&[t, c_in], 1.0, rng);
        let wgt = Tensor::randn(&[c_out, c_in, k], 1.0, rng);
        let b = Tensor::randn(&[c_out], 1.0, rng);
        let t_out = (t + k - 1 - k) / stride + 1;
        let w = Tensor::randn(&[t_out, c_out], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            weight_to_scalar(vars[0].conv1d(vars[1], Some(vars[2]), stride)?, tape, &w)
        });
        (vec![x, wgt, b], f)
    })?;

    run_case("conv1d_depthwise", &mut reports, &mut rng, &|rng| {
        let t = rng.gen_range(3..9);
        let c = rng.gen_range(1..5);
        let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
        let x = Tensor::randn(&[t, c], 1.0, rng);
        let wgt = Tensor::randn(&[c, 3], 1.0, rng);
        let t_out = (t + 2 - 3) / stride + 1;
        let w = Tensor::randn(&[t_out, c], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            weight_to_scalar(vars[0].conv1d_depthwise(vars[1], stride)?, tape, &w)
        });
        (vec![x, wgt], f)
    })?;

    run_case("reductions", &mut reports, &mut rng, &|rng| {
        let (m, n) = dims(rng);
        let x = Tensor::randn(&[m, n], 1.0, rng);
        let w0 = Tensor::randn(&[n], 1.0, rng);
        let w1 = Tensor::randn(&[m], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            let a = weight_to_scalar(vars[0].sum_axis(0)?, tape, &w0)?;
            let b = weight_to_scalar(vars[0].mean_axis(1)?, tape, &w1)?;
            let c = vars[0].sum_all().scale(0.25);
            let d = vars[0].mean_all().scale(1.5);
            a.add(b)?.add(c)?.add(d)
        });
        (vec![x], f)
    })?;

    run_case("concat_slice_gather", &mut reports, &mut rng, &|rng| {
        let m = rng.gen_range(2..5);
        let n = rng.gen_range(2..5);
        let a = Tensor::randn(&[m, n], 1.0, rng);
        let b = Tensor::randn(&[m, n], 1.0, rng);
        let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2 * m)).collect();
        let w = Tensor::randn(&[idx.len(), n], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            let cat = concat(&[vars[0], vars[1]], 0)?;
            let picked = cat.gather_rows(&idx)?;
            let sliced = cat.slice(0, 0, 1)?;
            let main = weight_to_scalar(picked, tape, &w)?;
            main.add(sliced.sum_all().scale(0.3))
        });
        (vec![a, b], f)
    })?;

    run_case("repeat_reshape", &mut reports, &mut rng, &|rng| {
        let n = rng.gen_range(2..7);
        let x = Tensor::scalar(rng.gen_range(-1.0..1.0));
        let y = Tensor::randn(&[n], 1.0, rng);
        let f: Builder = Box::new(move |_, vars: &[Var<'_>]| {
            let rep = vars[0].repeat(vars[1].shape()[0])?;
            let prod = rep.mul(vars[1])?;
            prod.reshape(&[vars[1].shape()[0], 1])?.sum_all().pipe_ok()
        });
        (vec![x, y], f)
    })?;

    run_case("attention", &mut reports, &mut rng, &|rng| {
        let tq = rng.gen_range(1..5);
        let tk = rng.gen_range(2..5);
        let d = rng.gen_range(1..5);
        let q = Tensor::randn(&[tq, d], 1.0, rng);
        let k = Tensor::randn(&[tk, d], 1.0, rng);
        let v = Tensor::randn(&[tk, d], 1.0, rng);
        let mut mask: Vec<bool> = (0..tk).map(|_| rng.gen_bool(0.8)).collect();
        mask[0] = true;
        let use_mask = rng.gen_bool(0.5);
        let w = Tensor::randn(&[tq, d], 1.0, rng);
        let f: Builder = Box::new(move |tape, vars: &[Var<'_>]| {
            let m = if use_mask { Some(&mask[..]) } else { None };
            weight_to_scalar(
                scaled_dot_attention(vars[0], vars[1], vars[2], m, None)?,
                tape,
                &w,
            )
        });
        (vec![q, k, v], f)
    })?;

    Ok(reports)
}
