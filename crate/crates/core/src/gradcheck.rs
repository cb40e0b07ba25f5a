//! Central finite-difference verification of tape gradients, run in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{PmrnConfig, PmrnModel};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{InitSpec, ParamStore};
use crate::tensor::{ConvParams, Shape, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter; smaller tensors are checked fully.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            tolerance: 1e-4,
            samples_per_param: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on a seeded subsample of coordinates.
pub fn finite_diff_check<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    if opts.epsilon.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid("finite_diff_check", "epsilon must be positive"));
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|(_, t)| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<_> = values.iter().map(|t| tape.var(t.clone())).collect();
        Ok(f(&mut tape, &vars)?.value().data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        let analytic = grads.get(&vars[p]).expect("tracked parameter");
        let len = values[p].len();
        let coords: Vec<usize> = if len <= opts.samples_per_param {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.samples_per_param).into_vec()
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = values[p].data()[i];
            values[p].data_mut()[i] = orig + opts.epsilon;
            let up = eval(&values)?;
            values[p].data_mut()[i] = orig - opts.epsilon;
            let down = eval(&values)?;
            values[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.epsilon);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        report.push(ParamCheck {
            name: name.clone(),
            coordinates: coords.len(),
            max_rel_error: worst,
        });
    }
    let max_rel_error = report.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
        tolerance: opts.tolerance,
        passed: max_rel_error <= opts.tolerance,
    })
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.05, 1)` and random sign, keeping every entry
/// well clear of the kink at zero.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` to `mean(y ⊙ w)` for a fixed random `w`, so every output
/// element contributes a distinct gradient.
fn weighted_mean(tape: &mut Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // affine_gate computes (g + 1)·y + b, so g = w − 1
    let g = tape.constant(uniform(y.shape(), -1.5, 0.5, &mut rng));
    let zero = tape.constant(Tensor::zeros(y.shape()));
    let z = tape.affine_gate(y, &g, &zero)?;
    Ok(tape.mean(&z))
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<(String, Tensor<f64>)>,
    f: OpFn,
}

fn conv_case(name: &'static str, x: Shape, cout: usize, k: usize, p: ConvParams, rng: &mut ChaCha8Rng) -> OpCase {
    let w = Shape::new(cout, x.c / p.groups, k, k);
    let seed = rng.gen();
    OpCase {
        name,
        inputs: vec![
            ("x".into(), uniform(x, -1.0, 1.0, rng)),
            ("weight".into(), uniform(w, -0.5, 0.5, rng)),
            ("bias".into(), uniform(Shape::new(cout, 1, 1, 1), -0.5, 0.5, rng)),
        ],
        f: Box::new(move |t, v| {
            let y = t.conv2d(&v[0], &v[1], Some(&v[2]), p)?;
            weighted_mean(t, &y, seed)
        }),
    }
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = Shape::new(2, 3, 4, 5);
    let mut cases = vec![
        conv_case("conv2d", Shape::new(2, 3, 6, 5), 4, 3, ConvParams::same(3, 1), &mut rng),
        conv_case("conv2d_1x1", Shape::new(1, 6, 4, 4), 3, 1, ConvParams::same(1, 1), &mut rng),
        conv_case("conv2d_grouped", Shape::new(1, 4, 5, 5), 6, 3, ConvParams::same(3, 2), &mut rng),
        conv_case("conv2d_depthwise", Shape::new(2, 4, 5, 6), 4, 3, ConvParams::same(3, 4), &mut rng),
        conv_case(
            "conv2d_strided",
            Shape::new(1, 2, 7, 7),
            3,
            3,
            ConvParams {
                stride: 2,
                padding: 1,
                groups: 1,
            },
            &mut rng,
        ),
    ];
    let w = rng.gen();
    cases.push(OpCase {
        name: "relu",
        inputs: vec![("x".into(), away_from_zero(s, &mut rng))],
        f: Box::new(move |t, v| {
            let y = t.relu(&v[0]);
            weighted_mean(t, &y, w)
        }),
    });
    cases.push(OpCase {
        name: "sigmoid",
        inputs: vec![("x".into(), uniform(s, -4.0, 4.0, &mut rng))],
        f: Box::new(move |t, v| {
            let y = t.sigmoid(&v[0]);
            weighted_mean(t, &y, w)
        }),
    });
    cases.push(OpCase {
        name: "add",
        inputs: vec![
            ("a".into(), uniform(s, -1.0, 1.0, &mut rng)),
            ("b".into(), uniform(s, -1.0, 1.0, &mut rng)),
        ],
        f: Box::new(move |t, v| {
            let y = t.add(&v[0], &v[1])?;
            weighted_mean(t, &y, w)
        }),
    });
    cases.push(OpCase {
        name: "affine_gate",
        inputs: vec![
            ("x".into(), uniform(s, -1.0, 1.0, &mut rng)),
            ("gamma".into(), uniform(s, 0.0, 1.0, &mut rng)),
            ("beta".into(), uniform(s, -1.0, 1.0, &mut rng)),
        ],
        f: Box::new(move |t, v| {
            let y = t.affine_gate(&v[0], &v[1], &v[2])?;
            weighted_mean(t, &y, w)
        }),
    });
    cases.push(OpCase {
        name: "concat_channels",
        inputs: vec![
            ("a".into(), uniform(Shape::new(2, 2, 3, 3), -1.0, 1.0, &mut rng)),
            ("b".into(), uniform(Shape::new(2, 3, 3, 3), -1.0, 1.0, &mut rng)),
            ("c".into(), uniform(Shape::new(2, 1, 3, 3), -1.0, 1.0, &mut rng)),
        ],
        f: Box::new(move |t, v| {
            let y = t.concat_channels(&[&v[0], &v[1], &v[2]])?;
            weighted_mean(t, &y, w)
        }),
    });
    cases.push(OpCase {
        name: "pixel_shuffle",
        inputs: vec![("x".into(), uniform(Shape::new(1, 12, 3, 2), -1.0, 1.0, &mut rng))],
        f: Box::new(move |t, v| {
            let y = t.pixel_shuffle(&v[0], 2)?;
            weighted_mean(t, &y, w)
        }),
    });
    cases.push(OpCase {
        name: "mean",
        inputs: vec![("x".into(), uniform(s, -1.0, 1.0, &mut rng))],
        f: Box::new(|t, v| Ok(t.mean(&v[0]))),
    });
    let target = uniform(s, -1.0, 1.0, &mut rng);
    let offset = away_from_zero(s, &mut rng);
    let pred = target.zip_map(&offset, "l1_loss", |a, b| a + b).expect("same shape");
    cases.push(OpCase {
        name: "l1_loss",
        inputs: vec![("pred".into(), pred)],
        f: Box::new(move |t, v| {
            let target = t.constant(target.clone());
            t.l1_loss(&v[0], &target)
        }),
    });
    cases
}

/// Finite-difference checks of every differentiable tape op on seeded
/// random inputs; inputs of ReLU and L1 stay at least 0.05 from their kinks.
pub fn check_ops(opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    op_cases(opts.seed)
        .into_iter()
        .map(|case| Ok((case.name.to_owned(), finite_diff_check(case.f, &case.inputs, opts)?)))
        .collect()
}

/// Checks `d mean(model(x)) / dθ` for every parameter and the input, on a
/// single `size x size` image. Biases are drawn randomly rather than left at
/// zero so their gradients are exercised in a generic position.
pub fn check_model(config: &PmrnConfig, size: usize, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let model = PmrnModel::new(*config, &mut store)?;
    crate::nn::init_params(&mut store, &InitSpec::with_seed(opts.seed));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut inputs: Vec<(String, Tensor<f64>)> = store
        .iter()
        .map(|(name, t)| {
            let t = if name.ends_with(".bias") {
                uniform(t.shape(), -0.1, 0.1, &mut rng)
            } else {
                t.clone()
            };
            (name.to_owned(), t)
        })
        .collect();
    inputs.push(("input".into(), uniform(Shape::new(1, 3, size, size), 0.0, 1.0, &mut rng)));
    let n = store.len();
    finite_diff_check(
        |tape, v| {
            let y = model.forward(tape, &v[..n], &v[n])?;
            Ok(tape.mean(&y))
        },
        &inputs,
        opts,
    )
}
