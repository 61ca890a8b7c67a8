//! Finite-difference checks of every differentiable op and of the joint
//! training objective.
//!
//! Each op check builds `Σ op(x) ⊙ R` for random `x` and a random fixed `R`,
//! so every entry of the Jacobian is exercised, then compares the reverse-mode
//! gradient against central differences coordinate by coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{finite_difference_at, Graph, Var};
use crate::backbone::{init_encoder, ConvBlock, EncoderConfig};
use crate::error::Result;
use crate::fewshot::{sample_episode, Sample};
use crate::alignment::Mask;
use crate::synthdata::{render_sample, SynthConfig};
use crate::tensor::Tensor;
use crate::trainer::{build_episode_graph, TrainConfig, TrainMode};

pub const RELATIVE_TOLERANCE: f64 = 1e-4;
/// Absolute slack for gradients that are zero up to rounding.
pub const ABSOLUTE_FLOOR: f64 = 1e-8;
pub const STEP: f64 = 1e-6;
/// Parameter noise that moves the objective check off exact ReLU kinks.
const JITTER: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    pub coordinates: usize,
    /// Largest `|a - n| / max(|a|, |n|)` over coordinates with a gradient
    /// above the absolute floor.
    pub max_relative_error: f64,
    pub failures: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Default)]
struct Tally {
    coordinates: usize,
    max_rel: f64,
    failures: usize,
}

impl Tally {
    fn compare(&mut self, analytic: f64, numeric: f64) {
        self.coordinates += 1;
        let scale = analytic.abs().max(numeric.abs());
        let diff = (analytic - numeric).abs();
        if scale > ABSOLUTE_FLOOR {
            self.max_rel = self.max_rel.max(diff / scale);
        }
        if !(diff <= RELATIVE_TOLERANCE * scale + ABSOLUTE_FLOOR) {
            self.failures += 1;
        }
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

type Builder = fn(&mut Graph, &mut ChaCha8Rng) -> Result<(Vec<Var>, Var)>;

/// Wrt-inputs and the (non-scalar) output for each op.
fn op_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |g, r| {
            let (a, b) = (g.input(normal(r, &[3, 4]), true), g.input(normal(r, &[3, 4]), true));
            Ok((vec![a, b], g.add(a, b)?))
        }),
        ("sub", |g, r| {
            let (a, b) = (g.input(normal(r, &[3, 4]), true), g.input(normal(r, &[3, 4]), true));
            Ok((vec![a, b], g.sub(a, b)?))
        }),
        ("mul", |g, r| {
            let (a, b) = (g.input(normal(r, &[3, 4]), true), g.input(normal(r, &[3, 4]), true));
            Ok((vec![a, b], g.mul(a, b)?))
        }),
        ("div", |g, r| {
            let a = g.input(normal(r, &[3, 4]), true);
            let b = g.input(uniform(r, &[3, 4], 0.5, 2.0), true);
            Ok((vec![a, b], g.div(a, b)?))
        }),
        ("matmul", |g, r| {
            let (a, b) = (g.input(normal(r, &[3, 5]), true), g.input(normal(r, &[5, 2]), true));
            Ok((vec![a, b], g.matmul(a, b)?))
        }),
        ("conv2d", |g, r| {
            let x = g.input(normal(r, &[2, 2, 6, 5]), true);
            let w = g.input(normal(r, &[3, 2, 3, 3]), true);
            let b = g.input(normal(r, &[3]), true);
            Ok((vec![x, w, b], g.conv2d(x, w, b, 1, 1)?))
        }),
        ("conv2d_strided", |g, r| {
            let x = g.input(normal(r, &[1, 2, 7, 7]), true);
            let w = g.input(normal(r, &[2, 2, 3, 3]), true);
            let b = g.input(normal(r, &[2]), true);
            Ok((vec![x, w, b], g.conv2d(x, w, b, 2, 1)?))
        }),
        ("relu", |g, r| {
            let a = g.input(normal(r, &[4, 5]), true);
            Ok((vec![a], g.relu(a)))
        }),
        ("maxpool2d", |g, r| {
            let a = g.input(normal(r, &[2, 2, 6, 6]), true);
            Ok((vec![a], g.maxpool2d(a, 2, 2)?))
        }),
        ("global_avg_pool", |g, r| {
            let a = g.input(normal(r, &[2, 3, 4, 4]), true);
            Ok((vec![a], g.global_avg_pool(a)?))
        }),
        ("dense_affine", |g, r| {
            let x = g.input(normal(r, &[3, 4]), true);
            let w = g.input(normal(r, &[2, 4]), true);
            let b = g.input(normal(r, &[2]), true);
            Ok((vec![x, w, b], g.dense_affine(x, w, b)?))
        }),
        ("softmax", |g, r| {
            let a = g.input(normal(r, &[3, 4]), true);
            Ok((vec![a], g.softmax(a)))
        }),
        ("log", |g, r| {
            let a = g.input(uniform(r, &[3, 4], 0.2, 3.0), true);
            Ok((vec![a], g.log(a)))
        }),
        ("neg_sq_euclidean", |g, r| {
            let (a, b) = (g.input(normal(r, &[4, 3]), true), g.input(normal(r, &[2, 3]), true));
            Ok((vec![a, b], g.neg_sq_euclidean(a, b)?))
        }),
        ("sum", |g, r| {
            let a = g.input(normal(r, &[3, 4]), true);
            Ok((vec![a], g.sum(a)))
        }),
        ("mean", |g, r| {
            let a = g.input(normal(r, &[3, 4]), true);
            Ok((vec![a], g.mean(a)))
        }),
        ("bilinear_upsample", |g, r| {
            let a = g.input(normal(r, &[3, 4]), true);
            Ok((vec![a], g.bilinear_upsample(a, 9, 7)?))
        }),
        ("clamp_min", |g, r| {
            let a = g.input(normal(r, &[4, 4]), true);
            Ok((vec![a], g.clamp_min(a, 0.1)))
        }),
        ("scalar_mul", |g, r| {
            let a = g.input(normal(r, &[3, 3]), true);
            Ok((vec![a], g.scalar_mul(a, -1.7)))
        }),
        ("add_scalar", |g, r| {
            let a = g.input(normal(r, &[3, 3]), true);
            Ok((vec![a], g.add_scalar(a, 0.3)))
        }),
        ("reshape", |g, r| {
            let a = g.input(normal(r, &[2, 6]), true);
            Ok((vec![a], g.reshape(a, &[3, 4])?))
        }),
        ("select_rows", |g, r| {
            let a = g.input(normal(r, &[5, 3]), true);
            Ok((vec![a], g.select_rows(a, &[4, 0, 4, 2])?))
        }),
        ("group_mean", |g, r| {
            let a = g.input(normal(r, &[5, 3]), true);
            Ok((vec![a], g.group_mean(a, &[vec![0, 3], vec![1, 2, 4]])?))
        }),
        ("gather", |g, r| {
            let a = g.input(normal(r, &[3, 4]), true);
            Ok((vec![a], g.gather(a, &[11, 0, 5, 5, 7])?))
        }),
    ]
}

fn check_op(name: &str, build: Builder, trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut tally = Tally::default();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        let mut g = Graph::new();
        let (inputs, out) = build(&mut g, &mut rng)?;
        let weights = normal(&mut rng, g.shape(out));
        let r = g.constant(weights);
        let prod = g.mul(out, r)?;
        let loss = g.sum(prod);
        g.backward(loss)?;
        for &x in &inputs {
            let analytic = g.grad(x).expect("input requires grad").to_vec();
            let base = g.tensor(x)?;
            let coords: Vec<usize> = (0..base.len()).collect();
            let numeric = finite_difference_at(
                |p| {
                    g.evaluate(&[(x, &Tensor::new(base.shape(), p.to_vec())?)])?;
                    Ok(g.scalar(loss))
                },
                base.data(),
                STEP,
                &coords,
            )?;
            g.evaluate(&[(x, &base)])?;
            for (a, n) in analytic.iter().zip(numeric) {
                tally.compare(*a, n);
            }
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        trials,
        coordinates: tally.coordinates,
        max_relative_error: tally.max_rel,
        failures: tally.failures,
    })
}

/// Runs every op check for `trials` seeded trials.
pub fn check_all_ops(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    op_cases()
        .into_iter()
        .map(|(name, build)| check_op(name, build, trials, seed))
        .collect()
}

fn micro_pool(seed: u64) -> Vec<Sample> {
    let cfg = SynthConfig {
        image_size: (24, 24),
        lesion_radius_range: (2, 3),
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::new();
    for i in 0..6 {
        let label = i % 2;
        let s = render_sample(&cfg, label, cfg.spurious_rate, &mut rng);
        let mask = Mask::new(24, 24, s.mask.iter().map(|&m| u8::from(m)).collect()).expect("mask");
        let image = Tensor::new(&[1, 24, 24], s.image).expect("image");
        pool.push(Sample::new(format!("m{i}"), image, Some(mask), label).expect("sample"));
    }
    pool
}

/// Checks the gradient of `L_proto + α·L_exp` with respect to randomly
/// chosen encoder parameters on 2-way 1-shot episodes. The Grad-CAM channel
/// weights and normalization constants are frozen at their values for the
/// current parameters, so the finite differences see the same surrogate the
/// reverse pass differentiates. The freshly initialized parameters are
/// jittered so that no pre-activation sits exactly at zero.
pub fn check_objective(
    mode: TrainMode,
    alpha: f64,
    trials: usize,
    coords_per_trial: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    let mut tally = Tally::default();
    for trial in 0..trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let mut encoder = init_encoder(EncoderConfig {
            input_size: (1, 24, 24),
            conv_blocks: vec![ConvBlock::new(4, 3, 1, 2), ConvBlock::new(6, 3, 1, 2)],
            embedding_dim: 8,
            seed: trial_seed,
        })?;
        // zero-initialized biases put dead ReLU regions exactly on the kink
        for p in encoder.params_mut() {
            for v in p.data_mut() {
                *v += JITTER * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let pool = micro_pool(trial_seed);
        let episode = sample_episode(&pool, 2, 1, 1, trial_seed)?;
        let config = TrainConfig {
            mode,
            alpha,
            n_way: 2,
            k_shot: 1,
            q_per_class: 1,
            ..TrainConfig::default()
        };
        let mut eg = build_episode_graph(&encoder, &episode, &config)?;
        eg.graph.backward(eg.l_total)?;
        for _ in 0..coords_per_trial {
            let p = rng.random_range(0..eg.params.0.len());
            let var = eg.params.0[p];
            let base = encoder.params()[p].clone();
            let coord = rng.random_range(0..base.len());
            let analytic = eg.graph.grad(var).expect("params require grad")[coord];
            let g = &mut eg.graph;
            let loss = eg.l_total;
            let numeric = finite_difference_at(
                |x| {
                    g.evaluate(&[(var, &Tensor::new(base.shape(), x.to_vec())?)])?;
                    Ok(g.scalar(loss))
                },
                base.data(),
                STEP,
                &[coord],
            )?[0];
            g.evaluate(&[(var, &base)])?;
            tally.compare(analytic, numeric);
        }
    }
    let name = match mode {
        TrainMode::Baseline => "objective_baseline",
        TrainMode::Guided => "objective_guided",
        TrainMode::RandomCamControl => "objective_random_cam",
    };
    Ok(CheckOutcome {
        name: name.to_string(),
        trials,
        coordinates: tally.coordinates,
        max_relative_error: tally.max_rel,
        failures: tally.failures,
    })
}

/// Every op suite plus the objective in each training mode.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = check_all_ops(trials, seed)?;
    for mode in [TrainMode::Baseline, TrainMode::Guided, TrainMode::RandomCamControl] {
        out.push(check_objective(mode, 0.5, trials, 5, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for outcome in check_all_ops(3, 100).unwrap() {
            assert!(outcome.passed(), "{outcome:?}");
            assert!(outcome.coordinates > 0);
        }
    }

    #[test]
    fn objective_passes() {
        let o = check_objective(TrainMode::Guided, 0.5, 3, 4, 7).unwrap();
        assert!(o.passed(), "{o:?}");
    }

    #[test]
    fn wrong_gradients_are_caught() {
        let mut t = Tally::default();
        t.compare(1.0, 1.00001);
        t.compare(0.0, 1e-9);
        assert_eq!(t.failures, 0);
        t.compare(1.0, 1.001);
        assert_eq!(t.failures, 1);
    }
}
