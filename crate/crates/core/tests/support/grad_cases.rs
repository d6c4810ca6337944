//! Finite-difference cases shared by the core gradient tests and the
//! acceptance suite: every differentiable graph op, every loss, and a small
//! end-to-end encode → modulate → decode network.

#![allow(dead_code)]

use umbra_core::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Graph, Pad, Shape, Tensor, Var};
use umbra_core::losses::{self, KlOrder, LossInputs, LossWeights, PerceptualExtractor};
use umbra_core::model::{pem, GaussVars, HeadVars, ModelConfig, ShadowNet};
use umbra_core::rng::derive_seed;
use umbra_core::Result;

pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const TOLERANCE: f64 = 1e-4;
/// Finer step for the coordinate-wise comparison.
pub const FINE_STEP: f64 = 1e-4;

type Op = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
type Inputs = Box<dyn Fn(u64) -> Vec<Tensor<f64>>>;

pub struct GradCase {
    pub name: &'static str,
    pub inputs: Inputs,
    pub f: Op,
}

impl GradCase {
    pub fn run(&self, seed: u64) -> GradCheckReport {
        self.run_with(seed, GradCheckOptions::default().step)
    }

    pub fn run_with(&self, seed: u64, step: f64) -> GradCheckReport {
        let inputs = (self.inputs)(seed);
        let opts = GradCheckOptions {
            seed,
            step,
            ..Default::default()
        };
        grad_check(&self.f, &inputs, &opts).unwrap_or_else(|e| panic!("{}: {e}", self.name))
    }
}

/// Uniform value in `[lo, hi)` from a hashed counter.
fn unit(seed: u64, stream: u64, i: usize) -> f64 {
    (derive_seed(seed, stream, i as u64) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn uniform(seed: u64, stream: u64, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| lo + (hi - lo) * unit(seed, stream, i))
}

/// Values in `±[margin, 1]`, for ops with a kink at zero.
pub fn off_zero(seed: u64, stream: u64, shape: Shape, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let u = 2.0 * unit(seed, stream, i) - 1.0;
        u.signum() * (margin + (1.0 - margin) * u.abs())
    })
}

/// `reference` shifted away from `pred` by at least `margin` everywhere.
pub fn apart(pred: &Tensor<f64>, seed: u64, stream: u64, margin: f64) -> Tensor<f64> {
    let delta = off_zero(seed, stream, pred.shape(), margin);
    Tensor::from_fn(pred.shape(), |i| pred.data()[i] + 0.5 * delta.data()[i])
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn plain(shapes: Vec<Shape>) -> Inputs {
    Box::new(move |seed| {
        shapes
            .iter()
            .enumerate()
            .map(|(k, &sh)| uniform(seed, k as u64, sh, -1.0, 1.0))
            .collect()
    })
}

fn case(name: &'static str, inputs: Inputs, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// Detail-style weights in `[0, 1]` for an N×H×W grid.
fn weights(n: usize, h: usize, w: usize) -> Vec<f64> {
    (0..n * h * w).map(|i| ((i * 7919) % 13) as f64 / 12.0).collect()
}

pub fn op_cases() -> Vec<GradCase> {
    let a = s(2, 3, 4, 5);
    let img = s(2, 3, 6, 6);
    let st = s(2, 3, 1, 1);
    vec![
        case("add", plain(vec![a, a]), |g, v| g.add(v[0], v[1])),
        case("sub", plain(vec![a, a]), |g, v| g.sub(v[0], v[1])),
        case("mul", plain(vec![a, a]), |g, v| g.mul(v[0], v[1])),
        case("scale", plain(vec![a]), |g, v| Ok(g.scale(v[0], -1.7))),
        case("add_scalar", plain(vec![a]), |g, v| Ok(g.add_scalar(v[0], 0.3))),
        case(
            "leaky_relu",
            Box::new(move |seed| vec![off_zero(seed, 0, a, 0.05)]),
            |g, v| Ok(g.leaky_relu(v[0], 0.2)),
        ),
        case("relu", Box::new(move |seed| vec![off_zero(seed, 0, a, 0.05)]), |g, v| Ok(g.relu(v[0]))),
        case("sigmoid", plain(vec![a]), |g, v| Ok(g.sigmoid(v[0]))),
        case("exp", plain(vec![a]), |g, v| Ok(g.exp(v[0]))),
        case("softplus", plain(vec![a]), |g, v| Ok(g.softplus(v[0]))),
        case("conv2d_3x3_same", plain(vec![img, s(4, 3, 3, 3), s(4, 1, 1, 1)]), |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, Pad::same(1))
        }),
        case("conv2d_3x3_stride2", plain(vec![img, s(4, 3, 3, 3), s(4, 1, 1, 1)]), |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, Pad::downsample(3, 2))
        }),
        case("conv2d_1x1", plain(vec![img, s(5, 3, 1, 1)]), |g, v| g.conv2d(v[0], v[1], None, 1, Pad::same(0))),
        case("conv2d_valid", plain(vec![img, s(2, 3, 3, 3)]), |g, v| {
            g.conv2d(v[0], v[1], None, 1, Pad::same(0))
        }),
        case("upsample_nearest", plain(vec![s(1, 2, 3, 3)]), |g, v| g.upsample_nearest(v[0], 2)),
        case("concat_channels", plain(vec![s(2, 2, 3, 3), s(2, 3, 3, 3)]), |g, v| {
            g.concat_channels(v[0], v[1])
        }),
        case("channel_mean", plain(vec![a]), |g, v| Ok(g.channel_mean(v[0]))),
        case("global_avg_pool", plain(vec![a]), |g, v| Ok(g.global_avg_pool(v[0]))),
        case("channel_std", plain(vec![a]), |g, v| Ok(g.channel_std(v[0]))),
        case("bcast_add", plain(vec![a, st]), |g, v| g.bcast_add(v[0], v[1])),
        case("bcast_sub", plain(vec![a, st]), |g, v| g.bcast_sub(v[0], v[1])),
        case("bcast_mul", plain(vec![a, st]), |g, v| g.bcast_mul(v[0], v[1])),
        case(
            "bcast_div",
            Box::new(move |seed| vec![uniform(seed, 0, a, -1.0, 1.0), uniform(seed, 1, st, 0.5, 1.5)]),
            |g, v| g.bcast_div(v[0], v[1]),
        ),
        case("sum", plain(vec![a]), |g, v| Ok(g.sum(v[0]))),
        case("mean", plain(vec![a]), |g, v| Ok(g.mean(v[0]))),
        case("mse", plain(vec![a, a]), |g, v| g.mse(v[0], v[1])),
        case(
            "weighted_l1",
            Box::new(move |seed| {
                let p = uniform(seed, 0, img, -1.0, 1.0);
                let r = apart(&p, seed, 1, 0.1);
                vec![p, r]
            }),
            |g, v| g.weighted_l1(v[0], v[1], weights(2, 6, 6)),
        ),
        case("kl_diag", plain(vec![s(2, 4, 1, 1); 4]), |g, v| g.kl_diag(v[0], v[1], v[2], v[3])),
        case("lincomb", plain(vec![s(1, 1, 1, 1); 3]), |g, v| {
            g.lincomb(&[(v[0], 1.0), (v[1], -0.3), (v[2], 2.5)])
        }),
        case(
            "pem",
            Box::new(move |seed| {
                vec![
                    uniform(seed, 0, a, -1.0, 1.0),
                    uniform(seed, 1, st, -1.0, 1.0),
                    uniform(seed, 2, st, 0.2, 2.0),
                ]
            }),
            |g, v| pem(g, v[0], v[1], v[2]),
        ),
    ]
}

fn gauss(v: &[Var], at: usize) -> GaussVars {
    GaussVars {
        mu: v[at],
        logvar: v[at + 1],
    }
}

pub fn loss_cases() -> Vec<GradCase> {
    let img = s(2, 3, 8, 8);
    let lat = s(2, 4, 1, 1);
    let pair: Inputs = Box::new(move |seed| {
        let p = uniform(seed, 0, img, 0.0, 1.0);
        let r = apart(&p, seed, 1, 0.1);
        vec![p, r]
    });
    let full: Inputs = Box::new(move |seed| {
        let p = uniform(seed, 0, img, 0.0, 1.0);
        let r = apart(&p, seed, 1, 0.1);
        let mut v = vec![p, r];
        v.extend((0..8).map(|k| uniform(seed, 10 + k, lat, -1.0, 1.0)));
        v
    });
    vec![
        case("mse_loss", plain(vec![img, img]), |g, v| losses::mse_loss(g, v[0], v[1])),
        case("kl_term_prior_first", plain(vec![lat; 4]), |g, v| {
            losses::kl_term(g, gauss(v, 0), gauss(v, 2), KlOrder::PriorFirst)
        }),
        case("kl_term_posterior_first", plain(vec![lat; 4]), |g, v| {
            losses::kl_term(g, gauss(v, 0), gauss(v, 2), KlOrder::PosteriorFirst)
        }),
        case("boundary_loss", pair, |g, v| losses::boundary_loss(g, v[0], v[1], weights(2, 8, 8))),
        case("perceptual_proxy_loss", plain(vec![img, img]), |g, v| {
            let ex = PerceptualExtractor::<f64>::default();
            losses::perceptual_proxy_loss(g, &ex, v[0], v[1])
        }),
        case("total_loss", full, |g, v| {
            let ex = PerceptualExtractor::<f64>::default();
            let inputs = LossInputs {
                pred: v[0],
                reference: v[1],
                prior: HeadVars {
                    mean: gauss(v, 2),
                    scale: gauss(v, 4),
                },
                posterior: HeadVars {
                    mean: gauss(v, 6),
                    scale: gauss(v, 8),
                },
                dm: weights(2, 8, 8),
            };
            Ok(losses::total_loss(g, inputs, &ex, &LossWeights::default(), KlOrder::PriorFirst)?.0)
        }),
    ]
}

/// Small network for the end-to-end check on a 1×3×16×16 input.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        ladder: vec![4, 8],
        bottleneck: 8,
        samples: 1,
        ..ModelConfig::desk()
    }
}

/// Loss through encode → prior heads → reparameterize → modulate → decode,
/// checked w.r.t. the input image and every inference parameter.
pub fn end_to_end_case() -> GradCase {
    let net = ShadowNet::<f64>::new(tiny_config()).expect("tiny config");
    let inference: Vec<usize> = (0..net.params.len()).filter(|&i| !net.is_posterior_param(i)).collect();
    let base: Vec<Tensor<f64>> = inference.iter().map(|&i| net.params.get(i).value.clone()).collect();
    let n_params = net.params.len();
    let index = inference.clone();
    let inputs: Inputs = Box::new(move |seed| {
        let mut v = vec![uniform(seed, 0, s(1, 3, 16, 16), 0.0, 1.0)];
        // perturb every parameter so zero-initialized heads carry gradient
        v.extend(base.iter().enumerate().map(|(k, t)| {
            let noise = uniform(seed, 100 + k as u64, t.shape(), -0.2, 0.2);
            Tensor::from_fn(t.shape(), |i| t.data()[i] + noise.data()[i])
        }));
        v
    });
    let f = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        // full parameter list; posterior slots are unused constants
        let mut p: Vec<Var> = (0..n_params).map(|i| g.constant(net.params.get(i).value.clone())).collect();
        for (slot, &i) in index.iter().enumerate() {
            p[i] = v[slot + 1];
        }
        let enc = net.encode(g, &p, v[0])?;
        let heads = net.prior_heads(g, &p, enc.bottleneck)?;
        let d = net.config().bottleneck;
        let eps_a = g.constant(Tensor::from_fn(s(1, d, 1, 1), |i| (i as f64 * 0.7).sin()));
        let eps_b = g.constant(Tensor::from_fn(s(1, d, 1, 1), |i| (i as f64 * 1.3).cos()));
        let (a, b) = net.reparameterize(g, &heads, eps_a, eps_b)?;
        let modulated = pem(g, enc.bottleneck, a, b)?;
        net.decode(g, &p, &enc.skips, modulated)
    };
    case("end_to_end", inputs, f)
}

pub fn all_cases() -> Vec<GradCase> {
    let mut v = op_cases();
    v.extend(loss_cases());
    v.push(end_to_end_case());
    v
}
