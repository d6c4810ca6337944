use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::config::{EncoderIds, HeadIds, ModelConfig, Plan};
use super::latent::{sample_latent, DiagGaussian, LatentDists, LatentSample};
use super::STD_FLOOR;
use crate::autodiff::{Graph, ParamStore, Shape, Tensor, Var};
use crate::error::shape_err;
use crate::imaging::ImagePlane;
use crate::{Error, Real, Result};

/// Initial log-variance of every latent head: sampling noise starts small
/// relative to the unit-variance normalized features.
pub const HEAD_LOGVAR_INIT: f64 = -4.0;
/// Initial scale-head mean, `softplus⁻¹(1)`, so modulation starts near the
/// identity.
pub const HEAD_SCALE_MU_INIT: f64 = 0.541_324_854_612_918_1;

const STREAM_INIT: u64 = 0x1417;
const STREAM_MAP: u64 = 0x3a9;

/// Skip features and bottleneck produced by the encoder.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Finest first.
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

/// Graph nodes (N×D×1×1) of one diagonal Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct GaussVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Shift (`mean`) and scale distributions.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub mean: GaussVars,
    pub scale: GaussVars,
}

impl HeadVars {
    /// Per-sample distributions read back from the graph.
    pub fn read<T: Real>(&self, g: &Graph<T>) -> Result<Vec<LatentDists>> {
        let s = g.shape(self.mean.mu);
        let get = |v: Var, n: usize| -> Vec<f64> {
            g.value(v).data()[n * s.c..(n + 1) * s.c].iter().map(|x| x.as_f64()).collect()
        };
        (0..s.n)
            .map(|n| {
                Ok(LatentDists {
                    mean: DiagGaussian::new(get(self.mean.mu, n), get(self.mean.logvar, n))?,
                    scale: DiagGaussian::new(get(self.scale.mu, n), get(self.scale.logvar, n))?,
                })
            })
            .collect()
    }
}

/// Output of [`ShadowNet::infer_map`].
#[derive(Debug, Clone)]
pub struct MapInference {
    /// Index of the draw with the highest prior log-density.
    pub best: usize,
    pub images: Vec<ImagePlane>,
    pub samples: Vec<LatentSample>,
}

impl MapInference {
    pub fn best_image(&self) -> &ImagePlane {
        &self.images[self.best]
    }
    pub fn log_densities(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.log_prior_density).collect()
    }
}

/// Instance-normalizes `features` per sample and channel, then scales by `b`
/// and shifts by `a` (both N×C×1×1).
pub fn pem<T: Real>(g: &mut Graph<T>, features: Var, a: Var, b: Var) -> Result<Var> {
    let fs = g.shape(features);
    for (what, v) in [("shift", a), ("scale", b)] {
        let s = g.shape(v);
        if s != Shape::new(fs.n, fs.c, 1, 1) {
            return Err(shape_err!("pem: {what} is {s}, features {fs}"));
        }
    }
    let mu = g.channel_mean(features);
    let sd = g.channel_std(features);
    let centered = g.bcast_sub(features, mu)?;
    let normed = g.bcast_div(centered, sd)?;
    let scaled = g.bcast_mul(normed, b)?;
    g.bcast_add(scaled, a)
}

/// The shadow-removal network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowNet<T> {
    config: ModelConfig,
    plan: Plan,
    pub params: ParamStore<T>,
}

impl<T: Real> ShadowNet<T> {
    /// Fresh network with seeded He-normal kernels and zero biases. Latent
    /// heads start with zero kernels so prior and posterior agree.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let plan = config.plan();
        let gain2 = 2.0 / (1.0 + config.leaky_slope * config.leaky_slope);
        let heads: Vec<usize> = plan.prior.iter().chain(&plan.post).copied().collect();
        let mut params = ParamStore::new();
        for (i, c) in plan.convs.iter().enumerate() {
            let wshape = Shape::new(c.cout, c.cin, c.k, c.k);
            let bshape = Shape::new(1, c.cout, 1, 1);
            let head = heads.iter().position(|&h| h == i);
            let weight = if head.is_some() {
                Tensor::zeros(wshape)
            } else {
                let std = (gain2 / (c.cin * c.k * c.k) as f64).sqrt();
                let mut rng = crate::rng::derived(config.seed, STREAM_INIT, i as u64);
                Tensor::from_fn(wshape, |_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
            };
            let bias_value = match head.map(|h| h % 4) {
                Some(1) | Some(3) => HEAD_LOGVAR_INIT,
                Some(2) => HEAD_SCALE_MU_INIT,
                _ => 0.0,
            };
            params.push(format!("{}.weight", c.name), wshape.as_array().to_vec(), weight);
            params.push(
                format!("{}.bias", c.name),
                alloc::vec![c.cout],
                Tensor::filled(bshape, T::from_f64(bias_value)),
            );
        }
        Ok(Self { config, plan, params })
    }

    /// Wraps loaded parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.params.len() != params.len() {
            return Err(shape_err!(
                "expected {} parameter arrays, found {}",
                fresh.params.len(),
                params.len()
            ));
        }
        for (want, got) in fresh.params.iter().zip(params.iter()) {
            if want.name != got.name {
                return Err(shape_err!("expected array `{}`, found `{}`", want.name, got.name));
            }
            if want.dims != got.dims || want.value.len() != got.value.len() {
                return Err(shape_err!(
                    "array `{}` has dims {:?}, config expects {:?}",
                    got.name,
                    got.dims,
                    want.dims
                ));
            }
        }
        let mut params = params;
        // restore canonical tensor shapes (archives only carry `dims`)
        for (p, want) in params.iter_mut().zip(fresh.params.iter()) {
            p.value = Tensor::new(want.value.shape(), p.value.data().to_vec())?;
        }
        Ok(Self {
            config: fresh.config,
            plan: fresh.plan,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> ShadowNet<U> {
        ShadowNet {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self.params.cast(),
        }
    }

    /// Whether parameter `i` belongs to the training-only posterior branch.
    pub fn is_posterior_param(&self, i: usize) -> bool {
        self.plan.is_posterior(i / 2)
    }

    /// Zeroes kernels and biases of every latent head, making all predicted
    /// distributions unit Gaussians.
    pub fn zero_heads(&mut self) {
        let ids: Vec<usize> = self.plan.prior.iter().chain(&self.plan.post).copied().collect();
        for i in ids {
            for j in [2 * i, 2 * i + 1] {
                self.params.get_mut(j).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    /// Zeroes the final conv of the shared encoder.
    pub fn zero_bottleneck_block(&mut self) {
        let i = self.plan.enc.bottleneck.1;
        for j in [2 * i, 2 * i + 1] {
            self.params.get_mut(j).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Places the parameters on `g`; the returned vars index like `params`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(g, trainable)
    }

    fn conv(&self, g: &mut Graph<T>, p: &[Var], id: usize, x: Var) -> Result<Var> {
        let spec = &self.plan.convs[id];
        g.conv2d(x, p[2 * id], Some(p[2 * id + 1]), spec.stride, spec.pad())
    }

    fn conv_act(&self, g: &mut Graph<T>, p: &[Var], id: usize, x: Var) -> Result<Var> {
        let y = self.conv(g, p, id, x)?;
        Ok(g.leaky_relu(y, T::from_f64(self.config.leaky_slope)))
    }

    fn run_encoder(&self, g: &mut Graph<T>, p: &[Var], ids: &EncoderIds, x: Var) -> Result<Encoded> {
        let s = g.shape(x);
        self.config.check_input(s.h, s.w)?;
        let mut h = self.conv_act(g, p, ids.stem, x)?;
        let mut skips = alloc::vec![h];
        for &(a, b) in &ids.downs {
            h = self.conv_act(g, p, a, h)?;
            h = self.conv_act(g, p, b, h)?;
            skips.push(h);
        }
        h = self.conv_act(g, p, ids.bottleneck.0, h)?;
        h = self.conv_act(g, p, ids.bottleneck.1, h)?;
        Ok(Encoded { skips, bottleneck: h })
    }

    fn run_heads(&self, g: &mut Graph<T>, p: &[Var], ids: &HeadIds, bottleneck: Var) -> Result<HeadVars> {
        let pooled = g.global_avg_pool(bottleneck);
        let [m0, m1, s0, s1] = *ids;
        Ok(HeadVars {
            mean: GaussVars {
                mu: self.conv(g, p, m0, pooled)?,
                logvar: self.conv(g, p, m1, pooled)?,
            },
            scale: GaussVars {
                mu: self.conv(g, p, s0, pooled)?,
                logvar: self.conv(g, p, s1, pooled)?,
            },
        })
    }

    /// Shared encoder over an N×3×H×W batch.
    pub fn encode(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Encoded> {
        let s = g.shape(x);
        if s.c != 3 {
            return Err(shape_err!("encode expects 3 channels, got {s}"));
        }
        self.run_encoder(g, p, &self.plan.enc, x)
    }

    /// Distributions predicted from the shadow image alone.
    pub fn prior_heads(&self, g: &mut Graph<T>, p: &[Var], bottleneck: Var) -> Result<HeadVars> {
        let s = g.shape(bottleneck);
        if s.c != self.config.bottleneck {
            return Err(shape_err!("bottleneck {s} does not have {} channels", self.config.bottleneck));
        }
        self.run_heads(g, p, &self.plan.prior, bottleneck)
    }

    /// Distributions predicted from the (shadow, shadow-free) pair.
    pub fn posterior_heads(&self, g: &mut Graph<T>, p: &[Var], x: Var, y: Var) -> Result<HeadVars> {
        let (sx, sy) = (g.shape(x), g.shape(y));
        if sx != sy || sx.c != 3 {
            return Err(shape_err!("posterior inputs {sx} and {sy} must match with 3 channels"));
        }
        let xy = g.concat_channels(x, y)?;
        let enc = self.run_encoder(g, p, &self.plan.post_enc, xy)?;
        self.run_heads(g, p, &self.plan.post, enc.bottleneck)
    }

    /// Reparameterized latents `(a, b)` from `heads` with standard-normal
    /// noise `eps_a`, `eps_b` (both N×D×1×1 constants).
    pub fn reparameterize(&self, g: &mut Graph<T>, heads: &HeadVars, eps_a: Var, eps_b: Var) -> Result<(Var, Var)> {
        let draw = |g: &mut Graph<T>, d: GaussVars, eps: Var| -> Result<Var> {
            let half = g.scale(d.logvar, T::from_f64(0.5));
            let sigma = g.exp(half);
            let noise = g.mul(sigma, eps)?;
            g.add(d.mu, noise)
        };
        let a = draw(g, heads.mean, eps_a)?;
        let b_raw = draw(g, heads.scale, eps_b)?;
        let b = g.softplus(b_raw);
        Ok((a, g.add_scalar(b, T::from_f64(STD_FLOOR))))
    }

    /// Decoder: per level, nearest 2× upsampling, skip concatenation and two
    /// convs; then a 1×1 conv and a sigmoid to N×3×H×W.
    pub fn decode(&self, g: &mut Graph<T>, p: &[Var], skips: &[Var], modulated: Var) -> Result<Var> {
        if skips.len() != self.plan.dec.len() {
            return Err(shape_err!("decode needs {} skips, got {}", self.plan.dec.len(), skips.len()));
        }
        let mut h = modulated;
        for (&(a, b), &skip) in self.plan.dec.iter().zip(skips.iter().rev()) {
            let up = g.upsample_nearest(h, 2)?;
            let cat = g.concat_channels(up, skip)?;
            h = self.conv_act(g, p, a, cat)?;
            h = self.conv_act(g, p, b, h)?;
        }
        let out = self.conv(g, p, self.plan.out, h)?;
        Ok(g.sigmoid(out))
    }

    /// Encodes once, draws `k` latents from the prior heads (seeded by
    /// `seed`), decodes each and selects the draw with the highest prior
    /// log-density.
    pub fn infer_map(&self, x: &ImagePlane, k: usize, seed: u64) -> Result<MapInference> {
        if k == 0 {
            return Err(Error::InvalidArgument("need at least one sample".into()));
        }
        if x.channels() != 3 {
            return Err(shape_err!("inference needs a 3-channel image, got {}", x.channels()));
        }
        let (h, w) = (x.height(), x.width());
        self.config.check_input(h, w)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let input = Tensor::new(Shape::new(1, 3, h, w), x.data().iter().map(|&v| T::from_f64(v as f64)).collect())?;
        let xv = g.constant(input);
        let enc = self.encode(&mut g, &p, xv)?;
        let heads = self.prior_heads(&mut g, &p, enc.bottleneck)?;
        let dists = heads.read(&g)?.remove(0);

        let cached: Vec<Tensor<T>> = enc.skips.iter().map(|&s| g.value(s).clone()).collect();
        let bottleneck = g.value(enc.bottleneck).clone();
        let d = self.config.bottleneck;
        let mut rng = crate::rng::derived(seed, STREAM_MAP, 0);
        let mut images = Vec::with_capacity(k);
        let mut samples = Vec::with_capacity(k);
        for _ in 0..k {
            let s = sample_latent(&dists, &mut rng);
            let mut sg = Graph::new();
            let sp = self.bind(&mut sg, false);
            let skips: Vec<Var> = cached.iter().map(|t| sg.constant(t.clone())).collect();
            let feat = sg.constant(bottleneck.clone());
            let to_t = |v: &[f64]| Tensor::new(Shape::new(1, d, 1, 1), v.iter().map(|&x| T::from_f64(x)).collect());
            let a = sg.constant(to_t(&s.a)?);
            let b = sg.constant(to_t(&s.b)?);
            let m = pem(&mut sg, feat, a, b)?;
            let out = self.decode(&mut sg, &sp, &skips, m)?;
            images.push(tensor_to_image(sg.value(out), 0)?);
            samples.push(s);
        }
        let best = argmax(samples.iter().map(|s| s.log_prior_density));
        Ok(MapInference { best, images, samples })
    }
}

/// First index of the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Image `n` of a batch tensor, clamped to [0,1].
pub fn tensor_to_image<T: Real>(t: &Tensor<T>, n: usize) -> Result<ImagePlane> {
    let s = t.shape();
    if n >= s.n || (s.c != 1 && s.c != 3) {
        return Err(shape_err!("cannot take image {n} of {s}"));
    }
    let len = s.c * s.hw();
    let data = t.data()[n * len..(n + 1) * len].iter().map(|v| v.as_f64() as f32).collect();
    ImagePlane::from_clamped(s.h, s.w, s.c, data)
}

/// Stacks images (same dims) into an N×C×H×W tensor.
pub fn images_to_tensor<T: Real>(images: &[&ImagePlane]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        first.same_dims(im)?;
        data.extend(im.data().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::new(Shape::new(images.len(), c, h, w), data)
}
