//! Batch sampling and the optimization step.
//!
//! Every random choice of step `s` (batch composition, crop offsets, flips,
//! latent noise) is drawn from streams keyed by `(seed, s)`, so a run resumed
//! at step `s` replays exactly what an uninterrupted run would do.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamState, Graph, LrSchedule, Shape, Tensor, Var};
use crate::imaging::{random_crop_offset, ImagePlane, RegionMask};
use crate::losses::{total_loss, KlOrder, LossBreakdown, LossInputs, LossWeights, PerceptualExtractor};
use crate::maskdissoc::dissociate;
use crate::model::{images_to_tensor, HeadVars, ShadowNet};
use crate::rng::derived;
use crate::{Error, Real, Result};

const STREAM_SHUFFLE: u64 = 0x5f1;
const STREAM_CROP: u64 = 0xc70;
const STREAM_NOISE: u64 = 0x7a1;

/// One full-size training triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub shadow: ImagePlane,
    pub shadow_free: ImagePlane,
    pub mask: RegionMask,
}

impl TrainSample {
    pub fn new(shadow: ImagePlane, shadow_free: ImagePlane, mask: RegionMask) -> Result<Self> {
        shadow.same_dims(&shadow_free)?;
        mask.check_dims(&shadow)?;
        if shadow.channels() != 3 {
            return Err(crate::error::shape_err!("training images need 3 channels, got {}", shadow.channels()));
        }
        Ok(Self { shadow, shadow_free, mask })
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub crop: usize,
    pub batch: usize,
    pub epochs: u32,
    pub lr_initial: f64,
    pub lr_final: f64,
    /// Epoch at which linear decay starts; see [`LrSchedule::default_decay_start`].
    pub decay_start_epoch: Option<u32>,
    pub seed: u64,
    /// Random horizontal flips.
    pub flips: bool,
    pub weights: LossWeights,
    pub kl_order: KlOrder,
    pub perceptual_seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            crop: 256,
            batch: 8,
            epochs: 500,
            lr_initial: 1e-4,
            lr_final: 1e-6,
            decay_start_epoch: None,
            seed: 0,
            flips: false,
            weights: LossWeights::default(),
            kl_order: KlOrder::PriorFirst,
            perceptual_seed: PerceptualExtractor::<f32>::DEFAULT_SEED,
        }
    }
}

impl TrainSettings {
    /// 64-pixel crops in batches of four.
    pub fn desk() -> Self {
        Self {
            crop: 64,
            batch: 4,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr_initial, self.lr_final, self.epochs, self.decay_start_epoch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.crop == 0 {
            return Err(Error::InvalidArgument("batch and crop must be >= 1".into()));
        }
        self.weights.validate()?;
        self.schedule().map(|_| ())
    }
}

/// Inputs of one step, N×C×crop×crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    /// Detail-mask weights of each crop, N×H×W.
    pub dm: Vec<T>,
    /// Latent noise for the shift and scale draws, N×D×1×1 each.
    pub eps_a: Tensor<T>,
    pub eps_b: Tensor<T>,
}

/// Dataset order for the epoch containing `step`: a seeded permutation per
/// epoch, consumed `batch` items at a time with wrap-around.
pub fn batch_indices(len: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = len.div_ceil(batch) as u64;
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut derived(seed, STREAM_SHUFFLE, epoch));
    (0..batch).map(|j| perm[(k * batch + j) % len]).collect()
}

/// Detail weights of a cropped mask. A crop that is entirely shadow has no
/// boundary inside it and gets zero weights.
pub fn detail_weights(mask: &RegionMask) -> Result<Vec<f64>> {
    match dissociate(mask) {
        Ok(pair) => Ok(pair.detail),
        Err(Error::NoBackground) => Ok(alloc::vec![0.0; mask.height() * mask.width()]),
        Err(e) => Err(e),
    }
}

/// Assembles the batch of `step`: crop first, then dissociate the cropped
/// mask.
pub fn sample_batch<T: Real>(data: &[TrainSample], s: &TrainSettings, latent_dim: usize, step: u64) -> Result<Batch<T>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let indices = batch_indices(data.len(), s.batch, s.seed, step);
    let mut rng = derived(s.seed, STREAM_CROP, step);
    let (mut xs, mut ys, mut dm) = (Vec::new(), Vec::new(), Vec::new());
    for &i in &indices {
        let item = &data[i];
        let (x0, y0) = random_crop_offset(item.shadow.height(), item.shadow.width(), s.crop, rng.random())?;
        let flip = s.flips && rng.random_bool(0.5);
        let mut x = item.shadow.crop(x0, y0, s.crop, s.crop)?;
        let mut y = item.shadow_free.crop(x0, y0, s.crop, s.crop)?;
        let mut m = item.mask.crop(x0, y0, s.crop, s.crop)?;
        if flip {
            x = x.flip_horizontal();
            y = y.flip_horizontal();
            m = m.flip_horizontal();
        }
        dm.extend(detail_weights(&m)?.into_iter().map(T::from_f64));
        xs.push(x);
        ys.push(y);
    }
    let mut noise = derived(s.seed, STREAM_NOISE, step);
    let shape = Shape::new(indices.len(), latent_dim, 1, 1);
    let eps_a = Tensor::from_fn(shape, |_| T::from_f64(noise.sample::<f64, _>(StandardNormal)));
    let eps_b = Tensor::from_fn(shape, |_| T::from_f64(noise.sample::<f64, _>(StandardNormal)));
    Ok(Batch {
        indices,
        x: images_to_tensor(&xs.iter().collect::<Vec<_>>())?,
        y: images_to_tensor(&ys.iter().collect::<Vec<_>>())?,
        dm,
        eps_a,
        eps_b,
    })
}

/// Graph of one training forward pass.
#[derive(Debug)]
pub struct TrainForward<T> {
    pub graph: Graph<T>,
    pub params: Vec<Var>,
    pub pred: Var,
    pub prior: HeadVars,
    pub posterior: HeadVars,
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

/// Encoder, both head sets, posterior reparameterization, modulation,
/// decoder and the total loss.
pub fn forward_loss<T: Real>(
    net: &ShadowNet<T>,
    batch: &Batch<T>,
    extractor: &PerceptualExtractor<T>,
    weights: &LossWeights,
    order: KlOrder,
) -> Result<TrainForward<T>> {
    let mut g = Graph::new();
    let p = net.bind(&mut g, true);
    let x = g.constant(batch.x.clone());
    let y = g.constant(batch.y.clone());
    let enc = net.encode(&mut g, &p, x)?;
    let prior = net.prior_heads(&mut g, &p, enc.bottleneck)?;
    let posterior = net.posterior_heads(&mut g, &p, x, y)?;
    let ea = g.constant(batch.eps_a.clone());
    let eb = g.constant(batch.eps_b.clone());
    let (a, b) = net.reparameterize(&mut g, &posterior, ea, eb)?;
    let feat = crate::model::pem(&mut g, enc.bottleneck, a, b)?;
    let pred = net.decode(&mut g, &p, &enc.skips, feat)?;
    let inputs = LossInputs {
        pred,
        reference: y,
        prior,
        posterior,
        dm: batch.dm.clone(),
    };
    let (loss, breakdown) = total_loss(&mut g, inputs, extractor, weights, order)?;
    Ok(TrainForward {
        graph: g,
        params: p,
        pred,
        prior,
        posterior,
        loss,
        breakdown,
    })
}

/// What one step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Training state: network, optimizer and position in the run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: ShadowNet<f32>,
    pub adam: AdamState<f32>,
    pub settings: TrainSettings,
    /// Steps completed so far.
    pub step: u64,
    data: Vec<TrainSample>,
    extractor: PerceptualExtractor<f32>,
}

impl Trainer {
    pub fn new(net: ShadowNet<f32>, settings: TrainSettings, data: Vec<TrainSample>) -> Result<Self> {
        let adam = AdamState::new(&net.params, settings.schedule()?);
        Self::resume(net, adam, settings, data, 0)
    }

    /// Continues from saved state after `step` completed steps.
    pub fn resume(
        net: ShadowNet<f32>,
        adam: AdamState<f32>,
        settings: TrainSettings,
        data: Vec<TrainSample>,
        step: u64,
    ) -> Result<Self> {
        settings.validate()?;
        net.config().check_input(settings.crop, settings.crop)?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        for (i, d) in data.iter().enumerate() {
            if d.shadow.height() < settings.crop || d.shadow.width() < settings.crop {
                return Err(Error::TooSmall(format!(
                    "sample {i} is {}x{}, smaller than the {} crop",
                    d.shadow.width(),
                    d.shadow.height(),
                    settings.crop
                )));
            }
        }
        if !adam.matches(&net.params) {
            return Err(Error::Shape("optimizer state does not match the network".into()));
        }
        if adam.schedule != settings.schedule()? {
            return Err(Error::InvalidArgument("optimizer schedule differs from the settings".into()));
        }
        let extractor = PerceptualExtractor::new(settings.perceptual_seed);
        Ok(Self {
            net,
            adam,
            settings,
            step,
            data,
            extractor,
        })
    }

    pub fn data(&self) -> &[TrainSample] {
        &self.data
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.settings.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.settings.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Learning rate applied at 0-based step `step`.
    pub fn lr_for_step(&self, step: u64) -> f64 {
        self.adam.schedule.lr_at(step as f64 / self.steps_per_epoch() as f64)
    }

    /// Batch of the next step.
    pub fn next_batch(&self) -> Result<Batch<f32>> {
        sample_batch(&self.data, &self.settings, self.net.config().bottleneck, self.step)
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch()?;
        let s = &self.settings;
        let mut fwd = forward_loss(&self.net, &batch, &self.extractor, &s.weights, s.kl_order).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", self.step + 1)),
            e => e,
        })?;
        fwd.graph.backward(fwd.loss)?;
        let grads: Vec<Option<&[f32]>> = fwd.params.iter().map(|&v| fwd.graph.grad(v)).collect();
        debug_assert!(grads.iter().all(Option::is_some), "parameter without gradient");
        let lr = self.lr_for_step(self.step);
        adam_step(&mut self.net.params, &grads, &mut self.adam, lr)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            loss: fwd.breakdown,
        })
    }
}

/// Exponential moving average with smoothing `2 / (window + 1)`, seeded
/// with the first value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ema {
    alpha: f64,
    value: Option<f64>,
}

impl Ema {
    pub fn new(window: usize) -> Self {
        Self {
            alpha: 2.0 / (window as f64 + 1.0),
            value: None,
        }
    }
    pub fn push(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(v) => v + self.alpha * (x - v),
        };
        self.value = Some(v);
        v
    }
    pub fn value(&self) -> Option<f64> {
        self.value
    }
}
