//! Parameter and FLOP accounting.
//!
//! A convolution costs `2·k²·Cin·Cout·Hout·Wout` (one multiply-add = 2 flops)
//! plus `Hout·Wout·Cout` for the bias. Activations, upsampling, pooling and
//! the normalization/modulation arithmetic cost one flop per element per
//! elementwise operation. Concatenation is free.

use super::config::ModelConfig;
use super::network::ShadowNet;
use crate::{Real, Result};

pub fn conv_flops(k: usize, cin: usize, cout: usize, hout: usize, wout: usize, bias: bool) -> u64 {
    let macs = (k * k * cin * cout * hout * wout) as u64;
    2 * macs + if bias { (hout * wout * cout) as u64 } else { 0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Encoder, prior heads and decoder: everything used at test time.
    pub inference: usize,
    /// Including the training-only posterior branch.
    pub total: usize,
}

pub fn count_params<T: Real>(net: &ShadowNet<T>) -> ParamCount {
    let mut inference = 0;
    for (i, p) in net.params.iter().enumerate() {
        if !net.is_posterior_param(i) {
            inference += p.value.len();
        }
    }
    ParamCount {
        inference,
        total: net.params.num_elements(),
    }
}

/// Flops of one test-time forward pass (a single latent draw) at `height`×`width`.
pub fn count_flops(cfg: &ModelConfig, height: usize, width: usize) -> Result<u64> {
    count_flops_sampled(cfg, height, width, 1)
}

/// Flops of MAP inference with `k` draws: the encoder and heads run once,
/// sampling, modulation and decoding once per draw.
pub fn count_flops_sampled(cfg: &ModelConfig, height: usize, width: usize, k: usize) -> Result<u64> {
    let (shared, per_sample) = flops_split(cfg, height, width)?;
    Ok(shared + k as u64 * per_sample)
}

fn flops_split(cfg: &ModelConfig, height: usize, width: usize) -> Result<(u64, u64)> {
    cfg.validate()?;
    cfg.check_input(height, width)?;
    let plan = cfg.plan();
    let mut total = 0u64;
    let (mut h, mut w) = (height, width);
    let conv = |id: usize, h: &mut usize, w: &mut usize, act: bool| {
        let c = &plan.convs[id];
        *h /= c.stride;
        *w /= c.stride;
        let elems = (*h * *w * c.cout) as u64;
        conv_flops(c.k, c.cin, c.cout, *h, *w, true) + if act { elems } else { 0 }
    };
    total += conv(plan.enc.stem, &mut h, &mut w, true);
    for &(a, b) in &plan.enc.downs {
        total += conv(a, &mut h, &mut w, true);
        total += conv(b, &mut h, &mut w, true);
    }
    total += conv(plan.enc.bottleneck.0, &mut h, &mut w, true);
    total += conv(plan.enc.bottleneck.1, &mut h, &mut w, true);

    let d = cfg.bottleneck as u64;
    let bottleneck = d * (h * w) as u64;
    // global pooling, four 1x1 heads on a 1x1 map
    total += bottleneck;
    for &id in &plan.prior {
        total += conv(id, &mut 1, &mut 1, false);
    }
    let shared = total;
    total = 0;
    // sampling: exp(0.5·logvar), scale, noise mul, add (x2), softplus, floor
    total += 9 * d;
    // statistics (mean: 1, std: 3) and sub, div, mul, add
    total += 8 * bottleneck;

    let mut cur = cfg.bottleneck;
    for (&(a, b), &c) in plan.dec.iter().zip(cfg.ladder.iter().rev()) {
        h *= 2;
        w *= 2;
        total += (cur * h * w) as u64;
        total += conv(a, &mut h, &mut w, true);
        total += conv(b, &mut h, &mut w, true);
        cur = c;
    }
    total += conv(plan.out, &mut h, &mut w, false);
    total += (3 * h * w) as u64;
    Ok((shared, total))
}
