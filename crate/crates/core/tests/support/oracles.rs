//! Independent reference computations shared by the core property tests and
//! the acceptance suite. Deliberately naive: no code from the library under
//! test beyond plain data accessors.

#![allow(dead_code)]

use umbra_core::imaging::RegionMask;
use umbra_core::rng::derive_seed;

/// Uniform `[0, 1)` from a hashed counter.
pub fn unit(seed: u64, stream: u64, i: u64) -> f64 {
    (derive_seed(seed, stream, i) >> 11) as f64 / (1u64 << 53) as f64
}

/// Standard normal pair by Box-Muller over [`unit`].
pub fn normal_pair(seed: u64, stream: u64, i: u64) -> (f64, f64) {
    let u1 = 1.0 - unit(seed, stream, 2 * i); // (0, 1]
    let u2 = unit(seed, stream, 2 * i + 1);
    let r = (-2.0 * u1.ln()).sqrt();
    let t = std::f64::consts::TAU * u2;
    (r * t.cos(), r * t.sin())
}

/// Random mask of random size up to `max_side`, foreground density drawn
/// per mask, with at least one background pixel.
pub fn random_mask(seed: u64, max_side: usize) -> RegionMask {
    let h = 1 + (unit(seed, 1, 0) * max_side as f64) as usize;
    let w = 1 + (unit(seed, 1, 1) * max_side as f64) as usize;
    let density = unit(seed, 1, 2);
    let hole = (unit(seed, 1, 3) * (h * w) as f64) as usize;
    let mut i = 0u64;
    let mut k = 0usize;
    RegionMask::from_fn(h, w, |_, _| {
        i += 1;
        k += 1;
        k - 1 != hole && unit(seed, 2, i) < density
    })
}

/// Distance from every foreground pixel to the nearest background pixel by
/// exhaustive search; zero on background.
pub fn brute_force_dt(mask: &RegionMask) -> Vec<f64> {
    let (h, w) = (mask.height(), mask.width());
    let bg: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| !mask.get(y, x))
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            out[y * w + x] = bg
                .iter()
                .map(|&(by, bx)| {
                    let (dy, dx) = (y as f64 - by as f64, x as f64 - bx as f64);
                    (dy * dy + dx * dx).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
        }
    }
    out
}

/// Population mean and standard deviation.
pub fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Monte Carlo `E_p[log p(x) - log q(x)]` for diagonal Gaussians given as
/// (mu, logvar) slices, using its own sampler.
pub fn kl_monte_carlo(mu_p: &[f64], lv_p: &[f64], mu_q: &[f64], lv_q: &[f64], draws: u64, seed: u64) -> f64 {
    let d = mu_p.len();
    let log_n = |x: f64, m: f64, lv: f64| -0.5 * (std::f64::consts::TAU.ln() + lv + (x - m) * (x - m) / lv.exp());
    let mut acc = 0.0;
    let mut z = Vec::with_capacity(d + 1);
    for n in 0..draws {
        z.clear();
        let mut j = 0u64;
        while z.len() < d {
            let (a, b) = normal_pair(seed, 3 + n, j);
            z.push(a);
            z.push(b);
            j += 1;
        }
        for i in 0..d {
            let x = mu_p[i] + (0.5 * lv_p[i]).exp() * z[i];
            acc += log_n(x, mu_p[i], lv_p[i]) - log_n(x, mu_q[i], lv_q[i]);
        }
    }
    acc / draws as f64
}

/// Multiply-adds and bias adds of one conv layer, counted by walking every
/// output element and kernel tap (2 flops per multiply-add, 1 per bias add).
pub fn conv_flops_by_enumeration(k: usize, cin: usize, cout: usize, hout: usize, wout: usize, bias: bool) -> u64 {
    let mut flops = 0u64;
    for _co in 0..cout {
        for _y in 0..hout {
            for _x in 0..wout {
                for _ci in 0..cin {
                    for _t in 0..k * k {
                        flops += 2;
                    }
                }
                if bias {
                    flops += 1;
                }
            }
        }
    }
    flops
}
