//! Body/detail mask dissociation via the exact Euclidean distance transform.
//!
//! The distance field is normalized by its foreground maximum `Î`, giving a
//! body mask `mask * Î` that peaks at the shadow interior and a detail mask
//! `mask * (1 - Î)` that peaks along the boundary. The two sum to the mask.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::imaging::RegionMask;
use crate::{Error, Result};

/// Euclidean distance (in pixels) from each foreground pixel to the nearest
/// background pixel; zero on background.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub height: usize,
    pub width: usize,
    pub d: Vec<f64>,
}

impl DistanceField {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.d[y * self.width + x]
    }
    pub fn max(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }
}

/// Complementary body and detail masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub height: usize,
    pub width: usize,
    pub body: Vec<f64>,
    pub detail: Vec<f64>,
}

/// 1-D squared distance transform of sampled function `f` (lower envelope of
/// parabolas). `f` holds 0 on sites and +inf elsewhere on the first pass.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if f.iter().all(|x| x.is_infinite()) {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    // first finite site
    let first = f.iter().position(|x| x.is_finite()).unwrap();
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // k > 0 is guaranteed because z[0] = -inf
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact Euclidean distance transform (separable two-pass lower envelopes).
pub fn distance_transform(mask: &RegionMask) -> Result<DistanceField> {
    let (h, w) = (mask.height(), mask.width());
    if mask.count() == h * w {
        return Err(Error::NoBackground);
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    let mut sq = vec![0.0f64; h * w];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = if mask.get(y, x) { f64::INFINITY } else { 0.0 };
        }
        edt_1d(&col_in, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        let row = &sq[y * w..(y + 1) * w];
        edt_1d(row, &mut row_out, &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    let d = sq.into_iter().map(f64::sqrt).collect();
    Ok(DistanceField { height: h, width: w, d })
}

/// Splits `mask` into body and detail masks using the max-normalized
/// distance field.
pub fn dissociate(mask: &RegionMask) -> Result<MaskPair> {
    let (h, w) = (mask.height(), mask.width());
    let field = distance_transform(mask)?;
    let max = field.max();
    let mut body = vec![0.0; h * w];
    let mut detail = vec![0.0; h * w];
    for (i, &m) in mask.data().iter().enumerate() {
        if m == 0 {
            continue;
        }
        let norm = if max > 0.0 { field.d[i] / max } else { 0.0 };
        body[i] = norm;
        detail[i] = 1.0 - norm;
    }
    Ok(MaskPair { height: h, width: w, body, detail })
}

/// Per-pixel weights for the boundary loss: the detail mask itself.
pub fn weighted_detail_mask(pair: &MaskPair) -> Vec<f64> {
    pair.detail.clone()
}
