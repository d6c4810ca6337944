//! Body/detail mask files.

use std::path::Path;

use umbra_core::imaging::RegionMask;
use umbra_core::maskdissoc::{dissociate, MaskPair};

use crate::error::{Error, Result};
use crate::io;

/// 16-bit levels of a mask pair. Detail is stored as the complement of the
/// quantized body inside the mask, so the two files always sum to 65535 on
/// the mask and 0 elsewhere.
pub fn quantize_pair(mask: &RegionMask, pair: &MaskPair) -> (Vec<u16>, Vec<u16>) {
    let mut body = vec![0u16; pair.body.len()];
    let mut detail = vec![0u16; pair.body.len()];
    for (i, &m) in mask.data().iter().enumerate() {
        if m != 0 {
            body[i] = (pair.body[i] * 65535.0).round() as u16;
            detail[i] = 65535 - body[i];
        }
    }
    (body, detail)
}

/// Writes `body.png` and `detail.png` into `out_dir`.
pub fn dissociate_file(mask_path: &Path, out_dir: &Path) -> Result<MaskPair> {
    let mask = io::load_mask(mask_path)?;
    let pair = dissociate(&mask).map_err(|e| match e {
        umbra_core::Error::NoBackground => Error::Data(format!("{}: {e}", mask_path.display())),
        e => e.into(),
    })?;
    let (body, detail) = quantize_pair(&mask, &pair);
    io::save_levels16(&body, pair.height, pair.width, &out_dir.join("body.png"))?;
    io::save_levels16(&detail, pair.height, pair.width, &out_dir.join("detail.png"))?;
    Ok(pair)
}
