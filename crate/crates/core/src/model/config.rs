use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Pad;
use crate::{Error, Result};

/// Network shape and sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Encoder channel widths, one stride-2 level each.
    pub ladder: Vec<usize>,
    /// Bottleneck channels; also the latent dimension.
    pub bottleneck: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    /// Latent draws per image at inference.
    pub samples: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// About 0.3M inference parameters; trains on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            ladder: vec![16, 32, 64],
            bottleneck: 64,
            kernel: 3,
            leaky_slope: 0.2,
            samples: 10,
            seed: 0,
        }
    }

    /// Full-size variant, about 2.64M parameters on the inference path.
    pub fn full() -> Self {
        Self {
            ladder: vec![24, 48, 96, 192],
            bottleneck: 160,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidArgument(m));
        if self.ladder.is_empty() || self.ladder[0] == 0 {
            return bad(format!("ladder must be non-empty and positive, got {:?}", self.ladder));
        }
        if self.ladder.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("ladder must be strictly increasing, got {:?}", self.ladder));
        }
        if self.bottleneck == 0 {
            return bad("bottleneck must be > 0".into());
        }
        if self.kernel < 3 || self.kernel.is_multiple_of(2) {
            return bad(format!("kernel must be odd and >= 3, got {}", self.kernel));
        }
        if self.samples == 0 {
            return bad("samples must be >= 1".into());
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky slope must be finite and >= 0, got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.ladder.len()
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(crate::error::shape_err!(
                "input {height}x{width} is not divisible by {m} ({} downsampling levels)",
                self.ladder.len()
            ));
        }
        Ok(())
    }

    pub(crate) fn plan(&self) -> Plan {
        Plan::new(self)
    }
}

/// One convolution of the network.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ConvSpec {
    pub name: alloc::string::String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn pad(&self) -> Pad {
        if self.stride == 1 {
            Pad::same(self.k / 2)
        } else {
            Pad::downsample(self.k, self.stride)
        }
    }
}

/// Indices into [`Plan::convs`] for one encoder.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncoderIds {
    pub stem: usize,
    pub downs: Vec<(usize, usize)>,
    pub bottleneck: (usize, usize),
}

/// Mean and scale heads, each a (mu, logvar) pair.
pub(crate) type HeadIds = [usize; 4];

/// Full layer layout derived from a config. Conv `i` owns parameters `2i`
/// (weight) and `2i + 1` (bias).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plan {
    pub convs: Vec<ConvSpec>,
    pub enc: EncoderIds,
    pub prior: HeadIds,
    pub dec: Vec<(usize, usize)>,
    pub out: usize,
    pub post_enc: EncoderIds,
    pub post: HeadIds,
}

impl Plan {
    fn new(cfg: &ModelConfig) -> Self {
        let mut convs = Vec::new();
        let mut add = |name: alloc::string::String, cin, cout, k, stride| {
            convs.push(ConvSpec { name, cin, cout, k, stride });
            convs.len() - 1
        };
        let k = cfg.kernel;
        let d = cfg.bottleneck;
        let lad = &cfg.ladder;

        let encoder = |prefix: &str, cin: usize, add: &mut dyn FnMut(alloc::string::String, usize, usize, usize, usize) -> usize| {
            let stem = add(format!("{prefix}stem"), cin, lad[0], k, 1);
            let downs = (1..lad.len())
                .map(|i| {
                    (
                        add(format!("{prefix}down{i}.0"), lad[i - 1], lad[i], k, 2),
                        add(format!("{prefix}down{i}.1"), lad[i], lad[i], k, 1),
                    )
                })
                .collect();
            let last = *lad.last().unwrap();
            let bottleneck = (
                add(format!("{prefix}bottleneck.0"), last, d, k, 2),
                add(format!("{prefix}bottleneck.1"), d, d, k, 1),
            );
            EncoderIds { stem, downs, bottleneck }
        };
        let heads = |prefix: &str, add: &mut dyn FnMut(alloc::string::String, usize, usize, usize, usize) -> usize| {
            ["mean.mu", "mean.logvar", "scale.mu", "scale.logvar"].map(|h| add(format!("{prefix}{h}"), d, d, 1, 1))
        };

        let enc = encoder("enc.", 3, &mut add);
        let prior = heads("prior.", &mut add);
        let mut dec = Vec::new();
        let mut cur = d;
        for i in (0..lad.len()).rev() {
            dec.push((
                add(format!("dec.up{i}.0"), cur + lad[i], lad[i], k, 1),
                add(format!("dec.up{i}.1"), lad[i], lad[i], k, 1),
            ));
            cur = lad[i];
        }
        let out = add("dec.out".into(), lad[0], 3, 1, 1);
        let post_enc = encoder("post.enc.", 6, &mut add);
        let post = heads("post.", &mut add);
        Plan {
            convs,
            enc,
            prior,
            dec,
            out,
            post_enc,
            post,
        }
    }

    pub fn is_posterior(&self, conv: usize) -> bool {
        self.convs[conv].name.starts_with("post.")
    }
}
