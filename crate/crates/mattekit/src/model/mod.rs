//! Trimap-free matting network: a shared multi-resolution encoder feeds a
//! pyramid-pooled semantic branch (tri-class map) and a high-resolution
//! detail branch guided by gated semantic taps; a fusion step merges both
//! into the final matte.

mod encoder;
mod fuse;
mod gcl;
mod hrdb;
mod ppm;
mod scb;

pub use fuse::FusionMode;
pub use hrdb::distribute_taps;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MatteError, Result};
use crate::img::{AlphaMatte, Image};
use crate::nn::{GraphBuilder, Params};
use crate::tape::NodeId;
use crate::tensor::Tensor;

use encoder::Encoder;
use fuse::Fusion;
use hrdb::Hrdb;
use ppm::Ppm;
use scb::Scb;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels of the encoder streams at scales 1/2, 1/4, 1/8, 1/16, 1/32.
    pub encoder_widths: [usize; 5],
    pub ppm_bins: Vec<usize>,
    pub scb_channels: usize,
    pub hrdb_channels: usize,
    /// Semantic blocks (1..=5) whose taps guide the detail branch.
    pub guidance_taps: Vec<usize>,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            encoder_widths: [16, 32, 64, 128, 256],
            ppm_bins: vec![1, 2, 3, 6],
            scb_channels: 64,
            hrdb_channels: 32,
            guidance_taps: vec![1, 3, 5],
            fusion: FusionMode::Rep,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.iter().any(|&w| w == 0) {
            return Err(MatteError::Config("encoder widths must be positive".into()));
        }
        if self.ppm_bins.is_empty() || self.ppm_bins.iter().any(|&b| b == 0) {
            return Err(MatteError::Config("ppm bins must be a non-empty list of positive sizes".into()));
        }
        if self.scb_channels == 0 || self.hrdb_channels == 0 {
            return Err(MatteError::Config("branch channel counts must be positive".into()));
        }
        let mut taps = self.guidance_taps.clone();
        taps.sort_unstable();
        if taps.iter().any(|&t| !(1..=5).contains(&t)) {
            return Err(MatteError::Config("guidance taps must lie in 1..=5".into()));
        }
        if taps.windows(2).any(|p| p[0] == p[1]) {
            return Err(MatteError::Config("guidance taps must be distinct".into()));
        }
        Ok(())
    }

    fn sorted_taps(&self) -> Vec<usize> {
        let mut t = self.guidance_taps.clone();
        t.sort_unstable();
        t
    }
}

pub struct TapNodes {
    pub s: [NodeId; 5],
    pub gates: Vec<NodeId>,
}

pub struct ForwardNodes {
    /// (n,3,H,W) class probabilities, foreground/background/transition.
    pub probs: NodeId,
    /// (n,1,H,W) detail matte in sigmoid range.
    pub detail: NodeId,
    /// (n,1,H,W) fused matte.
    pub alpha: NodeId,
    pub taps: Option<TapNodes>,
}

/// Inference result for a single image.
pub struct ModelOutput {
    pub semantic: Tensor,
    pub detail: AlphaMatte,
    pub alpha: AlphaMatte,
    /// Tap exports: s1..s5 semantic taps, then g1..gk gate maps.
    pub taps: Option<Vec<(String, Tensor)>>,
}

pub struct Model {
    config: ModelConfig,
    pub params: Params,
    encoder: Encoder,
    ppm: Ppm,
    scb: Scb,
    hrdb: Hrdb,
    fusion: Fusion,
}

impl Model {
    /// Builds a model with fan-in-scaled random parameters drawn from the
    /// seed. Construction order is fixed, so a seed fully determines the
    /// parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = &config.encoder_widths;
        let encoder = Encoder::define(&mut params, &mut rng, w);
        let ppm = Ppm::define(&mut params, &mut rng, w[4], config.scb_channels, &config.ppm_bins);
        let scb = Scb::define(&mut params, &mut rng, config.scb_channels);
        let hrdb = Hrdb::define(
            &mut params,
            &mut rng,
            w[1],
            w[4],
            config.scb_channels,
            config.hrdb_channels,
            &config.sorted_taps(),
        );
        let fusion = Fusion::define(&mut params, &mut rng, config.fusion);
        Ok(Model { config, params, encoder, ppm, scb, hrdb, fusion })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Appends the whole network to the builder's tape. Input is (n,3,H,W)
    /// with H and W positive multiples of 32.
    pub fn forward(
        &self,
        gb: &mut GraphBuilder,
        input: NodeId,
        want_taps: bool,
    ) -> Result<ForwardNodes> {
        let (_, c, h, w) = gb.tape.value(input).shape();
        if c != 3 {
            return Err(MatteError::invalid("model input", format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(MatteError::invalid(
                "model input",
                format!("dimensions must be positive multiples of 32, got {h}x{w}"),
            ));
        }
        let f = self.encoder.apply(gb, input);
        let pooled = self.ppm.apply(gb, f[4]);
        let (logits, s) = self.scb.apply(gb, pooled);
        let probs = gb.tape.softmax_channels(logits);
        let (detail, gates) = self.hrdb.apply(gb, f[1], f[4], &s, h, w);
        let alpha = self.fusion.apply(gb, probs, detail);
        Ok(ForwardNodes { probs, detail, alpha, taps: want_taps.then_some(TapNodes { s, gates }) })
    }

    /// Eval-mode forward for one image, extracting plain tensors.
    pub fn infer_one(&self, image: &Image, want_taps: bool) -> Result<ModelOutput> {
        let mut gb = GraphBuilder::new(&self.params, false);
        let input = gb.tape.constant(Tensor::from_images(&[image]));
        let out = self.forward(&mut gb, input, want_taps)?;
        let taps = out.taps.map(|t| {
            let mut v = Vec::new();
            for (k, id) in t.s.iter().enumerate() {
                v.push((format!("s{}", k + 1), gb.tape.value(*id).clone()));
            }
            for (k, id) in t.gates.iter().enumerate() {
                v.push((format!("g{}", k + 1), gb.tape.value(*id).clone()));
            }
            v
        });
        Ok(ModelOutput {
            semantic: gb.tape.value(out.probs).clone(),
            detail: gb.tape.value(out.detail).to_alpha(0),
            alpha: gb.tape.value(out.alpha).to_alpha(0),
            taps,
        })
    }
}
