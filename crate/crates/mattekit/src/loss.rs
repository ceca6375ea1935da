//! Three-part training objective: semantic cross-entropy on the tri-class
//! map, transition-masked detail loss, and full-image fusion loss with a
//! composition term.
//!
//! Every loss exists in two forms: a `_node` builder that appends the
//! computation to a live tape (used by training), and a plain function that
//! evaluates on tensors (used by tests and logging). All reductions are sums
//! by default; `Reduction::MeanPerPixel` divides each term by the number of
//! contributing addends, which keeps magnitudes comparable across crop sizes.

use serde::{Deserialize, Serialize};

use crate::error::{MatteError, Result};
use crate::img::{Label, Sample};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Floor applied inside log() so a zero probability at the true class
/// yields a large finite loss instead of infinity.
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailRegion {
    TransitionOnly,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    MeanPerPixel,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda_semantic: f64,
    pub lambda_detail: f64,
    pub lambda_fusion: f64,
    pub detail_region: DetailRegion,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> LossConfig {
        LossConfig {
            epsilon: 1e-6,
            lambda_semantic: 1.0,
            lambda_detail: 1.0,
            lambda_fusion: 1.0,
            detail_region: DetailRegion::TransitionOnly,
            reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(MatteError::invalid("loss config", "epsilon must be positive"));
        }
        for (name, v) in [
            ("lambda_semantic", self.lambda_semantic),
            ("lambda_detail", self.lambda_detail),
            ("lambda_fusion", self.lambda_fusion),
        ] {
            if !(v >= 0.0) {
                return Err(MatteError::invalid("loss config", format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Ground-truth tensors a loss evaluation needs, batched from samples.
pub struct LossTargets {
    pub alpha: Tensor,   // (n,1,h,w)
    pub onehot: Tensor,  // (n,3,h,w)
    pub tr_mask: Tensor, // (n,1,h,w), 1.0 on transition pixels
    pub fg: Tensor,      // (n,3,h,w)
    pub bg: Tensor,      // (n,3,h,w)
    pub image: Tensor,   // (n,3,h,w)
}

impl LossTargets {
    pub fn from_samples(samples: &[&Sample]) -> LossTargets {
        let alphas: Vec<_> = samples.iter().map(|s| &s.alpha).collect();
        let labels: Vec<_> = samples.iter().map(|s| &s.label).collect();
        let fgs: Vec<_> = samples.iter().map(|s| &s.fg).collect();
        let bgs: Vec<_> = samples.iter().map(|s| &s.bg).collect();
        let imgs: Vec<_> = samples.iter().map(|s| &s.image).collect();
        LossTargets {
            alpha: Tensor::from_alphas(&alphas),
            onehot: Tensor::onehot_labels(&labels),
            tr_mask: Tensor::label_mask(&labels, Label::Tr),
            fg: Tensor::from_images(&fgs),
            bg: Tensor::from_images(&bgs),
            image: Tensor::from_images(&imgs),
        }
    }

    pub fn pixels(&self) -> usize {
        let (n, _, h, w) = self.alpha.shape();
        n * h * w
    }

    pub fn tr_count(&self) -> usize {
        self.tr_mask.data().iter().filter(|&&v| v != 0.0).count()
    }
}

fn reduce_scale(reduction: Reduction, count: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::MeanPerPixel => 1.0 / count.max(1) as f64,
    }
}

/// Cross-entropy of predicted class probabilities against a one-hot target,
/// one addend per pixel.
pub fn semantic_loss_node(
    tape: &mut Tape,
    probs: NodeId,
    onehot: &Tensor,
    reduction: Reduction,
) -> NodeId {
    let (n, _, h, w) = onehot.shape();
    let target = tape.constant(onehot.clone());
    tape.ce_sum(probs, target, CE_FLOOR, reduce_scale(reduction, n * h * w))
}

fn sobel_kernels() -> (Tensor, Tensor) {
    let kx = Tensor::from_vec(1, 1, 3, 3, vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0]);
    let ky = Tensor::from_vec(1, 1, 3, 3, vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0]);
    (kx, ky)
}

/// Per-pixel gradient magnitude sqrt(gx^2 + gy^2 + eps^2) from 3x3 Sobel
/// responses with replicate borders. Constant inputs give exactly eps
/// everywhere, so magnitude differences cancel to zero.
pub fn sobel_magnitude_node(tape: &mut Tape, x: NodeId, eps: f64) -> NodeId {
    assert_eq!(tape.value(x).channels(), 1, "gradient magnitude expects one channel");
    let (kx, ky) = sobel_kernels();
    let kx = tape.constant(kx);
    let ky = tape.constant(ky);
    let padded = tape.pad_replicate(x, 1);
    let gx = tape.conv2d(padded, kx, None, 1, 0);
    let gy = tape.conv2d(padded, ky, None, 1, 0);
    tape.hypot_eps(gx, gy, eps)
}

/// Charbonnier penalty sum over the mask: sqrt((pred - gt)^2 + eps^2).
pub fn alpha_loss_node(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Tensor,
    mask: Option<&Tensor>,
    eps: f64,
    scale: f64,
) -> NodeId {
    let gt = tape.constant(gt.clone());
    let mask = mask.map(|m| tape.constant(m.clone()));
    tape.charbonnier_sum(pred, gt, mask, eps, scale)
}

/// Absolute difference of Sobel magnitudes, summed over the mask.
pub fn grad_loss_node(
    tape: &mut Tape,
    pred: NodeId,
    gt: &Tensor,
    mask: Option<&Tensor>,
    eps: f64,
    scale: f64,
) -> NodeId {
    let gt = tape.constant(gt.clone());
    let mag_p = sobel_magnitude_node(tape, pred, eps);
    let mag_g = sobel_magnitude_node(tape, gt, eps);
    let mask = mask.map(|m| tape.constant(m.clone()));
    tape.abs_diff_sum(mag_p, mag_g, mask, scale)
}

/// alpha_loss + grad_loss restricted to the transition region (or the whole
/// image when `detail_region` is ALL).
pub fn detail_loss_node(
    tape: &mut Tape,
    detail: NodeId,
    targets: &LossTargets,
    cfg: &LossConfig,
) -> NodeId {
    let (mask, count) = match cfg.detail_region {
        DetailRegion::TransitionOnly => (Some(&targets.tr_mask), targets.tr_count()),
        DetailRegion::All => (None, targets.pixels()),
    };
    let scale = reduce_scale(cfg.reduction, count);
    let a = alpha_loss_node(tape, detail, &targets.alpha, mask, cfg.epsilon, scale);
    let g = grad_loss_node(tape, detail, &targets.alpha, mask, cfg.epsilon, scale);
    tape.weighted_sum(&[(a, 1.0), (g, 1.0)])
}

/// Charbonnier penalty between the recomposited image alpha_p*F + (1-alpha_p)*B
/// and the ground-truth image, summed over all pixels and all 3 channels.
pub fn composition_loss_node(
    tape: &mut Tape,
    alpha_p: NodeId,
    targets: &LossTargets,
    eps: f64,
    scale: f64,
) -> NodeId {
    let fg = tape.constant(targets.fg.clone());
    let bg = tape.constant(targets.bg.clone());
    let image = tape.constant(targets.image.clone());
    let neg = tape.scale(alpha_p, -1.0);
    let inv = tape.add_scalar(neg, 1.0);
    let fa = tape.mul_broadcast(fg, alpha_p);
    let bb = tape.mul_broadcast(bg, inv);
    let comp = tape.add(fa, bb);
    tape.charbonnier_sum(comp, image, None, eps, scale)
}

/// Full-image alpha + gradient + composition penalty on the fused matte.
pub fn fusion_loss_node(
    tape: &mut Tape,
    alpha_p: NodeId,
    targets: &LossTargets,
    cfg: &LossConfig,
) -> NodeId {
    let pixel_scale = reduce_scale(cfg.reduction, targets.pixels());
    let comp_scale = reduce_scale(cfg.reduction, 3 * targets.pixels());
    let a = alpha_loss_node(tape, alpha_p, &targets.alpha, None, cfg.epsilon, pixel_scale);
    let g = grad_loss_node(tape, alpha_p, &targets.alpha, None, cfg.epsilon, pixel_scale);
    let c = composition_loss_node(tape, alpha_p, targets, cfg.epsilon, comp_scale);
    tape.weighted_sum(&[(a, 1.0), (g, 1.0), (c, 1.0)])
}

pub struct LossNodes {
    pub semantic: NodeId,
    pub detail: NodeId,
    pub fusion: NodeId,
    pub total: NodeId,
}

/// Weighted sum of the three objectives; per-term nodes are kept so the
/// trainer can log the breakdown.
pub fn total_loss_nodes(
    tape: &mut Tape,
    probs: NodeId,
    detail: NodeId,
    fused: NodeId,
    targets: &LossTargets,
    cfg: &LossConfig,
) -> LossNodes {
    let semantic = semantic_loss_node(tape, probs, &targets.onehot, cfg.reduction);
    let detail = detail_loss_node(tape, detail, targets, cfg);
    let fusion = fusion_loss_node(tape, fused, targets, cfg);
    let total = tape.weighted_sum(&[
        (semantic, cfg.lambda_semantic),
        (detail, cfg.lambda_detail),
        (fusion, cfg.lambda_fusion),
    ]);
    LossNodes { semantic, detail, fusion, total }
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub detail: f64,
    pub fusion: f64,
    pub total: f64,
}

pub fn semantic_loss(probs: &Tensor, onehot: &Tensor, reduction: Reduction) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let node = semantic_loss_node(&mut tape, p, onehot, reduction);
    tape.value(node).item()
}

pub fn alpha_loss(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let node = alpha_loss_node(&mut tape, p, gt, mask, eps, 1.0);
    tape.value(node).item()
}

pub fn grad_loss(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let node = grad_loss_node(&mut tape, p, gt, mask, eps, 1.0);
    tape.value(node).item()
}

pub fn detail_loss(detail: &Tensor, targets: &LossTargets, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let d = tape.constant(detail.clone());
    let node = detail_loss_node(&mut tape, d, targets, cfg);
    tape.value(node).item()
}

pub fn composition_loss(alpha_p: &Tensor, targets: &LossTargets, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(alpha_p.clone());
    let node = composition_loss_node(&mut tape, a, targets, eps, 1.0);
    tape.value(node).item()
}

pub fn fusion_loss(alpha_p: &Tensor, targets: &LossTargets, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(alpha_p.clone());
    let node = fusion_loss_node(&mut tape, a, targets, cfg);
    tape.value(node).item()
}

pub fn total_loss(
    probs: &Tensor,
    detail: &Tensor,
    fused: &Tensor,
    targets: &LossTargets,
    cfg: &LossConfig,
) -> LossBreakdown {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let d = tape.constant(detail.clone());
    let f = tape.constant(fused.clone());
    let nodes = total_loss_nodes(&mut tape, p, d, f, targets, cfg);
    LossBreakdown {
        semantic: tape.value(nodes.semantic).item(),
        detail: tape.value(nodes.detail).item(),
        fusion: tape.value(nodes.fusion).item(),
        total: tape.value(nodes.total).item(),
    }
}
