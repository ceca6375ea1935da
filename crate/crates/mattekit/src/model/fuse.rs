//! Fusion of the semantic probabilities with the detail matte.
//!
//! REP replaces per-pixel by the argmax class: foreground pixels become
//! 1.0, background 0.0, and transition pixels take the detail value (ties
//! resolve to the lowest class index, foreground first). CONV learns the
//! blend with a 1x1 conv over the stacked maps. NONE passes the detail
//! matte through.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, GraphBuilder, Params};
use crate::tape::NodeId;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Rep,
    Conv,
    None,
}

pub struct Fusion {
    mode: FusionMode,
    conv: Option<Conv2d>,
}

impl Fusion {
    pub fn define(params: &mut Params, rng: &mut ChaCha8Rng, mode: FusionMode) -> Fusion {
        let conv = (mode == FusionMode::Conv)
            .then(|| Conv2d::define(params, rng, "fuse.conv", 4, 1, 1, 1, true));
        Fusion { mode, conv }
    }

    /// `probs` (n,3,h,w) class probabilities, `detail` (n,1,h,w).
    pub fn apply(&self, gb: &mut GraphBuilder, probs: NodeId, detail: NodeId) -> NodeId {
        match self.mode {
            FusionMode::Rep => gb.tape.rep_fuse(probs, detail),
            FusionMode::Conv => {
                let cat = gb.tape.concat_channels(&[detail, probs]);
                let conv = self.conv.as_ref().expect("conv defined for CONV mode");
                let y = conv.apply(gb, cat);
                gb.tape.sigmoid(y)
            }
            FusionMode::None => detail,
        }
    }
}
