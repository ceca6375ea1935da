//! Semantic context branch: five blocks of three ConvBNReLU layers, each
//! block followed by a 2x bilinear upsample, taking the 1/32-scale pyramid
//! output up to full resolution; a 1x1 head produces the 3-class logits.
//!
//! Block k's post-upsample output is exported as tap s_k (scales 1/16,
//! 1/8, 1/4, 1/2, 1/1) for guidance of the detail branch.

use rand_chacha::ChaCha8Rng;

use crate::nn::{Conv2d, ConvBnRelu, GraphBuilder, Params};
use crate::tape::NodeId;

pub const BLOCKS: usize = 5;
const CONVS_PER_BLOCK: usize = 3;

pub struct Scb {
    blocks: Vec<Vec<ConvBnRelu>>,
    head: Conv2d,
}

impl Scb {
    pub fn define(params: &mut Params, rng: &mut ChaCha8Rng, channels: usize) -> Scb {
        let blocks = (0..BLOCKS)
            .map(|b| {
                (0..CONVS_PER_BLOCK)
                    .map(|c| {
                        ConvBnRelu::define(
                            params,
                            rng,
                            &format!("scb.b{b}.c{c}"),
                            channels,
                            channels,
                            3,
                            1,
                        )
                    })
                    .collect()
            })
            .collect();
        let head = Conv2d::define(params, rng, "scb.head", channels, 3, 1, 1, true);
        Scb { blocks, head }
    }

    /// Returns full-resolution 3-class logits and the five taps.
    pub fn apply(&self, gb: &mut GraphBuilder, x: NodeId) -> (NodeId, [NodeId; 5]) {
        let mut taps = Vec::with_capacity(BLOCKS);
        let mut x = x;
        for block in &self.blocks {
            for conv in block {
                x = conv.apply(gb, x);
            }
            let (_, _, h, w) = gb.tape.value(x).shape();
            x = gb.tape.upsample_bilinear(x, 2 * h, 2 * w);
            taps.push(x);
        }
        let logits = self.head.apply(gb, x);
        (logits, [taps[0], taps[1], taps[2], taps[3], taps[4]])
    }
}
