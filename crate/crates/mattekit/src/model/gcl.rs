//! Gated convolution: a semantic tap modulates a detail feature map.
//!
//! The tap is first bilinearly resized to the detail map's resolution. A
//! single-channel gate g = sigmoid(bn(conv1x1(concat(s, d)))) then scales
//! the detail map, and a channel-mixing 1x1 kernel maps d*g + d to the
//! output. The + d residual keeps detail flowing when the gate closes.

use rand_chacha::ChaCha8Rng;

use crate::nn::{BatchNorm, Conv2d, GraphBuilder, Params};
use crate::tape::NodeId;

pub struct Gcl {
    gate: Conv2d,
    gate_bn: BatchNorm,
    mix: Conv2d,
}

impl Gcl {
    pub fn define(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        tap_c: usize,
        detail_c: usize,
    ) -> Gcl {
        Gcl {
            gate: Conv2d::define(
                params,
                rng,
                &format!("{prefix}.gate"),
                tap_c + detail_c,
                1,
                1,
                1,
                false,
            ),
            gate_bn: BatchNorm::define(params, &format!("{prefix}.gate_bn"), 1),
            mix: Conv2d::define(params, rng, &format!("{prefix}.mix"), detail_c, detail_c, 1, 1, false),
        }
    }

    /// Returns the modulated detail map and the gate (for tap export).
    pub fn apply(&self, gb: &mut GraphBuilder, d: NodeId, s: NodeId) -> (NodeId, NodeId) {
        let (_, _, dh, dw) = gb.tape.value(d).shape();
        let (_, _, sh, sw) = gb.tape.value(s).shape();
        let s = if (sh, sw) != (dh, dw) { gb.tape.upsample_bilinear(s, dh, dw) } else { s };
        let cat = gb.tape.concat_channels(&[s, d]);
        let z = self.gate.apply(gb, cat);
        let z = self.gate_bn.apply(gb, z);
        let g = gb.tape.sigmoid(z);
        let scaled = gb.tape.mul_broadcast(d, g);
        let sum = gb.tape.add(scaled, d);
        (self.mix.apply(gb, sum), g)
    }
}
