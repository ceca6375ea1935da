//! High-resolution detail branch. Runs at 1/4 of input resolution: the
//! 1/4-scale encoder map concatenated with the upsampled 1/32-scale map is
//! projected to the branch width, refined by three residual blocks with
//! gated semantic guidance inserted before each, and finished by a
//! conv+sigmoid head upsampled 4x to full resolution.

use rand_chacha::ChaCha8Rng;

use super::gcl::Gcl;
use crate::nn::{Conv2d, ConvBnRelu, GraphBuilder, Params, ResBlock};
use crate::tape::NodeId;

const RES_BLOCKS: usize = 3;

/// Spreads the sorted guidance taps across the three insertion points
/// (before residual blocks 1, 2, 3) as evenly as possible, earlier points
/// taking the extras. {1,3,5} lands one per point; {5} guides only the
/// first block; {1,2,3,4,5} yields [1,2], [3,4], [5].
pub fn distribute_taps(taps: &[usize]) -> [Vec<usize>; 3] {
    let n = taps.len();
    let base = n / RES_BLOCKS;
    let extra = n % RES_BLOCKS;
    let counts = [
        base + usize::from(extra > 0),
        base + usize::from(extra > 1),
        base,
    ];
    let mut out: [Vec<usize>; 3] = Default::default();
    let mut it = taps.iter().copied();
    for (point, &count) in out.iter_mut().zip(&counts) {
        point.extend(it.by_ref().take(count));
    }
    out
}

pub struct Hrdb {
    initial: ConvBnRelu,
    assignments: [Vec<usize>; 3],
    gcls: Vec<Gcl>,
    res: Vec<ResBlock>,
    head: Conv2d,
}

impl Hrdb {
    pub fn define(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        low_c: usize,
        deep_c: usize,
        scb_c: usize,
        channels: usize,
        taps: &[usize],
    ) -> Hrdb {
        let initial =
            ConvBnRelu::define(params, rng, "hrdb.initial", low_c + deep_c, channels, 1, 1);
        let assignments = distribute_taps(taps);
        let gcls = (0..taps.len())
            .map(|k| Gcl::define(params, rng, &format!("hrdb.gcl{k}"), scb_c, channels))
            .collect();
        let res = (0..RES_BLOCKS)
            .map(|k| ResBlock::define(params, rng, &format!("hrdb.res{k}"), channels))
            .collect();
        let head = Conv2d::define(params, rng, "hrdb.head", channels, 1, 3, 1, true);
        Hrdb { initial, assignments, gcls, res, head }
    }

    /// `low` is the 1/4-scale encoder map, `deep` the 1/32-scale one.
    /// Returns the full-resolution detail map (sigmoid range) and the gate
    /// maps in application order.
    pub fn apply(
        &self,
        gb: &mut GraphBuilder,
        low: NodeId,
        deep: NodeId,
        taps: &[NodeId; 5],
        out_h: usize,
        out_w: usize,
    ) -> (NodeId, Vec<NodeId>) {
        let (_, _, h4, w4) = gb.tape.value(low).shape();
        let up = gb.tape.upsample_bilinear(deep, h4, w4);
        let cat = gb.tape.concat_channels(&[low, up]);
        let mut x = self.initial.apply(gb, cat);

        let mut gates = Vec::new();
        let mut next_gcl = 0;
        for (point, res) in self.assignments.iter().zip(&self.res) {
            for &tap in point {
                let (y, g) = self.gcls[next_gcl].apply(gb, x, taps[tap - 1]);
                x = y;
                gates.push(g);
                next_gcl += 1;
            }
            x = res.apply(gb, x);
        }

        let y = self.head.apply(gb, x);
        let y = gb.tape.sigmoid(y);
        (gb.tape.upsample_bilinear(y, out_h, out_w), gates)
    }
}
