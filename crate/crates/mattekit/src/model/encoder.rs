//! Multi-resolution encoder: five parallel streams at scales 1/2 to 1/32
//! with repeated all-pairs cross-resolution fusion, so the high-resolution
//! path carries deep context instead of being a plain upsample of the
//! deepest map.

use rand_chacha::ChaCha8Rng;

use crate::nn::{BatchNorm, Conv2d, ConvBnRelu, GraphBuilder, Params};
use crate::tape::NodeId;

pub const LEVELS: usize = 5;
const EXCHANGE_ROUNDS: usize = 2;

/// Channel-matching 1x1 conv+bn between two resolution levels. Deeper
/// sources are projected at their own (small) resolution and upsampled;
/// shallower sources are average-pooled down first.
struct CrossLink {
    conv: Conv2d,
    bn: BatchNorm,
    from_deeper: bool,
}

impl CrossLink {
    fn define(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        ic: usize,
        oc: usize,
        from_deeper: bool,
    ) -> CrossLink {
        CrossLink {
            conv: Conv2d::define(params, rng, &format!("{prefix}.conv"), ic, oc, 1, 1, false),
            bn: BatchNorm::define(params, &format!("{prefix}.bn"), oc),
            from_deeper,
        }
    }

    fn apply(&self, gb: &mut GraphBuilder, x: NodeId, th: usize, tw: usize) -> NodeId {
        if self.from_deeper {
            let y = self.conv.apply(gb, x);
            let y = self.bn.apply(gb, y);
            gb.tape.upsample_bilinear(y, th, tw)
        } else {
            let y = gb.tape.adaptive_avg_pool(x, th, tw);
            let y = self.conv.apply(gb, y);
            self.bn.apply(gb, y)
        }
    }
}

/// One fusion round: a 3x3 block per stream, then every level receives the
/// sum of all other levels (resampled and channel-matched) before a relu.
struct Exchange {
    stream: Vec<ConvBnRelu>,
    links: Vec<Vec<Option<CrossLink>>>,
}

impl Exchange {
    fn define(params: &mut Params, rng: &mut ChaCha8Rng, prefix: &str, widths: &[usize]) -> Exchange {
        let stream = (0..LEVELS)
            .map(|i| {
                ConvBnRelu::define(params, rng, &format!("{prefix}.s{i}"), widths[i], widths[i], 3, 1)
            })
            .collect();
        let links = (0..LEVELS)
            .map(|i| {
                (0..LEVELS)
                    .map(|j| {
                        (i != j).then(|| {
                            CrossLink::define(
                                params,
                                rng,
                                &format!("{prefix}.l{i}_{j}"),
                                widths[j],
                                widths[i],
                                j > i,
                            )
                        })
                    })
                    .collect()
            })
            .collect();
        Exchange { stream, links }
    }
}

pub struct Encoder {
    stem: ConvBnRelu,
    down: Vec<ConvBnRelu>,
    exchanges: Vec<Exchange>,
}

impl Encoder {
    pub fn define(params: &mut Params, rng: &mut ChaCha8Rng, widths: &[usize; 5]) -> Encoder {
        let stem = ConvBnRelu::define(params, rng, "enc.stem", 3, widths[0], 3, 2);
        let down = (1..LEVELS)
            .map(|i| {
                ConvBnRelu::define(
                    params,
                    rng,
                    &format!("enc.down{i}"),
                    widths[i - 1],
                    widths[i],
                    3,
                    2,
                )
            })
            .collect();
        let exchanges = (0..EXCHANGE_ROUNDS)
            .map(|r| Exchange::define(params, rng, &format!("enc.ex{r}"), widths))
            .collect();
        Encoder { stem, down, exchanges }
    }

    /// Input (n,3,H,W) with H, W multiples of 32; returns maps at scales
    /// 1/2, 1/4, 1/8, 1/16, 1/32 with the configured widths.
    pub fn apply(&self, gb: &mut GraphBuilder, x: NodeId) -> [NodeId; 5] {
        let mut f = Vec::with_capacity(LEVELS);
        f.push(self.stem.apply(gb, x));
        for d in &self.down {
            let last = *f.last().expect("stem pushed");
            f.push(d.apply(gb, last));
        }
        for ex in &self.exchanges {
            let mut s = Vec::with_capacity(LEVELS);
            for (x, block) in f.iter().zip(&ex.stream) {
                s.push(block.apply(gb, *x));
            }
            let mut next = Vec::with_capacity(LEVELS);
            for i in 0..LEVELS {
                let (_, _, th, tw) = gb.tape.value(s[i]).shape();
                let mut acc = s[i];
                for j in 0..LEVELS {
                    if let Some(link) = &ex.links[i][j] {
                        let t = link.apply(gb, s[j], th, tw);
                        acc = gb.tape.add(acc, t);
                    }
                }
                next.push(gb.tape.relu(acc));
            }
            f = next;
        }
        [f[0], f[1], f[2], f[3], f[4]]
    }
}
