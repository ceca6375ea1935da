//! Pyramid pooling over the deepest encoder map: pool to several bin
//! sizes, project, upsample back, concatenate with the input and project
//! to the semantic branch width.

use rand_chacha::ChaCha8Rng;

use crate::nn::{ConvBnRelu, GraphBuilder, Params};
use crate::tape::NodeId;

pub struct Ppm {
    bins: Vec<usize>,
    branches: Vec<ConvBnRelu>,
    project: ConvBnRelu,
}

impl Ppm {
    pub fn define(
        params: &mut Params,
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        bins: &[usize],
    ) -> Ppm {
        let branches = bins
            .iter()
            .enumerate()
            .map(|(i, _)| ConvBnRelu::define(params, rng, &format!("ppm.b{i}"), in_c, out_c, 1, 1))
            .collect();
        let cat_c = in_c + bins.len() * out_c;
        let project = ConvBnRelu::define(params, rng, "ppm.project", cat_c, out_c, 1, 1);
        Ppm { bins: bins.to_vec(), branches, project }
    }

    pub fn apply(&self, gb: &mut GraphBuilder, x: NodeId) -> NodeId {
        let (_, _, h, w) = gb.tape.value(x).shape();
        let mut parts = vec![x];
        for (&bin, branch) in self.bins.iter().zip(&self.branches) {
            let p = gb.tape.adaptive_avg_pool(x, bin, bin);
            let p = branch.apply(gb, p);
            parts.push(gb.tape.upsample_bilinear(p, h, w));
        }
        let cat = gb.tape.concat_channels(&parts);
        self.project.apply(gb, cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (Params, Ppm) {
        let mut params = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ppm = Ppm::define(&mut params, &mut rng, 8, 5, &[1, 2, 3, 6]);
        (params, ppm)
    }

    #[test]
    fn output_shape_is_scb_width_at_input_size() {
        let (params, ppm) = build();
        let mut gb = GraphBuilder::new(&params, false);
        let x = gb.tape.constant(Tensor::full(2, 8, 2, 3, 0.1));
        let y = ppm.apply(&mut gb, x);
        assert_eq!(gb.tape.value(y).shape(), (2, 5, 2, 3));
    }

    #[test]
    fn constant_input_stays_constant() {
        // Pooling, projection and upsampling all preserve constants, so
        // each output channel must be flat.
        let (params, ppm) = build();
        let mut gb = GraphBuilder::new(&params, false);
        let x = gb.tape.constant(Tensor::full(1, 8, 4, 4, 0.37));
        let y = ppm.apply(&mut gb, x);
        let out = gb.tape.value(y);
        for c in 0..5 {
            let plane = out.plane(0, c);
            for &v in plane {
                assert!((v - plane[0]).abs() < 1e-9, "channel {c} not constant");
            }
        }
    }

    #[test]
    fn zero_projection_weights_give_zero_output() {
        let (mut params, ppm) = build();
        for e in params.iter_mut() {
            if e.name.starts_with("ppm.") && e.name.ends_with("conv.weight") {
                for v in e.value.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut gb = GraphBuilder::new(&params, false);
        let x = gb.tape.constant(Tensor::full(1, 8, 2, 2, 0.9));
        let y = ppm.apply(&mut gb, x);
        assert!(gb.tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
