//! Scratch probe: representational floor of the detail head on the toy set.
//! Optimizes a bare quarter-scale logit grid (the exact function class the
//! detail head can emit) against the full loss with perfect semantics.
//! Usage: floor_probe <synth_seed> <iters> <lr>

use mattekit::img::{composite, default_dilation_radius, derive_triclass, AlphaMatte, Image, Sample};
use mattekit::loss::{total_loss_nodes, LossConfig, LossTargets, Reduction};
use mattekit::synth::{assemble_dataset, SynthConfig};
use mattekit::tape::Tape;
use mattekit::tensor::Tensor;

const SIDE: usize = 64;
const QSIDE: usize = 16;

// Quarter-grid levels stay on multiples of 64/255 so every bilinear
// interpolant lands exactly on the 1/255 quantization grid; storage then
// perturbs nothing but a thin ring where the level-1.0 core begins.
fn quarter_pattern(which: usize) -> Vec<f64> {
    let mut v = vec![0.0; QSIDE * QSIDE];
    for y in 0..QSIDE {
        for x in 0..QSIDE {
            let (xf, yf) = (x as f64 - 7.5, y as f64 - 7.5);
            let d = match which {
                0 => ((xf / 5.8).powi(2) + (yf / 5.2).powi(2)).sqrt(),
                _ => ((xf / 5.6).abs().powi(3) + (yf / 5.0).abs().powi(3)).powf(1.0 / 3.0),
            };
            let ramp = ((1.3 - d) / 0.45).clamp(0.0, 1.0);
            v[y * QSIDE + x] = match (ramp * 4.0).round() as u32 {
                0 => 0.0,
                1 => 64.0 / 255.0,
                2 => 128.0 / 255.0,
                3 => 192.0 / 255.0,
                _ => 1.0,
            };
        }
    }
    v
}

fn upsample_alpha(pattern: Vec<f64>) -> AlphaMatte {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::from_vec(1, 1, QSIDE, QSIDE, pattern));
    let up = tape.upsample_bilinear(p, SIDE, SIDE);
    tape.value(up).to_alpha(0).quantized()
}

fn gradient_image(c0: [f64; 3], c1: [f64; 3], diag: bool) -> Image {
    let mut img = Image::zeros(SIDE, SIDE);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let t = if diag {
                (x + y) as f64 / (2 * (SIDE - 1)) as f64
            } else {
                x as f64 / (SIDE - 1) as f64
            };
            for c in 0..Image::CHANNELS {
                img.set(c, y, x, (c0[c] + (c1[c] - c0[c]) * t).clamp(0.0, 1.0));
            }
        }
    }
    img.quantized()
}

fn representable_samples() -> Vec<Sample> {
    let radius = default_dilation_radius(SIDE, SIDE);
    let fgs = [
        gradient_image([0.95, 0.75, 0.3], [0.8, 0.9, 0.55], false),
        gradient_image([0.7, 0.85, 0.95], [0.9, 0.65, 0.8], true),
    ];
    let alphas = [upsample_alpha(quarter_pattern(0)), upsample_alpha(quarter_pattern(1))];
    let bgs = [
        gradient_image([0.05, 0.25, 0.15], [0.2, 0.1, 0.35], true),
        gradient_image([0.3, 0.12, 0.08], [0.1, 0.2, 0.3], false),
        gradient_image([0.25, 0.05, 0.3], [0.08, 0.28, 0.12], false),
        gradient_image([0.15, 0.18, 0.1], [0.35, 0.3, 0.25], true),
    ];
    (0..4)
        .map(|k| {
            let f = k / 2;
            Sample {
                image: composite(&fgs[f], &bgs[k], &alphas[f]).unwrap().quantized(),
                alpha: alphas[f].clone(),
                fg: fgs[f].clone(),
                bg: bgs[k].clone(),
                label: derive_triclass(&alphas[f], radius),
            }
        })
        .collect()
}

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().unwrap().parse().unwrap();
    let iters: usize = args.next().unwrap().parse().unwrap();
    let lr: f64 = args.next().unwrap().parse().unwrap();
    let rep = args.next().as_deref() == Some("rep");

    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        seed,
        num_fg_train: 2,
        num_fg_test: 1,
        bg_per_fg_train: 2,
        bg_per_fg_test: 2,
        base_size: 64,
        crop_sizes: vec![64],
        photometric: false,
        blur_prob: 0.0,
        hflip_prob: 0.0,
        ..SynthConfig::default()
    };
    let train = if rep {
        representable_samples()
    } else {
        assemble_dataset(&synth, dir.path()).unwrap().0
    };
    let cfg = LossConfig { reduction: Reduction::MeanPerPixel, ..LossConfig::default() };

    let mut mean_total = 0.0;
    for (i, s) in train.iter().enumerate() {
        let targets = LossTargets::from_samples(&[s]);
        let (h, w) = (s.alpha.height(), s.alpha.width());
        let (qh, qw) = (h / 4, w / 4);

        // Init: logits of the box-downsampled ground truth.
        let a = s.alpha.data();
        let mut logits = vec![0.0f64; qh * qw];
        for qy in 0..qh {
            for qx in 0..qw {
                let mut m = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        m += a[(qy * 4 + dy) * w + qx * 4 + dx];
                    }
                }
                let p = (m / 16.0).clamp(0.02, 0.98);
                logits[qy * qw + qx] = (p / (1.0 - p)).ln();
            }
        }

        let mut vel = vec![0.0f64; logits.len()];
        let mut last = (0.0, 0.0, 0.0);
        for it in 0..=iters {
            let mut tape = Tape::new();
            let grid = tape.var(Tensor::from_vec(1, 1, qh, qw, logits.clone()));
            let act = tape.sigmoid(grid);
            let detail = tape.upsample_bilinear(act, h, w);
            let probs = tape.constant(targets.onehot.clone());
            let fused = tape.rep_fuse(probs, detail);
            let nodes = total_loss_nodes(&mut tape, probs, detail, fused, &targets, &cfg);
            let total = tape.value(nodes.total).item();
            last = (
                total,
                tape.value(nodes.detail).item(),
                tape.value(nodes.fusion).item(),
            );
            if it == iters {
                break;
            }
            let grads = tape.backward(nodes.total);
            let g = grads.get(grid).unwrap().data();
            for k in 0..logits.len() {
                vel[k] = 0.9 * vel[k] + g[k];
                logits[k] -= lr * vel[k];
            }
            if it % 100 == 0 {
                println!("  sample {i} it {it:4}: total {total:.5}");
            }
        }
        println!(
            "sample {i}: floor total {:.5} (det {:.5} fus {:.5})",
            last.0, last.1, last.2
        );
        mean_total += last.0 / train.len() as f64;
    }
    println!("mean floor total {mean_total:.5} (+ semantic CE floor of a real run)");
}
