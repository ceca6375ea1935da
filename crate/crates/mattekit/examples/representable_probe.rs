//! Scratch probe: toy convergence on mattes the detail head can express
//! exactly (quarter-grid patterns upsampled with the model's own bilinear).
//! Usage: representable_probe <lr> <schedule_max> <probe_iters>

use std::path::Path;
use std::time::Instant;

use mattekit::img::{composite, default_dilation_radius, derive_triclass, AlphaMatte, Image, Sample};
use mattekit::loss::{alpha_loss, grad_loss, LossConfig, LossTargets, Reduction};
use mattekit::metrics;
use mattekit::model::Model;
use mattekit::model::ModelConfig;
use mattekit::pngio;
use mattekit::synth::{assemble_dataset, SynthConfig};
use mattekit::tape::Tape;
use mattekit::tensor::Tensor;
use mattekit::train::{TrainConfig, Trainer};

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

fn write_representable_split(data: &Path) {
    let root = data.join("train");
    let name = |i: usize| format!("{i:03}.png");
    let radius = default_dilation_radius(SIDE, SIDE);
    let fgs = [
        gradient_image([0.95, 0.75, 0.3], [0.8, 0.9, 0.55], false),
        gradient_image([0.7, 0.85, 0.95], [0.9, 0.65, 0.8], true),
    ];
    let alphas = [upsample_alpha(quarter_pattern(0)), upsample_alpha(quarter_pattern(1))];
    for f in 0..2 {
        let label = derive_triclass(&alphas[f], radius);
        pngio::write_image(&root.join("fg").join(name(f)), &fgs[f]).unwrap();
        pngio::write_alpha(&root.join("alpha").join(name(f)), &alphas[f]).unwrap();
        pngio::write_label(&root.join("label").join(name(f)), &label).unwrap();
    }
    let bgs = [
        gradient_image([0.05, 0.25, 0.15], [0.2, 0.1, 0.35], true),
        gradient_image([0.3, 0.12, 0.08], [0.1, 0.2, 0.3], false),
        gradient_image([0.25, 0.05, 0.3], [0.08, 0.28, 0.12], false),
        gradient_image([0.15, 0.18, 0.1], [0.35, 0.3, 0.25], true),
    ];
    for k in 0..4 {
        let image = composite(&fgs[k / 2], &bgs[k], &alphas[k / 2]).unwrap().quantized();
        pngio::write_image(&root.join("bg").join(name(k)), &bgs[k]).unwrap();
        pngio::write_image(&root.join("image").join(name(k)), &image).unwrap();
    }
}

fn matte_tensor(m: &AlphaMatte) -> Tensor {
    Tensor::from_vec(1, 1, m.height(), m.width(), m.data().to_vec())
}

fn print_split(model: &Model, samples: &[Sample]) {
    for (i, s) in samples.iter().enumerate() {
        let out = model.infer_one(&s.image, false).unwrap();
        let t = LossTargets::from_samples(&[s]);
        let tr = t.tr_count();
        let d = matte_tensor(&out.detail);
        let f = matte_tensor(&out.alpha);
        println!(
            "    sample {i}: det charb {:.4} grad {:.4} | fus charb {:.4} grad {:.4} | mse {:.5}",
            alpha_loss(&d, &t.alpha, Some(&t.tr_mask), 1e-6) / tr,
            grad_loss(&d, &t.alpha, Some(&t.tr_mask), 1e-6) / tr,
            alpha_loss(&f, &t.alpha, None, 1e-6) / t.pixels(),
            grad_loss(&f, &t.alpha, None, 1e-6) / t.pixels(),
            metrics::mse(&out.alpha, &s.alpha).unwrap(),
        );
    }
}

fn main() {
    let mut args = std::env::args().skip(1);
    let lr: f64 = args.next().unwrap().parse().unwrap();
    let schedule_max: usize = args.next().unwrap().parse().unwrap();
    let probe_iters: usize = args.next().unwrap().parse().unwrap();
    let batch: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(4);

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = SynthConfig {
        seed: 907,
        num_fg_train: 2,
        num_fg_test: 1,
        bg_per_fg_train: 2,
        bg_per_fg_test: 2,
        base_size: SIDE,
        crop_sizes: vec![SIDE],
        photometric: false,
        blur_prob: 0.0,
        hflip_prob: 0.0,
        ..SynthConfig::default()
    };
    assemble_dataset(&synth, &data).unwrap();
    write_representable_split(&data);

    let cfg = TrainConfig {
        base_lr: lr,
        momentum: 0.9,
        weight_decay: 4e-5,
        poly_power: 0.9,
        max_iters: schedule_max,
        batch_size: batch,
        seed: 1,
        dataset: data.clone(),
        checkpoint_every: Some(schedule_max),
        model: ModelConfig::default(),
        loss: LossConfig { reduction: Reduction::MeanPerPixel, ..LossConfig::default() },
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    println!("loaded {} train samples", trainer.samples().len());
    let started = Instant::now();
    let mut anchor = f64::NAN;
    for _ in 0..probe_iters {
        let stats = trainer.step().unwrap();
        if stats.iter == 10 {
            anchor = stats.loss.total;
        }
        if stats.iter % 10 == 0 {
            let mut worst = f64::NAN;
            if stats.iter % 50 == 0 || stats.loss.total < 0.05 * anchor {
                worst = 0.0;
                for s in trainer.samples() {
                    let out = trainer.model().infer_one(&s.image, false).unwrap();
                    worst = worst.max(metrics::mse(&out.alpha, &s.alpha).unwrap());
                }
            }
            if stats.iter % 100 == 0 {
                print_split(trainer.model(), trainer.samples());
            }
            println!(
                "iter {:4}  total {:.5}  frac {:.3}  sem {:.4}  det {:.4}  fus {:.4}  worstMSE {:.5}  {:.1}s",
                stats.iter,
                stats.loss.total,
                stats.loss.total / anchor,
                stats.loss.semantic,
                stats.loss.detail,
                stats.loss.fusion,
                worst,
                started.elapsed().as_secs_f64()
            );
            if stats.loss.total < 0.05 * anchor && worst < 0.01 {
                println!(
                    "converged at iter {} after {:.1}s",
                    stats.iter,
                    started.elapsed().as_secs_f64()
                );
                return;
            }
        }
    }
    println!("no convergence within {probe_iters} iters ({:.1}s)", started.elapsed().as_secs_f64());
}
