//! Scratch probe: how fast does the toy fit converge at a given lr?
//! Usage: lr_probe <lr> <schedule_max> <probe_iters> [batch]

use std::time::Instant;

use mattekit::loss::{LossConfig, Reduction};
use mattekit::metrics;
use mattekit::model::ModelConfig;
use mattekit::synth::{assemble_dataset, SynthConfig};
use mattekit::train::{TrainConfig, Trainer};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args[1].parse().unwrap();
    let schedule_max: usize = args[2].parse().unwrap();
    let probe_iters: usize = args[3].parse().unwrap();
    let batch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = SynthConfig {
        seed: 907,
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
    let (train_samples, _) = assemble_dataset(&synth, &data).unwrap();
    println!("dataset ready: {} train samples", train_samples.len());

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
    let started = Instant::now();
    let mut anchor = f64::NAN;
    for _ in 0..probe_iters {
        let stats = trainer.step().unwrap();
        if stats.iter == 10 {
            anchor = stats.loss.total;
        }
        if stats.iter % 10 == 0 {
            let mut worst = 0.0f64;
            if stats.iter % 50 == 0 || stats.loss.total < 0.05 * anchor {
                for s in trainer.samples() {
                    let out = trainer.model().infer_one(&s.image, false).unwrap();
                    worst = worst.max(metrics::mse(&out.alpha, &s.alpha).unwrap());
                }
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
                println!("converged at iter {} after {:.1}s", stats.iter, started.elapsed().as_secs_f64());
                return;
            }
        }
    }
    println!("no convergence within {} iters ({:.1}s)", probe_iters, started.elapsed().as_secs_f64());
}
