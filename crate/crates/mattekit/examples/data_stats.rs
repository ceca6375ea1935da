//! Scratch probe: per-sample alpha composition of the toy dataset.
//! Usage: data_stats <seed>

use mattekit::img::Label;
use mattekit::synth::{assemble_dataset, SynthConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
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
    let (train, _) = assemble_dataset(&synth, dir.path()).unwrap();
    for (i, s) in train.iter().enumerate() {
        let a = s.alpha.data();
        let n = a.len() as f64;
        let frac = a.iter().filter(|&&v| v > 0.0 && v < 1.0).count() as f64 / n;
        let fg = a.iter().filter(|&&v| v == 1.0).count() as f64 / n;
        let mean = a.iter().sum::<f64>() / n;
        let tr = s.label.data().iter().filter(|&&l| l == Label::Tr).count() as f64 / n;
        println!(
            "seed {seed} sample {i}: frac_alpha {frac:.3}  fg {fg:.3}  mean {mean:.3}  tr_band {tr:.3}"
        );
    }
}
