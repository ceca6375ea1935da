//! Single-image inference: pad to the model's stride, predict, crop back,
//! and optionally export the guidance feature maps.

use std::path::{Path, PathBuf};

use crate::ckpt::load_checkpoint;
use crate::error::{MatteError, Result};
use crate::img::{AlphaMatte, Image};
use crate::model::Model;
use crate::pngio;
use crate::tensor::Tensor;

/// Input sides must be padded to a multiple of this before the forward pass.
pub const STRIDE: usize = 32;

/// Mirror-maps index `i` into [0, n): 0,1,..,n-1,n-1,..,1,0 repeating. Total
/// for any pad amount, so even tiny images reach the stride.
fn mirror(i: usize, n: usize) -> usize {
    let k = i % (2 * n);
    if k < n {
        k
    } else {
        2 * n - 1 - k
    }
}

/// Reflect-pads on the bottom and right up to the next multiples of
/// `STRIDE`, so cropping the output back is a plain top-left slice.
pub fn pad_to_stride(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let nh = h.div_ceil(STRIDE) * STRIDE;
    let nw = w.div_ceil(STRIDE) * STRIDE;
    if nh == h && nw == w {
        return img.clone();
    }
    let mut out = Image::zeros(nh, nw);
    for c in 0..Image::CHANNELS {
        for y in 0..nh {
            for x in 0..nw {
                out.set(c, y, x, img.get(c, mirror(y, h), mirror(x, w)));
            }
        }
    }
    out
}

fn crop_alpha(a: &AlphaMatte, h: usize, w: usize) -> AlphaMatte {
    let mut out = AlphaMatte::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, a.get(y, x));
        }
    }
    out
}

fn predict(
    model: &Model,
    image: &Image,
    want_taps: bool,
) -> Result<(AlphaMatte, Option<Vec<(String, Tensor)>>)> {
    let padded = pad_to_stride(image);
    let out = model.infer_one(&padded, want_taps)?;
    Ok((crop_alpha(&out.alpha, image.height(), image.width()), out.taps))
}

/// Predicts the alpha matte for an image of any size.
pub fn predict_alpha(model: &Model, image: &Image) -> Result<AlphaMatte> {
    predict(model, image, false).map(|(alpha, _)| alpha)
}

/// First channel of the first sample, min-max normalized to [0, 1]; a
/// constant plane maps to zeros.
fn normalized_plane(t: &Tensor) -> AlphaMatte {
    let plane = t.plane(0, 0);
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 {
        plane.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; plane.len()]
    };
    AlphaMatte::from_data(t.height(), t.width(), data).expect("normalized to [0, 1]")
}

fn tap_path(out: &Path, name: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("alpha");
    out.with_file_name(format!("{stem}-{name}.png"))
}

/// CLI entry: loads a checkpoint, mattes one image, writes the 8-bit alpha
/// PNG, and with `export_taps` also writes every semantic tap (s1..s5) and
/// gate map (g1..gk) min-max normalized at its native resolution, named
/// `<out-stem>-s1.png` and so on.
pub fn run_inference(
    checkpoint: &Path,
    image_path: &Path,
    out_path: &Path,
    export_taps: bool,
) -> Result<()> {
    let (model, _, _) = load_checkpoint(checkpoint)?;
    let image = pngio::read_image(image_path)?;
    let (alpha, taps) = predict(&model, &image, export_taps)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    pngio::write_alpha(out_path, &alpha)?;
    if export_taps {
        let taps = taps.ok_or_else(|| MatteError::invalid("infer", "tap export missing"))?;
        for (name, tensor) in &taps {
            pngio::write_alpha(&tap_path(out_path, name), &normalized_plane(tensor))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckpt::save_checkpoint;
    use crate::model::{FusionMode, ModelConfig};
    use crate::synth::synth_background;
    use tempfile::tempdir;

    fn tiny_model(taps: Vec<usize>) -> Model {
        let config = ModelConfig {
            encoder_widths: [3, 4, 5, 6, 7],
            ppm_bins: vec![1, 2],
            scb_channels: 6,
            hrdb_channels: 5,
            guidance_taps: taps,
            fusion: FusionMode::Rep,
        };
        Model::new(config, 7).unwrap()
    }

    #[test]
    fn padding_reflects_and_keeps_multiples_unchanged() {
        let img = synth_background(1, 40);
        let padded = pad_to_stride(&img);
        assert_eq!((padded.height(), padded.width()), (64, 64));
        // Bottom pad mirrors the last rows back up.
        assert_eq!(padded.get(0, 40, 3), img.get(0, 39, 3));
        assert_eq!(padded.get(0, 41, 3), img.get(0, 38, 3));
        assert_eq!(padded.get(1, 10, 42), img.get(1, 10, 37));
        let exact = synth_background(1, 32);
        assert_eq!(pad_to_stride(&exact).data(), exact.data());
    }

    #[test]
    fn tiny_inputs_pad_with_wrapped_mirror() {
        let full = synth_background(2, 32);
        let mut small = Image::zeros(5, 5);
        for c in 0..Image::CHANNELS {
            for y in 0..5 {
                for x in 0..5 {
                    small.set(c, y, x, full.get(c, y, x));
                }
            }
        }
        let padded = pad_to_stride(&small);
        assert_eq!(padded.height(), 32);
        // Period-10 mirror: rows 0..5,4..0 repeat, so row 10 replays row 0.
        assert_eq!(padded.get(0, 10, 2), small.get(0, 0, 2));
        assert_eq!(padded.get(0, 9, 2), small.get(0, 0, 2));
    }

    #[test]
    fn prediction_matches_input_size() {
        let model = tiny_model(vec![1, 3]);
        let img = synth_background(3, 100);
        let alpha = predict_alpha(&model, &img).unwrap();
        assert_eq!((alpha.height(), alpha.width()), (100, 100));
        assert!(alpha.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn inference_writes_alpha_and_tap_images() {
        let dir = tempdir().unwrap();
        let model = tiny_model(vec![1, 3, 5]);
        save_checkpoint(&dir.path().join("ckpt"), &model, 0, None).unwrap();
        let image_path = dir.path().join("input.png");
        pngio::write_image(&image_path, &synth_background(4, 48)).unwrap();

        let out = dir.path().join("matte.png");
        run_inference(&dir.path().join("ckpt"), &image_path, &out, true).unwrap();
        let alpha = pngio::read_alpha(&out).unwrap();
        assert_eq!((alpha.height(), alpha.width()), (48, 48));
        for name in ["s1", "s2", "s3", "s4", "s5", "g1", "g2", "g3"] {
            assert!(dir.path().join(format!("matte-{name}.png")).exists(), "missing {name}");
        }
        assert!(!dir.path().join("matte-g4.png").exists());
    }

    #[test]
    fn normalization_handles_constant_planes() {
        let flat = normalized_plane(&Tensor::full(1, 1, 3, 3, 0.7));
        assert!(flat.data().iter().all(|&v| v == 0.0));
        let ramp = normalized_plane(&Tensor::from_vec(1, 1, 1, 3, vec![2.0, 3.0, 4.0]));
        assert_eq!(ramp.data(), &[0.0, 0.5, 1.0]);
    }
}
