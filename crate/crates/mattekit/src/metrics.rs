//! The four standard matting evaluation metrics: SAD, MSE, gradient error,
//! and connectivity error. All are computed over the whole image. SAD, Grad
//! and Conn carry the community's 1/1000 scaling; MSE is a plain mean.
//!
//! Each metric has an independent brute-force oracle in the test module;
//! implementations must agree with their oracle to 1e-6 on random mattes.

use crate::error::{MatteError, Result};
use crate::img::AlphaMatte;
use crate::parallel::map_indexed;

/// Half-width of the Gaussian-derivative filter: 3 sigma, rounded up.
pub fn gaussian_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_STEP: f64 = 0.1;
/// Distance tolerance in the connectivity degree: deviations under this
/// bound count as fully connected.
pub const CONN_TOLERANCE: f64 = 0.15;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
}

impl MetricReport {
    pub fn csv_header() -> &'static str {
        "image_id,SAD,MSE,Grad,Conn"
    }

    pub fn csv_row(&self, id: &str) -> String {
        format!("{id},{},{},{},{}", self.sad, self.mse, self.grad, self.conn)
    }
}

fn check_dims(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(MatteError::invalid(
            "metric input",
            format!(
                "size mismatch: {}x{} vs {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            ),
        ));
    }
    Ok(())
}

/// Sum of absolute differences, divided by 1000.
pub fn sad(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    check_dims(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum();
    Ok(s / 1000.0)
}

/// Mean squared difference over all pixels.
pub fn mse(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<f64> {
    check_dims(pred, gt)?;
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(s / pred.data().len() as f64)
}

/// Unit-sum Gaussian smoothing kernel and its exact derivative, both over
/// taps -radius..=radius.
fn gaussian_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>, usize) {
    let radius = gaussian_radius(sigma);
    let raw: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = raw.iter().sum();
    let smooth: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let deriv: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = i as f64 - radius as f64;
            -x / (sigma * sigma) * v / norm
        })
        .collect();
    (smooth, deriv, radius)
}

/// Horizontal 1D correlation with replicate borders.
fn correlate_rows(src: &[f64], h: usize, w: usize, k: &[f64], radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let x = (c as isize + t as isize - radius as isize).clamp(0, w as isize - 1);
                s += kv * src[r * w + x as usize];
            }
            out[r * w + c] = s;
        }
    }
    out
}

/// Vertical 1D correlation with replicate borders.
fn correlate_cols(src: &[f64], h: usize, w: usize, k: &[f64], radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let y = (r as isize + t as isize - radius as isize).clamp(0, h as isize - 1);
                s += kv * src[y as usize * w + c];
            }
            out[r * w + c] = s;
        }
    }
    out
}

fn gradient_magnitude(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let (smooth, deriv, radius) = gaussian_kernels(sigma);
    let gx = correlate_cols(&correlate_rows(src, h, w, &deriv, radius), h, w, &smooth, radius);
    let gy = correlate_rows(&correlate_cols(src, h, w, &deriv, radius), h, w, &smooth, radius);
    gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect()
}

/// Squared difference of Gaussian-derivative gradient magnitudes, summed
/// over all pixels and divided by 1000.
pub fn grad_metric(pred: &AlphaMatte, gt: &AlphaMatte, sigma: f64) -> Result<f64> {
    check_dims(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let mp = gradient_magnitude(pred.data(), h, w, sigma);
    let mg = gradient_magnitude(gt.data(), h, w, sigma);
    let s: f64 = mp.iter().zip(&mg).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / 1000.0)
}

/// Union-find with path halving and union by size.
struct Dsu {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Dsu {
        Dsu { parent: (0..n).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Per-pixel l values: the largest threshold for which the pixel belongs to
/// the largest 4-connected region where both mattes reach the threshold.
/// Pixels never connected keep 0. Size ties pick the component containing
/// the smallest row-major index.
fn connectivity_levels(pred: &[f64], gt: &[f64], h: usize, w: usize, step: f64) -> Vec<f64> {
    let mut l = vec![0.0; h * w];
    let steps = (1.0 / step).round() as usize;
    for k in 1..=steps {
        let theta = k as f64 * step;
        let mask: Vec<bool> =
            pred.iter().zip(gt).map(|(p, g)| *p >= theta && *g >= theta).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let mut dsu = Dsu::new(h * w);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                if !mask[i] {
                    continue;
                }
                if c + 1 < w && mask[i + 1] {
                    dsu.union(i, i + 1);
                }
                if r + 1 < h && mask[i + w] {
                    dsu.union(i, i + w);
                }
            }
        }
        // First scan hit of the maximal size is the smallest-index component.
        let mut best_root = usize::MAX;
        let mut best_size = 0;
        for i in 0..h * w {
            if mask[i] {
                let root = dsu.find(i);
                if dsu.size[root] > best_size {
                    best_size = dsu.size[root];
                    best_root = root;
                }
            }
        }
        for i in 0..h * w {
            if mask[i] && dsu.find(i) == best_root {
                l[i] = theta;
            }
        }
    }
    l
}

fn connectedness(alpha: f64, l: f64) -> f64 {
    let d = alpha - l;
    if d >= CONN_TOLERANCE {
        1.0 - d
    } else {
        1.0
    }
}

/// Connectivity error: absolute difference of per-pixel degrees of
/// connectedness, summed and divided by 1000.
pub fn conn_metric(pred: &AlphaMatte, gt: &AlphaMatte, step: f64) -> Result<f64> {
    check_dims(pred, gt)?;
    let (h, w) = (pred.height(), pred.width());
    let l = connectivity_levels(pred.data(), gt.data(), h, w, step);
    let s: f64 = (0..h * w)
        .map(|i| {
            let phi_p = connectedness(pred.data()[i], l[i]);
            let phi_g = connectedness(gt.data()[i], l[i]);
            (phi_p - phi_g).abs()
        })
        .sum();
    Ok(s / 1000.0)
}

/// All four metrics for one pair, at the default parameters.
pub fn report(pred: &AlphaMatte, gt: &AlphaMatte) -> Result<MetricReport> {
    Ok(MetricReport {
        sad: sad(pred, gt)?,
        mse: mse(pred, gt)?,
        grad: grad_metric(pred, gt, GRAD_SIGMA)?,
        conn: conn_metric(pred, gt, CONN_STEP)?,
    })
}

/// Per-image reports plus their arithmetic mean. Pairs are processed in
/// parallel; the mean is accumulated in index order.
pub fn evaluate(pairs: &[(&AlphaMatte, &AlphaMatte)]) -> Result<(Vec<MetricReport>, MetricReport)> {
    if pairs.is_empty() {
        return Err(MatteError::invalid("evaluation", "no image pairs"));
    }
    let reports: Vec<Result<MetricReport>> =
        map_indexed(pairs.len(), |i| report(pairs[i].0, pairs[i].1));
    let reports: Vec<MetricReport> = reports.into_iter().collect::<Result<_>>()?;
    let n = reports.len() as f64;
    let mut mean = MetricReport::default();
    for r in &reports {
        mean.sad += r.sad;
        mean.mse += r.mse;
        mean.grad += r.grad;
        mean.conn += r.conn;
    }
    mean.sad /= n;
    mean.mse /= n;
    mean.grad /= n;
    mean.conn /= n;
    Ok((reports, mean))
}
