//! Core image-domain types: RGB images, alpha mattes, tri-class maps,
//! alpha quantization, and compositing.
//!
//! Pixel values are f64 in [0, 1]. Images are stored planar (channel, row,
//! column) to match tensor layout. 8-bit conversion is centralized in
//! [`quantize`] / [`dequantize`] so the rounding convention is identical
//! everywhere.

use crate::error::{MatteError, Result};

/// Maps [0, 1] to 8-bit, rounding half away from zero: 0.5 -> 128.
pub fn quantize(a: f64) -> u8 {
    (a * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Maps 8-bit back to [0, 1]. `dequantize(quantize(a))` is within 1/510 of
/// `a` for in-range inputs, and quantize/dequantize round-trips exactly.
pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

/// Tri-class pixel label. The discriminant is the class channel index of the
/// semantic head, fixed as FG=0, BG=1, TR=2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Fg = 0,
    Bg = 1,
    Tr = 2,
}

impl Label {
    pub const COUNT: usize = 3;

    /// Class channel index in semantic-branch outputs.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Fg),
            1 => Some(Label::Bg),
            2 => Some(Label::Tr),
            _ => None,
        }
    }

    /// 8-bit code used in label PNGs.
    pub fn png_code(self) -> u8 {
        match self {
            Label::Fg => 255,
            Label::Bg => 0,
            Label::Tr => 128,
        }
    }

    pub fn from_png_code(v: u8) -> Result<Label> {
        match v {
            255 => Ok(Label::Fg),
            0 => Ok(Label::Bg),
            128 => Ok(Label::Tr),
            _ => Err(MatteError::invalid(
                "label png",
                format!("pixel value {v} is not one of 0/128/255"),
            )),
        }
    }
}

/// RGB image, planar layout: `data[c * h * w + y * w + x]`, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn zeros(h: usize, w: usize) -> Image {
        Image { h, w, data: vec![0.0; Self::CHANNELS * h * w] }
    }

    /// Builds from planar data; every value must lie in [0, 1].
    pub fn from_planar(h: usize, w: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != Self::CHANNELS * h * w {
            return Err(MatteError::invalid(
                "image",
                format!("expected {} values for {h}x{w} rgb, got {}", Self::CHANNELS * h * w, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(MatteError::invalid("image", format!("value {v} outside [0, 1]")));
        }
        Ok(Image { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v), "image value {v} outside [0, 1]");
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    /// Rounds every channel to 8 bits and back.
    pub fn quantized(&self) -> Image {
        Image {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| dequantize(quantize(v))).collect(),
        }
    }
}

/// Single-channel alpha matte, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatte {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl AlphaMatte {
    pub fn zeros(h: usize, w: usize) -> AlphaMatte {
        AlphaMatte { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<f64>) -> Result<AlphaMatte> {
        if data.len() != h * w {
            return Err(MatteError::invalid(
                "alpha matte",
                format!("expected {} values for {h}x{w}, got {}", h * w, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(MatteError::invalid("alpha matte", format!("value {v} outside [0, 1]")));
        }
        Ok(AlphaMatte { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v), "alpha value {v} outside [0, 1]");
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Rounds to 8 bits and back.
    pub fn quantized(&self) -> AlphaMatte {
        AlphaMatte {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| dequantize(quantize(v))).collect(),
        }
    }
}

/// Per-pixel tri-class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriClassMap {
    h: usize,
    w: usize,
    data: Vec<Label>,
}

impl TriClassMap {
    pub fn filled(h: usize, w: usize, l: Label) -> TriClassMap {
        TriClassMap { h, w, data: vec![l; h * w] }
    }

    pub fn from_data(h: usize, w: usize, data: Vec<Label>) -> Result<TriClassMap> {
        if data.len() != h * w {
            return Err(MatteError::invalid(
                "tri-class map",
                format!("expected {} labels for {h}x{w}, got {}", h * w, data.len()),
            ));
        }
        Ok(TriClassMap { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> Label {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, l: Label) {
        self.data[y * self.w + x] = l;
    }

    pub fn data(&self) -> &[Label] {
        &self.data
    }

    pub fn count(&self, l: Label) -> usize {
        self.data.iter().filter(|&&x| x == l).count()
    }
}

/// Alpha-composites `fg` over `bg`: `alpha * fg + (1 - alpha) * bg`.
///
/// All inputs must share dimensions. The output stays in [0, 1] because it is
/// a convex combination of in-range values.
pub fn composite(fg: &Image, bg: &Image, alpha: &AlphaMatte) -> Result<Image> {
    if fg.h != bg.h || fg.w != bg.w || fg.h != alpha.h || fg.w != alpha.w {
        return Err(MatteError::invalid(
            "composite",
            format!(
                "dimension mismatch: fg {}x{}, bg {}x{}, alpha {}x{}",
                fg.h, fg.w, bg.h, bg.w, alpha.h, alpha.w
            ),
        ));
    }
    let plane = fg.h * fg.w;
    let mut data = vec![0.0; Image::CHANNELS * plane];
    for c in 0..Image::CHANNELS {
        let (f, b) = (fg.plane(c), bg.plane(c));
        let out = &mut data[c * plane..(c + 1) * plane];
        for i in 0..plane {
            let a = alpha.data[i];
            out[i] = a * f[i] + (1.0 - a) * b[i];
        }
    }
    Ok(Image { h: fg.h, w: fg.w, data })
}

/// Default transition dilation radius: 15 pixels at a 512-pixel short side,
/// scaled linearly with `min(h, w)`, never below 1.
pub fn default_dilation_radius(h: usize, w: usize) -> usize {
    let r = (15.0 * h.min(w) as f64 / 512.0).round() as usize;
    r.max(1)
}

/// Derives the tri-class map from an alpha matte.
///
/// Pixels with alpha exactly 1 are FG, exactly 0 are BG, anything in between
/// is TR. The TR region is then dilated by `radius` in the Chebyshev metric
/// (square structuring element), and dilated TR overrides FG/BG.
pub fn derive_triclass(alpha: &AlphaMatte, radius: usize) -> TriClassMap {
    let (h, w) = (alpha.h, alpha.w);
    let mut tr = vec![false; h * w];
    for (i, &a) in alpha.data.iter().enumerate() {
        tr[i] = a > 0.0 && a < 1.0;
    }
    let tr = dilate_chebyshev(&tr, h, w, radius);
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h * w {
        data.push(if tr[i] {
            Label::Tr
        } else if alpha.data[i] == 1.0 {
            Label::Fg
        } else {
            Label::Bg
        });
    }
    TriClassMap { h, w, data }
}

/// Boolean dilation with a (2r+1)^2 square element, as two separable
/// max-window passes (horizontal then vertical).
fn dilate_chebyshev(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut horiz = vec![false; h * w];
    for y in 0..h {
        let row = &mask[y * w..(y + 1) * w];
        let out = &mut horiz[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            out[x] = row[lo..=hi].iter().any(|&b| b);
        }
    }
    let mut full = vec![false; h * w];
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            full[y * w + x] = (lo..=hi).any(|yy| horiz[yy * w + x]);
        }
    }
    full
}

/// One dataset record: the composited input plus everything needed for
/// supervision (ground-truth components and the derived tri-class map).
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub alpha: AlphaMatte,
    pub fg: Image,
    pub bg: Image,
    pub label: TriClassMap,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}
