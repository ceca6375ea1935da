//! PNG serialization. RGB images are 8-bit RGB PNGs; alpha mattes and
//! tri-class label maps are 8-bit grayscale (labels encode FG=255, TR=128,
//! BG=0). All quantization goes through [`crate::img::quantize`].

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::Result;
use crate::img::{dequantize, quantize, AlphaMatte, Image, Label, TriClassMap};

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(img.get(0, y, x)),
                quantize(img.get(1, y, x)),
                quantize(img.get(2, y, x)),
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = ImageReader::open(path)?.decode()?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = rgb.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[(c * h + y) * w + x] = dequantize(px[c]);
            }
        }
    }
    Image::from_planar(h, w, data)
}

pub fn write_alpha(path: &Path, alpha: &AlphaMatte) -> Result<()> {
    let (h, w) = (alpha.height(), alpha.width());
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([quantize(alpha.get(y, x))]));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn read_alpha(path: &Path) -> Result<AlphaMatte> {
    let gray = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray.pixels().map(|p| dequantize(p[0])).collect();
    AlphaMatte::from_data(h, w, data)
}

pub fn write_label(path: &Path, map: &TriClassMap) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let mut out = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, image::Luma([map.get(y, x).png_code()]));
        }
    }
    out.save(path)?;
    Ok(())
}

pub fn read_label(path: &Path) -> Result<TriClassMap> {
    let gray = ImageReader::open(path)?.decode()?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data: Result<Vec<Label>> = gray.pixels().map(|p| Label::from_png_code(p[0])).collect();
    TriClassMap::from_data(h, w, data?)
}
