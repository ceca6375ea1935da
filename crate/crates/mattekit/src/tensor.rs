//! Dense f64 tensors in (batch, channel, height, width) layout.
//!
//! The layout is plane-major: `data[((n*C + c)*H + y)*W + x]`, so a single
//! (n, c) plane is one contiguous row-major slice. Kernels partition work
//! over planes, which keeps parallel execution race-free and deterministic.

use crate::img::{AlphaMatte, Image, Label, TriClassMap};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, v: f64) -> Tensor {
        Tensor { n, c, h, w, data: vec![v; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Tensor { n, c, h, w, data }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, 1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.h * self.w;
        let off = (n * self.c + c) * p;
        &self.data[off..off + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.h * self.w;
        let off = (n * self.c + c) * p;
        &mut self.data[off..off + p]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        self.data[((n * self.c + c) * self.h + y) * self.w + x] = v;
    }

    /// Stacks RGB images into an (n, 3, h, w) tensor.
    pub fn from_images(imgs: &[&Image]) -> Tensor {
        assert!(!imgs.is_empty());
        let (h, w) = (imgs[0].height(), imgs[0].width());
        let mut data = Vec::with_capacity(imgs.len() * 3 * h * w);
        for img in imgs {
            assert_eq!((img.height(), img.width()), (h, w), "image size mismatch in batch");
            data.extend_from_slice(img.data());
        }
        Tensor::from_vec(imgs.len(), 3, h, w, data)
    }

    /// Stacks alpha mattes into an (n, 1, h, w) tensor.
    pub fn from_alphas(alphas: &[&AlphaMatte]) -> Tensor {
        assert!(!alphas.is_empty());
        let (h, w) = (alphas[0].height(), alphas[0].width());
        let mut data = Vec::with_capacity(alphas.len() * h * w);
        for a in alphas {
            assert_eq!((a.height(), a.width()), (h, w), "alpha size mismatch in batch");
            data.extend_from_slice(a.data());
        }
        Tensor::from_vec(alphas.len(), 1, h, w, data)
    }

    /// One-hot encodes tri-class maps into an (n, 3, h, w) tensor using the
    /// fixed class channel order FG=0, BG=1, TR=2.
    pub fn onehot_labels(maps: &[&TriClassMap]) -> Tensor {
        assert!(!maps.is_empty());
        let (h, w) = (maps[0].height(), maps[0].width());
        let mut t = Tensor::zeros(maps.len(), Label::COUNT, h, w);
        for (i, m) in maps.iter().enumerate() {
            assert_eq!((m.height(), m.width()), (h, w), "label size mismatch in batch");
            for (j, l) in m.data().iter().enumerate() {
                t.plane_mut(i, l.index())[j] = 1.0;
            }
        }
        t
    }

    /// 0/1 mask tensor marking pixels with the given label, (n, 1, h, w).
    pub fn label_mask(maps: &[&TriClassMap], label: Label) -> Tensor {
        assert!(!maps.is_empty());
        let (h, w) = (maps[0].height(), maps[0].width());
        let mut t = Tensor::zeros(maps.len(), 1, h, w);
        for (i, m) in maps.iter().enumerate() {
            let plane = t.plane_mut(i, 0);
            for (j, l) in m.data().iter().enumerate() {
                if *l == label {
                    plane[j] = 1.0;
                }
            }
        }
        t
    }

    /// Extracts batch element `n` of a 1-channel tensor as an alpha matte,
    /// clamping float drift into [0, 1].
    pub fn to_alpha(&self, n: usize) -> AlphaMatte {
        assert_eq!(self.c, 1, "to_alpha on multi-channel tensor");
        let data = self.plane(n, 0).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        AlphaMatte::from_data(self.h, self.w, data).expect("clamped values are in range")
    }
}
