//! Dense rank-4 tensors (batch, channel, height, width) in f64, plus the
//! reverse-mode tape built on top of them.

pub mod checkpoint;
pub mod conv;
pub mod numgrad;
pub mod resample;
pub mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};

/// Logical shape (B, C, H, W). All ops in the crate speak rank 4; vectors and
/// per-pixel maps are expressed with singleton dimensions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([b, c, h, w])
    }

    pub fn b(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major flat offset of (b, c, h, w).
    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

/// Immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Shape,
    data: Arc<[f64]>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::dim(format!(
                "buffer of {} elements does not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: data.into(), requires_grad: false })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.numel()].into(), requires_grad: false }
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Tensor { shape, data: vec![v; shape.numel()].into(), requires_grad: false }
    }

    /// Scalar carrier: shape 1x1x1x1.
    pub fn scalar(v: f64) -> Self {
        Tensor::filled(Shape::new(1, 1, 1, 1), v)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b() {
            for c in 0..shape.c() {
                for h in 0..shape.h() {
                    for w in 0..shape.w() {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data: data.into(), requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.idx(b, c, h, w)]
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape.numel(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape, data: data.into(), requires_grad: false }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "elementwise op on mismatched shapes {} and {}",
                self.shape, other.shape
            )));
        }
        let data: Vec<f64> =
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape, data: data.into(), requires_grad: false })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Integer class labels on a (B, H, W) grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u16>,
}

impl LabelMap {
    pub fn new(b: usize, h: usize, w: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != b * h * w {
            return Err(Error::dim(format!(
                "label buffer of {} elements does not fill {b}x{h}x{w}",
                data.len()
            )));
        }
        Ok(LabelMap { b, h, w, data })
    }

    pub fn zeros(b: usize, h: usize, w: usize) -> Self {
        LabelMap { b, h, w, data: vec![0; b * h * w] }
    }

    #[inline]
    pub fn idx(&self, b: usize, h: usize, w: usize) -> usize {
        (b * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, b: usize, h: usize, w: usize) -> u16 {
        self.data[self.idx(b, h, w)]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// One-hot encoding as (B, classes, H, W).
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        let shape = Shape::new(self.b, classes, self.h, self.w);
        let mut data = vec![0.0; shape.numel()];
        for b in 0..self.b {
            for h in 0..self.h {
                for w in 0..self.w {
                    let k = self.at(b, h, w) as usize;
                    if k >= classes {
                        return Err(Error::data(format!(
                            "label {k} outside class range 0..{classes}"
                        )));
                    }
                    data[shape.idx(b, k, h, w)] = 1.0;
                }
            }
        }
        Tensor::from_vec(shape, data)
    }

    /// Nearest-neighbour downsampling by an integer factor: output pixel
    /// (h, w) takes the label at (h*factor, w*factor), the top-left corner of
    /// each block.
    pub fn downsample_nearest(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || self.h % factor != 0 || self.w % factor != 0 {
            return Err(Error::dim(format!(
                "cannot downsample {}x{} labels by factor {factor}",
                self.h, self.w
            )));
        }
        let (oh, ow) = (self.h / factor, self.w / factor);
        let mut data = Vec::with_capacity(self.b * oh * ow);
        for b in 0..self.b {
            for h in 0..oh {
                for w in 0..ow {
                    data.push(self.at(b, h * factor, w * factor));
                }
            }
        }
        Ok(LabelMap { b: self.b, h: oh, w: ow, data })
    }
}
