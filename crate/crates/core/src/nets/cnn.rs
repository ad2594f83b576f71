//! Valid (no padding) strided convolutions for image-valued branch inputs.
//!
//! Images are stored flat, channel-major then row-major over space:
//! pixel `(c, y, x)` of a `C x H x W` image sits at `(c * H + y) * W + x`.
//! The flattened output of the last layer uses the same order.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Activation, NetError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// `out_ch x in_ch x kh x kw`, flat.
    pub kernels: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub act: Activation,
}

impl ConvLayer {
    pub fn he_normal<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        act: Activation,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let kernels = (0..out_ch * fan_in).map(|_| normal.sample(rng)).collect();
        ConvLayer {
            in_ch,
            out_ch,
            kernel,
            stride,
            kernels,
            bias: bias.then(|| vec![0.0; out_ch]),
            act,
        }
    }

    pub fn output_shape(&self, input: ImageShape) -> Result<ImageShape> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if input.channels != self.in_ch {
            return Err(NetError::Shape {
                what: "conv input channels",
                expected: self.in_ch,
                got: input.channels,
            });
        }
        if input.height < kh || input.width < kw || sh == 0 || sw == 0 {
            return Err(NetError::Shape {
                what: "conv input spatial size",
                expected: kh.max(kw),
                got: input.height.min(input.width),
            });
        }
        Ok(ImageShape {
            channels: self.out_ch,
            height: (input.height - kh) / sh + 1,
            width: (input.width - kw) / sw + 1,
        })
    }

    #[inline]
    fn k_index(&self, o: usize, i: usize, a: usize, b: usize) -> usize {
        ((o * self.in_ch + i) * self.kernel.0 + a) * self.kernel.1 + b
    }

    fn convolve(&self, input: &[f64], ishape: ImageShape, oshape: ImageShape, out: &mut [f64]) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        for o in 0..self.out_ch {
            let b0 = self.bias.as_ref().map_or(0.0, |b| b[o]);
            for y in 0..oshape.height {
                for x in 0..oshape.width {
                    let mut s = b0;
                    for i in 0..self.in_ch {
                        for a in 0..kh {
                            let row = (i * ishape.height + y * sh + a) * ishape.width + x * sw;
                            let kbase = self.k_index(o, i, a, 0);
                            for b in 0..kw {
                                s += self.kernels[kbase + b] * input[row + b];
                            }
                        }
                    }
                    out[(o * oshape.height + y) * oshape.width + x] = s;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub kernels: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnGrads {
    pub layers: Vec<ConvGrads>,
}

impl CnnGrads {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.kernels);
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.write_flat(&mut v);
        v
    }
}

#[derive(Debug, Clone)]
pub struct CnnTape {
    shapes: Vec<ImageShape>,
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

/// A chain of convolution layers over a fixed input image shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub input: ImageShape,
    pub layers: Vec<ConvLayer>,
}

impl Cnn {
    pub fn shapes(&self) -> Result<Vec<ImageShape>> {
        let mut shapes = vec![self.input];
        for l in &self.layers {
            let next = l.output_shape(*shapes.last().expect("nonempty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_len(&self) -> Result<usize> {
        Ok(self.shapes()?.last().expect("nonempty").len())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernels.len() + l.bias.as_ref().map_or(0, |b| b.len()))
            .sum()
    }

    pub fn write_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.kernels);
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
    }

    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let n = l.kernels.len();
            l.kernels.copy_from_slice(&src[k..k + n]);
            k += n;
            if let Some(b) = &mut l.bias {
                let n = b.len();
                b.copy_from_slice(&src[k..k + n]);
                k += n;
            }
        }
        k
    }

    /// Forward pass; each row of `x` is one flattened input image.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, CnnTape)> {
        if x.cols() != self.input.len() {
            return Err(NetError::Shape {
                what: "cnn input length",
                expected: self.input.len(),
                got: x.cols(),
            });
        }
        let shapes = self.shapes()?;
        let n = x.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (li, l) in self.layers.iter().enumerate() {
            let (ish, osh) = (shapes[li], shapes[li + 1]);
            let mut z = Matrix::zeros(n, osh.len());
            for s in 0..n {
                l.convolve(a.row(s), ish, osh, z.row_mut(s));
            }
            let next = z.map(|v| l.act.value(v));
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok((a, CnnTape { shapes, inputs, pre }))
    }

    /// Gradients of `Σ out_grad ⊙ output` w.r.t. the kernels and biases,
    /// plus the gradient with respect to the input images.
    pub fn backward(&self, tape: &CnnTape, out_grad: &Matrix) -> Result<(CnnGrads, Matrix)> {
        if tape.pre.len() != self.layers.len() {
            return Err(NetError::Tape("layer count"));
        }
        let last = tape.pre.last().ok_or(NetError::Tape("empty cnn"))?;
        if out_grad.shape() != last.shape() {
            return Err(NetError::Tape("output gradient shape"));
        }
        let n = out_grad.rows();
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = out_grad.clone();
        for (li, l) in self.layers.iter().enumerate().rev() {
            let (ish, osh) = (tape.shapes[li], tape.shapes[li + 1]);
            let z = &tape.pre[li];
            let input = &tape.inputs[li];
            let mut dz = g;
            for (d, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
                *d *= l.act.derivatives(zv).1;
            }
            let mut dk = vec![0.0; l.kernels.len()];
            let mut db = l.bias.as_ref().map(|b| vec![0.0; b.len()]);
            let mut din = Matrix::zeros(n, ish.len());
            let (kh, kw) = l.kernel;
            let (sh, sw) = l.stride;
            for s in 0..n {
                let dzs = dz.row(s);
                let xin = input.row(s);
                let dxs = din.row_mut(s);
                for o in 0..l.out_ch {
                    for y in 0..osh.height {
                        for x in 0..osh.width {
                            let gval = dzs[(o * osh.height + y) * osh.width + x];
                            if let Some(db) = db.as_mut() {
                                db[o] += gval;
                            }
                            for i in 0..l.in_ch {
                                for a in 0..kh {
                                    let row = (i * ish.height + y * sh + a) * ish.width + x * sw;
                                    let kbase = l.k_index(o, i, a, 0);
                                    for b in 0..kw {
                                        dk[kbase + b] += gval * xin[row + b];
                                        dxs[row + b] += gval * l.kernels[kbase + b];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            grads.push(ConvGrads { kernels: dk, bias: db });
            g = din;
        }
        grads.reverse();
        Ok((CnnGrads { layers: grads }, g))
    }
}
