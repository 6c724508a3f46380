use rand::Rng;

use crate::error::{Error, Result};
use crate::nnkit::Parameterized;
use crate::tensorgrid::{FeatureBatch, Shape4};

const K: usize = 3;
const PAD: usize = 1;

/// 3x3 convolution (cross-correlation) with zero padding 1 and stride 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `out x in x 3 x 3`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Input cached for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    input: FeatureBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![0.0; out_channels * in_channels * K * K],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, stride);
        let bound = (6.0 / (in_channels * K * K) as f64).sqrt();
        for w in &mut conv.weight {
            *w = rng.gen_range(-bound..bound);
        }
        conv
    }

    fn patch_len(&self) -> usize {
        self.in_channels * K * K
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * PAD - K) / self.stride + 1, (w + 2 * PAD - K) / self.stride + 1)
    }

    pub fn forward(&self, x: &FeatureBatch) -> Result<(FeatureBatch, ConvCache)> {
        let y = self.infer(x)?;
        Ok((y, ConvCache { input: x.clone() }))
    }

    pub fn infer(&self, x: &FeatureBatch) -> Result<FeatureBatch> {
        let s = x.shape();
        if s.c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, s.c
            )));
        }
        let (oh, ow) = self.output_size(s.h, s.w);
        let p = oh * ow;
        let kl = self.patch_len();
        let mut out = FeatureBatch::zeros(s.n, self.out_channels, oh, ow);
        let mut cols = vec![0.0; kl * p];
        for n in 0..s.n {
            im2col(x.item(n), s, self.stride, oh, ow, &mut cols);
            let dst = out.item_mut(n);
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(self.bias[o]);
            }
            // out (Cout x P) += W (Cout x KL) * cols (KL x P)
            unsafe {
                matrixmultiply::dgemm(
                    self.out_channels,
                    kl,
                    p,
                    1.0,
                    self.weight.as_ptr(),
                    kl as isize,
                    1,
                    cols.as_ptr(),
                    p as isize,
                    1,
                    1.0,
                    dst.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
        Ok(out)
    }

    pub fn backward(&self, cache: &ConvCache, grad_out: &FeatureBatch) -> Result<(FeatureBatch, ConvGrads)> {
        let s = cache.input.shape();
        let (oh, ow) = self.output_size(s.h, s.w);
        let gs = grad_out.shape();
        if gs != Shape4::new(s.n, self.out_channels, oh, ow) {
            return Err(Error::Shape(format!("conv grad_out {gs} does not match forward output")));
        }
        let p = oh * ow;
        let kl = self.patch_len();
        let mut grads = ConvGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.out_channels],
        };
        let mut grad_x = FeatureBatch::zeros(s.n, s.c, s.h, s.w);
        let mut cols = vec![0.0; kl * p];
        let mut gcols = vec![0.0; kl * p];
        for n in 0..s.n {
            let g = grad_out.item(n);
            for (o, chunk) in g.chunks(p).enumerate() {
                grads.bias[o] += chunk.iter().sum::<f64>();
            }
            im2col(cache.input.item(n), s, self.stride, oh, ow, &mut cols);
            unsafe {
                // gW (Cout x KL) += g (Cout x P) * cols^T (P x KL)
                matrixmultiply::dgemm(
                    self.out_channels,
                    p,
                    kl,
                    1.0,
                    g.as_ptr(),
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    grads.weight.as_mut_ptr(),
                    kl as isize,
                    1,
                );
                // gcols (KL x P) = W^T (KL x Cout) * g (Cout x P)
                matrixmultiply::dgemm(
                    kl,
                    self.out_channels,
                    p,
                    1.0,
                    self.weight.as_ptr(),
                    1,
                    kl as isize,
                    g.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    gcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            col2im(&gcols, s, self.stride, oh, ow, grad_x.item_mut(n));
        }
        Ok((grad_x, grads))
    }
}

impl Parameterized for Conv2d {
    fn param_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }

    fn params(&self) -> Vec<&[f64]> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.weight, &mut self.bias]
    }
}

fn im2col(item: &[f64], s: Shape4, stride: usize, oh: usize, ow: usize, cols: &mut [f64]) {
    let p = oh * ow;
    for c in 0..s.c {
        let plane = &item[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((c * K + ky) * K + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        *d = if ix < 0 || ix >= s.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], s: Shape4, stride: usize, oh: usize, ow: usize, item: &mut [f64]) {
    let p = oh * ow;
    for c in 0..s.c {
        let plane = &mut item[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((c * K + ky) * K + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let base = iy as usize * s.w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        if ix >= 0 && ix < s.w as isize {
                            plane[base + ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
