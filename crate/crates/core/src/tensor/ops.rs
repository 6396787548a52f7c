//! Forward kernels and backward rules for tensor operations.

use std::rc::Rc;

use super::{note_empty_mask, Tensor};
use crate::error::{contract, Result};

/// Immutable 3x3 convolution weights, `[out_c][in_c][3][3]` row-major.
/// Kernels are fixed data, never optimization variables, so they sit
/// outside the differentiation graph.
#[derive(Clone)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    weights: Rc<Vec<f64>>,
}

impl ConvKernel {
    pub fn new(out_channels: usize, in_channels: usize, weights: Vec<f64>) -> Result<Self> {
        contract!(
            weights.len() == out_channels * in_channels * 9,
            "3x3 kernel for {out_channels}x{in_channels} channels needs {} weights, got {}",
            out_channels * in_channels * 9,
            weights.len()
        );
        Ok(ConvKernel {
            out_channels,
            in_channels,
            weights: Rc::new(weights),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn w(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((oc * self.in_channels + ic) * 3 + ky) * 3 + kx]
    }
}

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Tanh(Tensor),
    Conv2d(Tensor, ConvKernel),
    Concat(Vec<Tensor>),
    Gather(Tensor, Rc<Vec<Option<usize>>>),
    MaskedNmse {
        a: Tensor,
        b: Tensor,
        mask: Rc<Vec<bool>>,
        count: usize,
    },
    ClampUnit(Tensor),
    Sum(Tensor),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Tanh(a)
            | Op::Conv2d(a, _)
            | Op::Gather(a, _)
            | Op::ClampUnit(a)
            | Op::Sum(a) => vec![a],
            Op::Concat(parts) => parts.iter().collect(),
            Op::MaskedNmse { a, b, .. } => vec![a, b],
        }
    }

    /// Route `out_grad` to the parents via `sink(parent, delta)`.
    pub(crate) fn propagate(
        &self,
        out: &Tensor,
        out_grad: &[f64],
        sink: &mut dyn FnMut(&Tensor, &[f64]),
    ) {
        match self {
            Op::Add(a, b) => {
                sink(a, out_grad);
                sink(b, out_grad);
            }
            Op::Sub(a, b) => {
                sink(a, out_grad);
                let neg: Vec<f64> = out_grad.iter().map(|g| -g).collect();
                sink(b, &neg);
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let ga: Vec<f64> =
                        b.with_data(|bd| out_grad.iter().zip(bd).map(|(g, v)| g * v).collect());
                    sink(a, &ga);
                }
                if b.requires_grad() {
                    let gb: Vec<f64> =
                        a.with_data(|ad| out_grad.iter().zip(ad).map(|(g, v)| g * v).collect());
                    sink(b, &gb);
                }
            }
            Op::AddScalar(a) => sink(a, out_grad),
            Op::MulScalar(a, s) => {
                let ga: Vec<f64> = out_grad.iter().map(|g| g * s).collect();
                sink(a, &ga);
            }
            Op::Tanh(a) => {
                // d tanh = 1 - tanh^2, read off the output values
                let ga: Vec<f64> = out.with_data(|od| {
                    out_grad
                        .iter()
                        .zip(od)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect()
                });
                sink(a, &ga);
            }
            Op::Conv2d(input, kernel) => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let in_c = kernel.in_channels();
                let out_c = kernel.out_channels();
                let mut ga = vec![0.0; input.len()];
                for oc in 0..out_c {
                    for y in 0..h {
                        for x in 0..w {
                            let g = out_grad[(oc * h + y) * w + x];
                            if g == 0.0 {
                                continue;
                            }
                            for ic in 0..in_c {
                                for ky in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let sx = x as isize + kx as isize - 1;
                                        if sx < 0 || sx >= w as isize {
                                            continue;
                                        }
                                        ga[(ic * h + sy as usize) * w + sx as usize] +=
                                            g * kernel.w(oc, ic, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                }
                sink(input, &ga);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.len();
                    sink(p, &out_grad[offset..offset + n]);
                    offset += n;
                }
            }
            Op::Gather(src, mapping) => {
                let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
                let plane = h * w;
                let mut ga = vec![0.0; src.len()];
                for (pix, m) in mapping.iter().enumerate() {
                    if let Some(s) = m {
                        for ch in 0..c {
                            ga[ch * plane + s] += out_grad[ch * plane + pix];
                        }
                    }
                }
                sink(src, &ga);
            }
            Op::MaskedNmse { a, b, mask, count } => {
                if *count == 0 {
                    return;
                }
                let g = out_grad[0];
                let scale = 2.0 * g / *count as f64;
                let plane = mask.len();
                let diffs: Vec<f64> = a.with_data(|ad| {
                    b.with_data(|bd| {
                        ad.iter()
                            .zip(bd)
                            .enumerate()
                            .map(|(i, (av, bv))| {
                                if mask[i % plane] {
                                    scale * (av - bv)
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                });
                if a.requires_grad() {
                    sink(a, &diffs);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = diffs.iter().map(|d| -d).collect();
                    sink(b, &neg);
                }
            }
            Op::ClampUnit(a) => {
                // Straight-through strictly inside the open interval.
                let ga: Vec<f64> = a.with_data(|ad| {
                    out_grad
                        .iter()
                        .zip(ad)
                        .map(|(g, &x)| if x > 0.0 && x < 1.0 { *g } else { 0.0 })
                        .collect()
                });
                sink(a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![out_grad[0]; a.len()];
                sink(a, &ga);
            }
        }
    }
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        contract!(
            self.shape() == other.shape(),
            "{what}: shape {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x + s).collect());
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x * s).collect());
        Tensor::from_op(self.shape().to_vec(), data, Op::MulScalar(self.clone(), s))
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh_act(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x.tanh()).collect());
        Tensor::from_op(self.shape().to_vec(), data, Op::Tanh(self.clone()))
    }

    /// 3x3 cross-correlation with zero padding of one pixel, so spatial
    /// dims are preserved. Accumulation order is fixed: input channel,
    /// then kernel row, then kernel column.
    pub fn conv2d(&self, kernel: &ConvKernel) -> Result<Tensor> {
        contract!(
            self.shape().len() == 3,
            "conv2d input must be [C,H,W], got {:?}",
            self.shape()
        );
        contract!(
            self.shape()[0] == kernel.in_channels(),
            "conv2d channel mismatch: input has {}, kernel expects {}",
            self.shape()[0],
            kernel.in_channels()
        );
        let (h, w) = (self.shape()[1], self.shape()[2]);
        let out_c = kernel.out_channels();
        let data = self.with_data(|input| {
            let mut out = vec![0.0; out_c * h * w];
            for oc in 0..out_c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0;
                        for ic in 0..kernel.in_channels() {
                            for ky in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = x as isize + kx as isize - 1;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += input[(ic * h + sy as usize) * w + sx as usize]
                                        * kernel.w(oc, ic, ky, kx);
                                }
                            }
                        }
                        out[(oc * h + y) * w + x] = acc;
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(
            vec![out_c, h, w],
            data,
            Op::Conv2d(self.clone(), kernel.clone()),
        ))
    }

    /// Pure gather over the spatial plane: `out[c, p] = self[c, mapping[p]]`
    /// where mapping holds flat pixel indices, or 0 where `None`.
    /// Gradients scatter-add back to the gathered source pixels.
    pub fn gather_pixels(&self, mapping: &[Option<usize>]) -> Result<Tensor> {
        contract!(
            self.shape().len() == 3,
            "gather_pixels input must be [C,H,W], got {:?}",
            self.shape()
        );
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let plane = h * w;
        contract!(
            mapping.len() == plane,
            "gather mapping covers {} pixels, tensor plane has {plane}",
            mapping.len()
        );
        debug_assert!(mapping.iter().flatten().all(|&s| s < plane));
        let data = self.with_data(|src| {
            let mut out = vec![0.0; c * plane];
            for (pix, m) in mapping.iter().enumerate() {
                if let Some(s) = m {
                    for ch in 0..c {
                        out[ch * plane + pix] = src[ch * plane + s];
                    }
                }
            }
            out
        });
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Gather(self.clone(), Rc::new(mapping.to_vec())),
        ))
    }

    /// Clamp into \[0,1\] with straight-through gradient strictly inside
    /// the open interval and zero gradient outside.
    pub fn clamp_unit(&self) -> Tensor {
        let data = self.with_data(|a| a.iter().map(|x| x.clamp(0.0, 1.0)).collect());
        Tensor::from_op(self.shape().to_vec(), data, Op::ClampUnit(self.clone()))
    }

    /// Sum of all entries as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let s = self.with_data(|a| a.iter().sum());
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }
}

/// Stack `[C_i,H,W]` tensors along the channel dimension in argument
/// order; the gradient splits back to the matching parts.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    contract!(!parts.is_empty(), "concat_channels needs at least one part");
    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
    let mut channels = 0;
    for p in parts {
        contract!(
            p.shape().len() == 3,
            "concat_channels parts must be [C,H,W], got {:?}",
            p.shape()
        );
        contract!(
            p.shape()[1] == h && p.shape()[2] == w,
            "concat_channels spatial mismatch: {:?} vs [{h},{w}]",
            &p.shape()[1..]
        );
        channels += p.shape()[0];
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for p in parts {
        p.with_data(|d| data.extend_from_slice(d));
    }
    Ok(Tensor::from_op(
        vec![channels, h, w],
        data,
        Op::Concat(parts.to_vec()),
    ))
}

/// Mean of squared differences over masked entries: the sum over valid
/// positions (mask applied across channels) of `(a-b)^2`, divided by the
/// count of masked scalar entries. An all-false mask yields exactly 0 and
/// bumps the warning counter — a degenerate term contributes nothing.
pub fn masked_nmse(a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<Tensor> {
    contract!(
        a.shape() == b.shape(),
        "masked_nmse: shape {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    contract!(
        a.shape().len() == 3,
        "masked_nmse operands must be [C,H,W], got {:?}",
        a.shape()
    );
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let plane = h * w;
    contract!(
        mask.len() == plane,
        "masked_nmse mask covers {} pixels, plane has {plane}",
        mask.len()
    );
    let valid = mask.iter().filter(|&&m| m).count();
    let count = valid * c;
    if count == 0 {
        note_empty_mask();
        // No graph edge: an empty mask has zero gradient everywhere.
        return Tensor::scalar(0.0);
    }
    let sum = a.with_data(|ad| {
        b.with_data(|bd| {
            let mut acc = 0.0;
            for i in 0..ad.len() {
                if mask[i % plane] {
                    let d = ad[i] - bd[i];
                    acc += d * d;
                }
            }
            acc
        })
    });
    Ok(Tensor::from_op(
        vec![1],
        vec![sum / count as f64],
        Op::MaskedNmse {
            a: a.clone(),
            b: b.clone(),
            mask: Rc::new(mask.to_vec()),
            count,
        },
    ))
}
