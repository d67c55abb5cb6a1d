use rayon::prelude::*;

use super::{sigmoid, ConvWeights, Element, Result, Shape, Tensor, TensorError};

/// `floor((size + 2*padding - kernel) / stride) + 1`, or `None` when no
/// output pixel fits.
pub fn conv_output_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Element>(input: &Tensor<T>, w: &ConvWeights<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(input.shape(), w, stride, padding)?;
    let (cin, cout, kh, kw) = (w.in_channels, w.out_channels, w.kernel_h, w.kernel_w);

    // (ky, kx, in, out) so the innermost loop walks contiguous output channels
    let mut packed = vec![T::zero(); w.values.len()];
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    packed[((ky * kw + kx) * cin + i) * cout + o] = w.values[w.index(o, i, ky, kx)];
                }
            }
        }
    }

    let out_shape = geom.output;
    let row_len = out_shape.width * cout;
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(row_len).enumerate().for_each(|(oy, row)| {
        for ox in 0..out_shape.width {
            let acc = &mut row[ox * cout..(ox + 1) * cout];
            if let Some(b) = &w.bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..kh {
                let Some(iy) = geom.source(oy, ky, input.height()) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = geom.source(ox, kx, input.width()) else {
                        continue;
                    };
                    let px = input.pixel(iy, ix);
                    let tap = &packed[(ky * kw + kx) * cin * cout..(ky * kw + kx + 1) * cin * cout];
                    for (i, &xv) in px.iter().enumerate() {
                        let wrow = &tap[i * cout..(i + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a = *a + xv * wv;
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_raw(out_shape, out))
}

/// Pointwise convolution: a per-pixel matrix multiply.
pub fn conv1x1<T: Element>(input: &Tensor<T>, w: &ConvWeights<T>) -> Result<Tensor<T>> {
    if w.kernel_h != 1 || w.kernel_w != 1 {
        return Err(TensorError::NotPointwise {
            kernel_h: w.kernel_h,
            kernel_w: w.kernel_w,
        });
    }
    conv2d(input, w, 1, 0)
}

pub fn silu<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x * sigmoid(x))
}

/// Moves each `block x block` patch into channels. Output channel of input
/// channel `c` at sub-pixel offset `(dy, dx)` is `(dy * block + dx) * C + c`.
pub fn space_to_depth<T: Element>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if block == 0 || !s.height.is_multiple_of(block) || !s.width.is_multiple_of(block) {
        return Err(TensorError::NotDivisible {
            height: s.height,
            width: s.width,
            block,
        });
    }
    let out_shape = Shape::new(s.height / block, s.width / block, s.channels * block * block);
    let mut out = Vec::with_capacity(out_shape.numel());
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            for dy in 0..block {
                for dx in 0..block {
                    out.extend_from_slice(input.pixel(oy * block + dy, ox * block + dx));
                }
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Element>(input: &Tensor<T>, block: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if block == 0 || !s.channels.is_multiple_of(block * block) {
        return Err(TensorError::ChannelsNotDivisible {
            channels: s.channels,
            divisor: block * block,
        });
    }
    let c = s.channels / (block * block);
    let out_shape = Shape::new(s.height * block, s.width * block, c);
    let mut out = vec![T::zero(); out_shape.numel()];
    for y in 0..s.height {
        for x in 0..s.width {
            let px = input.pixel(y, x);
            for dy in 0..block {
                for dx in 0..block {
                    let src = &px[(dy * block + dx) * c..(dy * block + dx + 1) * c];
                    let start = ((y * block + dy) * out_shape.width + x * block + dx) * c;
                    out[start..start + c].copy_from_slice(src);
                }
            }
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Per-axis sampling table for x2 half-pixel bilinear resampling:
/// `(lower, upper, weight of upper)` per output index.
pub(crate) fn upsample_axis(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// x2 bilinear upsampling with half-pixel centers and border clamping.
pub fn bilinear_up2<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let rows = upsample_axis(s.height);
    let cols = upsample_axis(s.width);
    let out_shape = Shape::new(2 * s.height, 2 * s.width, s.channels);
    let mut out = Vec::with_capacity(out_shape.numel());
    for &(y0, y1, fy) in &rows {
        let fy = T::from_f64(fy).unwrap();
        for &(x0, x1, fx) in &cols {
            let fx = T::from_f64(fx).unwrap();
            let (p00, p01) = (input.pixel(y0, x0), input.pixel(y0, x1));
            let (p10, p11) = (input.pixel(y1, x0), input.pixel(y1, x1));
            for c in 0..s.channels {
                let top = p00[c] + (p01[c] - p00[c]) * fx;
                let bottom = p10[c] + (p11[c] - p10[c]) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Tensor::from_raw(out_shape, out)
}

/// 2x2 stride-2 max pooling.
pub fn maxpool_down2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool_with_argmax(input).map(|(t, _)| t)
}

/// Max pooling that also returns, per output element, the flat input index
/// of the winner. Ties go to the first element in row-major window order.
pub(crate) fn maxpool_with_argmax<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = input.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(TensorError::NotDivisible {
            height: s.height,
            width: s.width,
            block: 2,
        });
    }
    let out_shape = Shape::new(s.height / 2, s.width / 2, s.channels);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    for oy in 0..out_shape.height {
        for ox in 0..out_shape.width {
            for c in 0..s.channels {
                let mut best = input.index(2 * oy, 2 * ox, c);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = input.index(2 * oy + dy, 2 * ox + dx, c);
                    if input.data()[idx] > input.data()[best] {
                        best = idx;
                    }
                }
                out.push(input.data()[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_raw(out_shape, out), arg))
}

/// Channel concatenation in list order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(TensorError::EmptyInput)?.shape();
    for t in inputs {
        if !t.shape().same_spatial(&first) {
            return Err(TensorError::SpatialMismatch {
                expected: first,
                actual: t.shape(),
            });
        }
    }
    let channels: usize = inputs.iter().map(|t| t.channels()).sum();
    let out_shape = Shape::new(first.height, first.width, channels);
    let mut out = Vec::with_capacity(out_shape.numel());
    for p in 0..first.height * first.width {
        for t in inputs {
            let c = t.channels();
            out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(Tensor::from_raw(out_shape, out))
}

/// Elementwise sum, accumulated in list order.
pub fn sum_tensors<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = inputs.split_first().ok_or(TensorError::EmptyInput)?;
    let mut out = (*first).clone();
    for t in rest {
        if t.shape() != out.shape() {
            return Err(TensorError::ShapeMismatch {
                expected: out.shape(),
                actual: t.shape(),
            });
        }
        out.add_assign(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub output: Shape,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new<T: Element>(input: Shape, w: &ConvWeights<T>, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        if input.channels != w.in_channels {
            return Err(TensorError::ChannelMismatch {
                expected: w.in_channels,
                actual: input.channels,
            });
        }
        let err = || TensorError::NonPositiveOutput {
            input,
            kernel_h: w.kernel_h,
            kernel_w: w.kernel_w,
            stride,
            padding,
        };
        let oh = conv_output_dim(input.height, w.kernel_h, stride, padding).ok_or_else(err)?;
        let ow = conv_output_dim(input.width, w.kernel_w, stride, padding).ok_or_else(err)?;
        Ok(Self {
            output: Shape::new(oh, ow, w.out_channels),
            stride,
            padding,
        })
    }

    /// Input coordinate read by output position `o` at kernel offset `k`,
    /// or `None` inside the zero padding.
    #[inline]
    pub fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < len)
    }
}

// ---- reverse-mode kernels ----

pub(crate) struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weights: ConvWeights<T>,
}

pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    w: &ConvWeights<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let geom = ConvGeometry::new(input.shape(), w, stride, padding)?;
    if grad_out.shape() != geom.output {
        return Err(TensorError::ShapeMismatch {
            expected: geom.output,
            actual: grad_out.shape(),
        });
    }
    let (cin, kh, kw) = (w.in_channels, w.kernel_h, w.kernel_w);
    let mut gin = vec![T::zero(); input.shape().numel()];
    let mut gw = w.zeros_like();
    for oy in 0..geom.output.height {
        for ox in 0..geom.output.width {
            let g = grad_out.pixel(oy, ox);
            if let Some(gb) = gw.bias.as_mut() {
                for (b, &gv) in gb.iter_mut().zip(g) {
                    *b = *b + gv;
                }
            }
            for ky in 0..kh {
                let Some(iy) = geom.source(oy, ky, input.height()) else {
                    continue;
                };
                for kx in 0..kw {
                    let Some(ix) = geom.source(ox, kx, input.width()) else {
                        continue;
                    };
                    let base = input.index(iy, ix, 0);
                    for (o, &gv) in g.iter().enumerate() {
                        for i in 0..cin {
                            let wi = w.index(o, i, ky, kx);
                            gin[base + i] = gin[base + i] + gv * w.values[wi];
                            gw.values[wi] = gw.values[wi] + gv * input.data()[base + i];
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_raw(input.shape(), gin),
        weights: gw,
    })
}

pub(crate) fn silu_backward<T: Element>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let s = sigmoid(x);
            g * (s + x * s * (T::one() - s))
        })
        .collect();
    Tensor::from_raw(input.shape(), data)
}

pub(crate) fn bilinear_up2_backward<T: Element>(input_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let rows = upsample_axis(input_shape.height);
    let cols = upsample_axis(input_shape.width);
    let c = input_shape.channels;
    let mut gin = vec![T::zero(); input_shape.numel()];
    let at = |y: usize, x: usize| (y * input_shape.width + x) * c;
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        let fy = T::from_f64(fy).unwrap();
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let fx = T::from_f64(fx).unwrap();
            let g = grad_out.pixel(oy, ox);
            let taps = [
                (at(y0, x0), (T::one() - fy) * (T::one() - fx)),
                (at(y0, x1), (T::one() - fy) * fx),
                (at(y1, x0), fy * (T::one() - fx)),
                (at(y1, x1), fy * fx),
            ];
            for (base, wt) in taps {
                for ch in 0..c {
                    gin[base + ch] = gin[base + ch] + g[ch] * wt;
                }
            }
        }
    }
    Tensor::from_raw(input_shape, gin)
}

pub(crate) fn maxpool_backward<T: Element>(input_shape: Shape, argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gin = vec![T::zero(); input_shape.numel()];
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        gin[src] = gin[src] + g;
    }
    Tensor::from_raw(input_shape, gin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn random_weights(o: usize, i: usize, k: usize, seed: u64) -> ConvWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..o * i * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias = (0..o).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ConvWeights::new(o, i, k, k, values, Some(bias)).unwrap()
    }

    /// Six nested loops over (oy, ox, o, ky, kx, i), reading padding as zero.
    fn conv_oracle(x: &Tensor<f64>, w: &ConvWeights<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let oh = (x.height() + 2 * pad - w.kernel_h) / stride + 1;
        let ow = (x.width() + 2 * pad - w.kernel_w) / stride + 1;
        let mut out = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..w.out_channels {
                    let mut acc = w.bias.as_ref().map_or(0.0, |b| b[o]);
                    for ky in 0..w.kernel_h {
                        for kx in 0..w.kernel_w {
                            for i in 0..w.in_channels {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.height() as isize || ix >= x.width() as isize {
                                    continue;
                                }
                                acc += x.get(iy as usize, ix as usize, i)
                                    * w.values[((o * w.in_channels + i) * w.kernel_h + ky) * w.kernel_w + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let x = random(Shape::new(4, 4, 2), 1);
        let w = random_weights(3, 2, 3, 2);
        let y = conv2d(&x, &w, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 2, 3));
        let expected = conv_oracle(&x, &w, 2, 1);
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn conv2d_stem_shape() {
        // shape only; avoids allocating real filters for a 1280x768 pass
        let w = ConvWeights::<f32>::new(32, 3, 3, 3, vec![0.0; 864], None).unwrap();
        let g = ConvGeometry::new(Shape::new(1280, 768, 3), &w, 2, 1).unwrap();
        assert_eq!(g.output, Shape::new(640, 384, 32));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = random(Shape::new(3, 5, 1), 3);
        let w = ConvWeights::identity(1);
        assert_eq!(conv2d(&x, &w, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv2d_errors() {
        let x = random(Shape::new(2, 2, 2), 4);
        let w = random_weights(1, 3, 1, 5);
        assert!(matches!(conv2d(&x, &w, 1, 0), Err(TensorError::ChannelMismatch { .. })));
        let w = random_weights(1, 2, 3, 5);
        assert!(matches!(
            conv2d(&x, &w, 1, 0),
            Err(TensorError::NonPositiveOutput { .. })
        ));
        assert!(matches!(conv2d(&x, &w, 0, 1), Err(TensorError::ZeroStride)));
    }

    #[test]
    fn conv1x1_matches_general_conv() {
        let x = random(Shape::new(2, 2, 3), 6);
        let w = random_weights(2, 3, 1, 7);
        assert_eq!(conv1x1(&x, &w).unwrap(), conv2d(&x, &w, 1, 0).unwrap());
        assert_eq!(conv1x1(&x, &ConvWeights::identity(3)).unwrap(), x);
        let w3 = random_weights(2, 3, 3, 7);
        assert!(matches!(conv1x1(&x, &w3), Err(TensorError::NotPointwise { .. })));
    }

    #[test]
    fn conv1x1_table_shape() {
        let x = Tensor::<f32>::zeros(Shape::new(160, 96, 256)).unwrap();
        let w = ConvWeights::new(128, 256, 1, 1, vec![0.0; 128 * 256], None).unwrap();
        assert_eq!(conv1x1(&x, &w).unwrap().shape(), Shape::new(160, 96, 128));
    }

    #[test]
    fn silu_values() {
        let x = Tensor::<f64>::new(1, 1, 3, vec![0.0, 1.0, -20.0]).unwrap();
        let y = silu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((y.data()[1] - 0.731059).abs() < 1e-6);
        let expected = -20.0 / (1.0 + 20.0f64.exp());
        assert!((y.data()[2] - expected).abs() < 1e-20);
        assert!((y.data()[2] + 4.1e-8).abs() < 0.05e-8);
        let y32 = silu(&Tensor::<f32>::new(1, 1, 1, vec![-20.0]).unwrap());
        assert!(y32.data()[0].is_finite() && y32.data()[0] < 0.0);
    }

    /// Four loops over (y, x, c) writing each input value to its target slot.
    fn s2d_oracle(x: &Tensor<f64>, block: usize) -> Vec<f64> {
        let s = x.shape();
        let (oh, ow, oc) = (s.height / block, s.width / block, s.channels * block * block);
        let mut out = vec![0.0; oh * ow * oc];
        for y in 0..s.height {
            for xx in 0..s.width {
                for c in 0..s.channels {
                    let (dy, dx) = (y % block, xx % block);
                    let ch = (dy * block + dx) * s.channels + c;
                    out[((y / block) * ow + xx / block) * oc + ch] = x.get(y, xx, c);
                }
            }
        }
        out
    }

    #[test]
    fn space_to_depth_layout() {
        let x = Tensor::<f64>::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = space_to_depth(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = random(Shape::new(4, 4, 2), 8);
        assert_eq!(space_to_depth(&x, 2).unwrap().data(), s2d_oracle(&x, 2).as_slice());

        let big = Tensor::<f32>::zeros(Shape::new(320, 192, 64)).unwrap();
        assert_eq!(space_to_depth(&big, 2).unwrap().shape(), Shape::new(160, 96, 256));
        assert!(matches!(
            space_to_depth(&random(Shape::new(3, 4, 1), 0), 2),
            Err(TensorError::NotDivisible { .. })
        ));
    }

    /// Direct evaluation of the half-pixel sampling rule for one output pixel.
    fn bilinear_oracle(x: &Tensor<f64>, oy: usize, ox: usize, c: usize) -> f64 {
        let coord = |o: usize, n: usize| ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0).min((n - 1) as f64);
        let (sy, sx) = (coord(oy, x.height()), coord(ox, x.width()));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(x.height() - 1), (x0 + 1).min(x.width() - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        x.get(y0, x0, c) * (1.0 - fy) * (1.0 - fx)
            + x.get(y0, x1, c) * (1.0 - fy) * fx
            + x.get(y1, x0, c) * fy * (1.0 - fx)
            + x.get(y1, x1, c) * fy * fx
    }

    #[test]
    fn bilinear_matches_formula() {
        let x = Tensor::<f64>::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_up2(&x);
        assert_eq!(y.shape(), Shape::new(4, 4, 1));
        for oy in 0..4 {
            for ox in 0..4 {
                assert!((y.get(oy, ox, 0) - bilinear_oracle(&x, oy, ox, 0)).abs() < 1e-15);
            }
        }
        // corners clamp to the source corners
        assert_eq!(y.get(0, 0, 0), 0.0);
        assert_eq!(y.get(3, 3, 0), 3.0);
        assert_eq!(y.get(1, 1, 0), 0.75);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let one = Tensor::<f64>::full(Shape::new(1, 1, 3), 2.5).unwrap();
        let y = bilinear_up2(&one);
        assert_eq!(y.shape(), Shape::new(2, 2, 3));
        assert!(y.data().iter().all(|&v| v == 2.5));
        let c = Tensor::<f64>::full(Shape::new(3, 5, 2), -0.7).unwrap();
        assert!(bilinear_up2(&c).data().iter().all(|&v| (v + 0.7).abs() < 1e-15));
    }

    #[test]
    fn maxpool_matches_window_oracle() {
        let x = Tensor::<f64>::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool_down2(&x).unwrap().data(), &[4.0]);

        let x = random(Shape::new(6, 4, 3), 9);
        let y = maxpool_down2(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(3, 2, 3));
        for oy in 0..3 {
            for ox in 0..2 {
                for c in 0..3 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.get(2 * oy + dy, 2 * ox + dx, c))
                        .fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(y.get(oy, ox, c), m);
                }
            }
        }
        let c = Tensor::<f64>::full(Shape::new(4, 4, 1), 3.0).unwrap();
        assert_eq!(
            maxpool_down2(&c).unwrap(),
            Tensor::full(Shape::new(2, 2, 1), 3.0).unwrap()
        );
        assert!(maxpool_down2(&random(Shape::new(3, 4, 1), 0)).is_err());
    }

    #[test]
    fn concat_slices_back() {
        let a = random(Shape::new(3, 2, 1), 10);
        let b = random(Shape::new(3, 2, 4), 11);
        let c = random(Shape::new(3, 2, 2), 12);
        let y = concat_channels(&[&a, &b, &c]).unwrap();
        assert_eq!(y.shape(), Shape::new(3, 2, 7));
        assert_eq!(y.channel_slice(0, 1).unwrap(), a);
        assert_eq!(y.channel_slice(1, 4).unwrap(), b);
        assert_eq!(y.channel_slice(5, 2).unwrap(), c);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
        assert!(matches!(concat_channels::<f64>(&[]), Err(TensorError::EmptyInput)));
        let d = random(Shape::new(2, 2, 1), 13);
        assert!(matches!(
            concat_channels(&[&a, &d]),
            Err(TensorError::SpatialMismatch { .. })
        ));
    }

    #[test]
    fn sum_matches_scalar_loop() {
        let xs: Vec<_> = (0..3).map(|s| random(Shape::new(2, 3, 2), 20 + s)).collect();
        let y = sum_tensors(&xs.iter().collect::<Vec<_>>()).unwrap();
        for i in 0..12 {
            let mut acc = 0.0;
            for x in &xs {
                acc += x.data()[i];
            }
            assert_eq!(y.data()[i], acc);
        }
        let z = Tensor::zeros(xs[0].shape()).unwrap();
        assert_eq!(sum_tensors(&[&xs[0], &z]).unwrap(), xs[0]);
        assert_eq!(sum_tensors(&[&xs[0]]).unwrap(), xs[0]);
        let other = random(Shape::new(2, 3, 1), 0);
        assert!(matches!(
            sum_tensors(&[&xs[0], &other]),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
