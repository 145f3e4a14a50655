//! Forward kernels and their vector-Jacobian products.
//!
//! Images are `[channels, height, width]`, row-major. The forward functions
//! here are usable on their own (evaluation, oracles); [`super::Tape`]
//! records them and calls the `*_backward` helpers during the reverse sweep.

use crate::error::{Error, Result};

use super::Tensor;

/// Spatial geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input_shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let [c, h, w] = *input_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [c,h,w], got {input_shape:?}"),
            ));
        };
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if kernel == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel}x{kernel} does not fit input {h}x{w} with pad {pad}"),
            ));
        }
        Ok(Self {
            in_channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            pad,
            out_height: (h + 2 * pad - kernel) / stride + 1,
            out_width: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c[m,n] = alpha * op(a)[m,k] * op(b)[k,n] + beta * c`, row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the row/column strides derived from (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.out_plane();
    let mut cols = vec![0.0; g.patch_len() * plane];
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    for c in 0..g.in_channels {
        let src = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[oy * g.out_width + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plane = g.out_plane();
    let mut out = vec![0.0; g.in_channels * g.height * g.width];
    let (h, w, k) = (g.height as isize, g.width as isize, g.kernel);
    for c in 0..g.in_channels {
        let dst = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[iy as usize * g.width + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_geometry(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [m, kc, kh, kw] = *kernel.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be [m,c,k,k], got {:?}", kernel.shape()),
        ));
    };
    if kh != kw {
        return Err(Error::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    let g = ConvGeometry::new(input.shape(), kh, stride, pad)?;
    if kc != g.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {kc} input channels, input has {}", g.in_channels),
        ));
    }
    if bias.shape() != [m] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} for {m} output channels", bias.shape()),
        ));
    }
    Ok(g)
}

/// Dense convolution `[c,h,w] * [m,c,k,k] + [m] -> [m,h',w']`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernel, bias, stride, pad)?;
    let m = kernel.shape()[0];
    let plane = g.out_plane();
    let mut out = vec![0.0; m * plane];
    for (o, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    if g.is_pointwise() {
        gemm(
            m,
            g.patch_len(),
            plane,
            kernel.data(),
            false,
            input.data(),
            false,
            &mut out,
            1.0,
        );
    } else {
        let cols = im2col(input.data(), &g);
        gemm(
            m,
            g.patch_len(),
            plane,
            kernel.data(),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
    }
    Ok(Tensor::from_parts(vec![m, g.out_height, g.out_width], out))
}

/// `(input, kernel, bias)` gradients, `None` where not requested.
pub(crate) type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

/// Gradients of [`conv2d`]; each `need_*` flag skips work for frozen inputs.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads {
    let m = kernel.shape()[0];
    let g = ConvGeometry::new(input.shape(), kernel.shape()[2], stride, pad)
        .expect("geometry validated on forward");
    let plane = g.out_plane();
    let [need_input, need_kernel, need_bias] = need;

    let cols = if need_kernel && !g.is_pointwise() {
        Some(im2col(input.data(), &g))
    } else {
        None
    };
    let d_kernel = need_kernel.then(|| {
        let mut dk = vec![0.0; m * g.patch_len()];
        let cols = cols.as_deref().unwrap_or(input.data());
        gemm(m, plane, g.patch_len(), grad_out, false, cols, true, &mut dk, 0.0);
        dk
    });
    let d_bias = need_bias.then(|| grad_out.chunks(plane).map(|c| c.iter().sum()).collect());
    let d_input = need_input.then(|| {
        let mut dcols = vec![0.0; g.patch_len() * plane];
        gemm(
            g.patch_len(),
            m,
            plane,
            kernel.data(),
            true,
            grad_out,
            false,
            &mut dcols,
            0.0,
        );
        if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, &g)
        }
    });
    (d_input, d_kernel, d_bias)
}

fn depthwise_check(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    multiplier: usize,
) -> Result<(usize, usize, usize, usize)> {
    let [m, h, w] = *input.shape() else {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("input must be [m,h,w], got {:?}", input.shape()),
        ));
    };
    if multiplier == 0 {
        return Err(Error::InvalidArgument("depthwise multiplier must be >= 1".into()));
    }
    let [count, kh, kw] = *kernel.shape() else {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel must be [m*(s-1),k,k], got {:?}", kernel.shape()),
        ));
    };
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "depthwise kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    if count != m * multiplier {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("{count} kernels for {m} channels x multiplier {multiplier}"),
        ));
    }
    if bias.shape() != [count] {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("bias shape {:?} for {count} kernels", bias.shape()),
        ));
    }
    Ok((m, h, w, kh))
}

/// Channel-wise convolution with same padding: output channel `j` convolves
/// input channel `j / multiplier` with kernel `j`.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, multiplier: usize) -> Result<Tensor> {
    let (m, h, w, k) = depthwise_check(input, kernel, bias, multiplier)?;
    let count = m * multiplier;
    let plane = h * w;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; count * plane];
    for j in 0..count {
        let src = input.channel(j / multiplier);
        let kern = &kernel.data()[j * k * k..(j + 1) * k * k];
        let dst = &mut out[j * plane..(j + 1) * plane];
        dst.fill(bias.data()[j]);
        if k == 1 {
            let wgt = kern[0];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += wgt * s);
            continue;
        }
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let wgt = kern[ky * k + kx];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * w..];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for x in x0..x1 {
                        drow[x] += wgt * srow[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![count, h, w], out))
}

pub(crate) fn depthwise_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    multiplier: usize,
    need: [bool; 3],
) -> ConvGrads {
    let [m, h, w] = *input.shape() else {
        unreachable!("validated on forward")
    };
    let k = kernel.shape()[1];
    let count = m * multiplier;
    let plane = h * w;
    let r = (k / 2) as isize;
    let [need_input, need_kernel, need_bias] = need;
    let mut d_input = need_input.then(|| vec![0.0; m * plane]);
    let mut d_kernel = need_kernel.then(|| vec![0.0; count * k * k]);
    let d_bias = need_bias.then(|| grad_out.chunks(plane).map(|c| c.iter().sum()).collect());

    for j in 0..count {
        let ch = j / multiplier;
        let src = input.channel(ch);
        let go = &grad_out[j * plane..(j + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - r;
            for kx in 0..k {
                let dx = kx as isize - r;
                let wgt = kernel.data()[(j * k + ky) * k + kx];
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize) as usize;
                let mut acc = 0.0;
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for x in x0..x1 {
                        let ix = base + (x as isize + dx) as usize;
                        let g = go[y * w + x];
                        acc += g * src[ix];
                        if let Some(di) = d_input.as_mut() {
                            di[ch * plane + ix] += g * wgt;
                        }
                    }
                }
                if let Some(dk) = d_kernel.as_mut() {
                    dk[(j * k + ky) * k + kx] += acc;
                }
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

/// `weight · input + bias` for `[K,d]` weight and `[d]` input.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [k, d] = *weight.shape() else {
        return Err(Error::shape(
            "linear",
            format!("weight must be [K,d], got {:?}", weight.shape()),
        ));
    };
    if input.shape() != [d] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} for weight [{k},{d}]", input.shape()),
        ));
    }
    if bias.shape() != [k] {
        return Err(Error::shape(
            "linear",
            format!("bias {:?} for weight [{k},{d}]", bias.shape()),
        ));
    }
    let x = input.data();
    let out = weight
        .data()
        .chunks(d)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect();
    Ok(Tensor::from_parts(vec![k], out))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Mean over the spatial plane: `[c,h,w] -> [c]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("input must be [c,h,w], got {:?}", input.shape()),
        ));
    }
    let c = input.shape()[0];
    let plane = input.numel() / c;
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect();
    Ok(Tensor::from_parts(vec![c], data))
}

/// Numerically stable softmax of a 1-D slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits[index] - lse
}

/// Position of the single 1 in a one-hot vector.
pub fn one_hot_index(one_hot: &[f64]) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in one_hot.iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::InvalidArgument(format!(
                "not a one-hot vector: entry {i} is {v}"
            )));
        }
    }
    hot.ok_or_else(|| Error::InvalidArgument("one-hot vector has no hot entry".into()))
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// `-Σ y_i log softmax(logits)_i` against a one-hot target.
pub fn softmax_cross_entropy(logits: &Tensor, one_hot: &Tensor) -> Result<f64> {
    if logits.shape() != one_hot.shape() || logits.rank() != 1 {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("logits {:?} vs target {:?}", logits.shape(), one_hot.shape()),
        ));
    }
    let label = one_hot_index(one_hot.data())?;
    Ok(-log_softmax_at(logits.data(), label))
}

/// Cross-entropy against a class index.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(-log_softmax_at(logits, label))
}

pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "l2_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Concatenation along the leading axis.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
    for t in parts {
        if &t.shape()[1..] != tail {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", first.shape(), t.shape()),
            ));
        }
        lead += t.shape()[0];
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn scale(a: &Tensor, factor: f64) -> Tensor {
    let data = a.data().iter().map(|x| x * factor).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_and_sum_kernels() {
        let out = conv2d(
            &t(&[1, 1, 1], vec![5.0]),
            &t(&[1, 1, 1, 1], vec![1.0]),
            &t(&[1], vec![0.0]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.shape(), [1, 1, 1]);
        assert_eq!(out.data(), [5.0]);

        let out = conv2d(
            &Tensor::full(&[1, 3, 3], 1.0),
            &Tensor::full(&[1, 1, 3, 3], 1.0),
            &Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.data(), [9.0]);
    }

    #[test]
    fn conv_output_geometry() {
        let out = conv2d(
            &Tensor::full(&[2, 7, 5], 1.0),
            &Tensor::full(&[3, 2, 3, 3], 1.0),
            &Tensor::zeros(&[3]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), [3, 4, 3]);
    }

    #[test]
    fn conv_rejects_mismatches() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let bad_channels = conv2d(&input, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1]), 1, 1);
        assert!(matches!(bad_channels, Err(Error::Shape { .. })));
        let too_big = conv2d(&input, &Tensor::zeros(&[1, 2, 7, 7]), &Tensor::zeros(&[1]), 1, 0);
        assert!(matches!(too_big, Err(Error::Shape { .. })));
        let bad_bias = conv2d(&input, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[2]), 1, 1);
        assert!(matches!(bad_bias, Err(Error::Shape { .. })));
        let zero_stride = conv2d(&input, &Tensor::zeros(&[1, 2, 3, 3]), &Tensor::zeros(&[1]), 0, 1);
        assert!(matches!(zero_stride, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn depthwise_scalar_and_zero_kernels() {
        let out = depthwise_conv2d(
            &Tensor::full(&[1, 2, 2], 1.0),
            &t(&[1, 1, 1], vec![2.0]),
            &Tensor::zeros(&[1]),
            1,
        )
        .unwrap();
        assert_eq!(out.data(), [2.0; 4]);

        let out = depthwise_conv2d(
            &Tensor::full(&[2, 4, 4], 3.0),
            &Tensor::zeros(&[2, 3, 3]),
            &Tensor::full(&[2], 1.0),
            1,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn depthwise_rejects_even_kernels_and_bad_counts() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let even = depthwise_conv2d(&input, &Tensor::zeros(&[2, 2, 2]), &Tensor::zeros(&[2]), 1);
        assert!(matches!(even, Err(Error::InvalidArgument(_))));
        let count = depthwise_conv2d(&input, &Tensor::zeros(&[3, 3, 3]), &Tensor::zeros(&[3]), 1);
        assert!(matches!(count, Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_identity_and_zero_map() {
        let eye = t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = t(&[2], vec![3.0, 4.0]);
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[2])).unwrap().data(), [3.0, 4.0]);
        let bias = t(&[2], vec![1.0, 2.0]);
        assert_eq!(
            linear(&x, &Tensor::zeros(&[2, 2]), &bias).unwrap().data(),
            [1.0, 2.0]
        );
        assert!(linear(&t(&[3], vec![0.0; 3]), &eye, &bias).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let uniform = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((uniform - std::f64::consts::LN_2).abs() < 1e-15);
        let ce = softmax_cross_entropy(&t(&[3], vec![2.0, 1.0, 0.0]), &t(&[3], vec![1.0, 0.0, 0.0])).unwrap();
        // ln(1 + e^-1 + e^-2)
        assert!((ce - 0.4076059644443806).abs() < 1e-12, "{ce}");
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn one_hot_validation() {
        let logits = t(&[2], vec![0.0, 0.0]);
        assert!(softmax_cross_entropy(&logits, &t(&[2], vec![0.5, 0.5])).is_err());
        assert!(softmax_cross_entropy(&logits, &t(&[2], vec![1.0, 1.0])).is_err());
        assert!(softmax_cross_entropy(&logits, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn l2_distance_basics() {
        let a = t(&[2], vec![3.0, 4.0]);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_distance(&a, &Tensor::zeros(&[2])).unwrap(), 5.0);
        assert!(l2_distance(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[101.0, 102.0, 103.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn global_pool_and_concat() {
        let x = t(&[2, 1, 2], vec![1.0, 3.0, -2.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), [2.0, 1.0]);
        let y = concat(&[&x, &Tensor::zeros(&[1, 1, 2])]).unwrap();
        assert_eq!(y.shape(), [3, 1, 2]);
        assert!(concat(&[&x, &Tensor::zeros(&[1, 2, 2])]).is_err());
    }
}
