//! 2-D cross-correlation over `H x W x C` images with `K x K x (C/groups) x F`
//! kernels, lowered to GEMM through an im2col buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding so the output is `ceil(H / stride)` by `ceil(W / stride)`;
    /// an odd total is split with the smaller half on top/left.
    Same,
    Valid,
    /// Symmetric zero padding of the given width on every side.
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: Padding) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Resolved sizes of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub filters: usize,
    pub groups: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_padding(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(len);
    (total / 2, out)
}

impl ConvGeometry {
    pub fn new(input: [usize; 3], kernel_shape: [usize; 4], params: &ConvParams) -> Result<Self> {
        let [in_h, in_w, in_c] = input;
        let [kh, kw, kc, filters] = kernel_shape;
        let ConvParams {
            stride,
            padding,
            groups,
        } = *params;
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be >= 1"));
        }
        if groups == 0 || in_c % groups != 0 || filters % groups != 0 {
            return Err(Error::invalid(format!(
                "groups={groups} must divide channels ({in_c}) and filters ({filters})"
            )));
        }
        if kh != kw || kh == 0 {
            return Err(Error::invalid(format!(
                "kernel must be square, got {kh}x{kw}"
            )));
        }
        if kc != in_c / groups {
            return Err(Error::invalid(format!(
                "channel mismatch: input has {in_c} channels ({groups} groups), kernel expects {kc} per group"
            )));
        }
        let k = kh;
        let (pad_top, pad_left, out_h, out_w) = match padding {
            Padding::Same => {
                let (pt, oh) = same_padding(in_h, k, stride);
                let (pl, ow) = same_padding(in_w, k, stride);
                (pt, pl, oh, ow)
            }
            Padding::Valid | Padding::Explicit(_) => {
                let p = match padding {
                    Padding::Explicit(p) => p,
                    _ => 0,
                };
                if k > in_h + 2 * p || k > in_w + 2 * p {
                    return Err(Error::invalid(format!(
                        "kernel {k}x{k} larger than padded input {}x{}",
                        in_h + 2 * p,
                        in_w + 2 * p
                    )));
                }
                (
                    p,
                    p,
                    (in_h + 2 * p - k) / stride + 1,
                    (in_w + 2 * p - k) / stride + 1,
                )
            }
        };
        Ok(Self {
            in_h,
            in_w,
            in_c,
            kernel: k,
            filters,
            groups,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn group_channels(&self) -> usize {
        self.in_c / self.groups
    }

    fn group_filters(&self) -> usize {
        self.filters / self.groups
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.group_channels()
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.filters]
    }

    /// Calls `f(position, patch_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, group: usize, mut f: impl FnMut(usize, usize, usize)) {
        let cg = self.group_channels();
        let c0 = group * cg;
        let k = self.kernel;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let pos = oy * self.out_w + ox;
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                        if ix < 0 || ix >= self.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.in_w + ix as usize) * self.in_c + c0;
                        let dst = (ky * k + kx) * cg;
                        for c in 0..cg {
                            f(pos, dst + c, src + c);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T], group: usize, col: &mut [T]) {
        let p = self.patch_len();
        col.fill(T::zero());
        self.for_each_tap(group, |pos, j, src| col[pos * p + j] = input[src]);
    }

    fn col2im_add<T: Scalar>(&self, col: &[T], group: usize, grad: &mut [T]) {
        let p = self.patch_len();
        self.for_each_tap(group, |pos, j, src| {
            grad[src] = grad[src] + col[pos * p + j]
        });
    }
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 3]> {
    match *t.shape() {
        [h, w, c] => Ok([h, w, c]),
        ref s => Err(Error::invalid(format!("{what} must be HxWxC, got {s:?}"))),
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::invalid(format!(
            "kernels must be KxKxCxF, got {s:?}"
        ))),
    }
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    params: &ConvParams,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(dims3(input, "conv input")?, dims4(kernels)?, params)?;
    if bias.shape() != [g.filters] {
        return Err(Error::invalid(format!(
            "bias shape {:?} does not match {} filters",
            bias.shape(),
            g.filters
        )));
    }
    let positions = g.out_h * g.out_w;
    let p = g.patch_len();
    let fg = g.group_filters();
    let f = g.filters;
    let mut out = Tensor::zeros(&g.output_shape());
    let mut col = vec![T::zero(); positions * p];
    for group in 0..g.groups {
        g.im2col(input.data(), group, &mut col);
        T::gemm(
            positions,
            p,
            fg,
            T::one(),
            &col,
            (p, 1),
            &kernels.data()[group * fg..],
            (f, 1),
            T::zero(),
            &mut out.data_mut()[group * fg..],
            (f, 1),
        );
    }
    for row in out.data_mut().chunks_exact_mut(f) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    Ok(out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d_forward`]. Returns `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_output: &Tensor<T>,
    params: &ConvParams,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let grads = conv2d_backward_with(input, kernels, grad_output, params, true)?;
    Ok((grads.input.expect("requested"), grads.kernels, grads.bias))
}

/// Like [`conv2d_backward`], optionally skipping the input gradient (first
/// layer of a network).
pub fn conv2d_backward_with<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_output: &Tensor<T>,
    params: &ConvParams,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(dims3(input, "conv input")?, dims4(kernels)?, params)?;
    if grad_output.shape() != g.output_shape() {
        return Err(Error::invalid(format!(
            "grad_output shape {:?} does not match forward output {:?}",
            grad_output.shape(),
            g.output_shape()
        )));
    }
    let positions = g.out_h * g.out_w;
    let p = g.patch_len();
    let fg = g.group_filters();
    let f = g.filters;
    let dy = grad_output.data();

    let mut grad_bias = Tensor::zeros(&[f]);
    for row in dy.chunks_exact(f) {
        for (gb, &d) in grad_bias.data_mut().iter_mut().zip(row) {
            *gb = *gb + d;
        }
    }

    let mut grad_kernels = Tensor::zeros(kernels.shape());
    let mut grad_input = want_input.then(|| Tensor::zeros(input.shape()));
    let mut col = vec![T::zero(); positions * p];
    let mut dcol = if want_input {
        vec![T::zero(); positions * p]
    } else {
        Vec::new()
    };
    for group in 0..g.groups {
        g.im2col(input.data(), group, &mut col);
        // dW_g = col^T * dy_g
        T::gemm(
            p,
            positions,
            fg,
            T::one(),
            &col,
            (1, p),
            &dy[group * fg..],
            (f, 1),
            T::zero(),
            &mut grad_kernels.data_mut()[group * fg..],
            (f, 1),
        );
        if let Some(gi) = grad_input.as_mut() {
            // dcol = dy_g * W_g^T
            T::gemm(
                positions,
                fg,
                p,
                T::one(),
                &dy[group * fg..],
                (f, 1),
                &kernels.data()[group * fg..],
                (1, f),
                T::zero(),
                &mut dcol,
                (p, 1),
            );
            g.col2im_add(&dcol, group, gi.data_mut());
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        kernels: grad_kernels,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::fd::{finite_difference_grad, max_relative_error};
    use crate::rng::SeededRng;

    /// Direct summation over the zero-padded window; the reference the GEMM
    /// path is held to.
    fn direct_conv(
        input: &Tensor<f64>,
        kernels: &Tensor<f64>,
        bias: &Tensor<f64>,
        params: &ConvParams,
    ) -> Tensor<f64> {
        let [h, w, c] = dims3(input, "").unwrap();
        let [k, _, cg, f] = dims4(kernels).unwrap();
        let g = ConvGeometry::new([h, w, c], [k, k, cg, f], params).unwrap();
        let fg = f / params.groups;
        let mut out = Tensor::zeros(&g.output_shape());
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for fi in 0..f {
                    let grp = fi / fg;
                    let mut s = bias.data()[fi];
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cg {
                                s += input.at(&[iy as usize, ix as usize, grp * cg + ci])
                                    * kernels.at(&[ky, kx, ci, fi]);
                            }
                        }
                    }
                    out.data_mut()[(oy * g.out_w + ox) * f + fi] = s;
                }
            }
        }
        out
    }

    fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn identity_kernel() {
        let mut rng = SeededRng::new(5);
        let x = random(&[4, 6, 1], &mut rng);
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, &ConvParams::new(1, Padding::Same)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_on_3x3() {
        let x = Tensor::from_vec(&[3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let params = ConvParams::new(1, Padding::Same);
        let y = conv2d_forward(&x, &k, &b, &params).unwrap();
        assert_eq!(y.at(&[1, 1, 0]), 45.0);
        assert_eq!(y.at(&[0, 0, 0]), 12.0);
        assert_eq!(y, direct_conv(&x, &k, &b, &params));
    }

    #[test]
    fn same_padding_preserves_spatial_dims() {
        let mut rng = SeededRng::new(8);
        for k in [1, 3, 5, 7, 11] {
            let x = random(&[13, 12, 2], &mut rng);
            let w = random(&[k, k, 2, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let params = ConvParams::new(1, Padding::Same);
            let y = conv2d_forward(&x, &w, &b, &params).unwrap();
            assert_eq!(y.shape(), &[13, 12, 3]);
            let r = direct_conv(&x, &w, &b, &params);
            for (a, e) in y.data().iter().zip(r.data()) {
                assert!((a - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn gemm_path_matches_direct_summation() {
        let mut rng = SeededRng::new(21);
        let cases = [
            (
                [9, 9, 4],
                3,
                2,
                ConvParams::new(2, Padding::Same).with_groups(2),
            ),
            ([11, 10, 3], 5, 4, ConvParams::new(1, Padding::Valid)),
            (
                [8, 8, 4],
                3,
                6,
                ConvParams::new(1, Padding::Explicit(1)).with_groups(2),
            ),
            ([15, 15, 3], 11, 2, ConvParams::new(4, Padding::Valid)),
        ];
        for (shape, k, f, params) in cases {
            let x = random(&shape, &mut rng);
            let w = random(&[k, k, shape[2] / params.groups, f], &mut rng);
            let b = random(&[f], &mut rng);
            let y = conv2d_forward(&x, &w, &b, &params).unwrap();
            let r = direct_conv(&x, &w, &b, &params);
            assert_eq!(y.shape(), r.shape());
            for (a, e) in y.data().iter().zip(r.data()) {
                assert!((a - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn f32_matches_direct_summation() {
        let mut rng = SeededRng::new(2);
        let x = random(&[12, 12, 3], &mut rng);
        let w = random(&[5, 5, 3, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let params = ConvParams::new(1, Padding::Same);
        let y = conv2d_forward(&x.cast::<f32>(), &w.cast(), &b.cast(), &params).unwrap();
        let r = direct_conv(&x, &w, &b, &params);
        for (a, e) in y.data().iter().zip(r.data()) {
            assert!((*a as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn same_padding_keeps_224_side() {
        let x = Tensor::<f32>::zeros(&[224, 224, 3]);
        let w = Tensor::<f32>::zeros(&[5, 5, 3, 16]);
        let b = Tensor::<f32>::zeros(&[16]);
        let y = conv2d_forward(&x, &w, &b, &ConvParams::new(1, Padding::Same)).unwrap();
        assert_eq!(y.shape(), &[224, 224, 16]);
    }

    #[test]
    fn errors() {
        let x = Tensor::<f32>::zeros(&[4, 4, 2]);
        let b = Tensor::<f32>::zeros(&[1]);
        let wrong_c = Tensor::<f32>::zeros(&[3, 3, 3, 1]);
        let same = ConvParams::new(1, Padding::Same);
        assert!(conv2d_forward(&x, &wrong_c, &b, &same).is_err());
        let big = Tensor::<f32>::zeros(&[5, 5, 2, 1]);
        assert!(conv2d_forward(&x, &big, &b, &ConvParams::new(1, Padding::Valid)).is_err());
        let ok = Tensor::<f32>::zeros(&[3, 3, 2, 1]);
        assert!(conv2d_forward(&x, &ok, &b, &ConvParams::new(0, Padding::Same)).is_err());
        let bad_grad = Tensor::<f32>::zeros(&[4, 4, 2]);
        assert!(conv2d_backward(&x, &ok, &bad_grad, &same).is_err());
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let mut rng = SeededRng::new(4);
        let x = random(&[5, 5, 2], &mut rng);
        let w = random(&[3, 3, 2, 2], &mut rng);
        let params = ConvParams::new(1, Padding::Same);
        let (gi, gk, gb) = conv2d_backward(&x, &w, &Tensor::zeros(&[5, 5, 2]), &params).unwrap();
        for t in [gi, gk, gb] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn identity_kernel_backward() {
        let mut rng = SeededRng::new(6);
        let x = random(&[4, 5, 1], &mut rng);
        let g = random(&[4, 5, 1], &mut rng);
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let (gi, _, _) = conv2d_backward(&x, &k, &g, &ConvParams::new(1, Padding::Same)).unwrap();
        assert_eq!(gi, g);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = SeededRng::new(seed);
            let x = random(&[5, 5, 2], &mut rng);
            let w = random(&[3, 3, 2, 2], &mut rng);
            let b = random(&[2], &mut rng);
            let proj = random(&[5, 5, 2], &mut rng);
            let params = ConvParams::new(1, Padding::Same);
            let objective = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                let y = conv2d_forward(x, w, b, &params).unwrap();
                y.data()
                    .iter()
                    .zip(proj.data())
                    .map(|(a, r)| a * r)
                    .sum::<f64>()
            };
            let (gi, gk, gb) = conv2d_backward(&x, &w, &proj, &params).unwrap();
            let ni = finite_difference_grad(|t| objective(t, &w, &b), &x, 1e-5);
            let nk = finite_difference_grad(|t| objective(&x, t, &b), &w, 1e-5);
            let nb = finite_difference_grad(|t| objective(&x, &w, t), &b, 1e-5);
            assert!(max_relative_error(&gi, &ni) < 1e-4);
            assert!(max_relative_error(&gk, &nk) < 1e-4);
            assert!(max_relative_error(&gb, &nb) < 1e-4);
        }
    }
}
