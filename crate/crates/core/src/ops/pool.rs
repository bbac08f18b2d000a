use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output of [`maxpool_forward`]: pooled values plus, per output element, the
/// flat input index that won.
#[derive(Debug, Clone)]
pub struct Pooled<T: Scalar> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn pooled_size(len: usize, window: usize, stride: usize) -> usize {
    (len - window) / stride + 1
}

/// Channelwise max over `window x window` patches of an `H x W x C` tensor.
/// Ties go to the first element in row-major scan order.
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<Pooled<T>> {
    let [h, w, c] = match *input.shape() {
        [h, w, c] => [h, w, c],
        ref s => {
            return Err(Error::invalid(format!(
                "maxpool input must be HxWxC, got {s:?}"
            )))
        }
    };
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool window and stride must be >= 1"));
    }
    if window > h || window > w {
        return Err(Error::invalid(format!(
            "maxpool window {window} exceeds input {h}x{w}"
        )));
    }
    let (oh, ow) = (
        pooled_size(h, window, stride),
        pooled_size(w, window, stride),
    );
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = (oy * stride * w + ox * stride) * c + ch;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::from_vec(&[oh, ow, c], out)?,
        argmax,
    })
}

/// Routes each output gradient to the input position recorded in `argmax`.
pub fn maxpool_backward<T: Scalar>(
    argmax: &[usize],
    input_shape: &[usize],
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_output.len() {
        return Err(Error::invalid(format!(
            "maxpool grad has {} elements, forward produced {}",
            grad_output.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&i, &d) in argmax.iter().zip(grad_output.data()) {
        g[i] = g[i] + d;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::fd::{finite_difference_grad, max_relative_error};
    use crate::rng::SeededRng;

    #[test]
    fn two_by_two() {
        let x = Tensor::<f32>::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);
    }

    #[test]
    fn constant_input_ties_to_first() {
        let x = Tensor::<f32>::full(&[4, 4, 2], 0.5);
        let p = maxpool_forward(&x, 2, 2).unwrap();
        assert!(p.output.data().iter().all(|&v| v == 0.5));
        let g = maxpool_backward(&p.argmax, x.shape(), &Tensor::full(&[2, 2, 2], 1.0)).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                for c in 0..2 {
                    let expect = if y % 2 == 0 && xx % 2 == 0 { 1.0 } else { 0.0 };
                    assert_eq!(g.at(&[y, xx, c]), expect);
                }
            }
        }
    }

    #[test]
    fn window_too_large() {
        let x = Tensor::<f32>::zeros(&[2, 3, 1]);
        assert!(maxpool_forward(&x, 3, 1).is_err());
    }

    #[test]
    fn alexnet_sizes() {
        assert_eq!(pooled_size(55, 3, 2), 27);
        assert_eq!(pooled_size(27, 3, 2), 13);
        assert_eq!(pooled_size(13, 3, 2), 6);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(77);
        let x = Tensor::from_fn(&[6, 6, 3], |_| rng.uniform(-1.0, 1.0));
        let proj = Tensor::from_fn(&[2, 2, 3], |_| rng.uniform(-1.0, 1.0));
        let p = maxpool_forward(&x, 3, 2).unwrap();
        let analytic = maxpool_backward(&p.argmax, x.shape(), &proj).unwrap();
        let numeric = finite_difference_grad(
            |t| {
                let y = maxpool_forward(t, 3, 2).unwrap().output;
                y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
            },
            &x,
            1e-6,
        );
        assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }
}
