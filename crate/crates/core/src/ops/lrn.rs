//! Cross-channel local response normalization:
//! `b_c = a_c / (k + alpha/n * sum_{c' in window(c)} a_{c'}^2)^beta`.
//!
//! The window covers channels `c - (n-1)/2 ..= c - (n-1)/2 + n - 1`, clipped to
//! the valid range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrnParams {
    pub k: f64,
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            k: 2.0,
            n: 5,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    fn window(&self, c: usize, channels: usize) -> (usize, usize) {
        let start = c as isize - ((self.n as isize - 1) / 2);
        let end = start + self.n as isize - 1;
        (
            start.max(0) as usize,
            end.min(channels as isize - 1) as usize,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("LRN window n must be >= 1"));
        }
        Ok(())
    }
}

/// Per-element denominators base `k + alpha/n * sum a^2`.
fn scales<T: Scalar>(x: &[T], channels: usize, p: &LrnParams) -> Result<Vec<T>> {
    let coef = T::of(p.alpha / p.n as f64);
    let k = T::of(p.k);
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks_exact(channels) {
        for c in 0..channels {
            let (lo, hi) = p.window(c, channels);
            let s: T = px[lo..=hi].iter().map(|&v| v * v).sum();
            let scale = k + coef * s;
            if scale <= T::zero() {
                return Err(Error::invalid(format!(
                    "LRN denominator {} is not positive (k = {})",
                    scale.to_f64().unwrap_or(f64::NAN),
                    p.k
                )));
            }
            out.push(scale);
        }
    }
    Ok(out)
}

fn channels_of<T: Scalar>(t: &Tensor<T>) -> Result<usize> {
    match t.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::invalid(format!(
            "LRN input has no channel axis: {:?}",
            t.shape()
        ))),
    }
}

pub fn lrn_forward<T: Scalar>(input: &Tensor<T>, params: &LrnParams) -> Result<Tensor<T>> {
    params.validate()?;
    let c = channels_of(input)?;
    let s = scales(input.data(), c, params)?;
    let beta = T::of(params.beta);
    let data = input
        .data()
        .iter()
        .zip(&s)
        .map(|(&a, &sc)| a * sc.powf(-beta))
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// `dx_j = dy_j S_j^-beta - 2 alpha beta / n * a_j * sum_{i: j in window(i)} dy_i a_i S_i^(-beta-1)`.
pub fn lrn_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &LrnParams,
    grad_output: &Tensor<T>,
) -> Result<Tensor<T>> {
    params.validate()?;
    if grad_output.shape() != input.shape() {
        return Err(Error::invalid(format!(
            "LRN grad shape {:?} != input shape {:?}",
            grad_output.shape(),
            input.shape()
        )));
    }
    let channels = channels_of(input)?;
    let s = scales(input.data(), channels, params)?;
    let beta = T::of(params.beta);
    let coef = T::of(2.0 * params.alpha * params.beta / params.n as f64);
    let mut grad = Vec::with_capacity(input.len());
    let mut weighted = vec![T::zero(); channels];
    for ((a, dy), sc) in input
        .data()
        .chunks_exact(channels)
        .zip(grad_output.data().chunks_exact(channels))
        .zip(s.chunks_exact(channels))
    {
        for i in 0..channels {
            weighted[i] = dy[i] * a[i] * sc[i].powf(-beta - T::one());
        }
        for j in 0..channels {
            let mut cross = T::zero();
            for (i, &wi) in weighted.iter().enumerate() {
                let (lo, hi) = params.window(i, channels);
                if (lo..=hi).contains(&j) {
                    cross = cross + wi;
                }
            }
            grad.push(dy[j] * sc[j].powf(-beta) - coef * a[j] * cross);
        }
    }
    Tensor::from_vec(input.shape(), grad)
}
