//! Stateless forward/backward kernels behind the trainable layers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Passes the gradient where `x > 0`; the subgradient at exactly zero is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_output.shape() {
        return Err(Error::invalid(format!(
            "relu grad shape {:?} != input {:?}",
            grad_output.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn fc_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape()) {
        ([n, d_in], [w_in, d_out]) if d_in == w_in => Ok((*n, *d_in, *d_out)),
        (xs, ws) => Err(Error::invalid(format!(
            "fully connected shape mismatch: input {xs:?}, weights {ws:?}"
        ))),
    }
}

/// `x W + b` for `x: N x D_in`, `W: D_in x D_out`, `b: D_out`.
pub fn fc_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d_in, d_out) = fc_dims(x, w)?;
    if b.shape() != [d_out] {
        return Err(Error::invalid(format!(
            "fully connected bias {:?} != [{d_out}]",
            b.shape()
        )));
    }
    let mut y = Tensor::zeros(&[n, d_out]);
    for row in y.data_mut().chunks_exact_mut(d_out) {
        row.copy_from_slice(b.data());
    }
    T::gemm(
        n,
        d_in,
        d_out,
        T::one(),
        x.data(),
        (d_in, 1),
        w.data(),
        (d_out, 1),
        T::one(),
        y.data_mut(),
        (d_out, 1),
    );
    Ok(y)
}

pub struct FcGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn fc_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let (n, d_in, d_out) = fc_dims(x, w)?;
    if grad_output.shape() != [n, d_out] {
        return Err(Error::invalid(format!(
            "fully connected grad {:?} != [{n}, {d_out}]",
            grad_output.shape()
        )));
    }
    let dy = grad_output.data();
    let mut dx = Tensor::zeros(&[n, d_in]);
    T::gemm(
        n,
        d_out,
        d_in,
        T::one(),
        dy,
        (d_out, 1),
        w.data(),
        (1, d_out),
        T::zero(),
        dx.data_mut(),
        (d_in, 1),
    );
    let mut dw = Tensor::zeros(&[d_in, d_out]);
    T::gemm(
        d_in,
        n,
        d_out,
        T::one(),
        x.data(),
        (1, d_in),
        dy,
        (d_out, 1),
        T::zero(),
        dw.data_mut(),
        (d_out, 1),
    );
    let mut db = Tensor::zeros(&[d_out]);
    for row in dy.chunks_exact(d_out) {
        for (g, &d) in db.data_mut().iter_mut().zip(row) {
            *g = *g + d;
        }
    }
    Ok(FcGrads {
        input: dx,
        weights: dw,
        bias: db,
    })
}

/// Quantities cached by a train-mode batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (1/M) per-channel variance.
    pub var: Vec<T>,
}

fn channels<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("batch norm input has no channel axis"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::invalid(format!(
            "batch norm parameters {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

/// Normalizes with per-channel statistics over every axis but the last.
pub fn batchnorm_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = channels(x, gamma, beta)?;
    let m = x.len() / c;
    let mf = T::of(m as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    mean.iter_mut().for_each(|v| *v = *v / mf);
    let mut var = vec![T::zero(); c];
    for row in x.data().chunks_exact(c) {
        for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *acc = *acc + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v / mf);
    let eps = T::of(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for ((xr, nr), yr) in x
        .data()
        .chunks_exact(c)
        .zip(normalized.data_mut().chunks_exact_mut(c))
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let xh = (xr[ch] - mean[ch]) * inv_std[ch];
            nr[ch] = xh;
            yr[ch] = gamma.data()[ch] * xh + beta.data()[ch];
        }
    }
    Ok((
        y,
        BatchNormCache {
            normalized,
            inv_std,
            mean,
            var,
        },
    ))
}

pub fn batchnorm_forward_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = channels(x, gamma, beta)?;
    let eps = T::of(eps);
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma.data()[ch] / (running_var.data()[ch] + eps).sqrt())
        .collect();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(c) {
        for ch in 0..c {
            row[ch] = (row[ch] - running_mean.data()[ch]) * scale[ch] + beta.data()[ch];
        }
    }
    Ok(y)
}

pub struct BatchNormGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_output: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    if grad_output.shape() != cache.normalized.shape() {
        return Err(Error::invalid(format!(
            "batch norm grad {:?} != cached {:?}",
            grad_output.shape(),
            cache.normalized.shape()
        )));
    }
    let c = gamma.len();
    let m = grad_output.len() / c;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (dy, xh) in grad_output
        .data()
        .chunks_exact(c)
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for ch in 0..c {
            dgamma[ch] = dgamma[ch] + dy[ch] * xh[ch];
            dbeta[ch] = dbeta[ch] + dy[ch];
        }
    }
    let mf = T::of(m as f64);
    let mut dx = Tensor::zeros(grad_output.shape());
    for ((dxr, dy), xh) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(grad_output.data().chunks_exact(c))
        .zip(cache.normalized.data().chunks_exact(c))
    {
        for ch in 0..c {
            let k = gamma.data()[ch] * cache.inv_std[ch] / mf;
            dxr[ch] = k * (mf * dy[ch] - dbeta[ch] - xh[ch] * dgamma[ch]);
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::from_vec(&[c], dgamma)?,
        beta: Tensor::from_vec(&[c], dbeta)?,
    })
}

/// Row-wise softmax (max-shifted) and mean cross-entropy against `labels`.
pub fn softmax_xent_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        ref s => return Err(Error::invalid(format!("logits must be N x K, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} rows of logits",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0;
    for (row, (&l, pr)) in logits
        .data()
        .chunks_exact(k)
        .zip(labels.iter().zip(probs.data().chunks_exact(k)))
    {
        // -log p[l] = logsumexp(row) - row[l], kept in log space for stability
        let _ = pr;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse: f64 = row
            .iter()
            .map(|&v| (v - max).to_f64().unwrap().exp())
            .sum::<f64>()
            .ln()
            + max.to_f64().unwrap();
        loss += lse - row[l].to_f64().unwrap();
    }
    Ok((loss / n as f64, probs))
}

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let k = match *logits.shape() {
        [_, k] => k,
        ref s => return Err(Error::invalid(format!("logits must be N x K, got {s:?}"))),
    };
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    Ok(probs)
}

/// `(probs - onehot(labels)) / N`.
pub fn softmax_xent_backward<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, k) = match *probs.shape() {
        [n, k] if n == labels.len() => (n, k),
        ref s => {
            return Err(Error::invalid(format!(
                "probabilities {s:?} do not match {} labels",
                labels.len()
            )))
        }
    };
    let inv_n = T::of(1.0 / n as f64);
    let mut grad = probs.clone();
    for (row, &l) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        if l >= k {
            return Err(Error::invalid(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        row[l] = row[l] - T::one();
        row.iter_mut().for_each(|v| *v = *v * inv_n);
    }
    Ok(grad)
}
