use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Half-width of the Glorot uniform interval, `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> Result<f64> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(format!(
            "glorot fans must be positive (fan_in={fan_in}, fan_out={fan_out})"
        )));
    }
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Samples a tensor uniformly from `[-b, b]`, `b = glorot_bound(fan_in, fan_out)`.
pub fn glorot_uniform<T: Scalar>(
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    rng: &mut SeededRng,
) -> Result<Tensor<T>> {
    let bound = glorot_bound(fan_in, fan_out)?;
    if shape.contains(&0) {
        return Err(Error::invalid(format!("zero extent in shape {shape:?}")));
    }
    Ok(Tensor::from_fn(shape, |_| {
        let x = T::of(rng.uniform(-bound, bound));
        // rounding to f32 can land a hair outside the interval
        let b = T::of(bound);
        x.max(-b).min(b)
    }))
}
