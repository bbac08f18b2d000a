//! Bilinear resampling with half-pixel centres (align-corners = false):
//! destination pixel `d` samples source coordinate `(d + 0.5) * in / out - 0.5`,
//! clamped to the image, and interpolates as `a + (b - a) * t` so constant
//! images stay exactly constant.

/// One interpolation tap along an axis.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f32,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                t: (src - lo as f64) as f32,
            }
        })
        .collect()
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Resizes an interleaved `height x width x channels` image.
pub fn resize_bilinear(
    src: &[f32],
    (height, width, channels): (usize, usize, usize),
    (out_h, out_w): (usize, usize),
) -> Vec<f32> {
    assert_eq!(src.len(), height * width * channels, "source buffer size");
    let ys = taps(height, out_h);
    let xs = taps(width, out_w);
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    let px = |y: usize, x: usize, c: usize| src[(y * width + x) * channels + c];
    for ty in &ys {
        for tx in &xs {
            for c in 0..channels {
                let top = lerp(px(ty.lo, tx.lo, c), px(ty.lo, tx.hi, c), tx.t);
                let bottom = lerp(px(ty.hi, tx.lo, c), px(ty.hi, tx.hi, c), tx.t);
                out.push(lerp(top, bottom, ty.t));
            }
        }
    }
    out
}
