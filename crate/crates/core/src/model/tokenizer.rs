//! Tubelet extraction and RGB kernel adaptation.
//!
//! A `t×16×16×C` tubelet is flattened with index
//! `((dt·16 + dy)·16 + dx)·C + c` (channel fastest); tokens are ordered
//! `ti·S + py·(W/16) + px`.

use mmvt_tensor::{Element, Tensor};

use crate::error::{CoreError, Result};
use crate::model_spec::PATCH;

/// `[F, H, W, C]` → `[(F/t)·(H/16)·(W/16), t·256·C]`.
pub fn extract_tubelets<E: Element>(input: &Tensor<E>, tubelet_t: usize) -> Result<Tensor<E>> {
    let d = input.dims();
    if d.len() != 4 {
        return Err(CoreError::Geometry(format!("tubelet input must be [F,H,W,C], got {d:?}")));
    }
    let (f, h, w, c) = (d[0], d[1], d[2], d[3]);
    if tubelet_t == 0 || f % tubelet_t != 0 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(CoreError::Geometry(format!(
            "input {d:?} not divisible into {tubelet_t}×{PATCH}×{PATCH} tubelets"
        )));
    }
    let (nt, ny, nx) = (f / tubelet_t, h / PATCH, w / PATCH);
    let width = tubelet_t * PATCH * PATCH * c;
    let src = input.data();
    let mut out = Vec::with_capacity(nt * ny * nx * width);
    for ti in 0..nt {
        for py in 0..ny {
            for px in 0..nx {
                for dt in 0..tubelet_t {
                    for dy in 0..PATCH {
                        let row = ((ti * tubelet_t + dt) * h + py * PATCH + dy) * w + px * PATCH;
                        out.extend_from_slice(&src[row * c..(row + PATCH) * c]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![nt * ny * nx, width], out)?)
}

/// Averages an RGB embedding kernel `[hidden × t·256·3]` over its input
/// channels and tiles the mean to `target_channels`.
pub fn adapt_rgb_kernel<E: Element>(rgb: &Tensor<E>, target_channels: usize) -> Result<Tensor<E>> {
    let d = rgb.dims();
    if d.len() != 2 || !d[1].is_multiple_of(3 * PATCH * PATCH) {
        return Err(CoreError::Geometry(format!(
            "RGB kernel must be [hidden × t·256·3], got {d:?}"
        )));
    }
    if target_channels == 0 {
        return Err(CoreError::Invalid("target channel count must be positive".into()));
    }
    let taps = d[1] / 3;
    let three = E::from_f64(3.0);
    let mut out = Vec::with_capacity(d[0] * taps * target_channels);
    for row in rgb.data().chunks_exact(d[1]) {
        for tap in row.chunks_exact(3) {
            let mean = (tap[0] + tap[1] + tap[2]) / three;
            out.extend(std::iter::repeat_n(mean, target_channels));
        }
    }
    Ok(Tensor::new(vec![d[0], taps * target_channels], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tubelet_layout() {
        let x = Tensor::<f64>::from_fn(vec![4, 32, 48, 2], |i| i as f64);
        let p = extract_tubelets(&x, 2).unwrap();
        assert_eq!(p.dims(), &[2 * 2 * 3, 2 * 256 * 2]);
        // token (ti=1, py=1, px=2), tap (dt=1, dy=3, dx=5), channel 1
        let token = 3 * 2 + 3 + 2;
        let tap = ((16 + 3) * 16 + 5) * 2 + 1;
        let want = ((((2 + 1) * 32 + 16 + 3) * 48 + 32 + 5) * 2 + 1) as f64;
        assert_eq!(p.data()[token * 1024 + tap], want);
    }

    #[test]
    fn adaptation_examples() {
        let ones = Tensor::<f64>::full(vec![4, 2 * 256 * 3], 1.0);
        let a = adapt_rgb_kernel(&ones, 2).unwrap();
        assert_eq!(a.dims(), &[4, 2 * 256 * 2]);
        assert!(a.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let k = Tensor::<f64>::from_fn(vec![2, 256 * 3], |i| if i % 3 == 0 { 6.0 } else { 0.0 });
        let a = adapt_rgb_kernel(&k, 1).unwrap();
        assert!(a.data().iter().all(|&v| v == 2.0));

        assert!(adapt_rgb_kernel(&Tensor::<f64>::zeros(vec![2, 256 * 2]), 1).is_err());
    }
}
