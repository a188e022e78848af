// SPDX-License-Identifier: Apache-2.0

use crate::error::{Error, Result};

fn encode(pos: usize, base: f64, d: usize, out: &mut [f64]) {
    let pos = pos as f64;
    for i in 0..d / 2 {
        let angle = pos / base.powf((2 * i) as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
}

/// Conventional encoding: dim `2i` is `sin(pos / base^(2i/d))`, dim `2i+1`
/// the matching cosine.
pub fn sinusoidal_pe(pos: usize, d: usize, base: f64) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidConfig(format!("dimension {d} must be positive and even")));
    }
    let mut out = vec![0.0; d];
    encode(pos, base, d, &mut out);
    Ok(out)
}

/// Length-ratio encoding: the sinusoidal form with the base replaced by the
/// desired length `L`, so wavelengths scale with the requested output length.
pub fn lrpe(pos: usize, length: usize, d: usize) -> Result<Vec<f64>> {
    if length < 1 {
        return Err(Error::InvalidLength("LRPE needs a desired length >= 1".into()));
    }
    sinusoidal_pe(pos, d, length as f64)
}

pub(crate) fn write_into(pos: usize, base: f64, out: &mut [f64]) {
    encode(pos, base, out.len(), out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn position_zero() {
        for d in [2, 4, 64] {
            for v in [sinusoidal_pe(0, d, 10000.0).unwrap(), lrpe(0, 7, d).unwrap()] {
                for (i, x) in v.iter().enumerate() {
                    assert_eq!(*x, if i % 2 == 0 { 0.0 } else { 1.0 });
                }
            }
        }
    }

    #[test]
    fn known_values() {
        let v = sinusoidal_pe(1, 4, 10000.0).unwrap();
        for (a, b) in v.iter().zip([0.841471, 0.540302, 0.010000, 0.999950]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
        let v = sinusoidal_pe(2, 2, 10000.0).unwrap();
        assert_abs_diff_eq!(v[0], 0.909297, epsilon = 1e-6);
        assert_abs_diff_eq!(v[1], -0.416147, epsilon = 1e-6);
        let v = lrpe(4, 4, 4).unwrap();
        for (a, b) in v.iter().zip([-0.756802, -0.653644, 0.909297, -0.416147]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn unit_length_degenerates() {
        for pos in 0..20 {
            let v = lrpe(pos, 1, 8).unwrap();
            for i in 0..4 {
                assert_eq!(v[2 * i], (pos as f64).sin());
                assert_eq!(v[2 * i + 1], (pos as f64).cos());
            }
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(sinusoidal_pe(1, 3, 10000.0), Err(Error::InvalidConfig(_))));
        assert!(matches!(lrpe(1, 0, 4), Err(Error::InvalidLength(_))));
    }

    #[test]
    fn lrpe_at_base_equals_sinusoidal() {
        for pos in 0..50 {
            assert_eq!(lrpe(pos, 10000, 16).unwrap(), sinusoidal_pe(pos, 16, 10000.0).unwrap());
        }
    }

    #[test]
    fn periodic_in_position() {
        // component i has period 2*pi*L^(2i/d); check via the continuous form
        let (length, d) = (5usize, 8usize);
        for i in 0..d / 2 {
            let period = 2.0 * std::f64::consts::PI * (length as f64).powf((2 * i) as f64 / d as f64);
            for pos in 0..10 {
                let shifted = (pos as f64 + period) / (length as f64).powf((2 * i) as f64 / d as f64);
                let v = lrpe(pos, length, d).unwrap();
                assert_abs_diff_eq!(v[2 * i], shifted.sin(), epsilon = 1e-9);
                assert_abs_diff_eq!(v[2 * i + 1], shifted.cos(), epsilon = 1e-9);
            }
        }
    }
}
