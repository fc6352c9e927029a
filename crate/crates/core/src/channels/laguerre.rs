//! Laguerre-Gauss channels and their convolution with a signal estimate.

use nalgebra::DMatrix;

use super::{normalize_rows, ChannelMatrix, ChannelMethod};
use crate::error::{Error, Result};
use crate::imaging::SignalEstimate;

/// Laguerre polynomial `L_j(x)` by the three-term recurrence.
pub fn laguerre(j: usize, x: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, 1.0 - x);
    if j == 0 {
        return prev;
    }
    for k in 1..j {
        let k = k as f64;
        let next = ((2.0 * k + 1.0 - x) * cur - k * prev) / (k + 1.0);
        prev = cur;
        cur = next;
    }
    cur
}

/// `u_j(r) = (√2/a)·exp(-πr²/a²)·L_j(2πr²/a²)` rasterized around `center`
/// (pixel coordinates `(x, y)`), each row scaled to unit norm.
pub fn lg_channels(m: usize, gauss_width: f64, side: usize, center: [f64; 2]) -> Result<ChannelMatrix> {
    if m == 0 {
        return Err(Error::invalid("LG needs at least one channel"));
    }
    if !(gauss_width > 0.0) {
        return Err(Error::invalid("LG Gaussian width must be > 0"));
    }
    let n = side * side;
    let a2 = gauss_width * gauss_width;
    let norm = std::f64::consts::SQRT_2 / gauss_width;
    let mut rows = DMatrix::zeros(m, n);
    for y in 0..side {
        for x in 0..side {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            let r2 = dx * dx + dy * dy;
            let envelope = norm * (-std::f64::consts::PI * r2 / a2).exp();
            let arg = 2.0 * std::f64::consts::PI * r2 / a2;
            for j in 0..m {
                rows[(j, y * side + x)] = envelope * laguerre(j, arg);
            }
        }
    }
    normalize_rows(&mut rows);
    ChannelMatrix::new(rows, ChannelMethod::Lg, side)
}

/// Zero-padded 2-D convolution with output the same size as the input and
/// the kernel origin at pixel `(side/2, side/2)` of `kernel`.
pub(crate) fn convolve_same(image: &[f64], kernel: &[f64], side: usize) -> Vec<f64> {
    let c = (side / 2) as isize;
    let s = side as isize;
    let taps: Vec<(isize, isize, f64)> = kernel
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(k, &v)| ((k % side) as isize - c, (k / side) as isize - c, v))
        .collect();
    let mut out = vec![0.0; side * side];
    for &(kx, ky, kv) in &taps {
        for y in 0..s {
            let sy = y - ky;
            if !(0..s).contains(&sy) {
                continue;
            }
            for x in 0..s {
                let sx = x - kx;
                if (0..s).contains(&sx) {
                    out[(y * s + x) as usize] += kv * image[(sy * s + sx) as usize];
                }
            }
        }
    }
    out
}

/// Convolves every LG channel with the signal estimate and renormalizes.
pub fn conv_lg_channels(lg: &ChannelMatrix, sig: &SignalEstimate) -> Result<ChannelMatrix> {
    if lg.side() != sig.side || sig.delta_g_bar.len() != lg.dim() {
        return Err(Error::mismatch(lg.dim(), sig.delta_g_bar.len(), "signal estimate vs channels"));
    }
    if sig.is_zero() {
        return Err(Error::ZeroSignal);
    }
    let side = lg.side();
    let mut rows = DMatrix::zeros(lg.channel_count(), lg.dim());
    for k in 0..lg.channel_count() {
        let conv = convolve_same(&lg.row(k), &sig.delta_g_bar, side);
        rows.row_mut(k).copy_from_slice(&conv);
    }
    normalize_rows(&mut rows);
    ChannelMatrix::new(rows, ChannelMethod::ConvLg, side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::EstimateSource;

    #[test]
    fn laguerre_low_orders() {
        for x in [0.0, 0.3, 1.7, 4.0] {
            assert_eq!(laguerre(0, x), 1.0);
            assert_eq!(laguerre(1, x), 1.0 - x);
            let l2 = 0.5 * (x * x - 4.0 * x + 2.0);
            assert!((laguerre(2, x) - l2).abs() < 1e-14);
            let l3 = (-x * x * x + 9.0 * x * x - 18.0 * x + 6.0) / 6.0;
            assert!((laguerre(3, x) - l3).abs() < 1e-13);
        }
    }

    #[test]
    fn zeroth_channel_peaks_at_center() {
        let lg = lg_channels(3, 8.0, 16, [8.0, 8.0]).unwrap();
        let row = lg.row(0);
        let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, 8 * 16 + 8);
        for k in 0..3 {
            assert!((lg.row(k).iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn first_channel_crosses_zero_at_laguerre_root() {
        // 2πr²/a² = 1 at r = a/√(2π); pick a so that r = 3 pixels
        let a = 3.0 * (2.0 * std::f64::consts::PI).sqrt();
        let lg = lg_channels(2, a, 16, [8.0, 8.0]).unwrap();
        assert!(lg.row(1)[8 * 16 + 11].abs() < 1e-15);
        assert!(lg.row(1)[8 * 16 + 10] > 0.0 && lg.row(1)[8 * 16 + 12] < 0.0);
    }

    #[test]
    fn channels_are_rotationally_symmetric() {
        let side = 17;
        let lg = lg_channels(5, 6.0, side, [8.0, 8.0]).unwrap();
        for k in 0..5 {
            let row = lg.row(k);
            for y in 0..side {
                for x in 0..side {
                    // 90° rotation about (8, 8): (x, y) -> (16 - y, x)
                    let rotated = row[x * side + (side - 1 - y)];
                    assert_eq!(row[y * side + x], rotated);
                }
            }
        }
    }

    fn estimate(values: Vec<f64>, side: usize) -> SignalEstimate {
        SignalEstimate {
            delta_g_bar: values,
            source: EstimateSource::Empirical,
            side,
        }
    }

    #[test]
    fn delta_signal_leaves_channels_unchanged() {
        let side = 12;
        let lg = lg_channels(4, 5.0, side, [6.0, 6.0]).unwrap();
        let mut delta = vec![0.0; side * side];
        delta[6 * side + 6] = 2.5;
        let conv = conv_lg_channels(&lg, &estimate(delta, side)).unwrap();
        for k in 0..4 {
            for (a, b) in conv.row(k).iter().zip(lg.row(k)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn convolution_is_linear_in_the_signal() {
        let side = 10;
        let lg = lg_channels(2, 4.0, side, [5.0, 5.0]).unwrap();
        let s1: Vec<f64> = (0..side * side).map(|k| ((k * 7) % 11) as f64 - 5.0).collect();
        let s2: Vec<f64> = (0..side * side).map(|k| ((k * 3) % 5) as f64).collect();
        let sum: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + b).collect();
        let row = lg.row(1);
        let a = convolve_same(&row, &s1, side);
        let b = convolve_same(&row, &s2, side);
        let c = convolve_same(&row, &sum, side);
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            assert!((x + y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_or_mismatched_signal_rejected() {
        let lg = lg_channels(2, 4.0, 8, [4.0, 4.0]).unwrap();
        assert!(matches!(conv_lg_channels(&lg, &estimate(vec![0.0; 64], 8)), Err(Error::ZeroSignal)));
        assert!(conv_lg_channels(&lg, &estimate(vec![1.0; 49], 7)).is_err());
    }
}
