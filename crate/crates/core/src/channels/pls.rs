//! PLS1 weight vectors as channels.

use nalgebra::{DMatrix, DVector};

use super::{ChannelMatrix, ChannelMethod};
use crate::error::{Error, Result};
use crate::imaging::LabeledDataset;

#[derive(Debug, Clone)]
pub struct PlsChannels {
    pub channels: ChannelMatrix,
    /// Score vectors `t_k`, one column per extracted channel.
    pub scores: DMatrix<f64>,
    /// Fewer than the requested number of channels were extracted because a
    /// score vector vanished.
    pub stopped_early: bool,
}

/// Weight and score vectors of PLS1 on `x` (one sample per row) and `y`,
/// both centered internally. Extraction stops when a weight or score vector
/// vanishes.
pub fn pls1(mut x: DMatrix<f64>, mut y: DVector<f64>, m: usize) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    if x.nrows() != y.len() {
        return Err(Error::mismatch(x.nrows(), y.len(), "PLS responses"));
    }
    let means = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &means;
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVariance);
    }
    let y_mean = y.mean();
    y.add_scalar_mut(-y_mean);

    let scale = x.norm();
    let mut weights = Vec::with_capacity(m);
    let mut scores = Vec::with_capacity(m);
    for _ in 0..m {
        let w = x.tr_mul(&y);
        let w_norm = w.norm();
        if w_norm <= 1e-14 * scale * y.norm().max(1.0) {
            break;
        }
        let w = w / w_norm;
        let t = &x * &w;
        let tt = t.norm_squared();
        if tt <= (1e-14 * scale).powi(2) {
            break;
        }
        let p = x.tr_mul(&t) / tt;
        let q = y.dot(&t) / tt;
        x.ger(-1.0, &t, &p, 1.0);
        y.axpy(-q, &t, 1.0);
        weights.push(w);
        scores.push(t);
    }
    if weights.is_empty() {
        return Err(Error::ZeroVariance);
    }
    Ok((weights, scores))
}

/// PLS1 channels for a labelled dataset: column-centered images, centered
/// ±1 labels, unit weight vectors as rows.
pub fn pls_channels(train: &LabeledDataset, m: usize) -> Result<PlsChannels> {
    if m == 0 {
        return Err(Error::invalid("PLS needs at least one channel"));
    }
    train.require_both_classes()?;
    let x = DMatrix::from_row_slice(train.len(), train.dim(), train.pixels());
    let y = DVector::from_iterator(train.len(), train.labels().iter().map(|l| if l.is_present() { 1.0 } else { -1.0 }));
    let (weights, scores) = pls1(x, y, m)?;
    let stopped_early = weights.len() < m;
    if stopped_early {
        log::warn!("PLS stopped after {} of {m} channels", weights.len());
    }
    let rows = DMatrix::from_rows(&weights.iter().map(|w| w.transpose()).collect::<Vec<_>>());
    Ok(PlsChannels {
        channels: ChannelMatrix::new(rows, ChannelMethod::Pls, train.side())?,
        scores: DMatrix::from_columns(&scores),
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{estimate_signal, Label, Split};
    use crate::rng::{substream, Domain};
    use rand::Rng;

    /// Straight-line PLS1 over nested Vecs, kept independent of nalgebra.
    fn reference_pls(x: &[Vec<f64>], y: &[f64], m: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let rows = x.len();
        let cols = x[0].len();
        let mut x: Vec<Vec<f64>> = x.to_vec();
        for j in 0..cols {
            let mean = x.iter().map(|r| r[j]).sum::<f64>() / rows as f64;
            for r in x.iter_mut() {
                r[j] -= mean;
            }
        }
        let ym = y.iter().sum::<f64>() / rows as f64;
        let mut y: Vec<f64> = y.iter().map(|v| v - ym).collect();
        let (mut ws, mut ts) = (Vec::new(), Vec::new());
        for _ in 0..m {
            let mut w = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    w[j] += x[i][j] * y[i];
                }
            }
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.iter_mut().for_each(|v| *v /= norm);
            let t: Vec<f64> = x.iter().map(|r| r.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
            let tt: f64 = t.iter().map(|v| v * v).sum();
            let mut p = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    p[j] += x[i][j] * t[i] / tt;
                }
            }
            let q = y.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / tt;
            for i in 0..rows {
                for j in 0..cols {
                    x[i][j] -= t[i] * p[j];
                }
                y[i] -= q * t[i];
            }
            ws.push(w);
            ts.push(t);
        }
        (ws, ts)
    }

    fn random_dataset(count: usize, side: usize, seed: u64) -> LabeledDataset {
        let mut rng = substream(seed, Domain::Misc, 0);
        let n = side * side;
        let pixels: Vec<f64> = (0..count * n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let labels = (0..count).map(|i| if i % 2 == 1 { Label::Present } else { Label::Absent }).collect();
        LabeledDataset::new(side, pixels, labels, Split::Train).unwrap()
    }

    #[test]
    fn matches_reference_implementation() {
        let mut rng = substream(1, Domain::Misc, 0);
        let x: Vec<Vec<f64>> = (0..20).map(|_| (0..30).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let y: Vec<f64> = (0..20).map(|i| if i % 2 == 1 { 1.0 } else { -1.0 }).collect();
        let flat: Vec<f64> = x.concat();
        let (ws, ts) = pls1(DMatrix::from_row_slice(20, 30, &flat), DVector::from_vec(y.clone()), 5).unwrap();
        let (ref_ws, ref_ts) = reference_pls(&x, &y, 5);
        for k in 0..5 {
            for (a, b) in ws[k].iter().zip(&ref_ws[k]) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in ts[k].iter().zip(&ref_ts[k]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn scores_are_orthogonal() {
        let ds = random_dataset(40, 5, 2);
        let pls = pls_channels(&ds, 6).unwrap();
        for i in 0..6 {
            for j in 0..i {
                let (ti, tj) = (pls.scores.column(i), pls.scores.column(j));
                assert!(ti.dot(&tj).abs() < 1e-8 * ti.norm() * tj.norm());
            }
        }
    }

    #[test]
    fn first_weight_is_signal_direction() {
        let ds = random_dataset(30, 4, 3);
        let pls = pls_channels(&ds, 1).unwrap();
        let delta = estimate_signal(&ds).unwrap().delta_g_bar;
        let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (w, d) in pls.channels.row(0).iter().zip(&delta) {
            assert!((w - d / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn toy_channel_points_along_signal() {
        let absent = vec![0.0, 0.0, 0.0, 0.0];
        let present = vec![1.0, 0.0, 0.0, 0.0];
        let ds = LabeledDataset::from_images(
            2,
            &[absent.clone(), present.clone(), absent, present],
            vec![Label::Absent, Label::Present, Label::Absent, Label::Present],
            Split::Train,
        )
        .unwrap();
        let pls = pls_channels(&ds, 1).unwrap();
        assert_eq!(pls.channels.row(0), vec![1.0, 0.0, 0.0, 0.0]);
        // rank one data: a second channel cannot be extracted
        let two = pls_channels(&ds, 2).unwrap();
        assert!(two.stopped_early);
        assert_eq!(two.channels.channel_count(), 1);
    }

    #[test]
    fn zero_variance_rejected() {
        let img = vec![1.0; 4];
        let ds = LabeledDataset::from_images(2, &[img.clone(), img], vec![Label::Absent, Label::Present], Split::Train).unwrap();
        assert!(matches!(pls_channels(&ds, 1), Err(Error::ZeroVariance)));
    }
}
