//! Channel matrices and the methods that produce them.
//!
//! Every learner returns a [`ChannelMatrix`] whose rows are channels over the
//! flattened image grid.

mod autoencoder;
mod laguerre;
mod pls;

pub use autoencoder::{
    ae_loss_and_gradient, train_ae_channels, AdamConfig, AeHyperparams, AeLoss, PretrainConfig,
    TrainedAe,
};
pub use laguerre::{conv_lg_channels, laguerre, lg_channels};
pub use pls::{pls1, pls_channels, PlsChannels};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::SignalEstimate;
use crate::persist::{self, Reader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMethod {
    AeTask,
    AeTraditional,
    Pls,
    Lg,
    ConvLg,
    MatchedFilter,
    Identity,
    Custom,
}

impl ChannelMethod {
    pub const ALL: [ChannelMethod; 8] = [
        ChannelMethod::AeTask,
        ChannelMethod::AeTraditional,
        ChannelMethod::Pls,
        ChannelMethod::Lg,
        ChannelMethod::ConvLg,
        ChannelMethod::MatchedFilter,
        ChannelMethod::Identity,
        ChannelMethod::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelMethod::AeTask => "ae_task",
            ChannelMethod::AeTraditional => "ae_traditional",
            ChannelMethod::Pls => "pls",
            ChannelMethod::Lg => "lg",
            ChannelMethod::ConvLg => "conv_lg",
            ChannelMethod::MatchedFilter => "matched_filter",
            ChannelMethod::Identity => "identity",
            ChannelMethod::Custom => "custom",
        }
    }

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for ChannelMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ChannelMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown channel method {s:?}")))
    }
}

/// An `m × side²` matrix whose rows are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    rows: DMatrix<f64>,
    pub method: ChannelMethod,
    side: usize,
}

pub const CHANNEL_MAGIC: &[u8; 8] = b"CHOCM01\0";

impl ChannelMatrix {
    /// Rejects shape mismatches, non-finite entries and all-zero rows.
    pub fn new(rows: DMatrix<f64>, method: ChannelMethod, side: usize) -> Result<Self> {
        if rows.ncols() != side * side {
            return Err(Error::mismatch(side * side, rows.ncols(), "channel length"));
        }
        if rows.nrows() == 0 {
            return Err(Error::invalid("channel matrix has no rows"));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("channel matrix has non-finite entries"));
        }
        if let Some(k) = rows.row_iter().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::invalid(format!("channel {k} is identically zero")));
        }
        Ok(Self { rows, method, side })
    }

    pub fn identity(side: usize) -> Self {
        let n = side * side;
        Self {
            rows: DMatrix::identity(n, n),
            method: ChannelMethod::Identity,
            side,
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.rows
    }

    pub fn channel_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.rows.row(k).iter().copied().collect()
    }

    /// Pairwise cosine similarity of the channels (`m × m`), a redundancy
    /// diagnostic.
    pub fn cosine_similarity(&self) -> DMatrix<f64> {
        let norms: Vec<f64> = self.rows.row_iter().map(|r| r.norm()).collect();
        let gram = &self.rows * self.rows.transpose();
        DMatrix::from_fn(gram.nrows(), gram.ncols(), |i, j| gram[(i, j)] / (norms[i] * norms[j]))
    }

    /// Header: magic, method code (u32), m (u32), side (u32), reserved u32
    /// zero; then `m·side²` f64, all little-endian, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(24 + 8 * self.rows.len());
        buf.extend_from_slice(CHANNEL_MAGIC);
        persist::put_u32(&mut buf, self.method.code());
        persist::put_u32(&mut buf, self.channel_count() as u32);
        persist::put_u32(&mut buf, self.side as u32);
        persist::put_u32(&mut buf, 0);
        encode_rows(&mut buf, &self.rows);
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "channel matrix file");
        let out = Self::read_from(&mut r)?;
        r.finish()?;
        Ok(out)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.magic(CHANNEL_MAGIC)?;
        let code = r.u32()?;
        let method = ChannelMethod::from_code(code)
            .ok_or_else(|| Error::format("channel matrix file", format!("method code {code}")))?;
        let m = r.u32()? as usize;
        let side = r.u32()? as usize;
        let _reserved = r.u32()?;
        let n = side * side;
        let data = r.f64s(m * n)?;
        Self::new(DMatrix::from_row_slice(m, n, &data), method, side)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&persist::read_file(path)?)
    }

    /// One channel per line, space separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.rows.row_iter() {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Channel `k` as a `side × side` text matrix.
    pub fn channel_image_text(&self, k: usize) -> String {
        let row = self.row(k);
        row.chunks(self.side)
            .map(|line| line.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ") + "\n")
            .collect()
    }
}

pub(crate) fn encode_rows(buf: &mut Vec<u8>, rows: &DMatrix<f64>) {
    buf.reserve(rows.len() * 8);
    for row in rows.row_iter() {
        for v in row.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// The normalized signal estimate as a single channel.
pub fn matched_filter(sig: &SignalEstimate) -> Result<ChannelMatrix> {
    let norm = sig.norm();
    if norm == 0.0 {
        return Err(Error::ZeroSignal);
    }
    let n = sig.delta_g_bar.len();
    let row = DMatrix::from_row_slice(1, n, &sig.delta_g_bar) / norm;
    ChannelMatrix::new(row, ChannelMethod::MatchedFilter, sig.side)
}

pub(crate) fn normalize_rows(rows: &mut DMatrix<f64>) {
    for mut row in rows.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::EstimateSource;

    fn estimate(values: Vec<f64>, side: usize) -> SignalEstimate {
        SignalEstimate {
            delta_g_bar: values,
            source: EstimateSource::Empirical,
            side,
        }
    }

    #[test]
    fn matched_filter_normalizes() {
        let sig = estimate(vec![3.0, 4.0, 0.0, 0.0], 2);
        let mf = matched_filter(&sig).unwrap();
        assert_eq!(mf.row(0), vec![0.6, 0.8, 0.0, 0.0]);
        let response: f64 = mf.row(0).iter().zip(&sig.delta_g_bar).map(|(a, b)| a * b).sum();
        assert!((response - 5.0).abs() < 1e-15);
        assert!(matches!(matched_filter(&estimate(vec![0.0; 4], 2)), Err(Error::ZeroSignal)));
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(ChannelMatrix::new(DMatrix::zeros(2, 4), ChannelMethod::Custom, 2).is_err());
        assert!(ChannelMatrix::new(DMatrix::from_element(1, 5, 1.0), ChannelMethod::Custom, 2).is_err());
        let mut nan = DMatrix::from_element(1, 4, 1.0);
        nan[(0, 2)] = f64::NAN;
        assert!(ChannelMatrix::new(nan, ChannelMethod::Custom, 2).is_err());
    }

    #[test]
    fn binary_and_text_forms() {
        let rows = DMatrix::from_fn(3, 9, |i, j| (i * 9 + j) as f64 - 4.5);
        let cm = ChannelMatrix::new(rows, ChannelMethod::Pls, 3).unwrap();
        let bytes = cm.to_bytes();
        assert_eq!(&bytes[..8], b"CHOCM01\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), -4.5);
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), -3.5);
        assert_eq!(ChannelMatrix::from_bytes(&bytes).unwrap(), cm);
        assert!(ChannelMatrix::from_bytes(&bytes[..bytes.len() - 8]).is_err());

        let text = cm.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("-4.5 -3.5 -2.5"));
        assert_eq!(cm.channel_image_text(0).lines().count(), 3);
    }

    #[test]
    fn cosine_similarity_diagonal_is_one() {
        let rows = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let cm = ChannelMatrix::new(rows, ChannelMethod::Custom, 2).unwrap();
        let c = cm.cosine_similarity();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((c[(0, 1)] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in ChannelMethod::ALL {
            assert_eq!(m.name().parse::<ChannelMethod>().unwrap(), m);
            assert_eq!(ChannelMethod::from_code(m.code()), Some(m));
        }
    }
}
