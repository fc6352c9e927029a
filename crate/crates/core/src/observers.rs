//! Linear observers: the Hotelling observer computed directly or through a
//! covariance decomposition, and the channelized Hotelling observer.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::channels::{ChannelMatrix, CHANNEL_MAGIC};
use crate::error::{Error, Result};
use crate::imaging::{Label, LabeledDataset, NoiseParams, SignalEstimate};
use crate::linalg::{column_moments, solve_symmetric_psd, SymmetricSolve};
use crate::persist::{self, Reader};
use crate::ImageVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObserverKind {
    HoDirect,
    HoCmd,
    Cho,
}

impl ObserverKind {
    pub fn name(self) -> &'static str {
        match self {
            ObserverKind::HoDirect => "ho_direct",
            ObserverKind::HoCmd => "ho_cmd",
            ObserverKind::Cho => "cho",
        }
    }

    fn code(self) -> u32 {
        match self {
            ObserverKind::HoDirect => 0,
            ObserverKind::HoCmd => 1,
            ObserverKind::Cho => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ObserverKind::HoDirect),
            1 => Some(ObserverKind::HoCmd),
            2 => Some(ObserverKind::Cho),
            _ => None,
        }
    }
}

impl fmt::Display for ObserverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A fitted linear observer.
///
/// `template`, the class means and the covariance live in the observer's own
/// domain: channel space for the CHO, image space otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverModel {
    pub kind: ObserverKind,
    pub template: DVector<f64>,
    pub channels: Option<ChannelMatrix>,
    pub mean_absent: DVector<f64>,
    pub mean_present: DVector<f64>,
    /// `½(K₀ + K₁)`; not stored for HO-CMD, whose covariance is implicit.
    pub covariance: Option<DMatrix<f64>>,
    pub degenerate: bool,
    pub condition: f64,
    side: usize,
    image_template: DVector<f64>,
}

pub const OBSERVER_MAGIC: &[u8; 8] = b"CHOOM01\0";

/// Solves `½(K₀ + K₁)·w = Δḡ`, falling back to the minimum-norm
/// least-squares solution when the mean covariance is singular or its
/// condition number exceeds 1e12.
pub fn hotelling_template(k0: &DMatrix<f64>, k1: &DMatrix<f64>, delta: &DVector<f64>) -> Result<SymmetricSolve> {
    if k0.shape() != k1.shape() {
        return Err(Error::mismatch(k0.nrows(), k1.nrows(), "class covariances"));
    }
    if k0.nrows() != delta.len() {
        return Err(Error::mismatch(k0.nrows(), delta.len(), "covariance vs mean difference"));
    }
    let mean = (k0 + k1) * 0.5;
    solve_symmetric_psd(&mean, delta)
}

struct TwoClassFit {
    template: DVector<f64>,
    mean_absent: DVector<f64>,
    mean_present: DVector<f64>,
    covariance: DMatrix<f64>,
    degenerate: bool,
    condition: f64,
}

/// Per-class moments of feature columns and the Hotelling solve on them.
fn fit_two_class(features: &DMatrix<f64>, labels: &[Label]) -> Result<TwoClassFit> {
    let present: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_present()).collect();
    let absent: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i].is_present()).collect();
    if present.is_empty() {
        return Err(Error::EmptyClass("signal-present"));
    }
    if absent.is_empty() {
        return Err(Error::EmptyClass("signal-absent"));
    }
    let (mean_present, k1) = column_moments(&features.select_columns(&present));
    let (mean_absent, k0) = column_moments(&features.select_columns(&absent));
    let delta = &mean_present - &mean_absent;
    let solve = hotelling_template(&k0, &k1, &delta)?;
    let rank_limited = present.len().min(absent.len()) <= features.nrows();
    Ok(TwoClassFit {
        template: solve.solution,
        mean_absent,
        mean_present,
        covariance: (k0 + k1) * 0.5,
        degenerate: solve.degenerate || rank_limited,
        condition: solve.condition,
    })
}

fn image_matrix(ds: &LabeledDataset) -> DMatrix<f64> {
    DMatrix::from_column_slice(ds.dim(), ds.len(), ds.pixels())
}

/// Channelized Hotelling observer calibrated on `calib`.
pub fn build_cho(channels: &ChannelMatrix, calib: &LabeledDataset) -> Result<ObserverModel> {
    if channels.dim() != calib.dim() {
        return Err(Error::mismatch(channels.dim(), calib.dim(), "channel length vs image size"));
    }
    calib.require_both_classes()?;
    let v = channels.matrix() * image_matrix(calib);
    let fit = fit_two_class(&v, calib.labels())?;
    let image_template = channels.matrix().tr_mul(&fit.template);
    Ok(ObserverModel {
        kind: ObserverKind::Cho,
        template: fit.template,
        channels: Some(channels.clone()),
        mean_absent: fit.mean_absent,
        mean_present: fit.mean_present,
        covariance: Some(fit.covariance),
        degenerate: fit.degenerate,
        condition: fit.condition,
        side: calib.side(),
        image_template,
    })
}

/// Hotelling observer from empirical full image-space covariances.
pub fn build_ho_direct(calib: &LabeledDataset) -> Result<ObserverModel> {
    calib.require_both_classes()?;
    let fit = fit_two_class(&image_matrix(calib), calib.labels())?;
    Ok(ObserverModel {
        kind: ObserverKind::HoDirect,
        image_template: fit.template.clone(),
        template: fit.template,
        channels: None,
        mean_absent: fit.mean_absent,
        mean_present: fit.mean_present,
        covariance: Some(fit.covariance),
        degenerate: fit.degenerate,
        condition: fit.condition,
        side: calib.side(),
    })
}

/// Solves `(δ²I + UUᵀ)·w = b` for `U` of shape `n × r`.
///
/// With `r ≤ n` the Woodbury identity reduces the solve to the `r × r`
/// system `(δ²I + UᵀU)`. With `r > n` the covariance has full rank anyway
/// and `δ²I + UUᵀ` is Cholesky-factored directly; its inverse is never
/// formed in either case.
pub fn solve_noise_plus_low_rank(noise_var: f64, u: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (n, r) = u.shape();
    if b.len() != n {
        return Err(Error::mismatch(n, b.len(), "right-hand side"));
    }
    if noise_var > 0.0 && r <= n {
        let mut inner = u.tr_mul(u);
        for i in 0..r {
            inner[(i, i)] += noise_var;
        }
        let chol = inner
            .cholesky()
            .ok_or_else(|| Error::SingularCovariance("Woodbury inner system".into()))?;
        let correction = u * chol.solve(&u.tr_mul(b));
        return Ok((b - correction) / noise_var);
    }
    let mut k = u * u.transpose();
    for i in 0..n {
        k[(i, i)] += noise_var;
    }
    if noise_var > 0.0 {
        let chol = k
            .cholesky()
            .ok_or_else(|| Error::SingularCovariance("noise plus background covariance".into()))?;
        return Ok(chol.solve(b));
    }
    let solve = solve_symmetric_psd(&k, b)?;
    if solve.degenerate {
        return Err(Error::SingularCovariance(
            "background covariance is rank deficient and the noise variance is zero".into(),
        ));
    }
    Ok(solve.solution)
}

/// Hotelling observer with `K = δ²I + K_b`, `K_b` the empirical covariance of
/// noiseless measured backgrounds.
pub fn build_ho_cmd(backgrounds: &[ImageVector], sig: &SignalEstimate, noise: &NoiseParams) -> Result<ObserverModel> {
    if backgrounds.is_empty() {
        return Err(Error::invalid("HO-CMD needs at least one background image"));
    }
    noise.validate()?;
    let n = sig.delta_g_bar.len();
    let count = backgrounds.len();
    let mut u = DMatrix::zeros(n, count);
    for (j, bg) in backgrounds.iter().enumerate() {
        if bg.len() != n {
            return Err(Error::mismatch(n, bg.len(), "background image length"));
        }
        u.column_mut(j).copy_from_slice(bg);
    }
    let mean = u.column_mean();
    for mut col in u.column_iter_mut() {
        col -= &mean;
    }
    if count > 1 {
        u /= ((count - 1) as f64).sqrt();
    } else {
        u.fill(0.0);
    }
    let delta = DVector::from_column_slice(&sig.delta_g_bar);
    let noise_var = noise.std * noise.std;
    let template = solve_noise_plus_low_rank(noise_var, &u, &delta)?;
    Ok(ObserverModel {
        kind: ObserverKind::HoCmd,
        image_template: template.clone(),
        template,
        channels: None,
        mean_present: &mean + &delta,
        mean_absent: mean,
        covariance: None,
        degenerate: false,
        condition: f64::NAN,
        side: sig.side,
    })
}

impl ObserverModel {
    pub fn side(&self) -> usize {
        self.side
    }

    /// The observer's template mapped back to image space (`Tᵀw` for a CHO).
    pub fn image_template(&self) -> &DVector<f64> {
        &self.image_template
    }

    pub fn score_image(&self, image: &[f64]) -> Result<f64> {
        if image.len() != self.image_template.len() {
            return Err(Error::mismatch(self.image_template.len(), image.len(), "image length"));
        }
        Ok(self.image_template.iter().zip(image).map(|(w, g)| w * g).sum())
    }

    /// Test statistic `t = wᵀg` (or `wᵀTg`) for every image.
    pub fn score(&self, images: &LabeledDataset) -> Result<Vec<f64>> {
        if images.dim() != self.image_template.len() {
            return Err(Error::mismatch(self.image_template.len(), images.dim(), "image length"));
        }
        images.images().map(|g| self.score_image(g)).collect()
    }

    /// Scores split by class: `(present, absent)`.
    pub fn score_by_class(&self, images: &LabeledDataset) -> Result<(Vec<f64>, Vec<f64>)> {
        let scores = self.score(images)?;
        let mut present = Vec::new();
        let mut absent = Vec::new();
        for (s, l) in scores.into_iter().zip(images.labels()) {
            if l.is_present() {
                present.push(s);
            } else {
                absent.push(s);
            }
        }
        Ok((present, absent))
    }

    /// Header: magic, kind (u32), flags (u32: bit 0 degenerate, bit 1 has
    /// covariance, bit 2 has channels), side (u32), reserved u32, template
    /// length `d` (u64), condition (f64); then template, absent mean and
    /// present mean (`d` f64 each), the `d × d` covariance row-major when
    /// flagged, and an embedded channel-matrix record when flagged.
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.template.len();
        let mut flags = 0u32;
        if self.degenerate {
            flags |= 1;
        }
        if self.covariance.is_some() {
            flags |= 2;
        }
        if self.channels.is_some() {
            flags |= 4;
        }
        let mut buf = Vec::new();
        buf.extend_from_slice(OBSERVER_MAGIC);
        persist::put_u32(&mut buf, self.kind.code());
        persist::put_u32(&mut buf, flags);
        persist::put_u32(&mut buf, self.side as u32);
        persist::put_u32(&mut buf, 0);
        persist::put_u64(&mut buf, d as u64);
        persist::put_f64s(&mut buf, &[self.condition]);
        persist::put_f64s(&mut buf, self.template.as_slice());
        persist::put_f64s(&mut buf, self.mean_absent.as_slice());
        persist::put_f64s(&mut buf, self.mean_present.as_slice());
        if let Some(cov) = &self.covariance {
            crate::channels::encode_rows(&mut buf, cov);
        }
        if let Some(ch) = &self.channels {
            buf.extend_from_slice(&ch.to_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "observer model file");
        r.magic(OBSERVER_MAGIC)?;
        let code = r.u32()?;
        let kind = ObserverKind::from_code(code)
            .ok_or_else(|| Error::format("observer model file", format!("kind code {code}")))?;
        let flags = r.u32()?;
        let side = r.u32()? as usize;
        let _reserved = r.u32()?;
        let d = r.usize()?;
        let condition = r.f64s(1)?[0];
        let template = DVector::from_vec(r.f64s(d)?);
        let mean_absent = DVector::from_vec(r.f64s(d)?);
        let mean_present = DVector::from_vec(r.f64s(d)?);
        let covariance = if flags & 2 != 0 {
            Some(DMatrix::from_row_slice(d, d, &r.f64s(d * d)?))
        } else {
            None
        };
        let channels = if flags & 4 != 0 {
            let start = r.position();
            if bytes.get(start..start + 8) != Some(&CHANNEL_MAGIC[..]) {
                return Err(Error::format("observer model file", "missing channel record"));
            }
            Some(ChannelMatrix::read_from(&mut r)?)
        } else {
            None
        };
        r.finish()?;
        let image_template = match &channels {
            Some(ch) => {
                if ch.channel_count() != d {
                    return Err(Error::mismatch(ch.channel_count(), d, "channels vs template"));
                }
                ch.matrix().tr_mul(&template)
            }
            None => template.clone(),
        };
        if image_template.len() != side * side {
            return Err(Error::mismatch(side * side, image_template.len(), "template vs side"));
        }
        Ok(Self {
            kind,
            template,
            channels,
            mean_absent,
            mean_present,
            covariance,
            degenerate: flags & 1 != 0,
            condition,
            side,
            image_template,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&persist::read_file(path)?)
    }
}
