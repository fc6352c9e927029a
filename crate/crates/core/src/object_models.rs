//! Stochastic object models: lumpy backgrounds and elliptical Gaussian
//! signals, both expressed as collections of parametric Gaussian blobs.
//!
//! Coordinates are continuous `(x, y)` in pixel units. Pixel `(x, y)` of a
//! `side × side` grid sits at integer coordinates and is stored at flat index
//! `y * side + x` (row-major).

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ImageVector;

/// A 2-D Gaussian `amplitude · exp(-½ (r-c)ᵀ Σ⁻¹ (r-c))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBlob {
    amplitude: f64,
    center: Vector2<f64>,
    covariance: Matrix2<f64>,
}

impl GaussianBlob {
    /// Rejects non-finite amplitudes and covariances that are not symmetric
    /// positive definite.
    pub fn new(amplitude: f64, center: Vector2<f64>, covariance: Matrix2<f64>) -> Result<Self> {
        if !amplitude.is_finite() || !center.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("blob amplitude and center must be finite"));
        }
        let asym = (covariance[(0, 1)] - covariance[(1, 0)]).abs();
        let scale = covariance.abs().max().max(f64::MIN_POSITIVE);
        if asym > 1e-12 * scale {
            return Err(Error::SingularCovariance("blob covariance is not symmetric".into()));
        }
        let tr = covariance.trace();
        let det = covariance.determinant();
        if !(det > 0.0 && tr > 0.0) || !det.is_finite() {
            return Err(Error::SingularCovariance(format!(
                "blob covariance has det {det}, trace {tr}"
            )));
        }
        Ok(Self {
            amplitude,
            center,
            covariance,
        })
    }

    pub fn isotropic(amplitude: f64, center: Vector2<f64>, width: f64) -> Result<Self> {
        Self::new(amplitude, center, Matrix2::identity() * (width * width))
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn center(&self) -> Vector2<f64> {
        self.center
    }

    pub fn covariance(&self) -> Matrix2<f64> {
        self.covariance
    }

    /// Same shape and position, amplitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            amplitude: self.amplitude * factor,
            ..*self
        }
    }

    /// Evaluates the blob at continuous position `r`.
    pub fn evaluate(&self, r: Vector2<f64>) -> f64 {
        let inv = self
            .covariance
            .try_inverse()
            .expect("covariance validated at construction");
        let d = r - self.center;
        self.amplitude * (-0.5 * d.dot(&(inv * d))).exp()
    }
}

/// Parameters of the lumpy background: a Poisson number of isotropic
/// Gaussian lumps at uniform positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumpyParams {
    pub mean_lump_count: f64,
    pub lump_amplitude: f64,
    pub lump_width: f64,
    pub field_extent: [f64; 2],
}

impl LumpyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_lump_count >= 0.0) || !self.mean_lump_count.is_finite() {
            return Err(Error::invalid("mean_lump_count must be finite and >= 0"));
        }
        if !(self.lump_width > 0.0) {
            return Err(Error::invalid("lump_width must be > 0"));
        }
        if !self.lump_amplitude.is_finite() {
            return Err(Error::invalid("lump_amplitude must be finite"));
        }
        if !self.field_extent.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return Err(Error::invalid("field_extent must be positive"));
        }
        Ok(())
    }

    /// Lumps of amplitude 1 and width 7 with a mean count of 5 on a square field.
    pub fn standard(side: usize) -> Self {
        Self {
            mean_lump_count: 5.0,
            lump_amplitude: 1.0,
            lump_width: 7.0,
            field_extent: [side as f64, side as f64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationMode {
    Fixed,
    UniformDiscrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    pub amplitude: f64,
    pub center: [f64; 2],
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Orientation angles in degrees.
    pub orientations: Vec<f64>,
    pub orientation_mode: OrientationMode,
}

impl SignalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_x > 0.0 && self.sigma_y > 0.0) {
            return Err(Error::invalid("signal widths must be > 0"));
        }
        if self.orientations.is_empty() {
            return Err(Error::invalid("orientation set is empty"));
        }
        if self.orientation_mode == OrientationMode::Fixed && self.orientations.len() != 1 {
            return Err(Error::invalid("fixed orientation mode takes exactly one angle"));
        }
        if !self.amplitude.is_finite() || !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("signal amplitude and center must be finite"));
        }
        Ok(())
    }

    /// The elliptical signal (A = 0.2, σx = 5, σy = 1.5) centered on the grid.
    pub fn location_known(side: usize) -> Self {
        let c = (side / 2) as f64;
        Self {
            amplitude: 0.2,
            center: [c, c],
            sigma_x: 5.0,
            sigma_y: 1.5,
            orientations: vec![0.0],
            orientation_mode: OrientationMode::Fixed,
        }
    }

    /// Same signal with orientation drawn from {0°, 45°, 90°, 135°}.
    pub fn sks(side: usize) -> Self {
        Self {
            orientations: vec![0.0, 45.0, 90.0, 135.0],
            orientation_mode: OrientationMode::UniformDiscrete,
            ..Self::location_known(side)
        }
    }

    /// The signal blob at a given orientation.
    pub fn blob_at(&self, theta_deg: f64) -> Result<GaussianBlob> {
        let (s, c) = theta_deg.to_radians().sin_cos();
        let rot = Matrix2::new(c, -s, s, c);
        let widths = Matrix2::new(
            self.sigma_x * self.sigma_x,
            0.0,
            0.0,
            self.sigma_y * self.sigma_y,
        );
        let mut cov = rot.transpose() * widths * rot;
        // symmetrize away rounding from the rotation
        let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
        cov[(0, 1)] = off;
        cov[(1, 0)] = off;
        GaussianBlob::new(
            self.amplitude,
            Vector2::new(self.center[0], self.center[1]),
            cov,
        )
    }
}

/// Draws one lumpy background realisation.
pub fn sample_lumpy_background<R: Rng + ?Sized>(
    params: &LumpyParams,
    rng: &mut R,
) -> Result<Vec<GaussianBlob>> {
    params.validate()?;
    let count = if params.mean_lump_count == 0.0 {
        0
    } else {
        let poisson = Poisson::new(params.mean_lump_count)
            .map_err(|e| Error::invalid(format!("poisson mean: {e}")))?;
        poisson.sample(rng) as usize
    };
    let [w, h] = params.field_extent;
    (0..count)
        .map(|_| {
            let x = rng.random::<f64>() * w;
            let y = rng.random::<f64>() * h;
            GaussianBlob::isotropic(params.lump_amplitude, Vector2::new(x, y), params.lump_width)
        })
        .collect()
}

/// Draws the signal blob; in uniform-discrete mode the orientation is chosen
/// uniformly from the orientation set.
pub fn sample_signal<R: Rng + ?Sized>(params: &SignalParams, rng: &mut R) -> Result<GaussianBlob> {
    params.validate()?;
    let theta = match params.orientation_mode {
        OrientationMode::Fixed => params.orientations[0],
        OrientationMode::UniformDiscrete => {
            params.orientations[rng.random_range(0..params.orientations.len())]
        }
    };
    params.blob_at(theta)
}

/// Samples the blob directly on a `side × side` grid.
pub fn rasterize_blob(blob: &GaussianBlob, side: usize) -> Result<ImageVector> {
    if side == 0 {
        return Err(Error::invalid("grid side must be > 0"));
    }
    let inv = blob
        .covariance
        .try_inverse()
        .ok_or_else(|| Error::SingularCovariance("cannot invert blob covariance".into()))?;
    let mut out = vec![0.0; side * side];
    if blob.amplitude == 0.0 {
        return Ok(out);
    }
    for y in 0..side {
        for x in 0..side {
            let d = Vector2::new(x as f64, y as f64) - blob.center;
            out[y * side + x] = blob.amplitude * (-0.5 * d.dot(&(inv * d))).exp();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Domain};
    use approx_eq::assert_close;

    mod approx_eq {
        macro_rules! assert_close {
            ($a:expr, $b:expr, $tol:expr) => {{
                let (a, b): (f64, f64) = ($a, $b);
                assert!((a - b).abs() <= $tol, "{a} vs {b} (tol {})", $tol);
            }};
        }
        pub(crate) use assert_close;
    }

    #[test]
    fn standard_lumps_have_expected_shape() {
        let params = LumpyParams::standard(64);
        let mut rng = substream(1, Domain::Misc, 0);
        for _ in 0..50 {
            for lump in sample_lumpy_background(&params, &mut rng).unwrap() {
                assert_eq!(lump.amplitude(), 1.0);
                assert_eq!(lump.covariance(), Matrix2::identity() * 49.0);
                let c = lump.center();
                assert!((0.0..64.0).contains(&c.x) && (0.0..64.0).contains(&c.y));
            }
        }
    }

    #[test]
    fn zero_mean_count_gives_empty_backgrounds() {
        let params = LumpyParams {
            mean_lump_count: 0.0,
            ..LumpyParams::standard(32)
        };
        let mut rng = substream(2, Domain::Misc, 0);
        for _ in 0..100 {
            assert!(sample_lumpy_background(&params, &mut rng).unwrap().is_empty());
        }
    }

    #[test]
    fn lump_count_matches_poisson_mean() {
        let params = LumpyParams::standard(64);
        let mut rng = substream(3, Domain::Misc, 0);
        let draws = 10_000;
        let total: usize = (0..draws)
            .map(|_| sample_lumpy_background(&params, &mut rng).unwrap().len())
            .sum();
        let mean = total as f64 / draws as f64;
        assert!((mean - 5.0).abs() < 3.0 * (5.0f64 / draws as f64).sqrt(), "{mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let params = LumpyParams::standard(64);
        let a = sample_lumpy_background(&params, &mut substream(9, Domain::Train, 4)).unwrap();
        let b = sample_lumpy_background(&params, &mut substream(9, Domain::Train, 4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(rasterize_blob(&a[0], 16).unwrap(), rasterize_blob(&b[0], 16).unwrap());
    }

    #[test]
    fn signal_covariance_follows_orientation() {
        let mut params = SignalParams::location_known(64);
        let blob = sample_signal(&params, &mut substream(0, Domain::Misc, 0)).unwrap();
        assert_eq!(blob.amplitude(), 0.2);
        assert_eq!(blob.center(), Vector2::new(32.0, 32.0));
        assert_eq!(blob.covariance(), Matrix2::new(25.0, 0.0, 0.0, 2.25));

        let swapped = params.blob_at(90.0).unwrap().covariance();
        assert!((swapped - Matrix2::new(2.25, 0.0, 0.0, 25.0)).abs().max() < 1e-12);

        params.sigma_y = params.sigma_x;
        let iso = params.blob_at(45.0).unwrap().covariance();
        assert!((iso - Matrix2::identity() * 25.0).abs().max() < 1e-12);
    }

    #[test]
    fn sks_draws_only_listed_orientations() {
        let params = SignalParams::sks(64);
        let allowed: Vec<_> = params
            .orientations
            .iter()
            .map(|&t| params.blob_at(t).unwrap().covariance())
            .collect();
        let mut seen = [false; 4];
        let mut rng = substream(4, Domain::Misc, 0);
        for _ in 0..200 {
            let cov = sample_signal(&params, &mut rng).unwrap().covariance();
            let k = allowed.iter().position(|c| *c == cov).expect("unlisted orientation");
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn invalid_signal_params_rejected() {
        let mut p = SignalParams::location_known(32);
        p.orientations = vec![0.0, 90.0];
        assert!(p.validate().is_err());
        p.orientations.clear();
        p.orientation_mode = OrientationMode::UniformDiscrete;
        assert!(p.validate().is_err());
    }

    #[test]
    fn raster_values() {
        let blob = GaussianBlob::isotropic(1.0, Vector2::new(32.0, 32.0), 7.0).unwrap();
        let img = rasterize_blob(&blob, 64).unwrap();
        assert_eq!(img[32 * 64 + 32], 1.0);
        // (39, 32): one standard deviation along x
        assert_close!(img[32 * 64 + 39], 0.606_530_659_712_633_4, 1e-15);
        assert_eq!(img.iter().cloned().fold(f64::MIN, f64::max), 1.0);

        let zero = rasterize_blob(&blob.scaled(0.0), 8).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn raster_is_periodic_in_half_turns() {
        let params = SignalParams::location_known(32);
        for theta in [0.0, 30.0, 45.0, 72.5, 135.0] {
            let a = rasterize_blob(&params.blob_at(theta).unwrap(), 32).unwrap();
            let b = rasterize_blob(&params.blob_at(theta + 180.0).unwrap(), 32).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300), "{theta}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn singular_covariance_rejected() {
        let err = GaussianBlob::new(1.0, Vector2::zeros(), Matrix2::new(1.0, 1.0, 1.0, 1.0));
        assert!(matches!(err, Err(Error::SingularCovariance(_))));
        assert!(rasterize_blob(&GaussianBlob::isotropic(1.0, Vector2::zeros(), 1.0).unwrap(), 0).is_err());
    }
}
