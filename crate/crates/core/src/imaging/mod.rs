//! Idealized parallel-hole collimator imaging, measurement noise and
//! labelled dataset assembly.

pub mod storage;

pub use storage::{
    load_external_dataset, read_dataset, read_manifest, write_dataset, write_manifest,
    ExternalDataset, DATASET_MAGIC,
};

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::object_models::{
    sample_lumpy_background, sample_signal, GaussianBlob, LumpyParams, SignalParams,
};
use crate::rng::{substream, Domain};
use crate::ImageVector;

/// Point response `h/(2πw²)·exp(-|r - r_m|²/(2w²))` sampled at every pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollimatorParams {
    pub height: f64,
    pub width: f64,
    pub side: usize,
}

impl CollimatorParams {
    pub fn standard(side: usize) -> Self {
        Self {
            height: 40.0,
            width: 0.5,
            side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.height > 0.0 && self.width > 0.0) {
            return Err(Error::invalid("collimator height and width must be > 0"));
        }
        if self.side == 0 {
            return Err(Error::invalid("grid side must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub std: f64,
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.std >= 0.0) || !self.std.is_finite() {
            return Err(Error::invalid("noise std must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Whether the signal passes through the imaging operator before it is added
/// to the measured background.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalDomain {
    #[default]
    Measured,
    /// The signal is rasterized directly on the grid and added unmeasured.
    Raw,
}

/// Everything needed to simulate one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationParams {
    pub lumpy: LumpyParams,
    pub signal: SignalParams,
    pub collimator: CollimatorParams,
    pub noise: NoiseParams,
    #[serde(default)]
    pub signal_domain: SignalDomain,
}

impl SimulationParams {
    pub fn side(&self) -> usize {
        self.collimator.side
    }

    pub fn validate(&self) -> Result<()> {
        self.lumpy.validate()?;
        self.signal.validate()?;
        self.collimator.validate()?;
        self.noise.validate()
    }

    /// The protocol's lumpy parameters on a `side × side` grid, signal
    /// centred on the grid.
    pub fn standard(side: usize, sks: bool) -> Self {
        Self {
            lumpy: LumpyParams::standard(side),
            signal: if sks {
                SignalParams::sks(side)
            } else {
                SignalParams::location_known(side)
            },
            collimator: CollimatorParams::standard(side),
            noise: NoiseParams { std: 20.0 },
            signal_domain: SignalDomain::Measured,
        }
    }

    fn signal_image(&self, blob: &GaussianBlob) -> Result<ImageVector> {
        match self.signal_domain {
            SignalDomain::Measured => Ok(project_blob(blob, &self.collimator)),
            SignalDomain::Raw => crate::object_models::rasterize_blob(blob, self.side()),
        }
    }
}

/// Closed-form integral of the collimator kernel of every pixel against the
/// blob:
/// `a·h·√(det Σ / det(Σ + w²I))·exp(-½ (r_m - c)ᵀ (Σ + w²I)⁻¹ (r_m - c))`.
pub fn project_blob(blob: &GaussianBlob, coll: &CollimatorParams) -> ImageVector {
    let mut out = vec![0.0; coll.side * coll.side];
    accumulate_projection(blob, coll, &mut out);
    out
}

fn accumulate_projection(blob: &GaussianBlob, coll: &CollimatorParams, out: &mut [f64]) {
    let side = coll.side;
    if blob.amplitude() == 0.0 {
        return;
    }
    let sigma = blob.covariance();
    let blurred = sigma + Matrix2::identity() * (coll.width * coll.width);
    let gain = blob.amplitude() * coll.height * (sigma.determinant() / blurred.determinant()).sqrt();
    let c = blob.center();

    if blurred[(0, 1)] == 0.0 {
        // axis-aligned: the exponent separates into x and y factors
        let fx: Vec<f64> = (0..side)
            .map(|x| {
                let d = x as f64 - c.x;
                (-0.5 * d * d / blurred[(0, 0)]).exp()
            })
            .collect();
        for y in 0..side {
            let d = y as f64 - c.y;
            let gy = gain * (-0.5 * d * d / blurred[(1, 1)]).exp();
            for (o, f) in out[y * side..(y + 1) * side].iter_mut().zip(&fx) {
                *o += gy * f;
            }
        }
    } else {
        let inv = blurred.try_inverse().expect("blurred covariance is positive definite");
        for y in 0..side {
            for x in 0..side {
                let d = Vector2::new(x as f64, y as f64) - c;
                out[y * side + x] += gain * (-0.5 * d.dot(&(inv * d))).exp();
            }
        }
    }
}

/// Noiseless measurement of a blob collection.
pub fn project_blobs(blobs: &[GaussianBlob], coll: &CollimatorParams) -> ImageVector {
    let mut out = vec![0.0; coll.side * coll.side];
    for blob in blobs {
        accumulate_projection(blob, coll, &mut out);
    }
    out
}

/// Projects every blob and adds i.i.d. zero-mean Gaussian noise.
pub fn measure<R: Rng + ?Sized>(
    blobs: &[GaussianBlob],
    coll: &CollimatorParams,
    noise: &NoiseParams,
    rng: &mut R,
) -> ImageVector {
    let mut out = project_blobs(blobs, coll);
    add_noise(&mut out, noise, rng);
    out
}

fn add_noise<R: Rng + ?Sized>(image: &mut [f64], noise: &NoiseParams, rng: &mut R) {
    if noise.std > 0.0 {
        for v in image.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += noise.std * z;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Absent,
    Present,
}

impl Label {
    pub fn is_present(self) -> bool {
        self == Label::Present
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" | "valid" | "val" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    fn domain(self) -> Domain {
        match self {
            Split::Train => Domain::Train,
            Split::Validation => Domain::Validation,
            Split::Test => Domain::Test,
        }
    }
}

/// Signal-present and signal-absent images of one split.
///
/// Generated datasets interleave pairs: image `2k` is signal-absent and
/// `2k + 1` signal-present. Pixels live in one contiguous row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    side: usize,
    pixels: Vec<f64>,
    labels: Vec<Label>,
    pub split: Split,
    pub seed: Option<u64>,
}

impl LabeledDataset {
    pub fn new(side: usize, pixels: Vec<f64>, labels: Vec<Label>, split: Split) -> Result<Self> {
        let n = side * side;
        if side == 0 {
            return Err(Error::invalid("dataset side must be > 0"));
        }
        if pixels.len() != n * labels.len() {
            return Err(Error::mismatch(
                n * labels.len(),
                pixels.len(),
                "dataset pixel buffer",
            ));
        }
        Ok(Self {
            side,
            pixels,
            labels,
            split,
            seed: None,
        })
    }

    pub fn from_images(side: usize, images: &[ImageVector], labels: Vec<Label>, split: Split) -> Result<Self> {
        let n = side * side;
        if images.len() != labels.len() {
            return Err(Error::mismatch(labels.len(), images.len(), "images vs labels"));
        }
        let mut pixels = Vec::with_capacity(n * images.len());
        for img in images {
            if img.len() != n {
                return Err(Error::mismatch(n, img.len(), "image length"));
            }
            pixels.extend_from_slice(img);
        }
        Self::new(side, pixels, labels, split)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.pixels.chunks_exact(self.dim())
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn class_images(&self, label: Label) -> impl Iterator<Item = &[f64]> + '_ {
        self.images()
            .zip(&self.labels)
            .filter(move |(_, &l)| l == label)
            .map(|(img, _)| img)
    }

    /// Number of complete (absent, present) pairs.
    pub fn n_pairs(&self) -> usize {
        self.count(Label::Absent).min(self.count(Label::Present))
    }

    /// Dataset made of the listed image indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let n = self.dim();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            side: self.side,
            pixels,
            labels,
            split: self.split,
            seed: self.seed,
        }
    }

    /// The pairs at the given pair indices (generated interleaved layout).
    pub fn select_pairs(&self, pairs: &[usize]) -> Self {
        let idx: Vec<usize> = pairs.iter().flat_map(|&k| [2 * k, 2 * k + 1]).collect();
        self.select(&idx)
    }

    /// Concatenation of two datasets with equal sides; the split tag of
    /// `self` is kept.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.side != other.side {
            return Err(Error::mismatch(self.side, other.side, "dataset side"));
        }
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self {
            side: self.side,
            pixels,
            labels,
            split: self.split,
            seed: self.seed,
        })
    }

    /// Adds `offset[j]` to pixel `j` of every image.
    pub fn shifted(&self, offset: &[f64]) -> Self {
        let mut out = self.clone();
        for img in out.pixels.chunks_exact_mut(self.dim()) {
            for (v, o) in img.iter_mut().zip(offset) {
                *v += o;
            }
        }
        out
    }

    pub fn require_both_classes(&self) -> Result<()> {
        if self.count(Label::Present) == 0 {
            return Err(Error::EmptyClass("signal-present"));
        }
        if self.count(Label::Absent) == 0 {
            return Err(Error::EmptyClass("signal-absent"));
        }
        Ok(())
    }
}

fn simulate_image(params: &SimulationParams, present: bool, rng: &mut crate::rng::Stream) -> Result<ImageVector> {
    let blobs = sample_lumpy_background(&params.lumpy, rng)?;
    let mut image = project_blobs(&blobs, &params.collimator);
    if present {
        let blob = sample_signal(&params.signal, rng)?;
        let signal = params.signal_image(&blob)?;
        for (v, s) in image.iter_mut().zip(&signal) {
            *v += s;
        }
    }
    add_noise(&mut image, &params.noise, rng);
    Ok(image)
}

/// Simulates `n_pairs` (absent, present) pairs for one split. Every image has
/// its own background, noise and (for SKS) orientation drawn from the
/// substream `(seed, split, image index)`, so the result does not depend on
/// the rayon pool size.
pub fn generate_dataset(
    n_pairs: usize,
    params: &SimulationParams,
    seed: u64,
    split: Split,
) -> Result<LabeledDataset> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be >= 1"));
    }
    params.validate()?;
    let n = params.side() * params.side();
    let mut pixels = vec![0.0; 2 * n_pairs * n];
    pixels
        .par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(i, out)| -> Result<()> {
            let mut rng = substream(seed, split.domain(), i as u64);
            out.copy_from_slice(&simulate_image(params, i % 2 == 1, &mut rng)?);
            Ok(())
        })?;
    let labels = (0..2 * n_pairs)
        .map(|i| if i % 2 == 1 { Label::Present } else { Label::Absent })
        .collect();
    let mut ds = LabeledDataset::new(params.side(), pixels, labels, split)?;
    ds.seed = Some(seed);
    Ok(ds)
}

/// Noiseless measured lumpy backgrounds, used for covariance decomposition.
pub fn generate_backgrounds(count: usize, params: &SimulationParams, seed: u64) -> Result<Vec<ImageVector>> {
    params.lumpy.validate()?;
    params.collimator.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Domain::Backgrounds, i as u64);
            let blobs = sample_lumpy_background(&params.lumpy, &mut rng)?;
            Ok(project_blobs(&blobs, &params.collimator))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    Empirical,
    Oracle,
}

/// Mean signal-present minus mean signal-absent image.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalEstimate {
    pub delta_g_bar: ImageVector,
    pub source: EstimateSource,
    pub side: usize,
}

impl SignalEstimate {
    pub fn norm(&self) -> f64 {
        self.delta_g_bar.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.delta_g_bar.iter().all(|&v| v == 0.0)
    }

    /// The noiseless signal image averaged over the orientation set.
    pub fn oracle(params: &SimulationParams) -> Result<Self> {
        params.validate()?;
        let n = params.side() * params.side();
        let mut mean = vec![0.0; n];
        let thetas: &[f64] = match params.signal.orientation_mode {
            crate::object_models::OrientationMode::Fixed => &params.signal.orientations[..1],
            crate::object_models::OrientationMode::UniformDiscrete => &params.signal.orientations,
        };
        for &theta in thetas {
            let img = params.signal_image(&params.signal.blob_at(theta)?)?;
            for (m, v) in mean.iter_mut().zip(&img) {
                *m += v / thetas.len() as f64;
            }
        }
        Ok(Self {
            delta_g_bar: mean,
            source: EstimateSource::Oracle,
            side: params.side(),
        })
    }
}

pub fn estimate_signal(dataset: &LabeledDataset) -> Result<SignalEstimate> {
    dataset.require_both_classes()?;
    let n = dataset.dim();
    let mut sum1 = vec![0.0; n];
    let mut sum0 = vec![0.0; n];
    for (img, label) in dataset.images().zip(dataset.labels()) {
        let acc = if label.is_present() { &mut sum1 } else { &mut sum0 };
        for (a, v) in acc.iter_mut().zip(img) {
            *a += v;
        }
    }
    let n1 = dataset.count(Label::Present) as f64;
    let n0 = dataset.count(Label::Absent) as f64;
    let delta = sum1.iter().zip(&sum0).map(|(a, b)| a / n1 - b / n0).collect();
    Ok(SignalEstimate {
        delta_g_bar: delta,
        source: EstimateSource::Empirical,
        side: dataset.side(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object_models::OrientationMode;

    fn quiet(side: usize, sks: bool) -> SimulationParams {
        let mut p = SimulationParams::standard(side, sks);
        p.lumpy.mean_lump_count = 0.0;
        p.noise.std = 0.0;
        p
    }

    #[test]
    fn center_amplitudes() {
        let coll = CollimatorParams::standard(64);
        let lump = GaussianBlob::isotropic(1.0, Vector2::new(32.0, 32.0), 7.0).unwrap();
        let img = project_blob(&lump, &coll);
        assert!((img[32 * 64 + 32] - 40.0 * 49.0 / 49.25).abs() < 1e-12);

        let sig = SignalParams::location_known(64).blob_at(0.0).unwrap();
        let img = project_blob(&sig, &coll);
        let expected = 0.2 * 40.0 * (25.0 * 2.25 / (25.25 * 2.5f64)).sqrt();
        assert!((img[32 * 64 + 32] - expected).abs() < 1e-12);
        assert!((expected - 7.551_801_306_330_631).abs() < 1e-12);

        assert!(project_blob(&lump.scaled(0.0), &coll).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotated_path_agrees_with_separable_path() {
        let coll = CollimatorParams::standard(24);
        let sig = SignalParams::location_known(24);
        let a = project_blob(&sig.blob_at(0.0).unwrap(), &coll);
        // a rotation by 180° keeps the covariance diagonal up to rounding in
        // the off-diagonal, which forces the general path
        let b = project_blob(&sig.blob_at(180.0).unwrap(), &coll);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn measurement_is_linear_in_blobs() {
        let coll = CollimatorParams::standard(16);
        let blob = GaussianBlob::isotropic(1.0, Vector2::new(5.3, 9.1), 3.0).unwrap();
        let single = project_blob(&blob, &coll);
        let mut rng = substream(0, Domain::Misc, 0);
        let double = measure(&[blob, blob], &coll, &NoiseParams { std: 0.0 }, &mut rng);
        for (s, d) in single.iter().zip(&double) {
            assert!((2.0 * s - d).abs() < 1e-12 * d.abs().max(1.0));
        }
        let empty = measure(&[], &coll, &NoiseParams { std: 0.0 }, &mut rng);
        assert!(empty.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_has_requested_std() {
        let coll = CollimatorParams::standard(4);
        let noise = NoiseParams { std: 20.0 };
        let mut rng = substream(11, Domain::Misc, 0);
        let draws = 10_000;
        let mut s = [0.0; 16];
        let mut s2 = [0.0; 16];
        for _ in 0..draws {
            let img = measure(&[], &coll, &noise, &mut rng);
            for (k, v) in img.iter().enumerate() {
                s[k] += v;
                s2[k] += v * v;
            }
        }
        for k in 0..16 {
            let mean = s[k] / draws as f64;
            let var = (s2[k] - draws as f64 * mean * mean) / (draws as f64 - 1.0);
            assert!((var.sqrt() / 20.0 - 1.0).abs() < 0.02, "pixel {k}: {}", var.sqrt());
        }
    }

    #[test]
    fn dataset_layout_and_pair_difference() {
        let params = quiet(16, false);
        let ds = generate_dataset(1, &params, 3, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[Label::Absent, Label::Present]);
        let signal = project_blob(&params.signal.blob_at(0.0).unwrap(), &params.collimator);
        for ((a, p), s) in ds.image(0).iter().zip(ds.image(1)).zip(&signal) {
            assert_eq!(*a, 0.0);
            assert_eq!(p - a, *s);
        }
    }

    #[test]
    fn generation_is_deterministic_across_pool_sizes() {
        let params = SimulationParams::standard(16, true);
        let a = generate_dataset(20, &params, 99, Split::Validation).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| generate_dataset(20, &params, 99, Split::Validation).unwrap());
        assert_eq!(a, b);
        let c = generate_dataset(20, &params, 99, Split::Test).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn signal_estimate_cases() {
        let params = quiet(16, false);
        let ds = generate_dataset(5, &params, 1, Split::Train).unwrap();
        let est = estimate_signal(&ds).unwrap();
        let signal = project_blob(&params.signal.blob_at(0.0).unwrap(), &params.collimator);
        for (e, s) in est.delta_g_bar.iter().zip(&signal) {
            assert!((e - s).abs() < 1e-12);
        }

        let noisy = generate_dataset(1, &SimulationParams::standard(16, false), 1, Split::Train).unwrap();
        let est = estimate_signal(&noisy).unwrap();
        for ((e, a), p) in est.delta_g_bar.iter().zip(noisy.image(0)).zip(noisy.image(1)) {
            assert_eq!(*e, p - a);
        }

        let absent_only = ds.select(&[0, 2]);
        assert!(matches!(estimate_signal(&absent_only), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn sks_estimate_converges_to_orientation_average() {
        let params = quiet(32, true);
        let ds = generate_dataset(10_000, &params, 5, Split::Train).unwrap();
        let est = estimate_signal(&ds).unwrap();
        let oracle = SignalEstimate::oracle(&params).unwrap();
        let peak = project_blob(&params.signal.blob_at(0.0).unwrap(), &params.collimator)
            .into_iter()
            .fold(0.0, f64::max);
        let worst = est
            .delta_g_bar
            .iter()
            .zip(&oracle.delta_g_bar)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05 * peak, "{worst} vs peak {peak}");
        assert_eq!(params.signal.orientation_mode, OrientationMode::UniformDiscrete);
    }

    #[test]
    fn raw_domain_signal_is_unmeasured() {
        let mut params = quiet(16, false);
        params.signal.center = [8.0, 8.0];
        params.signal_domain = SignalDomain::Raw;
        let ds = generate_dataset(1, &params, 0, Split::Train).unwrap();
        assert!((ds.image(1)[8 * 16 + 8] - 0.2).abs() < 1e-15);
    }
}
