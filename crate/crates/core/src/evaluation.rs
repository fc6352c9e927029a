//! Figures of merit for scalar test statistics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::persist;
use crate::rng::{substream, Domain};

/// Standard normal CDF, `½·erfc(-x/√2)`. `statrs` evaluates erfc with
/// rational approximations good to double precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Mann-Whitney estimate of the AUC: the fraction of (present, absent) pairs
/// ranked correctly, ties counting one half.
pub fn empirical_auc(t_present: &[f64], t_absent: &[f64]) -> f64 {
    if t_present.is_empty() || t_absent.is_empty() {
        return f64::NAN;
    }
    let mut absent = t_absent.to_vec();
    absent.sort_by(f64::total_cmp);
    // twice the U statistic, kept integral
    let u2: u128 = t_present
        .iter()
        .map(|&t| {
            let below = absent.partition_point(|&a| a < t) as u128;
            let tied = absent.partition_point(|&a| a <= t) as u128 - below;
            2 * below + tied
        })
        .sum();
    u2 as f64 / (2 * t_present.len() as u128 * t_absent.len() as u128) as f64
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn check_two_each(t_present: &[f64], t_absent: &[f64]) -> Result<()> {
    if t_present.len() < 2 || t_absent.len() < 2 {
        return Err(Error::invalid("each class needs at least two scores"));
    }
    Ok(())
}

/// `(⟨t⟩₁ - ⟨t⟩₀) / √(½σ₀² + ½σ₁²)` with unbiased variances.
pub fn snr_t(t_present: &[f64], t_absent: &[f64]) -> Result<f64> {
    check_two_each(t_present, t_absent)?;
    let (m1, v1) = moments(t_present);
    let (m0, v0) = moments(t_absent);
    if v0 == 0.0 && v1 == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((m1 - m0) / (0.5 * v0 + 0.5 * v1).sqrt())
}

fn binormal_point(t_present: &[f64], t_absent: &[f64]) -> Option<f64> {
    let (m1, v1) = moments(t_present);
    let (m0, v0) = moments(t_absent);
    let spread = (v0 + v1).sqrt();
    if spread > 0.0 {
        Some(normal_cdf((m1 - m0) / spread))
    } else if m1 == m0 {
        None
    } else {
        Some(if m1 > m0 { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 200,
            seed: 0,
        }
    }
}

/// Moment-fit binormal AUC `Φ((μ₁ - μ₀)/√(σ₀² + σ₁²))` and its bootstrap
/// standard error (classes resampled independently).
pub fn binormal_auc(t_present: &[f64], t_absent: &[f64], boot: &BootstrapConfig) -> Result<(f64, f64)> {
    check_two_each(t_present, t_absent)?;
    let auc = binormal_point(t_present, t_absent).ok_or(Error::ZeroVariance)?;
    if boot.resamples < 2 {
        return Ok((auc, f64::NAN));
    }
    let mut rng = substream(boot.seed, Domain::Bootstrap, 0);
    let mut p = vec![0.0; t_present.len()];
    let mut a = vec![0.0; t_absent.len()];
    let mut draws = Vec::with_capacity(boot.resamples);
    for _ in 0..boot.resamples {
        for slot in p.iter_mut() {
            *slot = t_present[rng.random_range(0..t_present.len())];
        }
        for slot in a.iter_mut() {
            *slot = t_absent[rng.random_range(0..t_absent.len())];
        }
        if let Some(v) = binormal_point(&p, &a) {
            draws.push(v);
        }
    }
    let se = if draws.len() >= 2 { moments(&draws).1.sqrt() } else { 0.0 };
    Ok((auc, se))
}

/// Empirical ROC: the threshold sweeps every distinct score from above, so
/// the curve steps from (0, 0) to (1, 1) with one vertex per distinct score.
/// Tied present/absent scores produce a diagonal segment. `n_points` keeps at
/// most that many vertices (always including both ends) for plotting.
pub fn roc_curve(t_present: &[f64], t_absent: &[f64], n_points: Option<usize>) -> Vec<(f64, f64)> {
    if t_present.is_empty() || t_absent.is_empty() {
        return Vec::new();
    }
    let mut all: Vec<(f64, bool)> = t_present
        .iter()
        .map(|&t| (t, true))
        .chain(t_absent.iter().map(|&t| (t, false)))
        .collect();
    all.sort_by(|x, y| y.0.total_cmp(&x.0));
    let (np, na) = (t_present.len() as f64, t_absent.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / na, tp as f64 / np));
    }
    match n_points {
        Some(k) if k >= 2 && points.len() > k => {
            let last = points.len() - 1;
            (0..k).map(|j| points[j * last / (k - 1)]).collect()
        }
        _ => points,
    }
}

/// Trapezoidal area under a polyline ROC.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub auc_empirical: f64,
    pub auc_binormal: f64,
    pub auc_std_error: f64,
    pub snr: f64,
    pub roc_points: Vec<(f64, f64)>,
    pub n_present: usize,
    pub n_absent: usize,
}

impl RocSummary {
    pub fn compute(t_present: &[f64], t_absent: &[f64], boot: &BootstrapConfig) -> Result<Self> {
        let (auc_binormal, auc_std_error) = binormal_auc(t_present, t_absent, boot)?;
        Ok(Self {
            auc_empirical: empirical_auc(t_present, t_absent),
            auc_binormal,
            auc_std_error,
            snr: snr_t(t_present, t_absent)?,
            roc_points: roc_curve(t_present, t_absent, None),
            n_present: t_present.len(),
            n_absent: t_absent.len(),
        })
    }

    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        [
            ("auc_empirical", self.auc_empirical.to_string()),
            ("auc_binormal", self.auc_binormal.to_string()),
            ("auc_std_error", self.auc_std_error.to_string()),
            ("snr", self.snr.to_string()),
            ("n_present", self.n_present.to_string()),
            ("n_absent", self.n_absent.to_string()),
            ("roc_vertices", self.roc_points.len().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Writes the flat record and, when `roc_path` is given, the (FPF, TPF)
    /// two-column file.
    pub fn write(&self, summary_path: &Path, roc_path: Option<&Path>) -> Result<()> {
        let text = persist::format_key_values("cho roc summary v1", &self.to_key_values());
        persist::write_atomic(summary_path, text.as_bytes())?;
        if let Some(path) = roc_path {
            let mut out = String::from("# fpf tpf\n");
            for (f, t) in &self.roc_points {
                out.push_str(&format!("{f} {t}\n"));
            }
            persist::write_atomic(path, out.as_bytes())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(p: &[f64], a: &[f64]) -> f64 {
        let mut twice = 0u64;
        for x in p {
            for y in a {
                twice += if x > y { 2 } else if x == y { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * p.len() * a.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(empirical_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(empirical_auc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.5);
        assert_eq!(empirical_auc(&[1.0, 3.0], &[2.0, 0.0]), 0.75);
    }

    #[test]
    fn normal_cdf_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.0 / 2f64.sqrt()) - 0.760_249_938_906_523_6).abs() < 1e-12);
        let tail = normal_cdf(-1.959_963_984_540_054);
        assert!((tail - 0.025).abs() < 1e-10, "{tail}");
    }

    #[test]
    fn binormal_matches_closed_form_for_exact_moments() {
        // two-point samples with mean 0/1 and unbiased variance 1
        let h = 0.5f64.sqrt();
        let absent = [-h, h];
        let present = [1.0 - h, 1.0 + h];
        let (auc, _) = binormal_auc(&present, &absent, &BootstrapConfig { resamples: 0, seed: 0 }).unwrap();
        assert!((auc - 0.760_249_938_906_523_6).abs() < 1e-12);
        let snr = snr_t(&present, &absent).unwrap();
        assert!((snr - 1.0).abs() < 1e-12);
        assert!((auc - normal_cdf(snr / 2f64.sqrt())).abs() < 1e-15);

        let (same, _) = binormal_auc(&absent, &absent, &BootstrapConfig::default()).unwrap();
        assert_eq!(same, 0.5);
        assert!(binormal_auc(&[1.0, 1.0], &[1.0, 1.0], &BootstrapConfig::default()).is_err());
        assert!(snr_t(&[1.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn snr_symmetries() {
        let p = [1.0, 2.5, 0.3, 4.0];
        let a = [0.1, -1.0, 0.7, 0.2];
        let s = snr_t(&p, &a).unwrap();
        assert!((snr_t(&a, &p).unwrap() + s).abs() < 1e-15);
        let scale = |xs: &[f64]| xs.iter().map(|x| 3.5 * x).collect::<Vec<_>>();
        assert!((snr_t(&scale(&p), &scale(&a)).unwrap() - s).abs() < 1e-12);
    }

    #[test]
    fn roc_shapes() {
        let perfect = roc_curve(&[2.0, 3.0], &[0.0, 1.0], None);
        assert!(perfect.contains(&(0.0, 1.0)));
        assert_eq!(perfect.first(), Some(&(0.0, 0.0)));
        assert_eq!(perfect.last(), Some(&(1.0, 1.0)));

        let tied = roc_curve(&[1.0, 2.0], &[1.0, 2.0], None);
        assert!(tied.iter().all(|(f, t)| f == t));
        assert_eq!(roc_curve(&[1.0; 5], &[0.0; 5], Some(2)), vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn bootstrap_error_shrinks_with_sample_size() {
        use rand_distr::{Distribution, StandardNormal};
        let mut ratios = Vec::new();
        for trial in 0..20u64 {
            let mut rng = substream(trial, Domain::Misc, 0);
            let mut draw = |n: usize, shift: f64| -> Vec<f64> {
                (0..n).map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>()
            };
            let (p1, a1) = (draw(200, 1.0), draw(200, 0.0));
            let (p2, a2) = (draw(400, 1.0), draw(400, 0.0));
            let boot = BootstrapConfig { resamples: 200, seed: trial };
            let se1 = binormal_auc(&p1, &a1, &boot).unwrap().1;
            let se2 = binormal_auc(&p2, &a2, &boot).unwrap().1;
            ratios.push(se2 / se1);
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((mean - 0.71).abs() < 0.15, "{mean}");
    }

    proptest! {
        #[test]
        fn auc_matches_enumeration(
            p in prop::collection::vec(-5i32..5, 1..40),
            a in prop::collection::vec(-5i32..5, 1..40),
        ) {
            let p: Vec<f64> = p.into_iter().map(f64::from).collect();
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let auc = empirical_auc(&p, &a);
            prop_assert_eq!(auc, brute_auc(&p, &a));
            prop_assert_eq!(auc + empirical_auc(&a, &p), 1.0);
            prop_assert!((trapezoid_area(&roc_curve(&p, &a, None)) - auc).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_maps(
            p in prop::collection::vec(-3.0f64..3.0, 1..30),
            a in prop::collection::vec(-3.0f64..3.0, 1..30),
        ) {
            let f = |xs: &[f64]| xs.iter().map(|x| (2.0 * x).exp() + 7.0).collect::<Vec<_>>();
            prop_assert_eq!(empirical_auc(&p, &a), empirical_auc(&f(&p), &f(&a)));
        }
    }
}
