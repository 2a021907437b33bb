//! Energy-score losses on SDF Gaussians and the latent regularizer.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{LatentGaussian, SdfDecoder};
use crate::error::{Error, Result};
use crate::geometry::PoseGaussian;
use crate::numeric::{derive_seed, pairwise_sum};
use crate::propagation::{linearize_at, sum_gradients, JacobianPoint, ParamGradient};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::invalid("energy score needs at least 2 samples"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

/// Energy score and its derivatives for fixed standard-normal draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsValue {
    pub value: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
    /// Derivative with respect to the variance; zero when the variance is zero.
    pub d_var: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn energy_score_gaussian(mu: f64, var: f64, target: f64, cfg: &EsConfig) -> Result<f64> {
    Ok(energy_score_with_grad(mu, var, target, cfg)?.value)
}

/// Monte-Carlo energy score of `N(mu, var)` against `target`, with samples
/// `mu + sqrt(var) * eps_m` and the consecutive-pair spread term.
pub fn energy_score_with_grad(mu: f64, var: f64, target: f64, cfg: &EsConfig) -> Result<EsValue> {
    cfg.validate()?;
    if !(var >= 0.0) {
        return Err(Error::invalid(format!("energy score variance {var} is negative")));
    }
    let m = cfg.samples;
    let sigma = var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut fit = 0.0;
    let mut d_mu = 0.0;
    let mut d_sigma_fit = 0.0;
    let mut spread = 0.0;
    let mut prev: f64 = StandardNormal.sample(&mut rng);
    for k in 0..m {
        let eps = if k == 0 {
            prev
        } else {
            let e: f64 = StandardNormal.sample(&mut rng);
            spread += (e - prev).abs();
            prev = e;
            e
        };
        let r = mu + sigma * eps - target;
        let sg = sign(r);
        fit += r.abs();
        d_mu += sg;
        d_sigma_fit += sg * eps;
    }
    let inv_m = 1.0 / m as f64;
    let pair = 1.0 / (2.0 * (m - 1) as f64);
    let d_sigma = d_sigma_fit * inv_m - spread * pair;
    Ok(EsValue {
        value: fit * inv_m - sigma * spread * pair,
        d_mu: d_mu * inv_m,
        d_sigma,
        d_var: if sigma > 0.0 { d_sigma / (2.0 * sigma) } else { 0.0 },
    })
}

/// Seed for the draws at one observed point. Keyed on the coordinates so the
/// loss does not depend on the order of the point set.
pub fn point_seed(seed: u64, p: &Vector3<f64>) -> u64 {
    derive_seed(seed, &[p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
}

pub fn loss_3d<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &LatentGaussian,
    pose: &PoseGaussian,
    points_w: &[Vector3<f64>],
    cfg: &EsConfig,
) -> Result<f64> {
    Ok(loss_3d_with_grad(decoder, z, pose, points_w, cfg)?.0)
}

/// Mean energy score of the SDF Gaussians at `points_w` against zero.
pub fn loss_3d_with_grad<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &LatentGaussian,
    pose: &PoseGaussian,
    points_w: &[Vector3<f64>],
    cfg: &EsConfig,
) -> Result<(f64, ParamGradient)> {
    loss_3d_at(decoder, z, pose, points_w, cfg, None)
}

/// [`loss_3d_with_grad`] with variance Jacobians optionally frozen at `at`.
pub fn loss_3d_at<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &LatentGaussian,
    pose: &PoseGaussian,
    points_w: &[Vector3<f64>],
    cfg: &EsConfig,
    at: Option<&JacobianPoint>,
) -> Result<(f64, ParamGradient)> {
    if points_w.is_empty() {
        return Err(Error::invalid("3D loss needs at least one observed point"));
    }
    cfg.validate()?;
    let parts: Vec<(f64, ParamGradient)> = points_w
        .par_iter()
        .map(|p| {
            let lin = linearize_at(decoder, z, pose, p, at)?;
            let es = energy_score_with_grad(
                lin.gaussian.mean,
                lin.gaussian.var,
                0.0,
                &cfg.with_seed(point_seed(cfg.seed, p)),
            )?;
            let mut g = ParamGradient::zeros(z.dim());
            g.accumulate(&lin, z, pose, es.d_mu, es.d_var);
            Ok((es.value, g))
        })
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let values: Vec<f64> = parts.iter().map(|(v, _)| *v).collect();
    let grads: Vec<ParamGradient> = parts.into_iter().map(|(_, g)| g).collect();
    let mut grad = sum_gradients(&grads, z.dim());
    grad.scale(1.0 / n);
    Ok((pairwise_sum(&values) / n, grad))
}

/// Squared norm of the latent mean.
pub fn latent_regularizer(z: &LatentGaussian) -> f64 {
    z.mean.iter().map(|v| v * v).sum()
}

pub fn latent_regularizer_grad(z: &LatentGaussian) -> Vec<f64> {
    z.mean.iter().map(|v| 2.0 * v).collect()
}

/// Closed-form CRPS of `N(mu, sigma^2)` at `target`.
pub fn gaussian_crps(mu: f64, sigma: f64, target: f64) -> f64 {
    use crate::numeric::{normal_cdf, normal_pdf};
    if sigma == 0.0 {
        return (mu - target).abs();
    }
    let w = (target - mu) / sigma;
    sigma * (w * (2.0 * normal_cdf(w) - 1.0) + 2.0 * normal_pdf(w) - 1.0 / std::f64::consts::PI.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::AnalyticEllipsoid;
    use crate::geometry::Pose9;
    use proptest::prelude::*;

    fn cfg(seed: u64) -> EsConfig {
        EsConfig { samples: 1000, seed }
    }

    #[test]
    fn zero_variance_is_absolute_error() {
        let v = energy_score_with_grad(1.25, 0.0, -0.5, &cfg(1)).unwrap();
        assert_eq!(v.value, 1.75);
        assert_eq!(v.d_mu, 1.0);
        assert_eq!(v.d_var, 0.0);
    }

    fn seed_averaged(mu: f64, var: f64, target: f64, runs: u64) -> f64 {
        (0..runs)
            .map(|k| energy_score_gaussian(mu, var, target, &cfg(100 + k)).unwrap())
            .sum::<f64>()
            / runs as f64
    }

    #[test]
    fn estimator_is_centered_on_closed_form() {
        // one run at 1000 draws has a standard deviation near 0.0125 here
        let a = seed_averaged(0.0, 1.0, 0.0, 64);
        assert!((a - 0.2337).abs() < 0.01, "{a}");
        let b = seed_averaged(3.0, 1.0, 0.0, 64);
        assert!((b - gaussian_crps(3.0, 1.0, 0.0)).abs() < 0.02, "{b}");
    }

    #[test]
    fn crps_oracle_examples() {
        let c0 = 2.0 * crate::numeric::normal_pdf(0.0) - 1.0 / std::f64::consts::PI.sqrt();
        assert!((gaussian_crps(0.0, 1.0, 0.0) - c0).abs() < 1e-15);
        assert!((c0 - 0.2337).abs() < 1e-4);
        // E|X| - E|X - X'| / 2 for X ~ N(3, 1), via the folded-normal mean
        use crate::numeric::{normal_cdf, normal_pdf};
        let folded = 2.0 * normal_pdf(3.0) + 3.0 * (1.0 - 2.0 * normal_cdf(-3.0));
        let expected = folded - 1.0 / std::f64::consts::PI.sqrt();
        assert!((gaussian_crps(3.0, 1.0, 0.0) - expected).abs() < 1e-12);
        assert!((expected - 2.4366).abs() < 1e-4);
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(matches!(
            energy_score_gaussian(0.0, -1e-3, 0.0, &cfg(0)),
            Err(Error::InvalidInput(_))
        ));
        let bad = EsConfig { samples: 1, seed: 0 };
        assert!(energy_score_gaussian(0.0, 1.0, 0.0, &bad).is_err());
    }

    #[test]
    fn derivatives_match_common_random_number_differences() {
        for &(mu, var, t) in &[(0.3, 0.5, 0.0), (-1.0, 2.0, 0.5), (0.01, 1e-4, 0.0), (2.0, 0.1, -1.0)] {
            let c = cfg(7);
            let v = energy_score_with_grad(mu, var, t, &c).unwrap();
            // the estimator is piecewise linear in mu; keep steps inside one piece
            let h = 1e-7;
            let fmu = (energy_score_gaussian(mu + h, var, t, &c).unwrap()
                - energy_score_gaussian(mu - h, var, t, &c).unwrap())
                / (2.0 * h);
            let hv = 1e-7 * var;
            let fvar = (energy_score_gaussian(mu, var + hv, t, &c).unwrap()
                - energy_score_gaussian(mu, var - hv, t, &c).unwrap())
                / (2.0 * hv);
            assert!((v.d_mu - fmu).abs() <= 1e-3 * fmu.abs().max(1e-3), "{} {fmu}", v.d_mu);
            assert!((v.d_var - fvar).abs() <= 1e-3 * fvar.abs().max(1e-3), "{} {fvar}", v.d_var);
        }
    }

    #[test]
    fn minimized_at_target() {
        let c = cfg(9);
        let at = energy_score_gaussian(0.5, 0.04, 0.5, &c).unwrap();
        for k in 1..=40 {
            let off = k as f64 * 0.02;
            assert!(energy_score_gaussian(0.5 + off, 0.04, 0.5, &c).unwrap() > at - 2e-3);
            assert!(energy_score_gaussian(0.5 - off, 0.04, 0.5, &c).unwrap() > at - 2e-3);
        }
        let far = energy_score_gaussian(1.3, 0.04, 0.5, &c).unwrap();
        assert!(far > at);
    }

    #[test]
    fn loss_3d_examples() {
        let d = AnalyticEllipsoid::default();
        let z = LatentGaussian::zeros(64);
        let pose = PoseGaussian::deterministic(Pose9::identity());
        let on: Vec<Vector3<f64>> = (0..20)
            .map(|k| {
                let a = k as f64 * 0.3;
                Vector3::new(a.cos(), a.sin(), 0.0)
            })
            .collect();
        assert!(loss_3d(&d, &z, &pose, &on, &cfg(1)).unwrap() < 1e-15);
        let out: Vec<Vector3<f64>> = on.iter().map(|p| p * 1.1).collect();
        assert!((loss_3d(&d, &z, &pose, &out, &cfg(1)).unwrap() - 0.1).abs() < 1e-12);
        assert!(loss_3d(&d, &z, &pose, &[], &cfg(1)).is_err());

        let zv = LatentGaussian::new(vec![0.0; 64], vec![1e-3; 64]).unwrap();
        let p = Vector3::new(0.2, 1.3, -0.1);
        let single = loss_3d(&d, &zv, &pose, &[p], &cfg(5)).unwrap();
        let g = crate::propagation::sdf_distribution(&d, &zv, &pose, &p).unwrap();
        let direct = energy_score_gaussian(g.mean, g.var, 0.0, &cfg(5).with_seed(point_seed(5, &p))).unwrap();
        assert_eq!(single, direct);
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(latent_regularizer(&LatentGaussian::zeros(64)), 0.0);
        let mut e = vec![0.0; 64];
        e[0] = 1.0;
        assert_eq!(latent_regularizer(&LatentGaussian::new(e, vec![0.0; 64]).unwrap()), 1.0);
        let r = latent_regularizer(&LatentGaussian::new(vec![0.1; 64], vec![0.0; 64]).unwrap());
        assert!((r - 0.64).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn loss_3d_is_permutation_invariant(seed in 0u64..1000, rot in 1usize..15) {
            let d = AnalyticEllipsoid::default();
            let z = LatentGaussian::new(vec![0.0; 64], vec![1e-4; 64]).unwrap();
            let pose = PoseGaussian::new(Pose9::identity(), [1e-4; 9]).unwrap();
            let pts: Vec<Vector3<f64>> = (0..16)
                .map(|k| {
                    let a = k as f64 * 0.7 + seed as f64;
                    Vector3::new(a.cos(), a.sin(), 0.1 * a.sin()) * 1.05
                })
                .collect();
            let mut rotated = pts.clone();
            rotated.rotate_left(rot);
            let a = loss_3d(&d, &z, &pose, &pts, &cfg(seed)).unwrap();
            let b = loss_3d(&d, &z, &pose, &rotated, &cfg(seed)).unwrap();
            prop_assert!((a - b).abs() <= 1e-14);
        }
    }
}
