//! Probabilistic depth rendering of an SDF Gaussian field.
//!
//! Each pixel ray is sampled at evenly spaced depths. A sample's SDF
//! Gaussian becomes a logit-normal occupancy; occupancy draws come from a
//! per-ray scrambled Sobol table through the logit-normal quantile. Every
//! draw yields first-hit termination weights and a depth; the rendered depth
//! Gaussian is the mean and population variance of those per-draw depths.

mod logit_normal;
mod qmc;

pub use logit_normal::{logit_normal_cdf, logit_normal_pdf, logit_normal_quantile, occupancy_from_sdf};
pub use qmc::SobolTable;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{LatentGaussian, SdfDecoder};
use crate::error::{Error, Result};
use crate::geometry::{PoseGaussian, Rigid};
use crate::ingestion::{DepthFrame, Intrinsics};
use crate::numeric::{derive_seed, normal_quantile, pairwise_sum, sigmoid};
use crate::propagation::{linearize_at, sum_gradients, JacobianPoint, LinearizedSdf, ParamGradient, SdfGaussian};
use crate::surface_loss::{energy_score_with_grad, EsConfig};

pub const VARIANCE_FLOOR: f64 = 1e-12;

const SEED_TAG_QMC: u64 = 0x51;
const SEED_TAG_SCORE: u64 = 0x52;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RayConfig {
    pub samples_per_ray: usize,
    pub surface_band: f64,
    pub slope: f64,
    pub sobol_count: usize,
    pub background_depth_factor: f64,
}

impl Default for RayConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 32,
            surface_band: 0.05,
            slope: 400.0,
            sobol_count: 128,
            background_depth_factor: 1.1,
        }
    }
}

impl RayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray == 0 {
            return Err(Error::invalid("samples_per_ray must be at least 1"));
        }
        if !(self.surface_band > 0.0) {
            return Err(Error::invalid("surface_band must be positive"));
        }
        if !(self.slope > 0.0) {
            return Err(Error::invalid("slope must be positive"));
        }
        if self.sobol_count < 2 {
            return Err(Error::invalid("sobol_count must be at least 2"));
        }
        if !(self.background_depth_factor >= 1.0) {
            return Err(Error::invalid("background_depth_factor must be at least 1"));
        }
        Ok(())
    }
}

/// Depth interval sampled along one ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthRange {
    pub near: f64,
    pub far: f64,
}

impl DepthRange {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near < far) || !near.is_finite() || !far.is_finite() {
            return Err(Error::invalid(format!("depth range [{near}, {far}] is empty")));
        }
        Ok(Self { near, far })
    }

    /// `samples` depths `near + (i / samples) (far - near)` for `i = 1..=samples`.
    pub fn sample_depths(&self, samples: usize) -> Vec<f64> {
        let span = self.far - self.near;
        (1..=samples)
            .map(|i| self.near + (i as f64 / samples as f64) * span)
            .collect()
    }
}

/// Depth interval where the pixel ray crosses a sphere, with depth measured
/// along the camera z axis. `None` when the ray misses or the sphere is
/// behind the camera.
pub fn sphere_depth_range(
    intrinsics: &Intrinsics,
    t_wc: &Rigid,
    u: usize,
    v: usize,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<DepthRange> {
    let dir = t_wc.rotation * intrinsics.ray(u as f64, v as f64);
    let oc = t_wc.translation - center;
    let a = dir.norm_squared();
    let b = oc.dot(&dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - a * c;
    if disc <= 0.0 {
        return None;
    }
    let root = disc.sqrt();
    let far = (-b + root) / a;
    let near = ((-b - root) / a).max(1e-6);
    if far <= near {
        return None;
    }
    Some(DepthRange { near, far })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub depths: Vec<f64>,
    pub points_w: Vec<Vector3<f64>>,
}

pub fn ray_sample(
    intrinsics: &Intrinsics,
    t_wc: &Rigid,
    u: usize,
    v: usize,
    range: &DepthRange,
    samples: usize,
) -> Result<RaySamples> {
    if u >= intrinsics.width || v >= intrinsics.height {
        return Err(Error::invalid(format!(
            "pixel ({u}, {v}) is outside the {}x{} image",
            intrinsics.width, intrinsics.height
        )));
    }
    let dir = intrinsics.ray(u as f64, v as f64);
    let depths = range.sample_depths(samples);
    let points_w = depths.iter().map(|&d| t_wc.apply(&(dir * d))).collect();
    Ok(RaySamples { depths, points_w })
}

/// First-hit weights for one occupancy draw; the last entry is the escape
/// probability.
pub fn termination_weights(occupancy: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(occupancy.len() + 1);
    let mut transmittance = 1.0;
    for &o in occupancy {
        out.push(o * transmittance);
        transmittance *= 1.0 - o;
    }
    out.push(transmittance);
    out
}

/// Expected depth of one occupancy draw, accumulated back to front so that
/// escaping rays land on `background`.
pub fn draw_depth(occupancy: &[f64], depths: &[f64], background: f64) -> f64 {
    occupancy
        .iter()
        .zip(depths)
        .rev()
        .fold(background, |rest, (&o, &d)| o * d + (1.0 - o) * rest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Termination {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Row-major `draws x (samples + 1)` per-draw weights.
    pub weights: Vec<f64>,
    pub draws: usize,
}

impl Termination {
    pub fn draw(&self, m: usize) -> &[f64] {
        let w = self.mean.len();
        &self.weights[m * w..(m + 1) * w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BetaMatch {
    Fit { alpha: f64, beta: f64, clamped: bool },
    Degenerate,
}

/// Beta distribution with the given mean and variance. Variances at or above
/// `mean (1 - mean)` are clamped to 99% of that bound and flagged.
pub fn beta_moment_match(mean: f64, var: f64) -> BetaMatch {
    if !(mean > 0.0 && mean < 1.0) || !(var > 0.0) {
        return BetaMatch::Degenerate;
    }
    let bound = mean * (1.0 - mean);
    let (var, clamped) = if var >= bound { (0.99 * bound, true) } else { (var, false) };
    let common = bound / var - 1.0;
    BetaMatch::Fit {
        alpha: mean * common,
        beta: (1.0 - mean) * common,
        clamped,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRender {
    pub sample_depths: Vec<f64>,
    pub termination_mean: Vec<f64>,
    pub termination_var: Vec<f64>,
    pub depth_mean: f64,
    pub depth_var: f64,
}

impl RayRender {
    pub fn termination_betas(&self) -> Vec<BetaMatch> {
        self.termination_mean
            .iter()
            .zip(&self.termination_var)
            .map(|(&m, &v)| beta_moment_match(m, v))
            .collect()
    }
}

/// Occupancy draws for one ray plus what the backward pass needs.
struct DrawSet {
    samples: usize,
    draws: usize,
    occupancy: Vec<f64>,
    /// Standard-normal quantile used by each draw; zero outside the band.
    normal: Vec<f64>,
    sigma: Vec<f64>,
    in_band: Vec<bool>,
}

/// A pixel to score: its ray interval and target depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelTarget {
    pub u: usize,
    pub v: usize,
    pub range: DepthRange,
    pub target: f64,
}

impl PixelTarget {
    pub fn object(u: usize, v: usize, range: DepthRange, measured: f64) -> Self {
        Self {
            u,
            v,
            range,
            target: measured,
        }
    }

    pub fn background(u: usize, v: usize, range: DepthRange, cfg: &RayConfig) -> Self {
        Self {
            u,
            v,
            range,
            target: cfg.background_depth_factor * range.far,
        }
    }
}

pub struct Renderer {
    cfg: RayConfig,
    sobol: SobolTable,
}

impl Renderer {
    pub fn new(cfg: RayConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            sobol: SobolTable::new(cfg.sobol_count, cfg.samples_per_ray)?,
            cfg,
        })
    }

    pub fn config(&self) -> &RayConfig {
        &self.cfg
    }

    fn draw_occupancies(&self, sdf: &[SdfGaussian], shift_seed: u64) -> Result<DrawSet> {
        let samples = sdf.len();
        if samples == 0 || samples > self.sobol.dims() {
            return Err(Error::invalid(format!(
                "ray has {samples} samples, renderer is configured for 1..={}",
                self.sobol.dims()
            )));
        }
        let draws = self.sobol.count();
        let l = self.cfg.slope;
        let seeds = self.sobol.scramble_seeds(shift_seed);
        let in_band: Vec<bool> = sdf.iter().map(|g| g.mean.abs() <= self.cfg.surface_band).collect();
        let sigma: Vec<f64> = sdf.iter().map(|g| g.var.max(VARIANCE_FLOOR).sqrt()).collect();
        let mut occupancy = vec![0.0; draws * samples];
        let mut normal = vec![0.0; draws * samples];
        for m in 0..draws {
            for j in 0..samples {
                let k = m * samples + j;
                if in_band[j] {
                    let q = normal_quantile(self.sobol.scrambled(m, j, &seeds));
                    normal[k] = q;
                    occupancy[k] = sigmoid(l * sigma[j] * q - l * sdf[j].mean);
                } else {
                    occupancy[k] = occupancy_from_sdf(sdf[j].mean, l);
                }
            }
        }
        Ok(DrawSet {
            samples,
            draws,
            occupancy,
            normal,
            sigma,
            in_band,
        })
    }

    /// Mean and population variance of the per-draw termination weights.
    pub fn termination_distributions(&self, sdf: &[SdfGaussian], shift_seed: u64) -> Result<Termination> {
        let set = self.draw_occupancies(sdf, shift_seed)?;
        Ok(termination_from_draws(&set))
    }

    fn render_samples(
        &self,
        sdf: &[SdfGaussian],
        depths: &[f64],
        background: f64,
        shift_seed: u64,
    ) -> Result<(RayRender, DrawSet, Vec<f64>)> {
        let set = self.draw_occupancies(sdf, shift_seed)?;
        let term = termination_from_draws(&set);
        let per_draw: Vec<f64> = (0..set.draws)
            .map(|m| {
                draw_depth(
                    &set.occupancy[m * set.samples..(m + 1) * set.samples],
                    depths,
                    background,
                )
            })
            .collect();
        let (depth_mean, depth_var) = mean_and_population_var(&per_draw);
        let render = RayRender {
            sample_depths: depths.to_vec(),
            termination_mean: term.mean,
            termination_var: term.var,
            depth_mean,
            depth_var,
        };
        Ok((render, set, per_draw))
    }

    /// Renders from precomputed SDF Gaussians at the ray samples.
    pub fn render_from_sdf(
        &self,
        sdf: &[SdfGaussian],
        depths: &[f64],
        background: f64,
        shift_seed: u64,
    ) -> Result<RayRender> {
        Ok(self.render_samples(sdf, depths, background, shift_seed)?.0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn render_pixel<D: SdfDecoder + ?Sized>(
        &self,
        decoder: &D,
        z: &LatentGaussian,
        pose: &PoseGaussian,
        intrinsics: &Intrinsics,
        t_wc: &Rigid,
        (u, v): (usize, usize),
        range: &DepthRange,
        seed: u64,
    ) -> Result<RayRender> {
        let rays = ray_sample(intrinsics, t_wc, u, v, range, self.cfg.samples_per_ray)?;
        let sdf = rays
            .points_w
            .iter()
            .map(|p| crate::propagation::sdf_distribution(decoder, z, pose, p))
            .collect::<Result<Vec<_>>>()?;
        let background = self.cfg.background_depth_factor * range.far;
        self.render_from_sdf(&sdf, &rays.depths, background, pixel_seed(seed, u, v, SEED_TAG_QMC))
    }

    /// Energy score of one pixel's rendered depth against its target, with
    /// gradient over the optimizer parameters.
    #[allow(clippy::too_many_arguments)]
    fn pixel_loss<D: SdfDecoder + ?Sized>(
        &self,
        decoder: &D,
        z: &LatentGaussian,
        pose: &PoseGaussian,
        frame: &DepthFrame,
        pixel: &PixelTarget,
        es: &EsConfig,
        at: Option<&JacobianPoint>,
    ) -> Result<(f64, ParamGradient)> {
        let rays = ray_sample(
            &frame.intrinsics,
            &frame.t_wc,
            pixel.u,
            pixel.v,
            &pixel.range,
            self.cfg.samples_per_ray,
        )?;
        let lins: Vec<LinearizedSdf> = rays
            .points_w
            .iter()
            .map(|p| linearize_at(decoder, z, pose, p, at))
            .collect::<Result<_>>()?;
        let sdf: Vec<SdfGaussian> = lins.iter().map(|l| l.gaussian).collect();
        let background = self.cfg.background_depth_factor * pixel.range.far;
        let (render, set, per_draw) = self.render_samples(
            &sdf,
            &rays.depths,
            background,
            pixel_seed(es.seed, pixel.u, pixel.v, SEED_TAG_QMC),
        )?;
        let score = energy_score_with_grad(
            render.depth_mean,
            render.depth_var,
            pixel.target,
            &es.with_seed(pixel_seed(es.seed, pixel.u, pixel.v, SEED_TAG_SCORE)),
        )?;

        let n = set.draws as f64;
        let adjoint: Vec<f64> = per_draw
            .iter()
            .map(|&d| score.d_mu / n + score.d_var * 2.0 * (d - render.depth_mean) / n)
            .collect();
        let (g_mean, g_var) = self.backward(&set, &sdf, &rays.depths, background, &adjoint);
        let mut grad = ParamGradient::zeros(z.dim());
        for (j, lin) in lins.iter().enumerate() {
            grad.accumulate(lin, z, pose, g_mean[j], g_var[j]);
        }
        Ok((score.value, grad))
    }

    /// Pulls per-draw depth adjoints back to each sample's SDF mean and
    /// variance.
    fn backward(
        &self,
        set: &DrawSet,
        sdf: &[SdfGaussian],
        depths: &[f64],
        background: f64,
        adjoint: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let s = set.samples;
        let l = self.cfg.slope;
        let mut g_mean = vec![0.0; s];
        let mut g_sigma = vec![0.0; s];
        let mut rest = vec![0.0; s + 1];
        for m in 0..set.draws {
            let occ = &set.occupancy[m * s..(m + 1) * s];
            rest[s] = background;
            for k in (0..s).rev() {
                rest[k] = occ[k] * depths[k] + (1.0 - occ[k]) * rest[k + 1];
            }
            let mut transmittance = 1.0;
            for k in 0..s {
                let d_occ = adjoint[m] * transmittance * (depths[k] - rest[k + 1]);
                let d_logit = d_occ * occ[k] * (1.0 - occ[k]);
                g_mean[k] -= l * d_logit;
                if set.in_band[k] {
                    g_sigma[k] += l * set.normal[m * s + k] * d_logit;
                }
                transmittance *= 1.0 - occ[k];
            }
        }
        let g_var = (0..s)
            .map(|k| {
                if sdf[k].var > VARIANCE_FLOOR {
                    g_sigma[k] / (2.0 * set.sigma[k])
                } else {
                    0.0
                }
            })
            .collect();
        (g_mean, g_var)
    }

    /// Mean pixel energy score over `pixels` of one frame, with gradient.
    pub fn loss_2d_with_grad<D: SdfDecoder + ?Sized>(
        &self,
        decoder: &D,
        z: &LatentGaussian,
        pose: &PoseGaussian,
        frame: &DepthFrame,
        pixels: &[PixelTarget],
        es: &EsConfig,
    ) -> Result<(f64, ParamGradient)> {
        self.loss_2d_at(decoder, z, pose, frame, pixels, es, None)
    }

    /// [`Renderer::loss_2d_with_grad`] with variance Jacobians optionally
    /// frozen at `at`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_2d_at<D: SdfDecoder + ?Sized>(
        &self,
        decoder: &D,
        z: &LatentGaussian,
        pose: &PoseGaussian,
        frame: &DepthFrame,
        pixels: &[PixelTarget],
        es: &EsConfig,
        at: Option<&JacobianPoint>,
    ) -> Result<(f64, ParamGradient)> {
        if pixels.is_empty() {
            return Err(Error::invalid("2D loss needs at least one pixel"));
        }
        es.validate()?;
        let parts: Vec<(f64, ParamGradient)> = pixels
            .par_iter()
            .map(|px| self.pixel_loss(decoder, z, pose, frame, px, es, at))
            .collect::<Result<_>>()?;
        let n = parts.len() as f64;
        let values: Vec<f64> = parts.iter().map(|(v, _)| *v).collect();
        let grads: Vec<ParamGradient> = parts.into_iter().map(|(_, g)| g).collect();
        let mut grad = sum_gradients(&grads, z.dim());
        grad.scale(1.0 / n);
        Ok((pairwise_sum(&values) / n, grad))
    }

    pub fn loss_2d<D: SdfDecoder + ?Sized>(
        &self,
        decoder: &D,
        z: &LatentGaussian,
        pose: &PoseGaussian,
        frame: &DepthFrame,
        pixels: &[PixelTarget],
        es: &EsConfig,
    ) -> Result<f64> {
        Ok(self.loss_2d_with_grad(decoder, z, pose, frame, pixels, es)?.0)
    }

    /// Expected depth and its standard deviation for every pixel whose ray
    /// crosses the sphere of `radius` around the pose translation. Other
    /// pixels are 0 in both maps.
    #[allow(clippy::too_many_arguments)]
    pub fn render_image<D: SdfDecoder + ?Sized>(
        &self,
        decoder: &D,
        z: &LatentGaussian,
        pose: &PoseGaussian,
        intrinsics: &Intrinsics,
        t_wc: &Rigid,
        radius: f64,
        seed: u64,
    ) -> Result<DepthImage> {
        let (w, h) = (intrinsics.width, intrinsics.height);
        let pixels: Vec<(f32, f32)> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (u, v) = (i % w, i / w);
                match sphere_depth_range(intrinsics, t_wc, u, v, &pose.mean.t, radius) {
                    None => Ok((0.0, 0.0)),
                    Some(range) => {
                        let r = self.render_pixel(decoder, z, pose, intrinsics, t_wc, (u, v), &range, seed)?;
                        Ok((r.depth_mean as f32, r.depth_var.sqrt() as f32))
                    }
                }
            })
            .collect::<Result<_>>()?;
        let (depth, std) = pixels.into_iter().unzip();
        Ok(DepthImage {
            width: w,
            height: h,
            depth,
            std,
        })
    }
}

/// Row-major depth and standard-deviation maps.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub std: Vec<f32>,
}

fn pixel_seed(seed: u64, u: usize, v: usize, tag: u64) -> u64 {
    derive_seed(seed, &[tag, u as u64, v as u64])
}

fn mean_and_population_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    (mean, pairwise_sum(&dev) / n)
}

fn termination_from_draws(set: &DrawSet) -> Termination {
    let s = set.samples;
    let mut weights = Vec::with_capacity(set.draws * (s + 1));
    for m in 0..set.draws {
        weights.extend(termination_weights(&set.occupancy[m * s..(m + 1) * s]));
    }
    let mut mean = Vec::with_capacity(s + 1);
    let mut var = Vec::with_capacity(s + 1);
    for i in 0..=s {
        let column: Vec<f64> = (0..set.draws).map(|m| weights[m * (s + 1) + i]).collect();
        let (mu, v) = mean_and_population_var(&column);
        mean.push(mu);
        var.push(v);
    }
    Termination {
        mean,
        var,
        weights,
        draws: set.draws,
    }
}
