//! Joint fitting of the latent and pose Gaussians with Adam.

mod icp;

pub use icp::icp_init;

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{LatentGaussian, SdfDecoder};
use crate::error::{Error, Result};
use crate::eval::placed_surface_points;
use crate::geometry::{wrap_rotation, Pose9, PoseGaussian};
use crate::ingestion::{assemble_world_points, DepthFrame, DEFAULT_POINT_BUDGET};
use crate::numeric::derive_seed;
use crate::propagation::{JacobianPoint, ParamGradient};
use crate::renderer::{sphere_depth_range, PixelTarget, RayConfig, Renderer};
use crate::surface_loss::{latent_regularizer, loss_3d_at, EsConfig};

pub const INIT_LATENT_VAR: f64 = 1e-6;
pub const INIT_POSE_VAR: f64 = 1e-4;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const TAG_POINTS: u64 = 1;
const TAG_SURFACE: u64 = 2;
const TAG_RENDER: u64 = 3;
const TAG_PIXELS: u64 = 4;
const TAG_CANONICAL: u64 = 5;
const CANONICAL_POINTS: usize = 2000;
const CANONICAL_RESOLUTION: usize = 40;
const RANGE_MARGIN: f64 = 1.1;
const BACKGROUND_DILATION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub surface: f64,
    pub render: f64,
    pub latent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            surface: 1.0,
            render: 1.0,
            latent: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub iters: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub es: EsConfig,
    pub ray: RayConfig,
    pub seed: u64,
    pub point_budget: usize,
    pub pixels_per_view: usize,
    pub icp_iters: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iters: 200,
            lr: 0.005,
            weights: LossWeights::default(),
            es: EsConfig::default(),
            ray: RayConfig::default(),
            seed: 0,
            point_budget: DEFAULT_POINT_BUDGET,
            pixels_per_view: 64,
            icp_iters: 50,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        let w = &self.weights;
        if [w.surface, w.render, w.latent].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.point_budget == 0 {
            return Err(Error::invalid("point budget must be at least 1"));
        }
        self.es.validate()?;
        self.ray.validate()
    }
}

/// Loss terms before weighting, and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub l3d: f64,
    pub l2d: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    pub z: LatentGaussian,
    pub pose: PoseGaussian,
    pub iteration: usize,
    pub history: Vec<LossRecord>,
}

impl OptimState {
    /// `[μ_z, log Σ_z, t, φ, log s, log Σ_ξ]`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.z.dim() + 18);
        v.extend_from_slice(&self.z.mean);
        v.extend(self.z.var.iter().map(|x| x.ln()));
        v.extend_from_slice(&self.pose.mean.to_vector());
        v.extend(self.pose.var.iter().map(|x| x.ln()));
        v
    }
}

fn split_params(params: &[f64], latent_dim: usize) -> (LatentGaussian, PoseGaussian) {
    let d = latent_dim;
    let z = LatentGaussian {
        mean: params[..d].to_vec(),
        var: params[d..2 * d].iter().map(|x| x.exp()).collect(),
    };
    let mut xi = [0.0; 9];
    xi.copy_from_slice(&params[2 * d..2 * d + 9]);
    let mut var = [0.0; 9];
    for (v, l) in var.iter_mut().zip(&params[2 * d + 9..2 * d + 18]) {
        *v = l.exp();
    }
    let pose = PoseGaussian {
        mean: Pose9::from_vector(&xi),
        var,
    };
    (z, pose)
}

/// Starting state: zero latent mean, small fixed variances, and either the
/// caller's pose or one found by ICP against the zero-code shape.
pub fn init_state<D: SdfDecoder + ?Sized>(
    decoder: &D,
    points_w: &[Vector3<f64>],
    cfg: &OptimConfig,
    initial_pose: Option<Pose9>,
) -> Result<OptimState> {
    if points_w.is_empty() {
        return Err(Error::invalid("no observed points to initialize from"));
    }
    let dim = decoder.latent_dim();
    let z = LatentGaussian::new(vec![0.0; dim], vec![INIT_LATENT_VAR; dim])?;
    let mean = match initial_pose {
        Some(p) => p,
        None => {
            let canonical = placed_surface_points(
                decoder,
                &z.mean,
                &Pose9::identity(),
                CANONICAL_RESOLUTION,
                CANONICAL_POINTS,
                derive_seed(cfg.seed, &[TAG_CANONICAL]),
            )
            .map_err(|e| Error::Initialization(format!("zero-code shape: {e}")))?;
            icp_init(&canonical, points_w, cfg.icp_iters)?
        }
    };
    Ok(OptimState {
        z,
        pose: PoseGaussian::new(mean, [INIT_POSE_VAR; 9])?,
        iteration: 0,
        history: Vec::new(),
    })
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update at step `t >= 1`.
pub fn adam_step(params: &mut [f64], grads: &[f64], moments: &mut AdamMoments, t: usize, lr: f64) {
    assert!(t >= 1, "Adam steps are counted from 1");
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = ADAM_BETA1 * moments.m[i] + (1.0 - ADAM_BETA1) * g;
        moments.v[i] = ADAM_BETA2 * moments.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Candidate pixels of one view: object pixels with valid depth, and
/// background pixels from the dilated mask box.
#[derive(Debug, Clone, Default)]
struct PixelPools {
    object: Vec<PixelTarget>,
    background: Vec<PixelTarget>,
}

impl PixelPools {
    fn build(frame: &DepthFrame, center: &Vector3<f64>, radius: f64, ray: &RayConfig) -> Self {
        let k = &frame.intrinsics;
        let range = |u, v| sphere_depth_range(k, &frame.t_wc, u, v, center, radius);
        let mut pools = PixelPools::default();
        let mask_px: Vec<(usize, usize)> = (0..k.height)
            .flat_map(|v| (0..k.width).map(move |u| (u, v)))
            .filter(|&(u, v)| frame.mask[frame.index(u, v)])
            .collect();
        if mask_px.is_empty() {
            return pools;
        }
        for &(u, v) in &mask_px {
            let d = frame.depth_at(u, v);
            if d > 0.0 {
                if let Some(r) = range(u, v) {
                    pools.object.push(PixelTarget::object(u, v, r, d));
                }
            }
        }
        let (u0, u1) = mask_px.iter().fold((usize::MAX, 0), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (v0, v1) = mask_px.iter().fold((usize::MAX, 0), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let du = (BACKGROUND_DILATION * (u1 - u0 + 1) as f64).ceil() as usize;
        let dv = (BACKGROUND_DILATION * (v1 - v0 + 1) as f64).ceil() as usize;
        for v in v0.saturating_sub(dv)..=(v1 + dv).min(k.height - 1) {
            for u in u0.saturating_sub(du)..=(u1 + du).min(k.width - 1) {
                if !frame.mask[frame.index(u, v)] {
                    if let Some(r) = range(u, v) {
                        pools.background.push(PixelTarget::background(u, v, r, ray));
                    }
                }
            }
        }
        pools
    }

    fn is_empty(&self) -> bool {
        self.object.is_empty() && self.background.is_empty()
    }

    fn draw(&self, count: usize, rng: &mut ChaCha8Rng) -> Vec<PixelTarget> {
        let half = count / 2;
        let from_bg = half.min(self.background.len());
        let from_obj = (count - from_bg).min(self.object.len());
        let from_bg = (count - from_obj).min(self.background.len());
        let mut out = Vec::with_capacity(from_obj + from_bg);
        for (pool, n) in [(&self.object, from_obj), (&self.background, from_bg)] {
            let mut idx = sample(rng, pool.len(), n).into_vec();
            idx.sort_unstable();
            out.extend(idx.into_iter().map(|i| pool[i]));
        }
        out
    }
}

/// Loss value with its gradient over the parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub record: LossRecord,
    pub grad: Vec<f64>,
}

/// Everything fixed across iterations of one fit.
pub struct FitProblem<'a, D: SdfDecoder + ?Sized> {
    decoder: &'a D,
    frames: &'a [DepthFrame],
    points: Vec<Vector3<f64>>,
    pools: Vec<PixelPools>,
    renderer: Renderer,
    cfg: OptimConfig,
}

impl<'a, D: SdfDecoder + ?Sized> FitProblem<'a, D> {
    /// Ray intervals come from the sphere bounding the shape at `initial`.
    pub fn new(
        decoder: &'a D,
        frames: &'a [DepthFrame],
        points: Vec<Vector3<f64>>,
        initial: &Pose9,
        cfg: &OptimConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let z0 = vec![0.0; decoder.latent_dim()];
        let radius = RANGE_MARGIN * initial.scale().max() * decoder.bounding_radius(&z0);
        let pools = frames
            .iter()
            .map(|f| PixelPools::build(f, &initial.t, radius, &cfg.ray))
            .collect();
        Ok(Self {
            decoder,
            frames,
            points,
            pools,
            renderer: Renderer::new(cfg.ray)?,
            cfg: *cfg,
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Pixels scored at `iteration` in each view.
    pub fn pixels(&self, iteration: usize) -> Vec<Vec<PixelTarget>> {
        self.pools
            .iter()
            .enumerate()
            .map(|(v, pool)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &[TAG_PIXELS, iteration as u64, v as u64]));
                pool.draw(self.cfg.pixels_per_view, &mut rng)
            })
            .collect()
    }

    pub fn total_loss(&self, params: &[f64], iteration: usize) -> Result<LossEval> {
        self.total_loss_at(params, iteration, None)
    }

    /// [`FitProblem::total_loss`] with variance Jacobians frozen at the
    /// parameters `jacobians_at`, when given.
    pub fn total_loss_at(&self, params: &[f64], iteration: usize, jacobians_at: Option<&[f64]>) -> Result<LossEval> {
        let dim = self.decoder.latent_dim();
        if params.len() != 2 * dim + 18 {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, expected {}",
                params.len(),
                2 * dim + 18
            )));
        }
        let (z, pose) = split_params(params, dim);
        let at = jacobians_at.map(|p| {
            let (z0, pose0) = split_params(p, dim);
            JacobianPoint {
                z_mean: z0.mean,
                pose: pose0.mean,
            }
        });
        let w = &self.cfg.weights;
        let non_finite = |term: &str| Error::NonFinite {
            term: term.into(),
            iteration,
        };
        let mut grad = ParamGradient::zeros(dim);

        let mut l3d = 0.0;
        if w.surface > 0.0 {
            let es = self.cfg.es.with_seed(derive_seed(self.cfg.seed, &[TAG_SURFACE, iteration as u64]));
            let (l, mut g) = loss_3d_at(self.decoder, &z, &pose, &self.points, &es, at.as_ref())?;
            if !l.is_finite() {
                return Err(non_finite("L3D"));
            }
            g.scale(w.surface);
            grad.add(&g);
            l3d = l;
        }

        let mut l2d = 0.0;
        if w.render > 0.0 {
            let mut sum = 0.0;
            let mut count = 0usize;
            let mut g2 = ParamGradient::zeros(dim);
            for (v, pixels) in self.pixels(iteration).iter().enumerate() {
                if pixels.is_empty() {
                    continue;
                }
                let es = self
                    .cfg
                    .es
                    .with_seed(derive_seed(self.cfg.seed, &[TAG_RENDER, iteration as u64, v as u64]));
                let (l, mut g) =
                    self.renderer
                        .loss_2d_at(self.decoder, &z, &pose, &self.frames[v], pixels, &es, at.as_ref())?;
                let n = pixels.len() as f64;
                sum += l * n;
                g.scale(n);
                g2.add(&g);
                count += pixels.len();
            }
            if count > 0 {
                l2d = sum / count as f64;
                g2.scale(w.render / count as f64);
                grad.add(&g2);
            }
            if !l2d.is_finite() {
                return Err(non_finite("L2D"));
            }
        }

        let reg = latent_regularizer(&z);
        if w.latent > 0.0 {
            for (g, m) in grad.mu_z.iter_mut().zip(&z.mean) {
                *g += w.latent * 2.0 * m;
            }
        }
        let total = w.surface * l3d + w.render * l2d + w.latent * reg;
        if !total.is_finite() {
            return Err(non_finite("total loss"));
        }
        let grad = grad.to_vec();
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(non_finite("gradient"));
        }
        Ok(LossEval {
            record: LossRecord {
                iteration,
                l3d,
                l2d,
                reg,
                total,
            },
            grad,
        })
    }
}

/// Runs the full fit: point assembly, initialization, then `cfg.iters` Adam
/// steps. History entry `i` holds the losses evaluated before step `i`.
pub fn fit<D: SdfDecoder + ?Sized>(
    decoder: &D,
    frames: &[DepthFrame],
    cfg: &OptimConfig,
    initial_pose: Option<Pose9>,
) -> Result<OptimState> {
    cfg.validate()?;
    if frames.iter().all(|f| f.object_pixels().is_empty()) {
        return Err(Error::invalid("no frame has object pixels with valid depth"));
    }
    let points = assemble_world_points(frames, cfg.point_budget, derive_seed(cfg.seed, &[TAG_POINTS]))?;
    let mut state = init_state(decoder, &points, cfg, initial_pose)?;
    let problem = FitProblem::new(decoder, frames, points, &state.pose.mean, cfg)?;
    if problem.pools.iter().all(PixelPools::is_empty) && cfg.weights.render > 0.0 {
        return Err(Error::invalid("no pixel ray meets the initial bounding sphere"));
    }

    let dim = decoder.latent_dim();
    let mut params = state.to_params();
    let mut moments = AdamMoments::zeros(params.len());
    let phi = 2 * dim + 3..2 * dim + 6;
    for it in 1..=cfg.iters {
        let eval = problem.total_loss(&params, it)?;
        state.history.push(eval.record);
        adam_step(&mut params, &eval.grad, &mut moments, it, cfg.lr);
        let wrapped = wrap_rotation(&Vector3::new(params[phi.start], params[phi.start + 1], params[phi.start + 2]));
        params[phi.clone()].copy_from_slice(wrapped.as_slice());
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                term: "parameters".into(),
                iteration: it,
            });
        }
        let (z, pose) = split_params(&params, dim);
        if z.var.iter().chain(&pose.var).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::NonFinite {
                term: "variance".into(),
                iteration: it,
            });
        }
    }
    if cfg.iters > 0 {
        let (z, pose) = split_params(&params, dim);
        state.z = z;
        state.pose = pose;
        state.iteration = cfg.iters;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::AnalyticEllipsoid;
    use crate::synth::{synthesize, SynthSpec};

    #[test]
    fn adam_first_step_is_about_lr_sign() {
        for &g in &[3.0, -0.02, 150.0] {
            let mut p = [1.0];
            let mut m = AdamMoments::zeros(1);
            adam_step(&mut p, &[g], &mut m, 1, 0.01);
            let expected = -0.01 * g / (g.abs() + ADAM_EPS);
            assert!((p[0] - 1.0 - expected).abs() < 1e-15);
            assert!((p[0] - 1.0 + 0.01 * g.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_gradient_changes_nothing() {
        let mut p = [0.3, -2.0];
        let mut m = AdamMoments::zeros(2);
        for t in 1..=50 {
            adam_step(&mut p, &[0.0, 0.0], &mut m, t, 0.1);
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn adam_minimizes_a_parabola() {
        let mut p = [1.0];
        let mut m = AdamMoments::zeros(1);
        let hit = (1..=100).find(|&t| {
            let g = 2.0 * p[0];
            adam_step(&mut p, &[g], &mut m, t, 0.1);
            p[0].abs() < 0.01
        });
        assert!(hit.is_some(), "ended at {}", p[0]);
    }

    fn small_scene(views: usize) -> (AnalyticEllipsoid, Vec<DepthFrame>, Pose9) {
        let d = AnalyticEllipsoid::default();
        let gt = Pose9::new(Vector3::new(0.05, -0.02, 0.0), Vector3::new(0.0, 0.0, 0.3), Vector3::new(0.9, 0.7, 0.6)).unwrap();
        let spec = SynthSpec {
            gt_pose: gt,
            views,
            width: 32,
            height: 32,
            focal: 32.0,
            ..SynthSpec::default()
        };
        let frames = synthesize(&d, &spec).unwrap();
        (d, frames, gt)
    }

    #[test]
    fn init_state_defaults() {
        let (d, frames, _) = small_scene(2);
        let pts = assemble_world_points(&frames, 500, 0).unwrap();
        let cfg = OptimConfig::default();
        let s = init_state(&d, &pts, &cfg, None).unwrap();
        assert!(s.z.mean.iter().all(|&v| v == 0.0));
        assert!(s.z.var.iter().all(|&v| v == 1e-6));
        assert!(s.pose.var.iter().all(|&v| v == 1e-4));
        let given = Pose9::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.1, 0.0, 0.0), Vector3::repeat(0.5)).unwrap();
        let s = init_state(&d, &pts, &cfg, Some(given)).unwrap();
        assert_eq!(s.pose.mean, given);
        assert!(init_state(&d, &[], &cfg, None).is_err());
    }

    #[test]
    fn params_round_trip() {
        let (d, frames, gt) = small_scene(1);
        let pts = assemble_world_points(&frames, 200, 0).unwrap();
        let s = init_state(&d, &pts, &OptimConfig::default(), Some(gt)).unwrap();
        let v = s.to_params();
        assert_eq!(v.len(), 146);
        let (z, pose) = split_params(&v, 64);
        assert_eq!(z.mean, s.z.mean);
        assert!((z.var[0] - 1e-6).abs() < 1e-20);
        assert_eq!(pose.mean, s.pose.mean);
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let (d, frames, gt) = small_scene(1);
        let pts = assemble_world_points(&frames, 200, 0).unwrap();
        let cfg = OptimConfig {
            weights: LossWeights {
                surface: 0.0,
                render: 0.0,
                latent: 0.0,
            },
            ..OptimConfig::default()
        };
        let s = init_state(&d, &pts, &cfg, Some(gt)).unwrap();
        let problem = FitProblem::new(&d, &frames, pts, &gt, &cfg).unwrap();
        let e = problem.total_loss(&s.to_params(), 1).unwrap();
        assert_eq!(e.record.total, 0.0);
        assert!(e.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn surface_only_weighting_is_the_3d_loss() {
        let (d, frames, gt) = small_scene(1);
        let pts = assemble_world_points(&frames, 200, 0).unwrap();
        let cfg = OptimConfig {
            weights: LossWeights {
                surface: 1.0,
                render: 0.0,
                latent: 0.0,
            },
            ..OptimConfig::default()
        };
        let s = init_state(&d, &pts, &cfg, Some(gt)).unwrap();
        let problem = FitProblem::new(&d, &frames, pts.clone(), &gt, &cfg).unwrap();
        let e = problem.total_loss(&s.to_params(), 3).unwrap();
        let es = cfg.es.with_seed(derive_seed(cfg.seed, &[TAG_SURFACE, 3]));
        let (z, pose) = split_params(&s.to_params(), 64);
        let direct = crate::surface_loss::loss_3d_with_grad(&d, &z, &pose, &pts, &es).unwrap().0;
        assert_eq!(e.record.total, direct);
    }

    #[test]
    fn pixel_draws_split_between_object_and_background() {
        let (d, frames, gt) = small_scene(1);
        let pts = assemble_world_points(&frames, 200, 0).unwrap();
        let cfg = OptimConfig {
            pixels_per_view: 16,
            ..OptimConfig::default()
        };
        let problem = FitProblem::new(&d, &frames, pts, &gt, &cfg).unwrap();
        let px = &problem.pixels(1)[0];
        assert_eq!(px.len(), 16);
        let f = &frames[0];
        let obj = px.iter().filter(|p| f.is_object(p.u, p.v)).count();
        assert_eq!(obj, 8);
        assert_eq!(problem.pixels(1), problem.pixels(1));
        assert_ne!(problem.pixels(1), problem.pixels(2));
    }

    #[test]
    fn gradient_matches_frozen_jacobian_differences() {
        let (d, frames, gt) = small_scene(1);
        let pts = assemble_world_points(&frames, 64, 0).unwrap();
        let cfg = OptimConfig {
            pixels_per_view: 8,
            ..OptimConfig::default()
        };
        let mut s = init_state(&d, &pts, &cfg, Some(gt)).unwrap();
        s.z.mean[0] = 0.05;
        s.z.mean[5] = -0.1;
        let problem = FitProblem::new(&d, &frames, pts, &gt, &cfg).unwrap();
        let x0 = s.to_params();
        let g = problem.total_loss(&x0, 1).unwrap().grad;
        let h = 1e-6;
        let mut bad = 0;
        let mut checked = 0;
        for i in (0..x0.len()).filter(|i| *i < 6 || *i >= 64) {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = problem.total_loss_at(&xp, 1, Some(&x0)).unwrap().record.total;
            let fm = problem.total_loss_at(&xm, 1, Some(&x0)).unwrap().record.total;
            let fd = (fp - fm) / (2.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1e-6);
            checked += 1;
            if (fd - g[i]).abs() / scale > 1e-3 {
                bad += 1;
            }
        }
        assert!(bad * 20 <= checked, "{bad} of {checked} coordinates disagree");
    }

    #[test]
    fn zero_iterations_return_the_initial_state() {
        let (d, frames, gt) = small_scene(1);
        let cfg = OptimConfig {
            iters: 0,
            ..OptimConfig::default()
        };
        let s = fit(&d, &frames, &cfg, Some(gt)).unwrap();
        assert_eq!(s.pose.mean, gt);
        assert!(s.pose.var.iter().all(|&v| v == INIT_POSE_VAR));
        assert!(s.history.is_empty());
        assert_eq!(s.iteration, 0);
    }

    #[test]
    fn fits_are_deterministic() {
        let (d, frames, _) = small_scene(2);
        let cfg = OptimConfig {
            iters: 5,
            point_budget: 256,
            ..OptimConfig::default()
        };
        let a = fit(&d, &frames, &cfg, None).unwrap();
        let b = fit(&d, &frames, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 5);
    }

    #[test]
    fn empty_observations_are_rejected() {
        let (d, mut frames, _) = small_scene(1);
        frames[0].mask.iter_mut().for_each(|m| *m = false);
        assert!(matches!(
            fit(&d, &frames, &OptimConfig::default(), None),
            Err(Error::InvalidInput(_))
        ));
    }
}
