//! Synthetic depth scenes rendered by sphere tracing a known shape and pose.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::decoder::{SdfDecoder, DEFAULT_LATENT_DIM};
use crate::error::{Error, Result};
use crate::geometry::{format_matrix_3x4, world_to_object, Pose9, Rigid};
use crate::ingestion::{write_frame, DepthFrame, GroundTruthEntry, Intrinsics, Manifest};
use crate::numeric::derive_seed;

pub const HIT_TOLERANCE: f64 = 1e-5;
const MAX_STEPS: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub gt_latent: Vec<f64>,
    pub gt_pose: Pose9,
    pub decoder: String,
    pub views: usize,
    pub ring_radius: f64,
    pub elevation_deg: f64,
    pub azimuth_offset_deg: f64,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Standard deviation of additive depth noise, meters.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            gt_latent: vec![0.0; DEFAULT_LATENT_DIM],
            gt_pose: Pose9::identity(),
            decoder: "analytic".into(),
            views: 3,
            ring_radius: 3.0,
            elevation_deg: 30.0,
            azimuth_offset_deg: 0.0,
            width: 128,
            height: 128,
            focal: 128.0,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::invalid("a scene needs at least one view"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("depth noise {} must be non-negative", self.noise)));
        }
        if !(self.ring_radius > 0.0 && self.focal > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera ring radius, focal length and image size must be positive"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }
}

/// Camera-to-world poses on a ring around `target`, z up, each camera
/// looking at the target.
pub fn camera_ring(target: &Vector3<f64>, views: usize, radius: f64, elevation_deg: f64, offset_deg: f64) -> Vec<Rigid> {
    let e = elevation_deg.to_radians();
    (0..views)
        .map(|k| {
            let a = offset_deg.to_radians() + 2.0 * std::f64::consts::PI * k as f64 / views as f64;
            let center = target + radius * Vector3::new(e.cos() * a.cos(), e.cos() * a.sin(), e.sin());
            look_at(&center, target)
        })
        .collect()
}

fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Rigid {
    let forward = (target - center).normalize();
    let mut right = forward.cross(&Vector3::z());
    if right.norm() < 1e-9 {
        right = forward.cross(&Vector3::y());
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_columns(&[right, down, forward]);
    Rigid::new(r, *center).expect("look-at basis is orthonormal")
}

/// Distance along the unit direction `dir` to the zero level set, or `None`
/// when the ray leaves `max_t` first.
///
/// Canonical SDF values are converted to world steps with the smallest
/// pose scale, which never overshoots a 1-Lipschitz field.
pub fn sphere_trace<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &[f64],
    pose: &Pose9,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    max_t: f64,
) -> Result<Option<f64>> {
    let s = pose.scale();
    let step_scale = s.min();
    let radius = 1.01 * s.max() * decoder.bounding_radius(z);
    let oc = origin - pose.t;
    let b = oc.dot(dir);
    let disc = b * b - (oc.norm_squared() - radius * radius);
    if disc < 0.0 {
        return Ok(None);
    }
    let mut t = (-b - disc.sqrt()).max(0.0);
    let t_exit = (-b + disc.sqrt()).min(max_t);
    for _ in 0..MAX_STEPS {
        if t > t_exit {
            return Ok(None);
        }
        let p = origin + dir * t;
        let v = decoder.decode(z, &world_to_object(pose, &p))?;
        if v.abs() < HIT_TOLERANCE {
            return Ok(Some(t));
        }
        t += v * step_scale;
    }
    Ok(None)
}

/// Noise-free depth and hit mask for one camera.
pub fn render_depth<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &[f64],
    pose: &Pose9,
    intrinsics: &Intrinsics,
    t_wc: &Rigid,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let max_t = 10.0 * (t_wc.translation - pose.t).norm().max(1.0);
    let rows: Vec<Vec<Option<f64>>> = (0..intrinsics.height)
        .into_par_iter()
        .map(|v| {
            (0..intrinsics.width)
                .map(|u| {
                    let ray = intrinsics.ray(u as f64, v as f64);
                    let dir_c = ray.normalize();
                    let dir_w = t_wc.rotation * dir_c;
                    Ok(sphere_trace(decoder, z, pose, &t_wc.translation, &dir_w, max_t)?.map(|t| t * dir_c.z))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<Option<f64>> = rows.concat();
    let depth = flat.iter().map(|d| d.unwrap_or(0.0)).collect();
    let mask = flat.iter().map(|d| d.is_some()).collect();
    Ok((depth, mask))
}

/// All frames of a scene, in memory.
pub fn synthesize<D: SdfDecoder + ?Sized>(decoder: &D, spec: &SynthSpec) -> Result<Vec<DepthFrame>> {
    spec.validate()?;
    decoder.check_dim(&spec.gt_latent)?;
    let intrinsics = spec.intrinsics()?;
    let cameras = camera_ring(
        &spec.gt_pose.t,
        spec.views,
        spec.ring_radius,
        spec.elevation_deg,
        spec.azimuth_offset_deg,
    );
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
    cameras
        .into_iter()
        .enumerate()
        .map(|(k, t_wc)| {
            let (depth, mask) = render_depth(decoder, &spec.gt_latent, &spec.gt_pose, &intrinsics, &t_wc)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[k as u64]));
            let depth = depth
                .iter()
                .zip(&mask)
                .map(|(&d, &hit)| {
                    if !hit {
                        0.0
                    } else if spec.noise > 0.0 {
                        (d + noise.sample(&mut rng)) as f32
                    } else {
                        d as f32
                    }
                })
                .collect();
            DepthFrame::new(depth, mask, intrinsics, t_wc)
        })
        .collect()
}

/// Writes a scene directory with a ground-truth block and returns the
/// manifest path.
pub fn generate_scene<D: SdfDecoder + ?Sized>(decoder: &D, spec: &SynthSpec, out_dir: &Path) -> Result<PathBuf> {
    let frames = synthesize(decoder, spec)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries = frames
        .iter()
        .enumerate()
        .map(|(k, f)| write_frame(out_dir, &format!("view{k:03}"), f))
        .collect::<Result<Vec<_>>>()?;
    let gt_pose = out_dir.join("gt_pose.txt");
    fs::write(&gt_pose, format_matrix_3x4(&spec.gt_pose.upper_3x4())).map_err(|e| Error::io(&gt_pose, e))?;
    let manifest = Manifest {
        frames: entries,
        ground_truth: Some(GroundTruthEntry {
            pose: "gt_pose.txt".into(),
            decoder: Some(spec.decoder.clone()),
            latent: Some(spec.gt_latent.clone()),
            mesh: None,
        }),
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::AnalyticEllipsoid;
    use crate::ingestion::{assemble_world_points, back_project, load_scene};

    fn scaled(s: f64) -> Pose9 {
        Pose9::new(Vector3::zeros(), Vector3::zeros(), Vector3::repeat(s)).unwrap()
    }

    #[test]
    fn traces_unit_and_doubled_spheres() {
        let d = AnalyticEllipsoid::default();
        let z = vec![0.0; 64];
        let o = Vector3::new(0.0, 0.0, -3.0);
        let t = sphere_trace(&d, &z, &Pose9::identity(), &o, &Vector3::z(), 10.0).unwrap().unwrap();
        assert!((t - 2.0).abs() < 1e-4);
        let t = sphere_trace(&d, &z, &scaled(2.0), &o, &Vector3::z(), 10.0).unwrap().unwrap();
        assert!((t - 1.0).abs() < 1e-4);
        let miss = sphere_trace(&d, &z, &Pose9::identity(), &o, &Vector3::x(), 10.0).unwrap();
        assert!(miss.is_none());
    }

    #[test]
    fn traces_anisotropic_placement() {
        let d = AnalyticEllipsoid::default();
        let pose = Pose9::new(Vector3::new(0.2, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.4), Vector3::new(1.0, 0.6, 0.4)).unwrap();
        let o = Vector3::new(0.2, 0.0, -3.0);
        let t = sphere_trace(&d, &vec![0.0; 64], &pose, &o, &Vector3::z(), 10.0).unwrap().unwrap();
        assert!((t - 2.6).abs() < 1e-4);
    }

    #[test]
    fn ring_cameras_look_at_target() {
        let target = Vector3::new(0.5, -0.2, 0.1);
        for cam in camera_ring(&target, 5, 3.0, 30.0, 10.0) {
            let forward = cam.rotation.column(2).into_owned();
            let to_target = (target - cam.translation).normalize();
            assert!((forward - to_target).norm() < 1e-12);
            assert!(((cam.translation - target).norm() - 3.0).abs() < 1e-12);
            assert!((cam.rotation.determinant() - 1.0).abs() < 1e-12);
            // image rows run downward in the world
            assert!(cam.rotation.column(1).z < 0.0);
        }
    }

    #[test]
    fn noise_free_points_lie_on_the_surface() {
        let d = AnalyticEllipsoid::default();
        let spec = SynthSpec {
            gt_pose: Pose9::new(Vector3::new(0.1, 0.2, 0.0), Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.8, 0.6, 0.5)).unwrap(),
            width: 48,
            height: 48,
            focal: 48.0,
            ..SynthSpec::default()
        };
        let frames = synthesize(&d, &spec).unwrap();
        for f in &frames {
            assert!(f.mask.iter().filter(|&&m| m).count() > 0);
            for (u, v, _) in f.object_pixels() {
                assert!(f.depth_at(u, v) > 0.0);
            }
            for p in back_project(f) {
                let w = f.t_wc.apply(&p);
                let s = d.decode(&spec.gt_latent, &world_to_object(&spec.gt_pose, &w)).unwrap();
                assert!(s.abs() < 1e-3, "sdf {s}");
            }
        }
        let pts = assemble_world_points(&frames, 100_000, 0).unwrap();
        assert!(!pts.is_empty());
    }

    #[test]
    fn masks_match_hits_and_noise_spares_background() {
        let d = AnalyticEllipsoid::default();
        let spec = SynthSpec {
            views: 1,
            width: 32,
            height: 32,
            focal: 32.0,
            noise: 0.01,
            seed: 5,
            ..SynthSpec::default()
        };
        let f = &synthesize(&d, &spec).unwrap()[0];
        for (d, m) in f.depth.iter().zip(&f.mask) {
            assert_eq!(*d > 0.0, *m);
        }
    }

    #[test]
    fn scenes_are_reproducible_on_disk() {
        let d = AnalyticEllipsoid::default();
        let spec = SynthSpec {
            views: 2,
            width: 24,
            height: 24,
            focal: 24.0,
            noise: 0.005,
            seed: 9,
            ..SynthSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_scene(&d, &spec, a.path()).unwrap();
        generate_scene(&d, &spec, b.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 2 * 4 + 2);
        for n in &names {
            assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap());
        }

        let scene = load_scene(&ma).unwrap();
        let frames = synthesize(&d, &spec).unwrap();
        assert_eq!(scene.frames, frames);
        let gt = scene.ground_truth.unwrap();
        assert_eq!(gt.decoder.as_deref(), Some("analytic"));
        assert!((gt.pose.to_matrix() - spec.gt_pose.to_matrix()).norm() < 1e-12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let d = AnalyticEllipsoid::default();
        let zero_views = SynthSpec { views: 0, ..SynthSpec::default() };
        assert!(synthesize(&d, &zero_views).is_err());
        let negative = SynthSpec { noise: -1.0, ..SynthSpec::default() };
        assert!(synthesize(&d, &negative).is_err());
    }
}
