use std::fmt::Write as _;
use std::path::Path;

use usm_core::decoder::{Decoder, SdfDecoder, DEFAULT_LATENT_DIM};
use usm_core::eval::{
    chamfer, extract_mesh_in, iou_3d, placed_surface_points, pose_correct, pose_error, sample_surface,
    uncertainty_correlation, PlacedShape, PoseThresholds, TriangleMesh, MESH_HALF_EXTENT,
};
use usm_core::geometry::{parse_matrix_3x4, transform_point, Pose9};
use usm_core::ingestion::{load_scene, manifest_path, write_pfm, Scene};
use usm_core::numeric::derive_seed;
use usm_core::optimizer;
use usm_core::renderer::Renderer;
use usm_core::synth::{generate_scene, SynthSpec};

use crate::config::{Overrides, RunConfig};
use crate::output::{history_csv, write_text, FitResult};
use crate::{CliError, EvalArgs, FitArgs, MeshArgs, RenderArgs, SynthArgs};

/// Matches the bounding-sphere margin used when fitting.
const RENDER_RANGE_MARGIN: f64 = 1.1;

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    match threads {
        None => Ok(()),
        Some(0) => Err(CliError::Usage("threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}"))),
    }
}

fn shape_latent(shape: &str) -> Result<Vec<f64>, CliError> {
    let mut z = vec![0.0; DEFAULT_LATENT_DIM];
    if shape == "sphere" {
        return Ok(z);
    }
    let bad = || CliError::Usage(format!("shape {shape:?} is neither \"sphere\" nor \"ellipsoid:<z0>,<z1>,<z2>\""));
    let list = shape.strip_prefix("ellipsoid:").ok_or_else(bad)?;
    let vals: Vec<f64> = list
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    z[..3].copy_from_slice(&vals);
    Ok(z)
}

pub fn synth(a: &SynthArgs, threads: Option<usize>) -> Result<(), CliError> {
    init_threads(threads)?;
    let gt_pose = Pose9::new(a.translation, a.rotation, a.scale).map_err(|e| CliError::Usage(e.to_string()))?;
    let spec = SynthSpec {
        gt_latent: shape_latent(&a.shape)?,
        gt_pose,
        views: a.views,
        noise: a.noise,
        seed: a.seed,
        width: a.size,
        height: a.size,
        focal: a.size as f64,
        ..SynthSpec::default()
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let decoder = Decoder::from_selector(&spec.decoder)?;
    let manifest = generate_scene(&decoder, &spec, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn read_pose(path: &Path) -> Result<Pose9, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let m = parse_matrix_3x4(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Pose9::from_matrix(&m).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn scene(path: &Path) -> Result<Scene, CliError> {
    Ok(load_scene(&manifest_path(path))?)
}

pub fn fit(a: &FitArgs, threads: Option<usize>) -> Result<(), CliError> {
    let flags = Overrides {
        decoder: a.decoder.clone(),
        threads,
        iters: a.iters,
        lr: a.lr,
        seed: a.seed,
        surface_weight: a.surface_weight,
        render_weight: a.render_weight,
        latent_weight: a.latent_weight,
    };
    let cfg = RunConfig::resolve(a.config.as_deref(), &flags)?;
    init_threads(cfg.threads)?;
    let decoder = Decoder::from_selector(&cfg.decoder)?;
    let scene = scene(&a.scene)?;
    let initial = a.init_pose.as_deref().map(read_pose).transpose()?;
    let state = optimizer::fit(&decoder, &scene.frames, &cfg.optim, initial)?;
    write_text(&a.out, &FitResult::new(&state, &cfg).to_json())?;
    write_text(&a.history, &history_csv(&state.history))?;
    if let Some(last) = state.history.last() {
        eprintln!("usm: {} iterations, final total loss {}", state.iteration, last.total);
    }
    Ok(())
}

pub fn render(a: &RenderArgs, threads: Option<usize>) -> Result<(), CliError> {
    init_threads(threads)?;
    let result = FitResult::read(&a.result)?;
    let decoder = Decoder::from_selector(&result.decoder)?;
    let (z, pose) = (result.latent()?, result.pose()?);
    let scene = scene(&a.scene)?;
    let frame = scene.frames.get(a.view).ok_or_else(|| {
        CliError::Usage(format!("view {} out of range, scene has {} views", a.view, scene.frames.len()))
    })?;
    let renderer = Renderer::new(result.config.optim.ray)?;
    let radius = RENDER_RANGE_MARGIN * pose.mean.scale().max() * decoder.bounding_radius(&z.mean);
    let seed = a.seed.unwrap_or(result.config.optim.seed);
    let image = renderer.render_image(&decoder, &z, &pose, &frame.intrinsics, &frame.t_wc, radius, seed)?;
    write_pfm(&a.depth, image.width, image.height, &image.depth)?;
    write_pfm(&a.uncertainty, image.width, image.height, &image.std)?;
    Ok(())
}

fn mesh_half_extent(decoder: &dyn SdfDecoder, z: &[f64]) -> f64 {
    (1.1 * decoder.bounding_radius(z)).max(MESH_HALF_EXTENT)
}

pub fn mesh(a: &MeshArgs, threads: Option<usize>) -> Result<(), CliError> {
    init_threads(threads)?;
    let result = FitResult::read(&a.result)?;
    let decoder = Decoder::from_selector(&result.decoder)?;
    let z = result.latent()?;
    let mut mesh = extract_mesh_in(&decoder, &z.mean, a.resolution, mesh_half_extent(&decoder, &z.mean))
        .map_err(|e| match e {
            usm_core::Error::InvalidInput(m) => CliError::Usage(m),
            other => other.into(),
        })?;
    if mesh.is_empty() {
        eprintln!("usm: the fitted shape has an empty zero level set; writing an empty mesh");
    }
    if a.world {
        mesh = mesh.transformed(&result.pose()?.mean);
    }
    mesh.write_obj(&a.out)?;
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn eval(a: &EvalArgs, threads: Option<usize>) -> Result<(), CliError> {
    init_threads(threads)?;
    if a.samples == 0 {
        return Err(CliError::Usage("samples must be at least 1".into()));
    }
    if a.resolution < 8 {
        return Err(CliError::Usage("resolution must be at least 8".into()));
    }
    let result = FitResult::read(&a.result)?;
    let decoder = Decoder::from_selector(&result.decoder)?;
    let (z, pose) = (result.latent()?, result.pose()?);
    let scene = scene(&a.scene)?;
    let gt = scene
        .ground_truth
        .ok_or_else(|| CliError::Data("scene manifest has no ground_truth block; eval needs one".into()))?;

    let gt_seed = derive_seed(a.seed, &[1]);
    let est_seed = derive_seed(a.seed, &[2]);
    let (gt_points, iou) = match (&gt.latent, &gt.mesh) {
        (Some(latent), _) => {
            let gt_decoder = Decoder::from_selector(gt.decoder.as_deref().unwrap_or("analytic"))?;
            let points = placed_surface_points(&gt_decoder, latent, &gt.pose, a.resolution, a.samples, gt_seed)?;
            let iou = iou_3d(
                PlacedShape {
                    decoder: &decoder,
                    z: &z.mean,
                    pose: &pose.mean,
                },
                PlacedShape {
                    decoder: &gt_decoder,
                    z: latent,
                    pose: &gt.pose,
                },
                a.resolution,
            )?;
            (points, Some(iou))
        }
        (None, Some(mesh_path)) => {
            let mesh = TriangleMesh::read_obj(mesh_path)?;
            let points = sample_surface(&mesh, a.samples, gt_seed)?
                .iter()
                .map(|p| transform_point(&gt.pose, p))
                .collect();
            (points, None)
        }
        (None, None) => {
            return Err(CliError::Data(
                "ground_truth block has neither a latent code nor a mesh to compare shapes against".into(),
            ))
        }
    };
    let est_points = placed_surface_points(&decoder, &z.mean, &pose.mean, a.resolution, a.samples, est_seed)?;
    let cd = chamfer(&est_points, &gt_points)?;
    let corr = uncertainty_correlation(&decoder, &z, &pose, &gt_points)?;
    let errors = pose_error(&pose.mean, &gt.pose);
    let correct = pose_correct(&errors, &PoseThresholds::default());

    let mut csv = String::from("object,translation_error,rotation_error_deg,scale_error,pose_correct,iou,chamfer,pearson\n");
    let _ = writeln!(
        csv,
        "0,{},{},{},{},{},{},{}",
        errors.translation,
        errors.rotation,
        errors.scale,
        correct,
        fmt_metric(iou),
        cd,
        corr.pearson
    );
    write_text(&a.out, &csv)?;
    write_text(&a.uncertainty, &corr.to_csv())?;
    print!("{csv}");
    Ok(())
}
