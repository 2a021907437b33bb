//! `result.json` and `history.csv`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use usm_core::decoder::LatentGaussian;
use usm_core::geometry::{Pose9, PoseGaussian};
use usm_core::optimizer::{LossRecord, OptimState};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub decoder: String,
    pub latent: LatentOut,
    pub pose: PoseOut,
    pub iterations: usize,
    pub config: RunConfig,
    pub history: Vec<LossRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentOut {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseOut {
    pub translation: [f64; 3],
    /// Axis-angle, radians.
    pub rotation: [f64; 3],
    pub log_scale: [f64; 3],
    pub scale: [f64; 3],
    /// Object-to-world, row-major.
    pub matrix: [[f64; 4]; 4],
    /// Variances in `[t, φ, log s]` order.
    pub var: [f64; 9],
}

impl FitResult {
    pub fn new(state: &OptimState, config: &RunConfig) -> Self {
        let p = &state.pose.mean;
        let m = p.to_matrix();
        let mut matrix = [[0.0; 4]; 4];
        for (r, row) in matrix.iter_mut().enumerate() {
            for (c, x) in row.iter_mut().enumerate() {
                *x = m[(r, c)];
            }
        }
        let s = p.scale();
        Self {
            decoder: config.decoder.clone(),
            latent: LatentOut {
                mean: state.z.mean.clone(),
                var: state.z.var.clone(),
            },
            pose: PoseOut {
                translation: [p.t.x, p.t.y, p.t.z],
                rotation: [p.phi.x, p.phi.y, p.phi.z],
                log_scale: [p.log_s.x, p.log_s.y, p.log_s.z],
                scale: [s.x, s.y, s.z],
                matrix,
                var: state.pose.var,
            },
            iterations: state.iteration,
            config: config.clone(),
            history: state.history.clone(),
        }
    }

    pub fn latent(&self) -> Result<LatentGaussian, CliError> {
        LatentGaussian::new(self.latent.mean.clone(), self.latent.var.clone()).map_err(CliError::from)
    }

    /// Rebuilt from the stored `[t, φ, log s]`; the matrix is informational.
    pub fn pose(&self) -> Result<PoseGaussian, CliError> {
        let mut xi = [0.0; 9];
        xi[..3].copy_from_slice(&self.pose.translation);
        xi[3..6].copy_from_slice(&self.pose.rotation);
        xi[6..].copy_from_slice(&self.pose.log_scale);
        PoseGaussian::new(Pose9::from_vector(&xi), self.pose.var).map_err(CliError::from)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("result serializes");
        text.push('\n');
        text
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut out = String::from("iter,L3D,L2D,reg,total\n");
    for h in history {
        let _ = writeln!(out, "{},{},{},{},{}", h.iteration, h.l3d, h.l2d, h.reg, h.total);
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
