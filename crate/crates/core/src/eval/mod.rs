//! Pose, shape and uncertainty metrics, plus mesh extraction and export.

mod tables;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::decoder::{LatentGaussian, SdfDecoder};
use crate::error::{Error, Result};
use crate::geometry::{so3_log, transform_point, world_to_object, Pose9, PoseGaussian};
use crate::numeric::{pairwise_sum, pearson};
use crate::propagation::sdf_distribution;

/// Half extent of the canonical cube meshed by [`extract_mesh`].
pub const MESH_HALF_EXTENT: f64 = 1.1;
pub const DEFAULT_MESH_RESOLUTION: usize = 64;
pub const DEFAULT_SURFACE_SAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrors {
    /// Meters.
    pub translation: f64,
    /// Degrees.
    pub rotation: f64,
    /// Largest per-axis relative scale error.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseThresholds {
    pub translation: f64,
    pub rotation: f64,
    pub scale: f64,
}

impl Default for PoseThresholds {
    fn default() -> Self {
        Self {
            translation: 0.2,
            rotation: 20.0,
            scale: 0.2,
        }
    }
}

pub fn pose_error(est: &Pose9, gt: &Pose9) -> PoseErrors {
    let translation = (est.t - gt.t).norm();
    let rel = est.rotation().transpose() * gt.rotation();
    let rotation = so3_log(&rel).norm().to_degrees();
    let (se, sg) = (est.scale(), gt.scale());
    let scale = (0..3)
        .map(|i| (se[i] / sg[i] - 1.0).abs())
        .fold(0.0, f64::max);
    PoseErrors {
        translation,
        rotation,
        scale,
    }
}

/// True when every error is strictly below its threshold.
pub fn pose_correct(errors: &PoseErrors, thresholds: &PoseThresholds) -> bool {
    errors.translation < thresholds.translation
        && errors.rotation < thresholds.rotation
        && errors.scale < thresholds.scale
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn corners(&self, t: &[usize; 3]) -> [Vector3<f64>; 3] {
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn triangle_areas(&self) -> Vec<f64> {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.corners(t);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .collect()
    }

    pub fn area(&self) -> f64 {
        pairwise_sum(&self.triangle_areas())
    }

    /// Signed enclosed volume; positive for outward-facing triangles.
    pub fn signed_volume(&self) -> f64 {
        let parts: Vec<f64> = self
            .triangles
            .iter()
            .map(|t| {
                let [a, b, c] = self.corners(t);
                a.dot(&b.cross(&c)) / 6.0
            })
            .collect();
        pairwise_sum(&parts)
    }

    /// Every undirected edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        if self.is_empty() {
            return false;
        }
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        counts.values().all(|&c| c == 2)
    }

    pub fn transformed(&self, pose: &Pose9) -> TriangleMesh {
        TriangleMesh {
            vertices: self.vertices.iter().map(|v| transform_point(pose, v)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        out
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj()).map_err(|e| Error::io(path, e))
    }

    /// Reads `v` and `f` records; polygons are fan-triangulated, texture and
    /// normal indices after `/` are ignored, negative indices count from the end.
    pub fn from_obj(text: &str) -> Result<Self> {
        let mut mesh = TriangleMesh::default();
        let mut faces = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |reason: String| Error::format(format!("OBJ line {}", n + 1), reason);
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>().map_err(|e| bad(e.to_string())))
                        .collect::<Result<_>>()?;
                    if c.len() != 3 {
                        return Err(bad("vertex needs three coordinates".into()));
                    }
                    mesh.vertices.push(Vector3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<i64> = it
                        .map(|s| {
                            let head = s.split('/').next().unwrap_or("");
                            head.parse::<i64>().map_err(|e| bad(e.to_string()))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs at least three vertices".into()));
                    }
                    faces.push((n + 1, idx, mesh.vertices.len()));
                }
                _ => {}
            }
        }
        let total = mesh.vertices.len() as i64;
        for (line, idx, seen) in faces {
            let resolved: Vec<usize> = idx
                .iter()
                .map(|&i| {
                    let k = if i < 0 { seen as i64 + i } else { i - 1 };
                    if i == 0 || k < 0 || k >= total {
                        Err(Error::format(format!("OBJ line {line}"), format!("vertex index {i} out of range")))
                    } else {
                        Ok(k as usize)
                    }
                })
                .collect::<Result<_>>()?;
            for w in 1..resolved.len() - 1 {
                mesh.triangles.push([resolved[0], resolved[w], resolved[w + 1]]);
            }
        }
        Ok(mesh)
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_obj(&text).map_err(|e| match e {
            Error::Format { field, reason } => Error::format(format!("{}: {field}", path.display()), reason),
            other => other,
        })
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Marching cubes over `resolution³` grid points spanning
/// `[-MESH_HALF_EXTENT, MESH_HALF_EXTENT]³` in the canonical frame.
///
/// A zero level set that misses the grid gives an empty mesh.
pub fn extract_mesh<D: SdfDecoder + ?Sized>(decoder: &D, z: &[f64], resolution: usize) -> Result<TriangleMesh> {
    extract_mesh_in(decoder, z, resolution, MESH_HALF_EXTENT)
}

pub fn extract_mesh_in<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &[f64],
    resolution: usize,
    half_extent: f64,
) -> Result<TriangleMesh> {
    if resolution < 8 {
        return Err(Error::invalid(format!("mesh resolution {resolution} is below 8")));
    }
    if !(half_extent > 0.0 && half_extent.is_finite()) {
        return Err(Error::invalid("mesh extent must be positive"));
    }
    decoder.check_dim(z)?;
    let n = resolution;
    let h = 2.0 * half_extent / (n - 1) as f64;
    let coord = |i: usize| -half_extent + i as f64 * h;
    let point = |i: usize, j: usize, k: usize| Vector3::new(coord(i), coord(j), coord(k));
    let idx = |i: usize, j: usize, k: usize| i + n * (j + n * k);

    let slices: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut out = Vec::with_capacity(n * n);
            for j in 0..n {
                for i in 0..n {
                    out.push(decoder.decode(z, &point(i, j, k))?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = slices.concat();

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<(usize, usize), usize> = HashMap::new();
    for k in 0..n - 1 {
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let grid: [[usize; 3]; 8] = CORNERS.map(|c| [i + c[0], j + c[1], k + c[2]]);
                let vals = grid.map(|g| values[idx(g[0], g[1], g[2])]);
                let mut case = 0usize;
                for (c, v) in vals.iter().enumerate() {
                    if *v < 0.0 {
                        case |= 1 << c;
                    }
                }
                if tables::EDGE_TABLE[case] == 0 {
                    continue;
                }
                let row = &tables::TRIANGLE_TABLE[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut face = [0usize; 3];
                    for (slot, &e) in face.iter_mut().zip(tri) {
                        let [a, b] = EDGES[e as usize];
                        let (ga, gb) = (grid[a], grid[b]);
                        let axis = (0..3).find(|&d| ga[d] != gb[d]).unwrap_or(0);
                        let lo = if ga[axis] < gb[axis] { ga } else { gb };
                        let key = (idx(lo[0], lo[1], lo[2]), axis);
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let (va, vb) = (vals[a], vals[b]);
                            let t = if va == vb { 0.5 } else { va / (va - vb) };
                            let pa = point(ga[0], ga[1], ga[2]);
                            let pb = point(gb[0], gb[1], gb[2]);
                            mesh.vertices.push(pa + (pb - pa) * t);
                            mesh.vertices.len() - 1
                        });
                    }
                    mesh.triangles.push(face);
                }
            }
        }
    }
    if mesh.signed_volume() < 0.0 {
        for t in &mut mesh.triangles {
            t.swap(1, 2);
        }
    }
    Ok(mesh)
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let areas = mesh.triangle_areas();
    let pick = WeightedIndex::new(&areas).map_err(|_| Error::invalid("mesh has no surface area to sample"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let [a, b, c] = mesh.corners(&mesh.triangles[pick.sample(&mut rng)]);
            let s = rng.random::<f64>().sqrt();
            let r = rng.random::<f64>();
            a * (1.0 - s) + b * (s * (1.0 - r)) + c * (s * r)
        })
        .collect())
}

/// World-frame surface samples of a placed shape, taken from its mesh.
pub fn placed_surface_points<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &[f64],
    pose: &Pose9,
    resolution: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vector3<f64>>> {
    let half = (1.1 * decoder.bounding_radius(z)).max(MESH_HALF_EXTENT);
    let mesh = extract_mesh_in(decoder, z, resolution, half)?;
    if mesh.is_empty() {
        return Err(Error::invalid("shape has an empty zero level set"));
    }
    Ok(sample_surface(&mesh, count, seed)?
        .iter()
        .map(|p| transform_point(pose, p))
        .collect())
}

fn as_rows(points: &[Vector3<f64>]) -> Vec<[f64; 3]> {
    points.iter().map(|p| [p.x, p.y, p.z]).collect()
}

fn mean_nearest(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> f64 {
    let tree = RTree::bulk_load(as_rows(to));
    let d: Vec<f64> = from
        .par_iter()
        .map(|p| {
            let q = tree.nearest_neighbor(&[p.x, p.y, p.z]).expect("tree is nonempty");
            (Vector3::from(*q) - p).norm()
        })
        .collect();
    pairwise_sum(&d) / d.len() as f64
}

/// Symmetric mean nearest-neighbour distance.
pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer distance needs two nonempty point sets"));
    }
    Ok(0.5 * (mean_nearest(a, b) + mean_nearest(b, a)))
}

/// Shape placed in the world for volumetric comparison.
#[derive(Clone, Copy)]
pub struct PlacedShape<'a> {
    pub decoder: &'a dyn SdfDecoder,
    pub z: &'a [f64],
    pub pose: &'a Pose9,
}

impl PlacedShape<'_> {
    fn world_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let r = self.decoder.bounding_radius(self.z);
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for c in CORNERS {
            let p = Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) * (2.0 * r) - Vector3::repeat(r);
            let w = transform_point(self.pose, &p);
            lo = lo.inf(&w);
            hi = hi.sup(&w);
        }
        (lo, hi)
    }

    fn occupied(&self, p_w: &Vector3<f64>) -> Result<bool> {
        Ok(self.decoder.decode(self.z, &world_to_object(self.pose, p_w))? <= 0.0)
    }
}

/// Volumetric IoU on a `grid_res³` voxel grid over the union of both world
/// bounding boxes padded by 10%.
pub fn iou_3d(a: PlacedShape<'_>, b: PlacedShape<'_>, grid_res: usize) -> Result<f64> {
    if grid_res < 8 {
        return Err(Error::invalid(format!("IoU grid resolution {grid_res} is below 8")));
    }
    a.decoder.check_dim(a.z)?;
    b.decoder.check_dim(b.z)?;
    let (la, ha) = a.world_bounds();
    let (lb, hb) = b.world_bounds();
    let (lo, hi) = (la.inf(&lb), ha.sup(&hb));
    let pad = (hi - lo) * 0.1;
    let (lo, hi) = (lo - pad, hi + pad);
    let step = (hi - lo) / grid_res as f64;
    let counts: Vec<(u64, u64)> = (0..grid_res)
        .into_par_iter()
        .map(|k| {
            let (mut inter, mut union) = (0u64, 0u64);
            for j in 0..grid_res {
                for i in 0..grid_res {
                    let p = lo + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5).component_mul(&step);
                    let (oa, ob) = (a.occupied(&p)?, b.occupied(&p)?);
                    inter += (oa && ob) as u64;
                    union += (oa || ob) as u64;
                }
            }
            Ok((inter, union))
        })
        .collect::<Result<_>>()?;
    let (inter, union) = counts.iter().fold((0, 0), |(i, u), (a, b)| (i + a, u + b));
    if union == 0 {
        return Err(Error::Undefined("IoU of two empty shapes".into()));
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRow {
    pub point: [f64; 3],
    pub mean: f64,
    pub std: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub rows: Vec<UncertaintyRow>,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,mean,std,error\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.point[0], r.point[1], r.point[2], r.mean, r.std, r.error
            );
        }
        out
    }
}

/// Pearson correlation between predicted SDF standard deviation and absolute
/// SDF error at world points sampled on the true surface.
pub fn uncertainty_correlation<D: SdfDecoder + ?Sized>(
    decoder: &D,
    z: &LatentGaussian,
    pose: &PoseGaussian,
    gt_points_w: &[Vector3<f64>],
) -> Result<CorrelationReport> {
    let rows: Vec<UncertaintyRow> = gt_points_w
        .par_iter()
        .map(|p| {
            let g = sdf_distribution(decoder, z, pose, p)?;
            Ok(UncertaintyRow {
                point: [p.x, p.y, p.z],
                mean: g.mean,
                std: g.var.max(0.0).sqrt(),
                error: g.mean.abs(),
            })
        })
        .collect::<Result<_>>()?;
    let std: Vec<f64> = rows.iter().map(|r| r.std).collect();
    let err: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let pearson = pearson(&std, &err)
        .ok_or_else(|| Error::Undefined("correlation with constant uncertainty or error".into()))?;
    Ok(CorrelationReport { pearson, rows })
}
