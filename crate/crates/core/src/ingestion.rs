//! Depth/mask frames, their on-disk formats, and back-projection into
//! world-frame point clouds.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{format_matrix_3x4, parse_matrix_3x4, Pose9, Rigid};

pub const DEFAULT_POINT_BUDGET: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got {} {}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be nonzero"));
        }
        if !(self.cx >= 0.0 && self.cx <= self.width as f64 && self.cy >= 0.0 && self.cy <= self.height as f64) {
            return Err(Error::invalid(format!(
                "principal point ({}, {}) lies outside the {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p_c: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p_c.x / p_c.z + self.cx,
            self.fy * p_c.y / p_c.z + self.cy,
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.len() != 6 {
            return Err(Error::format(
                "intrinsics",
                format!("expected 6 values (fx fy cx cy width height), found {}", tokens.len()),
            ));
        }
        let f = |i: usize, name: &str| -> Result<f64> {
            tokens[i]
                .parse::<f64>()
                .map_err(|e| Error::format(format!("intrinsics.{name}"), e.to_string()))
        };
        let n = |i: usize, name: &str| -> Result<usize> {
            tokens[i]
                .parse::<usize>()
                .map_err(|e| Error::format(format!("intrinsics.{name}"), e.to_string()))
        };
        let k = Self {
            fx: f(0, "fx")?,
            fy: f(1, "fy")?,
            cx: f(2, "cx")?,
            cy: f(3, "cy")?,
            width: n(4, "width")?,
            height: n(5, "height")?,
        };
        k.validate()
            .map_err(|e| Error::format("intrinsics", e.to_string()))?;
        Ok(k)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }
}

/// One observation: depth in meters (non-positive marks invalid), a binary
/// object mask, intrinsics and the camera-to-world transform. Rasters are
/// row-major with row 0 at the top of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
    pub intrinsics: Intrinsics,
    pub t_wc: Rigid,
}

impl DepthFrame {
    pub fn new(depth: Vec<f32>, mask: Vec<bool>, intrinsics: Intrinsics, t_wc: Rigid) -> Result<Self> {
        intrinsics.validate()?;
        let n = intrinsics.width * intrinsics.height;
        if depth.len() != n || mask.len() != n {
            return Err(Error::invalid(format!(
                "raster sizes (depth {}, mask {}) do not match {}x{} intrinsics",
                depth.len(),
                mask.len(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        let t_wc = Rigid::new(t_wc.rotation, t_wc.translation)?;
        Ok(Self {
            depth,
            mask,
            intrinsics,
            t_wc,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.intrinsics.width + u
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[self.index(u, v)] as f64
    }

    pub fn is_object(&self, u: usize, v: usize) -> bool {
        self.mask[self.index(u, v)]
    }

    /// Valid masked pixels as `(u, v, depth)`.
    pub fn object_pixels(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for v in 0..self.height() {
            for u in 0..self.width() {
                let d = self.depth_at(u, v);
                if self.is_object(u, v) && d > 0.0 && d.is_finite() {
                    out.push((u, v, d));
                }
            }
        }
        out
    }
}

pub fn back_project(frame: &DepthFrame) -> Vec<Vector3<f64>> {
    frame
        .object_pixels()
        .into_iter()
        .map(|(u, v, d)| frame.intrinsics.ray(u as f64, v as f64) * d)
        .collect()
}

/// Union of all frames' object points in the world frame, reduced to at most
/// `budget` points by seeded uniform selection.
pub fn assemble_world_points(frames: &[DepthFrame], budget: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let all: Vec<Vector3<f64>> = frames
        .iter()
        .flat_map(|f| back_project(f).into_iter().map(move |p| f.t_wc.apply(&p)))
        .collect();
    if all.is_empty() {
        return Err(Error::invalid("no valid object pixels in any frame"));
    }
    if all.len() <= budget {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, all.len(), budget).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| all[i]).collect())
}

/// Grayscale little-endian PFM. Returns `(width, height, data)` with row 0
/// at the top.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes).map_err(|e| match e {
        Error::Format { field, reason } => Error::format(format!("{}: {field}", path.display()), reason),
        other => other,
    })
}

fn header_tokens<'a>(bytes: &'a [u8], count: usize, field: &str) -> Result<(Vec<&'a str>, usize)> {
    // tokens separated by whitespace; exactly one whitespace byte after the last
    let mut tokens = Vec::with_capacity(count);
    let mut pos = 0;
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos >= bytes.len() {
            return Err(Error::format(field, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(field, "header is not ASCII"))?;
        tokens.push(tok);
    }
    Ok((tokens, pos + 1))
}

pub fn parse_pfm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let (tokens, offset) = header_tokens(bytes, 4, "pfm header")?;
    match tokens[0] {
        "Pf" => {}
        "PF" => return Err(Error::format("pfm magic", "color PFM is not supported")),
        other => return Err(Error::format("pfm magic", format!("expected Pf, found {other:?}"))),
    }
    let dim = |s: &str, name: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(format!("pfm {name}"), format!("bad value {s:?}")))
    };
    let width = dim(tokens[1], "width")?;
    let height = dim(tokens[2], "height")?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::format("pfm scale", format!("bad value {:?}", tokens[3])))?;
    if !(scale < 0.0) {
        return Err(Error::format(
            "pfm scale",
            "non-negative scale marks big-endian data; only little-endian is supported",
        ));
    }
    let n = width * height;
    let body = &bytes[offset.min(bytes.len())..];
    if body.len() != 4 * n {
        return Err(Error::format(
            "pfm data",
            format!("expected {} bytes of samples, found {}", 4 * n, body.len()),
        ));
    }
    let mut data = vec![0f32; n];
    for (i, c) in body.chunks_exact(4).enumerate() {
        // file rows run bottom to top
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    }
    Ok((width, height, data))
}

pub fn encode_pfm(width: usize, height: usize, data: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for v in &data[row * width..(row + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<()> {
    fs::write(path, encode_pfm(width, height, data)).map_err(|e| Error::io(path, e))
}

/// Binary P5 mask with maxval 255; 255 is object and 0 is background.
pub fn parse_pgm_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<bool>)> {
    let (tokens, offset) = header_tokens(bytes, 4, "pgm header")?;
    if tokens[0] != "P5" {
        return Err(Error::format("pgm magic", format!("expected P5, found {:?}", tokens[0])));
    }
    let dim = |s: &str, name: &str| -> Result<usize> {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(format!("pgm {name}"), format!("bad value {s:?}")))
    };
    let width = dim(tokens[1], "width")?;
    let height = dim(tokens[2], "height")?;
    if tokens[3] != "255" {
        return Err(Error::format("pgm maxval", format!("expected 255, found {:?}", tokens[3])));
    }
    let body = &bytes[offset.min(bytes.len())..];
    if body.len() != width * height {
        return Err(Error::format(
            "pgm data",
            format!("expected {} bytes, found {}", width * height, body.len()),
        ));
    }
    let mask = body
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::format("pgm data", format!("mask value {other} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((width, height, mask))
}

pub fn encode_pgm_mask(width: usize, height: usize, mask: &[bool]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

pub fn read_pgm_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm_mask(&bytes).map_err(|e| match e {
        Error::Format { field, reason } => Error::format(format!("{}: {field}", path.display()), reason),
        other => other,
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub depth: PathBuf,
    pub mask: PathBuf,
    pub intrinsics: PathBuf,
    pub pose: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    /// Object-to-world pose file (3x4 text).
    pub pose: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub frames: Vec<FrameEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruthEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub pose: Pose9,
    pub decoder: Option<String>,
    pub latent: Option<Vec<f64>>,
    pub mesh: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frames: Vec<DepthFrame>,
    pub ground_truth: Option<GroundTruth>,
}

pub fn load_frame(base: &Path, entry: &FrameEntry) -> Result<DepthFrame> {
    let intr_path = base.join(&entry.intrinsics);
    let intrinsics = Intrinsics::parse(&read_text(&intr_path)?).map_err(|e| with_path(e, &intr_path))?;
    let pose_path = base.join(&entry.pose);
    let t_wc = parse_matrix_3x4(&read_text(&pose_path)?)
        .and_then(|m| Rigid::from_3x4(&m))
        .map_err(|e| with_path(e, &pose_path))?;
    let depth_path = base.join(&entry.depth);
    let (dw, dh, depth) = read_pfm(&depth_path)?;
    let mask_path = base.join(&entry.mask);
    let (mw, mh, mask) = read_pgm_mask(&mask_path)?;
    if (dw, dh) != (intrinsics.width, intrinsics.height) {
        return Err(Error::format(
            depth_path.display().to_string(),
            format!("depth is {dw}x{dh} but intrinsics say {}x{}", intrinsics.width, intrinsics.height),
        ));
    }
    if (mw, mh) != (intrinsics.width, intrinsics.height) {
        return Err(Error::format(
            mask_path.display().to_string(),
            format!("mask is {mw}x{mh} but intrinsics say {}x{}", intrinsics.width, intrinsics.height),
        ));
    }
    DepthFrame::new(depth, mask, intrinsics, t_wc)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { field, reason } => Error::format(format!("{}: {field}", path.display()), reason),
        Error::InvalidInput(reason) => Error::format(path.display().to_string(), reason),
        other => other,
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn load_scene(manifest_path: &Path) -> Result<Scene> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let frames = manifest
        .frames
        .iter()
        .map(|entry| load_frame(base, entry))
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = match &manifest.ground_truth {
        None => None,
        Some(gt) => {
            let pose_path = base.join(&gt.pose);
            let pose = parse_matrix_3x4(&read_text(&pose_path)?)
                .and_then(|m| Pose9::from_matrix(&m))
                .map_err(|e| with_path(e, &pose_path))?;
            Some(GroundTruth {
                pose,
                decoder: gt.decoder.clone(),
                latent: gt.latent.clone(),
                mesh: gt.mesh.as_ref().map(|m| base.join(m)),
            })
        }
    };
    Ok(Scene { frames, ground_truth })
}

/// Resolves a scene argument that may be a directory holding `manifest.json`.
pub fn manifest_path(scene: &Path) -> PathBuf {
    if scene.is_dir() {
        scene.join("manifest.json")
    } else {
        scene.to_path_buf()
    }
}

/// Writes the four files of one frame under `dir` and returns its entry.
pub fn write_frame(dir: &Path, stem: &str, frame: &DepthFrame) -> Result<FrameEntry> {
    let entry = FrameEntry {
        depth: format!("{stem}_depth.pfm").into(),
        mask: format!("{stem}_mask.pgm").into(),
        intrinsics: format!("{stem}_intrinsics.txt").into(),
        pose: format!("{stem}_pose.txt").into(),
    };
    let k = &frame.intrinsics;
    write_pfm(&dir.join(&entry.depth), k.width, k.height, &frame.depth)?;
    let mask_path = dir.join(&entry.mask);
    fs::write(&mask_path, encode_pgm_mask(k.width, k.height, &frame.mask)).map_err(|e| Error::io(&mask_path, e))?;
    let intr_path = dir.join(&entry.intrinsics);
    fs::write(&intr_path, k.to_text()).map_err(|e| Error::io(&intr_path, e))?;
    let pose_path = dir.join(&entry.pose);
    fs::write(&pose_path, format_matrix_3x4(&frame.t_wc.upper_3x4())).map_err(|e| Error::io(&pose_path, e))?;
    Ok(entry)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn intr() -> Intrinsics {
        Intrinsics::new(100.0, 120.0, 16.0, 12.0, 32, 24).unwrap()
    }

    fn frame_with(pixels: &[(usize, usize, f32)], t_wc: Rigid) -> DepthFrame {
        let k = intr();
        let mut depth = vec![0f32; k.width * k.height];
        let mut mask = vec![false; k.width * k.height];
        for &(u, v, d) in pixels {
            depth[v * k.width + u] = d;
            mask[v * k.width + u] = true;
        }
        DepthFrame::new(depth, mask, k, t_wc).unwrap()
    }

    #[test]
    fn back_projection_examples() {
        let f = frame_with(&[(16, 12, 2.0)], Rigid::identity());
        assert_eq!(back_project(&f), vec![Vector3::new(0.0, 0.0, 2.0)]);

        let k = Intrinsics::new(10.0, 10.0, 5.0, 5.0, 16, 16).unwrap();
        let mut depth = vec![0f32; 256];
        let mut mask = vec![false; 256];
        depth[5 * 16 + 15] = 1.0;
        mask[5 * 16 + 15] = true;
        let f = DepthFrame::new(depth, mask, k, Rigid::identity()).unwrap();
        let p = back_project(&f);
        assert!((p[0] - Vector3::new(1.0, 0.0, 1.0)).norm() < 1e-15);

        assert!(back_project(&frame_with(&[], Rigid::identity())).is_empty());
    }

    #[test]
    fn invalid_depth_and_unmasked_pixels_are_skipped() {
        let mut f = frame_with(&[(1, 1, 1.0), (2, 2, -1.0), (3, 3, 0.0)], Rigid::identity());
        let i = f.index(4, 4);
        f.depth[i] = 3.0;
        assert_eq!(back_project(&f).len(), 1);
    }

    #[test]
    fn world_points_and_subsampling() {
        let pixels: Vec<(usize, usize, f32)> = (0..24)
            .flat_map(|v| (0..32).map(move |u| (u, v, 1.0 + 0.01 * (u + v) as f32)))
            .collect();
        let f = frame_with(&pixels, Rigid::identity());
        let all = assemble_world_points(std::slice::from_ref(&f), usize::MAX, 0).unwrap();
        assert_eq!(all, back_project(&f));

        let frames: Vec<DepthFrame> = (0..14).map(|_| f.clone()).collect();
        let a = assemble_world_points(&frames, 100, 7).unwrap();
        let b = assemble_world_points(&frames, 100, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);

        let empty = frame_with(&[], Rigid::identity());
        assert!(matches!(assemble_world_points(&[empty], 10, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn frame_order_does_not_change_the_point_set() {
        let rot = crate::geometry::so3_exp(&Vector3::new(0.1, 0.5, -0.2));
        let f1 = frame_with(&[(3, 4, 1.5), (10, 10, 2.0)], Rigid::identity());
        let f2 = frame_with(&[(5, 6, 1.1)], Rigid::new(rot, Vector3::new(1.0, 2.0, 0.5)).unwrap());
        let mut a = assemble_world_points(&[f1.clone(), f2.clone()], 100, 0).unwrap();
        let mut b = assemble_world_points(&[f2, f1], 100, 0).unwrap();
        let key = |p: &Vector3<f64>| (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
    }

    #[test]
    fn pfm_layout_and_endianness() {
        let data = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bytes = encode_pfm(3, 2, &data);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // bottom row first
        assert_eq!(&bytes[12..16], &4.0f32.to_le_bytes());
        assert_eq!(parse_pfm(&bytes).unwrap(), (3, 2, data.to_vec()));

        let big = [b"Pf\n3 2\n1.0\n".as_slice(), &bytes[12..]].concat();
        match parse_pfm(&big).unwrap_err() {
            Error::Format { field, .. } => assert_eq!(field, "pfm scale"),
            other => panic!("{other}"),
        }
        assert!(parse_pfm(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0").is_err());
    }

    #[test]
    fn pgm_mask_rules() {
        let mask = [true, false, false, true];
        let bytes = encode_pgm_mask(2, 2, &mask);
        assert_eq!(bytes, b"P5\n2 2\n255\n\xff\0\0\xff");
        assert_eq!(parse_pgm_mask(&bytes).unwrap(), (2, 2, mask.to_vec()));
        let mut bad = bytes.clone();
        bad[11] = 7;
        assert!(parse_pgm_mask(&bad).is_err());
        assert!(parse_pgm_mask(b"P2\n2 2\n255\n0 0 0 0").is_err());
    }

    #[test]
    fn intrinsics_text() {
        let k = intr();
        assert_eq!(Intrinsics::parse(&k.to_text()).unwrap(), k);
        assert!(Intrinsics::parse("1 2 3").is_err());
        assert!(Intrinsics::parse("-1 1 1 1 4 4").is_err());
        assert!(Intrinsics::parse("1 1 9 1 4 4").is_err());
    }

    #[test]
    fn missing_depth_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let f = frame_with(&[(1, 1, 1.0)], Rigid::identity());
        let entry = write_frame(dir.path(), "view_000", &f).unwrap();
        let manifest = Manifest {
            frames: vec![entry],
            ground_truth: None,
        };
        let mpath = dir.path().join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        let scene = load_scene(&mpath).unwrap();
        assert_eq!(scene.frames[0], f);
        assert!(scene.ground_truth.is_none());

        fs::remove_file(dir.path().join("view_000_depth.pfm")).unwrap();
        let err = load_scene(&mpath).unwrap_err();
        assert!(err.to_string().contains("view_000_depth.pfm"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = frame_with(&[(1, 1, 1.0)], Rigid::identity());
        let entry = write_frame(dir.path(), "v", &f).unwrap();
        write_pfm(&dir.path().join("v_depth.pfm"), 2, 2, &[1.0; 4]).unwrap();
        let err = load_frame(dir.path(), &entry).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    proptest! {
        #[test]
        fn back_projection_inverts_projection(u in 0usize..32, v in 0usize..24, d in 0.1f64..10.0) {
            let k = intr();
            let p = k.ray(u as f64, v as f64) * d;
            let (pu, pv) = k.project(&p);
            prop_assert!((pu - u as f64).abs() < 1e-9 && (pv - v as f64).abs() < 1e-9);
            let f = frame_with(&[(u, v, d as f32)], Rigid::identity());
            let q = back_project(&f)[0];
            let exact = k.ray(u as f64, v as f64) * (d as f32) as f64;
            prop_assert!((q - exact).norm() < 1e-9);
        }
    }
}
