//! Similarity ICP used to place the initial shape on the observed points.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use rstar::primitives::GeomWithData;
use rstar::RTree;

use crate::error::{Error, Result};
use crate::geometry::{so3_log, Pose9};

pub const MIN_POINTS: usize = 10;
const RANK_TOLERANCE: f64 = 1e-10;
const CONVERGED: f64 = 1e-12;

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn check_spread(points: &[Vector3<f64>], what: &str) -> Result<()> {
    if points.len() < MIN_POINTS {
        return Err(Error::Initialization(format!(
            "{what} has {} points, at least {MIN_POINTS} are needed",
            points.len()
        )));
    }
    let c = centroid(points);
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - c;
        acc + d * d.transpose()
    }) / points.len() as f64;
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo < RANK_TOLERANCE * hi {
        return Err(Error::Initialization(format!("{what} is rank deficient")));
    }
    Ok(())
}

fn bounds(points: &[Vector3<f64>]) -> (Vector3<f64>, Vector3<f64>) {
    points.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

/// Least-squares `y ≈ c R x + t` over paired points.
fn umeyama(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = x.len() as f64;
    let (mx, my) = (centroid(x), centroid(y));
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        cov += db * da.transpose();
        var_x += da.norm_squared();
    }
    cov /= n;
    var_x /= n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let c = (Matrix3::from_diagonal(&svd.singular_values) * d).trace() / var_x;
    (c, r, my - c * r * mx)
}

/// Per-axis scale and translation for a fixed rotation: an independent
/// straight-line fit along each object axis.
fn axis_scales(
    canonical: &[Vector3<f64>],
    y: &[Vector3<f64>],
    r: &Matrix3<f64>,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let local: Vec<Vector3<f64>> = y.iter().map(|p| r.transpose() * p).collect();
    let (mc, ml) = (centroid(canonical), centroid(&local));
    let mut s = Vector3::zeros();
    for i in 0..3 {
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (c, l) in canonical.iter().zip(&local) {
            sxy += (c[i] - mc[i]) * (l[i] - ml[i]);
            sxx += (c[i] - mc[i]) * (c[i] - mc[i]);
        }
        if !(sxx > 0.0) || !(sxy > 0.0) {
            return None;
        }
        s[i] = sxy / sxx;
    }
    let tau = ml - s.component_mul(&mc);
    Some((s, r * tau))
}

/// Pose placing `canonical` onto `observed_w`.
///
/// Scale starts from per-axis bounding-box extent ratios with identity
/// rotation. Each iteration matches every observed point to its nearest
/// placed canonical point, solves the similarity update in closed form, then
/// refits per-axis scale along the current object axes.
pub fn icp_init(canonical: &[Vector3<f64>], observed_w: &[Vector3<f64>], max_iters: usize) -> Result<Pose9> {
    check_spread(canonical, "canonical point set")?;
    check_spread(observed_w, "observed point set")?;
    let (clo, chi) = bounds(canonical);
    let (olo, ohi) = bounds(observed_w);
    let mut s = (ohi - olo).component_div(&(chi - clo));
    if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Initialization("degenerate bounding-box extents".into()));
    }
    let mut r = Matrix3::identity();
    let mut t = 0.5 * (ohi + olo) - s.component_mul(&(0.5 * (chi + clo)));

    for _ in 0..max_iters {
        let placed: Vec<GeomWithData<[f64; 3], usize>> = canonical
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let p = r * s.component_mul(c) + t;
                GeomWithData::new([p.x, p.y, p.z], j)
            })
            .collect();
        let tree = RTree::bulk_load(placed);
        let matches: Vec<usize> = observed_w
            .par_iter()
            .map(|p| tree.nearest_neighbor(&[p.x, p.y, p.z]).expect("nonempty tree").data)
            .collect();
        let matched: Vec<Vector3<f64>> = matches.iter().map(|&j| canonical[j]).collect();
        let scaled: Vec<Vector3<f64>> = matched.iter().map(|c| s.component_mul(c)).collect();

        let (c, r_new, t_new) = umeyama(&scaled, observed_w);
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Initialization("similarity fit produced a non-positive scale".into()));
        }
        let (s_new, t_new) = match axis_scales(&matched, observed_w, &r_new) {
            Some(fit) => fit,
            None => (s * c, t_new),
        };
        let step = (t_new - t).norm()
            + so3_log(&(r.transpose() * r_new)).norm()
            + (s_new - s).norm();
        r = r_new;
        s = s_new;
        t = t_new;
        if step < CONVERGED {
            break;
        }
    }
    Pose9::new(t, so3_log(&r), s).map_err(|e| Error::Initialization(e.to_string()))
}
