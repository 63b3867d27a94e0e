//! Registration between the teacher and student views.
//!
//! Homographies relate the two *undistorted* image planes. When the student
//! camera is a fisheye, [`Registration`] composes the homography with the
//! lens model so boxes and the overlap region land in raw student pixels.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{enclosing_axis_aligned, BBox, BinaryMask, Point, RegionPartition};

const DET_EPS: f64 = 1e-12;
const W_EPS: f64 = 1e-12;

/// 3x3 projective map, normalized so that `m[2][2] = 1` whenever that entry is nonzero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 9]", into = "[f64; 9]")]
pub struct Homography {
    m: Matrix3<f64>,
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Homography::from_matrix(Matrix3::from_row_slice(&v))
    }
}

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography has non-finite entries"));
        }
        let m = if m[(2, 2)].abs() > DET_EPS { m / m[(2, 2)] } else { m };
        if m.determinant().abs() <= DET_EPS {
            return Err(Error::invalid("homography is singular"));
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Homography {
        let inv = self.m.try_inverse().expect("homography invariant: invertible");
        Homography::from_matrix(inv).expect("inverse of an invertible matrix is invertible")
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Homography> {
        Homography::from_matrix(self.m * first.m)
    }

    /// Frobenius norm of the difference after scaling both to unit norm with
    /// a common sign.
    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        let a = self.m / self.m.norm();
        let b = other.m / other.m.norm();
        (a - b).norm().min((a + b).norm())
    }

    fn apply_h(&self, p: Point) -> Vector3<f64> {
        self.m * Vector3::new(p.x, p.y, 1.0)
    }
}

/// Homogeneous transform and perspective divide.
pub fn project_point(h: &Homography, p: Point) -> Result<Point> {
    let v = h.apply_h(p);
    if v.z.abs() < W_EPS || !v.x.is_finite() || !v.y.is_finite() {
        return Err(Error::PointAtInfinity);
    }
    Ok(Point::new(v.x / v.z, v.y / v.z))
}

/// Projects the four corners and encloses them; the score is preserved.
pub fn project_box(h: &Homography, b: &BBox) -> Result<BBox> {
    let corners = b
        .corners()
        .iter()
        .map(|&c| project_point(h, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(enclosing_axis_aligned(&corners)?.with_score(b.score))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomographyEstimate {
    pub homography: Homography,
    /// Mean distance in student pixels between projected teacher points and
    /// their student counterparts.
    pub mean_reprojection_error: f64,
}

/// Similarity moving the centroid to the origin and the mean distance to sqrt(2).
fn normalizing_transform(pts: &[Point]) -> Result<Matrix3<f64>> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_d = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if !(mean_d > 1e-12) {
        return Err(Error::RankDeficient);
    }
    let s = 2f64.sqrt() / mean_d;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: Point) -> Point {
    let v = t * Vector3::new(p.x, p.y, 1.0);
    Point::new(v.x / v.z, v.y / v.z)
}

/// Normalized DLT over all correspondences `(teacher point, student point)`.
pub fn estimate_homography(pairs: &[(Point, Point)]) -> Result<HomographyEstimate> {
    if pairs.len() < 4 {
        return Err(Error::TooFewCorrespondences(pairs.len()));
    }
    let src: Vec<Point> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<Point> = pairs.iter().map(|p| p.1).collect();
    let ts = normalizing_transform(&src)?;
    let td = normalizing_transform(&dst)?;

    // Padding with zero rows keeps the null space and guarantees a full V^T.
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let s = transform(&ts, *s);
        let d = transform(&td, *d);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-s.x, -s.y, -1.0, 0.0, 0.0, 0.0, d.x * s.x, d.x * s.y, d.x]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -s.x, -s.y, -1.0, d.y * s.x, d.y * s.y, d.y]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::RankDeficient)?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    // A one-dimensional null space needs the second-smallest singular value
    // to be clearly nonzero.
    if sv[second] <= 1e-9 * sv[order[sv.len() - 1]] {
        return Err(Error::RankDeficient);
    }
    let hv = v_t.row(smallest);
    let hv: Vec<f64> = hv.iter().copied().collect();
    let hn = Matrix3::from_row_slice(&hv);
    let td_inv = td.try_inverse().ok_or(Error::RankDeficient)?;
    let m = td_inv * hn * ts;
    let homography = Homography::from_matrix(m).map_err(|_| Error::RankDeficient)?;

    let mut total = 0.0;
    for (s, d) in &src.iter().zip(&dst).collect::<Vec<_>>() {
        let p = project_point(&homography, **s)?;
        total += p.dist(d);
    }
    Ok(HomographyEstimate {
        homography,
        mean_reprojection_error: total / pairs.len() as f64,
    })
}

/// Equidistant fisheye: a ray at angle `theta` off the optical axis lands at
/// radius `focal * theta` from the center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeModel {
    pub focal: f64,
    pub center: Point,
    pub max_theta: f64,
}

impl FisheyeModel {
    pub fn new(focal: f64, center: Point, max_theta: f64) -> Result<Self> {
        if !(focal > 0.0) || !(max_theta > 0.0) {
            return Err(Error::invalid("fisheye focal and max_theta must be positive"));
        }
        Ok(Self {
            focal,
            center,
            max_theta,
        })
    }

    /// Pixel for a ray `theta` off axis at azimuth `phi` (angle measured in the
    /// image frame, x right, y down).
    pub fn project(&self, theta: f64, phi: f64) -> Result<Point> {
        if !(0.0..=self.max_theta).contains(&theta) {
            return Err(Error::OutsideImage {
                theta,
                max_theta: self.max_theta,
            });
        }
        let r = self.focal * theta;
        Ok(Point::new(self.center.x + r * phi.cos(), self.center.y + r * phi.sin()))
    }

    /// Inverse of [`project`](Self::project): `(theta, phi)` for a pixel.
    pub fn unproject(&self, p: Point) -> (f64, f64) {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let r = dx.hypot(dy);
        let phi = if r == 0.0 { 0.0 } else { dy.atan2(dx) };
        (r / self.focal, phi)
    }

    /// Maps a fisheye pixel to the plane of a pinhole with the same focal and
    /// axis. `None` for rays at or beyond 90 degrees.
    pub fn undistort(&self, p: Point) -> Option<Point> {
        let (theta, phi) = self.unproject(p);
        if theta >= FRAC_PI_2 - 1e-9 {
            return None;
        }
        let ru = self.focal * theta.tan();
        Some(Point::new(self.center.x + ru * phi.cos(), self.center.y + ru * phi.sin()))
    }

    /// Inverse of [`undistort`](Self::undistort).
    pub fn distort(&self, p: Point) -> Point {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        let ru = dx.hypot(dy);
        if ru == 0.0 {
            return self.center;
        }
        let r = self.focal * (ru / self.focal).atan();
        Point::new(self.center.x + r * dx / ru, self.center.y + r * dy / ru)
    }
}

pub fn fisheye_project(model: &FisheyeModel, theta: f64, phi: f64) -> Result<Point> {
    model.project(theta, phi)
}

/// A student pixel is in the overlap iff its preimage under `h^-1` lies
/// inside the teacher frame.
pub fn build_region_partition(
    h: &Homography,
    teacher_size: (usize, usize),
    student_size: (usize, usize),
) -> Result<RegionPartition> {
    Registration::new(*h, None).region_partition(teacher_size, student_size)
}

/// Homography plus the optional student lens model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub homography: Homography,
    pub student_lens: Option<FisheyeModel>,
}

impl Registration {
    pub fn new(homography: Homography, student_lens: Option<FisheyeModel>) -> Self {
        Self {
            homography,
            student_lens,
        }
    }

    /// Teacher pixel to raw student pixel.
    pub fn project_point(&self, p: Point) -> Result<Point> {
        let u = project_point(&self.homography, p)?;
        Ok(match &self.student_lens {
            Some(lens) => lens.distort(u),
            None => u,
        })
    }

    /// Teacher box to an axis-aligned student box. Without a lens this is
    /// exactly [`project_box`]; through a fisheye the edges bend, so points
    /// along every edge are enclosed, not just the corners.
    pub fn project_box(&self, b: &BBox) -> Result<BBox> {
        if self.student_lens.is_none() {
            return project_box(&self.homography, b);
        }
        const STEPS: usize = 8;
        let c = b.corners();
        let mut pts = Vec::with_capacity(4 * STEPS);
        for k in 0..4 {
            let (a, e) = (c[k], c[(k + 1) % 4]);
            for s in 0..STEPS {
                let t = s as f64 / STEPS as f64;
                let q = Point::new(a.x + t * (e.x - a.x), a.y + t * (e.y - a.y));
                pts.push(self.project_point(q)?);
            }
        }
        Ok(enclosing_axis_aligned(&pts)?.with_score(b.score))
    }

    pub fn region_partition(
        &self,
        teacher_size: (usize, usize),
        student_size: (usize, usize),
    ) -> Result<RegionPartition> {
        let (tw, th) = (teacher_size.0 as f64, teacher_size.1 as f64);
        let inv = self.homography.inverse();
        // Projective maps fold the plane; only preimages on the same side of
        // the vanishing line as the teacher frame itself are real.
        let tc = Point::new(tw / 2.0, th / 2.0);
        let sheet = inv.apply_h(project_point(&self.homography, tc)?).z.signum();
        let mask = BinaryMask::from_fn(student_size.0, student_size.1, |x, y| {
            let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
            let u = match &self.student_lens {
                Some(lens) => match lens.undistort(p) {
                    Some(u) => u,
                    None => return false,
                },
                None => p,
            };
            let q = inv.apply_h(u);
            if q.z.abs() < W_EPS || q.z.signum() != sheet {
                return false;
            }
            let (qx, qy) = (q.x / q.z, q.y / q.z);
            qx >= 0.0 && qx < tw && qy >= 0.0 && qy < th
        });
        RegionPartition::new(mask)
    }
}

/// Parses correspondence rows `tx ty sx sy`, separated by whitespace or commas.
/// Blank lines and lines starting with `#` are skipped, as is a header row
/// whose first field is not numeric.
pub fn parse_correspondences(text: &str) -> Result<Vec<(Point, Point)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if out.is_empty() && fields.first().is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "line {}: expected 4 values, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let v = fields
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(format!("line {}: bad number `{f}`", lineno + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((Point::new(v[0], v[1]), Point::new(v[2], v[3])));
    }
    Ok(out)
}
