//! Artificial players for the student-only region.
//!
//! Crops around teacher-supervised players are cut from the shared view,
//! rescaled and rotated according to where they will be pasted (so the lens
//! distortion stays plausible), blended into the frame by solving a Poisson
//! problem, and their boxes are carried through the same transform.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{enclosing_axis_aligned, to_polar, BBox, BinaryMask, Frame, Point, PolarCoord, RegionPartition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub enabled: bool,
    pub alpha: f64,
    /// Per pixel of radial displacement.
    pub beta: f64,
    pub gamma: f64,
    pub crops_per_frame: usize,
    /// Boxes whose extents, inflated by this factor, intersect form one crop.
    pub adjacency_inflation: f64,
    pub crop_margin: f64,
    pub max_anchor_retries: usize,
    /// Field outline in student pixels. Empty means the whole frame.
    pub field_polygon: Vec<Point>,
    pub blend: BlendParams,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 0.5,
            beta: -0.004,
            gamma: 0.5,
            crops_per_frame: 4,
            adjacency_inflation: 1.5,
            crop_margin: 2.0,
            max_anchor_retries: 10,
            field_polygon: Vec::new(),
            blend: BlendParams::default(),
        }
    }
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha + self.gamma > 0.0) {
            return Err(Error::invalid("augment requires alpha + gamma > 0"));
        }
        if !(self.adjacency_inflation >= 1.0) || self.crop_margin < 0.0 {
            return Err(Error::invalid("augment inflation must be >= 1 and margin >= 0"));
        }
        self.blend.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlendParams {
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Relaxation factor; 1 is plain Gauss-Seidel.
    pub omega: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_sweeps: 2000,
            omega: 1.0,
        }
    }
}

impl BlendParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_sweeps == 0 || !(self.omega > 0.0 && self.omega < 2.0) {
            return Err(Error::invalid("blend requires tolerance > 0, max_sweeps > 0, 0 < omega < 2"));
        }
        Ok(())
    }
}

/// Rescale factor `alpha * exp(beta * (rho_f - rho_i)) + gamma`.
pub fn scale_factor(rho_i: f64, rho_f: f64, p: &AugmentParams) -> f64 {
    p.alpha * (p.beta * (rho_f - rho_i)).exp() + p.gamma
}

/// Image patch cut from a frame, with its boxes in patch coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub patch: Frame,
    /// Top-left corner of the patch in the source frame.
    pub origin: (usize, usize),
    pub boxes: Vec<BBox>,
    pub source_center_polar: PolarCoord,
    /// Raw motion bits under the patch, when the caller supplied a mask.
    pub motion: Option<BinaryMask>,
}

impl Crop {
    pub fn center_in_patch(&self) -> Point {
        Point::new(self.patch.width() as f64 / 2.0, self.patch.height() as f64 / 2.0)
    }
}

/// Connected components of the "inflated extents intersect" graph. Each
/// cluster lists box indices in ascending order; clusters are ordered by
/// their smallest index.
pub fn cluster_boxes(boxes: &[BBox], inflation: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let grown: Vec<BBox> = boxes.iter().map(|b| b.inflated(inflation)).collect();
    for i in 0..n {
        for j in i + 1..n {
            if grown[i].intersects(&grown[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[root]].push(i);
    }
    clusters
}

fn crop_for_cluster(
    frame: &Frame,
    motion: Option<&BinaryMask>,
    boxes: &[BBox],
    members: &[usize],
    margin: f64,
) -> Option<Crop> {
    let ext = members
        .iter()
        .map(|&i| boxes[i])
        .reduce(|a, b| a.union(&b))?;
    let (w, h) = frame.dims();
    let x0 = (ext.x0() - margin).floor().max(0.0) as usize;
    let y0 = (ext.y0() - margin).floor().max(0.0) as usize;
    let x1 = ((ext.x1() + margin).ceil().max(0.0) as usize).min(w);
    let y1 = ((ext.y1() + margin).ceil().max(0.0) as usize).min(h);
    if x1 <= x0 + 2 || y1 <= y0 + 2 {
        return None;
    }
    let patch = frame.sub_image(x0, y0, x1 - x0, y1 - y0);
    let (pw, ph) = (patch.width() as f64, patch.height() as f64);
    let local: Vec<BBox> = members
        .iter()
        .filter_map(|&i| {
            let b = boxes[i].translated(-(x0 as f64), -(y0 as f64));
            let c = BBox::from_corners(b.x0().max(0.0), b.y0().max(0.0), b.x1().min(pw), b.y1().min(ph), b.score);
            (c.w > 0.0 && c.h > 0.0).then_some(c)
        })
        .collect();
    if local.is_empty() {
        return None;
    }
    let center = Point::new(x0 as f64 + pw / 2.0, y0 as f64 + ph / 2.0);
    let motion = motion.map(|m| BinaryMask::from_fn(x1 - x0, y1 - y0, |x, y| m.get(x0 + x, y0 + y)));
    Some(Crop {
        patch,
        origin: (x0, y0),
        boxes: local,
        source_center_polar: to_polar(center, frame.center()),
        motion,
    })
}

/// One crop per adjacency cluster of `overlap_boxes`, each the union extent
/// of its cluster grown by the margin and clipped to the frame.
pub fn extract_crops(
    frame: &Frame,
    overlap_boxes: &[BBox],
    motion: Option<&BinaryMask>,
    p: &AugmentParams,
) -> Vec<Crop> {
    cluster_boxes(overlap_boxes, p.adjacency_inflation)
        .iter()
        .filter_map(|members| crop_for_cluster(frame, motion, overlap_boxes, members, p.crop_margin))
        .collect()
}

/// Rotation by `angle` and uniform scale about `from`, followed by a
/// translation that moves `from` onto `to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub angle: f64,
    pub from: Point,
    pub to: Point,
}

impl Similarity {
    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        let dx = p.x - self.from.x;
        let dy = p.y - self.from.y;
        Point::new(
            self.to.x + self.scale * (c * dx - s * dy),
            self.to.y + self.scale * (s * dx + c * dy),
        )
    }

    pub fn inverse(&self) -> Similarity {
        Similarity {
            scale: 1.0 / self.scale,
            angle: -self.angle,
            from: self.to,
            to: self.from,
        }
    }

    /// Transforms the four corners and encloses them, keeping the score.
    pub fn transform_box(&self, b: &BBox) -> Result<BBox> {
        let pts: Vec<Point> = b.corners().iter().map(|&c| self.apply(c)).collect();
        Ok(enclosing_axis_aligned(&pts)?.with_score(b.score))
    }
}

/// A transformed crop ready to paste: `frame` covers the rectangle starting
/// at `origin` in target coordinates; `valid` marks pixels that sampled the
/// source patch.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpedPatch {
    pub frame: Frame,
    pub valid: BinaryMask,
    pub origin: (usize, usize),
    pub motion: Option<BinaryMask>,
    pub boxes: Vec<BBox>,
    pub transform: Similarity,
}

/// The similarity that moves a crop onto `anchor`: scaled by the polar
/// rescale factor and rotated by the polar angle difference, with the crop
/// center landing on the anchor.
pub fn crop_similarity(crop: &Crop, anchor: Point, p: &AugmentParams, frame_center: Point) -> Similarity {
    let target = to_polar(anchor, frame_center);
    let src = crop.source_center_polar;
    Similarity {
        scale: scale_factor(src.rho, target.rho, p),
        angle: target.theta - src.theta,
        from: crop.center_in_patch(),
        to: anchor,
    }
}

/// Warps `crop` so its center lands on `anchor`. Fails with
/// [`Error::PatchOutsideFrame`] when any part would leave a frame of
/// `frame_dims`.
pub fn transform_crop(
    crop: &Crop,
    anchor: Point,
    p: &AugmentParams,
    frame_center: Point,
    frame_dims: (usize, usize),
) -> Result<WarpedPatch> {
    let sim = crop_similarity(crop, anchor, p, frame_center);
    warp_with(crop, sim, frame_dims)
}

pub fn warp_with(crop: &Crop, sim: Similarity, frame_dims: (usize, usize)) -> Result<WarpedPatch> {
    let (pw, ph) = (crop.patch.width() as f64, crop.patch.height() as f64);
    let corners = [
        Point::new(0.0, 0.0),
        Point::new(pw, 0.0),
        Point::new(pw, ph),
        Point::new(0.0, ph),
    ]
    .map(|c| sim.apply(c));
    let ext = enclosing_axis_aligned(&corners)?;
    if ext.x0() < 0.0 || ext.y0() < 0.0 || ext.x1() > frame_dims.0 as f64 || ext.y1() > frame_dims.1 as f64 {
        return Err(Error::PatchOutsideFrame);
    }
    let x0 = ext.x0().floor() as usize;
    let y0 = ext.y0().floor() as usize;
    let x1 = (ext.x1().ceil() as usize).min(frame_dims.0);
    let y1 = (ext.y1().ceil() as usize).min(frame_dims.1);
    let (ow, oh) = (x1 - x0, y1 - y0);
    if ow == 0 || oh == 0 {
        return Err(Error::PatchOutsideFrame);
    }
    let inv = sim.inverse();
    let channels = crop.patch.channels();
    let mut data = vec![0f32; ow * oh * channels];
    let mut valid = BinaryMask::new(ow, oh);
    let mut motion = crop.motion.as_ref().map(|_| BinaryMask::new(ow, oh));
    for y in 0..oh {
        for x in 0..ow {
            let q = inv.apply(Point::new((x0 + x) as f64 + 0.5, (y0 + y) as f64 + 0.5));
            if q.x < 0.0 || q.y < 0.0 || q.x >= pw || q.y >= ph {
                continue;
            }
            valid.set(x, y, true);
            for c in 0..channels {
                data[(y * ow + x) * channels + c] = crop.patch.sample_bilinear(q.x, q.y, c).unwrap_or(0.0);
            }
            if let (Some(out), Some(src)) = (motion.as_mut(), crop.motion.as_ref()) {
                out.set(x, y, src.get(q.x as usize, q.y as usize));
            }
        }
    }
    let frame = Frame::new(ow, oh, channels, data, crop.patch.timestamp, crop.patch.camera)?;
    let boxes = crop
        .boxes
        .iter()
        .map(|b| sim.transform_box(b))
        .collect::<Result<Vec<_>>>()?;
    Ok(WarpedPatch {
        frame,
        valid,
        origin: (x0, y0),
        motion,
        boxes,
        transform: sim,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendReport {
    pub sweeps: usize,
    pub max_residual: f64,
    /// False when the sweep cap was hit before reaching the tolerance.
    pub converged: bool,
}

/// Pixels solved for: valid patch pixels whose four neighbors are valid too
/// and which are not on the frame border.
fn blend_domain(patch: &WarpedPatch, frame_dims: (usize, usize)) -> BinaryMask {
    let (ow, oh) = patch.valid.dims();
    let (ox, oy) = patch.origin;
    BinaryMask::from_fn(ow, oh, |x, y| {
        let (fx, fy) = (ox + x, oy + y);
        x > 0
            && y > 0
            && x + 1 < ow
            && y + 1 < oh
            && fx > 0
            && fy > 0
            && fx + 1 < frame_dims.0
            && fy + 1 < frame_dims.1
            && patch.valid.get(x, y)
            && patch.valid.get(x - 1, y)
            && patch.valid.get(x + 1, y)
            && patch.valid.get(x, y - 1)
            && patch.valid.get(x, y + 1)
    })
}

/// Gradient-domain paste: inside the domain, the output has the patch's
/// Laplacian; on the domain boundary it equals the target. Every pixel
/// outside the domain is left untouched.
pub fn seamless_blend(target: &Frame, patch: &WarpedPatch, params: &BlendParams) -> Result<(Frame, BlendReport)> {
    let mut out = target.clone();
    let report = seamless_blend_into(&mut out, patch, params, |_| {})?;
    Ok((out, report))
}

/// As [`seamless_blend`], writing into `target` in place. `on_sweep` receives
/// the Euclidean residual norm after each sweep.
pub fn seamless_blend_into(
    target: &mut Frame,
    patch: &WarpedPatch,
    params: &BlendParams,
    mut on_sweep: impl FnMut(f64),
) -> Result<BlendReport> {
    if target.channels() != patch.frame.channels() {
        return Err(Error::invalid("patch and target channel counts differ"));
    }
    let domain = blend_domain(patch, target.dims());
    let (ow, oh) = domain.dims();
    let (ox, oy) = patch.origin;
    let tw = target.width();
    let channels = target.channels();
    let idx: Vec<usize> = domain.iter_true().collect();
    if idx.is_empty() {
        return Ok(BlendReport {
            sweeps: 0,
            max_residual: 0.0,
            converged: true,
        });
    }
    let mut report = BlendReport {
        sweeps: 0,
        max_residual: 0.0,
        converged: true,
    };
    let offsets: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    for c in 0..channels {
        let g = |x: usize, y: usize| patch.frame.get(x, y, c) as f64;
        // Work buffer over the patch rectangle, seeded with the target.
        let mut f = vec![0f64; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                f[y * ow + x] = target.get(ox + x, oy + y, c) as f64;
            }
        }
        // Right-hand side: divergence of the guidance field.
        let mut rhs = vec![0f64; idx.len()];
        for (k, &i) in idx.iter().enumerate() {
            let (x, y) = (i % ow, i / ow);
            rhs[k] = offsets
                .iter()
                .map(|&(dx, dy)| g(x, y) - g((x as isize + dx) as usize, (y as isize + dy) as usize))
                .sum();
        }
        // Start from the patch shifted to the mean boundary offset.
        let mut shift = 0.0;
        let mut nb = 0usize;
        for &i in &idx {
            let (x, y) = (i % ow, i / ow);
            for &(dx, dy) in &offsets {
                let (nx, ny) = ((x as isize + dx) as usize, (y as isize + dy) as usize);
                if !domain.get(nx, ny) {
                    shift += f[ny * ow + nx] - g(nx, ny);
                    nb += 1;
                }
            }
        }
        let shift = if nb > 0 { shift / nb as f64 } else { 0.0 };
        for &i in &idx {
            f[i] = g(i % ow, i / ow) + shift;
        }

        let residual = |f: &[f64]| -> (f64, f64) {
            let (mut max, mut sq) = (0f64, 0f64);
            for (k, &i) in idx.iter().enumerate() {
                let r = rhs[k] - (4.0 * f[i] - f[i - 1] - f[i + 1] - f[i - ow] - f[i + ow]);
                max = max.max(r.abs());
                sq += r * r;
            }
            (max, sq.sqrt())
        };

        let (mut max_r, _) = residual(&f);
        let mut sweeps = 0;
        while max_r >= params.tolerance && sweeps < params.max_sweeps {
            for (k, &i) in idx.iter().enumerate() {
                let gs = (rhs[k] + f[i - 1] + f[i + 1] + f[i - ow] + f[i + ow]) / 4.0;
                f[i] += params.omega * (gs - f[i]);
            }
            sweeps += 1;
            let (m, norm) = residual(&f);
            max_r = m;
            on_sweep(norm);
        }
        report.sweeps = report.sweeps.max(sweeps);
        report.max_residual = report.max_residual.max(max_r);
        report.converged &= max_r < params.tolerance;
        for &i in &idx {
            let (x, y) = (i % ow, i / ow);
            let _ = tw;
            target.set(ox + x, oy + y, c, f[i] as f32);
        }
    }
    if !report.converged {
        log::warn!(
            "seamless blend stopped after {} sweeps with residual {:.2e}",
            report.sweeps,
            report.max_residual
        );
    }
    Ok(report)
}

/// Pixels eligible as paste anchors: the student-only region restricted to
/// the field polygon (the whole student-only region when no polygon is set).
pub fn anchor_region(partition: &RegionPartition, field_polygon: &[Point]) -> BinaryMask {
    let outside = partition.outside();
    if field_polygon.len() < 3 {
        return outside;
    }
    let (w, h) = outside.dims();
    let field = BinaryMask::from_fn(w, h, |x, y| {
        point_in_polygon(Point::new(x as f64 + 0.5, y as f64 + 0.5), field_polygon)
    });
    outside.and(&field).expect("same dimensions")
}

/// Even-odd rule.
pub fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Applies the augmentation to one frame with a fixed anchor region.
#[derive(Clone, Debug)]
pub struct Augmenter {
    params: AugmentParams,
    region: BinaryMask,
    anchors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedFrame {
    pub frame: Frame,
    pub boxes: Vec<BBox>,
    /// Union of the raw motion bits carried by every paste.
    pub motion: Option<BinaryMask>,
}

impl Augmenter {
    pub fn new(params: AugmentParams, anchor_region: BinaryMask) -> Result<Self> {
        params.validate()?;
        let anchors = anchor_region.iter_true().collect();
        Ok(Self {
            params,
            region: anchor_region,
            anchors,
        })
    }

    pub fn for_partition(params: AugmentParams, partition: &RegionPartition) -> Result<Self> {
        let region = anchor_region(partition, &params.field_polygon);
        Self::new(params, region)
    }

    pub fn params(&self) -> &AugmentParams {
        &self.params
    }

    pub fn anchor_region(&self) -> &BinaryMask {
        &self.region
    }

    /// Cuts crops around `overlap_boxes`, pastes `crops_per_frame` of them at
    /// random anchors, and returns the artificial boxes (score 1). With no
    /// boxes or no anchors the frame is returned unchanged.
    pub fn augment_frame<R: Rng + ?Sized>(
        &self,
        frame: &Frame,
        overlap_boxes: &[BBox],
        motion: Option<&BinaryMask>,
        rng: &mut R,
    ) -> Result<AugmentedFrame> {
        let mut out = AugmentedFrame {
            frame: frame.clone(),
            boxes: Vec::new(),
            motion: motion.map(|m| BinaryMask::new(m.width(), m.height())),
        };
        if self.params.crops_per_frame == 0 || self.anchors.is_empty() {
            return Ok(out);
        }
        let crops = extract_crops(frame, overlap_boxes, motion, &self.params);
        if crops.is_empty() {
            return Ok(out);
        }
        let center = frame.center();
        let w = frame.width();
        for _ in 0..self.params.crops_per_frame {
            let crop = &crops[rng.random_range(0..crops.len())];
            for _ in 0..self.params.max_anchor_retries.max(1) {
                let a = self.anchors[rng.random_range(0..self.anchors.len())];
                let anchor = Point::new((a % w) as f64 + 0.5, (a / w) as f64 + 0.5);
                let warped = match transform_crop(crop, anchor, &self.params, center, frame.dims()) {
                    Ok(wp) => wp,
                    Err(Error::PatchOutsideFrame) | Err(Error::DegenerateBox) => continue,
                    Err(e) => return Err(e),
                };
                if !warped.boxes.iter().all(|b| self.region.contains_point(b.center())) {
                    continue;
                }
                seamless_blend_into(&mut out.frame, &warped, &self.params.blend, |_| {})?;
                if let (Some(dst), Some(src)) = (out.motion.as_mut(), warped.motion.as_ref()) {
                    let (ox, oy) = warped.origin;
                    for i in src.iter_true() {
                        let (x, y) = (i % src.width(), i / src.width());
                        dst.set(ox + x, oy + y, true);
                    }
                }
                out.boxes.extend(warped.boxes.iter().map(|b| b.with_score(1.0)));
                break;
            }
        }
        Ok(out)
    }
}
