//! Student detectors: a motion-blob baseline and a trainable per-cell grid.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervise::{classify_batch, labeled_loss, LabeledPrediction, LossBreakdown, LossParams, SupervisionTarget};
use crate::types::{BBox, BinaryMask, Frame};

/// What a detector sees for one frame: the image and its raw motion mask.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub frame: &'a Frame,
    pub motion: &'a BinaryMask,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a> {
    pub obs: Observation<'a>,
    pub target: &'a SupervisionTarget,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Loss before the update.
    pub loss: LossBreakdown,
    /// True when the gradient was not finite and no update was made.
    pub skipped: bool,
}

/// Immutable serialized weights, cheap to clone and send between threads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightBlob(Arc<Vec<u8>>);

impl WeightBlob {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self(Arc::new(bytes))
    }

    pub fn bytes(&self) -> &[u8] {
        &self.0
    }
}

pub trait Detector: Send {
    fn predict(&self, obs: &Observation<'_>) -> Result<Vec<BBox>>;
    fn snapshot_weights(&self) -> WeightBlob;
    fn load_weights(&mut self, blob: &WeightBlob) -> Result<()>;
    fn train_step(&mut self, batch: &[TrainSample<'_>], lr: f64) -> Result<TrainReport>;

    /// `(grid, min_blob_area, max_blob_area)` when predictions depend on the
    /// frame only through [`CellFeatures`], so callers may share them.
    fn feature_spec(&self) -> Option<(usize, usize, usize)> {
        None
    }

    fn predict_from_features(&self, _feats: &CellFeatures) -> Option<Vec<BBox>> {
        None
    }
}

/// An 8-connected component of a mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub area: usize,
    pub x0: usize,
    pub y0: usize,
    /// Exclusive.
    pub x1: usize,
    pub y1: usize,
}

impl Component {
    pub fn bbox(&self) -> BBox {
        BBox::from_corners(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64, 1.0)
    }
}

/// Two-pass labeling with union-find; components come out in raster order
/// of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];
    fn find(parent: &mut [u32], mut i: u32) -> u32 {
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }
    for i in mask.iter_true() {
        let (x, y) = (i % w, i / w);
        let mut best = 0u32;
        let mut neigh = [0u32; 4];
        let mut n = 0;
        if x > 0 && labels[i - 1] != 0 {
            neigh[n] = labels[i - 1];
            n += 1;
        }
        if y > 0 {
            let up = i - w;
            if x > 0 && labels[up - 1] != 0 {
                neigh[n] = labels[up - 1];
                n += 1;
            }
            if labels[up] != 0 {
                neigh[n] = labels[up];
                n += 1;
            }
            if x + 1 < w && labels[up + 1] != 0 {
                neigh[n] = labels[up + 1];
                n += 1;
            }
        }
        for &l in &neigh[..n] {
            let r = find(&mut parent, l);
            if best == 0 || r < best {
                best = r;
            }
        }
        if best == 0 {
            best = parent.len() as u32;
            parent.push(best);
        } else {
            for &l in &neigh[..n] {
                let r = find(&mut parent, l);
                if r != best {
                    parent[r as usize] = best;
                }
            }
        }
        labels[i] = best;
    }
    let mut slot = vec![usize::MAX; parent.len()];
    let mut comps: Vec<Component> = Vec::new();
    for i in mask.iter_true() {
        let (x, y) = (i % w, i / w);
        let l = labels[i];
        let r = find(&mut parent, l) as usize;
        if slot[r] == usize::MAX {
            slot[r] = comps.len();
            comps.push(Component {
                area: 0,
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            });
        }
        let c = &mut comps[slot[r]];
        c.area += 1;
        c.x0 = c.x0.min(x);
        c.x1 = c.x1.max(x + 1);
        c.y1 = c.y1.max(y + 1);
    }
    comps
}

/// Set bits among columns `x0..x1` of a row in [`BinaryMask::row_bits`] layout.
fn count_bits(bits: &[u64], x0: usize, x1: usize) -> usize {
    let mut n = 0;
    let mut x = x0;
    while x < x1 {
        let (q, s) = (x / 64, x % 64);
        let take = (64 - s).min(x1 - x);
        let m = if take == 64 { !0u64 } else { ((1u64 << take) - 1) << s };
        n += (bits[q] & m).count_ones() as usize;
        x += take;
    }
    n
}

/// Enclosing boxes of raw-mask components whose pixel count lies in
/// `[min_area, max_area]`.
pub fn blob_detect(raw: &BinaryMask, min_area: usize, max_area: usize) -> Vec<BBox> {
    connected_components(raw)
        .into_iter()
        .filter(|c| c.area >= min_area && c.area <= max_area)
        .map(|c| c.bbox())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentKind {
    Blob,
    #[default]
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentParams {
    pub kind: StudentKind,
    pub grid: usize,
    pub emission_threshold: f64,
    pub min_blob_area: usize,
    pub max_blob_area: usize,
    pub nms_iou: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Step size of the box outputs relative to the score output.
    pub box_lr_scale: f64,
    pub loss: LossParams,
}

impl Default for StudentParams {
    fn default() -> Self {
        Self {
            kind: StudentKind::Grid,
            grid: 40,
            emission_threshold: 0.1,
            min_blob_area: 4,
            max_blob_area: 4000,
            nms_iou: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            box_lr_scale: 0.05,
            loss: LossParams::default(),
        }
    }
}

impl StudentParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0
            || !(0.0..1.0).contains(&self.emission_threshold)
            || self.min_blob_area > self.max_blob_area
            || !(self.box_lr_scale >= 0.0)
        {
            return Err(Error::invalid("student requires grid > 0, threshold in [0,1), min area <= max area"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Detector>> {
        self.validate()?;
        Ok(match self.kind {
            StudentKind::Blob => Box::new(BlobDetector {
                min_area: self.min_blob_area,
                max_area: self.max_blob_area,
            }),
            StudentKind::Grid => Box::new(GridDetector::new(self.clone())?),
        })
    }
}

/// Non-learned baseline: every motion blob is a player.
#[derive(Clone, Debug)]
pub struct BlobDetector {
    pub min_area: usize,
    pub max_area: usize,
}

impl Detector for BlobDetector {
    fn predict(&self, obs: &Observation<'_>) -> Result<Vec<BBox>> {
        Ok(blob_detect(obs.motion, self.min_area, self.max_area))
    }

    fn snapshot_weights(&self) -> WeightBlob {
        WeightBlob::new(Vec::new())
    }

    fn load_weights(&mut self, blob: &WeightBlob) -> Result<()> {
        if blob.bytes().is_empty() {
            Ok(())
        } else {
            Err(Error::format("blob detector has no weights"))
        }
    }

    fn train_step(&mut self, _batch: &[TrainSample<'_>], _lr: f64) -> Result<TrainReport> {
        Ok(TrainReport::default())
    }
}

/// Per-cell inputs, in order.
pub const FEATURE_NAMES: [&str; 10] = [
    "bias",
    "motion_density",
    "mean_intensity",
    "std_intensity",
    "radial_position",
    "blob_present",
    "blob_dx",
    "blob_dy",
    "blob_log_w",
    "blob_log_h",
];
pub const NUM_FEATURES: usize = FEATURE_NAMES.len();
/// Score logit, dx, dy, log w, log h.
pub const NUM_OUTPUTS: usize = 5;

/// Cell features for one frame, `g*g` rows of [`NUM_FEATURES`].
#[derive(Clone, Debug, PartialEq)]
pub struct CellFeatures {
    pub g: usize,
    pub cell_w: f64,
    pub cell_h: f64,
    pub values: Vec<f64>,
}

impl CellFeatures {
    pub fn row(&self, cell: usize) -> &[f64] {
        &self.values[cell * NUM_FEATURES..(cell + 1) * NUM_FEATURES]
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = (cell % self.g, cell / self.g);
        ((i as f64 + 0.5) * self.cell_w, (j as f64 + 0.5) * self.cell_h)
    }

    pub fn compute(obs: &Observation<'_>, g: usize, min_blob_area: usize, max_blob_area: usize) -> Result<Self> {
        let frame = obs.frame;
        let (w, h) = frame.dims();
        if obs.motion.dims() != (w, h) {
            return Err(Error::DimensionMismatch {
                expected: (w, h),
                got: obs.motion.dims(),
            });
        }
        if w < g || h < g {
            return Err(Error::invalid(format!("frame {w}x{h} smaller than a {g}x{g} grid")));
        }
        let cell_w = w as f64 / g as f64;
        let cell_h = h as f64 / g as f64;
        let n = g * g;
        let mut sum = vec![0f64; n];
        let mut sq = vec![0f64; n];
        let mut moving = vec![0usize; n];
        let mut count = vec![0usize; n];
        // Cell column i spans pixel columns cols[i]..cols[i + 1].
        let mut cols = vec![0usize; g + 1];
        for x in 0..w {
            cols[(x * g / w).min(g - 1) + 1] = x + 1;
        }
        let c = frame.channels();
        let data = frame.data();
        let mut bits = vec![0u64; w.div_ceil(64)];
        for y in 0..h {
            let row_cell = (y * g / h).min(g - 1) * g;
            obs.motion.row_bits(y, &mut bits);
            for i in 0..g {
                let k = row_cell + i;
                let (x0, x1) = (cols[i], cols[i + 1]);
                let (mut s, mut q) = (sum[k], sq[k]);
                if c == 1 {
                    for &v in &data[y * w + x0..y * w + x1] {
                        let v = v as f64;
                        s += v;
                        q += v * v;
                    }
                } else {
                    for px in data[(y * w + x0) * c..(y * w + x1) * c].chunks_exact(c) {
                        let v = px.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                        s += v;
                        q += v * v;
                    }
                }
                sum[k] = s;
                sq[k] = q;
                count[k] += x1 - x0;
                moving[k] += count_bits(&bits, x0, x1);
            }
        }
        let mut values = vec![0f64; n * NUM_FEATURES];
        let half = 0.5 * (w.min(h) as f64);
        let (fcx, fcy) = (w as f64 / 2.0, h as f64 / 2.0);
        for k in 0..n {
            let cnt = count[k].max(1) as f64;
            let mean = sum[k] / cnt;
            let var = (sq[k] / cnt - mean * mean).max(0.0);
            let (i, j) = (k % g, k / g);
            let (ccx, ccy) = ((i as f64 + 0.5) * cell_w, (j as f64 + 0.5) * cell_h);
            let row = &mut values[k * NUM_FEATURES..(k + 1) * NUM_FEATURES];
            row[0] = 1.0;
            row[1] = moving[k] as f64 / cnt;
            row[2] = mean;
            row[3] = var.sqrt();
            row[4] = ((ccx - fcx).hypot(ccy - fcy)) / half;
        }
        // Largest blob centered in each cell.
        let mut best_area = vec![0usize; n];
        for comp in connected_components(obs.motion) {
            if comp.area < min_blob_area || comp.area > max_blob_area {
                continue;
            }
            let b = comp.bbox();
            let i = ((b.cx / cell_w) as usize).min(g - 1);
            let j = ((b.cy / cell_h) as usize).min(g - 1);
            let k = j * g + i;
            if comp.area <= best_area[k] {
                continue;
            }
            best_area[k] = comp.area;
            let (ccx, ccy) = ((i as f64 + 0.5) * cell_w, (j as f64 + 0.5) * cell_h);
            let row = &mut values[k * NUM_FEATURES..(k + 1) * NUM_FEATURES];
            row[5] = 1.0;
            row[6] = (b.cx - ccx) / cell_w;
            row[7] = (b.cy - ccy) / cell_h;
            row[8] = (b.w / cell_w).ln();
            row[9] = (b.h / cell_h).ln();
        }
        Ok(Self {
            g,
            cell_w,
            cell_h,
            values,
        })
    }
}

const WEIGHT_MAGIC: &[u8; 4] = b"ODGW";
const WEIGHT_VERSION: u32 = 1;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Linear map per cell from [`CellFeatures`] to (score logit, dx, dy, log w,
/// log h), all offsets and sizes in cell units.
#[derive(Clone, Debug)]
pub struct GridDetector {
    params: StudentParams,
    weights: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
}

impl GridDetector {
    /// Scores start at 0.5 everywhere and each cell's box is the blob box it
    /// contains (or the cell itself when it has none).
    pub fn new(params: StudentParams) -> Result<Self> {
        params.validate()?;
        let n = params.grid * params.grid * NUM_OUTPUTS * NUM_FEATURES;
        let mut weights = vec![0f64; n];
        for cell in 0..params.grid * params.grid {
            for (out, feat) in [(1, 6), (2, 7), (3, 8), (4, 9)] {
                weights[(cell * NUM_OUTPUTS + out) * NUM_FEATURES + feat] = 1.0;
            }
        }
        Ok(Self {
            params,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
            weights,
        })
    }

    pub fn params(&self) -> &StudentParams {
        &self.params
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn features(&self, obs: &Observation<'_>) -> Result<CellFeatures> {
        CellFeatures::compute(obs, self.params.grid, self.params.min_blob_area, self.params.max_blob_area)
    }

    fn outputs(&self, feats: &CellFeatures, cell: usize) -> [f64; NUM_OUTPUTS] {
        let f = feats.row(cell);
        let mut o = [0f64; NUM_OUTPUTS];
        for (k, ok) in o.iter_mut().enumerate() {
            let w = &self.weights[(cell * NUM_OUTPUTS + k) * NUM_FEATURES..(cell * NUM_OUTPUTS + k + 1) * NUM_FEATURES];
            *ok = w.iter().zip(f).map(|(a, b)| a * b).sum();
        }
        o
    }

    fn decode(&self, feats: &CellFeatures, cell: usize, o: &[f64; NUM_OUTPUTS]) -> BBox {
        let (ccx, ccy) = feats.cell_center(cell);
        BBox::new(
            ccx + feats.cell_w * o[1],
            ccy + feats.cell_h * o[2],
            feats.cell_w * o[3].exp(),
            feats.cell_h * o[4].exp(),
            sigmoid(o[0]),
        )
    }

    fn emit(&self, feats: &CellFeatures) -> Vec<BBox> {
        let t = self.params.emission_threshold;
        (0..feats.g * feats.g)
            .filter_map(|c| {
                let o = self.outputs(feats, c);
                (sigmoid(o[0]) > t).then(|| self.decode(feats, c, &o))
            })
            .collect()
    }

    /// One decoded box per cell, in cell order.
    pub fn predict_all(&self, feats: &CellFeatures) -> Vec<BBox> {
        (0..feats.g * feats.g)
            .map(|c| self.decode(feats, c, &self.outputs(feats, c)))
            .collect()
    }

    /// Loss over every cell of every sample and its gradient with respect
    /// to the weights.
    pub fn loss_and_grad(&self, batch: &[TrainSample<'_>]) -> Result<(LossBreakdown, Vec<f64>)> {
        let cells = self.params.grid * self.params.grid;
        let mut feats = Vec::with_capacity(batch.len());
        let mut outs = Vec::with_capacity(batch.len());
        let mut items = Vec::with_capacity(batch.len() * cells);
        for s in batch {
            let f = self.features(&s.obs)?;
            let o: Vec<[f64; NUM_OUTPUTS]> = (0..cells).map(|c| self.outputs(&f, c)).collect();
            let preds: Vec<BBox> = (0..cells).map(|c| self.decode(&f, c, &o[c])).collect();
            let labels = classify_batch(&preds, s.target, self.params.loss.match_iou);
            items.extend(
                preds
                    .into_iter()
                    .zip(labels)
                    .map(|(pred, label)| LabeledPrediction { pred, label, target: s.target }),
            );
            feats.push(f);
            outs.push(o);
        }
        let (loss, box_grads) = labeled_loss(&items, &self.params.loss, batch.len());
        let mut grad = vec![0f64; self.weights.len()];
        for (b, f) in feats.iter().enumerate() {
            for cell in 0..cells {
                let bg = box_grads[b * cells + cell];
                if bg == Default::default() {
                    continue;
                }
                let p = items[b * cells + cell].pred;
                let s = p.score;
                let d_out = [
                    bg.score * s * (1.0 - s),
                    bg.cx * f.cell_w,
                    bg.cy * f.cell_h,
                    bg.w * p.w,
                    bg.h * p.h,
                ];
                let row = f.row(cell);
                for (k, &d) in d_out.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let base = (cell * NUM_OUTPUTS + k) * NUM_FEATURES;
                    for (g, &x) in grad[base..base + NUM_FEATURES].iter_mut().zip(row) {
                        *g += d * x;
                    }
                }
            }
        }
        let _ = outs;
        Ok((loss, grad))
    }

    fn decode_blob(bytes: &[u8]) -> Result<(usize, Vec<f64>)> {
        if bytes.len() < 16 || &bytes[..4] != WEIGHT_MAGIC {
            return Err(Error::format("not a grid weight blob"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if u(4) != WEIGHT_VERSION as usize {
            return Err(Error::format(format!("unsupported weight version {}", u(4))));
        }
        let (g, nf) = (u(8), u(12));
        if nf != NUM_FEATURES {
            return Err(Error::format(format!("weight blob has {nf} features, expected {NUM_FEATURES}")));
        }
        let n = g * g * NUM_OUTPUTS * nf;
        if bytes.len() != 16 + 8 * n {
            return Err(Error::format("weight blob length mismatch"));
        }
        let w = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((g, w))
    }
}

impl Detector for GridDetector {
    fn predict(&self, obs: &Observation<'_>) -> Result<Vec<BBox>> {
        let feats = self.features(obs)?;
        Ok(self.emit(&feats))
    }

    fn feature_spec(&self) -> Option<(usize, usize, usize)> {
        Some((self.params.grid, self.params.min_blob_area, self.params.max_blob_area))
    }

    fn predict_from_features(&self, feats: &CellFeatures) -> Option<Vec<BBox>> {
        (feats.g == self.params.grid).then(|| self.emit(feats))
    }

    fn snapshot_weights(&self) -> WeightBlob {
        let mut out = Vec::with_capacity(16 + 8 * self.weights.len());
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.grid as u32).to_le_bytes());
        out.extend_from_slice(&(NUM_FEATURES as u32).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        WeightBlob::new(out)
    }

    fn load_weights(&mut self, blob: &WeightBlob) -> Result<()> {
        let (g, w) = Self::decode_blob(blob.bytes())?;
        if g != self.params.grid {
            return Err(Error::format(format!("weight blob grid {g} != detector grid {}", self.params.grid)));
        }
        self.weights = w;
        Ok(())
    }

    fn train_step(&mut self, batch: &[TrainSample<'_>], lr: f64) -> Result<TrainReport> {
        if !(lr >= 0.0) {
            return Err(Error::invalid("learning rate must be >= 0"));
        }
        let (loss, grad) = self.loss_and_grad(batch)?;
        if !grad.iter().all(|g| g.is_finite()) || !loss.total.is_finite() {
            log::warn!("non-finite gradient, update skipped");
            return Ok(TrainReport { loss, skipped: true });
        }
        if lr == 0.0 {
            return Ok(TrainReport { loss, skipped: false });
        }
        let (b1, b2) = (self.params.adam_beta1, self.params.adam_beta2);
        let box_lr = lr * self.params.box_lr_scale;
        self.adam_t += 1;
        let c1 = 1.0 - b1.powi(self.adam_t as i32);
        let c2 = 1.0 - b2.powi(self.adam_t as i32);
        for (i, &g) in grad.iter().enumerate() {
            if g == 0.0 && self.adam_m[i] == 0.0 {
                continue;
            }
            let is_score = (i / NUM_FEATURES).is_multiple_of(NUM_OUTPUTS);
            self.adam_m[i] = b1 * self.adam_m[i] + (1.0 - b1) * g;
            self.adam_v[i] = b2 * self.adam_v[i] + (1.0 - b2) * g * g;
            let m = self.adam_m[i] / c1;
            let v = self.adam_v[i] / c2;
            let step = if is_score { lr } else { box_lr };
            self.weights[i] -= step * m / (v.sqrt() + 1e-8);
        }
        Ok(TrainReport { loss, skipped: false })
    }
}
