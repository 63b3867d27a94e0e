//! Frame sources (live simulator or a recording on disk), the recording
//! layout, and evaluation summaries of finished runs.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::distill::{DetectionRecord, FrameSource, LatencyStats, LearnerOutput, LearnerSpec, Setup, SourceFrame};
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, counting_series, restrict, rolling_window_ap, tiou_grid, tiou_sweep, CountingSeries, EvalConfig,
    EvalFrame,
};
use crate::geometry::{FisheyeModel, Homography, Registration};
use crate::imageio::{read_frame, read_jsonl, write_frame, write_jsonl};
use crate::sim::{teacher_oracle, Simulator, TeacherNoise};
use crate::supervise::GateMode;
use crate::types::{BBox, BinaryMask, CameraId, Point, RegionPartition};

/// Streams frames straight from the simulator with teacher boxes from the
/// noisy oracle. Teacher images are not rendered.
pub struct SimSource {
    sim: Simulator,
    remaining: usize,
    noise: TeacherNoise,
    rng: ChaCha8Rng,
}

impl SimSource {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let mut sim = Simulator::new(cfg.sim.world.clone(), cfg.distill.fps)?;
        sim.set_render_teacher(false);
        Ok(Self {
            sim,
            remaining: (cfg.sim.duration * cfg.distill.fps).round() as usize,
            noise: cfg.sim.teacher_noise,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EAC_4E55),
        })
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn setup(&self) -> Result<Setup> {
        sim_setup(&self.sim)
    }
}

pub fn sim_setup(sim: &Simulator) -> Result<Setup> {
    Ok(Setup {
        registration: sim.registration(),
        partition: sim.region_partition()?,
        field_polygon: sim.field_polygon(),
    })
}

impl FrameSource for SimSource {
    fn next_frame(&mut self) -> Option<Result<SourceFrame>> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let f = self.sim.step();
        let teacher = teacher_oracle(&f.gt, &self.noise, &mut self.rng);
        Some(Ok(SourceFrame {
            t: f.gt.t,
            gt: Some(f.gt.student_boxes()),
            teacher_boxes: Some(teacher),
            student: f.student,
        }))
    }
}

/// Camera-pair geometry as stored next to a recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryFile {
    /// Row-major teacher-to-student homography.
    pub homography: Homography,
    #[serde(default)]
    pub student_lens: Option<FisheyeModel>,
    pub teacher_size: (usize, usize),
    pub student_size: (usize, usize),
    #[serde(default)]
    pub field_polygon: Vec<Point>,
}

impl GeometryFile {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn registration(&self) -> Registration {
        Registration::new(self.homography, self.student_lens)
    }

    pub fn setup(&self) -> Result<Setup> {
        let registration = self.registration();
        Ok(Setup {
            partition: registration.region_partition(self.teacher_size, self.student_size)?,
            registration,
            field_polygon: self.field_polygon.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fps: f64,
    pub frames: usize,
}

pub const MANIFEST: &str = "manifest.json";
pub const GEOMETRY: &str = "homography.json";
pub const TEACHER_BOXES: &str = "teacher.jsonl";
pub const GROUND_TRUTH: &str = "gt.jsonl";

fn frame_path(dir: &Path, camera: &str, k: usize) -> PathBuf {
    dir.join(camera).join(format!("{k:06}.png"))
}

/// Renders a recording: both views as PNG, teacher oracle boxes, student
/// ground truth, geometry and manifest.
pub fn write_recording(cfg: &RunConfig, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("student"))?;
    std::fs::create_dir_all(dir.join("teacher"))?;
    let fps = cfg.distill.fps;
    let mut sim = Simulator::new(cfg.sim.world.clone(), fps)?;
    let geometry = GeometryFile {
        homography: sim.true_homography(),
        student_lens: sim.registration().student_lens,
        teacher_size: sim.teacher_size(),
        student_size: sim.student_size(),
        field_polygon: sim.field_polygon(),
    };
    geometry.save(&dir.join(GEOMETRY))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EAC_4E55);
    let n = (cfg.sim.duration * fps).round() as usize;
    let mut teacher = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    for k in 0..n {
        let f = sim.step();
        write_frame(&frame_path(dir, "student", k), &f.student)?;
        write_frame(&frame_path(dir, "teacher", k), &f.teacher)?;
        teacher.push(DetectionRecord {
            t: f.gt.t,
            boxes: teacher_oracle(&f.gt, &cfg.sim.teacher_noise, &mut rng),
        });
        gt.push(DetectionRecord {
            t: f.gt.t,
            boxes: f.gt.student_boxes(),
        });
    }
    write_jsonl(&dir.join(TEACHER_BOXES), &teacher)?;
    write_jsonl(&dir.join(GROUND_TRUTH), &gt)?;
    let manifest = Manifest { fps, frames: n };
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(manifest)
}

/// Assigns timestamped records to frame indices. A record more than half a
/// frame away from every index, or two records on one frame, is a
/// desynchronization.
pub fn index_records(records: Vec<DetectionRecord>, fps: f64, frames: usize) -> Result<Vec<Option<Vec<BBox>>>> {
    let mut out = vec![None; frames];
    for r in records {
        let k = (r.t * fps).round();
        if (r.t * fps - k).abs() > 0.5 - 1e-9 || k < 0.0 || k as usize >= frames {
            return Err(Error::Desync(format!("record at t={} matches no frame", r.t)));
        }
        let slot = &mut out[k as usize];
        if slot.is_some() {
            return Err(Error::Desync(format!("two records for frame {k}")));
        }
        *slot = Some(r.boxes);
    }
    Ok(out)
}

/// Replays a recording written by [`write_recording`].
pub struct DirSource {
    dir: PathBuf,
    fps: f64,
    frames: usize,
    next: usize,
    teacher: Vec<Option<Vec<BBox>>>,
    gt: Vec<Option<Vec<BBox>>>,
}

impl DirSource {
    pub fn open(dir: &Path, fps: f64) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
        if (manifest.fps - fps).abs() > 1e-9 {
            return Err(Error::Desync(format!("recording is {} fps, config expects {fps}", manifest.fps)));
        }
        let teacher = index_records(read_jsonl(&dir.join(TEACHER_BOXES))?, fps, manifest.frames)?;
        let gt_path = dir.join(GROUND_TRUTH);
        let gt = if gt_path.exists() {
            index_records(read_jsonl(&gt_path)?, fps, manifest.frames)?
        } else {
            vec![None; manifest.frames]
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            fps,
            frames: manifest.frames,
            next: 0,
            teacher,
            gt,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
}

impl FrameSource for DirSource {
    fn next_frame(&mut self) -> Option<Result<SourceFrame>> {
        if self.next >= self.frames {
            return None;
        }
        let k = self.next;
        self.next += 1;
        let t = k as f64 / self.fps;
        let path = frame_path(&self.dir, "student", k);
        Some(read_frame(&path, t, CameraId::Student).map(|student| SourceFrame {
            t,
            student,
            teacher_boxes: self.teacher[k].take(),
            gt: self.gt[k].take(),
        }))
    }
}

/// The six ablation cells: augmentation on/off crossed with the gates.
pub fn ablation_specs(cfg: &RunConfig) -> Vec<LearnerSpec> {
    let mut specs = Vec::new();
    for aug in [true, false] {
        for gate in [GateMode::Motion, GateMode::None, GateMode::All] {
            let mut s = LearnerSpec::from_config(cfg, &format!("aug_{}_gate_{gate}", if aug { "on" } else { "off" }));
            s.augment.enabled = aug;
            s.gate = gate;
            specs.push(s);
        }
    }
    specs
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionAps {
    pub overall: Option<f64>,
    pub overlap: Option<f64>,
    pub outside: Option<f64>,
}

impl RegionAps {
    fn of(frames: &[EvalFrame], partition: &RegionPartition, tiou: f64) -> Self {
        let outside = partition.outside();
        Self {
            overall: average_precision(frames, tiou).ok(),
            overlap: average_precision(&restrict(frames, partition.overlap()), tiou).ok(),
            outside: average_precision(&restrict(frames, &outside), tiou).ok(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    /// AP over the final window.
    pub final_ap: RegionAps,
    /// Same, without the inference-time motion filter.
    pub final_ap_raw: RegionAps,
    pub series_overall: Vec<(f64, f64)>,
    pub series_overlap: Vec<(f64, f64)>,
    pub series_outside: Vec<(f64, f64)>,
    /// Over the final window.
    pub tiou_sweep: Vec<(f64, f64)>,
    pub counting: CountingSeries,
    /// Counting RMSE restricted to the final window.
    pub counting_rmse_final: Option<f64>,
    /// Unfiltered detections centered in OUTSIDE over the final window.
    pub raw_outside_detections: usize,
    /// Ground-truth players centered in OUTSIDE over the same frames.
    pub gt_outside: usize,
    pub swaps: usize,
    pub latency: LatencyStats,
}

fn centered_in(boxes: &[BBox], region: &BinaryMask) -> usize {
    boxes.iter().filter(|b| region.contains_point(b.center())).count()
}

/// AP series, final-window metrics and counting for one finished run of
/// `duration` seconds.
pub fn summarize(out: &LearnerOutput, partition: &RegionPartition, cfg: &EvalConfig, duration: f64) -> RunSummary {
    let post: Vec<EvalFrame> = out
        .annotated
        .iter()
        .map(|r| EvalFrame {
            t: r.t,
            preds: r.post.clone(),
            gts: r.gt.clone(),
        })
        .collect();
    let raw: Vec<EvalFrame> = out
        .annotated
        .iter()
        .map(|r| EvalFrame {
            t: r.t,
            preds: r.raw.clone(),
            gts: r.gt.clone(),
        })
        .collect();
    let mut s = evaluate_frames(&post, &out.counts, &out.gt_counts, partition, cfg, duration);
    let start = duration - cfg.window;
    let final_raw: Vec<EvalFrame> = raw.into_iter().filter(|f| f.t >= start - 1e-9).collect();
    s.final_ap_raw = RegionAps::of(&final_raw, partition, cfg.tiou);
    let outside = partition.outside();
    s.raw_outside_detections = out
        .annotated
        .iter()
        .filter(|r| r.t >= start - 1e-9)
        .map(|r| centered_in(&r.raw, &outside))
        .sum();
    s.name = out.name.clone();
    s.swaps = out.swaps.len();
    s.latency = out.latency;
    s
}

/// Metrics from annotated frames and per-frame counts alone.
pub fn evaluate_frames(
    frames: &[EvalFrame],
    counts: &[(f64, usize)],
    gt_counts: &[(f64, usize)],
    partition: &RegionPartition,
    cfg: &EvalConfig,
    duration: f64,
) -> RunSummary {
    let start = duration - cfg.window;
    let last: Vec<EvalFrame> = frames.iter().filter(|f| f.t >= start - 1e-9).cloned().collect();
    let outside = partition.outside();
    let counting = counting_series(counts, gt_counts, cfg);
    let final_gt: Vec<(f64, usize)> = gt_counts.iter().filter(|g| g.0 >= start - 1e-9).copied().collect();
    RunSummary {
        final_ap: RegionAps::of(&last, partition, cfg.tiou),
        series_overall: rolling_window_ap(frames, 0.0, duration, cfg, None),
        series_overlap: rolling_window_ap(frames, 0.0, duration, cfg, Some(partition.overlap())),
        series_outside: rolling_window_ap(frames, 0.0, duration, cfg, Some(&outside)),
        tiou_sweep: tiou_sweep(&last, &tiou_grid(cfg.tiou_steps)).unwrap_or_default(),
        counting_rmse_final: counting_series(counts, &final_gt, cfg).rmse,
        counting,
        gt_outside: last.iter().map(|f| centered_in(&f.gts, &outside)).sum(),
        ..RunSummary::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: f64) -> DetectionRecord {
        DetectionRecord { t, boxes: vec![] }
    }

    #[test]
    fn records_snap_to_the_nearest_frame() {
        let idx = index_records(vec![rec(0.0), rec(0.26), rec(0.4)], 4.0, 3).unwrap();
        assert_eq!(idx.iter().map(Option::is_some).collect::<Vec<_>>(), [true, true, true]);
        assert!(index_records(vec![rec(0.125)], 4.0, 3).is_err());
        assert!(index_records(vec![rec(0.8)], 4.0, 3).is_err());
        assert!(index_records(vec![rec(0.25), rec(0.3)], 4.0, 3).is_err());
    }
}
