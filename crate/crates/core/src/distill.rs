//! Online distillation: a rolling dataset of teacher-supervised frames, a
//! trainer producing weight snapshots, and an inference loop adopting them.
//!
//! Two clocks drive the trainer. `Replay` runs everything on one thread and
//! charges each epoch a virtual duration proportional to the dataset size,
//! so swaps land on the same frame indices every run. `Wall` runs the trainer
//! on its own thread and hands weights over through a last-value mailbox.

use std::borrow::Cow;
use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentParams, Augmenter};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::Registration;
use crate::motion::{MotionDetector, MotionMasks};
use crate::student::{CellFeatures, Detector, Observation, StudentParams, TrainSample, WeightBlob};
use crate::supervise::{nms, postprocess_inference, target_from_boxes, GateMode, LossBreakdown, SupervisionTarget};
use crate::types::{BBox, BinaryMask, Frame, Point, RegionPartition};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Replay,
    Wall,
}

impl std::str::FromStr for ClockMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replay" => Ok(Self::Replay),
            "wall" => Ok(Self::Wall),
            _ => Err(Error::invalid(format!("unknown clock '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillParams {
    /// Seconds of supervision kept for training.
    pub memory_window: f64,
    /// Seconds between teacher queries.
    pub teacher_period: f64,
    pub fps: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub clock: ClockMode,
    /// Virtual seconds charged per dataset entry per epoch in replay mode.
    pub replay_sample_cost: f64,
    /// Drop predictions centered on static pixels at inference.
    pub postprocess: bool,
    /// Epochs over the whole recording in offline mode.
    pub offline_epochs: usize,
    /// In wall mode, wait for each frame's timestamp before processing it.
    pub realtime: bool,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self {
            memory_window: 300.0,
            teacher_period: 1.0,
            fps: 12.0,
            lr: 0.05,
            batch_size: 8,
            clock: ClockMode::Replay,
            replay_sample_cost: 0.05,
            postprocess: true,
            offline_epochs: 10,
            realtime: false,
        }
    }
}

impl DistillParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.memory_window > 0.0
            && self.teacher_period > 0.0
            && self.fps > 0.0
            && self.lr >= 0.0
            && self.batch_size > 0
            && self.replay_sample_cost > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("distill periods, fps, batch size and sample cost must be positive"))
        }
    }

    /// Frames between teacher queries, at least one.
    pub fn teacher_stride(&self) -> usize {
        ((self.teacher_period * self.fps).round() as usize).max(1)
    }
}

/// One supervised instant. Frame and masks are shared with every snapshot
/// that references them and freed when the last one lets go.
#[derive(Clone, Debug)]
pub struct DatasetEntry {
    pub t: f64,
    pub frame: Arc<Frame>,
    pub masks: Arc<MotionMasks>,
    /// Teacher boxes projected into the student view.
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug)]
pub struct OnlineDataset {
    window: f64,
    entries: VecDeque<Arc<DatasetEntry>>,
}

impl OnlineDataset {
    pub fn new(window: f64) -> Self {
        Self {
            window,
            entries: VecDeque::new(),
        }
    }

    /// Appends an entry and evicts those older than the window relative to
    /// it. Timestamps must strictly increase.
    pub fn push(&mut self, entry: DatasetEntry) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if entry.t <= last.t {
                return Err(Error::OutOfOrder {
                    got: entry.t,
                    newest: last.t,
                });
            }
        }
        let horizon = entry.t - self.window;
        self.entries.push_back(Arc::new(entry));
        while self.entries.front().is_some_and(|e| e.t <= horizon) {
            self.entries.pop_front();
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Arc<DatasetEntry>> {
        self.entries.iter().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn oldest(&self) -> Option<f64> {
        self.entries.front().map(|e| e.t)
    }

    pub fn newest(&self) -> Option<f64> {
        self.entries.back().map(|e| e.t)
    }
}

/// Everything the engine needs to know about the camera pair.
#[derive(Clone, Debug)]
pub struct Setup {
    pub registration: Registration,
    pub partition: RegionPartition,
    /// Anchor polygon used when the augmentation config leaves it empty.
    pub field_polygon: Vec<Point>,
}

/// One synchronized input: the student frame and, when available, the
/// teacher's boxes and ground truth for the same instant.
#[derive(Clone, Debug)]
pub struct SourceFrame {
    pub t: f64,
    pub student: Frame,
    /// Teacher-view boxes.
    pub teacher_boxes: Option<Vec<BBox>>,
    /// Student-view ground truth.
    pub gt: Option<Vec<BBox>>,
}

pub trait FrameSource {
    fn next_frame(&mut self) -> Option<Result<SourceFrame>>;
}

impl<I: Iterator<Item = Result<SourceFrame>>> FrameSource for I {
    fn next_frame(&mut self) -> Option<Result<SourceFrame>> {
        self.next()
    }
}

/// Configuration of one student trained alongside others on the same stream.
#[derive(Clone, Debug)]
pub struct LearnerSpec {
    pub name: String,
    pub augment: AugmentParams,
    pub gate: GateMode,
    pub student: StudentParams,
    pub seed: u64,
    pub train: bool,
    pub initial_weights: Option<WeightBlob>,
}

impl LearnerSpec {
    pub fn from_config(cfg: &RunConfig, name: &str) -> Self {
        Self {
            name: name.into(),
            augment: cfg.augment.clone(),
            gate: cfg.gate.mode,
            student: cfg.student.clone(),
            seed: cfg.seed,
            train: true,
            initial_weights: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub t: f64,
    pub boxes: Vec<BBox>,
}

/// Detections at an annotated frame, with and without the motion filter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRecord {
    pub t: f64,
    pub post: Vec<BBox>,
    pub raw: Vec<BBox>,
    pub gt: Vec<BBox>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SwapRecord {
    pub swap_time: f64,
    pub epoch_index: usize,
    pub entries: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub frames: usize,
    pub mean: f64,
    /// Worst frame after the first.
    pub max: f64,
    /// The first frame, which also seeds the background model.
    pub first: f64,
}

impl LatencyStats {
    fn add(&mut self, secs: f64) {
        self.frames += 1;
        self.mean += (secs - self.mean) / self.frames as f64;
        if self.frames == 1 {
            self.first = secs;
        } else {
            self.max = self.max.max(secs);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LearnerOutput {
    pub name: String,
    /// Every frame's final detections, when recording was requested.
    pub detections: Vec<DetectionRecord>,
    pub annotated: Vec<EvalRecord>,
    /// Per frame: number of final detections scoring at least the count threshold.
    pub counts: Vec<(f64, usize)>,
    /// Per annotated frame: number of ground-truth players.
    pub gt_counts: Vec<(f64, usize)>,
    pub swaps: Vec<SwapRecord>,
    /// Seconds spent on the inference path per frame, training excluded.
    pub latency: LatencyStats,
    pub final_weights: WeightBlob,
}

impl LearnerOutput {
    /// Training log rows: `swap_time,epoch_index,coord_loss,obj_loss,noobj_loss,total`.
    pub fn write_training_log(&self, path: &std::path::Path) -> Result<()> {
        crate::eval::write_csv(
            path,
            "swap_time,epoch_index,coord_loss,obj_loss,noobj_loss,total",
            self.swaps.iter().map(|s| {
                vec![
                    s.swap_time,
                    s.epoch_index as f64,
                    s.loss.coord_loss,
                    s.loss.obj_loss,
                    s.loss.noobj_loss,
                    s.loss.total,
                ]
            }),
        )
    }

    pub fn write_detections(&self, path: &std::path::Path) -> Result<()> {
        crate::imageio::write_jsonl(path, &self.detections)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EngineOptions {
    /// Keep every frame's detections in the output.
    pub record_detections: bool,
    /// Write each new supervision target and an augmented preview here.
    pub dump_dir: Option<PathBuf>,
}

/// Trains one epoch over `snapshot` in shuffled mini-batches and returns the
/// mean pre-update loss.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    trainer: &mut dyn Detector,
    augmenter: &Augmenter,
    snapshot: &[Arc<DatasetEntry>],
    partition: &RegionPartition,
    gate: GateMode,
    lr: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut order: Vec<usize> = (0..snapshot.len()).collect();
    order.shuffle(rng);
    let mut acc = LossBreakdown::default();
    let mut steps = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let prepared = chunk
            .iter()
            .map(|&i| prepare_sample(&snapshot[i], augmenter, partition, gate, rng))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<TrainSample<'_>> = prepared
            .iter()
            .map(|p| TrainSample {
                obs: Observation {
                    frame: &p.frame,
                    motion: &p.motion,
                },
                target: &p.target,
            })
            .collect();
        let report = trainer.train_step(&batch, lr)?;
        if !report.skipped {
            acc.coord_loss += report.loss.coord_loss;
            acc.obj_loss += report.loss.obj_loss;
            acc.noobj_loss += report.loss.noobj_loss;
            acc.total += report.loss.total;
            steps += 1;
        }
    }
    if steps > 0 {
        let n = steps as f64;
        acc.coord_loss /= n;
        acc.obj_loss /= n;
        acc.noobj_loss /= n;
        acc.total /= n;
    }
    Ok(acc)
}

pub struct PreparedSample<'a> {
    pub frame: Cow<'a, Frame>,
    pub motion: Cow<'a, BinaryMask>,
    pub target: SupervisionTarget,
}

/// Applies the augmentation (if enabled) and builds the supervision target.
/// Gating always uses the entry's own motion masks; pasted players only
/// add to the motion the detector sees.
pub fn prepare_sample<'a>(
    entry: &'a DatasetEntry,
    augmenter: &Augmenter,
    partition: &RegionPartition,
    gate: GateMode,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedSample<'a>> {
    let (frame, motion, artificial) = if augmenter.params().enabled {
        let overlap = partition.overlap();
        let sources: Vec<BBox> = entry
            .boxes
            .iter()
            .filter(|b| overlap.contains_point(b.center()))
            .copied()
            .collect();
        let aug = augmenter.augment_frame(&entry.frame, &sources, Some(&entry.masks.raw), rng)?;
        let motion = match &aug.motion {
            Some(m) => Cow::Owned(entry.masks.raw.or(m)?),
            None => Cow::Borrowed(&entry.masks.raw),
        };
        (Cow::Owned(aug.frame), motion, aug.boxes)
    } else {
        (Cow::Borrowed(entry.frame.as_ref()), Cow::Borrowed(&entry.masks.raw), Vec::new())
    };
    let target = target_from_boxes(entry.boxes.clone(), &artificial, &entry.masks, partition, gate)?;
    Ok(PreparedSample { frame, motion, target })
}

struct Pending {
    snapshot: Vec<Arc<DatasetEntry>>,
    due: f64,
}

/// How per-frame work is timed. The threaded engine measures wall time.
/// Under the replay clock scheduling is already simulated, so the calling
/// thread's CPU time is charged and preemption by the host does not leak in.
#[derive(Clone, Copy, Debug)]
enum Clock {
    Wall,
    Thread,
}

enum Stamp {
    Wall(Instant),
    Thread(cpu_time::ThreadTime),
}

impl Clock {
    fn start(self) -> Stamp {
        match self {
            Clock::Wall => Stamp::Wall(Instant::now()),
            Clock::Thread => Stamp::Thread(cpu_time::ThreadTime::now()),
        }
    }
}

impl Stamp {
    fn secs(&self) -> f64 {
        match self {
            Stamp::Wall(i) => i.elapsed().as_secs_f64(),
            Stamp::Thread(t) => t.elapsed().as_secs_f64(),
        }
    }
}

struct Learner {
    spec: LearnerSpec,
    clock: Clock,
    inference: Box<dyn Detector>,
    trainer: Box<dyn Detector>,
    augmenter: Augmenter,
    rng: ChaCha8Rng,
    pending: Option<Pending>,
    epochs: usize,
    /// Swap time charged to the next frame.
    carry: f64,
    out: LearnerOutput,
}

impl Learner {
    fn new(spec: LearnerSpec, setup: &Setup, clock: Clock) -> Result<Self> {
        let mut inference = spec.student.build()?;
        let mut trainer = spec.student.build()?;
        if let Some(w) = &spec.initial_weights {
            inference.load_weights(w)?;
            trainer.load_weights(w)?;
        }
        let mut aug = spec.augment.clone();
        if aug.field_polygon.is_empty() {
            aug.field_polygon = setup.field_polygon.clone();
        }
        let augmenter = Augmenter::for_partition(aug, &setup.partition)?;
        let final_weights = inference.snapshot_weights();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_7A1B),
            out: LearnerOutput {
                name: spec.name.clone(),
                detections: Vec::new(),
                annotated: Vec::new(),
                counts: Vec::new(),
                gt_counts: Vec::new(),
                swaps: Vec::new(),
                latency: LatencyStats::default(),
                final_weights,
            },
            spec,
            clock,
            inference,
            trainer,
            augmenter,
            pending: None,
            epochs: 0,
            carry: 0.0,
        })
    }

    /// Inference for one frame. Returns the seconds spent.
    fn infer(
        &mut self,
        sf: &SourceFrame,
        masks: &MotionMasks,
        shared: Option<&CellFeatures>,
        cfg: &RunConfig,
        annotated: bool,
        record: bool,
    ) -> Result<f64> {
        let start = self.clock.start();
        let preds = match shared.and_then(|f| self.inference.predict_from_features(f)) {
            Some(p) => p,
            None => self.inference.predict(&Observation {
                frame: &sf.student,
                motion: &masks.raw,
            })?,
        };
        let iou = self.spec.student.nms_iou;
        let post = if cfg.distill.postprocess {
            nms(&postprocess_inference(&preds, masks), iou)
        } else {
            nms(&preds, iou)
        };
        let elapsed = start.secs();
        let counted = post.iter().filter(|b| b.score >= cfg.eval.count_threshold).count();
        self.out.counts.push((sf.t, counted));
        if annotated {
            if let Some(gt) = &sf.gt {
                let raw = if cfg.distill.postprocess { nms(&preds, iou) } else { post.clone() };
                self.out.gt_counts.push((sf.t, gt.len()));
                self.out.annotated.push(EvalRecord {
                    t: sf.t,
                    post: post.clone(),
                    raw,
                    gt: gt.clone(),
                });
            }
        }
        if record {
            self.out.detections.push(DetectionRecord { t: sf.t, boxes: post });
        }
        Ok(elapsed)
    }

    fn adopt(&mut self, blob: &WeightBlob, t: f64, entries: usize, loss: LossBreakdown) -> Result<f64> {
        let start = self.clock.start();
        self.inference.load_weights(blob)?;
        let elapsed = start.secs();
        self.out.swaps.push(SwapRecord {
            swap_time: t,
            epoch_index: self.epochs,
            entries,
            loss,
        });
        self.epochs += 1;
        Ok(elapsed)
    }
}

/// Shared front end: motion detection and projection of teacher boxes.
struct FrontEnd {
    detector: Option<MotionDetector>,
    rng: ChaCha8Rng,
    index: usize,
}

impl FrontEnd {
    fn new(seed: u64) -> Self {
        Self {
            detector: None,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0B1B_E000),
            index: 0,
        }
    }

    /// Checks timing, returns the motion masks and whether this frame is a
    /// supervision frame and an annotated frame.
    fn process(&mut self, sf: &SourceFrame, cfg: &RunConfig) -> Result<(MotionMasks, bool, bool)> {
        let fps = cfg.distill.fps;
        let expected = self.index as f64 / fps;
        if (sf.t - expected).abs() > 0.5 / fps {
            return Err(Error::Desync(format!(
                "frame {} has timestamp {:.4}, expected {:.4}",
                self.index, sf.t, expected
            )));
        }
        let masks = match &mut self.detector {
            None => {
                let d = MotionDetector::new(&sf.student, cfg.vibe, cfg.motion.dilation, &mut self.rng)?;
                self.detector = Some(d);
                MotionMasks::empty(sf.student.width(), sf.student.height())
            }
            Some(d) => d.process(&sf.student, &mut self.rng)?,
        };
        let k = self.index;
        self.index += 1;
        let annotate_stride = ((cfg.eval.annotation_period * fps).round() as usize).max(1);
        Ok((masks, k.is_multiple_of(cfg.distill.teacher_stride()), k.is_multiple_of(annotate_stride)))
    }
}

fn make_entry(sf: &SourceFrame, masks: &MotionMasks, setup: &Setup, frame: Arc<Frame>) -> Option<DatasetEntry> {
    let teacher = sf.teacher_boxes.as_ref()?;
    let (w, h) = setup.partition.dims();
    let boxes = teacher
        .iter()
        .filter_map(|b| setup.registration.project_box(b).ok())
        .filter(|b| {
            let c = b.center();
            c.x >= 0.0 && c.y >= 0.0 && c.x < w as f64 && c.y < h as f64
        })
        .collect();
    Some(DatasetEntry {
        t: sf.t,
        frame,
        masks: Arc::new(masks.clone()),
        boxes,
    })
}

fn dump_entry(dir: &std::path::Path, entry: &DatasetEntry, learner: &Learner, setup: &Setup) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(entry.t.to_bits());
    let sample = prepare_sample(entry, &learner.augmenter, &setup.partition, learner.spec.gate, &mut rng)?;
    let stem = format!("sup_{:08.2}", entry.t);
    sample.target.dump(dir, &stem)?;
    crate::imageio::write_frame(&dir.join(format!("{stem}_input.png")), &sample.frame)
}

fn shared_features(learners: &[Learner], sf: &SourceFrame, masks: &MotionMasks) -> Result<Option<CellFeatures>> {
    let specs: Vec<_> = learners.iter().map(|l| l.inference.feature_spec()).collect();
    match specs.first() {
        Some(Some(first)) if specs.iter().all(|s| s.as_ref() == Some(first)) => {
            let (g, lo, hi) = *first;
            let obs = Observation {
                frame: &sf.student,
                motion: &masks.raw,
            };
            Ok(Some(CellFeatures::compute(&obs, g, lo, hi)?))
        }
        _ => Ok(None),
    }
}

/// Runs any number of learners over one stream on the virtual clock. The
/// motion detector, teacher supervision and dataset are shared; each learner
/// has its own augmentation stream, trainer and inference copy.
pub fn run_replay(
    source: &mut dyn FrameSource,
    setup: &Setup,
    cfg: &RunConfig,
    specs: Vec<LearnerSpec>,
    opts: &EngineOptions,
) -> Result<Vec<LearnerOutput>> {
    cfg.validate()?;
    let mut learners = specs
        .into_iter()
        .map(|s| Learner::new(s, setup, Clock::Thread))
        .collect::<Result<Vec<_>>>()?;
    let mut front = FrontEnd::new(cfg.seed);
    let mut dataset = OnlineDataset::new(cfg.distill.memory_window);
    while let Some(sf) = source.next_frame() {
        let sf = sf?;
        let start = Clock::Thread.start();
        let (masks, supervise, annotated) = front.process(&sf, cfg)?;
        let front_secs = start.secs();
        if supervise {
            if let Some(entry) = make_entry(&sf, &masks, setup, Arc::new(sf.student.clone())) {
                if let (Some(dir), Some(l)) = (&opts.dump_dir, learners.first()) {
                    dump_entry(dir, &entry, l, setup)?;
                }
                dataset.push(entry)?;
            }
        }
        for l in learners.iter_mut().filter(|l| l.spec.train) {
            if l.pending.as_ref().is_some_and(|p| sf.t + 1e-9 >= p.due) {
                let p = l.pending.take().expect("pending epoch");
                let loss = train_epoch(
                    l.trainer.as_mut(),
                    &l.augmenter,
                    &p.snapshot,
                    &setup.partition,
                    l.spec.gate,
                    cfg.distill.lr,
                    cfg.distill.batch_size,
                    &mut l.rng,
                )?;
                let blob = l.trainer.snapshot_weights();
                l.carry += l.adopt(&blob, sf.t, p.snapshot.len(), loss)?;
            }
            if l.pending.is_none() && !dataset.is_empty() {
                let snapshot = dataset.snapshot();
                let due = sf.t + snapshot.len() as f64 * cfg.distill.replay_sample_cost;
                l.pending = Some(Pending { snapshot, due });
            }
        }
        let feats_start = Clock::Thread.start();
        let feats = shared_features(&learners, &sf, &masks)?;
        let shared_secs = front_secs + feats_start.secs();
        for l in learners.iter_mut() {
            let secs = l.infer(&sf, &masks, feats.as_ref(), cfg, annotated, opts.record_detections)?;
            l.out.latency.add(shared_secs + secs + std::mem::take(&mut l.carry));
        }
    }
    Ok(learners
        .into_iter()
        .map(|mut l| {
            l.out.final_weights = l.inference.snapshot_weights();
            l.out
        })
        .collect())
}

type Mailbox = Mutex<Option<(WeightBlob, usize, LossBreakdown)>>;

/// Runs one learner with a real trainer thread. The inference loop never
/// waits on training: it checks the mailbox between frames and adopts the
/// newest snapshot, if any.
pub fn run_wall(
    source: &mut dyn FrameSource,
    setup: &Setup,
    cfg: &RunConfig,
    spec: LearnerSpec,
    opts: &EngineOptions,
) -> Result<LearnerOutput> {
    cfg.validate()?;
    let mut learner = Learner::new(spec, setup, Clock::Wall)?;
    let dataset = Mutex::new(OnlineDataset::new(cfg.distill.memory_window));
    let mailbox: Mailbox = Mutex::new(None);
    let stop = AtomicBool::new(false);
    let trainer_error: Mutex<Option<Error>> = Mutex::new(None);
    let mut front = FrontEnd::new(cfg.seed);
    let train = learner.spec.train;
    let gate = learner.spec.gate;
    let mut trainer = std::mem::replace(&mut learner.trainer, learner.spec.student.build()?);
    let mut trng = learner.rng.clone();
    let augmenter = learner.augmenter.clone();

    let result = std::thread::scope(|scope| -> Result<()> {
        if train {
            scope.spawn(|| {
                while !stop.load(Ordering::Relaxed) {
                    let snapshot = dataset.lock().expect("dataset lock").snapshot();
                    if snapshot.is_empty() {
                        std::thread::sleep(Duration::from_millis(2));
                        continue;
                    }
                    let r = train_epoch(
                        trainer.as_mut(),
                        &augmenter,
                        &snapshot,
                        &setup.partition,
                        gate,
                        cfg.distill.lr,
                        cfg.distill.batch_size,
                        &mut trng,
                    );
                    match r {
                        Ok(loss) => {
                            let blob = trainer.snapshot_weights();
                            *mailbox.lock().expect("mailbox lock") = Some((blob, snapshot.len(), loss));
                        }
                        Err(e) => {
                            *trainer_error.lock().expect("error lock") = Some(e);
                            return;
                        }
                    }
                }
            });
        }
        let run = (|| -> Result<()> {
            let wall_start = Instant::now();
            while let Some(sf) = source.next_frame() {
                let sf = sf?;
                if cfg.distill.realtime {
                    let due = Duration::from_secs_f64(sf.t.max(0.0));
                    if let Some(wait) = due.checked_sub(wall_start.elapsed()) {
                        std::thread::sleep(wait);
                    }
                }
                let start = Instant::now();
                let (masks, supervise, annotated) = front.process(&sf, cfg)?;
                if supervise {
                    if let Some(entry) = make_entry(&sf, &masks, setup, Arc::new(sf.student.clone())) {
                        if let Some(dir) = &opts.dump_dir {
                            dump_entry(dir, &entry, &learner, setup)?;
                        }
                        dataset.lock().expect("dataset lock").push(entry)?;
                    }
                }
                let adopted = mailbox.lock().expect("mailbox lock").take();
                if let Some((blob, entries, loss)) = adopted {
                    learner.adopt(&blob, sf.t, entries, loss)?;
                }
                let front_secs = start.elapsed().as_secs_f64();
                let secs = learner.infer(&sf, &masks, None, cfg, annotated, opts.record_detections)?;
                learner.out.latency.add(front_secs + secs);
                if let Some(e) = trainer_error.lock().expect("error lock").take() {
                    return Err(e);
                }
            }
            Ok(())
        })();
        stop.store(true, Ordering::Relaxed);
        run
    });
    result?;
    learner.out.final_weights = learner.inference.snapshot_weights();
    Ok(learner.out)
}

/// The deployable half of the system: motion segmentation, prediction and
/// post-processing on a stream of frames, with weights swapped in from
/// outside. No training happens here.
pub struct InferencePipeline {
    motion: Option<MotionDetector>,
    detector: Box<dyn Detector>,
    rng: ChaCha8Rng,
    cfg: RunConfig,
    last_t: Option<f64>,
}

impl InferencePipeline {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            motion: None,
            detector: cfg.student.build()?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0B1B_E000),
            cfg: cfg.clone(),
            last_t: None,
        })
    }

    pub fn load_weights(&mut self, blob: &WeightBlob) -> Result<()> {
        self.detector.load_weights(blob)
    }

    pub fn weights(&self) -> WeightBlob {
        self.detector.snapshot_weights()
    }

    /// Final detections for `frame`. The first frame seeds the background
    /// model and yields nothing; frames must arrive in time order with
    /// unchanged dimensions.
    pub fn process(&mut self, frame: &Frame) -> Result<Vec<BBox>> {
        if let Some(t) = self.last_t {
            if frame.timestamp <= t {
                return Err(Error::OutOfOrder {
                    got: frame.timestamp,
                    newest: t,
                });
            }
        }
        let masks = match &mut self.motion {
            None => {
                let d = MotionDetector::new(frame, self.cfg.vibe, self.cfg.motion.dilation, &mut self.rng)?;
                self.motion = Some(d);
                MotionMasks::empty(frame.width(), frame.height())
            }
            Some(d) => d.process(frame, &mut self.rng)?,
        };
        self.last_t = Some(frame.timestamp);
        let preds = self.detector.predict(&Observation {
            frame,
            motion: &masks.raw,
        })?;
        let iou = self.cfg.student.nms_iou;
        Ok(if self.cfg.distill.postprocess {
            nms(&postprocess_inference(&preds, &masks), iou)
        } else {
            nms(&preds, iou)
        })
    }
}

/// Trains on the whole recording first, then runs inference over it with
/// the resulting weights. `open` must yield the same stream each call.
pub fn run_offline(
    open: &mut dyn FnMut() -> Result<Box<dyn FrameSource>>,
    setup: &Setup,
    cfg: &RunConfig,
    spec: LearnerSpec,
    opts: &EngineOptions,
) -> Result<LearnerOutput> {
    cfg.validate()?;
    let mut learner = Learner::new(spec.clone(), setup, Clock::Thread)?;
    let mut front = FrontEnd::new(cfg.seed);
    let mut dataset = OnlineDataset::new(f64::INFINITY);
    let mut source = open()?;
    while let Some(sf) = source.next_frame() {
        let sf = sf?;
        let (masks, supervise, _) = front.process(&sf, cfg)?;
        if supervise {
            if let Some(entry) = make_entry(&sf, &masks, setup, Arc::new(sf.student.clone())) {
                dataset.push(entry)?;
            }
        }
    }
    let snapshot = dataset.snapshot();
    let mut log = Vec::new();
    for epoch in 0..cfg.distill.offline_epochs {
        let loss = train_epoch(
            learner.trainer.as_mut(),
            &learner.augmenter,
            &snapshot,
            &setup.partition,
            learner.spec.gate,
            cfg.distill.lr,
            cfg.distill.batch_size,
            &mut learner.rng,
        )?;
        log.push(SwapRecord {
            swap_time: 0.0,
            epoch_index: epoch,
            entries: snapshot.len(),
            loss,
        });
    }
    let infer_spec = LearnerSpec {
        train: false,
        initial_weights: Some(learner.trainer.snapshot_weights()),
        ..spec
    };
    let mut source = open()?;
    let mut out = run_replay(source.as_mut(), setup, cfg, vec![infer_spec], opts)?
        .pop()
        .expect("one learner");
    out.swaps = log;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Homography;
    use crate::types::CameraId;

    fn entry(t: f64) -> DatasetEntry {
        DatasetEntry {
            t,
            frame: Arc::new(Frame::filled(4, 4, 0.5, t, CameraId::Student)),
            masks: Arc::new(MotionMasks::empty(4, 4)),
            boxes: Vec::new(),
        }
    }

    #[test]
    fn dataset_keeps_window() {
        let mut d = OnlineDataset::new(300.0);
        for t in 0..=400 {
            d.push(entry(t as f64)).unwrap();
        }
        assert_eq!(d.len(), 300);
        assert_eq!(d.oldest(), Some(101.0));
        assert_eq!(d.newest(), Some(400.0));
    }

    #[test]
    fn dataset_rejects_out_of_order() {
        let mut d = OnlineDataset::new(300.0);
        d.push(entry(5.0)).unwrap();
        match d.push(entry(5.0)) {
            Err(Error::OutOfOrder { got, newest }) => assert_eq!((got, newest), (5.0, 5.0)),
            other => panic!("{other:?}"),
        }
        assert!(d.push(entry(4.0)).is_err());
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn snapshots_share_frames_until_evicted() {
        let mut d = OnlineDataset::new(2.0);
        d.push(entry(0.0)).unwrap();
        let snap = d.snapshot();
        let frame = Arc::clone(&snap[0].frame);
        assert_eq!(Arc::strong_count(&frame), 2);
        d.push(entry(1.0)).unwrap();
        d.push(entry(2.0)).unwrap();
        assert_eq!(d.oldest(), Some(1.0));
        // The snapshot still holds the evicted entry.
        assert_eq!(snap[0].t, 0.0);
        drop(snap);
        assert_eq!(Arc::strong_count(&frame), 1);
    }

    fn tiny_setup() -> Setup {
        let overlap = BinaryMask::from_fn(32, 32, |x, _| x < 16);
        Setup {
            registration: Registration::new(Homography::identity(), None),
            partition: RegionPartition::new(overlap).unwrap(),
            field_polygon: Vec::new(),
        }
    }

    /// A dark square moving right over a flat background, teacher boxes at
    /// the square itself (identity registration).
    fn stream(n: usize, fps: f64) -> impl Iterator<Item = Result<SourceFrame>> {
        (0..n).map(move |k| {
            let t = k as f64 / fps;
            let x0 = 2 + (k % 20);
            let student = Frame::from_fn(32, 32, t, CameraId::Student, |x, y| {
                if x >= x0 && x < x0 + 4 && (10..16).contains(&y) {
                    0.05
                } else {
                    0.6
                }
            });
            let b = BBox::from_corners(x0 as f64, 10.0, (x0 + 4) as f64, 16.0, 1.0);
            Ok(SourceFrame {
                t,
                student,
                teacher_boxes: Some(vec![b]),
                gt: Some(vec![b]),
            })
        })
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.distill.fps = 4.0;
        cfg.distill.teacher_period = 0.5;
        cfg.distill.replay_sample_cost = 0.1;
        cfg.distill.batch_size = 2;
        cfg.eval.annotation_period = 1.0;
        cfg.student.grid = 4;
        cfg.motion.dilation = 3;
        cfg.augment.enabled = false;
        cfg
    }

    #[test]
    fn replay_is_deterministic_and_swaps_on_schedule() {
        let cfg = tiny_cfg();
        let setup = tiny_setup();
        let run = || {
            let spec = LearnerSpec::from_config(&cfg, "a");
            run_replay(
                &mut stream(40, 4.0),
                &setup,
                &cfg,
                vec![spec],
                &EngineOptions {
                    record_detections: true,
                    dump_dir: None,
                },
            )
            .unwrap()
            .pop()
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.final_weights, b.final_weights);
        assert_eq!(a.swaps, b.swaps);
        assert!(!a.swaps.is_empty());
        // The first epoch starts at t = 0 with one entry and is due 0.1 s
        // later, i.e. on the next frame.
        assert_eq!(a.swaps[0].swap_time, 0.25);
        assert_eq!(a.swaps[0].entries, 1);
        for w in a.swaps.windows(2) {
            assert!(w[1].swap_time > w[0].swap_time);
            assert_eq!(w[1].epoch_index, w[0].epoch_index + 1);
        }
        assert_eq!(a.detections.len(), 40);
        assert_eq!(a.annotated.len(), 10);
        assert_eq!(a.counts.len(), 40);
    }

    #[test]
    fn learners_are_independent_of_company() {
        let cfg = tiny_cfg();
        let setup = tiny_setup();
        let spec = LearnerSpec::from_config(&cfg, "a");
        let mut other = spec.clone();
        other.gate = GateMode::None;
        other.name = "b".into();
        let alone = run_replay(&mut stream(24, 4.0), &setup, &cfg, vec![spec.clone()], &EngineOptions::default())
            .unwrap()
            .remove(0);
        let both = run_replay(&mut stream(24, 4.0), &setup, &cfg, vec![spec, other], &EngineOptions::default()).unwrap();
        assert_eq!(alone.final_weights, both[0].final_weights);
        assert_ne!(both[0].final_weights, both[1].final_weights);
    }

    #[test]
    fn desync_is_reported() {
        let cfg = tiny_cfg();
        let setup = tiny_setup();
        let mut s = stream(10, 4.0).filter(|f| f.as_ref().map(|f| f.t != 0.5).unwrap_or(true));
        let r = run_replay(&mut s, &setup, &cfg, vec![LearnerSpec::from_config(&cfg, "a")], &EngineOptions::default());
        assert!(matches!(r, Err(Error::Desync(_))));
    }

    #[test]
    fn wall_mode_runs_and_swaps() {
        let cfg = tiny_cfg();
        let setup = tiny_setup();
        let spec = LearnerSpec::from_config(&cfg, "w");
        // A slow source gives the trainer time to finish epochs.
        let mut s = stream(60, 4.0).inspect(|_| std::thread::sleep(Duration::from_millis(3)));
        let out = run_wall(&mut s, &setup, &cfg, spec, &EngineOptions::default()).unwrap();
        assert_eq!(out.counts.len(), 60);
        assert!(!out.swaps.is_empty());
        for w in out.swaps.windows(2) {
            assert!(w[1].swap_time >= w[0].swap_time);
        }
    }

    #[test]
    fn offline_trains_then_infers() {
        let mut cfg = tiny_cfg();
        cfg.distill.offline_epochs = 3;
        let setup = tiny_setup();
        let spec = LearnerSpec::from_config(&cfg, "o");
        let mut open = || -> Result<Box<dyn FrameSource>> { Ok(Box::new(stream(20, 4.0))) };
        let out = run_offline(&mut open, &setup, &cfg, spec, &EngineOptions::default()).unwrap();
        assert_eq!(out.swaps.len(), 3);
        assert_eq!(out.swaps[0].entries, 10);
        assert_eq!(out.counts.len(), 20);
    }

    #[test]
    fn params_round_trip_and_stride() {
        let p = DistillParams::default();
        assert_eq!(p.teacher_stride(), 12);
        let back: DistillParams = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        assert_eq!("wall".parse::<ClockMode>().unwrap(), ClockMode::Wall);
    }

    #[test]
    fn pipeline_matches_the_replay_engine_without_training() {
        let cfg = tiny_cfg();
        let setup = tiny_setup();
        let frames: Vec<SourceFrame> = stream(30, 4.0).collect::<Result<_>>().unwrap();
        let mut spec = LearnerSpec::from_config(&cfg, "frozen");
        spec.train = false;
        let opts = EngineOptions {
            record_detections: true,
            dump_dir: None,
        };
        let mut src = frames.clone().into_iter().map(Ok);
        let out = run_replay(&mut src, &setup, &cfg, vec![spec], &opts).unwrap().remove(0);
        let mut pipe = InferencePipeline::new(&cfg).unwrap();
        for (sf, rec) in frames.iter().zip(&out.detections) {
            assert_eq!(pipe.process(&sf.student).unwrap(), rec.boxes, "t={}", sf.t);
        }
        assert!(matches!(pipe.process(&frames[0].student), Err(Error::OutOfOrder { .. })));
    }
}
