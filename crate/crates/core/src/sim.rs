//! Synthetic two-camera football field.
//!
//! A fisheye student camera looks straight down from a pole at the side of
//! the field; a pinhole teacher on the same pole looks across the field.
//! Players are upright ellipsoids that walk between random waypoints. Both
//! views are rendered by ray casting, and ground-truth boxes come from the
//! projected silhouettes.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::point_in_polygon;
use crate::error::{Error, Result};
use crate::geometry::{FisheyeModel, Homography, Registration};
use crate::types::{BBox, BinaryMask, CameraId, Frame, Point, RegionPartition};

type V3 = Vector3<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentCameraConfig {
    /// Square frame side in pixels.
    pub size: usize,
    pub height: f64,
    /// Pole foot on the ground, meters.
    pub pole: [f64; 2],
    /// Radius of the 90-degree circle as a fraction of half the frame.
    pub circle_scale: f64,
}

impl Default for StudentCameraConfig {
    fn default() -> Self {
        Self {
            size: 1280,
            height: 9.5,
            pole: [0.0, 2.0],
            circle_scale: 0.85,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherCameraConfig {
    pub width: usize,
    pub height_px: usize,
    pub height: f64,
    pub hfov_deg: f64,
    /// Downward tilt of the optical axis from horizontal.
    pub pitch_deg: f64,
}

impl Default for TeacherCameraConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height_px: 480,
            height: 9.8,
            hfov_deg: 57.0,
            pitch_deg: 36.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Along x, meters, centered on x = 0.
    pub field_length: f64,
    /// Along y, meters, from y = 0.
    pub field_width: f64,
    pub players: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Probability of standing still on reaching a waypoint.
    pub pause_prob: f64,
    pub pause_max: f64,
    pub player_height: f64,
    pub player_width: f64,
    /// Temporal noise standard deviation, intensity units.
    pub noise_sigma: f64,
    pub student: StudentCameraConfig,
    pub teacher: TeacherCameraConfig,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            field_length: 100.0,
            field_width: 60.0,
            players: 20,
            speed_min: 1.0,
            speed_max: 3.5,
            pause_prob: 0.15,
            pause_max: 1.5,
            player_height: 1.8,
            player_width: 0.6,
            noise_sigma: 1.0 / 255.0,
            student: StudentCameraConfig::default(),
            teacher: TeacherCameraConfig::default(),
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.field_length > 0.0
            && self.field_width > 0.0
            && self.speed_min >= 0.0
            && self.speed_max >= self.speed_min
            && (0.0..=1.0).contains(&self.pause_prob)
            && self.pause_max >= 0.0
            && self.player_height > 0.0
            && self.player_width > 0.0
            && self.noise_sigma >= 0.0
            && self.student.size >= 16
            && self.student.height > self.player_height
            && self.teacher.height > self.player_height
            && self.student.circle_scale > 0.0
            && self.teacher.width >= 16
            && self.teacher.height_px >= 16
            && (1.0..179.0).contains(&self.teacher.hfov_deg)
            && (0.0..90.0).contains(&self.teacher.pitch_deg);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("world config out of range"))
        }
    }
}

/// Teacher imperfection model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherNoise {
    pub center_sigma: f64,
    /// Relative size jitter.
    pub size_sigma: f64,
    pub drop_prob: f64,
}

impl Default for TeacherNoise {
    fn default() -> Self {
        Self {
            center_sigma: 1.0,
            size_sigma: 0.05,
            drop_prob: 0.02,
        }
    }
}

impl TeacherNoise {
    pub fn exact() -> Self {
        Self {
            center_sigma: 0.0,
            size_sigma: 0.0,
            drop_prob: 0.0,
        }
    }
}

/// Downward fisheye. Camera axes: x = -world x, y = +world y, z = down.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentCamera {
    pub lens: FisheyeModel,
    pub position: V3,
    pub size: usize,
}

impl StudentCamera {
    pub fn new(cfg: &StudentCameraConfig) -> Result<Self> {
        let half = cfg.size as f64 / 2.0;
        let focal = cfg.circle_scale * half / std::f64::consts::FRAC_PI_2;
        let max_theta = (half / focal).min(std::f64::consts::FRAC_PI_2 - 1e-6);
        Ok(Self {
            lens: FisheyeModel::new(focal, Point::new(half, half), max_theta)?,
            position: V3::new(cfg.pole[0], cfg.pole[1], cfg.height),
            size: cfg.size,
        })
    }

    fn to_cam(&self, p: V3) -> V3 {
        let v = p - self.position;
        V3::new(-v.x, v.y, -v.z)
    }

    pub fn project(&self, p: V3) -> Option<Point> {
        let c = self.to_cam(p);
        let theta = c.x.hypot(c.y).atan2(c.z);
        let phi = c.y.atan2(c.x);
        self.lens.project(theta, phi).ok()
    }

    /// World-space direction of the ray through pixel `p`.
    pub fn ray(&self, p: Point) -> Option<V3> {
        let (theta, phi) = self.lens.unproject(p);
        if theta > self.lens.max_theta {
            return None;
        }
        let (st, ct) = theta.sin_cos();
        Some(V3::new(-st * phi.cos(), st * phi.sin(), -ct))
    }

    /// Ground plane (x, y, 1) to the undistorted student plane.
    pub fn ground_matrix(&self) -> Matrix3<f64> {
        let f = self.lens.focal;
        let (cx, cy) = (self.lens.center.x, self.lens.center.y);
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        // columns: images of world x, world y, and the camera-frame origin
        let r = Matrix3::new(-1.0, 0.0, self.position.x, 0.0, 1.0, -self.position.y, 0.0, 0.0, self.position.z);
        k * r
    }
}

/// Pinhole on the pole, looking along +y and tilted down.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherCamera {
    pub position: V3,
    /// Rows: image-right, image-down, forward, in world coordinates.
    pub rotation: Matrix3<f64>,
    pub focal: f64,
    pub width: usize,
    pub height: usize,
}

impl TeacherCamera {
    pub fn new(cfg: &TeacherCameraConfig, pole: [f64; 2]) -> Self {
        let p = cfg.pitch_deg.to_radians();
        let fwd = V3::new(0.0, p.cos(), -p.sin());
        let right = V3::new(1.0, 0.0, 0.0);
        let down = fwd.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        Self {
            position: V3::new(pole[0], pole[1], cfg.height),
            rotation,
            focal: (cfg.width as f64 / 2.0) / (cfg.hfov_deg.to_radians() / 2.0).tan(),
            width: cfg.width,
            height: cfg.height_px,
        }
    }

    fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal,
            0.0,
            self.width as f64 / 2.0,
            0.0,
            self.focal,
            self.height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn project(&self, p: V3) -> Option<Point> {
        let c = self.rotation * (p - self.position);
        if c.z <= 1e-6 {
            return None;
        }
        Some(Point::new(
            self.focal * c.x / c.z + self.width as f64 / 2.0,
            self.focal * c.y / c.z + self.height as f64 / 2.0,
        ))
    }

    pub fn ray(&self, p: Point) -> V3 {
        let c = V3::new(
            (p.x - self.width as f64 / 2.0) / self.focal,
            (p.y - self.height as f64 / 2.0) / self.focal,
            1.0,
        );
        self.rotation.transpose() * c
    }

    pub fn ground_matrix(&self) -> Matrix3<f64> {
        let t = -(self.rotation * self.position);
        let r = self.rotation;
        let m = Matrix3::from_columns(&[r.column(0).into_owned(), r.column(1).into_owned(), t]);
        self.intrinsics() * m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlayerGt {
    pub id: usize,
    /// Ground position, meters.
    pub position: [f64; 2],
    pub moving: bool,
    pub student: Option<BBox>,
    pub teacher: Option<BBox>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub t: f64,
    pub players: Vec<PlayerGt>,
}

impl GroundTruthFrame {
    pub fn student_boxes(&self) -> Vec<BBox> {
        self.players.iter().filter_map(|p| p.student).collect()
    }

    pub fn teacher_boxes(&self) -> Vec<BBox> {
        self.players.iter().filter_map(|p| p.teacher).collect()
    }
}

#[derive(Clone, Debug)]
struct Player {
    pos: [f64; 2],
    target: [f64; 2],
    speed: f64,
    pause_left: f64,
    shirt: f32,
    shorts: f32,
}

/// One synchronized capture.
#[derive(Clone, Debug)]
pub struct SimFrame {
    pub index: usize,
    pub student: Frame,
    pub teacher: Frame,
    pub gt: GroundTruthFrame,
}

pub struct Simulator {
    cfg: WorldConfig,
    fps: f64,
    student: StudentCamera,
    teacher: TeacherCamera,
    student_bg: Frame,
    teacher_bg: Frame,
    render_teacher: bool,
    players: Vec<Player>,
    motion_rng: ChaCha8Rng,
    index: usize,
}

fn hash2(a: i64, b: i64) -> f64 {
    let mut h = (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 31;
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 29;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Simulator {
    pub fn new(cfg: WorldConfig, fps: f64) -> Result<Self> {
        cfg.validate()?;
        if !(fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        let student = StudentCamera::new(&cfg.student)?;
        let teacher = TeacherCamera::new(&cfg.teacher, cfg.student.pole);
        let (hl, w) = (cfg.field_length / 2.0, cfg.field_width);
        for (x, y) in [(-hl, 0.0), (hl, 0.0), (-hl, w), (hl, w)] {
            let covered = student
                .project(V3::new(x, y, 0.0))
                .is_some_and(|p| p.x >= 0.0 && p.y >= 0.0 && p.x < student.size as f64 && p.y < student.size as f64);
            if !covered {
                return Err(Error::invalid(format!(
                    "student view does not cover field corner ({x}, {y})"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let players = (0..cfg.players)
            .map(|i| {
                let light = i % 2 == 0;
                let jitter = (rng.random::<f32>() - 0.5) * 0.06;
                let pos = Self::random_point(&cfg, &mut rng);
                let target = Self::random_point(&cfg, &mut rng);
                Player {
                    pos,
                    target,
                    speed: rng.random_range(cfg.speed_min..=cfg.speed_max),
                    pause_left: 0.0,
                    shirt: if light { 0.78 } else { 0.08 } + jitter,
                    shorts: if light { 0.64 } else { 0.2 } + jitter,
                }
            })
            .collect();
        let mut sim = Self {
            student_bg: Frame::filled(1, 1, 0.0, 0.0, CameraId::Student),
            teacher_bg: Frame::filled(1, 1, 0.0, 0.0, CameraId::Teacher),
            render_teacher: true,
            fps,
            players,
            motion_rng: rng,
            index: 0,
            student,
            teacher,
            cfg,
        };
        sim.student_bg = sim.render_student_background();
        sim.teacher_bg = sim.render_teacher_background();
        Ok(sim)
    }

    fn random_point<R: Rng + ?Sized>(cfg: &WorldConfig, rng: &mut R) -> [f64; 2] {
        let m = 1.0;
        [
            rng.random_range(-cfg.field_length / 2.0 + m..cfg.field_length / 2.0 - m),
            rng.random_range(m..cfg.field_width - m),
        ]
    }

    /// When off, teacher frames are the empty background; ground truth is
    /// unaffected.
    pub fn set_render_teacher(&mut self, on: bool) {
        self.render_teacher = on;
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn student_camera(&self) -> &StudentCamera {
        &self.student
    }

    pub fn teacher_camera(&self) -> &TeacherCamera {
        &self.teacher
    }

    pub fn student_size(&self) -> (usize, usize) {
        (self.student.size, self.student.size)
    }

    pub fn teacher_size(&self) -> (usize, usize) {
        (self.teacher.width, self.teacher.height)
    }

    /// Teacher pixels to undistorted student pixels through the ground plane.
    pub fn true_homography(&self) -> Homography {
        let ht = self.teacher.ground_matrix();
        let hs = self.student.ground_matrix();
        Homography::from_matrix(hs * ht.try_inverse().expect("teacher ground map is invertible"))
            .expect("cameras see the ground plane")
    }

    pub fn registration(&self) -> Registration {
        Registration::new(self.true_homography(), Some(self.student.lens))
    }

    pub fn region_partition(&self) -> Result<RegionPartition> {
        self.registration().region_partition(self.teacher_size(), self.student_size())
    }

    /// Field outline in student pixels.
    pub fn field_polygon(&self) -> Vec<Point> {
        let (hl, w) = (self.cfg.field_length / 2.0, self.cfg.field_width);
        let corners = [(-hl, 0.0), (hl, 0.0), (hl, w), (-hl, w)];
        let mut out = Vec::new();
        for k in 0..4 {
            let (a, b) = (corners[k], corners[(k + 1) % 4]);
            for s in 0..64 {
                let t = s as f64 / 64.0;
                let p = V3::new(a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), 0.0);
                if let Some(q) = self.student.project(p) {
                    out.push(q);
                }
            }
        }
        out
    }

    pub fn field_mask(&self) -> BinaryMask {
        let poly = self.field_polygon();
        let n = self.student.size;
        BinaryMask::from_fn(n, n, |x, y| point_in_polygon(Point::new(x as f64 + 0.5, y as f64 + 0.5), &poly))
    }

    fn ground_intensity(&self, x: f64, y: f64) -> f32 {
        let (hl, w) = (self.cfg.field_length / 2.0, self.cfg.field_width);
        let grain = (hash2((x * 2.0).floor() as i64, (y * 2.0).floor() as i64) - 0.5) * 0.03;
        let inside = x.abs() <= hl && (0.0..=w).contains(&y);
        let v = if inside {
            let lw = 0.12;
            let on_line = (x.abs() - hl).abs() < lw
                || y < lw
                || (w - y) < lw
                || x.abs() < lw
                || ((x.hypot(y - w / 2.0)) - 9.15).abs() < lw;
            if on_line {
                0.95
            } else if ((x + hl) / 5.0).floor() as i64 % 2 == 0 {
                0.36
            } else {
                0.44
            }
        } else {
            0.55 + 0.05 * (((x / 3.0).floor() as i64 + (y / 3.0).floor() as i64) % 2) as f64
        };
        (v + grain) as f32
    }

    fn ground_hit(origin: V3, dir: V3) -> Option<(f64, f64)> {
        if dir.z >= -1e-9 {
            return None;
        }
        let t = -origin.z / dir.z;
        Some((origin.x + t * dir.x, origin.y + t * dir.y))
    }

    fn render_student_background(&self) -> Frame {
        let n = self.student.size;
        let mut f = Frame::filled(n, n, 0.0, 0.0, CameraId::Student);
        for y in 0..n {
            for x in 0..n {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                if let Some(d) = self.student.ray(p) {
                    let v = match Self::ground_hit(self.student.position, d) {
                        Some((gx, gy)) => self.ground_intensity(gx, gy),
                        None => 0.7,
                    };
                    f.set(x, y, 0, v);
                }
            }
        }
        f
    }

    fn render_teacher_background(&self) -> Frame {
        let (w, h) = self.teacher_size();
        let mut f = Frame::filled(w, h, 0.0, 0.0, CameraId::Teacher);
        for y in 0..h {
            for x in 0..w {
                let d = self.teacher.ray(Point::new(x as f64 + 0.5, y as f64 + 0.5));
                let v = match Self::ground_hit(self.teacher.position, d) {
                    Some((gx, gy)) => self.ground_intensity(gx, gy),
                    None => 0.8,
                };
                f.set(x, y, 0, v);
            }
        }
        f
    }

    fn ellipsoid(&self, p: &Player) -> (V3, V3) {
        let (rw, rh) = (self.cfg.player_width / 2.0, self.cfg.player_height / 2.0);
        (V3::new(p.pos[0], p.pos[1], rh), V3::new(rw, rw, rh))
    }

    /// Distance along `dir` to the first hit of the ellipsoid, and the hit height.
    fn ray_ellipsoid(origin: V3, dir: V3, center: V3, radii: V3) -> Option<(f64, f64)> {
        let o = (origin - center).component_div(&radii);
        let d = dir.component_div(&radii);
        let a = d.dot(&d);
        let b = 2.0 * o.dot(&d);
        let c = o.dot(&o) - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let t = (-b - disc.sqrt()) / (2.0 * a);
        if t <= 0.0 {
            return None;
        }
        Some((t, origin.z + t * dir.z))
    }

    fn silhouette_points(center: V3, radii: V3) -> Vec<V3> {
        let mut pts = Vec::with_capacity(48 * 25);
        for i in 0..48 {
            let a = i as f64 / 48.0 * std::f64::consts::TAU;
            for j in 0..=24 {
                let e = (j as f64 / 24.0 - 0.5) * std::f64::consts::PI;
                pts.push(V3::new(
                    center.x + radii.x * e.cos() * a.cos(),
                    center.y + radii.y * e.cos() * a.sin(),
                    center.z + radii.z * e.sin(),
                ));
            }
        }
        pts
    }

    fn enclose(pts: impl Iterator<Item = Option<Point>>) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in pts {
            let p = p?;
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        (x1 > x0 && y1 > y0).then(|| BBox::from_corners(x0, y0, x1, y1, 1.0))
    }

    #[allow(clippy::too_many_arguments)]
    fn paint_player<F: Fn(Point) -> Option<V3>>(
        frame: &mut Frame,
        bbox: &BBox,
        origin: V3,
        ray: F,
        center: V3,
        radii: V3,
        p: &Player,
        zbuf: &mut [f64],
    ) {
        let (w, h) = frame.dims();
        let x0 = bbox.x0().floor().max(0.0) as usize;
        let y0 = bbox.y0().floor().max(0.0) as usize;
        let x1 = (bbox.x1().ceil().max(0.0) as usize).min(w);
        let y1 = (bbox.y1().ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let Some(d) = ray(Point::new(x as f64 + 0.5, y as f64 + 0.5)) else {
                    continue;
                };
                if let Some((t, z)) = Self::ray_ellipsoid(origin, d, center, radii) {
                    let i = y * w + x;
                    if t < zbuf[i] {
                        zbuf[i] = t;
                        let frac = z / (2.0 * radii.z);
                        let v = if frac > 0.45 { p.shirt } else { p.shorts };
                        frame.set(x, y, 0, v);
                    }
                }
            }
        }
    }

    fn advance(&mut self) {
        let dt = 1.0 / self.fps;
        for i in 0..self.players.len() {
            let mut p = self.players[i].clone();
            if p.pause_left > 0.0 {
                p.pause_left -= dt;
            } else {
                let (dx, dy) = (p.target[0] - p.pos[0], p.target[1] - p.pos[1]);
                let dist = dx.hypot(dy);
                let step = p.speed * dt;
                if dist <= step {
                    p.pos = p.target;
                    p.target = Self::random_point(&self.cfg, &mut self.motion_rng);
                    p.speed = self.motion_rng.random_range(self.cfg.speed_min..=self.cfg.speed_max);
                    if self.motion_rng.random_bool(self.cfg.pause_prob) {
                        p.pause_left = self.motion_rng.random_range(0.0..=self.cfg.pause_max);
                    }
                } else {
                    p.pos = [p.pos[0] + step * dx / dist, p.pos[1] + step * dy / dist];
                }
            }
            self.players[i] = p;
        }
    }

    fn add_noise(&self, frame: &mut Frame, stream: u64) {
        if self.cfg.noise_sigma == 0.0 {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5EED_0000_0000 ^ stream.wrapping_mul(0x9E37_79B9));
        let normal = Normal::new(0.0f32, self.cfg.noise_sigma as f32).expect("valid sigma");
        for v in frame.data_mut() {
            if *v > 0.0 {
                *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }

    /// Renders the current state, then advances the world by one frame.
    pub fn step(&mut self) -> SimFrame {
        let index = self.index;
        let t = index as f64 / self.fps;
        let mut student = self.student_bg.clone();
        let mut teacher = self.teacher_bg.clone();
        student.timestamp = t;
        teacher.timestamp = t;
        let mut zs = vec![f64::INFINITY; student.width() * student.height()];
        let mut zt = vec![f64::INFINITY; teacher.width() * teacher.height()];
        let (tw, th) = self.teacher_size();
        let n = self.student.size as f64;
        let mut players = Vec::with_capacity(self.players.len());
        for (id, p) in self.players.iter().enumerate() {
            let (center, radii) = self.ellipsoid(p);
            let pts = Self::silhouette_points(center, radii);
            let sbox = Self::enclose(pts.iter().map(|&q| self.student.project(q)))
                .filter(|b| b.cx >= 0.0 && b.cy >= 0.0 && b.cx < n && b.cy < n);
            let tbox_full = Self::enclose(pts.iter().map(|&q| self.teacher.project(q)));
            let tbox = tbox_full.and_then(|b| {
                if b.cx < 0.0 || b.cy < 0.0 || b.cx >= tw as f64 || b.cy >= th as f64 {
                    return None;
                }
                Some(BBox::from_corners(
                    b.x0().max(0.0),
                    b.y0().max(0.0),
                    b.x1().min(tw as f64),
                    b.y1().min(th as f64),
                    1.0,
                ))
            });
            if let Some(b) = &sbox {
                let cam = &self.student;
                Self::paint_player(&mut student, b, cam.position, |q| cam.ray(q), center, radii, p, &mut zs);
            }
            if let Some(b) = tbox.as_ref().filter(|_| self.render_teacher) {
                let cam = &self.teacher;
                Self::paint_player(&mut teacher, b, cam.position, |q| Some(cam.ray(q)), center, radii, p, &mut zt);
            }
            players.push(PlayerGt {
                id,
                position: p.pos,
                moving: p.pause_left <= 0.0 && p.speed > 0.0,
                student: sbox,
                teacher: tbox,
            });
        }
        self.add_noise(&mut student, 2 * index as u64);
        if self.render_teacher {
            self.add_noise(&mut teacher, 2 * index as u64 + 1);
        }
        self.advance();
        self.index += 1;
        SimFrame {
            index,
            student,
            teacher,
            gt: GroundTruthFrame { t, players },
        }
    }
}

impl Iterator for Simulator {
    type Item = SimFrame;
    fn next(&mut self) -> Option<SimFrame> {
        Some(self.step())
    }
}

/// A whole recording held in memory.
pub struct SimRun {
    pub student: Vec<Frame>,
    pub teacher: Vec<Frame>,
    pub gt: Vec<GroundTruthFrame>,
    pub homography: Homography,
}

pub fn simulate(cfg: WorldConfig, duration: f64, fps: f64) -> Result<SimRun> {
    let mut sim = Simulator::new(cfg, fps)?;
    let n = (duration * fps).round() as usize;
    let mut run = SimRun {
        student: Vec::with_capacity(n),
        teacher: Vec::with_capacity(n),
        gt: Vec::with_capacity(n),
        homography: sim.true_homography(),
    };
    for _ in 0..n {
        let f = sim.step();
        run.student.push(f.student);
        run.teacher.push(f.teacher);
        run.gt.push(f.gt);
    }
    Ok(run)
}

/// Teacher-view boxes at one instant, jittered and randomly dropped.
pub fn teacher_oracle<R: Rng + ?Sized>(gt: &GroundTruthFrame, noise: &TeacherNoise, rng: &mut R) -> Vec<BBox> {
    let center = Normal::new(0.0, noise.center_sigma.max(0.0)).expect("valid sigma");
    let size = Normal::new(0.0, noise.size_sigma.max(0.0)).expect("valid sigma");
    gt.players
        .iter()
        .filter_map(|p| p.teacher)
        .filter_map(|b| {
            if noise.drop_prob > 0.0 && rng.random_bool(noise.drop_prob.min(1.0)) {
                return None;
            }
            let (dx, dy) = if noise.center_sigma > 0.0 {
                (center.sample(rng), center.sample(rng))
            } else {
                (0.0, 0.0)
            };
            let (sw, sh) = if noise.size_sigma > 0.0 {
                ((1.0 + size.sample(rng)).max(0.2), (1.0 + size.sample(rng)).max(0.2))
            } else {
                (1.0, 1.0)
            };
            Some(BBox::new(b.cx + dx, b.cy + dy, b.w * sw, b.h * sh, 1.0))
        })
        .collect()
}
