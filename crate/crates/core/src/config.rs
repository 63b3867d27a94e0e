//! Experiment configuration: one JSON document with a section per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::distill::DistillParams;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::motion::VibeParams;
use crate::sim::{TeacherNoise, WorldConfig};
use crate::student::StudentParams;
use crate::supervise::GateMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub world: WorldConfig,
    /// Seconds of video.
    pub duration: f64,
    pub teacher_noise: TeacherNoise,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            duration: 600.0,
            teacher_noise: TeacherNoise::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryParams {
    /// Registration file as written by `simulate`; when unset, runs look for
    /// `homography.json` in the input directory.
    pub homography_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionParams {
    /// Side of the square dilation kernel, odd.
    pub dilation: usize,
}

impl Default for MotionParams {
    fn default() -> Self {
        Self { dilation: 11 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateParams {
    pub mode: GateMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sim: SimParams,
    pub geometry: GeometryParams,
    pub vibe: VibeParams,
    pub motion: MotionParams,
    pub augment: AugmentParams,
    pub gate: GateParams,
    pub student: StudentParams,
    pub distill: DistillParams,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sim: SimParams::default(),
            geometry: GeometryParams::default(),
            vibe: VibeParams::default(),
            motion: MotionParams::default(),
            augment: AugmentParams::default(),
            gate: GateParams::default(),
            student: StudentParams::default(),
            distill: DistillParams::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| format!("line {} column {}", e.line(), e.column()));
    Error::Config { key, msg }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |key: &str, r: Result<()>| {
            r.map_err(|e| Error::Config {
                key: key.into(),
                msg: e.to_string(),
            })
        };
        wrap("sim.world", self.sim.world.validate())?;
        if !(self.sim.duration > 0.0) {
            return Err(Error::Config {
                key: "sim.duration".into(),
                msg: "must be positive".into(),
            });
        }
        wrap("vibe", self.vibe.validate())?;
        if self.motion.dilation.is_multiple_of(2) {
            return Err(Error::Config {
                key: "motion.dilation".into(),
                msg: "must be odd".into(),
            });
        }
        wrap("augment", self.augment.validate())?;
        wrap("student", self.student.validate())?;
        wrap("distill", self.distill.validate())?;
        wrap("eval", self.eval.validate())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.gate.mode = GateMode::All;
        cfg.augment.enabled = false;
        cfg.sim.world.players = 7;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::from_json(&back.to_json()).unwrap(), back);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = RunConfig::from_json(r#"{"gate": {"mode": "none"}, "seed": 4}"#).unwrap();
        assert_eq!(cfg.gate.mode, GateMode::None);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.eval, EvalConfig::default());
    }

    #[test]
    fn unknown_keys_name_the_key() {
        match RunConfig::from_json(r#"{"augment": {"alpah": 0.5}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "alpah"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_json(r#"{"motion": {"dilation": 4}}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "motion.dilation"),
            other => panic!("{other:?}"),
        }
    }
}
