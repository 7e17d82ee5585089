//! Run configuration: a registry of typed keys with defaults and ranges,
//! loaded from `[section]` / `key = value` text files.
//!
//! Every key must be declared in [`registry`]; unknown keys are rejected.
//! Values can be overridden from the environment as
//! `NFVS_<SECTION>_<KEY>=<value>` (arrays as comma-separated numbers).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Vector3};

use crate::control::ControlConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::kinematics::{DhRow, KinematicChain};

pub const ENV_PREFIX: &str = "NFVS_";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kind {
    Float { min: f64, max: f64 },
    Int { min: i64, max: i64 },
    Bool,
    /// Fixed-length (or chain-length when `len` is `None`) float array.
    Floats { len: Option<usize>, min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(f64),
    Int(i64),
    Bool(bool),
    Floats(Vec<f64>),
}

impl Value {
    fn render(&self) -> String {
        match self {
            Value::Float(v) => fmt_float(*v),
            Value::Int(v) => v.to_string(),
            Value::Bool(v) => v.to_string(),
            Value::Floats(v) => format!("[{}]", v.iter().map(|x| fmt_float(*x)).collect::<Vec<_>>().join(", ")),
        }
    }
}

fn fmt_float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Debug, Clone)]
pub struct KeySpec {
    pub name: &'static str,
    pub kind: Kind,
    pub default: Value,
    pub help: &'static str,
}

fn f(name: &'static str, default: f64, min: f64, max: f64, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind: Kind::Float { min, max },
        default: Value::Float(default),
        help,
    }
}

fn i(name: &'static str, default: i64, min: i64, max: i64, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind: Kind::Int { min, max },
        default: Value::Int(default),
        help,
    }
}

fn b(name: &'static str, default: bool, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind: Kind::Bool,
        default: Value::Bool(default),
        help,
    }
}

fn fs(name: &'static str, default: &[f64], len: Option<usize>, min: f64, max: f64, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        kind: Kind::Floats { len, min, max },
        default: Value::Floats(default.to_vec()),
        help,
    }
}

/// All configuration keys, in the order they appear in dumped files.
pub fn registry() -> Vec<KeySpec> {
    let h = PI / 2.0;
    vec![
        // Franka-like arm, standard DH form.
        fs("chain.a", &[0.0, 0.0, 0.0825, -0.0825, 0.0, 0.088, 0.0], None, -2.0, 2.0, "DH link lengths a (m)"),
        fs("chain.alpha", &[-h, h, h, -h, h, h, 0.0], None, -PI, PI, "DH link twists alpha (rad)"),
        fs("chain.d", &[0.333, 0.0, 0.316, 0.0, 0.384, 0.0, 0.107], None, -2.0, 2.0, "DH link offsets d (m)"),
        fs("chain.theta_offset", &[0.0; 7], None, -PI, PI, "DH joint angle offsets (rad)"),
        fs("chain.lower", &[-2.8973, -1.7628, -2.8973, -3.0718, -2.8973, -0.0175, -2.8973], None, -7.0, 7.0, "joint lower limits (rad)"),
        fs("chain.upper", &[2.8973, 1.7628, 2.8973, -0.0698, 2.8973, 3.7525, 2.8973], None, -7.0, 7.0, "joint upper limits (rad)"),
        fs("chain.velocity_limit", &[2.175, 2.175, 2.175, 2.175, 2.61, 2.61, 2.61], None, 1e-3, 100.0, "joint velocity limits (rad/s)"),
        i("camera.width", 64, 8, 4096, "image width (px)"),
        i("camera.height", 64, 8, 4096, "image height (px)"),
        i("camera.channels", 3, 1, 3, "image channels (1 or 3)"),
        f("camera.fx", 55.425625842204074, 1e-3, 1e5, "focal length x (px)"),
        f("camera.fy", 55.425625842204074, 1e-3, 1e5, "focal length y (px)"),
        f("camera.cx", 32.0, 0.0, 4096.0, "principal point x (px)"),
        f("camera.cy", 32.0, 0.0, 4096.0, "principal point y (px)"),
        fs("camera.mount_translation", &[0.04, 0.0, 0.05], Some(3), -1.0, 1.0, "camera origin in the end-effector frame (m)"),
        fs("camera.mount_rpy", &[0.0, 0.0, -PI / 4.0], Some(3), -PI, PI, "camera orientation in the end-effector frame, roll/pitch/yaw (rad)"),
        fs("sim.box_size", &[0.12, 0.08, 0.05], Some(3), 0.005, 1.0, "box extents x/y/z (m)"),
        fs("sim.workspace_x", &[0.40, 0.56], Some(2), -2.0, 2.0, "box center x range (m)"),
        fs("sim.workspace_y", &[-0.08, 0.08], Some(2), -2.0, 2.0, "box center y range (m)"),
        fs("sim.yaw_range", &[-PI, PI], Some(2), -PI, PI, "box yaw range (rad)"),
        fs("sim.brightness", &[0.6, 1.4], Some(2), 0.3, 1.7, "brightness gain range"),
        fs("sim.light_elevation_deg", &[35.0, 85.0], Some(2), 0.0, 90.0, "light elevation range (deg)"),
        fs("sim.texture_scale", &[0.02, 0.08], Some(2), 1e-3, 1.0, "background texture period range (m)"),
        f("sim.desired_height", 0.30, 0.05, 2.0, "desired camera height above the box top (m)"),
        f("control.gain", 1.0, 1e-6, 100.0, "VS gain lambda (1/s)"),
        f("control.damping", 0.01, 0.0, 10.0, "damping sigma of the least-squares inverse"),
        f("control.clamp", 1.5, 1e-6, 100.0, "per-joint command clamp (rad/s)"),
        f("control.period", 1.0 / 30.0, 1e-4, 1.0, "control period T (s)"),
        i("data.demos", 50, 1, 1_000_000, "number of task demonstrations"),
        f("data.split", 0.835, 1e-6, 1.0 - 1e-6, "fraction of demonstrations assigned to training"),
        i("data.seed", 7, 0, i64::MAX, "master seed for data collection"),
        fs("data.start_translation", &[0.15, 0.15, 0.10], Some(3), 0.0, 1.0, "random start-pose translation half-range (m)"),
        f("data.start_rotation_deg", 20.0, 0.0, 90.0, "random start-pose roll/pitch/yaw half-range (deg)"),
        f("data.phase_timeout", 15.0, 0.1, 600.0, "timeout of each oracle phase (s)"),
        f("data.convergence_tol", 1e-3, 1e-9, 1.0, "oracle convergence tolerance on max feature error"),
        i("train.epochs", 100, 1, 100_000, "training epochs"),
        f("train.lr", 1e-4, 1e-9, 1.0, "Adam learning rate"),
        i("train.batch_size", 16, 2, 4096, "samples per batch (even: pairs of consecutive frames)"),
        f("train.w_ci", 1.0, 0.0, 1e6, "control-imitation loss weight"),
        f("train.w_ae", 1.0, 0.0, 1e6, "auto-encoding loss weight"),
        f("train.w_sc", 1.0, 0.0, 1e6, "state-consistency loss weight"),
        f("train.w_r", 1.0, 0.0, 1e6, "regularization loss weight"),
        b("train.detach_interaction", false, "treat the interaction matrix as constant in the imitation gradient"),
        f("train.alpha", 1.5, 1e-3, 100.0, "feature output scale"),
        f("train.visibility_bound", 1.0, 1e-3, 100.0, "bound enforced on reference-image features by the regularizer"),
        f("train.noise_std", 0.02, 0.0, 1.0, "augmentation gaussian noise std"),
        f("train.brightness_delta", 0.1, 0.0, 1.0, "augmentation brightness half-range"),
        fs("train.contrast_delta", &[-0.2, 0.2], Some(2), -1.0, 10.0, "augmentation contrast factor range, as an offset from 1"),
        i("train.seed", 1, 0, i64::MAX, "master seed for training"),
        i("train.checkpoint_every", 10, 0, 100_000, "epochs between checkpoints (0 = best only)"),
        f("train.e2e_ae_weight", 0.0, 0.0, 1e6, "auto-encoding weight of the end-to-end baseline"),
        fs("train.channels", &[8.0, 16.0, 32.0, 64.0], Some(4), 1.0, 512.0, "encoder channel progression"),
        i("train.head_width", 64, 1, 4096, "hidden width of the head layers"),
        f("eval.duration", 20.0, 0.1, 3600.0, "episode time budget (s)"),
        f("eval.pe_threshold", 0.10, 1e-6, 10.0, "position error success threshold (m)"),
        f("eval.oe_threshold", 0.26, 1e-6, PI, "orientation error success threshold (rad)"),
        b("eval.stop_at_convergence", true, "stop the episode when both thresholds are met"),
        i("eval.episodes", 50, 1, 1_000_000, "episodes per benchmark"),
        i("eval.seed", 1000, 0, i64::MAX, "master seed for evaluation episodes"),
        fs("eval.initial_posture", &[0.0509, -0.3563, 0.0184, -2.2414, 0.1354, 1.8114, 0.8209], None, -7.0, 7.0, "joint configuration at the start of each episode (rad)"),
    ]
}

/// A validated set of configuration values.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, Value>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: registry().into_iter().map(|k| (k.name, k.default)).collect(),
        }
    }
}

fn spec_for(name: &str) -> Option<KeySpec> {
    registry().into_iter().find(|k| k.name == name)
}

fn line_of(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (n, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') && t.ends_with(']') {
            current = t[1..t.len() - 1].trim().to_string();
        } else if current == section && t.split('=').next().map(str::trim) == Some(key) {
            return n + 1;
        }
    }
    0
}

fn from_toml(kind: Kind, v: &toml::Value) -> Option<Value> {
    match (kind, v) {
        (Kind::Float { .. }, toml::Value::Float(x)) => Some(Value::Float(*x)),
        (Kind::Float { .. }, toml::Value::Integer(x)) => Some(Value::Float(*x as f64)),
        (Kind::Int { .. }, toml::Value::Integer(x)) => Some(Value::Int(*x)),
        (Kind::Bool, toml::Value::Boolean(x)) => Some(Value::Bool(*x)),
        (Kind::Floats { .. }, toml::Value::Array(items)) => items
            .iter()
            .map(|it| match it {
                toml::Value::Float(x) => Some(*x),
                toml::Value::Integer(x) => Some(*x as f64),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Value::Floats),
        _ => None,
    }
}

fn parse_text(kind: Kind, raw: &str) -> Option<Value> {
    let raw = raw.trim();
    match kind {
        Kind::Float { .. } => raw.parse().ok().map(Value::Float),
        Kind::Int { .. } => raw.parse().ok().map(Value::Int),
        Kind::Bool => match raw {
            "true" | "1" | "on" => Some(Value::Bool(true)),
            "false" | "0" | "off" => Some(Value::Bool(false)),
            _ => None,
        },
        Kind::Floats { .. } => raw
            .trim_start_matches('[')
            .trim_end_matches(']')
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse::<f64>().ok())
            .collect::<Option<Vec<_>>>()
            .map(Value::Floats),
    }
}

fn check_range(spec: &KeySpec, value: &Value, dof: usize) -> Result<()> {
    let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", spec.name)));
    match (spec.kind, value) {
        (Kind::Float { min, max }, Value::Float(v)) => {
            if !(v.is_finite() && *v >= min && *v <= max) {
                return bad(format!("{v} outside [{min}, {max}]"));
            }
        }
        (Kind::Int { min, max }, Value::Int(v)) => {
            if *v < min || *v > max {
                return bad(format!("{v} outside [{min}, {max}]"));
            }
        }
        (Kind::Bool, Value::Bool(_)) => {}
        (Kind::Floats { len, min, max }, Value::Floats(vs)) => {
            let want = len.unwrap_or(dof);
            if vs.len() != want {
                return bad(format!("expected {want} values, got {}", vs.len()));
            }
            if let Some(v) = vs.iter().find(|v| !(v.is_finite() && **v >= min && **v <= max)) {
                return bad(format!("{v} outside [{min}, {max}]"));
            }
        }
        _ => return bad("wrong value type".into()),
    }
    Ok(())
}

impl Config {
    /// Parses configuration text; keys not present keep their defaults.
    pub fn from_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("parse error: {e}")))?;
        let mut cfg = Config::default();
        for (section, body) in &table {
            let toml::Value::Table(entries) = body else {
                return Err(Error::Config(format!(
                    "line {}: top-level key `{section}` outside a section",
                    line_of(text, "", section)
                )));
            };
            for (key, raw) in entries {
                let name = format!("{section}.{key}");
                let line = line_of(text, section, key);
                let spec = spec_for(&name).ok_or_else(|| Error::Config(format!("line {line}: unknown key `{name}`")))?;
                let value = from_toml(spec.kind, raw)
                    .ok_or_else(|| Error::Config(format!("line {line}: `{name}` has the wrong type")))?;
                cfg.values.insert(spec.name, value);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_str(&text)
    }

    /// Applies `NFVS_<SECTION>_<KEY>` overrides from an iterator of
    /// environment variables.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        for (var, raw) in vars {
            let Some(rest) = var.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let Some((section, key)) = rest.split_once('_') else {
                continue;
            };
            let name = format!("{}.{}", section.to_lowercase(), key.to_lowercase());
            if spec_for(&name).is_none() {
                return Err(Error::Config(format!("environment variable {var}: unknown key `{name}`")));
            }
            self.set(&name, &raw)?;
        }
        self.validate()
    }

    /// Sets one key from its textual form (as used on the command line).
    pub fn set(&mut self, name: &str, raw: &str) -> Result<()> {
        let spec = spec_for(name).ok_or_else(|| Error::Config(format!("unknown key `{name}`")))?;
        let value = parse_text(spec.kind, raw).ok_or_else(|| Error::Config(format!("`{name}`: cannot parse `{raw}`")))?;
        self.values.insert(spec.name, value);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let dof = match self.values.get("chain.a") {
            Some(Value::Floats(v)) => v.len(),
            _ => 0,
        };
        for spec in registry() {
            check_range(&spec, &self.values[spec.name], dof)?;
        }
        self.chain()?;
        self.intrinsics()?;
        self.control()?;
        for name in [
            "sim.workspace_x",
            "sim.workspace_y",
            "sim.yaw_range",
            "sim.brightness",
            "sim.light_elevation_deg",
            "sim.texture_scale",
            "train.contrast_delta",
        ] {
            let r = self.floats(name);
            if r[0] > r[1] {
                return Err(Error::Config(format!("{name}: range [{}, {}] is not ordered", r[0], r[1])));
            }
        }
        if self.usize("train.batch_size") % 2 != 0 {
            return Err(Error::Config("train.batch_size must be even".into()));
        }
        let chain = self.chain()?;
        let q0 = self.initial_posture();
        if !chain.within_limits(&q0) {
            return Err(Error::Config("eval.initial_posture violates joint limits".into()));
        }
        Ok(())
    }

    pub fn f64(&self, name: &str) -> f64 {
        match self.values.get(name) {
            Some(Value::Float(v)) => *v,
            other => panic!("config key {name} is not a float: {other:?}"),
        }
    }

    pub fn usize(&self, name: &str) -> usize {
        match self.values.get(name) {
            Some(Value::Int(v)) => *v as usize,
            other => panic!("config key {name} is not an integer: {other:?}"),
        }
    }

    pub fn u64(&self, name: &str) -> u64 {
        self.usize(name) as u64
    }

    pub fn bool(&self, name: &str) -> bool {
        match self.values.get(name) {
            Some(Value::Bool(v)) => *v,
            other => panic!("config key {name} is not a bool: {other:?}"),
        }
    }

    pub fn floats(&self, name: &str) -> &[f64] {
        match self.values.get(name) {
            Some(Value::Floats(v)) => v,
            other => panic!("config key {name} is not a float array: {other:?}"),
        }
    }

    pub fn chain(&self) -> Result<KinematicChain> {
        let (a, alpha, d, off) = (
            self.floats("chain.a"),
            self.floats("chain.alpha"),
            self.floats("chain.d"),
            self.floats("chain.theta_offset"),
        );
        let rows = (0..a.len()).map(|j| DhRow::new(a[j], alpha[j], d[j], off[j])).collect();
        KinematicChain::new(
            rows,
            self.floats("chain.lower").to_vec(),
            self.floats("chain.upper").to_vec(),
            self.floats("chain.velocity_limit").to_vec(),
        )
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let k = CameraIntrinsics {
            fx: self.f64("camera.fx"),
            fy: self.f64("camera.fy"),
            cx: self.f64("camera.cx"),
            cy: self.f64("camera.cy"),
            width: self.usize("camera.width"),
            height: self.usize("camera.height"),
            channels: self.usize("camera.channels"),
        };
        k.validate()?;
        Ok(k)
    }

    /// Camera pose in the end-effector frame.
    pub fn mount(&self) -> Pose {
        let t = self.floats("camera.mount_translation");
        let r = self.floats("camera.mount_rpy");
        Pose::from_rpy(r[0], r[1], r[2], Vector3::new(t[0], t[1], t[2]))
    }

    pub fn control(&self) -> Result<ControlConfig> {
        let c = ControlConfig {
            gain: self.f64("control.gain"),
            damping: self.f64("control.damping"),
            clamp: self.f64("control.clamp"),
            period: self.f64("control.period"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn initial_posture(&self) -> DVector<f64> {
        DVector::from_column_slice(self.floats("eval.initial_posture"))
    }

    /// Serializes every key in registry order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for spec in registry() {
            let (sec, key) = spec.name.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "# {}", spec.help);
            let _ = writeln!(out, "{key} = {}", self.values[spec.name].render());
        }
        out
    }

    /// Help table listing every key with its default and valid range.
    pub fn help_table() -> String {
        let mut out = String::from("Configuration keys (file sections, or NFVS_<SECTION>_<KEY> env overrides):\n");
        for spec in registry() {
            let range = match spec.kind {
                Kind::Float { min, max } => format!("[{min}, {max}]"),
                Kind::Int { min, max } => format!("[{min}, {max}]"),
                Kind::Bool => "true|false".into(),
                Kind::Floats { len: Some(n), min, max } => format!("{n} x [{min}, {max}]"),
                Kind::Floats { len: None, min, max } => format!("dof x [{min}, {max}]"),
            };
            let _ = writeln!(
                out,
                "  {:<28} default {:<40} range {:<28} {}",
                spec.name,
                spec.default.render(),
                range,
                spec.help
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips_through_text() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let parsed = Config::from_str(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = Config::from_str("[train]\nepochs = 3\nepohcs = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("train.epohcs"), "{msg}");
    }

    #[test]
    fn out_of_range_is_rejected() {
        assert!(Config::from_str("[control]\ngain = -1.0\n").is_err());
        assert!(Config::from_str("[sim]\nbrightness = [0.1, 1.0]\n").is_err());
        assert!(Config::from_str("[train]\nbatch_size = 3\n").is_err());
    }

    #[test]
    fn wrong_type_is_rejected() {
        assert!(Config::from_str("[train]\nepochs = \"many\"\n").is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let mut cfg = Config::default();
        cfg.apply_env(vec![
            ("NFVS_TRAIN_EPOCHS".to_string(), "3".to_string()),
            ("NFVS_SIM_BOX_SIZE".to_string(), "0.1,0.1,0.1".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.usize("train.epochs"), 3);
        assert_eq!(cfg.floats("sim.box_size"), &[0.1, 0.1, 0.1]);
        assert!(cfg.apply_env(vec![("NFVS_TRAIN_NOPE".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn help_lists_every_key() {
        let help = Config::help_table();
        for spec in registry() {
            assert!(help.contains(spec.name), "{} missing", spec.name);
        }
    }

    #[test]
    fn initial_posture_is_reachable_and_in_limits() {
        let cfg = Config::default();
        let chain = cfg.chain().unwrap();
        assert!(chain.within_limits(&cfg.initial_posture()));
    }
}
