//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment. List-valued keys take
//! comma-separated values. Keys not listed in [`KEYS`] are rejected, as are
//! repeated keys. Command-line flags are applied as overrides on top of the
//! file and go through the same parser.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use maskdyn::dynamics::SnapshotPlan;
use maskdyn::mask::{MaskGraph, MaskKind};
use maskdyn::Mode;
use serde::Serialize;

use crate::CliError;

/// Every accepted key with a one-line description (printed by `maskdyn keys`).
pub const KEYS: &[(&str, &str)] = &[
    (
        "mask",
        "complete | causal | window | unidir_window | custom; comma list for sweeps",
    ),
    ("width", "window width for window masks (default 1)"),
    (
        "mask_file",
        "mask file for custom masks: token count, then one 1-based `j i` pair per line",
    ),
    ("n", "number of tokens (default 16)"),
    ("d", "token dimension (default 32)"),
    ("steps", "number of layers T (default 64)"),
    (
        "mode",
        "san | post_ln | pre_ln | pre_ln_normalized; comma list for sweeps",
    ),
    (
        "schedule",
        "random_bounded | random_orthogonal | shared_qk | jordan (default random_bounded)",
    ),
    ("qk_norm", "spectral-norm cap on W_Q and W_K (default 1)"),
    ("temperature", "d_QK; comma list for sweeps (default d)"),
    ("w", "Jordan parameter of the value matrix"),
    ("k", "Jordan block size (default d)"),
    ("signs", "equilibrium signs, e.g. +,-,+ (default all +)"),
    ("seeds", "a count `10`, a range `3..7` or a list `1,4,9`"),
    (
        "init",
        "sphere | hemisphere | counterexample (default sphere)",
    ),
    ("snapshots", "none | all | every:K (default none)"),
    ("oscillation", "record column oscillations: true | false"),
    ("theorem", "1 | 2 | corollary_1 | 3"),
    (
        "out_dir",
        "output directory (default $MASKDYN_OUT_DIR, else ./maskdyn-out)",
    ),
];

pub const OUT_DIR_ENV: &str = "MASKDYN_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "maskdyn-out";

/// Raw key-value pairs, in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig(BTreeMap<String, String>);

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut raw = RawConfig::default();
        for (k, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                CliError::usage(format!("config line {}: expected `key = value`", k + 1))
            })?;
            let key = key.trim();
            check_key(key).map_err(|e| CliError::usage(format!("config line {}: {e}", k + 1)))?;
            if raw
                .0
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(CliError::usage(format!(
                    "config line {}: key {key:?} repeated",
                    k + 1
                )));
            }
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets `key`, replacing any value from the file.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), CliError> {
        check_key(key).map_err(CliError::usage)?;
        self.0.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Applies `key=value` strings.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for pair in pairs {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("override {pair:?} is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::usage(format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                split_list(v)
                    .map(|item| {
                        item.parse::<T>()
                            .map_err(|e| CliError::usage(format!("{key}: {item:?}: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }
}

fn check_key(key: &str) -> Result<(), String> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(format!("unknown key {key:?}"))
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskChoice {
    Complete,
    Causal,
    Window,
    UnidirWindow,
    Custom,
}

impl MaskChoice {
    pub fn label(self) -> &'static str {
        match self {
            MaskChoice::Complete => "complete",
            MaskChoice::Causal => "causal",
            MaskChoice::Window => "window",
            MaskChoice::UnidirWindow => "unidir_window",
            MaskChoice::Custom => "custom",
        }
    }
}

impl FromStr for MaskChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "complete" => Ok(MaskChoice::Complete),
            "causal" => Ok(MaskChoice::Causal),
            "window" | "sliding_window" => Ok(MaskChoice::Window),
            "unidir_window" | "unidirectional_sliding_window" => Ok(MaskChoice::UnidirWindow),
            "custom" => Ok(MaskChoice::Custom),
            other => Err(format!(
                "unknown mask {other:?} (expected complete, causal, window, unidir_window or custom)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleChoice {
    /// Fresh Gaussian weights per layer, `||W_V|| = 1`.
    RandomBounded,
    /// Fresh Gaussian query/key per layer, Haar-orthogonal `W_V`.
    RandomOrthogonal,
    /// One layer repeated: `W_Q = W_K` Gaussian, Haar-orthogonal `W_V`.
    SharedQk,
    /// `W_Q = W_K = 0`, Jordan-block `W_V`.
    Jordan,
}

impl FromStr for ScheduleChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random_bounded" => Ok(ScheduleChoice::RandomBounded),
            "random_orthogonal" => Ok(ScheduleChoice::RandomOrthogonal),
            "shared_qk" => Ok(ScheduleChoice::SharedQk),
            "jordan" => Ok(ScheduleChoice::Jordan),
            other => Err(format!(
                "unknown schedule {other:?} (expected random_bounded, random_orthogonal, shared_qk or jordan)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitChoice {
    Sphere,
    Hemisphere,
    Counterexample,
}

impl FromStr for InitChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sphere" => Ok(InitChoice::Sphere),
            "hemisphere" => Ok(InitChoice::Hemisphere),
            "counterexample" => Ok(InitChoice::Counterexample),
            other => Err(format!(
                "unknown init {other:?} (expected sphere, hemisphere or counterexample)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Theorem {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "corollary_1")]
    Corollary1,
    #[serde(rename = "3")]
    Three,
}

impl FromStr for Theorem {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "1" => Ok(Theorem::One),
            "2" => Ok(Theorem::Two),
            "corollary_1" | "c1" => Ok(Theorem::Corollary1),
            "3" => Ok(Theorem::Three),
            other => Err(format!(
                "unknown theorem {other:?} (expected 1, 2, corollary_1 or 3)"
            )),
        }
    }
}

fn parse_seeds(v: &str) -> Result<Vec<u64>, String> {
    let v = v.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = v.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
        (a..b).collect()
    } else if v.contains(',') {
        split_list(v)
            .map(|s| s.parse().map_err(|e| format!("{s:?}: {e}")))
            .collect::<Result<_, _>>()?
    } else if v.is_empty() {
        Vec::new()
    } else {
        let count: u64 = v.parse().map_err(|e| format!("{v:?}: {e}"))?;
        (0..count).collect()
    };
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err("seed list has duplicates".into());
    }
    Ok(seeds)
}

fn parse_snapshots(v: &str) -> Result<SnapshotPlan, String> {
    match v {
        "none" => Ok(SnapshotPlan::None),
        "all" => Ok(SnapshotPlan::All),
        _ => match v.strip_prefix("every:").map(str::parse::<usize>) {
            Some(Ok(k)) if k > 0 => Ok(SnapshotPlan::Every(k)),
            _ => Err(format!(
                "snapshots = {v:?} (expected none, all or every:K with K > 0)"
            )),
        },
    }
}

fn parse_sign(s: &str) -> Result<i8, String> {
    match s {
        "+" | "+1" | "1" => Ok(1),
        "-" | "-1" => Ok(-1),
        other => Err(format!("sign {other:?} (expected + or -)")),
    }
}

fn snapshot_label(plan: &SnapshotPlan) -> String {
    match plan {
        SnapshotPlan::None => "none".into(),
        SnapshotPlan::All => "all".into(),
        SnapshotPlan::Every(k) => format!("every:{k}"),
        SnapshotPlan::At(steps) => steps
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(","),
    }
}

/// Validated configuration. Serializes to the echo stored in JSON outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub masks: Vec<MaskChoice>,
    pub width: usize,
    pub mask_file: Option<PathBuf>,
    pub n: usize,
    pub d: usize,
    pub steps: usize,
    #[serde(serialize_with = "modes_as_strings")]
    pub modes: Vec<Mode>,
    pub schedule: ScheduleChoice,
    pub qk_norm: f64,
    pub temperatures: Vec<f64>,
    pub w: Option<f64>,
    pub k: Option<usize>,
    pub signs: Option<Vec<i8>>,
    pub seeds: Vec<u64>,
    pub init: InitChoice,
    #[serde(serialize_with = "snapshots_as_string")]
    pub snapshots: SnapshotPlan,
    pub oscillation: bool,
    pub theorem: Option<Theorem>,
    pub out_dir: PathBuf,
}

fn modes_as_strings<S: serde::Serializer>(modes: &[Mode], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(modes.iter().map(|m| m.to_string()))
}

fn snapshots_as_string<S: serde::Serializer>(plan: &SnapshotPlan, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&snapshot_label(plan))
}

impl ExperimentConfig {
    /// Resolves defaults and checks every value. `env_out_dir` is the value
    /// of [`OUT_DIR_ENV`], if set.
    pub fn from_raw(raw: &RawConfig, env_out_dir: Option<&str>) -> Result<Self, CliError> {
        fn usage(key: &'static str) -> impl Fn(String) -> CliError {
            move |e| CliError::usage(format!("{key}: {e}"))
        }
        let masks = raw
            .list::<MaskChoice>("mask")?
            .unwrap_or_else(|| vec![MaskChoice::Complete]);
        let mask_file = raw.get("mask_file").map(PathBuf::from);
        let mut n = raw.parsed::<usize>("n")?;
        if masks.contains(&MaskChoice::Custom) {
            let path = mask_file
                .as_ref()
                .ok_or_else(|| CliError::usage("mask = custom needs mask_file"))?;
            let g =
                MaskGraph::load(path).map_err(|e| CliError::usage(format!("mask_file: {e}")))?;
            match n {
                Some(n) if n != g.n() => {
                    return Err(CliError::usage(format!(
                        "n = {n} but {} has {} tokens",
                        path.display(),
                        g.n()
                    )))
                }
                _ => n = Some(g.n()),
            }
        }
        let n = n.unwrap_or(16);
        let d = raw.parsed::<usize>("d")?.unwrap_or(32);
        let temperatures = raw
            .list::<f64>("temperature")?
            .unwrap_or_else(|| vec![d as f64]);
        let cfg = ExperimentConfig {
            masks,
            width: raw.parsed("width")?.unwrap_or(1),
            mask_file,
            n,
            d,
            steps: raw.parsed("steps")?.unwrap_or(64),
            modes: raw.list::<Mode>("mode")?.unwrap_or_else(|| vec![Mode::San]),
            schedule: raw
                .parsed("schedule")?
                .unwrap_or(ScheduleChoice::RandomBounded),
            qk_norm: raw.parsed("qk_norm")?.unwrap_or(1.0),
            temperatures,
            w: raw.parsed("w")?,
            k: raw.parsed("k")?,
            signs: raw
                .get("signs")
                .map(|v| split_list(v).map(parse_sign).collect::<Result<Vec<_>, _>>())
                .transpose()
                .map_err(usage("signs"))?,
            seeds: parse_seeds(raw.get("seeds").unwrap_or("1")).map_err(usage("seeds"))?,
            init: raw.parsed("init")?.unwrap_or(InitChoice::Sphere),
            snapshots: raw
                .get("snapshots")
                .map(parse_snapshots)
                .transpose()
                .map_err(usage("snapshots"))?
                .unwrap_or_default(),
            oscillation: raw.parsed("oscillation")?.unwrap_or(false),
            theorem: raw.parsed("theorem")?,
            out_dir: raw
                .get("out_dir")
                .or(env_out_dir)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let fail = |msg: String| Err(CliError::usage(msg));
        if self.masks.is_empty() {
            return fail("mask list is empty".into());
        }
        if self.modes.is_empty() {
            return fail("mode list is empty".into());
        }
        if self.temperatures.is_empty() {
            return fail("temperature list is empty".into());
        }
        if self.n == 0 || self.d == 0 {
            return fail(format!(
                "n and d must be positive (n = {}, d = {})",
                self.n, self.d
            ));
        }
        if self.width == 0 {
            return fail("width must be at least 1".into());
        }
        if let Some(t) = self
            .temperatures
            .iter()
            .find(|t| !(**t > 0.0 && t.is_finite()))
        {
            return fail(format!("temperature must be positive, got {t}"));
        }
        if !(self.qk_norm >= 0.0 && self.qk_norm.is_finite()) {
            return fail(format!("qk_norm must be nonnegative, got {}", self.qk_norm));
        }
        if let Some(w) = self.w {
            if !(w > 1.0) {
                return fail("w must exceed 1".into());
            }
        }
        if let Some(k) = self.k {
            if k == 0 || k > self.d {
                return fail(format!("k must lie in 1..={}, got {k}", self.d));
            }
        }
        let needs_w = self.schedule == ScheduleChoice::Jordan
            || self.init == InitChoice::Counterexample
            || self.theorem == Some(Theorem::Three);
        if needs_w && self.w.is_none() {
            return fail(
                "w is required for the jordan schedule, counterexample init and theorem 3".into(),
            );
        }
        if self.init == InitChoice::Counterexample && (self.n < 2 || self.d < 2) {
            return fail("counterexample init needs n >= 2 and d >= 2".into());
        }
        Ok(())
    }

    /// The single mask of a run; rejects lists.
    pub fn single_mask(&self) -> Result<MaskChoice, CliError> {
        match self.masks.as_slice() {
            [m] => Ok(*m),
            _ => Err(CliError::usage("this command takes exactly one mask")),
        }
    }

    pub fn single_mode(&self) -> Result<Mode, CliError> {
        match self.modes.as_slice() {
            [m] => Ok(*m),
            _ => Err(CliError::usage("this command takes exactly one mode")),
        }
    }

    pub fn single_temperature(&self) -> Result<f64, CliError> {
        match self.temperatures.as_slice() {
            [t] => Ok(*t),
            _ => Err(CliError::usage(
                "this command takes exactly one temperature",
            )),
        }
    }

    pub fn build_mask(&self, choice: MaskChoice) -> Result<MaskGraph, CliError> {
        let kind = match choice {
            MaskChoice::Complete => MaskKind::Complete,
            MaskChoice::Causal => MaskKind::Causal,
            MaskChoice::Window => MaskKind::SlidingWindow { width: self.width },
            MaskChoice::UnidirWindow => MaskKind::UnidirectionalSlidingWindow { width: self.width },
            MaskChoice::Custom => {
                let path = self
                    .mask_file
                    .as_ref()
                    .ok_or_else(|| CliError::usage("custom mask needs mask_file"))?;
                return MaskGraph::load(path).map_err(|e| CliError::usage(e.to_string()));
            }
        };
        MaskGraph::build(&kind, self.n).map_err(|e| CliError::usage(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::from_raw(&RawConfig::parse(text)?, None)
    }

    #[test]
    fn defaults() {
        let c = cfg("").unwrap();
        assert_eq!((c.n, c.d, c.steps), (16, 32, 64));
        assert_eq!(c.temperatures, vec![32.0]);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.out_dir, PathBuf::from("maskdyn-out"));
    }

    #[test]
    fn comments_lists_and_seed_forms() {
        let c = cfg("# sweep\nmask = complete, causal\nmode=san,post_ln # both\nseeds = 3..6\n")
            .unwrap();
        assert_eq!(c.masks, vec![MaskChoice::Complete, MaskChoice::Causal]);
        assert_eq!(c.modes, vec![Mode::San, Mode::PostLn]);
        assert_eq!(c.seeds, vec![3, 4, 5]);
        assert_eq!(cfg("seeds = 4").unwrap().seeds, vec![0, 1, 2, 3]);
        assert_eq!(cfg("seeds = 9, 2").unwrap().seeds, vec![9, 2]);
    }

    #[test]
    fn rejections() {
        let msg = |text: &str| cfg(text).unwrap_err().to_string();
        assert!(msg("depth = 3").contains("unknown key \"depth\""));
        assert!(msg("n = 3\nn = 4").contains("repeated"));
        assert!(msg("seeds = 5..5").contains("seed list is empty"));
        assert!(msg("seeds = 0").contains("seed list is empty"));
        assert!(msg("w = 1").contains("w must exceed 1"));
        assert!(msg("mode = post").contains("unknown mode"));
        assert!(msg("schedule = jordan").contains("w is required"));
        assert!(msg("just text").contains("expected `key = value`"));
    }

    #[test]
    fn overrides_win_and_env_is_fallback() {
        let mut raw = RawConfig::parse("n = 4\nout_dir = a").unwrap();
        raw.apply_overrides(&["n=7".into()]).unwrap();
        let c = ExperimentConfig::from_raw(&raw, Some("b")).unwrap();
        assert_eq!(c.n, 7);
        assert_eq!(c.out_dir, PathBuf::from("a"));
        let c = ExperimentConfig::from_raw(&RawConfig::default(), Some("b")).unwrap();
        assert_eq!(c.out_dir, PathBuf::from("b"));
        assert!(raw.apply_overrides(&["bogus=1".into()]).is_err());
    }
}
