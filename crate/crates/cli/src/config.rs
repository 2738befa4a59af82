//! Flat `key=value` configuration files and flag/file/default resolution.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use regibox::boxnet::Activation;
use regibox::eval::{Method, Protocol};
use regibox::synth::MeanLayout;

use crate::error::{usage, CliResult};

/// Every key any subcommand understands. A file may carry keys meant for other
/// subcommands so one file can drive the whole pipeline.
pub const KNOWN_KEYS: &[&str] = &[
    "data",
    "out",
    "seed",
    "dim",
    "classes",
    "per_class",
    "sigma",
    "class_sigmas",
    "eval_per_class",
    "shift",
    "layout",
    "alpha",
    "stage1_epochs",
    "stage1_batch_size",
    "stage1_lr",
    "stage1_weight_decay",
    "hidden",
    "activation",
    "temperature",
    "raw_midpoint",
    "samples",
    "probe_epochs",
    "probe_batch_size",
    "probe_lr",
    "probe_weight_decay",
    "bias",
    "select_on_val",
    "boxnet",
    "method",
    "protocol",
    "seeds",
    "probe",
    "split",
    "epsilon",
    "dims",
];

/// A value that can appear in a config file and be echoed back unchanged.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(f64, usize, u64, bool, String, Protocol, Method);

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(PathBuf::from(s))
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Activation {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        match self {
            Activation::Identity => "identity",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
        }
        .into()
    }
}

impl ConfigValue for MeanLayout {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "orthogonal" => Ok(MeanLayout::Orthogonal),
            "random" => Ok(MeanLayout::Random),
            other => Err(format!("unknown layout {other:?} (orthogonal or random)")),
        }
    }
    fn render(&self) -> String {
        match self {
            MeanLayout::Orthogonal => "orthogonal",
            MeanLayout::Random => "random",
        }
        .into()
    }
}

/// Comma-separated list.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: ConfigValue> ConfigValue for List<T> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',').map(|p| T::parse_value(p.trim())).collect::<Result<_, _>>().map(List)
    }
    fn render(&self) -> String {
        self.0.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

impl<T: ConfigValue> std::str::FromStr for List<T> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::parse_value(s)
    }
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are skipped;
/// dashes in keys are read as underscores.
pub fn parse_config(text: &str, origin: &Path) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(usage(format!("{}:{}: expected key=value", origin.display(), i + 1)));
        };
        let key = k.trim().replace('-', "_");
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(usage(format!("{}:{}: unknown key {key:?}", origin.display(), i + 1)));
        }
        if map.insert(key.clone(), v.trim().to_owned()).is_some() {
            return Err(usage(format!("{}:{}: duplicate key {key:?}", origin.display(), i + 1)));
        }
    }
    Ok(map)
}

/// Resolves each setting as flag, else file, else default, and remembers the result.
#[derive(Debug, Default)]
pub struct Resolver {
    file: BTreeMap<String, String>,
    origin: Option<PathBuf>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(config: Option<&Path>) -> CliResult<Self> {
        let Some(path) = config else {
            return Ok(Resolver::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Ok(Resolver {
            file: parse_config(&text, path)?,
            origin: Some(path.to_owned()),
            resolved: Vec::new(),
        })
    }

    fn file_value<T: ConfigValue>(&self, key: &str) -> CliResult<Option<T>> {
        match self.file.get(key) {
            None => Ok(None),
            Some(s) => T::parse_value(s).map(Some).map_err(|e| {
                let origin = self.origin.as_deref().unwrap_or(Path::new("config"));
                usage(format!("{}: bad value for {key}: {e}", origin.display()))
            }),
        }
    }

    fn record<T: ConfigValue>(&mut self, key: &str, value: &T) {
        self.resolved.push((key.to_owned(), value.render()));
    }

    pub fn value<T: ConfigValue>(&mut self, key: &str, flag: Option<T>, default: T) -> CliResult<T> {
        let v = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn optional<T: ConfigValue>(&mut self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    pub fn required<T: ConfigValue>(&mut self, key: &str, flag: Option<T>) -> CliResult<T> {
        self.optional(key, flag)?
            .ok_or_else(|| usage(format!("missing required setting {key} (flag --{} or config key)", key.replace('_', "-"))))
    }

    /// The resolved settings as a config file that reproduces this run.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.resolved {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
