//! Key-value configuration files and flag/config/default resolution.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment
//! and blank lines are ignored. Keys are the long flag names without the
//! leading dashes. A flag given on the command line wins over the file, which
//! wins over the built-in default. The seed may also come from the `HMD_SEED`
//! environment variable, which ranks between the flag and the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::CliError;

pub const SEED_ENV: &str = "HMD_SEED";

/// Every key a configuration file may contain.
pub const KNOWN_KEYS: &[&str] = &[
    "answer-emb-dim",
    "batch-size",
    "bins",
    "dim",
    "features",
    "finetune-epochs",
    "finetune-lr",
    "human",
    "k",
    "keywords",
    "lstm-hidden-dim",
    "min-flips",
    "mlp-c-hidden",
    "mlp-m-hidden",
    "oversample",
    "p-flip",
    "patience",
    "pretrain-epochs",
    "pretrain-lr",
    "pretrain-split",
    "q-mean-dim",
    "qtype-emb-dim",
    "replicates",
    "same-image-test-fraction",
    "seed",
    "seeds",
    "status",
    "strict",
    "synthetic",
    "tau",
    "threshold",
    "turn-emb-dim",
    "types",
    "word-emb-dim",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("config line {}: unknown key {key:?}", i + 1)));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("config file {}: {e}", p.display())))?;
                ConfigFile::parse(&text)
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves settings for one command and records the resolved values.
#[derive(Debug)]
pub struct Settings {
    file: ConfigFile,
    env_seed: Option<String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(file: ConfigFile) -> Self {
        Settings {
            file,
            env_seed: std::env::var(SEED_ENV).ok().filter(|s| !s.trim().is_empty()),
            resolved: BTreeMap::new(),
        }
    }

    #[cfg(test)]
    fn with_env_seed(file: ConfigFile, env_seed: Option<&str>) -> Self {
        Settings {
            file,
            env_seed: env_seed.map(str::to_string),
            resolved: BTreeMap::new(),
        }
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|raw| {
                raw.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config key {key}: {e}")))
            })
            .transpose()
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.optional(key, flag)?.unwrap_or(default);
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn flag(&mut self, key: &str, set: bool) -> Result<bool, CliError> {
        let v = if set {
            true
        } else {
            self.file_value(key)?.unwrap_or(false)
        };
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = match flag {
            Some(p) => p,
            None => self
                .file
                .get(key)
                .map(PathBuf::from)
                .ok_or_else(|| CliError::Usage(format!("--{key} is required")))?,
        };
        self.resolved.insert(key.to_string(), p.display().to_string());
        Ok(p)
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        let p = flag.or_else(|| self.file.get(key).map(PathBuf::from))?;
        self.resolved.insert(key.to_string(), p.display().to_string());
        Some(p)
    }

    pub fn seed(&mut self, flag: Option<u64>, default: u64) -> Result<u64, CliError> {
        let seed = match (flag, &self.env_seed) {
            (Some(s), _) => s,
            (None, Some(env)) => env
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("{SEED_ENV}: {e}")))?,
            (None, None) => self.file_value("seed")?.unwrap_or(default),
        };
        self.resolved.insert("seed".into(), seed.to_string());
        Ok(seed)
    }

    /// Records a value that does not come from a flag, such as an output path.
    pub fn note(&mut self, key: &str, value: impl Display) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }
}

/// Comma-separated layer widths; the empty string means no hidden layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Widths(Vec::new()));
        }
        s.split(',')
            .map(|w| w.trim().parse::<usize>().map_err(|e| format!("width {w:?}: {e}")))
            .collect::<Result<_, _>>()
            .map(Widths)
    }
}

impl Display for Widths {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Two comma-separated fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair(pub [f64; 2]);

impl FromStr for Pair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [a, b] => Ok(Pair([
                a.parse().map_err(|e| format!("{a:?}: {e}"))?,
                b.parse().map_err(|e| format!("{b:?}: {e}"))?,
            ])),
            _ => Err(format!("expected two comma-separated numbers, got {s:?}")),
        }
    }
}

impl Display for Pair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{}", self.0[0], self.0[1])
    }
}
