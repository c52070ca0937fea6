//! Experiment configuration: a small `key = value` format with `#` comments
//! and `[section]` headers, and its mapping onto [`ExperimentConfig`].
//!
//! ```text
//! seed = 42
//! augset = hflip+vflip      # bare words need no quotes
//!
//! [transfer]
//! epochs = 100
//! seeds = [1, 2, 3]
//! ```

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::augment::AugSetup;
use crate::data::{Jitter, ShapeKind};
use crate::error::{Error, Result};
use crate::nn::PHI_CHANNELS;
use crate::omega::OmegaConfig;
use crate::optim::SgdConfig;
use crate::transfer::{ScenarioKind, TrainConfig};

pub const ENV_SEED: &str = "EMBAUG_SEED";
pub const ENV_THREADS: &str = "EMBAUG_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Str(String),
    Bool(bool),
    List(Vec<Value>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::List(items) => {
                let parts: Vec<String> = items.iter().map(Value::to_string).collect();
                write!(f, "[{}]", parts.join(", "))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: Value,
    pub line: usize,
    /// Column of the value's first character, 1-based.
    pub column: usize,
}

impl Entry {
    pub fn path(&self) -> String {
        match &self.section {
            Some(s) => format!("{s}.{}", self.key),
            None => self.key.clone(),
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.line,
            column: self.column,
            message: format!("`{}`: {}", self.path(), message.into()),
        }
    }
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        column,
        message: message.into(),
    }
}

fn is_bare(c: char) -> bool {
    c.is_ascii_alphanumeric() || "_+-./".contains(c)
}

struct Cursor<'s> {
    text: &'s str,
    pos: usize,
    line: usize,
    /// Byte offset of the line within the file's text, for column numbers.
    col_base: usize,
}

impl Cursor<'_> {
    fn col(&self) -> usize {
        self.col_base + self.text[..self.pos].chars().count() + 1
    }

    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.text[self.pos..].chars().next()
    }

    fn err(&self, message: impl Into<String>) -> Error {
        syntax(self.line, self.col(), message)
    }

    fn value(&mut self) -> Result<Value> {
        self.skip_ws();
        match self.peek() {
            None => Err(self.err("missing value")),
            Some('"') => self.quoted().map(Value::Str),
            Some('[') => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    if self.peek() == Some(']') {
                        self.pos += 1;
                        return Ok(Value::List(items));
                    }
                    if !items.is_empty() {
                        if self.peek() != Some(',') {
                            return Err(self.err("expected `,` or `]`"));
                        }
                        self.pos += 1;
                        self.skip_ws();
                    }
                    match self.peek() {
                        Some('[') => return Err(self.err("nested lists are not supported")),
                        None => return Err(self.err("unterminated list")),
                        _ => items.push(self.value()?),
                    }
                }
            }
            Some(c) if is_bare(c) => {
                let start = self.pos;
                while self.peek().is_some_and(is_bare) {
                    self.pos += self.peek().map_or(0, char::len_utf8);
                }
                let word = &self.text[start..self.pos];
                Ok(match word {
                    "true" => Value::Bool(true),
                    "false" => Value::Bool(false),
                    _ => {
                        if let Ok(i) = word.parse::<i64>() {
                            Value::Int(i)
                        } else if let Some(r) = word.parse::<f64>().ok().filter(|r| r.is_finite()) {
                            Value::Real(r)
                        } else {
                            Value::Str(word.to_owned())
                        }
                    }
                })
            }
            Some(c) => Err(self.err(format!("unexpected character `{c}`"))),
        }
    }

    fn quoted(&mut self) -> Result<String> {
        self.pos += 1;
        let mut out = String::new();
        let mut chars = self.text[self.pos..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, '"')) => out.push('"'),
                    Some((_, '\\')) => out.push('\\'),
                    Some((_, 'n')) => out.push('\n'),
                    Some((j, other)) => {
                        self.pos += j;
                        return Err(self.err(format!("unknown escape `\\{other}`")));
                    }
                    None => break,
                },
                _ => out.push(c),
            }
        }
        Err(self.err("unterminated string"))
    }

    fn end_of_line(&mut self) -> Result<()> {
        self.skip_ws();
        match self.peek() {
            None | Some('#') => Ok(()),
            Some(c) => Err(self.err(format!("unexpected `{c}` after value"))),
        }
    }
}

/// Parses the text into entries in file order. Duplicate keys within a
/// section are an error naming both lines.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut section: Option<String> = None;
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_start();
        let indent = raw.len() - trimmed.len();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let close = rest.find(']').ok_or_else(|| syntax(line, indent + 1, "unterminated section header"))?;
            let name = rest[..close].trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(syntax(line, indent + 2, format!("bad section name `{name}`")));
            }
            let mut cur = Cursor {
                text: &rest[close + 1..],
                pos: 0,
                line,
                col_base: indent + close + 2,
            };
            cur.end_of_line()?;
            section = Some(name.to_owned());
            continue;
        }
        let eq = trimmed
            .find('=')
            .ok_or_else(|| syntax(line, indent + 1, "expected `key = value`"))?;
        let key = trimmed[..eq].trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(syntax(line, indent + 1, format!("bad key `{key}`")));
        }
        let mut cur = Cursor {
            text: &trimmed[eq + 1..],
            pos: 0,
            line,
            col_base: indent + eq + 1,
        };
        cur.skip_ws();
        let column = cur.col();
        let value = cur.value()?;
        cur.end_of_line()?;
        let entry = Entry {
            section: section.clone(),
            key: key.to_owned(),
            value,
            line,
            column,
        };
        if let Some(&first) = seen.get(&entry.path()) {
            return Err(Error::DuplicateKey {
                key: entry.path(),
                first,
                second: line,
            });
        }
        seen.insert(entry.path(), line);
        entries.push(entry);
    }
    Ok(entries)
}

/// Parses a `key=value` or `section.key=value` override.
pub fn parse_override(text: &str) -> Result<Entry> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| syntax(0, 1, format!("override `{text}` is not key=value")))?;
    let (section, key) = match key.trim().split_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, key.trim()),
    };
    let doc = match section {
        Some(s) => format!("[{s}]\n{key} = {value}"),
        None => format!("{key} = {value}"),
    };
    let mut entries = parse_entries(&doc).map_err(|e| match e {
        Error::Config { column, message, .. } => syntax(0, column, format!("override `{text}`: {message}")),
        other => other,
    })?;
    let mut e = entries.pop().ok_or_else(|| syntax(0, 1, "empty override"))?;
    e.line = 0;
    Ok(e)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub base_shapes: Vec<ShapeKind>,
    pub target_shapes: Vec<ShapeKind>,
    pub image_size: usize,
    pub base_train_per_class: usize,
    pub base_eval_per_class: usize,
    pub target_train_per_class: usize,
    pub target_eval_per_class: usize,
    pub jitter: Jitter,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            base_shapes: vec![ShapeKind::Disk, ShapeKind::Square, ShapeKind::Triangle],
            target_shapes: vec![ShapeKind::Ring, ShapeKind::Cross, ShapeKind::Bar],
            image_size: 32,
            base_train_per_class: 1000,
            base_eval_per_class: 200,
            target_train_per_class: 100,
            target_eval_per_class: 200,
            jitter: Jitter::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub augset: AugSetup,
    pub data: DataConfig,
    pub phi_channels: Vec<usize>,
    pub base: TrainConfig,
    pub omega: OmegaConfig,
    pub transfer: TrainConfig,
    /// Run seeds; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub scenarios: Vec<ScenarioKind>,
    /// Count only augmentations, not the original, as training variants in
    /// the cost ratio.
    pub augmentations_only: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("runs"),
            augset: AugSetup::HFlip,
            data: DataConfig::default(),
            phi_channels: PHI_CHANNELS.to_vec(),
            base: TrainConfig::base_default(),
            omega: OmegaConfig::default(),
            transfer: TrainConfig::transfer_default(),
            seeds: Vec::new(),
            scenarios: ScenarioKind::ALL.to_vec(),
            augmentations_only: false,
        }
    }
}

fn as_int(e: &Entry) -> Result<i64> {
    match e.value {
        Value::Int(i) => Ok(i),
        _ => Err(e.err(format!("expected an integer, got {}", e.value))),
    }
}

fn as_count(e: &Entry) -> Result<usize> {
    usize::try_from(as_int(e)?).map_err(|_| e.err("expected a non-negative integer"))
}

fn as_u64(e: &Entry) -> Result<u64> {
    u64::try_from(as_int(e)?).map_err(|_| e.err("expected a non-negative integer"))
}

fn real_of(e: &Entry, v: &Value) -> Result<f64> {
    match *v {
        Value::Int(i) => Ok(i as f64),
        Value::Real(r) => Ok(r),
        _ => Err(e.err(format!("expected a number, got {v}"))),
    }
}

fn as_real(e: &Entry) -> Result<f64> {
    real_of(e, &e.value)
}

fn as_str(e: &Entry) -> Result<&str> {
    match &e.value {
        Value::Str(s) => Ok(s),
        v => Err(e.err(format!("expected a string, got {v}"))),
    }
}

fn as_bool(e: &Entry) -> Result<bool> {
    match e.value {
        Value::Bool(b) => Ok(b),
        _ => Err(e.err(format!("expected true or false, got {}", e.value))),
    }
}

fn as_list(e: &Entry) -> Result<&[Value]> {
    match &e.value {
        Value::List(items) => Ok(items),
        v => Err(e.err(format!("expected a list, got {v}"))),
    }
}

fn as_range(e: &Entry) -> Result<(f64, f64)> {
    match as_list(e)? {
        [a, b] => Ok((real_of(e, a)?, real_of(e, b)?)),
        _ => Err(e.err("expected a two-element list")),
    }
}

fn list_of<T>(e: &Entry, f: impl Fn(&Value) -> Option<T>) -> Result<Vec<T>> {
    as_list(e)?
        .iter()
        .map(|v| f(v).ok_or_else(|| e.err(format!("bad list element {v}"))))
        .collect()
}

fn set_train(cfg: &mut TrainConfig, e: &Entry) -> Result<bool> {
    match e.key.as_str() {
        "lr" => cfg.sgd.lr = as_real(e)?,
        "momentum" => cfg.sgd.momentum = as_real(e)?,
        "batch" => cfg.batch = as_count(e)?,
        "epochs" => cfg.epochs = as_count(e)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn word(v: &Value) -> Option<&str> {
    match v {
        Value::Str(s) => Some(s),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Applies entries in order on top of the current values.
    pub fn apply(&mut self, entries: &[Entry]) -> Result<()> {
        for e in entries {
            self.apply_one(e)?;
        }
        self.validate()
    }

    fn apply_one(&mut self, e: &Entry) -> Result<()> {
        let known = match (e.section.as_deref(), e.key.as_str()) {
            (None, "seed") => {
                self.seed = as_u64(e)?;
                true
            }
            (None, "threads") => {
                self.threads = as_count(e)?;
                true
            }
            (None, "out") => {
                self.out = PathBuf::from(as_str(e)?);
                true
            }
            (None, "augset") => {
                self.augset = as_str(e)?.parse().map_err(|err: Error| e.err(err.to_string()))?;
                true
            }
            (Some("data"), key) => self.apply_data(e, key)?,
            (Some("network"), "phi_channels") => {
                self.phi_channels = list_of(e, |v| match v {
                    Value::Int(i) if *i > 0 => Some(*i as usize),
                    _ => None,
                })?;
                true
            }
            (Some("base"), _) => set_train(&mut self.base, e)?,
            (Some("omega"), "lr") => {
                self.omega.sgd.lr = as_real(e)?;
                true
            }
            (Some("omega"), "momentum") => {
                self.omega.sgd.momentum = as_real(e)?;
                true
            }
            (Some("omega"), "batch") => {
                self.omega.batch = as_count(e)?;
                true
            }
            (Some("omega"), "epochs") => {
                self.omega.epochs = as_count(e)?;
                true
            }
            (Some("transfer"), "seeds") => {
                self.seeds = list_of(e, |v| match v {
                    Value::Int(i) if *i >= 0 => Some(*i as u64),
                    _ => None,
                })?;
                true
            }
            (Some("transfer"), "scenarios") => {
                self.scenarios = list_of(e, |v| word(v).and_then(|s| s.parse().ok()))?;
                true
            }
            (Some("transfer"), _) => set_train(&mut self.transfer, e)?,
            (Some("cost"), "augmentations_only") => {
                self.augmentations_only = as_bool(e)?;
                true
            }
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(e.err("unknown key"))
        }
    }

    fn apply_data(&mut self, e: &Entry, key: &str) -> Result<bool> {
        let d = &mut self.data;
        match key {
            "seed" => d.seed = as_u64(e)?,
            "image_size" => d.image_size = as_count(e)?,
            "base_train_per_class" => d.base_train_per_class = as_count(e)?,
            "base_eval_per_class" => d.base_eval_per_class = as_count(e)?,
            "target_train_per_class" => d.target_train_per_class = as_count(e)?,
            "target_eval_per_class" => d.target_eval_per_class = as_count(e)?,
            "base_shapes" => d.base_shapes = list_of(e, |v| word(v).and_then(|s| s.parse().ok()))?,
            "target_shapes" => d.target_shapes = list_of(e, |v| word(v).and_then(|s| s.parse().ok()))?,
            "radius" => d.jitter.radius = as_range(e)?,
            "contrast" => d.jitter.contrast = as_range(e)?,
            "background" => d.jitter.background = as_range(e)?,
            "tint" => d.jitter.tint = as_real(e)?,
            "noise" => d.jitter.noise = as_real(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, sgd) in [("base", self.base.sgd), ("omega", self.omega.sgd), ("transfer", self.transfer.sgd)] {
            SgdConfig::new(sgd.lr, sgd.momentum).map_err(|e| Error::Invalid(format!("[{name}] {e}")))?;
        }
        if self.base.batch == 0 || self.omega.batch == 0 || self.transfer.batch == 0 {
            return Err(Error::Invalid("batch sizes must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Invalid("threads must be at least 1".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Invalid("no transfer scenarios configured".into()));
        }
        Ok(())
    }

    /// Parses `text` and `overrides` (applied after the file), then fills
    /// the seed and thread count from `env` when the config leaves them unset.
    pub fn load(text: &str, overrides: &[String], env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut entries = parse_entries(text)?;
        for o in overrides {
            entries.push(parse_override(o)?);
        }
        let mut cfg = Self::default();
        let has = |k: &str| entries.iter().any(|e| e.section.is_none() && e.key == k);
        if !has("seed") {
            if let Some(s) = env(ENV_SEED) {
                cfg.seed = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Invalid(format!("{ENV_SEED}=`{s}` is not a seed")))?;
            }
        }
        if !has("threads") {
            if let Some(t) = env(ENV_THREADS) {
                cfg.threads = t
                    .trim()
                    .parse()
                    .map_err(|_| Error::Invalid(format!("{ENV_THREADS}=`{t}` is not a thread count")))?;
            }
        }
        // Later entries win, so an override replaces a file value.
        cfg.apply(&entries)?;
        Ok(cfg)
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }
}
