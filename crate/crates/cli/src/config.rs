//! Run configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use gca_core::data::SyntheticSpec;
use gca_core::numerics::InitScheme;
use gca_core::{AttentionConfig, StreamSelection, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Which stored split a read command works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Validation,
    #[default]
    Test,
}

impl SplitName {
    pub fn file_name(self) -> &'static str {
        match self {
            SplitName::Train => "train.jsonl",
            SplitName::Validation => "validation.jsonl",
            SplitName::Test => "test.jsonl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub split: SplitName,
    /// Noise levels in meters for the robustness sweep; empty skips it.
    pub noise_sigmas: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: SplitName::Test,
            noise_sigmas: Vec::new(),
        }
    }
}

/// Toy problem for finite-difference checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckOptions {
    /// Variants to check; empty means all four.
    pub variants: Vec<Variant>,
    pub joints: usize,
    pub frames: usize,
    pub hidden: usize,
    pub score_hidden: usize,
    pub classes: usize,
    pub sequences: usize,
    pub eps: f64,
    pub tol: f64,
    /// Scale of the Gaussian parameter draw used before checking.
    pub param_std: f64,
    /// Deliberately corrupts one analytic gradient (negative control).
    pub inject_grad_bug: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            variants: Vec::new(),
            joints: 4,
            frames: 5,
            hidden: 8,
            score_hidden: 8,
            classes: 3,
            sequences: 2,
            eps: 1e-5,
            tol: 1e-4,
            param_std: 0.3,
            inject_grad_bug: false,
        }
    }
}

/// Largest `joints * frames * hidden` the gradient check accepts.
pub const GRADCHECK_BUDGET: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportOptions {
    pub split: SplitName,
    /// Export at most this many sequences (in file order).
    pub max_sequences: Option<usize>,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            split: SplitName::Test,
            max_sequences: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Seeds model initialization, shuffling, dropout and noise draws.
    /// The dataset has its own `synthetic.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Directory written by `synth` and read by every other command.
    pub data_dir: PathBuf,
    /// Defaults to `<output_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Train / validation / test fractions per class.
    pub split: [f64; 3],
    pub streams: StreamSelection,
    /// Joint chain order; empty means `0..J`.
    pub joint_order: Vec<usize>,
    /// Weight initialization, e.g. `{ kind = "gaussian", std = 0.3 }`.
    pub init: InitScheme,
    pub synthetic: SyntheticSpec,
    pub attention: AttentionConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
    pub export: ExportOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Gca,
            seed: 0,
            output_dir: PathBuf::from("out"),
            data_dir: PathBuf::from("data"),
            checkpoint: None,
            split: [100.0 / 150.0, 25.0 / 150.0, 25.0 / 150.0],
            streams: StreamSelection::Both,
            joint_order: Vec::new(),
            init: InitScheme::default(),
            synthetic: SyntheticSpec::default(),
            attention: AttentionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            gradcheck: GradcheckOptions::default(),
            export: ExportOptions::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document, applies `key.path=value` overrides (flags win)
    /// and rejects unknown keys.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.ckpt"))
    }

    /// Checks every field a command will use. Runs before anything is written.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.split.iter().any(|f| !(*f >= 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split {:?} must be non-negative and sum to 1", self.split));
        }
        if self.split[0] == 0.0 || self.split[1] == 0.0 {
            return bad("train and validation fractions must be positive".into());
        }
        self.synthetic.validate().map_err(CliError::config)?;
        self.attention.validate().map_err(CliError::config)?;
        self.train.validate().map_err(CliError::config)?;
        if self.variant != Variant::TwoStream && self.streams != StreamSelection::Both {
            return bad(format!("streams = {:?} only applies to two_stream", self.streams));
        }
        if let InitScheme::Gaussian { std } = self.init {
            if !(std > 0.0) || !std.is_finite() {
                return bad(format!("init std {std} must be finite and positive"));
            }
        }
        for s in &self.eval.noise_sigmas {
            if !(*s >= 0.0) || !s.is_finite() {
                return bad(format!("noise sigma {s} must be finite and non-negative"));
            }
        }
        let g = &self.gradcheck;
        if g.joints == 0 || g.frames == 0 || g.hidden == 0 || g.score_hidden == 0 || g.sequences == 0 || g.classes < 2 {
            return bad("gradcheck dims must be positive with at least two classes".into());
        }
        if !(g.eps > 0.0 && g.tol > 0.0 && g.param_std >= 0.0) {
            return bad("gradcheck eps and tol must be positive".into());
        }
        if g.joints.max(5) * g.frames * g.hidden > GRADCHECK_BUDGET {
            return bad(format!(
                "gradcheck toy J*T*d = {} exceeds {GRADCHECK_BUDGET}",
                g.joints.max(5) * g.frames * g.hidden
            ));
        }
        Ok(())
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.trim().split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty());
    let Some(last) = last else {
        return Err(CliError::Config(format!("override `{spec}` has an empty key")));
    };
    let mut table = doc;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads a TOML literal; anything unparseable is taken as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn flags_override_the_file() {
        let text = "variant = \"two_stream\"\n[train]\nlearning_rate = 0.5\nhidden = 32\n";
        let cfg = RunConfig::from_toml(
            text,
            &["train.learning_rate=0.01".into(), "attention.n_iterations=3".into(), "output_dir=/tmp/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::TwoStream);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.hidden, 32);
        assert_eq!(cfg.attention.n_iterations, 3);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn init_family_is_configurable() {
        let cfg = RunConfig::from_toml("[init]\nkind = \"gaussian\"\nstd = 0.3\n", &[]).unwrap();
        assert_eq!(cfg.init, InitScheme::Gaussian { std: 0.3 });
        let cfg = RunConfig::from_toml("", &["init={kind=\"gaussian\",std=0.0}".into()]).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for (text, o) in [
            ("bogus = 1", vec![]),
            ("", vec!["train.learning_rat=1".to_string()]),
            ("", vec!["train.momentum=1.5".to_string()]),
            ("", vec!["variant=\"lstm\"".to_string()]),
            ("", vec!["novalue".to_string()]),
        ] {
            let r = RunConfig::from_toml(text, &o).and_then(|c| c.validate());
            assert!(matches!(r, Err(CliError::Config(_))), "{text} {o:?}: {r:?}");
        }
    }

    #[test]
    fn gradcheck_guard() {
        let mut cfg = RunConfig::default();
        cfg.gradcheck.joints = 20;
        cfg.gradcheck.frames = 20;
        cfg.gradcheck.hidden = 32;
        assert!(matches!(cfg.validate(), Err(CliError::Config(m)) if m.contains("exceeds")));
    }

    #[test]
    fn single_class_spec_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.synthetic.classes.truncate(1);
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
