//! Run configuration: a flat TOML file of `key = value` lines covering
//! corpora, model, schedule and run settings.
//!
//! Every key has a default and unknown keys are rejected. Relative paths
//! resolve against the directory holding the config file, so an echoed
//! config (written with absolute paths) can be fed back unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::routing::{Direction, PeMode};
use crate::tensor::AdamConfig;
use crate::training::Schedule;

/// File name of the echoed effective config inside the output directory.
pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_corpus: Option<PathBuf>,
    pub train_adjacency: Option<PathBuf>,
    pub dev_corpus: Option<PathBuf>,
    pub dev_adjacency: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub test_adjacency: Option<PathBuf>,
    pub documents: Option<PathBuf>,
    /// word2vec text files; random initialisation when absent.
    pub general_embeddings: Option<PathBuf>,
    pub domain_embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,

    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "iter")]
    pub route_iters: usize,
    pub d_general: usize,
    pub d_domain: usize,
    pub d_enc: usize,
    pub d_task: usize,
    pub d_route: usize,
    pub kernel_widths: Vec<usize>,
    pub task_layers: usize,
    pub task_kernel_width: usize,
    pub max_len: usize,
    pub pe_mode: String,
    pub dropout: f64,
    pub lambdas: [f64; 5],
    pub directions: Vec<String>,
    pub ddc_injection: bool,
    pub dsc_injection: bool,
    pub coarse: bool,
    /// Empty for none.
    pub ablate: String,

    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub alternation: usize,
    pub batch_size: usize,
    pub doc_batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub patience: usize,
    /// Stop once train token accuracy of every aspect task reaches this;
    /// 0 disables the check.
    pub target_accuracy: f64,

    /// Share of the training corpus held out as dev when no `dev_corpus`
    /// is given; 0 disables the split.
    pub dev_fraction: f64,
    pub seed: u64,
    pub runs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = Schedule::default();
        RunConfig {
            train_corpus: None,
            train_adjacency: None,
            dev_corpus: None,
            dev_adjacency: None,
            test_corpus: None,
            test_adjacency: None,
            documents: None,
            general_embeddings: None,
            domain_embeddings: None,
            output_dir: PathBuf::from("out"),
            steps: m.steps,
            route_iters: m.route_iters,
            d_general: m.d_general,
            d_domain: m.d_domain,
            d_enc: m.d_enc,
            d_task: m.d_task,
            d_route: m.d_route,
            kernel_widths: m.kernel_widths,
            task_layers: m.task_layers,
            task_kernel_width: m.task_kernel_width,
            max_len: m.max_len,
            pe_mode: m.pe_mode.name().to_string(),
            dropout: m.dropout,
            lambdas: m.lambdas,
            directions: m.directions.iter().map(|d| d.to_string()).collect(),
            ddc_injection: m.ddc_injection,
            dsc_injection: m.dsc_injection,
            coarse: m.coarse,
            ablate: String::new(),
            epochs: s.epochs,
            pretrain_epochs: s.pretrain_epochs,
            alternation: s.alternation,
            batch_size: s.batch_size,
            doc_batch_size: s.doc_batch_size,
            lr: s.adam.lr,
            beta1: s.adam.beta1,
            beta2: s.adam.beta2,
            eps: s.adam.eps,
            clip_norm: s.clip_norm,
            patience: s.patience,
            target_accuracy: 0.0,
            dev_fraction: 0.2,
            seed: m.seed,
            runs: 1,
        }
    }
}

/// Splits `key=value`; the value is read as TOML, falling back to a bare
/// string (so `--set output_dir=runs/a` needs no quoting).
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

impl RunConfig {
    /// Parses config text, applies overrides, and resolves relative paths
    /// against `base`.
    pub fn from_text(text: &str, origin: &str, overrides: &[String], base: &Path) -> Result<RunConfig> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {}", e.message())))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{origin}: {}", e.message())))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, &path.display().to_string(), overrides, &base)
    }

    /// Defaults plus overrides, paths relative to the working directory.
    pub fn from_overrides(overrides: &[String]) -> Result<RunConfig> {
        Self::from_text("", "overrides", overrides, Path::new(""))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in self.paths_mut().into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    fn paths_mut(&mut self) -> [Option<&mut PathBuf>; 9] {
        [
            self.train_corpus.as_mut(),
            self.train_adjacency.as_mut(),
            self.dev_corpus.as_mut(),
            self.dev_adjacency.as_mut(),
            self.test_corpus.as_mut(),
            self.test_adjacency.as_mut(),
            self.documents.as_mut(),
            self.general_embeddings.as_mut(),
            self.domain_embeddings.as_mut(),
        ]
    }

    /// `(key, path)` for every configured input file.
    pub fn inputs(&self) -> Vec<(&'static str, &Path)> {
        let all = [
            ("train_corpus", &self.train_corpus),
            ("train_adjacency", &self.train_adjacency),
            ("dev_corpus", &self.dev_corpus),
            ("dev_adjacency", &self.dev_adjacency),
            ("test_corpus", &self.test_corpus),
            ("test_adjacency", &self.test_adjacency),
            ("documents", &self.documents),
            ("general_embeddings", &self.general_embeddings),
            ("domain_embeddings", &self.domain_embeddings),
        ];
        all.into_iter().filter_map(|(k, p)| p.as_deref().map(|p| (k, p))).collect()
    }

    /// Fails with the offending key when an input file does not exist.
    pub fn check_inputs(&self) -> Result<()> {
        for (key, path) in self.inputs() {
            if !path.is_file() {
                return Err(Error::Config(format!("{key}: no such file {}", path.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!("dev_fraction {} must lie in [0, 1)", self.dev_fraction)));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::Config(format!("target_accuracy {} must lie in [0, 1]", self.target_accuracy)));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        self.model_config()?.validate()?;
        self.schedule().validate()
    }

    pub fn ablation(&self) -> Result<Option<Ablation>> {
        match self.ablate.as_str() {
            "" => Ok(None),
            s => Ablation::parse(s).map(Some),
        }
    }

    /// Model settings with the ablation, if any, applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig {
            steps: self.steps,
            route_iters: self.route_iters,
            d_general: self.d_general,
            d_domain: self.d_domain,
            d_enc: self.d_enc,
            d_task: self.d_task,
            d_route: self.d_route,
            kernel_widths: self.kernel_widths.clone(),
            task_layers: self.task_layers,
            task_kernel_width: self.task_kernel_width,
            max_len: self.max_len,
            pe_mode: PeMode::parse(&self.pe_mode)?,
            dropout: self.dropout,
            lambdas: self.lambdas,
            directions: self.directions.iter().map(|d| Direction::parse(d)).collect::<Result<_>>()?,
            ddc_injection: self.ddc_injection,
            dsc_injection: self.dsc_injection,
            coarse: self.coarse,
            seed: self.seed,
        };
        if let Some(a) = self.ablation()? {
            m.apply_ablation(a);
        }
        Ok(m)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            pretrain_epochs: self.pretrain_epochs,
            alternation: self.alternation,
            batch_size: self.batch_size,
            doc_batch_size: self.doc_batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            clip_norm: self.clip_norm,
            patience: self.patience,
            target_accuracy: (self.target_accuracy > 0.0).then_some(self.target_accuracy),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    /// Writes the effective config to `dir/config.toml` with absolute paths.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let mut abs = self.clone();
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        abs.resolve(&cwd);
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        fs::write(&path, abs.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        let c = RunConfig::from_text("", "t", &[], Path::new("")).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model_config().unwrap(), ModelConfig::default());
        assert_eq!(c.schedule(), Schedule::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::from_text("d_tsak = 3\n", "t", &[], Path::new("")).unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("d_tsak")), "{e}");
        let e = RunConfig::from_text("", "t", &["bogus=1".into()], Path::new("")).unwrap_err();
        assert!(e.to_string().contains("bogus"));
    }

    #[test]
    fn overrides_win_and_round_trip() {
        let c = RunConfig::from_text("T = 3\nepochs = 4\n", "t", &["T=2".into(), "ablate=coarse".into()], Path::new(""))
            .unwrap();
        assert_eq!(c.steps, 2);
        assert_eq!(c.epochs, 4);
        assert!(c.model_config().unwrap().coarse);
        let back = RunConfig::from_text(&c.to_toml().unwrap(), "echo", &[], Path::new("")).unwrap();
        assert_eq!(back, c);
        assert!(c.to_toml().unwrap().contains("T = 2"));
    }

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let c = RunConfig::from_text(
            "train_corpus = \"a/train.tsv\"\ndocuments = \"/abs/docs.jsonl\"\n",
            "t",
            &[],
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(c.train_corpus.as_deref(), Some(Path::new("/cfg/a/train.tsv")));
        assert_eq!(c.documents.as_deref(), Some(Path::new("/abs/docs.jsonl")));
        assert_eq!(c.output_dir, Path::new("/cfg/out"));
    }

    #[test]
    fn missing_input_names_the_key() {
        let c = RunConfig::from_text("test_corpus = \"nope.tsv\"\n", "t", &[], Path::new("/definitely/not")).unwrap();
        let e = c.check_inputs().unwrap_err();
        assert!(e.to_string().starts_with("configuration error: test_corpus"), "{e}");
    }

    #[test]
    fn bad_values_are_config_errors() {
        for o in ["ablate=everything", "pe_mode=sideways", "dev_fraction=1.5", "runs=0", "directions=[\"ate->ate\"]"] {
            let e = RunConfig::from_overrides(&[o.into()]).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{o}: {e}");
        }
    }

    #[test]
    fn bare_string_override() {
        let (k, v) = parse_override("output_dir = runs/x").unwrap();
        assert_eq!(k, "output_dir");
        assert_eq!(v, toml::Value::String("runs/x".into()));
        assert_eq!(parse_override("lr=1e-3").unwrap().1, toml::Value::Float(1e-3));
        assert!(parse_override("novalue").is_err());
    }
}
