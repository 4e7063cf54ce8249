use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::TagSchemes;
use crate::error::{Error, Result};
use crate::layers::{LayerDims, Task};
use crate::routing::{Direction, PeMode};

/// Named removals of knowledge paths, plus the merged-document variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// No routing out of ATE.
    AspectTransfer,
    /// No routing out of OTE.
    OpinionTransfer,
    /// No routing out of ASC.
    SentimentTransfer,
    /// No domain attention fed to ATE/OTE.
    DdcTransfer,
    /// No document sentiment fed to ASC.
    DscTransfer,
    /// Both document signals fed to all three aspect tasks.
    Coarse,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::AspectTransfer,
        Ablation::OpinionTransfer,
        Ablation::SentimentTransfer,
        Ablation::DdcTransfer,
        Ablation::DscTransfer,
        Ablation::Coarse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::AspectTransfer => "aspect-transfer",
            Ablation::OpinionTransfer => "opinion-transfer",
            Ablation::SentimentTransfer => "sentiment-transfer",
            Ablation::DdcTransfer => "ddc-transfer",
            Ablation::DscTransfer => "dsc-transfer",
            Ablation::Coarse => "coarse",
        }
    }

    pub fn parse(s: &str) -> Result<Ablation> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation `{s}` (valid: {})",
                Ablation::ALL.map(Ablation::name).join(", ")
            ))
        })
    }

    /// Source task whose outgoing routes this ablation removes, if any.
    pub fn removed_source(self) -> Option<Task> {
        match self {
            Ablation::AspectTransfer => Some(Task::Ate),
            Ablation::OpinionTransfer => Some(Task::Ote),
            Ablation::SentimentTransfer => Some(Task::Asc),
            _ => None,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture, loss weights and knowledge-path switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of transfer/aggregation iterations `T`.
    pub steps: usize,
    /// Routing iterations per transfer.
    pub route_iters: usize,
    pub d_general: usize,
    pub d_domain: usize,
    pub d_enc: usize,
    pub d_task: usize,
    pub d_route: usize,
    pub kernel_widths: Vec<usize>,
    pub task_layers: usize,
    pub task_kernel_width: usize,
    /// Longest sentence the positional table covers.
    pub max_len: usize,
    pub pe_mode: PeMode,
    pub dropout: f64,
    /// Loss weights for ate, ote, asc, ddc, dsc.
    pub lambdas: [f64; 5],
    /// Enabled routing directions.
    pub directions: Vec<Direction>,
    pub ddc_injection: bool,
    pub dsc_injection: bool,
    pub coarse: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            steps: 2,
            route_iters: 3,
            d_general: 50,
            d_domain: 30,
            d_enc: 64,
            d_task: 64,
            d_route: 64,
            kernel_widths: vec![3, 5],
            task_layers: 2,
            task_kernel_width: 3,
            max_len: 512,
            pe_mode: PeMode::AddBoth,
            dropout: 0.1,
            lambdas: [1.0; 5],
            directions: Direction::ALL.to_vec(),
            ddc_injection: true,
            dsc_injection: true,
            coarse: false,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("T (steps) must be at least 1".into()));
        }
        if self.route_iters < 1 {
            return Err(Error::Config("route_iters must be at least 1".into()));
        }
        if self.d_route == 0 || self.d_general + self.d_domain == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.d_task % 2 != 0 {
            return Err(Error::Config(format!(
                "d_task {} must be even for positional encoding",
                self.d_task
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Config(format!("loss weight {l} must be non-negative")));
        }
        for (i, d) in self.directions.iter().enumerate() {
            if self.directions[..i].contains(d) {
                return Err(Error::Config(format!("direction {d} listed twice")));
            }
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self, schemes: &TagSchemes) -> LayerDims {
        LayerDims {
            d_input: self.d_general + self.d_domain,
            kernel_widths: self.kernel_widths.clone(),
            d_enc: self.d_enc,
            d_task: self.d_task,
            task_layers: self.task_layers,
            task_kernel_width: self.task_kernel_width,
            c1: schemes.c1(),
            c2_domain: schemes.domain.len(),
            c2_sentiment: schemes.dsc.len(),
        }
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::DdcTransfer => self.ddc_injection = false,
            Ablation::DscTransfer => self.dsc_injection = false,
            Ablation::Coarse => self.coarse = true,
            a => {
                let src = a.removed_source();
                self.directions.retain(|d| Some(d.source) != src);
            }
        }
    }

    /// Turns off every routing direction and both injections.
    pub fn disable_transfer(&mut self) {
        self.directions.clear();
        self.ddc_injection = false;
        self.dsc_injection = false;
        self.coarse = false;
    }

    pub fn is_enabled(&self, dir: Direction) -> bool {
        self.directions.contains(&dir)
    }

    /// Enabled directions into `target`, in canonical order.
    pub fn incoming(&self, target: Task) -> Vec<Direction> {
        Direction::ALL
            .into_iter()
            .filter(|d| d.target == target && self.is_enabled(*d))
            .collect()
    }

    pub fn injects_ddc(&self, target: Task) -> bool {
        self.ddc_injection && (self.coarse || matches!(target, Task::Ate | Task::Ote))
    }

    pub fn injects_dsc(&self, target: Task) -> bool {
        self.dsc_injection && (self.coarse || target == Task::Asc)
    }

    /// Whether `target` has an aggregation layer at all.
    pub fn aggregates(&self, target: Task) -> bool {
        !self.incoming(target).is_empty() || self.injects_ddc(target) || self.injects_dsc(target)
    }

    /// Input width of the aggregation layer of `target`.
    pub fn aggregate_width(&self, target: Task, dims: &LayerDims) -> usize {
        let mut w = dims.d_task + dims.c1 * (1 + self.incoming(target).len());
        if self.injects_ddc(target) {
            w += 1;
        }
        if self.injects_dsc(target) {
            w += dims.c2_sentiment + 1;
        }
        w
    }
}
