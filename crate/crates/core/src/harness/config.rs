use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoModularity,
    NoRegisters,
    Bifusion,
    Concat,
    Add,
    PathOnly,
    GeneOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoModularity,
        Variant::NoRegisters,
        Variant::Bifusion,
        Variant::Concat,
        Variant::Add,
        Variant::PathOnly,
        Variant::GeneOnly,
    ];
    pub const ABLATIONS: [Variant; 4] = [
        Variant::Full,
        Variant::NoModularity,
        Variant::Bifusion,
        Variant::NoRegisters,
    ];
    pub const BASELINES: [Variant; 4] = [
        Variant::Concat,
        Variant::Add,
        Variant::PathOnly,
        Variant::GeneOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoModularity => "no_modularity",
            Variant::NoRegisters => "no_registers",
            Variant::Bifusion => "bifusion",
            Variant::Concat => "concat",
            Variant::Add => "add",
            Variant::PathOnly => "path_only",
            Variant::GeneOnly => "gene_only",
        }
    }

    pub fn is_baseline(self) -> bool {
        Self::BASELINES.contains(&self)
    }

    /// Whether the modularity term can enter the loss.
    pub fn uses_modularity(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoRegisters | Variant::Bifusion
        )
    }

    pub fn uses_pathology(self) -> bool {
        self != Variant::GeneOnly
    }

    pub fn uses_genomics(self) -> bool {
        self != Variant::PathOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Everything that determines a cross-validated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub variant: Variant,
    /// K: pathology prototypes.
    pub prototypes: usize,
    /// N: gene groups; must match the dataset.
    pub gene_groups: usize,
    /// I: register tokens.
    pub registers: usize,
    /// Token width; must match the dataset's patch feature width.
    pub d: usize,
    pub cross_layers: usize,
    pub path_self_layers: usize,
    pub gene_self_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `None` picks the task default (1e-3 diagnosis, 2e-4 survival).
    pub lr: Option<f64>,
    pub weight_decay: f64,
    /// Reserved; only plain SGD (0) is implemented.
    pub momentum: f64,
    /// `None` picks the task default (10 diagnosis, 5 survival).
    pub epochs: Option<usize>,
    pub folds: usize,
    /// Fold `f` trains with seed `seed_offset + f`.
    pub seed_offset: u64,
    pub split_seed: u64,
    pub survival_bins: usize,
    pub uncensored_weight: f64,
    pub keep_self_loops: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(Task::Grading)
    }
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            variant: Variant::Full,
            prototypes: 16,
            gene_groups: 6,
            registers: 4,
            d: 32,
            cross_layers: 2,
            path_self_layers: 2,
            gene_self_layers: 2,
            decoder_layers: 2,
            heads: 1,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            lr: None,
            weight_decay: 1e-5,
            momentum: 0.0,
            epochs: None,
            folds: 5,
            seed_offset: 0,
            split_seed: 0,
            survival_bins: 4,
            uncensored_weight: 0.0,
            keep_self_loops: false,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
            .unwrap_or(if self.task.is_diagnosis() { 1e-3 } else { 2e-4 })
    }

    pub fn epoch_count(&self) -> usize {
        self.epochs
            .unwrap_or(if self.task.is_diagnosis() { 10 } else { 5 })
    }

    /// Fills task defaults and folds equivalent spellings together:
    /// `full` with γ = 0 is `no_modularity`, `no_modularity` forces γ = 0,
    /// `no_registers` forces I = 0, and baselines carry no modularity weight.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.lr = Some(c.learning_rate());
        c.epochs = Some(c.epoch_count());
        if c.variant == Variant::Full && c.gamma == 0.0 {
            c.variant = Variant::NoModularity;
        }
        if !c.variant.uses_modularity() {
            c.gamma = 0.0;
        }
        if c.variant == Variant::NoRegisters {
            c.registers = 0;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("prototypes", self.prototypes),
            ("gene_groups", self.gene_groups),
            ("d", self.d),
            ("heads", self.heads),
            ("folds", self.folds),
            ("survival_bins", self.survival_bins),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.d % self.heads != 0 {
            return bad(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            ));
        }
        if self.folds < 2 {
            return bad("need at least 2 folds".into());
        }
        let lr = self.learning_rate();
        if !(lr >= 0.0 && lr.is_finite()) {
            return bad(format!(
                "learning rate must be finite and non-negative, got {lr}"
            ));
        }
        if self.epoch_count() == 0 {
            return bad("epochs must be positive".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.momentum != 0.0 {
            return bad("momentum is reserved; only plain SGD is implemented".into());
        }
        if !(0.0..=1.0).contains(&self.uncensored_weight) {
            return bad("uncensored_weight must lie in [0, 1]".into());
        }
        Ok(())
    }
}
