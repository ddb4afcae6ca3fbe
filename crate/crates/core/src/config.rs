//! Architecture and training hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{NonError, Result};

/// Combiner of a field-wise output `e'` with the original embedding `e`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refinement {
    /// `e'`
    #[default]
    None,
    /// `[e'; e]`, doubling the width.
    Concat,
    /// `e' ⊙ e`
    Product,
    /// `g ⊙ e' + (1 - g) ⊙ e` with `g = sigmoid(W [e'; e] + b)`.
    Gate,
}

impl FromStr for Refinement {
    type Err = NonError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Refinement::None),
            "concat" => Ok(Refinement::Concat),
            "product" => Ok(Refinement::Product),
            "gate" => Ok(Refinement::Gate),
            other => Err(NonError::Config(format!("unknown refinement mode `{other}`"))),
        }
    }
}

/// Across-field operations. The declaration order is the order in which
/// operation outputs are concatenated for the fusion network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    #[serde(rename = "lr")]
    Linear,
    Dnn,
    BiInteraction,
    #[serde(rename = "attention")]
    SelfAttention,
}

impl Operation {
    pub const ALL: [Operation; 4] = [
        Operation::Linear,
        Operation::Dnn,
        Operation::BiInteraction,
        Operation::SelfAttention,
    ];

    pub const OPTIONAL: [Operation; 3] = [
        Operation::Linear,
        Operation::BiInteraction,
        Operation::SelfAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Linear => "lr",
            Operation::Dnn => "dnn",
            Operation::BiInteraction => "bi_interaction",
            Operation::SelfAttention => "attention",
        }
    }

    /// Parses a comma separated list such as `lr,dnn,attention`. DNN is
    /// added when absent; the result is sorted and deduplicated.
    pub fn parse_list(list: &str) -> Result<Vec<Operation>> {
        let mut ops = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(Operation::from_str)
            .collect::<Result<Vec<_>>>()?;
        ops.push(Operation::Dnn);
        ops.sort();
        ops.dedup();
        Ok(ops)
    }

    /// The seven operation sets: each non-empty subset of the optional
    /// operations together with DNN.
    pub fn combinations() -> Vec<Vec<Operation>> {
        (1u32..8)
            .map(|mask| {
                let mut set: Vec<Operation> = Operation::OPTIONAL
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, op)| *op)
                    .collect();
                set.push(Operation::Dnn);
                set.sort();
                set
            })
            .collect()
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operation {
    type Err = NonError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lr" | "linear" => Ok(Operation::Linear),
            "dnn" => Ok(Operation::Dnn),
            "bi" | "bi_interaction" | "bi-interaction" | "biinteraction" => Ok(Operation::BiInteraction),
            "attention" | "self_attention" | "self-attention" | "att" => Ok(Operation::SelfAttention),
            other => Err(NonError::Config(format!("unknown operation `{other}`"))),
        }
    }
}

/// Fields sharing a field-wise network structure other than the default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldGroup {
    pub fields: Vec<String>,
    pub hidden: Vec<f64>,
}

/// Per-field networks. Each enabled network has `hidden.len()` hidden
/// layers of width `round(multiplier * d)` followed by an output layer of
/// width `d`, every layer with a ReLU, so its depth is `hidden.len() + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldWiseConfig {
    pub enabled: bool,
    pub hidden: Vec<f64>,
    pub refinement: Refinement,
    /// Overrides of `hidden` for named fields.
    pub groups: Vec<FieldGroup>,
}

impl Default for FieldWiseConfig {
    fn default() -> Self {
        FieldWiseConfig {
            enabled: true,
            hidden: vec![1.0],
            refinement: Refinement::None,
            groups: Vec::new(),
        }
    }
}

impl FieldWiseConfig {
    pub fn disabled() -> Self {
        FieldWiseConfig {
            enabled: false,
            hidden: Vec::new(),
            refinement: Refinement::None,
            groups: Vec::new(),
        }
    }

    /// `L_f`
    pub fn depth(&self) -> usize {
        if self.enabled {
            self.hidden.len() + 1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperationConfig {
    pub set: Vec<Operation>,
    /// Hidden widths of the across-field DNN; its output is the last one.
    pub dnn_hidden: Vec<usize>,
    pub attention_heads: usize,
    pub attention_dim: usize,
}

impl Default for OperationConfig {
    fn default() -> Self {
        OperationConfig {
            set: vec![Operation::Linear, Operation::Dnn],
            dnn_hidden: vec![128, 64],
            attention_heads: 2,
            attention_dim: 8,
        }
    }
}

impl OperationConfig {
    pub fn contains(&self, op: Operation) -> bool {
        self.set.contains(&op)
    }
}

/// Hidden widths of the operation fusion network; the output layer of width
/// one follows. An empty list makes the prediction a weighted sum of the
/// concatenated operation outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub hidden: Vec<usize>,
}

pub const FUSION_MAX_DEPTH: usize = 2;
pub const FUSION_MAX_WIDTH: usize = 64;

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            hidden: vec![FUSION_MAX_WIDTH],
        }
    }
}

impl FusionConfig {
    /// Total layers including the output layer.
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }
}

/// Which DNN towers carry auxiliary heads during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub across_dnn: bool,
    pub fusion: bool,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            across_dnn: true,
            fusion: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonConfig {
    pub embedding_dim: usize,
    pub field_wise: FieldWiseConfig,
    pub operations: OperationConfig,
    pub fusion: FusionConfig,
    pub aux: AuxConfig,
}

impl Default for NonConfig {
    fn default() -> Self {
        NonConfig {
            embedding_dim: 16,
            field_wise: FieldWiseConfig::default(),
            operations: OperationConfig::default(),
            fusion: FusionConfig::default(),
            aux: AuxConfig::default(),
        }
    }
}

impl NonConfig {
    /// Normalizes the operation set and checks every structural constraint.
    pub fn validate(&mut self) -> Result<()> {
        self.operations.set.sort();
        self.operations.set.dedup();
        if self.embedding_dim == 0 {
            return Err(NonError::Config("embedding_dim must be positive".into()));
        }
        if !self.operations.contains(Operation::Dnn) {
            return Err(NonError::Config("the operation set must contain dnn".into()));
        }
        if self.operations.dnn_hidden.is_empty() || self.operations.dnn_hidden.contains(&0) {
            return Err(NonError::Config(
                "the across-field DNN needs at least one layer of positive width".into(),
            ));
        }
        if self.operations.contains(Operation::SelfAttention)
            && (self.operations.attention_heads == 0 || self.operations.attention_dim == 0)
        {
            return Err(NonError::Config(
                "attention needs at least one head of positive dimension".into(),
            ));
        }
        if self.fusion.hidden.contains(&0) {
            return Err(NonError::Config("fusion widths must be positive".into()));
        }
        let fw = &self.field_wise;
        let multipliers = fw.hidden.iter().chain(fw.groups.iter().flat_map(|g| g.hidden.iter()));
        for m in multipliers {
            if !(m.is_finite() && *m > 0.0) || (m * self.embedding_dim as f64).round() < 1.0 {
                return Err(NonError::Config(format!(
                    "field-wise multiplier {m} gives an empty layer"
                )));
            }
        }
        if !fw.enabled && (!fw.groups.is_empty() || fw.refinement != Refinement::None) {
            return Err(NonError::Config(
                "field-wise groups or refinement given while field-wise networks are disabled".into(),
            ));
        }
        Ok(())
    }

    /// Width of each refined field embedding fed to the across-field network.
    pub fn refined_dim(&self) -> usize {
        match (self.field_wise.enabled, self.field_wise.refinement) {
            (true, Refinement::Concat) => 2 * self.embedding_dim,
            _ => self.embedding_dim,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        crate::data::hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Loss coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Auxiliary coefficient `α`.
    pub alpha: f64,
    /// Optional per-layer coefficients replacing `alpha`, in auxiliary-head
    /// order (across-field DNN layers, then fusion hidden layers). Missing
    /// trailing entries fall back to `alpha`.
    pub alpha_per_layer: Option<Vec<f64>>,
    /// Per-epoch decay factor `ρ`: the coefficient at epoch `t` is `α ρ^t`.
    pub alpha_decay: f64,
    /// L2 coefficient `γ`.
    pub l2: f64,
    /// Lower clamp on log arguments in the cross entropy.
    pub log_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            alpha_per_layer: None,
            alpha_decay: 0.9,
            l2: 1e-5,
            log_clamp: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let per_layer_ok = self
            .alpha_per_layer
            .as_ref()
            .is_none_or(|v| v.iter().all(|a| *a >= 0.0));
        if !(self.alpha >= 0.0 && per_layer_ok) {
            return Err(NonError::Config("auxiliary coefficients must be non-negative".into()));
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return Err(NonError::Config("alpha_decay must lie in (0, 1]".into()));
        }
        if self.l2 < 0.0 {
            return Err(NonError::Config("l2 must be non-negative".into()));
        }
        if !(self.log_clamp > 0.0 && self.log_clamp < 0.5) {
            return Err(NonError::Config("log_clamp must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Coefficient of auxiliary head `layer` at `epoch`.
    pub fn alpha_at(&self, layer: usize, epoch: usize) -> f64 {
        let base = self
            .alpha_per_layer
            .as_ref()
            .and_then(|v| v.get(layer).copied())
            .unwrap_or(self.alpha);
        base * self.alpha_decay.powi(epoch as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Adagrad stabilizer.
    pub adagrad_eps: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: crate::data::DEFAULT_BATCH_SIZE,
            epochs: 10,
            patience: 3,
            adagrad_eps: 1e-10,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NonError::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(NonError::Config(
                "batch_size, epochs and patience must be positive".into(),
            ));
        }
        if self.adagrad_eps <= 0.0 {
            return Err(NonError::Config("adagrad_eps must be positive".into()));
        }
        self.loss.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_combinations_all_with_dnn() {
        let combos = Operation::combinations();
        assert_eq!(combos.len(), 7);
        assert!(combos.iter().all(|c| c.contains(&Operation::Dnn)));
        let mut unique = combos.clone();
        unique.dedup();
        assert_eq!(unique.len(), 7);
    }

    #[test]
    fn parse_operation_list() {
        assert_eq!(
            Operation::parse_list("lr,dnn").unwrap(),
            vec![Operation::Linear, Operation::Dnn]
        );
        assert_eq!(
            Operation::parse_list("attention, bi").unwrap(),
            vec![Operation::Dnn, Operation::BiInteraction, Operation::SelfAttention]
        );
        assert!(Operation::parse_list("cin").is_err());
    }

    #[test]
    fn validation_requires_dnn() {
        let mut c = NonConfig::default();
        c.operations.set = vec![Operation::Linear];
        assert!(c.validate().is_err());
        let mut c = NonConfig::default();
        c.operations.set = vec![Operation::SelfAttention, Operation::Dnn];
        c.operations.attention_heads = 0;
        assert!(c.validate().is_err());
        assert!(NonConfig::default().validate().is_ok());
    }

    #[test]
    fn default_fusion_within_cap() {
        let f = FusionConfig::default();
        assert!(f.depth() <= FUSION_MAX_DEPTH);
        assert!(f.hidden.iter().all(|w| *w <= FUSION_MAX_WIDTH));
    }

    #[test]
    fn alpha_decay_schedule() {
        let l = LossConfig {
            alpha: 0.8,
            alpha_decay: 0.9,
            ..LossConfig::default()
        };
        assert!((l.alpha_at(0, 2) - 0.81 * 0.8).abs() < 1e-15);
        assert_eq!(l.alpha_at(3, 0), 0.8);
        let l = LossConfig {
            alpha_per_layer: Some(vec![0.1, 0.2]),
            ..l
        };
        assert_eq!(l.alpha_at(1, 0), 0.2);
        assert_eq!(l.alpha_at(2, 0), 0.8);
    }

    #[test]
    fn config_toml_rejects_unknown_keys() {
        assert!(toml::from_str::<NonConfig>("embedding_dim = 8\nwhatever = 1").is_err());
        let c: NonConfig = toml::from_str(
            "embedding_dim = 8\n[operations]\nset = [\"lr\", \"dnn\", \"attention\"]\n[field_wise]\nrefinement = \"gate\"",
        )
        .unwrap();
        assert_eq!(c.field_wise.refinement, Refinement::Gate);
        assert!(c.operations.contains(Operation::SelfAttention));
    }
}
