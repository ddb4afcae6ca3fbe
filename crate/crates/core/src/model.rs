//! The Network On Network architecture.
//!
//! ```text
//!            logit ── fusion DNN ── concat(o_lr, o_dnn, o_bi, o_att)
//!                                       │      │      │      │
//!          across-field operations:    LR    DNN   Bi-Int  attention
//!                                              └──────┴──────┘
//!                                     refined embeddings ê_1 .. ê_m
//!                                                  │
//!               field-wise networks  ê_i = F(DNN_i(e_i), e_i)
//!                                                  │
//!                                  embeddings e_1 .. e_m
//! ```
//!
//! LR reads the raw encoded features, not the embeddings. Field-wise
//! networks with the same layer structure run together: the inputs of `c`
//! fields are stacked into `[c×b×d]` and every layer is one batched matmul
//! against stacked weights `[c×d1×d2]`.
//!
//! Cost per example, with `m` fields, embedding width `d`, field-wise depth
//! `L_f`, across-field DNN of `L_a` layers of average width `H_a`, fusion
//! DNN of `L_o` layers of average width `H_o`, and `N_h` attention heads of
//! width `d'`: field-wise `O(m d² L_f)`, LR `O(m)`, DNN `O(H_a² L_a)`,
//! Bi-Interaction `O(m d)` in the factored form used here (`O(m² d)` for the
//! pairwise sum), attention `O(m² N_h d' + m N_h d' d)`, fusion `O(H_o² L_o)`.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{NonConfig, Operation, Refinement};
use crate::data::{Batch, FieldKind, Preprocessor};
use crate::error::{NonError, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const EMBEDDING_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Embedding tables and numerical embedding vectors.
    Embedding,
    /// Fully connected, gate and attention weights; the only L2 target.
    Weight,
    Bias,
    /// Per-feature weights of the LR operation.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every trainable array, addressed by a unique name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    fn add(&mut self, name: String, kind: ParamKind, tensor: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let previous = self.by_name.insert(name.clone(), id);
        assert!(previous.is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, kind, tensor });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Copies every parameter onto `tape` as a trainable leaf, in store order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(&p.tensor)).collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the gradients recorded on `tape` for `vars` (as returned by
    /// [`ParamStore::register`]) into the parameters' grad buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (p, v) in self.params.iter_mut().zip(vars) {
            let mut grad = p.tensor.grad().map_or_else(|| vec![0.0; p.tensor.len()], <[f64]>::to_vec);
            if let Some(g) = tape.grad(*v) {
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            p.tensor.set_grad(grad)?;
        }
        Ok(())
    }
}

/// What the model needs to know about one input field.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldInfo {
    pub name: String,
    pub kind: FieldKind,
    /// `n_i` for categorical fields including the unknown bucket; 0 for
    /// numerical fields.
    pub vocab_size: usize,
}

impl FieldInfo {
    pub fn from_preprocessor(p: &Preprocessor) -> Vec<FieldInfo> {
        let mut cat = p.vocabulary.fields.iter();
        p.schema
            .fields
            .iter()
            .map(|f| FieldInfo {
                name: f.name.clone(),
                kind: f.kind,
                vocab_size: match f.kind {
                    FieldKind::Categorical => cat.next().map_or(1, |v| v.size()),
                    FieldKind::Numerical => 0,
                },
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Auxiliary heads are evaluated.
    Train,
    /// Auxiliary heads are skipped.
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Fields that share one stacked field-wise network.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGroupParams {
    /// Field positions (schema order) in stack order.
    pub fields: Vec<usize>,
    /// Per layer: weights `[c×d1×d2]` and biases `[c×d2]`.
    pub layers: Vec<(ParamId, ParamId)>,
    /// Gate weights `[c×(2d)×d]` and biases `[c×d]` for gate refinement.
    pub gate: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    /// `[n_i×1]` per categorical field.
    pub categorical: Vec<ParamId>,
    /// `[u×1]` over all numerical fields.
    pub numerical: Option<ParamId>,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    /// `[d̂ × N_h d']`; head `h` owns columns `h d' .. (h+1) d'`.
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// `[N_h d' × N_h d']`
    pub output: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TowerParams {
    pub layers: Vec<Dense>,
    /// One `[H_i×1]` head per hidden layer, present when enabled.
    pub aux: Vec<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub hidden: TowerParams,
    pub output: Dense,
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    store: &'a mut ParamStore,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, limit: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-limit..=limit)).collect();
        let t = Tensor::new(shape, values).expect("shape matches");
        self.store.add(name, kind, t)
    }

    /// Glorot-uniform weight.
    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, ParamKind::Weight, shape, limit)
    }

    fn bias(&mut self, name: String, shape: Vec<usize>) -> ParamId {
        self.store.add(name, ParamKind::Bias, Tensor::zeros(shape))
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            weight: self.weight(format!("{prefix}.weight"), vec![fan_in, fan_out], fan_in, fan_out),
            bias: self.bias(format!("{prefix}.bias"), vec![fan_out]),
        }
    }

    fn tower(&mut self, prefix: &str, input: usize, widths: &[usize], aux: bool) -> TowerParams {
        let mut layers = Vec::new();
        let mut aux_heads = Vec::new();
        let mut fan_in = input;
        for (l, &w) in widths.iter().enumerate() {
            layers.push(self.dense(&format!("{prefix}.layer{l}"), fan_in, w));
            if aux {
                aux_heads.push(self.weight(format!("{prefix}.aux{l}.weight"), vec![w, 1], w, 1));
            }
            fan_in = w;
        }
        TowerParams {
            layers,
            aux: aux_heads,
        }
    }
}

/// All trainable parameters plus the structure that addresses them.
#[derive(Clone, Debug, PartialEq)]
pub struct NonModel {
    config: NonConfig,
    fields: Vec<FieldInfo>,
    schema_hash: String,
    store: ParamStore,
    /// `[n_i×d]` table per categorical field, `[1×d]` vector per numerical
    /// field, in schema order. Row `k` of a table is the embedding of index `k`.
    embeddings: Vec<ParamId>,
    groups: Vec<FieldGroupParams>,
    linear: Option<LinearParams>,
    deep: TowerParams,
    attention: Option<AttentionParams>,
    fusion: FusionParams,
}

/// Result of a full forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[b]`
    pub logit: Var,
    /// `[b]` each; empty in inference mode.
    pub aux_logits: Vec<Var>,
    pub embeddings: Vec<Var>,
    pub refined: Vec<Var>,
    /// Operation outputs in fusion order.
    pub outputs: Vec<(Operation, Var)>,
    /// Per attention head, the `[b×m×m]` weights.
    pub attention_weights: Vec<Var>,
    /// Hidden states of the across-field DNN, first layer first.
    pub deep_hidden: Vec<Var>,
}

fn multiplier_key(hidden: &[f64]) -> Vec<u64> {
    hidden.iter().map(|m| m.to_bits()).collect()
}

impl NonModel {
    /// Builds and initializes a model. Fully connected weights are
    /// Glorot-uniform, embeddings and LR weights uniform in ±0.01, biases 0.
    pub fn new(mut config: NonConfig, fields: Vec<FieldInfo>, schema_hash: impl Into<String>, seed: u64) -> Result<Self> {
        config.validate()?;
        if fields.is_empty() {
            return Err(NonError::Config("model needs at least one field".into()));
        }
        if fields
            .iter()
            .any(|f| f.kind == FieldKind::Categorical && f.vocab_size == 0)
        {
            return Err(NonError::Config("categorical field with empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut init = Init {
            rng: &mut rng,
            store: &mut store,
        };
        let d = config.embedding_dim;
        let m = fields.len();

        let embeddings = fields
            .iter()
            .map(|f| {
                let rows = match f.kind {
                    FieldKind::Categorical => f.vocab_size,
                    FieldKind::Numerical => 1,
                };
                init.uniform(
                    format!("embedding.{}", f.name),
                    ParamKind::Embedding,
                    vec![rows, d],
                    EMBEDDING_INIT_SCALE,
                )
            })
            .collect();

        let groups = if config.field_wise.enabled {
            let layout = Self::group_layout(&config, &fields)?;
            layout
                .into_iter()
                .enumerate()
                .map(|(g, (hidden, members))| {
                    let c = members.len();
                    let mut widths: Vec<usize> = hidden.iter().map(|x| (x * d as f64).round() as usize).collect();
                    widths.push(d);
                    let mut fan_in = d;
                    let mut layers = Vec::new();
                    for (l, &w) in widths.iter().enumerate() {
                        let wid = init.weight(format!("field_wise.group{g}.layer{l}.weight"), vec![c, fan_in, w], fan_in, w);
                        let bid = init.bias(format!("field_wise.group{g}.layer{l}.bias"), vec![c, w]);
                        layers.push((wid, bid));
                        fan_in = w;
                    }
                    let gate = (config.field_wise.refinement == Refinement::Gate).then(|| {
                        (
                            init.weight(format!("field_wise.group{g}.gate.weight"), vec![c, 2 * d, d], 2 * d, d),
                            init.bias(format!("field_wise.group{g}.gate.bias"), vec![c, d]),
                        )
                    });
                    FieldGroupParams {
                        fields: members,
                        layers,
                        gate,
                    }
                })
                .collect()
        } else {
            Vec::new()
        };

        let dh = config.refined_dim();
        let ops = &config.operations;
        let linear = ops.contains(Operation::Linear).then(|| {
            let categorical = fields
                .iter()
                .filter(|f| f.kind == FieldKind::Categorical)
                .map(|f| {
                    init.uniform(
                        format!("lr.{}", f.name),
                        ParamKind::Linear,
                        vec![f.vocab_size, 1],
                        EMBEDDING_INIT_SCALE,
                    )
                })
                .collect();
            let u = fields.iter().filter(|f| f.kind == FieldKind::Numerical).count();
            let numerical =
                (u > 0).then(|| init.uniform("lr.numerical".into(), ParamKind::Linear, vec![u, 1], EMBEDDING_INIT_SCALE));
            LinearParams {
                categorical,
                numerical,
                bias: init.bias("lr.bias".into(), vec![1]),
            }
        });
        let deep = init.tower("dnn", m * dh, &ops.dnn_hidden, config.aux.across_dnn);
        let attention = ops.contains(Operation::SelfAttention).then(|| {
            let hd = ops.attention_heads * ops.attention_dim;
            AttentionParams {
                query: init.weight("attention.query".into(), vec![dh, hd], dh, hd),
                key: init.weight("attention.key".into(), vec![dh, hd], dh, hd),
                value: init.weight("attention.value".into(), vec![dh, hd], dh, hd),
                output: init.weight("attention.output".into(), vec![hd, hd], hd, hd),
            }
        });

        let mut model = NonModel {
            config,
            fields,
            schema_hash: schema_hash.into(),
            store: ParamStore::default(),
            embeddings,
            groups,
            linear,
            deep,
            attention,
            fusion: FusionParams {
                hidden: TowerParams {
                    layers: Vec::new(),
                    aux: Vec::new(),
                },
                output: Dense {
                    weight: ParamId(usize::MAX),
                    bias: ParamId(usize::MAX),
                },
            },
        };
        let fusion_in: usize = model.config.operations.set.iter().map(|op| model.operation_dim(*op)).sum();
        let hidden = init.tower("fusion", fusion_in, &model.config.fusion.hidden, model.config.aux.fusion);
        let last = model.config.fusion.hidden.last().copied().unwrap_or(fusion_in);
        let output = init.dense("fusion.output", last, 1);
        model.fusion = FusionParams { hidden, output };
        model.store = store;
        Ok(model)
    }

    /// Groups fields by identical field-wise structure, in order of first
    /// appearance.
    fn group_layout(config: &NonConfig, fields: &[FieldInfo]) -> Result<Vec<(Vec<f64>, Vec<usize>)>> {
        let fw = &config.field_wise;
        let mut assigned: Vec<Option<&[f64]>> = vec![None; fields.len()];
        for g in &fw.groups {
            for name in &g.fields {
                let pos = fields
                    .iter()
                    .position(|f| &f.name == name)
                    .ok_or_else(|| NonError::Config(format!("field-wise group names unknown field `{name}`")))?;
                if assigned[pos].is_some() {
                    return Err(NonError::Config(format!("field `{name}` appears in two field-wise groups")));
                }
                assigned[pos] = Some(&g.hidden);
            }
        }
        let mut layout: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
        for (pos, hidden) in assigned.into_iter().enumerate() {
            let hidden = hidden.unwrap_or(&fw.hidden);
            match layout.iter_mut().find(|(h, _)| multiplier_key(h) == multiplier_key(hidden)) {
                Some((_, members)) => members.push(pos),
                None => layout.push((hidden.to_vec(), vec![pos])),
            }
        }
        Ok(layout)
    }

    pub fn config(&self) -> &NonConfig {
        &self.config
    }

    pub fn fields(&self) -> &[FieldInfo] {
        &self.fields
    }

    pub fn schema_hash(&self) -> &str {
        &self.schema_hash
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn embedding_param(&self, field: usize) -> ParamId {
        self.embeddings[field]
    }

    pub fn groups(&self) -> &[FieldGroupParams] {
        &self.groups
    }

    pub fn linear_params(&self) -> Option<&LinearParams> {
        self.linear.as_ref()
    }

    pub fn deep_params(&self) -> &TowerParams {
        &self.deep
    }

    pub fn attention_params(&self) -> Option<&AttentionParams> {
        self.attention.as_ref()
    }

    pub fn fusion_params(&self) -> &FusionParams {
        &self.fusion
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    /// Output width `d_i` of an operation.
    pub fn operation_dim(&self, op: Operation) -> usize {
        let ops = &self.config.operations;
        match op {
            Operation::Linear => 1,
            Operation::Dnn => *ops.dnn_hidden.last().expect("validated"),
            Operation::BiInteraction => self.config.refined_dim(),
            Operation::SelfAttention => self.fields.len() * ops.attention_heads * ops.attention_dim,
        }
    }

    /// Parameters that exist only because `op` is in the operation set: its
    /// own weights plus its rows of the first fusion layer.
    pub fn operation_parameters(&self, op: Operation) -> usize {
        if !self.config.operations.contains(op) {
            return 0;
        }
        let size = |id: ParamId| self.store.get(id).tensor.len();
        let own: usize = match op {
            Operation::Linear => {
                let l = self.linear.as_ref().expect("present");
                l.categorical.iter().chain(&l.numerical).map(|id| size(*id)).sum::<usize>() + size(l.bias)
            }
            Operation::Dnn => self
                .deep
                .layers
                .iter()
                .map(|dl| size(dl.weight) + size(dl.bias))
                .chain(self.deep.aux.iter().map(|id| size(*id)))
                .sum(),
            Operation::BiInteraction => 0,
            Operation::SelfAttention => {
                let a = self.attention.expect("present");
                [a.query, a.key, a.value, a.output].iter().map(|id| size(*id)).sum()
            }
        };
        let first_width = self.config.fusion.hidden.first().copied().unwrap_or(1);
        own + self.operation_dim(op) * first_width
    }

    fn var(vars: &[Var], id: ParamId) -> Var {
        vars[id.0]
    }

    /// Per-field embeddings `[b×d]` in schema order. Categorical fields
    /// gather row `k` of their table; numerical fields scale their vector
    /// by the encoded value.
    pub fn embed_batch(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Vec<Var>> {
        let b = batch.size();
        let (mut c, mut u) = (0, 0);
        let mut out = Vec::with_capacity(self.fields.len());
        for (f, info) in self.fields.iter().enumerate() {
            let table = Self::var(vars, self.embeddings[f]);
            match info.kind {
                FieldKind::Categorical => {
                    let idx: Vec<usize> = (0..b).map(|r| batch.categorical_row(r)[c]).collect();
                    out.push(tape.gather_rows(table, &idx)?);
                    c += 1;
                }
                FieldKind::Numerical => {
                    let x: Vec<f64> = (0..b).map(|r| batch.numerical_row(r)[u]).collect();
                    let col = tape.constant(Tensor::new(vec![b, 1], x)?);
                    out.push(tape.matmul(col, table)?);
                    u += 1;
                }
            }
        }
        if c != batch.num_categorical || u != batch.num_numerical {
            return Err(NonError::Config(format!(
                "batch has {}+{} fields, model expects {c}+{u}",
                batch.num_categorical, batch.num_numerical
            )));
        }
        Ok(out)
    }

    /// Runs every field-wise group on stacked inputs and returns the refined
    /// embeddings `ê_i` in schema order. Identity when disabled.
    pub fn field_wise_forward(&self, tape: &mut Tape, vars: &[Var], embeddings: &[Var]) -> Result<Vec<Var>> {
        if !self.config.field_wise.enabled {
            return Ok(embeddings.to_vec());
        }
        if embeddings.len() != self.fields.len() {
            return Err(NonError::Config(format!(
                "{} embeddings for {} fields",
                embeddings.len(),
                self.fields.len()
            )));
        }
        let mut refined = vec![None; embeddings.len()];
        for group in &self.groups {
            let members: Vec<Var> = group.fields.iter().map(|f| embeddings[*f]).collect();
            let stacked = tape.stack(&members)?;
            let layers: Vec<(Var, Var)> = group
                .layers
                .iter()
                .map(|(w, b)| (Self::var(vars, *w), Self::var(vars, *b)))
                .collect();
            let gate = group.gate.map(|(w, b)| (Self::var(vars, w), Self::var(vars, b)));
            let out = stacked_field_network(tape, stacked, &layers, self.config.field_wise.refinement, gate)?;
            let rows = tape.shape(out)[1];
            let width = tape.shape(out)[2];
            for (slot, &f) in group.fields.iter().enumerate() {
                let s = tape.slice(out, 0, slot, 1)?;
                refined[f] = Some(tape.reshape(s, vec![rows, width])?);
            }
        }
        refined
            .into_iter()
            .map(|v| v.ok_or_else(|| NonError::Config("field without a field-wise group".into())))
            .collect()
    }

    /// Field-wise output for arbitrary embedding rows `[s×d]` of one field,
    /// using that field's slice of its group's stacked weights.
    pub fn field_wise_single(&self, tape: &mut Tape, vars: &[Var], field: usize, rows: Var) -> Result<Var> {
        if !self.config.field_wise.enabled {
            return Ok(rows);
        }
        let (group, slot) = self
            .groups
            .iter()
            .find_map(|g| g.fields.iter().position(|f| *f == field).map(|s| (g, s)))
            .ok_or_else(|| NonError::Config(format!("no field-wise group for field {field}")))?;
        let mut take = |id: ParamId| tape.slice(Self::var(vars, id), 0, slot, 1);
        let mut layers = Vec::new();
        for (w, b) in &group.layers {
            layers.push((take(*w)?, take(*b)?));
        }
        let gate = match group.gate {
            Some((w, b)) => Some((take(w)?, take(b)?)),
            None => None,
        };
        let shape = tape.shape(rows).to_vec();
        let x = tape.reshape(rows, vec![1, shape[0], shape[1]])?;
        let out = stacked_field_network(tape, x, &layers, self.config.field_wise.refinement, gate)?;
        let width = tape.shape(out)[2];
        tape.reshape(out, vec![shape[0], width])
    }

    /// LR over the raw encoded features: `bias + Σ w[active value] + Σ w_j x_j`.
    pub fn op_linear(&self, tape: &mut Tape, vars: &[Var], batch: &Batch) -> Result<Var> {
        let lr = self
            .linear
            .as_ref()
            .ok_or_else(|| NonError::Config("lr is not in the operation set".into()))?;
        let b = batch.size();
        let mut terms = Vec::new();
        for (c, id) in lr.categorical.iter().enumerate() {
            let idx: Vec<usize> = (0..b).map(|r| batch.categorical_row(r)[c]).collect();
            terms.push(tape.gather_rows(Self::var(vars, *id), &idx)?);
        }
        if let Some(id) = lr.numerical {
            let x = tape.constant(Tensor::new(vec![b, batch.num_numerical], batch.numerical.clone())?);
            terms.push(tape.matmul(x, Self::var(vars, id))?);
        }
        let mut acc = match terms.split_first() {
            Some((first, rest)) => {
                let mut acc = *first;
                for t in rest {
                    acc = tape.add(acc, *t)?;
                }
                acc
            }
            None => tape.constant(Tensor::zeros(vec![b, 1])),
        };
        acc = tape.add_bias(acc, Self::var(vars, lr.bias))?;
        Ok(acc)
    }

    /// Across-field DNN over the concatenated refined embeddings. Returns
    /// every hidden state; the last is the operation output.
    pub fn op_deep(&self, tape: &mut Tape, vars: &[Var], refined: &[Var]) -> Result<Vec<Var>> {
        let input = tape.concat(refined, 1)?;
        let layers: Vec<(Var, Var)> = self
            .deep
            .layers
            .iter()
            .map(|l| (Self::var(vars, l.weight), Self::var(vars, l.bias)))
            .collect();
        mlp(tape, input, &layers)
    }

    pub fn op_self_attention(&self, tape: &mut Tape, vars: &[Var], refined: &[Var]) -> Result<AttentionOutput> {
        let a = self
            .attention
            .ok_or_else(|| NonError::Config("attention is not in the operation set".into()))?;
        let ops = &self.config.operations;
        self_attention(
            tape,
            refined,
            [a.query, a.key, a.value, a.output].map(|id| Self::var(vars, id)),
            ops.attention_heads,
            ops.attention_dim,
        )
    }

    /// Full forward pass: embed, field-wise, operations, fusion. Auxiliary
    /// logits are produced only in [`Mode::Train`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &Batch, mode: Mode) -> Result<Forward> {
        let b = batch.size();
        let embeddings = self.embed_batch(tape, vars, batch)?;
        let refined = self.field_wise_forward(tape, vars, &embeddings)?;
        let mut outputs = Vec::new();
        let mut attention_weights = Vec::new();
        let mut deep_hidden = Vec::new();
        for op in &self.config.operations.set {
            let out = match op {
                Operation::Linear => self.op_linear(tape, vars, batch)?,
                Operation::Dnn => {
                    deep_hidden = self.op_deep(tape, vars, &refined)?;
                    *deep_hidden.last().expect("at least one layer")
                }
                Operation::BiInteraction => op_bi_interaction(tape, &refined)?,
                Operation::SelfAttention => {
                    let att = self.op_self_attention(tape, vars, &refined)?;
                    attention_weights = att.weights;
                    att.output
                }
            };
            outputs.push((*op, out));
        }
        let fusion_layers: Vec<(Var, Var)> = self
            .fusion
            .hidden
            .layers
            .iter()
            .map(|l| (Self::var(vars, l.weight), Self::var(vars, l.bias)))
            .collect();
        let out_layer = (
            Self::var(vars, self.fusion.output.weight),
            Self::var(vars, self.fusion.output.bias),
        );
        let op_outputs: Vec<Var> = outputs.iter().map(|(_, v)| *v).collect();
        let (logit, fusion_hidden) = fuse_operations(tape, &op_outputs, &fusion_layers, out_layer)?;
        let logit = tape.reshape(logit, vec![b])?;

        let mut aux_logits = Vec::new();
        if mode == Mode::Train {
            let heads = self
                .deep
                .aux
                .iter()
                .zip(&deep_hidden)
                .chain(self.fusion.hidden.aux.iter().zip(&fusion_hidden));
            for (head, h) in heads {
                let z = tape.matmul(*h, Self::var(vars, *head))?;
                aux_logits.push(tape.reshape(z, vec![b])?);
            }
        }
        Ok(Forward {
            logit,
            aux_logits,
            embeddings,
            refined,
            outputs,
            attention_weights,
            deep_hidden,
        })
    }

    /// Number of auxiliary logits produced in training mode.
    pub fn num_aux_heads(&self) -> usize {
        self.deep.aux.len() + self.fusion.hidden.aux.len()
    }

    /// Inference-mode logits for every row of `batch`.
    pub fn predict_logits(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.store.iter().map(|p| tape.constant(p.tensor.clone())).collect();
        let fwd = self.forward(&mut tape, &vars, batch, Mode::Infer)?;
        Ok(tape.value(fwd.logit).to_vec())
    }

    pub fn predict_proba(&self, batch: &Batch) -> Result<Vec<f64>> {
        Ok(self
            .predict_logits(batch)?
            .into_iter()
            .map(crate::tensor::sigmoid)
            .collect())
    }

    pub fn to_checkpoint(&self, trained_epochs: usize, preprocessor_hash: Option<String>) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            schema_hash: self.schema_hash.clone(),
            preprocessor_hash,
            fields: self.fields.clone(),
            trained_epochs,
            params: self.store.iter().cloned().collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut model = NonModel::new(ckpt.config.clone(), ckpt.fields.clone(), ckpt.schema_hash.clone(), 0)?;
        if ckpt.params.len() != model.store.len() {
            return Err(NonError::parse(
                "checkpoint",
                format!("{} parameters, structure needs {}", ckpt.params.len(), model.store.len()),
            ));
        }
        for p in &ckpt.params {
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| NonError::parse("checkpoint", format!("unexpected parameter `{}`", p.name)))?;
            let slot = model.store.get_mut(id);
            if slot.kind != p.kind || slot.tensor.shape() != p.tensor.shape() {
                return Err(NonError::parse(
                    "checkpoint",
                    format!("parameter `{}` has kind/shape {:?}{:?}", p.name, p.kind, p.tensor.shape()),
                ));
            }
            slot.tensor = Tensor::new(p.tensor.shape().to_vec(), p.tensor.values().to_vec())?;
        }
        Ok(model)
    }
}

/// Stacked field-wise layers `relu(X W + b)` followed by refinement.
/// `x` is `[c×b×d]`; layer weights are `[c×d1×d2]`, biases `[c×d2]`.
pub fn stacked_field_network(
    tape: &mut Tape,
    x: Var,
    layers: &[(Var, Var)],
    refinement: Refinement,
    gate: Option<(Var, Var)>,
) -> Result<Var> {
    let mut h = x;
    for (w, b) in layers {
        let z = tape.batched_matmul(h, *w)?;
        let z = tape.add_stack_bias(z, *b)?;
        h = tape.relu(z);
    }
    refine(tape, h, x, refinement, gate)
}

/// `ê = F(e', e)` on stacked `[c×b×d]` tensors. The gate parameters are
/// `[c×2d×d]` weights and `[c×d]` biases and are required for
/// [`Refinement::Gate`].
pub fn refine(tape: &mut Tape, e_prime: Var, e: Var, mode: Refinement, gate: Option<(Var, Var)>) -> Result<Var> {
    match mode {
        Refinement::None => Ok(e_prime),
        Refinement::Concat => {
            let axis = tape.shape(e_prime).len() - 1;
            tape.concat(&[e_prime, e], axis)
        }
        Refinement::Product => tape.mul(e_prime, e),
        Refinement::Gate => {
            let (w, b) = gate.ok_or_else(|| NonError::Config("gate refinement without gate parameters".into()))?;
            let both = tape.concat(&[e_prime, e], 2)?;
            let z = tape.batched_matmul(both, w)?;
            let z = tape.add_stack_bias(z, b)?;
            let g = tape.sigmoid(z);
            // g ⊙ e' + (1 - g) ⊙ e
            let diff = tape.sub(e_prime, e)?;
            let gated = tape.mul(g, diff)?;
            tape.add(e, gated)
        }
    }
}

/// ReLU layers `h_{l+1} = relu(h_l W_l + b_l)`; returns every hidden state.
pub fn mlp(tape: &mut Tape, input: Var, layers: &[(Var, Var)]) -> Result<Vec<Var>> {
    if layers.is_empty() {
        return Err(NonError::Config("DNN needs at least one layer".into()));
    }
    let mut hidden = Vec::with_capacity(layers.len());
    let mut h = input;
    for (w, b) in layers {
        let z = tape.matmul(h, *w)?;
        let z = tape.add_bias(z, *b)?;
        h = tape.relu(z);
        hidden.push(h);
    }
    Ok(hidden)
}

/// Bi-Interaction pooling over value-scaled field embeddings `u_i` (each
/// `[b×d]`): `Σ_{i<j} u_i ⊙ u_j`, computed as `½[(Σ u_i)² − Σ u_i²]`.
/// Categorical fields have value 1 and numerical embeddings already carry
/// their value, so `u_i` is the (refined) embedding itself.
pub fn op_bi_interaction(tape: &mut Tape, embeddings: &[Var]) -> Result<Var> {
    let stacked = stack_fields(tape, embeddings)?;
    let total = tape.sum_axis(stacked, 1)?;
    let total_sq = tape.mul(total, total)?;
    let squares = tape.mul(stacked, stacked)?;
    let sum_sq = tape.sum_axis(squares, 1)?;
    let diff = tape.sub(total_sq, sum_sq)?;
    Ok(tape.affine(diff, 0.5, 0.0))
}

/// `[b×d]` per field → `[b×m×d]`.
pub fn stack_fields(tape: &mut Tape, embeddings: &[Var]) -> Result<Var> {
    let mut lifted = Vec::with_capacity(embeddings.len());
    for e in embeddings {
        let s = tape.shape(*e).to_vec();
        if s.len() != 2 {
            return Err(NonError::Shape {
                op: "stack_fields",
                lhs: s,
                rhs: vec![],
            });
        }
        lifted.push(tape.reshape(*e, vec![s[0], 1, s[1]])?);
    }
    tape.concat(&lifted, 1)
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[b × m N_h d']`
    pub output: Var,
    /// Per head `[b×m×m]`, rows summing to one.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product self-attention over the `m` fields, with
/// no residual connection. `projections` are the query, key and value maps
/// `[d×N_h d']` and the output map `[N_h d'×N_h d']`.
pub fn self_attention(
    tape: &mut Tape,
    embeddings: &[Var],
    projections: [Var; 4],
    heads: usize,
    head_dim: usize,
) -> Result<AttentionOutput> {
    let [wq, wk, wv, wo] = projections;
    let x = stack_fields(tape, embeddings)?;
    let (b, m, d) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2])
    };
    let hd = heads * head_dim;
    let flat = tape.reshape(x, vec![b * m, d])?;
    let mut project = |w: Var| -> Result<Var> {
        let p = tape.matmul(flat, w)?;
        tape.reshape(p, vec![b, m, hd])
    };
    let (q, k, v) = (project(wq)?, project(wk)?, project(wv)?);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 2, h * head_dim, head_dim)?;
        let kh = tape.slice(k, 2, h * head_dim, head_dim)?;
        let vh = tape.slice(v, 2, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.batched_matmul(qh, kt)?;
        let scores = tape.affine(scores, scale, 0.0);
        let a = tape.softmax(scores, 2)?;
        outs.push(tape.batched_matmul(a, vh)?);
        weights.push(a);
    }
    let joined = tape.concat(&outs, 2)?;
    let joined = tape.reshape(joined, vec![b * m, hd])?;
    let mixed = tape.matmul(joined, wo)?;
    let output = tape.reshape(mixed, vec![b, m * hd])?;
    Ok(AttentionOutput { output, weights })
}

/// Fusion DNN over `concat(o_1..o_k)`: ReLU hidden layers then a linear
/// output of width one. Returns the `[b×1]` logit and the hidden states.
pub fn fuse_operations(
    tape: &mut Tape,
    outputs: &[Var],
    hidden: &[(Var, Var)],
    output: (Var, Var),
) -> Result<(Var, Vec<Var>)> {
    if outputs.is_empty() {
        return Err(NonError::Config("fusion needs at least one operation output".into()));
    }
    let x = tape.concat(outputs, 1)?;
    let states = if hidden.is_empty() { Vec::new() } else { mlp(tape, x, hidden)? };
    let last = states.last().copied().unwrap_or(x);
    let z = tape.matmul(last, output.0)?;
    let logit = tape.add_bias(z, output.1)?;
    Ok((logit, states))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: configuration, schema identity and every parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: NonConfig,
    pub config_hash: String,
    pub schema_hash: String,
    /// Hash of the vocabulary/statistics artifact the model was trained on.
    pub preprocessor_hash: Option<String>,
    pub fields: Vec<FieldInfo>,
    pub trained_epochs: usize,
    pub params: Vec<Param>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| NonError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NonError::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NonError::parse(path.display().to_string(), e))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(NonError::parse(
                path.display().to_string(),
                format!("unsupported checkpoint version {}", ckpt.format_version),
            ));
        }
        Ok(ckpt)
    }

    /// Fails unless the checkpoint was built for `schema_hash`.
    pub fn check_schema(&self, schema_hash: &str) -> Result<()> {
        if self.schema_hash != schema_hash {
            return Err(NonError::SchemaMismatch {
                expected: self.schema_hash.clone(),
                found: schema_hash.to_string(),
            });
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<NonModel> {
        NonModel::from_checkpoint(&self)
    }
}
