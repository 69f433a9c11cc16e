//! Shared encoder, per-task embedding heads, decorrelation maps and the
//! momentum shadow of the contrastive branch.
//!
//! All learnable tensors are exposed in one canonical order (see
//! [`ModelState::param_names`]); the optimizer state and checkpoint blobs
//! follow that order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{DivaError, Result};
use crate::tensor::Tensor;

/// The four learning tasks, each owning one embedding head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[serde(alias = "D")]
    Disc,
    #[serde(alias = "S")]
    Shared,
    #[serde(alias = "I")]
    Intra,
    #[serde(alias = "Da")]
    Dance,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Disc, TaskKind::Shared, TaskKind::Intra, TaskKind::Dance];
    pub const RANKING: [TaskKind; 3] = [TaskKind::Disc, TaskKind::Shared, TaskKind::Intra];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Disc => "disc",
            TaskKind::Shared => "shared",
            TaskKind::Intra => "intra",
            TaskKind::Dance => "dance",
        }
    }

    /// Short code used on the command line (`D`, `S`, `I`, `Da`).
    pub fn code(self) -> &'static str {
        match self {
            TaskKind::Disc => "D",
            TaskKind::Shared => "S",
            TaskKind::Intra => "I",
            TaskKind::Dance => "Da",
        }
    }

    pub fn is_ranking(self) -> bool {
        self != TaskKind::Dance
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = DivaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "D" | "disc" => Ok(TaskKind::Disc),
            "S" | "shared" => Ok(TaskKind::Shared),
            "I" | "intra" => Ok(TaskKind::Intra),
            "Da" | "dance" => Ok(TaskKind::Dance),
            other => Err(DivaError::config(format!("unknown task '{other}'"))),
        }
    }
}

/// Parses a comma-separated task list such as `D,S,I,Da`.
pub fn parse_task_list(s: &str) -> Result<Vec<TaskKind>> {
    let mut tasks: Vec<TaskKind> = s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    tasks.sort();
    tasks.dedup();
    Ok(tasks)
}

pub fn task_list_label(tasks: &[TaskKind]) -> String {
    tasks.iter().map(|t| t.code()).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { input_dim: 64, hidden_dims: vec![256, 256], feature_dim: 128 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(DivaError::config("encoder dimensions must all be >= 1"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }
}

/// Architecture and test-time settings of a [`ModelState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Embedding dimension `D` of every head.
    pub embed_dim: usize,
    pub tasks: Vec<TaskKind>,
    /// Head pairs decorrelated during training.
    pub pairs: Vec<(TaskKind, TaskKind)>,
    /// One independent encoder per head instead of a shared one.
    pub separate_encoders: bool,
    /// Momentum coefficient of the shadow encoder.
    pub momentum: f64,
    /// Initial value of each learnable margin boundary.
    pub beta_init: f64,
    /// Test-time scaling of each head inside the ensemble; absent heads use 1.
    pub head_weights: BTreeMap<TaskKind, f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            embed_dim: 128,
            tasks: TaskKind::ALL.to_vec(),
            pairs: default_pairs(),
            separate_encoders: false,
            momentum: 0.999,
            beta_init: 1.2,
            head_weights: BTreeMap::new(),
        }
    }
}

/// Decorrelate every auxiliary head against the discriminative one.
pub fn default_pairs() -> Vec<(TaskKind, TaskKind)> {
    vec![(TaskKind::Disc, TaskKind::Dance), (TaskKind::Disc, TaskKind::Shared), (TaskKind::Disc, TaskKind::Intra)]
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.embed_dim == 0 {
            return Err(DivaError::config("embed_dim must be >= 1"));
        }
        if self.tasks.is_empty() {
            return Err(DivaError::config("at least one task must be active"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(DivaError::config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if !(self.beta_init > 0.0) {
            return Err(DivaError::config("beta_init must be > 0"));
        }
        for &(a, b) in &self.pairs {
            if a == b || !self.tasks.contains(&a) || !self.tasks.contains(&b) {
                return Err(DivaError::config(format!("pair ({a},{b}) must reference two distinct active heads")));
            }
        }
        Ok(())
    }

    pub fn head_weight(&self, kind: TaskKind) -> f64 {
        self.head_weights.get(&kind).copied().unwrap_or(1.0)
    }

    /// Active pairs, dropping any whose heads are not trained.
    pub fn active_pairs(&self) -> Vec<(TaskKind, TaskKind)> {
        self.pairs.iter().copied().filter(|(a, b)| self.tasks.contains(a) && self.tasks.contains(b)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    /// Uniform in `±1/√fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Linear { weight: Tensor::new(vec![fan_in, fan_out], w).unwrap(), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of linear layers with a rectifier between consecutive layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        Mlp { layers: dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect() }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::out_dim)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    fn bind(tape: &mut Tape, l: &Linear, trainable: bool, vars: &mut Vec<Var>) -> Self {
        let mut leaf = |t: &Tensor| {
            let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
            vars.push(v);
            v
        };
        let weight = leaf(&l.weight);
        let bias = leaf(&l.bias);
        BoundLinear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl BoundMlp {
    fn bind(tape: &mut Tape, m: &Mlp, trainable: bool, vars: &mut Vec<Var>) -> Self {
        BoundMlp { layers: m.layers.iter().map(|l| BoundLinear::bind(tape, l, trainable, vars)).collect() }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.relu(h);
            }
            h = l.forward(tape, h)?;
        }
        Ok(h)
    }
}

/// Exponential moving average of the encoder and contrastive head.
///
/// Only ever written through [`MomentumShadow::update`]; it is not part of
/// the trainable parameter list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumShadow {
    pub encoder: Mlp,
    pub head: Linear,
    pub momentum: f64,
}

/// `shadow ← μ·shadow + (1−μ)·live`, elementwise.
pub fn momentum_update(shadow: &mut Tensor, live: &Tensor, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(DivaError::Domain(format!("momentum {mu} outside [0, 1]")));
    }
    if !shadow.same_shape(live) {
        return Err(DivaError::dim(format!("shadow {:?} vs live {:?}", shadow.shape(), live.shape())));
    }
    for (s, &p) in shadow.data_mut().iter_mut().zip(live.data()) {
        *s = mu * *s + (1.0 - mu) * p;
    }
    Ok(())
}

impl MomentumShadow {
    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.encoder.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.encoder.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn update(&mut self, live_encoder: &Mlp, live_head: &Linear) -> Result<()> {
        let mu = self.momentum;
        let mut live: Vec<&Tensor> = Vec::new();
        for l in &live_encoder.layers {
            live.push(&l.weight);
            live.push(&l.bias);
        }
        live.push(&live_head.weight);
        live.push(&live_head.bias);
        let shadow = self.tensors_mut();
        if shadow.len() != live.len() {
            return Err(DivaError::dim("shadow and live networks differ in depth"));
        }
        for (s, p) in shadow.into_iter().zip(live) {
            momentum_update(s, p, mu)?;
        }
        Ok(())
    }

    /// Unit-norm shadow embeddings of a batch `[B×F]`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut sink = Vec::new();
        let enc = BoundMlp::bind(&mut tape, &self.encoder, false, &mut sink);
        let head = BoundLinear::bind(&mut tape, &self.head, false, &mut sink);
        let xv = tape.constant(x.clone());
        let f = enc.forward(&mut tape, xv)?;
        let z = head.forward(&mut tape, f)?;
        let e = tape.l2_normalize(z)?;
        Ok(tape.value(e).clone())
    }
}

/// All model parameters: encoder θ, heads ζ_k, decorrelation maps ψ,
/// margin boundaries β and the momentum shadow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    /// One encoder when shared, otherwise one per head in task order.
    pub encoders: Vec<Mlp>,
    pub heads: BTreeMap<TaskKind, Linear>,
    pub decorrelators: Vec<((TaskKind, TaskKind), Mlp)>,
    /// Learnable margin boundary per ranking task, each a one-element tensor.
    pub betas: BTreeMap<TaskKind, Tensor>,
    pub shadow: Option<MomentumShadow>,
}

/// A [`ModelState`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoders: Vec<BoundMlp>,
    pub heads: BTreeMap<TaskKind, BoundLinear>,
    pub decorrelators: Vec<((TaskKind, TaskKind), BoundMlp)>,
    pub betas: BTreeMap<TaskKind, Var>,
    /// Leaves in canonical parameter order.
    pub vars: Vec<Var>,
    separate: bool,
    tasks: Vec<TaskKind>,
}

impl BoundModel {
    fn encoder_for(&self, kind: TaskKind) -> &BoundMlp {
        if self.separate {
            let i = self.tasks.iter().position(|&t| t == kind).expect("active task");
            &self.encoders[i]
        } else {
            &self.encoders[0]
        }
    }

    pub fn features(&self, tape: &mut Tape, x: Var, kind: TaskKind) -> Result<Var> {
        self.encoder_for(kind).forward(tape, x)
    }

    pub fn head(&self, tape: &mut Tape, f: Var, kind: TaskKind) -> Result<Var> {
        let h = self.heads.get(&kind).ok_or_else(|| DivaError::config(format!("head {kind} is not active")))?;
        let z = h.forward(tape, f)?;
        tape.l2_normalize(z)
    }

    /// Embeddings of a batch for every active head, encoding once when the
    /// encoder is shared.
    pub fn embed_all(&self, tape: &mut Tape, x: Var) -> Result<BTreeMap<TaskKind, Var>> {
        let mut out = BTreeMap::new();
        let shared = if self.separate { None } else { Some(self.encoders[0].forward(tape, x)?) };
        for &k in &self.tasks {
            let f = match shared {
                Some(f) => f,
                None => self.features(tape, x, k)?,
            };
            out.insert(k, self.head(tape, f, k)?);
        }
        Ok(out)
    }

    pub fn embed_one(&self, tape: &mut Tape, x: Var, kind: TaskKind) -> Result<Var> {
        let f = self.features(tape, x, kind)?;
        self.head(tape, f, kind)
    }

    pub fn decorrelator(&self, pair: (TaskKind, TaskKind)) -> Option<&BoundMlp> {
        self.decorrelators.iter().find(|(p, _)| *p == pair).map(|(_, m)| m)
    }
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tasks = config.tasks.clone();
        tasks.sort();
        tasks.dedup();
        let config = ModelConfig { tasks, ..config };
        let enc_dims = config.encoder.layer_dims();
        let n_enc = if config.separate_encoders { config.tasks.len() } else { 1 };
        let encoders: Vec<Mlp> = (0..n_enc).map(|_| Mlp::init(&enc_dims, rng)).collect();
        let n = config.encoder.feature_dim;
        let d = config.embed_dim;
        let heads: BTreeMap<_, _> = config.tasks.iter().map(|&k| (k, Linear::init(n, d, rng))).collect();
        let decorrelators = if config.separate_encoders {
            Vec::new()
        } else {
            config.active_pairs().into_iter().map(|p| (p, Mlp::init(&[d, d, d], rng))).collect()
        };
        let betas = config
            .tasks
            .iter()
            .filter(|k| k.is_ranking())
            .map(|&k| (k, Tensor::scalar(config.beta_init)))
            .collect();
        let mut model = ModelState { config, encoders, heads, decorrelators, betas, shadow: None };
        if model.config.tasks.contains(&TaskKind::Dance) {
            model.shadow = Some(MomentumShadow {
                encoder: model.encoder(TaskKind::Dance).clone(),
                head: model.heads[&TaskKind::Dance].clone(),
                momentum: model.config.momentum,
            });
        }
        Ok(model)
    }

    pub fn tasks(&self) -> &[TaskKind] {
        &self.config.tasks
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn input_dim(&self) -> usize {
        self.config.encoder.input_dim
    }

    pub fn encoder(&self, kind: TaskKind) -> &Mlp {
        if self.config.separate_encoders {
            let i = self.config.tasks.iter().position(|&t| t == kind).expect("active task");
            &self.encoders[i]
        } else {
            &self.encoders[0]
        }
    }

    /// Canonical parameter names, matching [`ModelState::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (e, enc) in self.encoders.iter().enumerate() {
            for l in 0..enc.layers.len() {
                names.push(format!("encoder{e}.layer{l}.weight"));
                names.push(format!("encoder{e}.layer{l}.bias"));
            }
        }
        for k in self.heads.keys() {
            names.push(format!("head.{k}.weight"));
            names.push(format!("head.{k}.bias"));
        }
        for ((a, b), m) in &self.decorrelators {
            for l in 0..m.layers.len() {
                names.push(format!("psi.{a}-{b}.layer{l}.weight"));
                names.push(format!("psi.{a}-{b}.layer{l}.bias"));
            }
        }
        for k in self.betas.keys() {
            names.push(format!("beta.{k}"));
        }
        names
    }

    /// Trainable tensors in canonical order. The shadow is not included.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for enc in &self.encoders {
            for l in &enc.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        for h in self.heads.values() {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        for (_, m) in &self.decorrelators {
            for l in &m.layers {
                out.push(&l.weight);
                out.push(&l.bias);
            }
        }
        out.extend(self.betas.values());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for enc in &mut self.encoders {
            for l in &mut enc.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        for h in self.heads.values_mut() {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        for (_, m) in &mut self.decorrelators {
            for l in &mut m.layers {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.extend(self.betas.values_mut());
        out
    }

    /// Indices (in canonical order) of the margin boundaries.
    pub fn beta_param_indices(&self) -> Vec<usize> {
        let n = self.params().len();
        (n - self.betas.len()..n).collect()
    }

    pub fn beta(&self, kind: TaskKind) -> Option<f64> {
        self.betas.get(&kind).map(Tensor::item)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut vars = Vec::new();
        let encoders = self.encoders.iter().map(|e| BoundMlp::bind(tape, e, trainable, &mut vars)).collect();
        let heads = self.heads.iter().map(|(&k, h)| (k, BoundLinear::bind(tape, h, trainable, &mut vars))).collect();
        let decorrelators = self
            .decorrelators
            .iter()
            .map(|(p, m)| (*p, BoundMlp::bind(tape, m, trainable, &mut vars)))
            .collect();
        let betas = self
            .betas
            .iter()
            .map(|(&k, b)| {
                let v = if trainable { tape.param(b.clone()) } else { tape.constant(b.clone()) };
                vars.push(v);
                (k, v)
            })
            .collect();
        BoundModel {
            encoders,
            heads,
            decorrelators,
            betas,
            vars,
            separate: self.config.separate_encoders,
            tasks: self.config.tasks.clone(),
        }
    }

    /// Binds the model structure to leaves already on a tape, given in
    /// canonical order. Values are taken from the tape, not from `self`.
    pub fn bind_vars(&self, tape: &Tape, vars: &[Var]) -> Result<BoundModel> {
        let params = self.params();
        if vars.len() != params.len() {
            return Err(DivaError::dim(format!("{} leaves for {} parameters", vars.len(), params.len())));
        }
        for (i, (&v, p)) in vars.iter().zip(&params).enumerate() {
            if !tape.value(v).same_shape(p) {
                return Err(DivaError::dim(format!("leaf {i}: {:?} vs parameter {:?}", tape.value(v).shape(), p.shape())));
            }
        }
        let mut it = vars.iter().copied();
        let mut next_linear = || BoundLinear { weight: it.next().expect("counted"), bias: it.next().expect("counted") };
        let encoders =
            self.encoders.iter().map(|e| BoundMlp { layers: e.layers.iter().map(|_| next_linear()).collect() }).collect();
        let heads = self.heads.keys().map(|&k| (k, next_linear())).collect();
        let decorrelators = self
            .decorrelators
            .iter()
            .map(|(p, m)| (*p, BoundMlp { layers: m.layers.iter().map(|_| next_linear()).collect() }))
            .collect();
        let betas = self.betas.keys().zip(&vars[vars.len() - self.betas.len()..]).map(|(&k, &v)| (k, v)).collect();
        Ok(BoundModel {
            encoders,
            heads,
            decorrelators,
            betas,
            vars: vars.to_vec(),
            separate: self.config.separate_encoders,
            tasks: self.config.tasks.clone(),
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(DivaError::dim(format!("input has {} features, encoder expects {}", x.cols(), self.input_dim())));
        }
        if !x.is_finite() {
            return Err(DivaError::Domain("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// Encoder features `f` for a batch `[B×F]` (first encoder when separate).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let f = bound.features(&mut tape, xv, self.config.tasks[0])?;
        Ok(tape.value(f).clone())
    }

    /// Projects encoder features through one head onto the unit sphere.
    pub fn embed(&self, f: &Tensor, kind: TaskKind) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let fv = tape.constant(f.clone());
        let e = bound.head(&mut tape, fv, kind)?;
        Ok(tape.value(e).clone())
    }

    /// Unit-norm embeddings of a batch under every active head.
    pub fn embed_batch(&self, x: &Tensor) -> Result<BTreeMap<TaskKind, Tensor>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let vars = bound.embed_all(&mut tape, xv)?;
        Ok(vars.into_iter().map(|(k, v)| (k, tape.value(v).clone())).collect())
    }

    /// Weighted concatenation `[w_k · φ_k(x)]` over the heads in `weights`.
    pub fn ensemble_embed(&self, x: &Tensor, weights: &[(TaskKind, f64)]) -> Result<Tensor> {
        let per_head = self.embed_batch(x)?;
        ensemble(&per_head, weights)
    }

    pub fn default_ensemble_weights(&self) -> Vec<(TaskKind, f64)> {
        self.config.tasks.iter().map(|&k| (k, self.config.head_weight(k))).collect()
    }

    pub fn update_shadow(&mut self) -> Result<()> {
        if self.shadow.is_none() {
            return Ok(());
        }
        let enc = self.encoder(TaskKind::Dance).clone();
        let head = self.heads[&TaskKind::Dance].clone();
        self.shadow.as_mut().expect("checked").update(&enc, &head)
    }
}

/// Concatenates per-head embeddings, each scaled by its weight.
pub fn ensemble(per_head: &BTreeMap<TaskKind, Tensor>, weights: &[(TaskKind, f64)]) -> Result<Tensor> {
    if weights.is_empty() {
        return Err(DivaError::Contract("ensemble needs at least one active head".into()));
    }
    let blocks: Vec<(&Tensor, f64)> = weights
        .iter()
        .map(|(k, w)| {
            per_head.get(k).map(|t| (t, *w)).ok_or_else(|| DivaError::config(format!("head {k} is not active")))
        })
        .collect::<Result<_>>()?;
    let rows = blocks[0].0.rows();
    let width: usize = blocks.iter().map(|(t, _)| t.cols()).sum();
    let mut data = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for (t, w) in &blocks {
            data.extend(t.row(r).iter().map(|v| v * w));
        }
    }
    Tensor::matrix(rows, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { input_dim: 5, hidden_dims: vec![7], feature_dim: 6 },
            embed_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn rand_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_bias_only_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelState::new(small_config(), &mut rng).unwrap();
        for enc in &mut m.encoders {
            for l in &mut enc.layers {
                l.weight = Tensor::zeros(l.weight.shape());
                l.bias = Tensor::full(l.bias.shape(), 0.25);
            }
        }
        let x = rand_batch(&mut rng, 3, 5);
        let f = m.encode(&x).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn encode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = ModelState::new(small_config(), &mut rng).unwrap();
        let x = rand_batch(&mut rng, 4, 5);
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        assert!(m.encode(&rand_batch(&mut rng, 4, 3)).is_err());
    }

    #[test]
    fn heads_are_unit_norm_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelState::new(small_config(), &mut rng).unwrap();
        let x = rand_batch(&mut rng, 6, 5);
        let per = m.embed_batch(&x).unwrap();
        for e in per.values() {
            for row in e.iter_rows() {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
        assert_ne!(per[&TaskKind::Disc], per[&TaskKind::Shared]);
    }

    #[test]
    fn default_embed_dim_is_128() {
        assert_eq!(ModelConfig::default().embed_dim, 128);
    }

    #[test]
    fn momentum_update_examples() {
        let live = Tensor::vector(vec![0.0, 2.0]);
        let mut s = Tensor::vector(vec![1.0, -3.0]);
        momentum_update(&mut s, &live, 0.0).unwrap();
        assert_eq!(s, live);

        let mut s = Tensor::vector(vec![1.0, -3.0]);
        momentum_update(&mut s, &live, 1.0).unwrap();
        assert_eq!(s.data(), &[1.0, -3.0]);

        let mut s = Tensor::scalar(1.0);
        momentum_update(&mut s, &Tensor::scalar(0.0), 0.999).unwrap();
        assert!((s.item() - 0.999).abs() < 1e-15);

        assert!(momentum_update(&mut s, &Tensor::scalar(0.0), 1.5).is_err());
        assert!(momentum_update(&mut s, &Tensor::scalar(0.0), -0.1).is_err());
    }

    #[test]
    fn shadow_mirrors_live_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = ModelState::new(small_config(), &mut rng).unwrap();
        let shadow = m.shadow.as_ref().unwrap();
        let live: Vec<Vec<usize>> = m
            .encoder(TaskKind::Dance)
            .layers
            .iter()
            .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
            .chain([m.heads[&TaskKind::Dance].weight.shape().to_vec(), m.heads[&TaskKind::Dance].bias.shape().to_vec()])
            .collect();
        let sh: Vec<Vec<usize>> = shadow.tensors().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(live, sh);
    }

    #[test]
    fn ensemble_weights_scale_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ModelState::new(small_config(), &mut rng).unwrap();
        let x = rand_batch(&mut rng, 2, 5);
        let per = m.embed_batch(&x).unwrap();
        let w = [(TaskKind::Disc, 1.0), (TaskKind::Dance, 2.0)];
        let e = ensemble(&per, &w).unwrap();
        assert_eq!(e.cols(), 8);
        let total = crate::tensor::sq_dist(e.row(0), e.row(1));
        let expect: f64 =
            w.iter().map(|(k, wk)| wk * wk * crate::tensor::sq_dist(per[k].row(0), per[k].row(1))).sum();
        assert!((total - expect).abs() < 1e-12);
        assert!(ensemble(&per, &[]).is_err());
    }

    #[test]
    fn param_names_align_with_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = ModelState::new(small_config(), &mut rng).unwrap();
        assert_eq!(m.param_names().len(), m.params().len());
        let idx = m.beta_param_indices();
        assert_eq!(idx.len(), 3);
        for i in idx {
            assert!(m.param_names()[i].starts_with("beta."));
        }
    }

    #[test]
    fn separate_encoders_have_no_decorrelators() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = ModelConfig { separate_encoders: true, ..small_config() };
        let m = ModelState::new(cfg, &mut rng).unwrap();
        assert_eq!(m.encoders.len(), 4);
        assert!(m.decorrelators.is_empty());
    }

    #[test]
    fn task_list_parsing() {
        assert_eq!(parse_task_list("Da,D").unwrap(), vec![TaskKind::Disc, TaskKind::Dance]);
        assert!(parse_task_list("D,X").is_err());
        assert_eq!(task_list_label(&TaskKind::ALL), "D,S,I,Da");
    }
}
