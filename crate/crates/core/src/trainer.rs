//! Joint optimization loop.
//!
//! One [`Trainer::train_step`] runs, in order: forward of every head on the
//! batch, triplet mining per ranking task, augmentation and embedding of the
//! contrastive views (live head and momentum shadow), the joint loss against
//! a snapshot of the queue, backward and an Adam update, the momentum update
//! of the shadow, and finally the push of the shadow keys into the queue.
//! Pushing last means a sample is never its own negative within a step.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{DivaError, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::mining::{build_batch_from, mine_triplets, BatchSpec};
use crate::model::{ModelConfig, ModelState, TaskKind};
use crate::objectives::{joint_loss_from, JointInputs, LossBreakdown, LossWeights};
use crate::queue::MemoryQueue;
use crate::tensor::Tensor;

/// Smallest value a learnable margin boundary is allowed to take.
pub const BETA_MIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Probability of zeroing each coordinate.
    pub dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { noise_sigma: 0.1, dropout: 0.1 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DivaError::config("augment.noise_sigma must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            return Err(DivaError::config("augment.dropout must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// `x̃ = mask ⊙ (x + ε)` with `ε ~ N(0, σ²)` and each mask entry zero with
/// probability `dropout`. No rescaling is applied.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        let noise: f64 = if cfg.noise_sigma > 0.0 { cfg.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { 0.0 };
        let keep = cfg.dropout == 0.0 || rng.random::<f64>() >= cfg.dropout;
        *v = if keep { *v + noise } else { 0.0 };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub batch: BatchSpec,
    pub augment: AugmentConfig,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) from which the learning rate is multiplied by
    /// `lr_decay_factor` once more.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub queue_capacity: usize,
    /// Overrides `floor(train size / batch size)`.
    pub steps_per_epoch: Option<usize>,
    /// Evaluate on the test split every this many epochs; 0 disables.
    pub eval_every: usize,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            batch: BatchSpec::default(),
            augment: AugmentConfig::default(),
            epochs: 150,
            lr: 1e-5,
            weight_decay: 5e-4,
            lr_decay_epochs: vec![100],
            lr_decay_factor: 0.3,
            queue_capacity: 4096,
            steps_per_epoch: None,
            eval_every: 5,
            eval: EvalConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.batch.validate(&self.model.tasks)?;
        if !self.model.tasks.contains(&TaskKind::Disc) {
            return Err(DivaError::config("the active task set must contain disc"));
        }
        if self.epochs == 0 {
            return Err(DivaError::config("epochs must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DivaError::config("lr must be > 0"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DivaError::config("weight_decay must be >= 0"));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(DivaError::config("lr_decay_factor must be > 0"));
        }
        if self.queue_capacity == 0 {
            return Err(DivaError::config("queue_capacity must be >= 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(DivaError::config("steps_per_epoch must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(n as i32)
    }

    pub fn with_tasks(mut self, tasks: &[TaskKind]) -> Self {
        let mut tasks = tasks.to_vec();
        tasks.sort();
        tasks.dedup();
        self.model.pairs.retain(|(a, b)| tasks.contains(a) && tasks.contains(b));
        self.model.tasks = tasks;
        self
    }
}

/// First and second moment estimates of Adam, one entry per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }
}

/// One bias-corrected Adam update. Weight decay enters the gradient as
/// `wd·p` for every parameter whose `decay` flag is set.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut Adam,
    lr: f64,
    wd: f64,
    decay: &[bool],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != decay.len() {
        return Err(DivaError::dim(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.m[i]) {
            return Err(DivaError::dim(format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let wd_i = if decay[i] { wd } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (pj, &gj)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = gj + wd_i * *pj;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *pj -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    /// One entry per active task followed by one per decorrelated pair.
    pub components: Vec<(String, f64)>,
    pub total: f64,
}

impl StepRecord {
    fn new(epoch: usize, step: u64, lr: f64, tasks: &[TaskKind], b: &LossBreakdown) -> Self {
        let mut components: Vec<(String, f64)> =
            tasks.iter().map(|&k| (k.name().to_string(), b.task(k).unwrap_or(0.0))).collect();
        components.extend(b.decorrelation.iter().map(|((a, c), v)| (format!("c:{a}-{c}"), *v)));
        StepRecord { epoch, step, lr, components, total: b.total }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// `epoch step L_disc L_shared L_intra L_dance c_sum total`, with `-` for
    /// inactive tasks.
    pub fn progress_line(&self) -> String {
        let mut fields = vec![self.epoch.to_string(), self.step.to_string()];
        for k in TaskKind::ALL {
            fields.push(self.component(k.name()).map_or("-".to_string(), |v| format!("{v:.6}")));
        }
        let c_sum: f64 = self.components.iter().filter(|(n, _)| n.starts_with("c:")).map(|(_, v)| v).sum();
        fields.push(format!("{c_sum:.6}"));
        fields.push(format!("{:.6}", self.total));
        fields.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    /// Number of completed epochs when the snapshot was taken.
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalSnapshot>,
}

/// Complete mutable training state; everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelState,
    pub optimizer: Adam,
    pub queue: Option<MemoryQueue>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Steps already taken inside the current epoch.
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub history: TrainHistory,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ModelState::new(config.model.clone(), &mut rng)?;
        let queue = if model.tasks().contains(&TaskKind::Dance) {
            Some(MemoryQueue::init(config.queue_capacity, model.embed_dim(), &mut rng)?)
        } else {
            None
        };
        let optimizer = Adam::new(&model.params());
        let history = TrainHistory { seed: config.seed, ..TrainHistory::default() };
        Ok(Trainer { config, model, optimizer, queue, rng, epoch: 0, step_in_epoch: 0, global_step: 0, history })
    }

    fn pairs(&self) -> Vec<(TaskKind, TaskKind)> {
        self.model.decorrelators.iter().map(|(p, _)| *p).collect()
    }

    pub fn steps_per_epoch(&self, dataset: &Dataset) -> usize {
        let n_train = dataset.train_members().values().map(Vec::len).sum::<usize>();
        self.config.steps_per_epoch.unwrap_or((n_train / self.config.batch.batch_size()).max(1))
    }

    /// Mines triplets and draws contrastive views for a batch. Returns the
    /// loss inputs and the shadow keys to enqueue.
    fn prepare(&mut self, x: &Tensor, labels: &[u32], emb: &BTreeMap<TaskKind, Tensor>) -> Result<(JointInputs, Tensor)> {
        let mut triplets = BTreeMap::new();
        for (&kind, e) in emb {
            if kind.is_ranking() {
                triplets.insert(kind, mine_triplets(kind, e, labels, self.config.loss.lambda, &mut self.rng)?);
            }
        }
        let (x_aug, keys, negatives) = match (&self.model.shadow, &self.queue) {
            (Some(shadow), Some(queue)) => {
                let x_aug = augment(x, &self.config.augment, &mut self.rng);
                let keys = shadow.embed(&x_aug)?;
                (x_aug, keys, queue.snapshot())
            }
            _ => (Tensor::zeros(&[0, x.cols()]), Tensor::zeros(&[0, self.model.embed_dim()]), Tensor::zeros(&[0, 0])),
        };
        Ok((JointInputs { x: x.clone(), x_aug, triplets, negatives }, keys))
    }

    /// Loss of the current (frozen) model on prepared inputs.
    pub fn batch_loss(&self, inputs: &JointInputs) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, false);
        let xv = tape.constant(inputs.x.clone());
        let emb = bound.embed_all(&mut tape, xv)?;
        Ok(joint_loss_from(&mut tape, &bound, &emb, inputs, &self.config.loss, &self.pairs())?.breakdown)
    }

    /// Draws a batch from the training classes and prepares loss inputs for
    /// it without changing the model.
    pub fn sample_inputs(&mut self, dataset: &Dataset) -> Result<JointInputs> {
        let rows = build_batch_from(&dataset.train_members(), &self.config.batch, &mut self.rng)?;
        let (x, labels) = dataset.select(&rows);
        let emb = self.model.embed_batch(&x)?;
        Ok(self.prepare(&x, &labels, &emb)?.0)
    }

    /// One optimization step on the batch `(x, labels)`.
    pub fn train_step(&mut self, x: &Tensor, labels: &[u32]) -> Result<StepRecord> {
        let lr = self.config.lr_at(self.epoch);
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let emb_vars = bound.embed_all(&mut tape, xv)?;
        let emb: BTreeMap<TaskKind, Tensor> = emb_vars.iter().map(|(&k, &v)| (k, tape.value(v).clone())).collect();
        let (inputs, keys) = self.prepare(x, labels, &emb)?;
        let joint = joint_loss_from(&mut tape, &bound, &emb_vars, &inputs, &self.config.loss, &self.pairs())?;
        let record = StepRecord::new(self.epoch, self.global_step, lr, self.model.tasks(), &joint.breakdown);
        if !joint.breakdown.total.is_finite() {
            return Err(DivaError::Divergence(format!(
                "non-finite loss at epoch {} step {}: {}",
                self.epoch,
                self.global_step,
                serde_json::to_string(&joint.breakdown).unwrap_or_default()
            )));
        }
        let grads = tape.backward(joint.total)?;
        let grad_list: Vec<Tensor> = bound.vars.iter().map(|&v| grads.get_or_zeros(v, tape.value(v))).collect();
        drop(tape);
        let betas = self.model.beta_param_indices();
        let n = grad_list.len();
        let decay: Vec<bool> = (0..n).map(|i| !betas.contains(&i)).collect();
        let mut params = self.model.params_mut();
        adam_step(&mut params, &grad_list, &mut self.optimizer, lr, self.config.weight_decay, &decay)?;
        for b in self.model.betas.values_mut() {
            let v = b.data_mut();
            v[0] = v[0].max(BETA_MIN);
        }
        self.model.update_shadow()?;
        if let Some(q) = &mut self.queue {
            q.push(&keys)?;
        }
        self.global_step += 1;
        Ok(record)
    }

    /// Draws a batch and runs [`Trainer::train_step`], advancing the epoch
    /// counters and recording the step.
    pub fn step_once(&mut self, dataset: &Dataset, steps_per_epoch: usize) -> Result<StepRecord> {
        let rows = build_batch_from(&dataset.train_members(), &self.config.batch, &mut self.rng)?;
        let (x, labels) = dataset.select(&rows);
        let rec = self.train_step(&x, &labels)?;
        self.history.steps.push(rec.clone());
        self.step_in_epoch += 1;
        if self.step_in_epoch >= steps_per_epoch {
            self.step_in_epoch = 0;
            self.epoch += 1;
        }
        Ok(rec)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Trains until `config.epochs` are complete, writing one progress line
    /// per step to `progress` and taking periodic evaluation snapshots.
    pub fn run(&mut self, dataset: &Dataset, mut progress: Option<&mut dyn Write>) -> Result<()> {
        check_dataset(&self.model, dataset)?;
        let spe = self.steps_per_epoch(dataset);
        while !self.is_finished() {
            let before = self.epoch;
            let rec = self.step_once(dataset, spe)?;
            if let Some(w) = progress.as_deref_mut() {
                writeln!(w, "{}", rec.progress_line())?;
            }
            let every = self.config.eval_every;
            if self.epoch != before && every > 0 && self.epoch.is_multiple_of(every) {
                let report = evaluate(&self.model, dataset, &self.config.eval)?;
                self.history.evals.push(EvalSnapshot { epoch: self.epoch, report });
            }
        }
        Ok(())
    }
}

fn check_dataset(model: &ModelState, dataset: &Dataset) -> Result<()> {
    if dataset.feature_dim() != model.input_dim() {
        return Err(DivaError::Incompatible(format!(
            "dataset has {} features, model expects {}",
            dataset.feature_dim(),
            model.input_dim()
        )));
    }
    let (train, test) = dataset.classes_by_split();
    if !train.is_disjoint(&test) {
        return Err(DivaError::Contract("train and test classes overlap".into()));
    }
    Ok(())
}

/// Trains a fresh model on `dataset` with `config`.
pub fn fit(dataset: &Dataset, config: TrainConfig, progress: Option<&mut dyn Write>) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(dataset, progress)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::model::EncoderConfig;

    #[test]
    fn augment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let id = AugmentConfig { noise_sigma: 0.0, dropout: 0.0 };
        assert_eq!(augment(&x, &id, &mut rng), x);
        let all = AugmentConfig { noise_sigma: 0.5, dropout: 1.0 };
        assert!(augment(&x, &all, &mut rng).data().iter().all(|&v| v == 0.0));
        let cfg = AugmentConfig { noise_sigma: 0.3, dropout: 0.25 };
        let mut mean = [0.0; 3];
        let draws = 10_000;
        for _ in 0..draws {
            for (m, v) in mean.iter_mut().zip(augment(&x, &cfg, &mut rng).data()) {
                *m += v / draws as f64;
            }
        }
        for (m, v) in mean.iter().zip(x.data()) {
            assert!((m - 0.75 * v).abs() < 0.02 * v.abs(), "{m} vs {}", 0.75 * v);
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = Tensor::full(&[3], 1.0);
        let mut st = Adam::new(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::full(&[3], 0.5)], &mut st, 1e-3, 0.0, &[true]).unwrap();
        for &v in p.data() {
            assert!((v - (1.0 - 1e-3)).abs() < 1e-10);
        }
        let mut q = Tensor::full(&[2], 0.7);
        let mut st = Adam::new(&[&q]);
        adam_step(&mut [&mut q], &[Tensor::zeros(&[2])], &mut st, 1e-3, 0.0, &[true]).unwrap();
        assert_eq!(q.data(), &[0.7, 0.7]);
        assert!(adam_step(&mut [&mut q], &[Tensor::zeros(&[3])], &mut st, 1e-3, 0.0, &[true]).is_err());
    }

    pub(crate) fn tiny_config(tasks: &[TaskKind]) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                encoder: EncoderConfig { input_dim: 8, hidden_dims: vec![12], feature_dim: 10 },
                embed_dim: 6,
                ..ModelConfig::default()
            },
            batch: BatchSpec { n_classes: 3, m_per_class: 3 },
            epochs: 2,
            lr: 1e-3,
            queue_capacity: 20,
            eval_every: 1,
            ..TrainConfig::default()
        }
        .with_tasks(tasks)
    }

    fn tiny_data() -> Dataset {
        generate_synthetic(&SynthConfig {
            n_train_classes: 4,
            n_test_classes: 3,
            samples_per_class: 6,
            feature_dim: 8,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn disc_only_has_one_term() {
        let ds = tiny_data();
        let mut t = Trainer::new(tiny_config(&[TaskKind::Disc])).unwrap();
        let rec = t.step_once(&ds, 100).unwrap();
        assert_eq!(rec.components.len(), 1);
        assert!(t.queue.is_none());
    }

    #[test]
    fn component_count_and_queue_growth() {
        let ds = tiny_data();
        let mut t = Trainer::new(tiny_config(&TaskKind::ALL)).unwrap();
        let rec = t.step_once(&ds, 100).unwrap();
        assert_eq!(rec.components.len(), 4 + 3);
        assert_eq!(t.queue.as_ref().unwrap().cursor(), 9);
        t.step_once(&ds, 100).unwrap();
        assert_eq!(t.queue.as_ref().unwrap().cursor(), 18);
    }

    #[test]
    fn frozen_loss_is_reproducible() {
        let ds = tiny_data();
        let mut t = Trainer::new(tiny_config(&TaskKind::ALL)).unwrap();
        let inputs = t.sample_inputs(&ds).unwrap();
        let a = t.batch_loss(&inputs).unwrap();
        let b = t.batch_loss(&inputs).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn schedule_and_validation() {
        let c = TrainConfig { lr: 1.0, lr_decay_epochs: vec![2, 4], lr_decay_factor: 0.5, ..TrainConfig::default() };
        assert_eq!(c.lr_at(1), 1.0);
        assert_eq!(c.lr_at(2), 0.5);
        assert_eq!(c.lr_at(5), 0.25);
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().with_tasks(&[TaskKind::Shared]).validate().is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let ds = tiny_data();
        let a = fit(&ds, tiny_config(&TaskKind::ALL), None).unwrap();
        let b = fit(&ds, tiny_config(&TaskKind::ALL), None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.history.evals.len(), 2);
    }
}
