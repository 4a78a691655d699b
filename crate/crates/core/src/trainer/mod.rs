//! The full training loop: warmup standard training, then alternating
//! unfair-partition discovery and invariant learning, with validation
//! early stopping, ablation switches and deterministic checkpointing.

mod checkpoint;

pub use checkpoint::{check_compatible, load_checkpoint, save_checkpoint, LoadedCheckpoint};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy_grad, multi_partition_objective_grad, unfair_objective_hard,
};
use crate::models::{init_bundle, predict_labels, ModelBundle, ModelConfig};
use crate::numerics::{sgd_step, ParamGroup, SgdConfig, Tensor2};
use crate::partitioner::{
    unfair_partition_step, PartitionMatrix, PartitionObjective, PartitionRegistry,
    PartitionStepConfig, REGISTRY_CAPACITY,
};
use crate::rng::{self, tag};

/// Training variants: the full method, the ablations, and a plain
/// empirical-risk-minimization baseline with the same epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// One fixed partition derived from a ground-truth attribute.
    StaticPartition,
    /// Partition ascent driven by weighted cross-entropy instead of the
    /// contrastive loss.
    NoSupcon,
    /// Variance terms dropped from both objectives.
    NoVariance,
    /// Keep only the latest partition instead of the top six.
    NoRecord,
    /// Plain cross-entropy epochs; no partitions, no invariance terms.
    Erm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub lambda: f64,
    pub tau: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub lr: f64,
    pub partition_lr: f64,
    pub ascent_steps: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub static_attr: Option<String>,
    pub hidden_widths: Vec<usize>,
    pub rep_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 2,
            lambda: 0.1,
            tau: 0.5,
            warmup_epochs: 5,
            max_epochs: 200,
            patience: 10,
            batch: 256,
            lr: 0.05,
            partition_lr: 1.0,
            ascent_steps: 30,
            seed: 17,
            ablation: Ablation::Full,
            static_attr: None,
            hidden_widths: vec![32],
            rep_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {}", self.k)));
        }
        if self.max_epochs < self.warmup_epochs {
            return Err(Error::Config(format!(
                "max_epochs {} must be >= warmup_epochs {}",
                self.max_epochs, self.warmup_epochs
            )));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.lr <= 0.0 || self.partition_lr <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.ablation == Ablation::StaticPartition && self.static_attr.is_none() {
            return Err(Error::Config(
                "ablation static_partition requires static_attr".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            hidden_widths: self.hidden_widths.clone(),
            rep_dim: self.rep_dim,
            k: self.k,
        }
    }

    /// Variance weight actually applied, honoring the no-variance ablation.
    fn effective_lambda(&self) -> f64 {
        if self.ablation == Ablation::NoVariance {
            0.0
        } else {
            self.lambda
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_objective: f64,
    pub val_accuracy: f64,
    pub registry_size: usize,
    pub partition_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainHistory {
    /// The per-epoch records as a JSON array.
    pub fn epochs_json(&self) -> String {
        serde_json::to_string_pretty(&self.epochs).expect("history serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub registry: PartitionRegistry,
    pub history: TrainHistory,
}

fn snapshot(group: &ParamGroup) -> Vec<Vec<f64>> {
    group.tensors.iter().map(|t| t.data().to_vec()).collect()
}

fn batches(n: usize, batch: usize, seed: u64, stream: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::substream_indexed(seed, stream, epoch as u64);
    order.shuffle(&mut rng);
    order
        .chunks(batch.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// One plain cross-entropy epoch over phi + classifier. Returns the
/// epoch-mean loss.
fn cross_entropy_epoch(
    bundle: &mut ModelBundle,
    x: &Tensor2,
    y: &[u8],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let opt = SgdConfig::new(cfg.lr);
    let mut weighted = 0.0;
    for batch in batches(x.rows(), cfg.batch, cfg.seed, tag::WARMUP_BATCH, epoch) {
        let xb = crate::partitioner::gather_rows(x, &batch);
        let yb: Vec<u8> = batch.iter().map(|&i| y[i]).collect();
        let (z, cache) = bundle.extract_cached(&xb)?;
        let logits = bundle.classify(&z)?;
        let (loss, d_logits) = cross_entropy_grad(&logits, &yb)?;
        let (cls_grads, d_z) = bundle.classifier_backward(&z, &d_logits)?;
        let phi_grads = bundle.phi_backward(&cache, &d_z)?;
        sgd_step(
            &mut [&mut bundle.phi, &mut bundle.classifier],
            &[phi_grads, cls_grads],
            &opt,
        )?;
        weighted += loss * batch.len() as f64;
    }
    Ok(weighted / x.rows() as f64)
}

/// One invariant-learning epoch: minimize the mean variance-augmented
/// per-subset cross-entropy over every recorded partition. Returns the
/// epoch-mean objective.
fn invariant_epoch(
    bundle: &mut ModelBundle,
    x: &Tensor2,
    y: &[u8],
    registry: &PartitionRegistry,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let opt = SgdConfig::new(cfg.lr);
    let lambda = cfg.effective_lambda();
    let mut weighted = 0.0;
    for batch in batches(x.rows(), cfg.batch, cfg.seed, tag::INVARIANT_BATCH, epoch) {
        let xb = crate::partitioner::gather_rows(x, &batch);
        let yb: Vec<u8> = batch.iter().map(|&i| y[i]).collect();
        let memberships = registry.batch_memberships(&batch);
        let (z, cache) = bundle.extract_cached(&xb)?;
        let logits = bundle.classify(&z)?;
        let (obj, d_logits) =
            multi_partition_objective_grad(&logits, &yb, &memberships, cfg.k, lambda)?;
        let (cls_grads, d_z) = bundle.classifier_backward(&z, &d_logits)?;
        let phi_grads = bundle.phi_backward(&cache, &d_z)?;
        sgd_step(
            &mut [&mut bundle.phi, &mut bundle.classifier],
            &[phi_grads, cls_grads],
            &opt,
        )?;
        weighted += obj * batch.len() as f64;
    }
    Ok(weighted / x.rows() as f64)
}

fn accuracy(bundle: &ModelBundle, x: &Tensor2, y: &[u8]) -> Result<f64> {
    let logits = bundle.classify(&bundle.extract(x)?)?;
    let preds = predict_labels(&logits);
    let correct = preds.iter().zip(y).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / y.len() as f64)
}

/// Map a group value to a subset id, stable across runs and platforms.
fn hash_group_to_subset(value: &str, k: usize) -> usize {
    let digest = Sha256::digest(value.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) % k as u64) as usize
}

fn static_partition(
    train: &Dataset,
    bundle: &ModelBundle,
    x: &Tensor2,
    y: &[u8],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<PartitionMatrix> {
    let attr = cfg
        .static_attr
        .as_ref()
        .ok_or_else(|| Error::Config("static partition without static_attr".into()))?;
    if !train.attr_schema().contains_key(attr) {
        return Err(Error::Config(format!(
            "static_attr '{attr}' not present in the dataset schema"
        )));
    }
    let mut assignment = Vec::with_capacity(train.len());
    for inst in train.instances() {
        let value = inst.attrs.get(attr).ok_or_else(|| {
            Error::Data(format!("instance '{}' lacks attribute '{attr}'", inst.id))
        })?;
        assignment.push(hash_group_to_subset(value, cfg.k));
    }
    let z = bundle.extract(x)?;
    let score = unfair_objective_hard(&z, y, &assignment, cfg.k, cfg.tau, cfg.effective_lambda())?
        .objective;
    Ok(PartitionMatrix {
        epoch,
        k: cfg.k,
        score,
        assignment,
    })
}

/// Standard training only: `warmup_epochs` plain cross-entropy epochs
/// over phi + classifier. Returns the per-epoch mean losses.
pub fn warmup(bundle: &mut ModelBundle, train: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("warmup: empty training set".into()));
    }
    let x = train.features_tensor();
    let y = train.labels();
    let mut losses = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 1..=cfg.warmup_epochs {
        losses.push(cross_entropy_epoch(bundle, &x, &y, cfg, epoch)?);
    }
    Ok(losses)
}

/// Full training loop. Returns the best-validation-accuracy checkpoint,
/// the partition registry and the per-epoch history.
pub fn train(train_ds: &Dataset, val_ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Data("train: empty training set".into()));
    }
    if val_ds.is_empty() {
        return Err(Error::Data("train: empty validation set".into()));
    }
    if val_ds.feature_dim() != train_ds.feature_dim() {
        return Err(Error::dimension(
            "train",
            train_ds.feature_dim(),
            val_ds.feature_dim(),
        ));
    }
    let train_ids: BTreeSet<&str> = train_ds.ids().into_iter().collect();
    if val_ds.ids().iter().any(|id| train_ids.contains(id)) {
        return Err(Error::Data("train and validation sets overlap".into()));
    }
    if cfg.ablation == Ablation::StaticPartition {
        let attr = cfg.static_attr.as_ref().expect("validated");
        if !train_ds.attr_schema().contains_key(attr) {
            return Err(Error::Config(format!(
                "static_attr '{attr}' not present in the dataset schema"
            )));
        }
    }

    let mut bundle = init_bundle(&cfg.model_config(train_ds.feature_dim()), cfg.seed)?;
    let capacity = if cfg.ablation == Ablation::NoRecord {
        1
    } else {
        REGISTRY_CAPACITY
    };
    let mut registry = PartitionRegistry::new(capacity);
    let mut history = TrainHistory::default();

    let x_train = train_ds.features_tensor();
    let y_train = train_ds.labels();
    let x_val = val_ds.features_tensor();
    let y_val = val_ds.labels();

    let mut tracker = BestTracker {
        best_acc: f64::NEG_INFINITY,
        best_epoch: 0,
        best_bundle: bundle.clone(),
    };

    for epoch in 1..=cfg.warmup_epochs {
        let loss = cross_entropy_epoch(&mut bundle, &x_train, &y_train, cfg, epoch)?;
        let acc = accuracy(&bundle, &x_val, &y_val)?;
        tracker.observe(epoch, acc, &bundle);
        history.push(epoch, Phase::Warmup, loss, acc, &registry, None, &tracker);
    }

    for epoch in (cfg.warmup_epochs + 1)..=cfg.max_epochs {
        let (objective, score) = match cfg.ablation {
            Ablation::Erm => {
                let loss = cross_entropy_epoch(&mut bundle, &x_train, &y_train, cfg, epoch)?;
                (loss, None)
            }
            _ => {
                // (a) partition discovery with phi and classifier frozen
                let score = match cfg.ablation {
                    Ablation::StaticPartition => {
                        if registry.is_empty() {
                            let pm =
                                static_partition(train_ds, &bundle, &x_train, &y_train, cfg, epoch)?;
                            let score = pm.score;
                            registry.record(pm)?;
                            Some(score)
                        } else {
                            None
                        }
                    }
                    _ => {
                        bundle.set_frozen(true, true, false);
                        let frozen_phi = snapshot(&bundle.phi);
                        let frozen_cls = snapshot(&bundle.classifier);
                        let step_cfg = PartitionStepConfig {
                            ascent_steps: cfg.ascent_steps,
                            lr: cfg.partition_lr,
                            batch_size: cfg.batch,
                            tau: cfg.tau,
                            lambda: cfg.effective_lambda(),
                            seed: cfg.seed,
                            epoch,
                            objective: if cfg.ablation == Ablation::NoSupcon {
                                PartitionObjective::WeightedCrossEntropy
                            } else {
                                PartitionObjective::SupCon
                            },
                        };
                        let pm = unfair_partition_step(&mut bundle, &x_train, &y_train, &step_cfg)?;
                        if snapshot(&bundle.phi) != frozen_phi
                            || snapshot(&bundle.classifier) != frozen_cls
                        {
                            return Err(Error::Contract(
                                "partition step modified frozen parameters".into(),
                            ));
                        }
                        let score = pm.score;
                        if cfg.ablation == Ablation::NoRecord {
                            // keep only the latest partition
                            registry = PartitionRegistry::new(1);
                        }
                        registry.record(pm)?;
                        Some(score)
                    }
                };
                // (b) invariant learning with the partition head frozen
                bundle.set_frozen(false, false, true);
                let frozen_head = snapshot(&bundle.partition_head);
                let objective =
                    invariant_epoch(&mut bundle, &x_train, &y_train, &registry, cfg, epoch)?;
                if snapshot(&bundle.partition_head) != frozen_head {
                    return Err(Error::Contract(
                        "invariant step modified the frozen partition head".into(),
                    ));
                }
                bundle.set_frozen(false, false, false);
                (objective, score)
            }
        };
        let acc = accuracy(&bundle, &x_val, &y_val)?;
        tracker.observe(epoch, acc, &bundle);
        history.push(epoch, Phase::Main, objective, acc, &registry, score, &tracker);
        if epoch - tracker.best_epoch >= cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        bundle: tracker.best_bundle,
        registry,
        history,
    })
}

struct BestTracker {
    best_acc: f64,
    best_epoch: usize,
    best_bundle: ModelBundle,
}

impl BestTracker {
    fn observe(&mut self, epoch: usize, acc: f64, bundle: &ModelBundle) {
        if acc > self.best_acc {
            self.best_acc = acc;
            self.best_epoch = epoch;
            self.best_bundle = bundle.clone();
        }
    }
}

impl TrainHistory {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        epoch: usize,
        phase: Phase,
        train_objective: f64,
        val_accuracy: f64,
        registry: &PartitionRegistry,
        partition_score: Option<f64>,
        tracker: &BestTracker,
    ) {
        self.epochs.push(EpochRecord {
            epoch,
            phase,
            train_objective,
            val_accuracy,
            registry_size: registry.len(),
            partition_score,
        });
        self.best_epoch = tracker.best_epoch;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_confounded, split, AttributeSpec, SyntheticSpec};

    fn spec(n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n,
            d_causal: 4,
            d_conf: 4,
            class_balance: 0.5,
            attributes: vec![AttributeSpec {
                name: "domain".into(),
                cardinality: 2,
                confound_strength: 0.8,
            }],
            noise_sigma: 0.5,
            prototype_scale: 1.0,
            seed,
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            warmup_epochs: 2,
            max_epochs: 6,
            patience: 3,
            batch: 64,
            ascent_steps: 5,
            hidden_widths: vec![8],
            rep_dim: 4,
            ..Default::default()
        }
    }

    fn datasets(seed: u64) -> (Dataset, Dataset) {
        let (ds, _) = generate_confounded(&spec(300, seed)).unwrap();
        let (tr, va, _) = split(&ds, (0.6, 0.2, 0.2), seed).unwrap();
        (tr, va)
    }

    #[test]
    fn warmup_zero_epochs_is_a_no_op() {
        let (tr, _) = datasets(1);
        let cfg = TrainConfig {
            warmup_epochs: 0,
            ..quick_cfg()
        };
        let mut bundle = init_bundle(&cfg.model_config(tr.feature_dim()), cfg.seed).unwrap();
        let before = bundle.clone();
        warmup(&mut bundle, &tr, &cfg).unwrap();
        assert_eq!(bundle, before);
    }

    #[test]
    fn warmup_loss_moving_average_is_non_increasing_on_separable_data() {
        // zero noise, no confounding: linearly separable
        let mut s = spec(300, 2);
        s.noise_sigma = 0.05;
        s.attributes[0].confound_strength = 0.0;
        let (ds, _) = generate_confounded(&s).unwrap();
        let cfg = TrainConfig {
            warmup_epochs: 12,
            max_epochs: 12,
            ..quick_cfg()
        };
        let mut bundle = init_bundle(&cfg.model_config(ds.feature_dim()), cfg.seed).unwrap();
        let losses = warmup(&mut bundle, &ds, &cfg).unwrap();
        let ma: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
        for pair in ma.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "moving average increased: {ma:?}"
            );
        }
    }

    #[test]
    fn warmup_is_deterministic() {
        let (tr, _) = datasets(3);
        let cfg = quick_cfg();
        let mut a = init_bundle(&cfg.model_config(tr.feature_dim()), cfg.seed).unwrap();
        let mut b = a.clone();
        warmup(&mut a, &tr, &cfg).unwrap();
        warmup(&mut b, &tr, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn max_epochs_equal_warmup_returns_warmup_only() {
        let (tr, va) = datasets(4);
        let cfg = TrainConfig {
            warmup_epochs: 3,
            max_epochs: 3,
            ..quick_cfg()
        };
        let out = train(&tr, &va, &cfg).unwrap();
        assert!(out.registry.is_empty());
        assert_eq!(out.history.epochs.len(), 3);
        assert!(out
            .history
            .epochs
            .iter()
            .all(|e| e.phase == Phase::Warmup));
    }

    #[test]
    fn no_record_registry_keeps_only_the_latest() {
        let (tr, va) = datasets(5);
        let cfg = TrainConfig {
            ablation: Ablation::NoRecord,
            ..quick_cfg()
        };
        let out = train(&tr, &va, &cfg).unwrap();
        assert_eq!(out.registry.len(), 1);
        let last_main = out
            .history
            .epochs
            .iter()
            .filter(|e| e.phase == Phase::Main)
            .next_back()
            .unwrap();
        assert_eq!(out.registry.entries()[0].epoch, last_main.epoch);
    }

    #[test]
    fn train_is_bitwise_deterministic() {
        let (tr, va) = datasets(6);
        let cfg = quick_cfg();
        let a = train(&tr, &va, &cfg).unwrap();
        let b = train(&tr, &va, &cfg).unwrap();
        assert_eq!(a.bundle, b.bundle);
        assert_eq!(a.registry, b.registry);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn no_variance_equals_lambda_zero() {
        let (tr, va) = datasets(7);
        let mut cfg_nv = quick_cfg();
        cfg_nv.ablation = Ablation::NoVariance;
        cfg_nv.lambda = 0.37; // must be ignored
        let mut cfg_l0 = quick_cfg();
        cfg_l0.lambda = 0.0;
        let a = train(&tr, &va, &cfg_nv).unwrap();
        let b = train(&tr, &va, &cfg_l0).unwrap();
        assert_eq!(a.bundle, b.bundle);
        for (ea, eb) in a.history.epochs.iter().zip(&b.history.epochs) {
            assert!((ea.train_objective - eb.train_objective).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stopping_fires_at_patience_after_best() {
        let (tr, va) = datasets(8);
        let cfg = TrainConfig {
            warmup_epochs: 1,
            max_epochs: 100,
            patience: 4,
            ..quick_cfg()
        };
        let out = train(&tr, &va, &cfg).unwrap();
        let last = out.history.epochs.last().unwrap();
        if last.epoch < cfg.max_epochs {
            assert_eq!(last.epoch - out.history.best_epoch, cfg.patience);
        }
    }

    #[test]
    fn static_partition_requires_known_attr() {
        let (tr, va) = datasets(9);
        let cfg = TrainConfig {
            ablation: Ablation::StaticPartition,
            static_attr: Some("nope".into()),
            ..quick_cfg()
        };
        assert!(matches!(train(&tr, &va, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn static_partition_records_exactly_one_partition() {
        let (tr, va) = datasets(10);
        let cfg = TrainConfig {
            ablation: Ablation::StaticPartition,
            static_attr: Some("domain".into()),
            ..quick_cfg()
        };
        let out = train(&tr, &va, &cfg).unwrap();
        assert_eq!(out.registry.len(), 1);
    }

    #[test]
    fn overlapping_train_val_is_rejected() {
        let (tr, _) = datasets(11);
        assert!(matches!(
            train(&tr, &tr, &quick_cfg()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn best_epoch_attains_max_val_accuracy_earliest() {
        let (tr, va) = datasets(12);
        let out = train(&tr, &va, &quick_cfg()).unwrap();
        let best = out
            .history
            .epochs
            .iter()
            .find(|e| e.epoch == out.history.best_epoch)
            .unwrap();
        for e in &out.history.epochs {
            assert!(e.val_accuracy <= best.val_accuracy);
            if e.val_accuracy == best.val_accuracy {
                assert!(best.epoch <= e.epoch);
            }
        }
    }
}
