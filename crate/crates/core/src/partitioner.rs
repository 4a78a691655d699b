//! Partition discovery: the gradient-ascent step over the partition head,
//! the score-ranked registry of recorded partitions, and an exhaustive
//! oracle for small instances.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    invariant_objective, per_instance_mean_objective, unfair_objective_hard,
    unfair_objective_soft, weighted_ce_objective_soft, SubsetLossBreakdown,
};
use crate::models::{hard_assignment, ModelBundle};
use crate::numerics::{sgd_step, softmax_backward, softmax_rows, SgdConfig, Tensor2};
use crate::rng::{self, tag};

/// Hard assignment of training instances to k subsets, with the
/// maximization score it carried when recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMatrix {
    pub epoch: usize,
    pub k: usize,
    pub score: f64,
    pub assignment: Vec<usize>,
}

impl PartitionMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Data(format!("partition k must be >= 2, got {}", self.k)));
        }
        if let Some(&bad) = self.assignment.iter().find(|&&s| s >= self.k) {
            return Err(Error::Data(format!(
                "partition assignment contains subset id {bad} >= k={}",
                self.k
            )));
        }
        if !self.score.is_finite() {
            return Err(Error::Data(format!("partition score {} not finite", self.score)));
        }
        Ok(())
    }

    /// Membership restricted to a batch of training indices.
    pub fn batch_membership(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.assignment[i]).collect()
    }
}

/// Default registry capacity: the number of highest-scoring partitions
/// kept during training.
pub const REGISTRY_CAPACITY: usize = 6;

/// Score-ranked set of recorded partitions, bounded by capacity,
/// duplicate assignments rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRegistry {
    capacity: usize,
    entries: Vec<PartitionMatrix>,
}

impl PartitionRegistry {
    pub fn new(capacity: usize) -> Self {
        PartitionRegistry {
            capacity: capacity.max(1),
            entries: Vec::new(),
        }
    }

    pub fn with_default_capacity() -> Self {
        Self::new(REGISTRY_CAPACITY)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[PartitionMatrix] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Insert by descending score (ties broken toward the earlier epoch),
    /// drop exact duplicate assignments, truncate to capacity. Returns
    /// whether the candidate was kept.
    pub fn record(&mut self, candidate: PartitionMatrix) -> Result<bool> {
        candidate.validate()?;
        if self
            .entries
            .iter()
            .any(|e| e.assignment == candidate.assignment)
        {
            return Ok(false);
        }
        let pos = self
            .entries
            .iter()
            .position(|e| {
                candidate.score > e.score
                    || (candidate.score == e.score && candidate.epoch < e.epoch)
            })
            .unwrap_or(self.entries.len());
        self.entries.insert(pos, candidate);
        let kept = self.entries.len() <= self.capacity || pos < self.capacity;
        self.entries.truncate(self.capacity);
        Ok(kept)
    }

    /// Memberships of a batch under every recorded partition.
    pub fn batch_memberships(&self, indices: &[usize]) -> Vec<Vec<usize>> {
        self.entries
            .iter()
            .map(|e| e.batch_membership(indices))
            .collect()
    }
}

/// Which per-subset loss drives the maximization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionObjective {
    /// Supervised contrastive loss per subset.
    SupCon,
    /// Weighted per-subset cross-entropy of the frozen classifier.
    WeightedCrossEntropy,
}

/// Configuration of one unfair-partition step.
#[derive(Debug, Clone)]
pub struct PartitionStepConfig {
    pub ascent_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
    pub epoch: usize,
    pub objective: PartitionObjective,
}

impl Default for PartitionStepConfig {
    fn default() -> Self {
        PartitionStepConfig {
            ascent_steps: 30,
            lr: 1.0,
            batch_size: 256,
            tau: 0.5,
            lambda: 0.1,
            seed: 17,
            epoch: 0,
            objective: PartitionObjective::SupCon,
        }
    }
}

/// Soft maximization objective as a function of the partition head, and
/// its gradient w.r.t. the head parameters (representation constant).
pub fn soft_head_objective_grad(
    bundle: &ModelBundle,
    z: &Tensor2,
    labels: &[u8],
    ce: Option<&[f64]>,
    cfg: &PartitionStepConfig,
) -> Result<(SubsetLossBreakdown, Vec<Tensor2>)> {
    let head_logits = bundle.partition_logits(z)?;
    let p = softmax_rows(&head_logits)?;
    let (breakdown, d_p) = match cfg.objective {
        PartitionObjective::SupCon => unfair_objective_soft(z, labels, &p, cfg.tau, cfg.lambda)?,
        PartitionObjective::WeightedCrossEntropy => {
            let ce = ce.ok_or_else(|| {
                Error::Contract("weighted-CE partition objective needs per-instance CE".into())
            })?;
            weighted_ce_objective_soft(ce, &p, cfg.lambda)?
        }
    };
    let d_logits = softmax_backward(&p, &d_p)?;
    let (grads, _) = bundle.partition_head_backward(z, &d_logits)?;
    Ok((breakdown, grads))
}

/// Hard maximization score of an assignment under the step's objective.
pub fn hard_partition_score(
    z: &Tensor2,
    labels: &[u8],
    classifier_logits: &Tensor2,
    assignment: &[usize],
    cfg: &PartitionStepConfig,
) -> Result<f64> {
    let k = bundle_k(z, assignment)?;
    let b = match cfg.objective {
        PartitionObjective::SupCon => {
            unfair_objective_hard(z, labels, assignment, k, cfg.tau, cfg.lambda)?
        }
        PartitionObjective::WeightedCrossEntropy => {
            invariant_objective(classifier_logits, labels, assignment, k, cfg.lambda)?
        }
    };
    Ok(b.objective)
}

fn bundle_k(z: &Tensor2, assignment: &[usize]) -> Result<usize> {
    if assignment.len() != z.rows() {
        return Err(Error::dimension(
            "hard_partition_score",
            format!("{} memberships", z.rows()),
            assignment.len(),
        ));
    }
    Ok(assignment.iter().copied().max().unwrap_or(0) + 1)
}

/// Instance count above which per-step readout candidates are ranked on
/// a fixed subsample instead of the full training set.
const READOUT_SUBSAMPLE: usize = 512;

/// One unfair-partition step: mini-batch gradient ascent on the soft
/// maximization objective w.r.t. the partition head only. The hard
/// assignment of the full training set is read out after every ascent
/// step (and once before the first), and the highest-scoring readout is
/// returned with its hard score over the full training set.
///
/// The best-readout tracking exists because the soft objective is
/// maximized near uniform assignment probabilities, where the final
/// readout alone is uninformative; the trajectory passes through far
/// stronger hard partitions than it ends on.
///
/// Requires phi and the classifier to be frozen and the head trainable;
/// neither frozen group is touched.
pub fn unfair_partition_step(
    bundle: &mut ModelBundle,
    x: &Tensor2,
    labels: &[u8],
    cfg: &PartitionStepConfig,
) -> Result<PartitionMatrix> {
    if !bundle.phi.frozen || !bundle.classifier.frozen {
        return Err(Error::Contract(
            "unfair_partition_step requires phi and classifier frozen".into(),
        ));
    }
    if bundle.partition_head.frozen {
        return Err(Error::Contract(
            "unfair_partition_step requires a trainable partition head".into(),
        ));
    }
    let m = x.rows();
    if m == 0 {
        return Err(Error::Data("unfair_partition_step: empty training set".into()));
    }
    let k = bundle.config.k;
    // phi is frozen, so the representation is constant across the step.
    let z = bundle.extract(x)?;
    let ce: Option<Vec<f64>> = match cfg.objective {
        PartitionObjective::SupCon => None,
        PartitionObjective::WeightedCrossEntropy => {
            let logits = bundle.classify(&z)?;
            let mut per = Vec::with_capacity(m);
            for r in 0..m {
                let row = logits.row(r);
                let mx = row[0].max(row[1]);
                let lse = mx + ((row[0] - mx).exp() + (row[1] - mx).exp()).ln();
                per.push(lse - row[labels[r] as usize]);
            }
            Some(per)
        }
    };

    // selection scores come from a fixed subsample when the set is large
    let sample: Option<Vec<usize>> = if m > READOUT_SUBSAMPLE {
        let mut order: Vec<usize> = (0..m).collect();
        let mut srng = rng::substream_indexed(cfg.seed, tag::PARTITION_READOUT, cfg.epoch as u64);
        order.shuffle(&mut srng);
        order.truncate(READOUT_SUBSAMPLE);
        order.sort_unstable();
        Some(order)
    } else {
        None
    };
    let hard_score = |assignment: &[usize],
                      z: &Tensor2,
                      labels: &[u8],
                      ce: Option<&[f64]>|
     -> Result<f64> {
        match cfg.objective {
            PartitionObjective::SupCon => Ok(unfair_objective_hard(
                z, labels, assignment, k, cfg.tau, cfg.lambda,
            )?
            .objective),
            PartitionObjective::WeightedCrossEntropy => {
                let ce = ce.expect("per-instance CE available");
                Ok(per_instance_mean_objective(ce, assignment, k, cfg.lambda)?.objective)
            }
        }
    };
    let selection_score = |assignment: &[usize]| -> Result<f64> {
        match &sample {
            None => hard_score(assignment, &z, labels, ce.as_deref()),
            Some(idx) => {
                let zs = gather_rows(&z, idx);
                let ys: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
                let asx: Vec<usize> = idx.iter().map(|&i| assignment[i]).collect();
                let ces: Option<Vec<f64>> =
                    ce.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect());
                hard_score(&asx, &zs, &ys, ces.as_deref())
            }
        }
    };

    let mut best_assignment = hard_assignment(&bundle.partition_logits(&z)?);
    let mut best_selection = selection_score(&best_assignment)?;

    if cfg.ascent_steps > 0 {
        let mut order: Vec<usize> = (0..m).collect();
        let mut batch_rng = rng::substream_indexed(cfg.seed, tag::PARTITION_BATCH, cfg.epoch as u64);
        order.shuffle(&mut batch_rng);
        let bs = cfg.batch_size.max(1).min(m);
        let chunks: Vec<&[usize]> = order.chunks(bs).collect();
        let opt = SgdConfig::new(cfg.lr);
        for step in 0..cfg.ascent_steps {
            let batch = chunks[step % chunks.len()];
            let zb = gather_rows(&z, batch);
            let yb: Vec<u8> = batch.iter().map(|&i| labels[i]).collect();
            let ceb: Option<Vec<f64>> = ce
                .as_ref()
                .map(|c| batch.iter().map(|&i| c[i]).collect());
            let (_, mut grads) =
                soft_head_objective_grad(bundle, &zb, &yb, ceb.as_deref(), cfg)?;
            // ascent: negate before the descent step
            for g in &mut grads {
                for v in g.data_mut() {
                    *v = -*v;
                }
            }
            sgd_step(&mut [&mut bundle.partition_head], &[grads], &opt)?;

            let candidate = hard_assignment(&bundle.partition_logits(&z)?);
            if candidate != best_assignment {
                let s = selection_score(&candidate)?;
                if s > best_selection {
                    best_selection = s;
                    best_assignment = candidate;
                }
            }
        }
    }

    let score = hard_score(&best_assignment, &z, labels, ce.as_deref())?;
    Ok(PartitionMatrix {
        epoch: cfg.epoch,
        k,
        score,
        assignment: best_assignment,
    })
}

pub(crate) fn gather_rows(x: &Tensor2, indices: &[usize]) -> Tensor2 {
    let mut out = Tensor2::zeros(indices.len(), x.cols());
    for (r, &i) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    out
}

/// Maximum instance count the exhaustive oracle accepts.
pub const ORACLE_MAX_INSTANCES: usize = 16;

/// Exhaustive maximizer of the hard objective for k = 2.
///
/// Assignments are canonicalized (instance 0 in subset 0), every
/// candidate is scored with `unfair_objective_hard`, and ties go to the
/// lexicographically smallest canonical assignment.
pub fn brute_force_oracle(
    z: &Tensor2,
    labels: &[u8],
    k: usize,
    tau: f64,
    lambda: f64,
) -> Result<(Vec<usize>, f64)> {
    if k != 2 {
        return Err(Error::Config(format!(
            "brute_force_oracle supports k = 2 only, got {k}"
        )));
    }
    let m = z.rows();
    if m == 0 {
        return Err(Error::Data("brute_force_oracle: empty input".into()));
    }
    if m > ORACLE_MAX_INSTANCES {
        return Err(Error::Size(format!(
            "brute_force_oracle limited to {ORACLE_MAX_INSTANCES} instances, got {m}"
        )));
    }
    let mut best_assignment: Option<Vec<usize>> = None;
    let mut best_score = f64::NEG_INFINITY;
    let combos: u64 = 1 << (m - 1);
    let mut assignment = vec![0usize; m];
    for mask in 0..combos {
        // instance 0 pinned to subset 0; higher-order bits map to earlier
        // instances so increasing mask enumerates lexicographic order
        for i in 1..m {
            assignment[i] = ((mask >> (m - 1 - i)) & 1) as usize;
        }
        let score = unfair_objective_hard(z, labels, &assignment, 2, tau, lambda)?.objective;
        if score > best_score {
            best_score = score;
            best_assignment = Some(assignment.clone());
        }
    }
    Ok((best_assignment.expect("at least one candidate"), best_score))
}
