//! Loss layer: subset-restricted supervised contrastive loss,
//! cross-entropy, the cross-subset variance penalty, and the composite
//! maximization/minimization objectives in hard and soft-relaxed form.
//!
//! Conventions shared by every composite objective here:
//! - a subset with no usable anchors (or no batch members) is inactive,
//!   contributes 0 and is excluded from the variance;
//! - the variance is the population variance over active subsets, 0 when
//!   fewer than two are active;
//! - objective = sum of active per-subset losses + lambda * variance.

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, population_variance, softmax_rows, Tensor2};

/// Threshold below which an anchor's total positive weight counts as zero.
pub const WEIGHT_EPS: f64 = 1e-9;

/// Floor applied inside ln(w) terms so soft weights can approach 0.
const LN_FLOOR: f64 = 1e-12;

/// Per-subset losses plus their variance-augmented combination.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetLossBreakdown {
    pub per_subset: Vec<f64>,
    pub active_mask: Vec<bool>,
    pub total: f64,
    pub variance: f64,
    pub objective: f64,
}

impl SubsetLossBreakdown {
    fn from_losses(per_subset: Vec<f64>, active_mask: Vec<bool>, lambda: f64) -> Self {
        let active: Vec<f64> = per_subset
            .iter()
            .zip(&active_mask)
            .filter(|(_, &a)| a)
            .map(|(l, _)| *l)
            .collect();
        let total: f64 = active.iter().sum();
        let variance = if active.len() >= 2 {
            population_variance(&active)
        } else {
            0.0
        };
        SubsetLossBreakdown {
            per_subset,
            active_mask,
            total,
            variance,
            objective: total + lambda * variance,
        }
    }

    /// d objective / d per_subset[e] for each active subset.
    fn loss_factors(&self, lambda: f64) -> Vec<f64> {
        let n_active = self.active_mask.iter().filter(|&&a| a).count();
        if n_active < 2 {
            return self
                .active_mask
                .iter()
                .map(|&a| if a { 1.0 } else { 0.0 })
                .collect();
        }
        let mean = self.total / n_active as f64;
        self.per_subset
            .iter()
            .zip(&self.active_mask)
            .map(|(&l, &a)| {
                if a {
                    1.0 + lambda * 2.0 / n_active as f64 * (l - mean)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

/// Supervised contrastive loss of one subset, general weights in [0, 1].
///
/// Anchors whose positives carry total weight below `WEIGHT_EPS` are
/// skipped; returns (loss, active). Inactive subsets report loss 0.
pub fn supcon_subset(z: &Tensor2, labels: &[u8], weights: &[f64], tau: f64) -> Result<(f64, bool)> {
    let out = supcon_soft_core(z, labels, weights, tau, false)?;
    Ok((out.loss, out.active))
}

struct SupconSoft {
    loss: f64,
    active: bool,
    d_weights: Option<Vec<f64>>,
}

fn validate_batch(z: &Tensor2, labels: &[u8], weights: &[f64]) -> Result<()> {
    if labels.len() != z.rows() || weights.len() != z.rows() {
        return Err(Error::dimension(
            "supcon_subset",
            format!("{} rows", z.rows()),
            format!("{} labels / {} weights", labels.len(), weights.len()),
        ));
    }
    for &w in weights {
        if !(-1e-12..=1.0 + 1e-12).contains(&w) {
            return Err(Error::Data(format!(
                "supcon_subset: member weight {w} outside [0,1]"
            )));
        }
    }
    Ok(())
}

/// Shared core: weighted SupCon with optional gradient w.r.t. weights.
fn supcon_soft_core(
    z: &Tensor2,
    labels: &[u8],
    weights: &[f64],
    tau: f64,
    want_dw: bool,
) -> Result<SupconSoft> {
    check_tau(tau)?;
    validate_batch(z, labels, weights)?;
    let m = z.rows();
    let n = l2_normalize_rows(z, 1e-12)?;
    // similarity matrix, diagonal unused
    let mut sim = vec![0.0; m * m];
    for i in 0..m {
        for a in (i + 1)..m {
            let d: f64 = n.row(i).iter().zip(n.row(a)).map(|(x, y)| x * y).sum();
            sim[i * m + a] = d / tau;
            sim[a * m + i] = d / tau;
        }
    }

    // Per anchor: total positive weight, log-denominator, loss.
    let mut pos_weight = vec![0.0; m];
    let mut ln_denom = vec![f64::NEG_INFINITY; m];
    let mut anchor_loss = vec![0.0; m];
    let mut considered = vec![false; m];
    for i in 0..m {
        let mut wp = 0.0;
        for p in 0..m {
            if p != i && labels[p] == labels[i] && weights[p] > 0.0 {
                wp += weights[p];
            }
        }
        pos_weight[i] = wp;
        if wp < WEIGHT_EPS {
            continue;
        }
        considered[i] = true;
        // logsumexp over a != i with positive weight of sim + ln w
        let mut mx = f64::NEG_INFINITY;
        for a in 0..m {
            if a != i && weights[a] > 0.0 {
                let v = sim[i * m + a] + weights[a].max(LN_FLOOR).ln();
                if v > mx {
                    mx = v;
                }
            }
        }
        let mut sum = 0.0;
        for a in 0..m {
            if a != i && weights[a] > 0.0 {
                sum += (sim[i * m + a] + weights[a].max(LN_FLOOR).ln() - mx).exp();
            }
        }
        let ld = mx + sum.ln();
        ln_denom[i] = ld;
        let mut t = 0.0;
        for p in 0..m {
            if p != i && labels[p] == labels[i] && weights[p] > 0.0 {
                t += weights[p] * (sim[i * m + p] + weights[p].max(LN_FLOOR).ln() - ld);
            }
        }
        anchor_loss[i] = -t / wp;
    }

    let total_w: f64 = (0..m).filter(|&i| considered[i]).map(|i| weights[i]).sum();
    if total_w < WEIGHT_EPS {
        return Ok(SupconSoft {
            loss: 0.0,
            active: false,
            d_weights: if want_dw { Some(vec![0.0; m]) } else { None },
        });
    }
    let loss = (0..m)
        .filter(|&i| considered[i])
        .map(|i| weights[i] * anchor_loss[i])
        .sum::<f64>()
        / total_w;

    let d_weights = if want_dw {
        let mut dw = vec![0.0; m];
        for j in 0..m {
            let mut acc = if considered[j] {
                anchor_loss[j] - loss
            } else {
                0.0
            };
            for i in 0..m {
                if i == j || !considered[i] || weights[i] == 0.0 {
                    continue;
                }
                let is_pos = labels[j] == labels[i];
                let exp_ratio = (sim[i * m + j] - ln_denom[i]).exp();
                let mut dt = -pos_weight[i] * exp_ratio;
                if is_pos {
                    dt += sim[i * m + j] + weights[j].max(LN_FLOOR).ln() + 1.0 - ln_denom[i];
                }
                let mut dl = -dt / pos_weight[i];
                if is_pos {
                    dl -= anchor_loss[i] / pos_weight[i];
                }
                acc += weights[i] * dl;
            }
            dw[j] = acc / total_w;
        }
        Some(dw)
    } else {
        None
    };

    Ok(SupconSoft {
        loss,
        active: true,
        d_weights,
    })
}

/// Hard-membership SupCon of one subset with its gradient w.r.t. Z.
/// Rows outside the subset get zero gradient.
pub fn supcon_subset_hard_grad_z(
    z: &Tensor2,
    labels: &[u8],
    members: &[usize],
    tau: f64,
) -> Result<(f64, bool, Tensor2)> {
    check_tau(tau)?;
    let m = z.rows();
    let mut d_z = Tensor2::zeros(m, z.cols());
    if members.len() < 2 {
        return Ok((0.0, false, d_z));
    }
    let n = l2_normalize_rows(z, 1e-12)?;
    let k = members.len();
    // similarities among members
    let mut sim = vec![0.0; k * k];
    for a in 0..k {
        for b in (a + 1)..k {
            let d: f64 = n
                .row(members[a])
                .iter()
                .zip(n.row(members[b]))
                .map(|(x, y)| x * y)
                .sum();
            sim[a * k + b] = d / tau;
            sim[b * k + a] = d / tau;
        }
    }
    let mut pos_count = vec![0.0; k];
    let mut ln_denom = vec![0.0; k];
    let mut anchor_loss = vec![0.0; k];
    let mut considered = vec![false; k];
    let mut n_considered = 0usize;
    for a in 0..k {
        let cnt = (0..k)
            .filter(|&p| p != a && labels[members[p]] == labels[members[a]])
            .count();
        pos_count[a] = cnt as f64;
        if cnt == 0 {
            continue;
        }
        considered[a] = true;
        n_considered += 1;
        let mut mx = f64::NEG_INFINITY;
        for b in 0..k {
            if b != a && sim[a * k + b] > mx {
                mx = sim[a * k + b];
            }
        }
        let mut sum = 0.0;
        for b in 0..k {
            if b != a {
                sum += (sim[a * k + b] - mx).exp();
            }
        }
        let ld = mx + sum.ln();
        ln_denom[a] = ld;
        let mut t = 0.0;
        for p in 0..k {
            if p != a && labels[members[p]] == labels[members[a]] {
                t += sim[a * k + p] - ld;
            }
        }
        anchor_loss[a] = -t / pos_count[a];
    }
    if n_considered == 0 {
        return Ok((0.0, false, d_z));
    }
    let total = n_considered as f64;
    let loss = (0..k)
        .filter(|&a| considered[a])
        .map(|a| anchor_loss[a])
        .sum::<f64>()
        / total;

    // dL/d sim, then into normalized rows, then through the normalization
    let mut d_n = Tensor2::zeros(m, z.cols());
    for a in 0..k {
        if !considered[a] {
            continue;
        }
        let scale = 1.0 / total;
        for b in 0..k {
            if b == a {
                continue;
            }
            let r = (sim[a * k + b] - ln_denom[a]).exp();
            let pos = labels[members[b]] == labels[members[a]];
            let g = scale * (r - if pos { 1.0 / pos_count[a] } else { 0.0 });
            // sim[a][b] = n_a . n_b / tau
            let (ra, rb) = (members[a], members[b]);
            for c in 0..z.cols() {
                d_n.data_mut()[ra * z.cols() + c] += g * n.get(rb, c) / tau;
                d_n.data_mut()[rb * z.cols() + c] += g * n.get(ra, c) / tau;
            }
        }
    }
    for &r in members {
        let norm = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm >= 1e-12 {
            let dot: f64 = n.row(r).iter().zip(d_n.row(r)).map(|(a, b)| a * b).sum();
            for c in 0..z.cols() {
                let v = (d_n.get(r, c) - n.get(r, c) * dot) / norm;
                d_z.set(r, c, v);
            }
        } else {
            for c in 0..z.cols() {
                d_z.set(r, c, d_n.get(r, c));
            }
        }
    }
    Ok((loss, true, d_z))
}

fn check_assignment(assignment: &[usize], rows: usize, k: usize, context: &str) -> Result<()> {
    if assignment.len() != rows {
        return Err(Error::dimension(
            context,
            format!("{rows} memberships"),
            assignment.len(),
        ));
    }
    if let Some(&bad) = assignment.iter().find(|&&s| s >= k) {
        return Err(Error::Data(format!(
            "{context}: subset id {bad} out of range for k={k}"
        )));
    }
    Ok(())
}

/// Hard Eq.-style maximization objective: per-subset SupCon plus lambda
/// times the cross-subset variance.
pub fn unfair_objective_hard(
    z: &Tensor2,
    labels: &[u8],
    assignment: &[usize],
    k: usize,
    tau: f64,
    lambda: f64,
) -> Result<SubsetLossBreakdown> {
    check_tau(tau)?;
    check_assignment(assignment, z.rows(), k, "unfair_objective_hard")?;
    let mut per_subset = vec![0.0; k];
    let mut active = vec![false; k];
    for e in 0..k {
        let members: Vec<usize> = (0..z.rows()).filter(|&i| assignment[i] == e).collect();
        let (loss, act, _) = supcon_subset_hard_grad_z(z, labels, &members, tau)?;
        per_subset[e] = if act { loss } else { 0.0 };
        active[e] = act;
    }
    Ok(SubsetLossBreakdown::from_losses(per_subset, active, lambda))
}

fn check_stochastic_rows(p: &Tensor2, context: &str) -> Result<()> {
    for r in 0..p.rows() {
        let sum: f64 = p.row(r).iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.row(r).iter().any(|&v| v < -1e-12) {
            return Err(Error::Data(format!(
                "{context}: row {r} is not a probability vector (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Soft relaxation of the maximization objective: subset membership
/// weights come from the columns of a row-stochastic matrix P. Returns
/// the breakdown and the gradient w.r.t. P (Z is treated as constant).
pub fn unfair_objective_soft(
    z: &Tensor2,
    labels: &[u8],
    p: &Tensor2,
    tau: f64,
    lambda: f64,
) -> Result<(SubsetLossBreakdown, Tensor2)> {
    check_tau(tau)?;
    if p.rows() != z.rows() {
        return Err(Error::dimension(
            "unfair_objective_soft",
            format!("{} rows", z.rows()),
            p.rows(),
        ));
    }
    check_stochastic_rows(p, "unfair_objective_soft")?;
    let k = p.cols();
    let m = z.rows();
    let mut per_subset = vec![0.0; k];
    let mut active = vec![false; k];
    let mut per_subset_dw: Vec<Option<Vec<f64>>> = vec![None; k];
    for e in 0..k {
        let w: Vec<f64> = (0..m).map(|i| p.get(i, e).max(0.0)).collect();
        let out = supcon_soft_core(z, labels, &w, tau, true)?;
        per_subset[e] = if out.active { out.loss } else { 0.0 };
        active[e] = out.active;
        per_subset_dw[e] = out.d_weights;
    }
    let breakdown = SubsetLossBreakdown::from_losses(per_subset, active, lambda);
    let factors = breakdown.loss_factors(lambda);
    let mut d_p = Tensor2::zeros(m, k);
    for e in 0..k {
        if !breakdown.active_mask[e] {
            continue;
        }
        if let Some(dw) = &per_subset_dw[e] {
            for i in 0..m {
                d_p.set(i, e, factors[e] * dw[i]);
            }
        }
    }
    Ok((breakdown, d_p))
}

/// Mean cross-entropy of binary logits against labels, numerically
/// stabilized.
pub fn cross_entropy(logits: &Tensor2, labels: &[u8]) -> Result<f64> {
    Ok(cross_entropy_grad(logits, labels)?.0)
}

/// Mean cross-entropy plus its gradient w.r.t. the logits.
pub fn cross_entropy_grad(logits: &Tensor2, labels: &[u8]) -> Result<(f64, Tensor2)> {
    let (ce, mut grad) = per_instance_ce(logits, labels)?;
    let m = logits.rows() as f64;
    let loss = ce.iter().sum::<f64>() / m;
    for v in grad.data_mut() {
        *v /= m;
    }
    Ok((loss, grad))
}

/// Per-instance cross-entropy values and the un-averaged gradient
/// (softmax minus one-hot per row).
fn per_instance_ce(logits: &Tensor2, labels: &[u8]) -> Result<(Vec<f64>, Tensor2)> {
    if logits.rows() == 0 {
        return Err(Error::Data("cross_entropy: empty batch".into()));
    }
    if logits.cols() != 2 {
        return Err(Error::dimension(
            "cross_entropy",
            "batch x 2 logits",
            format!("{}x{}", logits.rows(), logits.cols()),
        ));
    }
    if labels.len() != logits.rows() {
        return Err(Error::dimension(
            "cross_entropy",
            format!("{} labels", logits.rows()),
            labels.len(),
        ));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Data("cross_entropy: label outside {0,1}".into()));
    }
    let probs = softmax_rows(logits)?;
    let mut ce = Vec::with_capacity(logits.rows());
    let mut grad = probs.clone();
    for r in 0..logits.rows() {
        let y = labels[r] as usize;
        let row = logits.row(r);
        let mx = row[0].max(row[1]);
        let lse = mx + ((row[0] - mx).exp() + (row[1] - mx).exp()).ln();
        ce.push(lse - row[y]);
        let g = grad.row_mut(r);
        g[y] -= 1.0;
    }
    Ok((ce, grad))
}

/// Minimization objective over one partition: per-subset mean
/// cross-entropy over the batch members of each subset, plus lambda times
/// the cross-subset variance.
pub fn invariant_objective(
    logits: &Tensor2,
    labels: &[u8],
    membership: &[usize],
    k: usize,
    lambda: f64,
) -> Result<SubsetLossBreakdown> {
    Ok(invariant_objective_grad(logits, labels, membership, k, lambda)?.0)
}

/// Per-subset means of precomputed per-instance loss values plus the
/// cross-subset variance; the hard counterpart of
/// `weighted_ce_objective_soft`.
pub fn per_instance_mean_objective(
    values: &[f64],
    membership: &[usize],
    k: usize,
    lambda: f64,
) -> Result<SubsetLossBreakdown> {
    if membership.len() != values.len() {
        return Err(Error::dimension(
            "per_instance_mean_objective",
            format!("{} memberships", values.len()),
            membership.len(),
        ));
    }
    if let Some(&bad) = membership.iter().find(|&&s| s >= k) {
        return Err(Error::Data(format!(
            "per_instance_mean_objective: subset id {bad} out of range for k={k}"
        )));
    }
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &e) in membership.iter().enumerate() {
        sums[e] += values[i];
        counts[e] += 1;
    }
    let per_subset: Vec<f64> = (0..k)
        .map(|e| if counts[e] > 0 { sums[e] / counts[e] as f64 } else { 0.0 })
        .collect();
    let active: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    Ok(SubsetLossBreakdown::from_losses(per_subset, active, lambda))
}

/// Same as `invariant_objective`, also returning d objective / d logits.
pub fn invariant_objective_grad(
    logits: &Tensor2,
    labels: &[u8],
    membership: &[usize],
    k: usize,
    lambda: f64,
) -> Result<(SubsetLossBreakdown, Tensor2)> {
    check_assignment(membership, logits.rows(), k, "invariant_objective")?;
    let (ce, raw_grad) = per_instance_ce(logits, labels)?;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &e) in membership.iter().enumerate() {
        sums[e] += ce[i];
        counts[e] += 1;
    }
    let per_subset: Vec<f64> = (0..k)
        .map(|e| if counts[e] > 0 { sums[e] / counts[e] as f64 } else { 0.0 })
        .collect();
    let active: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let breakdown = SubsetLossBreakdown::from_losses(per_subset, active, lambda);
    let factors = breakdown.loss_factors(lambda);
    let mut grad = Tensor2::zeros(logits.rows(), 2);
    for (i, &e) in membership.iter().enumerate() {
        let f = factors[e] / counts[e] as f64;
        for c in 0..2 {
            grad.set(i, c, f * raw_grad.get(i, c));
        }
    }
    Ok((breakdown, grad))
}

/// Minimization objective aggregated over a set of partitions: the mean
/// of `invariant_objective` over every partition's batch membership.
pub fn multi_partition_objective(
    logits: &Tensor2,
    labels: &[u8],
    memberships: &[Vec<usize>],
    k: usize,
    lambda: f64,
) -> Result<f64> {
    Ok(multi_partition_objective_grad(logits, labels, memberships, k, lambda)?.0)
}

/// Mean objective over partitions plus its gradient w.r.t. the logits.
pub fn multi_partition_objective_grad(
    logits: &Tensor2,
    labels: &[u8],
    memberships: &[Vec<usize>],
    k: usize,
    lambda: f64,
) -> Result<(f64, Tensor2)> {
    if memberships.is_empty() {
        return Err(Error::Config(
            "multi_partition_objective: empty partition set".into(),
        ));
    }
    let mut total = 0.0;
    let mut grad = Tensor2::zeros(logits.rows(), 2);
    for membership in memberships {
        let (b, g) = invariant_objective_grad(logits, labels, membership, k, lambda)?;
        total += b.objective;
        for (acc, &v) in grad.data_mut().iter_mut().zip(g.data()) {
            *acc += v;
        }
    }
    let n = memberships.len() as f64;
    for v in grad.data_mut() {
        *v /= n;
    }
    Ok((total / n, grad))
}

/// Soft-weighted per-subset cross-entropy objective, the maximization
/// surrogate used when the contrastive term is ablated. `ce` holds the
/// per-instance cross-entropy of the frozen classifier. Returns the
/// breakdown and gradient w.r.t. P.
pub fn weighted_ce_objective_soft(
    ce: &[f64],
    p: &Tensor2,
    lambda: f64,
) -> Result<(SubsetLossBreakdown, Tensor2)> {
    if p.rows() != ce.len() {
        return Err(Error::dimension(
            "weighted_ce_objective_soft",
            format!("{} rows", ce.len()),
            p.rows(),
        ));
    }
    check_stochastic_rows(p, "weighted_ce_objective_soft")?;
    let k = p.cols();
    let m = ce.len();
    let mut per_subset = vec![0.0; k];
    let mut active = vec![false; k];
    let mut wsum = vec![0.0; k];
    for e in 0..k {
        let w: f64 = (0..m).map(|i| p.get(i, e)).sum();
        wsum[e] = w;
        if w < WEIGHT_EPS {
            continue;
        }
        active[e] = true;
        per_subset[e] = (0..m).map(|i| p.get(i, e) * ce[i]).sum::<f64>() / w;
    }
    let breakdown = SubsetLossBreakdown::from_losses(per_subset, active, lambda);
    let factors = breakdown.loss_factors(lambda);
    let mut d_p = Tensor2::zeros(m, k);
    for e in 0..k {
        if !breakdown.active_mask[e] {
            continue;
        }
        for i in 0..m {
            d_p.set(i, e, factors[e] * (ce[i] - breakdown.per_subset[e]) / wsum[e]);
        }
    }
    Ok((breakdown, d_p))
}
