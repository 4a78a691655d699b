//! Detection metrics, per-attribute demographic-parity gaps, intervention
//! analysis and report emission.
//!
//! Report files are canonical JSON: keys sorted, floats fixed at six
//! decimal places, so byte-equality between runs is meaningful.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::models::{predict_labels, ModelBundle};

/// Minimum group size included in a demographic-parity gap by default.
pub const DEFAULT_MIN_SUPPORT: usize = 10;

fn check_equal_len(a: usize, b: usize, context: &str) -> Result<()> {
    if a != b {
        return Err(Error::Data(format!(
            "{context}: length mismatch ({a} vs {b})"
        )));
    }
    Ok(())
}

/// Accuracy, binary F1 (positive class = label 1) and macro F1.
/// Empty precision/recall denominators count as 0.
pub fn accuracy_f1(preds: &[u8], labels: &[u8]) -> Result<(f64, f64, f64)> {
    if preds.is_empty() {
        return Err(Error::Data("accuracy_f1: empty input".into()));
    }
    check_equal_len(preds.len(), labels.len(), "accuracy_f1")?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = correct as f64 / preds.len() as f64;
    let f1_for = |positive: u8| -> f64 {
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == positive && l == positive)
            .count() as f64;
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == positive && l != positive)
            .count() as f64;
        let fn_ = preds
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p != positive && l == positive)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    };
    let f1_binary = f1_for(1);
    let f1_macro = 0.5 * (f1_binary + f1_for(0));
    Ok((accuracy, f1_binary, f1_macro))
}

/// Positive-prediction statistics of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRate {
    pub count: usize,
    pub rate: f64,
}

/// Result of one attribute's demographic-parity computation.
#[derive(Debug, Clone, PartialEq)]
pub struct DpGapResult {
    /// max rate - min rate over included groups; 0 when fewer than two
    /// groups meet the support threshold (see `degenerate`).
    pub gap: f64,
    pub group_rates: BTreeMap<String, GroupRate>,
    /// Groups dropped for insufficient support, with their counts.
    pub excluded: Vec<(String, usize)>,
    pub degenerate: bool,
}

/// Demographic-parity gap of one attribute: the spread of positive
/// prediction rates across groups with at least `min_support` members.
/// Instances without a group value are skipped.
pub fn demographic_parity_gap(
    preds: &[u8],
    groups: &[Option<&str>],
    min_support: usize,
) -> Result<DpGapResult> {
    check_equal_len(preds.len(), groups.len(), "demographic_parity_gap")?;
    if min_support < 1 {
        return Err(Error::Config("min_support must be >= 1".into()));
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (&p, g) in preds.iter().zip(groups) {
        if let Some(g) = g {
            let entry = counts.entry(g).or_insert((0, 0));
            entry.0 += 1;
            if p == 1 {
                entry.1 += 1;
            }
        }
    }
    let mut group_rates = BTreeMap::new();
    let mut excluded = Vec::new();
    for (g, (count, positives)) in &counts {
        if *count >= min_support {
            group_rates.insert(
                g.to_string(),
                GroupRate {
                    count: *count,
                    rate: *positives as f64 / *count as f64,
                },
            );
        } else {
            excluded.push((g.to_string(), *count));
        }
    }
    let degenerate = group_rates.len() < 2;
    let gap = if degenerate {
        0.0
    } else {
        let max = group_rates.values().map(|r| r.rate).fold(f64::MIN, f64::max);
        let min = group_rates.values().map(|r| r.rate).fold(f64::MAX, f64::min);
        max - min
    };
    Ok(DpGapResult {
        gap,
        group_rates,
        excluded,
        degenerate,
    })
}

/// One group excluded from a gap for insufficient support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedGroup {
    pub attribute: String,
    pub group: String,
    pub count: usize,
}

/// Full evaluation report over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1_binary: f64,
    pub f1_macro: f64,
    pub dp_gaps: BTreeMap<String, f64>,
    pub group_rates: BTreeMap<String, BTreeMap<String, GroupRate>>,
    pub excluded_groups: Vec<ExcludedGroup>,
}

/// Run the model over a dataset and assemble detection plus fairness
/// metrics for every attribute in the schema.
pub fn evaluate(bundle: &ModelBundle, ds: &Dataset, min_support: usize) -> Result<MetricsReport> {
    if ds.feature_dim() != bundle.config.feature_dim {
        return Err(Error::dimension(
            "evaluate",
            bundle.config.feature_dim,
            ds.feature_dim(),
        ));
    }
    let logits = bundle.classify(&bundle.extract(&ds.features_tensor())?)?;
    let preds = predict_labels(&logits);
    let labels = ds.labels();
    let (accuracy, f1_binary, f1_macro) = accuracy_f1(&preds, &labels)?;
    let mut dp_gaps = BTreeMap::new();
    let mut group_rates = BTreeMap::new();
    let mut excluded_groups = Vec::new();
    for attr in ds.attr_schema().keys() {
        let groups: Vec<Option<&str>> = ds
            .instances()
            .iter()
            .map(|i| i.attrs.get(attr).map(|s| s.as_str()))
            .collect();
        let r = demographic_parity_gap(&preds, &groups, min_support)?;
        dp_gaps.insert(attr.clone(), r.gap);
        group_rates.insert(attr.clone(), r.group_rates);
        for (group, count) in r.excluded {
            excluded_groups.push(ExcludedGroup {
                attribute: attr.clone(),
                group,
                count,
            });
        }
    }
    Ok(MetricsReport {
        accuracy,
        f1_binary,
        f1_macro,
        dp_gaps,
        group_rates,
        excluded_groups,
    })
}

/// Correction/corruption proportions; absent when the denominator is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionRates {
    pub w_to_c: Option<f64>,
    pub c_to_w: Option<f64>,
}

/// How one prediction vector intervenes on another: the share of the
/// base model's errors that were corrected, and of its correct
/// predictions that were broken.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionReport {
    pub w_to_c: Option<f64>,
    pub c_to_w: Option<f64>,
    pub per_attribute: BTreeMap<String, BTreeMap<String, InterventionRates>>,
}

fn rates_for(base: &[u8], ours: &[u8], labels: &[u8], idx: &[usize]) -> InterventionRates {
    let mut wrong = 0usize;
    let mut corrected = 0usize;
    let mut right = 0usize;
    let mut broken = 0usize;
    for &i in idx {
        if base[i] == labels[i] {
            right += 1;
            if ours[i] != labels[i] {
                broken += 1;
            }
        } else {
            wrong += 1;
            if ours[i] == labels[i] {
                corrected += 1;
            }
        }
    }
    InterventionRates {
        w_to_c: (wrong > 0).then(|| corrected as f64 / wrong as f64),
        c_to_w: (right > 0).then(|| broken as f64 / right as f64),
    }
}

/// Intervention analysis of `ours` against `base`, overall and within
/// every attribute group observed in `attrs`.
pub fn intervention(
    base: &[u8],
    ours: &[u8],
    labels: &[u8],
    attrs: &[BTreeMap<String, String>],
) -> Result<InterventionReport> {
    check_equal_len(base.len(), ours.len(), "intervention")?;
    check_equal_len(base.len(), labels.len(), "intervention")?;
    check_equal_len(base.len(), attrs.len(), "intervention")?;
    if base.is_empty() {
        return Err(Error::Data("intervention: empty input".into()));
    }
    let all: Vec<usize> = (0..base.len()).collect();
    let overall = rates_for(base, ours, labels, &all);
    let mut per_attribute: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (i, a) in attrs.iter().enumerate() {
        for (attr, group) in a {
            per_attribute
                .entry(attr.clone())
                .or_default()
                .entry(group.clone())
                .or_default()
                .push(i);
        }
    }
    let per_attribute = per_attribute
        .into_iter()
        .map(|(attr, groups)| {
            let rates = groups
                .into_iter()
                .map(|(g, idx)| (g, rates_for(base, ours, labels, &idx)))
                .collect();
            (attr, rates)
        })
        .collect();
    Ok(InterventionReport {
        w_to_c: overall.w_to_c,
        c_to_w: overall.c_to_w,
        per_attribute,
    })
}

#[derive(Serialize)]
struct FeatureRecord<'a> {
    id: &'a str,
    z: Vec<f64>,
    label: u8,
    attrs: &'a BTreeMap<String, String>,
}

/// Dump learned representations as JSON Lines for external visualization.
pub fn dump_features(bundle: &ModelBundle, ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if ds.feature_dim() != bundle.config.feature_dim {
        return Err(Error::dimension(
            "dump_features",
            bundle.config.feature_dim,
            ds.feature_dim(),
        ));
    }
    let z = bundle.extract(&ds.features_tensor())?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (r, inst) in ds.instances().iter().enumerate() {
        let record = FeatureRecord {
            id: &inst.id,
            z: z.row(r).to_vec(),
            label: inst.label,
            attrs: &inst.attrs,
        };
        serde_json::to_writer(&mut out, &record)
            .map_err(|e| Error::Data(format!("serialize features: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

// --- canonical JSON emission -------------------------------------------

fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => fmt_f64(v),
        None => "null".to_string(),
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

impl MetricsReport {
    /// Canonical JSON: keys sorted, floats at six decimal places.
    pub fn to_canonical_json(&self) -> String {
        let mut s = String::from("{");
        s.push_str(&format!("\"accuracy\":{},", fmt_f64(self.accuracy)));
        s.push_str("\"dp_gaps\":{");
        s.push_str(
            &self
                .dp_gaps
                .iter()
                .map(|(k, v)| format!("{}:{}", json_str(k), fmt_f64(*v)))
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push_str("},");
        s.push_str("\"excluded_groups\":[");
        s.push_str(
            &self
                .excluded_groups
                .iter()
                .map(|e| {
                    format!(
                        "{{\"attribute\":{},\"count\":{},\"group\":{}}}",
                        json_str(&e.attribute),
                        e.count,
                        json_str(&e.group)
                    )
                })
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push_str("],");
        s.push_str(&format!("\"f1_binary\":{},", fmt_f64(self.f1_binary)));
        s.push_str(&format!("\"f1_macro\":{},", fmt_f64(self.f1_macro)));
        s.push_str("\"group_rates\":{");
        s.push_str(
            &self
                .group_rates
                .iter()
                .map(|(attr, groups)| {
                    let inner = groups
                        .iter()
                        .map(|(g, r)| {
                            format!(
                                "{}:{{\"count\":{},\"rate\":{}}}",
                                json_str(g),
                                r.count,
                                fmt_f64(r.rate)
                            )
                        })
                        .collect::<Vec<_>>()
                        .join(",");
                    format!("{}:{{{}}}", json_str(attr), inner)
                })
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push_str("}}");
        s
    }
}

impl InterventionReport {
    /// Canonical JSON: keys sorted, floats at six decimal places.
    pub fn to_canonical_json(&self) -> String {
        let mut s = String::from("{");
        s.push_str(&format!("\"c_to_w\":{},", fmt_opt(self.c_to_w)));
        s.push_str("\"per_attribute\":{");
        s.push_str(
            &self
                .per_attribute
                .iter()
                .map(|(attr, groups)| {
                    let inner = groups
                        .iter()
                        .map(|(g, r)| {
                            format!(
                                "{}:{{\"c_to_w\":{},\"w_to_c\":{}}}",
                                json_str(g),
                                fmt_opt(r.c_to_w),
                                fmt_opt(r.w_to_c)
                            )
                        })
                        .collect::<Vec<_>>()
                        .join(",");
                    format!("{}:{{{}}}", json_str(attr), inner)
                })
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push_str("},");
        s.push_str(&format!("\"w_to_c\":{}", fmt_opt(self.w_to_c)));
        s.push('}');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_confounded, AttributeSpec, Dataset, SyntheticSpec};
    use crate::models::{init_bundle, ModelConfig};
    use crate::numerics::Tensor2;

    #[test]
    fn perfect_predictions() {
        let (acc, f1b, f1m) = accuracy_f1(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!((acc, f1b, f1m), (1.0, 1.0, 1.0));
    }

    #[test]
    fn all_positive_predictions_on_balanced_labels() {
        let preds = vec![1u8; 8];
        let labels = vec![1, 1, 1, 1, 0, 0, 0, 0];
        let (acc, f1b, _) = accuracy_f1(&preds, &labels).unwrap();
        assert!((acc - 0.5).abs() < 1e-15);
        assert!((f1b - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_f1_is_zero() {
        let (_, f1b, _) = accuracy_f1(&[0, 0, 0], &[1, 1, 1]).unwrap();
        assert_eq!(f1b, 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(accuracy_f1(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn dp_gap_constant_predictor_is_zero() {
        let preds = vec![1u8; 40];
        let groups: Vec<Option<&str>> = (0..40)
            .map(|i| Some(if i % 2 == 0 { "a" } else { "b" }))
            .collect();
        let r = demographic_parity_gap(&preds, &groups, 10).unwrap();
        assert_eq!(r.gap, 0.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn dp_gap_hand_case_quarter() {
        // group a rate 0.5 (out of 12), group b rate 0.75 (out of 12)
        let mut preds = Vec::new();
        let mut groups = Vec::new();
        for i in 0..12 {
            preds.push(if i < 6 { 1 } else { 0 });
            groups.push(Some("a"));
        }
        for i in 0..12 {
            preds.push(if i < 9 { 1 } else { 0 });
            groups.push(Some("b"));
        }
        let r = demographic_parity_gap(&preds, &groups, 10).unwrap();
        assert!((r.gap - 0.25).abs() < 1e-15);
        assert!((r.group_rates["a"].rate - 0.5).abs() < 1e-15);
        assert!((r.group_rates["b"].rate - 0.75).abs() < 1e-15);
    }

    #[test]
    fn dp_gap_excludes_small_groups() {
        let preds = vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let groups: Vec<Option<&str>> = (0..12)
            .map(|i| Some(if i == 11 { "tiny" } else { "big" }))
            .collect();
        let r = demographic_parity_gap(&preds, &groups, 10).unwrap();
        assert_eq!(r.excluded, vec![("tiny".to_string(), 1)]);
        assert!(r.degenerate); // only one group left
        assert_eq!(r.gap, 0.0);
    }

    #[test]
    fn dp_gap_invariant_to_group_renaming_and_order() {
        let preds = [1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 0, 0, 0, 0];
        let g1: Vec<Option<&str>> = (0..20).map(|i| Some(if i < 10 { "x" } else { "y" })).collect();
        let g2: Vec<Option<&str>> = (0..20).map(|i| Some(if i < 10 { "q" } else { "p" })).collect();
        let a = demographic_parity_gap(&preds, &g1, 5).unwrap();
        let b = demographic_parity_gap(&preds, &g2, 5).unwrap();
        assert_eq!(a.gap, b.gap);
        // permute instances
        let mut perm: Vec<usize> = (0..20).collect();
        perm.reverse();
        let preds_p: Vec<u8> = perm.iter().map(|&i| preds[i]).collect();
        let groups_p: Vec<Option<&str>> = perm.iter().map(|&i| g1[i]).collect();
        let c = demographic_parity_gap(&preds_p, &groups_p, 5).unwrap();
        assert_eq!(a.gap, c.gap);
    }

    #[test]
    fn intervention_hand_case() {
        // base: wrong wrong correct; ours: correct wrong correct
        let labels = [1, 1, 0];
        let base = [0, 0, 0];
        let ours = [1, 0, 0];
        let r = intervention(&base, &ours, &labels, &vec![BTreeMap::new(); 3]).unwrap();
        assert_eq!(r.w_to_c, Some(0.5));
        assert_eq!(r.c_to_w, Some(0.0));
    }

    #[test]
    fn intervention_identity_when_equal() {
        let labels = [1, 0, 1];
        let base = [1, 1, 0];
        let r = intervention(&base, &base, &labels, &vec![BTreeMap::new(); 3]).unwrap();
        assert_eq!(r.w_to_c, Some(0.0));
        assert_eq!(r.c_to_w, Some(0.0));
    }

    #[test]
    fn intervention_absent_denominator() {
        let labels = [1, 0];
        let base = [1, 0]; // all correct
        let ours = [0, 0];
        let r = intervention(&base, &ours, &labels, &vec![BTreeMap::new(); 2]).unwrap();
        assert_eq!(r.w_to_c, None);
        assert_eq!(r.c_to_w, Some(0.5));
    }

    #[test]
    fn intervention_accuracy_identity() {
        let mut rng = crate::rng::substream(31, 41);
        use rand::Rng;
        let n = 500;
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let base: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let ours: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        let r = intervention(&base, &ours, &labels, &vec![BTreeMap::new(); n]).unwrap();
        let base_acc = labels.iter().zip(&base).filter(|(a, b)| a == b).count() as f64 / n as f64;
        let ours_acc = labels.iter().zip(&ours).filter(|(a, b)| a == b).count() as f64 / n as f64;
        let w2c = r.w_to_c.unwrap_or(0.0);
        let c2w = r.c_to_w.unwrap_or(0.0);
        let reconstructed = base_acc + w2c * (1.0 - base_acc) - c2w * base_acc;
        assert!((reconstructed - ours_acc).abs() < 1e-12);
    }

    fn identity_bundle(dim: usize) -> crate::models::ModelBundle {
        init_bundle(
            &ModelConfig {
                feature_dim: dim,
                hidden_widths: vec![],
                rep_dim: dim,
                k: 2,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn evaluate_without_attrs_has_empty_gaps() {
        let ds = Dataset::from_instances(
            (0..20)
                .map(|i| crate::dataio::Instance {
                    id: format!("i{i}"),
                    features: vec![i as f64, 1.0],
                    label: (i % 2) as u8,
                    attrs: BTreeMap::new(),
                })
                .collect(),
        )
        .unwrap();
        let bundle = identity_bundle(2);
        let report = evaluate(&bundle, &ds, 10).unwrap();
        assert!(report.dp_gaps.is_empty());
        assert!(report.accuracy.is_finite());
    }

    #[test]
    fn evaluate_is_deterministic_bytes() {
        let spec = SyntheticSpec {
            n: 60,
            d_causal: 3,
            d_conf: 3,
            class_balance: 0.5,
            attributes: vec![AttributeSpec {
                name: "domain".into(),
                cardinality: 2,
                confound_strength: 0.7,
            }],
            noise_sigma: 0.4,
            prototype_scale: 1.0,
            seed: 5,
        };
        let (ds, _) = generate_confounded(&spec).unwrap();
        let bundle = identity_bundle(6);
        let a = evaluate(&bundle, &ds, 10).unwrap().to_canonical_json();
        let b = evaluate(&bundle, &ds, 10).unwrap().to_canonical_json();
        assert_eq!(a, b);
        assert!(serde_json::from_str::<serde_json::Value>(&a).is_ok());
    }

    #[test]
    fn confounder_only_classifier_has_huge_gap_at_full_confounding() {
        let spec = SyntheticSpec {
            n: 400,
            d_causal: 4,
            d_conf: 4,
            class_balance: 0.5,
            attributes: vec![AttributeSpec {
                name: "domain".into(),
                cardinality: 2,
                confound_strength: 1.0,
            }],
            noise_sigma: 0.1,
            prototype_scale: 1.0,
            seed: 9,
        };
        let (ds, meta) = generate_confounded(&spec).unwrap();
        let mut bundle = identity_bundle(8);
        // classifier reads only the confounder block along v1 - v0
        let v0 = &meta.confounder_prototypes["domain"][0];
        let v1 = &meta.confounder_prototypes["domain"][1];
        let mut w = Tensor2::zeros(8, 2);
        let mut bias = 0.0;
        for d in 0..4 {
            let diff = v1[d] - v0[d];
            w.set(4 + d, 1, diff);
            bias += (v0[d] + v1[d]) / 2.0 * diff;
        }
        let mut b = Tensor2::zeros(1, 2);
        b.set(0, 1, -bias);
        bundle.classifier.tensors[0] = w;
        bundle.classifier.tensors[1] = b;
        let report = evaluate(&bundle, &ds, 10).unwrap();
        assert!(
            report.dp_gaps["domain"] >= 0.9,
            "gap {}",
            report.dp_gaps["domain"]
        );
    }

    #[test]
    fn dump_features_shape_and_determinism() {
        let (ds, _) = generate_confounded(&SyntheticSpec {
            n: 10,
            d_causal: 2,
            d_conf: 2,
            class_balance: 0.5,
            attributes: vec![AttributeSpec {
                name: "domain".into(),
                cardinality: 2,
                confound_strength: 0.5,
            }],
            noise_sigma: 0.3,
            prototype_scale: 1.0,
            seed: 3,
        })
        .unwrap();
        let bundle = identity_bundle(4);
        let f1 = tempfile::NamedTempFile::new().unwrap();
        let f2 = tempfile::NamedTempFile::new().unwrap();
        dump_features(&bundle, &ds, f1.path()).unwrap();
        dump_features(&bundle, &ds, f2.path()).unwrap();
        let b1 = std::fs::read(f1.path()).unwrap();
        let b2 = std::fs::read(f2.path()).unwrap();
        assert_eq!(b1, b2);
        let text = String::from_utf8(b1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), ds.len());
        for line in lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["z"].as_array().unwrap().len(), 4);
        }
    }
}
