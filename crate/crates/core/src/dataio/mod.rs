//! Instance/dataset model, JSON Lines ingestion and the train/val/test split.
//!
//! Sensitive attributes ride along as string-valued metadata; they are
//! never model input, only evaluation grouping keys.

mod synth;

pub use synth::{
    generate_confounded, meta_path_for, reshuffle_attrs, AttributeSpec, SyntheticMeta,
    SyntheticSpec,
};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::rng;

/// One embedded instance: feature vector, binary label and evaluation-only
/// sensitive attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: String,
    pub features: Vec<f64>,
    pub label: u8,
    pub attrs: BTreeMap<String, String>,
}

impl Instance {
    fn validate(&self, line: usize) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Data(format!(
                "instance '{}' (line {line}) has no features",
                self.id
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "instance '{}' (line {line}) has non-finite features",
                self.id
            )));
        }
        if self.label > 1 {
            return Err(Error::Data(format!(
                "instance '{}' (line {line}) has label {} (must be 0 or 1)",
                self.id, self.label
            )));
        }
        Ok(())
    }
}

/// Immutable collection of instances with a shared feature dimension and
/// the observed attribute schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: Vec<Instance>,
    feature_dim: usize,
    attr_schema: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    /// Build a dataset, inferring the attribute schema from observed values.
    pub fn from_instances(instances: Vec<Instance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let feature_dim = instances[0].features.len();
        let mut ids = BTreeSet::new();
        let mut schema: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, inst) in instances.iter().enumerate() {
            inst.validate(i + 1)?;
            if inst.features.len() != feature_dim {
                return Err(Error::Data(format!(
                    "inconsistent feature dimension at line {}: expected {}, got {}",
                    i + 1,
                    feature_dim,
                    inst.features.len()
                )));
            }
            if !ids.insert(inst.id.clone()) {
                return Err(Error::Data(format!("duplicate instance id '{}'", inst.id)));
            }
            for (k, v) in &inst.attrs {
                schema.entry(k.clone()).or_default().insert(v.clone());
            }
        }
        Ok(Dataset {
            instances,
            feature_dim,
            attr_schema: schema
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        })
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn attr_schema(&self) -> &BTreeMap<String, Vec<String>> {
        &self.attr_schema
    }

    /// Stack all features into a (n, feature_dim) tensor, preserving order.
    pub fn features_tensor(&self) -> Tensor2 {
        let mut data = Vec::with_capacity(self.len() * self.feature_dim);
        for inst in &self.instances {
            data.extend_from_slice(&inst.features);
        }
        Tensor2::from_vec(self.len(), self.feature_dim, data).expect("consistent dims")
    }

    pub fn labels(&self) -> Vec<u8> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.instances.iter().map(|i| i.id.as_str()).collect()
    }
}

/// Load a dataset from JSON Lines. Schema is inferred from observed
/// attribute values; line order is preserved.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Data(format!("cannot open dataset '{}': {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        inst.validate(idx + 1)?;
        if let Some(first) = instances.first() {
            let first: &Instance = first;
            if inst.features.len() != first.features.len() {
                return Err(Error::Data(format!(
                    "inconsistent feature dimension at line {}: expected {}, got {}",
                    idx + 1,
                    first.features.len(),
                    inst.features.len()
                )));
            }
        }
        instances.push(inst);
    }
    Dataset::from_instances(instances)
}

/// Write a dataset as JSON Lines (UTF-8, one record per line).
pub fn save_jsonl(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in ds.instances() {
        serde_json::to_writer(&mut out, inst)
            .map_err(|e| Error::Data(format!("serialize instance: {e}")))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Deterministic split into (train, val, test).
///
/// Instances are shuffled by `seed`, sizes are floor(n * ratio) with the
/// remainder assigned to train, so the three parts partition the input
/// exactly.
pub fn split(
    ds: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    if ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let n = ds.len();
    let n_val = ((n as f64) * rv).floor() as usize;
    let n_test = ((n as f64) * rs).floor() as usize;
    let n_train_floor = ((n as f64) * rt).floor() as usize;
    let remainder = n - (n_train_floor + n_val + n_test);
    let n_train = n_train_floor + remainder;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Data(format!(
            "split produced an empty part: {n_train}/{n_val}/{n_test} from n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::substream(seed, rng::tag::SPLIT);
    order.shuffle(&mut rng);
    let take = |idxs: &[usize]| -> Result<Dataset> {
        Dataset::from_instances(idxs.iter().map(|&i| ds.instances[i].clone()).collect())
    };
    let train = take(&order[..n_train])?;
    let val = take(&order[n_train..n_train + n_val])?;
    let test = take(&order[n_train + n_val..])?;
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_lines(n: usize, dim: usize) -> Vec<Instance> {
        (0..n)
            .map(|i| Instance {
                id: format!("i{i}"),
                features: (0..dim).map(|d| (i * dim + d) as f64).collect(),
                label: (i % 2) as u8,
                attrs: BTreeMap::from([("domain".to_string(), format!("g{}", i % 3))]),
            })
            .collect()
    }

    #[test]
    fn load_happy_path() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            r#"{{"id":"a","features":[1.0,2.0,3.0,4.0],"label":0,"attrs":{{}}}}"#
        )
        .unwrap();
        writeln!(
            f,
            r#"{{"id":"b","features":[5.0,6.0,7.0,8.0],"label":1,"attrs":{{"domain":"x"}}}}"#
        )
        .unwrap();
        let ds = load_jsonl(f.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.attr_schema()["domain"], vec!["x".to_string()]);
    }

    #[test]
    fn empty_file_is_a_data_error() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let err = load_jsonl(f.path()).unwrap_err();
        assert!(err.to_string().contains("empty dataset"));
    }

    #[test]
    fn malformed_line_names_the_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","features":[1.0],"label":0,"attrs":{{}}}}"#).unwrap();
        writeln!(f, r#"{{"id":"b", not json"#).unwrap();
        let err = load_jsonl(f.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "got {err}");
    }

    #[test]
    fn inconsistent_dims_name_the_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            r#"{{"id":"a","features":[1.0,2.0,3.0,4.0],"label":0,"attrs":{{}}}}"#
        )
        .unwrap();
        writeln!(
            f,
            r#"{{"id":"b","features":[1.0,2.0,3.0,4.0,5.0],"label":0,"attrs":{{}}}}"#
        )
        .unwrap();
        let err = load_jsonl(f.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got {err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            r#"{{"id":"a","features":[1.0],"label":0,"attrs":{{}},"extra":1}}"#
        )
        .unwrap();
        assert!(matches!(
            load_jsonl(f.path()).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = Dataset::from_instances(synthetic_lines(7, 3)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(&ds, f.path()).unwrap();
        let back = load_jsonl(f.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn split_exact_division() {
        let ds = Dataset::from_instances(synthetic_lines(1000, 2)).unwrap();
        let (tr, va, te) = split(&ds, (0.6, 0.1, 0.3), 17).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (600, 100, 300));
    }

    #[test]
    fn split_floor_rule_n10() {
        let ds = Dataset::from_instances(synthetic_lines(10, 2)).unwrap();
        let (tr, va, te) = split(&ds, (0.6, 0.1, 0.3), 17).unwrap();
        // floors 6/1/3 sum to 10, no remainder
        assert_eq!((tr.len(), va.len(), te.len()), (6, 1, 3));
    }

    #[test]
    fn split_remainder_goes_to_train() {
        let ds = Dataset::from_instances(synthetic_lines(11, 2)).unwrap();
        let (tr, va, te) = split(&ds, (0.6, 0.1, 0.3), 17).unwrap();
        // floors 6/1/3, remainder 1 -> train
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 3));
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let ds = Dataset::from_instances(synthetic_lines(53, 2)).unwrap();
        let (a1, b1, c1) = split(&ds, (0.6, 0.1, 0.3), 5).unwrap();
        let (a2, b2, c2) = split(&ds, (0.6, 0.1, 0.3), 5).unwrap();
        assert_eq!(a1.ids(), a2.ids());
        assert_eq!(b1.ids(), b2.ids());
        assert_eq!(c1.ids(), c2.ids());
        let mut all: Vec<&str> = a1.ids();
        all.extend(b1.ids());
        all.extend(c1.ids());
        all.sort_unstable();
        let mut expect: Vec<String> = ds.ids().iter().map(|s| s.to_string()).collect();
        expect.sort_unstable();
        assert_eq!(all, expect.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    }

    #[test]
    fn split_empty_part_is_an_error() {
        let ds = Dataset::from_instances(synthetic_lines(3, 2)).unwrap();
        assert!(split(&ds, (0.6, 0.1, 0.3), 1).is_err());
    }
}
