//! Datasets, synthetic generators, and the CSV interchange format.
//!
//! CSV layout: one header row, feature columns then target column(s).
//! Columns whose header starts with `target` are targets; if none is
//! marked, the last column is the target. Classification targets are a
//! single integer-valued column.

use crate::error::{Error, Result};
use crate::network::{LossKind, LossSpec, Network, Target};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A supervised dataset: inputs with per-example targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Target>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Target>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidConfig("dataset must be nonempty".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::dim(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let d = inputs[0].len();
        for (i, x) in inputs.iter().enumerate() {
            if x.len() != d {
                return Err(Error::Schema(format!(
                    "row {i} has {} features, expected {d}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("row {i} has a non-finite feature")));
            }
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Loss spec of example `i` under the given loss kind.
    pub fn loss_spec(&self, i: usize, kind: LossKind) -> LossSpec {
        LossSpec { kind, target: self.targets[i].clone() }
    }

    /// Deterministic split into (train, test).
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        RngStream::new(seed, 0x5B117).shuffle(&mut idx);
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.clamp(1, self.len().saturating_sub(1).max(1));
        let pick = |ids: &[usize]| Dataset {
            inputs: ids.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: ids.iter().map(|&i| self.targets[i].clone()).collect(),
        };
        (pick(&idx[..cut]), pick(&idx[cut..]))
    }
}

/// Margin-loss scale making the loss layer bounded by construction:
/// `1 / (1 + max logit range over the dataset)`.
pub fn margin_scale(net: &Network, dataset: &Dataset) -> Result<f64> {
    let mut widest = 0.0f64;
    for x in &dataset.inputs {
        let out = net.forward(x)?;
        let hi = out.output().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = out.output().iter().cloned().fold(f64::INFINITY, f64::min);
        widest = widest.max(hi - lo);
    }
    Ok(1.0 / (1.0 + widest))
}

/// Synthetic dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// 1-D inputs, smooth sine target.
    Smooth1d,
    /// 2-D inputs, smooth product-of-waves target.
    Smooth2d,
    /// 8x8 blob images, 10 classes.
    Digits,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smooth-1d" => Ok(SynthKind::Smooth1d),
            "smooth-2d" => Ok(SynthKind::Smooth2d),
            "digits" => Ok(SynthKind::Digits),
            other => Err(Error::InvalidConfig(format!(
                "unknown synthetic dataset '{other}' (expected smooth-1d, smooth-2d, digits)"
            ))),
        }
    }
}

/// Deterministic synthetic generator spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_samples: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Generate the dataset described by the spec (same spec, same data).
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be positive".into()));
    }
    let mut rng = RngStream::new(spec.seed, 0xDA7A);
    let mut inputs = Vec::with_capacity(spec.n_samples);
    let mut targets = Vec::with_capacity(spec.n_samples);
    match spec.kind {
        SynthKind::Smooth1d => {
            for _ in 0..spec.n_samples {
                let x = rng.next_f64();
                let y = 0.5
                    + 0.25 * (2.0 * std::f64::consts::PI * x).sin()
                    + spec.noise * rng.gaussian();
                inputs.push(vec![x]);
                targets.push(Target::Values(vec![y]));
            }
        }
        SynthKind::Smooth2d => {
            for _ in 0..spec.n_samples {
                let (a, b) = (rng.next_f64(), rng.next_f64());
                let y = 0.5
                    + 0.2
                        * (2.0 * std::f64::consts::PI * a).sin()
                        * (std::f64::consts::PI * b).cos()
                    + spec.noise * rng.gaussian();
                inputs.push(vec![a, b]);
                targets.push(Target::Values(vec![y]));
            }
        }
        SynthKind::Digits => {
            let templates = digit_templates();
            for i in 0..spec.n_samples {
                let class = i % 10;
                let mut img = templates[class].clone();
                for px in &mut img {
                    *px = (*px + spec.noise * rng.gaussian()).clamp(0.0, 1.0);
                }
                inputs.push(img);
                targets.push(Target::Class(class));
            }
        }
    }
    Dataset::new(inputs, targets)
}

/// Ten fixed 8x8 two-blob templates, one per class.
fn digit_templates() -> Vec<Vec<f64>> {
    (0..10)
        .map(|c| {
            let (r1, c1) = (1.0 + (c * 3 % 6) as f64, 1.0 + (c * 5 % 6) as f64);
            let (r2, c2) = (1.0 + (c * 7 % 6) as f64, 6.0 - (c * 2 % 6) as f64);
            let mut img = Vec::with_capacity(64);
            for r in 0..8 {
                for col in 0..8 {
                    let d1 = ((r as f64 - r1).powi(2) + (col as f64 - c1).powi(2)) / 3.0;
                    let d2 = ((r as f64 - r2).powi(2) + (col as f64 - c2).powi(2)) / 5.0;
                    img.push(((-d1).exp() + 0.7 * (-d2).exp()).min(1.0));
                }
            }
            img
        })
        .collect()
}

/// Read a dataset from CSV. With `classification` the target column is
/// interpreted as a class index.
pub fn read_dataset(path: &Path, classification: bool) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset_csv(&text, classification)
}

pub fn parse_dataset_csv(text: &str, classification: bool) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Schema("empty CSV: missing header row".into()))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut target_cols: Vec<usize> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.to_ascii_lowercase().starts_with("target"))
        .map(|(i, _)| i)
        .collect();
    if target_cols.is_empty() {
        target_cols.push(names.len() - 1);
    }
    if classification && target_cols.len() != 1 {
        return Err(Error::Schema(
            "classification CSV needs exactly one target column".into(),
        ));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(Error::Schema(format!(
                "ragged row {}: {} fields, header has {}",
                lineno + 1,
                fields.len(),
                names.len()
            )));
        }
        let mut feats = Vec::new();
        let mut tvals = Vec::new();
        for (col, raw) in fields.iter().enumerate() {
            let v: f64 = raw.parse().map_err(|_| {
                Error::Schema(format!(
                    "row {}, column '{}': '{raw}' is not a number",
                    lineno + 1,
                    names[col]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Schema(format!(
                    "row {}, column '{}': non-finite value",
                    lineno + 1,
                    names[col]
                )));
            }
            if target_cols.contains(&col) {
                tvals.push(v);
            } else {
                feats.push(v);
            }
        }
        let target = if classification {
            let raw = tvals[0];
            let c = raw.round();
            if (raw - c).abs() > 1e-9 || c < 0.0 {
                return Err(Error::Schema(format!(
                    "row {}: class index must be a non-negative integer, got {raw}",
                    lineno + 1
                )));
            }
            Target::Class(c as usize)
        } else {
            Target::Values(tvals)
        };
        inputs.push(feats);
        targets.push(target);
    }
    Dataset::new(inputs, targets)
}

/// Write a dataset as CSV (features `x0..`, targets `target0..` / `target`).
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = String::new();
    let d = dataset.input_dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    match &dataset.targets[0] {
        Target::Values(vs) => {
            for i in 0..vs.len() {
                header.push(format!("target{i}"));
            }
        }
        Target::Class(_) => header.push("target".into()),
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for (x, t) in dataset.inputs.iter().zip(&dataset.targets) {
        let mut row: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
        match t {
            Target::Values(vs) => row.extend(vs.iter().map(|v| format!("{v:?}"))),
            Target::Class(c) => row.push(c.to_string()),
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec { kind: SynthKind::Smooth1d, n_samples: 50, noise: 0.01, seed: 4 };
        assert_eq!(synth_dataset(&spec).unwrap(), synth_dataset(&spec).unwrap());
        let other = SynthSpec { seed: 5, ..spec };
        assert_ne!(synth_dataset(&spec).unwrap(), synth_dataset(&other).unwrap());
    }

    #[test]
    fn digits_have_ten_classes() {
        let spec = SynthSpec { kind: SynthKind::Digits, n_samples: 40, noise: 0.05, seed: 0 };
        let ds = synth_dataset(&spec).unwrap();
        assert_eq!(ds.input_dim(), 64);
        let classes: std::collections::BTreeSet<usize> = ds
            .targets
            .iter()
            .map(|t| match t {
                Target::Class(c) => *c,
                _ => panic!("expected class targets"),
            })
            .collect();
        assert_eq!(classes.len(), 10);
    }

    #[test]
    fn csv_round_trip() {
        let spec = SynthSpec { kind: SynthKind::Smooth2d, n_samples: 20, noise: 0.0, seed: 9 };
        let ds = synth_dataset(&spec).unwrap();
        let dir = std::env::temp_dir().join("crashcert_csv_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.csv");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path, false).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn ragged_row_names_the_row() {
        let text = "x0,x1,target\n1,2,3\n1,2\n";
        let err = parse_dataset_csv(text, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "{msg}");
    }

    #[test]
    fn bad_number_names_row_and_column() {
        let text = "x0,target\n1,oops\n";
        let msg = parse_dataset_csv(text, false).unwrap_err().to_string();
        assert!(msg.contains("row 2") && msg.contains("target"), "{msg}");
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let spec = SynthSpec { kind: SynthKind::Smooth1d, n_samples: 30, noise: 0.0, seed: 1 };
        let ds = synth_dataset(&spec).unwrap();
        let (a1, b1) = ds.split(0.8, 7);
        let (a2, b2) = ds.split(0.8, 7);
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(a1.len() + b1.len(), ds.len());
    }
}
