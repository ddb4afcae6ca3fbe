//! Seeded synthetic datasets used by tests, examples and the CLI demo.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSchema, FieldKind, FieldSpec, RawRow};
use crate::error::{NonError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub schema: DatasetSchema,
    pub rows: Vec<RawRow>,
}

impl SyntheticData {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.schema.fields.iter().map(|f| f.name.as_str()).collect();
        let _ = writeln!(out, "{},{}", self.schema.label, names.join(","));
        for r in &self.rows {
            let cells: Vec<&str> = r.cells.iter().map(|c| c.as_deref().unwrap_or("")).collect();
            let _ = writeln!(out, "{},{}", r.label, cells.join(","));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| NonError::io(path, e))
    }

    /// Splits off the last `fraction` of rows.
    pub fn split_tail(&self, fraction: f64) -> (SyntheticData, SyntheticData) {
        let cut = self.rows.len() - (self.rows.len() as f64 * fraction).round() as usize;
        let head = SyntheticData {
            schema: self.schema.clone(),
            rows: self.rows[..cut].to_vec(),
        };
        let tail = SyntheticData {
            schema: self.schema.clone(),
            rows: self.rows[cut..].to_vec(),
        };
        (head, tail)
    }
}

fn schema(categorical: usize, numerical: usize) -> DatasetSchema {
    let mut fields: Vec<FieldSpec> = (0..categorical)
        .map(|i| FieldSpec {
            name: format!("c{i}"),
            kind: FieldKind::Categorical,
        })
        .collect();
    fields.extend((0..numerical).map(|i| FieldSpec {
        name: format!("n{i}"),
        kind: FieldKind::Numerical,
    }));
    DatasetSchema::new("label", ',', fields).expect("generated schema is valid")
}

fn make_row(line: usize, cats: &[usize], nums: &[f64], label: bool) -> RawRow {
    let mut cells: Vec<Option<String>> = cats.iter().map(|v| Some(format!("v{v}"))).collect();
    cells.extend(nums.iter().map(|x| Some(format!("{x}"))));
    RawRow {
        line,
        cells,
        label: if label { "1" } else { "0" }.to_string(),
    }
}

/// Rows whose label is exactly determined by the sign of a hidden linear
/// score over one-hot categorical values and numerical values, thresholded
/// at the median so classes are balanced.
pub fn separable(rows: usize, categorical: usize, numerical: usize, vocab: usize, seed: u64) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let value_weights: Vec<Vec<f64>> = (0..categorical)
        .map(|_| (0..vocab).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let num_weights: Vec<f64> = (0..numerical).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut drawn = Vec::with_capacity(rows);
    for _ in 0..rows {
        let cats: Vec<usize> = (0..categorical).map(|_| rng.random_range(0..vocab)).collect();
        let nums: Vec<f64> = (0..numerical).map(|_| rng.random_range(-1.0..1.0)).collect();
        let score = cats.iter().enumerate().map(|(i, v)| value_weights[i][*v]).sum::<f64>()
            + nums.iter().zip(&num_weights).map(|(x, w)| x * w).sum::<f64>();
        drawn.push((cats, nums, score));
    }
    let mut scores: Vec<f64> = drawn.iter().map(|d| d.2).collect();
    scores.sort_by(f64::total_cmp);
    let median = scores[rows / 2];
    SyntheticData {
        schema: schema(categorical, numerical),
        rows: drawn
            .iter()
            .enumerate()
            .map(|(i, (c, n, s))| make_row(i + 2, c, n, *s >= median))
            .collect(),
    }
}

/// Rows whose label depends on the structure each field imposes on its
/// values. Every value `v` of field `i` carries a hidden scalar `s(v)`, and
/// the field maps it through its own fixed non-monotone function
/// `φ_i(s) = sin(ω_i s + θ_i)`. The label is the sign of `Σ_i φ_i(s(v_i))`
/// plus logistic noise of scale `noise`.
pub fn intra_field(rows: usize, fields: usize, vocab: usize, noise: f64, seed: u64) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden: Vec<Vec<f64>> = (0..fields)
        .map(|_| (0..vocab).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let shape: Vec<(f64, f64)> = (0..fields)
        .map(|_| (rng.random_range(2.0..5.0), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let mut out = Vec::with_capacity(rows);
    for line in 0..rows {
        let cats: Vec<usize> = (0..fields).map(|_| rng.random_range(0..vocab)).collect();
        let score: f64 = cats
            .iter()
            .enumerate()
            .map(|(i, v)| (shape[i].0 * hidden[i][*v] + shape[i].1).sin())
            .sum();
        let u: f64 = rng.random_range(1e-12..1.0);
        let logistic = (u / (1.0 - u)).ln();
        out.push(make_row(line + 2, &cats, &[], score + noise * logistic > 0.0));
    }
    SyntheticData {
        schema: schema(fields, 0),
        rows: out,
    }
}
