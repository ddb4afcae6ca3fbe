//! AUC, field-embedding similarity and embedding export.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FieldKind, UNKNOWN_INDEX, Vocabulary};
use crate::error::{NonError, Result};
use crate::model::NonModel;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_SAMPLE_CAP: usize = 200;

/// Area under the ROC curve by rank sum. Tied scores receive their average
/// rank, so each tied positive/negative pair counts one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(NonError::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(NonError::UndefinedMetric("NaN score".into()));
    }
    let positives = labels.iter().filter(|y| **y > 0.5).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(NonError::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|r| labels[**r] > 0.5).count();
        rank_sum += rank * tied_pos as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Mean binary cross entropy of probabilities, clamped at `eps`.
pub fn log_loss(probs: &[f64], labels: &[f64], eps: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| -(y * p.max(eps).ln() + (1.0 - y) * (1.0 - p).max(eps).ln()))
        .sum();
    total / probs.len().max(1) as f64
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Sum of cosines over all unordered pairs of rows, and the pair count.
pub fn pairwise_cosine_sum(rows: &[&[f64]]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            sum += cosine(rows[i], rows[j]);
            pairs += 1;
        }
    }
    (sum, pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSimilarity {
    pub field: String,
    pub values: usize,
    pub pairs: usize,
    pub before: f64,
    pub after: f64,
}

/// Mean pairwise cosine of each categorical field's feature vectors before
/// and after the field-wise network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSimilarityReport {
    pub sample_cap: usize,
    pub fields: Vec<FieldSimilarity>,
    /// Fields with fewer than two known values.
    pub skipped: Vec<String>,
    /// Pooled over every sampled pair of every field.
    pub micro_before: f64,
    pub micro_after: f64,
    /// Unweighted mean of the per-field statistics.
    pub macro_before: f64,
    pub macro_after: f64,
}

/// Up to `cap` known-value indices of a field with `vocab_size` rows, in
/// increasing order. The unknown bucket is never drawn.
pub fn sample_values(vocab_size: usize, cap: usize, seed: u64) -> Vec<usize> {
    let known = vocab_size.saturating_sub(1);
    let mut picked: Vec<usize> = if known <= cap {
        (0..known).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, known, cap).into_vec()
    };
    picked.sort_unstable();
    picked.into_iter().map(|k| k + UNKNOWN_INDEX + 1).collect()
}

/// Embedding rows of `field` at `indices` before (`[s×d]`) and after
/// (`[s×d̂]`) its field-wise network and refinement.
pub fn field_vectors(model: &NonModel, field: usize, indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let info = model
        .fields()
        .get(field)
        .ok_or_else(|| NonError::Config(format!("no field at position {field}")))?;
    if info.kind != FieldKind::Categorical {
        return Err(NonError::Config(format!("field `{}` is not categorical", info.name)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = model
        .params()
        .iter()
        .map(|p| tape.constant(p.tensor.clone()))
        .collect();
    let table = vars[model.embedding_param(field).index()];
    let before = tape.gather_rows(table, indices)?;
    let after = model.field_wise_single(&mut tape, &vars, field, before)?;
    Ok((tape.tensor(before), tape.tensor(after)))
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    let width = t.shape()[1];
    t.values().chunks(width).collect()
}

/// Computes the before/after statistic for every categorical field with at
/// least two known values, sampling at most `cap` values per field.
pub fn field_similarity(model: &NonModel, cap: usize, seed: u64) -> Result<FieldSimilarityReport> {
    if cap < 2 {
        return Err(NonError::Config("similarity sample cap must be at least 2".into()));
    }
    let categorical: Vec<usize> = model
        .fields()
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind == FieldKind::Categorical)
        .map(|(i, _)| i)
        .collect();
    let results: Vec<Result<Option<(FieldSimilarity, f64, f64)>>> = categorical
        .par_iter()
        .map(|&f| {
            let info = &model.fields()[f];
            let idx = sample_values(info.vocab_size, cap, seed.wrapping_add(f as u64));
            if idx.len() < 2 {
                return Ok(None);
            }
            let (before, after) = field_vectors(model, f, &idx)?;
            let (sb, pairs) = pairwise_cosine_sum(&rows(&before));
            let (sa, _) = pairwise_cosine_sum(&rows(&after));
            let stat = FieldSimilarity {
                field: info.name.clone(),
                values: idx.len(),
                pairs,
                before: sb / pairs as f64,
                after: sa / pairs as f64,
            };
            Ok(Some((stat, sb, sa)))
        })
        .collect();

    let mut fields = Vec::new();
    let mut skipped = Vec::new();
    let (mut sum_before, mut sum_after, mut pairs) = (0.0, 0.0, 0usize);
    for (f, r) in categorical.iter().zip(results) {
        match r? {
            Some((stat, sb, sa)) => {
                sum_before += sb;
                sum_after += sa;
                pairs += stat.pairs;
                fields.push(stat);
            }
            None => skipped.push(model.fields()[*f].name.clone()),
        }
    }
    if fields.is_empty() {
        return Err(NonError::Data("no categorical field has two or more known values".into()));
    }
    let n = fields.len() as f64;
    Ok(FieldSimilarityReport {
        sample_cap: cap,
        micro_before: sum_before / pairs as f64,
        micro_after: sum_after / pairs as f64,
        macro_before: fields.iter().map(|s| s.before).sum::<f64>() / n,
        macro_after: fields.iter().map(|s| s.after).sum::<f64>() / n,
        fields,
        skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Before,
    After,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub field: String,
    pub value: String,
    pub index: usize,
    pub stage: Stage,
    pub vector: Vec<f64>,
}

/// Before and after vectors of up to `cap` values for each named field.
/// Rows come out field by field in the requested order, then by index,
/// with each value's `before` row ahead of its `after` row.
pub fn export_embeddings(
    model: &NonModel,
    vocabulary: Option<&Vocabulary>,
    field_names: &[String],
    cap: usize,
    seed: u64,
) -> Result<Vec<EmbeddingRow>> {
    let mut out = Vec::new();
    for name in field_names {
        let f = model
            .fields()
            .iter()
            .position(|x| &x.name == name)
            .ok_or_else(|| NonError::Config(format!("unknown field `{name}`")))?;
        let idx = sample_values(model.fields()[f].vocab_size, cap, seed.wrapping_add(f as u64));
        if idx.is_empty() {
            continue;
        }
        let (before, after) = field_vectors(model, f, &idx)?;
        let vocab = vocabulary.and_then(|v| v.field(name));
        for ((k, b), a) in idx.iter().zip(rows(&before)).zip(rows(&after)) {
            let value = vocab
                .and_then(|v| v.value(*k))
                .map_or_else(|| k.to_string(), str::to_string);
            for (stage, v) in [(Stage::Before, b), (Stage::After, a)] {
                out.push(EmbeddingRow {
                    field: name.clone(),
                    value: value.clone(),
                    index: *k,
                    stage,
                    vector: v.to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// Tab-separated with a header: `field value index stage v0 v1 ...`.
/// Floats use the shortest representation that parses back exactly.
pub fn write_embeddings<W: Write>(rows: &[EmbeddingRow], writer: W) -> Result<()> {
    let width = rows.iter().map(|r| r.vector.len()).max().unwrap_or(0);
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_writer(writer);
    let to_err = |e: csv::Error| NonError::parse("embedding export", e);
    let mut header = vec!["field".to_string(), "value".into(), "index".into(), "stage".into()];
    header.extend((0..width).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(to_err)?;
    for r in rows {
        let stage = match r.stage {
            Stage::Before => "before",
            Stage::After => "after",
        };
        let mut rec = vec![r.field.clone(), r.value.clone(), r.index.to_string(), stage.to_string()];
        rec.extend(r.vector.iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush()
        .map_err(|e| NonError::parse("embedding export", e))
}

pub fn read_embeddings<R: Read>(reader: R) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| NonError::Row {
            line,
            message: e.to_string(),
        })?;
        let bad = |m: String| NonError::Row { line, message: m };
        if rec.len() < 4 {
            return Err(bad("expected at least 4 columns".into()));
        }
        let stage = match &rec[3] {
            "before" => Stage::Before,
            "after" => Stage::After,
            s => return Err(bad(format!("unknown stage `{s}`"))),
        };
        let index = rec[2].parse().map_err(|e| bad(format!("index: {e}")))?;
        let vector = rec
            .iter()
            .skip(4)
            .map(|x| x.parse::<f64>().map_err(|e| bad(format!("vector: {e}"))))
            .collect::<Result<_>>()?;
        out.push(EmbeddingRow {
            field: rec[0].to_string(),
            value: rec[1].to_string(),
            index,
            stage,
            vector,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::NonConfig;
    use crate::model::FieldInfo;

    #[test]
    fn auc_small_cases() {
        assert_eq!(auc(&[0.1, 0.9], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 4], &[0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(NonError::UndefinedMetric(_))));
        assert!(auc(&[0.1], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn auc_complement_without_ties() {
        let s = [0.1, 0.5, 0.3, 0.8, 0.2];
        let y = [0.0, 1.0, 0.0, 1.0, 1.0];
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = auc(&s, &y).unwrap() + auc(&neg, &y).unwrap();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        let v = [1.0, 1.0];
        let (s, p) = pairwise_cosine_sum(&[&v, &v, &v]);
        assert_eq!(p, 3);
        assert!((s / 3.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_skips_unknown_and_caps() {
        assert_eq!(sample_values(4, 10, 0), vec![1, 2, 3]);
        let s = sample_values(1000, 50, 7);
        assert_eq!(s.len(), 50);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|k| *k >= 1 && *k < 1000));
        assert_eq!(s, sample_values(1000, 50, 7));
        assert!(sample_values(2, 10, 0).len() < 2);
    }

    fn model() -> NonModel {
        let fields = vec![
            FieldInfo {
                name: "a".into(),
                kind: FieldKind::Categorical,
                vocab_size: 6,
            },
            FieldInfo {
                name: "tiny".into(),
                kind: FieldKind::Categorical,
                vocab_size: 2,
            },
            FieldInfo {
                name: "x".into(),
                kind: FieldKind::Numerical,
                vocab_size: 0,
            },
        ];
        let mut c = NonConfig {
            embedding_dim: 4,
            ..NonConfig::default()
        };
        c.operations.dnn_hidden = vec![8];
        c.fusion.hidden = vec![4];
        NonModel::new(c, fields, "h", 5).unwrap()
    }

    #[test]
    fn similarity_skips_small_fields() {
        let m = model();
        let r = field_similarity(&m, 200, 0).unwrap();
        assert_eq!(r.skipped, vec!["tiny".to_string()]);
        assert_eq!(r.fields.len(), 1);
        assert_eq!(r.fields[0].pairs, 10);
        assert!(r.micro_before.abs() <= 1.0 && r.micro_after.abs() <= 1.0);
    }

    #[test]
    fn export_counts_and_roundtrip() {
        let m = model();
        let rows = export_embeddings(&m, None, &["a".into(), "tiny".into()], 3, 1).unwrap();
        assert_eq!(rows.len(), (3 + 1) * 2);
        let table = &m.params().get(m.embedding_param(0)).tensor;
        let first = &rows[0];
        assert_eq!(first.stage, Stage::Before);
        let d = 4;
        assert_eq!(first.vector, table.values()[first.index * d..(first.index + 1) * d].to_vec());
        let mut buf = Vec::new();
        write_embeddings(&rows, &mut buf).unwrap();
        assert_eq!(read_embeddings(buf.as_slice()).unwrap(), rows);
        assert!(export_embeddings(&m, None, &["nope".into()], 3, 1).is_err());
    }
}
