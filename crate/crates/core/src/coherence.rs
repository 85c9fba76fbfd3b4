//! Atom coherence: mean pairwise cosine similarity between the raw gradients
//! of an atom's top activating documents.

use serde::{Deserialize, Serialize};

use crate::dictionary::CodeMatrix;
use crate::error::{Error, Result};
use crate::store::GradientSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoherenceConfig {
    /// Top activating documents per atom.
    pub n: usize,
    pub ranking: ActivationRanking,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        CoherenceConfig {
            n: 20,
            ranking: ActivationRanking::Magnitude,
        }
    }
}

impl CoherenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("coherence needs n >= 2".into()));
        }
        Ok(())
    }
}

/// How activating documents are ordered before truncation to the top `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationRanking {
    /// Descending `|α|` over all nonzero coefficients.
    #[default]
    Magnitude,
    /// Descending `α` over positive coefficients only.
    SignedPositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivatingDoc {
    pub doc_index: usize,
    pub doc_id: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomReport {
    pub atom_id: usize,
    /// `None` when fewer than two documents activate the atom.
    pub coherence: Option<f64>,
    pub active_docs: usize,
    pub top_docs: Vec<ActivatingDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Documents with a nonzero coefficient for `atom`, ranked, truncated to
/// `n`. Ties go to the lower document index.
pub fn activating_documents(
    codes: &CodeMatrix,
    atom: usize,
    n: usize,
    ranking: ActivationRanking,
) -> Result<Vec<(usize, f64)>> {
    if atom >= codes.n_cols {
        return Err(Error::Config(format!(
            "atom {} out of range (K = {})",
            atom, codes.n_cols
        )));
    }
    let mut col = codes.column(atom);
    match ranking {
        ActivationRanking::Magnitude => {
            col.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)))
        }
        ActivationRanking::SignedPositive => {
            col.retain(|&(_, v)| v > 0.0);
            col.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
    }
    col.truncate(n);
    Ok(col)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean cosine over ordered pairs `a ≠ b` of the raw gradients of `docs`
/// (row indices into `raw`). Zero-norm gradients contribute cosine 0.
pub fn coherence_score(raw: &GradientSet, docs: &[usize]) -> Result<f64> {
    if docs.len() < 2 {
        return Err(Error::Config(format!(
            "coherence needs at least 2 documents, got {}",
            docs.len()
        )));
    }
    if let Some(&bad) = docs.iter().find(|&&i| i >= raw.n_docs()) {
        return Err(Error::Config(format!(
            "document index {bad} not in gradient set of {} rows",
            raw.n_docs()
        )));
    }
    let rows: Vec<&[f64]> = docs
        .iter()
        .map(|&i| {
            raw.values
                .row(i)
                .to_slice()
                .expect("gradient rows are contiguous")
        })
        .collect();
    let norms: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    let mut total = 0.0;
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            if norms[a] > 0.0 && norms[b] > 0.0 {
                total += dot(rows[a], rows[b]) / (norms[a] * norms[b]);
            }
        }
    }
    let s = rows.len() as f64;
    // Each unordered pair stands for both orders.
    Ok(2.0 * total / (s * (s - 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceSummary {
    pub reports: Vec<AtomReport>,
    pub above_0_5: usize,
    pub above_0_1: usize,
    pub undefined: usize,
}

/// One report per atom, sorted by descending coherence (ties by atom id);
/// atoms with undefined coherence come last.
pub fn rank_atoms(
    codes: &CodeMatrix,
    raw: &GradientSet,
    cfg: &CoherenceConfig,
) -> Result<CoherenceSummary> {
    cfg.validate()?;
    if codes.n_rows != raw.n_docs() {
        return Err(Error::Shape(format!(
            "codes cover {} documents, gradient set has {}",
            codes.n_rows,
            raw.n_docs()
        )));
    }
    let active = codes.active_counts();
    let mut reports = Vec::with_capacity(codes.n_cols);
    for atom in 0..codes.n_cols {
        let top = activating_documents(codes, atom, cfg.n, cfg.ranking)?;
        let idx: Vec<usize> = top.iter().map(|&(i, _)| i).collect();
        let coherence = if idx.len() >= 2 {
            Some(coherence_score(raw, &idx)?)
        } else {
            None
        };
        reports.push(AtomReport {
            atom_id: atom,
            coherence,
            active_docs: active[atom],
            top_docs: top
                .into_iter()
                .map(|(i, c)| ActivatingDoc {
                    doc_index: i,
                    doc_id: raw.doc_ids[i].clone(),
                    coefficient: c,
                })
                .collect(),
            label: None,
        });
    }
    reports.sort_by(|a, b| match (a.coherence, b.coherence) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.atom_id.cmp(&b.atom_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.atom_id.cmp(&b.atom_id),
    });
    let count_above = |t: f64| {
        reports
            .iter()
            .filter(|r| r.coherence.is_some_and(|c| c > t))
            .count()
    };
    Ok(CoherenceSummary {
        above_0_5: count_above(0.5),
        above_0_1: count_above(0.1),
        undefined: reports.iter().filter(|r| r.coherence.is_none()).count(),
        reports,
    })
}

impl CoherenceSummary {
    /// `atom_id,coherence,active_docs` rows in rank order; undefined
    /// coherence is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,atom_id,coherence,active_docs\n");
        for (rank, r) in self.reports.iter().enumerate() {
            let coh = r.coherence.map(|c| format!("{c:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                rank + 1,
                r.atom_id,
                coh,
                r.active_docs
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}
