//! Evaluation formulas: loss recovered, fraction of variance unexplained,
//! Pareto frontiers over judge scores, min-max scaling, and per-feature
//! activation deciles.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Matrix;
use crate::sae::SparseCodes;
use crate::store::Modality;

/// Cross-entropy values measured with the clean model, with activations
/// replaced by reconstructions, and with activations zeroed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecoveredInputs {
    pub ce_clean: f64,
    pub ce_spliced: f64,
    pub ce_ablated: f64,
}

/// `(ce_ablated − ce_spliced) / (ce_ablated − ce_clean)`.
pub fn loss_recovered(inputs: &LossRecoveredInputs) -> Result<f64> {
    let LossRecoveredInputs {
        ce_clean,
        ce_spliced,
        ce_ablated,
    } = *inputs;
    crate::numerics::ensure_finite(&[ce_clean, ce_spliced, ce_ablated], "cross-entropy values")?;
    let denom = ce_ablated - ce_clean;
    ensure!(
        denom != 0.0,
        Degenerate,
        "ablated and clean losses are equal"
    );
    if ce_ablated < ce_clean {
        log::warn!("ablated loss {ce_ablated} is below the clean loss {ce_clean}");
    }
    Ok((ce_ablated - ce_spliced) / denom)
}

/// `Σ‖x − x̂‖² / Σ‖x − mean(x)‖²` over the rows of `batch`.
pub fn fvu(batch: &Matrix, reconstructions: &Matrix) -> Result<f64> {
    ensure!(
        batch.shape() == reconstructions.shape(),
        Shape,
        "batch is {:?}, reconstructions are {:?}",
        batch.shape(),
        reconstructions.shape()
    );
    ensure!(batch.rows() > 0, Shape, "empty batch");
    let (n, d) = batch.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(batch.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let (mut err, mut var) = (0.0, 0.0);
    for r in 0..n {
        for ((x, xh), m) in batch.row(r).iter().zip(reconstructions.row(r)).zip(&mean) {
            err += (x - xh) * (x - xh);
            var += (x - m) * (x - m);
        }
    }
    ensure!(var > 0.0, Degenerate, "batch has zero variance");
    Ok(err / var)
}

/// One judged configuration. Scores are expected in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub coherence: f64,
    pub steering: f64,
    #[serde(default)]
    pub layer: Option<u32>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub method: String,
}

impl ScorePoint {
    pub fn new(coherence: f64, steering: f64) -> Self {
        Self {
            coherence,
            steering,
            layer: None,
            alpha: None,
            method: String::new(),
        }
    }

    /// At least as good on both scores and strictly better on one.
    pub fn dominates(&self, other: &ScorePoint) -> bool {
        self.coherence >= other.coherence
            && self.steering >= other.steering
            && (self.coherence > other.coherence || self.steering > other.steering)
    }
}

pub fn read_score_points<R: Read>(r: R) -> Result<Vec<ScorePoint>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let p: ScorePoint = rec?;
        crate::numerics::ensure_finite(&[p.coherence, p.steering], "score point")?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_score_points<W: Write>(points: &[ScorePoint], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

/// Points not dominated by any other point, ordered by coherence (descending,
/// ties in input order). Exact duplicates do not dominate each other, so all
/// copies of a frontier point are kept.
pub fn pareto_frontier(points: &[ScorePoint]) -> Vec<ScorePoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].coherence.total_cmp(&points[a].coherence));
    let mut kept = Vec::new();
    // Best steering among points with strictly higher coherence.
    let mut best_above = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let c = points[order[i]].coherence;
        let mut j = i;
        while j < order.len() && points[order[j]].coherence == c {
            j += 1;
        }
        let group = &order[i..j];
        let group_max = group
            .iter()
            .map(|&k| points[k].steering)
            .fold(f64::NEG_INFINITY, f64::max);
        for &k in group {
            let s = points[k].steering;
            if s == group_max && s > best_above {
                kept.push(points[k].clone());
            }
        }
        best_above = best_above.max(group_max);
        i = j;
    }
    kept
}

/// `(s − min) / (max − min)`.
pub fn min_max_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    crate::numerics::ensure_finite(scores, "scores")?;
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure!(
        hi > lo,
        Degenerate,
        "scores need at least two distinct values"
    );
    Ok(scores.iter().map(|s| (s - lo) / (hi - lo)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileStatus {
    /// At least ten activations.
    Full,
    /// Fired, but fewer than ten times.
    Partial,
    /// Never fired.
    Dead,
}

/// A token where the feature fired.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub sample_id: u64,
    pub token_index: u32,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileProfile {
    pub feature: u32,
    pub modality: Modality,
    /// Number of tokens where the feature was non-zero.
    pub count: usize,
    /// Upper boundaries of the ten deciles; empty for dead features.
    pub boundaries: Vec<f64>,
    pub status: ProfileStatus,
    /// Strongest activations first.
    pub exemplars: Vec<Exemplar>,
}

/// Nearest-rank decile boundaries: the `k`-th is the value at rank
/// `⌈k·n/10⌉` of the sorted input.
pub fn decile_boundaries(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (1..=10).map(|k| sorted[(k * n).div_ceil(10) - 1]).collect()
}

fn build_profile(
    feature: u32,
    modality: Modality,
    mut hits: Vec<Exemplar>,
    top_k: usize,
) -> DecileProfile {
    let values: Vec<f64> = hits.iter().map(|e| e.activation).collect();
    let status = match values.len() {
        0 => ProfileStatus::Dead,
        1..=9 => ProfileStatus::Partial,
        _ => ProfileStatus::Full,
    };
    hits.sort_by(|a, b| {
        b.activation
            .total_cmp(&a.activation)
            .then(a.sample_id.cmp(&b.sample_id))
            .then(a.token_index.cmp(&b.token_index))
    });
    hits.truncate(top_k);
    DecileProfile {
        feature,
        modality,
        count: values.len(),
        boundaries: decile_boundaries(&values),
        status,
        exemplars: hits,
    }
}

fn hits_for(codes: &SparseCodes, feature: u32, modality: Modality) -> Vec<Exemplar> {
    let mut hits = Vec::new();
    for t in codes.tokens.iter().filter(|t| t.modality == modality) {
        if let Ok(i) = t.features.binary_search_by_key(&feature, |&(f, _)| f) {
            let a = f64::from(t.features[i].1);
            if a != 0.0 {
                hits.push(Exemplar {
                    sample_id: t.sample_id,
                    token_index: t.token_index,
                    activation: a,
                });
            }
        }
    }
    hits
}

/// Deciles over the non-zero activations of one feature in one modality.
pub fn decile_profile(
    codes: &SparseCodes,
    feature: u32,
    modality: Modality,
    top_k: usize,
) -> Result<DecileProfile> {
    ensure!(
        (feature as usize) < codes.d_sae,
        Config,
        "feature {feature} out of range (d_sae = {})",
        codes.d_sae
    );
    Ok(build_profile(
        feature,
        modality,
        hits_for(codes, feature, modality),
        top_k,
    ))
}

/// Profiles for every feature, text then image for each.
pub fn all_decile_profiles(codes: &SparseCodes, top_k: usize) -> Vec<DecileProfile> {
    let mut hits: BTreeMap<(u32, Modality), Vec<Exemplar>> = BTreeMap::new();
    for t in &codes.tokens {
        for &(f, a) in &t.features {
            if a != 0.0 {
                hits.entry((f, t.modality)).or_default().push(Exemplar {
                    sample_id: t.sample_id,
                    token_index: t.token_index,
                    activation: f64::from(a),
                });
            }
        }
    }
    let mut out = Vec::with_capacity(2 * codes.d_sae);
    for f in 0..codes.d_sae as u32 {
        for m in [Modality::Text, Modality::Image] {
            out.push(build_profile(
                f,
                m,
                hits.remove(&(f, m)).unwrap_or_default(),
                top_k,
            ));
        }
    }
    out
}

pub fn profiles_to_json(profiles: &[DecileProfile]) -> Result<String> {
    Ok(serde_json::to_string_pretty(profiles)?)
}

pub fn profiles_from_json(text: &str) -> Result<Vec<DecileProfile>> {
    Ok(serde_json::from_str(text)?)
}
