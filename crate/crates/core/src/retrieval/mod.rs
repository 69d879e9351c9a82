//! Cosine-distance retrieval, CMC / mAP scoring and repetition averaging.

mod descriptor_file;
mod metrics;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use descriptor_file::{decode_descriptors, encode_descriptors, read_descriptors, write_descriptors};
pub use metrics::{cmc_curve, cosine_distance, map_score, rank_gallery, score, DescriptorMatrix, Scores};

use crate::datasets::{EvalProtocol, ImageLibrary, ManifestRecord};
use crate::error::{Error, Result};
use crate::model::GpaModel;

/// Ranks quoted in summaries.
pub const SUMMARY_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionScore {
    pub repetition: usize,
    pub rank1: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Effective configuration the report was produced under.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    /// Mean CMC over repetitions, one entry per gallery rank.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub per_repetition: Vec<RepetitionScore>,
    pub mean_rank1: f64,
    pub mean_map: f64,
}

impl EvalReport {
    pub fn from_scores(scores: &[(usize, Scores)]) -> Result<Self> {
        let Some((_, first)) = scores.first() else {
            return Err(Error::invalid("report", "no repetitions"));
        };
        let len = first.cmc.len();
        if scores.iter().any(|(_, s)| s.cmc.len() != len) {
            return Err(Error::Data("gallery size differs between repetitions".into()));
        }
        let n = scores.len() as f64;
        let cmc = (0..len).map(|k| scores.iter().map(|(_, s)| s.cmc[k]).sum::<f64>() / n).collect();
        let per_repetition: Vec<RepetitionScore> = scores
            .iter()
            .map(|(r, s)| RepetitionScore { repetition: *r, rank1: s.rank1(), map: s.map })
            .collect();
        let mean_rank1 = per_repetition.iter().map(|r| r.rank1).sum::<f64>() / n;
        let mean_map = per_repetition.iter().map(|r| r.map).sum::<f64>() / n;
        Ok(Self {
            config: None,
            cmc,
            map: mean_map,
            per_repetition,
            mean_rank1,
            mean_map,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("bad report: {e}")))
    }

    /// Two-column `rank,matching_rate` text for plotting.
    pub fn cmc_text(&self) -> String {
        let mut out = String::from("rank,matching_rate\n");
        for (k, v) in self.cmc.iter().enumerate() {
            writeln!(out, "{},{v:.6}", k + 1).unwrap();
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.per_repetition {
            writeln!(out, "repetition {:>2}: rank-1 {:6.2}%  mAP {:6.2}%", r.repetition, 100.0 * r.rank1, 100.0 * r.map).unwrap();
        }
        write!(out, "mean: rank-1 {:.2}%  mAP {:.2}%  |", 100.0 * self.mean_rank1, 100.0 * self.mean_map).unwrap();
        for k in SUMMARY_RANKS.iter().filter(|k| **k <= self.cmc.len()) {
            write!(out, " R{k} {:.2}%", 100.0 * self.cmc[k - 1]).unwrap();
        }
        out.push('\n');
        out
    }
}

/// Eval-mode descriptors keyed by image path, shared across repetitions.
pub struct DescriptorCache<'m> {
    model: &'m mut GpaModel,
    rows: HashMap<String, Vec<f32>>,
}

impl<'m> DescriptorCache<'m> {
    pub fn new(model: &'m mut GpaModel) -> Self {
        Self {
            model,
            rows: HashMap::new(),
        }
    }

    pub fn matrix(&mut self, records: &[ManifestRecord], images: &mut ImageLibrary) -> Result<DescriptorMatrix> {
        if images.size() != self.model.backbone_config.input_size {
            return Err(Error::Data(format!(
                "image size {} does not match the model input size {}",
                images.size(),
                self.model.backbone_config.input_size
            )));
        }
        let mut missing: Vec<&ManifestRecord> = Vec::new();
        for r in records {
            if !self.rows.contains_key(&r.image_path) && !missing.iter().any(|m| m.image_path == r.image_path) {
                missing.push(r);
            }
        }
        if !missing.is_empty() {
            let tensors = missing
                .iter()
                .map(|r| images.get(r).cloned())
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = tensors.iter().collect();
            let d = self.model.describe(&refs)?;
            for (i, r) in missing.iter().enumerate() {
                self.rows.insert(r.image_path.clone(), d.slab(i).to_vec());
            }
        }
        let dim = self.model.descriptor_dim();
        let mut rows = Vec::with_capacity(records.len() * dim);
        for r in records {
            rows.extend_from_slice(&self.rows[&r.image_path]);
        }
        DescriptorMatrix::new(
            dim,
            rows,
            records.iter().map(|r| r.match_key()).collect(),
            records.iter().map(|r| r.is_distractor()).collect(),
        )
    }
}

/// Scores every protocol's query set against its gallery and averages.
pub fn evaluate(model: &mut GpaModel, protocols: &[EvalProtocol], images: &mut ImageLibrary) -> Result<EvalReport> {
    let mut cache = DescriptorCache::new(model);
    let mut scores = Vec::with_capacity(protocols.len());
    for p in protocols {
        let gallery = cache.matrix(&p.gallery, images)?;
        let query = cache.matrix(&p.query, images)?;
        scores.push((p.repetition, score(&gallery, &query)?));
    }
    EvalReport::from_scores(&scores)
}
