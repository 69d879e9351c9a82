use crate::error::{Error, Result};

/// Row-major descriptors with the identity and distractor flag of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMatrix {
    dim: usize,
    rows: Vec<f32>,
    identities: Vec<String>,
    is_distractor: Vec<bool>,
}

impl DescriptorMatrix {
    pub fn new(dim: usize, rows: Vec<f32>, identities: Vec<String>, is_distractor: Vec<bool>) -> Result<Self> {
        let n = identities.len();
        if dim == 0 || rows.len() != n * dim || is_distractor.len() != n {
            return Err(Error::shape("descriptors", &[n, dim], &[rows.len(), is_distractor.len()]));
        }
        if let Some(i) = (0..n).find(|&i| rows[i * dim..(i + 1) * dim].iter().all(|v| *v == 0.0)) {
            return Err(Error::invalid("descriptors", format!("row {i} ({}) is all zeros", identities[i])));
        }
        if let Some(i) = (0..n).find(|&i| rows[i * dim..(i + 1) * dim].iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric(format!("descriptor row {i} ({}) is not finite", identities[i])));
        }
        Ok(Self {
            dim,
            rows,
            identities,
            is_distractor,
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn identities(&self) -> &[String] {
        &self.identities
    }

    pub fn is_distractor(&self) -> &[bool] {
        &self.is_distractor
    }

    /// Same matrix with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(
            self.dim,
            self.rows.iter().map(|v| v * factor).collect(),
            self.identities.clone(),
            self.is_distractor.clone(),
        )
    }
}

/// `a` divided by its largest magnitude. Exactly proportional inputs map to
/// bit-identical outputs, which keeps rankings invariant under scaling.
fn unit_max(a: &[f32]) -> Option<Vec<f64>> {
    let m = a.iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()));
    (m > 0.0).then(|| a.iter().map(|v| *v as f64 / m).collect())
}

/// `1 − a·b / (‖a‖‖b‖)`, accumulated in f64 and clamped to `[0, 2]`.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_distance", &[a.len()], &[b.len()]));
    }
    let (Some(a), Some(b)) = (unit_max(a), unit_max(b)) else {
        return Err(Error::invalid("cosine_distance", "zero vector"));
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (norm(&a) * norm(&b))).clamp(0.0, 2.0))
}

/// Gallery indices by ascending distance to `query`; equal distances keep
/// ascending index order.
pub fn rank_gallery(query: &[f32], gallery: &DescriptorMatrix) -> Result<Vec<usize>> {
    if query.len() != gallery.dim() {
        return Err(Error::Data(format!(
            "descriptor dimension mismatch: query has {}, gallery has {}",
            query.len(),
            gallery.dim()
        )));
    }
    let dist = (0..gallery.len())
        .map(|i| cosine_distance(query, gallery.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    Ok(order)
}

fn relevance(ranking: &[usize], query: &str, gallery_ids: &[String], distractor: &[bool]) -> Vec<bool> {
    ranking
        .iter()
        .map(|&g| !distractor[g] && gallery_ids[g] == query)
        .collect()
}

fn check_inputs(rankings: &[Vec<usize>], query_ids: &[String], gallery_ids: &[String], distractor: &[bool]) -> Result<()> {
    if rankings.len() != query_ids.len() || gallery_ids.len() != distractor.len() {
        return Err(Error::shape("metrics", &[rankings.len(), gallery_ids.len()], &[query_ids.len(), distractor.len()]));
    }
    if rankings.is_empty() {
        return Err(Error::invalid("metrics", "no queries"));
    }
    for (r, q) in rankings.iter().zip(query_ids) {
        if r.len() != gallery_ids.len() {
            return Err(Error::shape("metrics", &[gallery_ids.len()], &[r.len()]));
        }
        if !gallery_ids.iter().zip(distractor).any(|(g, d)| !d && g == q) {
            return Err(Error::Data(format!("query identity {q} is absent from the gallery")));
        }
    }
    Ok(())
}

/// `cmc[k−1]` is the fraction of queries whose first correct gallery item
/// sits at rank `≤ k`.
pub fn cmc_curve(rankings: &[Vec<usize>], query_ids: &[String], gallery_ids: &[String], distractor: &[bool]) -> Result<Vec<f64>> {
    check_inputs(rankings, query_ids, gallery_ids, distractor)?;
    let mut hits = vec![0usize; gallery_ids.len()];
    for (r, q) in rankings.iter().zip(query_ids) {
        let first = relevance(r, q, gallery_ids, distractor)
            .iter()
            .position(|x| *x)
            .expect("checked above");
        hits[first] += 1;
    }
    let n = rankings.len() as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

/// Mean over queries of precision averaged at each relevant item's rank.
pub fn map_score(rankings: &[Vec<usize>], query_ids: &[String], gallery_ids: &[String], distractor: &[bool]) -> Result<f64> {
    check_inputs(rankings, query_ids, gallery_ids, distractor)?;
    let mut total = 0.0;
    for (r, q) in rankings.iter().zip(query_ids) {
        let (mut found, mut sum) = (0usize, 0.0);
        for (i, rel) in relevance(r, q, gallery_ids, distractor).into_iter().enumerate() {
            if rel {
                found += 1;
                sum += found as f64 / (i + 1) as f64;
            }
        }
        total += sum / found as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// Rank-1 accuracy, CMC and mAP of one query set against one gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl Scores {
    pub fn rank1(&self) -> f64 {
        self.cmc[0]
    }
}

pub fn score(gallery: &DescriptorMatrix, query: &DescriptorMatrix) -> Result<Scores> {
    if gallery.dim() != query.dim() {
        return Err(Error::Data(format!(
            "descriptor dimension mismatch: gallery has {}, query has {}",
            gallery.dim(),
            query.dim()
        )));
    }
    let rankings = (0..query.len())
        .map(|i| rank_gallery(query.row(i), gallery))
        .collect::<Result<Vec<_>>>()?;
    let ids = query.identities();
    Ok(Scores {
        cmc: cmc_curve(&rankings, ids, gallery.identities(), gallery.is_distractor())?,
        map: map_score(&rankings, ids, gallery.identities(), gallery.is_distractor())?,
    })
}
