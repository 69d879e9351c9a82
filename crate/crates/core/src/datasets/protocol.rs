//! Identity-disjoint train/test splits and gallery/query construction.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Aspect, ManifestRecord};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::seed;

fn chunks(s: &str) -> impl Iterator<Item = &str> {
    let mut rest = s;
    std::iter::from_fn(move || {
        let first = rest.chars().next()?;
        let digit = first.is_ascii_digit();
        let end = rest
            .find(|c: char| c.is_ascii_digit() != digit)
            .unwrap_or(rest.len());
        let (head, tail) = rest.split_at(end);
        rest = tail;
        Some(head)
    })
}

/// Numeric-aware ordering: digit runs compare as numbers, everything else
/// lexicographically ("2" < "10", "id9" < "id10").
pub fn compare_identities(a: &str, b: &str) -> Ordering {
    let mut xa = chunks(a);
    let mut xb = chunks(b);
    loop {
        match (xa.next(), xb.next()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(p), Some(q)) => {
                let both_digits = p.as_bytes()[0].is_ascii_digit() && q.as_bytes()[0].is_ascii_digit();
                let ord = if both_digits {
                    let (tp, tq) = (p.trim_start_matches('0'), q.trim_start_matches('0'));
                    tp.len().cmp(&tq.len()).then_with(|| tp.cmp(tq))
                } else {
                    p.cmp(q)
                };
                if ord != Ordering::Equal {
                    return ord;
                }
            }
        }
    }
}

/// Records grouped by identity, identities in numeric-aware order, records
/// in manifest order.
pub fn group_by_identity<'a>(records: impl IntoIterator<Item = &'a ManifestRecord>) -> Vec<(String, Vec<ManifestRecord>)> {
    let mut map: BTreeMap<String, Vec<ManifestRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.identity.clone()).or_default().push(r.clone());
    }
    let mut groups: Vec<_> = map.into_iter().collect();
    groups.sort_by(|a, b| compare_identities(&a.0, &b.0));
    groups
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentitySplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Records of one sub-dataset: the requested aspect, no accessories, no
/// distractors.
pub fn sub_dataset(records: &[ManifestRecord], aspect: Aspect) -> Vec<ManifestRecord> {
    records
        .iter()
        .filter(|r| r.aspect == aspect && !r.has_accessories && !r.is_distractor())
        .cloned()
        .collect()
}

/// First half of the ordered identities trains (rounded up), second half
/// tests.
pub fn filter_and_split(records: &[ManifestRecord], aspect: Aspect) -> Result<IdentitySplit> {
    let subset = sub_dataset(records, aspect);
    let ids: Vec<String> = group_by_identity(&subset).into_iter().map(|(id, _)| id).collect();
    if ids.len() < 2 {
        return Err(Error::Data(format!(
            "aspect {aspect}: need at least 2 identities after filtering, found {}",
            ids.len()
        )));
    }
    let cut = ids.len().div_ceil(2);
    Ok(IdentitySplit {
        train: ids[..cut].to_vec(),
        test: ids[cut..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryQuery {
    pub gallery: Vec<ManifestRecord>,
    /// Query records per sub-dataset, in input order.
    pub queries: Vec<(Aspect, Vec<ManifestRecord>)>,
}

/// One uniformly drawn image per test identity of every sub-dataset enters
/// a common gallery; the rest become that sub-dataset's queries.
/// Distractors are appended to the gallery.
pub fn build_gallery_query(
    test_sets: &[(Aspect, Vec<ManifestRecord>)],
    rng: &mut impl Rng,
    distractors: &[ManifestRecord],
) -> Result<GalleryQuery> {
    let mut gallery = Vec::new();
    let mut queries = Vec::with_capacity(test_sets.len());
    for (aspect, records) in test_sets {
        let mut query = Vec::new();
        for (id, mut imgs) in group_by_identity(records) {
            if imgs.len() < 2 {
                return Err(Error::Data(format!(
                    "test identity {id:?} ({aspect}) has a single image; it cannot be both gallery and query"
                )));
            }
            let pick = rng.random_range(0..imgs.len());
            gallery.push(imgs.remove(pick));
            query.extend(imgs);
        }
        queries.push((*aspect, query));
    }
    gallery.extend(distractors.iter().cloned());
    Ok(GalleryQuery { gallery, queries })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    /// Sub-dataset whose train/query sets the protocol describes.
    pub target: Aspect,
    /// Sub-datasets whose test identities share one gallery. Must include
    /// `target`.
    pub gallery_aspects: Vec<Aspect>,
}

impl ProtocolConfig {
    pub fn single(aspect: Aspect) -> Self {
        Self {
            target: aspect,
            gallery_aspects: vec![aspect],
        }
    }
}

/// Materialized lists for one repetition of one sub-dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub aspect: Aspect,
    pub repetition: usize,
    pub repetition_seed: u64,
    pub train: Vec<ManifestRecord>,
    pub validation: Vec<ManifestRecord>,
    pub gallery: Vec<ManifestRecord>,
    pub query: Vec<ManifestRecord>,
}

impl EvalProtocol {
    /// Training identities in numeric-aware order; a record's class index is
    /// its identity's position here.
    pub fn classes(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .train
            .iter()
            .chain(&self.validation)
            .map(|r| r.identity.clone())
            .collect();
        ids.sort_by(|a, b| compare_identities(a, b));
        ids.dedup();
        ids
    }
}

/// `n_reps` protocols over one fixed identity split. Each repetition
/// re-draws the gallery image per test identity and the validation image
/// per training identity from a seed derived from `master_seed`.
///
/// Training identities with a single image keep it for training and get no
/// validation image.
pub fn make_repetitions(
    records: &[ManifestRecord],
    config: &ProtocolConfig,
    n_reps: usize,
    master_seed: u64,
) -> Result<Vec<EvalProtocol>> {
    if n_reps == 0 {
        return Err(Error::invalid("make_repetitions", "need at least one repetition"));
    }
    if !config.gallery_aspects.contains(&config.target) {
        return Err(Error::invalid("make_repetitions", "gallery aspects must include the target"));
    }
    let mut test_sets = Vec::new();
    let mut target_train = Vec::new();
    for &aspect in &config.gallery_aspects {
        let split = filter_and_split(records, aspect)?;
        let subset = sub_dataset(records, aspect);
        let test: Vec<ManifestRecord> = subset
            .iter()
            .filter(|r| split.test.contains(&r.identity))
            .cloned()
            .collect();
        test_sets.push((aspect, test));
        if aspect == config.target {
            target_train = subset
                .into_iter()
                .filter(|r| split.train.contains(&r.identity))
                .collect();
        }
    }
    let distractors: Vec<ManifestRecord> = records.iter().filter(|r| r.is_distractor()).cloned().collect();
    let train_groups = group_by_identity(&target_train);

    (0..n_reps)
        .map(|rep| {
            let rep_seed = seed::derive(master_seed, "repetition", rep as u64);
            let mut grng = seed::rng(rep_seed, "gallery", 0);
            let gq = build_gallery_query(&test_sets, &mut grng, &distractors)?;
            let query = gq
                .queries
                .into_iter()
                .find(|(a, _)| *a == config.target)
                .map(|(_, q)| q)
                .unwrap_or_default();
            let mut vrng = seed::rng(rep_seed, "validation", 0);
            let mut train = Vec::new();
            let mut validation = Vec::new();
            for (_, imgs) in &train_groups {
                let mut imgs = imgs.clone();
                if imgs.len() >= 2 {
                    let pick = vrng.random_range(0..imgs.len());
                    validation.push(imgs.remove(pick));
                }
                train.extend(imgs);
            }
            Ok(EvalProtocol {
                aspect: config.target,
                repetition: rep,
                repetition_seed: rep_seed,
                train,
                validation,
                gallery: gq.gallery,
                query,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ProtocolFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<String>,
    protocols: Vec<EvalProtocol>,
}

/// JSON protocol list, optionally carrying the configuration that produced
/// it.
pub fn write_protocols(path: &Path, protocols: &[EvalProtocol], config: Option<&str>) -> Result<()> {
    let file = ProtocolFile {
        config: config.map(str::to_string),
        protocols: protocols.to_vec(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Data(e.to_string()))? + "\n";
    write_atomic(path, text.as_bytes())
}

pub fn read_protocols(path: &Path) -> Result<Vec<EvalProtocol>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str::<ProtocolFile>(&text)
        .map(|f| f.protocols)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line() as u64,
            msg: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// `ids` identities of `aspect`, `per_id` images each.
    fn synthetic(aspect: Aspect, ids: usize, per_id: usize) -> Vec<ManifestRecord> {
        (1..=ids)
            .flat_map(|i| {
                (0..per_id).map(move |j| ManifestRecord::new(format!("{aspect}/{i}_{j}.ppm"), i.to_string(), aspect))
            })
            .collect()
    }

    #[test]
    fn natural_identity_order() {
        let mut ids = vec!["10", "9", "100", "002", "a10", "a9", "b"];
        ids.sort_by(|a, b| compare_identities(a, b));
        assert_eq!(ids, vec!["002", "9", "10", "100", "a9", "a10", "b"]);
    }

    #[test]
    fn split_counts() {
        for (n, train, test) in [(143, 72, 71), (151, 76, 75), (2, 1, 1), (146, 73, 73)] {
            let s = filter_and_split(&synthetic(Aspect::DorsalRight, n, 1), Aspect::DorsalRight).unwrap();
            assert_eq!((s.train.len(), s.test.len()), (train, test));
        }
        assert!(filter_and_split(&synthetic(Aspect::DorsalRight, 1, 3), Aspect::DorsalRight).is_err());
    }

    #[test]
    fn split_follows_numeric_order_and_filters() {
        let mut recs = synthetic(Aspect::PalmarLeft, 12, 2);
        recs.extend(synthetic(Aspect::DorsalLeft, 3, 2));
        let mut acc = ManifestRecord::new("acc.ppm", "99", Aspect::PalmarLeft);
        acc.has_accessories = true;
        recs.push(acc);
        let s = filter_and_split(&recs, Aspect::PalmarLeft).unwrap();
        assert_eq!(s.train, (1..=6).map(|i| i.to_string()).collect::<Vec<_>>());
        assert_eq!(s.test, (7..=12).map(|i| i.to_string()).collect::<Vec<_>>());
    }

    #[test]
    fn two_image_identity_goes_one_each_way() {
        let recs = vec![
            ManifestRecord::new("a", "1", Aspect::None),
            ManifestRecord::new("b", "1", Aspect::None),
        ];
        let run = |s| build_gallery_query(&[(Aspect::None, recs.clone())], &mut ChaCha8Rng::seed_from_u64(s), &[]).unwrap();
        let gq = run(3);
        assert_eq!(gq.gallery.len(), 1);
        assert_eq!(gq.queries[0].1.len(), 1);
        assert_ne!(gq.gallery[0], gq.queries[0].1[0]);
        assert_eq!(gq, run(3));
    }

    #[test]
    fn single_image_test_identity_is_named() {
        let recs = vec![ManifestRecord::new("a", "lonely", Aspect::None)];
        let err = build_gallery_query(&[(Aspect::None, recs)], &mut ChaCha8Rng::seed_from_u64(0), &[])
            .unwrap_err()
            .to_string();
        assert!(err.contains("lonely"), "{err}");
    }

    #[test]
    fn repetitions_share_split_and_redraw_choices() {
        let recs = synthetic(Aspect::None, 24, 4);
        let reps = make_repetitions(&recs, &ProtocolConfig::single(Aspect::None), 10, 42).unwrap();
        assert_eq!(reps.len(), 10);
        let classes = reps[0].classes();
        assert_eq!(classes.len(), 12);
        for p in &reps {
            assert_eq!(p.classes(), classes);
            assert_eq!(p.validation.len(), 12);
            assert_eq!(p.train.len(), 12 * 3);
            assert_eq!(p.gallery.len(), 12);
            assert_eq!(p.query.len(), 12 * 3);
        }
        assert_eq!(reps, make_repetitions(&recs, &ProtocolConfig::single(Aspect::None), 10, 42).unwrap());
        assert!(reps.windows(2).all(|w| w[0].gallery != w[1].gallery));
    }

    #[test]
    fn repetition_gallery_redraws_are_near_certain() {
        // With 10 identities of 3 images, two repetitions pick identical
        // galleries with probability 3^-10; over 200 seeds none should.
        let recs = synthetic(Aspect::None, 20, 3);
        let cfg = ProtocolConfig::single(Aspect::None);
        let same = (0..200u64)
            .filter(|&s| {
                let r = make_repetitions(&recs, &cfg, 2, s).unwrap();
                r[0].gallery == r[1].gallery
            })
            .count();
        assert!(same as f64 / 200.0 < 0.01);
    }

    #[test]
    fn common_gallery_across_aspects() {
        let aspects = [Aspect::DorsalRight, Aspect::DorsalLeft, Aspect::PalmarRight, Aspect::PalmarLeft];
        let mut recs = Vec::new();
        for (a, n) in aspects.iter().zip([143, 146, 143, 151]) {
            recs.extend(synthetic(*a, n, 3));
        }
        let cfg = ProtocolConfig { target: Aspect::PalmarRight, gallery_aspects: aspects.to_vec() };
        let p = &make_repetitions(&recs, &cfg, 1, 1).unwrap()[0];
        assert_eq!(p.gallery.len(), 290);
        assert_eq!(p.query.len(), 71 * 2);
        assert!(p.query.iter().all(|r| r.aspect == Aspect::PalmarRight));
        let keys: HashSet<String> = p.gallery.iter().map(|r| r.match_key()).collect();
        assert_eq!(keys.len(), 290);
    }

    #[test]
    fn protocol_file_round_trip() {
        let recs = synthetic(Aspect::None, 6, 3);
        let reps = make_repetitions(&recs, &ProtocolConfig::single(Aspect::None), 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        write_protocols(&path, &reps, Some("seed = 1")).unwrap();
        assert_eq!(read_protocols(&path).unwrap(), reps);
    }

    fn arb_manifest() -> impl Strategy<Value = Vec<ManifestRecord>> {
        (2usize..30, 2usize..5, 0usize..8, any::<u64>()).prop_map(|(ids, per_id, distractors, salt)| {
            let mut recs = Vec::new();
            for i in 0..ids {
                let n = per_id + (salt as usize >> (i % 16)) % 3;
                for j in 0..n {
                    recs.push(ManifestRecord::new(format!("{i}_{j}"), format!("s{}", (i * 7 + salt as usize) % 1000), Aspect::None));
                }
            }
            recs.sort_by(|a, b| a.image_path.cmp(&b.image_path));
            recs.dedup_by(|a, b| a.image_path == b.image_path);
            for d in 0..distractors {
                let mut r = ManifestRecord::new(format!("d{d}"), format!("x{d}"), Aspect::None);
                r.extra_tags.insert("distractor".into());
                recs.push(r);
            }
            recs
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn protocols_are_identity_disjoint(recs in arb_manifest(), seed in any::<u64>()) {
            let cfg = ProtocolConfig::single(Aspect::None);
            let n_ids = group_by_identity(&sub_dataset(&recs, Aspect::None)).len();
            prop_assume!(n_ids >= 2);
            let p = &make_repetitions(&recs, &cfg, 1, seed).unwrap()[0];
            let train: HashSet<&str> = p.train.iter().chain(&p.validation).map(|r| r.identity.as_str()).collect();
            let test: HashSet<&str> = p.gallery.iter().filter(|r| !r.is_distractor()).chain(&p.query).map(|r| r.identity.as_str()).collect();
            prop_assert!(train.is_disjoint(&test));
            let distractors = recs.iter().filter(|r| r.is_distractor()).count();
            let test_ids = n_ids - n_ids.div_ceil(2);
            prop_assert_eq!(p.gallery.len(), test_ids + distractors);
            for q in &p.query {
                let hits = p.gallery.iter().filter(|g| !g.is_distractor() && g.match_key() == q.match_key()).count();
                prop_assert_eq!(hits, 1);
            }
        }
    }
}
