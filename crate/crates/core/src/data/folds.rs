use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Label, Record};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest allowed gap between a fold's Cancer share and the global share.
pub const MAX_PROPORTION_GAP: f64 = 0.05;
/// A subject above this share of its class makes balance hard to reach.
pub const DOMINANT_SUBJECT_SHARE: f64 = 0.35;
/// The greedy pass is refined by local search above this gap.
const REFINE_ABOVE: f64 = 0.02;

/// Which fold every non-test subject belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of_subject: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Row {
    subject_id: String,
    fold: usize,
}

struct Subject {
    id: String,
    label: Label,
    count: usize,
}

/// Per-fold image counts `[normal, cancer]`.
fn fold_counts(subjects: &[Subject], fold: &[usize], k: usize) -> Vec<[usize; 2]> {
    let mut c = vec![[0usize; 2]; k];
    for (s, &f) in subjects.iter().zip(fold) {
        c[f][s.label.index()] += s.count;
    }
    c
}

/// (largest gap, sum of squared gaps) between fold and global Cancer shares.
fn imbalance(counts: &[[usize; 2]], global: f64) -> (f64, f64) {
    let mut worst = 0.0f64;
    let mut sq = 0.0;
    for c in counts {
        let total = c[0] + c[1];
        let gap = if total == 0 {
            1.0
        } else {
            (c[1] as f64 / total as f64 - global).abs()
        };
        worst = worst.max(gap);
        sq += gap * gap;
    }
    (worst, sq)
}

/// Subject-level stratified split into `k` folds.
///
/// Each class is shuffled, ordered by descending image count (the shuffle
/// breaks ties) and dealt greedily to the fold holding the fewest images of
/// that class. If a fold's Cancer share then strays from the global share, a
/// local search over single moves and pairwise swaps narrows the gap.
pub fn split_folds(manifest: &DatasetManifest, k: usize, rng: &mut Rng) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let mut subjects = Vec::new();
    for label in Label::ALL {
        let mut group: Vec<Subject> = manifest
            .subjects(false)
            .into_iter()
            .filter(|(_, (l, _))| *l == label)
            .map(|(id, (label, count))| Subject { id, label, count })
            .collect();
        if group.len() < k {
            return Err(Error::Data(format!(
                "{} {label} subjects cannot fill {k} folds",
                group.len()
            )));
        }
        let class_total: usize = group.iter().map(|s| s.count).sum();
        for s in &group {
            if s.count as f64 > DOMINANT_SUBJECT_SHARE * class_total as f64 {
                log::warn!(
                    "subject {} holds {} of {} {label} images; fold balance is best effort",
                    s.id,
                    s.count,
                    class_total
                );
            }
        }
        rng.shuffle(&mut group);
        group.sort_by_key(|g| std::cmp::Reverse(g.count));
        subjects.extend(group);
    }

    let mut fold = vec![0usize; subjects.len()];
    let mut counts = vec![[0usize; 2]; k];
    let mut members = vec![0usize; k];
    for (i, s) in subjects.iter().enumerate() {
        let c = s.label.index();
        let f = (0..k)
            .min_by_key(|&f| (counts[f][c], members[f], f))
            .expect("k >= 2");
        fold[i] = f;
        counts[f][c] += s.count;
        members[f] += 1;
    }

    let total: usize = subjects.iter().map(|s| s.count).sum();
    let cancer: usize = subjects
        .iter()
        .filter(|s| s.label == Label::Cancer)
        .map(|s| s.count)
        .sum();
    let global = cancer as f64 / total as f64;
    refine(&subjects, &mut fold, k, global);

    let (worst, _) = imbalance(&fold_counts(&subjects, &fold, k), global);
    if worst > MAX_PROPORTION_GAP {
        log::warn!(
            "fold class proportions differ from the global share by up to {:.1} points",
            100.0 * worst
        );
    }
    Ok(FoldAssignment {
        k,
        fold_of_subject: subjects
            .into_iter()
            .zip(fold)
            .map(|(s, f)| (s.id, f))
            .collect(),
    })
}

fn refine(subjects: &[Subject], fold: &mut [usize], k: usize, global: f64) {
    let mut members = vec![0usize; k];
    for &f in fold.iter() {
        members[f] += 1;
    }
    let mut score = imbalance(&fold_counts(subjects, fold, k), global);
    for _ in 0..10_000 {
        if score.0 <= REFINE_ABOVE {
            return;
        }
        let mut best: Option<(f64, f64, Vec<(usize, usize)>)> = None;
        let mut consider = |fold: &mut [usize], changes: Vec<(usize, usize)>| {
            let saved: Vec<(usize, usize)> = changes.iter().map(|&(i, _)| (i, fold[i])).collect();
            for &(i, f) in &changes {
                fold[i] = f;
            }
            let s = imbalance(&fold_counts(subjects, fold, k), global);
            for &(i, f) in &saved {
                fold[i] = f;
            }
            let better = match &best {
                Some((w, q, _)) => (s.0, s.1) < (*w, *q),
                None => (s.0, s.1) < score,
            };
            if better {
                best = Some((s.0, s.1, changes));
            }
        };
        for i in 0..subjects.len() {
            for f in 0..k {
                if f != fold[i] && members[fold[i]] > 1 {
                    consider(fold, vec![(i, f)]);
                }
            }
        }
        for i in 0..subjects.len() {
            for j in i + 1..subjects.len() {
                if fold[i] != fold[j] {
                    let (fi, fj) = (fold[i], fold[j]);
                    consider(fold, vec![(i, fj), (j, fi)]);
                }
            }
        }
        match best {
            Some((w, q, changes)) => {
                for (i, f) in changes {
                    members[fold[i]] -= 1;
                    members[f] += 1;
                    fold[i] = f;
                }
                score = (w, q);
            }
            None => return,
        }
    }
}

/// Summary of an assignment checked against its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    /// `[normal, cancer]` image counts per fold.
    pub counts: Vec<[usize; 2]>,
    /// Largest gap between a fold's Cancer share and the global share.
    pub max_gap: f64,
}

impl FoldAssignment {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.fold_of_subject.get(subject).copied()
    }

    /// Check every invariant against `manifest`: each non-test subject in
    /// exactly one fold, no test subject in a fold, non-empty folds and class
    /// shares within the allowed gap.
    pub fn check(&self, manifest: &DatasetManifest) -> Result<FoldReport> {
        let train = manifest.subjects(false);
        for r in manifest.records.iter().filter(|r| r.is_test) {
            if self.fold_of_subject.contains_key(&r.subject_id) {
                return Err(Error::Data(format!(
                    "test subject {} appears in a fold",
                    r.subject_id
                )));
            }
        }
        for (s, &f) in &self.fold_of_subject {
            if f >= self.k {
                return Err(Error::Data(format!(
                    "subject {s} has fold {f} ≥ k = {}",
                    self.k
                )));
            }
            if !train.contains_key(s) {
                return Err(Error::Data(format!(
                    "fold subject {s} has no training images"
                )));
            }
        }
        let mut counts = vec![[0usize; 2]; self.k];
        for (s, (label, n)) in &train {
            let f = self
                .fold_of(s)
                .ok_or_else(|| Error::Data(format!("subject {s} has no fold")))?;
            counts[f][label.index()] += n;
        }
        if let Some(f) = counts.iter().position(|c| c[0] + c[1] == 0) {
            return Err(Error::Data(format!("fold {f} is empty")));
        }
        let total: usize = counts.iter().map(|c| c[0] + c[1]).sum();
        let cancer: usize = counts.iter().map(|c| c[1]).sum();
        let (max_gap, _) = imbalance(&counts, cancer as f64 / total as f64);
        Ok(FoldReport { counts, max_gap })
    }

    /// Training records of fold `f`.
    pub fn fold_records<'a>(&self, manifest: &'a DatasetManifest, f: usize) -> Vec<&'a Record> {
        manifest
            .records
            .iter()
            .filter(|r| !r.is_test && self.fold_of(&r.subject_id) == Some(f))
            .collect()
    }

    /// Training records outside fold `val`.
    pub fn train_records<'a>(&self, manifest: &'a DatasetManifest, val: usize) -> Vec<&'a Record> {
        manifest
            .records
            .iter()
            .filter(|r| !r.is_test && self.fold_of(&r.subject_id).is_some_and(|f| f != val))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path)?;
        for (s, &f) in &self.fold_of_subject {
            wr.serialize(Row {
                subject_id: s.clone(),
                fold: f,
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Read `subject_id,fold` rows; `k` is one more than the largest fold.
    pub fn load(path: &Path) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut map = BTreeMap::new();
        for row in rd.deserialize() {
            let row: Row = row?;
            if map.insert(row.subject_id.clone(), row.fold).is_some() {
                return Err(Error::Data(format!(
                    "subject {} listed twice",
                    row.subject_id
                )));
            }
        }
        let k = map.values().max().map_or(0, |m| m + 1);
        Ok(Self {
            k,
            fold_of_subject: map,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(spec: &[(&str, Label, usize)]) -> DatasetManifest {
        let mut recs = Vec::new();
        for (s, l, n) in spec {
            for i in 0..*n {
                recs.push(Record {
                    subject_id: s.to_string(),
                    label: *l,
                    path: format!("{s}/{i}.png"),
                    is_test: false,
                });
            }
        }
        DatasetManifest::new(recs, "").unwrap()
    }

    #[test]
    fn symmetric_case() {
        let spec: Vec<(String, Label, usize)> = (0..8)
            .map(|i| (format!("n{i}"), Label::Normal, 10))
            .chain((0..8).map(|i| (format!("c{i}"), Label::Cancer, 10)))
            .collect();
        let spec: Vec<(&str, Label, usize)> =
            spec.iter().map(|(s, l, n)| (s.as_str(), *l, *n)).collect();
        let m = manifest(&spec);
        let a = split_folds(&m, 4, &mut Rng::new(1)).unwrap();
        let rep = a.check(&m).unwrap();
        assert!(rep.counts.iter().all(|c| *c == [20, 20]));
        assert_eq!(rep.max_gap, 0.0);
    }

    #[test]
    fn too_few_subjects() {
        let m = manifest(&[("a", Label::Normal, 3), ("b", Label::Cancer, 3)]);
        assert!(matches!(
            split_folds(&m, 4, &mut Rng::new(0)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn save_load() {
        let spec: Vec<(String, Label, usize)> = (0..4)
            .flat_map(|i| {
                [
                    (format!("n{i}"), Label::Normal, 5 + i),
                    (format!("c{i}"), Label::Cancer, 9 + i),
                ]
            })
            .collect();
        let spec: Vec<(&str, Label, usize)> =
            spec.iter().map(|(s, l, n)| (s.as_str(), *l, *n)).collect();
        let m = manifest(&spec);
        let a = split_folds(&m, 4, &mut Rng::new(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("folds.csv");
        a.save(&p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("subject_id,fold\n"));
        assert_eq!(FoldAssignment::load(&p).unwrap(), a);
    }
}
