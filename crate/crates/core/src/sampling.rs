//! Multi-label stratified k-fold splitting and up-sampling plans.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{LabelMatrix, SampleRecord};
use crate::io::{csv_bytes, csv_reader, write_atomic};
use crate::seeds;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    fold_of: IndexMap<String, usize>,
}

impl FoldAssignment {
    pub fn new(k: usize, fold_of: IndexMap<String, usize>) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("fold count must be >= 2, got {k}")));
        }
        if let Some((id, f)) = fold_of.iter().find(|(_, &f)| f >= k) {
            return Err(Error::InvalidArgument(format!(
                "sample {id:?} assigned to fold {f} outside 0..{k}"
            )));
        }
        Ok(Self { k, fold_of })
    }

    /// Pairs sample ids with a fold vector from [`stratified_kfold`].
    pub fn from_folds(k: usize, sample_ids: &[String], folds: &[usize]) -> Result<Self> {
        if sample_ids.len() != folds.len() {
            return Err(Error::Shape {
                context: "fold assignment",
                expected: sample_ids.len(),
                found: folds.len(),
            });
        }
        let mut fold_of = IndexMap::with_capacity(folds.len());
        for (id, &f) in sample_ids.iter().zip(folds) {
            if fold_of.insert(id.clone(), f).is_some() {
                return Err(Error::DuplicateSample(id.clone()));
            }
        }
        Self::new(k, fold_of)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.fold_of.get(sample_id).copied()
    }

    pub fn len(&self) -> usize {
        self.fold_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fold_of.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.fold_of.iter().map(|(id, &f)| (id.as_str(), f))
    }

    /// Sample ids in fold `fold`, in assignment order.
    pub fn members(&self, fold: usize) -> Vec<String> {
        self.iter()
            .filter(|&(_, f)| f == fold)
            .map(|(id, _)| id.to_string())
            .collect()
    }

    /// Sample ids outside fold `fold`, in assignment order.
    pub fn complement(&self, fold: usize) -> Vec<String> {
        self.iter()
            .filter(|&(_, f)| f != fold)
            .map(|(id, _)| id.to_string())
            .collect()
    }

    /// Adds every replica of `plan` to the fold of its source sample.
    pub fn with_replicas(&self, plan: &UpsamplePlan) -> Result<FoldAssignment> {
        let mut fold_of = self.fold_of.clone();
        for e in &plan.entries {
            let fold = self.fold_of(&e.source_id).ok_or_else(|| Error::MissingSample {
                model: "folds".into(),
                sample: e.source_id.clone(),
            })?;
            if fold_of.insert(e.replica_id(), fold).is_some() {
                return Err(Error::DuplicateSample(e.replica_id()));
            }
        }
        Self::new(self.k, fold_of)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        csv_bytes(Path::new("<folds>"), |w| {
            w.write_record(["sample_id", "fold"])?;
            for (id, f) in self.iter() {
                w.write_record([id, &f.to_string()])?;
            }
            Ok(())
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }

    /// Reads a `sample_id,fold` CSV; `k` is one more than the largest fold index.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rows = csv_reader(path)?.into_records();
        match rows.next() {
            Some(Ok(h)) if h.len() == 2 => {}
            _ => return Err(Error::Schema(format!("{}: expected sample_id,fold header", path.display()))),
        }
        let mut fold_of = IndexMap::new();
        for row in rows {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let fold: usize = row[1]
                .parse()
                .map_err(|_| Error::Schema(format!("bad fold index {:?}", &row[1])))?;
            if fold_of.insert(row[0].to_string(), fold).is_some() {
                return Err(Error::DuplicateSample(row[0].to_string()));
            }
        }
        let k = fold_of.values().max().map_or(0, |m| m + 1);
        Self::new(k, fold_of)
    }
}

/// Iterative stratification over a samples × labels binary matrix.
///
/// Every fold desires `n/k` samples overall and `count_l/k` positives of each
/// label `l`. Until all labelled samples are placed, the label with the fewest
/// remaining unassigned positives is taken (lowest column on ties), and its
/// samples, in seeded shuffled order, each go to the fold with the largest
/// remaining desire for that label. Ties fall to the fold with the largest
/// remaining overall desire (the smallest fold), then to the fold with the
/// largest summed desire over the sample's other labels, then to a seeded
/// random choice. Unlabelled samples are dealt to the smallest fold last.
/// A final swap pass ([`rebalance`]) evens out labels the greedy left
/// uneven.
///
/// Returns the fold index of every row.
pub fn stratified_kfold(targets: ArrayView2<'_, u8>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let (n, n_labels) = targets.dim();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("fold count must be >= 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "fold count {k} exceeds sample count {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut fold_of: Vec<Option<usize>> = vec![None; n];
    let mut desired: Vec<f64> = vec![n as f64 / k as f64; k];
    let mut desired_label: Vec<Vec<f64>> = (0..n_labels)
        .map(|l| {
            let count = targets.column(l).iter().filter(|&&v| v > 0).count();
            vec![count as f64 / k as f64; k]
        })
        .collect();
    let mut remaining: Vec<usize> = (0..n_labels)
        .map(|l| targets.column(l).iter().filter(|&&v| v > 0).count())
        .collect();

    let labels_of = |i: usize| -> Vec<usize> {
        (0..n_labels).filter(|&l| targets[[i, l]] > 0).collect()
    };

    loop {
        let next = (0..n_labels)
            .filter(|&l| remaining[l] > 0)
            .min_by_key(|&l| (remaining[l], l));
        let Some(label) = next else { break };

        let mut pool: Vec<usize> = (0..n)
            .filter(|&i| fold_of[i].is_none() && targets[[i, label]] > 0)
            .collect();
        pool.shuffle(&mut rng);

        for i in pool {
            let own = labels_of(i);
            let fold = pick_fold(&mut rng, k, |f| {
                let others: f64 = own
                    .iter()
                    .filter(|&&l| l != label)
                    .map(|&l| desired_label[l][f])
                    .sum();
                [desired_label[label][f], desired[f], others]
            });
            fold_of[i] = Some(fold);
            desired[fold] -= 1.0;
            for &l in &own {
                desired_label[l][fold] -= 1.0;
                remaining[l] -= 1;
            }
        }
    }

    let mut rest: Vec<usize> = (0..n).filter(|&i| fold_of[i].is_none()).collect();
    rest.shuffle(&mut rng);
    for i in rest {
        let fold = pick_fold(&mut rng, k, |f| [desired[f], 0.0, 0.0]);
        fold_of[i] = Some(fold);
        desired[fold] -= 1.0;
    }

    let mut folds: Vec<usize> = fold_of.into_iter().map(|f| f.expect("every sample placed")).collect();
    rebalance(targets, &mut folds, k);
    Ok(folds)
}

/// Swaps pairs of samples between folds while a swap lowers
/// `Σ_label Σ_fold count²`, which keeps fold sizes and evens out per-label
/// positives where the greedy pass left co-occurring labels uneven. The best
/// swap is taken each round; ties keep the first found, so the result is
/// deterministic.
fn rebalance(targets: ArrayView2<'_, u8>, folds: &mut [usize], k: usize) {
    let n_labels = targets.ncols();
    let mut counts = vec![vec![0i64; k]; n_labels];
    // samples of every fold grouped by label pattern
    let mut groups: Vec<BTreeMap<Vec<u8>, Vec<usize>>> = vec![BTreeMap::new(); k];
    for (i, &f) in folds.iter().enumerate() {
        let pattern: Vec<u8> = targets.row(i).iter().map(|&v| u8::from(v > 0)).collect();
        for (l, &v) in pattern.iter().enumerate() {
            counts[l][f] += i64::from(v);
        }
        groups[f].entry(pattern).or_default().push(i);
    }
    // change in the objective when a sample with pattern `pa` leaves fold `a`
    // for `b` and one with `pb` goes the other way
    let delta = |counts: &[Vec<i64>], a: usize, b: usize, pa: &[u8], pb: &[u8]| -> i64 {
        (0..n_labels)
            .map(|l| match (pa[l], pb[l]) {
                (1, 0) => 2 * (counts[l][b] - counts[l][a] + 1),
                (0, 1) => 2 * (counts[l][a] - counts[l][b] + 1),
                _ => 0,
            })
            .sum()
    };
    loop {
        let mut best: Option<(i64, usize, usize, Vec<u8>, Vec<u8>)> = None;
        for a in 0..k {
            for b in a + 1..k {
                for pa in groups[a].keys() {
                    for pb in groups[b].keys() {
                        if pa == pb {
                            continue;
                        }
                        let d = delta(&counts, a, b, pa, pb);
                        if d < best.as_ref().map_or(0, |x| x.0) {
                            best = Some((d, a, b, pa.clone(), pb.clone()));
                        }
                    }
                }
            }
        }
        let Some((_, a, b, pa, pb)) = best else { break };
        let i = take(&mut groups[a], &pa);
        let j = take(&mut groups[b], &pb);
        for l in 0..n_labels {
            let (x, y) = (i64::from(pa[l]), i64::from(pb[l]));
            counts[l][a] += y - x;
            counts[l][b] += x - y;
        }
        folds[i] = b;
        folds[j] = a;
        groups[b].entry(pa).or_default().push(i);
        groups[a].entry(pb).or_default().push(j);
    }
}

fn take(groups: &mut BTreeMap<Vec<u8>, Vec<usize>>, pattern: &[u8]) -> usize {
    let members = groups.get_mut(pattern).expect("pattern present");
    let i = members.pop().expect("non-empty group");
    if members.is_empty() {
        groups.remove(pattern);
    }
    i
}

/// Lexicographic arg-max over a score triple with a seeded tie-break.
fn pick_fold<R: Rng, F: Fn(usize) -> [f64; 3]>(rng: &mut R, k: usize, score: F) -> usize {
    const EPS: f64 = 1e-9;
    let scores: Vec<[f64; 3]> = (0..k).map(&score).collect();
    let mut best: Vec<usize> = vec![0];
    for f in 1..k {
        let cmp = compare(&scores[f], &scores[best[0]], EPS);
        match cmp {
            std::cmp::Ordering::Greater => best = vec![f],
            std::cmp::Ordering::Equal => best.push(f),
            std::cmp::Ordering::Less => {}
        }
    }
    if best.len() == 1 {
        best[0]
    } else {
        best[rng.gen_range(0..best.len())]
    }
}

fn compare(a: &[f64; 3], b: &[f64; 3], eps: f64) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        if x - y > eps {
            return std::cmp::Ordering::Greater;
        }
        if y - x > eps {
            return std::cmp::Ordering::Less;
        }
    }
    std::cmp::Ordering::Equal
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpsampleEntry {
    pub source_id: String,
    pub replica_index: usize,
    pub aug_seed: u64,
}

impl UpsampleEntry {
    pub fn replica_id(&self) -> String {
        format!("{}__aug{}", self.source_id, self.replica_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpsamplePlan {
    pub entries: Vec<UpsampleEntry>,
}

impl UpsamplePlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replica records carrying the labels of their sources, without images.
    pub fn replica_records(&self, m: &LabelMatrix) -> Result<Vec<SampleRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let src = m.get(&e.source_id).ok_or_else(|| Error::MissingSample {
                    model: "manifest".into(),
                    sample: e.source_id.clone(),
                })?;
                Ok(SampleRecord {
                    sample_id: e.replica_id(),
                    image_path: src.image_path.clone(),
                    labels: src.labels.clone(),
                })
            })
            .collect()
    }

    /// The label matrix with every replica appended.
    pub fn materialize(&self, m: &LabelMatrix) -> Result<LabelMatrix> {
        m.extended(self.replica_records(m)?)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        csv_bytes(Path::new("<plan>"), |w| {
            w.write_record(["source_id", "replica_index", "aug_seed"])?;
            for e in &self.entries {
                w.write_record([
                    e.source_id.as_str(),
                    &e.replica_index.to_string(),
                    &e.aug_seed.to_string(),
                ])?;
            }
            Ok(())
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rows = csv_reader(path)?.into_records();
        match rows.next() {
            Some(Ok(h)) if h.len() == 3 => {}
            None => return Ok(Self::default()),
            _ => return Err(Error::Schema(format!("{}: bad plan header", path.display()))),
        }
        let mut entries = Vec::new();
        for row in rows {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let bad = || Error::Schema(format!("{}: bad plan row {:?}", path.display(), row));
            entries.push(UpsampleEntry {
                source_id: row[0].to_string(),
                replica_index: row[1].parse().map_err(|_| bad())?,
                aug_seed: row[2].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { entries })
    }
}

/// Greedy augmentation up-sampling until every occurring label reaches
/// `threshold` effective positives.
///
/// Labels are visited in ascending original count (lowest column first on
/// ties). For a label still below the threshold, its source samples are
/// shuffled with a seeded RNG and cycled, one replica at a time; a replica
/// counts toward every label of its source, and effective counts are updated
/// after each addition. Labels with no positives are skipped.
///
/// Augmentation seeds come from [`seeds::derive`] on the `UPSAMPLE` stream with
/// the plan position as index, so they are unique within a plan.
pub fn upsample_plan(m: &LabelMatrix, threshold: usize, seed: u64) -> UpsamplePlan {
    let labels = m.label_array();
    let (n, n_labels) = labels.dim();
    let mut effective: Vec<usize> = (0..n_labels)
        .map(|l| labels.column(l).iter().filter(|&&v| v > 0).count())
        .collect();
    let mut order: Vec<usize> = (0..n_labels).collect();
    order.sort_by_key(|&l| (effective[l], l));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replicas_of = vec![0usize; n];
    let mut entries = Vec::new();
    let records = m.records();

    for label in order {
        if effective[label] == 0 || effective[label] >= threshold {
            continue;
        }
        let mut sources: Vec<usize> = (0..n).filter(|&i| labels[[i, label]] > 0).collect();
        sources.shuffle(&mut rng);
        let mut cursor = 0;
        while effective[label] < threshold {
            let i = sources[cursor % sources.len()];
            cursor += 1;
            entries.push(UpsampleEntry {
                source_id: records[i].sample_id.clone(),
                replica_index: replicas_of[i],
                aug_seed: seeds::derive(seed, seeds::stream::UPSAMPLE, entries.len() as u64),
            });
            replicas_of[i] += 1;
            for l in 0..n_labels {
                effective[l] += labels[[i, l]] as usize;
            }
        }
    }
    debug_assert_eq!(
        entries.iter().map(|e| e.aug_seed).collect::<HashSet<_>>().len(),
        entries.len()
    );
    UpsamplePlan { entries }
}
