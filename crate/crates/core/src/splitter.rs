//! Respondent-disjoint train/calibration/test partitioning with guarded
//! stratification, plus partition-integrity verification.
//!
//! Splits stratify jointly on outcome×group so each partition sees every
//! cell in proportion. Thin strata are guarded: a joint stratum with
//! fewer than [`MIN_JOINT_STRATUM`] members merges into a fallback
//! stratum keyed by group only, and fallback strata still below
//! [`MIN_FALLBACK_STRATUM`] merge into one globally pooled stratum.
//! Within each stratum the partition sizes come from largest-remainder
//! apportionment of the fraction triple (ties broken in TRAIN, CAL,
//! TEST order), followed by a seeded shuffle — exact size control plus
//! randomness. Per-split seeds derive from the master seed through a
//! counter mix, so adding splits never perturbs earlier ones.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::SurveyDataset;
use crate::error::{AuditError, Result};
use crate::rng::counter_seed;

/// Joint outcome×group strata smaller than this merge into a
/// group-keyed fallback stratum.
pub const MIN_JOINT_STRATUM: usize = 3;
/// Fallback strata smaller than this merge into one global pool.
pub const MIN_FALLBACK_STRATUM: usize = 3;

/// Which partition a respondent lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Partition {
    Train,
    Cal,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Cal, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "TRAIN",
            Partition::Cal => "CAL",
            Partition::Test => "TEST",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "TRAIN" => Ok(Partition::Train),
            "CAL" => Ok(Partition::Cal),
            "TEST" => Ok(Partition::Test),
            other => Err(AuditError::Schema(format!("unknown partition '{other}'"))),
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One complete assignment of every respondent to a partition.
/// Entries stay in dataset row order, so serialization is canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub split_index: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub entries: Vec<(String, Partition)>,
}

impl SplitAssignment {
    /// Lookup map id → partition (first occurrence wins; duplicates are
    /// a corruption that [`verify_split`] reports).
    pub fn assignment_map(&self) -> HashMap<&str, Partition> {
        let mut m = HashMap::with_capacity(self.entries.len());
        for (id, p) in &self.entries {
            m.entry(id.as_str()).or_insert(*p);
        }
        m
    }

    /// Ids assigned to `part`, in dataset order.
    pub fn ids_in(&self, part: Partition) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| *p == part)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Realized (train, cal, test) sizes.
    pub fn sizes(&self) -> [usize; 3] {
        let mut s = [0usize; 3];
        for (_, p) in &self.entries {
            s[*p as usize] += 1;
        }
        s
    }
}

/// Largest-remainder apportionment of `m` members across the fraction
/// triple. Quotas within 1e-9 of an integer snap to it first, so exact
/// proportions never lose a unit to float drift; remaining units go to
/// the largest fractional remainders, ties resolved in (TRAIN, CAL,
/// TEST) order by sort stability.
fn apportion(m: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut alloc = [0usize; 3];
    let mut rem = [0f64; 3];
    for i in 0..3 {
        let mut q = m as f64 * fractions[i];
        if (q - q.round()).abs() < 1e-9 {
            q = q.round();
        }
        alloc[i] = q.floor() as usize;
        rem[i] = q - q.floor();
    }
    let assigned: usize = alloc.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rem[b].partial_cmp(&rem[a]).unwrap());
    for k in 0..m.saturating_sub(assigned) {
        alloc[order[k % 3]] += 1;
    }
    alloc
}

/// Build the guarded strata as lists of dataset row indices, in a
/// deterministic order: joint (group, outcome) strata sorted by key,
/// then group-keyed fallback strata, then the global pool.
fn guarded_strata(ds: &SurveyDataset) -> Vec<Vec<usize>> {
    let mut joint: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (row, r) in ds.respondents().iter().enumerate() {
        joint.entry((r.group, r.outcome)).or_default().push(row);
    }
    let mut strata = Vec::new();
    let mut fallback: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for ((g, _), rows) in joint {
        if rows.len() >= MIN_JOINT_STRATUM {
            strata.push(rows);
        } else {
            fallback.entry(g).or_default().extend(rows);
        }
    }
    let mut pool = Vec::new();
    for (_, rows) in fallback {
        if rows.len() >= MIN_FALLBACK_STRATUM {
            strata.push(rows);
        } else {
            pool.extend(rows);
        }
    }
    if !pool.is_empty() {
        strata.push(pool);
    }
    strata
}

fn validate_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| f.is_nan() || *f <= 0.0) {
        return Err(AuditError::Config(format!(
            "every partition fraction must be positive, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(AuditError::Config(format!(
            "partition fractions sum to {sum}, expected 1 within 1e-12"
        )));
    }
    Ok(())
}

/// Generate `n_splits` respondent-disjoint partitions of the dataset.
pub fn make_splits(
    ds: &SurveyDataset,
    n_splits: usize,
    fractions: [f64; 3],
    master_seed: u64,
) -> Result<Vec<SplitAssignment>> {
    validate_fractions(fractions)?;
    if n_splits < 1 {
        return Err(AuditError::Config("n_splits must be at least 1".into()));
    }
    if ds.len() < 3 {
        return Err(AuditError::Infeasible(format!(
            "dataset has {} respondents; at least 3 required",
            ds.len()
        )));
    }
    let strata = guarded_strata(ds);
    let mut splits = Vec::with_capacity(n_splits);
    for split_index in 0..n_splits {
        let seed = counter_seed(master_seed, split_index as u64);
        let mut parts = vec![Partition::Train; ds.len()];
        for (s_i, stratum) in strata.iter().enumerate() {
            let alloc = apportion(stratum.len(), fractions);
            let mut rows = stratum.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(counter_seed(seed, s_i as u64));
            rows.shuffle(&mut rng);
            for (j, &row) in rows.iter().enumerate() {
                parts[row] = if j < alloc[0] {
                    Partition::Train
                } else if j < alloc[0] + alloc[1] {
                    Partition::Cal
                } else {
                    Partition::Test
                };
            }
        }
        let entries = ds
            .respondents()
            .iter()
            .zip(&parts)
            .map(|(r, &p)| (r.id.clone(), p))
            .collect();
        splits.push(SplitAssignment {
            split_index,
            seed,
            fractions,
            entries,
        });
    }
    Ok(splits)
}

/// Smallest calibration cell in a split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinCalCell {
    pub group: String,
    pub count: usize,
}

/// Outcome of checking one split against its dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntegrityReport {
    pub split_index: usize,
    /// No respondent appears more than once.
    pub disjoint: bool,
    /// Every dataset id is assigned.
    pub complete: bool,
    pub max_assignments: usize,
    pub realized_sizes: [usize; 3],
    /// Ids assigned more than once (empty when disjoint).
    pub duplicate_ids: Vec<String>,
    /// Dataset ids missing from the assignment.
    pub missing_ids: Vec<String>,
    /// Smallest calibration cell over groups with at least one dataset
    /// member; None when no group has calibration members.
    pub min_cal_cell: Option<MinCalCell>,
}

impl IntegrityReport {
    pub fn ok(&self) -> bool {
        self.disjoint && self.complete && self.max_assignments == 1
    }
}

/// Recount a split from scratch: disjointness, coverage of all ids,
/// realized sizes, and the minimum calibration-cell count per group.
pub fn verify_split(ds: &SurveyDataset, split: &SplitAssignment) -> Result<IntegrityReport> {
    let mut seen: HashMap<&str, usize> = HashMap::with_capacity(split.entries.len());
    let mut sizes = [0usize; 3];
    let mut cal_counts = vec![0usize; ds.n_groups()];
    let mut present = vec![0usize; ds.n_groups()];
    for (id, p) in &split.entries {
        let r = ds.respondent(id).ok_or_else(|| {
            AuditError::Validation(format!("split references unknown id '{id}'"))
        })?;
        *seen.entry(id.as_str()).or_insert(0) += 1;
        sizes[*p as usize] += 1;
        if *p == Partition::Cal {
            cal_counts[r.group - 1] += 1;
        }
    }
    for r in ds.respondents() {
        present[r.group - 1] += 1;
    }
    let duplicate_ids: Vec<String> = {
        let mut d: Vec<String> = seen
            .iter()
            .filter(|(_, &n)| n > 1)
            .map(|(id, _)| id.to_string())
            .collect();
        d.sort();
        d
    };
    let missing_ids: Vec<String> = {
        let mut m: Vec<String> = ds
            .ids()
            .filter(|id| !seen.contains_key(id))
            .map(str::to_string)
            .collect();
        m.sort();
        m
    };
    let max_assignments = seen.values().copied().max().unwrap_or(0);
    let min_cal_cell = (0..ds.n_groups())
        .filter(|&g| present[g] > 0)
        .map(|g| (cal_counts[g], g))
        .min()
        .map(|(count, g)| MinCalCell {
            group: ds.group_labels()[g].clone(),
            count,
        });
    Ok(IntegrityReport {
        split_index: split.split_index,
        disjoint: duplicate_ids.is_empty(),
        complete: missing_ids.is_empty(),
        max_assignments,
        realized_sizes: sizes,
        duplicate_ids,
        missing_ids,
        min_cal_cell,
    })
}

/// Sidecar metadata accompanying the splits CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSidecar {
    pub master_seed: u64,
    pub fractions: [f64; 3],
    pub n_splits: usize,
    pub split_seeds: Vec<u64>,
    pub min_joint_stratum: usize,
    pub min_fallback_stratum: usize,
}

/// Write all splits to a CSV (`id,split_index,partition`) and a JSON
/// sidecar recording seeds, fractions, and the guard parameters.
pub fn save_splits(
    splits: &[SplitAssignment],
    master_seed: u64,
    csv_path: &Path,
    sidecar_path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["id", "split_index", "partition"])?;
    for s in splits {
        for (id, p) in &s.entries {
            w.write_record([id.as_str(), &s.split_index.to_string(), p.as_str()])?;
        }
    }
    w.flush()?;
    let sidecar = SplitSidecar {
        master_seed,
        fractions: splits.first().map(|s| s.fractions).unwrap_or([0.4, 0.3, 0.3]),
        n_splits: splits.len(),
        split_seeds: splits.iter().map(|s| s.seed).collect(),
        min_joint_stratum: MIN_JOINT_STRATUM,
        min_fallback_stratum: MIN_FALLBACK_STRATUM,
    };
    std::fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Load splits previously written by [`save_splits`].
pub fn load_splits(csv_path: &Path, sidecar_path: &Path) -> Result<Vec<SplitAssignment>> {
    let sidecar: SplitSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
    let mut reader = csv::Reader::from_path(csv_path)?;
    let mut by_index: BTreeMap<usize, Vec<(String, Partition)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record
            .get(0)
            .ok_or_else(|| AuditError::Schema("splits CSV: short record".into()))?;
        let idx: usize = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| AuditError::Schema("splits CSV: bad split_index".into()))?;
        let part = Partition::parse(record.get(2).unwrap_or(""))?;
        by_index.entry(idx).or_default().push((id.to_string(), part));
    }
    Ok(by_index
        .into_iter()
        .map(|(split_index, entries)| SplitAssignment {
            split_index,
            seed: sidecar.split_seeds.get(split_index).copied().unwrap_or(0),
            fractions: sidecar.fractions,
            entries,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RespondentRecord;

    fn dataset(outcomes_groups: &[(usize, usize)], k: usize, g: usize) -> SurveyDataset {
        let labels = (1..=g).map(|i| format!("G{i}")).collect();
        let respondents = outcomes_groups
            .iter()
            .enumerate()
            .map(|(i, &(outcome, group))| RespondentRecord {
                id: format!("r{i:05}"),
                outcome,
                group,
                weight: 1.0,
                covariates: None,
            })
            .collect();
        SurveyDataset::new(respondents, k, labels).unwrap()
    }

    #[test]
    fn apportion_handles_exact_and_fractional_quotas() {
        let f = [0.4, 0.3, 0.3];
        assert_eq!(apportion(10, f), [4, 3, 3]);
        assert_eq!(apportion(15, f), [6, 5, 4]); // CAL wins the remainder tie
        assert_eq!(apportion(19, f), [7, 6, 6]);
        assert_eq!(apportion(12, f), [5, 4, 3]);
        assert_eq!(apportion(700, f), [280, 210, 210]);
        assert_eq!(apportion(870, f), [348, 261, 261]);
        for m in 0..500 {
            let a = apportion(m, f);
            assert_eq!(a.iter().sum::<usize>(), m, "m={m}");
        }
    }

    #[test]
    fn single_stratum_n10_gives_433() {
        let rows: Vec<(usize, usize)> = (0..10).map(|_| (1, 1)).collect();
        let ds = dataset(&rows, 2, 1);
        let splits = make_splits(&ds, 1, [0.4, 0.3, 0.3], 7).unwrap();
        assert_eq!(splits[0].sizes(), [4, 3, 3]);
    }

    #[test]
    fn identical_seed_and_dataset_reproduce_assignments() {
        let rows: Vec<(usize, usize)> = (0..200).map(|i| (i % 5 + 1, i % 3 + 1)).collect();
        let ds = dataset(&rows, 5, 3);
        let a = make_splits(&ds, 5, [0.4, 0.3, 0.3], 123).unwrap();
        let b = make_splits(&ds, 5, [0.4, 0.3, 0.3], 123).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&ds, 5, [0.4, 0.3, 0.3], 124).unwrap();
        assert_ne!(a[0].entries, c[0].entries);
    }

    #[test]
    fn adding_splits_never_perturbs_earlier_ones() {
        let rows: Vec<(usize, usize)> = (0..100).map(|i| (i % 5 + 1, i % 2 + 1)).collect();
        let ds = dataset(&rows, 5, 2);
        let five = make_splits(&ds, 5, [0.4, 0.3, 0.3], 9).unwrap();
        let ten = make_splits(&ds, 10, [0.4, 0.3, 0.3], 9).unwrap();
        assert_eq!(five[..], ten[..5]);
    }

    #[test]
    fn joint_strata_receive_proportional_members() {
        // 4 strata of 20: each partition must get its exact quota (8,6,6)
        // within every stratum.
        let mut rows = Vec::new();
        for g in 1..=2usize {
            for y in 1..=2usize {
                for _ in 0..20 {
                    rows.push((y, g));
                }
            }
        }
        let ds = dataset(&rows, 2, 2);
        let split = &make_splits(&ds, 1, [0.4, 0.3, 0.3], 1).unwrap()[0];
        let map = split.assignment_map();
        for g in 1..=2usize {
            for y in 1..=2usize {
                let mut counts = [0usize; 3];
                for (i, r) in ds.respondents().iter().enumerate() {
                    if r.group == g && r.outcome == y {
                        counts[map[ds.respondents()[i].id.as_str()] as usize] += 1;
                    }
                }
                assert_eq!(counts, [8, 6, 6], "stratum g={g} y={y}");
            }
        }
    }

    #[test]
    fn thin_strata_merge_through_the_guard() {
        // Group 1: strata of 2 per outcome (y=1..3), merging to a
        // fallback of 6 ≥ 3; group 2: a single row falls through to the
        // global pool together with nothing else — still assigned.
        let mut rows = Vec::new();
        for y in 1..=3usize {
            rows.push((y, 1));
            rows.push((y, 1));
        }
        rows.push((1, 2));
        let ds = dataset(&rows, 3, 2);
        let split = &make_splits(&ds, 1, [0.4, 0.3, 0.3], 5).unwrap()[0];
        assert_eq!(split.entries.len(), 7);
        let report = verify_split(&ds, split).unwrap();
        assert!(report.ok());
        assert_eq!(report.realized_sizes.iter().sum::<usize>(), 7);
    }

    #[test]
    fn verify_flags_duplicate_assignment() {
        let rows: Vec<(usize, usize)> = (0..10).map(|_| (1, 1)).collect();
        let ds = dataset(&rows, 2, 1);
        let mut split = make_splits(&ds, 1, [0.4, 0.3, 0.3], 2).unwrap().remove(0);
        let dup = split.entries[0].clone();
        split.entries.push(dup);
        let report = verify_split(&ds, &split).unwrap();
        assert!(!report.disjoint);
        assert_eq!(report.max_assignments, 2);
        assert_eq!(report.duplicate_ids, vec![split.entries[0].0.clone()]);
    }

    #[test]
    fn verify_rejects_unknown_id() {
        let rows: Vec<(usize, usize)> = (0..10).map(|_| (1, 1)).collect();
        let ds = dataset(&rows, 2, 1);
        let mut split = make_splits(&ds, 1, [0.4, 0.3, 0.3], 2).unwrap().remove(0);
        split.entries[0].0 = "ghost".into();
        let err = verify_split(&ds, &split).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn min_cal_cell_is_recounted() {
        // Group 2 has only 5 members → its calibration cell is the
        // smallest; recount must agree with a direct filter.
        let mut rows: Vec<(usize, usize)> = (0..60).map(|i| (i % 3 + 1, 1)).collect();
        rows.extend((0..5).map(|i| (i % 3 + 1, 2)));
        let ds = dataset(&rows, 3, 2);
        let split = &make_splits(&ds, 1, [0.4, 0.3, 0.3], 11).unwrap()[0];
        let report = verify_split(&ds, split).unwrap();
        let map = split.assignment_map();
        let brute = ds
            .respondents()
            .iter()
            .filter(|r| r.group == 2 && map[r.id.as_str()] == Partition::Cal)
            .count();
        let cell = report.min_cal_cell.unwrap();
        assert_eq!(cell.group, "G2");
        assert_eq!(cell.count, brute);
    }

    #[test]
    fn rejects_bad_fractions_and_tiny_datasets() {
        let rows: Vec<(usize, usize)> = (0..10).map(|_| (1, 1)).collect();
        let ds = dataset(&rows, 2, 1);
        assert!(make_splits(&ds, 1, [0.5, 0.3, 0.3], 1).is_err());
        assert!(make_splits(&ds, 1, [0.4, 0.6, 0.0], 1).is_err());
        let tiny = dataset(&[(1, 1), (1, 1)], 2, 1);
        assert!(make_splits(&tiny, 1, [0.4, 0.3, 0.3], 1).is_err());
    }

    #[test]
    fn splits_round_trip_through_csv() {
        let rows: Vec<(usize, usize)> = (0..50).map(|i| (i % 5 + 1, i % 2 + 1)).collect();
        let ds = dataset(&rows, 5, 2);
        let splits = make_splits(&ds, 3, [0.4, 0.3, 0.3], 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("splits.csv");
        let sidecar = dir.path().join("splits.json");
        save_splits(&splits, 77, &csv_path, &sidecar).unwrap();
        let loaded = load_splits(&csv_path, &sidecar).unwrap();
        assert_eq!(splits, loaded);
    }
}
