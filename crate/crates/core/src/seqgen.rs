//! Problem-id registry, fixed-length sequence encoding and fold assignment.
//!
//! Exercise indices are dense in `1..=V`, with 0 reserved for padding and
//! `v_cap` reserved as the shared out-of-vocabulary slot. Interaction tokens
//! use a fixed stride: `token = exercise + response * v_cap`, so a token keeps
//! its identity as the registry grows across tasks.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::ingest::{InteractionRecord, TaskDataset};
use crate::numcore::keyed_rng;

pub const DEFAULT_V_CAP: usize = 65536;

/// Append-only map from raw problem ids to dense exercise indices.
#[derive(Clone, Debug)]
pub struct ProblemRegistry {
    v_cap: usize,
    ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl PartialEq for ProblemRegistry {
    fn eq(&self, other: &Self) -> bool {
        self.v_cap == other.v_cap && self.ids == other.ids
    }
}

#[derive(Serialize, Deserialize)]
struct RegistryRepr {
    v_cap: usize,
    ids: Vec<String>,
}

impl Serialize for ProblemRegistry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RegistryRepr {
            v_cap: self.v_cap,
            ids: self.ids.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ProblemRegistry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = RegistryRepr::deserialize(d)?;
        let mut reg = ProblemRegistry::new(repr.v_cap);
        reg.extend_with(repr.ids.iter().map(String::as_str))
            .map_err(serde::de::Error::custom)?;
        if reg.len() != repr.ids.len() {
            return Err(serde::de::Error::custom("duplicate problem ids in registry"));
        }
        Ok(reg)
    }
}

impl ProblemRegistry {
    pub fn new(v_cap: usize) -> Self {
        ProblemRegistry {
            v_cap,
            ids: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn v_cap(&self) -> usize {
        self.v_cap
    }

    /// Number of registered problems (`V`).
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Most problems a registry with this stride can hold.
    pub fn capacity(&self) -> usize {
        self.v_cap.saturating_sub(1)
    }

    pub fn oov_index(&self) -> u32 {
        self.v_cap as u32
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    /// Index for `raw`, or the OOV slot; the flag is true when OOV was used.
    pub fn encode(&self, raw: &str) -> (u32, bool) {
        match self.get(raw) {
            Some(i) => (i, false),
            None => (self.oov_index(), true),
        }
    }

    pub fn raw_id(&self, index: u32) -> Option<&str> {
        (index as usize)
            .checked_sub(1)
            .and_then(|i| self.ids.get(i))
            .map(String::as_str)
    }

    /// Registers unseen ids in first-seen order. Either all new ids are added or none.
    pub fn extend_with<'a>(&mut self, problems: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut fresh: Vec<&str> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for p in problems {
            if !self.index.contains_key(p) && seen.insert(p) {
                fresh.push(p);
            }
        }
        let needed = self.ids.len() + fresh.len();
        if needed > self.capacity() {
            return Err(Error::Capacity {
                needed,
                v_cap: self.v_cap,
            });
        }
        for p in fresh {
            self.ids.push(p.to_string());
            self.index.insert(p.to_string(), self.ids.len() as u32);
        }
        Ok(())
    }

    /// Raw id to index map, as exported standalone.
    pub fn to_map(&self) -> BTreeMap<String, u32> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32 + 1))
            .collect()
    }
}

/// Returns a copy of `registry` extended with every problem in `ds`.
pub fn extend_registry(registry: &ProblemRegistry, ds: &TaskDataset) -> Result<ProblemRegistry> {
    let mut next = registry.clone();
    next.extend_with(ds.records().map(|r| r.problem_id.as_str()))?;
    Ok(next)
}

/// One fixed-length window of a learner's history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub user_id: String,
    pub exercises: Vec<u32>,
    pub responses: Vec<u8>,
    pub valid_len: usize,
    /// Number of positions that fell back to the OOV index.
    pub oov_count: usize,
}

/// Greedy non-overlapping windows of length `seq_len`, earliest first; the
/// last window is zero-padded.
pub fn encode_user(
    records: &[InteractionRecord],
    registry: &ProblemRegistry,
    seq_len: usize,
) -> Vec<EncodedSequence> {
    assert!(seq_len >= 2, "sequence length must be at least 2");
    records
        .chunks(seq_len)
        .map(|chunk| {
            let mut exercises = vec![0u32; seq_len];
            let mut responses = vec![0u8; seq_len];
            let mut oov_count = 0;
            for (i, r) in chunk.iter().enumerate() {
                let (idx, oov) = registry.encode(&r.problem_id);
                oov_count += usize::from(oov);
                exercises[i] = idx;
                responses[i] = r.correct;
            }
            EncodedSequence {
                user_id: chunk[0].user_id.clone(),
                exercises,
                responses,
                valid_len: chunk.len(),
                oov_count,
            }
        })
        .collect()
}

/// Encodes the histories of `users` (all users when `None`) in dataset order.
pub fn encode_dataset(
    ds: &TaskDataset,
    registry: &ProblemRegistry,
    seq_len: usize,
    users: Option<&dyn Fn(&str) -> bool>,
) -> Vec<EncodedSequence> {
    ds.users
        .iter()
        .filter(|(u, _)| users.is_none_or(|keep| keep(u)))
        .flat_map(|(_, recs)| encode_user(recs, registry, seq_len))
        .collect()
}

/// Shifted (history, next-exercise, label) view of one sequence, length `L-1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub user_id: String,
    pub history_tokens: Vec<u32>,
    pub query_exercises: Vec<u32>,
    pub labels: Vec<u8>,
    pub valid_mask: Vec<bool>,
}

impl TrainingInstance {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }
}

pub fn interaction_token(exercise: u32, response: u8, v_cap: usize) -> u32 {
    exercise + u32::from(response) * v_cap as u32
}

/// Inverse of [`interaction_token`] for nonzero tokens.
pub fn decode_token(token: u32, v_cap: usize) -> (u32, u8) {
    let v = v_cap as u32;
    ((token - 1) % v + 1, ((token - 1) / v) as u8)
}

pub fn make_instances(seq: &EncodedSequence, v_cap: usize) -> TrainingInstance {
    let n = seq.exercises.len().saturating_sub(1);
    let mut inst = TrainingInstance {
        user_id: seq.user_id.clone(),
        history_tokens: vec![0; n],
        query_exercises: vec![0; n],
        labels: vec![0; n],
        valid_mask: vec![false; n],
    };
    for t in 1..seq.valid_len {
        inst.history_tokens[t - 1] =
            interaction_token(seq.exercises[t - 1], seq.responses[t - 1], v_cap);
        inst.query_exercises[t - 1] = seq.exercises[t];
        inst.labels[t - 1] = seq.responses[t];
        inst.valid_mask[t - 1] = true;
    }
    inst
}

/// Per-user fold membership for k-fold cross-validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, user: &str) -> Option<usize> {
        self.folds.get(user).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn users_in(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(u, _)| u.clone())
            .collect()
    }
}

/// Seeded shuffle of the (sorted) users, then round-robin dealing into `k` folds.
pub fn assign_folds(user_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Parameter(format!("fold count {k} must be at least 2")));
    }
    if user_ids.is_empty() {
        return Err(Error::Parameter("no users to assign to folds".into()));
    }
    let mut users = user_ids.to_vec();
    users.sort();
    users.dedup();
    if k > users.len() {
        return Err(Error::Parameter(format!(
            "{k} folds for only {} users",
            users.len()
        )));
    }
    users.shuffle(&mut keyed_rng(seed, &[0xf01d]));
    let folds = users
        .into_iter()
        .enumerate()
        .map(|(i, u)| (u, i % k))
        .collect();
    Ok(FoldAssignment { k, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn recs(user: &str, problems: &[&str]) -> Vec<InteractionRecord> {
        problems
            .iter()
            .enumerate()
            .map(|(i, p)| InteractionRecord {
                user_id: user.into(),
                problem_id: (*p).into(),
                school_id: "A".into(),
                correct: (i % 2) as u8,
                order_index: i as u32,
            })
            .collect()
    }

    fn n_records(n: usize) -> Vec<InteractionRecord> {
        (0..n)
            .map(|i| InteractionRecord {
                user_id: "u".into(),
                problem_id: format!("p{}", i % 7),
                school_id: "A".into(),
                correct: (i % 3 == 0) as u8,
                order_index: i as u32,
            })
            .collect()
    }

    #[test]
    fn registry_assigns_first_seen_order() {
        let ds = TaskDataset::from_records("A", recs("u", &["c", "a", "c", "b"])).unwrap();
        let reg = extend_registry(&ProblemRegistry::new(100), &ds).unwrap();
        assert_eq!(reg.len(), 3);
        assert_eq!((reg.get("c"), reg.get("a"), reg.get("b")), (Some(1), Some(2), Some(3)));
        assert_eq!(extend_registry(&reg, &ds).unwrap(), reg);
        assert_eq!(reg.raw_id(2), Some("a"));
    }

    #[test]
    fn registry_growth_keeps_indices() {
        let a = TaskDataset::from_records("A", recs("u", &["x", "y"])).unwrap();
        let b = TaskDataset::from_records("A", recs("v", &["z", "y", "w"])).unwrap();
        let ra = extend_registry(&ProblemRegistry::new(100), &a).unwrap();
        let rb = extend_registry(&ra, &b).unwrap();
        assert_eq!(rb.get("x"), Some(1));
        assert_eq!(rb.get("y"), Some(2));
        assert_eq!(rb.get("z"), Some(3));
        assert_eq!(rb.get("w"), Some(4));
        assert_eq!(rb.oov_index(), 100);
    }

    #[test]
    fn registry_capacity_error() {
        let ds = TaskDataset::from_records("A", recs("u", &["a", "b", "c", "d"])).unwrap();
        let err = extend_registry(&ProblemRegistry::new(4), &ds).unwrap_err();
        assert!(matches!(err, Error::Capacity { needed: 4, v_cap: 4 }));
    }

    #[test]
    fn registry_serde_round_trip() {
        let ds = TaskDataset::from_records("A", recs("u", &["q", "r"])).unwrap();
        let reg = extend_registry(&ProblemRegistry::new(50), &ds).unwrap();
        let back: ProblemRegistry =
            serde_json::from_str(&serde_json::to_string(&reg).unwrap()).unwrap();
        assert_eq!(back, reg);
        assert_eq!(back.get("r"), Some(2));
    }

    #[test]
    fn chunking_examples() {
        let reg = ProblemRegistry::new(100);
        let one = encode_user(&n_records(30), &reg, 30);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].valid_len, 30);

        let three = encode_user(&n_records(70), &reg, 30);
        let lens: Vec<usize> = three.iter().map(|s| s.valid_len).collect();
        assert_eq!(lens, vec![30, 30, 10]);
        assert!(three[2].exercises[10..].iter().all(|&e| e == 0));
        assert!(three[2].responses[10..].iter().all(|&r| r == 0));
        assert_eq!(three[2].exercises.len(), 30);

        let single = encode_user(&n_records(1), &reg, 30);
        assert_eq!(single[0].valid_len, 1);
        assert!(encode_user(&[], &reg, 30).is_empty());
    }

    #[test]
    fn unknown_problems_use_oov() {
        let reg = ProblemRegistry::new(10);
        let seq = &encode_user(&n_records(3), &reg, 4)[0];
        assert_eq!(&seq.exercises[..3], &[10, 10, 10]);
        assert_eq!(seq.oov_count, 3);
    }

    #[test]
    fn instance_hand_encoding() {
        let seq = EncodedSequence {
            user_id: "u".into(),
            exercises: vec![5, 9, 2, 0],
            responses: vec![1, 0, 1, 0],
            valid_len: 3,
            oov_count: 0,
        };
        let inst = make_instances(&seq, 10);
        assert_eq!(inst.history_tokens, vec![15, 9, 0]);
        assert_eq!(inst.query_exercises, vec![9, 2, 0]);
        assert_eq!(inst.labels, vec![0, 1, 0]);
        assert_eq!(inst.valid_mask, vec![true, true, false]);
    }

    #[test]
    fn short_sequences_have_no_positions() {
        for valid_len in [0, 1] {
            let seq = EncodedSequence {
                user_id: "u".into(),
                exercises: vec![if valid_len == 1 { 3 } else { 0 }, 0, 0],
                responses: vec![0; 3],
                valid_len,
                oov_count: 0,
            };
            assert_eq!(make_instances(&seq, 10).num_valid(), 0);
        }
    }

    #[test]
    fn fold_examples() {
        let users: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let f = assign_folds(&users, 5, 3).unwrap();
        assert_eq!(f.fold_sizes(), vec![2; 5]);
        assert_eq!(assign_folds(&users, 5, 3).unwrap(), f);

        let users95: Vec<String> = (0..95).map(|i| format!("s{i}")).collect();
        assert_eq!(assign_folds(&users95, 5, 0).unwrap().fold_sizes(), vec![19; 5]);

        assert!(assign_folds(&users[..3], 5, 0).is_err());
        assert!(assign_folds(&users, 1, 0).is_err());
        assert!(assign_folds(&[], 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn tokens_round_trip(e in 1u32..=100, r in 0u8..=1) {
            let tok = interaction_token(e, r, 100);
            prop_assert!(tok >= 1 && tok <= 200);
            prop_assert_eq!(decode_token(tok, 100), (e, r));
        }

        #[test]
        fn valid_lengths_and_positions(n in 0usize..200, l in 2usize..40) {
            let reg = ProblemRegistry::new(100);
            let seqs = encode_user(&n_records(n), &reg, l);
            prop_assert_eq!(seqs.iter().map(|s| s.valid_len).sum::<usize>(), n);
            // brute-force count of predictable positions
            let mut brute = 0;
            for start in (0..n).step_by(l) {
                let end = (start + l).min(n);
                for t in start..end {
                    if t > start { brute += 1; }
                }
            }
            let masked: usize = seqs.iter().map(|s| make_instances(s, 100).num_valid()).sum();
            prop_assert_eq!(masked, brute);
            for s in &seqs {
                for i in 0..l {
                    if i < s.valid_len { prop_assert!(s.exercises[i] >= 1); }
                    else { prop_assert_eq!((s.exercises[i], s.responses[i]), (0, 0)); }
                }
            }
        }

        #[test]
        fn folds_partition_users(n in 2usize..60, k in 2usize..6, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let users: Vec<String> = (0..n).map(|i| format!("u{i}")).collect();
            let f = assign_folds(&users, k, seed).unwrap();
            prop_assert_eq!(f.folds.len(), n);
            let sizes = f.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }
}
