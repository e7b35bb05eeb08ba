//! Classification metrics over masked predictions.
//!
//! AUROC is the Mann-Whitney statistic with midrank tie correction; AUPRC is
//! average precision with tied scores processed as one block. Both report
//! `None` when a class is absent instead of a made-up number.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TaskDataset;
use crate::sakt::SaktModel;
use crate::seqgen::{self, ProblemRegistry};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Parameter(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Parameter(format!("non-finite score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Parameter(format!("non-binary label {l}")));
    }
    Ok(())
}

/// Predicted positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks: a tie group occupying ranks lo+1..=hi gets (lo+1+hi)/2. Work
    // in doubled ranks so the sum stays integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_mid = (i + 1 + j + 1) as u128;
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled_mid * group_pos;
        i = j + 1;
    }
    let p = pos as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(Some(doubled_u as f64 / (2.0 * pos as f64 * neg as f64)))
}

pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        tp += group_pos;
        fp += j + 1 - i - group_pos;
        if group_pos > 0 {
            ap += group_pos as f64 * tp as f64 / (tp + fp) as f64;
        }
        i = j + 1;
    }
    Ok(Some(ap / pos as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub acc: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub confusion: Confusion,
    pub positive_rate: f64,
    /// Scores at or above this count as positive predictions.
    pub threshold: f64,
}

impl EvalReport {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Result<Self> {
        let confusion = confusion(scores, labels, DEFAULT_THRESHOLD)?;
        let n = scores.len();
        Ok(EvalReport {
            n,
            acc: (confusion.tp + confusion.tn) as f64 / n as f64,
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            confusion,
            positive_rate: (confusion.tp + confusion.fn_) as f64 / n as f64,
            threshold: DEFAULT_THRESHOLD,
        })
    }

    /// Field-wise mean of metrics and sum of counts, used when averaging folds.
    /// Undefined metrics are averaged over the reports that define them.
    pub fn average(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let k = reports.len() as f64;
        let mean_opt = |f: fn(&EvalReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let mut confusion = Confusion::default();
        for r in reports {
            confusion.tp += r.confusion.tp;
            confusion.fp += r.confusion.fp;
            confusion.tn += r.confusion.tn;
            confusion.fn_ += r.confusion.fn_;
        }
        Some(EvalReport {
            n: reports.iter().map(|r| r.n).sum(),
            acc: reports.iter().map(|r| r.acc).sum::<f64>() / k,
            auroc: mean_opt(|r| r.auroc),
            auprc: mean_opt(|r| r.auprc),
            confusion,
            positive_rate: reports.iter().map(|r| r.positive_rate).sum::<f64>() / k,
            threshold: first.threshold,
        })
    }

    pub const CSV_HEADER: [&'static str; 10] = [
        "task",
        "trained_through",
        "acc",
        "auroc",
        "auprc",
        "tp",
        "fp",
        "tn",
        "fn",
        "n",
    ];

    /// One CSV row; undefined metrics are written as `NA`.
    pub fn csv_row(&self, task: &str, trained_through: &str) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        vec![
            task.to_string(),
            trained_through.to_string(),
            format!("{:.6}", self.acc),
            opt(self.auroc),
            opt(self.auprc),
            self.confusion.tp.to_string(),
            self.confusion.fp.to_string(),
            self.confusion.tn.to_string(),
            self.confusion.fn_.to_string(),
            self.n.to_string(),
        ]
    }
}

/// Raw scores and labels at every mask-true position of `users` (in dataset order).
pub fn score_users(
    model: &SaktModel,
    registry: &ProblemRegistry,
    ds: &TaskDataset,
    users: &[String],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<u8>)> {
    let keep: std::collections::BTreeSet<&str> = users.iter().map(String::as_str).collect();
    let filter = |u: &str| keep.contains(u);
    let seqs = seqgen::encode_dataset(ds, registry, model.config.max_seq_len, Some(&filter));
    let instances: Vec<_> = seqs
        .iter()
        .map(|s| seqgen::make_instances(s, model.config.v_cap))
        .collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in instances.chunks(batch_size.max(1)) {
        let probs = model.forward(chunk, None)?;
        for (b, inst) in chunk.iter().enumerate() {
            for t in 0..inst.len() {
                if inst.valid_mask[t] {
                    scores.push(probs.get(b, t));
                    labels.push(inst.labels[t]);
                }
            }
        }
    }
    Ok((scores, labels))
}

/// Inference-mode evaluation of `model` on the given held-out users of `ds`.
pub fn evaluate(
    model: &SaktModel,
    registry: &ProblemRegistry,
    ds: &TaskDataset,
    test_users: &[String],
) -> Result<EvalReport> {
    let (scores, labels) = score_users(model, registry, ds, test_users, 64)?;
    if scores.is_empty() {
        return Err(Error::EmptyEval(ds.school_id.clone()));
    }
    EvalReport::from_scores(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::cmp::Ordering;

    /// O(P*N) pair count.
    fn brute_auroc(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let mut good = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                good += match si.partial_cmp(&sj).unwrap() {
                    Ordering::Greater => 1.0,
                    Ordering::Equal => 0.5,
                    Ordering::Less => 0.0,
                };
            }
        }
        (pairs > 0.0).then(|| good / pairs)
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0.7, 0.3], &[1, 0], 0.5).unwrap();
        assert_eq!(c, Confusion { tp: 1, fp: 0, tn: 1, fn_: 0 });
        assert_eq!(confusion(&[0.5], &[0], 0.5).unwrap().fp, 1);
        assert_eq!(confusion(&[0.0; 4], &[1; 4], 0.5).unwrap().fn_, 4);
        assert!(confusion(&[], &[], 0.5).is_err());
        assert!(confusion(&[0.1], &[1, 0], 0.5).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), Some(1.0));
        assert_eq!(auroc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), Some(0.75));
        assert_eq!(auroc(&[0.1, 0.4], &[1, 1]).unwrap(), None);
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.2, 0.9, 0.4], &[1, 1, 1]).unwrap(), Some(1.0));
        let ap = auprc(&[0.8, 0.4, 0.35, 0.1], &[1, 0, 1, 0]).unwrap().unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(auprc(&[0.8, 0.4], &[0, 0]).unwrap(), None);
    }

    #[test]
    fn constant_scorer_report() {
        let labels = [1, 0, 1, 1, 0];
        let r = EvalReport::from_scores(&[0.5; 5], &labels).unwrap();
        assert_eq!(r.acc, r.positive_rate);
        assert_eq!(r.auroc, Some(0.5));
        assert_eq!(r.confusion.total(), r.n);
    }

    #[test]
    fn csv_row_marks_undefined() {
        let r = EvalReport::from_scores(&[0.2, 0.7], &[1, 1]).unwrap();
        let row = r.csv_row("A", "B");
        assert_eq!(row[3], "NA");
        assert_eq!(row.len(), EvalReport::CSV_HEADER.len());
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_oracle(
            raw in proptest::collection::vec((0u8..20, 0u8..=1), 1..300)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 20.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
            let fast = auroc(&scores, &labels).unwrap();
            let slow = brute_auroc(&scores, &labels);
            match (fast, slow) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn auroc_invariances(
            raw in proptest::collection::vec((0u8..50, 0u8..=1), 2..200)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 50.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
            let base = auroc(&scores, &labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&warped, &labels).unwrap(), base);
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            if let (Some(a), Some(b)) = (base, auroc(&scores, &flipped).unwrap()) {
                prop_assert!((a + b - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn perfect_ranking_has_unit_ap(pos in 1usize..50, neg in 0usize..50) {
            let scores: Vec<f64> = (0..pos + neg).map(|i| 1.0 - i as f64 / 200.0).collect();
            let labels: Vec<u8> = (0..pos + neg).map(|i| u8::from(i < pos)).collect();
            let ap = auprc(&scores, &labels).unwrap().unwrap();
            prop_assert!((ap - 1.0).abs() < 1e-12);
        }
    }
}
