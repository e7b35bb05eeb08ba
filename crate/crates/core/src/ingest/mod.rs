//! Interaction-log ingestion and per-school task datasets.

mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic, SyntheticRule, SyntheticSpec};

/// One learner attempt at one problem.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub problem_id: String,
    pub school_id: String,
    pub correct: u8,
    /// Position within the (school, user) history, dense from 0.
    pub order_index: u32,
}

impl InteractionRecord {
    /// Content digest used to audit which records a training stage consumed.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for part in [&self.school_id, &self.user_id, &self.problem_id] {
            h.update(part.as_bytes());
            h.update([0x1f]);
        }
        h.update(self.order_index.to_le_bytes());
        h.update([self.correct]);
        h.finalize().into()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub user_id: String,
    pub problem_id: String,
    pub school_id: String,
    pub correct: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            user_id: "user_id".into(),
            problem_id: "problem_id".into(),
            school_id: "school_id".into(),
            correct: "correct".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    #[default]
    Strict,
    Lenient,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOptions {
    pub columns: ColumnMap,
    pub delimiter: u8,
    pub strictness: Strictness,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            columns: ColumnMap::default(),
            delimiter: b',',
            strictness: Strictness::Strict,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedRow {
    /// 1-based line number in the source (the header is line 1).
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<InteractionRecord>,
    pub skipped: Vec<SkippedRow>,
}

/// Parses delimited text with a header row into interaction records.
///
/// Chronology is file order: each (school, user) gets `order_index` 0, 1, ...
/// in the order its rows appear.
pub fn parse_records<R: Read>(input: R, options: &ParseOptions) -> Result<ParseOutcome> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = reader.byte_headers()?.clone();
    let mut outcome = ParseOutcome::default();
    if headers.is_empty() {
        return Ok(outcome);
    }

    let find = |name: &str| headers.iter().position(|h| h == name.as_bytes());
    let cols = &options.columns;
    let wanted = [
        &cols.user_id,
        &cols.problem_id,
        &cols.school_id,
        &cols.correct,
    ];
    let mut idx = [0usize; 4];
    let mut missing = Vec::new();
    for (slot, name) in idx.iter_mut().zip(wanted) {
        match find(name) {
            Some(i) => *slot = i,
            None => missing.push(name.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "missing required column(s): {}",
            missing.join(", ")
        )));
    }

    let mut next_order: HashMap<(String, String), u32> = HashMap::new();
    let mut row = csv::ByteRecord::new();
    loop {
        match reader.read_byte_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                if options.strictness == Strictness::Strict {
                    return Err(Error::Csv(e));
                }
                outcome.skipped.push(SkippedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        }
        let line = row.position().map_or(0, |p| p.line());
        match decode_row(&row, &idx) {
            Ok((user_id, problem_id, school_id, correct)) => {
                let counter = next_order
                    .entry((school_id.clone(), user_id.clone()))
                    .or_insert(0);
                outcome.records.push(InteractionRecord {
                    user_id,
                    problem_id,
                    school_id,
                    correct,
                    order_index: *counter,
                });
                *counter += 1;
            }
            Err(reason) => {
                if options.strictness == Strictness::Strict {
                    return Err(Error::Row {
                        row: line as usize,
                        reason,
                    });
                }
                outcome.skipped.push(SkippedRow { line, reason });
            }
        }
    }
    Ok(outcome)
}

fn decode_row(
    row: &csv::ByteRecord,
    idx: &[usize; 4],
) -> std::result::Result<(String, String, String, u8), String> {
    let field = |i: usize, name: &str| -> std::result::Result<String, String> {
        let raw = row
            .get(i)
            .ok_or_else(|| format!("missing field `{name}`"))?;
        let s = std::str::from_utf8(raw).map_err(|_| format!("field `{name}` is not UTF-8"))?;
        let s = s.trim();
        if s.is_empty() {
            return Err(format!("empty field `{name}`"));
        }
        Ok(s.to_string())
    };
    let user = field(idx[0], "user_id")?;
    let problem = field(idx[1], "problem_id")?;
    let school = field(idx[2], "school_id")?;
    let correct = match field(idx[3], "correct")?.as_str() {
        "0" | "0.0" => 0,
        "1" | "1.0" => 1,
        other => return Err(format!("non-binary correct value `{other}`")),
    };
    Ok((user, problem, school, correct))
}

/// Writes records back out in the four-column layout `parse_records` reads.
pub fn write_records<W: std::io::Write>(records: &[InteractionRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "problem_id", "school_id", "correct"])?;
    for r in records {
        w.write_record([
            r.user_id.as_str(),
            r.problem_id.as_str(),
            r.school_id.as_str(),
            if r.correct == 1 { "1" } else { "0" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One school's interactions, keyed by learner.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub school_id: String,
    pub users: BTreeMap<String, Vec<InteractionRecord>>,
}

impl TaskDataset {
    pub fn new(school_id: impl Into<String>) -> Self {
        TaskDataset {
            school_id: school_id.into(),
            users: BTreeMap::new(),
        }
    }

    /// Groups records by user, sorting each history by `order_index`.
    /// Fails if any record belongs to another school.
    pub fn from_records(
        school_id: impl Into<String>,
        records: impl IntoIterator<Item = InteractionRecord>,
    ) -> Result<Self> {
        let mut ds = TaskDataset::new(school_id);
        for r in records {
            if r.school_id != ds.school_id {
                return Err(Error::Parameter(format!(
                    "record of school `{}` in dataset `{}`",
                    r.school_id, ds.school_id
                )));
            }
            ds.users.entry(r.user_id.clone()).or_default().push(r);
        }
        for list in ds.users.values_mut() {
            list.sort_by_key(|r| r.order_index);
        }
        Ok(ds)
    }

    pub fn num_records(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.users.values().flatten()
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.users.keys().cloned().collect()
    }

    /// JSON with sorted object keys; stable bytes for a given dataset.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: TaskDataset = serde_json::from_str(s)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (user, list) in &self.users {
            for (i, r) in list.iter().enumerate() {
                if r.school_id != self.school_id || &r.user_id != user {
                    return Err(Error::Parameter(format!(
                        "record filed under `{}`/`{}` belongs to `{}`/`{}`",
                        self.school_id, user, r.school_id, r.user_id
                    )));
                }
                if r.correct > 1 {
                    return Err(Error::Parameter(format!(
                        "non-binary correct value {}",
                        r.correct
                    )));
                }
                if r.order_index as usize != i {
                    return Err(Error::Parameter(format!(
                        "user `{user}` history is not dense in order_index"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Splits records into one dataset per selected school.
pub fn partition_by_school(
    records: &[InteractionRecord],
    selected: &[String],
) -> Result<BTreeMap<String, TaskDataset>> {
    if selected.is_empty() {
        return Err(Error::Parameter("no schools selected".into()));
    }
    let mut out: BTreeMap<String, Vec<InteractionRecord>> =
        selected.iter().map(|s| (s.clone(), Vec::new())).collect();
    for r in records {
        if let Some(list) = out.get_mut(&r.school_id) {
            list.push(r.clone());
        }
    }
    let missing: Vec<String> = out
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(k, _)| k.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTask(missing));
    }
    out.into_iter()
        .map(|(school, list)| Ok((school.clone(), TaskDataset::from_records(school, list)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_learners: usize,
    pub num_unique_problems: usize,
    pub num_responses: usize,
}

pub fn dataset_stats(ds: &TaskDataset) -> DatasetStats {
    let problems: BTreeSet<&str> = ds.records().map(|r| r.problem_id.as_str()).collect();
    DatasetStats {
        num_learners: ds.users.values().filter(|v| !v.is_empty()).count(),
        num_unique_problems: problems.len(),
        num_responses: ds.num_records(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, strictness: Strictness) -> Result<ParseOutcome> {
        let opts = ParseOptions {
            strictness,
            ..ParseOptions::default()
        };
        parse_records(text.as_bytes(), &opts)
    }

    #[test]
    fn parses_well_formed_rows() {
        let out = parse(
            "user_id,problem_id,school_id,correct\nu1,p1,A,1\nu1,p2,A,0\n",
            Strictness::Strict,
        )
        .unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.skipped.is_empty());
        assert_eq!(out.records[1].order_index, 1);
        assert_eq!(out.records[1].correct, 0);
    }

    #[test]
    fn extra_columns_and_reordering_are_fine() {
        let out = parse(
            "order_id,correct,school_id,hint_count,problem_id,user_id\n9,1,A,0,p,u\n",
            Strictness::Strict,
        )
        .unwrap();
        assert_eq!(out.records[0].problem_id, "p");
        assert_eq!(out.records[0].user_id, "u");
    }

    #[test]
    fn non_binary_correct() {
        let text = "user_id,problem_id,school_id,correct\nu1,p1,A,2\nu1,p2,A,1\n";
        match parse(text, Strictness::Strict) {
            Err(Error::Row { row: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let out = parse(text, Strictness::Lenient).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].line, 2);
        assert_eq!(out.records[0].order_index, 0);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = parse("user,problem_id,school_id,correct\n", Strictness::Strict).unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("user_id")));
    }

    #[test]
    fn empty_stream_is_empty() {
        assert!(parse("", Strictness::Strict).unwrap().records.is_empty());
    }

    #[test]
    fn custom_delimiter_and_names() {
        let opts = ParseOptions {
            columns: ColumnMap {
                user_id: "student".into(),
                ..ColumnMap::default()
            },
            delimiter: b'\t',
            strictness: Strictness::Strict,
        };
        let out =
            parse_records("student\tproblem_id\tschool_id\tcorrect\ns\tp\tA\t1\n".as_bytes(), &opts)
                .unwrap();
        assert_eq!(out.records[0].user_id, "s");
    }

    #[test]
    fn order_index_is_per_school_and_user() {
        let out = parse(
            "user_id,problem_id,school_id,correct\nu,p,A,1\nu,p,B,1\nu,q,A,0\nv,p,A,0\n",
            Strictness::Strict,
        )
        .unwrap();
        let idx: Vec<u32> = out.records.iter().map(|r| r.order_index).collect();
        assert_eq!(idx, vec![0, 0, 1, 0]);
    }

    fn rec(user: &str, problem: &str, school: &str, order: u32) -> InteractionRecord {
        InteractionRecord {
            user_id: user.into(),
            problem_id: problem.into(),
            school_id: school.into(),
            correct: 1,
            order_index: order,
        }
    }

    #[test]
    fn partition_filters_and_reports_missing() {
        let records = vec![rec("u", "p", "A", 0), rec("v", "q", "B", 0), rec("u", "r", "A", 1)];
        let parts = partition_by_school(&records, &["A".to_string()]).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts["A"].num_records(), 2);
        assert!(parts["A"].records().all(|r| r.school_id == "A"));

        match partition_by_school(&records, &["A".to_string(), "Z".to_string()]) {
            Err(Error::MissingTask(ids)) => assert_eq!(ids, vec!["Z".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(partition_by_school(&records, &[]).is_err());
    }

    #[test]
    fn stats_counts() {
        assert_eq!(dataset_stats(&TaskDataset::new("x")), DatasetStats::default());
        let ds = TaskDataset::from_records(
            "A",
            vec![rec("u", "p", "A", 0), rec("u", "p", "A", 1), rec("v", "q", "A", 0)],
        )
        .unwrap();
        let s = dataset_stats(&ds);
        assert_eq!((s.num_learners, s.num_unique_problems, s.num_responses), (2, 2, 3));
    }

    #[test]
    fn canonical_json_round_trip() {
        let ds = TaskDataset::from_records("A", vec![rec("u", "p", "A", 0), rec("u", "q", "A", 1)])
            .unwrap();
        let json = ds.canonical_json().unwrap();
        assert_eq!(TaskDataset::from_json(&json).unwrap(), ds);
        assert!(json.find("\"school_id\"").unwrap() < json.find("\"users\"").unwrap());
    }
}
