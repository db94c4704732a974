//! Append-only event log with an in-memory index rebuilt on open.
//!
//! Every mutation is appended and synced to disk before the call returns, so
//! an acknowledged judgment survives a crash. A torn final line (a crash in
//! the middle of an append) is dropped on the next open.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};

use batkit::rlhf::{PreferenceRecord, Source};
use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const LEASE_MINUTES: i64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Helpfulness {
    ABetter,
    BBetter,
    BothGood,
    BothBad,
}

impl Helpfulness {
    /// Preference label: `-1` prefers A, `+1` prefers B, `0` is a tie.
    pub fn label(self) -> i8 {
        match self {
            Helpfulness::ABetter => -1,
            Helpfulness::BBetter => 1,
            Helpfulness::BothGood | Helpfulness::BothBad => 0,
        }
    }

    pub fn quality_flag(self) -> Option<&'static str> {
        (self == Helpfulness::BothBad).then_some("low")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub helpfulness: Helpfulness,
    pub accept_a: Option<bool>,
    pub accept_b: Option<bool>,
    pub annotator_id: String,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Open,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: u64,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub status: Status,
    pub judgment: Option<Judgment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    TaskCreated {
        task_id: u64,
        prompt: String,
        response_a: String,
        response_b: String,
        created_at: DateTime<Utc>,
    },
    Judged {
        task_id: u64,
        judgment: Judgment,
        client_token: Option<String>,
        record: PreferenceRecord,
    },
    Record {
        record: PreferenceRecord,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportFilter {
    pub source: Option<Source>,
    pub annotator: Option<String>,
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
}

impl ExportFilter {
    /// `since` is inclusive, `until` exclusive.
    pub fn matches(&self, r: &PreferenceRecord) -> bool {
        self.source.is_none_or(|s| s == r.source)
            && self
                .annotator
                .as_ref()
                .is_none_or(|a| r.annotator_id.as_ref() == Some(a))
            && self.since.is_none_or(|t| r.created_at >= t)
            && self.until.is_none_or(|t| r.created_at < t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub open: usize,
    pub done: usize,
    pub leased: usize,
    pub records: usize,
    pub by_annotator: BTreeMap<String, usize>,
}

struct Lease {
    annotator: String,
    expires: DateTime<Utc>,
}

pub struct Store {
    path: PathBuf,
    file: File,
    tasks: BTreeMap<u64, AnnotationTask>,
    tokens: HashMap<u64, Option<String>>,
    records: Vec<PreferenceRecord>,
    leases: HashMap<u64, Lease>,
    next_id: u64,
    /// Bytes of the log known to hold complete events.
    len: u64,
}

fn non_empty(name: &str, v: &str) -> Result<()> {
    if v.trim().is_empty() {
        return Err(ServiceError::Validation(format!(
            "{name} must not be empty"
        )));
    }
    Ok(())
}

impl Store {
    pub fn open(path: &Path) -> Result<Store> {
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let mut store = Store {
            path: path.to_path_buf(),
            file: file.try_clone()?,
            tasks: BTreeMap::new(),
            tokens: HashMap::new(),
            records: Vec::new(),
            leases: HashMap::new(),
            next_id: 1,
            len: 0,
        };
        file.rewind()?;
        let mut reader = BufReader::new(&file);
        let mut good = 0u64;
        let mut line = String::new();
        let mut lineno = 0;
        loop {
            line.clear();
            let n = reader.read_line(&mut line)?;
            if n == 0 {
                break;
            }
            lineno += 1;
            if !line.ends_with('\n') {
                log::warn!(
                    "{}: dropping torn final line {lineno}",
                    store.path.display()
                );
                break;
            }
            let ev: Event = serde_json::from_str(line.trim_end()).map_err(|e| {
                ServiceError::Corrupt(format!("{} line {lineno}: {e}", store.path.display()))
            })?;
            store.apply(ev)?;
            good += n as u64;
        }
        drop(reader);
        if file.metadata()?.len() != good {
            file.set_len(good)?;
            file.sync_all()?;
        }
        store.len = good;
        Ok(store)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn apply(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::TaskCreated {
                task_id,
                prompt,
                response_a,
                response_b,
                ..
            } => {
                if task_id < self.next_id {
                    return Err(ServiceError::Corrupt(format!(
                        "task id {task_id} is not increasing"
                    )));
                }
                self.next_id = task_id + 1;
                self.tasks.insert(
                    task_id,
                    AnnotationTask {
                        task_id,
                        prompt,
                        response_a,
                        response_b,
                        status: Status::Open,
                        judgment: None,
                    },
                );
            }
            Event::Judged {
                task_id,
                judgment,
                client_token,
                record,
            } => {
                let task = self.tasks.get_mut(&task_id).ok_or_else(|| {
                    ServiceError::Corrupt(format!("judgment for unknown task {task_id}"))
                })?;
                if task.status == Status::Done {
                    return Err(ServiceError::Corrupt(format!(
                        "task {task_id} judged twice"
                    )));
                }
                task.status = Status::Done;
                task.judgment = Some(judgment);
                self.tokens.insert(task_id, client_token);
                self.leases.remove(&task_id);
                self.records.push(record);
            }
            Event::Record { record } => self.records.push(record),
        }
        Ok(())
    }

    fn append(&mut self, ev: &Event) -> Result<()> {
        let mut line = serde_json::to_string(ev)?;
        line.push('\n');
        let written = self
            .file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.sync_data());
        if let Err(e) = written {
            // Leave no partial line for the next append to land on.
            let _ = self.file.set_len(self.len);
            return Err(e.into());
        }
        self.len += line.len() as u64;
        Ok(())
    }

    fn commit(&mut self, ev: Event) -> Result<()> {
        self.append(&ev)?;
        self.apply(ev)
    }

    pub fn create_task(
        &mut self,
        prompt: &str,
        response_a: &str,
        response_b: &str,
        now: DateTime<Utc>,
    ) -> Result<u64> {
        non_empty("prompt", prompt)?;
        non_empty("response_a", response_a)?;
        non_empty("response_b", response_b)?;
        let task_id = self.next_id;
        self.commit(Event::TaskCreated {
            task_id,
            prompt: prompt.into(),
            response_a: response_a.into(),
            response_b: response_b.into(),
            created_at: now,
        })?;
        Ok(task_id)
    }

    pub fn task(&self, task_id: u64) -> Result<&AnnotationTask> {
        self.tasks
            .get(&task_id)
            .ok_or(ServiceError::NotFound(task_id))
    }

    /// Oldest open task with no live lease, leased to `annotator` until
    /// `now + 10 min`. An annotator asking again gets their own leased task back.
    pub fn next_task(
        &mut self,
        annotator: &str,
        now: DateTime<Utc>,
    ) -> Result<Option<AnnotationTask>> {
        non_empty("annotator", annotator)?;
        self.leases.retain(|_, l| l.expires > now);
        let held = self
            .leases
            .iter()
            .filter(|(_, l)| l.annotator == annotator)
            .map(|(id, _)| *id)
            .min();
        let pick = held.or_else(|| {
            self.tasks
                .values()
                .find(|t| t.status == Status::Open && !self.leases.contains_key(&t.task_id))
                .map(|t| t.task_id)
        });
        let Some(id) = pick else {
            return Ok(None);
        };
        self.leases.insert(
            id,
            Lease {
                annotator: annotator.into(),
                expires: now + Duration::minutes(LEASE_MINUTES),
            },
        );
        Ok(Some(self.tasks[&id].clone()))
    }

    /// Records a judgment. Resubmitting with the same `client_token` returns
    /// the stored record instead of a conflict.
    pub fn submit_judgment(
        &mut self,
        task_id: u64,
        helpfulness: Helpfulness,
        accept_a: Option<bool>,
        accept_b: Option<bool>,
        annotator_id: &str,
        client_token: Option<String>,
        now: DateTime<Utc>,
    ) -> Result<PreferenceRecord> {
        non_empty("annotator_id", annotator_id)?;
        let task = self.task(task_id)?;
        if task.status == Status::Done {
            let same = client_token.is_some() && self.tokens.get(&task_id) == Some(&client_token);
            if same {
                return self.record_for(task_id);
            }
            return Err(ServiceError::Conflict(task_id));
        }
        let record = PreferenceRecord {
            id: record_id(task_id),
            prompt: task.prompt.clone(),
            response_a: task.response_a.clone(),
            response_b: task.response_b.clone(),
            d: helpfulness.label(),
            accept_a,
            accept_b,
            source: Source::Human,
            annotator_id: Some(annotator_id.into()),
            created_at: now,
            quality_flag: helpfulness.quality_flag().map(String::from),
        };
        self.commit(Event::Judged {
            task_id,
            judgment: Judgment {
                helpfulness,
                accept_a,
                accept_b,
                annotator_id: annotator_id.into(),
                submitted_at: now,
            },
            client_token,
            record: record.clone(),
        })?;
        Ok(record)
    }

    fn record_for(&self, task_id: u64) -> Result<PreferenceRecord> {
        let id = record_id(task_id);
        self.records
            .iter()
            .find(|r| r.id == id)
            .cloned()
            .ok_or(ServiceError::NotFound(task_id))
    }

    /// Stores an externally produced record, typically AI feedback.
    pub fn add_record(&mut self, record: PreferenceRecord) -> Result<()> {
        record
            .validate()
            .map_err(|e| ServiceError::Validation(e.to_string()))?;
        if self.records.iter().any(|r| r.id == record.id) {
            return Err(ServiceError::Validation(format!(
                "duplicate record id {}",
                record.id
            )));
        }
        self.commit(Event::Record { record })
    }

    /// Matching records in submission order.
    pub fn export<'a>(
        &'a self,
        filter: &ExportFilter,
    ) -> impl Iterator<Item = &'a PreferenceRecord> + 'a {
        let filter = filter.clone();
        self.records.iter().filter(move |r| filter.matches(r))
    }

    pub fn stats(&self, now: DateTime<Utc>) -> Stats {
        let mut by_annotator = BTreeMap::new();
        for j in self.tasks.values().filter_map(|t| t.judgment.as_ref()) {
            *by_annotator.entry(j.annotator_id.clone()).or_insert(0) += 1;
        }
        let done = self
            .tasks
            .values()
            .filter(|t| t.status == Status::Done)
            .count();
        Stats {
            open: self.tasks.len() - done,
            done,
            leased: self.leases.values().filter(|l| l.expires > now).count(),
            records: self.records.len(),
            by_annotator,
        }
    }
}

fn record_id(task_id: u64) -> String {
    format!("task-{task_id}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap()
    }

    fn fresh() -> (tempfile::TempDir, Store) {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(&dir.path().join("events.jsonl")).unwrap();
        (dir, s)
    }

    #[test]
    fn ids_start_at_one_and_increase() {
        let (_d, mut s) = fresh();
        assert_eq!(s.create_task("p", "a", "b", t0()).unwrap(), 1);
        assert_eq!(s.create_task("p", "a", "b", t0()).unwrap(), 2);
        assert!(matches!(
            s.create_task(" ", "a", "b", t0()),
            Err(ServiceError::Validation(_))
        ));
    }

    #[test]
    fn helpfulness_mapping() {
        assert_eq!(Helpfulness::ABetter.label(), -1);
        assert_eq!(Helpfulness::BBetter.label(), 1);
        assert_eq!(Helpfulness::BothGood.label(), 0);
        assert_eq!(Helpfulness::BothBad.label(), 0);
        assert_eq!(Helpfulness::BothBad.quality_flag(), Some("low"));
        assert_eq!(Helpfulness::BothGood.quality_flag(), None);
    }

    #[test]
    fn leases_are_exclusive_and_expire() {
        let (_d, mut s) = fresh();
        s.create_task("p", "a", "b", t0()).unwrap();
        assert_eq!(s.next_task("ann1", t0()).unwrap().unwrap().task_id, 1);
        assert!(s.next_task("ann2", t0()).unwrap().is_none());
        assert_eq!(s.next_task("ann1", t0()).unwrap().unwrap().task_id, 1);
        let later = t0() + Duration::minutes(LEASE_MINUTES) - Duration::seconds(1);
        assert!(s.next_task("ann2", later).unwrap().is_none());
        let expired = t0() + Duration::minutes(LEASE_MINUTES);
        assert_eq!(s.next_task("ann2", expired).unwrap().unwrap().task_id, 1);
    }

    #[test]
    fn oldest_unleased_task_first() {
        let (_d, mut s) = fresh();
        for _ in 0..3 {
            s.create_task("p", "a", "b", t0()).unwrap();
        }
        assert_eq!(s.next_task("x", t0()).unwrap().unwrap().task_id, 1);
        assert_eq!(s.next_task("y", t0()).unwrap().unwrap().task_id, 2);
        s.submit_judgment(1, Helpfulness::ABetter, None, None, "x", None, t0())
            .unwrap();
        assert_eq!(s.next_task("x", t0()).unwrap().unwrap().task_id, 3);
    }

    #[test]
    fn judgments_are_immutable_but_idempotent() {
        let (_d, mut s) = fresh();
        s.create_task("p", "a", "b", t0()).unwrap();
        let tok = Some("t1".to_string());
        let r = s
            .submit_judgment(
                1,
                Helpfulness::BothBad,
                Some(true),
                None,
                "x",
                tok.clone(),
                t0(),
            )
            .unwrap();
        assert_eq!((r.d, r.quality_flag.as_deref()), (0, Some("low")));
        let again = s
            .submit_judgment(1, Helpfulness::ABetter, None, None, "x", tok, t0())
            .unwrap();
        assert_eq!(again, r);
        assert!(matches!(
            s.submit_judgment(1, Helpfulness::ABetter, None, None, "x", None, t0()),
            Err(ServiceError::Conflict(1))
        ));
        assert!(matches!(
            s.submit_judgment(9, Helpfulness::ABetter, None, None, "x", None, t0()),
            Err(ServiceError::NotFound(9))
        ));
        assert_eq!(s.export(&ExportFilter::default()).count(), 1);
    }

    #[test]
    fn reopen_rebuilds_the_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        {
            let mut s = Store::open(&path).unwrap();
            s.create_task("p", "a", "b", t0()).unwrap();
            s.create_task("q", "c", "d", t0()).unwrap();
            s.submit_judgment(2, Helpfulness::BBetter, None, Some(false), "x", None, t0())
                .unwrap();
        }
        let mut s = Store::open(&path).unwrap();
        assert_eq!(s.task(2).unwrap().status, Status::Done);
        assert_eq!(s.task(1).unwrap().status, Status::Open);
        assert_eq!(s.create_task("r", "e", "f", t0()).unwrap(), 3);
        let st = s.stats(t0());
        assert_eq!((st.open, st.done, st.records), (2, 1, 1));
        assert_eq!(st.by_annotator["x"], 1);
    }

    #[test]
    fn torn_tail_is_dropped_and_later_appends_stay_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        {
            let mut s = Store::open(&path).unwrap();
            s.create_task("p", "a", "b", t0()).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"event":"task_created","task_id":2,"pro"#)
            .unwrap();
        drop(f);
        {
            let mut s = Store::open(&path).unwrap();
            assert_eq!(s.create_task("q", "a", "b", t0()).unwrap(), 2);
        }
        let s = Store::open(&path).unwrap();
        assert_eq!(s.task(2).unwrap().prompt, "q");
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "garbage\n{}\n").unwrap();
        assert!(matches!(Store::open(&path), Err(ServiceError::Corrupt(_))));
    }

    #[test]
    fn export_filters_partition_the_records() {
        let (_d, mut s) = fresh();
        for i in 0..3 {
            s.create_task("p", "a", "b", t0()).unwrap();
            let who = if i == 0 { "x" } else { "y" };
            s.submit_judgment(
                i + 1,
                Helpfulness::ABetter,
                None,
                None,
                who,
                None,
                t0() + Duration::hours(i as i64),
            )
            .unwrap();
        }
        for i in 0..2 {
            s.add_record(PreferenceRecord {
                id: format!("ai-{i}"),
                prompt: "p".into(),
                response_a: "a".into(),
                response_b: "bb".into(),
                d: 1,
                accept_a: None,
                accept_b: None,
                source: Source::Ai,
                annotator_id: Some("length".into()),
                created_at: t0(),
                quality_flag: None,
            })
            .unwrap();
        }
        let count = |f: ExportFilter| s.export(&f).count();
        let human = ExportFilter {
            source: Some(Source::Human),
            ..Default::default()
        };
        let ai = ExportFilter {
            source: Some(Source::Ai),
            ..Default::default()
        };
        assert_eq!((count(human), count(ai)), (3, 2));
        let x = ExportFilter {
            annotator: Some("x".into()),
            ..Default::default()
        };
        assert_eq!(count(x), 1);
        let cut = t0() + Duration::hours(1);
        let before = ExportFilter {
            until: Some(cut),
            ..Default::default()
        };
        let after = ExportFilter {
            since: Some(cut),
            ..Default::default()
        };
        assert_eq!(count(before) + count(after), 5);
        let order: Vec<&str> = s
            .export(&ExportFilter::default())
            .map(|r| r.id.as_str())
            .collect();
        assert_eq!(order, ["task-1", "task-2", "task-3", "ai-0", "ai-1"]);
        assert!(s.add_record(s.records[3].clone()).is_err());
    }
}
