use super::{CrowdError, ExportDocument, VoteTally, VoteTask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub task_id: String,
    pub voter: String,
    pub choice: String,
}

/// In-memory tasks and votes. One vote per (task, voter); a repeat
/// replaces the earlier choice.
#[derive(Debug, Clone, Default)]
pub struct VoteBook {
    tasks: BTreeMap<String, VoteTask>,
    votes: BTreeMap<String, BTreeMap<String, String>>,
}

impl VoteBook {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds tasks not yet known and returns them. Re-publishing
    /// an existing task id is a no-op.
    pub fn publish(&mut self, tasks: &[VoteTask]) -> Vec<VoteTask> {
        let mut fresh = Vec::new();
        for t in tasks {
            if !self.tasks.contains_key(&t.task_id) {
                self.tasks.insert(t.task_id.clone(), t.clone());
                fresh.push(t.clone());
            }
        }
        fresh
    }

    pub fn task(&self, task_id: &str) -> Option<&VoteTask> {
        self.tasks.get(task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &VoteTask> {
        self.tasks.values()
    }

    pub fn task_for_crop(&self, crop_id: &str) -> Option<&VoteTask> {
        self.tasks.get(&super::task_id_for(crop_id))
    }

    pub fn check_vote(&self, task_id: &str, choice: &str) -> Result<(), CrowdError> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| CrowdError::UnknownTask(task_id.to_string()))?;
        if !task.choices.iter().any(|c| c == choice) {
            return Err(CrowdError::InvalidChoice {
                task_id: task_id.to_string(),
                choice: choice.to_string(),
            });
        }
        Ok(())
    }

    pub fn record_vote(&mut self, task_id: &str, choice: &str, voter: &str) -> Result<VoteTally, CrowdError> {
        self.check_vote(task_id, choice)?;
        self.votes
            .entry(task_id.to_string())
            .or_default()
            .insert(voter.to_string(), choice.to_string());
        Ok(self.tally(task_id).expect("task exists"))
    }

    pub fn tally(&self, task_id: &str) -> Option<VoteTally> {
        let task = self.tasks.get(task_id)?;
        let mut counts = BTreeMap::new();
        if let Some(v) = self.votes.get(task_id) {
            for choice in v.values() {
                *counts.entry(choice.clone()).or_insert(0) += 1;
            }
        }
        Some(VoteTally::from_counts(task, counts))
    }

    pub fn has_voted(&self, task_id: &str, voter: &str) -> bool {
        self.votes.get(task_id).is_some_and(|v| v.contains_key(voter))
    }

    fn votes_by(&self, voter: &str) -> usize {
        self.votes.values().filter(|v| v.contains_key(voter)).count()
    }

    /// The incomplete task with the fewest votes that `voter` has not yet
    /// voted on; ties broken by a generator seeded from `seed` and the
    /// voter's progress, so one session walks a stable sequence.
    pub fn next_task(&self, voter: &str, seed: u64) -> Option<&VoteTask> {
        let open: Vec<(&VoteTask, u32)> = self
            .tasks
            .values()
            .filter(|t| !self.votes.get(&t.task_id).is_some_and(|v| v.contains_key(voter)))
            .filter_map(|t| {
                let tally = self.tally(&t.task_id)?;
                (!tally.complete).then_some((t, tally.total_votes))
            })
            .collect();
        let fewest = open.iter().map(|(_, n)| *n).min()?;
        let candidates: Vec<&VoteTask> = open.into_iter().filter(|(_, n)| *n == fewest).map(|(t, _)| t).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(self.votes_by(voter) as u64));
        Some(candidates[rng.random_range(0..candidates.len())])
    }

    /// (complete, incomplete) task counts.
    pub fn progress(&self) -> (usize, usize) {
        let complete = self
            .tasks
            .keys()
            .filter(|id| self.tally(id).is_some_and(|t| t.complete))
            .count();
        (complete, self.tasks.len() - complete)
    }

    pub fn export(&self) -> ExportDocument {
        ExportDocument::from_tallies(
            self.tasks
                .values()
                .map(|t| (self.tally(&t.task_id).expect("task exists"), t.min_votes)),
        )
    }
}

/// A [`VoteBook`] persisted as two append-only line files in `dir`:
/// `tasks.jsonl` and `votes.jsonl`. Replaying the vote log in order
/// reproduces the overwrite semantics.
#[derive(Debug)]
pub struct CrowdStore {
    dir: PathBuf,
    book: VoteBook,
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> CrowdError {
    CrowdError::Store(format!("{}: {e}", path.display()))
}

impl CrowdStore {
    pub fn open(dir: &Path) -> Result<Self, CrowdError> {
        std::fs::create_dir_all(dir).map_err(|e| store_err(dir, e))?;
        let mut book = VoteBook::new();
        let tasks_path = dir.join("tasks.jsonl");
        if tasks_path.exists() {
            let tasks: Vec<VoteTask> = crate::jsonl::read(&tasks_path).map_err(|e| store_err(&tasks_path, e))?;
            book.publish(&tasks);
        }
        let votes_path = dir.join("votes.jsonl");
        if votes_path.exists() {
            let votes: Vec<VoteRecord> = crate::jsonl::read(&votes_path).map_err(|e| store_err(&votes_path, e))?;
            for v in votes {
                book.record_vote(&v.task_id, &v.choice, &v.voter)?;
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            book,
        })
    }

    pub fn book(&self) -> &VoteBook {
        &self.book
    }

    fn append<T: Serialize>(&self, file: &str, items: &[T]) -> Result<(), CrowdError> {
        if items.is_empty() {
            return Ok(());
        }
        let path = self.dir.join(file);
        let mut buf = Vec::new();
        for it in items {
            serde_json::to_writer(&mut buf, it).expect("record serialises");
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| store_err(&path, e))?;
        f.write_all(&buf).and_then(|_| f.sync_data()).map_err(|e| store_err(&path, e))
    }

    /// Publishes tasks; returns the ones that were new.
    pub fn publish(&mut self, tasks: &[VoteTask]) -> Result<Vec<VoteTask>, CrowdError> {
        let fresh: Vec<VoteTask> = tasks
            .iter()
            .filter(|t| self.book.task(&t.task_id).is_none())
            .cloned()
            .collect();
        self.append("tasks.jsonl", &fresh)?;
        self.book.publish(&fresh);
        Ok(fresh)
    }

    /// Validates, persists, then applies the vote.
    pub fn record_vote(&mut self, task_id: &str, choice: &str, voter: &str) -> Result<VoteTally, CrowdError> {
        self.book.check_vote(task_id, choice)?;
        self.append(
            "votes.jsonl",
            &[VoteRecord {
                task_id: task_id.into(),
                voter: voter.into(),
                choice: choice.into(),
            }],
        )?;
        self.book.record_vote(task_id, choice, voter)
    }
}
