//! Append-only JSONL cache of service replies, keyed by content digests.
//!
//! A key is fetched from the network at most once per journal: concurrent
//! callers asking for the same missing key wait for the first fetch. Lines
//! that fail to parse (a torn write from a killed process, say) are skipped
//! with a warning and re-fetched on demand.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Verdict,
    Caption,
    Reward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub key: String,
    pub kind: EntryKind,
    /// judge_id or reward_id
    pub service: String,
    /// frame reference, caption digest or image reference
    pub subject: String,
    /// Reply text exactly as received.
    pub reply: String,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug)]
pub struct Journal {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, JournalEntry>>,
    pending: Mutex<HashSet<String>>,
    pending_done: Condvar,
    writer: Mutex<Option<File>>,
    skipped_lines: usize,
}

/// Outcome of [`Journal::get_or_fetch`].
#[derive(Debug, Clone)]
pub struct Cached {
    pub entry: JournalEntry,
    pub cached: bool,
}

impl Journal {
    /// Journal that lives only for the current process.
    pub fn in_memory() -> Journal {
        Journal {
            path: None,
            entries: RwLock::new(HashMap::new()),
            pending: Mutex::new(HashSet::new()),
            pending_done: Condvar::new(),
            writer: Mutex::new(None),
            skipped_lines: 0,
        }
    }

    pub fn open(path: &Path) -> Result<Journal> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;

        let mut entries = HashMap::new();
        let mut skipped = 0;
        let reader = BufReader::new(&file);
        for (lineno, line) in reader.split(b'\n').enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            match serde_json::from_slice::<JournalEntry>(&line) {
                Ok(entry) => {
                    entries.entry(entry.key.clone()).or_insert(entry);
                }
                Err(e) => {
                    log::warn!(
                        "{}:{}: skipping corrupted journal line ({e})",
                        path.display(),
                        lineno + 1
                    );
                    skipped += 1;
                }
            }
        }

        // A torn final line must not swallow the next appended record.
        let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
        if len > 0 {
            let mut last = [0u8; 1];
            file.seek(SeekFrom::Start(len - 1))
                .and_then(|_| file.read_exact(&mut last))
                .map_err(|e| Error::io(path, e))?;
            if last[0] != b'\n' {
                file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
            }
        }

        Ok(Journal {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            pending: Mutex::new(HashSet::new()),
            pending_done: Condvar::new(),
            writer: Mutex::new(Some(file)),
            skipped_lines: skipped,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn skipped_lines(&self) -> usize {
        self.skipped_lines
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("journal lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<JournalEntry> {
        self.entries.read().expect("journal lock").get(key).cloned()
    }

    fn append(&self, entry: &JournalEntry) -> Result<()> {
        let mut guard = self.writer.lock().expect("journal writer lock");
        if let Some(file) = guard.as_mut() {
            let mut line = serde_json::to_vec(entry)?;
            line.push(b'\n');
            let path = self.path.as_deref().unwrap_or(Path::new("<journal>"));
            file.write_all(&line).map_err(|e| Error::io(path, e))?;
            file.flush().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    /// Returns the journaled entry for `key`, calling `fetch` only when the
    /// key is absent. A successful fetch is appended before it is returned;
    /// failed fetches are not recorded.
    pub fn get_or_fetch<F>(&self, key: &str, fetch: F) -> Result<Cached>
    where
        F: FnOnce() -> Result<JournalEntry>,
    {
        {
            let mut pending = self.pending.lock().expect("journal pending lock");
            loop {
                if let Some(entry) = self.get(key) {
                    return Ok(Cached {
                        entry,
                        cached: true,
                    });
                }
                if !pending.contains(key) {
                    pending.insert(key.to_string());
                    break;
                }
                pending = self
                    .pending_done
                    .wait(pending)
                    .expect("journal pending lock");
            }
        }

        let result = fetch().and_then(|entry| {
            if entry.key != key {
                return Err(Error::Contract(format!(
                    "journal entry key {} does not match requested key {key}",
                    entry.key
                )));
            }
            self.append(&entry)?;
            self.entries
                .write()
                .expect("journal lock")
                .insert(key.to_string(), entry.clone());
            Ok(entry)
        });

        let mut pending = self.pending.lock().expect("journal pending lock");
        pending.remove(key);
        self.pending_done.notify_all();
        drop(pending);

        result.map(|entry| Cached {
            entry,
            cached: false,
        })
    }
}
