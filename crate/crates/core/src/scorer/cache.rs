use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;

use super::{ScoreResult, Scorer};
use crate::error::{Error, Result, ScoreError};
use crate::hashing::sha256_hex;

type Key = (String, String);

/// Persistent score cache keyed by (scorer id, SHA-256 of text). On disk it
/// is an append-only file of `sha256_hex TAB scorer_id TAB score` lines;
/// replay keeps the last record for each key.
#[derive(Debug)]
pub struct ScoreCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<Key, f64>>,
    writer: Mutex<Option<BufWriter<File>>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        ScoreCache {
            path: None,
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Opens (creating if needed) the cache file and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let mut pending: Option<(usize, u64, String)> = None;
            let mut offset = 0u64;
            for (i, line) in reader.split(b'\n').enumerate() {
                if let Some((n, _, bad)) = pending.take() {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: n,
                        message: format!("malformed cache record `{bad}`"),
                    });
                }
                let line = line?;
                let start = offset;
                offset += line.len() as u64 + 1;
                let line = String::from_utf8_lossy(&line).into_owned();
                if line.is_empty() {
                    continue;
                }
                match parse_record(&line) {
                    Some((key, score)) => {
                        entries.insert(key, score);
                    }
                    None => pending = Some((i + 1, start, line)),
                }
            }
            if let Some((n, start, _)) = pending {
                // a torn final write
                warn!("{}:{n}: dropping truncated cache record", path.display());
                OpenOptions::new().write(true).open(path)?.set_len(start)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ScoreCache {
            path: Some(path.to_owned()),
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(BufWriter::new(file))),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, scorer_id: &str, text: &str) -> Option<f64> {
        let key = (scorer_id.to_owned(), sha256_hex(text.as_bytes()));
        self.entries.lock().expect("cache lock poisoned").get(&key).copied()
    }

    pub fn put(&self, scorer_id: &str, text: &str, score: f64) -> Result<(), ScoreError> {
        let digest = sha256_hex(text.as_bytes());
        {
            let mut writer = self.writer.lock().expect("cache writer poisoned");
            if let Some(w) = writer.as_mut() {
                writeln!(w, "{digest}\t{scorer_id}\t{score}")
                    .and_then(|_| w.flush())
                    .map_err(|e| ScoreError::Cache(e.to_string()))?;
            }
        }
        self.entries
            .lock()
            .expect("cache lock poisoned")
            .insert((scorer_id.to_owned(), digest), score);
        Ok(())
    }
}

fn parse_record(line: &str) -> Option<(Key, f64)> {
    let mut parts = line.split('\t');
    let digest = parts.next()?;
    let id = parts.next()?;
    let score: f64 = parts.next()?.parse().ok()?;
    if parts.next().is_some()
        || digest.len() != 64
        || !digest.bytes().all(|b| b.is_ascii_hexdigit())
        || !(0.0..=1.0).contains(&score)
    {
        return None;
    }
    Some(((id.to_owned(), digest.to_owned()), score))
}

/// Wraps a scorer with a [`ScoreCache`]; hits never reach the inner scorer.
pub struct CachedScorer<S> {
    inner: S,
    cache: ScoreCache,
}

impl<S: Scorer> CachedScorer<S> {
    pub fn new(inner: S, cache: ScoreCache) -> Self {
        CachedScorer { inner, cache }
    }

    pub fn cache(&self) -> &ScoreCache {
        &self.cache
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: Scorer> Scorer for CachedScorer<S> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn score(&self, text: &str) -> ScoreResult {
        if let Some(s) = self.cache.get(self.inner.id(), text) {
            return Ok(s);
        }
        let s = self.inner.score(text)?;
        self.cache.put(self.inner.id(), text, s)?;
        Ok(s)
    }

    fn score_batch(&self, texts: &[String]) -> Vec<ScoreResult> {
        let id = self.inner.id();
        let mut out: Vec<Option<ScoreResult>> =
            texts.iter().map(|t| self.cache.get(id, t).map(Ok)).collect();
        let misses: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            for (i, r) in misses.into_iter().zip(self.inner.score_batch(&batch)) {
                let r = r.and_then(|s| {
                    self.cache.put(id, &texts[i], s)?;
                    Ok(s)
                });
                out[i] = Some(r);
            }
        }
        out.into_iter()
            .map(|r| r.expect("every position is filled"))
            .collect()
    }
}
