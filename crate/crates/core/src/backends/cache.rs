use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Backend, BackendDescriptor, Generation, SamplingParams, TokenLogprob};
use crate::digest::json_digest;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_id: String,
    pub sample_index: usize,
    pub generation: Generation,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    model_id: &'a str,
    prompt: &'a str,
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
    seed: Option<u64>,
    sample_index: usize,
}

impl CacheEntry {
    /// `n_samples` is not part of the key: a pool drawn at a large `d` serves
    /// every smaller `d`.
    pub fn key_for(model_id: &str, prompt: &str, params: &SamplingParams, sample_index: usize) -> String {
        json_digest(&KeyMaterial {
            model_id,
            prompt,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            seed: params.seed,
            sample_index,
        })
    }
}

pub fn cache_file_name(model_id: &str) -> String {
    let safe: String = model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{safe}.jsonl")
}

/// Append-only JSONL store for one model.
pub struct CacheStore {
    path: PathBuf,
    entries: Mutex<(HashMap<String, Generation>, Option<File>)>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: u64,
    pub misses: u64,
    pub delegated_calls: u64,
}

impl CacheStore {
    pub fn open(dir: impl AsRef<Path>, model_id: &str) -> Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        let path = dir.as_ref().join(cache_file_name(model_id));
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.entry(e.key).or_insert(e.generation);
                    }
                    Err(err) => log::warn!("{}: line {}: skipping corrupt cache entry: {err}", path.display(), i + 1),
                }
            }
        }
        Ok(Self {
            path,
            entries: Mutex::new((entries, None)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<Generation> {
        self.entries.lock().unwrap().0.get(key).cloned()
    }

    /// Persists an entry unless the key is already present.
    pub fn put(&self, entry: CacheEntry) -> Result<()> {
        let mut guard = self.entries.lock().unwrap();
        let (map, file) = &mut *guard;
        if map.contains_key(&entry.key) {
            return Ok(());
        }
        if file.is_none() {
            *file = Some(OpenOptions::new().create(true).append(true).open(&self.path)?);
        }
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        file.as_mut().unwrap().write_all(&line)?;
        map.insert(entry.key, entry.generation);
        Ok(())
    }
}

/// Serves generations from a [`CacheStore`] and delegates only the missing
/// sample indices.
pub struct CachedBackend<B> {
    inner: B,
    store: CacheStore,
    hits: AtomicU64,
    misses: AtomicU64,
    delegated_calls: AtomicU64,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, store: CacheStore) -> Self {
        Self {
            inner,
            store,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            delegated_calls: AtomicU64::new(0),
        }
    }

    pub fn open(inner: B, dir: impl AsRef<Path>) -> Result<Self> {
        let store = CacheStore::open(dir, &inner.descriptor().model_id)?;
        Ok(Self::new(inner, store))
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            entries: self.store.len(),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            delegated_calls: self.delegated_calls.load(Ordering::Relaxed),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn sample(&self, prompt: &str, params: &SamplingParams, indices: Range<usize>) -> Result<Vec<Generation>> {
        let model_id = &self.inner.descriptor().model_id;
        let keys: Vec<String> = indices
            .clone()
            .map(|i| CacheEntry::key_for(model_id, prompt, params, i))
            .collect();
        let mut out: Vec<Option<Generation>> = keys.iter().map(|k| self.store.get(k)).collect();
        let hits = out.iter().filter(|g| g.is_some()).count();
        self.hits.fetch_add(hits as u64, Ordering::Relaxed);

        // delegate each contiguous run of misses as one request
        let mut pos = 0;
        while pos < out.len() {
            if out[pos].is_some() {
                pos += 1;
                continue;
            }
            let end = (pos..out.len()).find(|&j| out[j].is_some()).unwrap_or(out.len());
            let run = (indices.start + pos)..(indices.start + end);
            self.delegated_calls.fetch_add(1, Ordering::Relaxed);
            self.misses.fetch_add(run.len() as u64, Ordering::Relaxed);
            let fresh = self.inner.sample(prompt, params, run.clone())?;
            let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            for (offset, generation) in fresh.into_iter().enumerate().take(run.len()) {
                let slot = pos + offset;
                self.store.put(CacheEntry {
                    key: keys[slot].clone(),
                    model_id: model_id.clone(),
                    sample_index: run.start + offset,
                    generation: generation.clone(),
                    created_at,
                })?;
                out[slot] = Some(generation);
            }
            if out[pos..end].iter().any(Option::is_none) {
                return Err(crate::error::Error::Backend(format!(
                    "backend returned fewer than the {} requested generations",
                    run.len()
                )));
            }
            pos = end;
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    fn score_logprobs(&self, text: &str) -> Result<Vec<TokenLogprob>> {
        self.inner.score_logprobs(text)
    }
}
