//! Retrieval layer over help documents and distilled execution experience.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::session::trace::{EventKind, TraceEvent};

pub const DEFAULT_DOCS_PER_QUERY: usize = 1;
pub const DEFAULT_EXPERIENCE_PER_QUERY: usize = 3;
pub const HASH_EMBEDDING_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelpDoc {
    pub app_id: String,
    pub request: String,
    pub guidance: String,
    #[serde(default)]
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceRecord {
    pub app_id: String,
    pub task_signature: String,
    pub plan: Vec<String>,
    pub outcome: bool,
    pub source_session: String,
}

#[derive(Debug, thiserror::Error)]
pub enum KnowledgeError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("embedding backend: {0}")]
    Embedding(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, KnowledgeError>;
}

/// Bag-of-tokens feature hashing into a fixed-width, L2-normalised vector.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: HASH_EMBEDDING_DIM }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, KnowledgeError> {
        let mut v = vec![0.0; self.dim];
        for token in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let token = token.to_lowercase();
            v[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Client for an embedding service: POST `{"input": text}`, expects
/// `{"embedding": [f64, ...]}`.
pub struct HttpEmbedder {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, KnowledgeError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| KnowledgeError::Embedding(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, KnowledgeError> {
        #[derive(Deserialize)]
        struct Reply {
            embedding: Vec<f64>,
        }
        let reply: Reply = self
            .client
            .post(&self.endpoint)
            .json(&serde_json::json!({ "input": text }))
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| KnowledgeError::Embedding(e.to_string()))?;
        Ok(reply.embedding)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Indexed<T> {
    record: T,
    vector: Vec<f64>,
    order: u64,
}

/// Flat per-app index: records with their vectors, in ingestion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppIndex {
    docs: Vec<Indexed<HelpDoc>>,
    experiences: Vec<Indexed<ExperienceRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub ingested: usize,
    pub duplicates: usize,
    pub total_entries: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub docs: Vec<HelpDoc>,
    pub examples: Vec<ExperienceRecord>,
}

impl Retrieved {
    pub fn is_empty(&self) -> bool {
        self.docs.is_empty() && self.examples.is_empty()
    }
}

pub struct KnowledgeStore {
    embedder: Box<dyn Embedder>,
    apps: BTreeMap<String, AppIndex>,
    next_order: u64,
}

impl std::fmt::Debug for KnowledgeStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeStore").field("apps", &self.apps.keys()).finish()
    }
}

impl Default for KnowledgeStore {
    fn default() -> Self {
        Self::new(Box::new(HashingEmbedder::default()))
    }
}

/// Rank `(score, order)` pairs: higher score first, earlier ingestion on ties.
fn rank<'a, T>(items: impl Iterator<Item = (f64, &'a Indexed<T>)>, k: usize) -> Vec<&'a Indexed<T>>
where
    T: 'a,
{
    let mut scored: Vec<_> = items.collect();
    scored.sort_by(|(sa, a), (sb, b)| sb.partial_cmp(sa).unwrap_or(Ordering::Equal).then(a.order.cmp(&b.order)));
    scored.into_iter().take(k).map(|(_, r)| r).collect()
}

impl KnowledgeStore {
    pub fn new(embedder: Box<dyn Embedder>) -> Self {
        Self {
            embedder,
            apps: BTreeMap::new(),
            next_order: 0,
        }
    }

    fn next(&mut self) -> u64 {
        self.next_order += 1;
        self.next_order
    }

    /// Embed and index help documents. Records are validated up front so a
    /// malformed batch leaves the store untouched.
    pub fn ingest_docs(&mut self, records: Vec<HelpDoc>) -> Result<IngestStats, KnowledgeError> {
        let total = records.len();
        if let Some(bad) = records.iter().find(|r| r.request.trim().is_empty() || r.app_id.is_empty()) {
            return Err(KnowledgeError::MalformedRecord(format!(
                "help doc for app `{}` has an empty request or app id",
                bad.app_id
            )));
        }
        // Re-ingesting the same file is a no-op; a changed version is a new entry.
        let mut fresh: Vec<HelpDoc> = Vec::with_capacity(records.len());
        for r in records {
            let known = self.apps.get(&r.app_id).is_some_and(|a| a.docs.iter().any(|d| d.record == r));
            if !known && !fresh.contains(&r) {
                fresh.push(r);
            }
        }
        let duplicates = total - fresh.len();
        let vectors = fresh
            .iter()
            .map(|r| self.embedder.embed(&r.request))
            .collect::<Result<Vec<_>, _>>()?;
        let ingested = fresh.len();
        for (record, vector) in fresh.into_iter().zip(vectors) {
            let order = self.next();
            self.apps.entry(record.app_id.clone()).or_default().docs.push(Indexed { record, vector, order });
        }
        Ok(IngestStats {
            ingested,
            duplicates,
            total_entries: self.doc_count(),
        })
    }

    /// Admit an experience record. Only successful trajectories are stored,
    /// and a record identical to a stored one is skipped.
    pub fn add_experience(&mut self, record: ExperienceRecord) -> Result<bool, KnowledgeError> {
        if !record.outcome {
            return Ok(false);
        }
        if self.apps.get(&record.app_id).is_some_and(|a| a.experiences.iter().any(|e| e.record == record)) {
            return Ok(false);
        }
        if record.task_signature.trim().is_empty() {
            return Err(KnowledgeError::MalformedRecord("experience with empty task signature".into()));
        }
        let vector = self.embedder.embed(&record.task_signature)?;
        let order = self.next();
        self.apps
            .entry(record.app_id.clone())
            .or_default()
            .experiences
            .push(Indexed { record, vector, order });
        Ok(true)
    }

    pub fn doc_count(&self) -> usize {
        self.apps.values().map(|a| a.docs.len()).sum()
    }

    pub fn experience_count(&self) -> usize {
        self.apps.values().map(|a| a.experiences.len()).sum()
    }

    /// Top matches for `query` within one app. When a request was ingested in
    /// several versions, only the most recently ingested one is eligible.
    pub fn retrieve(&self, app_id: &str, query: &str, k_docs: usize, k_exp: usize) -> Result<Retrieved, KnowledgeError> {
        let Some(index) = self.apps.get(app_id) else {
            return Ok(Retrieved::default());
        };
        if k_docs == 0 && k_exp == 0 {
            return Ok(Retrieved::default());
        }
        let q = self.embedder.embed(query)?;
        let mut latest: BTreeMap<&str, &Indexed<HelpDoc>> = BTreeMap::new();
        for d in &index.docs {
            latest.insert(d.record.request.as_str(), d);
        }
        let docs = rank(
            index.docs.iter().filter(|d| std::ptr::eq(latest[d.record.request.as_str()], *d)).map(|d| (cosine(&q, &d.vector), d)),
            k_docs,
        );
        let examples = rank(index.experiences.iter().map(|e| (cosine(&q, &e.vector), e)), k_exp);
        Ok(Retrieved {
            docs: docs.into_iter().map(|d| d.record.clone()).collect(),
            examples: examples.into_iter().map(|e| e.record.clone()).collect(),
        })
    }

    /// Every version ever ingested for `(app_id, request)`, oldest first.
    pub fn doc_versions(&self, app_id: &str, request: &str) -> Vec<&HelpDoc> {
        self.apps
            .get(app_id)
            .map(|a| a.docs.iter().filter(|d| d.record.request == request).map(|d| &d.record).collect())
            .unwrap_or_default()
    }

    /// Write one `<app_id>.json` file per app index into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), KnowledgeError> {
        let dir = dir.as_ref();
        let io = |reason: String| KnowledgeError::Io {
            path: dir.display().to_string(),
            reason,
        };
        fs::create_dir_all(dir).map_err(|e| io(e.to_string()))?;
        for (app, index) in &self.apps {
            let text = serde_json::to_string_pretty(index).map_err(|e| io(e.to_string()))?;
            fs::write(dir.join(format!("{app}.json")), text).map_err(|e| io(e.to_string()))?;
        }
        Ok(())
    }

    /// Load a store written by [`save_dir`](Self::save_dir); a missing
    /// directory yields an empty store.
    pub fn load_dir(dir: impl AsRef<Path>, embedder: Box<dyn Embedder>) -> Result<Self, KnowledgeError> {
        let dir = dir.as_ref();
        let mut store = Self::new(embedder);
        if !dir.exists() {
            return Ok(store);
        }
        let io = |reason: String| KnowledgeError::Io {
            path: dir.display().to_string(),
            reason,
        };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(|e| io(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let app = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let text = fs::read_to_string(&path).map_err(|e| io(e.to_string()))?;
            let index: AppIndex = serde_json::from_str(&text).map_err(|e| io(format!("{}: {e}", path.display())))?;
            let max = index.docs.iter().map(|d| d.order).chain(index.experiences.iter().map(|e| e.order)).max();
            store.next_order = store.next_order.max(max.unwrap_or(0));
            store.apps.insert(app, index);
        }
        Ok(store)
    }
}

/// Read help docs from a directory of JSON files; each file holds one doc or
/// a list of docs.
pub fn read_docs_dir(dir: impl AsRef<Path>) -> Result<Vec<HelpDoc>, KnowledgeError> {
    let dir = dir.as_ref();
    let io = |reason: String| KnowledgeError::Io {
        path: dir.display().to_string(),
        reason,
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut docs = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| io(e.to_string()))?;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum OneOrMany {
            Many(Vec<HelpDoc>),
            One(HelpDoc),
        }
        match serde_json::from_str(&text) {
            Ok(OneOrMany::Many(v)) => docs.extend(v),
            Ok(OneOrMany::One(d)) => docs.push(d),
            Err(e) => return Err(KnowledgeError::MalformedRecord(format!("{}: {e}", path.display()))),
        }
    }
    Ok(docs)
}

/// Mine evaluated traces for successful rounds: one record per app that acted
/// in a round whose evaluation verdict is success, with the executed action
/// descriptions as its plan.
pub fn distill(events: &[TraceEvent]) -> Vec<ExperienceRecord> {
    let succeeded: Vec<u32> = events
        .iter()
        .filter(|e| e.kind == EventKind::Evaluation && e.payload.pointer("/result/verdict").and_then(Value::as_str) == Some("success"))
        .map(|e| e.round)
        .collect();
    let mut out = Vec::new();
    for round in succeeded {
        let Some(start) = events.iter().find(|e| e.round == round && e.kind == EventKind::RoundStarted) else {
            continue;
        };
        let request = start.payload.get("request").and_then(Value::as_str).unwrap_or_default().to_string();
        let mut per_app: Vec<(String, Vec<String>)> = Vec::new();
        for e in events.iter().filter(|e| e.round == round && e.kind == EventKind::ActionExecuted) {
            let app = e.payload.get("app_id").and_then(Value::as_str).unwrap_or_default().to_string();
            let step = e.payload.get("description").and_then(Value::as_str).unwrap_or_default().to_string();
            match per_app.iter_mut().find(|(a, _)| *a == app) {
                Some((_, plan)) => plan.push(step),
                None => per_app.push((app, vec![step])),
            }
        }
        out.extend(per_app.into_iter().map(|(app_id, plan)| ExperienceRecord {
            app_id,
            task_signature: request.clone(),
            plan,
            outcome: true,
            source_session: start.session.clone(),
        }));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(app: &str, request: &str, version: &str) -> HelpDoc {
        HelpDoc {
            app_id: app.into(),
            request: request.into(),
            guidance: format!("steps for {request} ({version})"),
            version: version.into(),
        }
    }

    fn exp(sig: &str, ok: bool) -> ExperienceRecord {
        ExperienceRecord {
            app_id: "sheetapp".into(),
            task_signature: sig.into(),
            plan: vec!["ApiCall save_as".into()],
            outcome: ok,
            source_session: "s1".into(),
        }
    }

    #[test]
    fn embedding_is_normalised_and_deterministic() {
        let e = HashingEmbedder::default();
        let v = e.embed("Export the sheet as CSV").unwrap();
        assert_eq!(v.len(), HASH_EMBEDDING_DIM);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(v, e.embed("export THE sheet, as csv").unwrap());
        assert!(e.embed("").unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn ingest_counts() {
        let mut store = KnowledgeStore::default();
        let docs: Vec<_> = (0..34).map(|i| doc("sheetapp", &format!("task number {i}"), "1")).collect();
        assert_eq!(store.ingest_docs(docs).unwrap(), IngestStats { ingested: 34, duplicates: 0, total_entries: 34 });
        assert_eq!(store.ingest_docs(vec![]).unwrap().ingested, 0);
        let again = store.ingest_docs(vec![doc("sheetapp", "task number 3", "1"), doc("sheetapp", "task number 3", "2")]).unwrap();
        assert_eq!(again, IngestStats { ingested: 1, duplicates: 1, total_entries: 35 });
        assert!(matches!(store.ingest_docs(vec![doc("sheetapp", " ", "1")]), Err(KnowledgeError::MalformedRecord(_))));
        assert_eq!(store.doc_count(), 35);
    }

    #[test]
    fn exact_query_ranks_first() {
        let mut store = KnowledgeStore::default();
        store
            .ingest_docs(vec![
                doc("sheetapp", "insert a chart for the selected cells", "1"),
                doc("sheetapp", "export the sheet as csv", "1"),
                doc("sheetapp", "export the chart as png", "1"),
            ])
            .unwrap();
        let got = store.retrieve("sheetapp", "export the sheet as csv", 1, 3).unwrap();
        assert_eq!(got.docs.len(), 1);
        assert_eq!(got.docs[0].request, "export the sheet as csv");
        assert!(store.retrieve("nowhere", "x", 1, 3).unwrap().is_empty());
    }

    #[test]
    fn newer_version_supersedes_but_old_retained() {
        let mut store = KnowledgeStore::default();
        store.ingest_docs(vec![doc("a", "save file", "1")]).unwrap();
        store.ingest_docs(vec![doc("a", "save file", "2")]).unwrap();
        let got = store.retrieve("a", "save file", 5, 0).unwrap();
        assert_eq!(got.docs.len(), 1);
        assert_eq!(got.docs[0].version, "2");
        assert_eq!(store.doc_versions("a", "save file").len(), 2);
    }

    #[test]
    fn failed_experience_not_admitted() {
        let mut store = KnowledgeStore::default();
        assert!(!store.add_experience(exp("export csv", false)).unwrap());
        assert!(store.add_experience(exp("export csv", true)).unwrap());
        assert!(!store.add_experience(exp("export csv", true)).unwrap());
        assert_eq!(store.experience_count(), 1);
    }

    #[test]
    fn ties_break_by_ingestion_order() {
        let mut store = KnowledgeStore::default();
        for i in 0..5 {
            let mut e = exp("identical signature", true);
            e.source_session = format!("s{i}");
            store.add_experience(e).unwrap();
        }
        let got = store.retrieve("sheetapp", "identical signature", 0, 3).unwrap();
        let sessions: Vec<_> = got.examples.iter().map(|e| e.source_session.as_str()).collect();
        assert_eq!(sessions, ["s0", "s1", "s2"]);
    }

    #[test]
    fn save_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = KnowledgeStore::default();
        store.ingest_docs(vec![doc("a", "one", "1"), doc("b", "two", "1")]).unwrap();
        store.add_experience(exp("three", true)).unwrap();
        store.save_dir(dir.path()).unwrap();
        let loaded = KnowledgeStore::load_dir(dir.path(), Box::new(HashingEmbedder::default())).unwrap();
        assert_eq!(loaded.apps, store.apps);
        assert_eq!(loaded.next_order, 3);
    }
}
