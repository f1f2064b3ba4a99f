//! Chunked document store with hashed bag-of-words embeddings.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{chunk_read_latencies, EnvState, Placement};
use crate::error::{Error, Result};

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

const STORE_MAGIC: &str = "dcnlab-chunkstore";
const STORE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: u64,
    pub doc_id: String,
    pub corpus: String,
    pub text: String,
    pub embedding: Vec<f64>,
    pub server_index: Option<usize>,
}

/// Lowercased alphanumeric tokens of `text`; whitespace-separated words that
/// contain no alphanumerics are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().filter_map(normalize_word).collect()
}

fn normalize_word(word: &str) -> Option<String> {
    let t: String = word
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    (!t.is_empty()).then_some(t)
}

/// Splits `text` into windows of `window` words starting at every multiple
/// of `window - overlap` below the word count. Chunk text keeps the original
/// spelling of the words; ids count up from 0.
pub fn chunk_document(doc_id: &str, corpus: &str, text: &str, window: usize, overlap: usize) -> Result<Vec<Chunk>> {
    chunk_document_with_dim(doc_id, corpus, text, window, overlap, DEFAULT_EMBEDDING_DIM)
}

pub fn chunk_document_with_dim(
    doc_id: &str,
    corpus: &str,
    text: &str,
    window: usize,
    overlap: usize,
    dim: usize,
) -> Result<Vec<Chunk>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be >= 1".into()));
    }
    if overlap >= window {
        return Err(Error::InvalidArgument(format!("overlap {overlap} must be < window {window}")));
    }
    check_field("doc_id", doc_id)?;
    check_field("corpus", corpus)?;
    let words: Vec<&str> = text.split_whitespace().filter(|w| normalize_word(w).is_some()).collect();
    let stride = window - overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < words.len() {
        let end = (start + window).min(words.len());
        let text = words[start..end].join(" ");
        chunks.push(Chunk {
            chunk_id: chunks.len() as u64,
            doc_id: doc_id.to_string(),
            corpus: corpus.to_string(),
            embedding: embed_with_dim(&text, dim),
            text,
            server_index: None,
        });
        start += stride;
    }
    Ok(chunks)
}

fn check_field(name: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be nonempty and free of tabs and line breaks: {value:?}"
        )));
    }
    Ok(())
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn embed(text: &str) -> Vec<f64> {
    embed_with_dim(text, DEFAULT_EMBEDDING_DIM)
}

/// Signed hashed token counts, L2-normalized. Empty text gives the zero vector.
pub fn embed_with_dim(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dim == 0 {
        return v;
    }
    for token in tokenize(text) {
        let h = fnv1a64(token.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// `1 - cos(u, v)`; a zero vector is at distance 1 from everything.
pub fn semantic_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!("embedding dimensions {} and {}", u.len(), v.len())));
    }
    let (mut dot, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - dot / (uu.sqrt() * vv.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkStore {
    embedding_dim: usize,
    chunks: Vec<Chunk>,
    centroids: BTreeMap<String, Vec<f64>>,
}

impl ChunkStore {
    pub fn new(embedding_dim: usize) -> Self {
        Self {
            embedding_dim,
            chunks: Vec::new(),
            centroids: BTreeMap::new(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn centroids(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.centroids
    }

    pub fn get(&self, chunk_id: u64) -> Option<&Chunk> {
        self.position(chunk_id).map(|i| &self.chunks[i])
    }

    fn position(&self, chunk_id: u64) -> Option<usize> {
        self.chunks.binary_search_by_key(&chunk_id, |c| c.chunk_id).ok()
    }

    fn next_id(&self) -> u64 {
        self.chunks.last().map_or(0, |c| c.chunk_id + 1)
    }

    /// Chunks and stores a document; returns the assigned ids.
    pub fn ingest_document(&mut self, doc_id: &str, corpus: &str, text: &str, window: usize, overlap: usize) -> Result<Vec<u64>> {
        let chunks = chunk_document_with_dim(doc_id, corpus, text, window, overlap, self.embedding_dim)?;
        let first = self.next_id();
        let ids: Vec<u64> = (first..first + chunks.len() as u64).collect();
        for (c, &id) in chunks.into_iter().zip(&ids) {
            self.chunks.push(Chunk { chunk_id: id, ..c });
        }
        self.recompute_centroids();
        Ok(ids)
    }

    fn recompute_centroids(&mut self) {
        let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
        for c in &self.chunks {
            let (sum, n) = sums
                .entry(c.corpus.clone())
                .or_insert_with(|| (vec![0.0; self.embedding_dim], 0));
            sum.iter_mut().zip(&c.embedding).for_each(|(s, e)| *s += e);
            *n += 1;
        }
        self.centroids = sums
            .into_iter()
            .map(|(corpus, (mut sum, n))| {
                sum.iter_mut().for_each(|s| *s /= n as f64);
                (corpus, sum)
            })
            .collect();
    }

    /// The `k` chunks nearest to `query`, nearest first, ties by id.
    pub fn retrieve_top_k(&self, query: &str, k: usize) -> Result<Vec<(&Chunk, f64)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let q = embed_with_dim(query, self.embedding_dim);
        let mut scored = self
            .chunks
            .iter()
            .map(|c| Ok((c, semantic_distance(&q, &c.embedding)?)))
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.chunk_id.cmp(&b.0.chunk_id)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Corpus whose centroid is nearest to `query`; ties go to the
    /// lexicographically smallest name.
    pub fn route(&self, query: &str) -> Result<&str> {
        let q = embed_with_dim(query, self.embedding_dim);
        let mut best: Option<(&str, f64)> = None;
        for (corpus, centroid) in &self.centroids {
            let d = semantic_distance(&q, centroid)?;
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((corpus, d));
            }
        }
        best.map(|(c, _)| c).ok_or(Error::EmptyStore)
    }

    /// Unweighted mean read latency of the listed chunks. The store's `i`-th
    /// chunk is chunk `i` of the placement.
    pub fn retrieval_latency_ms(&self, env: &EnvState, placement: &Placement, chunk_ids: &[u64]) -> Result<f64> {
        if chunk_ids.is_empty() {
            return Err(Error::InvalidArgument("no chunks to fetch".into()));
        }
        let per_chunk = chunk_read_latencies(env, placement)?;
        let mut total = 0.0;
        for &id in chunk_ids {
            let pos = self
                .position(id)
                .ok_or_else(|| Error::NotFound(format!("chunk {id}")))?;
            let r = per_chunk.get(pos).ok_or_else(|| {
                Error::InvalidArgument(format!("chunk {id} is outside the {} placed chunks", per_chunk.len()))
            })?;
            total += r;
        }
        Ok(total / chunk_ids.len() as f64)
    }

    /// Records the server of each of the first `placement.assignment.len()`
    /// chunks.
    pub fn apply_placement(&mut self, placement: &Placement) -> Result<()> {
        if placement.assignment.len() > self.chunks.len() {
            return Err(Error::InvalidArgument(format!(
                "placement covers {} chunks, store has {}",
                placement.assignment.len(),
                self.chunks.len()
            )));
        }
        for (c, &s) in self.chunks.iter_mut().zip(&placement.assignment) {
            c.server_index = Some(s);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            writeln!(w, "{STORE_MAGIC}\t{STORE_VERSION}\t{}", self.embedding_dim)?;
            for c in &self.chunks {
                let server = c.server_index.map_or("-1".to_string(), |s| s.to_string());
                let emb: Vec<String> = c.embedding.iter().map(|x| x.to_string()).collect();
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    c.chunk_id,
                    c.doc_id,
                    c.corpus,
                    server,
                    emb.join(","),
                    c.text
                )?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("chunk store {}", path.display())),
            _ => Error::Io(e),
        })?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().ok_or_else(|| Error::format("chunk store", "empty file"))??;
        let fields: Vec<&str> = header.split('\t').collect();
        let dim = match fields.as_slice() {
            [STORE_MAGIC, version, dim] => {
                if version.parse::<u32>().ok() != Some(STORE_VERSION) {
                    return Err(Error::format("chunk store", format!("unsupported version {version}")));
                }
                dim.parse::<usize>()
                    .map_err(|_| Error::format("chunk store", format!("bad dimension {dim}")))?
            }
            _ => return Err(Error::format("chunk store", "missing header")),
        };
        let mut store = Self::new(dim);
        let mut seen = HashSet::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            let bad = |msg: String| Error::format("chunk store", format!("line {}: {msg}", n + 2));
            let f: Vec<&str> = line.splitn(6, '\t').collect();
            let [id, doc_id, corpus, server, emb, text] = f.as_slice() else {
                return Err(bad("expected 6 tab-separated fields".into()));
            };
            let chunk_id: u64 = id.parse().map_err(|_| bad(format!("bad chunk id {id}")))?;
            if !seen.insert(chunk_id) || store.chunks.last().is_some_and(|c| c.chunk_id > chunk_id) {
                return Err(bad(format!("chunk id {chunk_id} duplicated or out of order")));
            }
            let server_index = match server.parse::<i64>() {
                Ok(-1) => None,
                Ok(s) if s >= 0 => Some(s as usize),
                _ => return Err(bad(format!("bad server index {server}"))),
            };
            let embedding = emb
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| bad(format!("bad embedding value: {e}")))?;
            if embedding.len() != dim {
                return Err(bad(format!("embedding has {} values, expected {dim}", embedding.len())));
            }
            if text.is_empty() {
                return Err(bad("empty chunk text".into()));
            }
            store.chunks.push(Chunk {
                chunk_id,
                doc_id: doc_id.to_string(),
                corpus: corpus.to_string(),
                text: text.to_string(),
                embedding,
                server_index,
            });
        }
        store.recompute_centroids();
        Ok(store)
    }
}
