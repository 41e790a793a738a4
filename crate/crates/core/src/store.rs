//! On-disk index directory.
//!
//! ```text
//! <dir>/manifest.json       format version, build metadata, counts, checksums
//! <dir>/chunks.jsonl        one chunk per line, id order
//! <dir>/entities.jsonl      one entity per line, key order
//! <dir>/relations.jsonl     one relation per line, (src, dst, label) order
//! <dir>/communities.jsonl   one community per line, level then id order
//! <dir>/embeddings.f32      little-endian f32 matrix, row-major
//! <dir>/embeddings.meta     JSON sidecar: dim, model, (kind, id) per row
//! <dir>/logs/               query logs; carried across re-indexing
//! ```
//!
//! Writes go to a sibling temp directory that is renamed into place once the
//! manifest (always the last file) is on disk. A previous version is moved
//! to a sibling backup first and removed only after the new one is live, so
//! a crash at any point leaves either the old or the new index readable.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::community::{Community, CommunityHierarchy};
use crate::error::{Error, Result};
use crate::graph::{Entity, KnowledgeGraph, Relation};
use crate::index::{Embeddings, Index, IndexMeta, VectorKind};
use crate::ingest::Chunk;
use crate::llm::EmbeddingVector;

pub const FORMAT_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const ENTITIES_FILE: &str = "entities.jsonl";
pub const RELATIONS_FILE: &str = "relations.jsonl";
pub const COMMUNITIES_FILE: &str = "communities.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.f32";
pub const EMBEDDINGS_META_FILE: &str = "embeddings.meta";
pub const LOGS_DIR: &str = "logs";
pub const QUERY_LOG_FILE: &str = "queries.jsonl";

/// Checksummed table files in write order.
pub const TABLES: [&str; 6] = [
    CHUNKS_FILE,
    ENTITIES_FILE,
    RELATIONS_FILE,
    COMMUNITIES_FILE,
    EMBEDDINGS_FILE,
    EMBEDDINGS_META_FILE,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub version: u32,
    pub corpus_hash: String,
    pub embed_dim: usize,
    pub embed_model: String,
    pub leiden_seed: u64,
    pub created_at: DateTime<Utc>,
    /// Records per table.
    pub counts: BTreeMap<String, usize>,
    /// sha256 of each table file.
    pub checksums: BTreeMap<String, String>,
    pub meta: IndexMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingsMeta {
    dim: usize,
    model: String,
    rows: Vec<(VectorKind, String)>,
}

/// Hook called at each named step of [`write_index_with`]. Returning an error
/// aborts the write on the spot with no cleanup, as a crash would.
pub type Checkpoint<'a> = &'a dyn Fn(&str) -> Result<()>;

#[derive(Default)]
pub struct WriteOptions<'a> {
    /// Fixed timestamp for reproducible manifests; defaults to now.
    pub created_at: Option<DateTime<Utc>>,
    pub checkpoint: Option<Checkpoint<'a>>,
}

fn sibling(dir: &Path, suffix: &str) -> Result<PathBuf> {
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("index path {} has no final component", dir.display())))?
        .to_string_lossy();
    Ok(dir.with_file_name(format!(".{name}.{suffix}")))
}

pub fn temp_dir_for(dir: &Path) -> Result<PathBuf> {
    sibling(dir, "tmp")
}

pub fn backup_dir_for(dir: &Path) -> Result<PathBuf> {
    sibling(dir, "bak")
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r).map_err(|e| Error::Integrity(format!("serialize: {e}")))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Serialized table bytes and record counts, in [`TABLES`] order.
fn encode_tables(index: &Index) -> Result<Vec<(&'static str, Vec<u8>, usize)>> {
    let emb = &index.embeddings;
    let mut matrix = Vec::with_capacity(emb.len() * emb.dim * 4);
    let mut rows = Vec::with_capacity(emb.len());
    for ((kind, id), v) in &emb.rows {
        rows.push((*kind, id.clone()));
        for x in v.to_f32() {
            matrix.extend_from_slice(&x.to_le_bytes());
        }
    }
    let meta = EmbeddingsMeta {
        dim: emb.dim,
        model: emb.model.clone(),
        rows,
    };
    let meta_bytes = serde_json::to_vec_pretty(&meta).map_err(|e| Error::Integrity(e.to_string()))?;
    Ok(vec![
        (CHUNKS_FILE, jsonl(index.chunks.values())?, index.chunks.len()),
        (ENTITIES_FILE, jsonl(index.graph.entities())?, index.graph.entity_count()),
        (RELATIONS_FILE, jsonl(index.graph.relations())?, index.graph.relation_count()),
        (
            COMMUNITIES_FILE,
            jsonl(index.hierarchy.communities())?,
            index.hierarchy.communities().count(),
        ),
        (EMBEDDINGS_FILE, matrix, emb.len()),
        (EMBEDDINGS_META_FILE, meta_bytes, emb.len()),
    ])
}

fn write_file(path: &Path, bytes: &[u8], checkpoint: Option<Checkpoint>, name: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let half = bytes.len() / 2;
    f.write_all(&bytes[..half]).map_err(|e| Error::io(path, e))?;
    if let Some(cp) = checkpoint {
        cp(&format!("partial:{name}"))?;
    }
    f.write_all(&bytes[half..]).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn sync_dir(dir: &Path) {
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

/// Finish or undo an interrupted publish next to `dir`: a stale temp
/// directory is removed, and a backup is restored if the live directory is
/// missing or discarded if it is not.
pub fn recover(dir: &Path) -> Result<()> {
    let tmp = temp_dir_for(dir)?;
    if tmp.exists() {
        warn!("removing stale temp directory {}", tmp.display());
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let bak = backup_dir_for(dir)?;
    if bak.exists() {
        if dir.join(MANIFEST_FILE).is_file() {
            fs::remove_dir_all(&bak).map_err(|e| Error::io(&bak, e))?;
        } else {
            warn!("restoring previous index from {}", bak.display());
            if dir.exists() {
                fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            fs::rename(&bak, dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

pub fn write_index(index: &Index, dir: &Path) -> Result<IndexManifest> {
    write_index_with(index, dir, WriteOptions::default())
}

pub fn write_index_with(index: &Index, dir: &Path, opts: WriteOptions) -> Result<IndexManifest> {
    index.validate()?;
    let cp = |step: &str| opts.checkpoint.map_or(Ok(()), |f| f(step));
    recover(dir)?;
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }

    let tmp = temp_dir_for(dir)?;
    fs::create_dir_all(tmp.join(LOGS_DIR)).map_err(|e| Error::io(&tmp, e))?;
    cp("temp_created")?;

    let old_logs = dir.join(LOGS_DIR);
    if old_logs.is_dir() {
        for entry in fs::read_dir(&old_logs).map_err(|e| Error::io(&old_logs, e))? {
            let entry = entry.map_err(|e| Error::io(&old_logs, e))?;
            let to = tmp.join(LOGS_DIR).join(entry.file_name());
            fs::copy(entry.path(), &to).map_err(|e| Error::io(&to, e))?;
        }
    }
    cp("logs_copied")?;

    let mut counts = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    for (name, bytes, count) in encode_tables(index)? {
        cp(&format!("before:{name}"))?;
        write_file(&tmp.join(name), &bytes, opts.checkpoint, name)?;
        counts.insert(name.to_string(), count);
        checksums.insert(name.to_string(), sha256_hex(&bytes));
        cp(&format!("after:{name}"))?;
    }

    let manifest = IndexManifest {
        version: FORMAT_VERSION,
        corpus_hash: index.meta.corpus_hash.clone(),
        embed_dim: index.embeddings.dim,
        embed_model: index.embeddings.model.clone(),
        leiden_seed: index.meta.settings.leiden_seed,
        created_at: opts.created_at.unwrap_or_else(Utc::now),
        counts,
        checksums,
        meta: index.meta.clone(),
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Integrity(e.to_string()))?;
    cp(&format!("before:{MANIFEST_FILE}"))?;
    write_file(&tmp.join(MANIFEST_FILE), &manifest_bytes, opts.checkpoint, MANIFEST_FILE)?;
    sync_dir(&tmp);
    cp(&format!("after:{MANIFEST_FILE}"))?;

    let bak = backup_dir_for(dir)?;
    if dir.exists() {
        fs::rename(dir, &bak).map_err(|e| Error::io(dir, e))?;
        cp("backed_up")?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if let Some(parent) = dir.parent() {
        sync_dir(parent);
    }
    cp("published")?;
    if bak.exists() {
        fs::remove_dir_all(&bak).map_err(|e| Error::io(&bak, e))?;
    }
    cp("done")?;
    info!("published index to {}", dir.display());
    Ok(manifest)
}

fn corrupt(what: impl std::fmt::Display) -> Error {
    Error::Corruption(what.to_string())
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(name: &str, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| corrupt(format!("{name}: {e}")))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| corrupt(format!("{name} line {}: {e}", i + 1))))
        .collect()
}

/// Where the readable copy of the index at `dir` lives: the directory
/// itself, or its backup if a publish was interrupted after the old version
/// was moved aside.
fn resolve_readable(dir: &Path) -> Result<PathBuf> {
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(dir.to_path_buf());
    }
    let bak = backup_dir_for(dir)?;
    if bak.join(MANIFEST_FILE).is_file() {
        warn!("{} is missing; reading the previous version", dir.display());
        return Ok(bak);
    }
    Err(Error::NoIndex(dir.to_path_buf()))
}

pub fn read_manifest(dir: &Path) -> Result<IndexManifest> {
    let path = resolve_readable(dir)?.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let version = raw.get("version").and_then(serde_json::Value::as_u64);
    if version != Some(u64::from(FORMAT_VERSION)) {
        return Err(Error::MigrationNeeded {
            found: version.and_then(|v| u32::try_from(v).ok()).unwrap_or(0),
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| corrupt(format!("manifest: {e}")))
}

/// Open a published index. Checksums, counts, embedding dimensions and
/// referential integrity are all verified before the index is returned.
pub fn read_index(dir: &Path) -> Result<(Index, IndexManifest)> {
    let root = resolve_readable(dir)?;
    let manifest = read_manifest(dir)?;
    let mut tables = BTreeMap::new();
    for name in TABLES {
        let path = root.join(name);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => corrupt(format!("{name} is missing")),
            _ => Error::io(&path, e),
        })?;
        let expected = manifest
            .checksums
            .get(name)
            .ok_or_else(|| corrupt(format!("manifest has no checksum for {name}")))?;
        if &sha256_hex(&bytes) != expected {
            return Err(corrupt(format!("{name} does not match its checksum")));
        }
        tables.insert(name, bytes);
    }

    let chunks: Vec<Chunk> = parse_jsonl(CHUNKS_FILE, &tables[CHUNKS_FILE])?;
    let entities: Vec<Entity> = parse_jsonl(ENTITIES_FILE, &tables[ENTITIES_FILE])?;
    let relations: Vec<Relation> = parse_jsonl(RELATIONS_FILE, &tables[RELATIONS_FILE])?;
    let communities: Vec<Community> = parse_jsonl(COMMUNITIES_FILE, &tables[COMMUNITIES_FILE])?;
    let meta: EmbeddingsMeta = serde_json::from_slice(&tables[EMBEDDINGS_META_FILE])
        .map_err(|e| corrupt(format!("{EMBEDDINGS_META_FILE}: {e}")))?;

    let actual = [
        (CHUNKS_FILE, chunks.len()),
        (ENTITIES_FILE, entities.len()),
        (RELATIONS_FILE, relations.len()),
        (COMMUNITIES_FILE, communities.len()),
        (EMBEDDINGS_FILE, meta.rows.len()),
        (EMBEDDINGS_META_FILE, meta.rows.len()),
    ];
    for (name, n) in actual {
        if manifest.counts.get(name) != Some(&n) {
            return Err(corrupt(format!(
                "{name} holds {n} records, manifest says {:?}",
                manifest.counts.get(name)
            )));
        }
    }
    if meta.dim != manifest.embed_dim || meta.model != manifest.embed_model {
        return Err(corrupt("embedding sidecar disagrees with the manifest"));
    }
    if manifest.leiden_seed != manifest.meta.settings.leiden_seed || manifest.corpus_hash != manifest.meta.corpus_hash {
        return Err(corrupt("manifest build metadata fields disagree"));
    }

    let matrix = &tables[EMBEDDINGS_FILE];
    let row_bytes = meta.dim * 4;
    if meta.dim == 0 && !meta.rows.is_empty() || matrix.len() != row_bytes * meta.rows.len() {
        return Err(corrupt(format!(
            "{EMBEDDINGS_FILE} has {} bytes for {} rows of dimension {}",
            matrix.len(),
            meta.rows.len(),
            meta.dim
        )));
    }
    let mut embeddings = Embeddings::new(meta.model, meta.dim);
    for (i, (kind, id)) in meta.rows.into_iter().enumerate() {
        let row: Vec<f32> = matrix[i * row_bytes..(i + 1) * row_bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let v = EmbeddingVector::from_f32(&row).map_err(|e| corrupt(format!("vector {id}: {e}")))?;
        if embeddings.rows.insert((kind, id.clone()), v).is_some() {
            return Err(corrupt(format!("duplicate vector row {kind:?} {id}")));
        }
    }

    let mut levels: Vec<Vec<Community>> = Vec::new();
    for c in communities {
        if c.level > levels.len() {
            return Err(corrupt(format!("community {} skips a level", c.id)));
        }
        if c.level == levels.len() {
            levels.push(Vec::new());
        }
        levels[c.level].push(c);
    }

    let index = Index {
        meta: manifest.meta.clone(),
        chunks: chunks.into_iter().map(|c| (c.id.clone(), c)).collect(),
        graph: KnowledgeGraph::from_parts(entities, relations).map_err(corrupt)?,
        hierarchy: CommunityHierarchy { levels },
        embeddings,
    };
    index.validate().map_err(corrupt)?;
    Ok((index, manifest))
}

/// Append one JSON record to the index's query log.
pub fn append_query_log(dir: &Path, record: &serde_json::Value) -> Result<()> {
    let logs = dir.join(LOGS_DIR);
    fs::create_dir_all(&logs).map_err(|e| Error::io(&logs, e))?;
    let path = logs.join(QUERY_LOG_FILE);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{record}").map_err(|e| Error::io(&path, e))
}
