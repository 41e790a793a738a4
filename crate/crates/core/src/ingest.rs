//! Corpus loading and token-window chunking.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::text::{normalize_whitespace, token_spans};

pub const MIN_CHUNK_TOKENS: usize = 32;
pub const DEFAULT_MAX_TOKENS: usize = 600;
pub const DEFAULT_OVERLAP_TOKENS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: Option<String>,
    pub body: String,
    pub source_path: String,
}

impl Document {
    pub fn new(id: impl Into<String>, body: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let body = body.into();
        if id.is_empty() {
            return Err(Error::Input("document id must be non-empty".into()));
        }
        if normalize_whitespace(&body).is_empty() {
            return Err(Error::Input(format!("document {id} has an empty body")));
        }
        Ok(Self {
            source_path: id.clone(),
            id,
            title: None,
            body,
        })
    }
}

/// A contiguous segment of a document.
///
/// `start..end` is the byte range of the parent body this chunk covers. The
/// first chunk starts at byte 0 and the last ends at the body length, so
/// leading/trailing whitespace is kept and de-overlapped concatenation is exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub token_count: usize,
    pub start: usize,
    pub end: usize,
}

pub fn chunk_id(doc_id: &str, ordinal: usize) -> String {
    format!("{doc_id}#{ordinal}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub max_tokens: usize,
    pub overlap_tokens: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            max_tokens: DEFAULT_MAX_TOKENS,
            overlap_tokens: DEFAULT_OVERLAP_TOKENS,
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < MIN_CHUNK_TOKENS {
            return Err(Error::Config(format!(
                "max_tokens {} is below the floor of {MIN_CHUNK_TOKENS}",
                self.max_tokens
            )));
        }
        if self.overlap_tokens >= self.max_tokens {
            return Err(Error::Config(format!(
                "overlap_tokens {} must be smaller than max_tokens {}",
                self.overlap_tokens, self.max_tokens
            )));
        }
        Ok(())
    }
}

/// Token-index windows `[start, end)` covering `n_tokens` tokens.
///
/// Consecutive windows share exactly `overlap` tokens. No size floor is
/// applied here; `segment` enforces it.
pub fn token_windows(n_tokens: usize, max: usize, overlap: usize) -> Vec<(usize, usize)> {
    assert!(max > 0 && overlap < max, "invalid window parameters");
    let mut windows = Vec::new();
    if n_tokens == 0 {
        return windows;
    }
    let mut start = 0;
    loop {
        let end = (start + max).min(n_tokens);
        windows.push((start, end));
        if end == n_tokens {
            break;
        }
        start = end - overlap;
    }
    windows
}

fn segment_windows(doc: &Document, max: usize, overlap: usize) -> Vec<Chunk> {
    let spans = token_spans(&doc.body);
    let n = spans.len();
    token_windows(n, max, overlap)
        .into_iter()
        .enumerate()
        .map(|(ordinal, (a, b))| {
            let start = if a == 0 { 0 } else { spans[a].start };
            let end = if b == n { doc.body.len() } else { spans[b].start };
            Chunk {
                id: chunk_id(&doc.id, ordinal),
                doc_id: doc.id.clone(),
                ordinal,
                text: doc.body[start..end].to_string(),
                token_count: b - a,
                start,
                end,
            }
        })
        .collect()
}

/// Split a document into overlapping token windows.
pub fn segment(doc: &Document, max_tokens: usize, overlap_tokens: usize) -> Result<Vec<Chunk>> {
    ChunkingConfig {
        max_tokens,
        overlap_tokens,
    }
    .validate()?;
    Ok(segment_windows(doc, max_tokens, overlap_tokens))
}

/// Segment every document in parallel; output order follows input order.
pub fn segment_all(docs: &[Document], config: ChunkingConfig) -> Result<Vec<Chunk>> {
    config.validate()?;
    let per_doc: Vec<Vec<Chunk>> = docs
        .par_iter()
        .map(|d| segment_windows(d, config.max_tokens, config.overlap_tokens))
        .collect();
    Ok(per_doc.into_iter().flatten().collect())
}

/// Rebuild a document body from its chunks (ordinal order) by dropping the
/// overlapping prefix of every chunk after the first.
pub fn reconstruct(chunks: &[Chunk]) -> String {
    let mut sorted: Vec<&Chunk> = chunks.iter().collect();
    sorted.sort_by_key(|c| c.ordinal);
    let mut out = String::new();
    let mut prev_end: usize = 0;
    for (i, c) in sorted.iter().enumerate() {
        if i == 0 {
            out.push_str(&c.text);
        } else {
            let skip = prev_end.saturating_sub(c.start);
            out.push_str(&c.text[skip..]);
        }
        prev_end = c.end;
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub warnings: Vec<String>,
    /// (relative path, reason) for every file that could not be loaded.
    pub errors: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub report: LoadReport,
    /// sha256 over every loaded (relative path, bytes) pair in path order.
    pub hash: String,
}

fn is_corpus_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("txt") | Some("md")
    )
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn read_manifest(manifest: &Path) -> Result<Vec<String>> {
    let raw = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.trim_start_matches("./").to_string())
        .collect())
}

fn title_of(body: &str) -> Option<String> {
    let first = body.lines().map(str::trim).find(|l| !l.is_empty())?;
    let t = first.trim_start_matches('#').trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Load every `.txt`/`.md` file under `root` (or only the files a manifest
/// lists), ordered lexicographically by relative path.
pub fn load_corpus(root: &Path, manifest: Option<&Path>) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::Input(format!(
            "corpus root {} does not exist or is not a directory",
            root.display()
        )));
    }
    let mut report = LoadReport::default();
    let rel_paths: BTreeSet<String> = match manifest {
        Some(m) => read_manifest(m)?.into_iter().collect(),
        None => {
            let mut set = BTreeSet::new();
            for entry in WalkDir::new(root).follow_links(true) {
                match entry {
                    Ok(e) if e.file_type().is_file() && is_corpus_file(e.path()) => {
                        set.insert(relative_id(root, e.path()));
                    }
                    Ok(_) => {}
                    Err(e) => report.errors.push((
                        e.path().map(|p| relative_id(root, p)).unwrap_or_default(),
                        e.to_string(),
                    )),
                }
            }
            set
        }
    };

    let mut hasher = Sha256::new();
    let mut documents = Vec::new();
    for rel in rel_paths {
        let path: PathBuf = root.join(&rel);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                report.errors.push((rel, e.to_string()));
                continue;
            }
        };
        let body = match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => {
                report.errors.push((rel, format!("not valid UTF-8: {e}")));
                continue;
            }
        };
        if normalize_whitespace(&body).is_empty() {
            report.errors.push((rel, "empty body".into()));
            continue;
        }
        hasher.update((rel.len() as u64).to_le_bytes());
        hasher.update(rel.as_bytes());
        hasher.update((body.len() as u64).to_le_bytes());
        hasher.update(body.as_bytes());
        documents.push(Document {
            title: title_of(&body),
            source_path: path.display().to_string(),
            id: rel,
            body,
        });
    }
    if documents.is_empty() {
        report
            .warnings
            .push(format!("no documents found under {}", root.display()));
    }
    Ok(Corpus {
        documents,
        report,
        hash: hex::encode(hasher.finalize()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str) -> Document {
        Document::new("d", body).unwrap()
    }

    /// Enumerate windows by walking token indices one at a time.
    fn window_oracle(n: usize, max: usize, overlap: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0usize;
        while start < n {
            let mut end = start;
            while end < n && end - start < max {
                end += 1;
            }
            out.push((start, end));
            if end == n {
                break;
            }
            start = end - overlap;
        }
        out
    }

    #[test]
    fn ten_tokens_no_split() {
        assert_eq!(token_windows(10, 10, 0), vec![(0, 10)]);
        assert_eq!(token_windows(10, 10, 0), window_oracle(10, 10, 0));
    }

    #[test]
    fn ten_tokens_max6_overlap2() {
        assert_eq!(token_windows(10, 6, 2), vec![(0, 6), (4, 10)]);
        assert_eq!(token_windows(10, 6, 2), window_oracle(10, 6, 2));
    }

    #[test]
    fn windows_match_oracle_grid() {
        for n in 0..80 {
            for max in 1..20 {
                for overlap in 0..max {
                    assert_eq!(token_windows(n, max, overlap), window_oracle(n, max, overlap));
                }
            }
        }
    }

    #[test]
    fn segment_rejects_small_max() {
        let d = doc("one two three");
        assert!(matches!(segment(&d, 6, 2), Err(Error::Config(_))));
        assert!(matches!(segment(&d, 40, 40), Err(Error::Config(_))));
    }

    #[test]
    fn short_doc_single_chunk_identical() {
        let d = doc("Alice founded Acme. Bob joined later.");
        let chunks = segment(&d, 32, 4).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, d.body);
        assert_eq!(chunks[0].id, "d#0");
    }

    #[test]
    fn long_doc_overlap_and_reconstruct() {
        let body: String = (0..100).map(|i| format!("w{i}, ")).collect();
        let d = doc(&body);
        let chunks = segment(&d, 40, 10).unwrap();
        assert!(chunks.len() > 1);
        for (i, c) in chunks.iter().enumerate() {
            assert_eq!(c.ordinal, i);
            assert!(c.token_count <= 40);
            assert_eq!(crate::text::count_tokens(&c.text), c.token_count);
        }
        assert_eq!(reconstruct(&chunks), body);
    }

    #[test]
    fn empty_body_rejected() {
        assert!(Document::new("x", "  \n\t ").is_err());
        assert!(Document::new("", "body").is_err());
    }

    #[test]
    fn load_orders_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), "Bravo body.").unwrap();
        fs::write(dir.path().join("a.txt"), "Alpha body.").unwrap();
        fs::write(dir.path().join("skip.bin"), "nope").unwrap();
        fs::write(dir.path().join("bad.md"), [0xff, 0xfe, 0x00]).unwrap();
        let corpus = load_corpus(dir.path(), None).unwrap();
        let ids: Vec<_> = corpus.documents.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, vec!["a.txt", "b.txt"]);
        assert_eq!(corpus.report.errors.len(), 1);
        assert_eq!(corpus.report.errors[0].0, "bad.md");
    }

    #[test]
    fn load_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "Alpha body.").unwrap();
        fs::write(dir.path().join("b.txt"), "Bravo body.").unwrap();
        let manifest = dir.path().join("manifest.lst");
        fs::write(&manifest, "# only b\nb.txt\n\n").unwrap();
        let corpus = load_corpus(dir.path(), Some(&manifest)).unwrap();
        assert_eq!(corpus.documents.len(), 1);
        assert_eq!(corpus.documents[0].id, "b.txt");
        assert_eq!(corpus.documents[0].body, "Bravo body.");
    }

    #[test]
    fn empty_dir_warns() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = load_corpus(dir.path(), None).unwrap();
        assert!(corpus.documents.is_empty());
        assert_eq!(corpus.report.warnings.len(), 1);
    }

    #[test]
    fn missing_root_is_input_error() {
        let r = load_corpus(Path::new("/definitely/not/here"), None);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn corpus_hash_tracks_bytes() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "Alpha body.").unwrap();
        let h1 = load_corpus(dir.path(), None).unwrap().hash;
        let h2 = load_corpus(dir.path(), None).unwrap().hash;
        fs::write(dir.path().join("a.txt"), "Alpha body!").unwrap();
        let h3 = load_corpus(dir.path(), None).unwrap().hash;
        assert_eq!(h1, h2);
        assert_ne!(h1, h3);
    }
}
