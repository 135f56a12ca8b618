//! Versioned, hash-linked JSON artifacts.
//!
//! Every file is a flat JSON object holding the artifact body plus five
//! header keys: `format_version`, `artifact_kind`, `content_hash`,
//! `parent_hashes` and `created_by`. Serialization is canonical (sorted keys,
//! compact, shortest round-trip reals). `content_hash` is the hex SHA-256 of
//! the canonical document with `content_hash` and `created_by` removed, so
//! the hash depends only on content and lineage, never on the tool version.
//!
//! Corpora are JSON-lines: a header line followed by one document per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::importance::{Corpus, ImportanceStats, NpsMetadata, Origin};
use crate::model::{Model, TokenId};
use crate::pruning::NeuronMask;

pub const FORMAT_VERSION: u64 = 1;

pub const CREATED_BY: &str = concat!("glass-core/", env!("CARGO_PKG_VERSION"));

const HEADER_KEYS: [&str; 5] =
    ["format_version", "artifact_kind", "content_hash", "parent_hashes", "created_by"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Model,
    Corpus,
    Stats,
    Mask,
    Report,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::Model => "model",
            ArtifactKind::Corpus => "corpus",
            ArtifactKind::Stats => "stats",
            ArtifactKind::Mask => "mask",
            ArtifactKind::Report => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub format_version: u64,
    pub artifact_kind: ArtifactKind,
    pub content_hash: String,
    pub parent_hashes: Vec<String>,
    pub created_by: String,
}

/// A value that can be written to and read back from an artifact file.
pub trait Artifact: Serialize + DeserializeOwned {
    const KIND: ArtifactKind;

    /// Hashes of the artifacts this one was derived from.
    fn parent_hashes(&self) -> Vec<String> {
        Vec::new()
    }

    fn validate(&self) -> Result<()>;

    /// Canonical file bytes and content hash.
    fn encode(&self) -> Result<(Vec<u8>, String)> {
        self.validate()?;
        let mut doc = body_object(self)?;
        insert_header(&mut doc, Self::KIND, self.parent_hashes());
        let hash = hash_document(&doc);
        doc.insert("content_hash".into(), Value::String(hash.clone()));
        doc.insert("created_by".into(), Value::String(CREATED_BY.into()));
        let mut bytes = serde_json::to_vec(&Value::Object(doc))?;
        bytes.push(b'\n');
        Ok((bytes, hash))
    }

    fn decode(bytes: &[u8]) -> Result<(Self, ArtifactHeader)> {
        let value: Value = serde_json::from_slice(bytes)?;
        let Value::Object(mut doc) = value else {
            return Err(Error::Schema("artifact file must hold a JSON object".into()));
        };
        let header = check_header(&mut doc, Self::KIND)?;
        let body: Self = serde_json::from_value(Value::Object(doc))
            .map_err(|e| Error::Schema(format!("{} body: {e}", Self::KIND.as_str())))?;
        body.validate()?;
        if body.parent_hashes() != header.parent_hashes {
            return Err(Error::Schema("parent_hashes disagree with the artifact body".into()));
        }
        Ok((body, header))
    }

    fn content_hash(&self) -> Result<String> {
        Ok(self.encode()?.1)
    }
}

fn body_object<T: Serialize>(body: &T) -> Result<Map<String, Value>> {
    match serde_json::to_value(body)? {
        Value::Object(map) => {
            if let Some(k) = HEADER_KEYS.iter().find(|k| map.contains_key(**k)) {
                return Err(Error::Schema(format!("artifact body uses reserved key {k}")));
            }
            Ok(map)
        }
        _ => Err(Error::Schema("artifact body must serialize to a JSON object".into())),
    }
}

fn insert_header(doc: &mut Map<String, Value>, kind: ArtifactKind, parents: Vec<String>) {
    doc.insert("format_version".into(), Value::from(FORMAT_VERSION));
    doc.insert("artifact_kind".into(), Value::String(kind.as_str().into()));
    doc.insert("parent_hashes".into(), Value::from(parents));
}

/// Canonical compact serialization; `serde_json::Map` keeps keys sorted.
pub fn canonical_bytes(value: &Value) -> Vec<u8> {
    serde_json::to_vec(value).expect("serializing a Value cannot fail")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_document(doc: &Map<String, Value>) -> String {
    let mut view = doc.clone();
    view.remove("content_hash");
    view.remove("created_by");
    sha256_hex(&canonical_bytes(&Value::Object(view)))
}

/// Strip and check the header keys. Order: version, kind, hash, then schema.
fn check_header(doc: &mut Map<String, Value>, kind: ArtifactKind) -> Result<ArtifactHeader> {
    check_header_with(doc, kind, hash_document)
}

fn check_header_with(
    doc: &mut Map<String, Value>,
    kind: ArtifactKind,
    hash: impl FnOnce(&Map<String, Value>) -> String,
) -> Result<ArtifactHeader> {
    let version = doc
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Schema("missing or non-integer format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    let found = doc.get("artifact_kind").and_then(Value::as_str).unwrap_or("<missing>");
    if found != kind.as_str() {
        return Err(Error::KindMismatch { expected: kind.as_str().into(), found: found.into() });
    }
    let declared = doc
        .get("content_hash")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Schema("missing content_hash".into()))?
        .to_string();
    let computed = hash(doc);
    if declared != computed {
        return Err(Error::HashMismatch { declared, computed });
    }
    let parent_hashes: Vec<String> = doc
        .get("parent_hashes")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::Schema(format!("parent_hashes: {e}")))?
        .ok_or_else(|| Error::Schema("missing parent_hashes".into()))?;
    let created_by = doc
        .get("created_by")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Schema("missing created_by".into()))?
        .to_string();
    for k in HEADER_KEYS {
        doc.remove(k);
    }
    Ok(ArtifactHeader { format_version: version, artifact_kind: kind, content_hash: declared, parent_hashes, created_by })
}

/// Write `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, |f| f.write_all(bytes))
}

pub fn write_atomic_with(
    path: &Path,
    fill: impl FnOnce(&mut fs::File) -> std::io::Result<()>,
) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::Builder::new().prefix(".glass-tmp-").tempfile_in(dir)?;
    fill(tmp.as_file_mut())?;
    tmp.as_file_mut().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Save an artifact; returns its content hash.
pub fn save<A: Artifact>(artifact: &A, path: &Path) -> Result<String> {
    let (bytes, hash) = artifact.encode()?;
    write_atomic(path, &bytes)?;
    Ok(hash)
}

pub fn load<A: Artifact>(path: &Path) -> Result<A> {
    Ok(load_with_header(path)?.0)
}

pub fn load_with_header<A: Artifact>(path: &Path) -> Result<(A, ArtifactHeader)> {
    let bytes = fs::read(path)?;
    A::decode(&bytes)
}

// Corpus files use the same header, spread over JSON lines.

pub(crate) fn encode_lines<H: Serialize>(
    kind: ArtifactKind,
    header_body: &H,
    parents: Vec<String>,
    lines: &[Value],
) -> Result<(Vec<u8>, String)> {
    let mut head = body_object(header_body)?;
    insert_header(&mut head, kind, parents);
    let hash = lines_hash(&head, lines);
    head.insert("content_hash".into(), Value::String(hash.clone()));
    head.insert("created_by".into(), Value::String(CREATED_BY.into()));
    let mut out = canonical_bytes(&Value::Object(head));
    out.push(b'\n');
    for line in lines {
        out.extend(canonical_bytes(line));
        out.push(b'\n');
    }
    Ok((out, hash))
}

fn lines_hash(head: &Map<String, Value>, lines: &[Value]) -> String {
    let mut view = head.clone();
    view.remove("content_hash");
    view.remove("created_by");
    let mut hasher = Sha256::new();
    hasher.update(canonical_bytes(&Value::Object(view)));
    for line in lines {
        hasher.update(b"\n");
        hasher.update(canonical_bytes(line));
    }
    hex::encode(hasher.finalize())
}

pub(crate) fn decode_lines<H: DeserializeOwned>(
    kind: ArtifactKind,
    bytes: &[u8],
) -> Result<(H, ArtifactHeader, Vec<Value>)> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Schema(format!("{} file is not UTF-8", kind.as_str())))?;
    let mut it = text.lines();
    let first = it.next().ok_or_else(|| Error::Schema("empty file".into()))?;
    let Value::Object(mut head) = serde_json::from_str(first)? else {
        return Err(Error::Schema("header line must be a JSON object".into()));
    };
    let lines: Vec<Value> = it
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let header = check_header_with(&mut head, kind, |h| lines_hash(h, &lines))?;
    let body: H = serde_json::from_value(Value::Object(head))
        .map_err(|e| Error::Schema(format!("{} header: {e}", kind.as_str())))?;
    Ok((body, header, lines))
}

impl Artifact for Model {
    const KIND: ArtifactKind = ArtifactKind::Model;

    fn validate(&self) -> Result<()> {
        Model::validate(self)
    }
}

/// Content hash of a model file, used as provenance by stats and masks.
pub fn model_hash(model: &Model) -> Result<String> {
    model.content_hash()
}

impl Artifact for ImportanceStats {
    const KIND: ArtifactKind = ArtifactKind::Stats;

    fn parent_hashes(&self) -> Vec<String> {
        std::iter::once(self.model_hash.clone()).chain(self.corpus_hash.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        ImportanceStats::validate(self)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    origin: Origin,
    vocab_size: usize,
    metadata: Option<NpsMetadata>,
}

impl Artifact for Corpus {
    const KIND: ArtifactKind = ArtifactKind::Corpus;

    fn parent_hashes(&self) -> Vec<String> {
        self.metadata.iter().map(|m| m.model_hash.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        Corpus::validate(self)
    }

    fn encode(&self) -> Result<(Vec<u8>, String)> {
        self.validate()?;
        let head = CorpusHeader { origin: self.origin, vocab_size: self.vocab_size, metadata: self.metadata.clone() };
        let lines: Vec<Value> = self.documents.iter().map(|d| Value::from(d.clone())).collect();
        encode_lines(Self::KIND, &head, self.parent_hashes(), &lines)
    }

    fn decode(bytes: &[u8]) -> Result<(Self, ArtifactHeader)> {
        let (head, header, lines): (CorpusHeader, _, _) = decode_lines(Self::KIND, bytes)?;
        let documents = lines
            .into_iter()
            .map(serde_json::from_value)
            .collect::<std::result::Result<Vec<Vec<TokenId>>, _>>()
            .map_err(|e| Error::Schema(format!("corpus document: {e}")))?;
        let corpus = Corpus { documents, origin: head.origin, vocab_size: head.vocab_size, metadata: head.metadata };
        corpus.validate()?;
        if corpus.parent_hashes() != header.parent_hashes {
            return Err(Error::Schema("parent_hashes disagree with the corpus metadata".into()));
        }
        Ok((corpus, header))
    }
}

impl Artifact for NeuronMask {
    const KIND: ArtifactKind = ArtifactKind::Mask;

    fn parent_hashes(&self) -> Vec<String> {
        std::iter::once(self.model_hash.clone()).chain(self.stats_hashes.iter().cloned()).collect()
    }

    fn validate(&self) -> Result<()> {
        NeuronMask::validate(self)
    }
}

impl Artifact for EvalReport {
    const KIND: ArtifactKind = ArtifactKind::Report;

    fn parent_hashes(&self) -> Vec<String> {
        std::iter::once(self.metadata.model_hash.clone()).chain(self.metadata.stats_hashes.iter().cloned()).collect()
    }

    fn validate(&self) -> Result<()> {
        EvalReport::validate(self)
    }
}
