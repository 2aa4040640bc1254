//! Reading and writing `gog-v1` JSON files, corpus directories, and the
//! dataset hygiene passes (thunk removal, declaration/body deduplication).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::gog::{BasicBlockFeatures, Cfg, Corpus, Gog, NUM_FEATURES};
use crate::json::{canonical_json, write_atomic};

pub const SCHEMA_VERSION: &str = "gog-v1";
pub const FILE_SUFFIX: &str = ".gog.json";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid binary: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("mixed packages: expected {expected:?}, found {found:?}")]
    MixedPackages { expected: String, found: String },
    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<IngestError>,
    },
    #[error("no {FILE_SUFFIX} files under {}", .0.display())]
    EmptyCorpus(PathBuf),
    #[error("{}: duplicate binary {key}", path.display())]
    Duplicate { path: PathBuf, key: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GogFile {
    schema_version: String,
    package: String,
    binary_name: String,
    arch: String,
    functions: Vec<FunctionRecord>,
    call_edges: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FunctionRecord {
    id: usize,
    name: Option<String>,
    is_thunk: bool,
    blocks: Vec<BlockRecord>,
    edges: Vec<[usize; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    id: usize,
    features: Vec<f64>,
}

fn schema(path: String, message: impl Into<String>) -> IngestError {
    IngestError::Schema {
        path,
        message: message.into(),
    }
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// Parses one `gog-v1` document into a validated [`Gog`].
pub fn read_gog(bytes: &[u8]) -> Result<Gog, IngestError> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let parse_error = |inner: serde_json::Error| IngestError::Parse {
        offset: byte_offset(bytes, inner.line(), inner.column()),
        message: inner.to_string(),
    };
    let file: GogFile = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_data() {
            schema(path, inner.to_string())
        } else {
            parse_error(inner)
        }
    })?;
    de.end().map_err(parse_error)?;
    from_file(file)
}

fn from_file(file: GogFile) -> Result<Gog, IngestError> {
    if file.schema_version != SCHEMA_VERSION {
        return Err(schema(
            "schema_version".into(),
            format!("expected {SCHEMA_VERSION:?}, found {:?}", file.schema_version),
        ));
    }
    let mut gog = Gog::new(file.package, file.binary_name, file.arch);
    for (fi, f) in file.functions.into_iter().enumerate() {
        if f.id != fi {
            return Err(schema(format!("functions[{fi}].id"), format!("expected dense id {fi}, found {}", f.id)));
        }
        let mut blocks = Vec::with_capacity(f.blocks.len());
        for (bi, b) in f.blocks.into_iter().enumerate() {
            let at = format!("functions[{fi}].blocks[{bi}]");
            if b.id != bi {
                return Err(schema(format!("{at}.id"), format!("expected dense id {bi}, found {}", b.id)));
            }
            if b.features.len() != NUM_FEATURES {
                return Err(schema(
                    format!("{at}.features"),
                    format!("expected {NUM_FEATURES} numbers, found {}", b.features.len()),
                ));
            }
            blocks.push(BasicBlockFeatures(b.features));
        }
        gog.functions.push(Cfg {
            name: f.name,
            is_thunk: f.is_thunk,
            blocks,
            edges: f.edges.into_iter().map(|[s, d]| (s, d)).collect(),
        });
    }
    gog.call_edges = file.call_edges.into_iter().map(|[s, d]| (s, d)).collect();
    let violations = gog.validate();
    if violations.is_empty() {
        Ok(gog)
    } else {
        Err(IngestError::Invalid(violations))
    }
}

fn to_file(gog: &Gog) -> GogFile {
    GogFile {
        schema_version: SCHEMA_VERSION.into(),
        package: gog.package.clone(),
        binary_name: gog.binary_name.clone(),
        arch: gog.arch.clone(),
        functions: gog
            .functions
            .iter()
            .enumerate()
            .map(|(id, f)| FunctionRecord {
                id,
                name: f.name.clone(),
                is_thunk: f.is_thunk,
                blocks: f
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(id, b)| BlockRecord {
                        id,
                        features: b.0.clone(),
                    })
                    .collect(),
                edges: f.edges.iter().map(|&(s, d)| [s, d]).collect(),
            })
            .collect(),
        call_edges: gog.call_edges.iter().map(|&(s, d)| [s, d]).collect(),
    }
}

/// Canonical `gog-v1` text for a binary.
pub fn write_gog(gog: &Gog) -> Result<String, IngestError> {
    Ok(canonical_json(&to_file(gog))?)
}

pub fn read_gog_file(path: &Path) -> Result<Gog, IngestError> {
    let bytes = fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_gog(&bytes).map_err(|e| IngestError::InFile {
        path: path.to_owned(),
        source: Box::new(e),
    })
}

pub fn write_gog_file(gog: &Gog, path: &Path) -> Result<(), IngestError> {
    let text = write_gog(gog)?;
    write_atomic(path, text.as_bytes()).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if matches!(c, '/' | '\\' | '\0') { '_' } else { c })
        .collect()
}

/// Location of a binary inside a corpus directory:
/// `<package>/<arch>.gog.json`, or `<package>/<binary>.<arch>.gog.json` when
/// the binary is not named after its package.
pub fn corpus_relative_path(gog: &Gog) -> PathBuf {
    let pkg = sanitize(&gog.package);
    let arch = sanitize(&gog.arch);
    if gog.binary_name == gog.package {
        PathBuf::from(pkg).join(format!("{arch}{FILE_SUFFIX}"))
    } else {
        PathBuf::from(pkg).join(format!("{}.{arch}{FILE_SUFFIX}", sanitize(&gog.binary_name)))
    }
}

/// Reads every `*.gog.json` under `dir`, in sorted path order.
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus, IngestError> {
    let mut binaries = Vec::new();
    let mut seen = HashMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| IngestError::Io {
            path: e.path().unwrap_or(dir).to_owned(),
            source: e.into(),
        })?;
        let is_gog = entry.file_type().is_file()
            && entry.file_name().to_string_lossy().ends_with(FILE_SUFFIX);
        if !is_gog {
            continue;
        }
        let gog = read_gog_file(entry.path())?;
        let key = format!("{}/{}/{}", gog.package, gog.binary_name, gog.arch);
        if seen.insert(key.clone(), ()).is_some() {
            return Err(IngestError::Duplicate {
                path: entry.path().to_owned(),
                key,
            });
        }
        binaries.push(gog);
    }
    if binaries.is_empty() {
        return Err(IngestError::EmptyCorpus(dir.to_owned()));
    }
    Ok(Corpus::new(binaries, dir.display().to_string()))
}

/// Serializes every binary first, then writes each file atomically.
pub fn write_corpus_dir(corpus: &Corpus, dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let rendered = corpus
        .binaries
        .iter()
        .map(|g| Ok((corpus_relative_path(g), write_gog(g)?)))
        .collect::<Result<Vec<_>, IngestError>>()?;
    let mut written = Vec::with_capacity(rendered.len());
    for (rel, text) in rendered {
        let path = dir.join(&rel);
        write_atomic(&path, text.as_bytes()).map_err(|source| IngestError::Io {
            path: path.clone(),
            source,
        })?;
        written.push(rel);
    }
    Ok(written)
}

/// Removes thunk functions, dropping incident call edges and compacting ids.
pub fn strip_thunks(gog: &Gog) -> Gog {
    strip_thunks_mapped(gog).0
}

/// As [`strip_thunks`], also returning the original id of every kept function.
pub fn strip_thunks_mapped(gog: &Gog) -> (Gog, Vec<usize>) {
    let kept: Vec<usize> = (0..gog.functions.len())
        .filter(|&i| !gog.functions[i].is_thunk)
        .collect();
    let mut new_id = vec![usize::MAX; gog.functions.len()];
    for (n, &old) in kept.iter().enumerate() {
        new_id[old] = n;
    }
    let out = Gog {
        package: gog.package.clone(),
        binary_name: gog.binary_name.clone(),
        arch: gog.arch.clone(),
        functions: kept.iter().map(|&i| gog.functions[i].clone()).collect(),
        call_edges: gog
            .call_edges
            .iter()
            .filter_map(|&(s, d)| {
                let (s, d) = (*new_id.get(s)?, *new_id.get(d)?);
                (s != usize::MAX && d != usize::MAX).then_some((s, d))
            })
            .collect(),
    };
    (out, kept)
}

/// Outcome counts of [`dedupe_declarations`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DedupeReport {
    /// Declarations whose body was found and substituted.
    pub replaced: usize,
    /// Declarations with no bodied counterpart in the package.
    pub unresolved: usize,
}

/// Replaces body-less declarations with the same-named body from another
/// binary of the same package and architecture.
pub fn dedupe_declarations(binaries: Vec<Gog>) -> Result<(Vec<Gog>, DedupeReport), IngestError> {
    if let Some(first) = binaries.first() {
        if let Some(other) = binaries.iter().find(|b| b.package != first.package) {
            return Err(IngestError::MixedPackages {
                expected: first.package.clone(),
                found: other.package.clone(),
            });
        }
    }
    // (arch, name) -> (binary index, function index) of the first bodied definition
    let mut bodies: HashMap<(&str, &str), Vec<(usize, usize)>> = HashMap::new();
    for (bi, b) in binaries.iter().enumerate() {
        for (fi, f) in b.functions.iter().enumerate() {
            if let Some(name) = &f.name {
                if !f.is_thunk && !f.blocks.is_empty() && !f.is_declaration() {
                    bodies.entry((&b.arch, name)).or_default().push((bi, fi));
                }
            }
        }
    }
    let mut report = DedupeReport::default();
    let mut replacements = Vec::new();
    for (bi, b) in binaries.iter().enumerate() {
        for (fi, f) in b.functions.iter().enumerate() {
            let Some(name) = &f.name else { continue };
            if f.is_thunk || !f.is_declaration() {
                continue;
            }
            let source = bodies
                .get(&(b.arch.as_str(), name.as_str()))
                .and_then(|c| c.iter().find(|&&(other, _)| other != bi));
            match source {
                Some(&(sb, sf)) => {
                    report.replaced += 1;
                    replacements.push((bi, fi, sb, sf));
                }
                None => report.unresolved += 1,
            }
        }
    }
    let mut out = binaries.clone();
    for (bi, fi, sb, sf) in replacements {
        let body = &binaries[sb].functions[sf];
        out[bi].functions[fi].blocks = body.blocks.clone();
        out[bi].functions[fi].edges = body.edges.clone();
    }
    Ok((out, report))
}

/// Hygiene passes applied before training or evaluation: per-package
/// declaration deduplication followed by thunk removal.
pub fn prepare_corpus(corpus: &Corpus) -> Result<(Corpus, DedupeReport), IngestError> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, b) in corpus.binaries.iter().enumerate() {
        match groups.iter_mut().find(|(p, _)| *p == b.package) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((b.package.clone(), vec![i])),
        }
    }
    let mut out: Vec<Option<Gog>> = vec![None; corpus.len()];
    let mut total = DedupeReport::default();
    for (_, idx) in groups {
        let members = idx.iter().map(|&i| corpus.binaries[i].clone()).collect();
        let (deduped, report) = dedupe_declarations(members)?;
        total.replaced += report.replaced;
        total.unresolved += report.unresolved;
        for (i, g) in idx.into_iter().zip(deduped) {
            out[i] = Some(strip_thunks(&g));
        }
    }
    let binaries = out.into_iter().map(|g| g.expect("every binary grouped")).collect();
    Ok((Corpus::new(binaries, corpus.provenance.clone()), total))
}
