//! Ingestion of post metadata, user profiles and embedding blocks, the join
//! into a [`Dataset`], and the missing-data policy.
//!
//! File layouts:
//!
//! - posts: CSV with header [`POSTS_HEADER`] (blank cell = missing) or JSONL
//!   with the same keys.
//! - profiles: CSV with header [`PROFILES_HEADER`].
//! - embeddings: little-endian `FEMB` binary (see [`write_femb`]) or a CSV
//!   fallback `pid,v0,...,v{dim-1}` whose block name is the file stem.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POSTS_HEADER: [&str; 12] = [
    "uid",
    "pid",
    "timestamp",
    "latitude",
    "longitude",
    "geoaccuracy",
    "category",
    "subcategory",
    "concept",
    "mediatype",
    "ispublic",
    "label",
];

pub const COUNTER_FIELDS: [&str; 8] = [
    "follower",
    "following",
    "totalViews",
    "totalFaves",
    "totalInGroup",
    "totalTags",
    "totalGeotagged",
    "totalImages",
];

pub const PROFILES_HEADER: [&str; 9] = [
    "uid",
    "follower",
    "following",
    "totalViews",
    "totalFaves",
    "totalInGroup",
    "totalTags",
    "totalGeotagged",
    "totalImages",
];

/// Literal category assigned to missing categorical values.
pub const UNKNOWN: &str = "unknown";

/// One social post's metadata.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostRecord {
    pub uid: String,
    pub pid: u64,
    pub timestamp: i64,
    #[serde(default)]
    pub latitude: Option<f64>,
    #[serde(default)]
    pub longitude: Option<f64>,
    #[serde(default)]
    pub geoaccuracy: Option<u8>,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub subcategory: Option<String>,
    #[serde(default)]
    pub concept: Option<String>,
    #[serde(default)]
    pub mediatype: Option<String>,
    #[serde(default)]
    pub ispublic: Option<bool>,
    #[serde(default)]
    pub label: Option<f64>,
}

/// Categorical fields of a post, in feature order.
pub const CATEGORICAL_FIELDS: [&str; 5] = [
    "category",
    "subcategory",
    "concept",
    "mediatype",
    "ispublic",
];

impl PostRecord {
    /// Categorical value by field name; `ispublic` renders as `true`/`false`.
    pub fn categorical(&self, field: &str) -> Option<String> {
        match field {
            "category" => self.category.clone(),
            "subcategory" => self.subcategory.clone(),
            "concept" => self.concept.clone(),
            "mediatype" => self.mediatype.clone(),
            "ispublic" => self.ispublic.map(|b| b.to_string()),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match (self.latitude, self.longitude) {
            (Some(lat), Some(lon)) => {
                if !(-90.0..=90.0).contains(&lat) {
                    return Err(Error::OutOfRange {
                        pid: self.pid,
                        field: "latitude",
                        value: lat,
                    });
                }
                if !(-180.0..=180.0).contains(&lon) {
                    return Err(Error::OutOfRange {
                        pid: self.pid,
                        field: "longitude",
                        value: lon,
                    });
                }
            }
            (None, None) => {}
            (Some(v), None) | (None, Some(v)) => {
                return Err(Error::OutOfRange {
                    pid: self.pid,
                    field: "latitude/longitude (only one present)",
                    value: v,
                })
            }
        }
        if let Some(acc) = self.geoaccuracy {
            if acc > 16 {
                return Err(Error::OutOfRange {
                    pid: self.pid,
                    field: "geoaccuracy",
                    value: acc as f64,
                });
            }
        }
        if let Some(l) = self.label {
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("label of pid {}", self.pid)));
            }
        }
        Ok(())
    }
}

/// External identity-related counters for one user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub uid: String,
    pub follower: Option<u64>,
    pub following: Option<u64>,
    pub total_views: Option<u64>,
    pub total_faves: Option<u64>,
    pub total_in_group: Option<u64>,
    pub total_tags: Option<u64>,
    pub total_geotagged: Option<u64>,
    pub total_images: Option<u64>,
}

impl UserProfile {
    /// Counters in [`COUNTER_FIELDS`] order.
    pub fn counters(&self) -> [Option<u64>; 8] {
        [
            self.follower,
            self.following,
            self.total_views,
            self.total_faves,
            self.total_in_group,
            self.total_tags,
            self.total_geotagged,
            self.total_images,
        ]
    }

    fn counters_mut(&mut self) -> [&mut Option<u64>; 8] {
        [
            &mut self.follower,
            &mut self.following,
            &mut self.total_views,
            &mut self.total_faves,
            &mut self.total_in_group,
            &mut self.total_tags,
            &mut self.total_geotagged,
            &mut self.total_images,
        ]
    }

    pub fn from_counters(uid: impl Into<String>, c: [Option<u64>; 8]) -> Self {
        let mut p = UserProfile {
            uid: uid.into(),
            ..Default::default()
        };
        for (slot, v) in p.counters_mut().into_iter().zip(c) {
            *slot = v;
        }
        p
    }
}

/// A named table of dense vectors keyed by post id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub name: String,
    pub dim: usize,
    pub rows: BTreeMap<u64, Vec<f32>>,
}

impl EmbeddingBlock {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, pid: u64, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "block `{}` has dim {}, row for pid {pid} has {}",
                self.name,
                self.dim,
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "block `{}` row for pid {pid}",
                self.name
            )));
        }
        if self.rows.insert(pid, v).is_some() {
            return Err(Error::DuplicatePid(pid));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostFormat {
    Csv,
    Jsonl,
}

impl PostFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => PostFormat::Jsonl,
            _ => PostFormat::Csv,
        }
    }
}

fn cell(rec: &csv::StringRecord, i: usize) -> Option<&str> {
    rec.get(i).map(str::trim).filter(|s| !s.is_empty())
}

fn parse_opt<T: std::str::FromStr>(
    raw: Option<&str>,
    field: &str,
    path: &Path,
    line: u64,
) -> Result<Option<T>> {
    raw.map(|s| {
        s.parse::<T>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("cannot parse {field} from `{s}`"),
        })
    })
    .transpose()
}

fn parse_bool(raw: Option<&str>, path: &Path, line: u64) -> Result<Option<bool>> {
    match raw {
        None => Ok(None),
        Some("1") | Some("true") | Some("True") | Some("TRUE") => Ok(Some(true)),
        Some("0") | Some("false") | Some("False") | Some("FALSE") => Ok(Some(false)),
        Some(other) => Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("cannot parse ispublic from `{other}`"),
        }),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    let message = e.to_string();
    if let csv::ErrorKind::Io(io) = e.into_kind() {
        return Error::io(path, io);
    }
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

fn check_header(path: &Path, rdr: &mut csv::Reader<fs::File>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| csv_error(path, e))?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Header {
            path: path.to_path_buf(),
            expected: expected.join(","),
        });
    }
    Ok(())
}

fn check_unique_pids(posts: &[PostRecord]) -> Result<()> {
    let mut seen = HashSet::with_capacity(posts.len());
    for p in posts {
        if !seen.insert(p.pid) {
            return Err(Error::DuplicatePid(p.pid));
        }
    }
    Ok(())
}

/// Reads a posts file, preserving file order.
pub fn load_posts(path: &Path, format: PostFormat) -> Result<Vec<PostRecord>> {
    let posts = match format {
        PostFormat::Csv => load_posts_csv(path)?,
        PostFormat::Jsonl => load_posts_jsonl(path)?,
    };
    check_unique_pids(&posts)?;
    Ok(posts)
}

fn load_posts_csv(path: &Path) -> Result<Vec<PostRecord>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &POSTS_HEADER)?;
    let mut posts = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let required = |i: usize| {
            cell(&rec, i).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("missing required field {}", POSTS_HEADER[i]),
            })
        };
        let uid = required(0)?.to_string();
        let pid = parse_opt::<u64>(Some(required(1)?), "pid", path, line)?.unwrap();
        let timestamp = parse_opt::<i64>(Some(required(2)?), "timestamp", path, line)?.unwrap();
        let post = PostRecord {
            uid,
            pid,
            timestamp,
            latitude: parse_opt(cell(&rec, 3), "latitude", path, line)?,
            longitude: parse_opt(cell(&rec, 4), "longitude", path, line)?,
            geoaccuracy: parse_opt(cell(&rec, 5), "geoaccuracy", path, line)?,
            category: cell(&rec, 6).map(String::from),
            subcategory: cell(&rec, 7).map(String::from),
            concept: cell(&rec, 8).map(String::from),
            mediatype: cell(&rec, 9).map(String::from),
            ispublic: parse_bool(cell(&rec, 10), path, line)?,
            label: parse_opt(cell(&rec, 11), "label", path, line)?,
        };
        post.validate()?;
        posts.push(post);
    }
    Ok(posts)
}

fn load_posts_jsonl(path: &Path) -> Result<Vec<PostRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut posts = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let post: PostRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        post.validate()?;
        posts.push(post);
    }
    Ok(posts)
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Writes posts as CSV (or JSONL) such that [`load_posts`] reproduces them.
pub fn write_posts(path: &Path, posts: &[PostRecord], format: PostFormat) -> Result<()> {
    match format {
        PostFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
            w.write_record(POSTS_HEADER)
                .map_err(|e| csv_error(path, e))?;
            for p in posts {
                w.write_record([
                    p.uid.clone(),
                    p.pid.to_string(),
                    p.timestamp.to_string(),
                    fmt_opt(&p.latitude),
                    fmt_opt(&p.longitude),
                    fmt_opt(&p.geoaccuracy),
                    fmt_opt(&p.category),
                    fmt_opt(&p.subcategory),
                    fmt_opt(&p.concept),
                    fmt_opt(&p.mediatype),
                    fmt_opt(&p.ispublic),
                    fmt_opt(&p.label),
                ])
                .map_err(|e| csv_error(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        PostFormat::Jsonl => {
            let mut out = String::new();
            for p in posts {
                out.push_str(&serde_json::to_string(p)?);
                out.push('\n');
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))
        }
    }
}

/// Reads the profiles CSV into a map keyed by uid.
pub fn load_profiles(path: &Path) -> Result<BTreeMap<String, UserProfile>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &PROFILES_HEADER)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let uid = cell(&rec, 0)
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "missing uid".into(),
            })?
            .to_string();
        let mut counters = [None; 8];
        for (k, slot) in counters.iter_mut().enumerate() {
            let field = COUNTER_FIELDS[k];
            if let Some(v) = parse_opt::<i64>(cell(&rec, k + 1), field, path, line)? {
                if v < 0 {
                    return Err(Error::NegativeCounter {
                        uid,
                        field: field.to_string(),
                    });
                }
                *slot = Some(v as u64);
            }
        }
        if out.contains_key(&uid) {
            return Err(Error::DuplicateUid(uid));
        }
        out.insert(uid.clone(), UserProfile::from_counters(uid, counters));
    }
    Ok(out)
}

pub fn write_profiles<'a>(
    path: &Path,
    profiles: impl IntoIterator<Item = &'a UserProfile>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(PROFILES_HEADER)
        .map_err(|e| csv_error(path, e))?;
    for p in profiles {
        let mut rec = vec![p.uid.clone()];
        rec.extend(p.counters().iter().map(fmt_opt));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const FEMB_MAGIC: &[u8; 4] = b"FEMB";
const FEMB_VERSION: u32 = 1;

/// Serializes a block in the FEMB binary layout: magic `FEMB`, u32 version,
/// u8 name length, name bytes, u32 dim, u64 count, then `count` records of
/// (u64 pid, dim x f32), all little-endian. Records are written in pid order.
pub fn femb_bytes(block: &EmbeddingBlock) -> Result<Vec<u8>> {
    let name = block.name.as_bytes();
    let name_len = u8::try_from(name.len())
        .map_err(|_| Error::Config(format!("block name `{}` longer than 255 bytes", block.name)))?;
    let mut buf = Vec::with_capacity(21 + name.len() + block.rows.len() * (8 + 4 * block.dim));
    buf.extend_from_slice(FEMB_MAGIC);
    buf.extend_from_slice(&FEMB_VERSION.to_le_bytes());
    buf.push(name_len);
    buf.extend_from_slice(name);
    buf.extend_from_slice(&(block.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(block.rows.len() as u64).to_le_bytes());
    for (pid, v) in &block.rows {
        buf.extend_from_slice(&pid.to_le_bytes());
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_femb(path: &Path, block: &EmbeddingBlock) -> Result<()> {
    let bytes = femb_bytes(block)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses FEMB bytes. `path` is only used for error messages.
pub fn parse_femb(bytes: &[u8], path: &Path) -> Result<EmbeddingBlock> {
    let err = |message: String| Error::Femb {
        path: path.to_path_buf(),
        message,
    };
    let truncated = || err("truncated file".into());
    let mut cur = ByteCursor { buf: bytes, pos: 0 };
    if cur.take(4).ok_or_else(truncated)? != FEMB_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = cur.u32().ok_or_else(truncated)?;
    if version != FEMB_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let name_len = cur.take(1).ok_or_else(truncated)?[0] as usize;
    let name = std::str::from_utf8(cur.take(name_len).ok_or_else(truncated)?)
        .map_err(|_| err("block name is not UTF-8".into()))?
        .to_string();
    let dim = cur.u32().ok_or_else(truncated)? as usize;
    if dim == 0 {
        return Err(err("dim must be positive".into()));
    }
    let count = cur.u64().ok_or_else(truncated)?;
    let mut block = EmbeddingBlock::new(name, dim);
    for _ in 0..count {
        let pid = cur.u64().ok_or_else(truncated)?;
        let raw = cur.take(4 * dim).ok_or_else(truncated)?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        block.insert(pid, v)?;
    }
    if cur.pos != bytes.len() {
        return Err(err(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - cur.pos
        )));
    }
    Ok(block)
}

fn load_embedding_csv(path: &Path) -> Result<EmbeddingBlock> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let dim = header.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("pid".to_string())
        .chain((0..dim).map(|i| format!("v{i}")))
        .collect();
    if dim == 0
        || header
            .iter()
            .map(str::trim)
            .ne(expected.iter().map(String::as_str))
    {
        return Err(Error::Header {
            path: path.to_path_buf(),
            expected: "pid,v0,...,v{dim-1}".into(),
        });
    }
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string();
    let mut block = EmbeddingBlock::new(name, dim);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let pid =
            parse_opt::<u64>(cell(&rec, 0), "pid", path, line)?.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "missing pid".into(),
            })?;
        let mut v = Vec::with_capacity(dim);
        for i in 0..dim {
            let x =
                parse_opt::<f32>(cell(&rec, i + 1), "component", path, line)?.ok_or_else(|| {
                    Error::Parse {
                        path: path.to_path_buf(),
                        line,
                        message: format!("missing component v{i}"),
                    }
                })?;
            v.push(x);
        }
        block.insert(pid, v)?;
    }
    Ok(block)
}

/// Loads an embedding block. `.csv` files use the CSV fallback; anything
/// else must be FEMB.
pub fn load_embedding_block(path: &Path) -> Result<EmbeddingBlock> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        return load_embedding_csv(path);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_femb(&bytes, path)
}

/// Posts, profiles and embeddings joined on uid/pid, with per-row flags for
/// lookups that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub posts: Vec<PostRecord>,
    pub profiles: BTreeMap<String, UserProfile>,
    pub blocks: Vec<EmbeddingBlock>,
    profile_missing: Vec<bool>,
    /// `[block][post]`
    embedding_missing: Vec<Vec<bool>>,
}

/// Joins posts with profiles (by uid) and embedding blocks (by pid).
///
/// Missing lookups are flagged rather than rejected; an embedding row whose
/// pid matches no post is an error.
pub fn join_dataset(
    posts: Vec<PostRecord>,
    profiles: BTreeMap<String, UserProfile>,
    blocks: Vec<EmbeddingBlock>,
) -> Result<Dataset> {
    check_unique_pids(&posts)?;
    let pids: HashSet<u64> = posts.iter().map(|p| p.pid).collect();
    let mut names = HashSet::new();
    for b in &blocks {
        if !names.insert(b.name.as_str()) {
            return Err(Error::Config(format!(
                "duplicate embedding block `{}`",
                b.name
            )));
        }
        if let Some(&pid) = b.rows.keys().find(|pid| !pids.contains(pid)) {
            return Err(Error::OrphanPid {
                block: b.name.clone(),
                pid,
            });
        }
    }
    let profile_missing = posts
        .iter()
        .map(|p| !profiles.contains_key(&p.uid))
        .collect();
    let embedding_missing = blocks
        .iter()
        .map(|b| posts.iter().map(|p| !b.rows.contains_key(&p.pid)).collect())
        .collect();
    Ok(Dataset {
        posts,
        profiles,
        blocks,
        profile_missing,
        embedding_missing,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn profile_missing(&self, row: usize) -> bool {
        self.profile_missing[row]
    }

    pub fn embedding_missing(&self, block: usize, row: usize) -> bool {
        self.embedding_missing[block][row]
    }

    pub fn block(&self, name: &str) -> Option<(usize, &EmbeddingBlock)> {
        self.blocks.iter().enumerate().find(|(_, b)| b.name == name)
    }

    pub fn profile_for(&self, row: usize) -> Option<&UserProfile> {
        self.profiles.get(&self.posts[row].uid)
    }

    pub fn pids(&self) -> Vec<u64> {
        self.posts.iter().map(|p| p.pid).collect()
    }

    /// All labels, or an error naming the first unlabeled pid.
    pub fn labels(&self) -> Result<Vec<f64>> {
        self.posts
            .iter()
            .map(|p| {
                p.label
                    .ok_or_else(|| Error::MissingLabel(format!("pid {} has no label", p.pid)))
            })
            .collect()
    }

    /// Number of rows with at least one failed lookup.
    pub fn missing_flag_count(&self) -> usize {
        (0..self.len())
            .filter(|&i| self.profile_missing[i] || self.embedding_missing.iter().any(|b| b[i]))
            .count()
    }

    /// Restricts the dataset to the given rows (in the given order). Embedding
    /// rows of dropped posts are dropped; the profile table is kept as is.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let posts: Vec<PostRecord> = rows.iter().map(|&i| self.posts[i].clone()).collect();
        let keep: HashSet<u64> = posts.iter().map(|p| p.pid).collect();
        let blocks = self
            .blocks
            .iter()
            .map(|b| EmbeddingBlock {
                name: b.name.clone(),
                dim: b.dim,
                rows: b
                    .rows
                    .iter()
                    .filter(|(pid, _)| keep.contains(pid))
                    .map(|(k, v)| (*k, v.clone()))
                    .collect(),
            })
            .collect();
        Dataset {
            posts,
            profiles: self.profiles.clone(),
            blocks,
            profile_missing: rows.iter().map(|&i| self.profile_missing[i]).collect(),
            embedding_missing: self
                .embedding_missing
                .iter()
                .map(|b| rows.iter().map(|&i| b[i]).collect())
                .collect(),
        }
    }

    /// Distinct uids with their post counts.
    pub fn uid_counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for p in &self.posts {
            *m.entry(p.uid.as_str()).or_insert(0) += 1;
        }
        m
    }
}

/// Standard on-disk layout for a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub posts: PathBuf,
    pub profiles: Option<PathBuf>,
    pub embeddings: Vec<PathBuf>,
}

impl DatasetFiles {
    /// Locates `posts.csv`/`posts.jsonl`, `profiles.csv` and
    /// `embeddings/*.{femb,csv}` under `dir`.
    pub fn discover(dir: &Path) -> Result<Self> {
        let posts = ["posts.csv", "posts.jsonl"]
            .iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::io(
                    dir.join("posts.csv"),
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no posts file"),
                )
            })?;
        let profiles = Some(dir.join("profiles.csv")).filter(|p| p.is_file());
        let mut embeddings = Vec::new();
        let emb_dir = dir.join("embeddings");
        if emb_dir.is_dir() {
            for entry in fs::read_dir(&emb_dir).map_err(|e| Error::io(&emb_dir, e))? {
                let path = entry.map_err(|e| Error::io(&emb_dir, e))?.path();
                if matches!(
                    path.extension().and_then(|e| e.to_str()),
                    Some("femb") | Some("csv")
                ) {
                    embeddings.push(path);
                }
            }
        }
        embeddings.sort();
        Ok(Self {
            posts,
            profiles,
            embeddings,
        })
    }

    pub fn all(&self) -> Vec<&Path> {
        std::iter::once(self.posts.as_path())
            .chain(self.profiles.as_deref())
            .chain(self.embeddings.iter().map(PathBuf::as_path))
            .collect()
    }
}

/// Loads and joins a dataset directory.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let files = DatasetFiles::discover(dir)?;
    let posts = load_posts(&files.posts, PostFormat::from_path(&files.posts))?;
    let profiles = match &files.profiles {
        Some(p) => load_profiles(p)?,
        None => BTreeMap::new(),
    };
    let blocks = files
        .embeddings
        .iter()
        .map(|p| load_embedding_block(p))
        .collect::<Result<Vec<_>>>()?;
    join_dataset(posts, profiles, blocks)
}

/// Writes a dataset in the layout read by [`load_dataset_dir`].
pub fn write_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("embeddings")).map_err(|e| Error::io(dir, e))?;
    write_posts(&dir.join("posts.csv"), &ds.posts, PostFormat::Csv)?;
    write_profiles(&dir.join("profiles.csv"), ds.profiles.values())?;
    for b in &ds.blocks {
        write_femb(&dir.join("embeddings").join(format!("{}.femb", b.name)), b)?;
    }
    Ok(())
}

/// Numeric columns subject to median imputation.
pub const NUMERIC_COLUMNS: [&str; 9] = [
    "geoaccuracy",
    "follower",
    "following",
    "totalViews",
    "totalFaves",
    "totalInGroup",
    "totalTags",
    "totalGeotagged",
    "totalImages",
];

/// Per-column training medians.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImputeStats {
    pub medians: BTreeMap<String, u64>,
}

impl ImputeStats {
    fn get(&self, column: &str) -> Result<u64> {
        self.medians
            .get(column)
            .copied()
            .ok_or_else(|| Error::MissingStat(column.to_string()))
    }
}

/// Lower median (the ceil(n/2)-th order statistic), so the imputed value is
/// always an observed integer. `None` for an empty column.
pub fn lower_median(values: &mut [u64]) -> Option<u64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    Some(values[(values.len() - 1) / 2])
}

fn fit_impute_stats(ds: &Dataset) -> ImputeStats {
    let mut cols: Vec<Vec<u64>> = vec![Vec::new(); NUMERIC_COLUMNS.len()];
    for (i, post) in ds.posts.iter().enumerate() {
        if let Some(a) = post.geoaccuracy {
            cols[0].push(a as u64);
        }
        if !ds.profile_missing[i] {
            if let Some(profile) = ds.profiles.get(&post.uid) {
                for (k, c) in profile.counters().iter().enumerate() {
                    if let Some(v) = c {
                        cols[k + 1].push(*v);
                    }
                }
            }
        }
    }
    let medians = NUMERIC_COLUMNS
        .iter()
        .zip(cols.iter_mut())
        // An all-missing training column falls back to 0.
        .map(|(name, v)| (name.to_string(), lower_median(v).unwrap_or(0)))
        .collect();
    ImputeStats { medians }
}

/// Applies the missing-data policy.
///
/// With `stats = None` the medians are fitted on `ds` itself (which must be
/// a training split). Numeric gaps take the training median, categorical
/// gaps become [`UNKNOWN`], users without a profile get an all-median profile
/// and missing embedding rows become zero vectors. The missing flags are kept
/// so the feature builder can emit indicator columns. Latitude/longitude and
/// `ispublic` stay unset; their encoders map absence to the unknown slot.
pub fn impute_missing(ds: &Dataset, stats: Option<&ImputeStats>) -> Result<(Dataset, ImputeStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => fit_impute_stats(ds),
    };
    let mut out = ds.clone();

    if out.posts.iter().any(|p| p.geoaccuracy.is_none()) {
        let m = stats.get("geoaccuracy")?;
        let m = u8::try_from(m).map_err(|_| Error::Config(format!("geoaccuracy median {m}")))?;
        for p in out.posts.iter_mut().filter(|p| p.geoaccuracy.is_none()) {
            p.geoaccuracy = Some(m);
        }
    }
    for p in out.posts.iter_mut() {
        for slot in [
            &mut p.category,
            &mut p.subcategory,
            &mut p.concept,
            &mut p.mediatype,
        ] {
            if slot.is_none() {
                *slot = Some(UNKNOWN.to_string());
            }
        }
    }

    // Only profiles referenced by this split are completed.
    let uids: BTreeSet<String> = out.posts.iter().map(|p| p.uid.clone()).collect();
    for uid in uids {
        let profile = out
            .profiles
            .entry(uid.clone())
            .or_insert_with(|| UserProfile {
                uid,
                ..Default::default()
            });
        for (k, slot) in profile.counters_mut().into_iter().enumerate() {
            if slot.is_none() {
                *slot = Some(stats.get(COUNTER_FIELDS[k])?);
            }
        }
    }

    let pids: Vec<u64> = out.posts.iter().map(|p| p.pid).collect();
    for b in out.blocks.iter_mut() {
        for pid in &pids {
            if !b.rows.contains_key(pid) {
                b.rows.insert(*pid, vec![0.0; b.dim]);
            }
        }
    }
    Ok((out, stats))
}

/// Digest helper for manifests: hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes a two-column `pid,<value_name>` CSV (predictions, labels).
pub fn write_pid_values(path: &Path, value_name: &str, pids: &[u64], values: &[f64]) -> Result<()> {
    if pids.len() != values.len() {
        return Err(Error::Shape(format!(
            "{} pids but {} values",
            pids.len(),
            values.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["pid", value_name])
        .map_err(|e| csv_error(path, e))?;
    for (pid, v) in pids.iter().zip(values) {
        w.write_record([pid.to_string(), v.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `pid,<value>` CSV written by [`write_pid_values`], in file order.
pub fn load_pid_values(path: &Path) -> Result<Vec<(u64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "pid" {
        return Err(Error::Header {
            path: path.to_path_buf(),
            expected: "pid,<value>".into(),
        });
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let pid: u64 = rec[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("pid: {e}")))?;
        let v: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("value: {e}")))?;
        if !v.is_finite() {
            return Err(parse_err(format!("non-finite value for pid {pid}")));
        }
        if !seen.insert(pid) {
            return Err(Error::DuplicatePid(pid));
        }
        out.push((pid, v));
    }
    Ok(out)
}

/// Values of `pairs` reordered to follow `pids`; every pid must be present.
pub fn align_to_pids(pairs: &[(u64, f64)], pids: &[u64]) -> Result<Vec<f64>> {
    let map: HashMap<u64, f64> = pairs.iter().copied().collect();
    pids.iter()
        .map(|pid| {
            map.get(pid)
                .copied()
                .ok_or_else(|| Error::MissingLabel(format!("no value for pid {pid}")))
        })
        .collect()
}

/// Sets post labels from a `pid -> label` table; every post must be covered.
pub fn attach_labels(ds: &mut Dataset, labels: &[(u64, f64)]) -> Result<()> {
    let values = align_to_pids(labels, &ds.pids())?;
    for (p, v) in ds.posts.iter_mut().zip(values) {
        p.label = Some(v);
    }
    Ok(())
}

/// Index from uid to the rows it owns, in first-appearance order.
pub fn rows_by_uid(ds: &Dataset) -> HashMap<&str, Vec<usize>> {
    let mut m: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, p) in ds.posts.iter().enumerate() {
        m.entry(p.uid.as_str()).or_default().push(i);
    }
    m
}
