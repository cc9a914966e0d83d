//! Multi-modal feature transformation: turns each data domain of a
//! [`Dataset`] into a named block of numeric columns and concatenates the
//! blocks into one [`FeatureMatrix`].
//!
//! Blocks always appear in the canonical order
//! `cap, image, time, geo, n, eu, single_lang, multi_lang, cat, m`.
//! All fitted statistics (imputation medians, category maps, PCA bases) live
//! in a [`TransformState`] fitted on one training split and then applied,
//! unchanged, to any other split.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ImputeStats, CATEGORICAL_FIELDS, COUNTER_FIELDS, UNKNOWN};
use crate::error::{Error, Result};
use crate::numlin::{fit_pca, transform_pca, Matrix, PcaModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockTag {
    Cap,
    Image,
    Time,
    Geo,
    N,
    Eu,
    SingleLang,
    MultiLang,
    Cat,
    M,
}

impl BlockTag {
    /// Canonical aggregation order.
    pub const ALL: [BlockTag; 10] = [
        BlockTag::Cap,
        BlockTag::Image,
        BlockTag::Time,
        BlockTag::Geo,
        BlockTag::N,
        BlockTag::Eu,
        BlockTag::SingleLang,
        BlockTag::MultiLang,
        BlockTag::Cat,
        BlockTag::M,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockTag::Cap => "cap",
            BlockTag::Image => "image",
            BlockTag::Time => "time",
            BlockTag::Geo => "geo",
            BlockTag::N => "n",
            BlockTag::Eu => "eu",
            BlockTag::SingleLang => "single_lang",
            BlockTag::MultiLang => "multi_lang",
            BlockTag::Cat => "cat",
            BlockTag::M => "m",
        }
    }

    /// Whether the block is sourced from an embedding file of the same name.
    pub fn is_embedding(self) -> bool {
        matches!(
            self,
            BlockTag::Cap
                | BlockTag::Image
                | BlockTag::SingleLang
                | BlockTag::MultiLang
                | BlockTag::M
        )
    }
}

impl fmt::Display for BlockTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s.trim())
            .ok_or_else(|| Error::UnknownBlock(s.trim().to_string()))
    }
}

/// Parses a comma-separated tag list (`all` selects every block) and returns
/// it in canonical order without duplicates.
pub fn parse_block_list(s: &str) -> Result<Vec<BlockTag>> {
    if s.trim() == "all" {
        return Ok(BlockTag::ALL.to_vec());
    }
    let tags = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(BlockTag::from_str)
        .collect::<Result<Vec<_>>>()?;
    Ok(canonical(&tags))
}

pub fn canonical(tags: &[BlockTag]) -> Vec<BlockTag> {
    tags.iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

pub fn format_block_list(tags: &[BlockTag]) -> String {
    tags.iter()
        .map(|t| t.as_str())
        .collect::<Vec<_>>()
        .join("+")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpan {
    pub tag: BlockTag,
    pub start: usize,
    pub width: usize,
}

/// Column layout of a feature matrix: contiguous, non-overlapping blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchema {
    pub blocks: Vec<BlockSpan>,
}

impl BlockSchema {
    fn push(&mut self, tag: BlockTag, width: usize) {
        let start = self.total_width();
        self.blocks.push(BlockSpan { tag, start, width });
    }

    pub fn total_width(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.start + b.width)
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockTag, usize, usize)> + '_ {
        self.blocks.iter().map(|b| (b.tag, b.start, b.width))
    }

    pub fn get(&self, tag: BlockTag) -> Option<&BlockSpan> {
        self.blocks.iter().find(|b| b.tag == tag)
    }

    pub fn tags(&self) -> Vec<BlockTag> {
        self.blocks.iter().map(|b| b.tag).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    /// Raw numeric value (time parts, geoaccuracy, profile counters).
    Numeric,
    /// Count-valued raw numeric column with a heavy right tail.
    Count,
    OneHot,
    /// 0/1 flag recording that a value was imputed.
    Indicator,
    /// Principal-component score of an embedding block.
    Embedding,
}

/// Dense row-per-post feature matrix with its block layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Matrix,
    pub schema: BlockSchema,
    pub pids: Vec<u64>,
    pub column_names: Vec<String>,
    pub column_kinds: Vec<ColumnKind>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.cols()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.values.iter_rows().map(|r| r[c]).collect()
    }

    /// CSV export with a `pid` column followed by block-prefixed headers.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pid");
        for name in &self.column_names {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for (pid, row) in self.pids.iter().zip(self.values.iter_rows()) {
            s.push_str(&pid.to_string());
            for v in row {
                s.push(',');
                s.push_str(&v.to_string());
            }
            s.push('\n');
        }
        s
    }
}

/// Keeps only the columns of the blocks in `keep`, preserving their relative
/// order; the schema is re-based at column 0.
pub fn select_blocks(matrix: &FeatureMatrix, keep: &[BlockTag]) -> Result<FeatureMatrix> {
    let present = matrix.schema.tags();
    if let Some(t) = keep.iter().find(|t| !present.contains(t)) {
        return Err(Error::UnknownBlock(t.to_string()));
    }
    let mut schema = BlockSchema::default();
    let mut cols = Vec::new();
    for (tag, start, width) in matrix.schema.iter() {
        if keep.contains(&tag) {
            schema.push(tag, width);
            cols.extend(start..start + width);
        }
    }
    Ok(FeatureMatrix {
        values: matrix.values.select_columns(&cols),
        schema,
        pids: matrix.pids.clone(),
        column_names: cols
            .iter()
            .map(|&c| matrix.column_names[c].clone())
            .collect(),
        column_kinds: cols.iter().map(|&c| matrix.column_kinds[c]).collect(),
    })
}

// ---------------------------------------------------------------------------
// Per-domain transforms
// ---------------------------------------------------------------------------

/// Calendar fields of a UTC timestamp. `weekday` is 0 for Monday.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeParts {
    pub year: i64,
    pub month: u32,
    pub day: u32,
    pub weekday: u32,
    pub hour: u32,
}

impl TimeParts {
    pub fn as_features(&self) -> [f64; 5] {
        [
            self.year as f64,
            self.month as f64,
            self.day as f64,
            self.weekday as f64,
            self.hour as f64,
        ]
    }
}

/// Splits seconds since the Unix epoch into proleptic Gregorian UTC fields.
pub fn decompose_timestamp(ts: i64) -> TimeParts {
    let days = ts.div_euclid(86_400);
    let secs = ts.rem_euclid(86_400);
    // 1970-01-01 was a Thursday (Monday = 0).
    let weekday = (days + 3).rem_euclid(7) as u32;

    // Days-to-civil conversion over 400-year eras, epoch shifted to 0000-03-01.
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let day = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let month = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let year = yoe + era * 400 + i64::from(month <= 2);

    TimeParts {
        year,
        month,
        day,
        weekday,
        hour: (secs / 3600) as u32,
    }
}

/// Grid cell id of a coordinate at the given resolution (degrees). Cells on
/// the north and east edges absorb lat = 90 and lon = 180.
pub fn bucket_geo(lat: f64, lon: f64, resolution: f64) -> Result<String> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::Config(format!(
            "geo resolution {resolution} must be > 0"
        )));
    }
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Config(format!(
            "coordinate ({lat}, {lon}) outside the valid range"
        )));
    }
    let n_lat = (180.0 / resolution).ceil() as i64;
    let n_lon = (360.0 / resolution).ceil() as i64;
    let i = (((lat + 90.0) / resolution).floor() as i64).min(n_lat - 1);
    let j = (((lon + 180.0) / resolution).floor() as i64).min(n_lon - 1);
    Ok(format!("g{i}_{j}"))
}

/// One-hot vocabulary. Slot 0 is reserved for unknown/unseen values; known
/// categories follow in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryMap {
    pub categories: Vec<String>,
}

impl CategoryMap {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = values.into_iter().filter(|v| *v != UNKNOWN).collect();
        Self {
            categories: set.into_iter().map(String::from).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.categories.len() + 1
    }

    pub fn slot(&self, value: &str) -> usize {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(value))
            .map_or(0, |i| i + 1)
    }

    pub fn apply(&self, value: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        v[self.slot(value)] = 1.0;
        v
    }

    fn column_names(&self, prefix: &str) -> impl Iterator<Item = String> + '_ {
        let prefix = prefix.to_string();
        std::iter::once(UNKNOWN)
            .chain(self.categories.iter().map(String::as_str))
            .map(move |c| format!("{prefix}={c}"))
    }
}

/// Z-score parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Sample mean and standard deviation (n-1); a std below 1e-12 becomes 1.
pub fn fit_standardize(column: &[f64]) -> Result<Standardizer> {
    if column.is_empty() {
        return Err(Error::InsufficientData(
            "cannot standardize an empty column".into(),
        ));
    }
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = if column.len() > 1 {
        column.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let std = var.sqrt();
    Ok(Standardizer {
        mean,
        std: if std < 1e-12 { 1.0 } else { std },
    })
}

/// Target size of a PCA-reduced embedding block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReductionTarget {
    pub variance: f64,
    pub max_dims: usize,
}

impl Default for ReductionTarget {
    fn default() -> Self {
        Self {
            variance: 0.95,
            max_dims: 64,
        }
    }
}

/// A fitted PCA model and the number of components kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub pca: PcaModel,
    pub width: usize,
}

fn block_rows(block: &data::EmbeddingBlock, pids: &[u64]) -> Result<Matrix> {
    let mut m = Matrix::zeros(pids.len(), block.dim);
    for (i, pid) in pids.iter().enumerate() {
        let v = block.rows.get(pid).ok_or_else(|| {
            Error::MissingSource(format!("{} (no row for pid {pid})", block.name))
        })?;
        for (o, x) in m.row_mut(i).iter_mut().zip(v) {
            *o = f64::from(*x);
        }
    }
    Ok(m)
}

/// Fits (when `fitted` is `None`) or reuses a PCA reduction and projects the
/// rows of `block` listed in `pids`. Fitting uses `fit_pids` only.
pub fn reduce_embedding_block(
    block: &data::EmbeddingBlock,
    pids: &[u64],
    fitted: Option<&Reduction>,
    fit_pids: &[u64],
    target: ReductionTarget,
) -> Result<(Matrix, Reduction)> {
    let reduction = match fitted {
        Some(r) => r.clone(),
        None => {
            if block.dim == 0 {
                return Err(Error::Shape(format!("block `{}` has dim 0", block.name)));
            }
            let x = block_rows(block, fit_pids)?;
            let pca = fit_pca(&x).map_err(|e| match e {
                Error::InsufficientData(m) => {
                    Error::InsufficientData(format!("block `{}`: {m}", block.name))
                }
                other => other,
            })?;
            let width = pca.components_for(target.variance, target.max_dims);
            Reduction { pca, width }
        }
    };
    let x = block_rows(block, pids)?;
    let z = transform_pca(&reduction.pca, &x, reduction.width)?;
    Ok((z, reduction))
}

// ---------------------------------------------------------------------------
// Fitted state and assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformOptions {
    pub reduction: ReductionTarget,
    pub geo_coarse_deg: f64,
    pub geo_fine_deg: f64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            reduction: ReductionTarget::default(),
            geo_coarse_deg: 10.0,
            geo_fine_deg: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "snake_case")]
pub enum BlockState {
    Time,
    Geo {
        coarse: CategoryMap,
        fine: CategoryMap,
    },
    N,
    Eu,
    Cat {
        fields: Vec<(String, CategoryMap)>,
    },
    Embedding {
        tag: BlockTag,
        reduction: Reduction,
    },
}

pub const STATE_VERSION: u32 = 1;

/// Everything fitted on a training split that is needed to transform any
/// other split identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformState {
    pub version: u32,
    pub order: Vec<BlockTag>,
    pub options: TransformOptions,
    pub impute: ImputeStats,
    pub blocks: Vec<BlockState>,
}

impl TransformState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: TransformState = serde_json::from_str(s)?;
        if state.version != STATE_VERSION {
            return Err(Error::Config(format!(
                "transform state version {} (expected {STATE_VERSION})",
                state.version
            )));
        }
        Ok(state)
    }
}

fn geo_cells(ds: &Dataset, res: f64) -> Result<Vec<String>> {
    ds.posts
        .iter()
        .map(|p| match (p.latitude, p.longitude) {
            (Some(lat), Some(lon)) => bucket_geo(lat, lon, res),
            _ => Ok(UNKNOWN.to_string()),
        })
        .collect()
}

fn categorical_values(ds: &Dataset, field: &str) -> Vec<String> {
    ds.posts
        .iter()
        .map(|p| p.categorical(field).unwrap_or_else(|| UNKNOWN.to_string()))
        .collect()
}

struct BlockOutput {
    columns: Vec<Vec<f64>>, // column-major
    names: Vec<String>,
    kinds: Vec<ColumnKind>,
}

impl BlockOutput {
    fn new() -> Self {
        Self {
            columns: Vec::new(),
            names: Vec::new(),
            kinds: Vec::new(),
        }
    }

    fn push(&mut self, name: String, kind: ColumnKind, column: Vec<f64>) {
        self.columns.push(column);
        self.names.push(name);
        self.kinds.push(kind);
    }

    fn one_hot(&mut self, prefix: &str, map: &CategoryMap, values: &[String]) {
        let w = map.width();
        let mut cols = vec![vec![0.0; values.len()]; w];
        for (i, v) in values.iter().enumerate() {
            cols[map.slot(v)][i] = 1.0;
        }
        for (col, name) in cols.into_iter().zip(map.column_names(prefix)) {
            self.push(name, ColumnKind::OneHot, col);
        }
    }
}

fn check_sources(ds: &Dataset, enabled: &[BlockTag]) -> Result<()> {
    for &tag in enabled {
        let ok = if tag.is_embedding() {
            ds.block(tag.as_str()).is_some()
        } else if tag == BlockTag::Eu {
            !ds.profiles.is_empty()
        } else {
            true
        };
        if !ok {
            return Err(Error::MissingSource(tag.to_string()));
        }
    }
    Ok(())
}

fn build_block(
    ds: &Dataset,
    tag: BlockTag,
    fitted: Option<&BlockState>,
    opts: &TransformOptions,
) -> Result<(BlockOutput, BlockState)> {
    let n = ds.len();
    let mut out = BlockOutput::new();
    let state = match tag {
        BlockTag::Time => {
            let parts: Vec<[f64; 5]> = ds
                .posts
                .iter()
                .map(|p| decompose_timestamp(p.timestamp).as_features())
                .collect();
            for (k, name) in ["year", "month", "day", "weekday", "hour"]
                .iter()
                .enumerate()
            {
                out.push(
                    format!("time.{name}"),
                    ColumnKind::Numeric,
                    parts.iter().map(|p| p[k]).collect(),
                );
            }
            BlockState::Time
        }
        BlockTag::Geo => {
            let coarse_vals = geo_cells(ds, opts.geo_coarse_deg)?;
            let fine_vals = geo_cells(ds, opts.geo_fine_deg)?;
            let (coarse, fine) = match fitted {
                Some(BlockState::Geo { coarse, fine }) => (coarse.clone(), fine.clone()),
                _ => (
                    CategoryMap::fit(coarse_vals.iter().map(String::as_str)),
                    CategoryMap::fit(fine_vals.iter().map(String::as_str)),
                ),
            };
            out.one_hot("geo.coarse", &coarse, &coarse_vals);
            out.one_hot("geo.fine", &fine, &fine_vals);
            BlockState::Geo { coarse, fine }
        }
        BlockTag::N => {
            out.push(
                "n.geoaccuracy".into(),
                ColumnKind::Numeric,
                ds.posts
                    .iter()
                    .map(|p| p.geoaccuracy.map_or(0.0, f64::from))
                    .collect(),
            );
            BlockState::N
        }
        BlockTag::Eu => {
            let mut cols: Vec<Vec<f64>> = (0..8).map(|_| Vec::with_capacity(n)).collect();
            for i in 0..n {
                let counters = ds.profile_for(i).map(|p| p.counters()).unwrap_or([None; 8]);
                for (col, c) in cols.iter_mut().zip(counters) {
                    col.push(c.map_or(0.0, |v| v as f64));
                }
            }
            for (col, name) in cols.into_iter().zip(COUNTER_FIELDS) {
                out.push(format!("eu.{name}"), ColumnKind::Count, col);
            }
            out.push(
                "eu.profile_missing".into(),
                ColumnKind::Indicator,
                (0..n)
                    .map(|i| f64::from(u8::from(ds.profile_missing(i))))
                    .collect(),
            );
            BlockState::Eu
        }
        BlockTag::Cat => {
            let mut fields = Vec::new();
            for (k, field) in CATEGORICAL_FIELDS.iter().enumerate() {
                let vals = categorical_values(ds, field);
                let map = match fitted {
                    Some(BlockState::Cat { fields }) => fields
                        .get(k)
                        .filter(|(f, _)| f == field)
                        .map(|(_, m)| m.clone())
                        .ok_or_else(|| Error::Config(format!("state lacks cat field `{field}`")))?,
                    _ => CategoryMap::fit(vals.iter().map(String::as_str)),
                };
                out.one_hot(&format!("cat.{field}"), &map, &vals);
                fields.push((field.to_string(), map));
            }
            BlockState::Cat { fields }
        }
        emb => {
            let (bi, block) = ds
                .block(emb.as_str())
                .ok_or_else(|| Error::MissingSource(emb.to_string()))?;
            let pids = ds.pids();
            let fit_pids: Vec<u64> = pids
                .iter()
                .enumerate()
                .filter(|(i, _)| !ds.embedding_missing(bi, *i))
                .map(|(_, p)| *p)
                .collect();
            let prior = match fitted {
                Some(BlockState::Embedding { reduction, .. }) => Some(reduction),
                _ => None,
            };
            let (z, reduction) =
                reduce_embedding_block(block, &pids, prior, &fit_pids, opts.reduction)?;
            for c in 0..z.cols() {
                out.push(
                    format!("{emb}.pc{c}"),
                    ColumnKind::Embedding,
                    z.iter_rows().map(|r| r[c]).collect(),
                );
            }
            out.push(
                format!("{emb}.missing"),
                ColumnKind::Indicator,
                (0..n)
                    .map(|i| f64::from(u8::from(ds.embedding_missing(bi, i))))
                    .collect(),
            );
            BlockState::Embedding {
                tag: emb,
                reduction,
            }
        }
    };
    Ok((out, state))
}

fn assemble(
    ds: &Dataset,
    enabled: &[BlockTag],
    fitted: Option<&TransformState>,
    opts: &TransformOptions,
) -> Result<(FeatureMatrix, TransformState)> {
    check_sources(ds, enabled)?;
    let (imputed, impute) = data::impute_missing(ds, fitted.map(|s| &s.impute))?;
    let n = imputed.len();

    let mut schema = BlockSchema::default();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut states = Vec::new();
    for (k, &tag) in enabled.iter().enumerate() {
        let prior = fitted.map(|s| &s.blocks[k]);
        let (out, state) = build_block(&imputed, tag, prior, opts)?;
        schema.push(tag, out.columns.len());
        columns.extend(out.columns);
        names.extend(out.names);
        kinds.extend(out.kinds);
        states.push(state);
    }

    let width = columns.len();
    let mut values = Matrix::zeros(n, width);
    for (c, col) in columns.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            values[(r, c)] = *v;
        }
    }
    if values.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("assembled feature matrix".into()));
    }
    let matrix = FeatureMatrix {
        values,
        schema,
        pids: imputed.pids(),
        column_names: names,
        column_kinds: kinds,
    };
    let state = TransformState {
        version: STATE_VERSION,
        order: enabled.to_vec(),
        options: *opts,
        impute,
        blocks: states,
    };
    Ok((matrix, state))
}

/// Fits a transform state on a training split and returns its features.
pub fn fit_transform(
    ds: &Dataset,
    enabled: &[BlockTag],
    opts: &TransformOptions,
) -> Result<(FeatureMatrix, TransformState)> {
    let enabled = canonical(enabled);
    assemble(ds, &enabled, None, opts)
}

/// Applies a fitted state to any split. The state is only read.
pub fn apply_transform(ds: &Dataset, state: &TransformState) -> Result<FeatureMatrix> {
    if state.blocks.len() != state.order.len() {
        return Err(Error::Config("transform state is inconsistent".into()));
    }
    assemble(ds, &state.order, Some(state), &state.options).map(|(m, _)| m)
}

/// Fits when `state` is `None`, otherwise applies `state` (whose block list
/// must equal `enabled`).
pub fn assemble_features(
    ds: &Dataset,
    state: Option<&TransformState>,
    enabled: &[BlockTag],
    opts: &TransformOptions,
) -> Result<(FeatureMatrix, TransformState)> {
    match state {
        None => fit_transform(ds, enabled, opts),
        Some(s) => {
            if canonical(enabled) != s.order {
                return Err(Error::Config(format!(
                    "state was fitted for blocks [{}], requested [{}]",
                    format_block_list(&s.order),
                    format_block_list(&canonical(enabled))
                )));
            }
            Ok((apply_transform(ds, s)?, s.clone()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{join_dataset, EmbeddingBlock, PostRecord, UserProfile};
    use std::collections::BTreeMap;

    #[test]
    fn timestamps() {
        let t = |y, mo, d, w, h| TimeParts {
            year: y,
            month: mo,
            day: d,
            weekday: w,
            hour: h,
        };
        assert_eq!(decompose_timestamp(0), t(1970, 1, 1, 3, 0));
        assert_eq!(decompose_timestamp(86_399), t(1970, 1, 1, 3, 23));
        assert_eq!(decompose_timestamp(1_690_000_000), t(2023, 7, 22, 5, 4));
        assert_eq!(decompose_timestamp(-1), t(1969, 12, 31, 2, 23));
        assert_eq!(decompose_timestamp(951_782_400), t(2000, 2, 29, 1, 0));
        // extreme values do not panic
        decompose_timestamp(i64::MIN);
        decompose_timestamp(i64::MAX);
    }

    #[test]
    fn geo_cells() {
        assert_eq!(bucket_geo(0.0, 0.0, 1.0).unwrap(), "g90_180");
        assert_eq!(bucket_geo(-90.0, -180.0, 1.0).unwrap(), "g0_0");
        assert_eq!(bucket_geo(90.0, 180.0, 1.0).unwrap(), "g179_359");
        assert_eq!(bucket_geo(90.0, 180.0, 10.0).unwrap(), "g17_35");
        assert!(bucket_geo(91.0, 0.0, 1.0).is_err());
        assert!(bucket_geo(0.0, -181.0, 1.0).is_err());
        assert!(bucket_geo(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn one_hot() {
        let m = CategoryMap::fit(["b", "a", "b"]);
        assert_eq!(m.width(), 3);
        assert_eq!(m.categories, vec!["a", "b"]);
        assert_eq!(m.apply("a"), vec![0.0, 1.0, 0.0]);
        assert_eq!(m.apply("zzz"), vec![1.0, 0.0, 0.0]);
        let e = CategoryMap::fit(std::iter::empty());
        assert_eq!(e.width(), 1);
        assert_eq!(e.apply("x"), vec![1.0]);
        // the literal unknown category maps to the reserved slot
        let u = CategoryMap::fit(["unknown", "a"]);
        assert_eq!(u.width(), 2);
        assert_eq!(u.apply("unknown"), vec![1.0, 0.0]);
    }

    #[test]
    fn standardize() {
        let s = fit_standardize(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 1.0));
        assert_eq!(s.apply(1.0), 0.0);
        let s = fit_standardize(&[0.0, 2.0]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert!((s.apply(2.0) - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(fit_standardize(&[]).is_err());
    }

    #[test]
    fn reduce_block_widths() {
        let mut b = EmbeddingBlock::new("image", 2);
        for (pid, v) in [
            (1, [1.0, 0.0]),
            (2, [-1.0, 0.0]),
            (3, [0.0, 1.0]),
            (4, [0.0, -1.0]),
        ] {
            b.insert(pid, v.to_vec()).unwrap();
        }
        let pids = [1, 2, 3, 4];
        let (z, r) =
            reduce_embedding_block(&b, &pids, None, &pids, ReductionTarget::default()).unwrap();
        assert_eq!(r.width, 2);
        assert_eq!(z.cols(), 2);

        let mut line = EmbeddingBlock::new("image", 2);
        for pid in 1..=4u64 {
            line.insert(pid, vec![pid as f32, 2.0 * pid as f32])
                .unwrap();
        }
        let (_, r) =
            reduce_embedding_block(&line, &pids, None, &pids, ReductionTarget::default()).unwrap();
        assert_eq!(r.width, 1);

        let mut same = EmbeddingBlock::new("image", 3);
        for pid in 1..=4u64 {
            same.insert(pid, vec![1.0, 2.0, 3.0]).unwrap();
        }
        let (z, r) =
            reduce_embedding_block(&same, &pids, None, &pids, ReductionTarget::default()).unwrap();
        assert_eq!(r.width, 1);
        assert!(z.as_slice().iter().all(|&v| v == 0.0));

        assert!(matches!(
            reduce_embedding_block(&same, &pids, None, &[1], ReductionTarget::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    fn tiny() -> Dataset {
        let mk = |uid: &str, pid, ts, cat: &str| PostRecord {
            uid: uid.into(),
            pid,
            timestamp: ts,
            latitude: Some(10.5),
            longitude: Some(-20.5),
            geoaccuracy: Some(12),
            category: Some(cat.into()),
            subcategory: None,
            concept: Some("c".into()),
            mediatype: Some("photo".into()),
            ispublic: Some(true),
            label: Some(pid as f64),
        };
        let posts = vec![
            mk("a", 1, 0, "x"),
            mk("b", 2, 3600, "y"),
            mk("a", 3, 7200, "x"),
        ];
        let mut profiles = BTreeMap::new();
        profiles.insert(
            "a".to_string(),
            UserProfile::from_counters("a", [Some(1); 8]),
        );
        profiles.insert(
            "b".to_string(),
            UserProfile::from_counters("b", [Some(2); 8]),
        );
        let mut img = EmbeddingBlock::new("image", 2);
        img.insert(1, vec![1.0, 0.0]).unwrap();
        img.insert(2, vec![0.0, 1.0]).unwrap();
        img.insert(3, vec![1.0, 1.0]).unwrap();
        join_dataset(posts, profiles, vec![img]).unwrap()
    }

    #[test]
    fn assemble_widths_and_order() {
        let ds = tiny();
        let opts = TransformOptions::default();
        let (m, _) = fit_transform(&ds, &[BlockTag::Time], &opts).unwrap();
        assert_eq!(m.n_cols(), 5);
        assert_eq!(
            m.schema.blocks,
            vec![BlockSpan {
                tag: BlockTag::Time,
                start: 0,
                width: 5
            }]
        );

        let (m, state) = fit_transform(&ds, &[BlockTag::Eu, BlockTag::Time], &opts).unwrap();
        assert_eq!(
            m.schema.blocks,
            vec![
                BlockSpan {
                    tag: BlockTag::Time,
                    start: 0,
                    width: 5
                },
                BlockSpan {
                    tag: BlockTag::Eu,
                    start: 5,
                    width: 9
                },
            ]
        );
        assert_eq!(m.column_names[5], "eu.follower");
        assert_eq!(state.order, vec![BlockTag::Time, BlockTag::Eu]);

        let eu = select_blocks(&m, &[BlockTag::Eu]).unwrap();
        assert_eq!(eu.n_cols(), 9);
        assert_eq!(eu.schema.blocks[0].start, 0);
        assert_eq!(
            select_blocks(&m, &[BlockTag::Time, BlockTag::Eu]).unwrap(),
            m
        );
        let none = select_blocks(&m, &[]).unwrap();
        assert_eq!((none.n_rows(), none.n_cols()), (3, 0));
        assert!(matches!(
            select_blocks(&m, &[BlockTag::Cat]),
            Err(Error::UnknownBlock(_))
        ));
    }

    #[test]
    fn one_hot_groups_sum_to_one() {
        let ds = tiny();
        let (m, _) = fit_transform(
            &ds,
            &[BlockTag::Geo, BlockTag::Cat],
            &TransformOptions::default(),
        )
        .unwrap();
        // 2 geo groups + 5 categorical groups
        for row in m.values.iter_rows() {
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(row.iter().sum::<f64>(), 7.0);
        }
        assert!(m
            .column_names
            .contains(&"cat.subcategory=unknown".to_string()));
    }

    #[test]
    fn missing_source_errors() {
        let ds = tiny();
        assert!(matches!(
            fit_transform(&ds, &[BlockTag::Cap], &TransformOptions::default()),
            Err(Error::MissingSource(_))
        ));
        let bare = join_dataset(ds.posts.clone(), BTreeMap::new(), vec![]).unwrap();
        assert!(matches!(
            fit_transform(&bare, &[BlockTag::Eu], &TransformOptions::default()),
            Err(Error::MissingSource(_))
        ));
    }

    #[test]
    fn state_round_trip_and_apply() {
        let ds = tiny();
        let all = [
            BlockTag::Image,
            BlockTag::Time,
            BlockTag::Geo,
            BlockTag::N,
            BlockTag::Eu,
            BlockTag::Cat,
        ];
        let (m, state) = fit_transform(&ds, &all, &TransformOptions::default()).unwrap();
        let json = state.to_json().unwrap();
        let back = TransformState::from_json(&json).unwrap();
        assert_eq!(back, state);
        assert_eq!(apply_transform(&ds, &back).unwrap(), m);
        assert!(assemble_features(
            &ds,
            Some(&state),
            &[BlockTag::Time],
            &TransformOptions::default()
        )
        .is_err());
        assert_eq!(m.n_cols(), m.schema.total_width());
    }

    #[test]
    fn parse_lists() {
        assert_eq!(
            parse_block_list("eu,time").unwrap(),
            vec![BlockTag::Time, BlockTag::Eu]
        );
        assert_eq!(parse_block_list("all").unwrap().len(), 10);
        assert!(parse_block_list("time,bogus").is_err());
    }
}
