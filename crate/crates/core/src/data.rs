//! Datasets: IDX and dense CSV loaders, and a synthetic generator with a
//! known hierarchy.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{stream_rng, Stream};
use crate::variational::Observation;

/// Row-major instances with optional per-level labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Array2<f64>,
    /// `labels[l][n]`: label of instance `n` at level `l + 1`.
    pub labels: Option<Vec<Vec<usize>>>,
    pub observation: Observation,
}

impl Dataset {
    pub fn new(name: impl Into<String>, x: Array2<f64>, labels: Option<Vec<Vec<usize>>>) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            x,
            labels,
            observation: Observation::Gaussian,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(l) = labels.iter().find(|l| l.len() != self.len()) {
                return Err(Error::DimensionMismatch {
                    context: "label vector length",
                    expected: self.len(),
                    actual: l.len(),
                });
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("dataset {} holds non-finite values", self.name)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn label_levels(&self) -> usize {
        self.labels.as_ref().map_or(0, Vec::len)
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            x: self.x.select(Axis(0), idx),
            labels: self
                .labels
                .as_ref()
                .map(|ls| ls.iter().map(|l| idx.iter().map(|&i| l[i]).collect()).collect()),
            observation: self.observation,
        }
    }

    /// The first `n` rows (all of them if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// First `n_first` rows and the rest.
    pub fn split_at(&self, n_first: usize) -> (Dataset, Dataset) {
        let n_first = n_first.min(self.len());
        let a: Vec<usize> = (0..n_first).collect();
        let b: Vec<usize> = (n_first..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    /// Seeded random subset of `n` rows.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream_rng(seed, Stream::Shuffle, u64::MAX));
        idx.truncate(n.min(self.len()));
        self.subset(&idx)
    }

    /// Write features plus trailing label columns to `path`, and a sidecar
    /// header describing them to `<path>.header`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        for n in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(n).iter().map(|v| format!("{v}")).collect();
            if let Some(ls) = &self.labels {
                rec.extend(ls.iter().map(|l| l[n].to_string()));
            }
            w.write_record(&rec).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let header = CsvHeader {
            name: Some(self.name.clone()),
            label_columns: self.label_levels(),
            observation: self.observation,
            has_header_row: false,
        };
        let text = toml::to_string(&header).map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(sidecar_path(path), text).map_err(|e| Error::io(sidecar_path(path), e))
    }

    /// Labels alone, one column per level, with a `level_<l>` header row.
    pub fn write_labels_csv(&self, path: &Path) -> Result<()> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has no labels to write"))?;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        let head: Vec<String> = (1..=labels.len()).map(|l| format!("level_{l}")).collect();
        w.write_record(&head).map_err(|e| csv_io(path, e))?;
        for n in 0..self.len() {
            w.write_record(labels.iter().map(|l| l[n].to_string()))
                .map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location: e.position().map_or("?".into(), |p| format!("line {}", p.line())),
        message: e.to_string(),
    }
}

/// Sidecar description of a dense CSV file, stored as TOML next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvHeader {
    #[serde(default)]
    pub name: Option<String>,
    /// Trailing integer columns holding per-level labels.
    #[serde(default)]
    pub label_columns: usize,
    #[serde(default = "default_observation")]
    pub observation: Observation,
    /// Whether the first line holds column names.
    #[serde(default)]
    pub has_header_row: bool,
}

fn default_observation() -> Observation {
    Observation::Gaussian
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".header");
    PathBuf::from(s)
}

/// Read a rectangular numeric CSV. Without a sidecar every column is a
/// feature and there is no header row.
pub fn load_dense_csv(path: &Path) -> Result<Dataset> {
    let side = sidecar_path(path);
    let header = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        toml::from_str::<CsvHeader>(&text).map_err(|e| Error::Parse {
            path: side.clone(),
            location: e.span().map_or("?".into(), |s| format!("byte {}", s.start)),
            message: e.message().to_string(),
        })?
    } else {
        CsvHeader {
            name: None,
            label_columns: 0,
            observation: Observation::Gaussian,
            has_header_row: false,
        }
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header.has_header_row)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut width = None;
    let mut values = Vec::new();
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); header.label_columns];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        match width {
            None => width = Some(rec.len()),
            Some(w) if w != rec.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    location: format!("line {line}"),
                    message: format!("expected {w} columns, found {}", rec.len()),
                })
            }
            _ => {}
        }
        if rec.len() <= header.label_columns {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {line}"),
                message: format!("{} columns leave no features after {} label columns", rec.len(), header.label_columns),
            });
        }
        let d = rec.len() - header.label_columns;
        for (c, cell) in rec.iter().enumerate() {
            let bad = |what: &str| Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {line}, column {}", c + 1),
                message: format!("cannot parse {cell:?} as {what}"),
            };
            if c < d {
                let v: f64 = cell.parse().map_err(|_| bad("a number"))?;
                if !v.is_finite() {
                    return Err(bad("a finite number"));
                }
                values.push(v);
            } else {
                labels[c - d].push(cell.parse().map_err(|_| bad("a label"))?);
            }
        }
    }
    let w = width.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        location: "line 1".into(),
        message: "no data rows".into(),
    })?;
    let d = w - header.label_columns;
    let n = values.len() / d;
    let x = Array2::from_shape_vec((n, d), values).expect("rectangular by construction");
    let mut ds = Dataset::new(
        header.name.unwrap_or_else(|| path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned())),
        x,
        (header.label_columns > 0).then_some(labels),
    )?;
    ds.observation = header.observation;
    Ok(ds)
}

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl IdxReader<'_> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            location: format!("byte offset {offset}"),
            message: message.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err(self.pos, "truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn body(&self, len: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(len).ok_or_else(|| self.err(self.pos, "size overflow"))?;
        if self.bytes.len() < end {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated data: expected {len} bytes after offset {}", self.pos),
            ));
        }
        Ok(&self.bytes[self.pos..end])
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parse an IDX image file (magic 2051) into `N × (rows·cols)` features
/// scaled to `[0, 1]`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<Array2<f64>> {
    let mut r = IdxReader { path, bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.err(0, format!("bad magic {magic}, expected {IDX_IMAGES_MAGIC}")));
    }
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let d = rows * cols;
    let body = r.body(n * d)?;
    if bytes.len() != r.pos + n * d {
        return Err(r.err(r.pos + n * d, "trailing bytes after image data"));
    }
    Ok(Array2::from_shape_fn((n, d), |(i, j)| body[i * d + j] as f64 / 255.0))
}

/// Parse an IDX label file (magic 2049).
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = IdxReader { path, bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.err(0, format!("bad magic {magic}, expected {IDX_LABELS_MAGIC}")));
    }
    let n = r.u32()? as usize;
    let body = r.body(n)?;
    if bytes.len() != r.pos + n {
        return Err(r.err(r.pos + n, "trailing bytes after label data"));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Load IDX images and, optionally, the matching label file.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let x = parse_idx_images(images, &read_bytes(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(p, &read_bytes(p)?)?;
            if l.len() != x.nrows() {
                return Err(Error::Parse {
                    path: p.to_path_buf(),
                    location: "byte offset 4".into(),
                    message: format!("{} labels for {} images", l.len(), x.nrows()),
                });
            }
            Some(vec![l])
        }
        None => None,
    };
    let name = images
        .file_name()
        .map_or("idx".into(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, x, labels)
}

/// Encode images (values in `[0, 1]`) back to IDX bytes.
pub fn encode_idx_images(x: &Array2<f64>, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if rows * cols != x.ncols() {
        return Err(Error::invalid(format!("{rows}x{cols} images need {} columns", rows * cols)));
    }
    let mut out = Vec::with_capacity(16 + x.len());
    for v in [IDX_IMAGES_MAGIC, x.nrows() as u32, rows as u32, cols as u32] {
        out.extend(v.to_be_bytes());
    }
    out.extend(x.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

/// Recipe for a synthetic hierarchical dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Levels including the root.
    pub depth: usize,
    /// Children per node at each level below the root (`depth − 1` entries).
    pub branching: Vec<usize>,
    /// Component variance shrinks by this factor per level.
    pub variance_decay: f64,
    /// Scale of child mean offsets relative to the root standard deviation.
    pub separation: f64,
    pub n: usize,
    /// Ambient data dimension.
    pub dim: usize,
    /// Probability of generating from each level; empty means the default.
    #[serde(default)]
    pub level_weights: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(depth: usize, branching: usize, n: usize, dim: usize, seed: u64) -> Self {
        SyntheticSpec {
            depth,
            branching: vec![branching; depth.saturating_sub(1)],
            variance_decay: 0.5,
            separation: 8.0,
            n,
            dim,
            level_weights: Vec::new(),
            seed,
        }
    }

    /// Level weights, by default 0.95 on the leaves and the rest spread
    /// evenly over inner levels.
    pub fn level_weights(&self) -> Vec<f64> {
        if !self.level_weights.is_empty() {
            return self.level_weights.clone();
        }
        if self.depth == 1 {
            return vec![1.0];
        }
        let inner = 0.05 / (self.depth - 1) as f64;
        let mut w = vec![inner; self.depth - 1];
        w.push(0.95);
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::invalid("synthetic depth must be at least 1"));
        }
        if self.branching.len() != self.depth - 1 || self.branching.contains(&0) {
            return Err(Error::invalid("branching needs depth - 1 positive entries"));
        }
        if !(self.variance_decay > 0.0 && self.variance_decay <= 1.0) {
            return Err(Error::invalid("variance_decay must lie in (0, 1]"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::invalid("separation must be finite and nonnegative"));
        }
        if self.n == 0 || self.dim == 0 {
            return Err(Error::invalid("n and dim must be positive"));
        }
        let w = self.level_weights();
        if w.len() != self.depth || w.iter().any(|&v| !(v >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
            return Err(Error::invalid("level_weights need depth nonnegative entries with a positive sum"));
        }
        Ok(())
    }
}

/// One generating component of a synthetic hierarchy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNode {
    /// 1-based child indices from the root, as in path ids.
    pub path: Vec<usize>,
    pub mean: Vec<f64>,
    pub variance: f64,
}

/// Generating parameters of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub spec: SyntheticSpec,
    /// Nodes in breadth-first order.
    pub nodes: Vec<SyntheticNode>,
    /// Level (1-based) each instance was generated from.
    pub levels: Vec<usize>,
}

impl SyntheticTruth {
    pub fn leaves(&self) -> impl Iterator<Item = &SyntheticNode> {
        self.nodes.iter().filter(move |n| n.path.len() == self.spec.depth)
    }
}

/// Sample a balanced tree of Gaussians and draw instances from it: a leaf
/// path uniformly, a level from the level weights, then a point from that
/// level's node on the path. Labels at level `l` index the level-`l` node
/// of the sampled path.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, SyntheticTruth)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Init, u64::MAX - 1);
    let d = spec.dim;
    let mut nodes = vec![SyntheticNode {
        path: vec![1],
        mean: vec![0.0; d],
        variance: 1.0,
    }];
    let mut frontier = vec![0usize];
    for (lvl, &b) in spec.branching.iter().enumerate() {
        let scale = spec.separation * spec.variance_decay.powi(lvl as i32).sqrt();
        let mut next = Vec::new();
        for &p in &frontier {
            for c in 0..b {
                let parent = &nodes[p];
                let mut path = parent.path.clone();
                path.push(c + 1);
                let mean: Vec<f64> = parent
                    .mean
                    .iter()
                    .map(|m| {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        m + scale * eps / (d as f64).sqrt()
                    })
                    .collect();
                let variance = parent.variance * spec.variance_decay;
                nodes.push(SyntheticNode { path, mean, variance });
                next.push(nodes.len() - 1);
            }
        }
        frontier = next;
    }
    let leaves = frontier;
    let weights = spec.level_weights();
    let wsum: f64 = weights.iter().sum();
    let mut x = Array2::zeros((spec.n, d));
    let mut labels = vec![vec![0usize; spec.n]; spec.depth];
    let mut levels = Vec::with_capacity(spec.n);
    // position of each node among the nodes of its level
    let mut level_index = vec![0usize; nodes.len()];
    let mut counters = vec![0usize; spec.depth];
    for (k, nd) in nodes.iter().enumerate() {
        level_index[k] = counters[nd.path.len() - 1];
        counters[nd.path.len() - 1] += 1;
    }
    for i in 0..spec.n {
        let leaf = leaves[rng.random_range(0..leaves.len())];
        let mut u = rng.random_range(0.0..wsum);
        let mut level = spec.depth;
        for (l, &w) in weights.iter().enumerate() {
            if u < w {
                level = l + 1;
                break;
            }
            u -= w;
        }
        let leaf_path = &nodes[leaf].path;
        let mut chain = Vec::with_capacity(spec.depth);
        for l in 1..=spec.depth {
            let k = nodes.iter().position(|nd| nd.path[..] == leaf_path[..l]).expect("prefix node");
            chain.push(k);
            labels[l - 1][i] = level_index[k];
        }
        let src = &nodes[chain[level - 1]];
        let sd = src.variance.sqrt();
        for j in 0..d {
            let eps: f64 = StandardNormal.sample(&mut rng);
            x[[i, j]] = src.mean[j] + sd * eps;
        }
        levels.push(level);
    }
    let ds = Dataset::new(format!("synthetic-{}", spec.seed), x, Some(labels))?;
    Ok((
        ds,
        SyntheticTruth {
            spec: spec.clone(),
            nodes,
            levels,
        },
    ))
}
