//! Persistence for trajectories, loss matrices, and the Gram cache, plus
//! checkpoint neighbor-set construction.
//!
//! All three binary formats share one container: an 8-byte magic, a
//! length-prefixed UTF-8 JSON header, a little-endian `f64` payload, and a
//! trailing CRC-32 of the payload bytes.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, ParamMask, ParamVector};
use crate::numeric::{dist2 as euclid2, dot};
use crate::training::{LossMatrix, OptimizerConfig, Trajectory};

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"INFLTRAJ";
pub const LOSS_MAGIC: &[u8; 8] = b"INFLLOSS";
pub const GRAM_MAGIC: &[u8; 8] = b"INFLGRAM";
pub const FORMAT_VERSION: u32 = 1;

/// Squared distances below this are treated as exact zero so `1 / dist2`
/// never sees catastrophic cancellation leftovers.
pub const DIST2_ZERO_EPS: f64 = 1e-24;

pub fn clamp_dist2(value: f64) -> f64 {
    if value < DIST2_ZERO_EPS {
        0.0
    } else {
        value
    }
}

/// Pairwise checkpoint inner products and squared distances over the masked
/// coordinates. Built once, reused by every influence query.
#[derive(Debug, Clone, PartialEq)]
pub struct GramCache {
    inner: Vec<f64>,
    dist2: Vec<f64>,
    size: usize,
    mask: ParamMask,
}

impl GramCache {
    /// Number of checkpoints covered (`T + 1`).
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask(&self) -> &ParamMask {
        &self.mask
    }

    pub fn inner(&self, i: usize, j: usize) -> f64 {
        self.inner[i * self.size + j]
    }

    pub fn dist2(&self, i: usize, j: usize) -> f64 {
        self.dist2[i * self.size + j]
    }

    /// `<theta_j - theta_i, theta_k - theta_i>` reconstructed by bilinearity.
    pub fn displaced_inner(&self, i: usize, j: usize, k: usize) -> f64 {
        self.inner(j, k) - self.inner(i, j) - self.inner(i, k) + self.inner(i, i)
    }

    /// Restrict to the inclusive checkpoint index range `[start, end]`.
    pub fn window(&self, start: usize, end: usize) -> Result<GramCache> {
        if start >= end || end >= self.size {
            return Err(Error::invalid_arg(format!(
                "window {start}..{end} invalid for gram of size {}",
                self.size
            )));
        }
        let size = end - start + 1;
        let mut inner = Vec::with_capacity(size * size);
        let mut dist2 = Vec::with_capacity(size * size);
        for i in start..=end {
            for j in start..=end {
                inner.push(self.inner(i, j));
                dist2.push(self.dist2(i, j));
            }
        }
        Ok(GramCache {
            inner,
            dist2,
            size,
            mask: self.mask,
        })
    }
}

/// Precompute all pairwise inner products and squared distances over the
/// masked coordinates.
pub fn gram_precompute(traj: &Trajectory, mask: &ParamMask) -> Result<GramCache> {
    let size = traj.checkpoints.len();
    let dim = traj.dim();
    if mask.end > dim || mask.is_empty() {
        return Err(Error::invalid_arg(format!(
            "mask {}..{} invalid for parameter dim {dim}",
            mask.start, mask.end
        )));
    }
    let slices: Vec<&[f64]> = traj
        .checkpoints
        .iter()
        .map(|c| &c.values()[mask.start..mask.end])
        .collect();

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..size)
        .into_par_iter()
        .map(|i| {
            let mut inner_row = vec![0.0; size];
            let mut dist_row = vec![0.0; size];
            for j in 0..size {
                inner_row[j] = dot(slices[i], slices[j]);
                dist_row[j] = if i == j {
                    0.0
                } else {
                    clamp_dist2(euclid2(slices[i], slices[j]))
                };
            }
            (inner_row, dist_row)
        })
        .collect();

    let mut inner = Vec::with_capacity(size * size);
    let mut dist2 = Vec::with_capacity(size * size);
    for (ir, dr) in rows {
        inner.extend(ir);
        dist2.extend(dr);
    }
    // Symmetrize exactly: dot(a, b) and dot(b, a) already agree bitwise, but
    // make the upper triangle authoritative anyway.
    for i in 0..size {
        for j in (i + 1)..size {
            let v = inner[i * size + j];
            inner[j * size + i] = v;
            let d = dist2[i * size + j];
            dist2[j * size + i] = d;
        }
    }

    Ok(GramCache {
        inner,
        dist2,
        size,
        mask: *mask,
    })
}

/// How checkpoint neighbor sets are selected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "value")]
pub enum NeighborRule {
    /// The `k` nearest other checkpoints, ties broken by lower index.
    KNearest(usize),
    /// Every other checkpoint within Euclidean distance `tau`.
    Threshold(f64),
}

pub const DEFAULT_NEIGHBOR_K: usize = 4;

impl Default for NeighborRule {
    fn default() -> Self {
        NeighborRule::KNearest(DEFAULT_NEIGHBOR_K)
    }
}

impl std::str::FromStr for NeighborRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if let Some(k) = s.strip_prefix("k=") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::invalid_arg(format!("bad neighbor count `{k}`")))?;
            Ok(NeighborRule::KNearest(k))
        } else if let Some(t) = s.strip_prefix("tau=") {
            let tau: f64 = t
                .parse()
                .map_err(|_| Error::invalid_arg(format!("bad threshold `{t}`")))?;
            Ok(NeighborRule::Threshold(tau))
        } else {
            Err(Error::invalid_arg(format!(
                "neighbor rule must be `k=<int>` or `tau=<float>`, got `{s}`"
            )))
        }
    }
}

/// Per-checkpoint neighbor sets `M_i`, each sorted ascending by index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSets {
    sets: Vec<Vec<usize>>,
    rule: NeighborRule,
    metric: &'static str,
    empty_count: usize,
}

impl NeighborSets {
    pub fn set(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn rule(&self) -> NeighborRule {
        self.rule
    }

    pub fn metric(&self) -> &str {
        self.metric
    }

    /// How many checkpoints ended up with an empty neighbor set.
    pub fn empty_count(&self) -> usize {
        self.empty_count
    }

    pub fn has_empty(&self) -> bool {
        self.empty_count > 0
    }
}

/// Build neighbor sets from cached distances. The threshold rule may produce
/// empty sets; they are counted and surfaced via [`NeighborSets::empty_count`].
pub fn neighbor_sets(cache: &GramCache, rule: NeighborRule) -> Result<NeighborSets> {
    match rule {
        NeighborRule::KNearest(0) => {
            return Err(Error::invalid_arg("k must be at least 1"))
        }
        NeighborRule::Threshold(tau) if tau <= 0.0 || !tau.is_finite() => {
            return Err(Error::invalid_arg("tau must be positive"))
        }
        _ => {}
    }

    let size = cache.size();
    let mut sets = Vec::with_capacity(size);
    for i in 0..size {
        let mut selected: Vec<usize> = match rule {
            NeighborRule::KNearest(k) => {
                let mut candidates: Vec<usize> = (0..size).filter(|&j| j != i).collect();
                candidates.sort_by(|&a, &b| {
                    cache
                        .dist2(i, a)
                        .partial_cmp(&cache.dist2(i, b))
                        .expect("distances are finite")
                        .then(a.cmp(&b))
                });
                candidates.truncate(k.min(size - 1));
                candidates
            }
            NeighborRule::Threshold(tau) => {
                let limit = tau * tau;
                (0..size)
                    .filter(|&j| j != i && cache.dist2(i, j) <= limit)
                    .collect()
            }
        };
        selected.sort_unstable();
        sets.push(selected);
    }
    let empty_count = sets.iter().filter(|s| s.is_empty()).count();
    Ok(NeighborSets {
        sets,
        rule,
        metric: "euclidean",
        empty_count,
    })
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write a file atomically: a sibling temp file is renamed into place, so an
/// interrupted run never leaves a half-written artifact behind.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid_arg(format!("bad output path {}", path.display())))?;
    let tmp_name = format!(
        ".{}.tmp.{}.{}",
        name.to_string_lossy(),
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    );
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn encode_payload(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode_payload(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn write_raw_container(
    path: &Path,
    magic: &[u8; 8],
    header: &[u8],
    payload: &[u8],
) -> Result<()> {
    write_container(path, magic, header, payload)
}

pub(crate) fn read_raw_container(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<u8>)> {
    read_container(path, magic)
}

fn write_container(path: &Path, magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + 4 + header.len() + payload.len() + 4);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(payload);
    bytes.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    atomic_write(path, &bytes)
}

fn read_container(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::BadMagic {
            path: path.display().to_string(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end + 4 {
        return Err(Error::ChecksumMismatch { stored: 0, computed: 0 });
    }
    let header = bytes[12..header_end].to_vec();
    let payload = &bytes[header_end..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok((header, payload.to_vec()))
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn check_payload_len(payload: &[u8], expected_doubles: usize, what: &str) -> Result<()> {
    if payload.len() != expected_doubles * 8 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: payload holds {} bytes, expected {}",
            payload.len(),
            expected_doubles * 8
        )));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    version: u32,
    t: usize,
    dim: usize,
    spec: ModelSpec,
    optimizer: OptimizerConfig,
    /// Checkpoints are stored over all coordinates; masking happens at
    /// gram-precompute time.
    mask: String,
    learning_rates: Vec<f64>,
}

pub fn save_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let header = TrajectoryHeader {
        version: FORMAT_VERSION,
        t: traj.t_max(),
        dim: traj.dim(),
        spec: traj.spec.clone(),
        optimizer: traj.optimizer.clone(),
        mask: "all".into(),
        learning_rates: traj.learning_rates.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut flat = Vec::with_capacity(traj.checkpoints.len() * traj.dim());
    for c in &traj.checkpoints {
        flat.extend_from_slice(c.values());
    }
    write_container(path.as_ref(), TRAJECTORY_MAGIC, &header_bytes, &encode_payload(&flat))
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let (header_bytes, payload) = read_container(path, TRAJECTORY_MAGIC)?;
    let header: TrajectoryHeader = serde_json::from_slice(&header_bytes)?;
    check_version(header.version)?;
    check_payload_len(&payload, (header.t + 1) * header.dim, "trajectory")?;
    let flat = decode_payload(&payload);
    let checkpoints = flat
        .chunks_exact(header.dim)
        .map(|c| ParamVector::new(c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        checkpoints,
        spec: header.spec,
        optimizer: header.optimizer,
        learning_rates: header.learning_rates,
    })
}

#[derive(Serialize, Deserialize)]
struct LossHeader {
    version: u32,
    t: usize,
    n: usize,
    example_ids: Vec<u64>,
}

pub fn save_loss_matrix(matrix: &LossMatrix, path: impl AsRef<Path>) -> Result<()> {
    let header = LossHeader {
        version: FORMAT_VERSION,
        t: matrix.rows() - 1,
        n: matrix.cols(),
        example_ids: matrix.example_ids().to_vec(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    write_container(
        path.as_ref(),
        LOSS_MAGIC,
        &header_bytes,
        &encode_payload(matrix.flat()),
    )
}

pub fn load_loss_matrix(path: impl AsRef<Path>) -> Result<LossMatrix> {
    let path = path.as_ref();
    let (header_bytes, payload) = read_container(path, LOSS_MAGIC)?;
    let header: LossHeader = serde_json::from_slice(&header_bytes)?;
    check_version(header.version)?;
    if header.example_ids.len() != header.n {
        return Err(Error::ShapeMismatch("loss header ids disagree with n".into()));
    }
    check_payload_len(&payload, (header.t + 1) * header.n, "loss matrix")?;
    Ok(LossMatrix::from_flat(
        decode_payload(&payload),
        header.t + 1,
        header.example_ids,
    ))
}

#[derive(Serialize, Deserialize)]
struct GramHeader {
    version: u32,
    t: usize,
    mask: ParamMask,
}

pub fn save_gram(cache: &GramCache, path: impl AsRef<Path>) -> Result<()> {
    let header = GramHeader {
        version: FORMAT_VERSION,
        t: cache.size() - 1,
        mask: cache.mask,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut flat = Vec::with_capacity(2 * cache.size() * cache.size());
    flat.extend_from_slice(&cache.inner);
    flat.extend_from_slice(&cache.dist2);
    write_container(path.as_ref(), GRAM_MAGIC, &header_bytes, &encode_payload(&flat))
}

pub fn load_gram(path: impl AsRef<Path>) -> Result<GramCache> {
    let path = path.as_ref();
    let (header_bytes, payload) = read_container(path, GRAM_MAGIC)?;
    let header: GramHeader = serde_json::from_slice(&header_bytes)?;
    check_version(header.version)?;
    let size = header.t + 1;
    check_payload_len(&payload, 2 * size * size, "gram")?;
    let flat = decode_payload(&payload);
    Ok(GramCache {
        inner: flat[..size * size].to_vec(),
        dist2: flat[size * size..].to_vec(),
        size,
        mask: header.mask,
    })
}
