//! Seeded synthetic cross-view worlds.
//!
//! Each domain ("area") owns one large aerial feature map: Gaussian-smoothed
//! white noise whose per-cell feature vectors are rescaled to norm `sqrt(C)`.
//! A pair crops an aerial patch from its domain map and reads the ground
//! observation at the hidden location, corrupted by the domain's per-channel
//! gain, bias and additive noise. Patches are aligned to the coarsest pyramid
//! block so every level is a crop of a pooled domain map.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gridmap::GridLoc;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("geometry {rows}x{cols} is not divisible by 2^{} across {levels} levels", levels - 1)]
    IndivisibleGeometry {
        rows: usize,
        cols: usize,
        levels: usize,
    },
    #[error("ground truth of the {0} split is hidden")]
    GtHidden(SplitRole),
    #[error("world hash mismatch: manifest {stored}, recomputed {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("malformed world file: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

/// One area's generative parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub feature_channels: usize,
    /// Gaussian low-pass radius of the aerial field, in cells.
    pub smoothness: f64,
    /// Per-channel multiplicative corruption of the ground observation.
    pub gain: Vec<f64>,
    /// Per-channel additive offset of the ground observation.
    pub bias: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
}

impl DomainSpec {
    /// Identity gap, no noise.
    pub fn clean(domain_id: &str, feature_channels: usize, smoothness: f64, seed: u64) -> Self {
        Self {
            domain_id: domain_id.to_owned(),
            feature_channels,
            smoothness,
            gain: vec![1.0; feature_channels],
            bias: vec![0.0; feature_channels],
            noise_std: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(format!("{}: {m}", self.domain_id)));
        if self.feature_channels == 0 {
            return bad("feature_channels must be positive".into());
        }
        if !(self.smoothness > 0.0) {
            return bad(format!("smoothness must be > 0, got {}", self.smoothness));
        }
        if !(self.noise_std >= 0.0) {
            return bad(format!("noise_std must be >= 0, got {}", self.noise_std));
        }
        if self.gain.len() != self.feature_channels || self.bias.len() != self.feature_channels {
            return bad("gain/bias length must equal feature_channels".into());
        }
        if self.gain.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return bad("gain/bias must be finite".into());
        }
        Ok(())
    }

    /// Applies the deterministic part of the domain corruption.
    pub fn corrupt(&self, aerial_cell: &[f64]) -> Vec<f64> {
        aerial_cell
            .iter()
            .zip(&self.gain)
            .zip(&self.bias)
            .map(|((a, g), b)| g * a + b)
            .collect()
    }
}

/// Aerial patch size and pyramid depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldGeometry {
    pub rows: usize,
    pub cols: usize,
    pub levels: usize,
}

impl WorldGeometry {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.levels < 2 {
            return Err(SynthError::InvalidConfig(format!(
                "a coarse-to-fine pyramid needs at least 2 levels, got {}",
                self.levels
            )));
        }
        let block = 1usize << (self.levels - 1);
        if self.rows == 0 || self.cols == 0 || self.rows % block != 0 || self.cols % block != 0 {
            return Err(SynthError::IndivisibleGeometry {
                rows: self.rows,
                cols: self.cols,
                levels: self.levels,
            });
        }
        if self.rows < 3 || self.cols < 3 {
            return Err(SynthError::InvalidConfig("patch must be at least 3x3".into()));
        }
        Ok(())
    }

    /// Resolution of level `k` (0 is coarsest).
    pub fn level_dims(&self, k: usize) -> (usize, usize) {
        let f = 1usize << (self.levels - 1 - k);
        (self.rows / f, self.cols / f)
    }

    pub fn block(&self) -> usize {
        1usize << (self.levels - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub teacher_train: usize,
    pub source_val: usize,
    pub adapt_train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    /// Target-area counts split 70/10/20 out of `target_total`.
    pub fn from_protocol(teacher_train: usize, source_val: usize, target_total: usize) -> Self {
        let adapt_train = target_total * 7 / 10;
        let validation = target_total / 10;
        Self {
            teacher_train,
            source_val,
            adapt_train,
            validation,
            test: target_total - adapt_train - validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub geometry: WorldGeometry,
    pub counts: SplitCounts,
    /// Meters per finest-level cell.
    pub scale_s: f64,
    /// Domain map side length as a multiple of the patch side.
    pub map_factor: usize,
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        self.source.validate()?;
        self.target.validate()?;
        self.geometry.validate()?;
        if self.source.feature_channels != self.target.feature_channels {
            return Err(SynthError::InvalidConfig("domains disagree on feature_channels".into()));
        }
        let c = &self.counts;
        if [c.teacher_train, c.source_val, c.adapt_train, c.validation, c.test].contains(&0) {
            return Err(SynthError::InvalidConfig("every split needs at least one pair".into()));
        }
        if !(self.scale_s > 0.0) {
            return Err(SynthError::InvalidConfig("scale_s must be > 0".into()));
        }
        if self.map_factor == 0 {
            return Err(SynthError::InvalidConfig("map_factor must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.source.feature_channels
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// A dense `rows × cols × channels` field, channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureField {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Block average with an integer factor.
    fn mean_pool(&self, factor: usize) -> FeatureField {
        let rows = self.rows / factor;
        let cols = self.cols / factor;
        let ch = self.channels;
        let mut data = vec![0.0; rows * cols * ch];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let o = ((r / factor) * cols + c / factor) * ch;
                for (d, s) in data[o..o + ch].iter_mut().zip(self.cell(r, c)) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / (factor * factor) as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        FeatureField {
            rows,
            cols,
            channels: ch,
            data,
        }
    }

    fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        for d in [self.rows, self.cols, self.channels] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn read_binary<R: Read>(mut r: R) -> Result<Self, SynthError> {
        let mut dims = [0usize; 3];
        let mut word = [0u8; 4];
        for d in dims.iter_mut() {
            r.read_exact(&mut word)?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        let data = read_f64s(&mut r, n)?;
        Ok(FeatureField {
            rows: dims[0],
            cols: dims[1],
            channels: dims[2],
            data,
        })
    }
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, SynthError> {
    let mut out = Vec::with_capacity(n);
    let mut cell = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut cell)?;
        out.push(f64::from_le_bytes(cell));
    }
    Ok(out)
}

/// A domain map and its mean-pooled coarser levels (index 0 coarsest).
#[derive(Debug)]
pub struct AerialPyramid {
    levels: Vec<FeatureField>,
}

impl AerialPyramid {
    pub fn build(finest: FeatureField, levels: usize) -> Self {
        let mut out: Vec<FeatureField> = (1..levels)
            .rev()
            .map(|k| finest.mean_pool(1 << k))
            .collect();
        out.push(finest);
        Self { levels: out }
    }

    pub fn finest(&self) -> &FeatureField {
        self.levels.last().expect("non-empty pyramid")
    }

    pub fn level(&self, k: usize) -> &FeatureField {
        &self.levels[k]
    }
}

/// A patch of one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct AerialView<'a> {
    field: &'a FeatureField,
    row0: usize,
    col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl<'a> AerialView<'a> {
    pub fn channels(&self) -> usize {
        self.field.channels
    }

    pub fn cell(&self, row: usize, col: usize) -> &'a [f64] {
        self.field.cell(self.row0 + row, self.col0 + col)
    }

    /// Contiguous `cols × channels` slice of one patch row.
    pub fn row(&self, row: usize) -> &'a [f64] {
        let ch = self.field.channels;
        let start = ((self.row0 + row) * self.field.cols + self.col0) * ch;
        &self.field.data[start..start + self.cols * ch]
    }
}

/// One ground observation and its covering aerial patch.
#[derive(Debug, Clone)]
pub struct CrossViewPair {
    pub pair_id: u64,
    /// Top-left corner of the patch in the finest domain map.
    pub origin: (usize, usize),
    pub geometry: WorldGeometry,
    pub ground: Vec<f64>,
    /// Unit viewing direction as `(d_col, d_row)`.
    pub heading: [f64; 2],
    /// Meters per finest-level cell.
    pub scale_s: f64,
    aerial: Arc<AerialPyramid>,
    gt_loc: GridLoc,
}

impl CrossViewPair {
    pub fn channels(&self) -> usize {
        self.ground.len()
    }

    pub fn levels(&self) -> usize {
        self.geometry.levels
    }

    /// Aerial patch at pyramid level `k` (0 is coarsest).
    pub fn aerial_level(&self, k: usize) -> AerialView<'_> {
        let f = 1usize << (self.geometry.levels - 1 - k);
        let (rows, cols) = self.geometry.level_dims(k);
        AerialView {
            field: self.aerial.level(k),
            row0: self.origin.0 / f,
            col0: self.origin.1 / f,
            rows,
            cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    TeacherTrain,
    SourceVal,
    AdaptTrain,
    Validation,
    Test,
}

impl SplitRole {
    pub const ALL: [SplitRole; 5] = [
        SplitRole::TeacherTrain,
        SplitRole::SourceVal,
        SplitRole::AdaptTrain,
        SplitRole::Validation,
        SplitRole::Test,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SplitRole::TeacherTrain => "teacher-train",
            SplitRole::SourceVal => "source-val",
            SplitRole::AdaptTrain => "adapt-train",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            SplitRole::TeacherTrain => 0x7EAC_0001,
            SplitRole::SourceVal => 0x7EAC_0002,
            SplitRole::AdaptTrain => 0x7EAC_0003,
            SplitRole::Validation => 0x7EAC_0004,
            SplitRole::Test => 0x7EAC_0005,
        }
    }
}

impl std::fmt::Display for SplitRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// An ordered set of pairs with gated access to the hidden locations.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pairs: Vec<CrossViewPair>,
    gt_visible: bool,
}

impl DatasetSplit {
    pub fn new(role: SplitRole, pairs: Vec<CrossViewPair>) -> Self {
        Self {
            role,
            pairs,
            gt_visible: true,
        }
    }

    pub fn pairs(&self) -> &[CrossViewPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gt_visible(&self) -> bool {
        self.gt_visible
    }

    pub fn gt_loc(&self, idx: usize) -> Result<GridLoc, SynthError> {
        if self.gt_visible {
            Ok(self.pairs[idx].gt_loc)
        } else {
            Err(SynthError::GtHidden(self.role))
        }
    }

    pub fn gt_locs(&self) -> Result<Vec<GridLoc>, SynthError> {
        (0..self.len()).map(|i| self.gt_loc(i)).collect()
    }

    /// Evaluation-only access; the pairing is untouched.
    pub fn unlock_gt(&self) -> DatasetSplit {
        DatasetSplit {
            gt_visible: true,
            ..self.clone()
        }
    }

    /// Pairs whose id is in `keep`, in the original order.
    pub fn subset(&self, keep: &std::collections::BTreeSet<u64>) -> DatasetSplit {
        DatasetSplit {
            role: self.role,
            pairs: self
                .pairs
                .iter()
                .filter(|p| keep.contains(&p.pair_id))
                .cloned()
                .collect(),
            gt_visible: self.gt_visible,
        }
    }
}

/// A view of `split` whose ground truth cannot be read.
pub fn hide_gt(split: &DatasetSplit) -> DatasetSplit {
    DatasetSplit {
        gt_visible: false,
        ..split.clone()
    }
}

/// A generated world: two domain maps and the five splits.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub hash: String,
    pub source_map: Arc<AerialPyramid>,
    pub target_map: Arc<AerialPyramid>,
    pub teacher_train: DatasetSplit,
    pub source_val: DatasetSplit,
    /// Ground truth hidden.
    pub adapt_train: DatasetSplit,
    pub validation: DatasetSplit,
    pub test: DatasetSplit,
}

impl World {
    pub fn split(&self, role: SplitRole) -> &DatasetSplit {
        match role {
            SplitRole::TeacherTrain => &self.teacher_train,
            SplitRole::SourceVal => &self.source_val,
            SplitRole::AdaptTrain => &self.adapt_train,
            SplitRole::Validation => &self.validation,
            SplitRole::Test => &self.test,
        }
    }
}

/// Smoothed noise field with per-cell feature norm `sqrt(channels)`.
fn domain_field(spec: &DomainSpec, rows: usize, cols: usize) -> FeatureField {
    let ch = spec.feature_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise: Vec<f64> = (0..rows * cols * ch)
        .map(|_| rng.sample(StandardNormal))
        .collect();

    let radius = (3.0 * spec.smoothness).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * spec.smoothness * spec.smoothness)).exp())
        .collect();
    // Separable blur with periodic boundaries.
    let blur = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                let o = (r * cols + c) * ch;
                for (t, w) in kernel.iter().enumerate() {
                    let off = t as isize - radius;
                    let (rr, cc) = if along_rows {
                        ((r as isize + off).rem_euclid(rows as isize) as usize, c)
                    } else {
                        (r, (c as isize + off).rem_euclid(cols as isize) as usize)
                    };
                    let i = (rr * cols + cc) * ch;
                    for k in 0..ch {
                        out[o + k] += w * src[i + k];
                    }
                }
            }
        }
        out
    };
    let mut data = blur(&blur(&noise, true), false);
    let target = (ch as f64).sqrt();
    for cell in data.chunks_mut(ch) {
        let norm = cell.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        cell.iter_mut().for_each(|v| *v *= target / norm);
    }
    FeatureField {
        rows,
        cols,
        channels: ch,
        data,
    }
}

fn generate_pairs(
    role: SplitRole,
    count: usize,
    spec: &DomainSpec,
    map: &Arc<AerialPyramid>,
    geometry: WorldGeometry,
    scale_s: f64,
    id_base: u64,
) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ role.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let finest = map.finest();
    let block = geometry.block();
    let max_r = (finest.rows - geometry.rows) / block;
    let max_c = (finest.cols - geometry.cols) / block;
    let pairs = (0..count)
        .map(|i| {
            let origin = (
                rng.random_range(0..=max_r) * block,
                rng.random_range(0..=max_c) * block,
            );
            let gt_loc = GridLoc::new(
                rng.random_range(1..geometry.rows - 1),
                rng.random_range(1..geometry.cols - 1),
            );
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut ground = spec.corrupt(finest.cell(origin.0 + gt_loc.row, origin.1 + gt_loc.col));
            for g in ground.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *g += spec.noise_std * n;
            }
            CrossViewPair {
                pair_id: id_base + i as u64,
                origin,
                geometry,
                ground,
                heading: [angle.cos(), angle.sin()],
                scale_s,
                aerial: Arc::clone(map),
                gt_loc,
            }
        })
        .collect();
    DatasetSplit::new(role, pairs)
}

/// Builds every split of a world from its config; fully determined by the seeds.
pub fn generate_world(config: &WorldConfig) -> Result<World, SynthError> {
    config.validate()?;
    let g = config.geometry;
    let (mr, mc) = (g.rows * config.map_factor, g.cols * config.map_factor);
    let source_map = Arc::new(AerialPyramid::build(domain_field(&config.source, mr, mc), g.levels));
    let target_map = Arc::new(AerialPyramid::build(domain_field(&config.target, mr, mc), g.levels));
    assemble(config.clone(), source_map, target_map)
}

fn assemble(
    config: WorldConfig,
    source_map: Arc<AerialPyramid>,
    target_map: Arc<AerialPyramid>,
) -> Result<World, SynthError> {
    let c = config.counts;
    let g = config.geometry;
    let s = config.scale_s;
    let mut base = 0u64;
    let mut next = |n: usize| {
        let b = base;
        base += n as u64;
        b
    };
    let teacher_train = generate_pairs(
        SplitRole::TeacherTrain,
        c.teacher_train,
        &config.source,
        &source_map,
        g,
        s,
        next(c.teacher_train),
    );
    let source_val = generate_pairs(SplitRole::SourceVal, c.source_val, &config.source, &source_map, g, s, next(c.source_val));
    let adapt_train = generate_pairs(SplitRole::AdaptTrain, c.adapt_train, &config.target, &target_map, g, s, next(c.adapt_train));
    let validation = generate_pairs(SplitRole::Validation, c.validation, &config.target, &target_map, g, s, next(c.validation));
    let test = generate_pairs(SplitRole::Test, c.test, &config.target, &target_map, g, s, next(c.test));
    Ok(World {
        hash: config.hash(),
        config,
        source_map,
        target_map,
        teacher_train,
        source_val,
        adapt_train: hide_gt(&adapt_train),
        validation,
        test,
    })
}

/// Structured-text description of a persisted world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldManifest {
    pub format_version: u32,
    pub world_hash: String,
    pub config: WorldConfig,
    pub split_sizes: Vec<(SplitRole, usize)>,
    pub files: Vec<String>,
}

pub const WORLD_FORMAT_VERSION: u32 = 1;

/// Writes `manifest.json`, both domain maps and one binary file per split.
pub fn save_world(world: &World, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (name, map) in [("source_map.bin", &world.source_map), ("target_map.bin", &world.target_map)] {
        let mut w = BufWriter::new(fs::File::create(dir.join(name))?);
        map.finest().write_binary(&mut w)?;
        w.flush()?;
        files.push(name.to_owned());
    }
    for role in SplitRole::ALL {
        let name = format!("{}.bin", role.name());
        let mut w = BufWriter::new(fs::File::create(dir.join(&name))?);
        write_split(world.split(role), &mut w)?;
        w.flush()?;
        files.push(name);
    }
    let manifest = WorldManifest {
        format_version: WORLD_FORMAT_VERSION,
        world_hash: world.hash.clone(),
        config: world.config.clone(),
        split_sizes: SplitRole::ALL.iter().map(|r| (*r, world.split(*r).len())).collect(),
        files,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<WorldManifest, SynthError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_world(dir: &Path) -> Result<World, SynthError> {
    let manifest = read_manifest(dir)?;
    let computed = manifest.config.hash();
    if computed != manifest.world_hash {
        return Err(SynthError::HashMismatch {
            stored: manifest.world_hash,
            computed,
        });
    }
    let levels = manifest.config.geometry.levels;
    let read_map = |name: &str| -> Result<Arc<AerialPyramid>, SynthError> {
        let r = BufReader::new(fs::File::open(dir.join(name))?);
        Ok(Arc::new(AerialPyramid::build(FeatureField::read_binary(r)?, levels)))
    };
    let source_map = read_map("source_map.bin")?;
    let target_map = read_map("target_map.bin")?;
    let read = |role: SplitRole, map: &Arc<AerialPyramid>| -> Result<DatasetSplit, SynthError> {
        let r = BufReader::new(fs::File::open(dir.join(format!("{}.bin", role.name())))?);
        read_split(r, role, map, &manifest.config)
    };
    let teacher_train = read(SplitRole::TeacherTrain, &source_map)?;
    let source_val = read(SplitRole::SourceVal, &source_map)?;
    let adapt_train = read(SplitRole::AdaptTrain, &target_map)?;
    let validation = read(SplitRole::Validation, &target_map)?;
    let test = read(SplitRole::Test, &target_map)?;
    Ok(World {
        hash: manifest.world_hash,
        config: manifest.config,
        source_map,
        target_map,
        teacher_train,
        source_val,
        adapt_train: hide_gt(&adapt_train),
        validation,
        test,
    })
}

fn write_split<W: Write>(split: &DatasetSplit, w: &mut W) -> io::Result<()> {
    w.write_all(&(split.pairs.len() as u64).to_le_bytes())?;
    for p in &split.pairs {
        w.write_all(&p.pair_id.to_le_bytes())?;
        for v in [p.origin.0, p.origin.1, p.gt_loc.row, p.gt_loc.col] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in p.heading.iter().chain(std::iter::once(&p.scale_s)).chain(&p.ground) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_split<R: Read>(
    mut r: R,
    role: SplitRole,
    map: &Arc<AerialPyramid>,
    config: &WorldConfig,
) -> Result<DatasetSplit, SynthError> {
    let mut word = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64, SynthError> {
        r.read_exact(&mut word)?;
        Ok(u64::from_le_bytes(word))
    };
    let n = next_u64(&mut r)? as usize;
    let g = config.geometry;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let pair_id = next_u64(&mut r)?;
        let mut idx = [0usize; 4];
        for v in idx.iter_mut() {
            *v = next_u64(&mut r)? as usize;
        }
        let head = read_f64s(&mut r, 3)?;
        let ground = read_f64s(&mut r, config.channels())?;
        let gt_loc = GridLoc::new(idx[2], idx[3]);
        if idx[0] + g.rows > map.finest().rows || idx[1] + g.cols > map.finest().cols {
            return Err(SynthError::Malformed(format!("pair {pair_id} patch outside map")));
        }
        gt_loc
            .check_bounds(g.rows, g.cols)
            .map_err(|e| SynthError::Malformed(e.to_string()))?;
        pairs.push(CrossViewPair {
            pair_id,
            origin: (idx[0], idx[1]),
            geometry: g,
            ground,
            heading: [head[0], head[1]],
            scale_s: head[2],
            aerial: Arc::clone(map),
            gt_loc,
        });
    }
    Ok(DatasetSplit::new(role, pairs))
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn small_config(seed: u64) -> WorldConfig {
        let mut target = DomainSpec::clean("target", 4, 1.5, seed + 1);
        target.gain = vec![1.5; 4];
        target.noise_std = 0.3;
        WorldConfig {
            source: DomainSpec::clean("source", 4, 1.5, seed),
            target,
            geometry: WorldGeometry {
                rows: 16,
                cols: 16,
                levels: 3,
            },
            counts: SplitCounts {
                teacher_train: 40,
                source_val: 10,
                adapt_train: 30,
                validation: 10,
                test: 10,
            },
            scale_s: 0.5,
            map_factor: 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::small_config;
    use super::*;

    #[test]
    fn zero_gap_ground_is_aerial_window() {
        let mut cfg = small_config(1);
        cfg.target = DomainSpec::clean("target", 4, 1.5, 2);
        let world = generate_world(&cfg).unwrap();
        let test = &world.test;
        for (i, p) in test.pairs().iter().enumerate() {
            let gt = test.gt_loc(i).unwrap();
            let view = p.aerial_level(cfg.geometry.levels - 1);
            assert_eq!(p.ground.as_slice(), view.cell(gt.row, gt.col));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config(9);
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a.source_map.finest(), b.source_map.finest());
        for role in SplitRole::ALL {
            let (sa, sb) = (a.split(role).unlock_gt(), b.split(role).unlock_gt());
            for (i, (pa, pb)) in sa.pairs().iter().zip(sb.pairs()).enumerate() {
                assert_eq!(pa.ground, pb.ground);
                assert_eq!(pa.origin, pb.origin);
                assert_eq!(pa.heading, pb.heading);
                assert_eq!(sa.gt_loc(i).unwrap(), sb.gt_loc(i).unwrap());
            }
        }
    }

    #[test]
    fn target_corruption_matches_recomputation() {
        let cfg = small_config(4);
        let world = generate_world(&cfg).unwrap();
        let k = cfg.geometry.levels - 1;
        let mut residuals = Vec::new();
        for (i, p) in world.test.pairs().iter().enumerate() {
            let gt = world.test.gt_loc(i).unwrap();
            let clean = cfg.target.corrupt(p.aerial_level(k).cell(gt.row, gt.col));
            residuals.extend(p.ground.iter().zip(&clean).map(|(g, c)| g - c));
        }
        let rstd = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
        assert!((rstd - 0.3).abs() < 0.1, "residual std {rstd}");
        let (mut ga, mut aa) = (0.0, 0.0);
        for (i, p) in world.test.pairs().iter().enumerate() {
            let gt = world.test.gt_loc(i).unwrap();
            for (g, a) in p.ground.iter().zip(p.aerial_level(k).cell(gt.row, gt.col)) {
                ga += g * a;
                aa += a * a;
            }
        }
        assert!((ga / aa - 1.5).abs() < 0.1, "slope {}", ga / aa);
    }

    #[test]
    fn target_ground_variance_exceeds_source() {
        let mut cfg = small_config(6);
        cfg.counts.teacher_train = 400;
        cfg.counts.test = 400;
        let world = generate_world(&cfg).unwrap();
        let variances = |split: &DatasetSplit| -> Vec<f64> {
            let n = split.len() as f64;
            (0..cfg.channels())
                .map(|c| {
                    let xs: Vec<f64> = split.pairs().iter().map(|p| p.ground[c]).collect();
                    let m = xs.iter().sum::<f64>() / n;
                    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
                })
                .collect()
        };
        let (src, tgt) = (variances(&world.teacher_train), variances(&world.test));
        for (s, t) in src.iter().zip(&tgt) {
            assert!(t > s, "target variance {t} <= source {s}");
        }
    }

    #[test]
    fn adapt_split_hides_gt() {
        let world = generate_world(&small_config(2)).unwrap();
        assert!(matches!(world.adapt_train.gt_loc(0), Err(SynthError::GtHidden(SplitRole::AdaptTrain))));
        let unlocked = world.adapt_train.unlock_gt();
        let hidden_again = hide_gt(&unlocked);
        assert!(hidden_again.gt_loc(0).is_err());
        assert_eq!(
            hidden_again.unlock_gt().gt_locs().unwrap(),
            unlocked.gt_locs().unwrap()
        );
        assert!(world.test.gt_loc(0).is_ok());
    }

    #[test]
    fn gt_stays_off_the_border() {
        let world = generate_world(&small_config(3)).unwrap();
        for role in SplitRole::ALL {
            let split = world.split(role).unlock_gt();
            for loc in split.gt_locs().unwrap() {
                assert!(loc.row >= 1 && loc.row <= 14 && loc.col >= 1 && loc.col <= 14);
            }
            for p in split.pairs() {
                let n = p.heading[0].hypot(p.heading[1]);
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_indivisible_geometry() {
        let mut cfg = small_config(1);
        cfg.geometry.rows = 18;
        assert!(matches!(generate_world(&cfg), Err(SynthError::IndivisibleGeometry { .. })));
        cfg.geometry.rows = 16;
        cfg.geometry.levels = 1;
        assert!(generate_world(&cfg).is_err());
    }

    #[test]
    fn coarse_levels_are_block_means() {
        let world = generate_world(&small_config(5)).unwrap();
        let p = &world.test.pairs()[0];
        let fine = p.aerial_level(2);
        let coarse = p.aerial_level(0);
        for ch in 0..4 {
            let mut s = 0.0;
            for r in 0..4 {
                for c in 0..4 {
                    s += fine.cell(4 + r, 8 + c)[ch];
                }
            }
            assert!((coarse.cell(1, 2)[ch] - s / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn persisted_world_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let world = generate_world(&small_config(6)).unwrap();
        save_world(&world, dir.path()).unwrap();
        let back = load_world(dir.path()).unwrap();
        assert_eq!(back.hash, world.hash);
        assert!(back.adapt_train.gt_loc(0).is_err());
        for role in SplitRole::ALL {
            let (a, b) = (world.split(role).unlock_gt(), back.split(role).unlock_gt());
            assert_eq!(a.gt_locs().unwrap(), b.gt_locs().unwrap());
            for (pa, pb) in a.pairs().iter().zip(b.pairs()) {
                assert_eq!(pa.ground, pb.ground);
                assert_eq!(pa.aerial_level(1).row(3), pb.aerial_level(1).row(3));
            }
        }
    }
}
