//! Synthetic rubric-scored dataset: generator, binary sample files and the
//! JSON manifest that lists the splits.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::{FeatureSequence, StepDescriptor};
use crate::rubric::{RubricError, RubricSpec, Stage, StepType};
use crate::stochastic::mix;

pub const SAMPLE_MAGIC: &[u8; 4] = b"RAQA";
pub const SAMPLE_VERSION: u32 = 1;
/// Points per step on the judging scale.
pub const SUBSCORE_SCALE: f64 = 10.0;

const MAX_COSINE: f64 = 0.9;
const MAX_REJECTIONS: usize = 10_000;
const DESCRIPTOR_TAG: u64 = 0xd35c;
const SIGNATURE_TAG: u64 = 0x5169;
const QUALITY_TAG: u64 = 0x9a1e;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed sample file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: unsupported sample file version {found} (reader supports {supported})")]
    UnsupportedVersion { path: PathBuf, found: u32, supported: u32 },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Rubric(#[from] RubricError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub out_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    /// Clips per video.
    pub t: usize,
    pub d_feat: usize,
    pub d_text: usize,
    /// Number of distinct step types in the rubric.
    pub catalog_size: usize,
    /// Rubric stages the catalog is split into, in order.
    pub stages: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub eta_min: f64,
    pub eta_max: f64,
    pub difficulty_min: f64,
    pub difficulty_max: f64,
    /// Per-feature RMS of a step-type signature (its length is this times √d_feat).
    pub signature_scale: f64,
    /// Length of the quality direction added to a clip at `q = 1`.
    pub quality_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            out_dir: PathBuf::from("data"),
            n_train: 500,
            n_test: 150,
            t: 24,
            d_feat: 32,
            d_text: 16,
            catalog_size: 8,
            stages: 3,
            k_min: 2,
            k_max: 5,
            eta_min: 0.05,
            eta_max: 0.5,
            difficulty_min: 1.0,
            difficulty_max: 1.0,
            signature_scale: 1.0,
            quality_scale: 2.0,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.n_train + self.n_test < 2 {
            return bad("need at least two samples".into());
        }
        if self.t == 0 || self.d_feat == 0 || self.d_text < 2 {
            return bad("t and d_feat must be positive, d_text at least 2".into());
        }
        if self.k_min == 0 || self.k_min > self.k_max {
            return bad(format!("step range [{}, {}] is empty", self.k_min, self.k_max));
        }
        if self.k_max > self.t {
            return bad(format!("{} steps cannot fit in {} clips", self.k_max, self.t));
        }
        if self.k_max > self.catalog_size {
            return bad(format!("{} steps need at least as many step types, catalog has {}", self.k_max, self.catalog_size));
        }
        if self.stages == 0 || self.stages > self.catalog_size {
            return bad(format!("{} stages for {} step types", self.stages, self.catalog_size));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.eta_max && self.eta_max.is_finite()) {
            return bad(format!("noise range [{}, {}] invalid", self.eta_min, self.eta_max));
        }
        if !(self.difficulty_min > 0.0 && self.difficulty_min <= self.difficulty_max && self.difficulty_max.is_finite()) {
            return bad(format!("difficulty range [{}, {}] invalid", self.difficulty_min, self.difficulty_max));
        }
        if !(self.quality_scale > 0.0 && self.quality_scale.is_finite()) {
            return bad("quality_scale must be positive".into());
        }
        if !(self.signature_scale > 0.0 && self.signature_scale.is_finite()) {
            return bad("signature_scale must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let cfg: GeneratorConfig =
            serde_json::from_str(text).map_err(|source| DataError::Json { path: PathBuf::from("<config>"), source })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub features: FeatureSequence,
    pub step_types: Vec<u32>,
    /// Inclusive, 1-indexed clip intervals per step.
    pub intervals: Vec<(u32, u32)>,
    pub qualities: Vec<f64>,
    pub difficulty: f64,
    /// Min-max normalized label.
    pub label: f64,
    pub eta: f64,
}

impl SyntheticSample {
    pub fn id(&self) -> &str {
        &self.features.id
    }

    pub fn k(&self) -> usize {
        self.step_types.len()
    }

    /// Label before normalization.
    pub fn raw_label(&self) -> f64 {
        raw_label(&self.qualities, self.difficulty)
    }

    pub fn intervals_usize(&self) -> Vec<(usize, usize)> {
        self.intervals.iter().map(|&(a, b)| (a as usize, b as usize)).collect()
    }
}

/// `difficulty · Σ 10·q_s`.
pub fn raw_label(qualities: &[f64], difficulty: f64) -> f64 {
    difficulty * qualities.iter().map(|q| SUBSCORE_SCALE * q).sum::<f64>()
}

/// Unit vectors for ids `0..count`, each drawn from a stream keyed by
/// `(seed, tag, id)` and redrawn until its |cosine| with every earlier id is
/// below 0.9. If the space is too crowded, the least-correlated candidate seen
/// is kept.
fn unit_catalog(count: usize, dim: usize, seed: u64, tag: u64) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for id in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, tag), id as u64));
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..MAX_REJECTIONS {
            let v = random_unit(&mut rng, dim);
            let worst = out.iter().map(|u| dot(u, &v).abs()).fold(0.0, f64::max);
            if worst < MAX_COSINE {
                best = Some((worst, v));
                break;
            }
            if best.as_ref().map_or(true, |(w, _)| worst < *w) {
                best = Some((worst, v));
            }
        }
        out.push(best.expect("at least one candidate").1);
    }
    out
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Descriptors for every step type in a catalog of `count`.
pub fn step_descriptors(count: usize, d_text: usize, master_seed: u64) -> Vec<Vec<f64>> {
    unit_catalog(count, d_text, master_seed, DESCRIPTOR_TAG)
}

/// Text-encoder stand-in: a unit vector deterministic in `(id, seed)`.
pub fn step_descriptor(step_type_id: u32, d_text: usize, master_seed: u64) -> Vec<f64> {
    step_descriptors(step_type_id as usize + 1, d_text, master_seed).pop().expect("non-empty catalog")
}

/// Per-type feature signatures and the shared quality direction. The quality
/// direction is orthogonalized against the signatures when the width allows.
pub fn feature_basis(catalog_size: usize, d_feat: usize, master_seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let signatures = unit_catalog(catalog_size, d_feat, master_seed, SIGNATURE_TAG);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(master_seed, QUALITY_TAG));
    let mut dir = random_unit(&mut rng, d_feat);
    if catalog_size < d_feat {
        // Gram-Schmidt against an orthonormalized copy of the signatures.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for s in &signatures {
            let mut v = s.clone();
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-9 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        for b in &basis {
            let c = dot(&dir, b);
            dir.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = dot(&dir, &dir).sqrt();
        dir.iter_mut().for_each(|x| *x /= n);
    }
    (signatures, dir)
}

/// Rubric over the generator's catalog: types split into contiguous stages.
pub fn rubric_spec(cfg: &GeneratorConfig) -> RubricSpec {
    let step_types =
        (0..cfg.catalog_size as u32).map(|id| StepType { id, name: format!("step-{id}") }).collect();
    let stages = (0..cfg.stages)
        .map(|s| {
            let lo = s * cfg.catalog_size / cfg.stages;
            let hi = (s + 1) * cfg.catalog_size / cfg.stages;
            Stage { id: s as u32, members: (lo as u32..hi as u32).collect() }
        })
        .collect();
    RubricSpec {
        step_types,
        stages,
        difficulty_multiplier: cfg.difficulty_min != cfg.difficulty_max,
        ordered: true,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub rubric: RubricSpec,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
    pub seed: u64,
    pub label_min: f64,
    pub label_max: f64,
}

/// Draw one sample (label left unnormalized) from its own keyed stream.
fn draw_sample(
    cfg: &GeneratorConfig,
    index: usize,
    id: String,
    signatures: &[Vec<f64>],
    quality_dir: &[f64],
) -> Result<SyntheticSample, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1 + index as u64));
    let k = rng.gen_range(cfg.k_min..=cfg.k_max);

    let mut types: Vec<u32> = rand::seq::index::sample(&mut rng, cfg.catalog_size, k)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    types.sort_unstable();

    // K−1 distinct cut points in 1..T split [1, T] into K non-empty runs.
    let mut cuts: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.t - 1, k - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut intervals = Vec::with_capacity(k);
    let mut start = 1;
    for &c in cuts.iter().chain(std::iter::once(&cfg.t)) {
        intervals.push((start as u32, c as u32));
        start = c + 1;
    }

    let qualities: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
    let eta = if cfg.eta_max > cfg.eta_min { rng.gen_range(cfg.eta_min..cfg.eta_max) } else { cfg.eta_min };
    let difficulty = if cfg.difficulty_max > cfg.difficulty_min {
        rng.gen_range(cfg.difficulty_min..cfg.difficulty_max)
    } else {
        cfg.difficulty_min
    };

    let d = cfg.d_feat;
    let sig_len = cfg.signature_scale * (d as f64).sqrt();
    let mut values = Vec::with_capacity(cfg.t * d);
    for (s, &(lo, hi)) in intervals.iter().enumerate() {
        let sig = &signatures[types[s] as usize];
        let amp = cfg.quality_scale * qualities[s];
        for _ in lo..=hi {
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                values.push((sig_len * sig[j] + amp * quality_dir[j] + eta * noise) as f32);
            }
        }
    }
    let features = FeatureSequence::new(id, cfg.t, d, values).map_err(|e| DataError::Config(e.to_string()))?;
    Ok(SyntheticSample {
        features,
        step_types: types,
        intervals,
        label: raw_label(&qualities, difficulty),
        qualities,
        difficulty,
        eta,
    })
}

/// Generate both splits in memory; labels are min-max normalized over all samples.
pub fn generate(cfg: &GeneratorConfig) -> Result<GeneratedDataset, DataError> {
    cfg.validate()?;
    let (signatures, quality_dir) = feature_basis(cfg.catalog_size, cfg.d_feat, cfg.seed);
    let mut train = Vec::with_capacity(cfg.n_train);
    let mut test = Vec::with_capacity(cfg.n_test);
    for i in 0..cfg.n_train + cfg.n_test {
        let (split, local) = if i < cfg.n_train { ("train", i) } else { ("test", i - cfg.n_train) };
        let sample = draw_sample(cfg, i, format!("{split}-{local:05}"), &signatures, &quality_dir)?;
        if i < cfg.n_train { train.push(sample) } else { test.push(sample) }
    }
    let raw = train.iter().chain(&test).map(|s| s.label);
    let (label_min, label_max) = raw.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
    if label_max <= label_min {
        return Err(DataError::Config("all generated labels are equal".into()));
    }
    for s in train.iter_mut().chain(test.iter_mut()) {
        s.label = (s.label - label_min) / (label_max - label_min);
    }
    Ok(GeneratedDataset { rubric: rubric_spec(cfg), train, test, seed: cfg.seed, label_min, label_max })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub rubric_spec: PathBuf,
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub seed: u64,
    pub label_min: f64,
    pub label_max: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| DataError::Json { path: path.to_path_buf(), source })
    }

    /// Entries are relative to the manifest's directory unless absolute.
    pub fn resolve(manifest_path: &Path, entry: &Path) -> PathBuf {
        if entry.is_absolute() {
            entry.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(entry)
        }
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * (self.label_max - self.label_min) + self.label_min
    }
}

/// Write samples, rubric spec and manifest under `out_dir`; returns the manifest path.
pub fn write_dataset(ds: &GeneratedDataset, out_dir: &Path) -> Result<PathBuf, DataError> {
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(io_err(&samples_dir))?;
    let rubric_path = out_dir.join("rubric.json");
    fs::write(&rubric_path, ds.rubric.to_json()).map_err(io_err(&rubric_path))?;

    let write_split = |samples: &[SyntheticSample]| -> Result<Vec<PathBuf>, DataError> {
        samples
            .iter()
            .map(|s| {
                let rel = PathBuf::from("samples").join(format!("{}.raqa", s.id()));
                store_sample(&out_dir.join(&rel), s)?;
                Ok(rel)
            })
            .collect()
    };
    let manifest = Manifest {
        rubric_spec: PathBuf::from("rubric.json"),
        train: write_split(&ds.train)?,
        test: write_split(&ds.test)?,
        seed: ds.seed,
        label_min: ds.label_min,
        label_max: ds.label_max,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<PathBuf, DataError> {
    let ds = generate(cfg)?;
    write_dataset(&ds, &cfg.out_dir)
}

/// Manifest plus the rubric and both splits read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
    pub rubric: RubricSpec,
    pub train: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl LoadedDataset {
    pub fn load(manifest_path: &Path) -> Result<Self, DataError> {
        let manifest = Manifest::load(manifest_path)?;
        let rubric = RubricSpec::load(&Manifest::resolve(manifest_path, &manifest.rubric_spec))?;
        let read = |paths: &[PathBuf]| -> Result<Vec<SyntheticSample>, DataError> {
            paths.iter().map(|p| load_sample(&Manifest::resolve(manifest_path, p))).collect()
        };
        let train = read(&manifest.train)?;
        let test = read(&manifest.test)?;
        Ok(LoadedDataset { manifest_path: manifest_path.to_path_buf(), manifest, rubric, train, test })
    }

    pub fn split(&self, name: &str) -> Option<&[SyntheticSample]> {
        match name {
            "train" => Some(&self.train),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn encode_sample(s: &SyntheticSample) -> Vec<u8> {
    let k = s.k();
    let f = &s.features;
    let mut out = Vec::with_capacity(20 + 12 * k + 24 + 8 * k + 4 * f.values.len());
    out.extend_from_slice(SAMPLE_MAGIC);
    for v in [SAMPLE_VERSION, f.t as u32, f.d_feat as u32, k as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (ty, &(a, b)) in s.step_types.iter().zip(&s.intervals) {
        for v in [*ty, a, b] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for v in [s.label, s.difficulty, s.eta] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for q in &s.qualities {
        out.extend_from_slice(&q.to_le_bytes());
    }
    for v in &f.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn store_sample(path: &Path, s: &SyntheticSample) -> Result<(), DataError> {
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&encode_sample(s)).map_err(io_err(path))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| DataError::Format {
            path: self.path.to_path_buf(),
            reason: format!("truncated at byte {} (wanted {n} more)", self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decode a sample file; the id is the file stem.
pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<SyntheticSample, DataError> {
    let fmt = |reason: String| DataError::Format { path: path.to_path_buf(), reason };
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != SAMPLE_MAGIC {
        return Err(fmt("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != SAMPLE_VERSION {
        return Err(DataError::UnsupportedVersion { path: path.to_path_buf(), found: version, supported: SAMPLE_VERSION });
    }
    let (t, d, k) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if t == 0 || d == 0 || k == 0 || k > t {
        return Err(fmt(format!("bad header T={t} D_feat={d} K={k}")));
    }
    let mut step_types = Vec::with_capacity(k);
    let mut intervals = Vec::with_capacity(k);
    for _ in 0..k {
        step_types.push(c.u32()?);
        let (a, b) = (c.u32()?, c.u32()?);
        if a < 1 || a > b || b as usize > t {
            return Err(fmt(format!("interval [{a}, {b}] outside [1, {t}]")));
        }
        intervals.push((a, b));
    }
    let (label, difficulty, eta) = (c.f64()?, c.f64()?, c.f64()?);
    let qualities = (0..k).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
    let n = t.checked_mul(d).ok_or_else(|| fmt("feature size overflows".into()))?;
    let raw = c.take(n.checked_mul(4).ok_or_else(|| fmt("feature size overflows".into()))?)?;
    if c.pos != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let features = FeatureSequence::new(id, t, d, values).map_err(|e| fmt(e.to_string()))?;
    Ok(SyntheticSample { features, step_types, intervals, qualities, difficulty, label, eta })
}

pub fn load_sample(path: &Path) -> Result<SyntheticSample, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_sample(&bytes, path)
}

/// Descriptors for a sample's steps, in step order.
pub fn sample_steps(sample: &SyntheticSample, d_text: usize, master_seed: u64, catalog: usize) -> Vec<StepDescriptor> {
    let table = step_descriptors(catalog, d_text, master_seed);
    sample
        .step_types
        .iter()
        .map(|&t| StepDescriptor { step_type: t, descriptor: table[t as usize].clone() })
        .collect()
}

/// Peak of each step's signature response; on noiseless data this is always
/// inside the planted interval.
pub fn oracle_peaks(sample: &SyntheticSample, signatures: &[Vec<f64>]) -> Vec<usize> {
    let f = &sample.features;
    sample
        .step_types
        .iter()
        .map(|&ty| {
            let sig = &signatures[ty as usize];
            let score = |t: usize| -> f64 {
                f.values[t * f.d_feat..(t + 1) * f.d_feat].iter().zip(sig).map(|(&x, y)| x as f64 * y).sum()
            };
            (0..f.t).max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a))).expect("t > 0") + 1
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { n_train: 6, n_test: 4, t: 10, d_feat: 12, d_text: 8, ..Default::default() }
    }

    #[test]
    fn deterministic_generation() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let other = generate(&GeneratorConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.train[0].features, other.train[0].features);
    }

    #[test]
    fn intervals_partition_clips() {
        let ds = generate(&small()).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert_eq!(s.intervals[0].0, 1);
            assert_eq!(s.intervals.last().unwrap().1, 10);
            for w in s.intervals.windows(2) {
                assert_eq!(w[0].1 + 1, w[1].0);
            }
            assert!(s.step_types.windows(2).all(|w| w[0] < w[1]));
            assert!((0.0..=1.0).contains(&s.label));
        }
    }

    #[test]
    fn descriptors_are_unit_and_spread() {
        let table = step_descriptors(8, 16, 3);
        for (i, v) in table.iter().enumerate() {
            assert!((dot(v, v).sqrt() - 1.0).abs() < 1e-9);
            assert_eq!(&step_descriptor(i as u32, 16, 3), v);
            for u in &table[..i] {
                assert!(dot(u, v).abs() < MAX_COSINE);
            }
        }
    }

    #[test]
    fn quality_direction_is_orthogonal() {
        let (sigs, dir) = feature_basis(8, 32, 5);
        for s in &sigs {
            assert!(dot(s, &dir).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_round_trip_and_errors() {
        let ds = generate(&small()).unwrap();
        let s = &ds.train[0];
        let bytes = encode_sample(s);
        let path = PathBuf::from(format!("{}.raqa", s.id()));
        assert_eq!(&decode_sample(&bytes, &path).unwrap(), s);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_sample(&bad, &path), Err(DataError::Format { .. })));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_sample(&v2, &path), Err(DataError::UnsupportedVersion { found: 2, .. })));
        assert!(matches!(decode_sample(&bytes[..bytes.len() - 3], &path), Err(DataError::Format { .. })));
    }

    #[test]
    fn noiseless_oracle_finds_every_interval() {
        let cfg = GeneratorConfig { eta_min: 0.0, eta_max: 0.0, ..small() };
        let ds = generate(&cfg).unwrap();
        let (sigs, _) = feature_basis(cfg.catalog_size, cfg.d_feat, cfg.seed);
        for s in ds.train.iter().chain(&ds.test) {
            for (p, &(a, b)) in oracle_peaks(s, &sigs).iter().zip(&s.intervals) {
                assert!(*p >= a as usize && *p <= b as usize);
            }
        }
    }

    #[test]
    fn config_rejections() {
        assert!(GeneratorConfig { k_max: 11, catalog_size: 12, ..small() }.validate().is_err());
        assert!(GeneratorConfig { k_max: 9, ..small() }.validate().is_err());
        assert!(GeneratorConfig { eta_min: -0.1, ..small() }.validate().is_err());
        assert!(GeneratorConfig::from_json(r#"{"n_train": 3, "bogus": 1}"#).is_err());
    }
}
