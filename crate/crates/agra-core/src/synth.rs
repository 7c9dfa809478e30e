//! Seeded synthetic two-domain region-feature datasets with controllable
//! shift, plus the JSON-lines interchange format.
//!
//! Each sample carries six raw region vectors. Class structure is shared
//! across domains; the target domain applies a fixed affine map (rotation,
//! scaling, biases) to every class mean, so the shift is systematic while
//! the within-class noise stays identical. Target labels are stored as
//! evaluation-only and never enter a training path.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::digest::hex_digest;
use crate::error::{AgraError, Result};
use crate::graph::{Domain, REGION_COUNT};

pub const DATASET_SCHEMA: &str = "agra-dataset";
pub const DATASET_VERSION: u64 = 1;

/// Affine distortion applied to the target domain's class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    /// Rotation angle (radians) applied plane-wise over coordinate pairs.
    pub rotation_angle: f64,
    /// Norm of one bias vector shared by all regions.
    pub global_bias_norm: f64,
    /// Norm of an independent bias vector per region.
    pub region_bias_norms: Vec<f64>,
    /// Multiplicative factor applied after rotation.
    pub scale: f64,
}

impl ShiftConfig {
    pub fn none() -> Self {
        ShiftConfig {
            rotation_angle: 0.0,
            global_bias_norm: 0.0,
            region_bias_norms: vec![0.0; REGION_COUNT],
            scale: 1.0,
        }
    }
}

/// Full generator configuration; generation is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShiftConfig {
    pub classes: usize,
    pub raw_dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub class_mean_scale: f64,
    pub within_std: f64,
    pub shift: ShiftConfig,
    pub seed: u64,
}

impl SyntheticShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.raw_dim == 0 {
            return Err(AgraError::Argument("classes and raw_dim must be nonzero".into()));
        }
        if self.n_source < self.classes || self.n_target < self.classes {
            return Err(AgraError::Argument(
                "need at least one sample per class in each domain".into(),
            ));
        }
        if self.within_std <= 0.0 {
            return Err(AgraError::Argument("within_std must be positive".into()));
        }
        if self.shift.region_bias_norms.len() != REGION_COUNT {
            return Err(AgraError::Argument(format!(
                "region_bias_norms must have {REGION_COUNT} entries"
            )));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// One sample of the interchange format.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: Domain,
    /// Training label; present on every source sample, absent on target.
    pub label: Option<usize>,
    /// Evaluation-only label, never read by training code.
    pub eval_label: Option<usize>,
    /// Six raw region vectors in canonical order.
    pub regions: Vec<Array1<f64>>,
}

/// Dataset header carried in the first line of the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: String,
    pub version: u64,
    pub domain: Domain,
    pub raw_dim: usize,
    pub classes: usize,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

/// A labeled-source or unlabeled-target sample collection.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl DomainDataset {
    /// Enforce the dataset contract: region counts, dims, and the labeling
    /// rules (source fully labeled; target training labels absent).
    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.meta.n {
            return Err(AgraError::Argument(format!(
                "header says {} samples, found {}",
                self.meta.n,
                self.samples.len()
            )));
        }
        for sample in &self.samples {
            if sample.domain != self.meta.domain {
                return Err(AgraError::Argument(format!(
                    "sample {} has domain {:?}, dataset is {:?}",
                    sample.id, sample.domain, self.meta.domain
                )));
            }
            if sample.regions.len() != REGION_COUNT {
                return Err(AgraError::Argument(format!(
                    "sample {} has {} regions",
                    sample.id,
                    sample.regions.len()
                )));
            }
            if sample.regions.iter().any(|r| r.len() != self.meta.raw_dim) {
                return Err(AgraError::Argument(format!(
                    "sample {} has a region of the wrong dim",
                    sample.id
                )));
            }
            match self.meta.domain {
                Domain::Source => {
                    if sample.label.is_none() {
                        return Err(AgraError::Argument(format!(
                            "source sample {} is unlabeled",
                            sample.id
                        )));
                    }
                }
                Domain::Target => {
                    if sample.label.is_some() {
                        return Err(AgraError::Argument(format!(
                            "target sample {} carries a training label",
                            sample.id
                        )));
                    }
                }
            }
            for label in [sample.label, sample.eval_label].into_iter().flatten() {
                if label >= self.meta.classes {
                    return Err(AgraError::Argument(format!(
                        "sample {} label {label} out of range",
                        sample.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Plane-wise rotation over consecutive coordinate pairs; a trailing odd
/// coordinate is left unchanged.
fn rotate_pairs(v: &Array1<f64>, angle: f64) -> Array1<f64> {
    let (sin, cos) = angle.sin_cos();
    let mut out = v.clone();
    let mut i = 0;
    while i + 1 < v.len() {
        out[i] = cos * v[i] - sin * v[i + 1];
        out[i + 1] = sin * v[i] + cos * v[i + 1];
        i += 2;
    }
    out
}

struct ShiftMap {
    angle: f64,
    scale: f64,
    global_bias: Array1<f64>,
    region_biases: Vec<Array1<f64>>,
}

impl ShiftMap {
    fn build(config: &SyntheticShiftConfig, rng: &mut ChaCha8Rng) -> Self {
        let global_bias = random_unit(rng, config.raw_dim) * config.shift.global_bias_norm;
        let region_biases = config
            .shift
            .region_bias_norms
            .iter()
            .map(|&norm| random_unit(rng, config.raw_dim) * norm)
            .collect();
        ShiftMap {
            angle: config.shift.rotation_angle,
            scale: config.shift.scale,
            global_bias,
            region_biases,
        }
    }

    fn apply(&self, v: &Array1<f64>, region: usize) -> Array1<f64> {
        rotate_pairs(v, self.angle) * self.scale + &self.global_bias + &self.region_biases[region]
    }
}

fn draw_samples(
    means: &[Vec<Array1<f64>>],
    config: &SyntheticShiftConfig,
    domain: Domain,
    count: usize,
    id_offset: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Sample> {
    let classes = config.classes;
    (0..count)
        .map(|i| {
            let class = i % classes;
            let regions = (0..REGION_COUNT)
                .map(|k| {
                    let noise = Array1::from_shape_fn(config.raw_dim, |_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * config.within_std
                    });
                    &means[class][k] + &noise
                })
                .collect();
            let (label, eval_label) = match domain {
                Domain::Source => (Some(class), None),
                Domain::Target => (None, Some(class)),
            };
            Sample {
                id: format!("{}{:06}", domain.tag(), id_offset + i),
                domain,
                label,
                eval_label,
                regions,
            }
        })
        .collect()
}

fn class_means(config: &SyntheticShiftConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<Array1<f64>>> {
    (0..config.classes)
        .map(|_| {
            (0..REGION_COUNT)
                .map(|_| {
                    Array1::from_shape_fn(config.raw_dim, |_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * config.class_mean_scale
                    })
                })
                .collect()
        })
        .collect()
}

fn meta_for(config: &SyntheticShiftConfig, domain: Domain, n: usize) -> DatasetMeta {
    DatasetMeta {
        schema: DATASET_SCHEMA.to_string(),
        version: DATASET_VERSION,
        domain,
        raw_dim: config.raw_dim,
        classes: config.classes,
        n,
        seed: config.seed,
        config_hash: config.config_hash(),
    }
}

/// Generate the two domains plus optional held-out continuations drawn from
/// the exact same distributions (fresh noise, same class means and shift).
pub fn generate_with_holdout(
    config: &SyntheticShiftConfig,
    n_holdout_source: usize,
    n_holdout_target: usize,
) -> Result<(DomainDataset, DomainDataset, DomainDataset, DomainDataset)> {
    config.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let means_seed: u64 = master.random();
    let shift_seed: u64 = master.random();
    let source_seed: u64 = master.random();
    let target_seed: u64 = master.random();
    let holdout_source_seed: u64 = master.random();
    let holdout_target_seed: u64 = master.random();

    let source_means = class_means(config, &mut ChaCha8Rng::seed_from_u64(means_seed));
    let shift = ShiftMap::build(config, &mut ChaCha8Rng::seed_from_u64(shift_seed));
    let target_means: Vec<Vec<Array1<f64>>> = source_means
        .iter()
        .map(|per_region| {
            per_region
                .iter()
                .enumerate()
                .map(|(k, m)| shift.apply(m, k))
                .collect()
        })
        .collect();

    let source_samples = draw_samples(
        &source_means,
        config,
        Domain::Source,
        config.n_source,
        0,
        &mut ChaCha8Rng::seed_from_u64(source_seed),
    );
    let target_samples = draw_samples(
        &target_means,
        config,
        Domain::Target,
        config.n_target,
        0,
        &mut ChaCha8Rng::seed_from_u64(target_seed),
    );
    let holdout_source = draw_samples(
        &source_means,
        config,
        Domain::Source,
        n_holdout_source,
        config.n_source,
        &mut ChaCha8Rng::seed_from_u64(holdout_source_seed),
    );
    let holdout_target = draw_samples(
        &target_means,
        config,
        Domain::Target,
        n_holdout_target,
        config.n_target,
        &mut ChaCha8Rng::seed_from_u64(holdout_target_seed),
    );

    let wrap = |samples: Vec<Sample>, domain: Domain| {
        let n = samples.len();
        DomainDataset {
            meta: meta_for(config, domain, n),
            samples,
        }
    };
    Ok((
        wrap(source_samples, Domain::Source),
        wrap(target_samples, Domain::Target),
        wrap(holdout_source, Domain::Source),
        wrap(holdout_target, Domain::Target),
    ))
}

/// Generate the source and target datasets for a config.
pub fn generate(config: &SyntheticShiftConfig) -> Result<(DomainDataset, DomainDataset)> {
    let (source, target, _, _) = generate_with_holdout(config, 0, 0)?;
    Ok((source, target))
}

/// The frozen benchmark configuration used by the verification suite.
pub fn synth_v1_config() -> SyntheticShiftConfig {
    SyntheticShiftConfig {
        classes: 7,
        raw_dim: 32,
        n_source: 1400,
        n_target: 1400,
        class_mean_scale: 1.0,
        within_std: 1.25,
        shift: ShiftConfig {
            rotation_angle: 0.7,
            global_bias_norm: 1.2,
            region_bias_norms: vec![0.8; REGION_COUNT],
            scale: 1.3,
        },
        seed: 7,
    }
}

/// Named presets for the command line.
pub fn preset(name: &str) -> Result<SyntheticShiftConfig> {
    match name {
        "synth-v1" => Ok(synth_v1_config()),
        other => Err(AgraError::Config(format!("unknown preset `{other}`"))),
    }
}

/// The frozen benchmark datasets.
pub fn standard_benchmark() -> (DomainDataset, DomainDataset) {
    generate(&synth_v1_config()).expect("benchmark config is valid")
}

// ---------------------------------------------------------------------------
// JSON-lines serialization
// ---------------------------------------------------------------------------

fn sample_to_json(sample: &Sample) -> Value {
    json!({
        "id": sample.id,
        "domain": sample.domain.tag(),
        "label": sample.label,
        "eval_label": sample.eval_label,
        "regions": sample
            .regions
            .iter()
            .map(|r| r.iter().copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>(),
    })
}

/// Serialize a dataset to its JSONL encoding (header line, then one sample
/// per line). Floats round-trip exactly through the decimal encoding.
pub fn to_jsonl(dataset: &DomainDataset) -> Result<String> {
    dataset.validate()?;
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&dataset.meta).map_err(io_other)?);
    out.push('\n');
    for sample in &dataset.samples {
        out.push_str(&serde_json::to_string(&sample_to_json(sample)).map_err(io_other)?);
        out.push('\n');
    }
    Ok(out)
}

fn io_other(e: serde_json::Error) -> AgraError {
    AgraError::Io(std::io::Error::other(e))
}

pub fn save(dataset: &DomainDataset, path: &Path) -> Result<()> {
    let body = to_jsonl(dataset)?;
    let mut file = fs::File::create(path)?;
    file.write_all(body.as_bytes())?;
    Ok(())
}

const HEADER_KEYS: &[&str] = &[
    "schema", "version", "domain", "raw_dim", "classes", "n", "seed", "config_hash",
];
const SAMPLE_KEYS: &[&str] = &["id", "domain", "label", "eval_label", "regions"];

fn parse_err(line: usize, message: impl Into<String>) -> AgraError {
    AgraError::Parse { line, message: message.into() }
}

fn warn_unknown(obj: &serde_json::Map<String, Value>, known: &[&str], line: usize, warnings: &mut Vec<String>) {
    for key in obj.keys() {
        if !known.contains(&key.as_str()) {
            warnings.push(format!("line {line}: ignoring unknown field `{key}`"));
        }
    }
}

fn parse_sample(value: Value, line: usize, meta: &DatasetMeta, warnings: &mut Vec<String>) -> Result<Sample> {
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(line, "sample line is not a JSON object"))?;
    warn_unknown(obj, SAMPLE_KEYS, line, warnings);

    let id = obj
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(line, "missing string field `id`"))?
        .to_string();
    let domain = match obj.get("domain").and_then(Value::as_str) {
        Some("s") => Domain::Source,
        Some("t") => Domain::Target,
        _ => return Err(parse_err(line, "field `domain` must be \"s\" or \"t\"")),
    };
    let label_of = |key: &str| -> Result<Option<usize>> {
        match obj.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::Number(n)) => n
                .as_u64()
                .map(|v| Some(v as usize))
                .ok_or_else(|| parse_err(line, format!("field `{key}` must be a non-negative integer"))),
            Some(_) => Err(parse_err(line, format!("field `{key}` must be an integer or null"))),
        }
    };
    let label = label_of("label")?;
    let eval_label = label_of("eval_label")?;

    let regions_value = obj
        .get("regions")
        .and_then(Value::as_array)
        .ok_or_else(|| parse_err(line, "missing array field `regions`"))?;
    if regions_value.len() != REGION_COUNT {
        return Err(parse_err(
            line,
            format!("expected {REGION_COUNT} regions, found {}", regions_value.len()),
        ));
    }
    let mut regions = Vec::with_capacity(REGION_COUNT);
    for region in regions_value {
        let entries = region
            .as_array()
            .ok_or_else(|| parse_err(line, "region is not an array"))?;
        if entries.len() != meta.raw_dim {
            return Err(parse_err(
                line,
                format!("region has {} entries, expected {}", entries.len(), meta.raw_dim),
            ));
        }
        let mut vec = Array1::zeros(meta.raw_dim);
        for (j, entry) in entries.iter().enumerate() {
            vec[j] = entry
                .as_f64()
                .ok_or_else(|| parse_err(line, "region entry is not a number"))?;
        }
        regions.push(vec);
    }

    Ok(Sample { id, domain, label, eval_label, regions })
}

/// Load a dataset; returns the dataset and any forward-compatibility
/// warnings (unknown fields). Malformed input fails with the line number
/// and returns no partial data.
pub fn load(path: &Path) -> Result<(DomainDataset, Vec<String>)> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut warnings = Vec::new();
    let mut lines = reader.lines();

    let header_line = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected a header line"))??;
    let header_value: Value = serde_json::from_str(&header_line)
        .map_err(|e| parse_err(1, format!("invalid header JSON: {e}")))?;
    let header_obj = header_value
        .as_object()
        .ok_or_else(|| parse_err(1, "header is not a JSON object"))?;
    warn_unknown(header_obj, HEADER_KEYS, 1, &mut warnings);
    if header_obj.get("schema").and_then(Value::as_str) != Some(DATASET_SCHEMA) {
        return Err(AgraError::Version(format!(
            "unrecognized dataset schema, expected `{DATASET_SCHEMA}`"
        )));
    }
    let version = header_obj.get("version").and_then(Value::as_u64).unwrap_or(0);
    if version != DATASET_VERSION {
        return Err(AgraError::Version(format!(
            "dataset schema version {version} is not supported (expected {DATASET_VERSION})"
        )));
    }
    let meta: DatasetMeta = serde_json::from_value(Value::Object(
        header_obj
            .iter()
            .filter(|(k, _)| HEADER_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    ))
    .map_err(|e| parse_err(1, format!("invalid header: {e}")))?;

    let mut samples = Vec::with_capacity(meta.n);
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| parse_err(line_no, format!("invalid JSON: {e}")))?;
        samples.push(parse_sample(value, line_no, &meta, &mut warnings)?);
    }
    if samples.len() != meta.n {
        return Err(parse_err(
            samples.len() + 1,
            format!("file truncated: header says {} samples, found {}", meta.n, samples.len()),
        ));
    }

    let dataset = DomainDataset { meta, samples };
    dataset.validate()?;
    Ok((dataset, warnings))
}

// ---------------------------------------------------------------------------
// Packed form for training
// ---------------------------------------------------------------------------

/// Column-packed datasets: one matrix per region, one row per sample.
#[derive(Debug, Clone)]
pub struct PackedDomain {
    pub domain: Domain,
    pub ids: Vec<String>,
    pub regions: Vec<Array2<f64>>,
    /// Training labels (source only).
    pub labels: Option<Vec<usize>>,
    /// Evaluation-only labels.
    pub eval_labels: Option<Vec<usize>>,
}

impl PackedDomain {
    pub fn from_dataset(dataset: &DomainDataset) -> Result<Self> {
        dataset.validate()?;
        let n = dataset.len();
        let dim = dataset.meta.raw_dim;
        let mut regions: Vec<Array2<f64>> =
            (0..REGION_COUNT).map(|_| Array2::zeros((n, dim))).collect();
        for (i, sample) in dataset.samples.iter().enumerate() {
            for (k, region) in sample.regions.iter().enumerate() {
                regions[k].row_mut(i).assign(region);
            }
        }
        let labels = dataset
            .samples
            .iter()
            .map(|s| s.label)
            .collect::<Option<Vec<usize>>>();
        let eval_labels = dataset
            .samples
            .iter()
            .map(|s| s.eval_label)
            .collect::<Option<Vec<usize>>>();
        Ok(PackedDomain {
            domain: dataset.meta.domain,
            ids: dataset.samples.iter().map(|s| s.id.clone()).collect(),
            regions,
            labels,
            eval_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.regions[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Labels used for accuracy evaluation: training labels when present,
    /// otherwise the evaluation-only ones.
    pub fn labels_for_eval(&self) -> Option<&[usize]> {
        self.labels
            .as_deref()
            .or(self.eval_labels.as_deref())
    }

    /// Copy the rows at `indices` out of every region block.
    pub fn gather(&self, indices: &[usize]) -> Vec<Array2<f64>> {
        self.regions
            .iter()
            .map(|block| {
                let mut out = Array2::zeros((indices.len(), block.ncols()));
                for (row, &i) in indices.iter().enumerate() {
                    out.row_mut(row).assign(&block.row(i));
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> SyntheticShiftConfig {
        SyntheticShiftConfig {
            classes: 3,
            raw_dim: 6,
            n_source: 30,
            n_target: 33,
            class_mean_scale: 1.0,
            within_std: 0.3,
            shift: ShiftConfig {
                rotation_angle: 0.4,
                global_bias_norm: 0.8,
                region_bias_norms: vec![0.5; REGION_COUNT],
                scale: 1.1,
            },
            seed: 99,
        }
    }

    #[test]
    fn generation_is_deterministic_and_serializes_identically() {
        let config = tiny_config();
        let (s1, t1) = generate(&config).unwrap();
        let (s2, t2) = generate(&config).unwrap();
        assert_eq!(to_jsonl(&s1).unwrap(), to_jsonl(&s2).unwrap());
        assert_eq!(to_jsonl(&t1).unwrap(), to_jsonl(&t2).unwrap());
    }

    #[test]
    fn class_counts_match_config() {
        let config = tiny_config();
        let (source, target) = generate(&config).unwrap();
        assert_eq!(source.len(), 30);
        assert_eq!(target.len(), 33);
        let mut counts = vec![0usize; config.classes];
        for s in &source.samples {
            counts[s.label.unwrap()] += 1;
        }
        assert_eq!(counts, vec![10, 10, 10]);
        // Balance within one: 33 samples over 3 classes.
        let mut tcounts = vec![0usize; config.classes];
        for t in &target.samples {
            assert!(t.label.is_none());
            tcounts[t.eval_label.unwrap()] += 1;
        }
        assert!(tcounts.iter().all(|&c| c == 11));
    }

    #[test]
    fn zero_shift_keeps_class_means_close() {
        let mut config = tiny_config();
        config.shift = ShiftConfig::none();
        config.n_source = 300;
        config.n_target = 300;
        let (source, target) = generate(&config).unwrap();

        // Two-sample mean comparison per class and region.
        let n_per = 100.0f64;
        let bound = 3.0 * config.within_std / n_per.sqrt() + 3.0 * config.within_std / n_per.sqrt();
        for class in 0..config.classes {
            for k in 0..REGION_COUNT {
                let mean_of = |ds: &DomainDataset, use_eval: bool| {
                    let mut acc = Array1::<f64>::zeros(config.raw_dim);
                    let mut count = 0.0;
                    for s in &ds.samples {
                        let label = if use_eval { s.eval_label } else { s.label };
                        if label == Some(class) {
                            acc += &s.regions[k];
                            count += 1.0;
                        }
                    }
                    acc / count
                };
                let sm = mean_of(&source, false);
                let tm = mean_of(&target, true);
                let gap = (&sm - &tm).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(gap <= bound, "class {class} region {k} mean gap {gap} > {bound}");
            }
        }
    }

    #[test]
    fn holdout_continues_ids_and_matches_distribution() {
        let config = tiny_config();
        let (source, _, hold_s, hold_t) = generate_with_holdout(&config, 9, 6).unwrap();
        assert_eq!(hold_s.len(), 9);
        assert_eq!(hold_t.len(), 6);
        assert!(hold_s.samples[0].id.as_str() > source.samples.last().unwrap().id.as_str());
        hold_s.validate().unwrap();
        hold_t.validate().unwrap();
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let (source, target) = generate(&tiny_config()).unwrap();
        for ds in [&source, &target] {
            let path = dir.path().join(format!("{}.jsonl", ds.meta.domain.tag()));
            save(ds, &path).unwrap();
            let (loaded, warnings) = load(&path).unwrap();
            assert!(warnings.is_empty());
            assert_eq!(&loaded, ds);
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempdir().unwrap();
        let (source, _) = generate(&tiny_config()).unwrap();
        let path = dir.path().join("trunc.jsonl");
        let body = to_jsonl(&source).unwrap();
        let cut: String = body.lines().take(10).map(|l| format!("{l}\n")).collect();
        fs::write(&path, cut).unwrap();
        match load(&path).unwrap_err() {
            AgraError::Parse { line, .. } => assert_eq!(line, 10),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_fields_warn_but_load() {
        let dir = tempdir().unwrap();
        let mut config = tiny_config();
        config.n_source = 3;
        config.n_target = 3;
        let (source, _) = generate(&config).unwrap();
        let path = dir.path().join("extra.jsonl");
        let body = to_jsonl(&source).unwrap();
        let patched: String = body
            .lines()
            .map(|line| {
                let mut v: Value = serde_json::from_str(line).unwrap();
                v.as_object_mut()
                    .unwrap()
                    .insert("annotator".into(), json!("someone"));
                format!("{}\n", serde_json::to_string(&v).unwrap())
            })
            .collect();
        fs::write(&path, patched).unwrap();
        let (loaded, warnings) = load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(warnings.len(), 4); // header + 3 samples
        assert!(warnings[0].contains("annotator"));
    }

    #[test]
    fn version_mismatch_is_a_version_error() {
        let dir = tempdir().unwrap();
        let mut config = tiny_config();
        config.n_source = 3;
        config.n_target = 3;
        let (source, _) = generate(&config).unwrap();
        let path = dir.path().join("version.jsonl");
        let body = to_jsonl(&source).unwrap();
        let patched = body.replacen("\"version\":1", "\"version\":9", 1);
        fs::write(&path, patched).unwrap();
        assert!(matches!(load(&path).unwrap_err(), AgraError::Version(_)));
    }

    #[test]
    fn packed_domain_gathers_rows() {
        let (source, _) = generate(&tiny_config()).unwrap();
        let packed = PackedDomain::from_dataset(&source).unwrap();
        assert_eq!(packed.len(), source.len());
        let picked = packed.gather(&[4, 0, 7]);
        assert_eq!(picked[0].nrows(), 3);
        assert_eq!(picked[2].row(1).to_owned(), source.samples[0].regions[2]);
    }
}
