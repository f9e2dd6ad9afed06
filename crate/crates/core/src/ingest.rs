//! Dataset ingestion, run configuration and metrics output.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cluster::{Scenario, DEFAULT_TOTAL_WORK};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::policies::RebalanceConfig;
use crate::scalar::Real;
use crate::solvers::HyperParams;
use crate::trainer::{ConvergenceTarget, ExecutionMode, IterationRecord, TrainerConfig};

pub const COCOA_CHUNK_BYTES: usize = 1 << 20;
pub const SGD_CHUNK_BYTES: usize = 200 << 10;

/// Fixed CSV header of the metrics file.
pub const METRICS_HEADER: [&str; 7] = [
    "iteration",
    "epoch",
    "metric",
    "virtual_time",
    "worker_id",
    "runtime",
    "chunks",
];

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses one line of the sparse text format. `None` for blank lines.
fn parse_line<F: Real>(text: &str, id: u64, path: &Path, line: usize) -> Result<Option<Sample<F>>> {
    let text = text.split('#').next().unwrap_or("").trim();
    let mut tokens = text.split_whitespace();
    let Some(label_token) = tokens.next() else {
        return Ok(None);
    };
    let label: f64 = label_token
        .parse()
        .map_err(|_| parse_error(path, line, format!("bad label {label_token:?}")))?;
    let label = if label == 1.0 {
        F::one()
    } else if label == 0.0 || label == -1.0 {
        -F::one()
    } else {
        return Err(parse_error(
            path,
            line,
            format!("label {label_token:?} is not one of -1, 0, +1"),
        ));
    };
    let mut features = Vec::new();
    let mut last: Option<u32> = None;
    for token in tokens {
        let (idx, val) = token.split_once(':').ok_or_else(|| {
            parse_error(path, line, format!("expected index:value, got {token:?}"))
        })?;
        let idx: u32 = idx
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad index {idx:?}")))?;
        let val: f64 = val
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad value {val:?}")))?;
        if idx == 0 {
            return Err(parse_error(path, line, "indices are 1-based"));
        }
        if !val.is_finite() {
            return Err(parse_error(path, line, format!("non-finite value {val}")));
        }
        if last.is_some_and(|l| idx <= l) {
            return Err(parse_error(
                path,
                line,
                format!("index {idx} is not ascending"),
            ));
        }
        last = Some(idx);
        features.push((idx - 1, F::from_f64_lossy(val)));
    }
    Sample::new(id, features, label).map(Some)
}

pub fn read_sparse_dataset<F: Real>(reader: impl BufRead, path: &Path) -> Result<Dataset<F>> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if let Some(s) = parse_line(&line, samples.len() as u64, path, i + 1)? {
            samples.push(s);
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::infer_dim(samples)
}

/// Reads a file in the `label idx:val ...` sparse format (1-based indices).
pub fn parse_sparse_dataset<F: Real>(path: &Path) -> Result<Dataset<F>> {
    let file = File::open(path)?;
    read_sparse_dataset(BufReader::new(file), path)
}

/// Canonical form: `+1`/`-1` labels, 1-based indices, shortest round-trip
/// values.
pub fn write_sparse_dataset<F: Real>(samples: &[Sample<F>], mut out: impl Write) -> Result<()> {
    for s in samples {
        write!(out, "{}", if s.label > F::zero() { "+1" } else { "-1" })?;
        for &(i, v) in &s.features {
            write!(out, " {}:{}", i + 1, v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    #[serde(default = "one")]
    pub margin: f64,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn new(n: usize, d: usize) -> Self {
        SyntheticSpec {
            n,
            d,
            margin: 1.0,
            noise: 0.0,
            seed: 0,
        }
    }

    /// Parses `n=20000,d=50[,margin=1,noise=0,seed=0]`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::new(0, 0);
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {part:?}")))?;
            let bad = || Error::Config(format!("bad value for {k}: {v:?}"));
            match k.trim() {
                "n" => spec.n = v.parse().map_err(|_| bad())?,
                "d" => spec.d = v.parse().map_err(|_| bad())?,
                "margin" => spec.margin = v.parse().map_err(|_| bad())?,
                "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                other => return Err(Error::Config(format!("unknown synthetic key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config("synthetic n and d must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("synthetic margin must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config("synthetic noise must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Two blobs on either side of a seeded random hyperplane through the origin.
///
/// Along the unit direction `u` each sample sits at `y * (margin + |t|)` with
/// `t ~ N(0, 1)`; orthogonal to `u` it gets `N(0, 1/d)` noise per
/// coordinate. Without label noise the classes are separated by a gap of
/// `2 * margin`. A `noise` fraction of labels is then flipped.
pub fn generate_synthetic<F: Real>(spec: &SyntheticSpec) -> Result<Dataset<F>> {
    spec.validate()?;
    let d = spec.d;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        u = vec![0.0; d];
        u[0] = 1.0;
    } else {
        u.iter_mut().for_each(|x| *x /= norm);
    }
    let scale = (1.0 / d as f64).sqrt();
    let mut samples = Vec::with_capacity(spec.n);
    for id in 0..spec.n {
        let y = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let t: f64 = rng.sample(StandardNormal);
        let mut z: Vec<f64> = (0..d)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let along = z.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        let offset = y * (spec.margin + t.abs());
        for (zi, ui) in z.iter_mut().zip(&u) {
            *zi += (offset - along) * ui;
        }
        let flipped = spec.noise > 0.0 && rng.random::<f64>() < spec.noise;
        let label = if flipped { -y } else { y };
        let features = z
            .into_iter()
            .enumerate()
            .filter(|&(_, v)| v != 0.0)
            .map(|(i, v)| (i as u32, F::from_f64_lossy(v)))
            .collect();
        samples.push(Sample::new(id as u64, features, F::from_f64_lossy(label))?);
    }
    Dataset::new(samples, d)
}

/// One CSV row: a (record, worker) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub epoch: f64,
    pub metric: f64,
    pub virtual_time: f64,
    pub worker_id: u32,
    pub runtime: f64,
    pub chunks: usize,
}

pub fn metric_rows(records: &[IterationRecord]) -> Vec<MetricRow> {
    records
        .iter()
        .flat_map(|r| {
            r.workers.iter().map(move |w| MetricRow {
                iteration: r.iteration,
                epoch: r.epoch_progress,
                metric: r.metric,
                virtual_time: r.virtual_time,
                worker_id: w.worker.0,
                runtime: w.runtime,
                chunks: w.chunks,
            })
        })
        .collect()
}

/// Path of the JSON sidecar next to a metrics CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar<C> {
    pub config: C,
    pub workers: Vec<u32>,
    pub iterations: usize,
}

/// Writes the metrics CSV and its JSON sidecar describing the run.
pub fn write_metrics<C: Serialize>(
    records: &[IterationRecord],
    path: &Path,
    config: &C,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for row in metric_rows(records) {
        w.serialize(row)?;
    }
    w.flush()?;

    let mut workers: Vec<u32> = records
        .iter()
        .flat_map(|r| r.workers.iter().map(|w| w.worker.0))
        .collect();
    workers.sort_unstable();
    workers.dedup();
    let sidecar = Sidecar {
        config,
        workers,
        iterations: records.len(),
    };
    let out = BufWriter::new(File::create(sidecar_path(path))?);
    serde_json::to_writer_pretty(out, &sidecar)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(Error::Config(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Cocoa,
    LocalSgd,
}

impl Algorithm {
    pub fn default_chunk_bytes(self) -> usize {
        match self {
            Algorithm::Cocoa => COCOA_CHUNK_BYTES,
            Algorithm::LocalSgd => SGD_CHUNK_BYTES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Static,
    ScaleIn,
    ScaleOut,
    #[serde(rename = "hetero-8x8")]
    Hetero8x8,
    #[serde(rename = "hetero-12x4")]
    Hetero12x4,
}

/// Seconds between scale events in the elastic presets.
pub const PRESET_EVENT_INTERVAL: f64 = 20.0;

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Static,
        Preset::ScaleIn,
        Preset::ScaleOut,
        Preset::Hetero8x8,
        Preset::Hetero12x4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Static => "static",
            Preset::ScaleIn => "scale-in",
            Preset::ScaleOut => "scale-out",
            Preset::Hetero8x8 => "hetero-8x8",
            Preset::Hetero12x4 => "hetero-12x4",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))
    }

    pub fn scenario(self) -> Scenario {
        let mut s = match self {
            Preset::Static => Scenario::homogeneous(16),
            Preset::ScaleIn => Scenario::scale_in(16, 2, 2, PRESET_EVENT_INTERVAL),
            Preset::ScaleOut => Scenario::scale_out(2, 16, 2, PRESET_EVENT_INTERVAL),
            Preset::Hetero8x8 => Scenario::two_speed(8, 8, 1.0 / 1.5),
            Preset::Hetero12x4 => Scenario::two_speed(12, 4, 1.2 / 2.6),
        };
        s.total_work = DEFAULT_TOTAL_WORK;
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSpec {
    Preset(Preset),
    Inline(Scenario),
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec::Preset(Preset::Static)
    }
}

impl ScenarioSpec {
    pub fn resolve(&self) -> Result<Scenario> {
        let s = match self {
            ScenarioSpec::Preset(p) => p.scenario(),
            ScenarioSpec::Inline(s) => s.clone(),
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset<f64>> {
        match self {
            DatasetSource::Path(p) => parse_sparse_dataset(p),
            DatasetSource::Synthetic(s) => generate_synthetic(s),
        }
    }
}

/// Trainer settings as they appear in a config file. Unset fields take the
/// algorithm's defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub mode: Option<ExecutionMode>,
    pub lambda: Option<f64>,
    pub sigma_prime: Option<f64>,
    pub batch_size: Option<usize>,
    pub local_steps: Option<usize>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub target: Option<ConvergenceTarget>,
    pub max_epochs: Option<f64>,
    pub seed: Option<u64>,
    pub rebalance: Option<bool>,
    pub history_window: Option<usize>,
    pub test_fraction: Option<f64>,
}

pub const DEFAULT_LAMBDA: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub dataset: DatasetSource,
    pub chunk_capacity_bytes: Option<usize>,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub scenario: ScenarioSpec,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.trainer_config()?;
        cfg.scenario.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn chunk_capacity(&self) -> usize {
        self.chunk_capacity_bytes
            .unwrap_or_else(|| self.algorithm.default_chunk_bytes())
    }

    /// Fully resolved trainer settings.
    pub fn trainer_config(&self) -> Result<TrainerConfig<f64>> {
        let t = &self.trainer;
        let mode = t.mode.unwrap_or(ExecutionMode::UniTasks);
        let mut cfg = match self.algorithm {
            Algorithm::Cocoa => {
                let mut c = TrainerConfig::cocoa(t.lambda.unwrap_or(DEFAULT_LAMBDA), mode);
                if let Some(s) = t.sigma_prime {
                    c.hp.sigma_prime = s;
                }
                c
            }
            Algorithm::LocalSgd => {
                let hp = HyperParams::local_sgd(
                    t.batch_size.unwrap_or(16),
                    t.local_steps.unwrap_or(1),
                    t.learning_rate.unwrap_or(0.1),
                    t.momentum.unwrap_or(0.9),
                );
                TrainerConfig::local_sgd(hp, mode)
            }
        };
        if let Some(target) = t.target {
            cfg.convergence = target;
        }
        if let Some(e) = t.max_epochs {
            cfg.max_epochs = e;
        }
        if let Some(s) = t.seed {
            cfg.seed = s;
        }
        if let Some(f) = t.test_fraction {
            cfg.test_fraction = f;
        }
        if t.rebalance.unwrap_or(false) {
            let mut r = RebalanceConfig::default();
            if let Some(w) = t.history_window {
                r.window = w;
            }
            cfg.rebalance = Some(r);
        }
        cfg.chunk_capacity = self.chunk_capacity();
        cfg.validate()?;
        Ok(cfg)
    }
}
