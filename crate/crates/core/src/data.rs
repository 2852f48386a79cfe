//! Synthetic two-domain benchmarks, the CSV dataset format and joint
//! source/target batch sampling.
//!
//! Dataset files are CSV with header `id,domain,label,method_id,f0,...`.
//! `domain` is `source` or `target`, `label` is `real`, `fake` or empty,
//! and `method_id` is empty for real samples. Target labels, when present,
//! are ground truth for evaluation and never reach adaptation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::model::fnv1a;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("source and target forgery methods overlap: {0:?}")]
    MethodsOverlap(Vec<String>),
    #[error("source domain must be smaller than target domain (n_source {n_source}, n_target {n_target})")]
    DomainSizes { n_source: usize, n_target: usize },
    #[error("invalid benchmark or batch setting: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("I/O on {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

/// Class label; the index order (real 0, fake 1) is the class index used
/// by the model head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub domain: Domain,
    pub label: Option<Label>,
    pub method_id: Option<String>,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub feature_dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub source_methods: BTreeSet<String>,
    pub target_methods: BTreeSet<String>,
    pub shift_vector: Vec<f64>,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Real samples: two Gaussian components centred at `±MIXTURE_OFFSET` on
/// axis 0.
const MIXTURE_OFFSET: f64 = 1.5;
/// Every forgery method adds this much along axis 1.
const ARTIFACT_SCALE: f64 = 1.5;

impl BenchmarkSpec {
    /// Default desk-scale benchmark: d = 8, 200 source and 1800 target
    /// samples, two forgery methods per domain.
    pub fn default_with_seed(seed: u64) -> Self {
        let d = 8;
        Self {
            feature_dim: d,
            n_source: 200,
            n_target: 1800,
            source_methods: ["deepfakes", "face2face"].map(String::from).into(),
            target_methods: ["faceswap", "neuraltextures"].map(String::from).into(),
            shift_vector: Self::default_shift(d),
            noise_scale: 0.4,
            seed,
        }
    }

    /// Shift that moves target samples against the shared forgery
    /// artifact (axis 1) and along the last axis.
    pub fn default_shift(d: usize) -> Vec<f64> {
        let mut s = vec![0.0; d];
        s[1] = -1.2;
        s[d - 1] = 3.0;
        s
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let shared: Vec<String> = self
            .source_methods
            .intersection(&self.target_methods)
            .cloned()
            .collect();
        if !shared.is_empty() {
            return Err(DataError::MethodsOverlap(shared));
        }
        if self.n_source >= self.n_target {
            return Err(DataError::DomainSizes {
                n_source: self.n_source,
                n_target: self.n_target,
            });
        }
        if self.feature_dim < 3 {
            return Err(DataError::Config(format!(
                "feature_dim must be at least 3, got {}",
                self.feature_dim
            )));
        }
        if self.shift_vector.len() != self.feature_dim {
            return Err(DataError::Config(format!(
                "shift_vector has {} entries for feature_dim {}",
                self.shift_vector.len(),
                self.feature_dim
            )));
        }
        if self.source_methods.is_empty() || self.target_methods.is_empty() {
            return Err(DataError::Config("each domain needs at least one forgery method".into()));
        }
        if self.n_source < 2 {
            return Err(DataError::Config("n_source must be at least 2".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) || !self.shift_vector.iter().all(|v| v.is_finite()) {
            return Err(DataError::Config("noise_scale and shift_vector must be finite, noise >= 0".into()));
        }
        Ok(())
    }

    /// `key = value` text used for the sidecar file next to generated data.
    pub fn to_text(&self) -> String {
        let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(",");
        let shift: Vec<String> = self.shift_vector.iter().map(|v| v.to_string()).collect();
        format!(
            "feature_dim = {}\nn_source = {}\nn_target = {}\nsource_methods = {}\ntarget_methods = {}\nshift_vector = {}\nnoise_scale = {}\nseed = {}\n",
            self.feature_dim,
            self.n_source,
            self.n_target,
            join(&self.source_methods),
            join(&self.target_methods),
            shift.join(","),
            self.noise_scale,
            self.seed
        )
    }
}

/// Per-method forgery map: rotate the real draw in the plane of axis 0 and
/// `axis`, then add the shared artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct ForgeryMap {
    pub axis: usize,
    pub angle: f64,
    pub offset: Vec<f64>,
}

impl ForgeryMap {
    pub fn for_method(method_id: &str, d: usize) -> Self {
        let h = fnv1a(method_id.as_bytes());
        let span = (d - 2) as u64;
        let axis = 2 + (h % span) as usize;
        let frac = ((h >> 20) % 1000) as f64 / 1000.0;
        let angle = std::f64::consts::PI * (0.09 + 0.12 * frac);
        let mut offset = vec![0.0; d];
        offset[1] = ARTIFACT_SCALE;
        Self { axis, angle, offset }
    }

    pub fn apply(&self, x: &mut [f64]) {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (a, b) = (x[0], x[self.axis]);
        x[0] = c * a - s * b;
        x[self.axis] = s * a + c * b;
        for (v, o) in x.iter_mut().zip(&self.offset) {
            *v += o;
        }
    }
}

/// Deterministic benchmark draw. Each domain is half real, half fake, with
/// fakes spread round-robin over that domain's methods.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Vec<SampleRecord>, DataError> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_source + spec.n_target);
    for (domain, n, methods, prefix) in [
        (Domain::Source, spec.n_source, &spec.source_methods, "s"),
        (Domain::Target, spec.n_target, &spec.target_methods, "t"),
    ] {
        let maps: Vec<(String, ForgeryMap)> = methods
            .iter()
            .map(|m| (m.clone(), ForgeryMap::for_method(m, d)))
            .collect();
        let n_real = n / 2;
        for k in 0..n {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mut x: Vec<f64> = (0..d)
                .map(|_| spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            x[0] += sign * MIXTURE_OFFSET;
            let (label, method_id) = if k < n_real {
                (Label::Real, None)
            } else {
                let (name, map) = &maps[(k - n_real) % maps.len()];
                map.apply(&mut x);
                (Label::Fake, Some(name.clone()))
            };
            if domain == Domain::Target {
                for (v, s) in x.iter_mut().zip(&spec.shift_vector) {
                    *v += s;
                }
            }
            out.push(SampleRecord {
                id: format!("{prefix}{k:05}"),
                domain,
                label: Some(label),
                method_id,
                features: x,
            });
        }
    }
    Ok(out)
}

/// Source/target split of one mixed batch of `total` samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub b_source: usize,
    pub b_target: usize,
    pub total: usize,
}

/// `b_source = clamp(round(total * n / (n + m)), 1, total - 1)`.
pub fn batch_split(n: usize, m: usize, total: usize) -> Result<BatchPlan, DataError> {
    if total < 2 {
        return Err(DataError::Config(format!("total batch must be at least 2, got {total}")));
    }
    if n == 0 || m == 0 {
        return Err(DataError::Config(format!("both domains need samples (n {n}, m {m})")));
    }
    let share = (total as f64 * n as f64 / (n + m) as f64).round() as usize;
    let b_source = share.clamp(1, total - 1);
    Ok(BatchPlan {
        b_source,
        b_target: total - b_source,
        total,
    })
}

/// Labeled source samples in matrix form.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Target samples as seen during adaptation: no labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    pub ids: Vec<String>,
    pub x: Tensor,
}

impl UnlabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn without_labels(&self) -> UnlabeledSet {
        UnlabeledSet {
            ids: self.ids.clone(),
            x: self.x.clone(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            x: self.x.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

/// A loaded or generated dataset, split by domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub source: LabeledSet,
    /// Target samples with their ground truth; only evaluation reads the
    /// labels, adaptation receives [`LabeledSet::without_labels`].
    pub target: LabeledSet,
}

impl Dataset {
    pub fn from_records(records: &[SampleRecord]) -> Result<Self, DataError> {
        let feature_dim = records
            .first()
            .map(|r| r.features.len())
            .ok_or_else(|| DataError::Config("dataset is empty".into()))?;
        let mut split = BTreeMap::new();
        for domain in [Domain::Source, Domain::Target] {
            let rows: Vec<&SampleRecord> = records.iter().filter(|r| r.domain == domain).collect();
            if rows.is_empty() {
                return Err(DataError::Config(format!("no {domain} samples")));
            }
            let mut labels = Vec::with_capacity(rows.len());
            for r in &rows {
                match r.label {
                    Some(l) => labels.push(l.index()),
                    None => {
                        return Err(DataError::Config(format!(
                            "{domain} sample `{}` has no label; source labels are required for training and target labels for evaluation",
                            r.id
                        )))
                    }
                }
            }
            let feats: Vec<&[f64]> = rows.iter().map(|r| r.features.as_slice()).collect();
            let x = Tensor::from_rows(&feats).map_err(|e| DataError::Config(e.to_string()))?;
            split.insert(
                domain,
                LabeledSet {
                    ids: rows.iter().map(|r| r.id.clone()).collect(),
                    x,
                    labels,
                },
            );
        }
        Ok(Self {
            feature_dim,
            source: split.remove(&Domain::Source).expect("inserted"),
            target: split.remove(&Domain::Target).expect("inserted"),
        })
    }

    pub fn domain(&self, domain: Domain) -> &LabeledSet {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    /// Keeps `round(fraction * m)` target samples chosen uniformly at
    /// random; the source is untouched.
    pub fn subsample_target<R: Rng + ?Sized>(&self, fraction: f64, rng: &mut R) -> Result<Self, DataError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(DataError::Config(format!("fraction {fraction} outside (0, 1]")));
        }
        let m = self.target.len();
        let keep = (fraction * m as f64).round() as usize;
        if keep < 2 {
            return Err(DataError::Config(format!(
                "fraction {fraction} leaves {keep} target samples; at least 2 are needed"
            )));
        }
        if keep == m {
            return Ok(self.clone());
        }
        let mut rows: Vec<usize> = (0..m).collect();
        rows.shuffle(rng);
        rows.truncate(keep);
        rows.sort_unstable();
        Ok(Self {
            feature_dim: self.feature_dim,
            source: self.source.clone(),
            target: self.target.subset(&rows),
        })
    }
}

/// Draws joint batches without replacement within an epoch.
///
/// Each epoch shuffles both domains; the epoch ends as soon as either
/// domain cannot fill its side of the next batch.
#[derive(Clone, Debug)]
pub struct JointSampler {
    plan: BatchPlan,
    source_order: Vec<usize>,
    target_order: Vec<usize>,
    cursor_source: usize,
    cursor_target: usize,
}

impl JointSampler {
    pub fn new(n_source: usize, n_target: usize, plan: BatchPlan) -> Result<Self, DataError> {
        if n_source < plan.b_source || n_target < plan.b_target {
            return Err(DataError::Config(format!(
                "batch plan ({}, {}) exceeds domain sizes ({n_source}, {n_target})",
                plan.b_source, plan.b_target
            )));
        }
        Ok(Self {
            plan,
            source_order: (0..n_source).collect(),
            target_order: (0..n_target).collect(),
            cursor_source: n_source,
            cursor_target: n_target,
        })
    }

    pub fn plan(&self) -> BatchPlan {
        self.plan
    }

    /// Reshuffles both domains and rewinds.
    pub fn start_epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.source_order.sort_unstable();
        self.target_order.sort_unstable();
        self.source_order.shuffle(rng);
        self.target_order.shuffle(rng);
        self.cursor_source = 0;
        self.cursor_target = 0;
    }

    /// Row indices of the next `(source, target)` batch, or `None` at the
    /// end of the epoch.
    pub fn next_batch(&mut self) -> Option<(Vec<usize>, Vec<usize>)> {
        let s_end = self.cursor_source + self.plan.b_source;
        let t_end = self.cursor_target + self.plan.b_target;
        if s_end > self.source_order.len() || t_end > self.target_order.len() {
            return None;
        }
        let s = self.source_order[self.cursor_source..s_end].to_vec();
        let t = self.target_order[self.cursor_target..t_end].to_vec();
        self.cursor_source = s_end;
        self.cursor_target = t_end;
        Some((s, t))
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.source_order.len() / self.plan.b_source).min(self.target_order.len() / self.plan.b_target)
    }
}

/// One joint batch: labeled source rows and label-free target rows.
#[derive(Clone, Debug, PartialEq)]
pub struct JointBatch {
    pub source_x: Tensor,
    pub source_labels: Vec<usize>,
    pub source_ids: Vec<String>,
    pub target_x: Tensor,
    pub target_ids: Vec<String>,
}

/// Next joint batch from `sampler`, or `None` when the epoch is exhausted.
pub fn sample_joint_batch(
    source: &LabeledSet,
    target: &UnlabeledSet,
    sampler: &mut JointSampler,
) -> Option<JointBatch> {
    let (s, t) = sampler.next_batch()?;
    Some(JointBatch {
        source_x: source.x.select_rows(&s),
        source_labels: s.iter().map(|&i| source.labels[i]).collect(),
        source_ids: s.iter().map(|&i| source.ids[i].clone()).collect(),
        target_x: target.x.select_rows(&t),
        target_ids: t.iter().map(|&i| target.ids[i].clone()).collect(),
    })
}

const HEADER_FIXED: [&str; 4] = ["id", "domain", "label", "method_id"];

fn io_err(path: &Path, e: impl fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Serializes records in the dataset CSV schema. Floats use the shortest
/// representation that round-trips exactly.
pub fn write_dataset_to<W: std::io::Write>(records: &[SampleRecord], w: W) -> Result<(), csv::Error> {
    let d = records.first().map_or(0, |r| r.features.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = HEADER_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|i| format!("f{i}")));
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.domain.to_string(),
            r.label.map(|l| l.as_str().to_string()).unwrap_or_default(),
            r.method_id.clone().unwrap_or_default(),
        ];
        row.extend(r.features.iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, records: &[SampleRecord]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_dataset_to(records, &mut buf).map_err(|e| io_err(path, e))?;
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Result of parsing a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub records: Vec<SampleRecord>,
    /// Non-fatal schema notes (e.g. target rows carrying labels).
    pub warnings: Vec<String>,
}

pub fn read_dataset_from<R: std::io::Read>(r: R) -> Result<LoadedDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = reader
        .headers()
        .map_err(|e| DataError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if header.len() < HEADER_FIXED.len() + 1
        || header.iter().take(4).ne(HEADER_FIXED.iter().copied())
        || header
            .iter()
            .skip(4)
            .enumerate()
            .any(|(i, h)| h != format!("f{i}"))
    {
        return Err(DataError::Parse {
            line: 1,
            msg: "header must be id,domain,label,method_id,f0,...,f{d-1}".into(),
        });
    }
    let d = header.len() - HEADER_FIXED.len();
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut labeled_target = 0usize;
    for (k, row) in reader.records().enumerate() {
        let line = k + 2;
        let parse = |msg: String| DataError::Parse { line, msg };
        let row = row.map_err(|e| parse(e.to_string()))?;
        if row.len() != header.len() {
            return Err(parse(format!(
                "expected {} features, found {}",
                d,
                row.len().saturating_sub(HEADER_FIXED.len())
            )));
        }
        let id = row[0].to_string();
        if id.is_empty() {
            return Err(parse("empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(DataError::DuplicateId { line, id });
        }
        let domain = match &row[1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(parse(format!("unknown domain `{other}`"))),
        };
        let label = match &row[2] {
            "" => None,
            "real" => Some(Label::Real),
            "fake" => Some(Label::Fake),
            other => return Err(parse(format!("unknown label `{other}`"))),
        };
        let method_id = (!row[3].is_empty()).then(|| row[3].to_string());
        match (label, &method_id) {
            (Some(Label::Real), Some(m)) => {
                return Err(parse(format!("real sample carries method `{m}`")))
            }
            (Some(Label::Fake), None) => return Err(parse("fake sample without method_id".into())),
            _ => {}
        }
        if domain == Domain::Source && label.is_none() {
            return Err(parse("source sample without label".into()));
        }
        if domain == Domain::Target && label.is_some() {
            labeled_target += 1;
        }
        let features = row
            .iter()
            .skip(HEADER_FIXED.len())
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| parse(format!("bad feature value `{v}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        records.push(SampleRecord {
            id,
            domain,
            label,
            method_id,
            features,
        });
    }
    let mut warnings = Vec::new();
    if labeled_target > 0 {
        warnings.push(format!(
            "{labeled_target} target rows carry labels; they are kept as evaluation ground truth only"
        ));
    }
    Ok(LoadedDataset { records, warnings })
}

pub fn load_dataset(path: &Path) -> Result<LoadedDataset, DataError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let loaded = read_dataset_from(std::io::BufReader::new(file))?;
    for w in &loaded.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(loaded)
}
