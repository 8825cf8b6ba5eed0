//! Embedding records, file ingestion, patient-disjoint folds and the
//! synthetic dataset generator.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Task, INPUT_DIM};
use crate::seed::{self, stream};
use crate::tensor::Matrix;

/// Per-task label columns for a batch, indexed by [`Task::index`].
pub type BatchLabels = [Vec<usize>; Task::COUNT];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    A,
    B,
    C,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::A => "A",
            Site::B => "B",
            Site::C => "C",
            Site::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Site::A),
            "B" => Ok(Site::B),
            "C" => Ok(Site::C),
            "synthetic" => Ok(Site::Synthetic),
            other => Err(Error::data(format!("unknown site '{other}'"))),
        }
    }
}

/// One embedded patch with its five grades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub sample_id: String,
    pub patient_id: String,
    pub site: Site,
    pub labels: [usize; Task::COUNT],
    pub embedding: Vec<f64>,
}

impl FeatureRecord {
    pub fn label(&self, task: Task) -> usize {
        self.labels[task.index()]
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding.len() != INPUT_DIM {
            return Err(Error::data(format!(
                "sample {}: embedding has {} values, expected {INPUT_DIM}",
                self.sample_id,
                self.embedding.len()
            )));
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("sample {}: non-finite embedding", self.sample_id)));
        }
        for task in Task::ALL {
            let l = self.label(task);
            if l >= task.class_count() {
                return Err(Error::data(format!(
                    "sample {}: {task} label {l} outside 0..{}",
                    self.sample_id,
                    task.class_count() - 1
                )));
            }
        }
        Ok(())
    }
}

/// One-hot rows for a label column, `n x k_t`.
pub fn one_hot(task: Task, labels: &[usize]) -> Result<Matrix> {
    let k = task.class_count();
    let mut m = Matrix::zeros(labels.len(), k);
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::data(format!("{task} label {l} outside 0..{}", k - 1)));
        }
        m.set(r, l, 1.0);
    }
    Ok(m)
}

/// Embedding matrix and label columns for a set of records.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub x: Matrix,
    pub labels: BatchLabels,
}

impl TaskData {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a FeatureRecord>) -> Self {
        let mut data = Vec::new();
        let mut labels: BatchLabels = Default::default();
        let mut rows = 0;
        let mut cols = INPUT_DIM;
        for r in records {
            cols = r.embedding.len();
            data.extend_from_slice(&r.embedding);
            for t in Task::ALL {
                labels[t.index()].push(r.label(t));
            }
            rows += 1;
        }
        let x = Matrix::from_vec(rows, if rows == 0 { INPUT_DIM } else { cols }, data)
            .expect("records hold finite embeddings of equal width");
        Self { x, labels }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            labels: std::array::from_fn(|t| indices.iter().map(|&i| self.labels[t][i]).collect()),
        }
    }
}

pub fn csv_header() -> Vec<String> {
    let mut header: Vec<String> = ["sample_id", "patient_id", "site"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(Task::ALL.iter().map(|t| format!("l_{}", t.key())));
    header.extend((0..INPUT_DIM).map(|i| format!("e{i}")));
    header
}

/// Reads a `.csv` file, or a `.jsonl` file with one record per line.
/// Duplicate sample ids and out-of-range labels are rejected.
pub fn load_dataset(path: &Path) -> Result<Vec<FeatureRecord>> {
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let records = if jsonl { load_jsonl(path)? } else { load_csv(path)? };
    if records.is_empty() {
        warn!("{}: dataset is empty", path.display());
    }
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.sample_id.as_str()) {
            return Err(Error::data(format!("duplicate sample_id '{}'", r.sample_id)));
        }
    }
    Ok(records)
}

fn load_csv(path: &Path) -> Result<Vec<FeatureRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let expected = csv_header();
    let mut records = Vec::new();
    let mut rows = reader.records();
    match rows.next() {
        None => return Ok(records),
        Some(header) => {
            let header = header.map_err(|e| parse_err(1, e.to_string()))?;
            if header.iter().ne(expected.iter().map(String::as_str)) {
                return Err(parse_err(1, "unexpected header".into()));
            }
        }
    }
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != expected.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", expected.len(), row.len()),
            ));
        }
        let site = row[2].parse::<Site>().map_err(|e| parse_err(line, e.to_string()))?;
        let mut labels = [0usize; Task::COUNT];
        for (t, slot) in labels.iter_mut().enumerate() {
            *slot = row[3 + t]
                .parse()
                .map_err(|_| parse_err(line, format!("bad label '{}'", &row[3 + t])))?;
        }
        let embedding = row
            .iter()
            .skip(3 + Task::COUNT)
            .map(|v| v.parse::<f64>().map_err(|_| parse_err(line, format!("bad value '{v}'"))))
            .collect::<Result<Vec<_>>>()?;
        let record = FeatureRecord {
            sample_id: row[0].to_string(),
            patient_id: row[1].to_string(),
            site,
            labels,
            embedding,
        };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

fn load_jsonl(path: &Path) -> Result<Vec<FeatureRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FeatureRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Writes records as CSV. Floats use the shortest representation that
/// parses back to the same bits.
pub fn save_csv(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    writer.write_record(csv_header()).map_err(to_err)?;
    for r in records {
        let mut row = vec![r.sample_id.clone(), r.patient_id.clone(), r.site.to_string()];
        row.extend(r.labels.iter().map(|l| l.to_string()));
        row.extend(r.embedding.iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(to_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn save_jsonl(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Saves by extension: `.jsonl` as JSON lines, anything else as CSV.
pub fn save_dataset(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    if path.extension().is_some_and(|e| e == "jsonl") {
        save_jsonl(path, records)
    } else {
        save_csv(path, records)
    }
}

/// Train/validation/test roles of the folds in one cross-validation round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldRoles {
    pub test: usize,
    pub val: usize,
    pub train: Vec<usize>,
}

/// Fold index of every sample; all samples of a patient share a fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    fold_count: usize,
    folds: Vec<usize>,
    by_sample: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_count(&self) -> usize {
        self.fold_count
    }

    /// Fold of each record, aligned with the input slice.
    pub fn folds(&self) -> &[usize] {
        &self.folds
    }

    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.by_sample.get(sample_id).copied()
    }

    /// Round `r` tests on fold `r`, validates on fold `r + 1` and trains on
    /// the rest.
    pub fn roles(&self, round: usize) -> FoldRoles {
        let k = self.fold_count;
        let test = round % k;
        let val = (round + 1) % k;
        FoldRoles {
            test,
            val,
            train: (0..k).filter(|&f| f != test && f != val).collect(),
        }
    }

    /// Record indices `(train, val, test)` for a round.
    pub fn split_indices(&self, round: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let roles = self.roles(round);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (i, &f) in self.folds.iter().enumerate() {
            if f == roles.test {
                test.push(i);
            } else if f == roles.val {
                val.push(i);
            } else {
                train.push(i);
            }
        }
        (train, val, test)
    }
}

/// Seeded patient-level k-fold split. Patients are shuffled, then each is
/// placed in the fold currently holding the fewest samples (lowest index
/// on ties).
pub fn split_patient_disjoint(records: &[FeatureRecord], fold_count: usize, seed: u64) -> Result<FoldAssignment> {
    if fold_count < 3 {
        return Err(Error::config(format!(
            "need at least 3 folds for train/validation/test roles, got {fold_count}"
        )));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *sizes.entry(r.patient_id.as_str()).or_default() += 1;
    }
    if sizes.len() < fold_count {
        return Err(Error::config(format!(
            "{} distinct patients cannot fill {fold_count} folds",
            sizes.len()
        )));
    }
    let mut patients: Vec<&str> = sizes.keys().copied().collect();
    patients.shuffle(&mut seed::rng(seed, &[stream::SPLIT]));

    let mut load = vec![0usize; fold_count];
    let mut fold_of_patient = BTreeMap::new();
    for p in patients {
        let target = (0..fold_count).min_by_key(|&f| (load[f], f)).unwrap();
        load[target] += sizes[p];
        fold_of_patient.insert(p, target);
    }
    let folds: Vec<usize> = records.iter().map(|r| fold_of_patient[r.patient_id.as_str()]).collect();
    let by_sample = records
        .iter()
        .zip(&folds)
        .map(|(r, &f)| (r.sample_id.clone(), f))
        .collect();
    Ok(FoldAssignment {
        fold_count,
        folds,
        by_sample,
    })
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    /// Samples per site A, B, C.
    pub site_mix: [usize; 3],
    /// 0 makes VS and AP independent, 1 makes them always equal.
    pub dependency_strength: f64,
    /// Expected distance between two class centers of one task, in units
    /// of the per-coordinate noise.
    pub class_separation: f64,
    pub seed: u64,
}

pub const DEFAULT_SITE_MIX: [usize; 3] = [333, 135, 18];
pub const DEFAULT_DEPENDENCY_STRENGTH: f64 = 0.78;
pub const DEFAULT_CLASS_SEPARATION: f64 = 3.0;

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_SITE_MIX.iter().sum(),
            site_mix: DEFAULT_SITE_MIX,
            dependency_strength: DEFAULT_DEPENDENCY_STRENGTH,
            class_separation: DEFAULT_CLASS_SEPARATION,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Default config resized to `n` samples, keeping the site proportions
    /// (largest remainder rounding).
    pub fn with_samples(n: usize) -> Self {
        let base: usize = DEFAULT_SITE_MIX.iter().sum();
        let exact: Vec<f64> = DEFAULT_SITE_MIX
            .iter()
            .map(|&c| c as f64 * n as f64 / base as f64)
            .collect();
        let mut mix = [exact[0] as usize, exact[1] as usize, exact[2] as usize];
        let mut remaining = n - mix.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a].fract(), exact[b].fract());
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if remaining == 0 {
                break;
            }
            mix[i] += 1;
            remaining -= 1;
        }
        Self {
            n_samples: n,
            site_mix: mix,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be positive"));
        }
        if self.site_mix.iter().sum::<usize>() != self.n_samples {
            return Err(Error::config(format!(
                "site counts {:?} do not sum to {}",
                self.site_mix, self.n_samples
            )));
        }
        if !(0.0..=1.0).contains(&self.dependency_strength) {
            return Err(Error::config("dependency_strength must lie in [0, 1]"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::config("class_separation must be positive"));
        }
        Ok(())
    }
}

const WHO4_PRIOR: [f64; 4] = [0.18, 0.17, 0.25, 0.40];
/// WHO5 grade implied by each WHO4 grade.
const WHO5_FROM_WHO4: [usize; 4] = [0, 0, 1, 2];
const WHO5_NOISE: f64 = 0.1;
const HS_PRIOR: [f64; 4] = [0.2, 0.3, 0.3, 0.2];
const HS_FOLLOWS_WHO4: f64 = 0.5;
const VS_PRIOR: [f64; 3] = [0.3, 0.3, 0.4];
const VS_FOLLOWS_WHO5: f64 = 0.4;
const AP_PRIOR: [f64; 3] = [0.3, 0.3, 0.4];
/// Zero-discrepancy rate between VS and AP the default strength targets:
/// 300 of 486 samples.
const TARGET_AGREEMENT: f64 = 300.0 / 486.0;
const EMBEDDING_NOISE: f64 = 1.0;
const SITE_SHIFT: f64 = 0.3;
const PATIENT_SHIFT: f64 = 0.3;
const MAX_CROPS_PER_PATIENT: usize = 6;

fn who5_marginal() -> [f64; 3] {
    let mut clean = [0.0; 3];
    for (g4, p) in WHO4_PRIOR.iter().enumerate() {
        clean[WHO5_FROM_WHO4[g4]] += p;
    }
    // noise moves a grade one step: ends go inward, the middle splits
    [
        clean[0] * (1.0 - WHO5_NOISE) + clean[1] * WHO5_NOISE / 2.0,
        clean[1] * (1.0 - WHO5_NOISE) + (clean[0] + clean[2]) * WHO5_NOISE,
        clean[2] * (1.0 - WHO5_NOISE) + clean[1] * WHO5_NOISE / 2.0,
    ]
}

fn vs_marginal() -> [f64; 3] {
    let w5 = who5_marginal();
    std::array::from_fn(|k| VS_FOLLOWS_WHO5 * w5[k] + (1.0 - VS_FOLLOWS_WHO5) * VS_PRIOR[k])
}

/// Probability that AP copies VS instead of being drawn independently.
///
/// `strength^gamma`, with `gamma` chosen so the default strength gives the
/// target zero-discrepancy rate; 0 and 1 map to independence and equality.
pub fn vs_ap_coupling(strength: f64) -> f64 {
    let chance: f64 = vs_marginal().iter().zip(AP_PRIOR).map(|(v, a)| v * a).sum();
    let needed = (TARGET_AGREEMENT - chance) / (1.0 - chance);
    let gamma = needed.ln() / DEFAULT_DEPENDENCY_STRENGTH.ln();
    strength.clamp(0.0, 1.0).powf(gamma)
}

/// Expected share of samples with `VS == AP` for a dependency strength.
pub fn expected_vs_ap_agreement(strength: f64) -> f64 {
    let chance: f64 = vs_marginal().iter().zip(AP_PRIOR).map(|(v, a)| v * a).sum();
    let c = vs_ap_coupling(strength);
    c + (1.0 - c) * chance
}

fn draw(rng: &mut seed::Rng, weights: &[f64]) -> usize {
    WeightedIndex::new(weights).expect("valid prior").sample(rng)
}

fn draw_labels(rng: &mut seed::Rng, coupling: f64) -> [usize; Task::COUNT] {
    let who4 = draw(rng, &WHO4_PRIOR);
    let mut who5 = WHO5_FROM_WHO4[who4];
    if rng.random_bool(WHO5_NOISE) {
        who5 = match who5 {
            0 => 1,
            2 => 1,
            _ => {
                if rng.random_bool(0.5) {
                    0
                } else {
                    2
                }
            }
        };
    }
    let hs = if rng.random_bool(HS_FOLLOWS_WHO4) {
        who4
    } else {
        draw(rng, &HS_PRIOR)
    };
    let vs = if rng.random_bool(VS_FOLLOWS_WHO5) {
        who5
    } else {
        draw(rng, &VS_PRIOR)
    };
    let ap = if rng.random_bool(coupling) {
        vs
    } else {
        draw(rng, &AP_PRIOR)
    };
    [who4, who5, hs, vs, ap]
}

fn gaussian_vector(rng: &mut seed::Rng, sd: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sd).expect("finite sd");
    (0..INPUT_DIM).map(|_| normal.sample(rng)).collect()
}

/// Generates records with correlated labels and class-clustered
/// embeddings.
///
/// Each embedding is the sum of one center per task (chosen by that task's
/// label), a site offset, a patient offset and isotropic noise. Centers
/// are drawn so two centers of the same task are `class_separation` apart
/// on average.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<FeatureRecord>> {
    config.validate()?;
    let mut center_rng = seed::rng(config.seed, &[stream::SYNTH, 0]);
    let center_sd = config.class_separation / (2.0 * INPUT_DIM as f64).sqrt();
    let centers: Vec<Vec<Vec<f64>>> = Task::ALL
        .iter()
        .map(|t| {
            (0..t.class_count())
                .map(|_| gaussian_vector(&mut center_rng, center_sd))
                .collect()
        })
        .collect();
    let site_offsets: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vector(&mut center_rng, SITE_SHIFT)).collect();

    let mut rng = seed::rng(config.seed, &[stream::SYNTH, 1]);
    let coupling = vs_ap_coupling(config.dependency_strength);
    let noise = Normal::new(0.0, EMBEDDING_NOISE).expect("finite sd");
    let mut records = Vec::with_capacity(config.n_samples);
    for (site_idx, (&count, site)) in config.site_mix.iter().zip([Site::A, Site::B, Site::C]).enumerate() {
        let mut remaining = count;
        let mut patient = 0;
        while remaining > 0 {
            let crops = rng.random_range(1..=MAX_CROPS_PER_PATIENT).min(remaining);
            let patient_id = format!("{site}-P{patient:03}");
            let patient_offset = gaussian_vector(&mut rng, PATIENT_SHIFT);
            for _ in 0..crops {
                let labels = draw_labels(&mut rng, coupling);
                let mut embedding: Vec<f64> = site_offsets[site_idx]
                    .iter()
                    .zip(&patient_offset)
                    .map(|(s, p)| s + p + noise.sample(&mut rng))
                    .collect();
                for t in Task::ALL {
                    let c = &centers[t.index()][labels[t.index()]];
                    embedding.iter_mut().zip(c).for_each(|(e, v)| *e += v);
                }
                records.push(FeatureRecord {
                    sample_id: format!("s{:05}", records.len()),
                    patient_id: patient_id.clone(),
                    site,
                    labels,
                    embedding,
                });
            }
            remaining -= crops;
            patient += 1;
        }
    }
    Ok(records)
}

/// Label statistics printed after generation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSummary {
    pub n: usize,
    pub patients: usize,
    pub sites: BTreeMap<Site, usize>,
    pub marginals: [Vec<usize>; Task::COUNT],
    /// Samples whose VS and AP grades are equal.
    pub vs_ap_zero_discrepancy: usize,
}

impl LabelSummary {
    pub fn of(records: &[FeatureRecord]) -> Self {
        let mut marginals: [Vec<usize>; Task::COUNT] = std::array::from_fn(|t| vec![0; Task::ALL[t].class_count()]);
        let mut sites = BTreeMap::new();
        for r in records {
            for t in Task::ALL {
                marginals[t.index()][r.label(t)] += 1;
            }
            *sites.entry(r.site).or_default() += 1;
        }
        Self {
            n: records.len(),
            patients: records.iter().map(|r| &r.patient_id).collect::<BTreeSet<_>>().len(),
            sites,
            marginals,
            vs_ap_zero_discrepancy: records.iter().filter(|r| r.label(Task::Vs) == r.label(Task::Ap)).count(),
        }
    }
}

impl fmt::Display for LabelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples: {}  patients: {}", self.n, self.patients)?;
        let sites: Vec<String> = self.sites.iter().map(|(s, c)| format!("{s}={c}")).collect();
        writeln!(f, "sites: {}", sites.join(" "))?;
        for t in Task::ALL {
            writeln!(f, "{:<5} {:?}", t.name(), self.marginals[t.index()])?;
        }
        write!(
            f,
            "VS/AP zero discrepancy: {} of {}",
            self.vs_ap_zero_discrepancy, self.n
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, patient: &str, labels: [usize; 5]) -> FeatureRecord {
        FeatureRecord {
            sample_id: id.into(),
            patient_id: patient.into(),
            site: Site::Synthetic,
            labels,
            embedding: (0..INPUT_DIM).map(|i| i as f64 * 0.5 - 3.25).collect(),
        }
    }

    #[test]
    fn one_hot_rows() {
        let m = one_hot(Task::Vs, &[2, 0]).unwrap();
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(one_hot(Task::Vs, &[3]).is_err());
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_who4_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        save_csv(&path, &[record("a", "p", [4, 0, 0, 0, 0])]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        save_csv(&path, &[record("a", "p", [0; 5]), record("b", "p", [0; 5])]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[2].replacen(",0,", ",x,", 1);
        fs::write(&path, lines.join("\n")).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_sample_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.csv");
        save_csv(&path, &[record("a", "p", [0; 5]), record("a", "q", [0; 5])]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Data(_))));
    }

    #[test]
    fn header_is_exact() {
        let h = csv_header();
        assert_eq!(h.len(), 8 + INPUT_DIM);
        assert_eq!(
            h[..9].join(","),
            "sample_id,patient_id,site,l_who4,l_who5,l_hs,l_vs,l_ap,e0"
        );
        assert_eq!(h.last().unwrap(), "e767");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs = generate_synthetic(&SynthConfig::with_samples(12)).unwrap();
        save_dataset(&path, &recs).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), recs);
    }

    #[test]
    fn five_patients_five_folds() {
        let recs: Vec<_> = (0..5)
            .flat_map(|p| (0..p + 1).map(move |i| record(&format!("s{p}-{i}"), &format!("p{p}"), [0; 5])))
            .collect();
        let folds = split_patient_disjoint(&recs, 5, 1).unwrap();
        let mut per_fold: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); 5];
        for (r, &f) in recs.iter().zip(folds.folds()) {
            per_fold[f].insert(&r.patient_id);
        }
        assert!(per_fold.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn too_few_patients() {
        let recs = vec![record("a", "p1", [0; 5]), record("b", "p2", [0; 5])];
        assert!(matches!(split_patient_disjoint(&recs, 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn roles_cover_all_folds() {
        let recs = generate_synthetic(&SynthConfig::with_samples(60)).unwrap();
        let folds = split_patient_disjoint(&recs, 5, 3).unwrap();
        for round in 0..5 {
            let (train, val, test) = folds.split_indices(round);
            assert_eq!(train.len() + val.len() + test.len(), recs.len());
            assert!(!train.is_empty() && !val.is_empty() && !test.is_empty());
            assert_eq!(folds.roles(round).train.len(), 3);
        }
    }

    #[test]
    fn default_synthetic_shape() {
        let recs = generate_synthetic(&SynthConfig::default()).unwrap();
        assert_eq!(recs.len(), 486);
        let summary = LabelSummary::of(&recs);
        assert_eq!(summary.sites[&Site::A], 333);
        assert_eq!(summary.sites[&Site::B], 135);
        assert_eq!(summary.sites[&Site::C], 18);
        for m in &summary.marginals {
            assert!(m.iter().all(|&c| c > 0));
        }
        assert_eq!(summary.marginals[0].iter().enumerate().max_by_key(|(_, &c)| c).unwrap().0, 3);
    }

    #[test]
    fn coupling_limits() {
        assert_eq!(vs_ap_coupling(0.0), 0.0);
        assert_eq!(vs_ap_coupling(1.0), 1.0);
        let target = expected_vs_ap_agreement(DEFAULT_DEPENDENCY_STRENGTH);
        assert!((target * 486.0 - 300.0).abs() < 1e-9);
    }

    #[test]
    fn full_strength_means_equal_vs_ap() {
        let cfg = SynthConfig {
            dependency_strength: 1.0,
            ..SynthConfig::with_samples(300)
        };
        let recs = generate_synthetic(&cfg).unwrap();
        assert!(recs.iter().all(|r| r.label(Task::Vs) == r.label(Task::Ap)));
    }

    #[test]
    fn resizing_keeps_proportions() {
        let c = SynthConfig::with_samples(100);
        assert_eq!(c.site_mix.iter().sum::<usize>(), 100);
        // 68.52, 27.78, 3.70: the two largest remainders round up
        assert_eq!(c.site_mix, [68, 28, 4]);
        assert_eq!(SynthConfig::with_samples(486).site_mix, DEFAULT_SITE_MIX);
        assert!(SynthConfig::with_samples(0).validate().is_err());
    }
}
