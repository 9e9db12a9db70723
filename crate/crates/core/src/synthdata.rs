//! Synthetic cross-subject trials built from an additive model
//! `x = task + subject + noise`, the EEGD container format, and
//! leave-subjects-out splitting.
//!
//! The task component is a class template over time with a channel loading
//! shared by all subjects. The subject component is a per-subject channel
//! signature times a per-subject drift waveform, scaled by a per-subject gain
//! and a per-trial amplitude. Drift waveforms are orthogonal to the span of
//! the task templates, so the two factors are structurally separated.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};
use crate::io;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EEGD";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 5 * 4;
const MIN_SEPARATION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EegTrial {
    /// `[C, T]` samples.
    pub x: Tensor,
    /// Task label in `0..K`.
    pub y: usize,
    /// Subject id in `0..S`.
    pub s: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub subjects: usize,
    pub trials_per_cell: usize,
    pub noise_std: f64,
    /// Scale of the task component (templates and loading are unit norm).
    pub task_gain: f64,
    /// Mean scale of the subject component.
    pub subject_gain: f64,
    /// Per-subject gains are drawn from `subject_gain · U(1 − spread, 1 + spread)`.
    pub gain_spread: f64,
    /// Per-trial subject amplitudes are drawn from `U(1 − jitter, 1 + jitter)`.
    pub amplitude_jitter: f64,
    /// Moving-average width used to band-limit templates and drifts.
    pub smoothing: usize,
    /// Z-score every channel over the whole generated set.
    pub normalize: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            channels: 8,
            samples: 128,
            classes: 2,
            subjects: 6,
            trials_per_cell: 40,
            noise_std: 0.5,
            task_gain: 1.0,
            subject_gain: 12.0,
            gain_spread: 0.5,
            amplitude_jitter: 0.5,
            smoothing: 5,
            normalize: true,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.samples == 0 || self.subjects == 0 || self.trials_per_cell == 0 {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.smoothing == 0 || self.smoothing > self.samples {
            return Err(Error::Config(format!(
                "smoothing width {} must lie in 1..={}",
                self.smoothing, self.samples
            )));
        }
        if self.classes >= self.samples {
            return Err(Error::Config("need more samples than classes to orthogonalise drifts".into()));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("task_gain", self.task_gain),
            ("subject_gain", self.subject_gain),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.gain_spread) || !(0.0..=1.0).contains(&self.amplitude_jitter) {
            return Err(Error::Config("gain_spread and amplitude_jitter must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// The exact components planted by the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planted {
    /// `K` unit-norm, zero-mean waveforms of length `T`.
    pub templates: Vec<Vec<f64>>,
    /// Unit-norm channel loading of the task component.
    pub loading: Vec<f64>,
    /// `S` unit-norm channel signatures.
    pub signatures: Vec<Vec<f64>>,
    /// `S` unit-norm drift waveforms, orthogonal to every template.
    pub drifts: Vec<Vec<f64>>,
    pub gains: Vec<f64>,
}

/// Per-channel affine normalisation applied after generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Shape and provenance of a dataset; written as the JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub subjects: usize,
    pub noise_model: String,
    pub generator: Option<SyntheticSpec>,
    pub normalization: Option<Normalization>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trials: Vec<EegTrial>,
    /// Present for freshly generated data; not persisted.
    pub planted: Option<Planted>,
}

impl Dataset {
    pub fn subjects_present(&self) -> BTreeSet<usize> {
        self.trials.iter().map(|t| t.s).collect()
    }
}

fn smooth(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    (0..x.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + width - half).min(x.len());
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn well_separated(set: &[Vec<f64>], candidate: &[f64]) -> bool {
    set.iter().all(|v| {
        let d: f64 = v.iter().zip(candidate).map(|(a, b)| (a - b).powi(2)).sum();
        d.sqrt() > MIN_SEPARATION
    })
}

fn smoothed_waveform(rng: &mut ChaCha8Rng, t: usize, width: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..t).map(|_| rng.sample(StandardNormal)).collect();
    let mut w = smooth(&raw, width);
    let mean = w.iter().sum::<f64>() / t as f64;
    w.iter_mut().for_each(|v| *v -= mean);
    w
}

/// Draws the planted components of a spec.
pub fn plant(spec: &SyntheticSpec) -> Result<Planted> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let (c, t) = (spec.channels, spec.samples);

    let mut templates: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while templates.len() < spec.classes {
        let mut w = smoothed_waveform(&mut rng, t, spec.smoothing);
        if normalize(&mut w) > 0.0 && well_separated(&templates, &w) {
            templates.push(w);
        }
    }
    // Orthonormal basis of the template span, for orthogonalising drifts.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for tpl in &templates {
        let mut v = tpl.clone();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if normalize(&mut v) > 1e-9 {
            basis.push(v);
        }
    }

    let loading = vec![1.0 / (c as f64).sqrt(); c];

    let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(spec.subjects);
    while signatures.len() < spec.subjects {
        let mut v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) > 0.0 && well_separated(&signatures, &v) {
            signatures.push(v);
        }
    }

    let mut drifts = Vec::with_capacity(spec.subjects);
    while drifts.len() < spec.subjects {
        let mut w = smoothed_waveform(&mut rng, t, spec.smoothing);
        for b in &basis {
            let p = dot(&w, b);
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if normalize(&mut w) > 1e-9 {
            drifts.push(w);
        }
    }

    let gains = (0..spec.subjects)
        .map(|_| spec.subject_gain * rng.random_range(1.0 - spec.gain_spread..=1.0 + spec.gain_spread))
        .collect();
    Ok(Planted {
        templates,
        loading,
        signatures,
        drifts,
        gains,
    })
}

/// Generates every (subject, task) cell in order, `trials_per_cell` each.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    let planted = plant(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let (c, t) = (spec.channels, spec.samples);
    let mut trials = Vec::with_capacity(spec.subjects * spec.classes * spec.trials_per_cell);
    for s in 0..spec.subjects {
        for y in 0..spec.classes {
            for _ in 0..spec.trials_per_cell {
                let amp = planted.gains[s]
                    * rng.random_range(1.0 - spec.amplitude_jitter..=1.0 + spec.amplitude_jitter);
                let tpl = &planted.templates[y];
                let sig = &planted.signatures[s];
                let drift = &planted.drifts[s];
                let data = (0..c * t)
                    .map(|i| {
                        let (ch, tt) = (i / t, i % t);
                        let noise: f64 = rng.sample(StandardNormal);
                        spec.task_gain * planted.loading[ch] * tpl[tt]
                            + amp * sig[ch] * drift[tt]
                            + spec.noise_std * noise
                    })
                    .collect();
                trials.push(EegTrial {
                    x: Tensor::new(&[c, t], data)?,
                    y,
                    s,
                });
            }
        }
    }
    let normalization = if spec.normalize {
        Some(zscore_channels(&mut trials)?)
    } else {
        None
    };
    Ok(Dataset {
        meta: DatasetMeta {
            channels: c,
            samples: t,
            classes: spec.classes,
            subjects: spec.subjects,
            noise_model: "gaussian_iid".into(),
            generator: Some(spec.clone()),
            normalization,
        },
        trials,
        planted: Some(planted),
    })
}

/// Z-scores every channel using the mean and population standard deviation
/// over all trials and samples. Constant channels are only centred.
pub fn zscore_channels(trials: &mut [EegTrial]) -> Result<Normalization> {
    let first = trials
        .first()
        .ok_or_else(|| Error::contract("cannot normalise an empty trial set"))?;
    let (c, t) = (first.x.shape()[0], first.x.shape()[1]);
    let count = (trials.len() * t) as f64;
    let mut mean = vec![0.0; c];
    for tr in trials.iter() {
        if tr.x.shape() != [c, t] {
            return Err(Error::shape("zscore_channels", format!("{:?} vs [{c}, {t}]", tr.x.shape())));
        }
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += tr.x.row(ch).iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for tr in trials.iter() {
        for (ch, v) in var.iter_mut().enumerate() {
            *v += tr.x.row(ch).iter().map(|x| (x - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / count).sqrt()).collect();
    for tr in trials.iter_mut() {
        for (i, x) in tr.x.data_mut().iter_mut().enumerate() {
            let ch = i / t;
            let scale = if std[ch] > 0.0 { std[ch] } else { 1.0 };
            *x = (*x - mean[ch]) / scale;
        }
    }
    Ok(Normalization { mean, std })
}

/// Disjoint subject lists for a leave-subjects-out protocol.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(*s) {
                return Err(Error::contract(format!("subject {s} appears in more than one split")));
            }
        }
        Ok(())
    }

    /// Test subjects as given, the next subject (cyclically) for validation,
    /// and everything else for training.
    pub fn rotate(subjects: usize, test: &[usize]) -> Result<Self> {
        if let Some(&bad) = test.iter().find(|&&s| s >= subjects) {
            return Err(Error::contract(format!("test subject {bad} out of range 0..{subjects}")));
        }
        let mut validation = Vec::new();
        if let Some(&last) = test.last() {
            let v = (1..subjects)
                .map(|k| (last + k) % subjects)
                .find(|s| !test.contains(s));
            validation.extend(v);
        }
        let train = (0..subjects)
            .filter(|s| !test.contains(s) && !validation.contains(s))
            .collect();
        let plan = Self {
            train,
            validation,
            test: test.to_vec(),
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Partitions trials by subject id into (train, validation, test).
pub fn split(trials: &[EegTrial], plan: &SplitPlan) -> Result<(Vec<EegTrial>, Vec<EegTrial>, Vec<EegTrial>)> {
    plan.validate()?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for tr in trials {
        if plan.train.contains(&tr.s) {
            train.push(tr.clone());
        } else if plan.validation.contains(&tr.s) {
            val.push(tr.clone());
        } else if plan.test.contains(&tr.s) {
            test.push(tr.clone());
        } else {
            return Err(Error::contract(format!("subject {} is not covered by the split plan", tr.s)));
        }
    }
    Ok((train, val, test))
}

/// Serialises trials in the EEGD container.
pub fn encode(meta: &DatasetMeta, trials: &[EegTrial]) -> Result<Vec<u8>> {
    let (c, t) = (meta.channels, meta.samples);
    let header = [c, t, trials.len(), meta.classes, meta.subjects];
    let mut buf = Vec::with_capacity(HEADER_LEN + trials.len() * (8 + c * t * 8) + 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    for v in header {
        let v = u32::try_from(v).map_err(|_| Error::contract(format!("header field {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (i, tr) in trials.iter().enumerate() {
        if tr.x.shape() != [c, t] {
            return Err(Error::shape("encode dataset", format!("trial {i} is {:?}, header says [{c}, {t}]", tr.x.shape())));
        }
        if tr.y >= meta.classes || tr.s >= meta.subjects {
            return Err(Error::contract(format!("trial {i} labels (y={}, s={}) out of range", tr.y, tr.s)));
        }
        buf.extend_from_slice(&(tr.y as u32).to_le_bytes());
        buf.extend_from_slice(&(tr.s as u32).to_le_bytes());
        for v in tr.x.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses an EEGD container. `meta` fields beyond the header are left at
/// their defaults.
pub fn decode(bytes: &[u8]) -> Result<(DatasetMeta, Vec<EegTrial>), DatasetError> {
    if bytes.len() < 4 {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN + 4,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic(magic));
    }
    if bytes.len() < 5 {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN + 4,
            found: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(DatasetError::UnsupportedVersion(bytes[4]));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN + 4,
            found: bytes.len(),
        });
    }
    let f: Vec<usize> = (0..5).map(|i| u32_at(bytes, 5 + 4 * i) as usize).collect();
    let (c, t, n, k, s) = (f[0], f[1], f[2], f[3], f[4]);
    if c == 0 || t == 0 || k == 0 || s == 0 {
        return Err(DatasetError::MalformedHeader(format!(
            "zero dimension in C={c} T={t} K={k} S={s}"
        )));
    }
    let expected = c
        .checked_mul(t)
        .and_then(|ct| ct.checked_mul(8))
        .and_then(|x| x.checked_add(8))
        .and_then(|rec| rec.checked_mul(n))
        .and_then(|body| body.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| DatasetError::MalformedHeader(format!("sizes overflow: C={c} T={t} N={n}")))?;
    if bytes.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DatasetError::TrailingBytes {
            extra: bytes.len() - expected,
        });
    }
    let stored = u32_at(bytes, expected - 4);
    let computed = crc32fast::hash(&bytes[..expected - 4]);
    if stored != computed {
        return Err(DatasetError::ChecksumMismatch { stored, computed });
    }
    let rec_len = 8 + c * t * 8;
    let mut trials = Vec::with_capacity(n);
    for i in 0..n {
        let at = HEADER_LEN + i * rec_len;
        let y = u32_at(bytes, at) as usize;
        let subj = u32_at(bytes, at + 4) as usize;
        if y >= k || subj >= s {
            return Err(DatasetError::MalformedRecord {
                index: i,
                detail: format!("labels y={y} s={subj} outside K={k} S={s}"),
            });
        }
        let data: Vec<f64> = bytes[at + 8..at + rec_len]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::MalformedRecord {
                index: i,
                detail: "non-finite sample".into(),
            });
        }
        let x = Tensor::new(&[c, t], data).map_err(|e| DatasetError::MalformedRecord {
            index: i,
            detail: e.to_string(),
        })?;
        trials.push(EegTrial { x, y, s: subj });
    }
    let meta = DatasetMeta {
        channels: c,
        samples: t,
        classes: k,
        subjects: s,
        noise_model: "unknown".into(),
        generator: None,
        normalization: None,
    };
    Ok((meta, trials))
}

/// Path of the JSON metadata sidecar next to a dataset file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the container and its JSON sidecar atomically.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(&dataset.meta, &dataset.trials)?;
    io::write_atomic(path, &bytes)?;
    let meta = serde_json::to_vec_pretty(&dataset.meta).expect("metadata serialises");
    io::write_atomic(&sidecar_path(path), &meta)
}

/// Reads a container; generation metadata comes from the sidecar when
/// present and must agree with the binary header.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = io::read(path)?;
    let (mut meta, trials) = decode(&bytes)?;
    let side = sidecar_path(path);
    if side.exists() {
        let text = io::read_to_string(&side)?;
        let full: DatasetMeta = serde_json::from_str(&text)
            .map_err(|e| DatasetError::MalformedHeader(format!("sidecar {}: {e}", side.display())))?;
        let dims = |m: &DatasetMeta| (m.channels, m.samples, m.classes, m.subjects);
        if dims(&full) != dims(&meta) {
            return Err(DatasetError::MalformedHeader(format!(
                "sidecar dimensions {:?} disagree with header {:?}",
                dims(&full),
                dims(&meta)
            ))
            .into());
        }
        meta = full;
    }
    Ok(Dataset {
        meta,
        trials,
        planted: None,
    })
}

/// CRC32 of the encoded container, used to identify a dataset in manifests.
pub fn checksum(meta: &DatasetMeta, trials: &[EegTrial]) -> Result<u32> {
    Ok(crc32fast::hash(&encode(meta, trials)?))
}

/// Stacks trials into a `[N, C, T]` batch with task and subject labels.
pub fn stack(trials: &[&EegTrial]) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let xs: Vec<&Tensor> = trials.iter().map(|t| &t.x).collect();
    let x = Tensor::stack(&xs)?;
    Ok((x, trials.iter().map(|t| t.y).collect(), trials.iter().map(|t| t.s).collect()))
}
