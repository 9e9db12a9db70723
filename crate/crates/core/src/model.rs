//! The full network: masks, temporal encoder, shared encoder, the task and
//! subject projection heads, and the two classifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{BatchNorm, Conv1d, Linear, Mode, ParamGroup, ParamStore, Session, Trainable};
use crate::stap::{self, FusionSource, FusionWeights, MaskSet, MaskVars, StapDims, StapLayers};
use crate::tensor::{Tensor, Var};

const ENCODER_FILTERS: [usize; 3] = [32, 64, 128];
const ENCODER_KERNEL: usize = 5;
const SHARED_HIDDEN: usize = 256;
const SHARED_OUT: usize = 128;
const CLASSIFIER_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Task,
    Subject,
}

/// Effective forward and loss wiring after ablation flags are resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct Wiring {
    pub use_stap: bool,
    pub fusion: FusionSource,
    pub weights: LossWeights,
    pub trainable: Trainable,
}

impl Wiring {
    /// Masks on, learned fusion, the given weights, every group trainable.
    pub fn full(weights: LossWeights) -> Self {
        Self {
            use_stap: true,
            fusion: FusionSource::Learned,
            weights,
            trainable: Trainable::all(),
        }
    }
}

#[derive(Clone, Debug)]
struct TemporalBlock {
    conv: Conv1d,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct HeadLayers {
    proj: Linear,
    bn: BatchNorm,
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Layers {
    stap: StapLayers,
    temporal: Vec<TemporalBlock>,
    shared_hidden: Linear,
    shared_out: Linear,
    task: HeadLayers,
    subject: HeadLayers,
}

impl Layers {
    fn register(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let stap = StapLayers::register(store, StapDims::from(cfg), Some(rng));
        let (eps, mom) = (cfg.bn_eps, cfg.bn_momentum);
        let mut c_in = cfg.channels;
        let mut temporal = Vec::with_capacity(3);
        for (i, &f) in ENCODER_FILTERS.iter().enumerate() {
            let g = ParamGroup::TemporalEncoder;
            let name = format!("encoder.temporal.{i}");
            let conv = Conv1d::register(
                store,
                &format!("{name}.conv"),
                c_in,
                f,
                ENCODER_KERNEL,
                ENCODER_KERNEL / 2,
                g,
                false,
                Some(rng),
            );
            let bn = BatchNorm::register(store, &format!("{name}.bn"), f, g, eps, mom);
            temporal.push(TemporalBlock { conv, bn });
            c_in = f;
        }
        let g = ParamGroup::SharedEncoder;
        let flat = ENCODER_FILTERS[2] * cfg.pooled_len;
        let shared_hidden = Linear::register(store, "encoder.shared.hidden", flat, SHARED_HIDDEN, g, false, Some(rng));
        let shared_out = Linear::register(store, "encoder.shared.out", SHARED_HIDDEN, SHARED_OUT, g, false, Some(rng));
        let mut head = |name: &str, proj_group, cls_group, classes| {
            let proj = Linear::register(store, &format!("{name}.proj"), SHARED_OUT, cfg.feature_dim, proj_group, false, Some(rng));
            let bn = BatchNorm::register(store, &format!("{name}.bn"), cfg.feature_dim, proj_group, eps, mom);
            let hidden = Linear::register(
                store,
                &format!("{name}.classifier.hidden"),
                cfg.feature_dim,
                CLASSIFIER_HIDDEN,
                cls_group,
                false,
                Some(rng),
            );
            // Zero logits at initialisation: every class starts equally likely.
            let out = Linear::register(store, &format!("{name}.classifier.out"), CLASSIFIER_HIDDEN, classes, cls_group, false, None);
            HeadLayers { proj, bn, hidden, out }
        };
        let task = head("head.task", ParamGroup::TaskHead, ParamGroup::TaskClassifier, cfg.classes);
        let subject = head("head.subject", ParamGroup::SubjectHead, ParamGroup::SubjectClassifier, cfg.subjects);
        Self {
            stap,
            temporal,
            shared_hidden,
            shared_out,
            task,
            subject,
        }
    }
}

/// Tape variables of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub masks: MaskVars,
    pub x_masked: Var,
    pub h_temp: Var,
    pub h_shared: Var,
    pub f_task: Var,
    pub f_subj: Option<Var>,
    pub task_probs: Var,
    pub subj_probs: Option<Var>,
}

/// Intermediate activations of a single trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentBundle {
    pub h_temp: Tensor,
    pub h_shared: Tensor,
    pub f_task: Tensor,
    pub f_subj: Tensor,
}

#[derive(Clone, Debug)]
pub struct Ptsm {
    pub config: ModelConfig,
    pub store: ParamStore,
    layers: Layers,
}

impl PartialEq for Ptsm {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

impl Ptsm {
    /// Fresh parameters drawn from a stream seeded by `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.samples < ENCODER_KERNEL {
            return Err(Error::contract(format!(
                "trials of {} samples are shorter than the encoder kernel {ENCODER_KERNEL}",
                config.samples
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = Layers::register(&mut store, config, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            layers,
        })
    }

    /// Rebuilds a model around an existing parameter store, checking that
    /// every expected tensor is present with the expected shape.
    pub fn from_store(config: &ModelConfig, store: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        for (name, p) in template.store.params() {
            match store.get(name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                Some(q) => {
                    return Err(Error::shape(
                        "load parameters",
                        format!("{name}: expected {:?}, found {:?}", p.value.shape(), q.value.shape()),
                    ))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        for (name, b) in template.store.buffers() {
            match store.buffer(name) {
                Ok(q) if q.shape() == b.shape() => {}
                Ok(q) => {
                    return Err(Error::shape(
                        "load buffers",
                        format!("{name}: expected {:?}, found {:?}", b.shape(), q.shape()),
                    ))
                }
                Err(_) => return Err(Error::Checkpoint(format!("missing buffer {name}"))),
            }
        }
        if store.params().count() != template.store.params().count() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self {
            config: config.clone(),
            store,
            layers: template.layers,
        })
    }

    pub fn stap_layers(&self) -> &StapLayers {
        &self.layers.stap
    }

    /// Current fusion weights as seen by a forward pass with this wiring.
    pub fn fusion_weights(&self, wiring: &Wiring) -> Result<FusionWeights> {
        match wiring.fusion {
            FusionSource::Learned => FusionWeights::from_store(&self.store, true),
            FusionSource::Fixed { alpha, beta } => Ok(FusionWeights::fixed(alpha, beta)),
        }
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        let (c, t) = (self.config.channels, self.config.samples);
        match x.shape() {
            &[_, xc, xt] if xc == c && xt == t => {}
            s => {
                return Err(Error::shape(
                    "model input",
                    format!("expected [batch, {c}, {t}], got {s:?}"),
                ))
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(())
    }

    /// `[N, C, T] -> [N, 128, T′]`.
    pub fn encode_temporal(&self, s: &mut Session, x: Var) -> Result<Var> {
        let t = s.tape.shape(x)[2];
        if t < ENCODER_KERNEL {
            return Err(Error::contract(format!(
                "temporal length {t} is shorter than the encoder kernel {ENCODER_KERNEL}"
            )));
        }
        let mut h = x;
        for block in &self.layers.temporal {
            h = block.conv.forward(s, h)?;
            h = block.bn.forward(s, h)?;
            h = s.tape.elu(h);
            h = s.dropout(h, self.config.dropout)?;
        }
        s.tape.adaptive_avg_pool1d(h, self.config.pooled_len)
    }

    /// `[N, 128, T′] -> [N, 128]`.
    pub fn encode_shared(&self, s: &mut Session, h_temp: Var) -> Result<Var> {
        let shape = s.tape.shape(h_temp).to_vec();
        let expected = [ENCODER_FILTERS[2], self.config.pooled_len];
        if shape.len() != 3 || shape[1..] != expected {
            return Err(Error::contract(format!(
                "shared encoder expects [batch, {}, {}], got {shape:?}",
                expected[0], expected[1]
            )));
        }
        let flat = s.tape.reshape(h_temp, &[shape[0], shape[1] * shape[2]])?;
        let h = self.layers.shared_hidden.forward(s, flat)?;
        let h = s.tape.elu(h);
        let h = s.dropout(h, self.config.dropout)?;
        let h = self.layers.shared_out.forward(s, h)?;
        Ok(s.tape.elu(h))
    }

    fn head(&self, head: Head) -> &HeadLayers {
        match head {
            Head::Task => &self.layers.task,
            Head::Subject => &self.layers.subject,
        }
    }

    /// `[N, 128] -> [N, d_f]` through one projection head.
    pub fn project(&self, s: &mut Session, h_shared: Var, head: Head) -> Result<Var> {
        let l = self.head(head);
        let f = l.proj.forward(s, h_shared)?;
        let f = l.bn.forward(s, f)?;
        Ok(s.tape.elu(f))
    }

    /// `[N, d_f] -> [N, K]` (or `[N, S]`) class probabilities.
    pub fn classify(&self, s: &mut Session, f: Var, head: Head) -> Result<Var> {
        let l = self.head(head);
        let h = l.hidden.forward(s, f)?;
        let h = s.tape.relu(h);
        let h = s.dropout(h, self.config.dropout)?;
        let logits = l.out.forward(s, h)?;
        s.tape.softmax(logits)
    }

    /// Full forward pass on a batch `[N, C, T]`. The subject branch is only
    /// evaluated when `with_subject` is set.
    pub fn forward(&self, s: &mut Session, x: &Tensor, wiring: &Wiring, with_subject: bool) -> Result<ForwardVars> {
        self.check_batch(x)?;
        let (n, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let xv = s.constant(x.clone());
        let (masks, x_masked) = if wiring.use_stap {
            let m = stap::mask_forward(s, &self.layers.stap, xv, wiring.fusion)?;
            let xm = stap::apply_masks_var(&mut s.tape, xv, m.m_s, m.m_t)?;
            (m, xm)
        } else {
            (stap::ones_masks(&mut s.tape, n, c, t), xv)
        };
        let h_temp = self.encode_temporal(s, x_masked)?;
        let h_shared = self.encode_shared(s, h_temp)?;
        let f_task = self.project(s, h_shared, Head::Task)?;
        let task_probs = self.classify(s, f_task, Head::Task)?;
        let (f_subj, subj_probs) = if with_subject {
            let f = self.project(s, h_shared, Head::Subject)?;
            let p = self.classify(s, f, Head::Subject)?;
            (Some(f), Some(p))
        } else {
            (None, None)
        };
        Ok(ForwardVars {
            masks,
            x_masked,
            h_temp,
            h_shared,
            f_task,
            f_subj,
            task_probs,
            subj_probs,
        })
    }

    /// Task-class probabilities `[N, K]` in evaluation mode.
    pub fn task_probabilities(&self, x: &Tensor, wiring: &Wiring) -> Result<Tensor> {
        let mut s = Session::eval(&self.store);
        let out = self.forward(&mut s, x, wiring, false)?;
        Ok(s.tape.value(out.task_probs).clone())
    }

    /// Predicted task labels for a batch `[N, C, T]`.
    pub fn predict(&self, x: &Tensor, wiring: &Wiring) -> Result<Vec<usize>> {
        let p = self.task_probabilities(x, wiring)?;
        let k = p.shape()[1];
        Ok(p.data().chunks(k).map(argmax).collect())
    }

    /// Evaluation-mode latents of a single trial `[C, T]`.
    pub fn latents(&self, x: &Tensor, wiring: &Wiring) -> Result<LatentBundle> {
        let xb = single(x)?;
        let mut s = Session::eval(&self.store);
        let out = self.forward(&mut s, &xb, wiring, true)?;
        let take = |v: Var| {
            let t = s.tape.value(v);
            let shape = t.shape()[1..].to_vec();
            t.clone().reshape(&shape)
        };
        Ok(LatentBundle {
            h_temp: take(out.h_temp)?,
            h_shared: take(out.h_shared)?,
            f_task: take(out.f_task)?,
            f_subj: take(out.f_subj.expect("subject branch requested"))?,
        })
    }

    /// Evaluation-mode masks of every trial in a batch `[N, C, T]`.
    pub fn masks(&self, x: &Tensor, wiring: &Wiring) -> Result<Vec<MaskSet>> {
        self.check_batch(x)?;
        let (n, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut s = Session::eval(&self.store);
        let xv = s.constant(x.clone());
        let m = if wiring.use_stap {
            stap::mask_forward(&mut s, &self.layers.stap, xv, wiring.fusion)?
        } else {
            stap::ones_masks(&mut s.tape, n, c, t)
        };
        Ok((0..n).map(|i| stap::mask_set_row(&s.tape, &m, i)).collect())
    }

    /// Evaluation-mode task and subject embeddings `[N, d_f]` of a batch.
    pub fn embeddings(&self, x: &Tensor, wiring: &Wiring) -> Result<(Tensor, Tensor)> {
        let mut s = Session::eval(&self.store);
        let out = self.forward(&mut s, x, wiring, true)?;
        let f_subj = out.f_subj.expect("subject branch requested");
        Ok((s.tape.value(out.f_task).clone(), s.tape.value(f_subj).clone()))
    }

    /// Runs a session in the given mode and returns the names of every
    /// parameter the task prediction path reads.
    pub fn prediction_access(&self, x: &Tensor, wiring: &Wiring) -> Result<Vec<String>> {
        let mut s = Session::new(&self.store, Mode::Eval, Trainable::nothing(), None);
        self.forward(&mut s, x, wiring, false)?;
        Ok(s.accessed().cloned().collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn single(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        &[c, t] => x.clone().reshape(&[1, c, t]),
        s => Err(Error::shape("trial", format!("expected [C, T], got {s:?}"))),
    }
}
