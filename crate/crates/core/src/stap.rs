//! Dual-branch spatial/temporal masks: a personal and a common generator each
//! map a trial to a spatial mask over channels and a temporal mask over
//! samples; the fused masks are convex combinations of the two branches.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Linear, ParamGroup, ParamStore, Session};
use crate::tensor::{sigmoid, Tape, Tensor, Var};

/// Added to the per-channel variance before the square root.
const STD_EPS: f64 = 1e-8;

pub const ALPHA_LOGIT: &str = "stap.fusion.alpha_logit";
pub const BETA_LOGIT: &str = "stap.fusion.beta_logit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Personal,
    Common,
}

impl Branch {
    pub fn group(self) -> ParamGroup {
        match self {
            Branch::Personal => ParamGroup::PersonalMask,
            Branch::Common => ParamGroup::CommonMask,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Branch::Personal => "stap.personal",
            Branch::Common => "stap.common",
        }
    }
}

/// Generator sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StapDims {
    pub channels: usize,
    pub samples: usize,
    pub spatial_hidden: usize,
    pub temporal_width: usize,
    pub temporal_kernel: usize,
}

impl From<&ModelConfig> for StapDims {
    fn from(m: &ModelConfig) -> Self {
        Self {
            channels: m.channels,
            samples: m.samples,
            spatial_hidden: m.spatial_hidden,
            temporal_width: m.temporal_width,
            temporal_kernel: m.temporal_kernel,
        }
    }
}

/// Layer handles of one branch generator.
#[derive(Clone, Debug)]
pub struct BranchLayers {
    pub branch: Branch,
    spatial_hidden: Linear,
    spatial_out: Linear,
    temporal_hidden: Conv1d,
    temporal_out: Conv1d,
}

impl BranchLayers {
    /// Registers the generator. Without an RNG every weight and bias is zero.
    pub fn register(store: &mut ParamStore, dims: &StapDims, branch: Branch, mut rng: Option<&mut ChaCha8Rng>) -> Self {
        let p = branch.prefix();
        let g = branch.group();
        let (c, h) = (dims.channels, dims.spatial_hidden);
        let (w, k) = (dims.temporal_width, dims.temporal_kernel);
        let pad = k / 2;
        let spatial_hidden = Linear::register(store, &format!("{p}.spatial.hidden"), 2 * c, h, g, false, rng.as_deref_mut());
        let spatial_out = Linear::register(store, &format!("{p}.spatial.out"), h, c, g, false, rng.as_deref_mut());
        let temporal_hidden =
            Conv1d::register(store, &format!("{p}.temporal.hidden"), 1, w, k, pad, g, false, rng.as_deref_mut());
        let temporal_out = Conv1d::register(store, &format!("{p}.temporal.out"), w, 1, k, pad, g, false, rng);
        Self {
            branch,
            spatial_hidden,
            spatial_out,
            temporal_hidden,
            temporal_out,
        }
    }

    /// Spatial mask `[N, C]` from per-channel summary features `[N, 2C]`.
    fn spatial(&self, s: &mut Session, features: Var) -> Result<Var> {
        let h = self.spatial_hidden.forward(s, features)?;
        let h = s.tape.relu(h);
        let logits = self.spatial_out.forward(s, h)?;
        Ok(s.tape.sigmoid(logits))
    }

    /// Temporal mask `[N, T]` from the channel-mean signal `[N, 1, T]`.
    fn temporal(&self, s: &mut Session, mean_signal: Var) -> Result<Var> {
        let n = s.tape.shape(mean_signal)[0];
        let t = s.tape.shape(mean_signal)[2];
        let h = self.temporal_hidden.forward(s, mean_signal)?;
        let h = s.tape.relu(h);
        let logits = self.temporal_out.forward(s, h)?;
        let logits = s.tape.reshape(logits, &[n, t])?;
        Ok(s.tape.sigmoid(logits))
    }
}

/// Both branch generators.
#[derive(Clone, Debug)]
pub struct StapLayers {
    pub dims: StapDims,
    pub personal: BranchLayers,
    pub common: BranchLayers,
}

impl StapLayers {
    pub fn register(store: &mut ParamStore, dims: StapDims, mut rng: Option<&mut ChaCha8Rng>) -> Self {
        let personal = BranchLayers::register(store, &dims, Branch::Personal, rng.as_deref_mut());
        let common = BranchLayers::register(store, &dims, Branch::Common, rng);
        store.insert(ALPHA_LOGIT, Tensor::zeros(&[1]), ParamGroup::Fusion, false);
        store.insert(BETA_LOGIT, Tensor::zeros(&[1]), ParamGroup::Fusion, false);
        Self { dims, personal, common }
    }
}

/// Where the fusion weights come from in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FusionSource {
    /// Sigmoid of the stored logits (trainable when the fusion group is).
    Learned,
    Fixed { alpha: f64, beta: f64 },
}

/// Tape variables for one batch of masks. Spatial masks are `[N, C]`,
/// temporal masks `[N, T]`, fusion weights `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskVars {
    pub m_s_p: Var,
    pub m_t_p: Var,
    pub m_s_c: Var,
    pub m_t_c: Var,
    pub m_s: Var,
    pub m_t: Var,
    pub alpha: Var,
    pub beta: Var,
}

fn check_input(tape: &Tape, x: Var, dims: &StapDims) -> Result<(usize, usize, usize)> {
    let s = tape.shape(x);
    if s.len() != 3 || s[1] != dims.channels || s[2] != dims.samples {
        return Err(Error::shape(
            "generate_masks",
            format!(
                "expected [batch, {}, {}], got {s:?}",
                dims.channels, dims.samples
            ),
        ));
    }
    Ok((s[0], s[1], s[2]))
}

/// `w·p + (1 − w)·c`, written literally so that `w ∈ {0, 1}` reproduces a
/// branch exactly.
fn convex(tape: &mut Tape, w: Var, p: Var, c: Var) -> Result<Var> {
    let neg = tape.scale(w, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let a = tape.mul(p, w)?;
    let b = tape.mul(c, one_minus)?;
    tape.add(a, b)
}

/// Branch and fused masks for a batch `x: [N, C, T]`.
pub fn mask_forward(s: &mut Session, layers: &StapLayers, x: Var, fusion: FusionSource) -> Result<MaskVars> {
    let (n, c, t) = check_input(&s.tape, x, &layers.dims)?;
    let mean = s.tape.mean_axis(x, 2)?;
    let mean3 = s.tape.reshape(mean, &[n, c, 1])?;
    let centred = s.tape.sub(x, mean3)?;
    let sq = s.tape.mul(centred, centred)?;
    let var = s.tape.mean_axis(sq, 2)?;
    let var = s.tape.add_scalar(var, STD_EPS);
    let std = s.tape.sqrt(var);
    let features = s.tape.concat(&[mean, std], 1)?;
    let chan_mean = s.tape.mean_axis(x, 1)?;
    let chan_mean = s.tape.reshape(chan_mean, &[n, 1, t])?;

    let m_s_p = layers.personal.spatial(s, features)?;
    let m_t_p = layers.personal.temporal(s, chan_mean)?;
    let m_s_c = layers.common.spatial(s, features)?;
    let m_t_c = layers.common.temporal(s, chan_mean)?;

    let (alpha, beta) = match fusion {
        FusionSource::Learned => {
            let a = s.param(ALPHA_LOGIT)?;
            let b = s.param(BETA_LOGIT)?;
            (s.tape.sigmoid(a), s.tape.sigmoid(b))
        }
        FusionSource::Fixed { alpha, beta } => {
            if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
                return Err(Error::contract(format!(
                    "fusion weights must lie in [0, 1], got alpha={alpha} beta={beta}"
                )));
            }
            (
                s.constant(Tensor::vector(vec![alpha])),
                s.constant(Tensor::vector(vec![beta])),
            )
        }
    };
    let m_s = convex(&mut s.tape, beta, m_s_p, m_s_c)?;
    let m_t = convex(&mut s.tape, alpha, m_t_p, m_t_c)?;
    Ok(MaskVars {
        m_s_p,
        m_t_p,
        m_s_c,
        m_t_c,
        m_s,
        m_t,
        alpha,
        beta,
    })
}

/// All-ones masks standing in for the generators when masking is disabled.
pub fn ones_masks(tape: &mut Tape, n: usize, c: usize, t: usize) -> MaskVars {
    let s = tape.constant(Tensor::ones(&[n, c]));
    let tm = tape.constant(Tensor::ones(&[n, t]));
    let one = tape.constant(Tensor::ones(&[1]));
    MaskVars {
        m_s_p: s,
        m_t_p: tm,
        m_s_c: s,
        m_t_c: tm,
        m_s: s,
        m_t: tm,
        alpha: one,
        beta: one,
    }
}

/// `x[n, c, t] · m_s[n, c] · m_t[n, t]`.
pub fn apply_masks_var(tape: &mut Tape, x: Var, m_s: Var, m_t: Var) -> Result<Var> {
    let (n, c, t) = match tape.shape(x) {
        &[n, c, t] => (n, c, t),
        s => return Err(Error::shape("apply_masks", format!("expected [batch, C, T], got {s:?}"))),
    };
    if tape.shape(m_s) != [n, c] || tape.shape(m_t) != [n, t] {
        return Err(Error::contract(format!(
            "mask lengths {:?}/{:?} do not match input {:?}",
            tape.shape(m_s),
            tape.shape(m_t),
            [n, c, t]
        )));
    }
    let ms = tape.reshape(m_s, &[n, c, 1])?;
    let mt = tape.reshape(m_t, &[n, 1, t])?;
    let y = tape.mul(x, ms)?;
    tape.mul(y, mt)
}

/// `[N, T] ⊗ [N, C] -> [N, C·T]`, entry `c·T + t` being `m_s[c]·m_t[t]`.
pub fn outer_flatten_var(tape: &mut Tape, m_t: Var, m_s: Var) -> Result<Var> {
    let (n, t) = match tape.shape(m_t) {
        &[n, t] => (n, t),
        s => return Err(Error::shape("outer_flatten", format!("temporal mask {s:?}"))),
    };
    let c = match tape.shape(m_s) {
        &[ns, c] if ns == n => c,
        s => return Err(Error::shape("outer_flatten", format!("spatial mask {s:?} for batch {n}"))),
    };
    let ms = tape.reshape(m_s, &[n, c, 1])?;
    let mt = tape.reshape(m_t, &[n, 1, t])?;
    let outer = tape.mul(ms, mt)?;
    tape.reshape(outer, &[n, c * t])
}

/// Fusion weights in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub learnable: bool,
}

impl FusionWeights {
    pub fn fixed(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            learnable: false,
        }
    }

    /// Reads the sigmoid of the stored logits.
    pub fn from_store(store: &ParamStore, learnable: bool) -> Result<Self> {
        Ok(Self {
            alpha: sigmoid(store.value(ALPHA_LOGIT)?.data()[0]),
            beta: sigmoid(store.value(BETA_LOGIT)?.data()[0]),
            learnable,
        })
    }
}

/// Masks of a single trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub m_s_p: Tensor,
    pub m_t_p: Tensor,
    pub m_s_c: Tensor,
    pub m_t_c: Tensor,
    pub m_s: Tensor,
    pub m_t: Tensor,
}

impl MaskSet {
    pub fn all(&self) -> [&Tensor; 6] {
        [&self.m_s_p, &self.m_t_p, &self.m_s_c, &self.m_t_c, &self.m_s, &self.m_t]
    }
}

/// Both branch generators with their own parameter store.
#[derive(Clone, Debug)]
pub struct MaskGeneratorParams {
    pub layers: StapLayers,
    pub store: ParamStore,
}

impl MaskGeneratorParams {
    pub fn zeros(dims: StapDims) -> Self {
        let mut store = ParamStore::new();
        let layers = StapLayers::register(&mut store, dims, None);
        Self { layers, store }
    }

    pub fn random(dims: StapDims, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let layers = StapLayers::register(&mut store, dims, Some(rng));
        Self { layers, store }
    }
}

fn batch_of_one(x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        &[c, t] => x.clone().reshape(&[1, c, t]),
        s => Err(Error::shape("trial", format!("expected [C, T], got {s:?}"))),
    }
}

/// Masks of one trial `x: [C, T]` under the given fusion weights.
pub fn generate_masks(x: &Tensor, params: &MaskGeneratorParams, w: &FusionWeights) -> Result<MaskSet> {
    if !x.is_finite() {
        return Err(Error::NonFinite("mask generator input".into()));
    }
    let xb = batch_of_one(x)?;
    let mut s = Session::eval(&params.store);
    let xv = s.constant(xb);
    let fusion = FusionSource::Fixed {
        alpha: w.alpha,
        beta: w.beta,
    };
    let m = mask_forward(&mut s, &params.layers, xv, fusion)?;
    Ok(mask_set_row(&s.tape, &m, 0))
}

/// Row `i` of a batch of masks.
pub fn mask_set_row(tape: &Tape, m: &MaskVars, i: usize) -> MaskSet {
    let row = |v: Var| Tensor::vector(tape.value(v).row(i).to_vec());
    MaskSet {
        m_s_p: row(m.m_s_p),
        m_t_p: row(m.m_t_p),
        m_s_c: row(m.m_s_c),
        m_t_c: row(m.m_t_c),
        m_s: row(m.m_s),
        m_t: row(m.m_t),
    }
}

/// `output[c][t] = x[c][t] · m_s[c] · m_t[t]` for a single trial.
pub fn apply_masks(x: &Tensor, masks: &MaskSet) -> Result<Tensor> {
    let xb = batch_of_one(x)?;
    let (c, t) = (x.shape()[0], x.shape()[1]);
    if masks.m_s.numel() != c || masks.m_t.numel() != t {
        return Err(Error::contract(format!(
            "mask lengths {}/{} do not match a {c}x{t} trial",
            masks.m_s.numel(),
            masks.m_t.numel()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(xb);
    let ms = tape.constant(masks.m_s.clone().reshape(&[1, c])?);
    let mt = tape.constant(masks.m_t.clone().reshape(&[1, t])?);
    let y = apply_masks_var(&mut tape, xv, ms, mt)?;
    tape.value(y).clone().reshape(&[c, t])
}

/// Flattened outer product of a temporal and a spatial mask, length `C·T`.
pub fn outer_flatten(m_t: &Tensor, m_s: &Tensor) -> Result<Tensor> {
    if m_t.ndim() != 1 || m_s.ndim() != 1 {
        return Err(Error::shape(
            "outer_flatten",
            format!("{:?} and {:?} must be vectors", m_t.shape(), m_s.shape()),
        ));
    }
    let (t, c) = (m_t.numel(), m_s.numel());
    let mut tape = Tape::new();
    let mt = tape.constant(m_t.clone().reshape(&[1, t])?);
    let ms = tape.constant(m_s.clone().reshape(&[1, c])?);
    let y = outer_flatten_var(&mut tape, mt, ms)?;
    tape.value(y).clone().reshape(&[c * t])
}
