//! Context-conditioned multi-head Gaussian dynamics model.
//!
//! The model predicts the standardized state delta `s' - s` from the
//! standardized `(s, a)` pair and the concatenated context heads. Each output
//! head emits a mean and a clamped log-variance per state dimension.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ad::{checkpoint, Activation, Bound, Mlp, ParamStore, Tape, Tensor, Var};
use crate::envs::Transition;
use crate::error::{dim_err, Error, Result};
use crate::norm::Standardizer;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 2.0;
/// Transitions looked at when choosing a head.
pub const SELECT_WINDOW: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub context_width: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
}

impl PredictionConfig {
    /// Four hidden layers of 200 and three heads.
    pub fn new(state_dim: usize, action_dim: usize, context_width: usize) -> Self {
        Self { state_dim, action_dim, context_width, hidden: 200, layers: 4, heads: 3 }
    }

    pub fn input_width(&self) -> usize {
        self.state_dim + self.action_dim + self.context_width
    }

    fn meta(&self) -> Tensor {
        Tensor::row(
            [self.state_dim, self.action_dim, self.context_width, self.hidden, self.layers, self.heads]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
    }
}

/// One head's predictive distribution for a single transition.
///
/// `mean` is the raw state delta; `log_var` is the clamped log-variance in
/// standardized delta units, as emitted by the head.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPrediction {
    pub fn next_state(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.mean).map(|(s, d)| s + d).collect()
    }
}

#[derive(Clone, Debug)]
pub struct PredictionParams {
    pub cfg: PredictionConfig,
    pub store: ParamStore,
    backbone: Mlp,
    heads: Vec<Mlp>,
    pub input_norm: Standardizer,
    pub delta_norm: Standardizer,
}

/// Gaussian negative log-likelihood of `target`, summed over dimensions.
pub fn gaussian_nll(target: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    target
        .iter()
        .zip(mean)
        .zip(log_var)
        .map(|((y, m), lv)| 0.5 * ((2.0 * PI).ln() + lv + (y - m).powi(2) * (-lv).exp()))
        .sum()
}

/// Index of the smallest error; ties go to the lowest index.
pub fn argmin_head(errors: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = i;
        }
    }
    best
}

impl PredictionParams {
    pub fn new<R: Rng + ?Sized>(cfg: PredictionConfig, rng: &mut R) -> Result<Self> {
        if cfg.heads == 0 || cfg.layers == 0 || cfg.state_dim == 0 || cfg.action_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Config(format!("prediction model dimensions must be positive: {cfg:?}")));
        }
        let mut store = ParamStore::new();
        let mut widths = vec![cfg.input_width()];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.layers));
        let backbone = Mlp::register(&mut store, "bb.", &widths, Activation::Swish, Activation::Swish, rng)?;
        let heads = (0..cfg.heads)
            .map(|h| {
                Mlp::register(&mut store, &format!("mh{h}."), &[cfg.hidden, 2 * cfg.state_dim], Activation::Identity, Activation::Identity, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            store,
            backbone,
            heads,
            input_norm: Standardizer::identity(cfg.state_dim + cfg.action_dim),
            delta_norm: Standardizer::identity(cfg.state_dim),
        })
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn head(&self, h: usize) -> &Mlp {
        &self.heads[h]
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn push_input(&self, state: &[f64], action: &[f64], context: &[f64], out: &mut Vec<f64>) {
        let start = out.len();
        out.extend_from_slice(state);
        out.extend_from_slice(action);
        for (i, v) in out[start..].iter_mut().enumerate() {
            *v = (*v - self.input_norm.mean[i]) / self.input_norm.std[i];
        }
        out.extend_from_slice(context);
    }

    fn check(&self, state: &[f64], action: &[f64], context: &[f64]) -> Result<()> {
        if state.len() != self.cfg.state_dim || action.len() != self.cfg.action_dim || context.len() != self.cfg.context_width {
            return dim_err(format!(
                "prediction input ({}, {}, {}) for a model expecting ({}, {}, {})",
                state.len(),
                action.len(),
                context.len(),
                self.cfg.state_dim,
                self.cfg.action_dim,
                self.cfg.context_width
            ));
        }
        Ok(())
    }

    /// Head outputs split into (mean, clamped log-variance) on the tape.
    pub fn heads_on_tape(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Vec<(Var, Var)>> {
        let h = self.backbone.forward(tape, bound, x)?;
        let ds = self.cfg.state_dim;
        self.heads
            .iter()
            .map(|head| {
                let out = head.forward(tape, bound, h)?;
                let mean = tape.slice_cols(out, 0, ds)?;
                let lv = tape.slice_cols(out, ds, ds)?;
                Ok((mean, tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)))
            })
            .collect()
    }

    /// Raw head output for a batch of prepared input rows, one head only.
    fn infer_head(&self, x: &Tensor, head: usize) -> Result<Tensor> {
        if head >= self.heads.len() {
            return Err(Error::Contract(format!("head {head} of {}", self.heads.len())));
        }
        let h = self.backbone.infer(&self.store, x)?;
        self.heads[head].infer(&self.store, &h)
    }

    fn decode(&self, row: &[f64]) -> GaussianPrediction {
        let ds = self.cfg.state_dim;
        GaussianPrediction {
            mean: self.delta_norm.invert(&row[..ds]),
            log_var: row[ds..].iter().map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)).collect(),
        }
    }

    pub fn predict(&self, state: &[f64], action: &[f64], context: &[f64], head: usize) -> Result<GaussianPrediction> {
        self.check(state, action, context)?;
        let mut x = Vec::with_capacity(self.cfg.input_width());
        self.push_input(state, action, context, &mut x);
        let out = self.infer_head(&Tensor::matrix(1, self.cfg.input_width(), x)?, head)?;
        Ok(self.decode(out.row_slice(0)))
    }

    /// Predictions of every head for one input.
    pub fn predict_all(&self, state: &[f64], action: &[f64], context: &[f64]) -> Result<Vec<GaussianPrediction>> {
        self.check(state, action, context)?;
        let mut x = Vec::with_capacity(self.cfg.input_width());
        self.push_input(state, action, context, &mut x);
        let h = self.backbone.infer(&self.store, &Tensor::matrix(1, self.cfg.input_width(), x)?)?;
        self.heads.iter().map(|head| Ok(self.decode(head.infer(&self.store, &h)?.row_slice(0)))).collect()
    }

    /// Next states for a batch sharing one context. `states` is `n x ds`,
    /// `actions` `n x da`. With an rng, deltas are sampled from the head's
    /// Gaussian instead of taking its mean.
    pub fn predict_next_batch(
        &self,
        states: &Tensor,
        actions: &Tensor,
        context: &[f64],
        head: usize,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Tensor> {
        let n = states.rows();
        if actions.rows() != n || n == 0 {
            return dim_err(format!("{n} states with {} actions", actions.rows()));
        }
        self.check(states.row_slice(0), actions.row_slice(0), context)?;
        let mut x = Vec::with_capacity(n * self.cfg.input_width());
        for r in 0..n {
            self.push_input(states.row_slice(r), actions.row_slice(r), context, &mut x);
        }
        let out = self.infer_head(&Tensor::matrix(n, self.cfg.input_width(), x)?, head)?;
        let ds = self.cfg.state_dim;
        let mut next = Vec::with_capacity(n * ds);
        let mut rng = rng;
        for r in 0..n {
            let row = out.row_slice(r);
            for d in 0..ds {
                let mut z = row[d];
                if let Some(rng) = rng.as_deref_mut() {
                    let eps: f64 = StandardNormal.sample(rng);
                    z += (0.5 * row[ds + d].clamp(LOG_VAR_MIN, LOG_VAR_MAX)).exp() * eps;
                }
                next.push(states.row_slice(r)[d] + z * self.delta_norm.std[d] + self.delta_norm.mean[d]);
            }
        }
        Tensor::matrix(n, ds, next)
    }

    /// Summed mean-squared error of each head's mean prediction over the last
    /// [`SELECT_WINDOW`] transitions.
    pub fn head_errors(&self, context: &[f64], recent: &[Transition]) -> Result<Vec<f64>> {
        let window = &recent[recent.len().saturating_sub(SELECT_WINDOW)..];
        let mut errors = vec![0.0; self.heads.len()];
        if window.is_empty() {
            return Ok(errors);
        }
        let mut x = Vec::with_capacity(window.len() * self.cfg.input_width());
        for t in window {
            self.check(&t.state, &t.action, context)?;
            self.push_input(&t.state, &t.action, context, &mut x);
        }
        let h = self.backbone.infer(&self.store, &Tensor::matrix(window.len(), self.cfg.input_width(), x)?)?;
        for (e, head) in errors.iter_mut().zip(&self.heads) {
            let out = head.infer(&self.store, &h)?;
            for (r, t) in window.iter().enumerate() {
                let pred = self.decode(out.row_slice(r)).next_state(&t.state);
                *e += pred.iter().zip(&t.next_state).map(|(p, s)| (p - s).powi(2)).sum::<f64>() / self.cfg.state_dim as f64;
            }
        }
        Ok(errors)
    }

    /// The head with the smallest recent error, or a uniformly random head
    /// when there is no history yet.
    pub fn select_head<R: Rng + ?Sized>(&self, context: &[f64], recent: &[Transition], rng: &mut R) -> Result<usize> {
        if recent.is_empty() {
            return Ok(rng.random_range(0..self.heads.len()));
        }
        Ok(argmin_head(&self.head_errors(context, recent)?))
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut r = vec![("wm.meta".to_string(), self.cfg.meta())];
        r.extend(self.store.to_records("wm."));
        r.extend(self.input_norm.to_records("wm.in."));
        r.extend(self.delta_norm.to_records("wm.delta."));
        r
    }

    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let m: Vec<usize> = checkpoint::find(records, "wm.meta")?.data().iter().map(|&v| v as usize).collect();
        if m.len() != 6 {
            return Err(Error::Format("world model metadata has the wrong length".into()));
        }
        let cfg = PredictionConfig { state_dim: m[0], action_dim: m[1], context_width: m[2], hidden: m[3], layers: m[4], heads: m[5] };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut p = Self::new(cfg, &mut rng)?;
        p.store.load_records("wm.", records)?;
        p.input_norm = Standardizer::from_records("wm.in.", records, cfg.state_dim + cfg.action_dim)?;
        p.delta_norm = Standardizer::from_records("wm.delta.", records, cfg.state_dim)?;
        Ok(p)
    }
}

/// Result of one prediction-loss evaluation.
#[derive(Clone, Debug)]
pub struct PreOutput {
    pub loss: Var,
    /// Winning head per kept window.
    pub winners: Vec<usize>,
    /// Windows dropped for being shorter than the horizon.
    pub skipped: usize,
    /// Per-step NLLs below the floor implied by the log-variance clamp.
    pub bound_violations: u64,
}

/// Lowest per-step NLL a `dim`-dimensional head can reach given the clamp.
pub fn nll_floor(dim: usize) -> f64 {
    dim as f64 * 0.5 * ((2.0 * PI).ln() + LOG_VAR_MIN)
}

/// Winner-take-all Gaussian NLL over `h_future`-step windows.
///
/// `context` is `B x context_width`, row `b` conditioning every step of
/// `futures[b]`. Only the head with the lowest mean window NLL receives
/// gradient for that window; the loss averages over kept windows and steps.
pub fn loss_pre(
    tape: &mut Tape,
    model: &PredictionParams,
    bound: &Bound,
    context: Var,
    futures: &[Vec<Transition>],
    h_future: usize,
) -> Result<PreOutput> {
    if h_future == 0 {
        return Err(Error::Contract("prediction horizon must be positive".into()));
    }
    if tape.value(context).rows() != futures.len() || tape.value(context).cols() != model.cfg.context_width {
        return dim_err(format!(
            "context {:?} for {} windows of width {}",
            tape.value(context).dims(),
            futures.len(),
            model.cfg.context_width
        ));
    }
    let kept: Vec<usize> = (0..futures.len()).filter(|&b| futures[b].len() >= h_future).collect();
    if kept.is_empty() {
        return Err(Error::NotReady("no window spans the prediction horizon".into()));
    }
    let (ds, cw) = (model.cfg.state_dim, model.cfg.context_width);
    let rows = kept.len() * h_future;
    let mut sa = Vec::with_capacity(rows * (ds + model.cfg.action_dim));
    let mut targets = Vec::with_capacity(rows * ds);
    let mut ctx_index = Vec::with_capacity(rows * cw);
    for &b in &kept {
        for t in &futures[b][..h_future] {
            if t.state.len() != ds || t.action.len() != model.cfg.action_dim {
                return dim_err("transition width does not match the model");
            }
            let mut pair = t.state.clone();
            pair.extend_from_slice(&t.action);
            model.input_norm.apply_into(&pair, &mut sa);
            let delta: Vec<f64> = t.next_state.iter().zip(&t.state).map(|(n, s)| n - s).collect();
            model.delta_norm.apply_into(&delta, &mut targets);
            ctx_index.extend((0..cw).map(|j| b * cw + j));
        }
    }
    let sa = tape.constant(Tensor::matrix(rows, ds + model.cfg.action_dim, sa)?);
    let ctx = tape.gather(context, ctx_index, rows, cw)?;
    let x = tape.concat_cols(&[sa, ctx])?;
    let y = tape.constant(Tensor::matrix(rows, ds, targets)?);
    let heads = model.heads_on_tape(tape, bound, x)?;
    let floor = nll_floor(ds) - 1e-9;
    let mut bound_violations = 0;
    let mut per_head = Vec::with_capacity(heads.len());
    for &(mean, lv) in &heads {
        let diff = tape.sub(y, mean)?;
        let sq = tape.square(diff);
        let neg_lv = tape.neg(lv);
        let inv = tape.exp(neg_lv);
        let quad = tape.mul(sq, inv)?;
        let terms = tape.add(quad, lv)?;
        let terms = tape.add_scalar(terms, (2.0 * PI).ln());
        let row = tape.sum_cols(terms);
        let nll = tape.scale(row, 0.5);
        bound_violations += tape.value(nll).data().iter().filter(|&&v| v < floor).count() as u64;
        per_head.push(nll);
    }
    let winners: Vec<usize> = (0..kept.len())
        .map(|w| {
            let errs: Vec<f64> = per_head
                .iter()
                .map(|&n| tape.value(n).data()[w * h_future..(w + 1) * h_future].iter().sum::<f64>())
                .collect();
            argmin_head(&errs)
        })
        .collect();
    let weight = 1.0 / rows as f64;
    let mut loss: Option<Var> = None;
    for (h, &nll) in per_head.iter().enumerate() {
        let mask = (0..rows).map(|r| if winners[r / h_future] == h { weight } else { 0.0 }).collect();
        let masked = tape.mul_const(nll, Tensor::matrix(rows, 1, mask)?)?;
        let s = tape.sum(masked);
        loss = Some(match loss {
            None => s,
            Some(l) => tape.add(l, s)?,
        });
    }
    Ok(PreOutput { loss: loss.expect("at least one head"), winners, skipped: futures.len() - kept.len(), bound_violations })
}

/// `L_Pre + (-L_NCE)`; the contrastive term is optional because the buffer
/// may not yet hold two settings.
pub fn combined_objective(tape: &mut Tape, pre: Var, neg_nce: Option<Var>) -> Result<Var> {
    match neg_nce {
        None => Ok(pre),
        Some(n) => tape.add(pre, n),
    }
}
