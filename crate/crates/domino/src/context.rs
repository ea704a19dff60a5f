//! Disentangled context encoder, trajectory encoder, cosine critic and the
//! decomposed InfoNCE objective.

use rand::Rng;

use crate::ad::{checkpoint, note_degenerate, Activation, Bound, Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::norm::Standardizer;
use crate::replay::{ContrastiveBatch, Segment};

/// Slack allowed above `ln K` before a per-sample InfoNCE value counts as a
/// ceiling violation.
pub const CEILING_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub n_heads: usize,
    pub ctx_dim: usize,
    pub h_past: usize,
    pub trunk_width: usize,
    pub trunk_layers: usize,
    pub traj_width: usize,
}

impl EncoderConfig {
    /// Default shapes: 10-step history, 3x128 trunk, 64-wide trajectory encoder.
    pub fn new(state_dim: usize, action_dim: usize, n_heads: usize, ctx_dim: usize) -> Self {
        Self { state_dim, action_dim, n_heads, ctx_dim, h_past: 10, trunk_width: 128, trunk_layers: 3, traj_width: 64 }
    }

    pub fn pair_width(&self) -> usize {
        self.state_dim + self.action_dim
    }

    /// Width of all heads concatenated, as fed downstream.
    pub fn context_width(&self) -> usize {
        self.n_heads * self.ctx_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.state_dim, self.action_dim, self.n_heads, self.ctx_dim, self.h_past, self.trunk_width, self.traj_width];
        if dims.contains(&0) || self.trunk_layers == 0 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn meta(&self) -> Tensor {
        Tensor::row(
            [self.state_dim, self.action_dim, self.n_heads, self.ctx_dim, self.h_past, self.trunk_width, self.trunk_layers, self.traj_width]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
    }
}

/// The `N` context vectors inferred from one history window.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSet {
    pub vectors: Vec<Vec<f64>>,
    pub source_setting: Option<u64>,
}

impl ContextSet {
    pub fn zeros(n_heads: usize, ctx_dim: usize) -> Self {
        Self { vectors: vec![vec![0.0; ctx_dim]; n_heads], source_setting: None }
    }

    pub fn n_heads(&self) -> usize {
        self.vectors.len()
    }

    /// Heads laid end to end: `[c_0, c_1, ...]`.
    pub fn concat(&self) -> Vec<f64> {
        self.vectors.concat()
    }
}

/// Parameters of the context encoder (shared trunk plus one linear head per
/// context) and of the trajectory encoder, with the input standardizer.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    pub store: ParamStore,
    trunk: Mlp,
    heads: Vec<Mlp>,
    traj: Mlp,
    pub input_norm: Standardizer,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut trunk_widths = vec![cfg.h_past * cfg.pair_width()];
        trunk_widths.extend(std::iter::repeat_n(cfg.trunk_width, cfg.trunk_layers));
        let trunk = Mlp::register(&mut store, "trunk.", &trunk_widths, Activation::Swish, Activation::Swish, rng)?;
        let heads = (0..cfg.n_heads)
            .map(|i| {
                Mlp::register(&mut store, &format!("head{i}."), &[cfg.trunk_width, cfg.ctx_dim], Activation::Identity, Activation::Identity, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let traj = Mlp::register(
            &mut store,
            "traj.",
            &[cfg.pair_width(), cfg.traj_width, cfg.traj_width, cfg.ctx_dim],
            Activation::Swish,
            Activation::Identity,
            rng,
        )?;
        Ok(Self { cfg, store, trunk, heads, traj, input_norm: Standardizer::identity(cfg.pair_width()) })
    }

    pub fn trunk(&self) -> &Mlp {
        &self.trunk
    }

    pub fn head(&self, i: usize) -> &Mlp {
        &self.heads[i]
    }

    pub fn traj(&self) -> &Mlp {
        &self.traj
    }

    fn check_segment(&self, s: &Segment) -> Result<()> {
        if s.width != self.cfg.pair_width() || s.len() != self.cfg.h_past {
            return dim_err(format!(
                "segment {}x{} for an encoder expecting {}x{}",
                s.len(),
                s.width,
                self.cfg.h_past,
                self.cfg.pair_width()
            ));
        }
        Ok(())
    }

    /// Standardized rows; padding rows stay zero.
    fn push_rows(&self, s: &Segment, out: &mut Vec<f64>) {
        out.extend(std::iter::repeat_n(0.0, s.padded * s.width));
        for r in s.padded..s.len() {
            self.input_norm.apply_into(s.row(r), out);
        }
    }

    /// `B x (h_past * width)` context-encoder input.
    pub fn context_input(&self, segments: &[&Segment]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(segments.len() * self.trunk.in_width());
        for s in segments {
            self.check_segment(s)?;
            self.push_rows(s, &mut data);
        }
        Tensor::matrix(segments.len(), self.trunk.in_width(), data)
    }

    /// `(B * h_past) x width` trajectory-encoder input. Padded segments are
    /// rejected because pooling over padding would bias the embedding.
    pub fn transition_input(&self, segments: &[&Segment]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(segments.len() * self.trunk.in_width());
        for s in segments {
            self.check_segment(s)?;
            if s.padded > 0 {
                return Err(Error::Contract("trajectory encoder given a padded segment".into()));
            }
            self.push_rows(s, &mut data);
        }
        Tensor::matrix(segments.len() * self.cfg.h_past, self.cfg.pair_width(), data)
    }

    /// Context heads on the tape, one `B x ctx_dim` node per head.
    pub fn contexts_on_tape(&self, tape: &mut Tape, bound: &Bound, segments: &[&Segment]) -> Result<Vec<Var>> {
        let x = tape.constant(self.context_input(segments)?);
        let h = self.trunk.forward(tape, bound, x)?;
        self.heads.iter().map(|head| head.forward(tape, bound, h)).collect()
    }

    /// Mean-pooled trajectory embeddings on the tape, `B x ctx_dim`.
    pub fn trajectories_on_tape(&self, tape: &mut Tape, bound: &Bound, segments: &[&Segment]) -> Result<Var> {
        let x = tape.constant(self.transition_input(segments)?);
        let e = self.traj.forward(tape, bound, x)?;
        tape.mean_pool_rows(e, self.cfg.h_past)
    }

    pub fn encode_contexts(&self, segments: &[&Segment]) -> Result<Vec<ContextSet>> {
        let h = self.trunk.infer(&self.store, &self.context_input(segments)?)?;
        let outs = self.heads.iter().map(|head| head.infer(&self.store, &h)).collect::<Result<Vec<_>>>()?;
        Ok(segments
            .iter()
            .enumerate()
            .map(|(b, s)| ContextSet {
                vectors: outs.iter().map(|o| o.row_slice(b).to_vec()).collect(),
                source_setting: (s.setting_id != u64::MAX).then_some(s.setting_id),
            })
            .collect())
    }

    pub fn encode_context(&self, segment: &Segment) -> Result<ContextSet> {
        Ok(self.encode_contexts(&[segment])?.remove(0))
    }

    /// Per-transition embeddings averaged over the unpadded rows.
    pub fn encode_trajectory(&self, segment: &Segment) -> Result<Vec<f64>> {
        if segment.width != self.cfg.pair_width() || segment.padded >= segment.len() {
            return dim_err(format!("cannot embed a segment of width {} with {} real rows", segment.width, segment.len() - segment.padded.min(segment.len())));
        }
        let mut data = Vec::new();
        for r in segment.padded..segment.len() {
            self.input_norm.apply_into(segment.row(r), &mut data);
        }
        let rows = segment.len() - segment.padded;
        let e = self.traj.infer(&self.store, &Tensor::matrix(rows, segment.width, data)?)?;
        let mut out = vec![0.0; self.cfg.ctx_dim];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(e.row_slice(r)) {
                *o += v / rows as f64;
            }
        }
        Ok(out)
    }

    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        let mut r = vec![("enc.meta".to_string(), self.cfg.meta())];
        r.extend(self.store.to_records("enc."));
        r.extend(self.input_norm.to_records("enc.norm."));
        r
    }

    /// Rebuilds an encoder from checkpoint records written by [`EncoderParams::to_records`].
    pub fn from_records(records: &[(String, Tensor)]) -> Result<Self> {
        let meta = checkpoint::find(records, "enc.meta")?.data().iter().map(|&v| v as usize).collect::<Vec<_>>();
        if meta.len() != 8 {
            return Err(Error::Format("encoder metadata has the wrong length".into()));
        }
        let cfg = EncoderConfig {
            state_dim: meta[0],
            action_dim: meta[1],
            n_heads: meta[2],
            ctx_dim: meta[3],
            h_past: meta[4],
            trunk_width: meta[5],
            trunk_layers: meta[6],
            traj_width: meta[7],
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut enc = Self::new(cfg, &mut rng)?;
        enc.store.load_records("enc.", records)?;
        enc.input_norm = Standardizer::from_records("enc.norm.", records, cfg.pair_width())?;
        Ok(enc)
    }
}

/// Cosine similarity divided by the temperature. A zero input scores 0 and
/// is counted in [`crate::ad::degenerate_normalizations`].
pub fn critic(a: &[f64], b: &[f64], temperature: f64) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        note_degenerate();
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb) / temperature
}

/// Per-sample InfoNCE: `pos - logsumexp([pos, negs]) + ln K`, never above `ln K`.
pub fn infonce(pos_score: f64, neg_scores: &[f64]) -> Result<f64> {
    if neg_scores.is_empty() {
        return Err(Error::Contract("InfoNCE needs at least one negative".into()));
    }
    if !pos_score.is_finite() || neg_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("InfoNCE scores must be finite".into()));
    }
    let mut all = Vec::with_capacity(neg_scores.len() + 1);
    all.push(pos_score);
    all.extend_from_slice(neg_scores);
    let k = all.len() as f64;
    Ok(pos_score - crate::ad::logsumexp(&all) + k.ln())
}

/// Per-sample InfoNCE values on the tape, `B x 1`.
///
/// `negatives` holds `B * (k - 1)` rows, row `b * (k - 1) + j` being the
/// `j`-th negative of anchor `b`. Scores are cosine similarities over
/// `temperature`.
pub fn infonce_rows(tape: &mut Tape, anchors: Var, positives: Var, negatives: Var, k: usize, temperature: f64) -> Result<Var> {
    let b = tape.value(anchors).rows();
    if k < 2 || tape.value(negatives).rows() != b * (k - 1) {
        return dim_err(format!("{} negative rows for {b} anchors with K = {k}", tape.value(negatives).rows()));
    }
    let a = tape.normalize_rows(anchors);
    let p = tape.normalize_rows(positives);
    let n = tape.normalize_rows(negatives);
    let pos = tape.row_dot(a, p)?;
    let pos = tape.scale(pos, 1.0 / temperature);
    let rep = tape.repeat_rows(a, k - 1)?;
    let neg = tape.row_dot(rep, n)?;
    let neg = tape.scale(neg, 1.0 / temperature);
    let neg = tape.reshape(neg, b, k - 1)?;
    let all = tape.concat_cols(&[pos, neg])?;
    let lse = tape.logsumexp_rows(all);
    let v = tape.sub(pos, lse)?;
    Ok(tape.add_scalar(v, (k as f64).ln()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NceConfig {
    pub tau_traj: f64,
    pub tau_ctx: f64,
}

impl Default for NceConfig {
    fn default() -> Self {
        Self { tau_traj: 0.004, tau_ctx: 0.1 }
    }
}

/// Everything a training step needs to know about one L_NCE evaluation.
#[derive(Clone, Debug)]
pub struct NceOutput {
    /// `-L_NCE` as a scalar tape node.
    pub loss: Var,
    /// Batch means of I_NCE(c_i; T), one per head.
    pub traj_terms: Vec<f64>,
    /// Batch means of I_NCE(c_i; c_j) for ordered pairs `i != j`, row-major.
    pub ctx_terms: Vec<f64>,
    /// Largest per-sample value of any term.
    pub max_value: f64,
    /// Per-sample values above `ln K + CEILING_SLACK`.
    pub violations: u64,
    pub samples: u64,
    pub k: usize,
}

impl NceOutput {
    /// L_NCE itself (the quantity being maximized).
    pub fn objective(&self) -> f64 {
        self.traj_terms.iter().sum::<f64>() - self.ctx_terms.iter().sum::<f64>()
    }
}

/// Decomposed InfoNCE loss on a contrastive batch.
///
/// `query_heads` are the context heads already computed for `batch.queries`
/// (so the prediction loss can share them). The first term pulls each head
/// towards the trajectory embedding of a same-setting window; the second
/// pushes heads apart, using a second window of the query's episode as the
/// positive for `c_j` and the batch's other-setting windows as negatives.
pub fn nce_loss(
    tape: &mut Tape,
    enc: &EncoderParams,
    bound: &Bound,
    batch: &ContrastiveBatch,
    query_heads: &[Var],
    cfg: &NceConfig,
) -> Result<NceOutput> {
    if !batch.is_contrastive() {
        return Err(Error::NotReady("batch has no positives or negatives".into()));
    }
    if query_heads.len() != enc.cfg.n_heads {
        return dim_err(format!("{} query heads for {} encoder heads", query_heads.len(), enc.cfg.n_heads));
    }
    let k = batch.k();
    let positives: Vec<&Segment> = batch.positives.iter().collect();
    let negatives: Vec<&Segment> = batch.negatives.iter().flatten().collect();
    let pos_traj = enc.trajectories_on_tape(tape, bound, &positives)?;
    let neg_traj = enc.trajectories_on_tape(tape, bound, &negatives)?;
    let mut values = Vec::new();
    let mut traj_terms = Vec::new();
    for &c in query_heads {
        let v = infonce_rows(tape, c, pos_traj, neg_traj, k, cfg.tau_traj)?;
        traj_terms.push(v);
        values.push(v);
    }
    let mut ctx_terms = Vec::new();
    if enc.cfg.n_heads > 1 {
        let partners: Vec<&Segment> = batch.partners.iter().collect();
        let partner_heads = enc.contexts_on_tape(tape, bound, &partners)?;
        let neg_heads = enc.contexts_on_tape(tape, bound, &negatives)?;
        for (i, &ci) in query_heads.iter().enumerate() {
            for j in 0..enc.cfg.n_heads {
                if i == j {
                    continue;
                }
                let v = infonce_rows(tape, ci, partner_heads[j], neg_heads[j], k, cfg.tau_ctx)?;
                ctx_terms.push(v);
                values.push(v);
            }
        }
    }
    let ceiling = (k as f64).ln() + CEILING_SLACK;
    let mut max_value = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut samples = 0;
    for &v in &values {
        for &x in tape.value(v).data() {
            max_value = max_value.max(x);
            violations += u64::from(x > ceiling);
            samples += 1;
        }
    }
    let means = |tape: &mut Tape, vs: &[Var]| vs.iter().map(|&v| tape.mean(v)).collect::<Vec<_>>();
    let traj_means = means(tape, &traj_terms);
    let ctx_means = means(tape, &ctx_terms);
    let mut total = None;
    for &m in &traj_means {
        total = Some(match total {
            None => tape.neg(m),
            Some(t) => tape.sub(t, m)?,
        });
    }
    for &m in &ctx_means {
        total = Some(tape.add(total.expect("at least one head"), m)?);
    }
    let value_of = |tape: &Tape, vs: &[Var]| vs.iter().map(|&v| tape.value(v).item()).collect::<Vec<_>>();
    Ok(NceOutput {
        loss: total.expect("at least one head"),
        traj_terms: value_of(tape, &traj_means),
        ctx_terms: value_of(tape, &ctx_means),
        max_value,
        violations,
        samples,
        k,
    })
}
