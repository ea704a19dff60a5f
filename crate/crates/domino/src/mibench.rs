//! InfoNCE on correlated Gaussians with known mutual information: one joint
//! critic over all pairs versus one critic per independent pair.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::ad::{AdamConfig, Activation, Mlp, ParamStore, Tape, Tensor};
use crate::context::CEILING_SLACK;
use crate::error::{Error, Result};
use crate::rng::Streams;

/// Mutual information of a bivariate standard normal with correlation `rho`.
pub fn analytic_mi(rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::Domain(format!("correlation {rho} must satisfy |rho| < 1")));
    }
    Ok(-0.5 * (1.0 - rho * rho).ln())
}

/// Independent scalar pairs `(x_i, y_i)` with correlations `rhos[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub rhos: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(rhos: Vec<f64>) -> Result<Self> {
        if rhos.is_empty() {
            return Err(Error::Config("a Gaussian spec needs at least one pair".into()));
        }
        for &r in &rhos {
            analytic_mi(r)?;
        }
        Ok(Self { rhos })
    }

    pub fn n_pairs(&self) -> usize {
        self.rhos.len()
    }

    /// Total MI; pairs are independent so it is the sum over pairs.
    pub fn total_mi(&self) -> f64 {
        self.rhos.iter().map(|&r| analytic_mi(r).expect("validated")).sum()
    }

    /// The spec restricted to one pair.
    pub fn pair(&self, i: usize) -> GaussianSpec {
        GaussianSpec { rhos: vec![self.rhos[i]] }
    }

    /// `batch x n_pairs` matrices `x` and `y`.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> (Tensor, Tensor) {
        let n = self.n_pairs();
        let mut x = Vec::with_capacity(batch * n);
        let mut y = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            for &rho in &self.rhos {
                let a: f64 = StandardNormal.sample(rng);
                let e: f64 = StandardNormal.sample(rng);
                x.push(a);
                y.push(rho * a + (1.0 - rho * rho).sqrt() * e);
            }
        }
        (Tensor::matrix(batch, n, x).expect("shape"), Tensor::matrix(batch, n, y).expect("shape"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiConfig {
    pub k: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub embed: usize,
    /// Number of final batches averaged into the estimate.
    pub tail: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { k: 16, steps: 3000, batch: 128, lr: 1e-3, hidden: 64, embed: 16, tail: 100 }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k > self.batch {
            return Err(Error::Config(format!("K = {} must lie in 2..={}", self.k, self.batch)));
        }
        if self.steps == 0 || self.tail == 0 || self.tail > self.steps {
            return Err(Error::Config("need 0 < tail <= steps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorRun {
    /// Mean of the final `tail` batch means, in nats.
    pub estimate: f64,
    /// Batch-mean InfoNCE per training step.
    pub batch_means: Vec<f64>,
    pub max_sample_value: f64,
    pub ceiling_violations: u64,
}

/// Trains a separable critic `f(x)·g(y)/sqrt(embed)` by maximizing InfoNCE
/// with in-batch negatives `y[(i + j) mod B]`, `j = 1..K`.
pub fn train_estimator<R: Rng + ?Sized>(spec: &GaussianSpec, cfg: &MiConfig, rng: &mut R) -> Result<EstimatorRun> {
    cfg.validate()?;
    let d = spec.n_pairs();
    let mut store = ParamStore::new();
    let widths = [d, cfg.hidden, cfg.hidden, cfg.embed];
    let f = Mlp::register(&mut store, "f.", &widths, Activation::Swish, Activation::Identity, rng)?;
    let g = Mlp::register(&mut store, "g.", &widths, Activation::Swish, Activation::Identity, rng)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let (b, k) = (cfg.batch, cfg.k);
    let index: Vec<usize> = (0..b).flat_map(|i| (0..k).map(move |j| i * b + (i + j) % b)).collect();
    let ln_k = (k as f64).ln();
    let scale = 1.0 / (cfg.embed as f64).sqrt();
    let mut run = EstimatorRun { estimate: 0.0, batch_means: Vec::with_capacity(cfg.steps), max_sample_value: f64::NEG_INFINITY, ceiling_violations: 0 };
    for _ in 0..cfg.steps {
        let (x, y) = spec.sample(b, rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let fx = f.forward(&mut tape, &bound, xv)?;
        let gy = g.forward(&mut tape, &bound, yv)?;
        let s = tape.matmul_bt(fx, gy)?;
        let s = tape.scale(s, scale);
        let scores = tape.gather(s, index.clone(), b, k)?;
        let pos = tape.slice_cols(scores, 0, 1)?;
        let lse = tape.logsumexp_rows(scores);
        let v = tape.sub(pos, lse)?;
        let v = tape.add_scalar(v, ln_k);
        for &x in tape.value(v).data() {
            run.max_sample_value = run.max_sample_value.max(x);
            run.ceiling_violations += u64::from(x > ln_k + CEILING_SLACK);
        }
        let m = tape.mean(v);
        run.batch_means.push(tape.value(m).item());
        let loss = tape.neg(m);
        let grads = store.collect(&tape.backward(loss)?, &bound);
        store.adam_step(&grads, &adam)?;
    }
    let tail = &run.batch_means[cfg.steps - cfg.tail..];
    run.estimate = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(run)
}

/// One critic over all pairs at once.
pub fn train_joint_estimator(spec: &GaussianSpec, cfg: &MiConfig, streams: &Streams) -> Result<EstimatorRun> {
    train_estimator(spec, cfg, &mut streams.stream("mi-bench", 0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedRun {
    pub pairs: Vec<EstimatorRun>,
    pub sum: f64,
}

/// One critic per pair; pair `i` uses stream `i`, so a single-pair spec
/// reproduces the joint estimator exactly.
pub fn train_decomposed_estimator(spec: &GaussianSpec, cfg: &MiConfig, streams: &Streams) -> Result<DecomposedRun> {
    let pairs = (0..spec.n_pairs())
        .map(|i| train_estimator(&spec.pair(i), cfg, &mut streams.stream("mi-bench", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let sum = pairs.iter().map(|p| p.estimate).sum();
    Ok(DecomposedRun { pairs, sum })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiRow {
    pub spec: String,
    pub k: usize,
    pub seed: u64,
    pub joint: f64,
    /// Per-pair estimates joined with `;`.
    pub per_pair: String,
    pub sum: f64,
    pub analytic: f64,
    pub ceiling_violations: u64,
}

/// Joint and decomposed estimates for one spec, K and seed.
pub fn run_case(name: &str, spec: &GaussianSpec, cfg: &MiConfig, seed: u64) -> Result<MiRow> {
    let streams = Streams::new(seed);
    let joint = train_joint_estimator(spec, cfg, &streams)?;
    let dec = train_decomposed_estimator(spec, cfg, &streams)?;
    let violations = joint.ceiling_violations + dec.pairs.iter().map(|p| p.ceiling_violations).sum::<u64>();
    Ok(MiRow {
        spec: name.to_string(),
        k: cfg.k,
        seed,
        joint: joint.estimate,
        per_pair: dec.pairs.iter().map(|p| format!("{:.6}", p.estimate)).collect::<Vec<_>>().join(";"),
        sum: dec.sum,
        analytic: spec.total_mi(),
        ceiling_violations: violations,
    })
}

pub fn write_results_csv<W: Write>(w: W, rows: &[MiRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_values() {
        assert_eq!(analytic_mi(0.0).unwrap(), 0.0);
        assert!((analytic_mi(0.9).unwrap() - 0.8304).abs() < 1e-4);
        let oracle = -0.5 * (0.0199f64).ln();
        assert!((analytic_mi(0.99).unwrap() - oracle).abs() < 1e-12);
        assert!((analytic_mi(0.99).unwrap() - 1.95852).abs() < 1e-4);
        assert!(matches!(analytic_mi(1.0), Err(Error::Domain(_))));
        assert!(analytic_mi(-1.5).is_err());
        assert!((GaussianSpec::new(vec![0.99, 0.99]).unwrap().total_mi() - 3.91704).abs() < 1e-4);
    }

    #[test]
    fn samples_have_the_requested_correlation() {
        let spec = GaussianSpec::new(vec![0.9, -0.5]).unwrap();
        let mut rng = Streams::new(1).stream("t", 0);
        let (x, y) = spec.sample(20_000, &mut rng);
        for (i, &rho) in spec.rhos.iter().enumerate() {
            let c = (0..x.rows()).map(|r| x.row_slice(r)[i] * y.row_slice(r)[i]).sum::<f64>() / x.rows() as f64;
            assert!((c - rho).abs() < 0.03, "pair {i}: {c}");
        }
    }

    fn short() -> MiConfig {
        MiConfig { steps: 300, tail: 50, batch: 64, ..MiConfig::default() }
    }

    #[test]
    fn single_pair_decomposition_is_the_joint_estimator() {
        let spec = GaussianSpec::new(vec![0.8]).unwrap();
        let cfg = MiConfig { steps: 50, tail: 10, ..short() };
        let s = Streams::new(3);
        let joint = train_joint_estimator(&spec, &cfg, &s).unwrap();
        let dec = train_decomposed_estimator(&spec, &cfg, &s).unwrap();
        assert_eq!(dec.sum, joint.estimate);
    }

    #[test]
    fn independence_estimates_near_zero() {
        let spec = GaussianSpec::new(vec![0.0]).unwrap();
        let run = train_joint_estimator(&spec, &short(), &Streams::new(4)).unwrap();
        assert!(run.estimate.abs() < 0.1, "{}", run.estimate);
        assert_eq!(run.ceiling_violations, 0);
    }

    #[test]
    fn estimates_stay_below_ln_k() {
        let spec = GaussianSpec::new(vec![0.999, 0.999]).unwrap();
        let cfg = MiConfig { k: 4, ..short() };
        let run = train_joint_estimator(&spec, &cfg, &Streams::new(5)).unwrap();
        assert_eq!(run.ceiling_violations, 0);
        assert!(run.max_sample_value <= 4f64.ln() + CEILING_SLACK);
        let dec = train_decomposed_estimator(&spec, &cfg, &Streams::new(5)).unwrap();
        assert!(dec.sum <= 2.0 * 4f64.ln());
    }

    #[test]
    fn config_validation() {
        assert!(MiConfig { k: 1, ..MiConfig::default() }.validate().is_err());
        assert!(MiConfig { k: 256, ..MiConfig::default() }.validate().is_err());
        assert!(MiConfig { tail: 0, ..MiConfig::default() }.validate().is_err());
    }

    #[test]
    fn results_csv_has_a_header() {
        let row = MiRow {
            spec: "pairs2".into(),
            k: 16,
            seed: 0,
            joint: 2.5,
            per_pair: "1.8;1.8".into(),
            sum: 3.6,
            analytic: 3.912,
            ceiling_violations: 0,
        };
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("spec,k,seed,joint,per_pair,sum,analytic,ceiling_violations\n"));
    }
}
