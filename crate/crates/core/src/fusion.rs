//! Couples paper embeddings to the topic model and trains everything jointly.
//!
//! Topic proportions are never stored: `theta_p = softmax(kappa * v_p)`. The
//! citation likelihood is `sigma(beta0 + beta1 . (v_i * v_j))`. The objective
//! minimised is
//!
//! ```text
//! NLL_links + lambda * NLL_topics
//!     + lambda_p |V|^2 + lambda_d |psi_d|^2 + lambda_v |psi_w|^2 + lambda_w |W|^2
//! ```
//!
//! where `W` ranges over the autoencoder weight matrices.
//!
//! Each outer iteration of [`train_with`] runs
//!
//! 1. step (1): L-BFGS over `V, kappa, beta, psi_w, psi_d` with the topic
//!    assignments fixed;
//! 2. step (2a): fine-tuning of the autoencoder and structure embedding
//!    towards `V`, after which `V = [t; s]`;
//! 3. step (2b/2c): one Gibbs sweep over word and dataset topic assignments.

use std::io::Write;

use log::{info, warn};
use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{sample_negative_pairs, HeteroGraph};
use crate::error::{Error, Result};
use crate::graph_embedding::{self, train_structure_embeddings, StructEmbedding, StructureTraining, WalkConfig};
use crate::linalg::{log_sigmoid, log_sum_exp_scaled, sigmoid, softmax_scaled_into, sum_squares};
use crate::optim::{lbfgs_minimize, LbfgsConfig};
use crate::text_autoencoder::{self, pretrain_inputs, FinetuneStep, SdaeConfig, SdaeParams, TextInputs};
use crate::topic_model::{
    assignment_nll, dataset_topic_dist, gibbs_sweep_datasets, gibbs_sweep_words, grad_psi_d, grad_psi_w,
    word_topic_dist, SufficientStats, TopicState,
};

/// Topic proportions `softmax(kappa * v)`.
pub fn transform(v: ArrayView1<f64>, kappa: f64) -> Array1<f64> {
    let mut out = Array1::zeros(v.len());
    softmax_scaled_into(v, kappa, out.view_mut());
    out
}

/// Probability of a citation between two papers.
pub fn link_prob(v_i: ArrayView1<f64>, v_j: ArrayView1<f64>, beta0: f64, beta1: ArrayView1<f64>) -> f64 {
    sigmoid(link_logit(v_i, v_j, beta0, beta1))
}

fn link_logit(v_i: ArrayView1<f64>, v_j: ArrayView1<f64>, beta0: f64, beta1: ArrayView1<f64>) -> f64 {
    beta0
        + beta1
            .iter()
            .zip(v_i.iter().zip(v_j.iter()))
            .map(|(b, (a, c))| b * (a * c))
            .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Paper embeddings, papers x K.
    pub v: Array2<f64>,
    pub kappa: f64,
    pub beta0: f64,
    pub beta1: Array1<f64>,
}

impl FusionParams {
    /// `kappa = 1` and `beta = 0` around the given embeddings.
    pub fn new(v: Array2<f64>) -> Self {
        let k = v.ncols();
        Self {
            v,
            kappa: 1.0,
            beta0: 0.0,
            beta1: Array1::zeros(k),
        }
    }

    pub fn num_topics(&self) -> usize {
        self.v.ncols()
    }

    /// Topic proportions of every paper.
    pub fn theta(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.v.raw_dim());
        for (row, dst) in self.v.rows().into_iter().zip(out.rows_mut()) {
            softmax_scaled_into(row, self.kappa, dst);
        }
        out
    }

    pub fn validate(&self, num_papers: usize) -> Result<()> {
        if self.v.nrows() != num_papers {
            return Err(Error::shape(format!(
                "embedding matrix has {} rows for {num_papers} papers",
                self.v.nrows()
            )));
        }
        if self.beta1.len() != self.v.ncols() {
            return Err(Error::shape(format!(
                "beta1 has length {} but embeddings have {} columns",
                self.beta1.len(),
                self.v.ncols()
            )));
        }
        if !self.kappa.is_finite() || self.kappa <= 0.0 {
            return Err(Error::config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !self.beta0.is_finite() || !self.v.iter().chain(&self.beta1).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("fusion parameters".into()));
        }
        Ok(())
    }
}

/// Weights of the topic block and the ridge penalties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub lambda_v: f64,
    pub lambda_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lambda_p: 0.1,
            lambda_d: 0.01,
            lambda_v: 0.1,
            lambda_w: 0.01,
        }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        let all = [self.lambda, self.lambda_p, self.lambda_d, self.lambda_v, self.lambda_w];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative: {all:?}"
            )));
        }
        Ok(())
    }
}

/// Observed citations and sampled non-citations, as ordered paper pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSet {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

impl PairSet {
    /// Every citation plus an equal number of sampled non-edges.
    pub fn sample(graph: &HeteroGraph, seed: u64) -> Result<Self> {
        Ok(Self {
            positive: graph.citations().to_vec(),
            negative: sample_negative_pairs(graph, seed)?,
        })
    }

    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labelled(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        let pos = self.positive.iter().map(|&(i, j)| (i, j, true));
        pos.chain(self.negative.iter().map(|&(i, j)| (i, j, false)))
    }
}

/// The objective split into its blocks. `topics` already includes the
/// `lambda` factor, so `total = links + topics + reg`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub links: f64,
    pub topics: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub v: Array2<f64>,
    pub kappa: f64,
    pub beta0: f64,
    pub beta1: Array1<f64>,
    pub psi_w: Array2<f64>,
    pub psi_d: Array2<f64>,
}

/// Everything held fixed while the continuous parameters move: the graph,
/// the topic counts, the link pairs and the autoencoder weight penalty.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    graph: &'a HeteroGraph,
    stats: &'a SufficientStats,
    pairs: &'a PairSet,
    weights: LossWeights,
    sdae_weight_sq: f64,
}

impl<'a> Objective<'a> {
    /// Checks the assignments and counts against the graph and the pairs
    /// against the paper range.
    pub fn new(
        graph: &'a HeteroGraph,
        state: &TopicState,
        stats: &'a SufficientStats,
        pairs: &'a PairSet,
        weights: LossWeights,
        sdae_weight_sq: f64,
    ) -> Result<Self> {
        state.validate(graph)?;
        weights.validate()?;
        let k = state.num_topics();
        if stats.n_pk.dim() != (graph.num_papers(), k) || stats.n_kj.dim() != (k, graph.vocab_size()) {
            return Err(Error::shape("topic counts do not match the graph".to_string()));
        }
        let n = graph.num_papers();
        if let Some((i, j, _)) = pairs.labelled().find(|&(i, j, _)| i >= n || j >= n) {
            return Err(Error::shape(format!("pair ({i}, {j}) is out of range for {n} papers")));
        }
        Ok(Self {
            graph,
            stats,
            pairs,
            weights,
            sdae_weight_sq,
        })
    }

    fn check(&self, params: &FusionParams, psi_w: &Array2<f64>, psi_d: &Array2<f64>) -> Result<()> {
        params.validate(self.graph.num_papers())?;
        let k = self.stats.n_kj.nrows();
        if params.num_topics() != k
            || psi_w.dim() != (k, self.graph.vocab_size())
            || psi_d.dim() != (k, self.graph.num_datasets())
        {
            return Err(Error::shape(format!(
                "parameters do not match {k} topics: V {:?}, psi_w {:?}, psi_d {:?}",
                params.v.dim(),
                psi_w.dim(),
                psi_d.dim()
            )));
        }
        Ok(())
    }

    pub fn loss(&self, params: &FusionParams, psi_w: &Array2<f64>, psi_d: &Array2<f64>) -> Result<LossTerms> {
        self.check(params, psi_w, psi_d)?;
        Ok(self.evaluate(params, psi_w, psi_d, None))
    }

    pub fn loss_and_gradient(
        &self,
        params: &FusionParams,
        psi_w: &Array2<f64>,
        psi_d: &Array2<f64>,
    ) -> Result<(LossTerms, Gradients)> {
        self.check(params, psi_w, psi_d)?;
        let mut grad = Gradients {
            v: Array2::zeros(params.v.raw_dim()),
            kappa: 0.0,
            beta0: 0.0,
            beta1: Array1::zeros(params.num_topics()),
            psi_w: Array2::zeros(psi_w.raw_dim()),
            psi_d: Array2::zeros(psi_d.raw_dim()),
        };
        let loss = self.evaluate(params, psi_w, psi_d, Some(&mut grad));
        Ok((loss, grad))
    }

    fn evaluate(
        &self,
        params: &FusionParams,
        psi_w: &Array2<f64>,
        psi_d: &Array2<f64>,
        mut grad: Option<&mut Gradients>,
    ) -> LossTerms {
        let w = self.weights;
        let (v, kappa, beta1) = (&params.v, params.kappa, params.beta1.view());
        let k = params.num_topics();

        let mut links = 0.0;
        for (i, j, observed) in self.pairs.labelled() {
            let (vi, vj) = (v.row(i), v.row(j));
            let a = link_logit(vi, vj, params.beta0, beta1);
            links -= if observed { log_sigmoid(a) } else { log_sigmoid(-a) };
            if let Some(g) = grad.as_deref_mut() {
                let e = sigmoid(a) - if observed { 1.0 } else { 0.0 };
                g.beta0 += e;
                for t in 0..k {
                    g.beta1[t] += e * vi[t] * vj[t];
                    g.v[[i, t]] += e * beta1[t] * vj[t];
                    g.v[[j, t]] += e * beta1[t] * vi[t];
                }
            }
        }

        let mut topic_nll = 0.0;
        for p in 0..self.graph.num_papers() {
            let row = v.row(p);
            let lse = log_sum_exp_scaled(row, kappa);
            let mut total_count = 0.0;
            for t in 0..k {
                let c = (self.stats.n_pk[[p, t]] + self.stats.d_pk[[p, t]]) as f64;
                total_count += c;
                topic_nll -= c * (kappa * row[t] - lse);
            }
            if let Some(g) = grad.as_deref_mut() {
                for t in 0..k {
                    let c = (self.stats.n_pk[[p, t]] + self.stats.d_pk[[p, t]]) as f64;
                    let residual = c - total_count * (kappa * row[t] - lse).exp();
                    g.v[[p, t]] -= w.lambda * kappa * residual;
                    g.kappa -= w.lambda * row[t] * residual;
                }
            }
        }
        topic_nll += assignment_nll(&self.stats.n_kj, psi_w) + assignment_nll(&self.stats.n_ki, psi_d);

        let reg = w.lambda_p * sum_squares(v)
            + w.lambda_d * sum_squares(psi_d)
            + w.lambda_v * sum_squares(psi_w)
            + w.lambda_w * self.sdae_weight_sq;

        if let Some(g) = grad {
            g.v.scaled_add(2.0 * w.lambda_p, v);
            g.psi_w = grad_psi_w(self.stats, &word_topic_dist(psi_w), psi_w, w.lambda, w.lambda_v);
            g.psi_d = grad_psi_d(self.stats, &dataset_topic_dist(psi_d), psi_d, w.lambda, w.lambda_d);
        }

        let topics = w.lambda * topic_nll;
        LossTerms {
            links,
            topics,
            reg,
            total: links + topics + reg,
        }
    }
}

/// Loss of the current parameters; see [`Objective`].
pub fn total_loss(
    graph: &HeteroGraph,
    params: &FusionParams,
    state: &TopicState,
    stats: &SufficientStats,
    pairs: &PairSet,
    weights: LossWeights,
    sdae_weight_sq: f64,
) -> Result<LossTerms> {
    Objective::new(graph, state, stats, pairs, weights, sdae_weight_sq)?.loss(params, &state.psi_w, &state.psi_d)
}

/// Analytic gradients of [`total_loss`] with respect to every continuous
/// parameter.
pub fn grad_continuous(
    graph: &HeteroGraph,
    params: &FusionParams,
    state: &TopicState,
    stats: &SufficientStats,
    pairs: &PairSet,
    weights: LossWeights,
    sdae_weight_sq: f64,
) -> Result<Gradients> {
    let objective = Objective::new(graph, state, stats, pairs, weights, sdae_weight_sq)?;
    Ok(objective.loss_and_gradient(params, &state.psi_w, &state.psi_d)?.1)
}

/// Flat layout `[V, ln kappa, beta0, beta1, psi_w, psi_d]` used by L-BFGS.
/// Working in `ln kappa` keeps the peakiness positive.
struct Packing {
    n: usize,
    k: usize,
    words: usize,
    datasets: usize,
}

impl Packing {
    fn pack(&self, params: &FusionParams, psi_w: &Array2<f64>, psi_d: &Array2<f64>) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.extend(params.v.iter());
        x.push(params.kappa.ln());
        x.push(params.beta0);
        x.extend(params.beta1.iter());
        x.extend(psi_w.iter());
        x.extend(psi_d.iter());
        x
    }

    fn len(&self) -> usize {
        self.n * self.k + 2 + self.k + self.k * (self.words + self.datasets)
    }

    fn unpack(&self, x: &[f64]) -> (FusionParams, Array2<f64>, Array2<f64>) {
        let (n, k) = (self.n, self.k);
        let mut at = 0;
        let mut take = |len: usize| {
            let out = &x[at..at + len];
            at += len;
            out
        };
        let v = Array2::from_shape_vec((n, k), take(n * k).to_vec()).expect("packed shape");
        let kappa = take(1)[0].exp();
        let beta0 = take(1)[0];
        let beta1 = Array1::from(take(k).to_vec());
        let psi_w = Array2::from_shape_vec((k, self.words), take(k * self.words).to_vec()).expect("packed shape");
        let psi_d = Array2::from_shape_vec((k, self.datasets), take(k * self.datasets).to_vec()).expect("packed shape");
        (FusionParams { v, kappa, beta0, beta1 }, psi_w, psi_d)
    }

    fn pack_gradient(&self, g: &Gradients, kappa: f64, out: &mut [f64]) {
        let it =
            g.v.iter()
                .copied()
                .chain([g.kappa * kappa, g.beta0])
                .chain(g.beta1.iter().copied())
                .chain(g.psi_w.iter().copied())
                .chain(g.psi_d.iter().copied());
        for (o, x) in out.iter_mut().zip(it) {
            *o = x;
        }
    }
}

/// Result of one L-BFGS pass over the continuous parameters.
#[derive(Debug, Clone)]
pub struct StepOne {
    pub before: LossTerms,
    pub after: LossTerms,
    pub iterations: usize,
    pub line_search_failed: bool,
}

/// Step (1): minimise over `V, kappa, beta, psi_w, psi_d` with assignments and
/// representations fixed. Only Armijo-accepted steps are taken.
pub fn optimize_continuous(
    objective: &Objective<'_>,
    params: &mut FusionParams,
    state: &mut TopicState,
    lbfgs: &LbfgsConfig,
) -> Result<StepOne> {
    objective.check(params, &state.psi_w, &state.psi_d)?;
    let packing = Packing {
        n: params.v.nrows(),
        k: params.num_topics(),
        words: state.psi_w.ncols(),
        datasets: state.psi_d.ncols(),
    };
    let before = objective.evaluate(params, &state.psi_w, &state.psi_d, None);
    let x0 = packing.pack(params, &state.psi_w, &state.psi_d);
    let outcome = lbfgs_minimize(
        |x, g| {
            let (p, pw, pd) = packing.unpack(x);
            let mut grad = Gradients {
                v: Array2::zeros(p.v.raw_dim()),
                kappa: 0.0,
                beta0: 0.0,
                beta1: Array1::zeros(p.num_topics()),
                psi_w: Array2::zeros(pw.raw_dim()),
                psi_d: Array2::zeros(pd.raw_dim()),
            };
            let loss = objective.evaluate(&p, &pw, &pd, Some(&mut grad));
            packing.pack_gradient(&grad, p.kappa, g);
            loss.total
        },
        x0,
        lbfgs,
    );
    let (p, pw, pd) = packing.unpack(&outcome.x);
    *params = p;
    state.psi_w = pw;
    state.psi_d = pd;
    let after = objective.evaluate(params, &state.psi_w, &state.psi_d, None);
    if !after.total.is_finite() {
        return Err(Error::NonFinite("loss after L-BFGS".into()));
    }
    Ok(StepOne {
        before,
        after,
        iterations: outcome.iterations,
        line_search_failed: outcome.line_search_failed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Embedding size and number of topics; must be even.
    pub k: usize,
    pub weights: LossWeights,
    /// Fine-tuning learning rate for both representations.
    pub lr: f64,
    pub batch_size: usize,
    pub outer_iters: usize,
    pub lbfgs: LbfgsConfig,
    /// Relative change of the loss after step (1) that counts as converged.
    pub tol: f64,
    /// Weight pulling `[t; s]` toward `v` during fine-tuning.
    pub mu: f64,
    pub seed: u64,
    pub sdae: SdaeConfig,
    pub walk: WalkConfig,
}

impl TrainConfig {
    pub fn new(k: usize) -> Result<Self> {
        Ok(Self {
            k,
            weights: LossWeights::default(),
            lr: 0.01,
            batch_size: 64,
            outer_iters: 150,
            lbfgs: LbfgsConfig {
                max_iter: 20,
                ..LbfgsConfig::default()
            },
            tol: 1e-4,
            mu: 1.0,
            seed: 0,
            sdae: SdaeConfig::for_embedding_size(k)?,
            walk: WalkConfig::new(k / 2),
        })
    }

    /// Flat record of the settings, stored alongside trained models.
    pub fn echo(&self) -> serde_json::Value {
        let w = &self.weights;
        serde_json::json!({
            "k": self.k,
            "lambda": w.lambda,
            "lambda_p": w.lambda_p,
            "lambda_d": w.lambda_d,
            "lambda_v": w.lambda_v,
            "lambda_w": w.lambda_w,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "outer_iters": self.outer_iters,
            "lbfgs_history": self.lbfgs.history,
            "lbfgs_max_iter": self.lbfgs.max_iter,
            "tol": self.tol,
            "mu": self.mu,
            "seed": self.seed,
            "sdae_layer_widths": self.sdae.layer_widths,
            "sdae_epochs": self.sdae.epochs,
            "walk_length": self.walk.walk_length,
            "walks_per_node": self.walk.walks_per_node,
            "window": self.walk.window,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !self.k.is_multiple_of(2) {
            return Err(Error::config(format!(
                "embedding size {} must be even and positive",
                self.k
            )));
        }
        if self.k > u16::MAX as usize {
            return Err(Error::config(format!("too many topics: {}", self.k)));
        }
        self.weights.validate()?;
        let finite = self.lr.is_finite() && self.mu.is_finite() && self.tol.is_finite();
        if !finite || self.lr <= 0.0 || self.mu < 0.0 || self.tol < 0.0 {
            return Err(Error::config("lr must be positive, mu and tol finite and non-negative"));
        }
        if self.batch_size == 0 || self.outer_iters == 0 {
            return Err(Error::config("batch size and outer iterations must be positive"));
        }
        if self.sdae.layer_widths.last() != Some(&(self.k / 2)) || self.walk.dim != self.k / 2 {
            return Err(Error::config(format!(
                "text and structure embeddings must each have {} dimensions",
                self.k / 2
            )));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterStep {
    pub iter: usize,
    /// Loss before and after step (1), on the same pairs and assignments.
    pub before: LossTerms,
    pub after: LossTerms,
    pub kappa: f64,
    pub lbfgs_iterations: usize,
    pub line_search_failed: bool,
    /// Alignment residual `Σ |[t; s] - v|²` around fine-tuning, if it ran.
    pub residual: Option<(f64, f64)>,
}

/// Writes `outer_iter,loss_total,loss_links,loss_topics,loss_reg,kappa`, one
/// row per outer iteration with the losses after step (1).
pub fn write_trace_csv<W: Write>(trace: &[OuterStep], mut out: W) -> Result<()> {
    writeln!(out, "outer_iter,loss_total,loss_links,loss_topics,loss_reg,kappa")?;
    for step in trace {
        let l = step.after;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            step.iter, l.total, l.links, l.topics, l.reg, step.kappa
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: FusionParams,
    pub topics: TopicState,
    pub sdae: SdaeParams,
    pub structure: StructEmbedding,
    pub trace: Vec<OuterStep>,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17)
}

/// `[t; s]` for every paper.
fn concat_representations(text: &Array2<f64>, structure: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[text.view(), structure.view()]).expect("row counts agree")
}

fn alignment_residual(text: &Array2<f64>, structure: &Array2<f64>, v: &Array2<f64>) -> f64 {
    let half = text.ncols();
    let t = (text - &v.slice(s![.., ..half])).mapv(|x| x * x).sum();
    t + (structure - &v.slice(s![.., half..])).mapv(|x| x * x).sum()
}

/// Step (2a): one epoch of each representation learner pulled toward the
/// current `V`, then `V <- [t; s]`. Returns the alignment residual before and
/// after the update.
#[allow(clippy::too_many_arguments)]
pub fn finetune_representation(
    inputs: &TextInputs,
    sdae: &mut SdaeParams,
    structure: &mut StructEmbedding,
    walks: &[Vec<usize>],
    v: &mut Array2<f64>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let half = cfg.k / 2;
    if v.ncols() != cfg.k || sdae.code_dim() != half || structure.center.ncols() != half {
        return Err(Error::shape(format!(
            "representations ({} + {}) do not split V with {} columns",
            sdae.code_dim(),
            structure.center.ncols(),
            v.ncols()
        )));
    }
    let before = alignment_residual(&text_autoencoder::embed_all(sdae, inputs), &structure.center, v);
    let step = FinetuneStep {
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        weight_decay: cfg.weights.lambda_w,
        mu: cfg.mu,
    };
    let text_targets = v.slice(s![.., ..half]).to_owned();
    text_autoencoder::finetune_epoch(sdae, inputs, &text_targets, step, rng)?;
    graph_embedding::finetune_epoch(
        structure,
        walks,
        cfg.walk.window,
        cfg.walk.num_negatives,
        v.slice(s![.., half..]),
        cfg.mu,
        cfg.lr,
        rng,
    )?;
    let text = text_autoencoder::embed_all(sdae, inputs);
    let after = alignment_residual(&text, &structure.center, v);
    *v = concat_representations(&text, &structure.center);
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("representations after fine-tuning".into()));
    }
    Ok((before, after))
}

fn gibbs_sweep(
    graph: &HeteroGraph,
    theta: &Array2<f64>,
    state: &mut TopicState,
    stats: &mut SufficientStats,
    rng: &mut ChaCha8Rng,
) {
    let phi_w = word_topic_dist(&state.psi_w);
    let phi_d = dataset_topic_dist(&state.psi_d);
    gibbs_sweep_words(graph, theta.view(), phi_w.view(), state, stats, rng);
    gibbs_sweep_datasets(graph, theta.view(), phi_d.view(), state, stats, rng);
}

/// Pretrains both representations, then runs [`train_with`].
pub fn train(graph: &HeteroGraph, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    let inputs = TextInputs::from_graph(graph);
    let sdae_cfg = SdaeConfig {
        seed: sub_seed(cfg.seed, 1),
        ..cfg.sdae.clone()
    };
    let text = pretrain_inputs(&inputs, &sdae_cfg)?;
    let structure = train_structure_embeddings(graph, &cfg.walk, sub_seed(cfg.seed, 2))?;
    train_with(graph, cfg, text.params, structure)
}

/// Alternates step (1) L-BFGS, step (2a) fine-tuning and Gibbs sweeps, starting
/// from pretrained representations. The last iteration stops after step (1),
/// so the returned embeddings are the optimised ones.
pub fn train_with(
    graph: &HeteroGraph,
    cfg: &TrainConfig,
    mut sdae: SdaeParams,
    structure: StructureTraining,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let half = cfg.k / 2;
    if sdae.code_dim() != half || structure.embedding.center.ncols() != half {
        return Err(Error::config(format!(
            "pretrained codes have {} and {} dimensions, expected {half}",
            sdae.code_dim(),
            structure.embedding.center.ncols()
        )));
    }
    if sdae.input_dim() != graph.vocab_size() || structure.embedding.center.nrows() != graph.num_papers() {
        return Err(Error::shape(
            "pretrained representations do not match the graph".to_string(),
        ));
    }
    let inputs = TextInputs::from_graph(graph);
    let StructureTraining {
        embedding: mut struct_emb,
        walks,
        ..
    } = structure;
    let rounds = cfg.walk.walks_per_node.max(1);
    let per_round = walks.len() / rounds;

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3));
    let text = text_autoencoder::embed_all(&sdae, &inputs);
    let mut params = FusionParams::new(concat_representations(&text, &struct_emb.center));
    let mut state = TopicState::init(graph, cfg.k, &mut rng)?;
    let mut stats = SufficientStats::recount(graph, &state);
    // seed assignments from the initial proportions so topic k follows coordinate k
    gibbs_sweep(graph, &params.theta(), &mut state, &mut stats, &mut rng);

    let mut trace = Vec::new();
    let mut initial = None;
    let mut previous: Option<f64> = None;
    for iter in 0..cfg.outer_iters {
        let pairs = PairSet::sample(graph, sub_seed(cfg.seed, 1000 + iter as u64))?;
        let objective = Objective::new(graph, &state, &stats, &pairs, cfg.weights, sdae.weight_norm_sq())?;
        let step = optimize_continuous(&objective, &mut params, &mut state, &cfg.lbfgs)?;

        let initial_total = *initial.get_or_insert(step.before.total);
        if step.line_search_failed {
            warn!("outer iteration {iter}: line search found no decrease");
        }
        info!(
            "outer iteration {iter}: loss {:.4} -> {:.4} (links {:.4}, topics {:.4}, reg {:.4}), kappa {:.6e}",
            step.before.total, step.after.total, step.after.links, step.after.topics, step.after.reg, params.kappa
        );
        let mut record = OuterStep {
            iter,
            before: step.before,
            after: step.after,
            kappa: params.kappa,
            lbfgs_iterations: step.iterations,
            line_search_failed: step.line_search_failed,
            residual: None,
        };
        if step.after.total > 10.0 * initial_total.abs() {
            trace.push(record);
            return Err(Error::Diverged(format!(
                "loss {} at outer iteration {iter} exceeds ten times the initial {initial_total}",
                step.after.total
            )));
        }
        let converged = previous
            .map(|prev| (prev - step.after.total).abs() <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE))
            .unwrap_or(false);
        previous = Some(step.after.total);
        if converged || iter + 1 == cfg.outer_iters {
            trace.push(record);
            if converged {
                info!("converged after {} outer iterations", iter + 1);
            }
            break;
        }

        // sweeps use the proportions from step (1), not the refreshed [t; s]
        let theta = params.theta();
        let round = &walks[(iter % rounds) * per_round..(iter % rounds + 1) * per_round];
        let residual =
            finetune_representation(&inputs, &mut sdae, &mut struct_emb, round, &mut params.v, cfg, &mut rng)?;
        info!("alignment residual {:.5} -> {:.5}", residual.0, residual.1);
        record.residual = Some(residual);

        gibbs_sweep(graph, &theta, &mut state, &mut stats, &mut rng);
        trace.push(record);
    }

    Ok(TrainedModel {
        params,
        topics: state,
        sdae,
        structure: struct_emb,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GraphParts;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn transform_examples() {
        let th = transform(array![1.0, 2.0].view(), 1.0);
        assert_abs_diff_eq!(th[0], 0.26894, epsilon = 1e-5);
        assert_abs_diff_eq!(th[1], 0.73106, epsilon = 1e-5);
        let flat = transform(array![3.0, -1.0, 7.0].view(), 0.0);
        assert!(flat.iter().all(|&x| x == 1.0 / 3.0));
        assert!(transform(array![0.0, 1.0].view(), 50.0)[1] >= 0.99);
    }

    #[test]
    fn link_prob_examples() {
        let b = array![1.0, 1.0];
        assert_eq!(
            link_prob(
                array![3.0, -2.0].view(),
                array![1.0, 5.0].view(),
                0.0,
                array![0.0, 0.0].view()
            ),
            0.5
        );
        assert_abs_diff_eq!(
            link_prob(array![1.0, 1.0].view(), array![1.0, 1.0].view(), 0.0, b.view()),
            0.88080,
            epsilon = 1e-5
        );
        let p = link_prob(
            array![1.0, 0.0].view(),
            array![0.0, 1.0].view(),
            0.3,
            array![9.0, -4.0].view(),
        );
        assert_eq!(p, sigmoid(0.3));
    }

    fn toy(seed: u64) -> (HeteroGraph, TopicState, SufficientStats, FusionParams, PairSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let graph = HeteroGraph::from_parts(GraphParts {
            paper_ids: (0..n).map(|i| format!("p{i}")).collect(),
            years: vec![2000; n],
            dataset_ids: vec!["d0".into(), "d1".into(), "d2".into()],
            citations: vec![(0, 1), (1, 2), (3, 4), (4, 0)],
            paper_datasets: vec![vec![0], vec![1, 2], vec![], vec![0, 2], vec![1]],
            tokens: (0..n)
                .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..10)).collect())
                .collect(),
            vocab_size: 10,
        })
        .unwrap();
        let k = 3;
        let mut state = TopicState::init(&graph, k, &mut rng).unwrap();
        state.psi_w = Array2::from_shape_fn((k, 10), |_| rng.gen_range(-1.0..1.0));
        state.psi_d = Array2::from_shape_fn((k, 3), |_| rng.gen_range(-1.0..1.0));
        let stats = SufficientStats::recount(&graph, &state);
        let params = FusionParams {
            v: Array2::from_shape_fn((n, k), |_| rng.gen_range(-1.0..1.0)),
            kappa: rng.gen_range(0.5..2.0),
            beta0: rng.gen_range(-0.5..0.5),
            beta1: Array1::from_shape_fn(k, |_| rng.gen_range(-1.0..1.0)),
        };
        let pairs = PairSet {
            positive: graph.citations().to_vec(),
            negative: vec![(0, 2), (2, 4), (3, 1)],
        };
        (graph, state, stats, params, pairs)
    }

    #[test]
    fn zero_weights_leave_log_two_per_pair() {
        let (graph, state, stats, mut params, pairs) = toy(3);
        params.beta0 = 0.0;
        params.beta1.fill(0.0);
        let w = LossWeights {
            lambda: 0.0,
            lambda_p: 0.0,
            lambda_d: 0.0,
            lambda_v: 0.0,
            lambda_w: 0.0,
        };
        let l = total_loss(&graph, &params, &state, &stats, &pairs, w, 5.0).unwrap();
        assert_abs_diff_eq!(l.total, pairs.len() as f64 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn topic_block_matches_joint_likelihood_and_scales_with_lambda() {
        let (graph, state, stats, params, pairs) = toy(5);
        let w = LossWeights::default();
        let l = total_loss(&graph, &params, &state, &stats, &pairs, w, 0.0).unwrap();
        let ll = crate::topic_model::joint_log_likelihood(
            &graph,
            params.theta().view(),
            word_topic_dist(&state.psi_w).view(),
            dataset_topic_dist(&state.psi_d).view(),
            &state,
        )
        .unwrap();
        assert_abs_diff_eq!(l.topics, -w.lambda * ll, epsilon = 1e-9);
        let doubled = LossWeights {
            lambda: 2.0 * w.lambda,
            ..w
        };
        let l2 = total_loss(&graph, &params, &state, &stats, &pairs, doubled, 0.0).unwrap();
        assert_abs_diff_eq!(l2.topics, 2.0 * l.topics, epsilon = 1e-9);
        assert_eq!((l2.links, l2.reg), (l.links, l.reg));
    }

    #[test]
    fn balanced_counts_zero_the_topic_gradient() {
        // one paper, two tokens, theta = [0.5, 0.5] with one token per topic
        let graph = HeteroGraph::from_parts(GraphParts {
            paper_ids: vec!["a".into()],
            years: vec![2000],
            dataset_ids: vec![],
            citations: vec![],
            paper_datasets: vec![vec![]],
            tokens: vec![vec![0, 1]],
            vocab_size: 2,
        })
        .unwrap();
        let state = TopicState {
            psi_w: Array2::zeros((2, 2)),
            psi_d: Array2::zeros((2, 0)),
            z_w: vec![vec![0, 1]],
            z_d: vec![vec![]],
        };
        let stats = SufficientStats::recount(&graph, &state);
        let params = FusionParams::new(array![[0.4, 0.4]]);
        let w = LossWeights {
            lambda_p: 0.0,
            ..LossWeights::default()
        };
        let g = grad_continuous(&graph, &params, &state, &stats, &PairSet::default(), w, 0.0).unwrap();
        assert!(g.v.iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in 0..4 {
            let (graph, state, stats, params, pairs) = toy(seed);
            let w = LossWeights::default();
            let objective = Objective::new(&graph, &state, &stats, &pairs, w, 0.0).unwrap();
            let (_, g) = objective
                .loss_and_gradient(&params, &state.psi_w, &state.psi_d)
                .unwrap();
            let h = 1e-5;
            let f = |p: &FusionParams| objective.loss(p, &state.psi_w, &state.psi_d).unwrap().total;
            let check = |analytic: f64, numeric: f64| {
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-6, "seed {seed}: {analytic} vs {numeric}");
            };
            for idx in 0..params.v.len() {
                let (r, c) = (idx / 3, idx % 3);
                let (mut up, mut down) = (params.clone(), params.clone());
                up.v[[r, c]] += h;
                down.v[[r, c]] -= h;
                check(g.v[[r, c]], (f(&up) - f(&down)) / (2.0 * h));
            }
            let (mut up, mut down) = (params.clone(), params.clone());
            up.kappa += h;
            down.kappa -= h;
            check(g.kappa, (f(&up) - f(&down)) / (2.0 * h));
            let (mut up, mut down) = (params.clone(), params.clone());
            up.beta0 += h;
            down.beta0 -= h;
            check(g.beta0, (f(&up) - f(&down)) / (2.0 * h));
            for t in 0..3 {
                let (mut up, mut down) = (params.clone(), params.clone());
                up.beta1[t] += h;
                down.beta1[t] -= h;
                check(g.beta1[t], (f(&up) - f(&down)) / (2.0 * h));
            }
            for (idx, &ga) in g.psi_d.indexed_iter() {
                let (mut up, mut down) = (state.psi_d.clone(), state.psi_d.clone());
                up[idx] += h;
                down[idx] -= h;
                let num = (objective.loss(&params, &state.psi_w, &up).unwrap().total
                    - objective.loss(&params, &state.psi_w, &down).unwrap().total)
                    / (2.0 * h);
                check(ga, num);
            }
        }
    }

    #[test]
    fn packing_round_trips() {
        let (_, state, _, params, _) = toy(2);
        let packing = Packing {
            n: 5,
            k: 3,
            words: 10,
            datasets: 3,
        };
        let x = packing.pack(&params, &state.psi_w, &state.psi_d);
        assert_eq!(x.len(), packing.len());
        let (p, pw, pd) = packing.unpack(&x);
        assert_abs_diff_eq!(p.kappa, params.kappa, epsilon = 1e-12);
        assert_eq!(
            (p.v, p.beta1, pw, pd),
            (params.v, params.beta1, state.psi_w, state.psi_d)
        );
    }

    #[test]
    fn step_one_never_increases_the_loss() {
        for seed in 0..3 {
            let (graph, mut state, stats, mut params, pairs) = toy(seed);
            let z = (state.z_w.clone(), state.z_d.clone());
            let objective = Objective::new(&graph, &state, &stats, &pairs, LossWeights::default(), 0.0).unwrap();
            let step = optimize_continuous(&objective, &mut params, &mut state, &LbfgsConfig::default()).unwrap();
            assert!(step.after.total <= step.before.total);
            assert!(params.kappa > 0.0);
            assert_eq!((state.z_w, state.z_d), z);
        }
    }

    #[test]
    fn mismatched_assignments_are_rejected() {
        let (graph, mut state, stats, params, pairs) = toy(1);
        state.z_w[0].push(0);
        assert!(total_loss(&graph, &params, &state, &stats, &pairs, LossWeights::default(), 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::new(16).unwrap();
        assert_eq!(cfg.weights, LossWeights::default());
        assert_eq!(
            (cfg.weights.lambda, cfg.weights.lambda_p, cfg.weights.lambda_d),
            (0.5, 0.1, 0.01)
        );
        assert_eq!(
            (cfg.weights.lambda_v, cfg.weights.lambda_w, cfg.outer_iters),
            (0.1, 0.01, 150)
        );
        cfg.validate().unwrap();
        assert!(TrainConfig::new(7).is_err());
        let bad = TrainConfig {
            weights: LossWeights {
                lambda: -1.0,
                ..LossWeights::default()
            },
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    fn small_setup(seed: u64) -> (HeteroGraph, TrainConfig) {
        let mut planted = crate::corpus::PlantedConfig::new(2, 40, 6, 60, seed);
        planted.tokens_per_paper = (10, 20);
        let corpus = crate::corpus::generate_planted_corpus(&planted).unwrap();
        let graph = corpus.train_graph().unwrap();
        let mut cfg = TrainConfig::new(4).unwrap();
        cfg.seed = seed;
        cfg.outer_iters = 6;
        cfg.tol = 0.0;
        cfg.sdae.layer_widths = vec![8, 2];
        cfg.sdae.epochs = 3;
        cfg.walk.walks_per_node = 2;
        cfg.walk.walk_length = 10;
        (graph, cfg)
    }

    #[test]
    fn training_descends_and_is_deterministic() {
        let (graph, cfg) = small_setup(3);
        let a = train(&graph, &cfg).unwrap();
        assert_eq!(a.trace.len(), cfg.outer_iters);
        for step in &a.trace {
            assert!(step.after.total <= step.before.total, "{step:?}");
        }
        assert!(a.trace.last().unwrap().after.total < a.trace[0].before.total);
        assert!(a.trace.last().unwrap().residual.is_none());
        let b = train(&graph, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.topics, b.topics);
        assert_eq!(a.sdae, b.sdae);
        let mut csv = Vec::new();
        write_trace_csv(&a.trace, &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("outer_iter,loss_total,loss_links,loss_topics,loss_reg,kappa\n"));
        assert_eq!(csv.lines().count(), cfg.outer_iters + 1);
    }

    fn finetune_setup(mu: f64) -> (TextInputs, SdaeParams, StructEmbedding, Vec<Vec<usize>>, TrainConfig) {
        let (graph, mut cfg) = small_setup(5);
        cfg.mu = mu;
        let inputs = TextInputs::from_graph(&graph);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sdae = text_autoencoder::pretrain_inputs(&inputs, &cfg.sdae).unwrap().params;
        // a single linear layer keeps the alignment a ridge-like problem
        sdae.encoders.truncate(1);
        sdae.decoders.truncate(1);
        sdae.encoders[0] = text_autoencoder::DenseLayer::glorot(graph.vocab_size(), 2, &mut rng);
        sdae.decoders[0] = text_autoencoder::DenseLayer::glorot(2, graph.vocab_size(), &mut rng);
        sdae.leaky_slope = 1.0;
        sdae.corruption_rate = 0.0;
        let structure = train_structure_embeddings(&graph, &cfg.walk, 2).unwrap();
        (inputs, sdae, structure.embedding, structure.walks, cfg)
    }

    #[test]
    fn zero_mu_resets_v_to_representations() {
        let (inputs, mut sdae, mut st, walks, cfg) = finetune_setup(0.0);
        let mut v = Array2::from_elem((inputs.len(), 4), 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        finetune_representation(&inputs, &mut sdae, &mut st, &walks, &mut v, &cfg, &mut rng).unwrap();
        let expect = concat_representations(&text_autoencoder::embed_all(&sdae, &inputs), &st.center);
        assert_eq!(v, expect);
    }

    #[test]
    fn large_mu_pulls_representations_onto_v() {
        let (inputs, mut sdae, mut st, walks, mut cfg) = finetune_setup(1e6);
        cfg.lr = 0.05;
        cfg.batch_size = inputs.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let target = Array2::from_shape_fn((inputs.len(), 4), |(p, c)| ((p * 7 + c * 3) % 5) as f64 * 0.1);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let mut v = target.clone();
            let (before, after) =
                finetune_representation(&inputs, &mut sdae, &mut st, &walks, &mut v, &cfg, &mut rng).unwrap();
            first.get_or_insert(before);
            last = after;
        }
        assert!(last * 10.0 <= first.unwrap(), "{} -> {last}", first.unwrap());
    }

    #[test]
    fn finetuning_is_deterministic() {
        let run = || {
            let (inputs, mut sdae, mut st, walks, cfg) = finetune_setup(1.0);
            let mut v = Array2::from_elem((inputs.len(), 4), 0.5);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            finetune_representation(&inputs, &mut sdae, &mut st, &walks, &mut v, &cfg, &mut rng).unwrap();
            (sdae, st, v)
        };
        assert_eq!(run(), run());
    }
}
