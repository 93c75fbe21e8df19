//! Shared topic space over words and datasets.
//!
//! Topics are parameterised by unconstrained natural parameters `psi_w`
//! (topics x words) and `psi_d` (topics x datasets); the per-topic
//! distributions are their row-wise softmaxes. Every token and every dataset
//! usage carries a topic assignment, resampled by Gibbs sweeps.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::corpus::HeteroGraph;
use crate::linalg::row_softmax;
use crate::{Error, Result};

/// Natural parameters and topic assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicState {
    pub psi_w: Array2<f64>,
    pub psi_d: Array2<f64>,
    /// Topic of each token, per paper.
    pub z_w: Vec<Vec<u16>>,
    /// Topic of each dataset usage, per paper.
    pub z_d: Vec<Vec<u16>>,
}

impl TopicState {
    /// Zero natural parameters (uniform topics) and uniformly random assignments.
    pub fn init<R: Rng>(graph: &HeteroGraph, n_topics: usize, rng: &mut R) -> Result<Self> {
        if n_topics == 0 || n_topics > u16::MAX as usize {
            return Err(Error::config(format!("topic count {n_topics} outside 1..=65535")));
        }
        let k = n_topics as u16;
        let z_w = (0..graph.num_papers())
            .map(|p| graph.tokens_of(p).iter().map(|_| rng.gen_range(0..k)).collect())
            .collect();
        let z_d = (0..graph.num_papers())
            .map(|p| graph.datasets_of(p).iter().map(|_| rng.gen_range(0..k)).collect())
            .collect();
        Ok(Self {
            psi_w: Array2::zeros((n_topics, graph.vocab_size())),
            psi_d: Array2::zeros((n_topics, graph.num_datasets())),
            z_w,
            z_d,
        })
    }

    pub fn num_topics(&self) -> usize {
        self.psi_w.nrows()
    }

    /// Checks assignment shapes and ranges against `graph`.
    pub fn validate(&self, graph: &HeteroGraph) -> Result<()> {
        let k = self.num_topics();
        if self.psi_d.nrows() != k
            || self.psi_w.ncols() != graph.vocab_size()
            || self.psi_d.ncols() != graph.num_datasets()
        {
            return Err(Error::shape(format!(
                "psi_w {:?} / psi_d {:?} do not match {} topics, {} words, {} datasets",
                self.psi_w.dim(),
                self.psi_d.dim(),
                k,
                graph.vocab_size(),
                graph.num_datasets()
            )));
        }
        if self.z_w.len() != graph.num_papers() || self.z_d.len() != graph.num_papers() {
            return Err(Error::shape("assignment arrays do not cover every paper"));
        }
        for p in 0..graph.num_papers() {
            if self.z_w[p].len() != graph.tokens_of(p).len() || self.z_d[p].len() != graph.datasets_of(p).len() {
                return Err(Error::shape(format!(
                    "assignments of paper {p} do not match its counts"
                )));
            }
            if self.z_w[p].iter().chain(&self.z_d[p]).any(|&z| z as usize >= k) {
                return Err(Error::shape(format!("paper {p} has a topic id >= {k}")));
            }
        }
        if !self.psi_w.iter().chain(self.psi_d.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("topic natural parameters".into()));
        }
        Ok(())
    }
}

/// Count tables derived from the assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SufficientStats {
    /// topic x word token counts
    pub n_kj: Array2<u32>,
    /// topic x dataset usage counts
    pub n_ki: Array2<u32>,
    /// paper x topic token counts
    pub n_pk: Array2<u32>,
    /// paper x topic dataset-usage counts
    pub d_pk: Array2<u32>,
    /// tokens assigned to each topic
    pub tokens_per_topic: Array1<u32>,
    /// dataset usages assigned to each topic
    pub datasets_per_topic: Array1<u32>,
}

impl SufficientStats {
    pub fn recount(graph: &HeteroGraph, state: &TopicState) -> Self {
        let k = state.num_topics();
        let mut s = Self {
            n_kj: Array2::zeros((k, graph.vocab_size())),
            n_ki: Array2::zeros((k, graph.num_datasets())),
            n_pk: Array2::zeros((graph.num_papers(), k)),
            d_pk: Array2::zeros((graph.num_papers(), k)),
            tokens_per_topic: Array1::zeros(k),
            datasets_per_topic: Array1::zeros(k),
        };
        for p in 0..graph.num_papers() {
            for (&w, &z) in graph.tokens_of(p).iter().zip(&state.z_w[p]) {
                s.add_word(p, w as usize, z as usize);
            }
            for (&d, &z) in graph.datasets_of(p).iter().zip(&state.z_d[p]) {
                s.add_dataset(p, d, z as usize);
            }
        }
        s
    }

    fn add_word(&mut self, p: usize, w: usize, z: usize) {
        self.n_kj[[z, w]] += 1;
        self.n_pk[[p, z]] += 1;
        self.tokens_per_topic[z] += 1;
    }

    fn remove_word(&mut self, p: usize, w: usize, z: usize) {
        self.n_kj[[z, w]] -= 1;
        self.n_pk[[p, z]] -= 1;
        self.tokens_per_topic[z] -= 1;
    }

    fn add_dataset(&mut self, p: usize, d: usize, z: usize) {
        self.n_ki[[z, d]] += 1;
        self.d_pk[[p, z]] += 1;
        self.datasets_per_topic[z] += 1;
    }

    fn remove_dataset(&mut self, p: usize, d: usize, z: usize) {
        self.n_ki[[z, d]] -= 1;
        self.d_pk[[p, z]] -= 1;
        self.datasets_per_topic[z] -= 1;
    }
}

/// Per-topic word distributions, `softmax(psi_w)` row by row.
pub fn word_topic_dist(psi_w: &Array2<f64>) -> Array2<f64> {
    row_softmax(psi_w)
}

/// Per-topic dataset distributions, `softmax(psi_d)` row by row.
pub fn dataset_topic_dist(psi_d: &Array2<f64>) -> Array2<f64> {
    row_softmax(psi_d)
}

/// Log of the joint probability of all tokens and dataset usages given topic
/// proportions `theta` (papers x topics), the topic distributions and the
/// assignments. Accumulated term by term in log space.
pub fn joint_log_likelihood(
    graph: &HeteroGraph,
    theta: ArrayView2<f64>,
    phi_w: ArrayView2<f64>,
    phi_d: ArrayView2<f64>,
    state: &TopicState,
) -> Result<f64> {
    let mut total = 0.0;
    let term = |prob: f64, what: &str, p: usize| -> Result<f64> {
        if prob > 0.0 {
            Ok(prob.ln())
        } else {
            Err(Error::NonFinite(format!("zero probability for {what} of paper {p}")))
        }
    };
    for p in 0..graph.num_papers() {
        for (&w, &z) in graph.tokens_of(p).iter().zip(&state.z_w[p]) {
            let z = z as usize;
            total += term(theta[[p, z]] * phi_w[[z, w as usize]], "a token", p)?;
        }
        for (&d, &z) in graph.datasets_of(p).iter().zip(&state.z_d[p]) {
            let z = z as usize;
            total += term(theta[[p, z]] * phi_d[[z, d]], "a dataset usage", p)?;
        }
    }
    Ok(total)
}

/// Draws an index with probability proportional to `weights`.
pub(crate) fn sample_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // rounding pushed u past the last partial sum
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Resamples every token's topic from `p(z = k) ∝ theta[p, k] * phi_w[k, w]`.
pub fn gibbs_sweep_words<R: Rng>(
    graph: &HeteroGraph,
    theta: ArrayView2<f64>,
    phi_w: ArrayView2<f64>,
    state: &mut TopicState,
    stats: &mut SufficientStats,
    rng: &mut R,
) {
    let k = state.num_topics();
    let mut weights = vec![0.0; k];
    for p in 0..graph.num_papers() {
        for (j, &w) in graph.tokens_of(p).iter().enumerate() {
            let w = w as usize;
            let old = state.z_w[p][j] as usize;
            stats.remove_word(p, w, old);
            for (t, wt) in weights.iter_mut().enumerate() {
                *wt = theta[[p, t]] * phi_w[[t, w]];
            }
            let new = sample_index(&weights, rng);
            state.z_w[p][j] = new as u16;
            stats.add_word(p, w, new);
        }
    }
}

/// Resamples every dataset usage's topic from `p(z = k) ∝ theta[p, k] * phi_d[k, d]`.
pub fn gibbs_sweep_datasets<R: Rng>(
    graph: &HeteroGraph,
    theta: ArrayView2<f64>,
    phi_d: ArrayView2<f64>,
    state: &mut TopicState,
    stats: &mut SufficientStats,
    rng: &mut R,
) {
    let k = state.num_topics();
    let mut weights = vec![0.0; k];
    for p in 0..graph.num_papers() {
        for (i, &d) in graph.datasets_of(p).iter().enumerate() {
            let old = state.z_d[p][i] as usize;
            stats.remove_dataset(p, d, old);
            for (t, wt) in weights.iter_mut().enumerate() {
                *wt = theta[[p, t]] * phi_d[[t, d]];
            }
            let new = sample_index(&weights, rng);
            state.z_d[p][i] = new as u16;
            stats.add_dataset(p, d, new);
        }
    }
}

fn grad_natural(
    counts: &Array2<u32>,
    per_topic: &Array1<u32>,
    phi: &Array2<f64>,
    psi: &Array2<f64>,
    lambda: f64,
    reg: f64,
) -> Array2<f64> {
    let mut g = Array2::zeros(psi.raw_dim());
    for ((k, j), out) in g.indexed_iter_mut() {
        let expected = per_topic[k] as f64 * phi[[k, j]];
        *out = -lambda * (counts[[k, j]] as f64 - expected) + 2.0 * reg * psi[[k, j]];
    }
    g
}

/// Gradient of the loss with respect to `psi_w`: the topic term weighted by
/// `lambda` plus the `lambda_v` ridge penalty.
pub fn grad_psi_w(
    stats: &SufficientStats,
    phi_w: &Array2<f64>,
    psi_w: &Array2<f64>,
    lambda: f64,
    lambda_v: f64,
) -> Array2<f64> {
    grad_natural(&stats.n_kj, &stats.tokens_per_topic, phi_w, psi_w, lambda, lambda_v)
}

/// Gradient of the loss with respect to `psi_d`; see [`grad_psi_w`].
pub fn grad_psi_d(
    stats: &SufficientStats,
    phi_d: &Array2<f64>,
    psi_d: &Array2<f64>,
    lambda: f64,
    lambda_d: f64,
) -> Array2<f64> {
    grad_natural(&stats.n_ki, &stats.datasets_per_topic, phi_d, psi_d, lambda, lambda_d)
}

/// Negative log-likelihood of the assignments under `phi`, from the count
/// tables: `-Σ_k Σ_j n_kj log phi_kj`.
pub(crate) fn assignment_nll(counts: &Array2<u32>, psi: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (row, counts) in psi.rows().into_iter().zip(counts.rows()) {
        let lse = crate::linalg::log_sum_exp_scaled(row, 1.0);
        for (&x, &c) in row.iter().zip(counts.iter()) {
            if c > 0 {
                total -= c as f64 * (x - lse);
            }
        }
    }
    total
}
