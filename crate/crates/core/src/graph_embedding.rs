//! Structure embeddings from the citation graph: node2vec-style walks over
//! the symmetrised citation edges and skip-gram training with negative
//! sampling.

use log::{info, warn};
use ndarray::{Array2, ArrayView2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::HeteroGraph;
use crate::linalg::{log_sigmoid, sigmoid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WalkConfig {
    pub dim: usize,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub window: usize,
    /// node2vec return parameter `p`.
    pub return_p: f64,
    /// node2vec in-out parameter `q`.
    pub inout_q: f64,
    pub num_negatives: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Follow citation direction, falling back to incoming edges only at
    /// papers that cite nothing. Off by default: walks use undirected edges.
    pub directed: bool,
}

impl WalkConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            walk_length: 80,
            walks_per_node: 10,
            window: 5,
            return_p: 1.0,
            inout_q: 1.0,
            num_negatives: 5,
            lr: 0.025,
            epochs: 1,
            directed: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.walk_length < 2 {
            return Err(Error::config("walk length must be at least 2"));
        }
        if self.dim == 0 || self.window == 0 || self.epochs == 0 {
            return Err(Error::config("dimension, window and epochs must be positive"));
        }
        if !(self.return_p > 0.0 && self.inout_q > 0.0) {
            return Err(Error::config("node2vec p and q must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructEmbedding {
    /// Papers x dim; the structure embedding `s_p` is row `p`.
    pub center: Array2<f64>,
    /// Papers x dim output vectors used only during training.
    pub context: Array2<f64>,
    /// Negative-sampling distribution over papers.
    pub negative_dist: Vec<f64>,
}

impl StructEmbedding {
    pub fn init<R: Rng>(graph: &HeteroGraph, dim: usize, rng: &mut R) -> Self {
        let n = graph.num_papers();
        let half = 0.5 / dim as f64;
        Self {
            center: Array2::from_shape_fn((n, dim), |_| rng.gen_range(-half..half)),
            context: Array2::zeros((n, dim)),
            negative_dist: negative_sampling_distribution(graph),
        }
    }

    fn sampler(&self) -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(&self.negative_dist)
            .map_err(|e| Error::InvalidGraph(format!("negative-sampling distribution: {e}")))
    }

    /// `log σ(s_c·u_o) + Σ_x log σ(-s_c·u_x)` for one positive pair.
    pub fn pair_objective(&self, center: usize, context: usize, negatives: &[usize]) -> f64 {
        let s = self.center.row(center);
        let mut obj = log_sigmoid(s.dot(&self.context.row(context)));
        for &x in negatives {
            obj += log_sigmoid(-s.dot(&self.context.row(x)));
        }
        obj
    }

    /// One stochastic ascent step on [`pair_objective`](Self::pair_objective).
    pub fn sgd_pair(&mut self, center: usize, context: usize, negatives: &[usize], lr: f64) {
        let dim = self.center.ncols();
        let mut center_grad = vec![0.0; dim];
        let s = self.center.row(center).to_owned();
        let mut update = |target: usize, label: f64, ctx: &mut Array2<f64>| {
            let mut u = ctx.row_mut(target);
            let g = lr * (label - sigmoid(s.dot(&u)));
            for (acc, &ui) in center_grad.iter_mut().zip(u.iter()) {
                *acc += g * ui;
            }
            u.scaled_add(g, &s);
        };
        update(context, 1.0, &mut self.context);
        for &x in negatives {
            if x != context {
                update(x, 0.0, &mut self.context);
            }
        }
        for (c, g) in self.center.row_mut(center).iter_mut().zip(center_grad) {
            *c += g;
        }
    }
}

/// `F(p) ∝ max(d_p, 1)^{3/4}` with `d_p` the citation out-degree. Papers
/// that cite nothing get the floor weight of a single citation.
pub fn negative_sampling_distribution(graph: &HeteroGraph) -> Vec<f64> {
    let weights: Vec<f64> = (0..graph.num_papers())
        .map(|p| (graph.out_degree(p).max(1) as f64).powf(0.75))
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Softmax likelihood that `j` neighbours `i`: `exp(s_j·s_i) / Σ_z exp(s_i·s_z)`.
pub fn neighbor_likelihood(i: usize, j: usize, s: ArrayView2<f64>) -> f64 {
    let si = s.row(i);
    let logits: Vec<f64> = s.rows().into_iter().map(|sz| si.dot(&sz)).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    (logits[j] - max).exp() / total
}

fn fnv1a(seed: u64, round: usize, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    seed.to_le_bytes().into_iter().for_each(&mut eat);
    (round as u64).to_le_bytes().into_iter().for_each(&mut eat);
    id.bytes().for_each(&mut eat);
    h
}

/// Walks `walks_per_node` times from every paper with node2vec second-order
/// biases over the symmetrised citation edges (or, with `directed`, over
/// outgoing citations with a fallback to incoming ones at sinks). Walks stop
/// early only at papers with no citations at all.
///
/// Random choices depend on external paper ids rather than dense indices,
/// so reordering the papers of a graph permutes the walks and nothing more.
pub fn generate_walks(graph: &HeteroGraph, cfg: &WalkConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    cfg.validate()?;
    let ids = graph.paper_ids();
    let by_id: Vec<Vec<usize>> = (0..graph.num_papers())
        .map(|p| {
            let mut n = if cfg.directed && graph.out_degree(p) > 0 {
                graph.out_neighbors(p).to_vec()
            } else {
                graph.neighbors(p).to_vec()
            };
            n.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
            n
        })
        .collect();
    let uniform = cfg.return_p == 1.0 && cfg.inout_q == 1.0;

    let mut walks = Vec::with_capacity(graph.num_papers() * cfg.walks_per_node);
    let mut weights = Vec::new();
    for round in 0..cfg.walks_per_node {
        for (start, id) in ids.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, round, id));
            let mut walk = Vec::with_capacity(cfg.walk_length);
            walk.push(start);
            while walk.len() < cfg.walk_length {
                let cur = *walk.last().unwrap();
                let nbrs = &by_id[cur];
                if nbrs.is_empty() {
                    break;
                }
                let next = match walk.len() {
                    1 => nbrs[rng.gen_range(0..nbrs.len())],
                    _ if uniform => nbrs[rng.gen_range(0..nbrs.len())],
                    len => {
                        let prev = walk[len - 2];
                        weights.clear();
                        weights.extend(nbrs.iter().map(|&x| {
                            if x == prev {
                                1.0 / cfg.return_p
                            } else if graph.neighbors(prev).binary_search(&x).is_ok() {
                                1.0
                            } else {
                                1.0 / cfg.inout_q
                            }
                        }));
                        nbrs[crate::topic_model::sample_index(&weights, &mut rng)]
                    }
                };
                walk.push(next);
            }
            walks.push(walk);
        }
    }
    Ok(walks)
}

/// (center, context) pairs within `window` positions of each other.
fn walk_pairs(walk: &[usize], window: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..walk.len()).flat_map(move |i| {
        let lo = i.saturating_sub(window);
        let hi = (i + window + 1).min(walk.len());
        (lo..hi).filter(move |&j| j != i).map(move |j| (walk[i], walk[j]))
    })
}

fn count_pairs(walks: &[Vec<usize>], window: usize) -> usize {
    walks.iter().map(|w| walk_pairs(w, window).count()).sum()
}

#[derive(Debug, Clone)]
pub struct StructureTraining {
    pub embedding: StructEmbedding,
    pub walks: Vec<Vec<usize>>,
    /// Mean pair objective on a fixed probe set: before training, then after each epoch.
    pub objective_trace: Vec<f64>,
}

/// Fixed pairs and negatives used to track the objective across epochs.
struct Probe {
    pairs: Vec<(usize, usize, Vec<usize>)>,
}

impl Probe {
    fn new(walks: &[Vec<usize>], cfg: &WalkConfig, sampler: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> Self {
        let all: Vec<(usize, usize)> = walks.iter().flat_map(|w| walk_pairs(w, cfg.window)).collect();
        let take = all.len().min(2000);
        let pairs = (0..take)
            .map(|_| {
                let (c, o) = all[rng.gen_range(0..all.len())];
                let negs = (0..cfg.num_negatives).map(|_| sampler.sample(rng)).collect();
                (c, o, negs)
            })
            .collect();
        Self { pairs }
    }

    fn mean(&self, emb: &StructEmbedding) -> f64 {
        let total: f64 = self.pairs.iter().map(|(c, o, n)| emb.pair_objective(*c, *o, n)).sum();
        total / self.pairs.len().max(1) as f64
    }
}

/// Runs skip-gram with negative sampling over `walks`, with the learning rate
/// decaying linearly from `lr` over the whole run.
pub fn train_structure_embeddings(graph: &HeteroGraph, cfg: &WalkConfig, seed: u64) -> Result<StructureTraining> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut embedding = StructEmbedding::init(graph, cfg.dim, &mut rng);
    let walks = generate_walks(graph, cfg, seed)?;
    let total_pairs = count_pairs(&walks, cfg.window) * cfg.epochs;
    if graph.num_papers() < 2 || total_pairs == 0 {
        warn!("citation graph has no walkable edges; structure embeddings left at initialisation");
        return Ok(StructureTraining {
            embedding,
            walks,
            objective_trace: Vec::new(),
        });
    }
    let sampler = embedding.sampler()?;
    let probe = Probe::new(&walks, cfg, &sampler, &mut rng);
    let mut trace = vec![probe.mean(&embedding)];

    let mut done = 0usize;
    let mut negatives = Vec::with_capacity(cfg.num_negatives);
    for epoch in 0..cfg.epochs {
        for walk in &walks {
            for (c, o) in walk_pairs(walk, cfg.window) {
                let lr = cfg.lr * (1.0 - done as f64 / total_pairs as f64).max(1e-4);
                negatives.clear();
                negatives.extend((0..cfg.num_negatives).map(|_| sampler.sample(&mut rng)));
                embedding.sgd_pair(c, o, &negatives, lr);
                done += 1;
            }
        }
        let obj = probe.mean(&embedding);
        if !obj.is_finite() {
            return Err(Error::NonFinite(format!("structure objective at epoch {epoch}")));
        }
        info!("structure embedding epoch {epoch}: mean pair objective {obj:.5}");
        trace.push(obj);
    }
    Ok(StructureTraining {
        embedding,
        walks,
        objective_trace: trace,
    })
}

/// One pass of skip-gram updates over `walks` at a fixed rate, followed by a
/// proximal step pulling each `s_p` toward `targets[p]` with weight `mu`.
/// Returns the summed pair objective seen before each update.
#[allow(clippy::too_many_arguments)]
pub(crate) fn finetune_epoch(
    emb: &mut StructEmbedding,
    walks: &[Vec<usize>],
    window: usize,
    num_negatives: usize,
    targets: ArrayView2<f64>,
    mu: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let sampler = emb.sampler()?;
    let mut negatives = Vec::with_capacity(num_negatives);
    let mut objective = 0.0;
    for walk in walks {
        for (c, o) in walk_pairs(walk, window) {
            negatives.clear();
            negatives.extend((0..num_negatives).map(|_| sampler.sample(rng)));
            objective += emb.pair_objective(c, o, &negatives);
            emb.sgd_pair(c, o, &negatives, lr);
        }
    }
    let eta = 2.0 * lr * mu;
    if eta > 0.0 {
        for (mut s, v) in emb.center.rows_mut().into_iter().zip(targets.rows()) {
            s.zip_mut_with(&v, |si, &vi| *si = (*si + eta * vi) / (1.0 + eta));
        }
    }
    if !objective.is_finite() || !emb.center.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("structure fine-tuning".into()));
    }
    Ok(objective)
}
