//! Query scoring, topic explanations, link-frequency baselines and ranking
//! metrics.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::Write;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::corpus::{HeteroGraph, QuerySet};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, TrainedModel};
use crate::graph_embedding::StructEmbedding;
use crate::text_autoencoder::SdaeParams;
use crate::topic_model::{dataset_topic_dist, word_topic_dist, TopicState};

/// A trained recommender together with the id tables needed to answer
/// queries by external id.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: FusionParams,
    pub topics: TopicState,
    pub sdae: SdaeParams,
    pub structure: StructEmbedding,
    pub paper_ids: Vec<String>,
    pub dataset_ids: Vec<String>,
    pub words: Vec<String>,
    /// Training configuration as recorded at save time.
    pub config: serde_json::Value,
    paper_index: HashMap<String, usize>,
    dataset_index: HashMap<String, usize>,
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: FusionParams,
        topics: TopicState,
        sdae: SdaeParams,
        structure: StructEmbedding,
        paper_ids: Vec<String>,
        dataset_ids: Vec<String>,
        words: Vec<String>,
        config: serde_json::Value,
    ) -> Result<Self> {
        let k = params.num_topics();
        params.validate(paper_ids.len())?;
        if topics.num_topics() != k
            || topics.psi_w.dim() != (k, words.len())
            || topics.psi_d.dim() != (k, dataset_ids.len())
        {
            return Err(Error::shape(format!(
                "topic parameters {:?} / {:?} do not match {k} topics, {} words, {} datasets",
                topics.psi_w.dim(),
                topics.psi_d.dim(),
                words.len(),
                dataset_ids.len()
            )));
        }
        if structure.center.nrows() != paper_ids.len() || sdae.input_dim() != words.len() {
            return Err(Error::shape(
                "representation learners do not match the id tables".to_string(),
            ));
        }
        let index = |ids: &[String], what: &str| -> Result<HashMap<String, usize>> {
            let map: HashMap<_, _> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
            if map.len() != ids.len() {
                return Err(Error::Bundle(format!("duplicate {what} ids")));
            }
            Ok(map)
        };
        let paper_index = index(&paper_ids, "paper")?;
        let dataset_index = index(&dataset_ids, "dataset")?;
        Ok(Self {
            params,
            topics,
            sdae,
            structure,
            paper_ids,
            dataset_ids,
            words,
            config,
            paper_index,
            dataset_index,
        })
    }

    /// Wraps a training result with the id tables of the graph it was trained on.
    pub fn from_training(
        graph: &HeteroGraph,
        words: Vec<String>,
        trained: TrainedModel,
        config: serde_json::Value,
    ) -> Result<Self> {
        Self::new(
            trained.params,
            trained.topics,
            trained.sdae,
            trained.structure,
            graph.paper_ids().to_vec(),
            graph.dataset_ids().to_vec(),
            words,
            config,
        )
    }

    pub fn num_topics(&self) -> usize {
        self.params.num_topics()
    }

    pub fn num_datasets(&self) -> usize {
        self.dataset_ids.len()
    }

    pub fn paper_index(&self, id: &str) -> Option<usize> {
        self.paper_index.get(id).copied()
    }

    pub fn dataset_index(&self, id: &str) -> Option<usize> {
        self.dataset_index.get(id).copied()
    }

    fn resolve<S: AsRef<str>>(&self, papers: &[S]) -> Result<Vec<usize>> {
        resolve_query(papers, |id| self.paper_index(id))
    }

    /// Mean over query papers of `v_p . psi_d[:, d]` for every dataset.
    pub fn score_query<S: AsRef<str>>(&self, papers: &[S]) -> Result<Array1<f64>> {
        let idx = self.resolve(papers)?;
        Ok(self.score_indices(&idx))
    }

    fn score_indices(&self, papers: &[usize]) -> Array1<f64> {
        let mut mean = Array1::<f64>::zeros(self.num_topics());
        for &p in papers {
            mean += &self.params.v.row(p);
        }
        mean /= papers.len() as f64;
        mean.dot(&self.topics.psi_d)
    }

    /// The `k` best datasets for the query.
    pub fn rank<S: AsRef<str>>(&self, papers: &[S], k: usize) -> Result<RankedResult> {
        if k == 0 || k > self.num_datasets() {
            return Err(Error::Query(format!("k = {k} is outside 1..={}", self.num_datasets())));
        }
        let scores = self.score_query(papers)?;
        let order = top_k(scores.as_slice().expect("contiguous scores"), k);
        Ok(RankedResult {
            query: papers.iter().map(|p| p.as_ref().to_string()).collect(),
            k,
            results: order
                .into_iter()
                .map(|d| ScoredDataset {
                    dataset: self.dataset_ids[d].clone(),
                    score: scores[d],
                })
                .collect(),
        })
    }

    /// The `top_t` topics of the query's mean topic proportions.
    pub fn query_topics<S: AsRef<str>>(&self, papers: &[S], top_t: usize) -> Result<Vec<(usize, f64)>> {
        let idx = self.resolve(papers)?;
        let theta = self.query_theta(&idx);
        let order = top_k(theta.as_slice().expect("contiguous"), top_t.min(theta.len()));
        Ok(order.into_iter().map(|t| (t, theta[t])).collect())
    }

    fn query_theta(&self, papers: &[usize]) -> Array1<f64> {
        let mut theta = Array1::zeros(self.num_topics());
        for &p in papers {
            theta += &crate::fusion::transform(self.params.v.row(p), self.params.kappa);
        }
        theta / papers.len() as f64
    }

    /// Most probable words and datasets of topic `topic`.
    pub fn topic_profile(&self, topic: usize, n: usize) -> Result<TopicProfile> {
        if topic >= self.num_topics() {
            return Err(Error::Query(format!(
                "topic {topic} is outside 0..{}",
                self.num_topics()
            )));
        }
        let top = |phi: Array2<f64>, ids: &[String]| -> Vec<(String, f64)> {
            let row = phi.row(topic).to_vec();
            top_k(&row, n.min(row.len()))
                .into_iter()
                .map(|j| (ids[j].clone(), row[j]))
                .collect()
        };
        Ok(TopicProfile {
            topic,
            words: top(word_topic_dist(&self.topics.psi_w), &self.words),
            datasets: top(dataset_topic_dist(&self.topics.psi_d), &self.dataset_ids),
        })
    }
}

fn resolve_query<S: AsRef<str>>(papers: &[S], lookup: impl Fn(&str) -> Option<usize>) -> Result<Vec<usize>> {
    if papers.is_empty() {
        return Err(Error::Query("empty query".into()));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(papers.len());
    for p in papers {
        let p = p.as_ref();
        let i = lookup(p).ok_or_else(|| Error::UnknownPaper(p.to_string()))?;
        if !seen.insert(i) {
            return Err(Error::Query(format!("paper {p} appears twice in the query")));
        }
        out.push(i);
    }
    Ok(out)
}

/// Indices of the `k` largest scores, descending, ties by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredDataset {
    pub dataset: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedResult {
    pub query: Vec<String>,
    pub k: usize,
    pub results: Vec<ScoredDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicProfile {
    pub topic: usize,
    pub words: Vec<(String, f64)>,
    pub datasets: Vec<(String, f64)>,
}

/// Papers within `hops` citation steps of the query, in either direction.
fn expand(graph: &HeteroGraph, seeds: &[usize], hops: usize) -> BTreeSet<usize> {
    let mut seen: BTreeSet<usize> = seeds.iter().copied().collect();
    let mut frontier: VecDeque<(usize, usize)> = seeds.iter().map(|&p| (p, 0)).collect();
    while let Some((p, depth)) = frontier.pop_front() {
        if depth == hops {
            continue;
        }
        for &q in graph.neighbors(p) {
            if seen.insert(q) {
                frontier.push_back((q, depth + 1));
            }
        }
    }
    seen
}

/// Datasets linked to the given papers, by link count, ties by index.
fn frequency_ranking(graph: &HeteroGraph, papers: &BTreeSet<usize>) -> Vec<(usize, usize)> {
    let mut counts = vec![0usize; graph.num_datasets()];
    for &p in papers {
        for &d in graph.datasets_of(p) {
            counts[d] += 1;
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().enumerate().filter(|&(_, c)| c > 0).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

fn baseline<S: AsRef<str>>(graph: &HeteroGraph, papers: &[S], k: usize, hops: usize) -> Result<RankedResult> {
    let idx = resolve_query(papers, |id| graph.paper_index(id))?;
    let ranked = frequency_ranking(graph, &expand(graph, &idx, hops));
    Ok(RankedResult {
        query: papers.iter().map(|p| p.as_ref().to_string()).collect(),
        k,
        results: ranked
            .into_iter()
            .take(k)
            .map(|(d, c)| ScoredDataset {
                dataset: graph.dataset_ids()[d].clone(),
                score: c as f64,
            })
            .collect(),
    })
}

/// Datasets used by the query papers themselves, most frequent first. The
/// result may hold fewer than `k` entries.
pub fn naive_retrieval<S: AsRef<str>>(graph: &HeteroGraph, papers: &[S], k: usize) -> Result<RankedResult> {
    baseline(graph, papers, k, 0)
}

/// As [`naive_retrieval`] after widening the query by `hops` citation steps.
pub fn advanced_naive_retrieval<S: AsRef<str>>(
    graph: &HeteroGraph,
    papers: &[S],
    k: usize,
    hops: usize,
) -> Result<RankedResult> {
    baseline(graph, papers, k, hops)
}

/// Per-query ranking quality. Every value lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub auc: f64,
}

impl Metrics {
    fn mean(all: &[Metrics]) -> Metrics {
        let n = all.len() as f64;
        let sum = all.iter().fold(Metrics::default(), |a, m| Metrics {
            precision: a.precision + m.precision,
            recall: a.recall + m.recall,
            ndcg: a.ndcg + m.ndcg,
            mrr: a.mrr + m.mrr,
            auc: a.auc + m.auc,
        });
        Metrics {
            precision: sum.precision / n,
            recall: sum.recall / n,
            ndcg: sum.ndcg / n,
            mrr: sum.mrr / n,
            auc: sum.auc / n,
        }
    }
}

/// Scores `ranking` (best first, possibly partial) over `num_items` items
/// against the `relevant` set. Items missing from the ranking tie below every
/// ranked item. AUC uses the whole ranking and counts ties as one half.
pub fn ranking_metrics(ranking: &[usize], relevant: &BTreeSet<usize>, num_items: usize, k: usize) -> Metrics {
    let top = &ranking[..k.min(ranking.len())];
    let hits = top.iter().filter(|d| relevant.contains(d)).count() as f64;
    let dcg: f64 = top
        .iter()
        .enumerate()
        .filter(|(_, d)| relevant.contains(d))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    let mrr = top
        .iter()
        .position(|d| relevant.contains(d))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64);

    let n_rel = relevant.len();
    let n_non = num_items - n_rel;
    let auc = if n_rel == 0 || n_non == 0 {
        1.0
    } else {
        let ranked_non = ranking.iter().filter(|d| !relevant.contains(d)).count();
        let ranked_rel = ranking.len() - ranked_non;
        let (unranked_rel, unranked_non) = (n_rel - ranked_rel, n_non - ranked_non);
        let mut non_seen = 0usize;
        let mut correct = 0.0;
        for d in ranking {
            if relevant.contains(d) {
                correct += (n_non - non_seen) as f64;
            } else {
                non_seen += 1;
            }
        }
        correct += 0.5 * (unranked_rel * unranked_non) as f64;
        correct / (n_rel * n_non) as f64
    };
    Metrics {
        precision: hits / k as f64,
        recall: if n_rel == 0 { 0.0 } else { hits / n_rel as f64 },
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
        mrr,
        auc,
    }
}

/// What produces the rankings under evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Ranker<'a> {
    Model(&'a Model),
    Naive(&'a HeteroGraph),
    /// Link frequency over the query widened by the given number of hops.
    Advanced(&'a HeteroGraph, usize),
}

impl Ranker<'_> {
    fn num_items(&self) -> usize {
        match self {
            Ranker::Model(m) => m.num_datasets(),
            Ranker::Naive(g) | Ranker::Advanced(g, _) => g.num_datasets(),
        }
    }

    fn dataset_index(&self, id: &str) -> Option<usize> {
        match self {
            Ranker::Model(m) => m.dataset_index(id),
            Ranker::Naive(g) | Ranker::Advanced(g, _) => g.dataset_index(id),
        }
    }

    /// Full ranking for the model; only linked datasets for the baselines.
    fn ranking(&self, papers: &[String]) -> Result<Vec<usize>> {
        match *self {
            Ranker::Model(m) => {
                let idx = m.resolve(papers)?;
                Ok(top_k(
                    m.score_indices(&idx).as_slice().expect("contiguous"),
                    m.num_datasets(),
                ))
            }
            Ranker::Naive(g) => self.baseline_ranking(g, papers, 0),
            Ranker::Advanced(g, hops) => self.baseline_ranking(g, papers, hops),
        }
    }

    fn baseline_ranking(&self, graph: &HeteroGraph, papers: &[String], hops: usize) -> Result<Vec<usize>> {
        let idx = resolve_query(papers, |id| graph.paper_index(id))?;
        Ok(frequency_ranking(graph, &expand(graph, &idx, hops))
            .into_iter()
            .map(|(d, _)| d)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    /// Query position in the input set and its metrics.
    pub per_query: Vec<(usize, Metrics)>,
    /// Macro average over queries.
    pub mean: Metrics,
}

impl EvalReport {
    /// One row per query and a final `mean` row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# auc is computed over the full ranking and does not depend on k={}",
            self.k
        )?;
        writeln!(out, "query_id,p_at_k,r_at_k,ndcg_at_k,mrr_at_k,auc")?;
        let row = |out: &mut W, id: &str, m: &Metrics| {
            writeln!(out, "{id},{},{},{},{},{}", m.precision, m.recall, m.ndcg, m.mrr, m.auc)
        };
        for (i, m) in &self.per_query {
            row(&mut out, &i.to_string(), m)?;
        }
        row(&mut out, "mean", &self.mean)?;
        Ok(())
    }
}

/// Macro-averaged metrics at cutoff `k` over every query.
pub fn evaluate(ranker: Ranker<'_>, queries: &QuerySet, k: usize) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Query("no queries to evaluate".into()));
    }
    if k == 0 {
        return Err(Error::Query("k must be positive".into()));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    for (i, q) in queries.queries.iter().enumerate() {
        if q.ground_truth.is_empty() {
            return Err(Error::Query(format!("query {i} has no ground truth")));
        }
        let relevant = q
            .ground_truth
            .iter()
            .map(|d| ranker.dataset_index(d).ok_or_else(|| Error::UnknownDataset(d.clone())))
            .collect::<Result<BTreeSet<usize>>>()?;
        let ranking = ranker.ranking(&q.query_papers)?;
        per_query.push((i, ranking_metrics(&ranking, &relevant, ranker.num_items(), k)));
    }
    let all: Vec<Metrics> = per_query.iter().map(|(_, m)| *m).collect();
    Ok(EvalReport {
        k,
        mean: Metrics::mean(&all),
        per_query,
    })
}
