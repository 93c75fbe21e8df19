//! Synthetic corpora with a known topic structure.
//!
//! Every paper gets a dominant topic. Its tokens and dataset usages are drawn
//! from a mixture that favours that topic, and its citations stay inside the
//! topic at a configurable rate. Papers after the cutoff year become query
//! sources, exactly as real held-out papers would.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::text::Vocabulary;
use super::{build_queries, split_by_year, GraphParts, HeteroGraph, QuerySet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub n_topics: usize,
    pub n_papers: usize,
    pub n_datasets: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub tokens_per_paper: (usize, usize),
    pub datasets_per_paper: (usize, usize),
    pub citations_per_paper: (usize, usize),
    /// Probability that a citation targets a paper with the same dominant topic.
    pub within_topic_rate: f64,
    /// Probability that a token or dataset usage is drawn from the dominant topic.
    pub topic_purity: f64,
    pub held_out_fraction: f64,
    /// Exponent of the rank-frequency law inside each topic's word and dataset block.
    pub zipf_exponent: f64,
    pub first_year: i32,
    pub cutoff_year: i32,
}

impl PlantedConfig {
    pub fn new(n_topics: usize, n_papers: usize, n_datasets: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            n_topics,
            n_papers,
            n_datasets,
            vocab_size,
            seed,
            tokens_per_paper: (30, 60),
            datasets_per_paper: (1, 3),
            citations_per_paper: (2, 5),
            within_topic_rate: 0.9,
            topic_purity: 0.85,
            held_out_fraction: 0.15,
            zipf_exponent: 1.0,
            first_year: 2000,
            cutoff_year: 2014,
        }
    }
}

/// What the generator knows and the learner must discover.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTruth {
    /// Dominant topic per paper of the full graph.
    pub paper_topics: Vec<usize>,
    /// Generating word distribution per topic (rows sum to 1).
    pub word_dists: Vec<Vec<f64>>,
    /// Generating dataset distribution per topic (rows sum to 1).
    pub dataset_dists: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    /// Full graph, training and held-out papers together.
    pub graph: HeteroGraph,
    pub vocab: Vocabulary,
    /// Queries built from the held-out papers against the training split.
    pub queries: QuerySet,
    pub cutoff_year: i32,
    pub truth: PlantedTruth,
}

impl PlantedCorpus {
    pub fn train_graph(&self) -> Result<HeteroGraph> {
        Ok(split_by_year(&self.graph, self.cutoff_year)?.0)
    }
}

/// Splits `0..n` into `k` contiguous blocks and puts a Zipf law on each.
fn block_distributions(n: usize, k: usize, exponent: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|t| {
            let start = t * n / k;
            let end = (t + 1) * n / k;
            let mut row = vec![0.0; n];
            let mut total = 0.0;
            for (rank, i) in (start..end).enumerate() {
                row[i] = 1.0 / ((rank + 1) as f64).powf(exponent);
                total += row[i];
            }
            row.iter_mut().for_each(|x| *x /= total);
            row
        })
        .collect()
}

fn pick_topic(rng: &mut ChaCha8Rng, dominant: usize, cfg: &PlantedConfig) -> usize {
    if rng.gen::<f64>() < cfg.topic_purity {
        dominant
    } else {
        rng.gen_range(0..cfg.n_topics)
    }
}

pub fn generate_planted_corpus(cfg: &PlantedConfig) -> Result<PlantedCorpus> {
    if cfg.n_topics == 0 {
        return Err(Error::config("planted corpus needs at least one topic"));
    }
    if cfg.vocab_size < cfg.n_topics || cfg.n_datasets < cfg.n_topics {
        return Err(Error::config("need at least one word and one dataset per topic"));
    }
    if cfg.n_papers < 2 {
        return Err(Error::config("planted corpus needs at least two papers"));
    }
    let ordered = |(lo, hi): (usize, usize)| lo <= hi;
    if !ordered(cfg.tokens_per_paper) || !ordered(cfg.datasets_per_paper) || !ordered(cfg.citations_per_paper) {
        return Err(Error::config("count ranges must satisfy min <= max"));
    }
    if cfg.tokens_per_paper.0 == 0 || cfg.datasets_per_paper.0 == 0 {
        return Err(Error::config("every planted paper needs tokens and a dataset"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let word_dists = block_distributions(cfg.vocab_size, cfg.n_topics, cfg.zipf_exponent);
    let dataset_dists = block_distributions(cfg.n_datasets, cfg.n_topics, cfg.zipf_exponent);
    let word_samplers: Vec<WeightedIndex<f64>> = word_dists
        .iter()
        .map(|r| WeightedIndex::new(r).expect("valid weights"))
        .collect();
    let dataset_samplers: Vec<WeightedIndex<f64>> = dataset_dists
        .iter()
        .map(|r| WeightedIndex::new(r).expect("valid weights"))
        .collect();

    let n = cfg.n_papers;
    let n_held = ((n as f64) * cfg.held_out_fraction).round() as usize;
    let n_train = (n - n_held).max(1);
    let paper_topics: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.n_topics)).collect();
    let years: Vec<i32> = (0..n)
        .map(|p| {
            if p < n_train {
                rng.gen_range(cfg.first_year..=cfg.cutoff_year)
            } else {
                rng.gen_range(cfg.cutoff_year + 1..=cfg.cutoff_year + 2)
            }
        })
        .collect();

    let mut tokens = Vec::with_capacity(n);
    let mut paper_datasets = Vec::with_capacity(n);
    for &topic in &paper_topics {
        let len = rng.gen_range(cfg.tokens_per_paper.0..=cfg.tokens_per_paper.1);
        let toks: Vec<u32> = (0..len)
            .map(|_| {
                let z = pick_topic(&mut rng, topic, cfg);
                word_samplers[z].sample(&mut rng) as u32
            })
            .collect();
        tokens.push(toks);

        let wanted = rng.gen_range(cfg.datasets_per_paper.0..=cfg.datasets_per_paper.1);
        let mut links: Vec<usize> = Vec::with_capacity(wanted);
        let mut attempts = 0;
        while links.len() < wanted && attempts < 50 * wanted {
            attempts += 1;
            let z = pick_topic(&mut rng, topic, cfg);
            let d = dataset_samplers[z].sample(&mut rng);
            if !links.contains(&d) {
                links.push(d);
            }
        }
        paper_datasets.push(links);
    }

    // only training papers are cited; held-out papers cite into the past
    let mut by_topic = vec![Vec::new(); cfg.n_topics];
    for p in 0..n_train {
        by_topic[paper_topics[p]].push(p);
    }
    let mut citations = Vec::new();
    for (src, &topic) in paper_topics.iter().enumerate().take(n) {
        let count = rng.gen_range(cfg.citations_per_paper.0..=cfg.citations_per_paper.1);
        let mut targets: Vec<usize> = Vec::with_capacity(count);
        for _ in 0..count {
            let within = rng.gen::<f64>() < cfg.within_topic_rate || cfg.n_topics == 1;
            for _ in 0..50 {
                let dst = if within {
                    let pool = &by_topic[topic];
                    if pool.is_empty() {
                        break;
                    }
                    pool[rng.gen_range(0..pool.len())]
                } else {
                    let other = (topic + rng.gen_range(1..cfg.n_topics)) % cfg.n_topics;
                    let pool = &by_topic[other];
                    if pool.is_empty() {
                        break;
                    }
                    pool[rng.gen_range(0..pool.len())]
                };
                if dst != src && !targets.contains(&dst) {
                    targets.push(dst);
                    break;
                }
            }
        }
        citations.extend(targets.into_iter().map(|dst| (src, dst)));
    }

    let width = (cfg.vocab_size.max(2) - 1).to_string().len();
    let words: Vec<String> = (0..cfg.vocab_size).map(|w| format!("w{w:0width$}")).collect();
    let mut doc_freq = vec![0u32; cfg.vocab_size];
    for toks in &tokens {
        let mut uniq = toks.clone();
        uniq.sort_unstable();
        uniq.dedup();
        for w in uniq {
            doc_freq[w as usize] += 1;
        }
    }
    let vocab = Vocabulary::from_entries(words, doc_freq, 1)?;

    let pwidth = (n - 1).to_string().len();
    let dwidth = (cfg.n_datasets.max(2) - 1).to_string().len();
    let graph = HeteroGraph::from_parts(GraphParts {
        paper_ids: (0..n).map(|p| format!("p{p:0pwidth$}")).collect(),
        years,
        dataset_ids: (0..cfg.n_datasets).map(|d| format!("d{d:0dwidth$}")).collect(),
        citations,
        paper_datasets,
        tokens,
        vocab_size: cfg.vocab_size,
    })?;

    let queries = if n_held > 0 && n_train < n {
        let (train, held) = split_by_year(&graph, cfg.cutoff_year)?;
        build_queries(&train, &held).queries
    } else {
        QuerySet::default()
    };

    Ok(PlantedCorpus {
        graph,
        vocab,
        queries,
        cutoff_year: cfg.cutoff_year,
        truth: PlantedTruth {
            paper_topics,
            word_dists,
            dataset_dists,
        },
    })
}
