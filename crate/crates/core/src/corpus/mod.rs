//! Attributed heterogeneous graph: papers, datasets, words and the edges
//! between them, plus ingestion, splitting and query construction.

mod io;
mod negative;
mod planted;
mod split;
mod text;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{
    load_corpus_dir, load_graph, read_queries, save_graph, write_queries, CorpusFiles, CITATIONS_FILE, LINKS_FILE,
    PAPERS_FILE, QUERIES_FILE, VOCAB_FILE,
};
pub use negative::sample_negative_pairs;
pub use planted::{generate_planted_corpus, PlantedConfig, PlantedCorpus, PlantedTruth};
pub use split::{build_queries, split_by_year, HeldOutPaper, QueryBuild};
pub use text::{tokenize, VocabConfig, VocabSource, Vocabulary, ENGLISH_STOPWORDS};

/// Raw, id-dense components used to assemble a [`HeteroGraph`].
#[derive(Debug, Clone, Default)]
pub struct GraphParts {
    pub paper_ids: Vec<String>,
    pub years: Vec<i32>,
    pub dataset_ids: Vec<String>,
    pub citations: Vec<(usize, usize)>,
    pub paper_datasets: Vec<Vec<usize>>,
    pub tokens: Vec<Vec<u32>>,
    pub vocab_size: usize,
}

/// Immutable paper/dataset/word graph with dense integer ids.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    paper_ids: Vec<String>,
    years: Vec<i32>,
    dataset_ids: Vec<String>,
    citations: Vec<(usize, usize)>,
    paper_datasets: Vec<Vec<usize>>,
    tokens: Vec<Vec<u32>>,
    bow: Vec<Vec<(u32, u32)>>,
    vocab_size: usize,
    out_adj: Vec<Vec<usize>>,
    sym_adj: Vec<Vec<usize>>,
    paper_index: HashMap<String, usize>,
    dataset_index: HashMap<String, usize>,
}

impl HeteroGraph {
    /// Validates `parts` and builds the derived indices.
    pub fn from_parts(parts: GraphParts) -> Result<Self> {
        let GraphParts {
            paper_ids,
            years,
            dataset_ids,
            citations,
            paper_datasets,
            tokens,
            vocab_size,
        } = parts;
        let n_papers = paper_ids.len();
        if years.len() != n_papers || paper_datasets.len() != n_papers || tokens.len() != n_papers {
            return Err(Error::InvalidGraph(format!(
                "per-paper arrays disagree: {} ids, {} years, {} link lists, {} token lists",
                n_papers,
                years.len(),
                paper_datasets.len(),
                tokens.len()
            )));
        }
        let paper_index = unique_index(&paper_ids, "paper")?;
        let dataset_index = unique_index(&dataset_ids, "dataset")?;

        let mut seen = HashSet::with_capacity(citations.len());
        for &(src, dst) in &citations {
            if src >= n_papers || dst >= n_papers {
                return Err(Error::InvalidGraph(format!(
                    "citation ({src}, {dst}) references a paper outside 0..{n_papers}"
                )));
            }
            if src == dst {
                return Err(Error::InvalidGraph(format!(
                    "self-citation on paper {}",
                    paper_ids[src]
                )));
            }
            if !seen.insert((src, dst)) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate citation {} -> {}",
                    paper_ids[src], paper_ids[dst]
                )));
            }
        }
        for (p, links) in paper_datasets.iter().enumerate() {
            let mut seen = HashSet::with_capacity(links.len());
            for &d in links {
                if d >= dataset_ids.len() {
                    return Err(Error::InvalidGraph(format!(
                        "paper {} links dataset index {d} outside 0..{}",
                        paper_ids[p],
                        dataset_ids.len()
                    )));
                }
                if !seen.insert(d) {
                    return Err(Error::InvalidGraph(format!(
                        "duplicate link {} -> {}",
                        paper_ids[p], dataset_ids[d]
                    )));
                }
            }
        }
        for (p, toks) in tokens.iter().enumerate() {
            if let Some(&bad) = toks.iter().find(|&&w| w as usize >= vocab_size) {
                return Err(Error::InvalidGraph(format!(
                    "paper {} has token id {bad} outside vocabulary of size {vocab_size}",
                    paper_ids[p]
                )));
            }
        }

        let bow = tokens.iter().map(|t| bag_of_words(t)).collect();
        let mut out_adj = vec![Vec::new(); n_papers];
        let mut sym_adj = vec![Vec::new(); n_papers];
        for &(src, dst) in &citations {
            out_adj[src].push(dst);
            sym_adj[src].push(dst);
            sym_adj[dst].push(src);
        }
        for adj in &mut sym_adj {
            adj.sort_unstable();
            adj.dedup();
        }

        Ok(Self {
            paper_ids,
            years,
            dataset_ids,
            citations,
            paper_datasets,
            tokens,
            bow,
            vocab_size,
            out_adj,
            sym_adj,
            paper_index,
            dataset_index,
        })
    }

    pub fn into_parts(self) -> GraphParts {
        GraphParts {
            paper_ids: self.paper_ids,
            years: self.years,
            dataset_ids: self.dataset_ids,
            citations: self.citations,
            paper_datasets: self.paper_datasets,
            tokens: self.tokens,
            vocab_size: self.vocab_size,
        }
    }

    pub fn num_papers(&self) -> usize {
        self.paper_ids.len()
    }

    pub fn num_datasets(&self) -> usize {
        self.dataset_ids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn paper_ids(&self) -> &[String] {
        &self.paper_ids
    }

    pub fn dataset_ids(&self) -> &[String] {
        &self.dataset_ids
    }

    pub fn years(&self) -> &[i32] {
        &self.years
    }

    pub fn citations(&self) -> &[(usize, usize)] {
        &self.citations
    }

    /// Datasets used by paper `p` (the D_p list).
    pub fn datasets_of(&self, p: usize) -> &[usize] {
        &self.paper_datasets[p]
    }

    pub fn tokens_of(&self, p: usize) -> &[u32] {
        &self.tokens[p]
    }

    /// Sparse word counts for paper `p`, sorted by word id.
    pub fn bow_of(&self, p: usize) -> &[(u32, u32)] {
        &self.bow[p]
    }

    /// A paper with no tokens left after preprocessing; excluded from text training.
    pub fn is_textless(&self, p: usize) -> bool {
        self.tokens[p].is_empty()
    }

    pub fn out_neighbors(&self, p: usize) -> &[usize] {
        &self.out_adj[p]
    }

    /// Citation neighbors ignoring direction, sorted and deduplicated.
    pub fn neighbors(&self, p: usize) -> &[usize] {
        &self.sym_adj[p]
    }

    pub fn out_degree(&self, p: usize) -> usize {
        self.out_adj[p].len()
    }

    pub fn paper_index(&self, id: &str) -> Option<usize> {
        self.paper_index.get(id).copied()
    }

    pub fn dataset_index(&self, id: &str) -> Option<usize> {
        self.dataset_index.get(id).copied()
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }

    pub fn total_links(&self) -> usize {
        self.paper_datasets.iter().map(Vec::len).sum()
    }
}

fn unique_index(ids: &[String], kind: &str) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(Error::InvalidGraph(format!("duplicate {kind} id {id}")));
        }
    }
    Ok(index)
}

fn bag_of_words(tokens: &[u32]) -> Vec<(u32, u32)> {
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    let mut bow: Vec<(u32, u32)> = Vec::new();
    for w in sorted {
        match bow.last_mut() {
            Some((last, count)) if *last == w => *count += 1,
            _ => bow.push((w, 1)),
        }
    }
    bow
}

/// One query: a set of paper ids and the datasets that answer it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_papers: Vec<String>,
    pub ground_truth: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Checks that every query is nonempty and refers only to papers in `graph`.
    pub fn validate_against(&self, graph: &HeteroGraph) -> Result<()> {
        for (i, q) in self.queries.iter().enumerate() {
            if q.query_papers.is_empty() {
                return Err(Error::Query(format!("query {i} has no papers")));
            }
            if q.ground_truth.is_empty() {
                return Err(Error::Query(format!("query {i} has no ground truth")));
            }
            if let Some(p) = q.query_papers.iter().find(|p| graph.paper_index(p).is_none()) {
                return Err(Error::UnknownPaper(p.clone()));
            }
        }
        Ok(())
    }
}
