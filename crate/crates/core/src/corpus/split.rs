use std::collections::HashSet;

use log::warn;

use super::{GraphParts, HeteroGraph, Query, QuerySet};
use crate::{Error, Result};

/// A paper withheld from training. It keeps its reference list and dataset
/// links (as external ids) so it can be turned into a query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOutPaper {
    pub id: String,
    pub year: i32,
    pub references: Vec<String>,
    pub datasets: Vec<String>,
}

/// Splits `graph` into the papers published up to and including
/// `cutoff_year` and the later, held-out papers.
///
/// The training graph keeps only citations among training papers and only
/// datasets linked by at least one training paper.
pub fn split_by_year(graph: &HeteroGraph, cutoff_year: i32) -> Result<(HeteroGraph, Vec<HeldOutPaper>)> {
    let years = graph.years();
    let (min, max) = match (years.iter().min(), years.iter().max()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::config("cannot split an empty graph")),
    };
    if cutoff_year < min || cutoff_year > max {
        return Err(Error::config(format!(
            "cutoff year {cutoff_year} outside observed range {min}..={max}"
        )));
    }

    let is_train: Vec<bool> = years.iter().map(|&y| y <= cutoff_year).collect();
    let mut remap = vec![usize::MAX; graph.num_papers()];
    let mut n_train = 0;
    for (p, &t) in is_train.iter().enumerate() {
        if t {
            remap[p] = n_train;
            n_train += 1;
        }
    }

    let mut dataset_used = vec![false; graph.num_datasets()];
    for p in (0..graph.num_papers()).filter(|&p| is_train[p]) {
        for &d in graph.datasets_of(p) {
            dataset_used[d] = true;
        }
    }
    let mut dataset_remap = vec![usize::MAX; graph.num_datasets()];
    let mut dataset_ids = Vec::new();
    for (d, &used) in dataset_used.iter().enumerate() {
        if used {
            dataset_remap[d] = dataset_ids.len();
            dataset_ids.push(graph.dataset_ids()[d].clone());
        }
    }

    let mut parts = GraphParts {
        dataset_ids,
        vocab_size: graph.vocab_size(),
        ..GraphParts::default()
    };
    let mut held_out = Vec::new();
    for p in 0..graph.num_papers() {
        if is_train[p] {
            parts.paper_ids.push(graph.paper_ids()[p].clone());
            parts.years.push(years[p]);
            parts
                .paper_datasets
                .push(graph.datasets_of(p).iter().map(|&d| dataset_remap[d]).collect());
            parts.tokens.push(graph.tokens_of(p).to_vec());
        } else {
            held_out.push(HeldOutPaper {
                id: graph.paper_ids()[p].clone(),
                year: years[p],
                references: graph
                    .out_neighbors(p)
                    .iter()
                    .map(|&r| graph.paper_ids()[r].clone())
                    .collect(),
                datasets: graph
                    .datasets_of(p)
                    .iter()
                    .map(|&d| graph.dataset_ids()[d].clone())
                    .collect(),
            });
        }
    }
    parts.citations = graph
        .citations()
        .iter()
        .filter(|&&(s, d)| is_train[s] && is_train[d])
        .map(|&(s, d)| (remap[s], remap[d]))
        .collect();

    if held_out.is_empty() {
        warn!("every paper is published on or before {cutoff_year}; no held-out papers");
    }
    Ok((HeteroGraph::from_parts(parts)?, held_out))
}

/// Outcome of [`build_queries`], including what was filtered out.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryBuild {
    pub queries: QuerySet,
    /// Held-out paper id each query was built from, aligned with `queries`.
    pub sources: Vec<String>,
    pub skipped_no_references: usize,
    pub skipped_no_datasets: usize,
    /// Ground-truth datasets dropped because the training graph never uses them.
    pub dropped_unknown_datasets: usize,
}

/// One query per held-out paper: its references that are training papers,
/// answered by its datasets that the training graph knows about.
pub fn build_queries(train: &HeteroGraph, held_out: &[HeldOutPaper]) -> QueryBuild {
    let mut out = QueryBuild::default();
    for paper in held_out {
        let mut seen = HashSet::new();
        let query_papers: Vec<String> = paper
            .references
            .iter()
            .filter(|r| train.paper_index(r).is_some() && seen.insert(r.as_str()))
            .cloned()
            .collect();
        if query_papers.is_empty() {
            out.skipped_no_references += 1;
            continue;
        }
        let mut seen = HashSet::new();
        let mut ground_truth = Vec::new();
        for d in &paper.datasets {
            if train.dataset_index(d).is_some() {
                if seen.insert(d.as_str()) {
                    ground_truth.push(d.clone());
                }
            } else {
                out.dropped_unknown_datasets += 1;
            }
        }
        if ground_truth.is_empty() {
            out.skipped_no_datasets += 1;
            continue;
        }
        out.queries.queries.push(Query {
            query_papers,
            ground_truth,
        });
        out.sources.push(paper.id.clone());
    }
    if out.skipped_no_references + out.skipped_no_datasets > 0 || out.dropped_unknown_datasets > 0 {
        warn!(
            "query construction skipped {} papers without training references and {} without \
             known datasets; dropped {} unknown ground-truth datasets",
            out.skipped_no_references, out.skipped_no_datasets, out.dropped_unknown_datasets
        );
    }
    out
}
