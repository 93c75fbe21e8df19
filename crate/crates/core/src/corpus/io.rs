use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::text::{tokenize_with, Vocabulary};
use super::{GraphParts, HeteroGraph, Query, QuerySet, VocabConfig, VocabSource};
use crate::{Error, Result};

pub const PAPERS_FILE: &str = "papers.jsonl";
pub const CITATIONS_FILE: &str = "citations.tsv";
pub const LINKS_FILE: &str = "links.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const QUERIES_FILE: &str = "queries.jsonl";

/// Input file locations for [`load_graph`].
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub papers: PathBuf,
    pub citations: PathBuf,
    pub links: PathBuf,
}

impl CorpusFiles {
    /// Standard file names inside a corpus directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            papers: dir.join(PAPERS_FILE),
            citations: dir.join(CITATIONS_FILE),
            links: dir.join(LINKS_FILE),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PaperRecord {
    id: String,
    year: i32,
    #[serde(default)]
    title: String,
    #[serde(default, rename = "abstract")]
    abstract_text: String,
    #[serde(default)]
    keywords: Vec<String>,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Yields `(line_number, line)` for non-blank lines.
fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if !line.trim().is_empty() {
            out.push((i + 1, line.to_owned()));
        }
    }
    Ok(out)
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, String, String)>> {
    lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let mut fields = line.split('\t');
            match (fields.next(), fields.next(), fields.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => Ok((n, a.to_owned(), b.to_owned())),
                _ => Err(parse_error(path, n, "expected two tab-separated fields")),
            }
        })
        .collect()
}

/// Reads papers, citations and paper-dataset links; tokenizes text, builds or
/// applies the vocabulary and drops papers that have neither citations nor
/// dataset links.
pub fn load_graph(files: &CorpusFiles, vocab: VocabSource) -> Result<(HeteroGraph, Vocabulary)> {
    let mut records = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in lines(&files.papers)? {
        let rec: PaperRecord = serde_json::from_str(&line).map_err(|e| parse_error(&files.papers, n, e.to_string()))?;
        if index.insert(rec.id.clone(), records.len()).is_some() {
            return Err(parse_error(&files.papers, n, format!("duplicate paper id {}", rec.id)));
        }
        records.push(rec);
    }

    let mut dangling = BTreeSet::new();
    let mut citations = Vec::new();
    let mut seen_cites = HashSet::new();
    let (mut self_cites, mut dup_cites) = (0usize, 0usize);
    for (_, src, dst) in read_pairs(&files.citations)? {
        let (s, d) = match (index.get(&src), index.get(&dst)) {
            (Some(&s), Some(&d)) => (s, d),
            (s, d) => {
                if s.is_none() {
                    dangling.insert(src);
                }
                if d.is_none() {
                    dangling.insert(dst);
                }
                continue;
            }
        };
        if s == d {
            self_cites += 1;
        } else if !seen_cites.insert((s, d)) {
            dup_cites += 1;
        } else {
            citations.push((s, d));
        }
    }

    let mut raw_links: Vec<Vec<String>> = vec![Vec::new(); records.len()];
    let mut dup_links = 0usize;
    for (_, paper, dataset) in read_pairs(&files.links)? {
        match index.get(&paper) {
            Some(&p) if raw_links[p].contains(&dataset) => dup_links += 1,
            Some(&p) => raw_links[p].push(dataset),
            None => {
                dangling.insert(paper);
            }
        }
    }
    if !dangling.is_empty() {
        return Err(Error::DanglingReference(dangling.into_iter().collect()));
    }
    if self_cites + dup_cites + dup_links > 0 {
        warn!(
            "dropped {self_cites} self-citations, {dup_cites} duplicate citations, \
             {dup_links} duplicate dataset links"
        );
    }

    let stop = super::text::stopword_set();
    let texts: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut text = format!("{} {}", r.title, r.abstract_text);
            for kw in &r.keywords {
                text.push(' ');
                text.push_str(kw);
            }
            tokenize_with(&text, &stop)
        })
        .collect();
    let vocab = match vocab {
        VocabSource::Build(cfg) => Vocabulary::build(texts.iter().map(Vec::as_slice), cfg),
        VocabSource::Fixed(v) => v,
    };

    // isolation is edge-based, so it is decided after vocabulary filtering
    let mut linked = vec![false; records.len()];
    for &(s, d) in &citations {
        linked[s] = true;
        linked[d] = true;
    }
    for (p, l) in raw_links.iter().enumerate() {
        if !l.is_empty() {
            linked[p] = true;
        }
    }
    let isolated = linked.iter().filter(|&&l| !l).count();
    if isolated > 0 {
        warn!("removed {isolated} isolated papers");
    }
    let mut remap = vec![usize::MAX; records.len()];
    let mut kept = 0;
    for (p, &l) in linked.iter().enumerate() {
        if l {
            remap[p] = kept;
            kept += 1;
        }
    }

    let dataset_ids: Vec<String> = raw_links
        .iter()
        .flatten()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let dataset_index: HashMap<&str, usize> = dataset_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();

    let mut parts = GraphParts {
        dataset_ids: dataset_ids.clone(),
        vocab_size: vocab.len(),
        ..GraphParts::default()
    };
    for (p, rec) in records.iter().enumerate() {
        if !linked[p] {
            continue;
        }
        parts.paper_ids.push(rec.id.clone());
        parts.years.push(rec.year);
        parts
            .paper_datasets
            .push(raw_links[p].iter().map(|d| dataset_index[d.as_str()]).collect());
        parts.tokens.push(vocab.encode(&texts[p]));
    }
    parts.citations = citations.iter().map(|&(s, d)| (remap[s], remap[d])).collect();

    let textless = parts.tokens.iter().filter(|t| t.is_empty()).count();
    if textless > 0 {
        warn!("{textless} papers have no in-vocabulary tokens and are excluded from text training");
    }
    Ok((HeteroGraph::from_parts(parts)?, vocab))
}

/// Writes `graph` and `vocab` as a corpus directory that [`load_corpus_dir`]
/// reads back to an identical graph.
pub fn save_graph(graph: &HeteroGraph, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join(PAPERS_FILE))?);
    for p in 0..graph.num_papers() {
        let text: Vec<&str> = graph.tokens_of(p).iter().map(|&w| vocab.word(w)).collect();
        let rec = PaperRecord {
            id: graph.paper_ids()[p].clone(),
            year: graph.years()[p],
            title: String::new(),
            abstract_text: text.join(" "),
            keywords: Vec::new(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(dir.join(CITATIONS_FILE))?);
    for &(s, d) in graph.citations() {
        writeln!(out, "{}\t{}", graph.paper_ids()[s], graph.paper_ids()[d])?;
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(dir.join(LINKS_FILE))?);
    for p in 0..graph.num_papers() {
        for &d in graph.datasets_of(p) {
            writeln!(out, "{}\t{}", graph.paper_ids()[p], graph.dataset_ids()[d])?;
        }
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(dir.join(VOCAB_FILE))?);
    writeln!(out, "# min_count={}", vocab.min_count())?;
    for (w, df) in vocab.words().iter().zip(vocab.doc_freq()) {
        writeln!(out, "{w}\t{df}")?;
    }
    out.flush()?;
    Ok(())
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let mut words = Vec::new();
    let mut freqs = Vec::new();
    let mut min_count = VocabConfig::default().min_count;
    for (n, line) in lines(path)? {
        if let Some(meta) = line.strip_prefix('#') {
            if let Some(v) = meta.trim().strip_prefix("min_count=") {
                min_count = v.parse().map_err(|_| parse_error(path, n, "bad min_count header"))?;
            }
            continue;
        }
        let (w, df) = line
            .split_once('\t')
            .ok_or_else(|| parse_error(path, n, "expected word<TAB>document-frequency"))?;
        words.push(w.to_owned());
        freqs.push(df.parse().map_err(|_| parse_error(path, n, "bad document frequency"))?);
    }
    Vocabulary::from_entries(words, freqs, min_count)
}

/// Loads a corpus directory, reusing its `vocab.tsv` when present.
pub fn load_corpus_dir(dir: &Path, config: VocabConfig) -> Result<(HeteroGraph, Vocabulary)> {
    let vocab_path = dir.join(VOCAB_FILE);
    let source = if vocab_path.exists() {
        VocabSource::Fixed(read_vocab(&vocab_path)?)
    } else {
        VocabSource::Build(config)
    };
    load_graph(&CorpusFiles::in_dir(dir), source)
}

pub fn read_queries(path: &Path) -> Result<QuerySet> {
    let mut queries = Vec::new();
    for (n, line) in lines(path)? {
        let q: Query = serde_json::from_str(&line).map_err(|e| parse_error(path, n, e.to_string()))?;
        if q.query_papers.is_empty() {
            return Err(parse_error(path, n, "query_papers is empty"));
        }
        if q.ground_truth.is_empty() {
            return Err(parse_error(path, n, "ground_truth is empty"));
        }
        queries.push(q);
    }
    Ok(QuerySet { queries })
}

pub fn write_queries(queries: &QuerySet, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for q in &queries.queries {
        serde_json::to_writer(&mut out, q)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
