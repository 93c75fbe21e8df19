use std::collections::BTreeSet;
use std::sync::OnceLock;

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stoprec::bundle::{Tensor, TensorData};
use stoprec::corpus::{
    generate_planted_corpus, load_corpus_dir, sample_negative_pairs, save_graph, HeteroGraph, PlantedConfig,
    VocabConfig,
};
use stoprec::fusion::{link_prob, train, transform, TrainConfig};
use stoprec::graph_embedding::{negative_sampling_distribution, neighbor_likelihood};
use stoprec::recommender::{advanced_naive_retrieval, naive_retrieval, ranking_metrics, top_k, Model};
use stoprec::text_autoencoder::corrupt;
use stoprec::topic_model::{
    gibbs_sweep_datasets, gibbs_sweep_words, grad_psi_d, grad_psi_w, word_topic_dist, SufficientStats, TopicState,
};

fn small_graph(seed: u64) -> HeteroGraph {
    let mut cfg = PlantedConfig::new(3, 30, 8, 40, seed);
    cfg.tokens_per_paper = (3, 10);
    generate_planted_corpus(&cfg).unwrap().train_graph().unwrap()
}

fn vector(len: impl Strategy<Value = usize>) -> impl Strategy<Value = Vec<f64>> {
    len.prop_flat_map(|n| prop::collection::vec(-20.0f64..20.0, n))
}

fn trained_model() -> &'static Model {
    static MODEL: OnceLock<Model> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = generate_planted_corpus(&PlantedConfig::new(3, 60, 10, 80, 11)).unwrap();
        let graph = corpus.train_graph().unwrap();
        let mut cfg = TrainConfig::new(4).unwrap();
        cfg.seed = 11;
        cfg.outer_iters = 3;
        cfg.sdae.epochs = 2;
        let trained = train(&graph, &cfg).unwrap();
        Model::from_training(&graph, corpus.vocab.words().to_vec(), trained, cfg.echo()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transform_is_a_shift_invariant_monotone_distribution(v in vector(1usize..12), kappa in 0.01f64..20.0, c in -50.0f64..50.0) {
        let v = Array1::from(v);
        let theta = transform(v.view(), kappa);
        prop_assert!((theta.sum() - 1.0).abs() < 1e-9);
        prop_assert!(theta.iter().all(|&t| t > 0.0 || kappa * 40.0 > 700.0));
        let shifted = transform((&v + c).view(), kappa);
        for (a, b) in theta.iter().zip(&shifted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for a in 0..v.len() {
            for b in 0..v.len() {
                if v[a] > v[b] {
                    prop_assert!(theta[a] >= theta[b]);
                }
            }
        }
    }

    #[test]
    fn link_probability_is_symmetric(pair in (1usize..8).prop_flat_map(|k| (
        prop::collection::vec(-3.0f64..3.0, k),
        prop::collection::vec(-3.0f64..3.0, k),
        prop::collection::vec(-3.0f64..3.0, k),
    )), beta0 in -2.0f64..2.0) {
        let (a, b, beta1) = (Array1::from(pair.0), Array1::from(pair.1), Array1::from(pair.2));
        let ab = link_prob(a.view(), b.view(), beta0, beta1.view());
        let ba = link_prob(b.view(), a.view(), beta0, beta1.view());
        prop_assert_eq!(ab, ba);
        prop_assert!(ab > 0.0 && ab < 1.0);
    }

    #[test]
    fn topic_distributions_are_positive_simplex_rows(rows in 1usize..6, cols in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = Array2::from_shape_fn((rows, cols), |_| rand::Rng::gen_range(&mut rng, -30.0..30.0));
        let phi = word_topic_dist(&psi);
        for row in phi.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn corrupt_keeps_surviving_coordinates(x in prop::collection::vec(0.0f64..5.0, 1..50), rate in 0.0f64..0.99, seed in any::<u64>()) {
        let x = Array1::from(x);
        let noisy = corrupt(x.view(), rate, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for (a, b) in x.iter().zip(&noisy) {
            prop_assert!(*b == 0.0 || a.to_bits() == b.to_bits());
        }
    }

    #[test]
    fn neighbor_likelihood_rows_sum_to_one(n in 1usize..20, dim in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Array2::from_shape_fn((n, dim), |_| rand::Rng::gen_range(&mut rng, -2.0..2.0));
        for i in 0..n {
            let total: f64 = (0..n).map(|j| neighbor_likelihood(i, j, s.view())).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_is_a_descending_prefix(scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 2.0, -1.0]), 1..30)) {
        let all = top_k(&scores, scores.len());
        let distinct: BTreeSet<usize> = all.iter().copied().collect();
        prop_assert_eq!(distinct.len(), scores.len());
        for w in all.windows(2) {
            prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
        for k in 1..=scores.len() {
            prop_assert_eq!(&top_k(&scores, k)[..], &all[..k]);
        }
    }

    #[test]
    fn metrics_are_bounded(n in 2usize..25, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ranking: Vec<usize> = (0..n).collect();
        ranking.shuffle(&mut rng);
        let relevant: BTreeSet<usize> = ranking.iter().copied().filter(|d| d % 3 == 0).collect();
        for k in 1..=n {
            let m = ranking_metrics(&ranking, &relevant, n, k);
            for x in [m.precision, m.recall, m.ndcg, m.mrr, m.auc] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
        prop_assert_eq!(ranking_metrics(&ranking, &relevant, n, n).recall, 1.0);
    }

    #[test]
    fn tensors_round_trip(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let len = shape.iter().product::<usize>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f32> = (0..len).map(|_| rand::Rng::gen(&mut rng)).collect();
        let tensor = Tensor { name: "t".into(), shape, data: TensorData::F32(values) };
        let bytes = tensor.encode().unwrap();
        let back = Tensor::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &tensor);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gibbs_sweeps_keep_counts_consistent(seed in any::<u64>()) {
        let graph = small_graph(seed % 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 3;
        let mut state = TopicState::init(&graph, k, &mut rng).unwrap();
        state.psi_w = Array2::from_shape_fn(state.psi_w.raw_dim(), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        let mut stats = SufficientStats::recount(&graph, &state);
        let theta = Array2::from_shape_fn((graph.num_papers(), k), |_| rand::Rng::gen_range(&mut rng, 0.1..1.0));
        let phi_w = word_topic_dist(&state.psi_w);
        let phi_d = word_topic_dist(&state.psi_d);
        for _ in 0..3 {
            gibbs_sweep_words(&graph, theta.view(), phi_w.view(), &mut state, &mut stats, &mut rng);
            gibbs_sweep_datasets(&graph, theta.view(), phi_d.view(), &mut state, &mut stats, &mut rng);
            prop_assert_eq!(&stats, &SufficientStats::recount(&graph, &state));
        }
        for p in 0..graph.num_papers() {
            prop_assert_eq!(stats.n_pk.row(p).sum() as usize, graph.tokens_of(p).len());
            prop_assert_eq!(stats.d_pk.row(p).sum() as usize, graph.datasets_of(p).len());
        }
        // The likelihood part of the natural-parameter gradient is tangent to the simplex.
        for g in [grad_psi_w(&stats, &phi_w, &state.psi_w, 0.7, 0.0), grad_psi_d(&stats, &phi_d, &state.psi_d, 0.7, 0.0)] {
            for row in g.rows() {
                prop_assert!(row.sum().abs() < 1e-9);
            }
        }
    }

    #[test]
    fn negative_pairs_avoid_citations(seed in any::<u64>()) {
        let graph = small_graph(seed % 1000);
        let citations: BTreeSet<(usize, usize)> = graph.citations().iter().copied().collect();
        let negatives = sample_negative_pairs(&graph, seed).unwrap();
        prop_assert_eq!(negatives.len(), citations.len());
        prop_assert!(negatives.iter().all(|pair| !citations.contains(pair) && pair.0 != pair.1));
        let f = negative_sampling_distribution(&graph);
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(f.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn graph_files_round_trip(seed in 0u64..1000) {
        let corpus = generate_planted_corpus(&PlantedConfig::new(3, 30, 8, 40, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_graph(&corpus.graph, &corpus.vocab, dir.path()).unwrap();
        let (graph, vocab) = load_corpus_dir(dir.path(), VocabConfig::default()).unwrap();
        prop_assert_eq!(&graph, &corpus.graph);
        prop_assert_eq!(&vocab, &corpus.vocab);
        let total: usize = (0..graph.num_papers()).map(|p| graph.bow_of(p).iter().map(|&(_, c)| c as usize).sum::<usize>()).sum();
        prop_assert_eq!(total, graph.total_tokens());
    }

    #[test]
    fn naive_results_are_within_advanced(seed in 0u64..1000, hops in 1usize..3) {
        let graph = small_graph(seed);
        let papers: Vec<&str> = graph.paper_ids().iter().take(3).map(String::as_str).collect();
        let d = graph.num_datasets();
        let naive: BTreeSet<String> = naive_retrieval(&graph, &papers, d).unwrap().results.into_iter().map(|r| r.dataset).collect();
        let advanced: BTreeSet<String> =
            advanced_naive_retrieval(&graph, &papers, d, hops).unwrap().results.into_iter().map(|r| r.dataset).collect();
        prop_assert!(naive.is_subset(&advanced));
    }

    #[test]
    fn scaling_dataset_parameters_keeps_rankings(c in 0.01f64..50.0, first in 0usize..40, k in 1usize..10) {
        let model = trained_model();
        let papers = [&model.paper_ids[first % model.paper_ids.len()]];
        let mut scaled = model.clone();
        scaled.topics.psi_d.mapv_inplace(|x| x * c);
        let base = model.score_query(&papers).unwrap();
        let after = scaled.score_query(&papers).unwrap();
        for (a, b) in base.iter().zip(&after) {
            prop_assert!((a * c - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let order = |m: &Model, k| m.rank(&papers, k).unwrap().results.into_iter().map(|r| r.dataset).collect::<Vec<_>>();
        prop_assert_eq!(order(model, k), order(&scaled, k));
        prop_assert_eq!(&order(model, k + 1)[..k], &order(model, k)[..]);
    }
}
