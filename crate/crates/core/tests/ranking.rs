mod common;

use std::collections::{HashMap, HashSet};

use common::{interaction, post, user};
use postrank::data::{generate_synthetic, time_based_split, Dataset, SynthConfig};
use postrank::encoding::{fit_cluster_models, EncoderConfig};
use postrank::network::{InputDims, NetworkConfig, NetworkParams};
use postrank::numkernel::{DenseMatrix, Rng};
use postrank::ranking::{evaluate, hits_at_k, precision_recall_at_k, rank_by_distance, rank_for_user, Embedder};
use postrank::{Model, Post, Result, User};
use proptest::prelude::*;

/// Embeds by lookup table, keyed by id.
struct Table(HashMap<String, Vec<f64>>);

impl Embedder for Table {
    fn embed_users(&self, users: &[&User]) -> Result<DenseMatrix> {
        DenseMatrix::from_rows(&users.iter().map(|u| self.0[&u.user_id].clone()).collect::<Vec<_>>())
    }
    fn embed_posts(&self, posts: &[&Post]) -> Result<DenseMatrix> {
        DenseMatrix::from_rows(&posts.iter().map(|p| self.0[&p.post_id].clone()).collect::<Vec<_>>())
    }
}

fn random_model(train: &Dataset, seed: u64) -> Model {
    let encoder = EncoderConfig { text_dim: 64, user_clusters: 8, post_clusters: 8, ..EncoderConfig::default() };
    let clusters = fit_cluster_models(train, &encoder, seed).unwrap();
    let net = NetworkConfig::default();
    let params = NetworkParams::init(&net, InputDims::from(&encoder), &mut Rng::seed_from_u64(seed)).unwrap();
    Model { params, encoder, user_clusters: clusters.user }
}

#[test]
fn ranking_matches_brute_force_sort() {
    let mut rng = Rng::seed_from_u64(1);
    for _ in 0..50 {
        let u: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let ids: Vec<String> = (0..10).map(|i| format!("c{}", (i * 7) % 10)).collect();
        let mut want: Vec<(f64, &str)> = rows
            .iter()
            .zip(&ids)
            .map(|(r, id)| (r.iter().zip(&u).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), id.as_str()))
            .collect();
        want.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let got = rank_by_distance(&u, &DenseMatrix::from_rows(&rows).unwrap(), &id_refs, 10).unwrap();
        assert_eq!(got.iter().map(|r| r.post_id.as_str()).collect::<Vec<_>>(), want.iter().map(|w| w.1).collect::<Vec<_>>());
        for (g, w) in got.iter().zip(&want) {
            assert!((g.distance - w.0).abs() < 1e-12);
        }
        let short = rank_by_distance(&u, &DenseMatrix::from_rows(&rows).unwrap(), &id_refs, 4).unwrap();
        assert_eq!(short[..], got[..4]);
    }
}

#[test]
fn full_list_when_k_exceeds_candidates_and_ties_break_by_id() {
    let d = Dataset::new(
        vec![post("b", 1, "red apple", None), post("a", 2, "red apple", None), post("c", 3, "blue sky", None)],
        vec![user("u", "fruit lover"), user("v", "sky watcher")],
        vec![interaction("u", "c", 10), interaction("v", "c", 12)],
    )
    .unwrap();
    let m = random_model_small(&d);
    let refs: Vec<&Post> = d.posts.iter().collect();
    let ranked = rank_for_user(&m, &d.users[0], &refs, 10).unwrap();
    assert_eq!(ranked.len(), 3);
    assert!(ranked.windows(2).all(|w| w[0].distance <= w[1].distance));
    let pa = ranked.iter().position(|r| r.post_id == "a").unwrap();
    let pb = ranked.iter().position(|r| r.post_id == "b").unwrap();
    assert_eq!(pb, pa + 1, "{ranked:?}");
    assert_eq!(ranked[pa].distance, ranked[pb].distance);
}

fn random_model_small(d: &Dataset) -> Model {
    let encoder = EncoderConfig { text_dim: 16, user_clusters: 2, post_clusters: 2, ..EncoderConfig::default() };
    let clusters = fit_cluster_models(d, &encoder, 3).unwrap();
    let params = NetworkParams::init(&NetworkConfig::default(), InputDims::from(&encoder), &mut Rng::seed_from_u64(3)).unwrap();
    Model { params, encoder, user_clusters: clusters.user }
}

#[test]
fn tiny_fixture_matches_hand_computation() {
    // 1-D embeddings: users A=0, B=10; posts p1..p6 at 1, 2, 3, 8, 9, 12.
    let posts: Vec<Post> = (1..=6).map(|i| post(&format!("p{i}"), i, "x y", None)).collect();
    let users = vec![user("A", "a a"), user("B", "b b")];
    let train = Dataset::new(posts.clone(), users.clone(), vec![interaction("A", "p1", 20), interaction("B", "p5", 20)]).unwrap();
    let test = Dataset::new(
        posts,
        users,
        vec![interaction("A", "p2", 30), interaction("A", "p4", 31), interaction("B", "p6", 30), interaction("B", "p3", 31)],
    )
    .unwrap();
    let table = Table(
        [("A", 0.0), ("B", 10.0), ("p1", 1.0), ("p2", 2.0), ("p3", 3.0), ("p4", 8.0), ("p5", 9.0), ("p6", 12.0)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), vec![v]))
            .collect(),
    );
    let r = evaluate(&table, &train, &test, &[1, 3]).unwrap();
    // A: candidates p2..p6, ranked p2 p3 p4 p5 p6, liked {p2, p4}
    //    P@1 1, R@1 1/2, P@3 2/3, R@3 1
    // B: candidates p1..p4 p6, ranked p4 p6 (tie at 2, by id) p3 p2 p1, liked {p6, p3}
    //    P@1 0, R@1 0, P@3 2/3, R@3 1
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(r.precision_at(1).unwrap(), 0.5));
    assert!(close(r.recall_at(1).unwrap(), 0.25));
    assert!(close(r.precision_at(3).unwrap(), 2.0 / 3.0));
    assert!(close(r.recall_at(3).unwrap(), 1.0));
    assert!(close(r.random_baseline, 0.4));
    let b = r.per_user.iter().find(|u| u.user_id == "B").unwrap();
    assert_eq!(b.ranked.iter().map(|x| x.post_id.as_str()).collect::<Vec<_>>(), ["p4", "p6", "p3"]);
}

#[test]
fn topic_oracle_is_perfect_on_noiseless_data() {
    // each user likes every post of their topic
    let cfg = SynthConfig { topics: 5, users: 10, posts: 100, interactions_per_user: 20, noise: 0.0, ..SynthConfig::default() };
    let s = generate_synthetic(&cfg, &mut Rng::seed_from_u64(4)).unwrap();
    let split = time_based_split(&s.dataset, 5).unwrap();
    let onehot = |t: usize| (0..5).map(|i| if i == t { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let mut table = HashMap::new();
    for (p, &t) in s.dataset.posts.iter().zip(&s.post_topics) {
        table.insert(p.post_id.clone(), onehot(t));
    }
    for (u, &t) in s.dataset.users.iter().zip(&s.user_topics) {
        table.insert(u.user_id.clone(), onehot(t));
    }
    let r = evaluate(&Table(table), &split.train, &split.test, &[1, 5]).unwrap();
    assert_eq!(r.precision_at(1), Some(1.0));
    assert_eq!(r.precision_at(5), Some(1.0));
}

#[test]
fn untrained_network_scores_near_like_rate() {
    let cfg = SynthConfig { users: 200, ..SynthConfig::default() };
    let d = generate_synthetic(&cfg, &mut Rng::seed_from_u64(5)).unwrap().dataset;
    let split = time_based_split(&d, 5).unwrap();
    let k = 10;
    let r = evaluate(&random_model(&split.train, 5), &split.train, &split.test, &[k]).unwrap();
    // hits under random order are hypergeometric per user
    let var: f64 = r
        .per_user
        .iter()
        .map(|u| {
            let (n, p, kf) = (u.candidates as f64, u.like_rate, k as f64);
            p * (1.0 - p) * (n - kf) / (n - 1.0) / kf
        })
        .sum::<f64>()
        / (r.per_user.len() as f64).powi(2);
    let p = r.precision_at(k).unwrap();
    assert!((p - r.random_baseline).abs() <= 3.0 * var.sqrt(), "{p} vs {} ± {}", r.random_baseline, 3.0 * var.sqrt());
}

#[test]
fn metrics_match_set_intersection() {
    let mut rng = Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let n = 1 + rng.below(30);
        let mut ids: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        rng.shuffle(&mut ids);
        let liked: HashSet<String> = (0..n + 5).filter(|_| rng.bernoulli(0.3)).map(|i| format!("q{i}")).collect();
        let k = 1 + rng.below(n + 3);
        let top: HashSet<&String> = ids.iter().take(k).collect();
        let hits = liked.iter().filter(|l| top.contains(l)).count() as f64;
        let (p, r) = precision_recall_at_k(&ids, &liked, k).unwrap();
        assert_eq!(p, hits / k as f64);
        assert_eq!(r, (!liked.is_empty()).then(|| hits / liked.len() as f64));
    }
}

proptest! {
    #[test]
    fn hits_grow_with_k(seed in 0u64..100_000) {
        let mut rng = Rng::seed_from_u64(seed);
        let n = 1 + rng.below(20);
        let ids: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
        let liked: HashSet<String> = ids.iter().filter(|_| rng.bernoulli(0.4)).cloned().collect();
        let hits: Vec<usize> = (1..=n + 2).map(|k| hits_at_k(&ids, &liked, k)).collect();
        prop_assert!(hits.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*hits.last().unwrap(), liked.len());
    }
}
