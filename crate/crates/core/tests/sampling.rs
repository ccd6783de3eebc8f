mod common;

use common::{inclusion_probabilities, interaction, post};
use postrank::data::{generate_synthetic, time_based_split, SynthConfig};
use postrank::encoding::{fit_cluster_models, post_descriptor_input, EncoderConfig};
use postrank::numkernel::Rng;
use postrank::sampling::{
    assemble_minibatch, draw_time_aware, time_aware_negatives, Kernel, SamplerConfig, SamplingIndex,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn cfg(window: i64, negatives: usize) -> SamplerConfig {
    SamplerConfig { window_secs: window, negatives_per_positive: negatives, ..SamplerConfig::default() }
}

#[test]
fn half_window_offset_is_picked_half_as_often() {
    let c = cfg(100, 1);
    let mut rng = Rng::seed_from_u64(1);
    let n = 100_000;
    let near = (0..n).filter(|_| draw_time_aware(1000, &[1000, 1050], &c, &mut rng).unwrap() == [0]).count();
    let p = 2.0 / 3.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((near as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{near}");
}

#[test]
fn five_candidates_match_sequential_oracle() {
    // offsets 0, 20, 50, 80, −30 in a window of 100 → weights 1, .8, .5, .2, .7
    let times = [1000, 1020, 1050, 1080, 970];
    let weights: Vec<f64> = times.iter().map(|&t| Kernel::Triangular.weight(t - 1000, 100)).collect();
    for (w, want) in weights.iter().zip([1.0, 0.8, 0.5, 0.2, 0.7]) {
        assert!((w - want).abs() < 1e-12);
    }
    let want = inclusion_probabilities(&weights, 3);
    assert!((want.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    let c = cfg(100, 3);
    let mut rng = Rng::seed_from_u64(2);
    let n = 100_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        for i in draw_time_aware(1000, &times, &c, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    for (i, &p) in want.iter().enumerate() {
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((counts[i] as f64 - n as f64 * p).abs() <= 3.0 * sigma, "candidate {i}: {} vs {p}", counts[i]);
    }
}

#[test]
fn outside_window_falls_back_to_uniform() {
    let c = cfg(10, 1);
    let times = [0, 50, 500, 5000, -400];
    let mut rng = Rng::seed_from_u64(3);
    let n = 100_000;
    let mut counts = [0f64; 5];
    for _ in 0..n {
        counts[draw_time_aware(200, &times, &c, &mut rng).unwrap()[0]] += 1.0;
    }
    let e = n as f64 / 5.0;
    let chi2: f64 = counts.iter().map(|o| (o - e) * (o - e) / e).sum();
    let critical = ChiSquared::new(4.0).unwrap().inverse_cdf(0.99);
    assert!(chi2 < critical, "chi2 {chi2} ≥ {critical}");
}

#[test]
fn window_members_come_first_then_uniform_remainder() {
    let c = cfg(10, 3);
    let mut rng = Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let got = draw_time_aware(100, &[0, 105, 300, 400, 500], &c, &mut rng).unwrap();
        assert_eq!(got[0], 1);
        assert_eq!(got.len(), 3);
        let mut sorted = got.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 3);
    }
}

#[test]
fn negatives_are_returned_by_id() {
    let posts = [post("x", 10, "a b", None), post("y", 5000, "c d", None)];
    let refs: Vec<_> = posts.iter().collect();
    let got = time_aware_negatives(&interaction("u", "z", 12), &refs, &cfg(100, 1), &mut Rng::seed_from_u64(0)).unwrap();
    assert_eq!(got, ["x"]);
    assert!(time_aware_negatives(&interaction("u", "z", 12), &[], &cfg(100, 1), &mut Rng::seed_from_u64(0)).is_err());
}

fn index() -> SamplingIndex {
    let synth = SynthConfig { users: 20, posts: 300, interactions_per_user: 12, ..SynthConfig::default() };
    let d = generate_synthetic(&synth, &mut Rng::seed_from_u64(5)).unwrap().dataset;
    let train = time_based_split(&d, 3).unwrap().train;
    let enc = EncoderConfig { text_dim: 32, user_clusters: 4, post_clusters: 6, ..EncoderConfig::default() };
    let clusters = fit_cluster_models(&train, &enc, 5).unwrap();
    let labels = train
        .posts
        .iter()
        .map(|p| clusters.post.assign(&post_descriptor_input(p, &enc).unwrap().text_vector.values))
        .collect();
    SamplingIndex::new(&train, labels).unwrap()
}

#[test]
fn negatives_are_never_acted_on() {
    let idx = index();
    let c = SamplerConfig { window_secs: 7 * 24 * 3600, negatives_per_positive: 10, ..SamplerConfig::default() };
    let mut rng = Rng::seed_from_u64(6);
    for user in 0..20 {
        for _ in 0..20 {
            let t = 1_478_476_800 + rng.below(7 * 24 * 3600) as i64;
            for j in idx.negatives_for(user, t, &c, &mut rng).unwrap() {
                assert!(!idx.acted(user).contains(&j));
            }
        }
    }
}

#[test]
fn minibatch_triplets_respect_roles() {
    let idx = index();
    let c = SamplerConfig { minibatch_size: 16, negatives_per_positive: 4, ..SamplerConfig::default() };
    let mut rng = Rng::seed_from_u64(7);
    for _ in 0..20 {
        let mb = assemble_minibatch(&idx, &c, 0.2, 0.3, &mut rng).unwrap();
        assert_eq!(mb.batch.cross.len(), 64);
        assert_eq!(mb.batch.within.len() + mb.skipped_within, 64);
        for t in &mb.batch.cross {
            let (u, pos, neg) = (mb.users[t.user], mb.posts[t.positive], mb.posts[t.negative]);
            assert!(idx.acted(u).contains(&pos));
            assert!(!idx.acted(u).contains(&neg));
        }
        let cl = idx.post_cluster();
        for t in &mb.batch.within {
            let (a, s, o) = (mb.posts[t.anchor], mb.posts[t.same], mb.posts[t.other]);
            assert_ne!(a, s);
            assert_eq!(cl[a], cl[s]);
            assert_ne!(cl[a], cl[o]);
        }
    }
}
