use canids::detect::{
    best_f1_threshold, evaluate, in_top_k, pca_fit, pca_fit_windows, pca_score, score_windows, Confusion,
    Decision, DetectConfig,
};
use canids::model::{CanBertModel, ModelConfig};
use canids::training::{fit, TrainConfig};
use canids::windowing::{slide_windows, split_train_valid, IdVocabulary, OovPolicy, TokenStream, Window};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use std::sync::OnceLock;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_brute_force_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..1000 {
        let n = rng.random_range(0..60);
        let bias = rng.random::<f64>();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(bias)).collect();
        let predicted: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let c = Confusion::from_pairs(&labels, &predicted);

        let count = |y: bool, p: bool| labels.iter().zip(&predicted).filter(|&(&a, &b)| a == y && b == p).count();
        let (tp, fp, tn, fn_) = (count(true, true), count(false, true), count(false, false), count(true, false));
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (tp, fp, tn, fn_), "trial {trial}");
        assert_eq!(c.total(), n);

        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (div(tp, tp + fp), div(tp, tp + fn_));
        assert_eq!(c.precision(), p);
        assert_eq!(c.recall(), r);
        assert_eq!(c.f1(), div(2 * tp, 2 * tp + fp + fn_));
        let harmonic = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        assert!((c.f1() - harmonic).abs() < 1e-12);
    }
}

#[test]
fn best_threshold_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let (threshold, f1) = best_f1_threshold(&scores, &labels);
        let mut oracle = 0.0f64;
        for cut in scores.iter().map(|s| s - 1e-6) {
            let pred: Vec<bool> = scores.iter().map(|&s| s > cut).collect();
            oracle = oracle.max(Confusion::from_pairs(&labels, &pred).f1());
        }
        assert_eq!(f1, oracle);
        if f1 > 0.0 {
            let pred: Vec<bool> = scores.iter().map(|&s| s > threshold).collect();
            assert_eq!(Confusion::from_pairs(&labels, &pred).f1(), f1);
        }
    }
}

fn toy() -> Vec<Vec<f64>> {
    vec![
        vec![2.5, 2.4, 0.5],
        vec![0.5, 0.7, 1.9],
        vec![2.2, 2.9, 0.8],
        vec![1.9, 2.2, 1.1],
        vec![3.1, 3.0, 0.2],
    ]
}

/// Reconstruction errors from a dense symmetric eigensolver.
fn oracle_errors(samples: &[Vec<f64>], n: usize, queries: &[Vec<f64>]) -> Vec<f64> {
    let (rows, dim) = (samples.len(), samples[0].len());
    let x = DMatrix::from_fn(rows, dim, |i, j| samples[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(rows, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / rows as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    queries
        .iter()
        .map(|q| {
            let c: Vec<f64> = q.iter().zip(mean.iter()).map(|(a, m)| a - m).collect();
            let mut residual = c.clone();
            for &k in &order[..n] {
                let v = eig.eigenvectors.column(k);
                let coef: f64 = c.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                for (r, b) in residual.iter_mut().zip(v.iter()) {
                    *r -= coef * b;
                }
            }
            residual.iter().map(|r| r * r).sum()
        })
        .collect()
}

#[test]
fn pca_errors_match_dense_eigensolver() {
    let samples = toy();
    let queries = [samples.clone(), vec![vec![0.0, 0.0, 0.0], vec![5.0, -1.0, 2.0]]].concat();
    for n in 1..3 {
        let pca = pca_fit(&samples, n).unwrap();
        let oracle = oracle_errors(&samples, n, &queries);
        for (q, o) in queries.iter().zip(oracle) {
            let e = pca.reconstruction_error(q);
            assert!((e - o).abs() < 1e-8, "n={n}: {e} vs {o}");
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

#[test]
fn pca_errors_are_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            let a = rng.random_range(-3.0..3.0);
            vec![a, 2.0 * a + rng.random_range(-0.1..0.1), rng.random_range(-0.5..0.5), 1.0]
        })
        .collect();
    let q = random_rotation(&mut rng, 4);
    let rotate = |v: &Vec<f64>| -> Vec<f64> { (&q * nalgebra::DVector::from_vec(v.clone())).iter().copied().collect() };
    let rotated: Vec<Vec<f64>> = samples.iter().map(rotate).collect();
    let a = pca_fit(&samples, 2).unwrap();
    let b = pca_fit(&rotated, 2).unwrap();
    for (s, r) in samples.iter().zip(&rotated) {
        assert!((a.reconstruction_error(s) - b.reconstruction_error(r)).abs() < 1e-9);
    }
}

#[test]
fn pca_flags_unusual_histograms() {
    let tokens: Vec<u32> = (0..400).map(|i| i % 4).collect();
    let stream = TokenStream { labels: vec![0; 400], tokens };
    let normal = slide_windows(&stream, 8, 1).unwrap();
    let mut pca = pca_fit_windows(&normal, 6, 2).unwrap();
    let odd = Window::new(vec![0; 8], vec![1; 8], 0);
    let scores: Vec<f64> = normal.iter().chain([&odd]).map(|w| pca_score(&pca, w)).collect();
    let labels: Vec<bool> = (0..scores.len()).map(|i| i == normal.len()).collect();
    assert_eq!(pca.calibrate(&scores, &labels), 1.0);
    assert!(pca.is_abnormal(pca_score(&pca, &odd)));
    assert!(!pca.is_abnormal(pca_score(&pca, &normal[3])));
}

proptest! {
    #[test]
    fn top_k_hits_are_monotone_in_k(
        logits in proptest::collection::vec(-3i32..3, 3..20),
        target in 0usize..20,
    ) {
        let logits: Vec<f64> = logits.into_iter().map(f64::from).collect();
        let vocab_len = logits.len() - 2;
        let target = target % logits.len();
        let mut prev = false;
        for k in 1..=vocab_len {
            let hit = in_top_k(&logits, target, k, vocab_len);
            prop_assert!(!prev || hit);
            prev = hit;
        }
        prop_assert_eq!(prev, target < vocab_len);
        // Brute force: rank by (logit desc, token asc).
        if target < vocab_len {
            let mut order: Vec<usize> = (0..vocab_len).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            let rank = order.iter().position(|&j| j == target).unwrap();
            for k in 1..=vocab_len {
                prop_assert_eq!(in_top_k(&logits, target, k, vocab_len), rank < k);
            }
        }
    }
}

struct Fixture {
    model: CanBertModel,
    vocab: IdVocabulary,
    normal: Vec<Window>,
    mixed: Vec<Window>,
}

/// A small model trained on a cyclic id pattern, plus windows with the
/// pattern broken by an injected id.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(build_fixture)
}

fn build_fixture() -> Fixture {
    let vocab = IdVocabulary::from_ids((1..=12).map(|i| i * 0x10)).unwrap();
    let pattern: Vec<u32> = (0..1200).map(|i| (i % 12) as u32).collect();
    let stream = TokenStream { labels: vec![0; pattern.len()], tokens: pattern.clone() };
    let (train, valid) = split_train_valid(slide_windows(&stream, 16, 1).unwrap(), 0.1).unwrap();
    let config = ModelConfig {
        layers: 1,
        d_model: 32,
        d_ff: 64,
        heads: 2,
        ..ModelConfig::new(16, vocab.len())
    };
    let mut model = CanBertModel::new(config, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 40,
        ..TrainConfig::default()
    };
    fit(&mut model, &train, &valid, &cfg).unwrap();

    let mut tokens = pattern[..400].to_vec();
    let mut labels = vec![0u8; 400];
    for i in (50..400).step_by(37) {
        tokens[i] = (tokens[i] + 6) % 12;
        labels[i] = 1;
    }
    tokens[300] = vocab.unk_token();
    labels[300] = 1;
    let mixed = slide_windows(&TokenStream { tokens, labels }, 16, 1).unwrap();
    Fixture { model, vocab, normal: valid, mixed }
}

#[test]
fn detection_rules_are_consistent() {
    let f = fixture();
    let base = DetectConfig {
        passes: 2,
        seed: 4,
        ..DetectConfig::default()
    };

    // Larger k never flags more windows with the same masks.
    let mut prev = usize::MAX;
    for k in 1..=6 {
        let (scores, _) = score_windows(&f.model, &f.vocab, &f.mixed, &DetectConfig { k, ..base.clone() }).unwrap();
        let flagged = scores.iter().filter(|s| s.abnormal).count();
        assert!(flagged <= prev, "k={k}");
        prev = flagged;
    }
    // k = M accepts every real id, so only UNK can miss.
    let all = DetectConfig { k: f.vocab.len(), ..base.clone() };
    let (scores, _) = score_windows(&f.model, &f.vocab, &f.mixed, &all).unwrap();
    for (w, s) in f.mixed.iter().zip(&scores) {
        if !w.contains_token(f.vocab.unk_token()) {
            assert_eq!(s.misses, 0);
        }
    }

    // all-miss flags a subset of any-miss.
    let any = score_windows(&f.model, &f.vocab, &f.mixed, &base).unwrap().0;
    let every = DetectConfig { decision: Decision::AllMiss, ..base.clone() };
    let every = score_windows(&f.model, &f.vocab, &f.mixed, &every).unwrap().0;
    for (a, e) in any.iter().zip(&every) {
        assert!(!e.abnormal || a.abnormal);
        assert_eq!(a.masked, e.masked);
    }

    // Flag policy marks every window holding UNK without scoring it.
    let flag = DetectConfig { oov_policy: OovPolicy::Flag, ..base.clone() };
    let flagged = score_windows(&f.model, &f.vocab, &f.mixed, &flag).unwrap().0;
    for (w, s) in f.mixed.iter().zip(&flagged) {
        assert_eq!(s.oov_flagged, w.contains_token(f.vocab.unk_token()));
        if s.oov_flagged {
            assert!(s.abnormal);
        }
    }
}

#[test]
fn trained_toy_model_separates_broken_patterns() {
    let f = fixture();
    let cfg = DetectConfig { k: 2, passes: 3, ..DetectConfig::default() };
    let normal = evaluate(&f.model, &f.vocab, &f.normal, &cfg).unwrap();
    let fp_rate = normal.confusion.fp as f64 / normal.windows as f64;
    assert!(fp_rate < 0.05, "{:?}", normal.confusion);
    let report = evaluate(&f.model, &f.vocab, &f.mixed, &cfg).unwrap();
    assert!(report.recall > 0.75 && report.precision > 0.9, "{:?}", report.confusion);
    assert_eq!(report.scores.len(), f.mixed.len());
}

#[test]
fn detection_is_reproducible_across_thread_counts() {
    let f = fixture();
    let cfg = DetectConfig { seed: 8, batch_size: 7, ..DetectConfig::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| evaluate(&f.model, &f.vocab, &f.mixed, &cfg).unwrap())
    };
    let a = run(1);
    assert!(a.same_outcome(&run(1)));
    assert!(a.same_outcome(&run(4)));
    // Masks depend on the window, not on how windows are batched.
    let b = evaluate(&f.model, &f.vocab, &f.mixed, &DetectConfig { batch_size: 64, ..cfg.clone() }).unwrap();
    assert_eq!(a.scores, b.scores);
}

#[test]
fn bad_inputs_are_rejected() {
    let f = fixture();
    assert!(evaluate(&f.model, &f.vocab, &[], &DetectConfig::default()).is_err());
    let short = Window::new(vec![0; 8], vec![0; 8], 0);
    assert!(evaluate(&f.model, &f.vocab, &[short], &DetectConfig::default()).is_err());
    let k0 = DetectConfig { k: 0, ..DetectConfig::default() };
    assert!(evaluate(&f.model, &f.vocab, &f.normal, &k0).is_err());
    let other = IdVocabulary::from_ids([1, 2, 3]).unwrap();
    assert!(evaluate(&f.model, &other, &f.normal, &DetectConfig::default()).is_err());
}
