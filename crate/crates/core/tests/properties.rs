use std::path::Path;

use fairser_core::corpus::{Corpus, Split, Utterance};
use fairser_core::fairness::{
    bootstrap_ci, default_alpha_grid, gini, iswf, uar, BootstrapConfig, IswfMode, PredictionRecord,
};
use fairser_core::numerics::{scaled_dot_attention, softmax, Matrix};
use fairser_core::Exec;
use proptest::prelude::*;

fn brute_gini(u: &[f64]) -> f64 {
    let n = u.len() as f64;
    let mean = u.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for a in u {
        for b in u {
            s += (a - b).abs();
        }
    }
    s / (2.0 * n * n * mean)
}

fn confusion_uar(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut m = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        m[t][p] += 1;
    }
    let present: Vec<usize> = (0..classes)
        .filter(|&c| m[c].iter().sum::<usize>() > 0)
        .collect();
    present
        .iter()
        .map(|&c| m[c][c] as f64 / m[c].iter().sum::<usize>() as f64)
        .sum::<f64>()
        / present.len() as f64
}

fn records(truth: &[usize], pred: &[usize]) -> Vec<PredictionRecord> {
    truth
        .iter()
        .zip(pred)
        .enumerate()
        .map(|(i, (&t, &p))| PredictionRecord {
            id: format!("u{i}"),
            speaker: format!("s{}", i % 3),
            true_label: t,
            pred_label: p,
        })
        .collect()
}

fn labelled(max_c: usize) -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2..=max_c).prop_flat_map(|c| {
        (1usize..60).prop_flat_map(move |n| {
            (
                Just(c),
                prop::collection::vec(0..c, n),
                prop::collection::vec(0..c, n),
            )
        })
    })
}

fn positive_utils() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, 1..40)
}

fn naive_atkinson(u: &[f64], alpha: f64) -> f64 {
    let n = u.len() as f64;
    if alpha == 1.0 {
        return (u.iter().map(|x| x.ln()).sum::<f64>() / n).exp();
    }
    let r = 1.0 - alpha;
    (u.iter().map(|x| x.powf(r)).sum::<f64>() / n).powf(1.0 / r)
}

fn naive_verbatim(u: &[f64], alpha: f64) -> f64 {
    let r = 1.0 - alpha;
    u.iter().map(|x| x.powf(r)).sum::<f64>().powf(1.0 / r) / u.len() as f64
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shift(
        x in prop::collection::vec(-50.0f64..50.0, 1..12),
        c in -100.0f64..100.0,
    ) {
        let p = softmax(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_context_is_convex_combination(
        (d, k, q, keys, vals) in (1usize..6, 1usize..6).prop_flat_map(|(d, k)| (
            Just(d),
            Just(k),
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(-3.0f64..3.0, d * k),
            prop::collection::vec(-3.0f64..3.0, d * k),
        )),
    ) {
        let keys = Matrix::from_vec(k, d, keys).unwrap();
        let vals = Matrix::from_vec(k, d, vals).unwrap();
        let out = scaled_dot_attention(&q, &keys, &vals).unwrap();
        prop_assert!(out.weights.iter().all(|&w| w >= 0.0));
        prop_assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for j in 0..d {
            let lo = (0..k).map(|i| vals.get(i, j)).fold(f64::INFINITY, f64::min);
            let hi = (0..k).map(|i| vals.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.context[j] >= lo - 1e-12 && out.context[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn uar_matches_confusion_matrix((c, truth, pred) in labelled(6)) {
        let got = uar(&records(&truth, &pred), c).unwrap();
        prop_assert!((got - confusion_uar(&truth, &pred, c)).abs() < 1e-12);
    }

    #[test]
    fn uar_invariant_to_permutation_and_duplication(
        (c, truth, pred) in labelled(5),
        seed in any::<u64>(),
    ) {
        let recs = records(&truth, &pred);
        let base = uar(&recs, c).unwrap();
        let mut shuffled = recs.clone();
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert!((uar(&shuffled, c).unwrap() - base).abs() < 1e-12);
        let doubled: Vec<_> = recs.iter().chain(&recs).cloned().collect();
        prop_assert!((uar(&doubled, c).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn gini_matches_brute_force(u in prop::collection::vec(0.0f64..1.0, 1..=50)) {
        prop_assert!((gini(&u).unwrap() - brute_gini(&u)).abs() < 1e-12);
    }

    #[test]
    fn gini_scale_invariant(u in prop::collection::vec(0.0f64..1.0, 1..=50), k in 0.01f64..100.0) {
        let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
        prop_assert!((gini(&scaled).unwrap() - gini(&u).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gini_single_nonzero(n in 1usize..50, at in any::<prop::sample::Index>(), v in 0.01f64..1.0) {
        let mut u = vec![0.0; n];
        u[at.index(n)] = v;
        let want = (n as f64 - 1.0) / n as f64;
        prop_assert!((gini(&u).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn atkinson_monotone_and_bounded(u in positive_utils()) {
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        let min = u.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut prev = f64::INFINITY;
        for a in default_alpha_grid() {
            let w = iswf(&u, a, IswfMode::Atkinson).unwrap();
            prop_assert!(w <= prev, "W rose at alpha {}: {} > {}", a, w, prev);
            prop_assert!(w >= min * (1.0 - 1e-12) && w <= mean * (1.0 + 1e-12));
            prev = w;
        }
    }

    #[test]
    fn iswf_homogeneous_degree_one(
        u in positive_utils(),
        k in 0.1f64..10.0,
        alpha in 0.0f64..20.0,
    ) {
        let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
        for mode in [IswfMode::Atkinson, IswfMode::PaperVerbatim] {
            // Verbatim mode overflows near alpha = 1; homogeneity is checked where W is finite.
            let (Ok(w), Ok(ws)) = (iswf(&u, alpha, mode), iswf(&scaled, alpha, mode)) else {
                prop_assert_eq!(mode, IswfMode::PaperVerbatim);
                continue;
            };
            prop_assert!((ws - k * w).abs() <= 1e-10 * k * w);
        }
    }

    #[test]
    fn atkinson_continuous_at_one(u in positive_utils()) {
        let mean = u.iter().sum::<f64>() / u.len() as f64;
        let geo = iswf(&u, 1.0, IswfMode::Atkinson).unwrap();
        for a in [1.0 - 1e-6, 1.0 + 1e-6] {
            prop_assert!((iswf(&u, a, IswfMode::Atkinson).unwrap() - geo).abs() < 1e-5 * mean);
        }
    }

    #[test]
    fn log_domain_matches_naive(
        u in prop::collection::vec(0.05f64..1.0, 1..40),
        alpha in 0.0f64..=20.0,
    ) {
        let a = iswf(&u, alpha, IswfMode::Atkinson).unwrap();
        let n = naive_atkinson(&u, alpha);
        prop_assert!((a - n).abs() <= 1e-10 * n);
        if alpha != 1.0 {
            let p = iswf(&u, alpha, IswfMode::PaperVerbatim).unwrap();
            let pn = naive_verbatim(&u, alpha);
            prop_assert!((p - pn).abs() <= 1e-10 * pn);
        }
    }

    #[test]
    fn corpus_text_round_trips(
        rows in prop::collection::vec((0usize..3, prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 3)), 1..20),
    ) {
        let utts: Vec<Utterance> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (label, features))| Utterance {
                id: format!("s{}_{i:03}", i % 2),
                speaker: format!("s{}", i % 2),
                split: if i % 2 == 0 { Split::Train } else { Split::Test },
                label,
                features,
            })
            .collect();
        let corpus = Corpus::new(3, 0, 3, utts).unwrap();
        let back = Corpus::parse(&corpus.to_text(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, corpus);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bootstrap_deterministic_nonnegative_width((c, truth, pred) in labelled(4), seed in any::<u64>()) {
        let recs = records(&truth, &pred);
        let cfg = BootstrapConfig { resamples: 50, level: 0.9, seed };
        let a = bootstrap_ci(&recs, c, &cfg, Exec::Sequential).unwrap();
        let b = bootstrap_ci(&recs, c, &cfg, Exec::Sequential).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.hi >= a.lo);
    }
}
