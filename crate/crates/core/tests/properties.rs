use koopman_core::edmd::KoopmanMatrix;
use koopman_core::numerics::Matrix;
use koopman_core::ranking::{
    auxiliary_gaps, detection_certificate, detection_gaps, pagerank, pagerank_with_preference, renormalized_reference,
    row_normalize, transition_matrix, StochasticMatrix,
};
use proptest::prelude::*;

fn square(max: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (3..=max).prop_flat_map(|d| (Just(d), prop::collection::vec(0.01f64..1.0, d * d)))
}

/// A positive chain whose top-right block is shrunk by `leak`.
fn block_chain(d: usize, n: usize, entries: &[f64], leak: f64) -> StochasticMatrix {
    let a = Matrix::from_fn(d, d, |i, j| {
        let v = entries[i * d + j];
        if i < n && j >= n {
            v * leak
        } else {
            v
        }
    });
    StochasticMatrix::from_row_stochastic(row_normalize(&a).unwrap()).unwrap()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn rows_sum_to_one_and_ignore_row_scale((d, v) in square(7), scale in 0.1f64..10.0) {
        let a = Matrix::from_row_slice(d, d, &v);
        let p = row_normalize(&a).unwrap();
        for row in p.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let mut b = a.clone();
        b.row_mut(0).scale_mut(scale);
        prop_assert!((row_normalize(&b).unwrap() - &p).abs().max() < 1e-14);
    }

    #[test]
    fn scores_form_a_distribution((d, v) in square(8), alpha in 0.05f64..0.95) {
        let chain = block_chain(d, 1, &v, 1.0);
        for pi in [pagerank(&chain, alpha, None).unwrap(), pagerank(&chain, alpha, Some(&[0, d - 1])).unwrap()] {
            prop_assert!(pi.scores.iter().all(|&x| x >= 0.0));
            prop_assert!((pi.scores.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn ppr_is_linear_in_the_preference((d, v) in square(8), alpha in 0.05f64..0.95, t in 0.0f64..1.0) {
        let chain = block_chain(d, 1, &v, 1.0);
        let a = pagerank(&chain, alpha, Some(&[0])).unwrap();
        let b = pagerank(&chain, alpha, Some(&[d - 1])).unwrap();
        let mut pref = vec![0.0; d];
        pref[0] = t;
        pref[d - 1] += 1.0 - t;
        let mix = pagerank_with_preference(&chain, alpha, &pref).unwrap();
        let expected: Vec<f64> = a.scores.iter().zip(&b.scores).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        prop_assert!(l1(&mix.scores, &expected) < 1e-10);
    }

    #[test]
    fn closed_block_keeps_all_seeded_mass((d, v) in square(8), split in 1usize..4, alpha in 0.05f64..0.95) {
        let n = split.min(d - 1);
        let chain = block_chain(d, n, &v, 0.0);
        let pi = pagerank(&chain, alpha, Some(&[0])).unwrap();
        let tail: f64 = pi.scores[n..].iter().sum();
        prop_assert!(tail == 0.0, "tail mass {tail}");
    }

    #[test]
    fn closed_forms_match_direct_solves((d, v) in square(8), split in 1usize..4, alpha in 0.05f64..0.95) {
        let n = split.min(d - 1);
        let p0 = block_chain(d, n, &v, 0.0);
        let seeds: Vec<usize> = (0..n).collect();
        let r = auxiliary_gaps(&p0, n, alpha, Some(&seeds)).unwrap();
        let pr = detection_gaps(&pagerank(&p0, alpha, None).unwrap(), n).unwrap().delta;
        let ppr = detection_gaps(&pagerank(&p0, alpha, Some(&seeds)).unwrap(), n).unwrap().delta;
        prop_assert!((r.delta0_pr - pr).abs() < 1e-10, "{} vs {pr}", r.delta0_pr);
        prop_assert!((r.delta0_ppr.unwrap() - ppr).abs() < 1e-10);
        // the mixing relaxation never exceeds the exact gap
        prop_assert!(r.delta0_pr_lower <= r.delta0_pr + 1e-12);
    }

    #[test]
    fn leakage_moves_scores_by_at_most_the_bound(
        (d, v) in square(8), split in 1usize..4, alpha in 0.05f64..0.95, leak in 0.0f64..0.5,
    ) {
        let n = split.min(d - 1);
        let chain = block_chain(d, n, &v, leak);
        let p0 = renormalized_reference(&chain, n).unwrap();
        let r = detection_certificate(&chain, n, alpha, Some(&[0])).unwrap();
        for seeds in [None, Some(&[0usize][..])] {
            let a = pagerank(&chain, alpha, seeds).unwrap();
            let b = pagerank(&p0, alpha, seeds).unwrap();
            prop_assert!(l1(&a.scores, &b.scores) <= r.perturbation_bound + 1e-12);
        }
    }

    #[test]
    fn passing_certificates_imply_positive_gaps(
        (d, v) in square(7), split in 1usize..4, alpha in 0.05f64..0.95, leak in 0.0f64..0.05,
    ) {
        let n = split.min(d - 1);
        let chain = block_chain(d, n, &v, leak);
        let seeds: Vec<usize> = (0..n).collect();
        let r = detection_certificate(&chain, n, alpha, Some(&seeds)).unwrap();
        if r.pr_pass == Some(true) {
            prop_assert!(r.delta_pr.unwrap() > 0.0);
        }
        if r.pr_pass_relaxed == Some(true) {
            prop_assert!(r.pr_pass == Some(true));
        }
        if r.ppr_pass == Some(true) {
            prop_assert!(r.delta_ppr.unwrap() > 0.0);
        }
    }

    #[test]
    fn transition_matrix_ignores_scale_and_follows_relabeling(
        (d, v) in square(7), c in 0.1f64..10.0, shift in 1usize..6,
    ) {
        let signed: Vec<f64> = v.iter().enumerate().map(|(i, x)| if i % 3 == 0 { -x } else { *x }).collect();
        let k = KoopmanMatrix::anonymous(Matrix::from_row_slice(d, d, &signed)).unwrap();
        let p = transition_matrix(&k).unwrap();
        let scaled = KoopmanMatrix::anonymous(&k.k * c).unwrap();
        prop_assert!((transition_matrix(&scaled).unwrap().p - &p.p).abs().max() < 1e-14);

        let perm: Vec<usize> = (0..d).map(|a| (a + shift) % d).collect();
        let q = transition_matrix(&k.permute(&perm).unwrap()).unwrap();
        let a = pagerank(&p, 0.85, Some(&[perm[0]])).unwrap();
        let b = pagerank(&q, 0.85, Some(&[0])).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            prop_assert!((b.scores[new] - a.scores[old]).abs() < 1e-12);
        }
    }
}
