use ilm::corpus::{build_vocabulary, mask_tokens, strip_markup, swap_pairs, wrap_with_markup, TokenId, Vocabulary};
use ilm::metrics::{
    binary_entropy, bootstrap_ci, classical_mds, d_in_d_out, distance_matrix, entropy_bias_of, paired_win_probability,
    percentile,
};
use ilm::rng;
use proptest::prelude::*;

fn vocab() -> Vocabulary {
    build_vocabulary(12, 3, 4, 9).unwrap()
}

fn sentences(v: &Vocabulary) -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    let ids = v.content_ids();
    prop::collection::vec(prop::collection::vec(prop::sample::select(ids), 1..10), 1..8)
}

fn points(max: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    (2..=max).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 3), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swapping_pairs_twice_is_identity(seqs in sentences(&vocab())) {
        let v = vocab();
        for s in &seqs {
            let once = swap_pairs(s, &v);
            prop_assert_eq!(once.len(), s.len());
            prop_assert_eq!(&swap_pairs(&once, &v), s);
        }
    }

    #[test]
    fn stripping_markup_undoes_wrapping(seqs in sentences(&vocab()), rate in 0.05f64..0.95, seed in any::<u64>()) {
        let v = vocab();
        let plain: Vec<Vec<TokenId>> = seqs.iter().map(|s| s.iter().copied().filter(|&t| !v.is_markup(t)).collect()).collect();
        let wrapped = wrap_with_markup(&plain, &v, rate, seed).unwrap();
        prop_assert_eq!(wrapped.len(), plain.len());
        for (w, p) in wrapped.iter().zip(&plain) {
            prop_assert_eq!(&strip_markup(w, &v), p);
        }
    }

    #[test]
    fn masking_invariants(seqs in sentences(&vocab()), rate in 0.01f64..0.99, seed in any::<u64>()) {
        let v = vocab();
        let b = mask_tokens(&seqs, &v, rate, 3, &mut rng::stream(seed, "p", &[])).unwrap();
        prop_assert_eq!(b.input_ids.len(), b.batch_size * b.seq_len);
        prop_assert_eq!(b.targets.len(), b.input_ids.len());
        prop_assert!(b.n_selected() >= 1);
        for i in 0..b.batch_size {
            for j in 0..b.seq_len {
                let at = i * b.seq_len + j;
                match seqs[i].get(j) {
                    None => {
                        prop_assert_eq!(b.input_ids[at], ilm::corpus::PAD);
                        prop_assert_eq!(b.targets[at], -100);
                    }
                    Some(&orig) => {
                        if b.targets[at] == -100 {
                            prop_assert_eq!(b.input_ids[at], orig);
                        } else {
                            prop_assert_eq!(b.targets[at], orig as i64);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn entropy_bias_is_bounded_and_symmetric(f in 0.0f64..10.0, m in 0.0f64..10.0) {
        prop_assume!(f + m > 0.0);
        let b = entropy_bias_of(f, m).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!((b - entropy_bias_of(m, f).unwrap()).abs() < 1e-12);
        prop_assert!((b - (1.0 - binary_entropy(f / (f + m)).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn distances_form_a_metric(vs in points(6)) {
        let d = distance_matrix(&vs);
        let n = vs.len();
        for i in 0..n {
            prop_assert_eq!(d[i][i], 0.0);
            for j in 0..n {
                prop_assert!(d[i][j] >= 0.0);
                prop_assert_eq!(d[i][j], d[j][i]);
                for k in 0..n {
                    prop_assert!(d[i][k] <= d[i][j] + d[j][k] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn d_in_d_out_matches_enumeration(vs in points(8), shift in 0usize..8) {
        let n = vs.len();
        prop_assume!(n >= 4);
        let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        labels.rotate_left(shift % n);
        let d = distance_matrix(&vs);
        let (din, dout) = d_in_d_out(&d, &labels).unwrap();
        let mut within = Vec::new();
        let mut across = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] == labels[j] { within.push(d[i][j]) } else { across.push(d[i][j]) }
            }
        }
        prop_assert_eq!(din, within.iter().sum::<f64>() / within.len() as f64);
        prop_assert_eq!(dout, across.iter().sum::<f64>() / across.len() as f64);
    }

    #[test]
    fn mds_recovers_planar_distances(pts in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 3..8)) {
        let d: Vec<Vec<f64>> = pts
            .iter()
            .map(|a| pts.iter().map(|b| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()).collect())
            .collect();
        let scale = d.iter().flatten().fold(0.0f64, |m, x| m.max(*x));
        prop_assume!(scale > 1e-3);
        let c = classical_mds(&d, 2).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let e = ((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2)).sqrt();
                prop_assert!((e - d[i][j]).abs() <= 1e-6 * scale, "{} vs {}", e, d[i][j]);
            }
        }
    }

    #[test]
    fn bootstrap_interval_is_ordered_and_bounded(xs in prop::collection::vec(-100.0f64..100.0, 2..30), seed in any::<u64>()) {
        let (lo, hi) = bootstrap_ci(&xs, 200, 0.9, seed).unwrap();
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= hi);
        prop_assert!(min - 1e-9 <= lo && hi <= max + 1e-9);
        prop_assert_eq!((lo, hi), bootstrap_ci(&xs, 200, 0.9, seed).unwrap());
    }

    #[test]
    fn percentile_is_monotone(mut xs in prop::collection::vec(-50.0f64..50.0, 1..20), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        xs.sort_by(f64::total_cmp);
        let (q1, q2) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(percentile(&xs, q1) <= percentile(&xs, q2));
        prop_assert_eq!(percentile(&xs, 0.0), xs[0]);
        prop_assert_eq!(percentile(&xs, 1.0), xs[xs.len() - 1]);
    }

    #[test]
    fn win_probability_complements(pairs in prop::collection::vec((0i32..5, 0i32..5), 1..30)) {
        let pairs: Vec<(f64, f64)> = pairs.into_iter().map(|(a, b)| (a as f64, b as f64)).collect();
        let flipped: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (b, a)).collect();
        let w = paired_win_probability(&pairs, true).unwrap();
        prop_assert!((0.0..=1.0).contains(&w));
        prop_assert!((w + paired_win_probability(&flipped, true).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((w - paired_win_probability(&flipped, false).unwrap()).abs() < 1e-12);
    }
}
