use cvib::corpus::{generate_synthetic, load_jsonl, save_jsonl, tokenize, AbsaInstance, SyntheticSpec, Vocabulary};
use cvib::eval::{metrics, RobustnessReport};
use cvib::objective::{scl_loss, SclConfig};
use cvib::vib::{kl_closed_form, prune, MaskParams};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn reps(n: usize, d: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, n * d).prop_filter_map("nonzero rows", move |v| {
        let a = Array2::from_shape_vec((n, d), v).unwrap();
        a.rows()
            .into_iter()
            .all(|r| r.dot(&r) > 1e-3)
            .then_some(a)
    })
}

fn masks(mu: Vec<f64>, log_sigma: Vec<f64>) -> MaskParams<f64> {
    MaskParams {
        mu: vec![Array1::from(mu)],
        log_sigma: vec![Array1::from(log_sigma)],
        beta: vec![1.0],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scl_ignores_row_scale(
        (a, b, s) in (2usize..6, 2usize..6).prop_flat_map(|(n, d)| {
            (reps(n, d), reps(n, d), prop::collection::vec(0.1f64..10.0, 2 * n))
        }),
        tau in 0.05f64..1.0,
    ) {
        let cfg = SclConfig { temperature: tau, include_positive_in_denominator: false };
        let n = a.nrows();
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for i in 0..n {
            a2.row_mut(i).mapv_inplace(|v| v * s[i]);
            b2.row_mut(i).mapv_inplace(|v| v * s[n + i]);
        }
        let l1 = scl_loss(&a, &b, &cfg).unwrap();
        let l2 = scl_loss(&a2, &b2, &cfg).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-9 * l1.abs().max(1.0));
    }

    #[test]
    fn kl_grows_with_mu_and_shrinks_with_sigma(
        mu in 0.01f64..5.0,
        ls in -6.0f64..2.0,
        dm in 0.01f64..1.0,
        ds in 0.01f64..1.0,
    ) {
        let base = kl_closed_form(&masks(vec![mu], vec![ls])).unwrap().total;
        let more_mu = kl_closed_form(&masks(vec![mu + dm], vec![ls])).unwrap().total;
        let neg_mu = kl_closed_form(&masks(vec![-mu], vec![ls])).unwrap().total;
        let more_sigma = kl_closed_form(&masks(vec![mu], vec![ls + ds])).unwrap().total;
        prop_assert!(more_mu > base);
        prop_assert!(more_sigma < base);
        prop_assert_eq!(neg_mu, base);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn macro_f1_invariant_under_relabeling(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let gold: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = metrics(&gold, &pred, 4).unwrap();
        let g2: Vec<usize> = gold.iter().map(|&g| perm[g]).collect();
        let p2: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let m2 = metrics(&g2, &p2, 4).unwrap();
        prop_assert!((m.macro_f1 - m2.macro_f1).abs() <= 1e-12);
        prop_assert_eq!(m.accuracy, m2.accuracy);
        for k in 0..4 {
            prop_assert_eq!(m.per_class[k].f1, m2.per_class[perm[k]].f1);
        }
        prop_assert_eq!(m.confusion.iter().flatten().sum::<usize>(), gold.len());
    }

    #[test]
    fn robustness_drops_are_antisymmetric(
        a in prop::collection::vec((0usize..3, 0usize..3), 1..50),
        b in prop::collection::vec((0usize..3, 0usize..3), 1..50),
    ) {
        let split = |v: &Vec<(usize, usize)>| -> (Vec<usize>, Vec<usize>) { v.iter().cloned().unzip() };
        let (ga, pa) = split(&a);
        let (gb, pb) = split(&b);
        let ma = metrics(&ga, &pa, 3).unwrap();
        let mb = metrics(&gb, &pb, 3).unwrap();
        let ab = RobustnessReport::from_reports(ma.clone(), mb.clone());
        let ba = RobustnessReport::from_reports(mb, ma);
        prop_assert_eq!(ab.drop.accuracy, -ba.drop.accuracy);
        prop_assert_eq!(ab.drop.macro_f1, -ba.drop.macro_f1);
    }

    #[test]
    fn raising_threshold_never_retains_more(
        mu in prop::collection::vec(-2.0f64..2.0, 1..16),
        t1 in 0.0f64..100.0,
        dt in 0.0f64..100.0,
    ) {
        let ls: Vec<f64> = mu.iter().enumerate().map(|(i, _)| -3.0 + 0.3 * i as f64).collect();
        let p = masks(mu, ls);
        let lo = prune(&p, t1).unwrap().retained();
        let hi = prune(&p, t1 + dt).unwrap().retained();
        prop_assert!(hi[0] <= lo[0]);
    }

    #[test]
    fn tokenized_length_is_n_plus_m_plus_3(
        n in 1usize..12,
        m in 1usize..4,
        start in 0usize..12,
    ) {
        let start = start % n;
        let text: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        let aspect: Vec<String> = (0..m).map(|i| format!("a{i}")).collect();
        let inst = AbsaInstance { text, aspect, aspect_start: start, aspect_end: start + 1, label: 0 };
        let vocab = Vocabulary::from_tokens(inst.text.iter().cloned());
        let seq = tokenize(&inst, &vocab).unwrap();
        prop_assert_eq!(seq.len(), n + m + 3);
        prop_assert_eq!(seq.aspect_span.clone(), n + 2..n + 2 + m);
    }
}

#[test]
fn jsonl_round_trip_of_synthetic_data() {
    let spec = SyntheticSpec {
        train_size: 100,
        iid_test_size: 1,
        ood_test_size: 1,
        ..SyntheticSpec::default()
    };
    let c = generate_synthetic(&spec).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("train.jsonl");
    save_jsonl(&c.train, &path).unwrap();
    assert_eq!(load_jsonl(&path).unwrap(), c.train);
}
