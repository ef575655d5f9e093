use cvib::corpus::{class_counts, generate_synthetic, load_jsonl, save_jsonl, AbsaInstance, Dataset, SyntheticSpec};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

/// Two-sided interval holding at least `level` of Binomial(n, p).
fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let b = Binomial::new(p, n).unwrap();
    let tail = (1.0 - level) / 2.0;
    (b.inverse_cdf(tail), b.inverse_cdf(1.0 - tail))
}

#[test]
fn cue_label_agreement_matches_rho() {
    let spec = SyntheticSpec {
        spurious_correlation: 0.95,
        train_size: 2000,
        ..SyntheticSpec::default()
    };
    let c = generate_synthetic(&spec).unwrap();
    for class in 0..spec.n_classes {
        let members: Vec<&AbsaInstance> = c.train.iter().filter(|x| x.label == class).collect();
        let agree = members
            .iter()
            .filter(|x| c.pools.cue_class(&x.text) == Some(class))
            .count() as u64;
        let (lo, hi) = binomial_interval(members.len() as u64, 0.95, 0.99);
        assert!(
            (lo..=hi).contains(&agree),
            "class {class}: {agree} of {} outside [{lo}, {hi}]",
            members.len()
        );
    }
}

#[test]
fn class_counts_follow_ratios() {
    let ratios = vec![0.5, 0.3, 0.2];
    let spec = SyntheticSpec {
        class_ratios: ratios.clone(),
        train_size: 10_000,
        ..SyntheticSpec::default()
    };
    let c = generate_synthetic(&spec).unwrap();
    let counts = class_counts(&c.train, 3).unwrap();
    assert_eq!(counts.iter().sum::<usize>(), 10_000);
    // each marginal is binomial; Bonferroni over the three classes
    for (k, (&n, &p)) in counts.iter().zip(&ratios).enumerate() {
        let (lo, hi) = binomial_interval(10_000, p, 1.0 - 0.01 / 3.0);
        assert!((lo..=hi).contains(&(n as u64)), "class {k}: {n} outside [{lo}, {hi}]");
    }
}

fn chi_square_p(table: &[Vec<f64>]) -> f64 {
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<f64> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let n: f64 = rows.iter().sum();
    let mut stat = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &o) in r.iter().enumerate() {
            let e = rows[i] * cols[j] / n;
            stat += (o - e).powi(2) / e;
        }
    }
    let dof = ((rows.len() - 1) * (cols.len() - 1)) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

fn cue_table(ds: &Dataset, spec: &SyntheticSpec, pools: &cvib::corpus::WordPools) -> Vec<Vec<f64>> {
    let mut t = vec![vec![0.0; spec.n_classes]; spec.n_classes];
    for x in ds.iter() {
        let cue = pools.cue_class(&x.text).expect("every sentence carries a cue");
        t[x.label][cue] += 1.0;
    }
    t
}

#[test]
fn ood_cue_is_independent_of_label() {
    for seed in [7, 11, 19] {
        let spec = SyntheticSpec {
            seed,
            ood_test_size: 500,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec).unwrap();
        let p = chi_square_p(&cue_table(&c.ood_test, &spec, &c.pools));
        assert!(p > 0.01, "seed {seed}: p = {p}");
        // the iid split keeps the bias, so the same test rejects there
        let p_iid = chi_square_p(&cue_table(&c.iid_test, &spec, &c.pools));
        assert!(p_iid < 1e-6, "seed {seed}: iid p = {p_iid}");
    }
}

#[test]
fn reference_counts_are_reported_verbatim() {
    let mut instances = Vec::new();
    for (label, n) in [(0, 2164), (1, 807), (2, 637)] {
        for _ in 0..n {
            instances.push(AbsaInstance {
                text: vec!["the".into(), "food".into()],
                aspect: vec!["food".into()],
                aspect_start: 1,
                aspect_end: 2,
                label,
            });
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("rest14.jsonl");
    save_jsonl(&Dataset::new(instances), &path).unwrap();
    let ds = load_jsonl(&path).unwrap();
    assert_eq!(class_counts(&ds, 3).unwrap(), vec![2164, 807, 637]);
}
