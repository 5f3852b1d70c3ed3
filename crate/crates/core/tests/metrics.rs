use proptest::prelude::*;
use tandemflow::metrics::*;

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn pmf() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, 1..30).prop_map(normalize)
}

proptest! {
    #[test]
    fn identities(v in prop::collection::vec(0.1f64..10.0, 1..20)) {
        prop_assert_eq!(mape(&v, &v).unwrap().percent, Some(0.0));
        prop_assert_eq!(mae(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn sae_symmetric_and_bounded((a, b) in (1usize..30).prop_flat_map(|n| (
        prop::collection::vec(0.001f64..1.0, n).prop_map(normalize),
        prop::collection::vec(0.001f64..1.0, n).prop_map(normalize),
    ))) {
        let ab = sae(&[a.clone()], &[b.clone()]).unwrap();
        let ba = sae(&[b], &[a.clone()]).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!(ab <= 2.0 + 1e-12);
        prop_assert_eq!(sae(&[a.clone()], &[a]).unwrap(), 0.0);
    }

    #[test]
    fn percentile_monotone_in_q(p in pmf(), q1 in 0.1f64..99.9, q2 in 0.1f64..99.9) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(pmf_percentile(&p, lo).unwrap() <= pmf_percentile(&p, hi).unwrap());
    }

    #[test]
    fn groups_partition(covs in prop::collection::vec((0.0f64..1.0, 0.0f64..15.0, 0.0f64..15.0, -0.6f64..0.6), 0..60)) {
        let recs: Vec<EvalRecord> = covs.iter().map(|&(u, a, s, r)| EvalRecord {
            covariates: Covariates { utilization: u, arrival_scv: a, service_scv: s, rho111: r },
            truth_pmf: Some(vec![0.5, 0.5]),
            pred_pmf: Some(vec![0.4, 0.6]),
            dims: None,
            truth_descriptor: None,
            pred_descriptor: None,
        }).collect();
        for g in [Grouping::UtilScv, Grouping::Autocorr] {
            let rep = grouped_report(&recs, g).unwrap();
            prop_assert_eq!(rep.groups.iter().map(|x| x.count).sum::<usize>(), recs.len());
            prop_assert_eq!(rep.total, recs.len());
        }
    }
}
