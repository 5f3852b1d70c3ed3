use tandemflow::descriptors::estimate_autocorr;
use tandemflow::phdist::{generate_library, GenConfig, PhaseType};
use tandemflow::simulator::{simulate_batch, simulate_tandem, TandemSpec};

fn exp(mean: f64) -> PhaseType {
    PhaseType::exponential(1.0 / mean).unwrap()
}

#[test]
fn mm1_half_load() {
    let spec = TandemSpec::new(exp(1.0), vec![exp(0.5)]).unwrap();
    let r = simulate_tandem(&spec, 1_000_000, 0.1, 5).unwrap();
    let st = &r.stations[0];
    let total: f64 = st.pmf_counts.iter().sum();
    assert!((total - r.sim_time).abs() < 1e-6 * r.sim_time);
    assert!((st.pmf_counts[0] / total - 0.5).abs() < 0.01);
    assert!((st.mean_occupancy() - 1.0).abs() < 0.02);
    assert!(st.departures.iter().all(|&d| d > 0.0));
    assert!(estimate_autocorr(&st.departures, 1, 1, 1).unwrap().abs() < 0.01);
}

#[test]
fn second_station_sees_poisson_input() {
    let spec = TandemSpec::new(exp(1.0), vec![exp(0.5), exp(0.7)]).unwrap();
    let r = simulate_tandem(&spec, 1_000_000, 0.1, 6).unwrap();
    let st = &r.stations[1];
    let total: f64 = st.pmf_counts.iter().sum();
    assert!((st.pmf_counts[0] / total - 0.3).abs() < 0.01);
}

fn mixed_specs() -> Vec<TandemSpec> {
    let arr = generate_library(&GenConfig::new(4, 0.2, 4.0, 1.0, 21)).unwrap();
    let svc = generate_library(&GenConfig::new(8, 0.2, 4.0, 1.0, 22)).unwrap();
    let loads = [0.3, 0.6, 0.8, 0.9];
    (0..4)
        .map(|i| {
            let s1 = svc[2 * i].scale_to_mean(loads[i]).unwrap();
            let s2 = svc[2 * i + 1].scale_to_mean(loads[3 - i]).unwrap();
            TandemSpec::new(arr[i].clone(), vec![s1, s2]).unwrap()
        })
        .collect()
}

#[test]
fn little_busy_and_flow_conservation() {
    for (k, spec) in mixed_specs().iter().enumerate() {
        let r = simulate_tandem(spec, 1_000_000, 0.1, 30 + k as u64).unwrap();
        let lambda = r.stations[0].customers as f64 / r.sim_time;
        for (j, st) in r.stations.iter().enumerate() {
            let l = st.mean_occupancy();
            let w = st.mean_sojourn();
            assert!((l - lambda * w).abs() < 0.02 * l, "spec {k} station {j}: L {l} vs lambda W {}", lambda * w);
            let util = spec.services[j].mean();
            let busy = st.busy_time / r.sim_time;
            assert!((busy - util).abs() < 0.01 * util, "spec {k} station {j}: busy {busy} vs {util}");
            let change = st.occupancy_at_end as i64 - st.occupancy_at_start as i64;
            let balance = st.window_arrivals as i64 - change - st.window_departures as i64;
            assert!(balance.abs() <= 1, "spec {k} station {j}: {balance}");
            assert!(st.departures.iter().all(|&d| d > 0.0));
        }
    }
}

#[test]
fn batch_independent_of_thread_count() {
    let jobs: Vec<(TandemSpec, u64)> = mixed_specs().into_iter().zip(40..).collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| simulate_batch(&jobs, 50_000, 0.1))
    };
    let one: Vec<_> = run(1).into_iter().map(Result::unwrap).collect();
    let four: Vec<_> = run(4).into_iter().map(Result::unwrap).collect();
    assert_eq!(one, four);
    let again = simulate_tandem(&jobs[2].0, 50_000, 0.1, jobs[2].1).unwrap();
    assert_eq!(again, one[2]);
}
