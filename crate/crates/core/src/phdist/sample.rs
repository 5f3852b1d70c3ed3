use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma};

use super::PhaseType;

const ABSORB: usize = usize::MAX;

struct Phase {
    rate: f64,
    /// Length of the run of equal-rate phases entered here that are traversed
    /// with probability one, ending at `run_end`.
    run_len: usize,
    run_end: usize,
    run_gamma: Option<Gamma<f64>>,
    /// Cumulative branching probabilities out of this phase.
    jumps: Vec<(f64, usize)>,
}

/// Precompiled sampler for the absorption time of a [`PhaseType`].
///
/// The phase chain is simulated directly. A maximal run of phases that share
/// a rate and hand over to each other with probability one contributes an
/// Erlang holding time, drawn as a single gamma variate; this keeps
/// high-order Erlang and block-Coxian chains O(blocks) per sample.
pub struct PhaseSampler {
    initial: Vec<(f64, usize)>,
    phases: Vec<Phase>,
}

fn cumulative(items: impl Iterator<Item = (f64, usize)>) -> Vec<(f64, usize)> {
    let mut acc = 0.0;
    let mut out: Vec<(f64, usize)> = items
        .filter(|&(w, _)| w > 0.0)
        .map(|(w, j)| {
            acc += w;
            (acc, j)
        })
        .collect();
    if let Some(last) = out.last_mut() {
        last.0 = f64::INFINITY;
    }
    out
}

fn pick<R: Rng + ?Sized>(cdf: &[(f64, usize)], total: f64, rng: &mut R) -> usize {
    if cdf.len() == 1 {
        return cdf[0].1;
    }
    let u: f64 = rng.random::<f64>() * total;
    for &(c, j) in cdf {
        if u < c {
            return j;
        }
    }
    cdf[cdf.len() - 1].1
}

impl PhaseSampler {
    pub fn new(ph: &PhaseType) -> Self {
        let p = ph.order();
        let exits = ph.exit_rates();
        let mut phases: Vec<Phase> = (0..p)
            .map(|i| {
                let rate = -ph.diag()[i];
                let jumps = cumulative(
                    ph.offdiag()[i]
                        .iter()
                        .map(|&(j, v)| (v / rate, j))
                        .chain(std::iter::once((exits[i] / rate, ABSORB))),
                );
                Phase { rate, run_len: 1, run_end: i, run_gamma: None, jumps }
            })
            .collect();

        // Deterministic same-rate successor, if any.
        let succ: Vec<Option<usize>> = (0..p)
            .map(|i| {
                let ph_i = &phases[i];
                match ph_i.jumps.as_slice() {
                    [(_, j)] if *j != ABSORB && *j != i && phases[*j].rate == ph_i.rate => Some(*j),
                    _ => None,
                }
            })
            .collect();

        // 0 = unvisited, 1 = on the current walk, 2 = resolved
        let mut state = vec![0u8; p];
        let mut resolved: Vec<(usize, usize)> = (0..p).map(|i| (i, 1)).collect();
        for start in 0..p {
            if state[start] == 2 {
                continue;
            }
            let mut path = Vec::new();
            let mut cur = start;
            loop {
                if state[cur] == 2 {
                    break;
                }
                if state[cur] == 1 {
                    // cycle without exit; cannot occur for a validated PH
                    break;
                }
                state[cur] = 1;
                path.push(cur);
                match succ[cur] {
                    Some(n) => cur = n,
                    None => break,
                }
            }
            // unwind: the last node on the path ends its own run unless it
            // continues into an already-resolved run
            let mut tail = match path.last() {
                Some(&last) => match succ[last] {
                    Some(n) if state[n] == 2 => (resolved[n].0, resolved[n].1 + 1),
                    _ => (last, 1),
                },
                None => continue,
            };
            for (pos, &node) in path.iter().enumerate().rev() {
                if pos + 1 < path.len() {
                    tail = (tail.0, tail.1 + 1);
                }
                resolved[node] = tail;
                state[node] = 2;
            }
        }
        for (i, ph_i) in phases.iter_mut().enumerate() {
            let (end, len) = resolved[i];
            ph_i.run_end = end;
            ph_i.run_len = len;
            if len > 1 {
                ph_i.run_gamma = Some(Gamma::new(len as f64, 1.0).expect("positive shape"));
            }
        }
        let initial = cumulative(ph.alpha().iter().enumerate().map(|(j, &a)| (a, j)));
        PhaseSampler { initial, phases }
    }

    /// Draws one absorption time.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut phase = pick(&self.initial, 1.0, rng);
        let mut t = 0.0;
        loop {
            let st = &self.phases[phase];
            let e: f64 = match &st.run_gamma {
                None => Exp1.sample(rng),
                Some(g) => g.sample(rng),
            };
            t += e / st.rate;
            let end = &self.phases[st.run_end];
            let next = pick(&end.jumps, 1.0, rng);
            if next == ABSORB {
                return t;
            }
            phase = next;
        }
    }
}

/// `n` i.i.d. absorption-time samples from `ph`.
pub fn draw_variates<R: Rng + ?Sized>(ph: &PhaseType, n: usize, rng: &mut R) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let sampler = PhaseSampler::new(ph);
    (0..n).map(|_| sampler.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample_moments(x: &[f64], k: usize) -> Vec<f64> {
        (1..=k)
            .map(|i| x.iter().map(|v| v.powi(i as i32)).sum::<f64>() / x.len() as f64)
            .collect()
    }

    #[test]
    fn empty_draw() {
        let ph = PhaseType::exponential(1.0).unwrap();
        assert!(draw_variates(&ph, 0, &mut stream(1, 0)).is_empty());
    }

    #[test]
    fn exponential_sample_mean() {
        let n = 1_000_000;
        let ph = PhaseType::exponential(1.0).unwrap();
        let x = draw_variates(&ph, n, &mut stream(11, 0));
        let m = x.iter().sum::<f64>() / n as f64;
        assert!((m - 1.0).abs() < 3.0 / (n as f64).sqrt(), "mean {m}");
        assert!(x.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn erlang_two_sample_scv() {
        let n = 1_000_000;
        let ph = PhaseType::erlang(2, 2.0).unwrap();
        let x = draw_variates(&ph, n, &mut stream(12, 0));
        let m = sample_moments(&x, 2);
        let scv = m[1] / (m[0] * m[0]) - 1.0;
        assert!((scv - 0.5).abs() < 0.01, "scv {scv}");
    }

    #[test]
    fn collapsed_runs_match_phase_by_phase_walk() {
        // Erlang-50 collapses into one gamma draw; its moments must match the
        // analytic ones just like an uncollapsed chain would.
        let ph = PhaseType::erlang(50, 50.0).unwrap();
        let s = PhaseSampler::new(&ph);
        assert_eq!(s.phases[0].run_len, 50);
        assert_eq!(s.phases[0].run_end, 49);
        assert_eq!(s.phases[10].run_len, 40);
        let x: Vec<f64> = {
            let mut r = stream(3, 0);
            (0..200_000).map(|_| s.sample(&mut r)).collect()
        };
        let m = sample_moments(&x, 2);
        assert!((m[0] - 1.0).abs() < 0.002);
        assert!((m[1] / (m[0] * m[0]) - 1.0 - 0.02).abs() < 0.001);
    }

    #[test]
    fn block_coxian_runs() {
        let ph = PhaseType::coxian(&[1.0, 1.0, 3.0, 3.0, 3.0], &[1.0, 0.5, 1.0, 1.0]).unwrap();
        let s = PhaseSampler::new(&ph);
        // phase 0 -> 1 is same-rate and certain, phase 1 branches
        assert_eq!((s.phases[0].run_len, s.phases[0].run_end), (2, 1));
        assert_eq!((s.phases[2].run_len, s.phases[2].run_end), (3, 4));
        let mut r = stream(5, 0);
        let n = 400_000;
        let x: Vec<f64> = (0..n).map(|_| s.sample(&mut r)).collect();
        let m = sample_moments(&x, 3);
        for (i, (emp, exact)) in m.iter().zip(ph.moments(3)).enumerate() {
            let i = i + 1;
            let se = ((ph.moment(2 * i) - exact * exact) / n as f64).sqrt();
            assert!((emp - exact).abs() < 4.0 * se, "moment {i}: {emp} vs {exact}");
        }
    }
}
