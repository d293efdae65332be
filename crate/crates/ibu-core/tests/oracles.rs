//! Independent-oracle checks: every routine here is validated against a
//! second computation path that shares no code with the implementation.

use ibu_core::{
    emd, project_to_simplex, single_input_mle_kl, single_input_mle_set, Distribution, Empirical,
    GroundMetric, Mechanism,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Exact simplex projection by enumerating candidate support sets: for each
/// non-empty subset S the equality-constrained minimizer shifts the S-entries
/// by a common amount; the feasible candidate closest to `v` is the
/// projection.
fn qp_projection_oracle(v: &[f64]) -> Vec<f64> {
    let m = v.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|&i| mask >> i & 1 == 1).collect();
        let sum: f64 = support.iter().map(|&i| v[i]).sum();
        let shift = (1.0 - sum) / support.len() as f64;
        let mut candidate = vec![0.0; m];
        let mut feasible = true;
        for &i in &support {
            let value = v[i] + shift;
            if value < 0.0 {
                feasible = false;
                break;
            }
            candidate[i] = value;
        }
        if !feasible {
            continue;
        }
        let dist: f64 = candidate.iter().zip(v).map(|(c, x)| (c - x) * (c - x)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, candidate));
        }
    }
    best.expect("some singleton support is always feasible").1
}

#[test]
fn projection_matches_the_subset_qp_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(2024);
    for trial in 0..200 {
        let m = rng.gen_range(2..=8);
        let v: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 6.0 - 3.0).collect();
        let projected = project_to_simplex(&v).unwrap();
        let oracle = qp_projection_oracle(&v);
        for (a, b) in projected.weights().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "trial {trial}: {projected:?} vs {oracle:?}");
        }
    }
}

/// On a unit-spaced line the earth mover's distance has a closed form: the
/// L1 distance between the cumulative distribution functions.
fn line_emd_oracle(p: &[f64], q: &[f64]) -> f64 {
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for i in 0..p.len() {
        cdf_gap += p[i] - q[i];
        total += cdf_gap.abs();
    }
    total
}

#[test]
fn emd_matches_the_cdf_oracle_on_lines() {
    let mut rng = ChaCha12Rng::seed_from_u64(77);
    for _ in 0..60 {
        let m = rng.gen_range(2..=30);
        let mut p: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        let mut q: Vec<f64> = (0..m).map(|_| rng.gen::<f64>()).collect();
        // Sparsify some entries so boundary supports get exercised.
        for i in 0..m {
            if rng.gen::<f64>() < 0.3 {
                p[i] = 0.0;
            }
            if rng.gen::<f64>() < 0.3 {
                q[i] = 0.0;
            }
        }
        let ps: f64 = p.iter().sum();
        let qs: f64 = q.iter().sum();
        if ps == 0.0 || qs == 0.0 {
            continue;
        }
        for x in p.iter_mut() {
            *x /= ps;
        }
        for x in q.iter_mut() {
            *x /= qs;
        }
        let pd = Distribution::new(p.clone()).unwrap();
        let qd = Distribution::new(q.clone()).unwrap();
        let ground = GroundMetric::line(m);
        let solved = emd(&pd, &qd, &ground).unwrap();
        let oracle = line_emd_oracle(&p, &q);
        assert!((solved - oracle).abs() < 1e-9, "solver {solved} vs cdf {oracle}");
    }
}

fn random_mechanism(rng: &mut ChaCha12Rng, inputs: usize, outputs: usize) -> Mechanism {
    let rows: Vec<Vec<f64>> = (0..inputs)
        .map(|_| {
            let raw: Vec<f64> = (0..outputs).map(|_| rng.gen::<f64>() + 0.05).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / sum).collect()
        })
        .collect();
    let in_labels = (0..inputs).map(|i| i.to_string()).collect();
    let out_labels = (0..outputs).map(|i| i.to_string()).collect();
    Mechanism::from_rows("random", in_labels, out_labels, rows).unwrap()
}

/// The likelihood-maximizing input set computed from per-row products of
/// mechanism entries must agree with the divergence-minimizing set.
#[test]
fn mle_set_and_kl_routes_agree() {
    let mut rng = ChaCha12Rng::seed_from_u64(4242);
    for trial in 0..100 {
        let inputs = rng.gen_range(2..=6);
        let outputs = rng.gen_range(2..=6);
        let mech = random_mechanism(&mut rng, inputs, outputs);
        let k = rng.gen_range(1..=40);
        let observations: Vec<usize> = (0..k).map(|_| rng.gen_range(0..outputs)).collect();
        let q = Empirical::from_observations(outputs, observations.iter().cloned()).unwrap();

        // Column likelihoods per the product form g_x = prod_z a_{x z}^(k q_z),
        // evaluated in the log domain.
        let column: Vec<f64> = (0..inputs)
            .map(|x| {
                let log_g: f64 = (0..outputs)
                    .filter(|&z| q.count(z) > 0)
                    .map(|z| q.count(z) as f64 * mech.prob(x, z).ln())
                    .sum();
                log_g.exp()
            })
            .collect();

        let rel_tol = 1e-9;
        let by_products = single_input_mle_set(&column, rel_tol).unwrap();
        let by_divergence = single_input_mle_kl(&q, &mech, rel_tol).unwrap();
        assert_eq!(by_products, by_divergence, "trial {trial}");
    }
}
