//! Shared inputs for the criterion benches.

use rand::Rng;

use qptad_core::rng::{stream, streams};
use qptad_core::seqblocks::{discretize, DiscreteSsm, SsmParams};

/// A stable diagonal SSM with `n_state` states and a random input of length
/// `t`, drawn from the bench stream of `seed`.
pub fn scan_case(seed: u64, n_state: usize, t: usize) -> (DiscreteSsm, Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, streams::BENCH);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (b, c, u) = (draw(n_state), draw(n_state), draw(t));
    let d = discretize(&SsmParams::stable_diagonal(b, c.clone(), 0.1)).expect("stable parameters");
    (d, c, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use qptad_core::seqblocks::{conv_apply, kernel, scan};

    #[test]
    fn bench_case_paths_agree() {
        let (d, c, u) = scan_case(0, 8, 128);
        let ys = scan(&d, &c, &u);
        let yc = conv_apply(&u, &kernel(&d, &c, u.len())).unwrap();
        assert!(ys.iter().zip(&yc).all(|(a, b)| (a - b).abs() <= 1e-9));
    }
}
