//! Tape gradients against central finite differences over 100 seeds per case.

mod common;

use common::grad_cases::{loss_cases, op_cases, run, Case, SEEDS, TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semflow_core::autodiff::check::random_tensor;
use semflow_core::autodiff::Graph;

fn check_all(cases: Vec<Case>) {
    let failures: Vec<String> = cases
        .iter()
        .filter_map(|c| {
            let o = run(c);
            (!o.passed())
                .then(|| format!("{}: {:.3e} at seed {} (nonzero {})", c.name, o.worst, o.worst_seed, o.nonzero))
        })
        .collect();
    assert!(failures.is_empty(), "tolerance {TOL:e} exceeded:\n{}", failures.join("\n"));
}

#[test]
fn every_op_matches_finite_differences() {
    check_all(op_cases());
}

#[test]
fn every_loss_matches_finite_differences() {
    check_all(loss_cases());
}

#[test]
fn stop_gradient_blocks_everything() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&mut rng, &[3, 4]));
        let s = g.stop_gradient(x);
        let e = g.exp(s);
        let y = g.sum(e);
        g.backward(y).unwrap();
        assert!(g.grad(x).data().iter().all(|&v| v == 0.0));
    }
}
