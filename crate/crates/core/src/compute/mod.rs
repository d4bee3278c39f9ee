//! Dense and sparse kernels plus the reverse-mode tape used by every model.

mod sparse;
mod tape;
mod tensor;

pub use sparse::CsrMatrix;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{dot, log_sigmoid, log_sigmoid_scalar, relu, sigmoid, sigmoid_scalar, softplus_scalar, Tensor2};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` at `x` against the analytic gradient.
    fn max_rel_err(x: &Tensor2, analytic: &Tensor2, f: impl Fn(&Tensor2) -> f64) -> f64 {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    fn ring(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            let j = (i + 1) % n;
            t.push((i, i, 1.0 / 3.0));
            t.push((i, j, 1.0 / 3.0));
            t.push((j, i, 1.0 / 3.0));
        }
        CsrMatrix::from_triplets(n, n, t).unwrap()
    }

    // Scalar probe: project onto a fixed column so each entry has its own sensitivity.
    fn probe(tape: &mut GradTape<'_>, y: Var) -> Var {
        let c = tape.value(y).cols();
        let w = tape.leaf(Tensor2::from_fn(c, 1, |i, _| 0.3 - 0.17 * i as f64)).unwrap();
        let prod = tape.matmul(y, w).unwrap();
        let prod = tape.sigmoid(prod);
        tape.sum(prod)
    }

    #[test]
    fn spmm_gradient_matches_central_difference() {
        let p = ring(5);
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h0 = random(&mut rng, 5, 3);
            let run = |h: &Tensor2| {
                let mut tape = GradTape::new();
                let hv = tape.leaf(h.clone()).unwrap();
                let y = tape.spmm(&p, hv).unwrap();
                let y = tape.square(y);
                let l = probe(&mut tape, y);
                (tape.value(l).item().unwrap(), tape.backward(l).unwrap().get(hv))
            };
            let (_, g) = run(&h0);
            assert!(max_rel_err(&h0, &g, |h| run(h).0) < 1e-6);
        }
    }

    #[test]
    fn matmul_gradient_matches_central_difference() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let a0 = random(&mut rng, 4, 3);
            let b0 = random(&mut rng, 3, 2);
            let run = |a: &Tensor2, b: &Tensor2| {
                let mut tape = GradTape::new();
                let av = tape.leaf(a.clone()).unwrap();
                let bv = tape.leaf(b.clone()).unwrap();
                let y = tape.matmul(av, bv).unwrap();
                let y = tape.square(y);
                let l = probe(&mut tape, y);
                let g = tape.backward(l).unwrap();
                (tape.value(l).item().unwrap(), g.get(av), g.get(bv))
            };
            let (_, ga, gb) = run(&a0, &b0);
            assert!(max_rel_err(&a0, &ga, |a| run(a, &b0).0) < 1e-6);
            assert!(max_rel_err(&b0, &gb, |b| run(&a0, b).0) < 1e-6);
        }
    }

    #[test]
    fn elementwise_gradients_match_central_difference() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
            // keep relu inputs away from the kink
            let x0 = random(&mut rng, 3, 4).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v } * 3.0);
            let b0 = random(&mut rng, 1, 4);
            let run = |x: &Tensor2, b: &Tensor2| {
                let mut tape = GradTape::new();
                let xv = tape.leaf(x.clone()).unwrap();
                let bv = tape.leaf(b.clone()).unwrap();
                let r = tape.relu(xv);
                let s = tape.sigmoid(xv);
                let ls = tape.log_sigmoid(xv);
                let a = tape.add(r, s).unwrap();
                let a = tape.add(a, ls).unwrap();
                let a = tape.add_row_bias(a, bv).unwrap();
                let a = tape.add_scalar(a, -0.25);
                let a = tape.scale(a, 1.7);
                let d = tape.pair_dots(a, vec![(0, 1), (2, 2), (1, 0)]).unwrap();
                let rows = tape.gather_rows(a, vec![2, 0, 2]).unwrap();
                let sq = tape.square(rows);
                let m = tape.mean(sq);
                let s1 = tape.sum(d);
                let l = tape.add(m, s1).unwrap();
                let g = tape.backward(l).unwrap();
                (tape.value(l).item().unwrap(), g.get(xv), g.get(bv))
            };
            let (_, gx, gb) = run(&x0, &b0);
            assert!(max_rel_err(&x0, &gx, |x| run(x, &b0).0) < 1e-5, "seed {seed}");
            assert!(max_rel_err(&b0, &gb, |b| run(&x0, b).0) < 1e-5, "seed {seed}");
        }
    }

    #[test]
    fn sum_of_leaf_gives_ones() {
        let mut tape = GradTape::new();
        let w = tape.leaf(Tensor2::from_fn(2, 3, |r, c| (r + c) as f64)).unwrap();
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap().get(w);
        assert_eq!(g, Tensor2::filled(2, 3, 1.0));
    }

    #[test]
    fn reused_leaf_accumulates_branch_gradients() {
        let w0 = Tensor2::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let grad_of = |branches: &[bool; 2]| {
            let mut tape = GradTape::new();
            let w = tape.leaf(w0.clone()).unwrap();
            let mut terms = Vec::new();
            if branches[0] {
                let sq = tape.square(w);
                terms.push(tape.sum(sq));
            }
            if branches[1] {
                let s = tape.sigmoid(w);
                terms.push(tape.sum(s));
            }
            let l = match terms[..] {
                [a] => a,
                [a, b] => tape.add(a, b).unwrap(),
                _ => unreachable!(),
            };
            tape.backward(l).unwrap().get(w)
        };
        let both = grad_of(&[true, true]);
        let sum = grad_of(&[true, false]).add(&grad_of(&[false, true])).unwrap();
        assert!(both.max_abs_diff(&sum) < 1e-15);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Tensor2::filled(2, 2, 1.0)).unwrap();
        let b = tape.leaf(Tensor2::filled(3, 1, 1.0)).unwrap();
        let l = tape.sum(a);
        assert_eq!(tape.backward(l).unwrap().get(b), Tensor2::zeros(3, 1));
    }

    #[test]
    fn foreign_or_non_scalar_loss_is_rejected() {
        let mut other = GradTape::new();
        let foreign = other.leaf(Tensor2::scalar(1.0)).unwrap();
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor2::zeros(2, 2)).unwrap();
        assert!(matches!(tape.backward(foreign), Err(crate::Error::DisconnectedLoss)));
        assert!(matches!(tape.backward(x), Err(crate::Error::NonScalarLoss((2, 2)))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = GradTape::new();
        let x = tape
            .leaf(Tensor2::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let r = tape.relu(x);
        let l = tape.sum(r);
        assert_eq!(tape.backward(l).unwrap().get(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn spmm_is_deterministic() {
        let p = ring(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random(&mut rng, 7, 5);
        let a = p.spmm(&h).unwrap();
        let b = p.spmm(&h).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        proptest! {
            #[test]
            fn log_sigmoid_is_non_positive(x in -1e6f64..1e6) {
                prop_assert!(log_sigmoid_scalar(x) <= 0.0);
            }

            #[test]
            fn sigmoid_is_symmetric(x in -700f64..700.0) {
                prop_assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() <= 1e-12);
            }
        }
    }
}
