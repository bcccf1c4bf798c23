//! Central-finite-difference gradients for verifying the tape.
//!
//! Deliberately independent of the tape: the loss is an opaque closure
//! evaluated at perturbed parameter values.

use super::{ParamSet, Tensor};

/// Numerical gradient of `loss` w.r.t. every scalar in `set`, by central
/// differences with the given step. Returns one tensor per entry, in set
/// order.
pub fn central_difference<F>(set: &ParamSet, step: f64, mut loss: F) -> Vec<Tensor>
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut work = set.clone();
    let mut grads = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let (rows, cols) = set.tensor_at(i).shape();
        let mut g = Tensor::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = work.tensor_at(i).data()[k];
            work.tensor_at_mut(i).data_mut()[k] = orig + step;
            let up = loss(&work);
            work.tensor_at_mut(i).data_mut()[k] = orig - step;
            let down = loss(&work);
            work.tensor_at_mut(i).data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// `|a - b| / max(|a|, |b|, floor)`. The floor keeps near-zero pairs from
/// reporting spurious errors below finite-difference resolution.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between analytic and numeric gradient lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(relative_error(av, nv, floor));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Binding, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Random 3-layer network: gradients from the tape must match central
    // finite differences (step 1e-5) within relative error 1e-4.
    #[test]
    fn three_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n_in, h1, h2) = (4, 5, 3);
        let mut set = ParamSet::new();
        set.register("w1", Tensor::uniform(n_in, h1, 0.5, &mut rng)).unwrap();
        set.register("b1", Tensor::uniform(1, h1, 0.5, &mut rng)).unwrap();
        set.register("w2", Tensor::uniform(h1, h2, 0.5, &mut rng)).unwrap();
        set.register("b2", Tensor::uniform(1, h2, 0.5, &mut rng)).unwrap();
        set.register("w3", Tensor::uniform(h2, 1, 0.5, &mut rng)).unwrap();
        let input = Tensor::uniform(1, n_in, 1.0, &mut rng);

        let forward = |set: &ParamSet, tape: &mut Tape, tracked: bool| {
            let bind = Binding::bind(tape, set, tracked);
            let x = tape.leaf(input.clone());
            let w1 = bind.var(set.id_of("w1").unwrap());
            let b1 = bind.var(set.id_of("b1").unwrap());
            let w2 = bind.var(set.id_of("w2").unwrap());
            let b2 = bind.var(set.id_of("b2").unwrap());
            let w3 = bind.var(set.id_of("w3").unwrap());
            let a1 = tape.matmul(x, w1).unwrap();
            let a1 = tape.add_row(a1, b1).unwrap();
            let a1 = tape.tanh(a1);
            let a2 = tape.matmul(a1, w2).unwrap();
            let a2 = tape.add_row(a2, b2).unwrap();
            let a2 = tape.sigmoid(a2);
            let out = tape.matmul(a2, w3).unwrap();
            let loss = tape.mul(out, out).unwrap();
            (bind, loss)
        };

        let mut tape = Tape::new();
        let (bind, loss) = forward(&set, &mut tape, true);
        tape.backward(loss).unwrap();
        let analytic = bind.grads(&tape, &set);

        let numeric = central_difference(&set, 1e-5, |s| {
            let mut t = Tape::new();
            let (_, l) = forward(s, &mut t, false);
            t.value(l).item()
        });

        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }

    // Every primitive op used anywhere in the crate, randomized shapes.
    #[test]
    fn primitive_ops_gradient_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..100 {
            let rows = 1 + (trial % 3);
            let cols = 2 + (trial % 4);
            let mut set = ParamSet::new();
            set.register("a", Tensor::uniform(rows, cols, 0.8, &mut rng)).unwrap();
            set.register("b", Tensor::uniform(rows, cols, 0.8, &mut rng)).unwrap();
            set.register("m", Tensor::uniform(cols, 2, 0.8, &mut rng)).unwrap();
            set.register("r", Tensor::uniform(1, cols, 0.8, &mut rng)).unwrap();
            set.register("s", Tensor::uniform(1, 1, 0.8, &mut rng)).unwrap();

            let forward = |set: &ParamSet, tape: &mut Tape, tracked: bool| {
                let bind = Binding::bind(tape, set, tracked);
                let a = bind.var(set.id_of("a").unwrap());
                let b = bind.var(set.id_of("b").unwrap());
                let m = bind.var(set.id_of("m").unwrap());
                let r = bind.var(set.id_of("r").unwrap());
                let s = bind.var(set.id_of("s").unwrap());

                let sum = tape.add(a, b).unwrap();
                let diff = tape.sub(a, b).unwrap();
                let prod = tape.mul(sum, diff).unwrap();
                let with_row = tape.add_row(prod, r).unwrap();
                let act = tape.tanh(with_row);
                let sig = tape.sigmoid(act);
                let sm = tape.softmax_rows(sig).unwrap();
                let proj = tape.matmul(sm, m).unwrap();
                let scaled = tape.mul_scalar(proj, s).unwrap();
                let aff = tape.affine(scaled, 1.5, 0.25);
                let cat = tape.concat_cols(&[aff, proj]).unwrap();
                let tr = tape.transpose(cat);
                let back = tape.transpose(tr);
                // Keep values positive for ln.
                let shifted = tape.affine(back, 0.25, 3.0);
                let logged = tape.ln(shifted);
                let loss = tape.sum(logged);
                (bind, loss)
            };

            let mut tape = Tape::new();
            let (bind, loss) = forward(&set, &mut tape, true);
            tape.backward(loss).unwrap();
            let analytic = bind.grads(&tape, &set);

            let numeric = central_difference(&set, 1e-5, |s| {
                let mut t = Tape::new();
                let (_, l) = forward(s, &mut t, false);
                t.value(l).item()
            });

            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "trial {trial}: max relative error {err}");
        }
    }

    // Gather/scatter, broadcast and pick, which need id bookkeeping.
    #[test]
    fn lookup_ops_gradient_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for trial in 0..100 {
            let vocab = 5 + (trial % 4);
            let dim = 3 + (trial % 3);
            let mut set = ParamSet::new();
            set.register("table", Tensor::uniform(vocab, dim, 0.8, &mut rng)).unwrap();
            set.register("v", Tensor::uniform(1, 3, 0.8, &mut rng)).unwrap();
            let ids = vec![trial % vocab, (trial + 2) % vocab, trial % vocab];
            let scatter_ids = vec![0, 2 + (trial % 3), 1];

            let forward = |set: &ParamSet, tape: &mut Tape, tracked: bool| {
                let bind = Binding::bind(tape, set, tracked);
                let table = bind.var(set.id_of("table").unwrap());
                let v = bind.var(set.id_of("v").unwrap());

                let emb = tape.embed(table, &ids).unwrap();
                let wide = tape.scatter_cols(v, &scatter_ids, 6).unwrap();
                let tiled = tape.broadcast_rows(wide, ids.len()).unwrap();
                let joined = tape.concat_cols(&[emb, tiled]).unwrap();
                let stacked = tape.concat_rows(&[joined, joined]).unwrap();
                let act = tape.tanh(stacked);
                let total = tape.sum(act);
                let picked = tape.pick(act, 1, 0).unwrap();
                let loss = tape.add(total, picked).unwrap();
                (bind, loss)
            };

            let mut tape = Tape::new();
            let (bind, loss) = forward(&set, &mut tape, true);
            tape.backward(loss).unwrap();
            let analytic = bind.grads(&tape, &set);

            let numeric = central_difference(&set, 1e-5, |s| {
                let mut t = Tape::new();
                let (_, l) = forward(s, &mut t, false);
                t.value(l).item()
            });

            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "trial {trial}: max relative error {err}");
        }
    }

    #[test]
    fn dropout_gradient_uses_recorded_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut set = ParamSet::new();
        set.register("x", Tensor::uniform(1, 8, 1.0, &mut rng)).unwrap();

        // Same rng seed on both the analytic and numeric paths so the mask
        // is identical, which is what makes FD valid for dropout.
        let run = |set: &ParamSet, tracked: bool| {
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, set, tracked);
            let x = bind.var(set.id_of("x").unwrap());
            let mut mask_rng = ChaCha8Rng::seed_from_u64(99);
            let dropped = tape.dropout(x, 0.5, &mut mask_rng);
            let sq = tape.mul(dropped, dropped).unwrap();
            let loss = tape.sum(sq);
            (tape, bind, loss)
        };

        let (mut tape, bind, loss) = run(&set, true);
        tape.backward(loss).unwrap();
        let analytic = bind.grads(&tape, &set);

        let numeric = central_difference(&set, 1e-5, |s| {
            let (t, _, l) = run(s, false);
            t.value(l).item()
        });
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "max relative error {err}");
    }

    // Identical seeds and inputs must produce bit-identical losses.
    #[test]
    fn tape_replay_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut set = ParamSet::new();
            set.register("w", Tensor::uniform(3, 3, 0.5, &mut rng)).unwrap();
            let x = Tensor::uniform(1, 3, 1.0, &mut rng);
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, &set, true);
            let xv = tape.leaf(x);
            let h = tape.matmul(xv, bind.var(set.id_of("w").unwrap())).unwrap();
            let h = tape.tanh(h);
            let sq = tape.mul(h, h).unwrap();
            let loss = tape.sum(sq);
            tape.value(loss).item()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }
}
