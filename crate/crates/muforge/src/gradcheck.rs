//! Central finite-difference oracle for tape gradients.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Mat, NodeId, Tape};

/// Compare the analytic gradient of a scalar-valued tape against central
/// finite differences, coordinate by coordinate.
///
/// `build` wires a fresh tape from the leaf holding `x` to a scalar root.
/// Returns the max over coordinates of
/// `|analytic - central| / max(1, |central|)`.
///
/// The caller is responsible for keeping `x` away from non-differentiable
/// points (hinge kinks, clamp edges); the check has no way to detect them.
pub fn grad_check<S, F>(build: F, x: &Mat<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Tape(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone())?;
    let root = build(&mut tape, leaf)?;
    if tape.shape(root) != (1, 1) {
        return Err(Error::Tape("grad_check root is not scalar".into()));
    }
    tape.forward()?;
    tape.backward(root)?;
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Mat::zeros(x.dim()));

    let step = S::from_f64(eps);
    let mut max_err = 0.0f64;
    for idx in ndarray::indices(x.dim()) {
        let mut plus = x.clone();
        plus[idx] = plus[idx] + step;
        tape.rebind(leaf, plus)?;
        tape.forward()?;
        let f_plus = tape.scalar_value(root)?.as_f64();

        let mut minus = x.clone();
        minus[idx] = minus[idx] - step;
        tape.rebind(leaf, minus)?;
        tape.forward()?;
        let f_minus = tape.scalar_value(root)?.as_f64();

        let central = (f_plus - f_minus) / (2.0 * eps);
        let err = (analytic[idx].as_f64() - central).abs() / central.abs().max(1.0);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::ClassWeights;
    use ndarray::Array2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_mat(rng: &mut StdRng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
    }

    #[test]
    fn quadratic_is_exact_to_fd_accuracy() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = random_mat(&mut rng, 1, 8, -1.0, 1.0);
        let err = grad_check(
            |t, leaf| {
                let sq = t.mul(leaf, leaf)?;
                let s = t.sum_all(sq);
                Ok(t.scale(s, 0.5))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Array2::<f64>::zeros((1, 1));
        assert!(grad_check(|t, leaf| Ok(t.sum_all(leaf)), &x, 0.0).is_err());
        assert!(grad_check(|t, leaf| Ok(t.sum_all(leaf)), &x, 0.5).is_err());
    }

    #[test]
    fn reports_non_finite_loss_at_perturbed_point() {
        // log(x) at x just above 0: the minus-side perturbation goes negative.
        let x = Array2::from_elem((1, 1), 5e-6);
        let err = grad_check(
            |t, leaf| {
                let y = t.log(leaf);
                Ok(t.sum_all(y))
            },
            &x,
            1e-5,
        );
        assert!(err.is_err());
    }

    // Every op kind: analytic adjoint vs central differences at random
    // points, f64, relative tolerance 1e-4.
    #[test]
    fn all_ops_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(20240901);
        let trials = 100;
        for trial in 0..trials {
            let n = rng.random_range(1..5usize);
            let d = rng.random_range(1..6usize);

            let checks: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, NodeId) -> crate::error::Result<NodeId>>, Array2<f64>)> = {
                let other = random_mat(&mut rng, n, d, -2.0, 2.0);
                let right = random_mat(&mut rng, d, 3, -2.0, 2.0);
                let x_nd = random_mat(&mut rng, n, d, -2.0, 2.0);
                // Keep log and hinge inputs away from their singular points.
                let x_pos = random_mat(&mut rng, n, d, 0.2, 3.0);
                let x_off_kink = {
                    let mut m = random_mat(&mut rng, n, d, 0.1, 2.0);
                    for v in m.iter_mut() {
                        if rng.random_bool(0.5) {
                            *v = -*v;
                        }
                    }
                    m
                };
                let x_row = random_mat(&mut rng, 1, d, -2.0, 2.0);
                let x_col = random_mat(&mut rng, n, 1, -2.0, 2.0);
                let classes: Vec<Vec<(usize, f64)>> = (0..n)
                    .map(|_| {
                        let k = rng.random_range(1..3usize);
                        (0..k)
                            .map(|_| (rng.random_range(0..d), rng.random_range(0.0..2.0)))
                            .collect()
                    })
                    .collect();
                let gather_ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..n)).collect();

                vec![
                    ("matmul", {
                        let right = right.clone();
                        Box::new(move |t: &mut Tape<f64>, leaf: NodeId| {
                            let r = t.constant(right.clone())?;
                            let m = t.matmul(leaf, r)?;
                            Ok(t.sum_all(m))
                        }) as Box<dyn Fn(&mut Tape<f64>, NodeId) -> crate::error::Result<NodeId>>
                    }, x_nd.clone()),
                    ("add", {
                        let other = other.clone();
                        Box::new(move |t, leaf| {
                            let o = t.constant(other.clone())?;
                            let y = t.add(leaf, o)?;
                            Ok(t.sum_all(y))
                        })
                    }, x_nd.clone()),
                    ("sub", {
                        let other = other.clone();
                        Box::new(move |t, leaf| {
                            let o = t.constant(other.clone())?;
                            let y = t.sub(leaf, o)?;
                            Ok(t.sum_all(y))
                        })
                    }, x_nd.clone()),
                    ("mul", {
                        let other = other.clone();
                        Box::new(move |t, leaf| {
                            let o = t.constant(other.clone())?;
                            let y = t.mul(leaf, o)?;
                            Ok(t.sum_all(y))
                        })
                    }, x_nd.clone()),
                    ("scale", Box::new(|t, leaf| {
                        let y = t.scale(leaf, -1.75);
                        Ok(t.sum_all(y))
                    }), x_nd.clone()),
                    ("add-scalar", Box::new(|t, leaf| {
                        let y = t.add_scalar(leaf, 0.37);
                        let sq = t.mul(y, y)?;
                        Ok(t.sum_all(sq))
                    }), x_nd.clone()),
                    ("tanh", Box::new(|t, leaf| {
                        let y = t.tanh(leaf);
                        Ok(t.sum_all(y))
                    }), x_nd.clone()),
                    ("sigmoid", Box::new(|t, leaf| {
                        let y = t.sigmoid(leaf);
                        Ok(t.sum_all(y))
                    }), x_nd.clone()),
                    ("exp", Box::new(|t, leaf| {
                        let y = t.exp(leaf);
                        Ok(t.sum_all(y))
                    }), x_nd.clone()),
                    ("log", Box::new(|t, leaf| {
                        let y = t.log(leaf);
                        Ok(t.sum_all(y))
                    }), x_pos.clone()),
                    ("hinge", Box::new(|t, leaf| {
                        let y = t.hinge(leaf);
                        Ok(t.sum_all(y))
                    }), x_off_kink.clone()),
                    ("clamp", Box::new(|t, leaf| {
                        let y = t.clamp(leaf, -1.0, 1.0);
                        let sq = t.mul(y, y)?;
                        Ok(t.sum_all(sq))
                    }), {
                        // keep away from the clamp edges at ±1
                        let mut m = x_nd.clone();
                        for v in m.iter_mut() {
                            if (v.abs() - 1.0).abs() < 0.05 {
                                *v += 0.2;
                            }
                        }
                        m
                    }),
                    ("concat", {
                        let other = other.clone();
                        Box::new(move |t, leaf| {
                            let o = t.constant(other.clone())?;
                            let y = t.concat(leaf, o)?;
                            let sq = t.mul(y, y)?;
                            Ok(t.sum_all(sq))
                        })
                    }, x_nd.clone()),
                    ("slice-cols", Box::new(move |t, leaf| {
                        let y = t.slice_cols(leaf, 0, 1)?;
                        let sq = t.mul(y, y)?;
                        Ok(t.sum_all(sq))
                    }), x_nd.clone()),
                    ("gather-rows", {
                        let ids = gather_ids.clone();
                        Box::new(move |t, leaf| {
                            let y = t.gather_rows(leaf, ids.clone())?;
                            let sq = t.mul(y, y)?;
                            Ok(t.sum_all(sq))
                        })
                    }, x_nd.clone()),
                    ("broadcast-rows", Box::new(move |t, leaf| {
                        let y = t.broadcast_rows(leaf, 5)?;
                        let sq = t.mul(y, y)?;
                        Ok(t.sum_all(sq))
                    }), x_row.clone()),
                    ("broadcast-cols", Box::new(move |t, leaf| {
                        let y = t.broadcast_cols(leaf, 4)?;
                        let sq = t.mul(y, y)?;
                        Ok(t.sum_all(sq))
                    }), x_col.clone()),
                    ("reduce-mean", Box::new(|t, leaf| {
                        let m = t.mean_all(leaf);
                        let sq = t.mul(m, m)?;
                        Ok(t.sum_all(sq))
                    }), x_nd.clone()),
                    ("reduce-sum-rows", Box::new(|t, leaf| {
                        let m = t.sum_rows(leaf);
                        let sq = t.mul(m, m)?;
                        Ok(t.sum_all(sq))
                    }), x_nd.clone()),
                    ("reduce-mean-rows", Box::new(|t, leaf| {
                        let m = t.mean_rows(leaf);
                        let sq = t.mul(m, m)?;
                        Ok(t.sum_all(sq))
                    }), x_nd.clone()),
                    ("reduce-sum-cols", Box::new(|t, leaf| {
                        let m = t.sum_cols(leaf);
                        let sq = t.mul(m, m)?;
                        Ok(t.sum_all(sq))
                    }), x_nd.clone()),
                    ("reduce-mean-cols", Box::new(|t, leaf| {
                        let m = t.mean_cols(leaf);
                        let sq = t.mul(m, m)?;
                        Ok(t.sum_all(sq))
                    }), x_nd.clone()),
                    ("softmax-cross-entropy", {
                        let classes = classes.clone();
                        Box::new(move |t, leaf| {
                            t.softmax_xent(leaf, ClassWeights { rows: classes.clone() })
                        })
                    }, x_nd.clone()),
                ]
            };

            for (name, build, x) in checks {
                let err = grad_check(build.as_ref(), &x, 1e-5)
                    .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
                assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
            }
        }
    }
}
