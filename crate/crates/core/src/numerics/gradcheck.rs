//! Central finite-difference oracle for every differentiable primitive.
//!
//! Used both by unit/acceptance tests and by the `gradcheck` CLI command.
//! The oracle path (perturb one input component, rebuild the whole record,
//! difference the scalar loss) shares nothing with the backward rules it
//! checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Builds a scalar loss from leaf tensors; returns (tape, loss, leaf ids).
pub type GraphFn = dyn Fn(&[Tensor]) -> Result<(Tape, usize, Vec<usize>), NumericsError>;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / denom
}

/// Compare the backward pass of `build` against central finite differences
/// over every component of every input.
pub fn check_graph(name: &str, inputs: &[Tensor], build: &GraphFn) -> CheckResult {
    let run = |tensors: &[Tensor]| -> f64 {
        let (tape, loss, _) = build(tensors).expect("graph construction");
        tape.value(loss)[0]
    };
    let (mut tape, loss, leaf_ids) = build(inputs).expect("graph construction");
    tape.backward(loss).expect("backward");
    let mut max_err: f64 = 0.0;
    for (pi, &leaf) in leaf_ids.iter().enumerate() {
        let analytic = tape.grad(leaf).expect("tracked leaf gradient").to_vec();
        for j in 0..inputs[pi].numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[j] -= FD_STEP;
            let numeric = (run(&plus) - run(&minus)) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[j], numeric));
        }
    }
    CheckResult { name: name.to_string(), max_rel_err: max_err, pass: max_err <= REL_TOL }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    // Keep values away from relu/maxpool kinks and log's pole.
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Run the finite-difference suite over every primitive at randomized
/// shapes (all within 4x8x8x8). Deterministic for a given seed.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let mut push = |r: CheckResult| results.push(r);

    let unary =
        |f: fn(&mut Tape, usize) -> Result<usize, NumericsError>| {
            move |inputs: &[Tensor]| -> Result<(Tape, usize, Vec<usize>), NumericsError> {
                let mut tape = Tape::new();
                let a = tape.leaf(&inputs[0], true);
                let y = f(&mut tape, a)?;
                // fold to scalar through a fixed weighting so every output
                // element influences the loss differently
                let w: Vec<f64> = (0..tape.value(y).len())
                    .map(|i| 0.3 + 0.1 * (i % 7) as f64)
                    .collect();
                let wt = Tensor::new(tape.shape(y).to_vec(), w).unwrap();
                let wid = tape.constant(&wt);
                let p = tape.mul(y, wid)?;
                let loss = tape.sum(p)?;
                Ok((tape, loss, vec![a]))
            }
        };

    let m = rng.gen_range(2..5);
    let k = rng.gen_range(2..5);
    let shape2 = vec![m, k];

    push(check_graph("add", &[rand_tensor(&mut rng, &shape2), rand_tensor(&mut rng, &shape2)], &{
        move |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let a = tape.leaf(&inputs[0], true);
            let b = tape.leaf(&inputs[1], true);
            let y = tape.add(a, b)?;
            let loss = tape.sum(y)?;
            Ok((tape, loss, vec![a, b]))
        }
    }));
    push(check_graph("sub", &[rand_tensor(&mut rng, &shape2), rand_tensor(&mut rng, &shape2)], &{
        move |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let a = tape.leaf(&inputs[0], true);
            let b = tape.leaf(&inputs[1], true);
            let y = tape.sub(a, b)?;
            let sq = tape.square(y)?;
            let loss = tape.sum(sq)?;
            Ok((tape, loss, vec![a, b]))
        }
    }));
    push(check_graph("mul", &[rand_tensor(&mut rng, &shape2), rand_tensor(&mut rng, &shape2)], &{
        move |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let a = tape.leaf(&inputs[0], true);
            let b = tape.leaf(&inputs[1], true);
            let y = tape.mul(a, b)?;
            let loss = tape.sum(y)?;
            Ok((tape, loss, vec![a, b]))
        }
    }));

    push(check_graph("scale", &[rand_tensor(&mut rng, &shape2)], &unary(|t, a| {
        t.scale(a, -1.7)
    })));
    push(check_graph("exp", &[rand_tensor(&mut rng, &shape2)], &unary(|t, a| t.exp(a))));
    push(check_graph("log", &[rand_positive(&mut rng, &shape2)], &unary(|t, a| t.log(a))));
    push(check_graph("square", &[rand_tensor(&mut rng, &shape2)], &unary(|t, a| {
        t.square(a)
    })));
    push(check_graph("relu", &[rand_tensor(&mut rng, &shape2)], &unary(|t, a| t.relu(a))));
    push(check_graph("gelu", &[rand_tensor(&mut rng, &shape2)], &unary(|t, a| t.gelu(a))));

    let (mm, kk, nn) = (rng.gen_range(2..5), rng.gen_range(2..6), rng.gen_range(2..5));
    push(check_graph(
        "matmul",
        &[rand_tensor(&mut rng, &[mm, kk]), rand_tensor(&mut rng, &[kk, nn])],
        &move |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let a = tape.leaf(&inputs[0], true);
            let b = tape.leaf(&inputs[1], true);
            let y = tape.matmul(a, b)?;
            let loss = tape.sum(y)?;
            Ok((tape, loss, vec![a, b]))
        },
    ));

    push(check_graph("transpose", &[rand_tensor(&mut rng, &[3, 5])], &unary(
        |t, a| t.transpose(a),
    )));
    push(check_graph("reshape", &[rand_tensor(&mut rng, &[4, 6])], &unary(|t, a| {
        t.reshape(a, vec![3, 8])
    })));
    push(check_graph("broadcast", &[rand_tensor(&mut rng, &[4])], &unary(|t, a| {
        t.broadcast(a, vec![3, 4])
    })));
    push(check_graph(
        "concat",
        &[rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 2])],
        &move |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let a = tape.leaf(&inputs[0], true);
            let b = tape.leaf(&inputs[1], true);
            let y = tape.concat(&[a, b], 1)?;
            let sq = tape.square(y)?;
            let loss = tape.sum(sq)?;
            Ok((tape, loss, vec![a, b]))
        },
    ));
    push(check_graph("slice", &[rand_tensor(&mut rng, &[4, 6])], &unary(|t, a| {
        t.slice(a, 1, 2, 3)
    })));
    push(check_graph("gather_rows", &[rand_tensor(&mut rng, &[5, 3])], &unary(
        |t, a| t.gather_rows(a, &[4, 1, 1, 0]),
    )));

    push(check_graph("sum", &[rand_tensor(&mut rng, &shape2)], &move |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let a = tape.leaf(&inputs[0], true);
        let loss = tape.sum(a)?;
        Ok((tape, loss, vec![a]))
    }));
    push(check_graph("mean", &[rand_tensor(&mut rng, &shape2)], &move |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let a = tape.leaf(&inputs[0], true);
        let sq = tape.square(a)?;
        let loss = tape.mean(sq)?;
        Ok((tape, loss, vec![a]))
    }));
    push(check_graph("sum_axis", &[rand_tensor(&mut rng, &[3, 4, 2])], &unary(
        |t, a| t.sum_axis(a, 1),
    )));
    push(check_graph("mean_axis", &[rand_tensor(&mut rng, &[3, 4, 2])], &unary(
        |t, a| t.mean_axis(a, 2),
    )));

    push(check_graph("softmax", &[rand_tensor(&mut rng, &[3, 5])], &unary(|t, a| {
        t.softmax(a, 1)
    })));

    push(check_graph(
        "layer_norm",
        &[
            rand_tensor(&mut rng, &[4, 6]),
            rand_positive(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
        ],
        &move |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let x = tape.leaf(&inputs[0], true);
            let g = tape.leaf(&inputs[1], true);
            let b = tape.leaf(&inputs[2], true);
            let y = tape.layer_norm(x, g, b, 1e-5)?;
            let w: Vec<f64> = (0..24).map(|i| 0.2 + 0.05 * (i % 5) as f64).collect();
            let wt = Tensor::new(vec![4, 6], w).unwrap();
            let wid = tape.constant(&wt);
            let p = tape.mul(y, wid)?;
            let loss = tape.sum(p)?;
            Ok((tape, loss, vec![x, g, b]))
        },
    ));

    push(check_graph(
        "linear",
        &[
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
            rand_tensor(&mut rng, &[2]),
        ],
        &move |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let x = tape.leaf(&inputs[0], true);
            let w = tape.leaf(&inputs[1], true);
            let b = tape.leaf(&inputs[2], true);
            let y = tape.linear(x, w, b)?;
            let sq = tape.square(y)?;
            let loss = tape.sum(sq)?;
            Ok((tape, loss, vec![x, w, b]))
        },
    ));

    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        let name = format!("conv2d(s{stride},p{pad})");
        push(check_graph(
            &name,
            &[
                rand_tensor(&mut rng, &[2, 3, 6, 5]),
                rand_tensor(&mut rng, &[4, 3, 3, 3]),
                rand_tensor(&mut rng, &[4]),
            ],
            &move |inputs: &[Tensor]| {
                let mut tape = Tape::new();
                let x = tape.leaf(&inputs[0], true);
                let w = tape.leaf(&inputs[1], true);
                let b = tape.leaf(&inputs[2], true);
                let y = tape.conv2d(x, w, b, stride, pad)?;
                let sq = tape.square(y)?;
                let loss = tape.sum(sq)?;
                Ok((tape, loss, vec![x, w, b]))
            },
        ));
    }

    push(check_graph("max_pool2d", &[rand_tensor(&mut rng, &[2, 2, 6, 6])], &unary(
        |t, a| t.max_pool2d(a, 2, 2),
    )));

    push(check_graph("mse_loss", &[
        rand_tensor(&mut rng, &[3, 4]),
        rand_tensor(&mut rng, &[3, 4]),
    ], &move |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let p = tape.leaf(&inputs[0], true);
        let q = tape.leaf(&inputs[1], true);
        let loss = tape.mse_loss(p, q)?;
        Ok((tape, loss, vec![p, q]))
    }));

    push(check_graph("cross_entropy", &[rand_tensor(&mut rng, &[4, 3])], &move |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let logits = tape.leaf(&inputs[0], true);
        let loss = tape.cross_entropy(logits, &[0, 2, 1, 2])?;
        Ok((tape, loss, vec![logits]))
    }));

    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for r in run_suite(20240901) {
            assert!(r.pass, "{} failed gradcheck: max rel err {:.3e}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dims = [(3usize, 5usize), (5, 4), (4, 2)];
        let mut inputs = vec![rand_tensor(&mut rng, &[2, 3])];
        for &(i, o) in &dims {
            inputs.push(rand_tensor(&mut rng, &[i, o]));
            inputs.push(rand_tensor(&mut rng, &[o]));
        }
        let targets = vec![0usize, 1];
        let r = check_graph("mlp3", &inputs, &move |inputs: &[Tensor]| {
            let mut tape = Tape::new();
            let ids: Vec<usize> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
            let mut h = ids[0];
            for l in 0..3 {
                h = tape.linear(h, ids[1 + 2 * l], ids[2 + 2 * l])?;
                if l < 2 {
                    h = tape.gelu(h)?;
                }
            }
            let loss = tape.cross_entropy(h, &targets)?;
            Ok((tape, loss, ids))
        });
        assert!(r.pass, "mlp3 gradcheck failed: {:.3e}", r.max_rel_err);
    }
}
