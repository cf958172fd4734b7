//! Finite-difference verification of every autodiff primitive, plus the
//! full encoder + contrastive-loss composite, shared between the
//! `gradients` and `acceptance` test targets. Each primitive is composed
//! with a fixed random linear functional so the check exercises non-unit
//! upstream gradients.

use super::{check_grad, finite_diff, random_tensor, rel_error, seeded};
use episodica::encoder::{EncoderModel, Layer};
use episodica::loss::{ntxent_simclr, LossConfig};
use episodica::tensor::{Tape, Tensor, Var};

const PRIMITIVE_TOL: f64 = 1e-3;
const COMPOSITE_TOL: f64 = 1e-2;
const INSTANCES: u64 = 20;

/// Reduce any output to a scalar through a fixed random functional.
fn through(weights: Tensor, op: impl Fn(&Tape, Var) -> Var) -> impl Fn(&Tape, Var) -> Var {
    move |tape, x| {
        let y = op(tape, x);
        let weighted = tape.mul_const(y, &weights).unwrap();
        tape.sum(weighted)
    }
}

fn run_instances(
    name: &str,
    shape: &[usize],
    lo: f32,
    hi: f32,
    make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Box<dyn Fn(&Tape, Var) -> Var>,
) {
    for seed in 0..INSTANCES {
        let mut rng = seeded(0x9000 + seed);
        let build = make(&mut rng);
        let x = random_tensor(&mut rng, shape, lo, hi);
        check_grad(&format!("{name} (seed {seed})"), build.as_ref(), &x, PRIMITIVE_TOL);
    }
}

fn weights_for(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    random_tensor(rng, shape, -1.0, 1.0)
}

pub fn grad_add_sub_mul() {
    run_instances("add", &[3, 4], -1.0, 1.0, |rng| {
        let other = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, move |t, x| {
            let o = t.leaf(other.clone());
            t.add(x, o).unwrap()
        }))
    });
    run_instances("sub", &[3, 4], -1.0, 1.0, |rng| {
        let other = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, move |t, x| {
            let o = t.leaf(other.clone());
            t.sub(x, o).unwrap()
        }))
    });
    run_instances("mul", &[3, 4], -1.0, 1.0, |rng| {
        let other = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, move |t, x| {
            let o = t.leaf(other.clone());
            t.mul(x, o).unwrap()
        }))
    });
    // both operands of mul receive gradients: check via the other slot too
    run_instances("mul (rhs)", &[3, 4], -1.0, 1.0, |rng| {
        let other = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, move |t, x| {
            let o = t.leaf(other.clone());
            t.mul(o, x).unwrap()
        }))
    });
}

pub fn grad_scale_relu_exp_log() {
    run_instances("scale", &[2, 5], -1.0, 1.0, |rng| {
        let w = weights_for(rng, &[2, 5]);
        Box::new(through(w, |t, x| t.scale(x, -2.5)))
    });
    // keep inputs away from relu's kink so finite differences are valid
    run_instances("relu", &[2, 5], 0.2, 1.0, |rng| {
        let w = weights_for(rng, &[2, 5]);
        Box::new(through(w, |t, x| t.relu(x)))
    });
    run_instances("relu (negative side)", &[2, 5], -1.0, -0.2, |rng| {
        let w = weights_for(rng, &[2, 5]);
        Box::new(through(w, |t, x| t.relu(x)))
    });
    run_instances("exp", &[2, 5], -1.0, 1.0, |rng| {
        let w = weights_for(rng, &[2, 5]);
        Box::new(through(w, |t, x| t.exp(x)))
    });
    run_instances("log", &[2, 5], 0.5, 2.0, |rng| {
        let w = weights_for(rng, &[2, 5]);
        Box::new(through(w, |t, x| t.log(x).unwrap()))
    });
}

pub fn grad_const_ops() {
    run_instances("mul_const", &[3, 4], -1.0, 1.0, |rng| {
        let m = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, move |t, x| t.mul_const(x, &m).unwrap()))
    });
    run_instances("add_const", &[3, 4], -1.0, 1.0, |rng| {
        let m = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, move |t, x| t.add_const(x, &m).unwrap()))
    });
    run_instances("matmul_nt_const", &[3, 4], -1.0, 1.0, |rng| {
        let k = random_tensor(rng, &[5, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 5]);
        Box::new(through(w, move |t, x| t.matmul_nt_const(x, &k).unwrap()))
    });
    run_instances("rowwise_dot_const", &[3, 4], -1.0, 1.0, |rng| {
        let k = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3]);
        Box::new(through(w, move |t, x| t.rowwise_dot_const(x, &k).unwrap()))
    });
}

pub fn grad_matmul_and_transpose() {
    run_instances("matmul (lhs)", &[3, 4], -1.0, 1.0, |rng| {
        let b = random_tensor(rng, &[4, 2], -1.0, 1.0);
        let w = weights_for(rng, &[3, 2]);
        Box::new(through(w, move |t, x| {
            let bv = t.leaf(b.clone());
            t.matmul(x, bv).unwrap()
        }))
    });
    run_instances("matmul (rhs)", &[4, 2], -1.0, 1.0, |rng| {
        let a = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 2]);
        Box::new(through(w, move |t, x| {
            let av = t.leaf(a.clone());
            t.matmul(av, x).unwrap()
        }))
    });
    run_instances("transpose", &[3, 4], -1.0, 1.0, |rng| {
        let w = weights_for(rng, &[4, 3]);
        Box::new(through(w, |t, x| t.transpose(x).unwrap()))
    });
}

pub fn grad_structural_ops() {
    run_instances("add_bias (input)", &[3, 4], -1.0, 1.0, |rng| {
        let b = random_tensor(rng, &[4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, move |t, x| {
            let bv = t.leaf(b.clone());
            t.add_bias(x, bv).unwrap()
        }))
    });
    run_instances("add_bias (bias)", &[4], -1.0, 1.0, |rng| {
        let a = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, move |t, x| {
            let av = t.leaf(a.clone());
            t.add_bias(av, x).unwrap()
        }))
    });
    run_instances("prepend_col (column)", &[3], -1.0, 1.0, |rng| {
        let m = random_tensor(rng, &[3, 4], -1.0, 1.0);
        let w = weights_for(rng, &[3, 5]);
        Box::new(through(w, move |t, x| {
            let mv = t.leaf(m.clone());
            t.prepend_col(x, mv).unwrap()
        }))
    });
    run_instances("prepend_col (matrix)", &[3, 4], -1.0, 1.0, |rng| {
        let col = random_tensor(rng, &[3], -1.0, 1.0);
        let w = weights_for(rng, &[3, 5]);
        Box::new(through(w, move |t, x| {
            let cv = t.leaf(col.clone());
            t.prepend_col(cv, x).unwrap()
        }))
    });
    run_instances("flatten", &[2, 3, 2, 2], -1.0, 1.0, |rng| {
        let w = weights_for(rng, &[2, 12]);
        Box::new(through(w, |t, x| t.flatten(x).unwrap()))
    });
}

pub fn grad_normalization_and_softmax() {
    // rows bounded away from zero norm
    run_instances("l2_normalize", &[3, 4], 0.3, 1.0, |rng| {
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, |t, x| t.l2_normalize(x).unwrap()))
    });
    run_instances("softmax_rows", &[3, 4], -1.0, 1.0, |rng| {
        let w = weights_for(rng, &[3, 4]);
        Box::new(through(w, |t, x| t.softmax_rows(x).unwrap()))
    });
    run_instances("logsumexp_rows", &[3, 4], -1.0, 1.0, |rng| {
        let w = weights_for(rng, &[3]);
        Box::new(through(w, |t, x| t.logsumexp_rows(x).unwrap()))
    });
}

pub fn grad_reductions() {
    run_instances("row_sum", &[3, 4], -1.0, 1.0, |rng| {
        let w = weights_for(rng, &[3]);
        Box::new(through(w, |t, x| t.row_sum(x).unwrap()))
    });
    run_instances("sum", &[3, 4], -1.0, 1.0, |_rng| Box::new(|t: &Tape, x| t.sum(x)));
    run_instances("mean", &[3, 4], -1.0, 1.0, |_rng| Box::new(|t: &Tape, x| t.mean(x)));
}

pub fn grad_conv_and_pool() {
    for stride in [1usize, 2] {
        run_instances(&format!("conv3x3 input (stride {stride})"), &[2, 3, 5, 5], -1.0, 1.0, move |rng| {
            let weight = random_tensor(rng, &[4, 3, 3, 3], -0.5, 0.5);
            let bias = random_tensor(rng, &[4], -0.5, 0.5);
            let out_hw = (5 - 1) / stride + 1;
            let w = weights_for(rng, &[2, 4, out_hw, out_hw]);
            Box::new(through(w, move |t, x| {
                let wv = t.leaf(weight.clone());
                let bv = t.leaf(bias.clone());
                t.conv3x3(x, wv, bv, stride).unwrap()
            }))
        });
        run_instances(&format!("conv3x3 weight (stride {stride})"), &[4, 3, 3, 3], -0.5, 0.5, move |rng| {
            let input = random_tensor(rng, &[2, 3, 5, 5], -1.0, 1.0);
            let bias = random_tensor(rng, &[4], -0.5, 0.5);
            let out_hw = (5 - 1) / stride + 1;
            let w = weights_for(rng, &[2, 4, out_hw, out_hw]);
            Box::new(through(w, move |t, x| {
                let iv = t.leaf(input.clone());
                let bv = t.leaf(bias.clone());
                t.conv3x3(iv, x, bv, stride).unwrap()
            }))
        });
    }
    run_instances("conv3x3 bias", &[4], -0.5, 0.5, |rng| {
        let input = random_tensor(rng, &[2, 3, 5, 5], -1.0, 1.0);
        let weight = random_tensor(rng, &[4, 3, 3, 3], -0.5, 0.5);
        let w = weights_for(rng, &[2, 4, 5, 5]);
        Box::new(through(w, move |t, x| {
            let iv = t.leaf(input.clone());
            let wv = t.leaf(weight.clone());
            t.conv3x3(iv, wv, x, 1).unwrap()
        }))
    });
    run_instances("global_avg_pool", &[2, 3, 4, 4], -1.0, 1.0, |rng| {
        let w = weights_for(rng, &[2, 3]);
        Box::new(through(w, |t, x| t.global_avg_pool(x).unwrap()))
    });
}

/// The full composite: a conv encoder forwarded on both augmented views,
/// through the in-batch contrastive loss, differentiated with respect to
/// every parameter (checked one parameter tensor at a time against
/// central differences on the flattened parameter vector).
pub fn grad_encoder_ntxent_composite() {
    let arch = vec![
        Layer::Conv3x3 { cin: 3, cout: 4, stride: 2 },
        Layer::Relu,
        Layer::GlobalAvgPool,
        Layer::Dense { input: 4, output: 3 },
    ];
    let cfg = LossConfig::simclr_default();
    let eps = 5e-3f32;
    for seed in 0..INSTANCES {
        // Central differences are only a valid oracle where the network is
        // differentiable: a relu input within the bump radius of zero makes
        // the secant disagree with the one-sided derivative by design, not
        // by any fault of the tape. Inputs lie in [0, 1], so a single
        // parameter bump of at most `2 * eps` (the widest stencil point)
        // moves any conv pre-activation by at most that much; resample the
        // trial point until every pre-activation clears the kink by twice
        // that radius.
        let (model, batch) = (0u64..)
            .map(|attempt| {
                let trial = seed * 1000 + attempt;
                let mut rng = seeded(0xC0D + trial);
                let model = EncoderModel::init(arch.clone(), (3, 6, 6), trial).unwrap();
                let batch = random_tensor(&mut rng, &[4, 3, 6, 6], 0.0, 1.0);
                (model, batch)
            })
            .find(|(model, batch)| {
                let tape = Tape::new();
                let bound = model.bind(&tape);
                let input = tape.leaf(batch.clone());
                let pre = tape
                    .conv3x3(input, bound.var("layer0.weight"), bound.var("layer0.bias"), 2)
                    .unwrap();
                tape.value(pre).data().iter().all(|&v| v.abs() > 4.0 * eps)
            })
            .unwrap();

        let loss_with = |m: &EncoderModel| -> f64 {
            let tape = Tape::new();
            let bound = m.bind(&tape);
            let input = tape.leaf(batch.clone());
            let reps = m.forward_on(&tape, &bound, input).unwrap();
            let loss = ntxent_simclr(&tape, reps, &cfg).unwrap();
            tape.value(loss).item() as f64
        };

        // analytic gradients for every parameter in one backward pass
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let input = tape.leaf(batch.clone());
        let reps = model.forward_on(&tape, &bound, input).unwrap();
        let loss = ntxent_simclr(&tape, reps, &cfg).unwrap();
        let grads = tape.backward(loss).unwrap();

        // compare the gradient as one flattened vector over all
        // parameters, so tiny per-tensor components (biases) are judged
        // against the gradient's overall scale
        let mut analytic_all = Vec::new();
        let mut numeric_all = Vec::new();
        for (name, param) in model.params() {
            analytic_all.extend_from_slice(grads.wrt(bound.var(name)).data());
            for i in 0..param.len() {
                let at = |delta: f32| -> f64 {
                    let mut bumped = model.clone();
                    let mut data = param.data().to_vec();
                    data[i] += delta;
                    bumped
                        .set_param(name, Tensor::new(param.shape().to_vec(), data).unwrap())
                        .unwrap();
                    loss_with(&bumped)
                };
                // fourth-order five-point stencil: the deep composite is
                // far more curved than any single primitive, so plain
                // central differences would need a step small enough to
                // drown in f32 forward rounding
                let d = (at(-2.0 * eps) - 8.0 * at(-eps) + 8.0 * at(eps) - at(2.0 * eps))
                    / (12.0 * eps as f64);
                numeric_all.push(d as f32);
            }
        }
        let n = analytic_all.len();
        let analytic = Tensor::new(vec![n], analytic_all).unwrap();
        let numeric = Tensor::new(vec![n], numeric_all).unwrap();
        let err = rel_error(&analytic, &numeric);
        assert!(err < COMPOSITE_TOL, "composite (seed {seed}): relative error {err:.3e}");
    }
}

/// Direct spot check that the harness itself works: a hand-differentiable
/// quadratic has machine-precision agreement.
pub fn oracle_self_test() {
    let mut rng = seeded(0xAA);
    let x = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let build = |t: &Tape, v: Var| {
        let sq = t.mul(v, v).unwrap();
        t.sum(sq)
    };
    let fd = finite_diff(&build, &x, 1e-2);
    let expected = x.map(|v| 2.0 * v);
    assert!(rel_error(&fd, &expected) < 1e-4);
}
