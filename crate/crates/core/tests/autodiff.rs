use compact_core::numerics::{
    concat_cols, concat_rows, finite_diff_gradient, logsumexp, relative_error, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-3;

fn leaf(t: &Tensor) -> Tensor {
    let mut t = t.clone();
    t.set_requires_grad(true);
    t
}

/// Max relative error between backward() and central differences for every
/// input of `build`, reduced to a scalar through a fixed random projection.
fn check_primitive<F>(seed: u64, inputs: Vec<Tensor>, build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let projection = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars);
        let shape = out.shape();
        Tensor::randn(&shape, 1.0, &mut rng)
    };
    let loss_of = |vals: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&tape, &vars);
        let r = tape.constant(projection.clone());
        out.mul(r).unwrap().sum().item()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(leaf(t))).collect();
    let out = build(&tape, &vars);
    let r = tape.constant(projection.clone());
    let loss = out.mul(r).unwrap().sum();
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let fd = finite_diff_gradient(
            |w| {
                let mut vals = inputs.clone();
                vals[i] = w.clone();
                loss_of(&vals)
            },
            input,
            FD_STEP,
        )
        .unwrap();
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for (a, b) in analytic.iter().zip(fd.data()) {
            worst = worst.max(relative_error(*a, *b, REL_FLOOR));
        }
    }
    worst
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Keeps ReLU inputs away from the kink so central differences stay valid.
fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v >= 0.0 { 0.05 } else { -0.05 };
        }
    }
    t
}

fn sweep<F>(name: &str, mut case: F)
where
    F: FnMut(u64) -> f64,
{
    let worst = (0..100).map(&mut case).fold(0.0, f64::max);
    assert!(worst < FD_TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    sweep("add", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[3, 4])], |_, v| v[0].add(v[1]).unwrap())
    });
    sweep("sub", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])], |_, v| v[0].sub(v[1]).unwrap())
    });
    sweep("mul", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 2]), rand_t(&mut r, &[3, 2])], |_, v| v[0].mul(v[1]).unwrap())
    });
    sweep("add_row", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4])], |_, v| v[0].add_row(v[1]).unwrap())
    });
    sweep("scale", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[5])], |_, v| v[0].scale(-1.7))
    });
    sweep("relu", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![away_from_zero(rand_t(&mut r, &[4, 3]))], |_, v| v[0].relu())
    });
}

#[test]
fn matrix_primitives_match_finite_differences() {
    sweep("matmul", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 2])], |_, v| v[0].matmul(v[1]).unwrap())
    });
    sweep("transpose", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 5])], |_, v| v[0].transpose().unwrap())
    });
    sweep("slice_rows", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[5, 3])], |_, v| v[0].slice_rows(1, 4).unwrap())
    });
    sweep("slice_cols", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 5])], |_, v| v[0].slice_cols(2, 5).unwrap())
    });
    sweep("concat_rows", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[1, 3])], |_, v| concat_rows(v).unwrap())
    });
    sweep("concat_cols", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 1])], |_, v| concat_cols(v).unwrap())
    });
    sweep("embedding", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..4)).collect();
        check_primitive(s, vec![rand_t(&mut r, &[4, 3])], move |_, v| v[0].embedding(&ids).unwrap())
    });
}

#[test]
fn normalising_primitives_match_finite_differences() {
    sweep("softmax", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 5])], |_, v| v[0].softmax().unwrap())
    });
    sweep("log_softmax", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 5])], |_, v| v[0].log_softmax().unwrap())
    });
    sweep("causal_softmax", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[4, 4])], |_, v| v[0].causal_softmax().unwrap())
    });
    sweep("layer_norm", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let inputs = vec![rand_t(&mut r, &[3, 6]), rand_t(&mut r, &[6]), rand_t(&mut r, &[6])];
        check_primitive(s, inputs, |_, v| v[0].layer_norm(v[1], v[2]).unwrap())
    });
}

#[test]
fn reductions_and_losses_match_finite_differences() {
    sweep("sum", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 2])], |_, v| v[0].sum())
    });
    sweep("mean", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 2])], |_, v| v[0].mean())
    });
    sweep("cross_entropy", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let targets: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
        check_primitive(s, vec![rand_t(&mut r, &[4, 5])], move |_, v| v[0].cross_entropy(&targets).unwrap())
    });
    sweep("kl_div", |s| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        check_primitive(s, vec![rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[3, 4])], |_, v| v[0].kl_div(v[1]).unwrap())
    });
}

#[test]
fn relu_and_softmax_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    for p in z.softmax().unwrap().value().data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn sum_of_squares_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(leaf(&Tensor::vector(vec![1.0, 2.0])));
    let loss = x.mul(x).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    assert!(tape.is_empty(), "backward clears the tape");
}

#[test]
fn kl_of_identical_logits_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let p = tape.leaf(leaf(&Tensor::randn(&[2, 5], 1.0, &mut rng)));
    let loss = p.kl_div(p).unwrap();
    assert_eq!(loss.item(), 0.0);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(p).unwrap().iter().all(|g| *g == 0.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(leaf(&Tensor::vector(vec![1.0, 2.0])));
    let y = x.scale(2.0);
    assert!(tape.backward(y).is_err());
}

#[test]
fn shape_errors_name_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

fn two_layer_loss<'t>(tape: &'t Tape, x: &Tensor, w1: Var<'t>, b1: Var<'t>, w2: Var<'t>, targets: &[usize]) -> Var<'t> {
    let x = tape.constant(x.clone());
    let h = x.matmul(w1).unwrap().add_row(b1).unwrap().relu();
    h.matmul(w2).unwrap().cross_entropy(targets).unwrap()
}

#[test]
fn two_layer_network_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let params = [
            Tensor::randn(&[4, 6], 0.5, &mut rng),
            Tensor::randn(&[6], 0.5, &mut rng),
            Tensor::randn(&[6, 3], 0.5, &mut rng),
        ];
        let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let tape = Tape::new();
        let v: Vec<_> = params.iter().map(|p| tape.leaf(leaf(p))).collect();
        let loss = two_layer_loss(&tape, &x, v[0], v[1], v[2], &targets);
        let grads = tape.backward(loss).unwrap();
        for (i, p) in params.iter().enumerate() {
            let fd = finite_diff_gradient(
                |w| {
                    let t = Tape::new();
                    let mut ps = params.clone();
                    ps[i] = w.clone();
                    let vs: Vec<_> = ps.iter().map(|p| t.constant(p.clone())).collect();
                    two_layer_loss(&t, &x, vs[0], vs[1], vs[2], &targets).item()
                },
                p,
                FD_STEP,
            )
            .unwrap();
            for (a, b) in grads.get(v[i]).unwrap().iter().zip(fd.data()) {
                assert!(relative_error(*a, *b, REL_FLOOR) < FD_TOL, "seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn linear_model_backward_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[8, 10], 1.0, &mut rng);
    let y = Tensor::randn(&[8, 1], 1.0, &mut rng);
    let w = Tensor::randn(&[10, 1], 1.0, &mut rng);
    let objective = |w: &Tensor| {
        let t = Tape::new();
        let wv = t.constant(w.clone());
        let r = t.constant(x.clone()).matmul(wv).unwrap().sub(t.constant(y.clone())).unwrap();
        r.mul(r).unwrap().mean().item()
    };
    let tape = Tape::new();
    let wv = tape.leaf(leaf(&w));
    let r = tape.constant(x.clone()).matmul(wv).unwrap().sub(tape.constant(y.clone())).unwrap();
    let loss = r.mul(r).unwrap().mean();
    let grads = tape.backward(loss).unwrap();
    let fd = finite_diff_gradient(objective, &w, FD_STEP).unwrap();
    for (a, b) in grads.get(wv).unwrap().iter().zip(fd.data()) {
        assert!((a - b).abs() / a.abs().max(b.abs()) < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn log_softmax_equals_shifted_logsumexp() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let row: Vec<f64> = (0..7).map(|_| rng.random_range(-50.0..50.0)).collect();
        let tape = Tape::new();
        let ls = tape.constant(Tensor::vector(row.clone())).log_softmax().unwrap();
        let lse = logsumexp(&row);
        for (a, x) in ls.value().data().iter().zip(&row) {
            assert!((a - (x - lse)).abs() < 1e-12);
        }
    }
}

#[test]
fn kl_is_non_negative_and_zero_only_on_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let a = Tensor::randn(&[1, 4], 2.0, &mut rng);
        let b = Tensor::randn(&[1, 4], 2.0, &mut rng);
        let tape = Tape::new();
        let kl = tape.constant(a.clone()).kl_div(tape.constant(b)).unwrap().item();
        assert!(kl > 1e-12);
        let same = tape.constant(a.clone()).kl_div(tape.constant(a)).unwrap().item();
        assert!(same.abs() < 1e-12);
    }
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let t1 = [0usize, 2];
    let grad_of = |which: u8| -> Vec<f64> {
        let tape = Tape::new();
        let wv = tape.leaf(leaf(&w));
        let logits = tape.constant(x.clone()).matmul(wv).unwrap();
        let l1 = logits.cross_entropy(&t1).unwrap();
        let l2 = logits.softmax().unwrap().sum().scale(0.3).add(logits.kl_div(tape.constant(x.clone())).unwrap()).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => l1.add(l2).unwrap(),
        };
        tape.backward(loss).unwrap().get(wv).unwrap().to_vec()
    };
    let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
    for ((a, b), c) in g1.iter().zip(&g2).zip(&g12) {
        assert!(((a + b) - c).abs() <= 1e-12 * c.abs().max(1.0));
    }
}
