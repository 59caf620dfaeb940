//! Finite-difference checks of every differentiable primitive over many
//! random draws, plus tape-level properties.

use anchorml::autodiff::{ParamStore, Tape, Var};
use anchorml::gradcheck::{grad_check, GradCheckConfig};
use anchorml::{Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = fn(&mut Tape, Var, Var) -> Result<Var>;

struct Primitive {
    name: &'static str,
    a: &'static [usize],
    b: &'static [usize],
    build: Build,
}

const PRIMITIVES: &[Primitive] = &[
    Primitive {
        name: "matmul",
        a: &[3, 4],
        b: &[4, 2],
        build: |t, a, b| t.matmul(a, b),
    },
    Primitive {
        name: "add",
        a: &[3, 4],
        b: &[3, 4],
        build: |t, a, b| t.add(a, b),
    },
    Primitive {
        name: "sub",
        a: &[3, 4],
        b: &[3, 4],
        build: |t, a, b| t.sub(a, b),
    },
    Primitive {
        name: "mul",
        a: &[3, 4],
        b: &[3, 4],
        build: |t, a, b| t.mul(a, b),
    },
    Primitive {
        name: "add_row",
        a: &[3, 4],
        b: &[4],
        build: |t, a, b| t.add_row(a, b),
    },
    Primitive {
        name: "scale",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.scale(a, -1.7),
    },
    Primitive {
        name: "add_scalar",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.add_scalar(a, 0.3),
    },
    Primitive {
        name: "relu",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.relu(a),
    },
    Primitive {
        name: "square",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.square(a),
    },
    Primitive {
        name: "sqrt",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| {
            let s = t.square(a)?;
            let s = t.add_scalar(s, 0.5)?;
            t.sqrt(s)
        },
    },
    Primitive {
        name: "softmax_rows",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.softmax_rows(a),
    },
    Primitive {
        name: "log_softmax_rows",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.log_softmax_rows(a),
    },
    Primitive {
        name: "dropout",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.dropout(a, 0.3, true, 11),
    },
    Primitive {
        name: "sq_dist_rows",
        a: &[3, 4],
        b: &[3, 4],
        build: |t, a, b| t.sq_dist_rows(a, b),
    },
    Primitive {
        name: "pairwise_sq_dist",
        a: &[3, 4],
        b: &[5, 4],
        build: |t, a, b| t.pairwise_sq_dist(a, b),
    },
    Primitive {
        name: "frobenius_norm",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.frobenius_norm(a),
    },
    Primitive {
        name: "mean_rows",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.mean_rows(a),
    },
    Primitive {
        name: "mean_all",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.mean_all(a),
    },
    Primitive {
        name: "sum",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.sum(a),
    },
    Primitive {
        name: "sum_cols",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.sum_cols(a),
    },
    Primitive {
        name: "concat_cols",
        a: &[3, 4],
        b: &[3, 2],
        build: |t, a, b| t.concat_cols(&[a, b, a]),
    },
    Primitive {
        name: "concat_rows",
        a: &[3, 4],
        b: &[2, 4],
        build: |t, a, b| t.concat_rows(&[b, a, b]),
    },
    Primitive {
        name: "stack_rows",
        a: &[4],
        b: &[4],
        build: |t, a, b| t.stack_rows(&[a, b, a]),
    },
    Primitive {
        name: "gather_rows",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.gather_rows(a, &[2, 0, 2, 1]),
    },
    Primitive {
        name: "gather_elems",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.gather_elems(a, &[(0, 1), (2, 3), (0, 1), (1, 0)]),
    },
    Primitive {
        name: "transpose",
        a: &[3, 4],
        b: &[1],
        build: |t, a, _| t.transpose(a),
    },
    Primitive {
        name: "segment_log1p_sum_exp",
        a: &[7],
        b: &[1],
        build: |t, a, _| t.segment_log1p_sum_exp(a, &[0, 3, 3, 7]),
    },
];

/// Random contraction weights can nearly cancel an entry's gradient, where a
/// 1e-3 central difference is truncation-limited; 1e-4 keeps the truncation
/// term well below the tolerance for every draw.
const STEP: f64 = 1e-4;

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Checks `p` at a random point, contracting its output against a random
/// weight tensor so every output entry contributes. `None` when the draw
/// straddles a kink.
fn check_primitive(p: &Primitive, seed: u64) -> Option<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&mut r, p.a));
    let b = store.add("b", random_tensor(&mut r, p.b));
    let weight_seed = r.random::<u64>();
    let config = GradCheckConfig {
        step: STEP,
        stop_at_kink: true,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&mut store, &[a, b], config, |s| {
        let mut t = Tape::new();
        let va = t.param(s, a)?;
        let vb = t.param(s, b)?;
        let out = (p.build)(&mut t, va, vb)?;
        let shape = t.value(out).shape().to_vec();
        let w = random_tensor(&mut ChaCha8Rng::seed_from_u64(weight_seed), &shape);
        let w = t.leaf(w)?;
        let prod = t.mul(out, w)?;
        let total = t.sum(prod)?;
        Ok((t, total))
    })
    .unwrap();
    if report.kink_crossings > 0 {
        return None;
    }
    assert!(
        report.passed(),
        "{} seed {seed}: max relative error {:e}",
        p.name,
        report.max_rel_error()
    );
    Some(report.max_rel_error())
}

#[test]
fn every_primitive_passes_one_hundred_random_checks() {
    for p in PRIMITIVES {
        let mut checked = 0;
        let mut seed = 0;
        while checked < 100 {
            if check_primitive(p, seed).is_some() {
                checked += 1;
            }
            seed += 1;
            assert!(seed < 1000, "{}: too few branch-stable draws", p.name);
        }
    }
}

#[test]
fn repeated_backward_after_zero_grad_is_identical() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let w = store.add("w", random_tensor(&mut r, &[4, 3]));
    let x = random_tensor(&mut r, &[6, 4]);
    let mut grads = Vec::new();
    for _ in 0..2 {
        store.zero_grad();
        assert!(store.grad(w).data().iter().all(|&g| g == 0.0));
        let mut t = Tape::new();
        let xv = t.leaf(x.clone()).unwrap();
        let wv = t.param(&store, w).unwrap();
        let h = t.matmul(xv, wv).unwrap();
        let h = t.relu(h).unwrap();
        let s = t.softmax_rows(h).unwrap();
        let loss = t.frobenius_norm(s).unwrap();
        t.backward(loss, &mut store).unwrap();
        grads.push(store.grad(w).clone());
    }
    assert_eq!(grads[0], grads[1]);
}

#[test]
fn kink_crossings_are_detected() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![0.0005, 1.0]));
    let report = grad_check(&mut store, &[a], GradCheckConfig::default(), |s| {
        let mut t = Tape::new();
        let v = t.param(s, a)?;
        let r = t.relu(v)?;
        let out = t.sum(r)?;
        Ok((t, out))
    })
    .unwrap();
    assert_eq!(report.kink_crossings, 1);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.random_range(-50.0..50.0)).collect()).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x).unwrap();
        let s = t.softmax_rows(v).unwrap();
        let out = t.value(s);
        for i in 0..rows {
            let row = out.row(i);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_masks_repeat_per_seed(seed in any::<u64>(), rate in 0.0f64..0.9) {
        let x = Tensor::filled(&[4, 5], 1.5);
        let run = |train: bool| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone()).unwrap();
            let d = t.dropout(v, rate, train, seed).unwrap();
            t.value(d).clone()
        };
        prop_assert_eq!(run(true), run(true));
        prop_assert_eq!(run(false), x.clone());
    }
}
