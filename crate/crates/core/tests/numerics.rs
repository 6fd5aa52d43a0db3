use decom::nn::{Activation, Mlp};
use decom::noise::{gaussian_head_sample, gaussian_log_density, OuProcess};
use decom::optim::{clip_by_global_norm, AdamConfig, AdamState};
use decom::verify::{autodiff_report, relative_error};
use decom::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Op = fn(&mut Tape<f64>, Var, Var) -> Var;

/// Gradient of `sum(w ⊙ op(x, y))` w.r.t. `x` against central differences.
fn fd_check(op: Op, x: &Tensor<f64>, y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    let eval = |x: &Tensor<f64>| {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let yv = t.constant(y.clone());
        let out = op(&mut t, xv, yv);
        t.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut t = Tape::new();
    let xv = t.param(x.clone());
    let yv = t.constant(y.clone());
    let out = op(&mut t, xv, yv);
    let wv = t.constant(w.clone());
    let p = t.mul(out, wv).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap().wrt(xv, x);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[k] += h;
        let mut minus = x.clone();
        minus.data_mut()[k] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        worst = worst.max(relative_error(g.data()[k], fd, 1e-3));
    }
    worst
}

fn ops() -> Vec<(&'static str, Op)> {
    vec![
        ("add", |t, x, y| t.add(x, y).unwrap()),
        ("sub", |t, x, y| t.sub(y, x).unwrap()),
        ("mul", |t, x, y| t.mul(x, y).unwrap()),
        ("scale", |t, x, _| t.scale(x, -1.7)),
        ("offset", |t, x, _| t.offset(x, 0.3)),
        ("exp", |t, x, _| t.exp(x)),
        ("square", |t, x, _| t.square(x)),
        ("relu", |t, x, _| t.relu(x)),
        ("clamp", |t, x, _| t.clamp(x, -0.5, 0.5)),
        ("tanh", |t, x, _| t.activation(x, Activation::Tanh)),
        ("leaky", |t, x, _| t.activation(x, Activation::LeakyRelu)),
        ("elu", |t, x, _| t.activation(x, Activation::Elu)),
        ("self-mul", |t, x, _| t.mul(x, x).unwrap()),
    ]
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::from_rows(rows, cols, d))
}

fn away_from_kinks(x: &Tensor<f64>) -> bool {
    x.data().iter().all(|v| v.abs() > 1e-3 && (v.abs() - 0.5).abs() > 1e-3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn elementwise_ops_match_finite_differences(
        (x, y, w) in (1usize..4, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c), matrix(r, c)))
    ) {
        prop_assume!(away_from_kinks(&x));
        for (name, op) in ops() {
            let e = fd_check(op, &x, &y, &w);
            prop_assert!(e <= 1e-4, "{name}: rel err {e}");
        }
    }

    #[test]
    fn shape_changing_ops_match_finite_differences(
        (x, y, w, wr, ws) in (2usize..4, 2usize..5, 1usize..4).prop_flat_map(|(r, c, k)| {
            (matrix(r, c), matrix(c, k), matrix(r, k), matrix(r, 1), matrix(1, 1))
        })
    ) {
        let e = fd_check(|t, x, y| t.matmul(x, y).unwrap(), &x, &y, &w);
        prop_assert!(e <= 1e-4, "matmul lhs {e}");
        let e = fd_check(|t, x, _| t.row_sum(x), &x, &y, &wr);
        prop_assert!(e <= 1e-4, "row_sum {e}");
        let e = fd_check(|t, x, _| t.sum(x), &x, &y, &ws);
        prop_assert!(e <= 1e-4, "sum {e}");
        let e = fd_check(|t, x, _| t.mean(x), &x, &y, &ws);
        prop_assert!(e <= 1e-4, "mean {e}");
        let e = fd_check(|t, x, _| t.slice_cols(x, 1, 1), &x, &y, &wr);
        prop_assert!(e <= 1e-4, "slice_cols {e}");
        let e = fd_check(
            |t, x, _| {
                let a = t.slice_cols(x, 0, 1);
                let b = t.square(x);
                let b = t.slice_cols(b, 1, 1);
                t.concat_cols(&[b, a]).unwrap()
            },
            &x,
            &y,
            &Tensor::from_rows(x.rows(), 2, wr.data().iter().chain(wr.data()).copied().collect()),
        );
        prop_assert!(e <= 1e-4, "concat {e}");
    }

    #[test]
    fn clipped_norm_never_exceeds_bound(
        g in prop::collection::vec(-1e6f64..1e6, 1..40),
        scale in -12i32..12,
        max in 1e-3f64..1e3,
    ) {
        let s = 10f64.powi(scale);
        let raw: Vec<f64> = g.iter().map(|v| v * s).collect();
        prop_assume!(raw.iter().any(|v| *v != 0.0));
        let out = clip_by_global_norm(&[Tensor::row(raw.clone())], max).unwrap();
        let o = &out.grads[0];
        prop_assert!(o.norm() <= max * (1.0 + 1e-12));
        if out.clipped {
            let cos = raw.iter().zip(o.data()).map(|(a, b)| a * b).sum::<f64>() / (o.norm() * Tensor::row(raw.clone()).norm());
            prop_assert!((1.0 - cos).abs() <= 1e-12);
        } else {
            prop_assert_eq!(o.data(), &raw[..]);
        }
    }

    #[test]
    fn adam_with_zero_gradient_never_moves(
        p in prop::collection::vec(-3.0f64..3.0, 1..10),
        warm in prop::collection::vec(-1.0f64..1.0, 1..10),
        steps in 1usize..5,
    ) {
        let n = p.len().min(warm.len());
        let mut param = Tensor::row(p[..n].to_vec());
        let mut opt = AdamState::new(&[&param], AdamConfig::with_lr(0.01));
        opt.step(vec![&mut param], &[Tensor::row(warm[..n].to_vec())]).unwrap();
        let before = param.clone();
        for _ in 0..steps {
            opt.step(vec![&mut param], &[Tensor::zeros(1, n)]).unwrap();
        }
        prop_assert_eq!(param, before);
    }
}

#[test]
fn random_networks_match_finite_differences() {
    let r = autodiff_report(100, 7, false).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
    assert!(r.coordinates > 10_000);
}

#[test]
fn injected_gradient_error_is_caught() {
    let r = autodiff_report(5, 7, true).unwrap();
    assert!(r.max_rel_error > 1e-4);
}

#[test]
fn forward_matches_hand_coded_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Mlp::<f64>::new(&[3, 5, 2], Activation::Tanh, Activation::Identity, &mut rng);
    let x = [0.3, -1.2, 0.7];
    let l = net.layers();
    let hidden: Vec<f64> = (0..5)
        .map(|j| (l[0].bias.data()[j] + (0..3).map(|i| x[i] * l[0].weight.at(i, j)).sum::<f64>()).tanh())
        .collect();
    let out: Vec<f64> = (0..2)
        .map(|j| l[1].bias.data()[j] + (0..5).map(|i| hidden[i] * l[1].weight.at(i, j)).sum::<f64>())
        .collect();
    let got = net.forward_one(&x).unwrap();
    for (a, b) in got.iter().zip(&out) {
        assert!((a - b).abs() <= 1e-12);
    }
    assert_eq!(got, net.forward_one(&x).unwrap());
}

#[test]
fn adam_first_step_has_magnitude_lr() {
    let mut p = Tensor::<f64>::row(vec![1.0, -1.0]);
    let mut opt = AdamState::new(&[&p], AdamConfig::with_lr(0.001));
    opt.step(vec![&mut p], &[Tensor::row(vec![2.5, -0.01])]).unwrap();
    assert!((p.data()[0] - (1.0 - 0.001)).abs() < 1e-6);
    assert!((p.data()[1] - (-1.0 + 0.001)).abs() < 1e-6);
}

#[test]
fn ou_sample_mean_is_within_three_sigma_of_long_run_mean() {
    let (rate, vol, mean) = (0.15, 0.2, 0.4);
    let mut ou = OuProcess::<f64>::new(1, rate, vol, mean, 1.0, 11);
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| ou.sample()[0]).collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    // Stationary std and the AR(1) variance inflation of the sample mean.
    let phi: f64 = 1.0 - rate;
    let sd = vol / (1.0 - phi * phi).sqrt();
    let se = sd * ((1.0 + phi) / (1.0 - phi) / n as f64).sqrt();
    assert!((m - mean).abs() <= 3.0 * se, "mean {m}, se {se}");
}

#[test]
fn gaussian_density_gradient_matches_finite_differences() {
    let sample = Tensor::row(vec![0.3, -0.2, 1.1]);
    let mean = Tensor::row(vec![0.1, 0.4, 0.9]);
    let log_std = Tensor::row(vec![-0.5, 0.2, 0.0]);
    let mut t = Tape::new();
    let mv = t.param(mean.clone());
    let sv = t.constant(sample.clone());
    let lv = t.constant(log_std.clone());
    let lp = decom::noise::log_density_on_tape(&mut t, sv, mv, lv).unwrap();
    let s = t.sum(lp);
    let g = t.backward(s).unwrap().wrt(mv, &mean);
    let h = 1e-6;
    for k in 0..3 {
        let mut p = mean.clone();
        p.data_mut()[k] += h;
        let mut m = mean.clone();
        m.data_mut()[k] -= h;
        let fd = (gaussian_log_density(&sample, &p, &log_std).unwrap().sum()
            - gaussian_log_density(&sample, &m, &log_std).unwrap().sum())
            / (2.0 * h);
        assert!(relative_error(g.data()[k], fd, 1e-6) <= 1e-4);
    }
}

#[test]
fn gaussian_sampling_is_deterministic_given_seed() {
    let mean = Tensor::row(vec![0.0, 1.0]);
    let ls = Tensor::row(vec![0.0, -1.0]);
    let a = gaussian_head_sample(&mean, &ls, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = gaussian_head_sample(&mean, &ls, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}
