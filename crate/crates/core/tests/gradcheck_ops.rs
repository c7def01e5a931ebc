//! Finite-difference verification of every registered op, plus the autodiff
//! contract tests (accumulation, determinism, negative control).

mod common;

use codedphase::tape::{CoordSel, ConvCfg, PadMode, Tape, Var};
use codedphase::tensor::TensorData;
use codedphase::Result;
use common::{conv2d_ref, max_abs_diff, rand_vec, RefPad};

const TOL_PER_OP: f64 = 1e-6;
const DELTA: f64 = 1e-5;
const SEEDS: u64 = 20;

fn td(shape: &[usize], data: Vec<f64>) -> TensorData<f64> {
    TensorData::new(shape.to_vec(), data)
}

fn check<F>(f: F, x0: &TensorData<f64>, tol: f64)
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let rep = Tape::grad_check(f, x0, DELTA, CoordSel::All).unwrap();
    assert!(
        rep.max_rel_err < tol,
        "gradcheck failed: max rel err {:.3e} at {}",
        rep.max_rel_err,
        rep.worst_index
    );
}

// ── Elementwise ──────────────────────────────────────────────────────

#[test]
fn elementwise_identities() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[4], vec![0.3, -1.2, 2.0, 5.5]));
    let zero = t.constant(TensorData::scalar(0.0));
    let one = t.constant(TensorData::scalar(1.0));
    let a = t.add(x, zero).unwrap();
    assert_eq!(t.value(a).data(), t.value(x).data());
    let m = t.mul(x, one).unwrap();
    assert_eq!(t.value(m).data(), t.value(x).data());
}

#[test]
fn grad_of_x_squared_is_2x() {
    // d(x*x)/dx = 2x; at x = 3 that is 6 per element.
    let mut t = Tape::<f64>::new();
    let x = t.leaf(td(&[3], vec![3.0, 3.0, 3.0]));
    let y = t.mul(x, x).unwrap();
    let s = t.sum(y).unwrap();
    let mut g = t.backward(s).unwrap();
    assert_eq!(g.take(x).unwrap(), vec![6.0, 6.0, 6.0]);
}

#[test]
fn elementwise_gradchecks_over_seeds() {
    for seed in 0..SEEDS {
        // Values bounded away from 0 so div/pow stay smooth.
        let a = td(&[2, 3], rand_vec(seed, 6, 0.3, 2.0));
        let bdata = td(&[2, 3], rand_vec(seed + 1000, 6, 0.4, 1.7));
        for kind in ["add", "sub", "mul", "div", "pow"] {
            let b = bdata.clone();
            check(
                move |t, v| {
                    let c = t.constant(b.clone());
                    let y = match kind {
                        "add" => t.add(v, c)?,
                        "sub" => t.sub(v, c)?,
                        "mul" => t.mul(v, c)?,
                        "div" => t.div(v, c)?,
                        _ => t.pow(v, c)?,
                    };
                    t.sum(y)
                },
                &a,
                TOL_PER_OP,
            );
        }
        // Gradient wrt the second operand.
        let afix = a.clone();
        check(
            move |t, v| {
                let c = t.constant(afix.clone());
                let y = t.div(c, v)?;
                t.sum(y)
            },
            &bdata,
            TOL_PER_OP,
        );
    }
}

#[test]
fn broadcast_bias_add_gradcheck() {
    for seed in 0..SEEDS {
        let x = td(&[3, 4, 5], rand_vec(seed, 60, -1.0, 1.0));
        let bias = td(&[3, 1, 1], rand_vec(seed + 77, 3, -0.5, 0.5));
        let xf = x.clone();
        check(
            move |t, v| {
                let c = t.constant(xf.clone());
                let y = t.add(c, v)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &bias,
            TOL_PER_OP,
        );
        // Row-vector bias over matrix rows (the MLP layer pattern).
        let m = td(&[6, 4], rand_vec(seed + 88, 24, -1.0, 1.0));
        let vb = td(&[4], rand_vec(seed + 99, 4, -0.5, 0.5));
        let mf = m.clone();
        check(
            move |t, v| {
                let c = t.constant(mf.clone());
                let y = t.add(c, v)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &vb,
            TOL_PER_OP,
        );
        let vbf = vb.clone();
        check(
            move |t, v| {
                let c = t.constant(vbf.clone());
                let y = t.add(v, c)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &m,
            TOL_PER_OP,
        );
    }
}

#[test]
fn division_by_zero_reports_index() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(td(&[3], vec![1.0, 2.0, 3.0]));
    let b = t.constant(td(&[3], vec![1.0, 0.0, 2.0]));
    let err = t.div(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("index 1"), "unexpected error: {msg}");
}

// ── Activations ──────────────────────────────────────────────────────

#[test]
fn activation_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[1], vec![0.0]));
    let s = t.sigmoid(x).unwrap();
    assert!((t.value(s).data()[0] - 0.5).abs() < 1e-15);

    let l = t.constant(td(&[1], vec![-2.0]));
    let lr = t.leaky_relu(l, 0.1).unwrap();
    assert!((t.value(lr).data()[0] + 0.2).abs() < 1e-15);

    // sine(omega=1) at 0: value 0, derivative 1.
    let mut t2 = Tape::<f64>::new();
    let z = t2.leaf(td(&[1], vec![0.0]));
    let y = t2.sine(z, 1.0).unwrap();
    assert_eq!(t2.value(y).data()[0], 0.0);
    let s2 = t2.sum(y).unwrap();
    let mut g = t2.backward(s2).unwrap();
    assert!((g.take(z).unwrap()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn activation_gradchecks_over_seeds() {
    for seed in 0..SEEDS {
        // Keep inputs away from the relu kink at 0.
        let mut data = rand_vec(seed, 12, 0.15, 1.5);
        for (i, v) in data.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        let x = td(&[12], data);
        for kind in ["relu", "leaky", "sigmoid", "tanh", "sine"] {
            check(
                move |t, v| {
                    let y = match kind {
                        "relu" => t.relu(v)?,
                        "leaky" => t.leaky_relu(v, 0.1)?,
                        "sigmoid" => t.sigmoid(v)?,
                        "tanh" => t.tanh_act(v)?,
                        _ => t.sine(v, 30.0)?,
                    };
                    let y2 = t.mul(y, y)?;
                    t.sum(y2)
                },
                &x,
                TOL_PER_OP,
            );
        }
    }
}

#[test]
fn clamp_gradient_inside_and_outside() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(td(&[3], vec![12.0, 0.0, -7.0]));
    let y = t.clamp(x, -4.0, 10.0).unwrap();
    assert_eq!(t.value(y).data(), &[10.0, 0.0, -4.0]);
    let s = t.sum(y).unwrap();
    let mut g = t.backward(s).unwrap();
    assert_eq!(g.take(x).unwrap(), vec![0.0, 1.0, 0.0]);
}

// ── conv2d ───────────────────────────────────────────────────────────

#[test]
fn conv_identity_kernels() {
    // 1x1 kernel of value 1 reproduces the input.
    let x = td(&[1, 5, 6], rand_vec(3, 30, -1.0, 1.0));
    let mut t = Tape::<f64>::new();
    let xv = t.constant(x.clone());
    let w = t.constant(td(&[1, 1, 1, 1], vec![1.0]));
    let y = t
        .conv2d(xv, w, ConvCfg { stride: 1, pad: PadMode::Valid })
        .unwrap();
    assert_eq!(t.value(y).data(), x.data());

    // Centered delta 3x3 kernel with reflect padding reproduces the input.
    let mut ker = vec![0.0; 9];
    ker[4] = 1.0;
    let w3 = t.constant(td(&[1, 1, 3, 3], ker));
    let y3 = t
        .conv2d(xv, w3, ConvCfg { stride: 1, pad: PadMode::Reflect })
        .unwrap();
    assert!(max_abs_diff(t.value(y3).data(), x.data()) < 1e-12);
}

#[test]
fn conv_matches_reference_all_modes() {
    for seed in 0..SEEDS {
        let (cin, cout, h, w, k) = (3, 2, 7, 9, 3);
        let x = rand_vec(seed, cin * h * w, -1.0, 1.0);
        let ker = rand_vec(seed + 500, cout * cin * k * k, -0.7, 0.7);
        for (pad, rp) in [
            (PadMode::Zero, RefPad::Zero),
            (PadMode::Reflect, RefPad::Reflect),
            (PadMode::Valid, RefPad::Valid),
        ] {
            for stride in [1usize, 2] {
                let (want, ho, wo) = conv2d_ref(&x, cin, h, w, &ker, cout, k, stride, rp);
                let mut t = Tape::<f64>::new();
                let xv = t.constant(td(&[cin, h, w], x.clone()));
                let wv = t.constant(td(&[cout, cin, k, k], ker.clone()));
                let y = t.conv2d(xv, wv, ConvCfg { stride, pad }).unwrap();
                assert_eq!(t.value(y).shape(), &[cout, ho, wo]);
                assert!(
                    max_abs_diff(t.value(y).data(), &want) < 1e-12,
                    "forward mismatch pad={pad:?} stride={stride}"
                );
            }
        }
    }
}

#[test]
fn conv_gradcheck_wrt_input() {
    // Spec oracle: gradient of sum(conv2d(x, w)) wrt x on a 1x8x8 input.
    for seed in 0..SEEDS {
        let x = td(&[1, 8, 8], rand_vec(seed, 64, -1.0, 1.0));
        let ker = td(&[2, 1, 3, 3], rand_vec(seed + 11, 18, -0.7, 0.7));
        for pad in [PadMode::Zero, PadMode::Reflect, PadMode::Valid] {
            for stride in [1usize, 2] {
                let kf = ker.clone();
                check(
                    move |t, v| {
                        let w = t.constant(kf.clone());
                        let y = t.conv2d(v, w, ConvCfg { stride, pad })?;
                        let y2 = t.mul(y, y)?;
                        t.sum(y2)
                    },
                    &x,
                    TOL_PER_OP,
                );
            }
        }
    }
}

#[test]
fn conv_gradcheck_wrt_weights() {
    for seed in 0..SEEDS {
        let x = td(&[2, 6, 7], rand_vec(seed, 84, -1.0, 1.0));
        let ker = td(&[2, 2, 3, 3], rand_vec(seed + 23, 36, -0.7, 0.7));
        for stride in [1usize, 2] {
            let xf = x.clone();
            check(
                move |t, v| {
                    let xc = t.constant(xf.clone());
                    let y = t.conv2d(xc, v, ConvCfg { stride, pad: PadMode::Reflect })?;
                    let y2 = t.mul(y, y)?;
                    t.sum(y2)
                },
                &ker,
                TOL_PER_OP,
            );
        }
    }
}

#[test]
fn conv_kernel_larger_than_input_errors() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[1, 2, 2], vec![1.0; 4]));
    let w = t.constant(td(&[1, 1, 5, 5], vec![0.1; 25]));
    assert!(t.conv2d(x, w, ConvCfg { stride: 1, pad: PadMode::Valid }).is_err());
}

// ── Resample ─────────────────────────────────────────────────────────

#[test]
fn upsample_preserves_constants() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[2, 3, 4], vec![0.7; 24]));
    let y = t.upsample2x(x).unwrap();
    assert_eq!(t.value(y).shape(), &[2, 6, 8]);
    assert!(t.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn upsample_ramp_hand_oracle() {
    // 2x2 ramp -> 4x4 with the half-pixel bilinear weights evaluated by hand:
    // 1D pattern [x0, 0.75*x0+0.25*x1, 0.25*x0+0.75*x1, x1] applied separably.
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]));
    let y = t.upsample2x(x).unwrap();
    let want = [
        0.0, 0.25, 0.75, 1.0, //
        0.5, 0.75, 1.25, 1.5, //
        1.5, 1.75, 2.25, 2.5, //
        2.0, 2.25, 2.75, 3.0,
    ];
    assert!(max_abs_diff(t.value(y).data(), &want) < 1e-15);
}

#[test]
fn upsample_gradcheck() {
    for seed in 0..SEEDS {
        let x = td(&[2, 3, 5], rand_vec(seed, 30, -1.0, 1.0));
        check(
            |t, v| {
                let y = t.upsample2x(v)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &x,
            TOL_PER_OP,
        );
    }
}

#[test]
fn upsample_rejects_extent_one() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[1, 1, 4], vec![1.0; 4]));
    assert!(t.upsample2x(x).is_err());
}

// ── normalize_channels ───────────────────────────────────────────────

#[test]
fn instance_norm_constant_channel_gives_shift() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[2, 3, 3], vec![5.0; 18]));
    let scale = t.constant(td(&[2], vec![2.0, 3.0]));
    let shift = t.constant(td(&[2], vec![0.25, -0.5]));
    let y = t.instance_norm(x, scale, shift, 1e-5).unwrap();
    let d = t.value(y).data();
    assert!(d[..9].iter().all(|&v| (v - 0.25).abs() < 1e-9));
    assert!(d[9..].iter().all(|&v| (v + 0.5).abs() < 1e-9));
}

#[test]
fn instance_norm_standardized_unchanged() {
    // A channel with mean 0 and variance 1 passes through scale=1, shift=0
    // up to the epsilon floor.
    let n = 16usize;
    let mut data: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    data[0] = 1.0;
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[1, 4, 4], data.clone()));
    let scale = t.constant(td(&[1], vec![1.0]));
    let shift = t.constant(td(&[1], vec![0.0]));
    let y = t.instance_norm(x, scale, shift, 1e-12).unwrap();
    assert!(max_abs_diff(t.value(y).data(), &data) < 1e-6);
}

#[test]
fn instance_norm_gradchecks() {
    for seed in 0..SEEDS {
        let x = td(&[2, 3, 4], rand_vec(seed, 24, -1.0, 1.0));
        let scale = td(&[2], rand_vec(seed + 1, 2, 0.5, 1.5));
        let shift = td(&[2], rand_vec(seed + 2, 2, -0.3, 0.3));
        let (sc, sh) = (scale.clone(), shift.clone());
        check(
            move |t, v| {
                let s = t.constant(sc.clone());
                let b = t.constant(sh.clone());
                let y = t.instance_norm(v, s, b, 1e-5)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &x,
            1e-5, // norm couples all pixels; FD error accumulates slightly
        );
        let (xf, sh2) = (x.clone(), shift.clone());
        check(
            move |t, v| {
                let xc = t.constant(xf.clone());
                let b = t.constant(sh2.clone());
                let y = t.instance_norm(xc, v, b, 1e-5)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &scale,
            TOL_PER_OP,
        );
    }
}

// ── matmul / reductions / concat / slice ─────────────────────────────

#[test]
fn mean_of_constant_and_identity_matmul() {
    let mut t = Tape::<f64>::new();
    let c = t.constant(td(&[5], vec![2.5; 5]));
    let m = t.mean(c).unwrap();
    assert!((t.value(m).item() - 2.5).abs() < 1e-15);

    let x = t.constant(td(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
    let eye = t.constant(td(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let y = t.matmul(x, eye).unwrap();
    assert_eq!(t.value(y).data(), t.value(x).data());
}

#[test]
fn concat_slice_round_trip() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(td(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
    let b = t.constant(td(&[1, 3], vec![7., 8., 9.]));
    let c = t.concat0(&[a, b]).unwrap();
    assert_eq!(t.value(c).shape(), &[3, 3]);
    let s = t.slice0(c, 2, 1).unwrap();
    assert_eq!(t.value(s).data(), t.value(b).data());
    let s2 = t.slice0(c, 0, 2).unwrap();
    assert_eq!(t.value(s2).data(), t.value(a).data());
}

#[test]
fn matmul_concat_slice_transpose_gradchecks() {
    for seed in 0..SEEDS {
        let a = td(&[3, 4], rand_vec(seed, 12, -1.0, 1.0));
        let b = td(&[4, 2], rand_vec(seed + 9, 8, -1.0, 1.0));
        let bf = b.clone();
        check(
            move |t, v| {
                let c = t.constant(bf.clone());
                let y = t.matmul(v, c)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &a,
            TOL_PER_OP,
        );
        let af = a.clone();
        check(
            move |t, v| {
                let c = t.constant(af.clone());
                let y = t.matmul(c, v)?;
                let y2 = t.mul(y, y)?;
                t.sum(y2)
            },
            &b,
            TOL_PER_OP,
        );
        let x = td(&[4, 5], rand_vec(seed + 31, 20, -1.0, 1.0));
        check(
            move |t, v| {
                let tr = t.transpose2d(v)?;
                let sl = t.slice0(tr, 1, 3)?;
                let y2 = t.mul(sl, sl)?;
                t.sum(y2)
            },
            &x,
            TOL_PER_OP,
        );
        let p = td(&[2, 3], rand_vec(seed + 41, 6, -1.0, 1.0));
        check(
            move |t, v| {
                let w = t.concat0(&[v, v])?;
                let y2 = t.mul(w, w)?;
                t.sum(y2)
            },
            &p,
            TOL_PER_OP,
        );
    }
}

// ── Total variation ──────────────────────────────────────────────────

#[test]
fn tv_constant_map_is_epsilon_floor() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[4, 5], vec![3.0; 20]));
    let y = t.total_variation(x, 1e-6).unwrap();
    assert!(t.value(y).item() <= 2e-6);
}

#[test]
fn tv_unit_step_edge() {
    // Vertical unit step in an H x W map: L = H diffs of magnitude 1,
    // normalized by H*W.
    let (h, w) = (6, 8);
    let data: Vec<f64> = (0..h * w).map(|i| if i % w < w / 2 { 0.0 } else { 1.0 }).collect();
    let mut t = Tape::<f64>::new();
    let x = t.constant(td(&[h, w], data));
    let y = t.total_variation(x, 1e-9).unwrap();
    let want = h as f64 / (h * w) as f64;
    assert!((t.value(y).item() - want).abs() < 1e-6);
}

#[test]
fn tv_gradcheck() {
    // Smoothing eps large enough that the central difference itself is valid
    // (the truncation term scales like 1/eps^2).
    for seed in 0..SEEDS {
        let x = td(&[4, 5], rand_vec(seed, 20, -1.0, 1.0));
        check(|t, v| t.total_variation(v, 0.05), &x, TOL_PER_OP);
    }
}

// ── backward contract ────────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(td(&[7], rand_vec(1, 7, -1.0, 1.0)));
    let s = t.sum(x).unwrap();
    let mut g = t.backward(s).unwrap();
    assert_eq!(g.take(x).unwrap(), vec![1.0; 7]);
}

#[test]
fn backward_mean_of_squares() {
    // loss = mean(x^2) with x = const 2 over n elements: grad = 4/n each.
    let n = 6;
    let mut t = Tape::<f64>::new();
    let x = t.leaf(td(&[n], vec![2.0; n]));
    let y = t.mul(x, x).unwrap();
    let m = t.mean(y).unwrap();
    let mut g = t.backward(m).unwrap();
    for v in g.take(x).unwrap() {
        assert!((v - 4.0 / n as f64).abs() < 1e-15);
    }
}

#[test]
fn backward_requires_scalar_and_single_use() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(td(&[3], vec![1.0, 2.0, 3.0]));
    let y = t.mul(x, x).unwrap();
    assert!(t.backward(y).is_err());

    let mut t2 = Tape::<f64>::new();
    let x2 = t2.leaf(td(&[3], vec![1.0, 2.0, 3.0]));
    let s = t2.sum(x2).unwrap();
    t2.backward(s).unwrap();
    assert!(t2.backward(s).is_err());
}

#[test]
fn gradient_accumulation_fused_vs_separate() {
    // y = f(x) + g(x): the fused graph's gradient equals grad f + grad g
    // computed on separate graphs.
    let x0 = td(&[5], rand_vec(7, 5, 0.2, 1.5));

    let mut t = Tape::<f64>::new();
    let x = t.leaf(x0.clone());
    let f = t.sigmoid(x).unwrap();
    let fs = t.sum(f).unwrap();
    let g = t.mul(x, x).unwrap();
    let gs = t.sum(g).unwrap();
    let y = t.add(fs, gs).unwrap();
    let mut grads = t.backward(y).unwrap();
    let fused = grads.take(x).unwrap();

    let mut ta = Tape::<f64>::new();
    let xa = ta.leaf(x0.clone());
    let fa = ta.sigmoid(xa).unwrap();
    let fsa = ta.sum(fa).unwrap();
    let mut ga = ta.backward(fsa).unwrap();
    let part_a = ga.take(xa).unwrap();

    let mut tb = Tape::<f64>::new();
    let xb = tb.leaf(x0);
    let gb = tb.mul(xb, xb).unwrap();
    let gsb = tb.sum(gb).unwrap();
    let mut gbg = tb.backward(gsb).unwrap();
    let part_b = gbg.take(xb).unwrap();

    for i in 0..fused.len() {
        assert!((fused[i] - (part_a[i] + part_b[i])).abs() < 1e-12);
    }
}

#[test]
fn determinism_bit_identical_across_parallel_modes() {
    let run = || {
        let x0 = td(&[2, 12, 16], rand_vec(42, 2 * 12 * 16, -1.0, 1.0));
        let k0 = td(&[3, 2, 3, 3], rand_vec(43, 54, -0.5, 0.5));
        let mut t = Tape::<f64>::new();
        let x = t.leaf(x0);
        let w = t.leaf(k0);
        let c = t.conv2d(x, w, ConvCfg { stride: 1, pad: PadMode::Reflect }).unwrap();
        let a = t.leaky_relu(c, 0.1).unwrap();
        let u = t.upsample2x(a).unwrap();
        let y2 = t.mul(u, u).unwrap();
        let s = t.mean(y2).unwrap();
        let loss = t.value(s).item();
        let mut g = t.backward(s).unwrap();
        (loss, g.take(x).unwrap(), g.take(w).unwrap())
    };
    codedphase::par::set_parallel(true);
    let (l1, gx1, gw1) = run();
    let (l2, gx2, gw2) = run();
    assert!(l1.to_bits() == l2.to_bits(), "parallel runs must be bit-identical");
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
    codedphase::par::set_parallel(false);
    let (l3, gx3, gw3) = run();
    codedphase::par::set_parallel(true);
    assert!(l1.to_bits() == l3.to_bits(), "parallel and sequential must be bit-identical");
    assert_eq!(gx1, gx3);
    assert_eq!(gw1, gw3);
}

// ── grad_check harness itself ────────────────────────────────────────

#[test]
fn gradcheck_linear_is_machine_precision() {
    let x = td(&[6], rand_vec(5, 6, -1.0, 1.0));
    let rep = Tape::grad_check(|t, v| t.sum(v), &x, DELTA, CoordSel::All).unwrap();
    assert!(rep.max_rel_err < 1e-9, "linear rel err {:.3e}", rep.max_rel_err);
}

#[test]
fn gradcheck_sum_sin_passes_tight_tol() {
    let x = td(&[10], rand_vec(6, 10, -1.5, 1.5));
    let rep = Tape::grad_check(
        |t, v| {
            let s = t.sine(v, 1.0)?;
            t.sum(s)
        },
        &x,
        DELTA,
        CoordSel::All,
    )
    .unwrap();
    assert!(rep.passes(1e-7), "sum(sin) rel err {:.3e}", rep.max_rel_err);
}

#[test]
fn gradcheck_negative_control_detects_wrong_rule() {
    // A deliberately corrupted analytic gradient must be reported as failing.
    use codedphase::tape::{compare_grads, numeric_grad};
    let x = td(&[8], rand_vec(8, 8, -1.0, 1.0));
    let f = |t: &mut Tape<f64>, v: Var| -> Result<Var> {
        let y = t.tanh_act(v)?;
        t.sum(y)
    };
    let numeric = numeric_grad(&f, &x, DELTA, CoordSel::All).unwrap();
    // Correct analytic values, then corrupt one entry by 5%.
    let mut t = Tape::<f64>::new();
    let v = t.leaf(x.clone());
    let y = f(&mut t, v).unwrap();
    let mut g = t.backward(y).unwrap();
    let mut analytic: Vec<(usize, f64)> = g
        .take(v)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, &a)| (i, a))
        .collect();
    analytic[3].1 *= 1.05;
    let rep = compare_grads(&analytic, &numeric);
    assert!(!rep.passes(1e-6), "corrupted gradient must fail the check");
}

#[test]
fn random_coordinate_subset_is_seeded() {
    let x = td(&[64], rand_vec(10, 64, -1.0, 1.0));
    let f = |t: &mut Tape<f64>, v: Var| -> Result<Var> {
        let y = t.mul(v, v)?;
        t.sum(y)
    };
    use codedphase::tape::numeric_grad;
    let a = numeric_grad(&f, &x, DELTA, CoordSel::Random { count: 10, seed: 3 }).unwrap();
    let b = numeric_grad(&f, &x, DELTA, CoordSel::Random { count: 10, seed: 3 }).unwrap();
    assert_eq!(a, b);
}
