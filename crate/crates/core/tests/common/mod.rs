//! Shared test machinery: central-finite-difference gradient checking.
//!
//! The numeric side never touches the backward pass: it re-runs the forward
//! closure at perturbed inputs only, so it stays an independent oracle for
//! the reverse-mode gradients.

#![allow(dead_code)]

use hcdg_core::rng;
use hcdg_core::tensor::Tensor;
use ndarray::ArrayD;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Check reverse-mode gradients of `forward` against central differences for
/// every input that requires gradients. `forward` must be a pure function of
/// the input values (rebuild its graph on every call).
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    forward: &dyn Fn(&[Tensor<f64>]) -> Tensor<f64>,
    label: &str,
) {
    for t in inputs {
        t.zero_grad();
    }
    let loss = forward(inputs);
    loss.backward().unwrap();
    let analytic: Vec<Option<ArrayD<f64>>> = inputs.iter().map(|t| t.grad()).collect();

    for (ti, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        let grad = analytic[ti]
            .as_ref()
            .unwrap_or_else(|| panic!("{label}: input {ti} got no gradient"));
        let n = t.len();
        for e in 0..n {
            let orig = {
                let d = t.data();
                *d.iter().nth(e).unwrap()
            };
            let diff = |h: f64| {
                set_elem(t, e, orig + h);
                let up = forward(inputs).item();
                set_elem(t, e, orig - h);
                let down = forward(inputs).item();
                set_elem(t, e, orig);
                ((up - down) / (2.0 * h), (up - down).abs(), up.abs().max(down.abs()))
            };
            let (numeric, delta, scale) = diff(FD_STEP);
            let a = *grad.iter().nth(e).unwrap();
            let agree = |n: f64, floor: f64| {
                (a - n).abs() <= FD_TOL * a.abs().max(n.abs()) || (a - n).abs() <= floor
            };
            let mut ok = agree(numeric, 1e-8);
            if !ok && delta <= 1e-10 * scale.max(1.0) && a.abs() <= 1e-6 {
                // the loss moved by less than accumulated f64 rounding can
                // resolve: the stencil measures noise plateaus, not a slope
                ok = true;
            }
            if !ok {
                // a ReLU kink within FD_STEP of a pre-activation makes the
                // wide stencil one-sided; a refined step disambiguates
                let (refined, rdelta, rscale) = diff(1e-7);
                ok = agree(refined, 1e-6)
                    || (rdelta <= 1e-10 * rscale.max(1.0) && a.abs() <= 1e-6);
            }
            assert!(
                ok,
                "{label}: input {ti} elem {e}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn set_elem(t: &Tensor<f64>, idx: usize, value: f64) {
    t.update_data(|d| {
        *d.iter_mut().nth(idx).unwrap() = value;
    });
}

/// Random tensor with entries in `(lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64, requires_grad: bool) -> Tensor<f64> {
    let mut r = rng::stream(seed, "gradcheck");
    let data = ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || r.random_range(lo..hi));
    Tensor::new(data, requires_grad)
}

/// Random tensor with entries bounded away from zero (for kink-free ReLU
/// checks).
pub fn random_tensor_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "gradcheck-nz");
    let data = ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || {
        let v: f64 = r.random_range(0.05..1.5);
        if r.random_range(0.0..1.0) < 0.5 {
            -v
        } else {
            v
        }
    });
    Tensor::new(data, true)
}

/// Fixed random weighting so scalar losses see a non-uniform output gradient.
pub fn weighted_sum(y: &Tensor<f64>, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "gradcheck-w");
    let w = ArrayD::from_shape_simple_fn(ndarray::IxDyn(&y.shape()), || r.random_range(-1.0..1.0));
    y.mul(&Tensor::new(w, false)).sum_all()
}

// ---------------------------------------------------------------------------
// reusable suites (shared between the gradients target and acceptance)
// ---------------------------------------------------------------------------

use hcdg_core::losses;
use hcdg_core::nn::{ClassmateTask, ModelConfig, NormMode, ParamEntry, SegModel};
use hcdg_core::tensor::ops::{bce_with_logits, channel_norm_eval, channel_norm_train, conv2d};
use ndarray::{Array1, Array3, Array4, Axis};

/// Run the full per-primitive gradient suite, `cases` random cases per op.
pub fn primitive_gradient_suite(cases: u64) {
    for case in 0..cases {
        let a = random_tensor(&[2, 2, 3, 3], -1.5, 1.5, case * 7 + 1, true);
        let b = random_tensor(&[2, 2, 3, 3], 0.3, 1.8, case * 7 + 2, true);
        check_gradients(&[a.clone(), b.clone()], &|io| weighted_sum(&io[0].add(&io[1]), 11), "add");
        check_gradients(&[a.clone(), b.clone()], &|io| weighted_sum(&io[0].sub(&io[1]), 12), "sub");
        check_gradients(&[a.clone(), b.clone()], &|io| weighted_sum(&io[0].mul(&io[1]), 13), "mul");
        check_gradients(&[a.clone(), b.clone()], &|io| weighted_sum(&io[0].div(&io[1]), 14), "div");
        check_gradients(&[a.clone()], &|io| weighted_sum(&io[0].neg(), 15), "neg");
        check_gradients(&[a.clone()], &|io| weighted_sum(&io[0].add_scalar(0.7), 16), "add_scalar");
        check_gradients(&[a.clone()], &|io| weighted_sum(&io[0].mul_scalar(-1.3), 17), "mul_scalar");

        let x = random_tensor_away_from_zero(&[1, 3, 4, 4], case * 5 + 3);
        check_gradients(&[x.clone()], &|io| weighted_sum(&io[0].relu(), 21), "relu");
        check_gradients(&[x.clone()], &|io| weighted_sum(&io[0].sigmoid(), 22), "sigmoid");
        check_gradients(&[x.clone()], &|io| weighted_sum(&io[0].tanh(), 23), "tanh");
        check_gradients(&[x.clone()], &|io| weighted_sum(&io[0].heaviside(20.0), 24), "heaviside");

        let sm = random_tensor(&[2, 3, 2, 2], -2.0, 2.0, case * 3 + 5, true);
        check_gradients(&[sm.clone()], &|io| weighted_sum(&io[0].softmax_channels(), 31), "softmax_channels");
        check_gradients(&[sm], &|io| weighted_sum(&io[0].log_softmax_channels(), 32), "log_softmax_channels");

        let red = random_tensor(&[2, 2, 4, 4], -1.0, 1.0, case * 11 + 7, true);
        check_gradients(&[red.clone()], &|io| io[0].sum_all(), "sum_all");
        check_gradients(&[red.clone()], &|io| io[0].mean_all(), "mean_all");
        check_gradients(&[red], &|io| weighted_sum(&io[0].upsample_nearest_2x(), 41), "upsample_nearest_2x");

        let cx = random_tensor(&[2, 2, 4, 4], -1.0, 1.0, case * 13 + 1, true);
        let cw = random_tensor(&[3, 2, 3, 3], -0.6, 0.6, case * 13 + 2, true);
        let cb = random_tensor(&[3], -0.3, 0.3, case * 13 + 3, true);
        for stride in [1usize, 2] {
            check_gradients(
                &[cx.clone(), cw.clone(), cb.clone()],
                &|io| weighted_sum(&conv2d(&io[0], &io[1], &io[2], stride, 1), 51),
                &format!("conv2d stride {stride}"),
            );
        }

        let nx = random_tensor(&[2, 3, 4, 4], -1.2, 1.2, case * 17 + 1, true);
        let ng = random_tensor(&[3], 0.5, 1.5, case * 17 + 2, true);
        let nb = random_tensor(&[3], -0.4, 0.4, case * 17 + 3, true);
        check_gradients(
            &[nx.clone(), ng.clone(), nb.clone()],
            &|io| {
                let (y, _, _) = channel_norm_train(&io[0], &io[1], &io[2], 1e-5);
                weighted_sum(&y, 61)
            },
            "channel_norm_train",
        );
        let rm = Array1::from_vec(vec![0.1, -0.2, 0.05]);
        let rv = Array1::from_vec(vec![1.1, 0.8, 1.4]);
        check_gradients(
            &[nx, ng, nb],
            &|io| weighted_sum(&channel_norm_eval(&io[0], &io[1], &io[2], &rm, &rv, 1e-5), 62),
            "channel_norm_eval",
        );

        let logits = random_tensor(&[2, 2, 3, 3], -2.5, 2.5, case * 19 + 1, true);
        let targets = {
            let probs = random_tensor(&[2, 2, 3, 3], 0.0, 1.0, case * 19 + 2, false);
            let hard = probs.data().mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
            Tensor::new(hard, false)
        };
        check_gradients(&[logits, targets], &|io| bce_with_logits(&io[0], &io[1]), "bce_with_logits");
    }
}

/// Central-difference check of the full single-step objective against every
/// trainable parameter of a tiny model.
pub fn composite_total_loss_suite(cases: u64) {
    for case in 0..cases {
        composite_total_loss_case(case);
    }
}

fn composite_total_loss_case(case: u64) {
    // generic-point configuration: big enough feature maps and mild dropout
    // so no channel can collapse to a zero-variance state, and norm shifts
    // nudged off the exact ReLU kink
    let cfg = ModelConfig {
        in_channels: 3,
        num_classes: 2,
        encoder_widths: [2, 2, 3, 3],
        decoder_widths: [3, 2, 2],
        num_classmates: 2,
        dropout_p: 0.3,
        ..ModelConfig::default()
    };
    let mut init = rng::stream(1000 + case, "composite-init");
    let model = SegModel::<f64>::new(cfg, &mut init).unwrap();
    for (_, e) in model.all_entries() {
        if e.trainable && e.name.ends_with("norm.beta") {
            e.tensor.update_data(|d| d.mapv_inplace(|v| v + 0.05));
        }
    }

    // frozen inputs: weak batch, candidates, targets and boundary targets
    let mut r = rng::stream(2000 + case, "composite-data");
    let weak = Tensor::from_array(
        Array4::from_shape_fn((2, 3, 16, 16), |_| r.random_range(0.0..1.0)),
        false,
    );
    let targets = Tensor::from_array(
        Array4::from_shape_fn((2, 2, 16, 16), |(_, c, i, j)| {
            let rad = if c == 0 { 16.0 } else { 36.0 };
            if (i as f64 - 8.0).powi(2) + (j as f64 - 8.0).powi(2) < rad {
                1.0
            } else {
                0.0
            }
        }),
        false,
    );
    let boundaries = Tensor::from_array(
        Array4::from_shape_fn((2, 2, 16, 16), |_| r.random_range(-0.99..0.99)),
        false,
    );
    let candidates: Vec<Vec<Array3<f64>>> = (0..2)
        .map(|i| {
            let wd = weak.data();
            let w4 = wd.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let base = w4.index_axis(Axis(0), i).to_owned();
            let corrupted = base.mapv(|v: f64| (1.0 - v).clamp(0.0, 1.0));
            vec![base, corrupted]
        })
        .collect();

    // snapshot non-trainable state so every loss evaluation starts from the
    // same running statistics
    let stats_snapshot: Vec<(ParamEntry<f64>, ndarray::ArrayD<f64>)> = model
        .all_entries()
        .into_iter()
        .map(|(_, e)| {
            let data = e.tensor.data().clone();
            (e, data)
        })
        .filter(|(e, _)| !e.trainable)
        .collect();

    let loss_fn = {
        let model = &model;
        let weak = weak.clone();
        let targets = targets.clone();
        let boundaries = boundaries.clone();
        let candidates = candidates.clone();
        let stats_snapshot = &stats_snapshot;
        move |_io: &[Tensor<f64>]| -> Tensor<f64> {
            for (e, snap) in stats_snapshot.iter() {
                e.tensor.set_data(snap.clone());
            }
            let scores = losses::score_candidates(model, &candidates, &targets).unwrap();
            let winners = losses::select_winners(&scores);
            let (c, h, w) = candidates[0][0].dim();
            let mut strong = Array4::<f64>::zeros((2, c, h, w));
            for (i, &win) in winners.iter().enumerate() {
                strong.index_axis_mut(Axis(0), i).assign(&candidates[i][win]);
            }
            let strong = Tensor::from_array(strong, false);

            let (weak_logits, z) = model.forward_student(&weak, NormMode::Train).unwrap();
            let seg_w = losses::bce_seg(&weak_logits, &targets);
            let (strong_logits, _) = model.forward_student(&strong, NormMode::Train).unwrap();
            let seg_s = losses::bce_seg(&strong_logits, &targets);
            let l_seg = seg_w.add(&seg_s);

            let tea_w = model.forward_teacher(&weak).unwrap();
            let tea_s = model.forward_teacher(&strong).unwrap();
            let w2s = losses::kl_consistency(&weak_logits, &tea_s, 10.0);
            let s2w = losses::kl_consistency(&strong_logits, &tea_w, 10.0);
            let ec = w2s.add(&s2w);

            let mut perturb = rng::stream(3000 + 17, "composite-perturb");
            let preds = model.forward_classmates(
                &z,
                NormMode::Train,
                ClassmateTask::Boundary,
                Some(&mut perturb),
            );
            let lb = losses::boundary_mse(&preds, &boundaries);
            let ic = losses::ic_consistency(&weak_logits, &preds, 20.0);

            losses::total_loss(&l_seg, Some(&ec), Some(&lb), Some(&ic), 5.0)
        }
    };

    let params: Vec<Tensor<f64>> = model
        .student_entries()
        .into_iter()
        .chain(model.group(hcdg_core::nn::Group::Classmates))
        .filter(|e| e.trainable)
        .map(|e| e.tensor)
        .collect();
    check_gradients(&params, &loss_fn, &format!("composite total objective case {case}"));
}

/// Debug variant: run one composite case but print the FD landscape of one
/// element instead of asserting.
pub fn composite_probe(case: u64, input_idx: usize, elem: usize) {
    let cfg = ModelConfig {
        in_channels: 3,
        num_classes: 2,
        encoder_widths: [2, 2, 3, 3],
        decoder_widths: [3, 2, 2],
        num_classmates: 2,
        ..ModelConfig::default()
    };
    let mut init = rng::stream(1000 + case, "composite-init");
    let model = SegModel::<f64>::new(cfg, &mut init).unwrap();
    let mut r = rng::stream(2000 + case, "composite-data");
    let weak = Tensor::from_array(
        ndarray::Array4::from_shape_fn((2, 3, 8, 8), |_| r.random_range(0.0..1.0)),
        false,
    );
    let targets = Tensor::from_array(
        ndarray::Array4::from_shape_fn((2, 2, 8, 8), |(_, c, i, j)| {
            let rad = if c == 0 { 4.0 } else { 9.0 };
            if (i as f64 - 4.0).powi(2) + (j as f64 - 4.0).powi(2) < rad { 1.0 } else { 0.0 }
        }),
        false,
    );
    let boundaries = Tensor::from_array(
        ndarray::Array4::from_shape_fn((2, 2, 8, 8), |_| r.random_range(-0.99..0.99)),
        false,
    );
    let candidates: Vec<Vec<Array3<f64>>> = (0..2)
        .map(|i| {
            let wd = weak.data();
            let w4 = wd.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let base = w4.index_axis(Axis(0), i).to_owned();
            let corrupted = base.mapv(|v: f64| (1.0 - v).clamp(0.0, 1.0));
            vec![base, corrupted]
        })
        .collect();
    let stats_snapshot: Vec<(ParamEntry<f64>, ndarray::ArrayD<f64>)> = model
        .all_entries()
        .into_iter()
        .map(|(_, e)| {
            let data = e.tensor.data().clone();
            (e, data)
        })
        .filter(|(e, _)| !e.trainable)
        .collect();
    let loss_fn = |_: &[Tensor<f64>]| -> Tensor<f64> {
        for (e, snap) in stats_snapshot.iter() {
            e.tensor.set_data(snap.clone());
        }
        let scores = losses::score_candidates(&model, &candidates, &targets).unwrap();
        let winners = losses::select_winners(&scores);
        let (c, h, w) = candidates[0][0].dim();
        let mut strong = ndarray::Array4::<f64>::zeros((2, c, h, w));
        for (i, &win) in winners.iter().enumerate() {
            strong.index_axis_mut(Axis(0), i).assign(&candidates[i][win]);
        }
        let strong = Tensor::from_array(strong, false);
        let (weak_logits, z) = model.forward_student(&weak, NormMode::Train).unwrap();
        let seg_w = losses::bce_seg(&weak_logits, &targets);
        let (strong_logits, _) = model.forward_student(&strong, NormMode::Train).unwrap();
        let seg_s = losses::bce_seg(&strong_logits, &targets);
        let l_seg = seg_w.add(&seg_s);
        let tea_w = model.forward_teacher(&weak).unwrap();
        let tea_s = model.forward_teacher(&strong).unwrap();
        let w2s = losses::kl_consistency(&weak_logits, &tea_s, 10.0);
        let s2w = losses::kl_consistency(&strong_logits, &tea_w, 10.0);
        let ec = w2s.add(&s2w);
        let mut perturb = rng::stream(3000 + 17, "composite-perturb");
        let preds = model.forward_classmates(&z, NormMode::Train, ClassmateTask::Boundary, Some(&mut perturb));
        let lb = losses::boundary_mse(&preds, &boundaries);
        let ic = losses::ic_consistency(&weak_logits, &preds, 20.0);
        losses::total_loss(&l_seg, Some(&ec), Some(&lb), Some(&ic), 5.0)
    };
    let params: Vec<Tensor<f64>> = model
        .student_entries()
        .into_iter()
        .chain(model.group(hcdg_core::nn::Group::Classmates))
        .filter(|e| e.trainable)
        .map(|e| e.tensor)
        .collect();
    let names: Vec<String> = model
        .student_entries()
        .into_iter()
        .chain(model.group(hcdg_core::nn::Group::Classmates))
        .filter(|e| e.trainable)
        .map(|e| e.name)
        .collect();
    println!("input {input_idx} = {}", names[input_idx]);
    let t = &params[input_idx];
    let orig = { *t.data().iter().nth(elem).unwrap() };
    for h in [0.0, 1e-5, -1e-5, 1e-3, -1e-3] {
        t.update_data(|d| *d.iter_mut().nth(elem).unwrap() = orig + h);
        let l = loss_fn(&params).item();
        println!("  h={h:+.0e}: loss {l:.17}");
    }
    t.update_data(|d| *d.iter_mut().nth(elem).unwrap() = orig);
    let loss = loss_fn(&params);
    loss.backward().unwrap();
    println!("  analytic: {:?}", t.grad().map(|g| *g.iter().nth(elem).unwrap()));
}
