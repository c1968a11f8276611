//! Analytic gradients against central finite differences in f64. Each case
//! family panics on a mismatch and returns the number of cases it checked.

use fssentry::attacks::cw_margin;
use fssentry::fewshot::{FewShotModel, HeadKind, Role, Want};
use fssentry::filters::ae::{ae_loss, AeModel, AeObjective};
use fssentry::numcore::loss::softmax_cross_entropy;
use fssentry::numcore::{
    finite_diff_coords, grad_input, grad_params, LayerSpec, LossFn, Network, RngStream, Targets,
    Tensor, Topology,
};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-6;
const SMALL: f64 = 1e-8;

fn assert_close(case: &str, analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if n.is_nan() {
            continue;
        }
        if a.abs() < SMALL {
            assert!((a - n).abs() < ABS_TOL, "{case}[{i}]: analytic {a:e} numeric {n:e}");
        } else {
            let rel = (a - n).abs() / a.abs().max(n.abs());
            assert!(rel < REL_TOL, "{case}[{i}]: analytic {a:e} numeric {n:e} rel {rel:e}");
        }
    }
}

/// Central differences at `h`, `h/2` and `h/4`. A coordinate whose estimates
/// disagree has a ReLU kink inside the probe interval; it is reported as NaN
/// and skipped. At least half of the coordinates must survive.
fn smooth_diff(
    case: &str,
    mut f: impl FnMut(&Tensor<f64>) -> fssentry::Result<f64>,
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
) -> Vec<f64> {
    let wide = finite_diff_coords(&mut f, x, h, coords).unwrap();
    let narrow = finite_diff_coords(&mut f, x, h / 2.0, coords).unwrap();
    let narrower = finite_diff_coords(&mut f, x, h / 4.0, coords).unwrap();
    let agree = |a: f64, b: f64| (a - b).abs() <= 0.25 * REL_TOL * a.abs().max(b.abs()) + ABS_TOL / 10.0;
    let out: Vec<f64> = (0..coords.len())
        .map(|i| {
            let (w, n, m) = (wide[i], narrow[i], narrower[i]);
            if !agree(w, n) || !agree(n, m) {
                f64::NAN
            } else {
                n
            }
        })
        .collect();
    let kept = out.iter().filter(|v| !v.is_nan()).count();
    assert!(2 * kept >= coords.len(), "{case}: only {kept} of {} coordinates are kink-free", coords.len());
    out
}

fn random_tensor(shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

fn sample_coords(len: usize, k: usize, rng: &mut RngStream) -> Vec<usize> {
    if len <= k {
        (0..len).collect()
    } else {
        rng.choose_distinct(len, k)
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        in_ch,
        out_ch,
        kernel,
        stride,
    }
}

/// Small layer stacks covering every layer kind.
fn small_networks() -> Vec<(Vec<usize>, Vec<LayerSpec>, bool)> {
    use LayerSpec::*;
    vec![
        (vec![2, 4, 4], vec![conv(2, 3, 3, 1), Relu, AvgPool2, Dense { inputs: 12, outputs: 3 }], true),
        (vec![1, 6, 6], vec![conv(1, 2, 3, 2), Sigmoid, Dense { inputs: 18, outputs: 4 }], true),
        (vec![3, 4, 4], vec![conv(3, 2, 1, 1), Relu, Upsample2, conv(2, 1, 3, 1), Sigmoid], false),
        (vec![5], vec![Dense { inputs: 5, outputs: 4 }, Relu, Dense { inputs: 4, outputs: 2 }], true),
        (vec![2, 2, 2], vec![Upsample2, conv(2, 2, 3, 1), AvgPool2, Sigmoid], false),
        (vec![2, 4, 4], vec![conv(2, 4, 3, 1), Relu, AvgPool2, conv(4, 2, 3, 1), Relu, AvgPool2, Dense { inputs: 2, outputs: 3 }], true),
        (vec![1, 5, 5], vec![conv(1, 2, 3, 2), Relu, conv(2, 2, 3, 1), Sigmoid], false),
        (vec![6], vec![Dense { inputs: 6, outputs: 6 }, Sigmoid, Dense { inputs: 6, outputs: 3 }], true),
    ]
}

pub fn layer_stacks_params_and_inputs() -> usize {
    let mut rng = RngStream::new(7, 1);
    let mut cases = 0;
    for (idx, (shape, specs, classify)) in small_networks().into_iter().enumerate() {
        let net = Network::<f64>::new(Topology::Encoder, &shape, specs, &mut rng).unwrap();
        let mut bshape = vec![2];
        bshape.extend_from_slice(&shape);
        let x = random_tensor(&bshape, &mut rng, -1.0, 1.0);
        let out_shape = net.output_shape();
        let labels = [0usize, 1];
        let mut tshape = vec![2];
        tshape.extend_from_slice(&out_shape);
        let target = random_tensor(&tshape, &mut rng, 0.0, 1.0);
        let (loss, targets) = if classify {
            (LossFn::SoftmaxCrossEntropy, Targets::Labels(&labels))
        } else {
            (LossFn::MeanSquaredError, Targets::Values(&target))
        };

        let (_, gx) = grad_input(&net, loss, &x, targets).unwrap();
        let case = format!("net{idx} input");
        let all: Vec<usize> = (0..x.len()).collect();
        let nx = smooth_diff(
            &case,
            |xx| {
                let out = net.forward(xx)?;
                Ok(loss.eval(&out, targets)?.0)
            },
            &x,
            &all,
            H,
        );
        assert_close(&case, gx.data(), &nx);

        let (_, gp) = grad_params(&net, loss, &x, targets).unwrap();
        for (pi, g) in gp.iter().enumerate() {
            let case = format!("net{idx} param{pi}");
            let all: Vec<usize> = (0..g.len()).collect();
            let np = smooth_diff(
                &case,
                |p| {
                    let mut n2 = net.clone();
                    n2.params_mut()[pi] = p.clone();
                    let out = n2.forward(&x)?;
                    Ok(loss.eval(&out, targets)?.0)
                },
                &net.params()[pi],
                &all,
                H,
            );
            assert_close(&case, g.data(), &np);
        }
        cases += 1;
    }
    cases
}

fn support_episode(rng: &mut RngStream, k: usize, n: usize, q: usize) -> (Tensor<f64>, Vec<Role>, Tensor<f64>, Vec<Role>) {
    let support = random_tensor(&[k * n, 3, 16, 16], rng, 0.0, 1.0);
    let s_roles: Vec<Role> = (0..k * n).map(|i| Role::Support(i / n)).collect();
    let query = random_tensor(&[q, 3, 16, 16], rng, 0.0, 1.0);
    let q_roles: Vec<Role> = (0..q).map(|i| Role::Query(i % k)).collect();
    (support, s_roles, query, q_roles)
}

pub fn episode_loss_wrt_support_pixels() -> usize {
    // 4 prototypical + 4 relation instances; traced support, fixed query features.
    let mut rng = RngStream::new(11, 2);
    for case in 0..8 {
        let kind = if case < 4 { HeadKind::Prototypical } else { HeadKind::Relation };
        let (k, n) = (3, 1 + case % 2);
        let model = FewShotModel::<f64>::new(kind, k, n, &mut rng).unwrap();
        let (support, s_roles, query, q_roles) = support_episode(&mut rng, k, n, 4);
        let qf = model.encode(&query).unwrap();
        let eval = |s: &Tensor<f64>, want: Want| {
            model.episode_grads(Some((s, &s_roles)), Some((&qf, &q_roles)), k, &softmax_cross_entropy, want)
        };
        let g = eval(
            &support,
            Want {
                params: false,
                input: true,
            },
        )
        .unwrap();
        let grad = g.input.unwrap();
        assert!(grad.data().iter().any(|&v| v != 0.0), "case {case}: zero support gradient");
        let coords = sample_coords(support.len(), 40, &mut rng);
        let numeric = smooth_diff("episode", |s| Ok(eval(s, Want::default())?.loss), &support, &coords, H);
        let analytic: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
        assert_close(&format!("episode case {case}"), &analytic, &numeric);
    }
    8
}

pub fn episode_loss_wrt_model_parameters() -> usize {
    let mut rng = RngStream::new(13, 3);
    for (case, kind) in [HeadKind::Prototypical, HeadKind::Relation].into_iter().enumerate() {
        let mut model = FewShotModel::<f64>::new(kind, 3, 2, &mut rng).unwrap();
        let (support, s_roles, query, q_roles) = support_episode(&mut rng, 3, 2, 3);
        let x = Tensor::concat(&[&support, &query]).unwrap();
        let roles: Vec<Role> = s_roles.iter().chain(&q_roles).copied().collect();
        let g = model
            .episode_grads(
                Some((&x, &roles)),
                None,
                3,
                &softmax_cross_entropy,
                Want {
                    params: true,
                    input: false,
                },
            )
            .unwrap();
        let mut grads = g.encoder.unwrap();
        grads.extend(g.relation.unwrap_or_default());
        let params = model.params();
        for (pi, grad) in grads.iter().enumerate() {
            let coords = sample_coords(grad.len(), 12, &mut rng);
            let base = params.clone();
            let numeric = smooth_diff(
                "parameters",
                |p| {
                    let mut ps = base.clone();
                    ps[pi] = p.clone();
                    model.set_params(ps)?;
                    Ok(model.episode_grads(Some((&x, &roles)), None, 3, &softmax_cross_entropy, Want::default())?.loss)
                },
                &params[pi],
                &coords,
                H,
            );
            model.set_params(base).unwrap();
            let analytic: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
            assert_close(&format!("params case {case} tensor {pi}"), &analytic, &numeric);
        }
    }
    2
}

pub fn temperature_scaled_query_gradient() -> usize {
    let mut rng = RngStream::new(17, 4);
    for case in 0..2 {
        let model = FewShotModel::<f64>::new(HeadKind::Prototypical, 3, 2, &mut rng).unwrap();
        let (support, s_roles, query, _) = support_episode(&mut rng, 3, 2, 1);
        let sf = model.encode(&support).unwrap();
        let t = [1.0, 100.0][case];
        let obj = move |l: &Tensor<f64>, y: &[usize]| {
            let (loss, mut g) = softmax_cross_entropy(&l.map(|v| v / t), y)?;
            g.scale(1.0 / t);
            Ok((loss, g))
        };
        let roles = [Role::Query(1)];
        let eval = |q: &Tensor<f64>, want| model.episode_grads(Some((q, &roles)), Some((&sf, &s_roles)), 3, &obj, want);
        let g = eval(
            &query,
            Want {
                params: false,
                input: true,
            },
        )
        .unwrap()
        .input
        .unwrap();
        let coords = sample_coords(query.len(), 40, &mut rng);
        let h = if t > 1.0 { 10.0 * H } else { H };
        let numeric = smooth_diff("odin", |q| Ok(eval(q, Want::default())?.loss), &query, &coords, h);
        let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i]).collect();
        assert_close(&format!("odin T={t}"), &analytic, &numeric);
    }
    2
}

pub fn autoencoder_objectives_wrt_parameters() -> usize {
    let mut rng = RngStream::new(19, 5);
    let fs = FewShotModel::<f64>::new(HeadKind::Prototypical, 3, 1, &mut rng).unwrap();
    for case in 0..3 {
        let ae = AeModel::<f64>::new(&mut rng).unwrap();
        // Inputs near the reconstruction keep the loss small, and with it the
        // roundoff of the central differences.
        let mut x = ae.reconstruct(&random_tensor(&[2, 3, 16, 16], &mut rng, 0.0, 1.0)).unwrap();
        x.add_assign(&random_tensor(&[2, 3, 16, 16], &mut rng, -0.05, 0.05));
        let calib = fs.encode(&random_tensor(&[3, 3, 16, 16], &mut rng, 0.0, 1.0)).unwrap();
        let objective = match case {
            0 => AeObjective::Standard,
            1 => AeObjective::Fpa(&fs),
            _ => AeObjective::FpaPrime(&fs),
        };
        let (_, _, grads) = ae_loss(&ae, objective, &x, Some(&calib), true).unwrap();
        let grads = grads.unwrap();
        let params = ae.params();
        for (pi, grad) in grads.iter().enumerate() {
            let coords = sample_coords(grad.len(), 12, &mut rng);
            let numeric = smooth_diff(
                "parameters",
                |p| {
                    let mut a2 = ae.clone();
                    let mut ps = params.clone();
                    ps[pi] = p.clone();
                    a2.set_params(ps)?;
                    Ok(ae_loss(&a2, objective, &x, Some(&calib), false)?.0)
                },
                &params[pi],
                &coords,
                H,
            );
            let analytic: Vec<f64> = coords.iter().map(|&i| grad.data()[i]).collect();
            assert_close(&format!("ae objective {case} tensor {pi}"), &analytic, &numeric);
        }
    }
    3
}

pub fn carlini_wagner_margin_wrt_support_pixels() -> usize {
    let mut rng = RngStream::new(23, 6);
    for (case, kind) in [HeadKind::Prototypical, HeadKind::Relation].into_iter().enumerate() {
        let model = FewShotModel::<f64>::new(kind, 3, 2, &mut rng).unwrap();
        let (support, s_roles, query, _) = support_episode(&mut rng, 3, 2, 4);
        let qf = model.encode(&query).unwrap();
        let q_roles = vec![Role::Query(0); 4];
        let obj = |l: &Tensor<f64>, _: &[usize]| cw_margin(l, 0, 0.1);
        let eval = |s: &Tensor<f64>, want| model.episode_grads(Some((s, &s_roles)), Some((&qf, &q_roles)), 3, &obj, want);
        let g = eval(
            &support,
            Want {
                params: false,
                input: true,
            },
        )
        .unwrap()
        .input
        .unwrap();
        let coords = sample_coords(support.len(), 40, &mut rng);
        let case = format!("cw case {case}");
        let numeric = smooth_diff(&case, |s| Ok(eval(s, Want::default())?.loss), &support, &coords, H);
        let analytic: Vec<f64> = coords.iter().map(|&i| g.data()[i]).collect();
        assert_close(&case, &analytic, &numeric);
    }
    2
}
