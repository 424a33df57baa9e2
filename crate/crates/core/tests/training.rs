//! Optimiser, test-time training and multi-scale composition against
//! independent reference computations.

use msreg::evalkit::{make_synthetic_case, SyntheticSpec};
use msreg::multiscale::{register_multiscale, ScaleInit, ScaleSchedule};
use msreg::optim::{adam_update, evaluate_pair, test_time_train, AdamState, TrainSpec};
use msreg::regnet::{init_params, predict_field, predict_field_periodic, NetConfig, NetParams};
use msreg::{Dims, DisplacementField, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_net() -> NetConfig {
    NetConfig::with_widths(2, vec![4, 8], vec![8, 4])
}

fn pair(seed: u64, n: usize, disp: f64) -> (Image<f64>, Image<f64>) {
    let c = make_synthetic_case::<f64>(&SyntheticSpec::new(&[n, n], disp, n as f64 / 6.0, seed)).unwrap();
    (c.base, c.warped)
}

#[test]
fn adam_follows_the_reference_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sizes = [5usize, 3, 7];
    let mut params: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut reference = params.clone();
    let (lr, b1, b2, eps) = (1e-3, 0.9f64, 0.999f64, 1e-8);
    let mut m: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v = m.clone();
    let mut state = AdamState::new(&params, lr);
    for t in 1..=10 {
        let grads: Vec<Vec<f64>> = sizes.iter().map(|&n| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        adam_update(&mut params, &grads, &mut state).unwrap();
        for k in 0..sizes.len() {
            for i in 0..sizes[k] {
                let g = grads[k][i];
                m[k][i] = b1 * m[k][i] + (1.0 - b1) * g;
                v[k][i] = b2 * v[k][i] + (1.0 - b2) * g * g;
                let mh = m[k][i] / (1.0 - b1.powi(t));
                let vh = v[k][i] / (1.0 - b2.powi(t));
                reference[k][i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
    for (p, r) in params.iter().flatten().zip(reference.iter().flatten()) {
        assert!((p - r).abs() < 1e-12, "{p} vs {r}");
    }
}

#[test]
fn ttt_returns_the_best_recorded_iterate() {
    let (moving, fixed) = pair(1, 16, 2.0);
    let spec = TrainSpec::new(2).with_steps(30).with_lambda(1.0);
    let p0 = init_params::<f64>(&small_net(), 3).unwrap();
    let out = test_time_train(p0, &moving, &fixed, &spec).unwrap();
    let totals: Vec<f64> = out.trace.iter().map(|r| r.total).collect();
    let best = totals.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(best <= totals[0]);
    let (again, _, field) = evaluate_pair(&out.params, &moving, &fixed, spec.lambda, &spec.window).unwrap();
    assert_eq!(again.total, best);
    assert_eq!(field, out.field);
}

#[test]
fn self_registration_without_smoothness_stays_at_minus_one() {
    // contrast well above the correlation epsilon
    let img = pair(2, 16, 0.0).0.map(|v| 10.0 * v);
    let spec = TrainSpec::new(2).with_steps(40).with_lambda(0.0);
    let out = test_time_train(init_params::<f64>(&small_net(), 0).unwrap(), &img, &img, &spec).unwrap();
    for r in &out.trace {
        assert!((r.reconstruction + 1.0).abs() < 1e-3, "{}", r.reconstruction);
    }
}

#[test]
fn single_scale_schedule_reproduces_ttt_bitwise() {
    let (moving, fixed) = pair(3, 16, 2.0);
    let spec = TrainSpec::new(2).with_steps(15).with_seed(5);
    let cfg = small_net();
    let ttt = test_time_train(init_params::<f64>(&cfg, 5).unwrap(), &moving, &fixed, &spec).unwrap();
    let ms = register_multiscale(&moving, &fixed, &ScaleSchedule::single(15), &spec, ScaleInit::Fresh(cfg)).unwrap();
    let bits = |f: &DisplacementField<f64>| f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ms.final_field), bits(&ttt.field));
}

/// Clamped bilinear sample of component `c` of a 2D field.
fn bilinear(f: &DisplacementField<f64>, c: usize, y: f64, x: f64) -> f64 {
    let [_, ny, nx] = f.dims().zyx();
    let y = y.clamp(0.0, (ny - 1) as f64);
    let x = x.clamp(0.0, (nx - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(ny - 1), (x0 + 1).min(nx - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let comp = f.component(c);
    let at = |yy: usize, xx: usize| comp[yy * nx + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

#[test]
fn two_scale_composition_matches_sequential_oracle() {
    let (moving, fixed) = pair(4, 32, 3.0);
    let spec = TrainSpec::new(2).with_steps(10);
    let r = register_multiscale(&moving, &fixed, &ScaleSchedule::two_scale(10), &spec, ScaleInit::Fresh(small_net()))
        .unwrap();
    let full = fixed.dims();
    let [_, ny, nx] = full.zyx();
    let (res0, res1) = (&r.per_scale_residuals[0], &r.per_scale_residuals[1]);
    assert_eq!(res0.dims(), Dims::d2(16, 16));
    for y in 0..ny {
        for x in 0..nx {
            let i = full.index(0, y, x);
            // coarsest scale: the residual upsampled and rescaled by 1/s
            let (ys, xs) = ((y as f64 + 0.5) / 2.0 - 0.5, (x as f64 + 0.5) / 2.0 - 0.5);
            let phi0 = [2.0 * bilinear(res0, 0, ys, xs), 2.0 * bilinear(res0, 1, ys, xs)];
            let got0 = r.per_scale_fields[0].vector(i);
            assert!((got0[0] - phi0[0]).abs() < 1e-12 && (got0[1] - phi0[1]).abs() < 1e-12);
            // finest scale: residual sampled where the previous field points
            let (yy, xx) = (y as f64 + phi0[1], x as f64 + phi0[0]);
            let want = [phi0[0] + bilinear(res1, 0, yy, xx), phi0[1] + bilinear(res1, 1, yy, xx)];
            let got = r.final_field.vector(i);
            assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
        }
    }
    for t in &r.per_scale_traces {
        assert!(t.iter().all(|l| l.is_finite()));
        let first = t[0].total;
        assert!(t.iter().map(|l| l.total).fold(f64::INFINITY, f64::min) <= first);
    }
}

fn random_params(seed: u64, cfg: &NetConfig) -> NetParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_params::<f64>(cfg, seed).unwrap();
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    p
}

fn roll(img: &Image<f64>, dy: usize, dx: usize) -> Image<f64> {
    let [_, ny, nx] = img.dims().zyx();
    Image::from_fn(img.dims(), |[_, y, x]| img.data()[((y + ny - dy) % ny) * nx + (x + nx - dx) % nx])
}

#[test]
fn periodic_forward_is_shift_equivariant() {
    let cfg = small_net();
    let params = random_params(6, &cfg);
    let (m, f) = pair(6, 16, 2.0);
    let (dy, dx) = (4, 12);
    let (base, _) = predict_field_periodic(&params, &f, &m).unwrap();
    let (shifted, _) = predict_field_periodic(&params, &roll(&f, dy, dx), &roll(&m, dy, dx)).unwrap();
    let d = base.dims();
    for c in 0..2 {
        let b = Image::new(d, base.component(c).to_vec()).unwrap();
        let want = roll(&b, dy, dx);
        for (w, g) in want.data().iter().zip(shifted.component(c)) {
            assert!((w - g).abs() < 1e-12);
        }
    }
}

#[test]
fn one_network_serves_any_extent() {
    let params = random_params(7, &small_net());
    for n in [8usize, 13, 20] {
        let (m, f) = pair(7, n, 1.0);
        let (field, _) = predict_field(&params, &f, &m).unwrap();
        assert_eq!(field.dims(), f.dims());
        assert!(field.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn warm_start_equals_fresh_start_from_the_same_parameters() {
    let (moving, fixed) = pair(9, 16, 2.0);
    let spec = TrainSpec::new(2).with_steps(6).with_seed(2);
    let cfg = small_net();
    let sched = ScaleSchedule::two_scale(6);
    let a = register_multiscale(&moving, &fixed, &sched, &spec, ScaleInit::Fresh(cfg.clone())).unwrap();
    let warm = ScaleInit::WarmStart(init_params::<f64>(&cfg, 2).unwrap());
    let b = register_multiscale(&moving, &fixed, &sched, &spec, warm).unwrap();
    assert_eq!(a.final_field, b.final_field);
}

#[test]
fn volumetric_two_scale_run() {
    let c = make_synthetic_case::<f32>(&SyntheticSpec::new(&[8, 12, 12], 1.0, 2.0, 10)).unwrap();
    let cfg = NetConfig::with_widths(3, vec![4, 4], vec![4, 4]);
    let spec = TrainSpec::new(3).with_steps(5);
    let r = register_multiscale(&c.base, &c.warped, &ScaleSchedule::two_scale(5), &spec, ScaleInit::Fresh(cfg)).unwrap();
    assert_eq!(r.final_field.dims(), c.base.dims());
    assert!(r.per_scale_traces.iter().flatten().all(|l| l.is_finite()));
}
