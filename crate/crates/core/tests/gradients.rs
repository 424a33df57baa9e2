//! Central finite-difference checks of every analytic gradient.

use msreg::loss::{nlcc_loss, smoothness_loss, smoothness_penalty};
use msreg::regnet::{backward, init_params, predict_field, NetConfig, NetParams};
use msreg::warp::{warp, warp_backward};
use msreg::{Dims, DisplacementField, Image, Scale};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;

/// Fourth-order central difference.
fn fd(f: impl Fn(f64) -> f64) -> f64 {
    (8.0 * (f(H) - f(-H)) - (f(2.0 * H) - f(-2.0 * H))) / (12.0 * H)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn random_image(rng: &mut ChaCha8Rng, dims: Dims) -> Image<f64> {
    // smooth-ish content keeps the interpolant away from degenerate flats
    let (a, b, c) = (rng.random_range(0.2..0.9), rng.random_range(0.2..0.9), rng.random_range(0.1..0.6));
    Image::from_fn(dims, |[z, y, x]| {
        (a * x as f64).sin() + (b * y as f64).cos() + c * (z as f64 * 0.7).sin() + 0.1 * rng.random::<f64>()
    })
}

fn random_field(rng: &mut ChaCha8Rng, dims: Dims, amp: f64) -> DisplacementField<f64> {
    let data = (0..dims.len() * dims.ndim()).map(|_| rng.random_range(-amp..amp)).collect();
    DisplacementField::new(dims, data, Scale::ONE).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_warp(rng: &mut ChaCha8Rng, dims: Dims) -> f64 {
    let m = random_image(rng, dims);
    let u = random_field(rng, dims, 2.5);
    let r: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let up = Image::new(dims, r.clone()).unwrap();
    let g = warp_backward(&m, &u, &up).unwrap();
    let mut worst: f64 = 0.0;
    let n = dims.len();
    let mut checked = 0;
    while checked < 40 {
        let k = rng.random_range(0..u.data().len());
        // the interpolant has kinks where a sample position is an integer
        let axis = 2 - k / n;
        let pos = dims.coords(k % n)[axis] as f64 + u.data()[k];
        if (pos - pos.round()).abs() <= 2.0 * H {
            continue;
        }
        checked += 1;
        let f = |d: f64| {
            let mut v = u.clone();
            v.data_mut()[k] += d;
            dot(warp(&m, &v).unwrap().data(), &r)
        };
        worst = worst.max(rel_err(g.data()[k], fd(f)));
    }
    worst
}

fn check_nlcc(rng: &mut ChaCha8Rng, dims: Dims, window: &[usize]) -> f64 {
    let i = random_image(rng, dims);
    let j = random_image(rng, dims);
    let (_, g) = nlcc_loss(&i, &j, window, 1e-5).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..40 {
        let k = rng.random_range(0..dims.len());
        let f = |d: f64| {
            let mut jj = j.clone();
            jj.data_mut()[k] += d;
            nlcc_loss(&i, &jj, window, 1e-5).unwrap().0
        };
        worst = worst.max(rel_err(g.data()[k], fd(f)));
    }
    worst
}

fn check_smoothness(rng: &mut ChaCha8Rng, dims: Dims) -> f64 {
    let u = random_field(rng, dims, 3.0);
    let (_, g) = smoothness_loss(&u).unwrap();
    let (_, gp) = smoothness_penalty(&u).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let k = rng.random_range(0..u.data().len());
        let f = |d: f64, pen: bool| {
            let mut v = u.clone();
            v.data_mut()[k] += d;
            if pen { smoothness_penalty(&v).unwrap().0 } else { smoothness_loss(&v).unwrap().0 }
        };
        worst = worst.max(rel_err(g.data()[k], fd(|d| f(d, false))));
        worst = worst.max(rel_err(gp.data()[k], fd(|d| f(d, true))));
    }
    worst
}

/// Parameters with every tensor random, so gradients reach all layers.
fn random_params(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> NetParams<f64> {
    let mut p = init_params::<f64>(cfg, rng.random()).unwrap();
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    p
}

fn check_regnet(rng: &mut ChaCha8Rng, dims: Dims, cfg: &NetConfig) -> f64 {
    let params = random_params(rng, cfg);
    let fixed = random_image(rng, dims);
    let moving = random_image(rng, dims);
    let (field, mut tape) = predict_field(&params, &fixed, &moving).unwrap();
    let r = random_field(rng, dims, 1.0);
    let grads = backward(&params, &mut tape, &r).unwrap();
    let objective = |p: &NetParams<f64>| dot(predict_field(p, &fixed, &moving).unwrap().0.data(), r.data());
    assert!(objective(&params).is_finite() && field.data().len() == r.data().len());
    let mut worst: f64 = 0.0;
    let perturbed = |t: usize, k: usize, d: f64| {
        let mut p = params.clone();
        p.tensors_mut()[t][k] += d;
        p
    };
    let signs = |p: &NetParams<f64>| -> Vec<bool> {
        let (_, tape) = predict_field(p, &fixed, &moving).unwrap();
        tape.hidden_activations().iter().flatten().map(|&v| v > 0.0).collect()
    };
    let mut checked = 0;
    while checked < 40 {
        let t = rng.random_range(0..params.tensors().len());
        let k = rng.random_range(0..params.tensors()[t].len());
        // skip stencils across a rectifier switch
        if signs(&perturbed(t, k, -2.0 * H)) != signs(&perturbed(t, k, 2.0 * H)) {
            continue;
        }
        checked += 1;
        let f = |d: f64| objective(&perturbed(t, k, d));
        worst = worst.max(rel_err(grads.0[t][k], fd(f)));
    }
    worst
}

fn small_dims(rng: &mut ChaCha8Rng, three: bool) -> Dims {
    if three {
        Dims::d3(rng.random_range(4..9), rng.random_range(4..9), rng.random_range(4..9))
    } else {
        Dims::d2(rng.random_range(6..20), rng.random_range(6..20))
    }
}

#[test]
fn warp_gradient_2d_and_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for three in [false, true] {
        for _ in 0..4 {
            let d = small_dims(&mut rng, three);
            let e = check_warp(&mut rng, d);
            assert!(e < 1e-5, "{d}: {e}");
        }
    }
}

#[test]
fn nlcc_gradient_2d_and_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..4 {
        let d = small_dims(&mut rng, false);
        let e = check_nlcc(&mut rng, d, &[5, 4]);
        assert!(e < 1e-5, "{d}: {e}");
    }
    let d = Dims::d3(6, 5, 7);
    assert!(check_nlcc(&mut rng, d, &[3, 3, 3]) < 1e-5);
}

#[test]
fn smoothness_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for three in [false, true] {
        let d = small_dims(&mut rng, three);
        assert!(check_smoothness(&mut rng, d) < 1e-6);
    }
}

#[test]
fn regnet_gradient_two_level_2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = NetConfig::with_widths(2, vec![4, 4], vec![4, 4]);
    let e = check_regnet(&mut rng, Dims::d2(16, 16), &cfg);
    assert!(e < 1e-4, "{e}");
    // a size that needs padding
    let e = check_regnet(&mut rng, Dims::d2(13, 10), &cfg);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn regnet_gradient_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = NetConfig::with_widths(3, vec![3, 4], vec![4, 3]);
    let e = check_regnet(&mut rng, Dims::d3(8, 6, 8), &cfg);
    assert!(e < 1e-4, "{e}");
}
