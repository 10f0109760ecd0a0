//! Central finite-difference checks for every graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks d f / d input for a scalar function built on one variable leaf.
fn check<F>(input: Tensor<f64>, f: F)
where
    F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
{
    let store = ParamStore::<f64>::new();
    let analytic = {
        let mut g = Graph::new(&store);
        let x = g.variable(input.clone());
        let y = f(&mut g, x);
        g.backward(y).variable(x).cloned().unwrap()
    };
    let eval = |t: Tensor<f64>| {
        let mut g = Graph::new(&store);
        let x = g.variable(t);
        let y = f(&mut g, x);
        g.value(y).item()
    };
    let h = 1e-5;
    for i in 0..input.numel() {
        let mut p = input.clone();
        p.data_mut()[i] += h;
        let mut m = input.clone();
        m.data_mut()[i] -= h;
        let fd = (eval(p) - eval(m)) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        assert!(err < 1e-5, "component {i}: analytic {a} vs fd {fd}");
    }
}

/// Loss that weights every output component by a fixed random coefficient.
fn sum_weighted(g: &mut Graph<f64>, y: NodeId) -> NodeId {
    let w = random(g.value(y).shape(), 99);
    let target = g.constant(w);
    g.mse(y, target).unwrap()
}

#[test]
fn conv3d_same_gradient() {
    let w = random(&[3, 2, 3, 3, 3], 1);
    let b = random(&[3], 2);
    check(random(&[2, 3, 4, 5], 3), |g, x| {
        let w = g.constant(w.clone());
        let b = g.constant(b.clone());
        let y = g.conv3d(x, w, Some(b), ConvGeom::SAME3).unwrap();
        sum_weighted(g, y)
    });
}

#[test]
fn conv3d_weight_gradient() {
    let x = random(&[2, 4, 4, 4], 4);
    check(random(&[3, 2, 2, 2, 2], 5), |g, w| {
        let x = g.constant(x.clone());
        let y = g.conv3d(x, w, None, ConvGeom::DOWN2).unwrap();
        sum_weighted(g, y)
    });
}

#[test]
fn pointwise_conv_bias_gradient() {
    let x = random(&[2, 2, 3, 2], 6);
    let w = random(&[4, 2, 1, 1, 1], 7);
    check(random(&[4], 8), |g, b| {
        let x = g.constant(x.clone());
        let w = g.constant(w.clone());
        let y = g.conv3d(x, w, Some(b), ConvGeom::POINTWISE).unwrap();
        sum_weighted(g, y)
    });
}

#[test]
fn silu_and_add_gradient() {
    check(random(&[2, 2, 2, 2], 9), |g, x| {
        let s = g.silu(x);
        let y = g.add(s, x).unwrap();
        sum_weighted(g, y)
    });
}

#[test]
fn upsample_gradients() {
    check(random(&[2, 2, 3, 2], 10), |g, x| {
        let y = g.upsample_nearest2(x);
        sum_weighted(g, y)
    });
    check(random(&[2, 2, 3, 2], 11), |g, x| {
        let y = g.trilinear(x, [8, 12, 8]);
        sum_weighted(g, y)
    });
}

#[test]
fn gather_and_concat_gradient() {
    let coarse = random(&[2, 2, 2, 2], 12);
    check(random(&[3, 4, 4, 4], 13), |g, fine| {
        let c = g.constant(coarse.clone());
        let y = g.gather(&[fine, c], &[[0, 1, 2], [3, 3, 3], [0, 1, 2]]).unwrap();
        sum_weighted(g, y)
    });
    check(random(&[1, 2, 2, 2], 14), |g, x| {
        let y = g.concat_channels(&[x, x]).unwrap();
        sum_weighted(g, y)
    });
}

#[test]
fn linear_and_normalize_gradient() {
    let w = random(&[4, 3], 15);
    let b = random(&[4], 16);
    check(random(&[5, 3], 17), |g, x| {
        let w = g.constant(w.clone());
        let b = g.constant(b.clone());
        let h = g.linear(x, w, Some(b)).unwrap();
        let z = g.normalize_rows(h, 1e-12);
        sum_weighted(g, z)
    });
    let x = random(&[5, 3], 18);
    check(random(&[4, 3], 19), |g, w| {
        let x = g.constant(x.clone());
        let h = g.linear(x, w, None).unwrap();
        sum_weighted(g, h)
    });
}

#[test]
fn info_nce_gradient_both_sides() {
    let zb = random(&[4, 3], 20);
    check(random(&[4, 3], 21), |g, za| {
        let zb = g.constant(zb.clone());
        let a = g.normalize_rows(za, 1e-12);
        let b = g.normalize_rows(zb, 1e-12);
        g.info_nce(a, b, 0.1, 1.0).unwrap()
    });
    let za = random(&[4, 3], 22);
    check(random(&[4, 3], 23), |g, zb| {
        let za = g.constant(za.clone());
        let a = g.normalize_rows(za, 1e-12);
        let b = g.normalize_rows(zb, 1e-12);
        g.info_nce(a, b, 0.5, 0.25).unwrap()
    });
}

#[test]
fn cross_entropy_and_weighted_sum_gradient() {
    let labels = [0u8, 2, 1, 1, 0, 2, 2, 0];
    check(random(&[3, 2, 2, 2], 24), |g, x| {
        let ce = g.cross_entropy(x, &labels).unwrap();
        let t = g.constant(Tensor::zeros(&[3, 2, 2, 2]));
        let m = g.mse(x, t).unwrap();
        g.weighted_sum(&[(ce, 1.0), (m, 3.0)])
    });
}

#[test]
fn stop_gradient_blocks_parameters() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", random(&[2, 1, 1, 1, 1], 25));
    let mut g = Graph::new(&store);
    let x = g.constant(random(&[1, 2, 2, 2], 26));
    let wn = g.param(w);
    let y = g.conv3d(x, wn, None, ConvGeom::POINTWISE).unwrap();
    let y = g.stop_gradient(y);
    let v = g.variable(Tensor::zeros(&[2, 2, 2, 2]));
    let s = g.add(y, v).unwrap();
    let t = g.constant(Tensor::zeros(&[2, 2, 2, 2]));
    let l = g.mse(s, t).unwrap();
    let grads = g.backward(l);
    assert!(grads.param(w).is_none());
    assert!(grads.variable(v).is_some());
}

#[test]
fn invalid_shapes_are_rejected() {
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let w = g.constant(Tensor::zeros(&[1, 2, 3, 3, 3]));
    assert!(g.conv3d(x, w, None, ConvGeom::SAME3).is_err());
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 3]));
    assert!(g.add(a, b).is_err());
    assert!(g.gather(&[x], &[[2, 0, 0]]).is_err());
}
