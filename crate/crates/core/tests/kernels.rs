//! Matrix multiply, convolution and pooling against naive loop implementations.

use proptest::prelude::*;
use statenet_core::layers::{Conv2d, Layer, LayerOp, MaxPool2d};
use statenet_core::rng::{stream, Domain};
use statenet_core::tensor::{col2im, im2col, matmul, PatchGeometry, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

/// Direct "same" convolution, weights laid out (kh, kw, cin, cout).
fn naive_conv(x: &[f64], dims: [usize; 4], w: &[f64], b: &[f64], k: usize, cout: usize) -> Vec<f64> {
    let [n, h, wd, cin] = dims;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * h * wd * cout];
    for s in 0..n {
        for r in 0..h {
            for c in 0..wd {
                for o in 0..cout {
                    let mut acc = b[o];
                    for i in 0..k {
                        for j in 0..k {
                            let (rr, cc) = (r as isize + i as isize - pad, c as isize + j as isize - pad);
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                continue;
                            }
                            for ch in 0..cin {
                                let xv = x[((s * h + rr as usize) * wd + cc as usize) * cin + ch];
                                acc += xv * w[((i * k + j) * cin + ch) * cout + o];
                            }
                        }
                    }
                    out[((s * h + r) * wd + c) * cout + o] = acc;
                }
            }
        }
    }
    out
}

fn naive_pool(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [n, h, w, c] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        for r in 0..oh {
            for q in 0..ow {
                for ch in 0..c {
                    let at = |dr: usize, dc: usize| x[((s * h + 2 * r + dr) * w + 2 * q + dc) * c + ch];
                    out.push(at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1)));
                }
            }
        }
    }
    out
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

fn assert_rel_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let scale = x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= tol * scale, "[{i}] {x} vs {y}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_matches_loops((m, k, n, a, b) in (1usize..12, 1usize..12, 1usize..12)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(k * n))))
    {
        let ta = Tensor::new([m, k], a.clone()).unwrap();
        let tb = Tensor::new([k, n], b.clone()).unwrap();
        let c = matmul(&ta, &tb).unwrap();
        prop_assert_eq!(c.shape(), &[m, n]);
        assert_rel_close(c.data(), &naive_matmul(&a, &b, m, k, n), 1e-12);
    }

    #[test]
    fn matmul_is_associative((m, k, p, n, a, b, c) in (1usize..8, 1usize..8, 1usize..8, 1usize..8)
        .prop_flat_map(|(m, k, p, n)| (Just(m), Just(k), Just(p), Just(n), values(m * k), values(k * p), values(p * n))))
    {
        let a = Tensor::new([m, k], a).unwrap();
        let b = Tensor::new([k, p], b).unwrap();
        let c = Tensor::new([p, n], c).unwrap();
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert_rel_close(left.data(), right.data(), 1e-10);
    }

    #[test]
    fn conv_matches_direct_loops((n, h, w, cin, cout, k, seed) in (1usize..3, 1usize..10, 1usize..10, 1usize..4, 1usize..5, prop::sample::select(vec![1usize, 3, 5]), any::<u64>()))
    {
        let mut layer = Layer::<f64>::new("c", LayerOp::Conv2d(Conv2d::new(k, cin, cout).unwrap()));
        layer.init(&mut stream(seed, Domain::Init, &[]));
        let mut rng = stream(seed, Domain::Synthetic, &[]);
        let x: Vec<f64> = (0..n * h * w * cin).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let xt = Tensor::new([n, h, w, cin], x.clone()).unwrap();
        let y = layer.forward(&xt, false, &mut rng).unwrap();
        let params = layer.params();
        let expect = naive_conv(&x, [n, h, w, cin], params[0].value.data(), params[1].value.data(), k, cout);
        assert_rel_close(y.data(), &expect, 1e-5);
    }

    #[test]
    fn pool_matches_direct_loops((n, h, w, c, x) in (1usize..3, 2usize..10, 2usize..10, 1usize..4)
        .prop_flat_map(|(n, h, w, c)| (Just(n), Just(h), Just(w), Just(c), values(n * h * w * c))))
    {
        let mut layer = Layer::<f64>::new("p", LayerOp::MaxPool2d(MaxPool2d::new()));
        let xt = Tensor::new([n, h, w, c], x.clone()).unwrap();
        let y = layer.forward(&xt, false, &mut stream(0, Domain::Dropout, &[])).unwrap();
        prop_assert_eq!(y.shape(), &[n, h / 2, w / 2, c]);
        assert_rel_close(y.data(), &naive_pool(&x, [n, h, w, c]), 1e-12);
    }

    /// col2im is the adjoint of im2col: <im2col(x), p> == <x, col2im(p)>.
    #[test]
    fn col2im_is_adjoint((h, w, c, k, seed) in (1usize..8, 1usize..8, 1usize..3, prop::sample::select(vec![1usize, 3]), any::<u64>()))
    {
        let mut rng = stream(seed, Domain::Synthetic, &[]);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect() };
        let x = Tensor::new([1, h, w, c], draw(h * w * c)).unwrap();
        let cols = im2col(&x, k, k, 1, k / 2).unwrap();
        let p = Tensor::new(cols.shape().to_vec(), draw(cols.len())).unwrap();
        let geo = PatchGeometry::new(h, w, c, k, k, 1, k / 2).unwrap();
        let back = col2im(&p, x.dims4().unwrap(), &geo).unwrap();
        let lhs: f64 = cols.data().iter().zip(p.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
