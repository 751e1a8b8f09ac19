use metagrad::autodiff::{central_difference, finite_diff_check, hessian, GradientRequest, Graph, NodeId};
use metagrad::oracle::{deep_maml_objective, DeepPoint};
use metagrad::verify::deep_objective_nodes;
use metagrad::{Result, Tensor};
use proptest::prelude::*;

fn value(g: &mut Graph, n: NodeId) -> Tensor {
    g.evaluate(n).unwrap().clone()
}

/// `sum(tanh(W x) * x) + mean(exp(0.1 x))` on a 3-vector.
fn smooth_chain(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let w = g.constant(Tensor::matrix(
        3,
        3,
        vec![0.5, -0.2, 0.1, 0.3, 0.8, -0.4, -0.6, 0.2, 0.7],
    )?);
    let xc = g.reshape(x, &[3, 1])?;
    let h = g.matmul(w, xc)?;
    let h = g.tanh(h)?;
    let h = g.reshape(h, &[3])?;
    let hx = g.mul(h, x)?;
    let s = g.sum(hx)?;
    let e = g.scale(x, 0.1)?;
    let e = g.exp(e)?;
    let m = g.mean(e)?;
    g.add(s, m)
}

#[test]
fn shallow_postadapt_derivative_matches_difference_quotient() {
    let (alpha, theta) = (0.1, 1.0);
    let f = |c: f64| (1.0 - alpha) * (1.0 - alpha) * (c - theta) * (c - theta);
    let mut g = Graph::new();
    let c = g.param(Tensor::scalar(0.0));
    let d = g.add_scalar(c, -theta).unwrap();
    let sq = g.square(d).unwrap();
    let loss = g.scale(sq, (1.0 - alpha) * (1.0 - alpha)).unwrap();
    let dc = g.grad(&GradientRequest::new(loss, vec![c])).unwrap()[0];
    let analytic = g.scalar_value(dc).unwrap();
    let h = 1e-6;
    let numeric = (f(h) - f(-h)) / (2.0 * h);
    assert!((analytic - -1.62).abs() < 1e-12, "{analytic}");
    assert!((analytic - numeric).abs() < 1e-8);
}

#[test]
fn deep_population_loss_passes_difference_check() {
    let alpha = 0.1;
    let err = finite_diff_check(
        |g, x| {
            let a = g.reshape(x, &[2])?;
            let pa = g.slice_rows(a, 0, 1)?;
            let pb = g.slice_rows(a, 1, 1)?;
            let pa = g.reshape(pa, &[])?;
            let pb = g.reshape(pb, &[])?;
            deep_objective_nodes(g, pa, pb, alpha)
        },
        &Tensor::vector(vec![1.0, 1.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn deep_objective_nodes_match_closed_form() {
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(0.7));
    let b = g.param(Tensor::scalar(-1.3));
    let l = deep_objective_nodes(&mut g, a, b, 0.1).unwrap();
    let v = g.scalar_value(l).unwrap();
    assert!((v - deep_maml_objective(DeepPoint::new(0.7, -1.3), 0.1)).abs() < 1e-12);
}

#[test]
fn smooth_chain_passes_difference_check() {
    let err = finite_diff_check(smooth_chain, &Tensor::vector(vec![0.3, -1.1, 0.8]), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn nested_gradient_of_cross_entropy_chain() {
    let labels = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
    let x = Tensor::matrix(2, 2, vec![0.5, -1.0, 1.5, 0.25]).unwrap();
    let f = |g: &mut Graph, w: NodeId| -> Result<NodeId> {
        let xc = g.constant(x.clone());
        let w = g.reshape(w, &[2, 1])?;
        let z = g.matmul(xc, w)?;
        g.sigmoid_cross_entropy(z, &labels)
    };
    let h = hessian(f, &Tensor::vector(vec![0.2, -0.4])).unwrap();
    assert!((h.at2(0, 1) - h.at2(1, 0)).abs() < 1e-12);
    assert!(h.at2(0, 0) > 0.0 && h.at2(1, 1) > 0.0);
}

fn poly3(g: &mut Graph, p: &[NodeId; 3], c: &[f64; 4]) -> Result<NodeId> {
    let xy = g.mul(p[0], p[1])?;
    let t1 = g.scale(xy, c[0])?;
    let s = g.sigmoid(p[2])?;
    let xs = g.mul(p[0], s)?;
    let t2 = g.scale(xs, c[1])?;
    let th = g.tanh(p[1])?;
    let sq = g.square(th)?;
    let t3 = g.scale(sq, c[2])?;
    let yz = g.mul(p[1], p[2])?;
    let e = g.scale(yz, 0.3)?;
    let e = g.exp(e)?;
    let t4 = g.scale(e, c[3])?;
    let a = g.add(t1, t2)?;
    let b = g.add(t3, t4)?;
    g.add(a, b)
}

/// Relative error with an absolute floor, so coordinates whose true
/// derivative is near zero do not dominate.
fn fd_gap<F>(f: F, point: &Tensor) -> f64
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let numeric = central_difference(
        |x| {
            let mut g = Graph::new();
            let p = g.param(x.clone());
            let out = f(&mut g, p)?;
            g.scalar_value(out)
        },
        point,
        1e-5,
    )
    .unwrap();
    let mut g = Graph::new();
    let p = g.param(point.clone());
    let out = f(&mut g, p).unwrap();
    let d = g.grad(&GradientRequest::new(out, vec![p])).unwrap()[0];
    let analytic = value(&mut g, d);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-3))
        .fold(0.0, f64::max)
}

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear(
        x in prop::array::uniform3(finite(-2.0, 2.0)),
        c in prop::array::uniform4(finite(-1.0, 1.0)),
        d in prop::array::uniform4(finite(-1.0, 1.0)),
        alpha in finite(-3.0, 3.0),
        beta in finite(-3.0, 3.0),
    ) {
        let mut g = Graph::new();
        let p = [g.param(Tensor::scalar(x[0])), g.param(Tensor::scalar(x[1])), g.param(Tensor::scalar(x[2]))];
        let f = poly3(&mut g, &p, &c).unwrap();
        let h = poly3(&mut g, &p, &d).unwrap();
        let af = g.scale(f, alpha).unwrap();
        let bh = g.scale(h, beta).unwrap();
        let comb = g.add(af, bh).unwrap();
        let gc = g.grad(&GradientRequest::new(comb, p.to_vec())).unwrap();
        let gf = g.grad(&GradientRequest::new(f, p.to_vec())).unwrap();
        let gh = g.grad(&GradientRequest::new(h, p.to_vec())).unwrap();
        for i in 0..3 {
            let lhs = value(&mut g, gc[i]).item().unwrap();
            let rhs = alpha * value(&mut g, gf[i]).item().unwrap() + beta * value(&mut g, gh[i]).item().unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12, "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn nested_hessian_is_symmetric(
        x in prop::array::uniform3(finite(-2.0, 2.0)),
        c in prop::array::uniform4(finite(-1.0, 1.0)),
    ) {
        let mut g = Graph::new();
        let p = [g.param(Tensor::scalar(x[0])), g.param(Tensor::scalar(x[1])), g.param(Tensor::scalar(x[2]))];
        let f = poly3(&mut g, &p, &c).unwrap();
        let first = g.grad(&GradientRequest::new(f, p.to_vec()).create_graph(true)).unwrap();
        let mut h = [[0.0; 3]; 3];
        for i in 0..3 {
            let row = g.grad(&GradientRequest::new(first[i], p.to_vec())).unwrap();
            for j in 0..3 {
                h[i][j] = value(&mut g, row[j]).item().unwrap();
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((h[i][j] - h[j][i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn evaluation_is_deterministic(x in prop::array::uniform3(finite(-2.0, 2.0))) {
        let run = || {
            let mut g = Graph::new();
            let p = g.param(Tensor::vector(x.to_vec()));
            let out = smooth_chain(&mut g, p).unwrap();
            let d = g.grad(&GradientRequest::new(out, vec![p])).unwrap()[0];
            (value(&mut g, out), value(&mut g, d))
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(a.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn smooth_ops_match_differences(x in prop::array::uniform3(finite(-1.5, 1.5))) {
        let err = fd_gap(smooth_chain, &Tensor::vector(x.to_vec()));
        prop_assert!(err < 1e-4, "{}", err);
    }

    #[test]
    fn softmax_cross_entropy_matches_differences(w in prop::collection::vec(finite(-1.0, 1.0), 6)) {
        let x = Tensor::matrix(4, 2, vec![0.5, -1.0, 1.5, 0.25, -0.3, 0.9, 1.1, -0.7]).unwrap();
        let labels = Tensor::matrix(4, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 0., 1., 0.]).unwrap();
        let err = fd_gap(
            |g, p| {
                let xc = g.constant(x.clone());
                let w = g.reshape(p, &[2, 3])?;
                let z = g.matmul(xc, w)?;
                g.softmax_cross_entropy(z, &labels)
            },
            &Tensor::vector(w),
        );
        prop_assert!(err < 1e-4, "{}", err);
    }
}
