//! Tape gradients against central finite differences, one test per op.

mod common;

fn run(name: &str) {
    let (n, tol, make) = common::gradient_suite()
        .into_iter()
        .find(|(n, _, _)| *n == name)
        .unwrap();
    match common::gradient_op(n, tol, make) {
        Ok(s) => println!(
            "{n}: worst relative error {:.2e} over {} coordinates ({} skipped at kinks)",
            s.worst, s.checked, s.skipped
        ),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn conv3x3_same() {
    run("conv3x3_same");
}

#[test]
fn conv1x1_same() {
    run("conv1x1_same");
}

#[test]
fn conv3x3_valid() {
    run("conv3x3_valid");
}

#[test]
fn relu() {
    run("relu");
}

#[test]
fn sigmoid() {
    run("sigmoid");
}

#[test]
fn concat() {
    run("concat");
}

#[test]
fn scaled_add() {
    run("scaled_add");
}

#[test]
fn mse_loss() {
    run("mse_loss");
}

#[test]
fn lap_loss_zero_pad() {
    run("lap_loss_zero_pad");
}

#[test]
fn lap_loss_interior() {
    run("lap_loss_interior");
}

#[test]
fn ssim_loss() {
    run("ssim_loss");
}

#[test]
fn total_loss_4_block() {
    run("total_loss_4_block");
}

#[test]
fn suite_covers_every_op() {
    assert_eq!(common::gradient_suite().len(), 12);
}

mod named {
    use pgtnet::autodiff::Tape;
    use pgtnet::kernels::{conv2d, Padding};
    use pgtnet::tensor::Tensor4;
    use rand::Rng;

    fn random(r: &mut pgtnet::seed::Rng, dims: [usize; 4]) -> Tensor4<f64> {
        let n = dims.iter().product();
        Tensor4::from_vec(dims, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// `Σ proj · f(x, w)` and its tape gradients for x and w.
    fn objective(
        x: &Tensor4<f64>,
        w: &Tensor4<f64>,
        proj: &Tensor4<f64>,
        relu: bool,
    ) -> (f64, Tensor4<f64>, Tensor4<f64>, Vec<bool>) {
        let t = Tape::<f64>::new();
        let xv = t.param(x.clone()).unwrap();
        let wv = t.param(w.clone()).unwrap();
        let b = t
            .constant(Tensor4::full([1, w.shape().n, 1, 1], 0.1))
            .unwrap();
        let mut y = t.conv2d(xv, wv, b, Padding::Same).unwrap();
        let signs = t.value(y).data().iter().map(|&v| v > 0.0).collect();
        if relu {
            y = t.relu(y);
        }
        let p = t.constant(proj.clone()).unwrap();
        let l = t.sum(t.mul(y, p).unwrap());
        let v = t.item(l);
        t.backward(l).unwrap();
        (v, t.take_grad(xv).unwrap(), t.take_grad(wv).unwrap(), signs)
    }

    fn check(relu: bool) {
        const H: f64 = 1e-4;
        let mut r = pgtnet::seed::rng(if relu { 8 } else { 7 });
        let x = random(&mut r, [1, 2, 6, 6]);
        let w = random(&mut r, [3, 2, 3, 3]);
        let proj = random(&mut r, [1, 3, 6, 6]);
        let (_, gx, gw, signs) = objective(&x, &w, &proj, relu);
        let mut worst: f64 = 0.0;
        let mut skipped = 0;
        for (which, len) in [(0, x.len()), (1, w.len())] {
            for k in 0..len {
                let eval = |d: f64| {
                    let (mut xx, mut ww) = (x.clone(), w.clone());
                    if which == 0 {
                        xx.data_mut()[k] += d;
                    } else {
                        ww.data_mut()[k] += d;
                    }
                    objective(&xx, &ww, &proj, relu)
                };
                let (p, m) = (eval(H), eval(-H));
                if relu && (p.3 != signs || m.3 != signs) {
                    skipped += 1;
                    continue;
                }
                let numeric = (p.0 - m.0) / (2.0 * H);
                let analytic = if which == 0 {
                    gx.data()[k]
                } else {
                    gw.data()[k]
                };
                worst = worst
                    .max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
            }
        }
        assert!(skipped < 10, "{skipped} coordinates on kinks");
        assert!(worst < 1e-4, "max relative error {worst:e}");
    }

    #[test]
    fn conv2d_1x2x6x6_step_1e4() {
        check(false);
    }

    #[test]
    fn relu_of_conv_away_from_kinks() {
        check(true);
    }

    #[test]
    fn conv2d_is_linear() {
        let mut r = pgtnet::seed::rng(9);
        let (x, y) = (random(&mut r, [2, 3, 7, 11]), random(&mut r, [2, 3, 7, 11]));
        let w = random(&mut r, [5, 3, 3, 3]);
        let zero = vec![0.0; 5];
        let (a, b) = (0.7, -1.3);
        let mix = Tensor4::from_vec(
            [2, 3, 7, 11],
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| a * p + b * q)
                .collect(),
        )
        .unwrap();
        let lhs = conv2d(&mix, &w, &zero, Padding::Same).unwrap();
        let (cx, cy) = (
            conv2d(&x, &w, &zero, Padding::Same).unwrap(),
            conv2d(&y, &w, &zero, Padding::Same).unwrap(),
        );
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            let rhs = a * p + b * q;
            assert!(
                (l - rhs).abs() <= 1e-10 * rhs.abs().max(1.0),
                "{l} vs {rhs}"
            );
        }
    }
}
