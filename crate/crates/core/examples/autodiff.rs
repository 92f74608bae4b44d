//! Builds a tiny conv → relu → conv graph on the tape, back-propagates an
//! MSE loss and compares one weight gradient with a central difference.

use pgtnet::autodiff::Tape;
use pgtnet::kernels::Padding;
use pgtnet::tensor::Tensor4;
use pgtnet::train::mse_loss;

fn loss(
    w1: &Tensor4<f64>,
    x: &Tensor4<f64>,
    y: &Tensor4<f64>,
) -> pgtnet::Result<(f64, Option<Tensor4<f64>>)> {
    let tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    let w1v = tape.param(w1.clone())?;
    let b1 = tape.constant(Tensor4::zeros([1, 4, 1, 1]))?;
    let w2 = tape.constant(Tensor4::full([1, 4, 3, 3], 0.05))?;
    let b2 = tape.constant(Tensor4::zeros([1, 1, 1, 1]))?;
    let h = tape.relu(tape.conv2d(xv, w1v, b1, Padding::Same)?);
    let out = tape.conv2d(h, w2, b2, Padding::Same)?;
    let l = mse_loss(&tape, out, yv)?;
    let value = tape.item(l);
    tape.backward(l)?;
    Ok((value, tape.take_grad(w1v)))
}

fn main() -> pgtnet::Result<()> {
    let x = Tensor4::from_vec(
        [1, 1, 6, 6],
        (0..36).map(|i| ((i * 7) % 11) as f64 / 11.0).collect(),
    )?;
    let y = x.map(|v| 1.0 - v);
    let w1 = Tensor4::from_vec(
        [4, 1, 3, 3],
        (0..36).map(|i| ((i * 5) % 9) as f64 / 20.0 - 0.2).collect(),
    )?;
    let (l, g) = loss(&w1, &x, &y)?;
    let g = g.expect("w1 requires grad");
    println!("loss {l:.6}");

    let h = 1e-6;
    for k in [0, 13, 30] {
        let mut p = w1.clone();
        p.data_mut()[k] += h;
        let mut m = w1.clone();
        m.data_mut()[k] -= h;
        let numeric = (loss(&p, &x, &y)?.0 - loss(&m, &x, &y)?.0) / (2.0 * h);
        println!(
            "dL/dw1[{k:>2}]: tape {:+.8e}  finite difference {numeric:+.8e}",
            g.data()[k]
        );
    }
    Ok(())
}
