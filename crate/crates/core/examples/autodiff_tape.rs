//! Reverse-mode gradients on a small expression, checked against central
//! differences.

use sdf_autolabel::autodiff::{grad_check, sum, Tape};

fn main() -> sdf_autolabel::Result<()> {
    let tape = Tape::new();
    let [x, y] = tape.vars([0.7, -1.2]);
    let f = (x * y).tanh() + (x * x + 1.0).sqrt() * y.exp();
    let g = tape.backward(f)?;
    println!("f = {:.6}", f.value());
    println!("df/dx = {:.6}, df/dy = {:.6}", g.get(x), g.get(y));

    let check = grad_check(
        |_, v| {
            let terms: Vec<_> = v.iter().map(|x| (*x * 3.0).tanh() * *x).collect();
            sum(&terms)
        },
        &[0.1, 0.5, -0.3],
        1e-6,
    )?;
    println!(
        "max relative error vs central differences: {:.2e}",
        check.max_relative_error
    );
    Ok(())
}
