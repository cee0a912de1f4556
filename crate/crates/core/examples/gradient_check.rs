//! Differentiates a small two-layer network on the tape and compares every
//! input gradient with a central finite difference.
//!
//!     cargo run --example gradient_check

use poisonlink::numerics::{input_grad, Tape, Tensor, Var};
use poisonlink::seeds;

fn forward(tape: &mut Tape, x: Var, w1: &Tensor, w2: &Tensor, labels: &[usize]) -> poisonlink::Result<Var> {
    let w1 = tape.constant(w1);
    let w2 = tape.constant(w2);
    let h = tape.matmul(x, w1)?;
    let h = tape.tanh(h);
    let logits = tape.matmul(h, w2)?;
    tape.softmax_cross_entropy(logits, labels)
}

fn main() -> poisonlink::Result<()> {
    let mut rng = seeds::stream(1, "example", 0);
    let x = Tensor::uniform(vec![3, 5], 1.0, &mut rng).with_grad();
    let w1 = Tensor::uniform(vec![5, 7], 0.5, &mut rng);
    let w2 = Tensor::uniform(vec![7, 4], 0.5, &mut rng);
    let labels = [0, 3, 1];

    let (grad, loss) = input_grad(|t, v| forward(t, v, &w1, &w2, &labels), &x)?;
    println!("loss = {loss:.6}");

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let eval = |delta: f64| -> poisonlink::Result<f64> {
            let mut shifted = x.clone();
            shifted.data_mut()[i] += delta;
            let mut tape = Tape::new();
            let v = tape.leaf(&shifted);
            let l = forward(&mut tape, v, &w1, &w2, &labels)?;
            Ok(tape.scalar(l))
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        let g = grad.data()[i];
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-12);
        worst = worst.max(rel);
        println!("x[{i:>2}]  tape {g:+.8}  finite difference {fd:+.8}");
    }
    println!("worst relative error {worst:.2e}");
    Ok(())
}
