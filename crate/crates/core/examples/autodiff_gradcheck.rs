//! Build a small computation on the tape, run the reverse pass and compare
//! against central differences.
//!
//! ```bash
//! cargo run --example autodiff_gradcheck
//! ```

use diva::autodiff::{finite_diff_check, Tape};
use diva::tensor::Tensor;

fn main() -> diva::error::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.1, 0.4, -0.5]])?;
    let w = Tensor::from_rows(&[vec![0.2, -0.1], vec![0.7, 0.3], vec![-0.4, 0.9]])?;
    let b = Tensor::vector(vec![0.05, -0.02]);

    // loss = mean(log Σ exp(normalize(relu(x W + b)) rows))
    let f = |t: &mut Tape, v: &[diva::autodiff::Var]| {
        let h = t.linear(v[0], v[1], v[2])?;
        let h = t.relu(h);
        let h = t.add_scalar(h, 0.1);
        let z = t.l2_normalize(h)?;
        let l = t.log_sum_exp_rows(z);
        Ok(t.mean(l))
    };

    let mut tape = Tape::new();
    let vars: Vec<_> = [&x, &w, &b].iter().map(|p| tape.param((*p).clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    println!("dL/dW {:?}", grads.get(vars[1]).map(|g| g.data().to_vec()));

    let check = finite_diff_check(f, &[x, w, b], 1e-6)?;
    println!("checked {} coordinates, max rel err {:.2e}, {} on kinks", check.checked, check.max_rel_err, check.kinks);
    Ok(())
}
