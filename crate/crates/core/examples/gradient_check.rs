//! Finite-difference check of every operation, block, loss and the full
//! network, plus a custom function through the generic checker.
//!
//! cargo run --release --example gradient_check [ops|blocks|losses|model|all]

use std::time::Instant;

use atfuse::gradcheck::{check_function, grad_check, FdInput, FdOptions, Scope};
use atfuse::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scope: Scope = std::env::args().nth(1).as_deref().unwrap_or("all").parse()?;
    let start = Instant::now();
    let report = grad_check(scope, 1e-4)?;
    print!("{report}");
    println!("{} groups, passed: {}, {:.2}s", report.groups.len(), report.passed(), start.elapsed().as_secs_f64());

    // sum(softmax(x) * x) checked by hand
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4])?;
    let custom = check_function(
        &[FdInput::var("custom/x", x)],
        |t, v| {
            let s = t.softmax_rows(v[0])?;
            let p = t.mul(s, v[0])?;
            t.sum(p)
        },
        FdOptions::default(),
    )?;
    print!("{custom}");
    Ok(())
}
