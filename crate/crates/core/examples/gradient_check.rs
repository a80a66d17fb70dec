//! Compares reverse-mode gradients of the full training loss against
//! central finite differences for every trainable tensor.

use sempt::selftest::{gradient_world, model_gradient_check};

fn main() -> sempt::Result<()> {
    let (model, batch) = gradient_world(3)?;
    println!(
        "{} categories ({} seen), {} training images",
        model.registry().len(),
        model.registry().num_seen(),
        batch.len()
    );
    let report = model_gradient_check(&model, &batch)?;
    print!("{report}");
    println!("worst relative error {:.3e}: {}", report.worst(), if report.passed() { "pass" } else { "FAIL" });
    Ok(())
}
