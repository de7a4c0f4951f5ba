//! Finite-difference checks of every layer in f64, plus one end-to-end check
//! on a width-reduced model.
use ccblock::gradcheck::{layer_suite, model_check, LAYER_TOLERANCE, MODEL_STEP, MODEL_TOLERANCE};

fn main() -> ccblock::Result<()> {
    for r in layer_suite(1)? {
        println!(
            "{:<14} {:>4} coords  max rel error {:.2e}  pass {}",
            r.name,
            r.checked,
            r.max_rel_error,
            r.passed(LAYER_TOLERANCE)
        );
    }
    // Pass --model for the end-to-end check (about half a minute).
    if std::env::args().any(|a| a == "--model") {
        let r = model_check(1, 4, 1, MODEL_STEP)?;
        println!(
            "{}: {} coords, {} kinks, max rel error {:.2e}, pass {}",
            r.name,
            r.checked,
            r.kinks,
            r.max_rel_error,
            r.passed(MODEL_TOLERANCE)
        );
    }
    Ok(())
}
