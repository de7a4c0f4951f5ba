//! Prints the layer table for the 3-class and 2-class models along with
//! the parameter counts.
use ccblock::{build_model, ModelSpec};

fn main() -> ccblock::Result<()> {
    for k in [3, 2] {
        let model = build_model::<f32>(&ModelSpec::new(k)?, 0)?;
        println!("{k}-class model");
        print!("{}", model.summarize().to_text());
        println!("{:?}\n", model.count_params());
    }
    Ok(())
}
