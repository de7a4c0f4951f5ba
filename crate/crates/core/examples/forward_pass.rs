//! One 224x224 image through the full network. Prints the shape after each
//! table row and the class probabilities.
use ccblock::model::Model;
use ccblock::{build_model, ModelSpec, Tensor};

fn main() -> ccblock::Result<()> {
    let model = build_model::<f32>(&ModelSpec::new(3)?, 7)?;
    let x = Tensor::from_fn(&[1, 3, 224, 224], |i| ((i % 977) as f32 / 977.0) - 0.5);
    let start = std::time::Instant::now();
    let trace = model.trace(&x)?;
    for (row, shape) in Model::<f32>::row_shapes(&trace) {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        println!("row {row:>2}: {}", dims.join("x"));
    }
    let probs = model.forward(&x)?;
    println!(
        "probabilities {:?} (sum {:.6})",
        probs.data(),
        probs.data().iter().sum::<f32>()
    );
    println!("two forward passes in {:.2?}", start.elapsed());
    Ok(())
}
