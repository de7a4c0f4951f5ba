//! Writes a backbone-only CCW archive and imports it into a fresh model.
//! Then saves and reloads a full checkpoint.
use ccblock::train::{load_checkpoint, save_checkpoint};
use ccblock::weights::{apply_weights, NameMap, Strictness, WeightArchive};
use ccblock::{build_model, ModelSpec};

fn main() -> ccblock::Result<()> {
    let dir = std::env::temp_dir().join("ccblock_weights_example");
    std::fs::create_dir_all(&dir).map_err(|e| ccblock::Error::io(&dir, e))?;

    let source = build_model::<f32>(&ModelSpec::new(3)?, 1)?;
    let mut backbone = WeightArchive::new();
    for (name, t) in source.named_tensors() {
        if name.starts_with("backbone.") {
            backbone.push(name, t.clone())?;
        }
    }
    let path = dir.join("backbone.ccw");
    backbone.save(&path)?;
    println!("wrote {} tensors, {} bytes", backbone.len(), backbone.encoded_len());

    let mut model = build_model::<f32>(&ModelSpec::new(3)?, 2)?;
    let report = apply_weights(
        &mut model,
        &WeightArchive::load(&path)?,
        &NameMap::identity(),
        Strictness::BackboneOnly,
    )?;
    print!("{report}");

    let ckpt = dir.join("checkpoint.ccw");
    save_checkpoint(&model, &ckpt)?;
    let back = load_checkpoint(&ckpt)?;
    let same = model
        .named_tensors()
        .iter()
        .zip(back.named_tensors())
        .all(|((a, x), (b, y))| a == &b && x.data() == y.data());
    println!("checkpoint reload identical: {same}");
    Ok(())
}
