//! Decodes an image, or a generated gradient if no path is given. It is then
//! resized to 224x224 and normalized with the ImageNet statistics.
use ccblock::data::{image_to_tensor, load_image, ImageSpec};

fn main() -> ccblock::Result<()> {
    let spec = ImageSpec::default();
    let t = match std::env::args().nth(1) {
        Some(path) => load_image(path, &spec)?,
        None => {
            let img = image::GrayImage::from_fn(300, 200, |x, y| image::Luma([((x + y) % 256) as u8]));
            image_to_tensor(&image::DynamicImage::ImageLuma8(img), &spec)?
        }
    };
    println!("shape {:?}", t.shape());
    let plane = spec.size * spec.size;
    for c in 0..3 {
        let ch = &t.data()[c * plane..(c + 1) * plane];
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        println!("channel {c}: mean {mean:.4}");
    }
    Ok(())
}
