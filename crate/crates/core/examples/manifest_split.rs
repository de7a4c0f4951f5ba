//! Stratified split of a synthetic manifest with the per-class train counts
//! 84 / 233 / 176.
use ccblock::data::{split_counts, stratified_split, ClassLabel, ManifestRecord, SplitSpec};

fn main() -> ccblock::Result<()> {
    let mut records = Vec::new();
    for (label, n) in ClassLabel::ALL.into_iter().zip([310, 864, 654]) {
        records.extend((0..n).map(|i| ManifestRecord::new(format!("{label}/{i:04}.png"), label)));
    }
    let split = stratified_split(&records, &SplitSpec::table1_counts(0))?;
    for (label, (train, test, _)) in split_counts(&split) {
        println!("{label:<10} train {train:>4} test {test:>4}");
    }
    // The 27% default floors 0.27 x 310 to 83 covid images.
    let split = stratified_split(&records, &SplitSpec::default())?;
    println!("{:?}", split_counts(&split));
    Ok(())
}
