use crate::data::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::ClassLabel;
use crate::rng::SeededRng;

/// Per-class shuffle then split: each class sends `round(fraction * n)` of its
/// non-test members to train and the rest to val. Test assignments are left
/// alone. Classes are processed in label order so the draw sequence is fixed.
pub fn stratified_assign(
    labels: &[ClassLabel],
    splits: &[Split],
    fraction: f64,
    rng: &mut SeededRng,
) -> Result<Vec<Split>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {fraction} outside (0, 1)"
        )));
    }
    let mut out = splits.to_vec();
    for class in [ClassLabel::Normal, ClassLabel::Covid] {
        let mut members: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i] == class && splits[i] != Split::Test)
            .collect();
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {} has {} assignable member(s); at least 2 are required",
                class.index(),
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n_train = (fraction * members.len() as f64).round() as usize;
        for (k, &i) in members.iter().enumerate() {
            out[i] = if k < n_train {
                Split::Train
            } else {
                Split::Val
            };
        }
    }
    Ok(out)
}

pub fn stratified_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    rng: &mut SeededRng,
) -> Result<DatasetManifest> {
    let labels = manifest
        .records
        .iter()
        .map(|r| r.class_label())
        .collect::<Result<Vec<_>>>()?;
    let splits: Vec<Split> = manifest.records.iter().map(|r| r.split).collect();
    let assigned = stratified_assign(&labels, &splits, train_fraction, rng)?;
    let mut out = manifest.clone();
    for (r, s) in out.records.iter_mut().zip(assigned) {
        r.split = s;
    }
    Ok(out)
}
