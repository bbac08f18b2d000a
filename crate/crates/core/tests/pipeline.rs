use covidnn::data::Samples;
use covidnn::io;
use covidnn::model::{build_proposed_cnn_sized, ClassLabel, Network};
use covidnn::train::{accuracy, predict_classes, train, TrainConfig};
use covidnn::SeededRng;
use covidnn::Tensor;

/// Bright centre for COVID, dim centre for normal.
fn samples(n: usize, side: usize, rng: &mut SeededRng) -> Samples {
    let mut s = Samples::default();
    for i in 0..n {
        let label = if i % 2 == 0 {
            ClassLabel::Covid
        } else {
            ClassLabel::Normal
        };
        let centre = if label == ClassLabel::Covid { 0.9 } else { 0.3 };
        let img = Tensor::from_fn(&[side, side, 3], |k| {
            let p = k / 3;
            let (y, x) = (p / side, p % side);
            let inside = y.abs_diff(side / 2) < side / 4 && x.abs_diff(side / 2) < side / 4;
            let noise = rng.uniform(-0.1, 0.1) as f32;
            if inside {
                centre + noise
            } else {
                0.15 + noise
            }
        });
        s.push(img, label);
    }
    s
}

#[test]
fn train_save_load_predict() {
    let mut rng = SeededRng::new(3);
    let train_set = samples(16, 12, &mut rng);
    let val_set = samples(8, 12, &mut rng);
    let cfg = TrainConfig {
        mini_batch_size: 4,
        epochs: 15,
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut net = Network::new(
        build_proposed_cnn_sized(12, 8).unwrap(),
        &mut SeededRng::new(5),
    )
    .unwrap();
    let curve = train(&mut net, &train_set, &val_set, &cfg).unwrap();
    assert_eq!(curve.records.len(), 60);
    assert_eq!(accuracy(&net, &val_set, 4).unwrap(), 1.0);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.cvnw");
    io::save_weights(&net, &path).unwrap();
    let loaded = io::load_network(&path).unwrap();
    let before = net
        .probabilities(&Tensor::stack(&val_set.images.iter().collect::<Vec<_>>()).unwrap())
        .unwrap();
    let after = loaded
        .probabilities(&Tensor::stack(&val_set.images.iter().collect::<Vec<_>>()).unwrap())
        .unwrap();
    assert_eq!(before.data(), after.data());
    assert_eq!(
        predict_classes(&net, &val_set.images, 3).unwrap(),
        predict_classes(&loaded, &val_set.images, 8).unwrap()
    );
}
