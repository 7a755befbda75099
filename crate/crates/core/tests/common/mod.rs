#![allow(dead_code)]

use fairprune::data::LabeledDataset;
use fairprune::model::{ConvSpec, LayerSpec, ModelSpec, ModelState};
use fairprune::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// One 4-filter conv layer over 8×8 images whose class shows only in mean
/// brightness. Filter 0 is a box (mean) detector; filters 1–3 are zero-sum
/// edge detectors, so they see the noise texture but not the class.
pub struct PlantedToy {
    pub spec: ModelSpec,
    pub state: ModelState,
    pub data: LabeledDataset,
}

pub fn planted_toy(seed: u64) -> PlantedToy {
    let spec = ModelSpec {
        input: [1, 8, 8],
        layers: vec![
            LayerSpec::Conv(ConvSpec::new(4, 3, 1, 1)),
            LayerSpec::GlobalAvgPool,
            LayerSpec::SoftmaxHead { classes: 2 },
        ],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.2).unwrap();
    let n = 64;
    let mut images = Vec::with_capacity(n * 64);
    let mut labels = vec![];
    for i in 0..n {
        let class = i % 2;
        let level = if class == 1 { 0.65 } else { 0.35 };
        images.extend((0..64).map(|_| level + noise.sample(&mut rng)));
        labels.push(class);
    }
    let data = LabeledDataset::new([1, 8, 8], images, labels, vec![0; n], vec!["A".into()], 2, format!("planted:{seed}")).unwrap();

    let mut w = vec![0.0; 4 * 9];
    w[..9].iter_mut().for_each(|v| *v = 1.0 / 9.0);
    for f in 1..4 {
        let k: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = k.iter().sum::<f64>() / 9.0;
        for (j, v) in k.iter().enumerate() {
            w[f * 9 + j] = v - mean;
        }
    }
    let mut head = vec![0.0; 8];
    // signal column: logit gap grows with brightness
    head[0] = -2.0;
    head[4] = 2.0;
    for f in 1..4 {
        head[f] = rng.random_range(-0.3..0.3);
        head[4 + f] = rng.random_range(-0.3..0.3);
    }
    let params = vec![
        Tensor::new(vec![4, 1, 3, 3], w).unwrap(),
        Tensor::zeros(&[4]),
        Tensor::full(&[4], 1.0),
        Tensor::zeros(&[4]),
        Tensor::new(vec![2, 4], head).unwrap(),
        Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(),
    ];
    let state = ModelState::from_params(&spec, params, seed).unwrap();
    PlantedToy { spec, state, data }
}
