#![allow(dead_code)]

use m2dan_core::data::{benchmark_specs, synthesize, DomainBatch, DomainData};
use m2dan_core::model::{ModelBundle, ModelSpec};
use m2dan_tensor::Tensor;

/// About 250 parameters: one extractor block and two-wide branches.
pub fn reduced_spec() -> ModelSpec {
    let mut s = ModelSpec::default();
    s.extractor.channels = vec![2];
    s.scale.branch_channels = 2;
    s.head_hidden = [4, 3];
    s
}

/// With `tiny_benchmark(3, 8)`, no relu pre-activation of this model lies
/// within a finite-difference step of zero.
pub const KINK_FREE_SEED: u64 = 5;

/// Biases are moved off zero so no pre-activation sits on a relu kink
/// where the image background is flat.
pub fn reduced_model(seed: u64) -> ModelBundle {
    let mut m = ModelBundle::build(reduced_spec(), seed).unwrap();
    for (path, t) in m.params.iter_mut() {
        if path.ends_with("bias") {
            for (i, b) in t.data_mut().iter_mut().enumerate() {
                *b = 0.1 * ((i % 3) as f64 - 1.0) + 0.05;
            }
        }
    }
    m
}

/// The benchmark at a small fraction and image size.
pub fn tiny_benchmark(seed: u64, size: usize) -> Vec<DomainData> {
    synthesize(&benchmark_specs(0.02), size, seed).unwrap()
}

/// Two labeled source rows (narrow, open) and one row from each target.
pub fn four_sample_batch(data: &[DomainData]) -> DomainBatch {
    let src = &data[0].train;
    let open = src.iter().position(|s| s.class_label != src[0].class_label).unwrap();
    let picks = [&src[0], &src[open], &data[1].train[0], &data[2].train[0]];
    let shape = picks[0].image.shape().to_vec();
    let images: Vec<f64> = picks.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    let mut full = vec![4];
    full.extend(shape);
    let labels: Vec<f64> = picks[..2].iter().flat_map(|s| s.class_label.unwrap().one_hot()).collect();
    let mut domains = vec![0.0; 12];
    for (row, s) in picks.iter().enumerate() {
        domains[row * 3 + s.domain_index] = 1.0;
    }
    DomainBatch {
        images: Tensor::new(&full, images, false).unwrap(),
        class_labels: Tensor::new(&[2, 2], labels, false).unwrap(),
        domain_labels: Tensor::new(&[4, 3], domains, false).unwrap(),
        source_mask: vec![true, true, false, false],
    }
}
