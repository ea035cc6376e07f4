use m2dan_core::model::{stack_images, DomainHead, ModelBundle, ModelSpec, ScaleVariant};
use m2dan_tensor::{Tape, Tensor};

fn images(n: usize, size: usize) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            let data = (0..size * size).map(|j| ((i * 7 + j * 13) % 17) as f64 / 17.0).collect();
            Tensor::new(&[1, size, size], data, false).unwrap()
        })
        .collect()
}

fn small(variant: ScaleVariant) -> ModelSpec {
    let mut s = ModelSpec::default();
    s.scale = variant.spec(6);
    s.extractor.channels = vec![3, 4];
    s
}

#[test]
fn branch_maps_share_spatial_dims() {
    for size in [16, 32, 64] {
        for variant in ScaleVariant::ALL {
            let m = ModelBundle::build(small(variant), 1).unwrap();
            let imgs = images(2, size);
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let mut t = Tape::new();
            let bound = m.params.bind(&mut t, false);
            let x = stack_images(&mut t, &refs).unwrap();
            let out = m.forward(&mut t, &bound, x, DomainHead::Reversed(0.03)).unwrap();
            assert_eq!(out.branch_maps.len(), 3);
            let expect = [2, 6, size / 4, size / 4];
            for &map in &out.branch_maps {
                assert_eq!(t.shape(map), expect, "size {size} variant {}", variant.name());
            }
        }
    }
}

#[test]
fn classifier_reads_the_concatenation() {
    for bc in [1, 6, 32] {
        let mut spec = ModelSpec::default();
        spec.scale.branch_channels = bc;
        assert_eq!(spec.scale.concat_width(), 3 * bc);
        let m = ModelBundle::build(spec, 2).unwrap();
        assert_eq!(m.params.get("gy.fc1.weight").unwrap().shape()[0], 3 * bc);
        assert_eq!(m.params.get("gd.fc1.weight").unwrap().shape()[0], bc);
    }
}

#[test]
fn heads_have_three_fc_layers() {
    let m = ModelBundle::build(ModelSpec::default(), 0).unwrap();
    for head in ["gy", "gd"] {
        let mut paths: Vec<&str> = m
            .params
            .iter()
            .map(|(p, _)| p)
            .filter(|p| p.starts_with(&format!("{head}.")))
            .collect();
        paths.sort();
        let want: Vec<String> = (1..=3)
            .flat_map(|i| [format!("{head}.fc{i}.bias"), format!("{head}.fc{i}.weight")])
            .collect();
        assert_eq!(paths, want);
    }
}

#[test]
fn discriminator_is_shared_by_all_branches() {
    let m = ModelBundle::build(small(ScaleVariant::Mixed), 4).unwrap();
    let imgs = images(3, 16);
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let domain_out = |m: &ModelBundle| {
        let mut t = Tape::new();
        let bound = m.params.bind(&mut t, false);
        let x = stack_images(&mut t, &refs).unwrap();
        let out = m.forward(&mut t, &bound, x, DomainHead::Direct).unwrap();
        out.domain_probs.iter().map(|&d| t.value(d).to_vec()).collect::<Vec<_>>()
    };
    let before = domain_out(&m);
    let mut changed = m.clone();
    changed.params.get_mut("gd.fc3.bias").unwrap().data_mut()[0] += 1.0;
    let after = domain_out(&changed);
    assert_eq!(before.len(), 3);
    for (b, a) in before.iter().zip(&after) {
        assert_ne!(b, a, "every branch must see the single update");
    }

    // The shared parameters collect the sum of the per-branch gradients.
    let grad_of = |branches: &[usize]| {
        let mut t = Tape::new();
        let bound = m.params.bind(&mut t, true);
        let x = stack_images(&mut t, &refs).unwrap();
        let out = m.forward(&mut t, &bound, x, DomainHead::Direct).unwrap();
        let w = t.constant(&[3, 3], vec![1.0, 2.0, 4.0, 0.5, -1.0, 3.0, 2.0, 0.0, -2.0]).unwrap();
        let scores: Vec<_> = branches
            .iter()
            .map(|&b| {
                let p = t.mul(out.domain_probs[b], w).unwrap();
                t.sum(p).unwrap()
            })
            .collect();
        let total = scores.iter().skip(1).fold(scores[0], |acc, &s| t.add(acc, s).unwrap());
        t.backward(total).unwrap();
        t.grad(bound.get("gd.fc1.weight").unwrap()).unwrap().to_vec()
    };
    let joint = grad_of(&[0, 1, 2]);
    let parts: Vec<Vec<f64>> = (0..3).map(|b| grad_of(&[b])).collect();
    for (i, g) in joint.iter().enumerate() {
        let sum: f64 = parts.iter().map(|p| p[i]).sum();
        assert!((g - sum).abs() <= 1e-12);
    }
    assert!(parts.iter().all(|p| p.iter().any(|&v| v != 0.0)));
}

#[test]
fn only_odd_kernels_build() {
    let mut spec = ModelSpec::default();
    spec.scale.kernel_sizes = vec![1, 4, 5];
    assert!(ModelBundle::build(spec, 0).is_err());
}
