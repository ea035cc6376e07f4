use m2dan_core::losses::{cross_entropy, domain_loss, entropy_loss, focal_loss, LogClamp};
use m2dan_tensor::Tape;
use proptest::prelude::*;

fn rows_to_probs(raw: &[f64], c: usize) -> Vec<f64> {
    raw.chunks(c)
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s).collect::<Vec<_>>()
        })
        .collect()
}

fn one_hot(classes: &[usize], c: usize) -> Vec<f64> {
    classes
        .iter()
        .flat_map(|&k| (0..c).map(move |j| if j == k { 1.0 } else { 0.0 }))
        .collect()
}

fn scalar(f: impl FnOnce(&mut Tape) -> m2dan_core::Result<m2dan_tensor::Var>) -> f64 {
    let mut t = Tape::new();
    let v = f(&mut t).unwrap();
    t.value(v)[0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy(
        raw in prop::collection::vec(0.01f64..1.0, 16),
        classes in prop::collection::vec(0usize..2, 8),
    ) {
        let p = rows_to_probs(&raw, 2);
        let y = one_hot(&classes, 2);
        let focal = scalar(|t| {
            let a = t.constant(&[8, 2], p.clone())?;
            let b = t.constant(&[8, 2], y.clone())?;
            focal_loss(t, a, b, 0.0, LogClamp::On)
        });
        let ce = scalar(|t| {
            let a = t.constant(&[8, 2], p.clone())?;
            let b = t.constant(&[8, 2], y.clone())?;
            cross_entropy(t, a, b, LogClamp::On)
        });
        prop_assert!((focal - ce).abs() <= 1e-12);
    }

    #[test]
    fn entropy_lies_between_zero_and_log_c(raw in prop::collection::vec(0.001f64..1.0, 12)) {
        for c in [2usize, 3] {
            let n = raw.len() / c;
            let p = rows_to_probs(&raw[..n * c], c);
            let e = scalar(|t| {
                let a = t.constant(&[n, c], p.clone())?;
                entropy_loss(t, a, LogClamp::On)
            });
            prop_assert!(e >= 0.0 && e <= (c as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn focal_never_exceeds_cross_entropy(
        raw in prop::collection::vec(0.01f64..1.0, 8),
        classes in prop::collection::vec(0usize..2, 4),
        gamma in 0.0f64..5.0,
    ) {
        let p = rows_to_probs(&raw, 2);
        let y = one_hot(&classes, 2);
        let focal = scalar(|t| {
            let a = t.constant(&[4, 2], p.clone())?;
            let b = t.constant(&[4, 2], y.clone())?;
            focal_loss(t, a, b, gamma, LogClamp::On)
        });
        let ce = scalar(|t| {
            let a = t.constant(&[4, 2], p.clone())?;
            let b = t.constant(&[4, 2], y.clone())?;
            cross_entropy(t, a, b, LogClamp::On)
        });
        prop_assert!(focal <= ce + 1e-15);
    }
}

#[test]
fn entropy_extremes() {
    for c in [2usize, 3, 5] {
        let hot = one_hot(&[0, c - 1], c);
        let e = scalar(|t| {
            let a = t.constant(&[2, c], hot.clone())?;
            entropy_loss(t, a, LogClamp::On)
        });
        assert!(e.abs() <= 1e-12, "one-hot entropy {e}");
        let uniform = vec![1.0 / c as f64; 2 * c];
        let e = scalar(|t| {
            let a = t.constant(&[2, c], uniform.clone())?;
            entropy_loss(t, a, LogClamp::On)
        });
        assert!((e - (c as f64).ln()).abs() <= 1e-12);
    }
}

#[test]
fn domain_loss_extremes() {
    let d = one_hot(&[0, 1, 2, 0, 1, 2], 3);
    let perfect = scalar(|t| {
        let a = t.constant(&[6, 3], d.clone())?;
        let b = t.constant(&[6, 3], d.clone())?;
        domain_loss(t, a, b, LogClamp::On)
    });
    assert!(perfect < 1e-9);
    let uniform = scalar(|t| {
        let a = t.constant(&[6, 3], vec![1.0 / 3.0; 18])?;
        let b = t.constant(&[6, 3], d.clone())?;
        domain_loss(t, a, b, LogClamp::On)
    });
    assert!((uniform - 3f64.ln()).abs() <= 1e-9);
}
