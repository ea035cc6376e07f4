//! The multi-scale adversarial network: feature extractor `gf`, multi-scale
//! module `gm`, classifier `gy` on the concatenated branch features, and a
//! discriminator `gd` shared by all branches behind a gradient reversal
//! layer.

use m2dan_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    avg_pool2, conv2d, global_avg_pool, grl_with, init_params, linear, BoundParams, Init, ParamGroup,
    ParamSet, ParamSpec,
};

/// Kernel sizes of the parallel branches and their width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub kernel_sizes: Vec<usize>,
    pub branch_channels: usize,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![1, 3, 5],
            branch_channels: 32,
        }
    }
}

impl ScaleSpec {
    /// Three branches that all use kernel size `k`.
    pub fn uniform(k: usize) -> Self {
        Self {
            kernel_sizes: vec![k; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() {
            return Err(Error::InvalidSpec("at least one branch is required".into()));
        }
        if let Some(&k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::UnsupportedKernel(k));
        }
        if self.branch_channels == 0 {
            return Err(Error::InvalidSpec("branch_channels must be positive".into()));
        }
        Ok(())
    }

    /// Width of the classifier input.
    pub fn concat_width(&self) -> usize {
        self.branch_channels * self.kernel_sizes.len()
    }
}

/// Named scale configurations used by the filter-size ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleVariant {
    Mixed,
    S1,
    S3,
    S5,
}

impl ScaleVariant {
    pub const ALL: [ScaleVariant; 4] = [
        ScaleVariant::S1,
        ScaleVariant::S3,
        ScaleVariant::S5,
        ScaleVariant::Mixed,
    ];

    pub fn spec(self, branch_channels: usize) -> ScaleSpec {
        let kernel_sizes = match self {
            ScaleVariant::Mixed => vec![1, 3, 5],
            ScaleVariant::S1 => vec![1; 3],
            ScaleVariant::S3 => vec![3; 3],
            ScaleVariant::S5 => vec![5; 3],
        };
        ScaleSpec {
            kernel_sizes,
            branch_channels,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleVariant::Mixed => "mixed",
            ScaleVariant::S1 => "s1",
            ScaleVariant::S3 => "s3",
            ScaleVariant::S5 => "s5",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Convolutional feature extractor: one block per entry of `channels`,
/// each `conv k×k (same) → relu → 2×2 average downsample`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            channels: vec![8, 16, 32],
            kernel: 3,
        }
    }
}

impl ExtractorSpec {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    /// Smallest input side the extractor accepts.
    pub fn min_input(&self) -> usize {
        1 << self.channels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub scale: ScaleSpec,
    pub extractor: ExtractorSpec,
    /// Hidden widths of the three-layer heads (two entries).
    pub head_hidden: [usize; 2],
    pub num_classes: usize,
    /// Source plus target domains.
    pub num_domains: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            scale: ScaleSpec::default(),
            extractor: ExtractorSpec::default(),
            head_hidden: [64, 32],
            num_classes: 2,
            num_domains: 3,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.scale.validate()?;
        let e = &self.extractor;
        if e.in_channels == 0 || e.channels.contains(&0) {
            return Err(Error::InvalidSpec("extractor channel counts must be positive".into()));
        }
        if e.kernel % 2 == 0 {
            return Err(Error::UnsupportedKernel(e.kernel));
        }
        if self.head_hidden.contains(&0) || self.num_classes < 2 || self.num_domains == 0 {
            return Err(Error::InvalidSpec(format!(
                "heads need positive widths, >= 2 classes and >= 1 domain: {self:?}"
            )));
        }
        Ok(())
    }

    fn head_specs(prefix: &str, widths: [usize; 4]) -> Vec<ParamSpec> {
        (0..3)
            .flat_map(|i| {
                let (d_in, d_out) = (widths[i], widths[i + 1]);
                [
                    ParamSpec {
                        path: format!("{prefix}.fc{}.weight", i + 1),
                        shape: vec![d_in, d_out],
                        init: Init::He { fan_in: d_in },
                    },
                    ParamSpec {
                        path: format!("{prefix}.fc{}.bias", i + 1),
                        shape: vec![d_out],
                        init: Init::Zeros,
                    },
                ]
            })
            .collect()
    }

    /// Every parameter the architecture needs, with its initializer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut conv = |path: String, c_in: usize, c_out: usize, k: usize| {
            specs.push(ParamSpec {
                path: format!("{path}.weight"),
                shape: vec![c_out, c_in, k, k],
                init: Init::He {
                    fan_in: c_in * k * k,
                },
            });
            specs.push(ParamSpec {
                path: format!("{path}.bias"),
                shape: vec![c_out],
                init: Init::Zeros,
            });
        };
        let e = &self.extractor;
        let mut c_in = e.in_channels;
        for (i, &c) in e.channels.iter().enumerate() {
            conv(format!("gf.block{}.conv", i + 1), c_in, c, e.kernel);
            c_in = c;
        }
        for (b, &k) in self.scale.kernel_sizes.iter().enumerate() {
            conv(format!("gm.branch{}", b + 1), c_in, self.scale.branch_channels, k);
        }
        let [h1, h2] = self.head_hidden;
        specs.extend(Self::head_specs(
            "gy",
            [self.scale.concat_width(), h1, h2, self.num_classes],
        ));
        specs.extend(Self::head_specs(
            "gd",
            [self.scale.branch_channels, h1, h2, self.num_domains],
        ));
        specs
    }
}

/// Architecture plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

/// Nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub class_logits: Var,
    /// `[N, num_classes]`.
    pub class_probs: Var,
    /// One `[N, num_domains]` prediction per branch; empty when the
    /// discriminator was skipped.
    pub domain_probs: Vec<Var>,
    /// Pooled branch features, `[N, branch_channels]` each.
    pub branch_feats: Vec<Var>,
    /// Branch feature maps before pooling.
    pub branch_maps: Vec<Var>,
}

/// Whether and how the discriminator runs in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DomainHead {
    /// Branch features pass through a reversal layer with this coefficient.
    Reversed(f64),
    /// Branch features feed the discriminator directly (no reversal).
    Direct,
    Skip,
}

impl ModelBundle {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = init_params(&spec.param_specs(), seed)?;
        Ok(Self { spec, params })
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    fn head(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, mut x: Var) -> Result<Var> {
        for i in 1..=3 {
            let w = bound.get(&format!("{prefix}.fc{i}.weight"))?;
            let b = bound.get(&format!("{prefix}.fc{i}.bias"))?;
            x = linear(tape, x, w, b)?;
            if i < 3 {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Runs the network on `images [N, C, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        images: Var,
        domain: DomainHead,
    ) -> Result<Forward> {
        let mut x = images;
        for i in 1..=self.spec.extractor.channels.len() {
            let w = bound.get(&format!("gf.block{i}.conv.weight"))?;
            let b = bound.get(&format!("gf.block{i}.conv.bias"))?;
            x = conv2d(tape, x, w, b)?;
            x = tape.relu(x)?;
            x = avg_pool2(tape, x)?;
        }

        let mut branch_maps = Vec::new();
        let mut branch_feats = Vec::new();
        for b in 1..=self.spec.scale.kernel_sizes.len() {
            let w = bound.get(&format!("gm.branch{b}.weight"))?;
            let bias = bound.get(&format!("gm.branch{b}.bias"))?;
            let map = conv2d(tape, x, w, bias)?;
            let map = tape.relu(map)?;
            branch_maps.push(map);
            branch_feats.push(global_avg_pool(tape, map)?);
        }

        let joined = tape.concat(&branch_feats, 1)?;
        let class_logits = self.head(tape, bound, "gy", joined)?;
        let class_probs = tape.softmax(class_logits, 1)?;

        let mut domain_probs = Vec::new();
        if domain != DomainHead::Skip {
            for &feat in &branch_feats {
                let input = match domain {
                    DomainHead::Reversed(c) => grl_with(tape, feat, c)?,
                    _ => feat,
                };
                let logits = self.head(tape, bound, "gd", input)?;
                domain_probs.push(tape.softmax(logits, 1)?);
            }
        }
        Ok(Forward {
            class_logits,
            class_probs,
            domain_probs,
            branch_feats,
            branch_maps,
        })
    }

    /// Classifier-only forward pass (no discriminator, no reversal).
    pub fn source_only_forward(&self, tape: &mut Tape, bound: &BoundParams, images: Var) -> Result<Var> {
        Ok(self.forward(tape, bound, images, DomainHead::Skip)?.class_probs)
    }

    /// Class probabilities for a stack of images, evaluated in chunks on
    /// gradient-free tapes. Returns `[N * num_classes]` row-major.
    pub fn predict(&self, images: &[&Tensor], chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len() * self.spec.num_classes);
        for group in images.chunks(chunk.max(1)) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let x = stack_images(&mut tape, group)?;
            let probs = self.source_only_forward(&mut tape, &bound, x)?;
            out.extend_from_slice(tape.value(probs));
        }
        Ok(out)
    }

    pub fn group_sizes(&self) -> Vec<(ParamGroup, usize)> {
        ParamGroup::ALL
            .into_iter()
            .map(|g| (g, self.params.count_group(g)))
            .collect()
    }
}

/// Stacks `[C, H, W]` images into one `[N, C, H, W]` constant.
pub fn stack_images(tape: &mut Tape, images: &[&Tensor]) -> Result<Var> {
    let first = images.first().ok_or(Error::EmptyInput)?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::InvalidSpec(format!(
                "image shapes differ: {:?} vs {shape:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Ok(tape.constant(&full, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, side: usize, seed: u64) -> Vec<Tensor> {
        (0..n)
            .map(|i| {
                let data = (0..side * side)
                    .map(|p| (((p as u64 + 1) * (i as u64 + 3) * (seed + 11)) % 97) as f64 / 97.0)
                    .collect();
                Tensor::new(&[1, side, side], data, false).unwrap()
            })
            .collect()
    }

    #[test]
    fn default_classifier_width_is_96() {
        let m = ModelBundle::build(ModelSpec::default(), 1).unwrap();
        assert_eq!(m.spec.scale.concat_width(), 96);
        assert_eq!(m.params.get("gy.fc1.weight").unwrap().shape(), &[96, 64]);
        assert_eq!(m.params.get("gd.fc1.weight").unwrap().shape(), &[32, 64]);
        assert_eq!(m.params.get("gd.fc3.weight").unwrap().shape(), &[32, 3]);
    }

    #[test]
    fn s1_variant_uses_pointwise_branches() {
        let spec = ModelSpec {
            scale: ScaleVariant::S1.spec(32),
            ..ModelSpec::default()
        };
        let m = ModelBundle::build(spec, 1).unwrap();
        for b in 1..=3 {
            assert_eq!(
                m.params.get(&format!("gm.branch{b}.weight")).unwrap().shape(),
                &[32, 32, 1, 1]
            );
        }
    }

    #[test]
    fn builds_are_reproducible() {
        let a = ModelBundle::build(ModelSpec::default(), 9).unwrap();
        let b = ModelBundle::build(ModelSpec::default(), 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count_params(), b.count_params());
    }

    #[test]
    fn default_parameter_count_by_hand() {
        // conv: c_out*c_in*k*k + c_out ; fc: d_in*d_out + d_out
        let gf = (8 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32);
        let gm = (32 * 32 + 32) + (32 * 32 * 9 + 32) + (32 * 32 * 25 + 32);
        let gy = (96 * 64 + 64) + (64 * 32 + 32) + (32 * 2 + 2);
        let gd = (32 * 64 + 64) + (64 * 32 + 32) + (32 * 3 + 3);
        let m = ModelBundle::build(ModelSpec::default(), 0).unwrap();
        assert_eq!(m.count_params(), gf + gm + gy + gd);
        assert_eq!(m.params.count_group(ParamGroup::Gm), gm);
    }

    #[test]
    fn wider_branches_grow_gm() {
        let base = ModelBundle::build(ModelSpec::default(), 0).unwrap();
        let mut spec = ModelSpec::default();
        spec.scale.branch_channels = 64;
        let wide = ModelBundle::build(spec, 0).unwrap();
        assert!(wide.params.count_group(ParamGroup::Gm) > base.params.count_group(ParamGroup::Gm));
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = ModelSpec::default();
        spec.scale.kernel_sizes = vec![1, 2, 5];
        assert!(matches!(ModelBundle::build(spec, 0), Err(Error::UnsupportedKernel(2))));
        let mut spec = ModelSpec::default();
        spec.scale.kernel_sizes.clear();
        assert!(matches!(ModelBundle::build(spec, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn forward_shapes_and_probability_rows() {
        let m = ModelBundle::build(ModelSpec::default(), 3).unwrap();
        let imgs = images(4, 32, 0);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, true);
        let x = stack_images(&mut tape, &refs).unwrap();
        let out = m.forward(&mut tape, &bound, x, DomainHead::Reversed(0.03)).unwrap();
        assert_eq!(tape.shape(out.class_probs), &[4, 2]);
        for row in tape.value(out.class_probs).chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert_eq!(out.domain_probs.len(), 3);
        for &d in &out.domain_probs {
            assert_eq!(tape.shape(d), &[4, 3]);
        }
        for &f in &out.branch_feats {
            assert_eq!(tape.shape(f), &[4, 32]);
        }
    }

    #[test]
    fn discriminator_does_not_touch_class_path() {
        let m = ModelBundle::build(ModelSpec::default(), 3).unwrap();
        let mut perturbed = m.clone();
        for (path, t) in perturbed.params.iter_mut() {
            if path.starts_with("gd.") {
                t.data_mut().iter_mut().for_each(|v| *v += 0.5);
            }
        }
        let imgs = images(3, 16, 1);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let a = m.predict(&refs, 8).unwrap();
        let b = perturbed.predict(&refs, 8).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn source_only_forward_matches_full_forward() {
        let m = ModelBundle::build(ModelSpec::default(), 5).unwrap();
        let imgs = images(2, 16, 2);
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, false);
        let x = stack_images(&mut tape, &refs).unwrap();
        let full = m.forward(&mut tape, &bound, x, DomainHead::Reversed(0.3)).unwrap();
        let only = m.source_only_forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(full.class_probs), tape.value(only));
    }
}
