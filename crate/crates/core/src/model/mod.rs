//! Parameter-shared partition encoder, fusion heads and contrastive losses.

mod loss;

use std::collections::HashMap;
use std::path::Path;

use morphprint_autodiff::{he_normal, normal, Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use loss::{
    loss_gradcheck_suite, margin_contrastive_loss, margin_loss_value, nt_xent_loss, nt_xent_value,
};

use crate::error::{Error, Result};
use crate::raster::{FeatureImage, PartitionSet};
use crate::seed::rng_for;
use crate::train::SimilarityMatrix;

pub const ENCODER_PREFIX: &str = "encoder.";
pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";
pub const EXCITATION_PREFIX: &str = "excitation.";
pub const MLP_PREFIX: &str = "mlp.";
const FC1_WEIGHT: &str = "excitation.fc1.weight";
const FC1_BIAS: &str = "excitation.fc1.bias";
const FC2_WEIGHT: &str = "excitation.fc2.weight";
const FC2_BIAS: &str = "excitation.fc2.bias";
const MLP1_WEIGHT: &str = "mlp.fc1.weight";
const MLP1_BIAS: &str = "mlp.fc1.bias";
const MLP2_WEIGHT: &str = "mlp.fc2.weight";
const MLP2_BIAS: &str = "mlp.fc2.bias";

fn conv_names(block: usize) -> (String, String) {
    (
        format!("encoder.conv{block}.weight"),
        format!("encoder.conv{block}.bias"),
    )
}

/// Stack of `conv3×3 (pad 1) → relu → maxpool 2×2` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub fingerprint_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 224,
            width: 224,
            channels: vec![16, 32, 64, 128],
            fingerprint_dim: 512,
        }
    }
}

impl EncoderConfig {
    /// `C_f×h×w` of the last block.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        if self.channels.is_empty() || self.in_channels == 0 || self.fingerprint_dim == 0 {
            return Err(Error::InvalidArgument(
                "encoder needs at least one block and nonzero dims".into(),
            ));
        }
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.channels {
            if h < 2 || w < 2 {
                return Err(Error::InvalidArgument(format!(
                    "{}x{} input is too small for {} pooling blocks",
                    self.height,
                    self.width,
                    self.channels.len()
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok((*self.channels.last().expect("nonempty"), h, w))
    }

    pub fn feature_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Excitation,
    Voting,
    Mlp,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Excitation => "excitation",
            FusionStrategy::Voting => "voting",
            FusionStrategy::Mlp => "mlp",
        }
    }
}

/// Which post-pooling pathway produces a fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Linear projection of the concatenated pooled maps (stage 1).
    Plain,
    Excitation,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionStrategy,
    pub reduction: usize,
    pub weight_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: FusionStrategy::Excitation,
            reduction: 4,
            weight_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let cf = self.encoder.feature_shape()?.0;
        if self.reduction == 0 || (4 * cf) % self.reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "reduction {} must divide 4·C_f = {}",
                self.reduction,
                4 * cf
            )));
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight_scale must be positive, got {}",
                self.weight_scale
            )));
        }
        Ok(())
    }
}

/// Fresh parameters for every pathway. The excitation output layer starts at
/// zero so that its initial channel weights are uniform.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = rng_for(seed, "init");
    let mut p = ParamSet::new();
    let mut c_in = cfg.encoder.in_channels;
    for (k, &c_out) in cfg.encoder.channels.iter().enumerate() {
        let (w, b) = conv_names(k);
        p.insert(&w, he_normal(&[c_out, c_in, 3, 3], c_in * 9, &mut rng))?;
        p.insert(&b, Tensor::zeros(&[c_out]))?;
        c_in = c_out;
    }
    let cf = c_in;
    let (n, d, hidden) = (4 * cf, cfg.encoder.fingerprint_dim, 4 * cf / cfg.reduction);
    p.insert(
        HEAD_WEIGHT,
        normal(&[d, n], 1.0 / (n as f64).sqrt(), &mut rng),
    )?;
    p.insert(HEAD_BIAS, Tensor::zeros(&[d]))?;
    p.insert(FC1_WEIGHT, he_normal(&[hidden, n], n, &mut rng))?;
    p.insert(FC1_BIAS, Tensor::zeros(&[hidden]))?;
    p.insert(FC2_WEIGHT, Tensor::zeros(&[n, hidden]))?;
    p.insert(FC2_BIAS, Tensor::zeros(&[n]))?;
    p.insert(MLP1_WEIGHT, he_normal(&[2 * cf, n], n, &mut rng))?;
    p.insert(MLP1_BIAS, Tensor::zeros(&[2 * cf]))?;
    p.insert(
        MLP2_WEIGHT,
        normal(&[cf, 2 * cf], 1.0 / ((2 * cf) as f64).sqrt(), &mut rng),
    )?;
    p.insert(MLP2_BIAS, Tensor::zeros(&[cf]))?;
    Ok(p)
}

/// Binds each parameter into a graph at most once. Names under a frozen prefix
/// become constants and receive no gradient.
#[derive(Debug)]
pub struct Bindings<'a> {
    params: &'a ParamSet,
    frozen: Vec<String>,
    vars: HashMap<String, Var>,
}

impl<'a> Bindings<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            params,
            frozen: Vec::new(),
            vars: HashMap::new(),
        }
    }

    /// Parameters whose name starts with any of `prefixes` are constants.
    pub fn frozen(params: &'a ParamSet, prefixes: &[&str]) -> Self {
        Self {
            frozen: prefixes.iter().map(|s| s.to_string()).collect(),
            ..Self::new(params)
        }
    }

    /// Everything constant, for inference.
    pub fn inference(params: &'a ParamSet) -> Self {
        Self::frozen(params, &[""])
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            g.constant(t.clone())
        } else {
            g.param_from(self.params, name)?
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }
}

pub fn image_tensor(img: &FeatureImage) -> Tensor {
    let (c, h, w) = img.shape();
    Tensor::new(&[c, h, w], img.data().to_vec()).expect("image data matches its shape")
}

/// Encoder weights bound once into a graph and reused for every partition.
#[derive(Debug, Clone)]
pub struct Encoder {
    layers: Vec<(Var, Var)>,
}

impl Encoder {
    pub fn bind(g: &mut Graph, b: &mut Bindings, cfg: &EncoderConfig) -> Result<Self> {
        let layers = (0..cfg.channels.len())
            .map(|k| {
                let (w, bias) = conv_names(k);
                Ok((b.var(g, &w)?, b.var(g, &bias)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut x = x;
        for &(w, b) in &self.layers {
            let y = g.conv2d(x, w, Some(b), 1, 1)?;
            let y = g.relu(y);
            x = g.max_pool2(y)?;
        }
        Ok(x)
    }
}

pub(crate) fn check_image(img: &FeatureImage, cfg: &EncoderConfig) -> Result<()> {
    let want = (cfg.in_channels, cfg.height, cfg.width);
    if img.shape() != want {
        return Err(Error::InvalidArgument(format!(
            "image shape {:?}, encoder expects {want:?}",
            img.shape()
        )));
    }
    Ok(())
}

/// Feature map `C_f×h×w` of one partition image.
pub fn encode_partition(
    img: &FeatureImage,
    params: &ParamSet,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    check_image(img, cfg)?;
    let mut g = Graph::new();
    let enc = Encoder::bind(&mut g, &mut Bindings::inference(params), cfg)?;
    let x = g.constant(image_tensor(img));
    let y = enc.encode(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Concatenation of the four maps followed by global average pooling (`4·C_f`).
pub fn pooled_concat(g: &mut Graph, maps: &[Var]) -> Result<Var> {
    let cat = g.concat(maps)?;
    Ok(g.global_avg_pool(cat)?)
}

/// `head.weight · x + head.bias`.
pub fn plain_head(g: &mut Graph, b: &mut Bindings, pooled: Var) -> Result<Var> {
    let w = b.var(g, HEAD_WEIGHT)?;
    let bias = b.var(g, HEAD_BIAS)?;
    Ok(g.linear(pooled, w, Some(bias))?)
}

/// fc1 → relu → fc2 → sigmoid, rescaled to mean exactly `weight_scale`.
pub fn excitation_weights(
    g: &mut Graph,
    b: &mut Bindings,
    pooled: Var,
    weight_scale: f64,
) -> Result<Var> {
    let w1 = b.var(g, FC1_WEIGHT)?;
    let b1 = b.var(g, FC1_BIAS)?;
    let w2 = b.var(g, FC2_WEIGHT)?;
    let b2 = b.var(g, FC2_BIAS)?;
    let h = g.linear(pooled, w1, Some(b1))?;
    let h = g.relu(h);
    let s = g.linear(h, w2, Some(b2))?;
    let s = g.sigmoid(s);
    let m = g.mean(s);
    let inv = g.recip(m);
    let w = g.scale_by(s, inv)?;
    Ok(g.scalar_mul(w, weight_scale))
}

/// Excitation fusion of the four feature maps. Returns the fingerprint and the
/// `4·C_f` channel weights.
///
/// Scaling channels before global pooling equals scaling the pooled vector, so
/// the weights are applied after pooling.
pub fn excitation_fuse(
    g: &mut Graph,
    b: &mut Bindings,
    maps: &[Var],
    weight_scale: f64,
) -> Result<(Var, Var)> {
    let pooled = pooled_concat(g, maps)?;
    excitation_from_pooled(g, b, pooled, weight_scale)
}

pub fn excitation_from_pooled(
    g: &mut Graph,
    b: &mut Bindings,
    pooled: Var,
    weight_scale: f64,
) -> Result<(Var, Var)> {
    let w = excitation_weights(g, b, pooled, weight_scale)?;
    let scaled = g.elementwise_mul(pooled, w)?;
    Ok((plain_head(g, b, scaled)?, w))
}

/// Head applied to pooled features weighted by externally supplied channel weights.
pub fn apply_channel_weights(
    pooled: &[f64],
    weights: &[f64],
    params: &ParamSet,
) -> Result<Vec<f64>> {
    if pooled.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} features, {} weights",
            pooled.len(),
            weights.len()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(
        pooled.iter().zip(weights).map(|(a, b)| a * b).collect(),
    ));
    let z = plain_head(&mut g, &mut Bindings::inference(params), x)?;
    Ok(g.value(z).data().to_vec())
}

/// Two-layer MLP on the concatenated pooled vectors: `4D → 2D → D`.
pub fn mlp_fuse(g: &mut Graph, b: &mut Bindings, pooled: &[Var]) -> Result<Var> {
    let x = g.concat(pooled)?;
    mlp_from_pooled(g, b, x)
}

pub fn mlp_from_pooled(g: &mut Graph, b: &mut Bindings, x: Var) -> Result<Var> {
    let w1 = b.var(g, MLP1_WEIGHT)?;
    let b1 = b.var(g, MLP1_BIAS)?;
    let w2 = b.var(g, MLP2_WEIGHT)?;
    let b2 = b.var(g, MLP2_BIAS)?;
    let h = g.linear(x, w1, Some(b1))?;
    let h = g.relu(h);
    Ok(g.linear(h, w2, Some(b2))?)
}

/// Fingerprint graph on top of a pooled `4·C_f` vector.
pub fn head_from_pooled(
    g: &mut Graph,
    b: &mut Bindings,
    pooled: Var,
    head: Head,
    weight_scale: f64,
) -> Result<Var> {
    match head {
        Head::Plain => plain_head(g, b, pooled),
        Head::Excitation => Ok(excitation_from_pooled(g, b, pooled, weight_scale)?.0),
        Head::Mlp => mlp_from_pooled(g, b, pooled),
    }
}

/// Elementwise mean of the four per-partition similarity matrices.
pub fn voting_identify(sims: &[SimilarityMatrix]) -> Result<SimilarityMatrix> {
    let first = sims
        .first()
        .ok_or_else(|| Error::InvalidArgument("no matrices to vote".into()))?;
    if sims.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::InvalidArgument(
            "similarity matrices differ in shape".into(),
        ));
    }
    let (r, c) = first.shape();
    let n = sims.len() as f64;
    let data = (0..r * c)
        .map(|k| sims.iter().map(|s| s.data()[k]).sum::<f64>() / n)
        .collect();
    SimilarityMatrix::from_data(r, c, data)
}

/// Encoder plus fusion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn encoder_params(&self) -> ParamSet {
        self.params.subset(ENCODER_PREFIX)
    }

    /// Global-average-pooled feature maps of the four partitions, concatenated.
    pub fn pooled(&self, set: &PartitionSet) -> Result<Vec<f64>> {
        let cfg = &self.config.encoder;
        let mut g = Graph::new();
        let enc = Encoder::bind(&mut g, &mut Bindings::inference(&self.params), cfg)?;
        let mut maps = Vec::with_capacity(4);
        for img in &set.images {
            check_image(img, cfg)?;
            let x = g.constant(image_tensor(img));
            maps.push(enc.encode(&mut g, x)?);
        }
        let p = pooled_concat(&mut g, &maps)?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn embed_pooled(&self, pooled: &[f64], head: Head) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(pooled.to_vec()));
        let mut b = Bindings::inference(&self.params);
        let z = head_from_pooled(&mut g, &mut b, x, head, self.config.weight_scale)?;
        Ok(g.value(z).data().to_vec())
    }

    pub fn channel_weights(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(pooled.to_vec()));
        let mut b = Bindings::inference(&self.params);
        let w = excitation_weights(&mut g, &mut b, x, self.config.weight_scale)?;
        Ok(g.value(w).data().to_vec())
    }

    /// Per-partition embeddings `W_p · pooled_p` through the plain head's
    /// column block `p` (their sum plus bias is the plain fingerprint).
    pub fn partition_embeddings(&self, pooled: &[f64]) -> Result<[Vec<f64>; 4]> {
        let w = self
            .params
            .get(HEAD_WEIGHT)
            .ok_or_else(|| Error::InvalidArgument("missing head".into()))?;
        let (d, n) = (w.shape()[0], w.shape()[1]);
        if pooled.len() != n {
            return Err(Error::InvalidArgument(format!(
                "pooled length {}, head expects {n}",
                pooled.len()
            )));
        }
        let cf = n / 4;
        Ok(std::array::from_fn(|p| {
            (0..d)
                .map(|r| {
                    let row = &w.data()[r * n + p * cf..r * n + (p + 1) * cf];
                    row.iter()
                        .zip(&pooled[p * cf..(p + 1) * cf])
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect()
        }))
    }

    /// Head used for fingerprints under the configured fusion strategy.
    pub fn head(&self) -> Head {
        match self.config.fusion {
            FusionStrategy::Excitation => Head::Excitation,
            FusionStrategy::Voting => Head::Plain,
            FusionStrategy::Mlp => Head::Mlp,
        }
    }

    pub fn fingerprint(&self, set: &PartitionSet) -> Result<Vec<f64>> {
        self.embed_pooled(&self.pooled(set)?, self.head())
    }

    /// Writes `<stem>.pset` and `<stem>.toml` (the model configuration).
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.params.save(stem.with_extension("pset"))?;
        let text = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(stem.with_extension("toml"), text)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(stem.with_extension("toml"))?;
        let config: ModelConfig =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        let params = ParamSet::load(stem.with_extension("pset"))?;
        Ok(Self { config, params })
    }
}
