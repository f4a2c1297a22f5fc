//! The three neural building blocks: the fundus image encoder, the
//! demographic FCNN and the fusion FCNN.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBackbone, ConvBackboneCache, Dense, FeatureMap, Mlp, MlpCache, Param, ParamGroup, Parameterized};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Fundus,
    Demographic,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source: FeatureSource,
}

/// Raw pre-sigmoid score.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Logit(pub f64);

impl Logit {
    pub fn probability(self) -> f64 {
        crate::nn::sigmoid(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemographicInput {
    pub age_std: f64,
    pub gender_code: f64,
}

impl DemographicInput {
    pub fn as_vec(&self) -> [f64; 2] {
        [self.age_std, self.gender_code]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.age_std.is_finite() || !self.gender_code.is_finite() {
            return Err(Error::Validation("non-finite demographic input".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    Features,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Retinal-image pretrained encoder loaded from a checkpoint.
    PretrainedRetinal,
    /// Natural-image pretrained encoder loaded from a checkpoint.
    PretrainedGeneric,
    /// Randomly initialized strided convolutional encoder.
    ToyConv,
}

/// Fundus feature width: a trainable projection to `n` values, or the
/// backbone's own embedding with no projection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureDim {
    Projected(usize),
    Native(NativeTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NativeTag {
    Native,
}

impl FeatureDim {
    pub const NATIVE: FeatureDim = FeatureDim::Native(NativeTag::Native);
}

impl std::fmt::Display for FeatureDim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureDim::Projected(n) => write!(f, "{n}"),
            FeatureDim::Native(_) => write!(f, "native"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone: BackboneKind,
    pub image_size: usize,
    pub fundus_feature_dim: FeatureDim,
    pub head_learning_rate: f64,
    pub backbone_learning_rate: f64,
    /// Output channels of each stride-2 convolution block.
    pub channels: Vec<usize>,
    /// Checkpoint for pretrained backbones.
    pub weights: Option<PathBuf>,
    pub negative_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone: BackboneKind::ToyConv,
            image_size: 512,
            fundus_feature_dim: FeatureDim::Projected(8),
            head_learning_rate: 1e-3,
            backbone_learning_rate: 1e-3,
            channels: vec![8, 16, 32],
            weights: None,
            negative_slope: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("encoder.image_size", "must be positive"));
        }
        if self.fundus_feature_dim == FeatureDim::Projected(0) {
            return Err(Error::config("encoder.fundus_feature_dim", "must be at least 1"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("encoder.channels", "need at least one non-empty block"));
        }
        for (name, lr) in [
            ("encoder.head_learning_rate", self.head_learning_rate),
            ("encoder.backbone_learning_rate", self.backbone_learning_rate),
        ] {
            if !(lr >= 0.0) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        Ok(())
    }

    /// Width of the fundus feature vector in features mode.
    pub fn feature_width(&self) -> usize {
        match self.fundus_feature_dim {
            FeatureDim::Projected(n) => n,
            FeatureDim::Native(_) => *self.channels.last().unwrap_or(&0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathConfig {
    /// Dense layers (output included) of the demographic path inside joint systems.
    pub demographic_layers: usize,
    /// Dense layers of the standalone demographic classifier.
    pub demographic_standalone_layers: usize,
    pub demographic_feature_dim: usize,
    pub fusion_layers: usize,
    pub hidden_width: usize,
    pub dropout_rate: f64,
    pub negative_slope: f64,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            demographic_layers: 2,
            demographic_standalone_layers: 4,
            demographic_feature_dim: 32,
            fusion_layers: 4,
            hidden_width: 64,
            dropout_rate: 0.2,
            negative_slope: 0.01,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("paths.demographic_layers", self.demographic_layers),
            ("paths.demographic_standalone_layers", self.demographic_standalone_layers),
            ("paths.demographic_feature_dim", self.demographic_feature_dim),
            ("paths.fusion_layers", self.fusion_layers),
            ("paths.hidden_width", self.hidden_width),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("paths.dropout_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Reads a serialized [`ConvBackbone`] checkpoint.
pub fn load_backbone(path: &Path) -> Result<ConvBackbone> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

pub fn save_backbone(backbone: &ConvBackbone, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), backbone)?;
    Ok(())
}

/// Image encoder: convolutional backbone plus an optional linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundusPath {
    pub backbone: ConvBackbone,
    pub head: Option<Dense>,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
pub struct FundusCache {
    pub backbone: ConvBackboneCache,
    embedding: Vec<f64>,
}

impl FundusPath {
    pub fn new(cfg: &EncoderConfig, mode: PathMode, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut backbone = ConvBackbone::new(3, &cfg.channels, cfg.negative_slope, rng);
        match cfg.backbone {
            BackboneKind::ToyConv => {}
            BackboneKind::PretrainedRetinal | BackboneKind::PretrainedGeneric => {
                let path = cfg.weights.as_ref().ok_or_else(|| {
                    Error::config("encoder.weights", "pretrained backbones need a checkpoint")
                })?;
                let loaded = load_backbone(path)?;
                backbone.check_compatible(&loaded)?;
                backbone = loaded;
                for p in backbone.params_mut() {
                    p.group = ParamGroup::Backbone;
                }
            }
        }
        let emb = backbone.embedding_dim();
        let head = match (mode, cfg.fundus_feature_dim) {
            (PathMode::Logit, _) => Some(Dense::new(emb, 1, ParamGroup::Head, rng)),
            (PathMode::Features, FeatureDim::Projected(n)) => {
                Some(Dense::new(emb, n, ParamGroup::Head, rng))
            }
            (PathMode::Features, FeatureDim::Native(_)) => None,
        };
        Ok(FundusPath {
            backbone,
            head,
            image_size: cfg.image_size,
        })
    }

    pub fn output_width(&self) -> usize {
        self.head
            .as_ref()
            .map(Dense::outputs)
            .unwrap_or_else(|| self.backbone.embedding_dim())
    }

    pub fn check_image(&self, img: &FeatureMap) -> Result<()> {
        if img.channels != 3 || img.height != self.image_size || img.width != self.image_size {
            return Err(Error::shape(
                "fundus input",
                format!("3x{0}x{0}", self.image_size),
                format!("{}x{}x{}", img.channels, img.height, img.width),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, img: &FeatureMap) -> (Vec<f64>, FundusCache) {
        let (embedding, backbone) = self.backbone.forward(img);
        let out = match &self.head {
            Some(h) => h.forward(&embedding),
            None => embedding.clone(),
        };
        (
            out,
            FundusCache {
                backbone,
                embedding,
            },
        )
    }

    /// Gradient of the output w.r.t. the pooled embedding.
    pub fn embedding_grad(&self, cache: &FundusCache, dy: &[f64], grad: &mut FundusPath) -> Vec<f64> {
        match (&self.head, &mut grad.head) {
            (Some(h), Some(gh)) => h.backward(&cache.embedding, dy, gh),
            _ => dy.to_vec(),
        }
    }

    pub fn backward(&self, cache: &FundusCache, dy: &[f64], grad: &mut FundusPath) {
        let d_emb = self.embedding_grad(cache, dy, grad);
        self.backbone.backward(&cache.backbone, &d_emb, &mut grad.backbone);
    }

    /// Batch encoding in evaluation mode.
    pub fn encode(&self, images: &[FeatureMap], source: FeatureSource) -> Result<Vec<FeatureVector>> {
        images
            .iter()
            .map(|img| {
                self.check_image(img)?;
                Ok(FeatureVector {
                    values: self.forward(img).0,
                    source,
                })
            })
            .collect()
    }
}

impl Parameterized for FundusPath {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        if let Some(h) = &self.head {
            v.extend(h.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        if let Some(h) = &mut self.head {
            v.extend(h.params_mut());
        }
        v
    }
}

/// Age/gender FCNN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicPath {
    pub mlp: Mlp,
}

impl DemographicPath {
    /// `layers` dense layers ending in `output` units.
    pub fn new(cfg: &PathConfig, layers: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if layers == 0 {
            return Err(Error::config("paths.demographic_layers", "must be at least 1"));
        }
        Ok(DemographicPath {
            mlp: Mlp::new(
                2,
                cfg.hidden_width,
                output,
                layers,
                cfg.negative_slope,
                cfg.dropout_rate,
                rng,
            ),
        })
    }

    /// Variant used by joint systems: features or a logit from the short stack.
    pub fn joint(cfg: &PathConfig, mode: PathMode, rng: &mut Rng) -> Result<Self> {
        let out = match mode {
            PathMode::Features => cfg.demographic_feature_dim,
            PathMode::Logit => 1,
        };
        Self::new(cfg, cfg.demographic_layers, out, rng)
    }

    /// The standalone classifier.
    pub fn standalone(cfg: &PathConfig, rng: &mut Rng) -> Result<Self> {
        Self::new(cfg, cfg.demographic_standalone_layers, 1, rng)
    }

    pub fn output_width(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn forward(&self, input: &DemographicInput, dropout: Option<&mut Rng>) -> (Vec<f64>, MlpCache) {
        self.mlp.forward(&input.as_vec(), dropout)
    }

    pub fn backward(&self, cache: &MlpCache, dy: &[f64], grad: &mut DemographicPath) {
        self.mlp.backward(cache, dy, &mut grad.mlp);
    }

    /// Batch forward in evaluation mode.
    pub fn forward_batch(&self, inputs: &[DemographicInput]) -> Result<Vec<FeatureVector>> {
        inputs
            .iter()
            .map(|x| {
                x.validate()?;
                Ok(FeatureVector {
                    values: self.forward(x, None).0,
                    source: FeatureSource::Demographic,
                })
            })
            .collect()
    }
}

impl Parameterized for DemographicPath {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}

/// FCNN mapping a concatenated vector to one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPath {
    pub mlp: Mlp,
}

impl FusionPath {
    pub fn new(input_width: usize, cfg: &PathConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(FusionPath {
            mlp: Mlp::new(
                input_width,
                cfg.hidden_width,
                1,
                cfg.fusion_layers,
                cfg.negative_slope,
                cfg.dropout_rate,
                rng,
            ),
        })
    }

    pub fn input_width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn forward(&self, fused: &[f64], dropout: Option<&mut Rng>) -> (f64, MlpCache) {
        let (out, cache) = self.mlp.forward(fused, dropout);
        (out[0], cache)
    }

    pub fn backward(&self, cache: &MlpCache, dlogit: f64, grad: &mut FusionPath) -> Vec<f64> {
        self.mlp.backward(cache, &[dlogit], &mut grad.mlp)
    }

    /// Batch forward in evaluation mode with width checking.
    pub fn forward_batch(&self, fused: &[FeatureVector]) -> Result<Vec<Logit>> {
        fused
            .iter()
            .map(|v| {
                if v.values.len() != self.input_width() {
                    return Err(Error::shape("fusion input", self.input_width(), v.values.len()));
                }
                Ok(Logit(self.forward(&v.values, None).0))
            })
            .collect()
    }
}

impl Parameterized for FusionPath {
    fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }
}
