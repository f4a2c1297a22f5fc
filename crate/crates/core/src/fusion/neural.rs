use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cohort::augment_image;
use crate::error::{Error, Result};
use crate::nn::{ConvBackbone, FeatureMap, MlpCache, Param, Parameterized};
use crate::paths::{DemographicPath, FundusCache, FundusPath, FusionPath};
use crate::training::{SystemInput, TrainCtx, Trainable};

/// The end-to-end trainable systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NeuralSystem {
    /// Feature vectors of both paths concatenated into the fusion FCNN.
    Intermediate {
        fundus: FundusPath,
        demographic: DemographicPath,
        fusion: FusionPath,
    },
    /// Logits of both paths concatenated into the fusion FCNN.
    Prediction {
        fundus: FundusPath,
        demographic: DemographicPath,
        fusion: FusionPath,
    },
    Fundus {
        fundus: FundusPath,
    },
    Demographic {
        demographic: DemographicPath,
    },
}

#[derive(Debug)]
pub struct NeuralCache {
    fundus: Option<FundusCache>,
    demographic: Option<MlpCache>,
    fusion: Option<MlpCache>,
}

impl NeuralSystem {
    pub fn fundus(&self) -> Option<&FundusPath> {
        match self {
            NeuralSystem::Intermediate { fundus, .. }
            | NeuralSystem::Prediction { fundus, .. }
            | NeuralSystem::Fundus { fundus } => Some(fundus),
            NeuralSystem::Demographic { .. } => None,
        }
    }

    pub fn uses_images(&self) -> bool {
        self.fundus().is_some()
    }

    /// Input width of the fusion FCNN, if there is one.
    pub fn fusion_width(&self) -> Option<usize> {
        match self {
            NeuralSystem::Intermediate { fusion, .. } | NeuralSystem::Prediction { fusion, .. } => {
                Some(fusion.input_width())
            }
            _ => None,
        }
    }

    /// Flattened parameters of each block by name.
    pub fn blocks(&self) -> Vec<(&'static str, Vec<f64>)> {
        match self {
            NeuralSystem::Intermediate {
                fundus,
                demographic,
                fusion,
            }
            | NeuralSystem::Prediction {
                fundus,
                demographic,
                fusion,
            } => vec![
                ("fundus", fundus.flat()),
                ("demographic", demographic.flat()),
                ("fusion", fusion.flat()),
            ],
            NeuralSystem::Fundus { fundus } => vec![("fundus", fundus.flat())],
            NeuralSystem::Demographic { demographic } => vec![("demographic", demographic.flat())],
        }
    }

    fn image<'a>(&self, x: &'a SystemInput) -> Result<&'a Arc<FeatureMap>> {
        let img = x
            .image
            .as_ref()
            .ok_or_else(|| Error::Validation("system needs an image but none was loaded".into()))?;
        if let Some(f) = self.fundus() {
            f.check_image(img)?;
        }
        Ok(img)
    }

    /// Target-layer activations and the gradient of the logit with respect
    /// to them, in evaluation mode.
    pub fn activation_gradient(&self, x: &SystemInput) -> Result<(FeatureMap, FeatureMap)> {
        let fundus = self
            .fundus()
            .ok_or_else(|| Error::Validation("system has no image encoder".into()))?;
        let (_, cache) = self.forward(x, None)?;
        let mut grad = self.zeroed();
        let fc = cache.fundus.as_ref().expect("image systems cache the encoder");
        let d_out = self.fundus_output_grad(&cache, 1.0, &mut grad);
        let grad_fundus = match &mut grad {
            NeuralSystem::Intermediate { fundus, .. }
            | NeuralSystem::Prediction { fundus, .. }
            | NeuralSystem::Fundus { fundus } => fundus,
            NeuralSystem::Demographic { .. } => unreachable!(),
        };
        let d_emb = fundus.embedding_grad(fc, &d_out, grad_fundus);
        let d_act = ConvBackbone::pool_backward(&fc.backbone, &d_emb);
        Ok((fc.backbone.activation.clone(), d_act))
    }

    /// Gradient at the fundus path's output for a logit gradient `dlogit`.
    fn fundus_output_grad(&self, cache: &NeuralCache, dlogit: f64, grad: &mut NeuralSystem) -> Vec<f64> {
        match (self, grad) {
            (
                NeuralSystem::Intermediate { fundus, fusion, .. } | NeuralSystem::Prediction { fundus, fusion, .. },
                NeuralSystem::Intermediate { fusion: gf, .. } | NeuralSystem::Prediction { fusion: gf, .. },
            ) => {
                let d = fusion.backward(cache.fusion.as_ref().unwrap(), dlogit, gf);
                d[..fundus.output_width()].to_vec()
            }
            (NeuralSystem::Fundus { .. }, _) => vec![dlogit],
            _ => vec![],
        }
    }
}

impl Parameterized for NeuralSystem {
    fn params(&self) -> Vec<&Param> {
        match self {
            NeuralSystem::Intermediate {
                fundus,
                demographic,
                fusion,
            }
            | NeuralSystem::Prediction {
                fundus,
                demographic,
                fusion,
            } => {
                let mut v = fundus.params();
                v.extend(demographic.params());
                v.extend(fusion.params());
                v
            }
            NeuralSystem::Fundus { fundus } => fundus.params(),
            NeuralSystem::Demographic { demographic } => demographic.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            NeuralSystem::Intermediate {
                fundus,
                demographic,
                fusion,
            }
            | NeuralSystem::Prediction {
                fundus,
                demographic,
                fusion,
            } => {
                let mut v = fundus.params_mut();
                v.extend(demographic.params_mut());
                v.extend(fusion.params_mut());
                v
            }
            NeuralSystem::Fundus { fundus } => fundus.params_mut(),
            NeuralSystem::Demographic { demographic } => demographic.params_mut(),
        }
    }
}

impl Trainable for NeuralSystem {
    type Input = SystemInput;
    type Cache = NeuralCache;

    fn forward(&self, x: &SystemInput, mut ctx: Option<&mut TrainCtx<'_>>) -> Result<(f64, NeuralCache)> {
        x.demo.validate()?;
        let mut cache = NeuralCache {
            fundus: None,
            demographic: None,
            fusion: None,
        };
        let fundus_out = match self.fundus() {
            Some(f) => {
                let img = self.image(x)?;
                let augmented;
                let input: &FeatureMap = match ctx.as_deref_mut() {
                    Some(c) if c.augment.is_some() => {
                        augmented = augment_image(img, c.augment.unwrap(), c.rng)?;
                        &augmented
                    }
                    _ => img,
                };
                let (out, fc) = f.forward(input);
                cache.fundus = Some(fc);
                out
            }
            None => Vec::new(),
        };
        let use_dropout = ctx.as_ref().is_some_and(|c| c.dropout);
        match self {
            NeuralSystem::Fundus { .. } => Ok((fundus_out[0], cache)),
            NeuralSystem::Demographic { demographic } => {
                let rng = ctx.filter(|_| use_dropout).map(|c| &mut *c.rng);
                let (out, dc) = demographic.forward(&x.demo, rng);
                cache.demographic = Some(dc);
                Ok((out[0], cache))
            }
            NeuralSystem::Intermediate {
                demographic, fusion, ..
            }
            | NeuralSystem::Prediction {
                demographic, fusion, ..
            } => {
                let (demo_out, dc) = match ctx.as_deref_mut().filter(|_| use_dropout) {
                    Some(c) => demographic.forward(&x.demo, Some(&mut *c.rng)),
                    None => demographic.forward(&x.demo, None),
                };
                let mut fused = fundus_out;
                fused.extend(demo_out);
                if fused.len() != fusion.input_width() {
                    return Err(Error::shape("fusion input", fusion.input_width(), fused.len()));
                }
                let rng = ctx.filter(|_| use_dropout).map(|c| &mut *c.rng);
                let (z, fc) = fusion.forward(&fused, rng);
                cache.demographic = Some(dc);
                cache.fusion = Some(fc);
                Ok((z, cache))
            }
        }
    }

    fn backward(&self, cache: &NeuralCache, dlogit: f64, grad: &mut Self) {
        match (self, grad) {
            (
                NeuralSystem::Intermediate {
                    fundus,
                    demographic,
                    fusion,
                }
                | NeuralSystem::Prediction {
                    fundus,
                    demographic,
                    fusion,
                },
                NeuralSystem::Intermediate {
                    fundus: gfu,
                    demographic: gd,
                    fusion: gfs,
                }
                | NeuralSystem::Prediction {
                    fundus: gfu,
                    demographic: gd,
                    fusion: gfs,
                },
            ) => {
                let d = fusion.backward(cache.fusion.as_ref().unwrap(), dlogit, gfs);
                let (d_f, d_d) = d.split_at(fundus.output_width());
                fundus.backward(cache.fundus.as_ref().unwrap(), d_f, gfu);
                demographic.backward(cache.demographic.as_ref().unwrap(), d_d, gd);
            }
            (NeuralSystem::Fundus { fundus }, NeuralSystem::Fundus { fundus: g }) => {
                fundus.backward(cache.fundus.as_ref().unwrap(), &[dlogit], g);
            }
            (NeuralSystem::Demographic { demographic }, NeuralSystem::Demographic { demographic: g }) => {
                demographic.backward(cache.demographic.as_ref().unwrap(), &[dlogit], g);
            }
            _ => panic!("gradient buffer does not match the model"),
        }
    }
}
