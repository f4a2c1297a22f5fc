//! The six classification systems: intermediate and prediction fusion,
//! late fusion, voting fusion, and the two unimodal baselines.

mod head;
mod neural;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use head::{soft_vote, GbdtModel, HeadConfig, HeadFitReport, HeadKind, SvmModel, TabularHead};
pub use neural::{NeuralCache, NeuralSystem};

use crate::cohort::{AugmentConfig, Subset};
use crate::error::{Error, Result};
use crate::evaluation::{roc_auc, PredictionRow, PredictionSet};
use crate::nn::{sigmoid, Parameterized};
use crate::paths::{DemographicPath, EncoderConfig, FundusPath, FusionPath, PathConfig, PathMode};
use crate::rng;
use crate::training::{
    predict_logits, train, DataAccess, Example, GroupRates, Phase, PreprocessStats, SystemInput, TrainConfig,
    TrainHistory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Intermediate,
    Prediction,
    Late,
    Voting,
    UnimodalFundus,
    UnimodalDemographic,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Intermediate => "intermediate",
            Strategy::Prediction => "prediction",
            Strategy::Late => "late",
            Strategy::Voting => "voting",
            Strategy::UnimodalFundus => "unimodal_fundus",
            Strategy::UnimodalDemographic => "unimodal_demographic",
        }
    }
}

/// Saved system directories that late and voting fusion build on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Prerequisites {
    pub fundus: Option<PathBuf>,
    pub demographic: Option<PathBuf>,
    pub intermediate: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSpec {
    pub strategy: Strategy,
    /// Classifier for late, voting and unimodal demographic systems.
    pub head_kind: Option<HeadKind>,
    pub encoder: EncoderConfig,
    pub paths: PathConfig,
    pub head: HeadConfig,
    pub prerequisites: Prerequisites,
}

impl Default for FusionSpec {
    fn default() -> Self {
        FusionSpec {
            strategy: Strategy::Intermediate,
            head_kind: None,
            encoder: EncoderConfig::default(),
            paths: PathConfig::default(),
            head: HeadConfig::default(),
            prerequisites: Prerequisites::default(),
        }
    }
}

impl FusionSpec {
    pub fn new(strategy: Strategy) -> Self {
        FusionSpec {
            strategy,
            ..Default::default()
        }
    }

    /// The head in effect: late defaults to the FCNN, voting to soft voting.
    pub fn resolved_head(&self) -> Option<HeadKind> {
        match self.strategy {
            Strategy::Late => Some(self.head_kind.unwrap_or(HeadKind::Fcnn)),
            Strategy::Voting => Some(self.head_kind.unwrap_or(HeadKind::SoftVote)),
            Strategy::UnimodalDemographic => Some(self.head_kind.unwrap_or(HeadKind::Fcnn)),
            _ => None,
        }
    }

    pub fn uses_images(&self) -> bool {
        self.strategy != Strategy::UnimodalDemographic
    }

    /// Checks everything except the presence of prerequisite systems.
    pub fn validate_shape(&self) -> Result<()> {
        self.encoder.validate()?;
        self.paths.validate()?;
        self.head.validate()?;
        if self.head_kind == Some(HeadKind::SoftVote) && self.strategy != Strategy::Voting {
            return Err(Error::config("fusion.head_kind", "soft_vote is only valid with the voting strategy"));
        }
        if self.head_kind.is_some() && self.resolved_head().is_none() {
            return Err(Error::config(
                "fusion.head_kind",
                format!("the {} strategy takes no classifier head", self.strategy.name()),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        let p = &self.prerequisites;
        let missing = match self.strategy {
            Strategy::Late => p.fundus.is_none().then_some("fundus"),
            Strategy::Voting => [
                ("fundus", &p.fundus),
                ("demographic", &p.demographic),
                ("intermediate", &p.intermediate),
            ]
            .into_iter()
            .find(|(_, v)| v.is_none())
            .map(|(n, _)| n),
            _ => None,
        };
        if let Some(name) = missing {
            return Err(Error::config(
                format!("fusion.prerequisites.{name}"),
                format!("the {} strategy needs a trained {name} system", self.strategy.name()),
            ));
        }
        Ok(())
    }
}

/// Already trained systems consumed by late and voting fusion.
#[derive(Debug, Clone, Default)]
pub struct TrainedPrerequisites {
    pub fundus: Option<NeuralSystem>,
    pub demographic: Option<NeuralSystem>,
    pub intermediate: Option<NeuralSystem>,
}

impl TrainedPrerequisites {
    /// Loads every prerequisite named in `spec`; each must be a trained
    /// system of the matching strategy.
    pub fn load(spec: &FusionSpec) -> Result<Self> {
        let get = |path: &Option<PathBuf>, want: Strategy| -> Result<Option<NeuralSystem>> {
            let Some(path) = path else { return Ok(None) };
            let sys = System::load(path)?;
            if sys.spec.strategy != want || !sys.trained {
                return Err(Error::Validation(format!(
                    "{} is not a trained {} system",
                    path.display(),
                    want.name()
                )));
            }
            match sys.model {
                Model::Neural(n) => Ok(Some(n)),
                _ => Err(Error::Validation(format!("{} is not a neural system", path.display()))),
            }
        };
        let p = &spec.prerequisites;
        Ok(TrainedPrerequisites {
            fundus: get(&p.fundus, Strategy::UnimodalFundus)?,
            demographic: get(&p.demographic, Strategy::UnimodalDemographic)?,
            intermediate: get(&p.intermediate, Strategy::Intermediate)?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "system")]
pub enum Model {
    Neural(NeuralSystem),
    /// Head over (fundus logit, standardized age, gender code).
    Late { fundus: NeuralSystem, head: TabularHead },
    /// Head over the three prerequisite logits.
    Voting {
        fundus: NeuralSystem,
        demographic: NeuralSystem,
        intermediate: NeuralSystem,
        head: TabularHead,
    },
    /// Head over (standardized age, gender code).
    Tabular { head: TabularHead },
}

pub const INTERMEDIATE_WIDTH: usize = 40;
pub const PREDICTION_WIDTH: usize = 2;
pub const LATE_WIDTH: usize = 3;
pub const VOTING_WIDTH: usize = 3;

fn check_width(what: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(what, expected, actual));
    }
    Ok(())
}

/// Builds an untrained model for `spec`. Weight initialization draws from
/// `seed`; late and voting models take their frozen parts from `trained`.
pub fn assemble(spec: &FusionSpec, seed: u64, trained: &TrainedPrerequisites) -> Result<Model> {
    spec.validate()?;
    let mut r = rng::stream(seed, 0x494e_4954);
    let need = |m: &Option<NeuralSystem>, name: &str| -> Result<NeuralSystem> {
        m.clone().ok_or_else(|| {
            Error::config(
                format!("fusion.prerequisites.{name}"),
                format!("trained {name} system was not supplied"),
            )
        })
    };
    Ok(match spec.strategy {
        Strategy::Intermediate => {
            let fundus = FundusPath::new(&spec.encoder, PathMode::Features, &mut r)?;
            let demographic = DemographicPath::joint(&spec.paths, PathMode::Features, &mut r)?;
            let width = fundus.output_width() + demographic.output_width();
            check_width(
                "intermediate concatenation",
                spec.encoder.feature_width() + spec.paths.demographic_feature_dim,
                width,
            )?;
            let fusion = FusionPath::new(width, &spec.paths, &mut r)?;
            Model::Neural(NeuralSystem::Intermediate {
                fundus,
                demographic,
                fusion,
            })
        }
        Strategy::Prediction => {
            let fundus = FundusPath::new(&spec.encoder, PathMode::Logit, &mut r)?;
            let demographic = DemographicPath::joint(&spec.paths, PathMode::Logit, &mut r)?;
            let width = fundus.output_width() + demographic.output_width();
            check_width("prediction concatenation", PREDICTION_WIDTH, width)?;
            let fusion = FusionPath::new(width, &spec.paths, &mut r)?;
            Model::Neural(NeuralSystem::Prediction {
                fundus,
                demographic,
                fusion,
            })
        }
        Strategy::UnimodalFundus => Model::Neural(NeuralSystem::Fundus {
            fundus: FundusPath::new(&spec.encoder, PathMode::Logit, &mut r)?,
        }),
        Strategy::UnimodalDemographic => match spec.resolved_head() {
            Some(HeadKind::Fcnn) => Model::Neural(NeuralSystem::Demographic {
                demographic: DemographicPath::standalone(&spec.paths, &mut r)?,
            }),
            Some(kind) => Model::Tabular {
                head: TabularHead::new(kind, 2),
            },
            None => unreachable!("unimodal demographic always resolves a head"),
        },
        Strategy::Late => {
            let fundus = need(&trained.fundus, "fundus")?;
            let head = TabularHead::new(spec.resolved_head().unwrap(), LATE_WIDTH);
            check_width("late head input", LATE_WIDTH, late_features(&fundus, &probe_input())?.len())?;
            Model::Late { fundus, head }
        }
        Strategy::Voting => {
            let fundus = need(&trained.fundus, "fundus")?;
            let demographic = need(&trained.demographic, "demographic")?;
            let intermediate = need(&trained.intermediate, "intermediate")?;
            let head = TabularHead::new(spec.resolved_head().unwrap(), VOTING_WIDTH);
            check_width("voting head input", VOTING_WIDTH, head.input_width)?;
            Model::Voting {
                fundus,
                demographic,
                intermediate,
                head,
            }
        }
    })
}

fn probe_input() -> SystemInput {
    SystemInput {
        image: None,
        demo: crate::paths::DemographicInput {
            age_std: 0.0,
            gender_code: 0.0,
        },
    }
}

/// (fundus logit, standardized age, gender code). The logit is skipped for
/// an image-less probe, which only checks the width.
fn late_features(fundus: &NeuralSystem, x: &SystemInput) -> Result<Vec<f64>> {
    use crate::training::Trainable;
    let z = if x.image.is_some() { fundus.logit(x)? } else { 0.0 };
    Ok(vec![z, x.demo.age_std, x.demo.gender_code])
}

/// Outcome of fitting a system on its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// 1-based selected epoch for neural systems.
    pub best_epoch: Option<usize>,
    pub validation_auc: f64,
    pub history: Option<TrainHistory>,
    pub head: Option<HeadFitReport>,
    /// Subset the head was fitted on.
    pub head_fit_subset: Option<Subset>,
}

impl Model {
    pub fn uses_images(&self) -> bool {
        match self {
            Model::Neural(n) => n.uses_images(),
            Model::Tabular { .. } => false,
            _ => true,
        }
    }

    pub fn neural(&self) -> Option<&NeuralSystem> {
        match self {
            Model::Neural(n) => Some(n),
            _ => None,
        }
    }

    pub fn head(&self) -> Option<&TabularHead> {
        match self {
            Model::Late { head, .. } | Model::Voting { head, .. } | Model::Tabular { head } => Some(head),
            Model::Neural(_) => None,
        }
    }

    /// Inputs of the tabular head for each example.
    fn head_inputs(&self, examples: &[Example<SystemInput>], workers: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            Model::Neural(_) => Err(Error::Validation("neural systems have no tabular head".into())),
            Model::Tabular { .. } => Ok(examples.iter().map(|e| e.input.demo.as_vec().to_vec()).collect()),
            Model::Late { fundus, .. } => {
                let z = predict_logits(fundus, examples, workers)?;
                Ok(examples
                    .iter()
                    .zip(z)
                    .map(|(e, z)| vec![z, e.input.demo.age_std, e.input.demo.gender_code])
                    .collect())
            }
            Model::Voting {
                fundus,
                demographic,
                intermediate,
                ..
            } => {
                let a = predict_logits(fundus, examples, workers)?;
                let b = predict_logits(demographic, examples, workers)?;
                let c = predict_logits(intermediate, examples, workers)?;
                Ok((0..examples.len()).map(|i| vec![a[i], b[i], c[i]]).collect())
            }
        }
    }

    /// Positive-class probabilities in example order.
    pub fn predict(&self, examples: &[Example<SystemInput>], workers: usize) -> Result<Vec<f64>> {
        match self {
            Model::Neural(n) => Ok(predict_logits(n, examples, workers)?.into_iter().map(sigmoid).collect()),
            _ => {
                let head = self.head().unwrap();
                if !head.is_fitted() {
                    return Err(Error::NotFitted(format!("{:?} head", head.kind)));
                }
                head.predict_proba(&self.head_inputs(examples, workers)?)
            }
        }
    }

    /// Trains neural systems with validation-AUC checkpoint selection, or fits
    /// the tabular head on training-subset inputs. Frozen prerequisite
    /// systems are never modified.
    pub fn fit(
        &mut self,
        data: &DataAccess<SystemInput>,
        spec: &FusionSpec,
        cfg: &TrainConfig,
        augment: Option<&AugmentConfig>,
    ) -> Result<FitSummary> {
        data.set_phase(Phase::Training);
        match self {
            Model::Neural(n) => {
                let rates = GroupRates {
                    head: spec.encoder.head_learning_rate,
                    backbone: spec.encoder.backbone_learning_rate,
                };
                let aug = if n.uses_images() { augment } else { None };
                let out = train(n.clone(), data, rates, cfg, aug)?;
                *n = out.best.model;
                Ok(FitSummary {
                    best_epoch: Some(out.best.epoch),
                    validation_auc: out.best.metrics.auc,
                    history: Some(out.history),
                    head: None,
                    head_fit_subset: None,
                })
            }
            _ => {
                let train_set = data.read(Subset::Train)?;
                let x = self.head_inputs(train_set, cfg.workers)?;
                let y: Vec<bool> = train_set.iter().map(|e| e.meta.label).collect();
                let head = match self {
                    Model::Late { head, .. } | Model::Voting { head, .. } | Model::Tabular { head } => head,
                    Model::Neural(_) => unreachable!(),
                };
                head.fit(&x, &y, &spec.paths, &spec.head, cfg.seed)?;
                let val = data.read(Subset::Validation)?;
                let p = self.predict(val, cfg.workers)?;
                let labels: Vec<bool> = val.iter().map(|e| e.meta.label).collect();
                let validation_auc = roc_auc(&p, &labels)
                    .map_err(|_| Error::Validation("validation subset must contain both classes".into()))?;
                Ok(FitSummary {
                    best_epoch: None,
                    validation_auc,
                    history: None,
                    head: self.head().and_then(|h| h.fit_report.clone()),
                    head_fit_subset: Some(Subset::Train),
                })
            }
        }
    }

    /// Flattened weights of every frozen or trainable neural part.
    pub fn checksum(&self) -> Vec<f64> {
        match self {
            Model::Neural(n) => n.flat(),
            Model::Late { fundus, .. } => fundus.flat(),
            Model::Voting {
                fundus,
                demographic,
                intermediate,
                ..
            } => [fundus.flat(), demographic.flat(), intermediate.flat()].concat(),
            Model::Tabular { .. } => Vec::new(),
        }
    }
}

/// A model with its spec and the preprocessing statistics it was trained with.
#[derive(Debug, Clone)]
pub struct System {
    pub spec: FusionSpec,
    pub model: Model,
    pub stats: PreprocessStats,
    pub trained: bool,
}

const SPEC_FILE: &str = "spec.json";
const WEIGHTS_FILE: &str = "weights.json";
const PREPROCESS_FILE: &str = "preprocess.json";

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    trained: bool,
    model: Model,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

impl System {
    pub fn new(spec: FusionSpec, model: Model, stats: PreprocessStats) -> Result<Self> {
        if spec.uses_images() && stats.preprocess.image_size != spec.encoder.image_size {
            return Err(Error::config(
                "encoder.image_size",
                format!(
                    "{} differs from the preprocessing size {}",
                    spec.encoder.image_size, stats.preprocess.image_size
                ),
            ));
        }
        Ok(System {
            spec,
            model,
            stats,
            trained: false,
        })
    }

    /// Files written by [`System::save`], relative to its directory.
    pub fn files() -> [&'static str; 3] {
        [SPEC_FILE, WEIGHTS_FILE, PREPROCESS_FILE]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join(SPEC_FILE), &self.spec)?;
        write_json(&dir.join(PREPROCESS_FILE), &self.stats)?;
        let file = std::fs::File::create(dir.join(WEIGHTS_FILE))?;
        serde_json::to_writer(
            std::io::BufWriter::new(file),
            &WeightsFile {
                trained: self.trained,
                model: self.model.clone(),
            },
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: FusionSpec = read_json(&dir.join(SPEC_FILE))?;
        let stats: PreprocessStats = read_json(&dir.join(PREPROCESS_FILE))?;
        let w: WeightsFile = read_json(&dir.join(WEIGHTS_FILE))?;
        Ok(System {
            spec,
            model: w.model,
            stats,
            trained: w.trained,
        })
    }

    pub fn fit(
        &mut self,
        data: &DataAccess<SystemInput>,
        cfg: &TrainConfig,
        augment: Option<&AugmentConfig>,
    ) -> Result<FitSummary> {
        let out = self.model.fit(data, &self.spec, cfg, augment)?;
        self.trained = true;
        Ok(out)
    }

    /// Probabilities paired with each example's identifiers and labels.
    pub fn predict_proba(&self, examples: &[Example<SystemInput>], workers: usize) -> Result<PredictionSet> {
        if !self.trained {
            return Err(Error::NotFitted(format!("{} system", self.spec.strategy.name())));
        }
        let p = self.model.predict(examples, workers)?;
        let rows = examples
            .iter()
            .zip(p)
            .map(|(e, p)| PredictionRow {
                image_id: e.meta.image_id.clone(),
                patient_id: e.meta.patient_id.clone(),
                probability: p.clamp(0.0, 1.0),
                label: e.meta.label as u8,
                diabetes: e.meta.diabetes as u8,
            })
            .collect();
        PredictionSet::new(rows)
    }
}
