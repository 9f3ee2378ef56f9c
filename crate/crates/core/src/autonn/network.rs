//! Model specifications and the shared forward path: sensor projection,
//! resize and standardization in front of an image backbone, or raw epochs
//! into EEGNet.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::archive::TensorArchive;
use super::array::{Array, Scalar};
use super::graph::{Graph, Var};
use super::params::{uniform, ParamKind, ParamStore};
use super::{eegnet, resnet, shallow};
use crate::error::{Error, Result};
use crate::imagerep::{PcaProjection, IMAGE_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "resnet18")]
    ResNet18,
    #[serde(rename = "shallow-cnn")]
    ShallowCnn,
    #[serde(rename = "eegnet")]
    EegNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// One logit, sigmoid cross-entropy.
    BinarySigmoid,
    /// Three logits, softmax cross-entropy.
    Softmax3,
}

impl HeadKind {
    pub fn n_outputs(self) -> usize {
        match self {
            HeadKind::BinarySigmoid => 1,
            HeadKind::Softmax3 => 3,
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            HeadKind::BinarySigmoid => 2,
            HeadKind::Softmax3 => 3,
        }
    }

    pub fn for_classes(n_classes: usize) -> Result<Self> {
        match n_classes {
            2 => Ok(HeadKind::BinarySigmoid),
            3 => Ok(HeadKind::Softmax3),
            n => Err(Error::Config(format!("no head for {} classes", n))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Pretrained,
    RandomInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePolicy {
    PartialFt,
    FullFt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionKind {
    /// Learnable 1x1 convolution across sensors.
    Conv,
    /// Fixed top-3 principal components fitted on the training fold.
    Pca3,
}

/// Where per-channel image standardization sits in the front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StandardizeOrder {
    AfterResize,
    BeforeResize,
    Off,
}

macro_rules! kebab_enum_text {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(<$t>::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(<$t>::$v),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($t), other, [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

kebab_enum_text!(Architecture { ResNet18 => "resnet18", ShallowCnn => "shallow-cnn", EegNet => "eegnet" });
kebab_enum_text!(Init { Pretrained => "pretrained", RandomInit => "random-init" });
kebab_enum_text!(FreezePolicy { PartialFt => "partial-ft", FullFt => "full-ft" });
kebab_enum_text!(ProjectionKind { Conv => "conv", Pca3 => "pca3" });
kebab_enum_text!(StandardizeOrder { AfterResize => "after-resize", BeforeResize => "before-resize", Off => "off" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub head: HeadKind,
    pub init: Init,
    pub freeze: FreezePolicy,
    pub projection: ProjectionKind,
    pub standardize: StandardizeOrder,
    /// Side length of the square image fed to ResNet-18 and the shallow CNN.
    pub image_size: usize,
    pub n_sensors: usize,
    /// Time samples per input epoch (EEGNet only).
    pub n_times: usize,
    /// Partial fine-tuning trains only the last residual block of stage 4.
    pub unfreeze_last_block_only: bool,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, head: HeadKind, n_sensors: usize, n_times: usize) -> Self {
        ModelSpec {
            architecture,
            head,
            init: Init::RandomInit,
            freeze: FreezePolicy::PartialFt,
            projection: ProjectionKind::Conv,
            standardize: StandardizeOrder::AfterResize,
            image_size: 224,
            n_sensors,
            n_times,
            unfreeze_last_block_only: false,
        }
    }

    pub fn uses_images(&self) -> bool {
        self.architecture != Architecture::EegNet
    }

    /// Prefixes of the parameters kept frozen under this spec.
    pub fn frozen_prefixes(&self) -> Vec<&'static str> {
        match (self.architecture, self.freeze) {
            (Architecture::ResNet18, FreezePolicy::PartialFt) => {
                let mut p = resnet::PARTIAL_FT_FROZEN.to_vec();
                if self.unfreeze_last_block_only {
                    p.push("layer4.0.");
                }
                p
            }
            _ => Vec::new(),
        }
    }

    /// True for parameters optimized at the head learning rate; the rest of
    /// a ResNet-18 backbone uses the fine-tuning rate.
    pub fn is_head_group(&self, name: &str) -> bool {
        match self.architecture {
            Architecture::ResNet18 => name.starts_with("fc.") || name.starts_with("proj."),
            _ => true,
        }
    }

    /// Allocate and initialize parameters. `archive` supplies pretrained
    /// backbone tensors and is only consulted for `Init::Pretrained`.
    pub fn build_params<T: Scalar>(&self, rng: &mut impl Rng, archive: Option<&TensorArchive>) -> Result<ParamStore<T>> {
        let n_out = self.head.n_outputs();
        let mut store = match self.architecture {
            Architecture::ResNet18 => resnet::init_params(n_out, rng),
            Architecture::ShallowCnn => shallow::init_params(self.image_size, n_out, rng)?,
            Architecture::EegNet => eegnet::init_params(self.n_sensors, self.n_times, n_out, rng)?,
        };
        if self.init == Init::Pretrained {
            if self.architecture != Architecture::ResNet18 {
                return Err(Error::Config(format!("{} has no pretrained weights", self.architecture)));
            }
            let archive = archive.ok_or_else(|| Error::Config("pretrained init requires a weight archive".into()))?;
            let names: Vec<String> = resnet::backbone_manifest().into_iter().map(|e| e.name).collect();
            store.load_from(archive, &names)?;
        }
        if self.uses_images() {
            if self.n_sensors == 0 {
                return Err(Error::Config("sensor projection needs at least one sensor".into()));
            }
            let mut front = ParamStore::new();
            match self.projection {
                ProjectionKind::Conv => {
                    let bound = 1.0 / (self.n_sensors as f64).sqrt();
                    front.insert("proj.weight", uniform::<T>(&[IMAGE_CHANNELS, self.n_sensors], bound, rng), ParamKind::Weight);
                    front.insert("proj.bias", Array::zeros(&[IMAGE_CHANNELS]), ParamKind::Bias);
                }
                ProjectionKind::Pca3 => {
                    front.insert("pca.components", Array::zeros(&[IMAGE_CHANNELS, self.n_sensors]), ParamKind::Buffer);
                    front.insert("pca.mean", Array::zeros(&[self.n_sensors]), ParamKind::Buffer);
                }
            }
            front.merge(store);
            store = front;
        }
        store.apply_freeze(&self.frozen_prefixes());
        Ok(store)
    }

    /// Logits for a batch: scalograms [N, S, F, T] for image models, raw
    /// epochs [N, 1, S, T] for EEGNet.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self.architecture {
            Architecture::EegNet => eegnet::forward(g, store, x),
            Architecture::ResNet18 => {
                let img = self.front_end(g, store, x)?;
                resnet::forward(g, store, img)
            }
            Architecture::ShallowCnn => {
                let img = self.front_end(g, store, x)?;
                shallow::forward(g, store, img)
            }
        }
    }

    /// Scalograms [N, S, F, T] -> images [N, 3, size, size].
    pub fn front_end<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.n_sensors {
            return Err(Error::shape(
                "front_end",
                format!("expected [N, {}, F, T] scalograms, got {:?}", self.n_sensors, xs),
            ));
        }
        let projected = match self.projection {
            ProjectionKind::Conv => {
                let w = g.param(store, "proj.weight")?;
                let b = g.param(store, "proj.bias")?;
                g.channel_mix(x, w, Some(b))?
            }
            ProjectionKind::Pca3 => {
                let w = g.param(store, "pca.components")?;
                let comps = store.value("pca.components")?;
                let mean = store.value("pca.mean")?;
                let ns = self.n_sensors;
                let bias: Vec<T> = comps
                    .data()
                    .chunks(ns)
                    .map(|row| T::zero() - row.iter().zip(mean.data()).map(|(&a, &b)| a * b).sum::<T>())
                    .collect();
                let b = g.input(Array::from_vec(&[IMAGE_CHANNELS], bias)?, false);
                g.channel_mix(x, w, Some(b))?
            }
        };
        let size = self.image_size;
        match self.standardize {
            StandardizeOrder::AfterResize => {
                let r = g.resize_bilinear(projected, size, size)?;
                g.standardize(r)
            }
            StandardizeOrder::BeforeResize => {
                let s = g.standardize(projected)?;
                g.resize_bilinear(s, size, size)
            }
            StandardizeOrder::Off => g.resize_bilinear(projected, size, size),
        }
    }
}

/// Copy a fitted PCA-3 projection into the `pca.*` buffers of `store`.
pub fn install_pca<T: Scalar>(store: &mut ParamStore<T>, pca: &PcaProjection) -> Result<()> {
    for (name, value) in [
        ("pca.components", pca.components.cast::<T>()),
        ("pca.mean", Array::from_vec(&[pca.mean.len()], pca.mean.iter().map(|&v| T::lit(v)).collect())?),
    ] {
        let p = store
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("install_pca", format!("{} {:?} vs {:?}", name, p.value.shape(), value.shape())));
        }
        p.value = Arc::new(value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn partial_ft_trains_stage4_head_and_projection() {
        let mut spec = ModelSpec::new(Architecture::ResNet18, HeadKind::BinarySigmoid, 4, 0);
        spec.image_size = 32;
        let store = spec.build_params::<f32>(&mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        let trainable = store.trainable_names();
        assert!(trainable
            .iter()
            .all(|n| n.starts_with("layer4.") || n.starts_with("fc.") || n.starts_with("proj.")));
        for (name, p) in store.iter() {
            let expect = p.kind != ParamKind::Buffer
                && (name.starts_with("layer4.") || name.starts_with("fc.") || name.starts_with("proj."));
            assert_eq!(p.trainable, expect, "{}", name);
        }
    }

    #[test]
    fn text_forms_round_trip() {
        for a in [Architecture::ResNet18, Architecture::ShallowCnn, Architecture::EegNet] {
            assert_eq!(a.to_string().parse::<Architecture>().unwrap(), a);
        }
        assert!("vit".parse::<Architecture>().is_err());
    }
}
