use std::sync::Arc;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use super::archive::{ArchiveTensor, TensorArchive};
use super::array::{Array, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / linear weights; the only kind that receives weight decay.
    Weight,
    Bias,
    /// Batch-norm affine scale and shift.
    NormAffine,
    /// Batch-norm running statistics. Stored and checkpointed, never trained.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Arc<Array<T>>,
    pub kind: ParamKind,
    pub trainable: bool,
    /// Per-output-filter L2 norm bound applied after each optimizer step.
    pub max_norm: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>, kind: ParamKind) {
        self.params.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                kind,
                trainable: kind != ParamKind::Buffer,
                max_norm: None,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Arc<Array<T>>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Learnable element count (buffers excluded), trainable or frozen.
    pub fn parameter_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Freeze every learnable parameter whose name starts with one of `prefixes`;
    /// all other learnable parameters become trainable.
    pub fn apply_freeze(&mut self, prefixes: &[&str]) {
        for (name, p) in self.params.iter_mut() {
            if p.kind == ParamKind::Buffer {
                p.trainable = false;
            } else {
                p.trainable = !prefixes.iter().any(|pre| name.starts_with(pre));
            }
        }
    }

    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (name, p) in &self.params {
            a.insert(name.clone(), ArchiveTensor::from_array(&p.value));
        }
        a
    }

    /// Overwrite the values of `names` from `archive`, checking shapes.
    pub fn load_from(&mut self, archive: &TensorArchive, names: &[String]) -> Result<()> {
        for name in names {
            let t = archive
                .get(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape != p.value.shape() {
                return Err(Error::shape(
                    "load_from",
                    format!("`{}` archive {:?} vs model {:?}", name, t.shape, p.value.shape()),
                ));
            }
            p.value = Arc::new(t.to_array());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: Arc::new(p.value.cast()),
                            kind: p.kind,
                            trainable: p.trainable,
                            max_norm: p.max_norm,
                        },
                    )
                })
                .collect(),
        }
    }
}

pub(crate) fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Array<T> {
    let n = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Array::from_vec(shape, data).expect("shape product matches")
}

/// He-normal initialization with fan-out scaling, as used for ResNet convs.
pub(crate) fn kaiming_normal_fan_out<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Array<T> {
    let fan_out = shape[0] * shape[2..].iter().product::<usize>();
    let std = (2.0 / fan_out as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Array::from_vec(shape, data).expect("shape product matches")
}

/// Default fan-in uniform initialization for a conv or linear weight and its bias.
pub(crate) fn fan_in_bound(shape: &[usize]) -> f64 {
    let fan_in: usize = shape[1..].iter().product();
    1.0 / (fan_in.max(1) as f64).sqrt()
}
