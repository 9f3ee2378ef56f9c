//! Consumer side of exported ImageNet ResNet-18 weights: archive and
//! manifest validation, and the forward-pass fixture comparison.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::archive::{load_archive, Dtype, TensorArchive};
use super::params::ParamStore;
use super::resnet::{self, ManifestEntry, IMAGENET_CLASSES};
use super::{Array, Graph};
use crate::error::{Error, Result};

/// Learnable element count of ResNet-18 with the 1000-way head.
pub const IMAGENET_PARAMETER_COUNT: usize = 11_689_512;
/// Largest accepted |logit difference| against the export fixture.
pub const FIXTURE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedTensor {
    pub name: String,
    pub shape: Vec<usize>,
}

/// `manifest.json` written next to an exported archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    /// Canonical order.
    pub tensors: Vec<ExportedTensor>,
    pub dtype: String,
    pub parameter_count: usize,
    /// SHA-256 of the archive bytes.
    pub content_digest: String,
    /// Fixture archive file name, holding `input` [1, 3, H, W] and `logits` [1, 1000].
    pub fixture: Option<String>,
}

impl ExportManifest {
    /// Manifest describing `archive` under the canonical tensor list.
    pub fn describe(archive: &TensorArchive, fixture: Option<String>) -> Self {
        let expected = resnet::manifest(IMAGENET_CLASSES);
        ExportManifest {
            tensors: expected
                .iter()
                .map(|e| ExportedTensor {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
            dtype: "float32".into(),
            parameter_count: resnet::parameter_count(&expected),
            content_digest: archive.digest(),
            fixture,
        }
    }
}

/// Differences between an archive and the canonical ResNet-18 tensor list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ArchiveCheck {
    pub missing: Vec<String>,
    pub extra: Vec<String>,
    /// `name: archive shape vs expected shape`.
    pub shape_mismatches: Vec<String>,
    pub non_f32: Vec<String>,
}

impl ArchiveCheck {
    pub fn is_clean(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.shape_mismatches.is_empty() && self.non_f32.is_empty()
    }
}

pub fn check_archive(archive: &TensorArchive) -> ArchiveCheck {
    let expected = resnet::manifest(IMAGENET_CLASSES);
    let known: BTreeSet<&str> = expected.iter().map(|e| e.name.as_str()).collect();
    let mut c = ArchiveCheck::default();
    for ManifestEntry { name, shape, .. } in &expected {
        match archive.get(name) {
            None => c.missing.push(name.clone()),
            Some(t) => {
                if &t.shape != shape {
                    c.shape_mismatches.push(format!("{}: {:?} vs {:?}", name, t.shape, shape));
                }
                if t.dtype() != Dtype::F32 {
                    c.non_f32.push(name.clone());
                }
            }
        }
    }
    c.extra = archive.tensors.keys().filter(|n| !known.contains(n.as_str())).cloned().collect();
    c
}

/// Validates an exported archive against its manifest: complete tensor
/// set, canonical order, parameter count and content digest.
pub fn verify_export(archive: &TensorArchive, manifest: &ExportManifest) -> Result<()> {
    let c = check_archive(archive);
    if !c.is_clean() {
        return Err(Error::InvalidInput(format!(
            "exported archive does not match ResNet-18: missing {:?}, extra {:?}, shapes {:?}, non-f32 {:?}",
            c.missing, c.extra, c.shape_mismatches, c.non_f32
        )));
    }
    let expected = resnet::manifest(IMAGENET_CLASSES);
    let order_ok = manifest.tensors.len() == expected.len()
        && manifest.tensors.iter().zip(&expected).all(|(t, e)| t.name == e.name && t.shape == e.shape);
    if !order_ok {
        return Err(Error::InvalidInput("manifest tensor list is not in canonical order".into()));
    }
    if manifest.dtype != "float32" {
        return Err(Error::InvalidInput(format!("manifest dtype `{}`, expected float32", manifest.dtype)));
    }
    if manifest.parameter_count != IMAGENET_PARAMETER_COUNT {
        return Err(Error::InvalidInput(format!(
            "manifest parameter count {} != {}",
            manifest.parameter_count, IMAGENET_PARAMETER_COUNT
        )));
    }
    let digest = archive.digest();
    if manifest.content_digest != digest {
        return Err(Error::InvalidInput(format!(
            "content digest {} does not match archive {}",
            manifest.content_digest, digest
        )));
    }
    Ok(())
}

/// Full 1000-way ResNet-18 with every tensor taken from `archive`.
pub fn load_imagenet_resnet(archive: &TensorArchive) -> Result<ParamStore<f32>> {
    let mut store = resnet::init_params::<f32>(IMAGENET_CLASSES, &mut ChaCha8Rng::seed_from_u64(0));
    let names: Vec<String> = resnet::manifest(IMAGENET_CLASSES).into_iter().map(|e| e.name).collect();
    store.load_from(archive, &names)?;
    Ok(store)
}

/// Largest |logit difference| between the local forward pass on the
/// fixture input and the fixture's reference logits.
pub fn fixture_max_abs_error(store: &ParamStore<f32>, fixture: &TensorArchive) -> Result<f64> {
    let get = |k: &str| fixture.get(k).ok_or_else(|| Error::MissingTensor(k.into()));
    let input: Array<f32> = get("input")?.to_array();
    let reference: Array<f64> = get("logits")?.to_array();
    if input.ndim() != 4 || input.shape()[1] != 3 {
        return Err(Error::shape("fixture_max_abs_error", format!("input {:?}, expected [N, 3, H, W]", input.shape())));
    }
    let mut g = Graph::new(false, 0);
    let x = g.input(input, false);
    let y = resnet::forward(&mut g, store, x)?;
    let logits = g.value(y);
    if logits.shape() != reference.shape() {
        return Err(Error::shape(
            "fixture_max_abs_error",
            format!("logits {:?} vs reference {:?}", logits.shape(), reference.shape()),
        ));
    }
    Ok(logits
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (*a as f64 - b).abs())
        .fold(0.0, f64::max))
}

/// Loads `<dir>/<archive>`, `<dir>/manifest.json` and the fixture, runs
/// every check, and returns the fixture error.
pub fn verify_export_dir(dir: &Path, archive_name: &str) -> Result<f64> {
    let archive = load_archive(dir.join(archive_name))?;
    let manifest: ExportManifest = serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    verify_export(&archive, &manifest)?;
    let fixture_name = manifest
        .fixture
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("manifest names no fixture".into()))?;
    let fixture = load_archive(dir.join(fixture_name))?;
    let store = load_imagenet_resnet(&archive)?;
    let err = fixture_max_abs_error(&store, &fixture)?;
    if err > FIXTURE_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "forward pass differs from fixture logits by {:.3e} (tolerance {:.0e})",
            err, FIXTURE_TOLERANCE
        )));
    }
    Ok(err)
}
