//! Portable weight container: `<name>.manifest.json` describing every tensor plus
//! `<name>.weights.bin` holding the raw little-endian `f32` values back to back.
//!
//! Layouts: conv weights are `(kh, kw, cin, cout)`, dense weights `(inputs, units)`,
//! biases `(units)`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer: String,
    pub param: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length in the blob.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub dtype: String,
    pub endianness: String,
    pub entries: Vec<ManifestEntry>,
    /// Architecture that produced the weights, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    /// Class names in label order, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<String>>,
}

impl WeightManifest {
    fn check(&self, blob_len: u64) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Weights(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.dtype != "f32" || self.endianness != "little" {
            return Err(Error::Weights(format!(
                "unsupported encoding {}/{}",
                self.dtype, self.endianness
            )));
        }
        let mut end = 0u64;
        for e in &self.entries {
            let want = e.shape.iter().product::<usize>() as u64 * 4;
            if e.length != want {
                return Err(Error::Weights(format!(
                    "{}.{}: length {} does not match shape {:?}",
                    e.layer, e.param, e.length, e.shape
                )));
            }
            if e.offset < end {
                return Err(Error::Weights(format!(
                    "{}.{}: offset {} overlaps the previous entry",
                    e.layer, e.param, e.offset
                )));
            }
            end = e.offset + e.length;
        }
        let total: u64 = self.entries.iter().map(|e| e.length).sum();
        if blob_len != total || end > blob_len {
            return Err(Error::Weights(format!(
                "blob holds {blob_len} bytes but the manifest describes {total} (truncated or padded)"
            )));
        }
        Ok(())
    }
}

/// Paths of the manifest and blob for a container prefix such as `ckpt/final`.
pub fn container_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let s = prefix.to_string_lossy();
    let base = s
        .strip_suffix(".manifest.json")
        .or_else(|| s.strip_suffix(".weights.bin"))
        .unwrap_or(&s);
    (
        PathBuf::from(format!("{base}.manifest.json")),
        PathBuf::from(format!("{base}.weights.bin")),
    )
}

/// Optional metadata stored alongside the tensors.
#[derive(Clone, Default)]
pub struct SaveOptions<'a> {
    pub spec: Option<&'a ModelSpec>,
    pub classes: Option<&'a [String]>,
    /// Only layers accepted by this filter are written.
    pub only: Option<&'a dyn Fn(&crate::layers::Layer) -> bool>,
}

pub fn save_weights(model: &Model, prefix: &Path) -> Result<()> {
    save_weights_with(model, prefix, &SaveOptions::default())
}

pub fn save_weights_with(model: &Model, prefix: &Path, opts: &SaveOptions<'_>) -> Result<()> {
    let (manifest_path, blob_path) = container_paths(prefix);
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for layer in &model.layers {
        if opts.only.is_some_and(|keep| !keep(layer)) {
            continue;
        }
        for p in layer.params() {
            let offset = blob.len() as u64;
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(ManifestEntry {
                layer: layer.name.clone(),
                param: p.name.to_string(),
                shape: p.value.shape().to_vec(),
                offset,
                length: blob.len() as u64 - offset,
            });
        }
    }
    let manifest = WeightManifest {
        format_version: FORMAT_VERSION,
        dtype: "f32".into(),
        endianness: "little".into(),
        entries,
        model: opts.spec.cloned(),
        classes: opts.classes.map(<[String]>::to_vec),
    };
    if let Some(dir) = manifest_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

pub fn read_manifest(prefix: &Path) -> Result<WeightManifest> {
    let (manifest_path, _) = container_paths(prefix);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Fills model parameters by `(layer, param)` name. Parameters missing from the
/// file are an error unless `allow_partial`, in which case they keep their
/// current values.
pub fn load_weights(model: &mut Model, prefix: &Path, allow_partial: bool) -> Result<WeightManifest> {
    let (_, blob_path) = container_paths(prefix);
    let manifest = read_manifest(prefix)?;
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    manifest.check(blob.len() as u64)?;

    // Validate everything before writing so a failed load leaves the model untouched.
    let mut plan = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let li = model
            .layers
            .iter()
            .position(|l| l.name == e.layer)
            .ok_or_else(|| Error::Weights(format!("unknown layer {:?}", e.layer)))?;
        let layer = &model.layers[li];
        let pi = layer
            .params()
            .iter()
            .position(|p| p.name == e.param)
            .ok_or_else(|| Error::Weights(format!("layer {:?} has no parameter {:?}", e.layer, e.param)))?;
        let expected = layer.params()[pi].value.shape().to_vec();
        if expected != e.shape {
            return Err(Error::Shape(format!(
                "{}.{}: file has shape {:?}, model expects {:?} (layout kh,kw,cin,cout / in,out)",
                e.layer, e.param, e.shape, expected
            )));
        }
        plan.push((li, pi, e));
    }
    if !allow_partial {
        for layer in &model.layers {
            for p in layer.params() {
                if !manifest
                    .entries
                    .iter()
                    .any(|e| e.layer == layer.name && e.param == p.name)
                {
                    return Err(Error::Weights(format!(
                        "{}.{} missing from file (use allow-partial to keep its initialization)",
                        layer.name, p.name
                    )));
                }
            }
        }
    }
    for (li, pi, e) in plan {
        let bytes = &blob[e.offset as usize..(e.offset + e.length) as usize];
        let mut params = model.layers[li].params_mut();
        for (dst, chunk) in params[pi].value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(manifest)
}

/// Rebuilds a model from a container that records its [`ModelSpec`].
pub fn load_model(prefix: &Path, seed: u64) -> Result<(Model, WeightManifest)> {
    let manifest = read_manifest(prefix)?;
    let spec = manifest.model.clone().ok_or_else(|| {
        Error::Weights("manifest does not record a model spec; pass the architecture explicitly".into())
    })?;
    let mut model = crate::model::build(&spec, seed)?;
    let manifest = load_weights(&mut model, prefix, false)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build;

    fn all_params(m: &Model) -> Vec<u32> {
        m.layers
            .iter()
            .flat_map(|l| l.params())
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(32, 1);
        let m = build::<f32>(&spec, 3).unwrap();
        let prefix = dir.path().join("w");
        save_weights(&m, &prefix).unwrap();
        let mut fresh = build::<f32>(&spec, 99).unwrap();
        assert_ne!(all_params(&fresh), all_params(&m));
        load_weights(&mut fresh, &prefix, false).unwrap();
        assert_eq!(all_params(&fresh), all_params(&m));
    }

    #[test]
    fn transposed_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(32, 1);
        let m = build::<f32>(&spec, 3).unwrap();
        let prefix = dir.path().join("w");
        save_weights(&m, &prefix).unwrap();
        let (mp, _) = container_paths(&prefix);
        let mut manifest = read_manifest(&prefix).unwrap();
        assert_eq!(manifest.entries[0].shape, vec![3, 3, 3, 64]);
        manifest.entries[0].shape = vec![64, 3, 3, 3];
        fs::write(&mp, serde_json::to_string(&manifest).unwrap()).unwrap();
        let mut target = build::<f32>(&spec, 3).unwrap();
        let err = load_weights(&mut target, &prefix, false).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Shape(_)));
        assert!(msg.contains("[64, 3, 3, 3]") && msg.contains("[3, 3, 3, 64]"), "{msg}");
    }

    #[test]
    fn truncated_blob_and_unknown_layer() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(32, 1);
        let m = build::<f32>(&spec, 3).unwrap();
        let prefix = dir.path().join("w");
        save_weights(&m, &prefix).unwrap();
        let (mp, bp) = container_paths(&prefix);

        let blob = fs::read(&bp).unwrap();
        fs::write(&bp, &blob[..blob.len() - 4]).unwrap();
        let mut target = build::<f32>(&spec, 3).unwrap();
        assert!(matches!(load_weights(&mut target, &prefix, false), Err(Error::Weights(_))));
        fs::write(&bp, &blob).unwrap();

        let mut manifest = read_manifest(&prefix).unwrap();
        manifest.entries[0].layer = "nope".into();
        fs::write(&mp, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_weights(&mut target, &prefix, false).unwrap_err();
        assert!(err.to_string().contains("unknown layer"), "{err}");
    }

    #[test]
    fn partial_requires_flag() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(32, 1);
        let m = build::<f32>(&spec, 3).unwrap();
        let prefix = dir.path().join("base");
        let base_only = |l: &crate::layers::Layer| l.block.is_some();
        save_weights_with(
            &m,
            &prefix,
            &SaveOptions {
                only: Some(&base_only),
                ..Default::default()
            },
        )
        .unwrap();
        let mut target = build::<f32>(&spec, 5).unwrap();
        assert!(load_weights(&mut target, &prefix, false).is_err());
        load_weights(&mut target, &prefix, true).unwrap();
        let fresh = build::<f32>(&spec, 5).unwrap();
        for (a, (b, c)) in target.layers.iter().zip(fresh.layers.iter().zip(&m.layers)) {
            let expect = if a.block.is_some() { c } else { b };
            for (pa, pe) in a.params().iter().zip(expect.params()) {
                assert_eq!(pa.value, pe.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn metadata_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::new(32, 1);
        let m = build::<f32>(&spec, 3).unwrap();
        let classes: Vec<String> = (0..11).map(|i| format!("c{i}")).collect();
        let prefix = dir.path().join("w");
        save_weights_with(
            &m,
            &prefix,
            &SaveOptions {
                spec: Some(&spec),
                classes: Some(&classes),
                only: None,
            },
        )
        .unwrap();
        let (loaded, manifest) = load_model(&prefix, 0).unwrap();
        assert_eq!(all_params(&loaded), all_params(&m));
        assert_eq!(manifest.classes.unwrap(), classes);
    }
}
