//! JSON manifest + raw little-endian `f32` blob interchange format.
//!
//! An embedding export is two sibling files:
//!
//! * `<stem>.json`, the manifest ([`InterchangeManifest`]);
//! * `<stem>.f32`, N·D row-major little-endian IEEE-754 single floats.
//!
//! Manifest fields:
//!
//! | field | meaning |
//! |---|---|
//! | `format` | always `"tebopt-embedding"` |
//! | `version` | schema version, currently 1 |
//! | `n`, `d` | rows (max tokens) and columns (embedding dim) |
//! | `dtype` | always `"f32le"` |
//! | `tokens` | N token strings, special tokens included |
//! | `sot_index` | always 0 |
//! | `eot_index` | position of the end token |
//! | `pad_range` | half-open `[start, end)` pad positions |
//! | `critical_set` | object token indices O |
//! | `object_names` | names aligned with `critical_set` |
//! | `effective_tokens` | m, tokens strictly between sot and eot |
//! | `m_convention` | how m was counted (pads never included) |
//! | `provenance` | `"toy"` or `"external"` |
//! | `blob` | blob file name, relative to the manifest |
//!
//! Values are stored as `f32`; entries are rounded to nearest on write, so a
//! matrix whose entries are already `f32`-representable round-trips exactly.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, PromptLayout};
use crate::error::{Error, Result};

pub const EMBEDDING_FORMAT: &str = "tebopt-embedding";
pub const DTYPE_F32LE: &str = "f32le";
pub const BLOB_EXTENSION: &str = "f32";
pub const M_CONVENTION: &str = "between-sot-and-eot-excluding-pads";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Toy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterchangeManifest {
    pub format: String,
    pub version: u32,
    pub n: usize,
    pub d: usize,
    pub dtype: String,
    pub tokens: Vec<String>,
    pub sot_index: usize,
    pub eot_index: usize,
    pub pad_range: [usize; 2],
    pub critical_set: Vec<usize>,
    pub object_names: Vec<String>,
    pub effective_tokens: usize,
    #[serde(default = "default_convention")]
    pub m_convention: String,
    pub provenance: Provenance,
    pub blob: String,
}

fn default_convention() -> String {
    M_CONVENTION.to_string()
}

impl InterchangeManifest {
    pub fn for_matrix(mat: &EmbeddingMatrix, provenance: Provenance, blob: String) -> Self {
        let l = mat.layout();
        let pads = l.pad_range();
        Self {
            format: EMBEDDING_FORMAT.into(),
            version: 1,
            n: mat.n(),
            d: mat.d(),
            dtype: DTYPE_F32LE.into(),
            tokens: l.tokens().to_vec(),
            sot_index: 0,
            eot_index: l.eot_index(),
            pad_range: [pads.start, pads.end],
            critical_set: l.critical().to_vec(),
            object_names: l.object_names().to_vec(),
            effective_tokens: l.m(),
            m_convention: M_CONVENTION.into(),
            provenance,
            blob,
        }
    }

    fn validate(&self) -> Result<PromptLayout> {
        if self.format != EMBEDDING_FORMAT {
            return Err(Error::Manifest(format!("unexpected format {:?}", self.format)));
        }
        if self.dtype != DTYPE_F32LE {
            return Err(Error::Dtype(self.dtype.clone()));
        }
        if self.tokens.len() != self.n {
            return Err(Error::Manifest(format!("{} tokens listed for N = {}", self.tokens.len(), self.n)));
        }
        if self.sot_index != 0 {
            return Err(Error::Manifest(format!("sot_index must be 0, got {}", self.sot_index)));
        }
        let layout = PromptLayout::new(
            self.tokens.clone(),
            self.eot_index,
            self.critical_set.clone(),
            self.object_names.clone(),
        )
        .map_err(|e| Error::Manifest(e.to_string()))?;
        let pads = layout.pad_range();
        if self.pad_range != [pads.start, pads.end] {
            return Err(Error::Manifest(format!(
                "pad_range {:?} inconsistent with eot {} and N {}",
                self.pad_range, self.eot_index, self.n
            )));
        }
        if self.effective_tokens != layout.m() {
            return Err(Error::Manifest(format!(
                "effective_tokens {} but layout implies m = {}",
                self.effective_tokens,
                layout.m()
            )));
        }
        Ok(layout)
    }
}

/// Path of the blob paired with `manifest_path`: same stem, `.f32` extension.
pub fn blob_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension(BLOB_EXTENSION)
}

pub(crate) fn encode_f32le(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

pub(crate) fn decode_f32le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect()
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

pub(crate) fn blob_file_name(manifest_path: &Path) -> String {
    blob_path_for(manifest_path)
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("embedding.{BLOB_EXTENSION}"))
}

pub(crate) fn resolve_blob(manifest_path: &Path, blob: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(blob)
}

/// Write `mat` as `<path>` (manifest) plus the sibling `.f32` blob.
pub fn write_embeddings(mat: &EmbeddingMatrix, path: &Path, provenance: Provenance) -> Result<()> {
    let blob_name = blob_file_name(path);
    let manifest = InterchangeManifest::for_matrix(mat, provenance, blob_name.clone());
    let bytes = encode_f32le(mat.data().iter().copied());
    let blob = resolve_blob(path, &blob_name);
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    write_json(path, &manifest)
}

/// Read a manifest/blob pair, validating every manifest invariant.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingMatrix, InterchangeManifest)> {
    let manifest: InterchangeManifest = read_json(path)?;
    let layout = manifest.validate()?;
    let blob = resolve_blob(path, &manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let expected = manifest.n * manifest.d * 4;
    if bytes.len() != expected {
        return Err(Error::BlobLength { expected, found: bytes.len() });
    }
    let data = Array2::from_shape_vec((manifest.n, manifest.d), decode_f32le(&bytes))
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mat = EmbeddingMatrix::new(data, layout)?;
    Ok((mat, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EOT, PAD, SOT};
    use proptest::prelude::*;

    fn layout(n: usize) -> PromptLayout {
        let mut tokens: Vec<String> = [SOT, "a", "cat", "and", "a", "dog", EOT].iter().map(|s| s.to_string()).collect();
        tokens.resize(n, PAD.into());
        PromptLayout::new(tokens, 6, vec![2, 5], vec!["cat".into(), "dog".into()]).unwrap()
    }

    fn matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = crate::rng::stream(seed, &[]);
        let vals: Vec<f64> = crate::rng::gaussian_vec(&mut rng, n * d, 1.0)
            .into_iter()
            .map(|v| f64::from(v as f32))
            .collect();
        EmbeddingMatrix::new(Array2::from_shape_vec((n, d), vals).unwrap(), layout(n)).unwrap()
    }

    #[test]
    fn clip_sized_manifest_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.json");
        let mat = matrix(77, 768, 3);
        write_embeddings(&mat, &path, Provenance::External).unwrap();
        assert_eq!(fs::metadata(dir.path().join("clip.f32")).unwrap().len(), 77 * 768 * 4);
        let (back, manifest) = read_embeddings(&path).unwrap();
        assert_eq!((manifest.n, manifest.d), (77, 768));
        assert_eq!(back, mat);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        write_embeddings(&matrix(8, 4, 1), &path, Provenance::Toy).unwrap();
        let blob = dir.path().join("e.f32");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(Error::BlobLength { expected: 128, found: 124 })
        ));
    }

    #[test]
    fn dtype_and_manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        write_embeddings(&matrix(8, 4, 1), &path, Provenance::Toy).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"f32le\"", "\"f16le\"")).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Dtype(_))));
        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Manifest(_))));
        fs::write(&path, text.replace("\"effective_tokens\": 5", "\"effective_tokens\": 6")).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Manifest(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), n in 7usize..20, d in 1usize..12) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.json");
            let mat = matrix(n, d, seed);
            write_embeddings(&mat, &path, Provenance::Toy).unwrap();
            let (back, _) = read_embeddings(&path).unwrap();
            for (a, b) in mat.data().iter().zip(back.data().iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
