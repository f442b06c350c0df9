//! On-disk feature container: `manifest.json` plus `features.bin`.
//!
//! The binary file is nothing but concatenated row-major little-endian `f32`
//! matrices, no header, no padding; the manifest carries byte offsets and
//! shapes. A tensor key absent from the manifest means the block is absent
//! (presence false). Round trips preserve every bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{split_of_id, ClipSample, Corpus, FeatureKey, Modality};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const FEATURES_NAME: &str = "features.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    offset: u64,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    persons: usize,
    segments: usize,
    target_person: usize,
    target_segment: usize,
    labels: Vec<u8>,
    speaker_flags: Vec<Vec<bool>>,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    version: u32,
    zeta: usize,
    dims: BTreeMap<String, usize>,
    seq_lens: BTreeMap<String, usize>,
    samples: Vec<ManifestSample>,
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    corpus.validate()?;
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut samples = Vec::with_capacity(corpus.samples.len());
    for sample in &corpus.samples {
        let mut tensors = BTreeMap::new();
        for (key, block) in &sample.features {
            let offset = blob.len() as u64;
            for &v in block.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.insert(
                key.to_string(),
                TensorEntry {
                    offset,
                    rows: block.nrows(),
                    cols: block.ncols(),
                },
            );
        }
        samples.push(ManifestSample {
            id: sample.id.clone(),
            persons: sample.persons,
            segments: sample.segments,
            target_person: sample.target_person,
            target_segment: sample.target_segment,
            labels: sample.labels.clone(),
            speaker_flags: sample.speaker_flags.clone(),
            tensors,
        });
    }
    let doc = ManifestDoc {
        version: FORMAT_VERSION,
        zeta: corpus.zeta,
        dims: corpus.dims.iter().map(|(m, &d)| (m.to_string(), d)).collect(),
        seq_lens: corpus
            .seq_lens
            .iter()
            .map(|(m, &l)| (m.to_string(), l))
            .collect(),
        samples,
    };
    let json = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join(FEATURES_NAME), &blob)?;
    fs::write(dir.join(MANIFEST_NAME), json.as_bytes())?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", manifest_path.display())))?;
    let doc: ManifestDoc = serde_json::from_str(&json)
        .map_err(|e| Error::data(format!("malformed manifest: {e}")))?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::data(format!(
            "unsupported container version {} (expected {FORMAT_VERSION})",
            doc.version
        )));
    }
    let blob = fs::read(dir.join(FEATURES_NAME))
        .map_err(|e| Error::data(format!("cannot read feature payload: {e}")))?;

    let parse_dim_map = |raw: &BTreeMap<String, usize>| -> Result<BTreeMap<Modality, usize>> {
        raw.iter()
            .map(|(name, &v)| Ok((name.parse::<Modality>()?, v)))
            .collect()
    };
    let dims = parse_dim_map(&doc.dims)?;
    let seq_lens = parse_dim_map(&doc.seq_lens)?;

    let mut samples = Vec::with_capacity(doc.samples.len());
    let mut split_tags = BTreeMap::new();
    for raw in doc.samples {
        let mut features = BTreeMap::new();
        for (key_str, entry) in &raw.tensors {
            let key: FeatureKey = key_str.parse()?;
            let bytes = entry
                .rows
                .checked_mul(entry.cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::data(format!("tensor {key_str} shape overflow")))?;
            let offset = entry.offset as usize;
            let end = offset
                .checked_add(bytes)
                .ok_or_else(|| Error::data(format!("tensor {key_str} offset overflow")))?;
            if end > blob.len() {
                return Err(Error::data(format!(
                    "tensor {key_str} spans bytes {offset}..{end} but payload is {} bytes",
                    blob.len()
                )));
            }
            let mut block = Array2::<f32>::zeros((entry.rows, entry.cols));
            for (i, chunk) in blob[offset..end].chunks_exact(4).enumerate() {
                block[(i / entry.cols, i % entry.cols)] =
                    f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
            features.insert(key, block);
        }
        let mut sample = ClipSample {
            id: raw.id,
            persons: raw.persons,
            segments: raw.segments,
            target_person: raw.target_person,
            target_segment: raw.target_segment,
            labels: raw.labels,
            speaker_flags: raw.speaker_flags,
            features,
            presence: BTreeMap::new(),
        };
        let modalities: Vec<Modality> = dims.keys().copied().collect();
        sample.rebuild_presence(&modalities);
        split_tags.insert(sample.id.clone(), split_of_id(&sample.id));
        samples.push(sample);
    }

    let corpus = Corpus {
        samples,
        dims,
        seq_lens,
        zeta: doc.zeta,
        split_tags,
    };
    corpus.validate()?;
    Ok(corpus)
}
