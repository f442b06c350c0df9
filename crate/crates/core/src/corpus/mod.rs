//! Data model for multi-party clips, modality-dropout policies and batching.
//!
//! A clip sample covers `T` persons over `R` semantic segments. Each
//! `(modality, person, segment)` cell either carries an `l_m × d_m` feature
//! block or is absent; absence is explicit (presence mask), never encoded as
//! zeros. Feature payloads are `f32` so the on-disk container round-trips
//! bit for bit.

pub mod gen;
pub mod io;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{context_rng, fnv1a64, splitmix64};

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
    Acoustic,
    Personality,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Visual,
        Modality::Textual,
        Modality::Acoustic,
        Modality::Personality,
    ];

    /// The three content modalities, in fusion order.
    pub const CONTENT: [Modality; 3] = [Modality::Visual, Modality::Textual, Modality::Acoustic];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
            Modality::Acoustic => "acoustic",
            Modality::Personality => "personality",
        }
    }

    /// Index within [`Modality::CONTENT`]; personality has none.
    pub fn content_index(&self) -> Option<usize> {
        Modality::CONTENT.iter().position(|m| m == self)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Modality::Visual),
            "textual" => Ok(Modality::Textual),
            "acoustic" => Ok(Modality::Acoustic),
            "personality" => Ok(Modality::Personality),
            other => Err(Error::data(format!("unknown modality {other:?}"))),
        }
    }
}

/// Ordering of the content modalities used wherever the pipeline assembles
/// or rotates cross-modal structures. Must be a permutation of
/// [`Modality::CONTENT`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionOrder(pub [Modality; 3]);

impl Default for FusionOrder {
    fn default() -> Self {
        FusionOrder(Modality::CONTENT)
    }
}

impl FusionOrder {
    pub fn validate(&self) -> Result<()> {
        for m in Modality::CONTENT {
            if !self.0.contains(&m) {
                return Err(Error::config(format!(
                    "fusion order {:?} is not a permutation of the content modalities",
                    self.0
                )));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, m: Modality) -> Option<usize> {
        self.0.iter().position(|&x| x == m)
    }

    /// The other two modalities, in this order, for assembling cross-modal
    /// inputs of `m`.
    pub fn partners(&self, m: Modality) -> Result<(Modality, Modality)> {
        self.validate()?;
        if self.index_of(m).is_none() {
            return Err(Error::config(format!("{m} not part of the fusion order")));
        }
        let rest: Vec<Modality> = self.0.iter().copied().filter(|&x| x != m).collect();
        Ok((rest[0], rest[1]))
    }
}

/// Address of one feature block inside a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureKey {
    pub modality: Modality,
    pub person: usize,
    pub segment: usize,
}

impl FeatureKey {
    pub fn new(modality: Modality, person: usize, segment: usize) -> Self {
        FeatureKey {
            modality,
            person,
            segment,
        }
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.modality, self.person, self.segment)
    }
}

impl FromStr for FeatureKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('/');
        let (Some(m), Some(p), Some(seg), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::data(format!("malformed tensor key {s:?}")));
        };
        Ok(FeatureKey {
            modality: m.parse()?,
            person: p
                .parse()
                .map_err(|_| Error::data(format!("bad person index in key {s:?}")))?,
            segment: seg
                .parse()
                .map_err(|_| Error::data(format!("bad segment index in key {s:?}")))?,
        })
    }
}

/// One multi-party clip with its features, labels and speaker structure.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub id: String,
    /// Person count T.
    pub persons: usize,
    /// Segment count R.
    pub segments: usize,
    pub target_person: usize,
    pub target_segment: usize,
    /// Multi-hot labels, length zeta, entries 0 or 1.
    pub labels: Vec<u8>,
    /// `speaker_flags[person][segment]`.
    pub speaker_flags: Vec<Vec<bool>>,
    pub features: BTreeMap<FeatureKey, Array2<f32>>,
    pub presence: BTreeMap<FeatureKey, bool>,
}

impl ClipSample {
    pub fn is_present(&self, key: &FeatureKey) -> bool {
        self.features.contains_key(key)
    }

    /// Rebuild the presence map from the feature map over the full key grid.
    pub fn rebuild_presence(&mut self, modalities: &[Modality]) {
        self.presence.clear();
        for &m in modalities {
            for p in 0..self.persons {
                for s in 0..self.segments {
                    let key = FeatureKey::new(m, p, s);
                    self.presence.insert(key, self.features.contains_key(&key));
                }
            }
        }
    }

    fn remove_block(&mut self, key: FeatureKey) {
        self.features.remove(&key);
        self.presence.insert(key, false);
    }

    /// Does the target person retain at least one present modality block?
    pub fn target_has_any_modality(&self) -> bool {
        self.features
            .keys()
            .any(|k| k.person == self.target_person)
    }

    pub fn validate(&self, dims: &BTreeMap<Modality, usize>, seq_lens: &BTreeMap<Modality, usize>, zeta: usize) -> Result<()> {
        if self.persons == 0 || self.segments == 0 {
            return Err(Error::data(format!("sample {}: empty grid", self.id)));
        }
        if self.target_person >= self.persons || self.target_segment >= self.segments {
            return Err(Error::data(format!("sample {}: target out of range", self.id)));
        }
        if self.labels.len() != zeta || self.labels.iter().any(|&l| l > 1) {
            return Err(Error::data(format!("sample {}: bad label vector", self.id)));
        }
        if self.speaker_flags.len() != self.persons
            || self.speaker_flags.iter().any(|r| r.len() != self.segments)
        {
            return Err(Error::data(format!("sample {}: speaker flag shape", self.id)));
        }
        for (key, mat) in &self.features {
            if key.person >= self.persons || key.segment >= self.segments {
                return Err(Error::data(format!("sample {}: key {key} out of range", self.id)));
            }
            let (Some(&d), Some(&l)) = (dims.get(&key.modality), seq_lens.get(&key.modality))
            else {
                return Err(Error::data(format!(
                    "sample {}: modality {} missing from corpus dims",
                    self.id, key.modality
                )));
            };
            if mat.dim() != (l, d) {
                return Err(Error::data(format!(
                    "sample {}: block {key} has shape {:?}, expected ({l}, {d})",
                    self.id,
                    mat.dim()
                )));
            }
            if self.presence.get(key) != Some(&true) {
                return Err(Error::data(format!(
                    "sample {}: block {key} present but presence mask disagrees",
                    self.id
                )));
            }
        }
        for (key, &flag) in &self.presence {
            if flag != self.features.contains_key(key) {
                return Err(Error::data(format!(
                    "sample {}: presence mask for {key} disagrees with features",
                    self.id
                )));
            }
        }
        // Personality must not vary across segments for one person.
        for p in 0..self.persons {
            let mut reference: Option<&Array2<f32>> = None;
            for s in 0..self.segments {
                let key = FeatureKey::new(Modality::Personality, p, s);
                if let Some(block) = self.features.get(&key) {
                    match reference {
                        None => reference = Some(block),
                        Some(r) if r == block => {}
                        Some(_) => {
                            return Err(Error::data(format!(
                                "sample {}: personality varies across segments for person {p}",
                                self.id
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

/// Split assignment is a pure function of the sample id (hash buckets
/// 80/10/10), so it survives any serialization without being stored.
pub fn split_of_id(id: &str) -> Split {
    match splitmix64(fnv1a64(id.as_bytes())) % 10 {
        0..=7 => Split::Train,
        8 => Split::Val,
        _ => Split::Test,
    }
}

/// An ordered set of clip samples with shared dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub samples: Vec<ClipSample>,
    /// Feature width d_m per modality.
    pub dims: BTreeMap<Modality, usize>,
    /// Sequence length l_m per modality.
    pub seq_lens: BTreeMap<Modality, usize>,
    pub zeta: usize,
    pub split_tags: BTreeMap<String, Split>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for sample in &self.samples {
            if !seen.insert(sample.id.as_str()) {
                return Err(Error::data(format!("duplicate sample id {}", sample.id)));
            }
            sample.validate(&self.dims, &self.seq_lens, self.zeta)?;
        }
        Ok(())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| self.split_tags.get(&s.id) == Some(&split))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_samples(&self, split: Split) -> Vec<&ClipSample> {
        self.split_indices(split)
            .into_iter()
            .map(|i| &self.samples[i])
            .collect()
    }

    /// Apply a dropout policy to every sample, producing a corpus whose
    /// missingness is baked in. Used to materialize incomplete-modality
    /// evaluation sets.
    pub fn with_dropout(&self, policy: &DropoutPolicy, seed: u64) -> Result<Corpus> {
        let mut out = self.clone();
        for sample in &mut out.samples {
            drop_sample_modalities(sample, policy, seed)?;
        }
        Ok(out)
    }
}

/// Training-time missingness simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutPolicy {
    /// Probability that a target person who does not speak in the target
    /// segment loses acoustic and textual input.
    pub p_nonspeaker_drop: f64,
    /// Independent per-modality drop probability for the target person.
    pub p_random_drop: f64,
    /// Modalities never dropped.
    pub protected: Vec<Modality>,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy {
            p_nonspeaker_drop: 0.0,
            p_random_drop: 0.0,
            protected: vec![Modality::Visual, Modality::Personality],
        }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_nonspeaker_drop", self.p_nonspeaker_drop),
            ("p_random_drop", self.p_random_drop),
        ] {
            if !(0.0..=1.0).contains(&p) || !p.is_finite() {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    pub fn is_protected(&self, m: Modality) -> bool {
        self.protected.contains(&m)
    }

    pub fn is_identity(&self) -> bool {
        self.p_nonspeaker_drop == 0.0 && self.p_random_drop == 0.0
    }
}

/// A slice of samples ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub samples: Vec<ClipSample>,
    pub dims: BTreeMap<Modality, usize>,
    pub seq_lens: BTreeMap<Modality, usize>,
    pub zeta: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Apply dropout to one sample in place. Coins are drawn from a stream keyed
/// by the sample id, so the outcome does not depend on batch composition.
fn drop_sample_modalities(sample: &mut ClipSample, policy: &DropoutPolicy, seed: u64) -> Result<()> {
    policy.validate()?;
    if policy.is_identity() {
        return Ok(());
    }
    let mut rng = context_rng(seed, &format!("dropout/{}", sample.id));
    let target = sample.target_person;

    let speaks_in_target = sample.speaker_flags[target][sample.target_segment];
    if !speaks_in_target && rng.random::<f64>() < policy.p_nonspeaker_drop {
        // A silent target loses speech-borne modalities in every segment
        // where they do not speak.
        for s in 0..sample.segments {
            if sample.speaker_flags[target][s] {
                continue;
            }
            for m in [Modality::Acoustic, Modality::Textual] {
                if !policy.is_protected(m) {
                    sample.remove_block(FeatureKey::new(m, target, s));
                }
            }
        }
    }

    for m in Modality::ALL {
        if policy.is_protected(m) {
            continue;
        }
        if rng.random::<f64>() < policy.p_random_drop {
            for s in 0..sample.segments {
                sample.remove_block(FeatureKey::new(m, target, s));
            }
        }
    }

    if !sample.target_has_any_modality() {
        return Err(Error::data(format!(
            "dropout left sample {} with no modality for its target person",
            sample.id
        )));
    }
    Ok(())
}

/// Apply a dropout policy to a batch. Deterministic given the seed.
pub fn apply_modality_dropout(batch: &Batch, policy: &DropoutPolicy, seed: u64) -> Result<Batch> {
    let mut out = batch.clone();
    for sample in &mut out.samples {
        drop_sample_modalities(sample, policy, seed)?;
    }
    Ok(out)
}

/// Deterministically shuffled batches over one split. The last batch may be
/// short; an empty split yields no batches.
pub fn batch_iter(corpus: &Corpus, split: Split, batch_size: usize, shuffle_seed: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut indices = corpus.split_indices(split);
    let mut rng = context_rng(shuffle_seed, "batch_iter");
    // Fisher-Yates
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
    indices
        .chunks(batch_size)
        .map(|chunk| Batch {
            samples: chunk.iter().map(|&i| corpus.samples[i].clone()).collect(),
            dims: corpus.dims.clone(),
            seq_lens: corpus.seq_lens.clone(),
            zeta: corpus.zeta,
        })
        .collect()
}
