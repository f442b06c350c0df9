//! Synthetic multi-party corpus generator.
//!
//! Every person in a clip carries a latent common vector `c` plus one
//! specific vector `s^m` per content modality. Feature rows are
//! `A^m·c + B^m·s^m + noise` under fixed, seed-derived projections. Each
//! content modality is blind to one third of the common coordinates
//! (coordinate `q` is hidden from content modality `q mod 3`), so no single
//! modality suffices to recover the labels and fusion is genuinely required.
//!
//! Labels threshold linear functionals of the target person's common vector;
//! optionally one label is tied to a single modality's specific vector
//! instead, giving a known ground truth for modality-label attribution.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{context_rng, standard_normal};

use super::{split_of_id, ClipSample, Corpus, FeatureKey, Modality};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_samples: usize,
    /// Person count T.
    pub persons: usize,
    /// Segment count R.
    pub segments: usize,
    pub zeta: usize,
    /// Latent dimensionality shared across modalities.
    pub d_common: usize,
    /// Latent dimensionality private to each content modality.
    pub d_specific: BTreeMap<Modality, usize>,
    /// Output feature width per modality.
    pub dims: BTreeMap<Modality, usize>,
    /// Rows per feature block per modality.
    pub seq_lens: BTreeMap<Modality, usize>,
    pub noise_std: f64,
    /// Per-label decision thresholds on the latent functional.
    pub label_thresholds: Vec<f64>,
    /// Tie one label to one content modality's specific vector.
    pub modality_tied_label: Option<(usize, Modality)>,
    /// Permit all-zero label vectors; when false the generator redraws.
    pub allow_neutral: bool,
    pub seed: u64,
}

impl GenConfig {
    /// Small configuration that exercises every mechanism: 2 persons,
    /// 2 segments, 6 labels, last label tied to the acoustic modality.
    pub fn desk_default(n_samples: usize, seed: u64) -> Self {
        let zeta = 6;
        let mut d_specific = BTreeMap::new();
        let mut dims = BTreeMap::new();
        let mut seq_lens = BTreeMap::new();
        for m in Modality::CONTENT {
            d_specific.insert(m, 4);
            dims.insert(m, 12);
            seq_lens.insert(m, 2);
        }
        dims.insert(Modality::Personality, 8);
        seq_lens.insert(Modality::Personality, 1);
        GenConfig {
            n_samples,
            persons: 2,
            segments: 2,
            zeta,
            d_common: 8,
            d_specific,
            dims,
            seq_lens,
            noise_std: 0.05,
            label_thresholds: vec![0.0; zeta],
            modality_tied_label: Some((zeta - 1, Modality::Acoustic)),
            allow_neutral: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.persons == 0 || self.segments == 0 || self.zeta == 0 || self.d_common == 0 {
            return Err(Error::config("counts must be at least 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        if self.label_thresholds.len() != self.zeta {
            return Err(Error::config(format!(
                "expected {} label thresholds, got {}",
                self.zeta,
                self.label_thresholds.len()
            )));
        }
        for m in Modality::CONTENT {
            if self.d_specific.get(&m).copied().unwrap_or(0) == 0 {
                return Err(Error::config(format!("d_specific missing for {m}")));
            }
        }
        for m in Modality::ALL {
            if self.dims.get(&m).copied().unwrap_or(0) == 0 {
                return Err(Error::config(format!("dims missing for {m}")));
            }
            if self.seq_lens.get(&m).copied().unwrap_or(0) == 0 {
                return Err(Error::config(format!("seq_lens missing for {m}")));
            }
        }
        if let Some((label, modality)) = self.modality_tied_label {
            if label >= self.zeta {
                return Err(Error::config(format!(
                    "tied label index {label} out of range for zeta {}",
                    self.zeta
                )));
            }
            if modality.content_index().is_none() {
                return Err(Error::config("tied label must reference a content modality"));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: GenConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid generator config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::desk_default(2000, 0)
    }
}

/// Latents recorded during generation, for oracle-side verification.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    /// Common latents, one row per person.
    pub common: Array2<f64>,
    /// Specific latents per content modality, one row per person.
    pub specific: BTreeMap<Modality, Array2<f64>>,
}

/// The fixed generative maps plus per-sample latents.
#[derive(Clone, Debug)]
pub struct GenTrace {
    /// Masked common projections `A^m` (`d_m × d_common`); hidden coordinates
    /// appear as zero columns.
    pub proj_common: BTreeMap<Modality, Array2<f64>>,
    /// Specific projections `B^m` (`d_m × d_specific_m`).
    pub proj_specific: BTreeMap<Modality, Array2<f64>>,
    /// Unit-norm label functionals, one row per label.
    pub label_weights: Array2<f64>,
    /// Unit-norm functional for the tied label, over the tied modality's
    /// specific vector.
    pub tied_weight: Option<Array1<f64>>,
    pub samples: Vec<SampleTrace>,
}

impl GenTrace {
    /// Recompute a sample's labels from its stored latents.
    pub fn labels_from_latents(&self, cfg: &GenConfig, index: usize, target_person: usize) -> Vec<u8> {
        let trace = &self.samples[index];
        let c = trace.common.row(target_person);
        let mut labels = vec![0u8; cfg.zeta];
        for j in 0..cfg.zeta {
            let score = self.label_weights.row(j).dot(&c);
            labels[j] = (score > cfg.label_thresholds[j]) as u8;
        }
        if let Some((j, m)) = cfg.modality_tied_label {
            let s = trace.specific[&m].row(target_person);
            let score = self.tied_weight.as_ref().unwrap().dot(&s);
            labels[j] = (score > cfg.label_thresholds[j]) as u8;
        }
        labels
    }
}

fn unit_row(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let mut v = Array1::zeros(dim);
    loop {
        for x in v.iter_mut() {
            *x = standard_normal(rng);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            v /= norm;
            return v;
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| standard_normal(rng))
}

struct GenModel {
    proj_common: BTreeMap<Modality, Array2<f64>>,
    proj_specific: BTreeMap<Modality, Array2<f64>>,
    label_weights: Array2<f64>,
    tied_weight: Option<Array1<f64>>,
}

fn build_model(cfg: &GenConfig) -> GenModel {
    let mut proj_common = BTreeMap::new();
    let mut proj_specific = BTreeMap::new();
    for m in Modality::CONTENT {
        let d_m = cfg.dims[&m];
        let mut rng = context_rng(cfg.seed, &format!("gen/proj/{m}"));
        let mut a = gaussian_matrix(&mut rng, d_m, cfg.d_common);
        // Column scale keeps row variance near 1 regardless of latent width.
        a /= (cfg.d_common as f64).sqrt();
        let blind = m.content_index().unwrap();
        for q in 0..cfg.d_common {
            if q % Modality::CONTENT.len() == blind {
                a.column_mut(q).fill(0.0);
            }
        }
        let d_s = cfg.d_specific[&m];
        let mut b = gaussian_matrix(&mut rng, d_m, d_s);
        b /= (d_s as f64).sqrt();
        proj_common.insert(m, a);
        proj_specific.insert(m, b);
    }
    let mut wrng = context_rng(cfg.seed, "gen/label-weights");
    let mut label_weights = Array2::zeros((cfg.zeta, cfg.d_common));
    for j in 0..cfg.zeta {
        label_weights.row_mut(j).assign(&unit_row(&mut wrng, cfg.d_common));
    }
    let tied_weight = cfg.modality_tied_label.map(|(_, m)| {
        let mut trng = context_rng(cfg.seed, "gen/tied-weight");
        unit_row(&mut trng, cfg.d_specific[&m])
    });
    GenModel {
        proj_common,
        proj_specific,
        label_weights,
        tied_weight,
    }
}

fn labels_of(cfg: &GenConfig, model: &GenModel, c: &Array1<f64>, specific: &BTreeMap<Modality, Array1<f64>>) -> Vec<u8> {
    let mut labels = vec![0u8; cfg.zeta];
    for j in 0..cfg.zeta {
        let score = model.label_weights.row(j).dot(c);
        labels[j] = (score > cfg.label_thresholds[j]) as u8;
    }
    if let Some((j, m)) = cfg.modality_tied_label {
        let score = model.tied_weight.as_ref().unwrap().dot(&specific[&m]);
        labels[j] = (score > cfg.label_thresholds[j]) as u8;
    }
    labels
}

/// Generate a corpus and keep the latents that produced it.
pub fn generate_synthetic_traced(cfg: &GenConfig) -> Result<(Corpus, GenTrace)> {
    cfg.validate()?;
    let model = build_model(cfg);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut traces = Vec::with_capacity(cfg.n_samples);
    let mut split_tags = BTreeMap::new();

    for i in 0..cfg.n_samples {
        let id = format!("clip{i:05}");
        let mut rng = context_rng(cfg.seed, &format!("gen/sample/{id}"));
        let target_person = rng.random_range(0..cfg.persons);
        let target_segment = rng.random_range(0..cfg.segments);
        let mut speaker_flags = vec![vec![false; cfg.segments]; cfg.persons];
        for s in 0..cfg.segments {
            let speaker = rng.random_range(0..cfg.persons);
            speaker_flags[speaker][s] = true;
        }

        // Draw latents; redraw wholesale if neutral isn't allowed and the
        // target's labels all come out zero.
        let mut attempt = 0;
        let (common, specific, personality, labels) = loop {
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::data(format!(
                    "sample {id}: could not draw a non-neutral label vector in 1000 tries"
                )));
            }
            let mut common = Array2::zeros((cfg.persons, cfg.d_common));
            for p in 0..cfg.persons {
                for q in 0..cfg.d_common {
                    common[(p, q)] = standard_normal(&mut rng);
                }
            }
            let mut specific: BTreeMap<Modality, Array2<f64>> = BTreeMap::new();
            for m in Modality::CONTENT {
                let d_s = cfg.d_specific[&m];
                let mut mat = Array2::zeros((cfg.persons, d_s));
                for p in 0..cfg.persons {
                    for q in 0..d_s {
                        mat[(p, q)] = standard_normal(&mut rng);
                    }
                }
                specific.insert(m, mat);
            }
            let d_p = cfg.dims[&Modality::Personality];
            let l_p = cfg.seq_lens[&Modality::Personality];
            let mut personality = Vec::with_capacity(cfg.persons);
            for _ in 0..cfg.persons {
                personality.push(gaussian_matrix(&mut rng, l_p, d_p));
            }
            let c_t = common.row(target_person).to_owned();
            let s_t: BTreeMap<Modality, Array1<f64>> = Modality::CONTENT
                .iter()
                .map(|&m| (m, specific[&m].row(target_person).to_owned()))
                .collect();
            let labels = labels_of(cfg, &model, &c_t, &s_t);
            if cfg.allow_neutral || labels.iter().any(|&l| l == 1) {
                break (common, specific, personality, labels);
            }
        };

        let mut features = BTreeMap::new();
        for m in Modality::CONTENT {
            let l_m = cfg.seq_lens[&m];
            let d_m = cfg.dims[&m];
            let a = &model.proj_common[&m];
            let b = &model.proj_specific[&m];
            for p in 0..cfg.persons {
                let base = a.dot(&common.row(p)) + b.dot(&specific[&m].row(p));
                for s in 0..cfg.segments {
                    let mut block = Array2::zeros((l_m, d_m));
                    for row in 0..l_m {
                        for col in 0..d_m {
                            block[(row, col)] =
                                base[col] + cfg.noise_std * standard_normal(&mut rng);
                        }
                    }
                    features.insert(
                        FeatureKey::new(m, p, s),
                        block.mapv(|v| v as f32),
                    );
                }
            }
        }
        for p in 0..cfg.persons {
            let block = personality[p].mapv(|v| v as f32);
            for s in 0..cfg.segments {
                features.insert(FeatureKey::new(Modality::Personality, p, s), block.clone());
            }
        }

        let mut sample = ClipSample {
            id: id.clone(),
            persons: cfg.persons,
            segments: cfg.segments,
            target_person,
            target_segment,
            labels,
            speaker_flags,
            features,
            presence: BTreeMap::new(),
        };
        sample.rebuild_presence(&Modality::ALL);
        split_tags.insert(id, split_of_id(&sample.id));
        samples.push(sample);
        traces.push(SampleTrace {
            common,
            specific,
        });
    }

    let corpus = Corpus {
        samples,
        dims: cfg.dims.clone(),
        seq_lens: cfg.seq_lens.clone(),
        zeta: cfg.zeta,
        split_tags,
    };
    corpus.validate()?;
    let trace = GenTrace {
        proj_common: model.proj_common,
        proj_specific: model.proj_specific,
        label_weights: model.label_weights,
        tied_weight: model.tied_weight,
        samples: traces,
    };
    Ok((corpus, trace))
}

pub fn generate_synthetic(cfg: &GenConfig) -> Result<Corpus> {
    generate_synthetic_traced(cfg).map(|(c, _)| c)
}

/// Brute-force per-label positive rates: pushes `draws` fresh latents through
/// the same threshold rule the generator uses.
pub fn oracle_positive_rates(cfg: &GenConfig, draws: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    let model = build_model(cfg);
    let mut rng = context_rng(cfg.seed, "gen/oracle");
    let mut counts = vec![0usize; cfg.zeta];
    let mut kept = 0usize;
    while kept < draws {
        let mut c = Array1::zeros(cfg.d_common);
        for q in 0..cfg.d_common {
            c[q] = standard_normal(&mut rng);
        }
        let specific: BTreeMap<Modality, Array1<f64>> = Modality::CONTENT
            .iter()
            .map(|&m| {
                let d_s = cfg.d_specific[&m];
                let mut s = Array1::zeros(d_s);
                for q in 0..d_s {
                    s[q] = standard_normal(&mut rng);
                }
                (m, s)
            })
            .collect();
        let labels = labels_of(cfg, &model, &c, &specific);
        if !cfg.allow_neutral && labels.iter().all(|&l| l == 0) {
            continue;
        }
        kept += 1;
        for j in 0..cfg.zeta {
            counts[j] += labels[j] as usize;
        }
    }
    Ok(counts.iter().map(|&c| c as f64 / draws as f64).collect())
}
