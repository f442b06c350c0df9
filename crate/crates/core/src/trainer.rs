//! Training loop: objective composition, stepping, prediction and
//! checkpointing.
//!
//! One training step runs the whole pipeline on a batch: modality dropout,
//! context embedding, prototype attention, two-level reconstruction, the
//! adversarial commonality/specificity losses, stack-shuffle classification,
//! then a single optimizer step and a detached prototype-bank update. All
//! randomness is derived from (seed, epoch, step index), so a resumed run
//! replays the identical step sequence without carrying mutable RNG state.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::{
    commonality_label_loss, modality_confusion_loss, orthogonality_loss, Adversary,
};
use crate::autodiff::{concat_cols, concat_rows, Tape, Value, Var};
use crate::corpus::{
    apply_modality_dropout, batch_iter, Batch, Corpus, DropoutPolicy, FeatureKey, FusionOrder,
    Modality, Split,
};
use crate::embedding::{BatchLayout, Embedder, EncoderConfig, Phase};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, Adam, ParamStore};
use crate::prototypes::{
    intrinsic_vector, supervised_contrastive_loss, DeltaProjector, PositiveMode, PrototypeBank,
};
use crate::reconstructor::{elementwise_max, reconstruction_loss, Reconstructor, Space};
use crate::shuffler::{apply_shuffle_ordered, ShuffleClassifier, ShuffleSpec};

/// Full training configuration. The JSON form carries exactly these keys;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_r: f64,
    pub lambda_s: f64,
    pub lambda_a: f64,
    pub lambda_o: f64,
    pub lambda_c: f64,
    pub lambda_alpha: f64,
    pub lambda_beta: f64,
    pub lambda_gamma: f64,
    pub eta: f64,
    pub momentum: f64,
    pub rho: f64,
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
    pub dropout: DropoutPolicy,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_r: 0.5,
            lambda_s: 0.5,
            lambda_a: 1.0,
            lambda_o: 0.1,
            lambda_c: 1.0,
            lambda_alpha: 1.0,
            lambda_beta: 1.0,
            lambda_gamma: 1.0,
            eta: 0.1,
            momentum: 0.9,
            // Reversal strength 2 keeps the discriminator near chance on
            // commonality features at desk scale; 1 lets it win late.
            rho: 2.0,
            k: 4,
            learning_rate: 3e-3,
            epochs: 30,
            batch_size: 32,
            threshold: 0.5,
            seed: 0,
            dropout: DropoutPolicy::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_r", self.lambda_r),
            ("lambda_s", self.lambda_s),
            ("lambda_a", self.lambda_a),
            ("lambda_o", self.lambda_o),
            ("lambda_c", self.lambda_c),
            ("lambda_alpha", self.lambda_alpha),
            ("lambda_beta", self.lambda_beta),
            ("lambda_gamma", self.lambda_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "threshold {} must lie strictly inside (0, 1)",
                self.threshold
            )));
        }
        if self.eta <= 0.0 {
            return Err(Error::config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1]",
                self.momentum
            )));
        }
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::config(format!(
                "reversal coefficient rho must be a non-negative real, got {}",
                self.rho
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        self.dropout.validate()?;
        self.encoder.validate()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("invalid training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }
}

/// Structural toggles for ablations. The default is the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelVariant {
    /// Drop the multi-label supervision on commonality features.
    pub no_lsc: bool,
    /// Replace commonality features with zeros and drop their losses.
    pub no_c: bool,
    /// Replace specificity features with zeros and drop their losses.
    pub no_s: bool,
    /// Drop the supervised contrastive loss.
    pub no_lscl: bool,
    /// Bypass the per-modality encoder/decoder pairs (latents are the
    /// pooled features themselves).
    pub no_enc_dec: bool,
    /// Remove the first-level generated features from losses and downstream
    /// consumers.
    pub no_xbeta: bool,
    /// Remove the second-level generated features; commonality falls back to
    /// the previous stage.
    pub no_xgamma: bool,
    pub fusion: FusionOrder,
    pub positive_mode: PositiveMode,
}

impl Default for ModelVariant {
    fn default() -> Self {
        ModelVariant {
            no_lsc: false,
            no_c: false,
            no_s: false,
            no_lscl: false,
            no_enc_dec: false,
            no_xbeta: false,
            no_xgamma: false,
            fusion: FusionOrder::default(),
            positive_mode: PositiveMode::default(),
        }
    }
}

impl ModelVariant {
    pub fn validate(&self) -> Result<()> {
        if self.no_c && self.no_s {
            return Err(Error::config(
                "cannot disable both commonality and specificity branches",
            ));
        }
        self.fusion.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OptimizerMode {
    /// One optimizer over everything; the discriminator trains through
    /// gradient reversal.
    #[default]
    Single,
    /// Discriminator parameters get their own optimizer and a separate
    /// un-reversed pass each step.
    Alternating,
}

/// Per-step loss decomposition. `rec` and `scl` are unweighted; `adv` is the
/// already-weighted adversarial composite whose raw sub-terms follow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_suf: f64,
    pub cls_lsr: f64,
    pub rec: f64,
    pub scl: f64,
    pub adv: f64,
    pub adv_c: f64,
    pub adv_s: f64,
    pub adv_orth: f64,
    pub adv_cml: f64,
    pub total: f64,
}

/// Final objective: cls_suf + cls_lsr + λ_r·rec + λ_s·scl + adv.
///
/// A non-finite component is a numeric error naming the component.
pub fn total_loss(
    cls_suf: f64,
    cls_lsr: f64,
    rec: f64,
    scl: f64,
    adv: f64,
    lambda_r: f64,
    lambda_s: f64,
) -> Result<f64> {
    for (name, v) in [
        ("cls_suf", cls_suf),
        ("cls_lsr", cls_lsr),
        ("rec", rec),
        ("scl", scl),
        ("adv", adv),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("loss component {name} is not finite ({v})")));
        }
    }
    Ok(cls_suf + cls_lsr + lambda_r * rec + lambda_s * scl + adv)
}

/// Corpus shape a model is built for; stored in checkpoints so a model can
/// be rebuilt without the corpus at hand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: BTreeMap<Modality, usize>,
    pub seq_lens: BTreeMap<Modality, usize>,
    pub zeta: usize,
    pub persons: usize,
    pub segments: usize,
}

impl Geometry {
    pub fn of_corpus(corpus: &Corpus) -> Result<Self> {
        let first = corpus
            .samples
            .first()
            .ok_or_else(|| Error::data("cannot derive model geometry from an empty corpus"))?;
        for s in &corpus.samples {
            if s.persons != first.persons || s.segments != first.segments {
                return Err(Error::data(format!(
                    "sample {} has grid {}x{}, expected uniform {}x{}",
                    s.id, s.persons, s.segments, first.persons, first.segments
                )));
            }
        }
        Ok(Geometry {
            dims: corpus.dims.clone(),
            seq_lens: corpus.seq_lens.clone(),
            zeta: corpus.zeta,
            persons: first.persons,
            segments: first.segments,
        })
    }
}

/// All sample-level representations produced by one forward pass.
pub struct Features<'t> {
    /// Pooled context-attended features x_α per content modality.
    pub alpha: BTreeMap<Modality, Var<'t>>,
    /// Latent projections Z_α.
    pub latents: BTreeMap<Modality, Var<'t>>,
    /// Decoded features X̃_α.
    pub decoded: BTreeMap<Modality, Var<'t>>,
    /// Prototype summaries D̃.
    pub intrinsic: BTreeMap<Modality, Var<'t>>,
    /// First-level generations x_β.
    pub beta: BTreeMap<Modality, Var<'t>>,
    /// Second-level generations x_γ.
    pub gamma: BTreeMap<Modality, Var<'t>>,
    pub commonality: BTreeMap<Modality, Var<'t>>,
    pub specificity: BTreeMap<Modality, Var<'t>>,
    pub labels: Value,
    pub ids: Vec<String>,
}

/// Everything a gradient step needs from one loss pass.
pub struct StepArtifacts {
    pub report: LossReport,
    pub grads: HashMap<usize, Value>,
    /// Detached α-level latents, for the prototype-bank update.
    pub latents: BTreeMap<Modality, Value>,
    pub labels: Value,
    /// The detached reconstruction targets this pass compared against
    /// (empty when the reconstruction loss is ablated away).
    pub recon_targets: BTreeMap<Modality, Value>,
}

pub struct Model {
    pub cfg: TrainConfig,
    pub variant: ModelVariant,
    pub geometry: Geometry,
    pub d_latent: usize,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub adversary: Adversary,
    pub reconstructor: Reconstructor,
    pub projector: DeltaProjector,
    pub classifier: ShuffleClassifier,
    pub bank: PrototypeBank,
}

fn latent_width(d_model: usize, variant: &ModelVariant) -> usize {
    if variant.no_enc_dec {
        d_model
    } else {
        (d_model / 2).max(1)
    }
}

impl Model {
    pub fn new(cfg: &TrainConfig, variant: &ModelVariant, geometry: &Geometry) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        let d = cfg.encoder.d_model;
        let d_latent = latent_width(d, variant);
        let mut store = ParamStore::new(cfg.seed);
        let embedder = Embedder::new(&mut store, &cfg.encoder, &geometry.dims, geometry.segments)?;
        let adversary = Adversary::new(&mut store, d, geometry.zeta);
        let reconstructor = Reconstructor::new(&mut store, d, d_latent, geometry.zeta);
        let projector = DeltaProjector::new(&mut store, d_latent, geometry.zeta);
        let classifier = ShuffleClassifier::new(&mut store, d, geometry.zeta);
        let mut bank = PrototypeBank::new(d_latent, geometry.zeta, cfg.momentum)?;
        bank.ensure_initialized(derive_seed(cfg.seed, "bank-init"));
        Ok(Model {
            cfg: cfg.clone(),
            variant: variant.clone(),
            geometry: geometry.clone(),
            d_latent,
            store,
            embedder,
            adversary,
            reconstructor,
            projector,
            classifier,
            bank,
        })
    }

    /// Run the representation pipeline on a batch. No losses, no dropout
    /// application; callers choose the phase.
    pub fn forward_features<'t>(
        &self,
        tape: &'t Tape,
        batch: &Batch,
        phase: Phase,
        step_seed: u64,
    ) -> Result<Features<'t>> {
        let layout = BatchLayout::from_batch(batch)?;
        let emb = self
            .embedder
            .forward(&self.store, tape, &layout, phase, step_seed)?;
        let n = layout.n;
        let mut alpha = BTreeMap::new();
        let mut latents = BTreeMap::new();
        let mut decoded = BTreeMap::new();
        for m in Modality::CONTENT {
            let x = emb.pooled[&m];
            let (z, xt) = if self.variant.no_enc_dec {
                (x, x)
            } else {
                self.reconstructor.autoencode(&self.store, tape, m, x)
            };
            alpha.insert(m, x);
            latents.insert(m, z);
            decoded.insert(m, xt);
        }
        let mut intrinsic = BTreeMap::new();
        let mut beta = BTreeMap::new();
        for m in Modality::CONTENT {
            let delta = intrinsic_vector(
                &self.bank,
                &self.projector,
                &self.store,
                tape,
                m,
                latents[&m],
            )?;
            let (pa, pb) = self
                .reconstructor
                .partner_inputs(m, &self.variant.fusion, &decoded)?;
            beta.insert(
                m,
                self.reconstructor
                    .generate_beta(&self.store, tape, delta, pa, pb)?,
            );
            intrinsic.insert(m, delta);
        }
        let mut gamma = BTreeMap::new();
        for m in Modality::CONTENT {
            gamma.insert(m, self.reconstructor.generate_gamma(&self.store, tape, beta[&m]));
        }
        let zeros = || tape.constant(Value::zeros((n, self.cfg.encoder.d_model)));
        let mut commonality = BTreeMap::new();
        let mut specificity = BTreeMap::new();
        for m in Modality::CONTENT {
            let c = if self.variant.no_c {
                zeros()
            } else {
                // Commonality reads the deepest generation stage still
                // enabled; with both generation levels off it reads the
                // decoded features directly.
                let src = if !self.variant.no_xgamma {
                    gamma[&m]
                } else if !self.variant.no_xbeta {
                    beta[&m]
                } else {
                    decoded[&m]
                };
                self.adversary.commonality(&self.store, tape, src)
            };
            let s = if self.variant.no_s {
                zeros()
            } else {
                self.adversary.specificity(&self.store, tape, m, alpha[&m])
            };
            commonality.insert(m, c);
            specificity.insert(m, s);
        }
        Ok(Features {
            alpha,
            latents,
            decoded,
            intrinsic,
            beta,
            gamma,
            commonality,
            specificity,
            labels: layout.labels,
            ids: layout.ids,
        })
    }

    /// Pooled clean features used as reconstruction targets. When no
    /// stochastic corruption is active the current α features serve
    /// directly; otherwise the clean batch runs a deterministic pass.
    fn recon_targets(
        &self,
        clean: &Batch,
        dropped_alpha: &BTreeMap<Modality, Var<'_>>,
    ) -> Result<BTreeMap<Modality, Value>> {
        if self.cfg.dropout.is_identity() && self.cfg.encoder.dropout_rate == 0.0 {
            return Ok(dropped_alpha
                .iter()
                .map(|(&m, v)| (m, v.value()))
                .collect());
        }
        let tape = Tape::new();
        let feats = self.forward_features(&tape, clean, Phase::Eval, 0)?;
        Ok(feats.alpha.iter().map(|(&m, v)| (m, v.value())).collect())
    }

    /// Per (sample, modality): does the clean batch have any feature block
    /// for the target person? Samples failing this are skipped by the
    /// reconstruction loss.
    fn counted_flags(&self, clean: &Batch) -> BTreeMap<Modality, Vec<bool>> {
        let mut out = BTreeMap::new();
        for m in Modality::CONTENT {
            let flags = clean
                .samples
                .iter()
                .map(|s| {
                    (0..s.segments)
                        .any(|seg| s.features.contains_key(&FeatureKey::new(m, s.target_person, seg)))
                })
                .collect();
            out.insert(m, flags);
        }
        out
    }

    /// One full loss pass over a clean batch: dropout, forward, objective,
    /// gradients. Does not mutate the model.
    pub fn loss_pass(&self, clean: &Batch, step_seed: u64) -> Result<StepArtifacts> {
        self.loss_pass_with_targets(clean, step_seed, None)
    }

    /// Like [`Model::loss_pass`] but with the reconstruction targets pinned
    /// to the given values instead of recomputed. The targets are behind a
    /// stop-gradient either way; pinning them makes the objective a pure
    /// function of the parameters, which numeric gradient probes need.
    pub fn loss_pass_with_targets(
        &self,
        clean: &Batch,
        step_seed: u64,
        target_override: Option<&BTreeMap<Modality, Value>>,
    ) -> Result<StepArtifacts> {
        let dropped = apply_modality_dropout(clean, &self.cfg.dropout, step_seed)?;
        let tape = Tape::new();
        let feats = self.forward_features(&tape, &dropped, Phase::Train, step_seed)?;
        let cfg = &self.cfg;
        let v = &self.variant;
        let zero = || tape.scalar(0.0);

        // Adversarial block.
        let adv_c = if v.no_c {
            zero()
        } else {
            modality_confusion_loss(
                &self.adversary,
                &self.store,
                &tape,
                &feats.commonality,
                Some(cfg.rho),
            )?
        };
        let adv_s = if v.no_s {
            zero()
        } else {
            modality_confusion_loss(&self.adversary, &self.store, &tape, &feats.specificity, None)?
        };
        let adv_orth = if v.no_c || v.no_s {
            zero()
        } else {
            orthogonality_loss(&feats.commonality, &feats.specificity)?
        };
        let adv_cml = if v.no_c || v.no_lsc {
            zero()
        } else {
            commonality_label_loss(
                &self.adversary,
                &self.store,
                &tape,
                &feats.commonality,
                &feats.labels,
            )?
        };
        let adv_total = adv_c
            .add(adv_s)
            .scale(cfg.lambda_a)
            .add(adv_orth.scale(cfg.lambda_o))
            .add(adv_cml.scale(cfg.lambda_c));

        // Reconstruction block. The decoded-feature term vanishes without
        // the encoder/decoder pairs; the generated term vanishes without β.
        let mut used_targets = BTreeMap::new();
        let rec = if v.no_enc_dec && v.no_xbeta {
            zero()
        } else {
            let targets = match target_override {
                Some(t) => t.clone(),
                None => self.recon_targets(clean, &feats.alpha)?,
            };
            let counted = self.counted_flags(clean);
            let effective_decoded = if v.no_enc_dec {
                // X̃ == x_α: its distance to the target is still defined
                // (nonzero when dropout corrupted the inputs).
                &feats.alpha
            } else {
                &feats.decoded
            };
            let effective_beta = if v.no_xbeta {
                effective_decoded
            } else {
                &feats.beta
            };
            let term = reconstruction_loss(&targets, effective_decoded, effective_beta, &counted)?;
            used_targets = targets;
            term
        };

        // Three-space classification heads.
        let mut cls_lsr = zero();
        for (space, vectors, weight, enabled) in [
            (Space::Alpha, &feats.alpha, cfg.lambda_alpha, true),
            (Space::Beta, &feats.beta, cfg.lambda_beta, !v.no_xbeta),
            (Space::Gamma, &feats.gamma, cfg.lambda_gamma, !v.no_xgamma),
        ] {
            if !enabled {
                continue;
            }
            let term = self
                .reconstructor
                .space_loss(&self.store, &tape, space, vectors, &feats.labels)?;
            cls_lsr = cls_lsr.add(term.scale(weight));
        }

        // Supervised contrastive loss over the pooled embedding set.
        let scl = if v.no_lscl {
            zero()
        } else {
            let mut sources = vec![&feats.latents];
            if !v.no_xbeta {
                sources.push(&feats.beta);
            }
            if !v.no_xgamma {
                sources.push(&feats.gamma);
            }
            let mut rows = Vec::new();
            for source in sources {
                for m in Modality::CONTENT {
                    rows.push((m, source[&m]));
                }
            }
            let label_blocks = rows.len();
            let projected: Vec<Var<'_>> = rows
                .iter()
                .map(|&(m, var)| {
                    if v.no_enc_dec || var.shape().1 == self.d_latent {
                        var
                    } else {
                        self.reconstructor.encode(&self.store, &tape, m, var)
                    }
                })
                .collect();
            let pooled = concat_rows(&projected);
            let n = feats.labels.nrows();
            let mut stacked = Value::zeros((label_blocks * n, feats.labels.ncols()));
            for b in 0..label_blocks {
                for r in 0..n {
                    for c in 0..feats.labels.ncols() {
                        stacked[(b * n + r, c)] = feats.labels[(r, c)];
                    }
                }
            }
            supervised_contrastive_loss(pooled, &stacked, cfg.eta, v.positive_mode)?
        };

        // Stack-shuffle classification on concat(C, S) rows.
        let n = feats.labels.nrows();
        let mut shuffle_rows = BTreeMap::new();
        for m in Modality::CONTENT {
            shuffle_rows.insert(
                m,
                concat_cols(&[feats.commonality[&m], feats.specificity[&m]]),
            );
        }
        let spec = ShuffleSpec {
            k: cfg.k.min(n),
            rounds: 1,
            enable_sample_wise: true,
            enable_modality_wise: true,
        };
        let views = apply_shuffle_ordered(&tape, &spec, &shuffle_rows, &feats.labels, &v.fusion.0)?;
        let cls_suf = self.classifier.shuffled_loss(&self.store, &tape, &views)?;

        let total = cls_suf
            .add(cls_lsr)
            .add(rec.scale(cfg.lambda_r))
            .add(scl.scale(cfg.lambda_s))
            .add(adv_total);

        let report = LossReport {
            cls_suf: cls_suf.value()[(0, 0)],
            cls_lsr: cls_lsr.value()[(0, 0)],
            rec: rec.value()[(0, 0)],
            scl: scl.value()[(0, 0)],
            adv: adv_total.value()[(0, 0)],
            adv_c: adv_c.value()[(0, 0)],
            adv_s: adv_s.value()[(0, 0)],
            adv_orth: adv_orth.value()[(0, 0)],
            adv_cml: adv_cml.value()[(0, 0)],
            total: total.value()[(0, 0)],
        };
        let recomposed = total_loss(
            report.cls_suf,
            report.cls_lsr,
            report.rec,
            report.scl,
            report.adv,
            cfg.lambda_r,
            cfg.lambda_s,
        )?;
        if (recomposed - report.total).abs() > 1e-6 {
            return Err(Error::numeric(format!(
                "objective composition drifted: {} vs {recomposed}",
                report.total
            )));
        }
        let grads = tape.backward(total);
        Ok(StepArtifacts {
            report,
            grads: grads.into_map(),
            latents: feats.latents.iter().map(|(&m, z)| (m, z.value())).collect(),
            labels: feats.labels,
            recon_targets: used_targets,
        })
    }

    /// Discriminator-only objective (no reversal): λ_a·(L_C + L_S).
    fn discriminator_pass(&self, clean: &Batch, step_seed: u64) -> Result<HashMap<usize, Value>> {
        let dropped = apply_modality_dropout(clean, &self.cfg.dropout, step_seed)?;
        let tape = Tape::new();
        let feats = self.forward_features(&tape, &dropped, Phase::Train, step_seed)?;
        let zero = || tape.scalar(0.0);
        let l_c = if self.variant.no_c {
            zero()
        } else {
            modality_confusion_loss(&self.adversary, &self.store, &tape, &feats.commonality, None)?
        };
        let l_s = if self.variant.no_s {
            zero()
        } else {
            modality_confusion_loss(&self.adversary, &self.store, &tape, &feats.specificity, None)?
        };
        let loss = l_c.add(l_s).scale(self.cfg.lambda_a);
        Ok(tape.backward(loss).into_map())
    }

    /// Inference path: deterministic, dropout-free, shuffle-free. The
    /// per-modality classifier probabilities fuse by elementwise max and
    /// threshold with ties counted positive.
    pub fn predict(&self, batch: &Batch) -> Result<Predictions> {
        let tape = Tape::new();
        let feats = self.forward_features(&tape, batch, Phase::Eval, 0)?;
        let mut probs = Vec::new();
        for m in Modality::CONTENT {
            let rows = concat_cols(&[feats.commonality[&m], feats.specificity[&m]]);
            probs.push(self.classifier.probabilities(&self.store, &tape, rows)?);
        }
        let fused = elementwise_max(&probs)?.value();
        let binary = binarize(&fused, self.cfg.threshold);
        Ok(Predictions {
            probabilities: fused,
            binary,
            ids: feats.ids,
        })
    }
}

/// `p ≥ threshold` counts as positive.
pub fn binarize(probabilities: &Value, threshold: f64) -> ndarray::Array2<u8> {
    probabilities.mapv(|p| u8::from(p >= threshold))
}

pub struct Predictions {
    pub probabilities: Value,
    pub binary: ndarray::Array2<u8>,
    pub ids: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub reports: Vec<LossReport>,
    pub val_micro_f1: Option<f64>,
}

pub struct Trainer {
    pub model: Model,
    pub mode: OptimizerMode,
    pub epoch: usize,
    opt: Adam,
    opt_disc: Option<Adam>,
}

pub struct TrainingRun {
    pub trainer: Trainer,
    pub epochs: Vec<EpochLog>,
}

fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("adv.disc.")
}

impl Trainer {
    pub fn new(model: Model, mode: OptimizerMode) -> Self {
        let lr = model.cfg.learning_rate;
        Trainer {
            model,
            mode,
            epoch: 0,
            opt: Adam::new(lr),
            opt_disc: match mode {
                OptimizerMode::Single => None,
                OptimizerMode::Alternating => Some(Adam::new(lr)),
            },
        }
    }

    /// Train a fresh full model on the corpus train split.
    pub fn fit(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainingRun> {
        Self::fit_variant(corpus, cfg, &ModelVariant::default(), OptimizerMode::Single)
    }

    pub fn fit_variant(
        corpus: &Corpus,
        cfg: &TrainConfig,
        variant: &ModelVariant,
        mode: OptimizerMode,
    ) -> Result<TrainingRun> {
        corpus.validate()?;
        if corpus.split_indices(Split::Train).is_empty() {
            return Err(Error::data("corpus has an empty train split"));
        }
        let geometry = Geometry::of_corpus(corpus)?;
        let model = Model::new(cfg, variant, &geometry)?;
        let mut trainer = Trainer::new(model, mode);
        let epochs = trainer.run_epochs(corpus, cfg.epochs)?;
        Ok(TrainingRun { trainer, epochs })
    }

    /// Run epochs `self.epoch..until`, logging one line per epoch.
    pub fn run_epochs(&mut self, corpus: &Corpus, until: usize) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < until {
            let epoch = self.epoch;
            let seed = self.model.cfg.seed;
            let shuffle_seed = derive_seed(seed, &format!("epoch/{epoch}"));
            let batches = batch_iter(
                corpus,
                Split::Train,
                self.model.cfg.batch_size,
                shuffle_seed,
            );
            let mut reports = Vec::with_capacity(batches.len());
            for (i, batch) in batches.iter().enumerate() {
                let step_seed = derive_seed(seed, &format!("step/{epoch}/{i}"));
                reports.push(self.train_step(batch, step_seed)?);
            }
            self.epoch += 1;
            let val_micro_f1 = self.val_metric(corpus)?;
            let mean_total = if reports.is_empty() {
                0.0
            } else {
                reports.iter().map(|r| r.total).sum::<f64>() / reports.len() as f64
            };
            log::info!(
                "epoch {epoch}: mean total {mean_total:.4}, val micro-F1 {}",
                val_micro_f1
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
            logs.push(EpochLog {
                epoch,
                reports,
                val_micro_f1,
            });
        }
        Ok(logs)
    }

    fn val_metric(&self, corpus: &Corpus) -> Result<Option<f64>> {
        let val = corpus.split_indices(Split::Val);
        if val.is_empty() {
            return Ok(None);
        }
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for chunk in val.chunks(self.model.cfg.batch_size) {
            let batch = Batch {
                samples: chunk.iter().map(|&i| corpus.samples[i].clone()).collect(),
                dims: corpus.dims.clone(),
                seq_lens: corpus.seq_lens.clone(),
                zeta: corpus.zeta,
            };
            let pred = self.model.predict(&batch)?;
            for (r, &i) in chunk.iter().enumerate() {
                let gold = &corpus.samples[i].labels;
                for j in 0..corpus.zeta {
                    match (pred.binary[(r, j)], gold[j]) {
                        (1, 1) => tp += 1,
                        (1, 0) => fp += 1,
                        (0, 1) => fn_ += 1,
                        _ => {}
                    }
                }
            }
        }
        let denom = 2 * tp + fp + fn_;
        Ok(Some(if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }))
    }

    /// One optimization step on a clean batch. On numeric failure the model
    /// state is left untouched for post-mortem inspection.
    pub fn train_step(&mut self, batch: &Batch, step_seed: u64) -> Result<LossReport> {
        let artifacts = self.model.loss_pass(batch, step_seed)?;
        match self.mode {
            OptimizerMode::Single => {
                self.opt.step(&mut self.model.store, &artifacts.grads);
            }
            OptimizerMode::Alternating => {
                let main: HashMap<usize, Value> = artifacts
                    .grads
                    .iter()
                    .filter(|(&pid, _)| !is_discriminator_param(self.model.store.name_of(pid)))
                    .map(|(&pid, g)| (pid, g.clone()))
                    .collect();
                self.opt.step(&mut self.model.store, &main);
                let disc_grads = self.model.discriminator_pass(batch, step_seed)?;
                let disc: HashMap<usize, Value> = disc_grads
                    .into_iter()
                    .filter(|(pid, _)| is_discriminator_param(self.model.store.name_of(*pid)))
                    .collect();
                self.opt_disc
                    .as_mut()
                    .expect("alternating mode owns a discriminator optimizer")
                    .step(&mut self.model.store, &disc);
            }
        }
        for m in Modality::CONTENT {
            self.model
                .bank
                .update(m, &artifacts.latents[&m], &artifacts.labels)?;
        }
        Ok(artifacts.report)
    }
}

const CHECKPOINT_FORMAT: &str = "ramer-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorDoc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TensorDoc {
    fn of(v: &Value) -> Self {
        TensorDoc {
            rows: v.nrows(),
            cols: v.ncols(),
            data: v.iter().copied().collect(),
        }
    }

    fn to_value(&self) -> Result<Value> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::data(format!(
                "tensor payload holds {} values for a {}x{} shape",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(Value::from_shape_vec((self.rows, self.cols), self.data.clone())
            .expect("length checked above"))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamSlotDoc {
    m: TensorDoc,
    v: TensorDoc,
    steps: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format: String,
    version: u32,
    config: TrainConfig,
    variant: ModelVariant,
    geometry: Geometry,
    optimizer_mode: OptimizerMode,
    epoch: usize,
    params: BTreeMap<String, TensorDoc>,
    adam_main: BTreeMap<String, AdamSlotDoc>,
    adam_disc: Option<BTreeMap<String, AdamSlotDoc>>,
    bank: PrototypeBank,
}

fn adam_to_doc(opt: &Adam, store: &ParamStore) -> BTreeMap<String, AdamSlotDoc> {
    opt.export_state(store)
        .into_iter()
        .map(|(name, m, v, steps)| {
            (
                name,
                AdamSlotDoc {
                    m: TensorDoc::of(&m),
                    v: TensorDoc::of(&v),
                    steps,
                },
            )
        })
        .collect()
}

fn adam_from_doc(
    doc: &BTreeMap<String, AdamSlotDoc>,
    opt: &mut Adam,
    store: &ParamStore,
) -> Result<()> {
    let mut state = Vec::with_capacity(doc.len());
    for (name, slot) in doc {
        if store.id_of(name).is_none() {
            return Err(Error::data(format!(
                "optimizer state refers to unknown parameter {name}"
            )));
        }
        state.push((name.clone(), slot.m.to_value()?, slot.v.to_value()?, slot.steps));
    }
    opt.import_state(store, &state);
    Ok(())
}

impl Trainer {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let model = &self.model;
        let params = model
            .store
            .iter_sorted()
            .map(|(name, v)| (name.to_string(), TensorDoc::of(v)))
            .collect();
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: model.cfg.clone(),
            variant: model.variant.clone(),
            geometry: model.geometry.clone(),
            optimizer_mode: self.mode,
            epoch: self.epoch,
            params,
            adam_main: adam_to_doc(&self.opt, &model.store),
            adam_disc: self.opt_disc.as_ref().map(|o| adam_to_doc(o, &model.store)),
            bank: model.bank.clone(),
        };
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::data(format!("checkpoint serialization failed: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let doc: CheckpointDoc = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("malformed checkpoint: {e}")))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!(
                "not a checkpoint file (format {:?})",
                doc.format
            )));
        }
        if doc.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                doc.version
            )));
        }
        let mut model = Model::new(&doc.config, &doc.variant, &doc.geometry)?;
        let expected: Vec<String> = model.store.names().map(str::to_string).collect();
        let got: Vec<String> = doc.params.keys().cloned().collect();
        let mut expected_sorted = expected.clone();
        expected_sorted.sort();
        if expected_sorted != got {
            return Err(Error::data(format!(
                "checkpoint parameter set does not match the model ({} vs {} entries)",
                got.len(),
                expected_sorted.len()
            )));
        }
        for (name, tensor) in &doc.params {
            let value = tensor.to_value()?;
            let id = model.store.id_of(name).expect("name checked above");
            if model.store.value(id).dim() != value.dim() {
                return Err(Error::data(format!(
                    "checkpoint parameter {name} shaped {:?}, model expects {:?}",
                    value.dim(),
                    model.store.value(id).dim()
                )));
            }
            model.store.set_by_name(name, value);
        }
        if doc.bank.d_latent != model.d_latent || doc.bank.zeta != model.geometry.zeta {
            return Err(Error::data("checkpoint prototype bank shape mismatch"));
        }
        model.bank = doc.bank;
        let mut trainer = Trainer::new(model, doc.optimizer_mode);
        adam_from_doc(&doc.adam_main, &mut trainer.opt, &trainer.model.store)?;
        if let (Some(disc_doc), Some(opt_disc)) = (&doc.adam_disc, trainer.opt_disc.as_mut()) {
            adam_from_doc(disc_doc, opt_disc, &trainer.model.store)?;
        }
        trainer.epoch = doc.epoch;
        Ok(trainer)
    }
}
