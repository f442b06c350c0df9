//! Multi-party context embedding.
//!
//! Each modality runs through its own transformer encoder over the sample's
//! full token sequence (persons × segments × tokens). Tokens of absent cells
//! are excluded as attention keys, so missing data cannot leak into present
//! positions; absent cells still produce outputs (their placeholder content
//! rides the residual stream). Token outputs are mean-pooled per cell, fused
//! with the personality cell embedding, enriched with learned segment
//! position embeddings, then mixed by inter-person attention (across persons
//! within a segment) followed by intra-person attention (across segments
//! within a person). The per-sample vector is the elementwise max over the
//! target person's segment cells.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Tape, Value, Var, MASK_EXCLUDE};
use crate::corpus::{Batch, FeatureKey, Modality};
use crate::error::{Error, Result};
use crate::nn::{context_rng, group_attention, Init, Linear, ParamStore, TransformerLayer};

/// Forward-pass mode: training enables stochastic regularization, evaluation
/// is fully deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: BTreeMap<Modality, usize>,
    pub n_heads: usize,
    pub dropout_rate: f64,
    pub use_personality: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let mut n_layers = BTreeMap::new();
        for m in Modality::ALL {
            n_layers.insert(m, 1);
        }
        EncoderConfig {
            d_model: 16,
            n_layers,
            n_heads: 2,
            dropout_rate: 0.0,
            use_personality: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        let mut required: Vec<Modality> = Modality::CONTENT.to_vec();
        if self.use_personality {
            required.push(Modality::Personality);
        }
        for m in required {
            if self.n_layers.get(&m).copied().unwrap_or(0) == 0 {
                return Err(Error::config(format!("n_layers missing for {m}")));
            }
        }
        Ok(())
    }
}

/// A batch flattened into dense per-modality token matrices.
///
/// Row order is person-major: token row of `(sample b, person p, segment s,
/// token t)` is `((b·T + p)·R + s)·l_m + t`. Absent cells carry zero rows in
/// `raw`; the placeholder vector is injected on the tape so it stays
/// trainable.
#[derive(Clone, Debug)]
pub struct BatchLayout {
    pub n: usize,
    pub persons: usize,
    pub segments: usize,
    pub zeta: usize,
    pub dims: BTreeMap<Modality, usize>,
    pub seq_lens: BTreeMap<Modality, usize>,
    pub raw: BTreeMap<Modality, Array2<f64>>,
    /// Per modality: presence per cell, indexed `(b·T + p)·R + s`.
    pub cell_presence: BTreeMap<Modality, Vec<bool>>,
    pub labels: Array2<f64>,
    pub targets: Vec<(usize, usize)>,
    pub ids: Vec<String>,
}

impl BatchLayout {
    pub fn from_batch(batch: &Batch) -> Result<Self> {
        if batch.samples.is_empty() {
            return Err(Error::data("cannot lay out an empty batch"));
        }
        let persons = batch.samples[0].persons;
        let segments = batch.samples[0].segments;
        for s in &batch.samples {
            if s.persons != persons || s.segments != segments {
                return Err(Error::data(format!(
                    "sample {} has grid {}x{}, batch uses {persons}x{segments}",
                    s.id, s.persons, s.segments
                )));
            }
            s.validate(&batch.dims, &batch.seq_lens, batch.zeta)?;
        }
        let n = batch.samples.len();
        let cells = n * persons * segments;
        let mut raw = BTreeMap::new();
        let mut cell_presence = BTreeMap::new();
        for (&m, &d) in &batch.dims {
            let l = batch.seq_lens[&m];
            let mut mat = Array2::zeros((cells * l, d));
            let mut presence = vec![false; cells];
            for (b, sample) in batch.samples.iter().enumerate() {
                for p in 0..persons {
                    for s in 0..segments {
                        let cell = (b * persons + p) * segments + s;
                        if let Some(block) = sample.features.get(&FeatureKey::new(m, p, s)) {
                            presence[cell] = true;
                            for t in 0..l {
                                for c in 0..d {
                                    mat[(cell * l + t, c)] = block[(t, c)] as f64;
                                }
                            }
                        }
                    }
                }
            }
            raw.insert(m, mat);
            cell_presence.insert(m, presence);
        }
        let mut labels = Array2::zeros((n, batch.zeta));
        for (b, sample) in batch.samples.iter().enumerate() {
            for j in 0..batch.zeta {
                labels[(b, j)] = sample.labels[j] as f64;
            }
        }
        Ok(BatchLayout {
            n,
            persons,
            segments,
            zeta: batch.zeta,
            dims: batch.dims.clone(),
            seq_lens: batch.seq_lens.clone(),
            raw,
            cell_presence,
            labels,
            targets: batch
                .samples
                .iter()
                .map(|s| (s.target_person, s.target_segment))
                .collect(),
            ids: batch.samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    fn cells_per_sample(&self) -> usize {
        self.persons * self.segments
    }

    /// Additive attention masks for the token encoder, one per query
    /// position. Keys inside absent cells are hard-excluded; if a sample has
    /// no present cell at all, each query falls back to itself.
    pub fn token_masks(&self, m: Modality) -> Vec<Value> {
        let l = self.seq_lens[&m];
        let group = self.cells_per_sample() * l;
        let presence = &self.cell_presence[&m];
        let mut masks = Vec::with_capacity(group);
        for u in 0..group {
            let mut mask = Value::zeros((self.n, group));
            for b in 0..self.n {
                let any = (0..self.cells_per_sample())
                    .any(|c| presence[b * self.cells_per_sample() + c]);
                for v in 0..group {
                    let allowed = if any {
                        presence[b * self.cells_per_sample() + v / l]
                    } else {
                        v == u
                    };
                    if !allowed {
                        mask[(b, v)] = MASK_EXCLUDE;
                    }
                }
            }
            masks.push(mask);
        }
        masks
    }

    /// Masks for attention across persons within one segment. Group index is
    /// `(b, segment)`, positions are persons.
    pub fn inter_masks(&self, m: Modality) -> Vec<Value> {
        let presence = &self.cell_presence[&m];
        let groups = self.n * self.segments;
        let mut masks = Vec::with_capacity(self.persons);
        for u in 0..self.persons {
            let mut mask = Value::zeros((groups, self.persons));
            for b in 0..self.n {
                for s in 0..self.segments {
                    let g = b * self.segments + s;
                    let any = (0..self.persons)
                        .any(|p| presence[(b * self.persons + p) * self.segments + s]);
                    for v in 0..self.persons {
                        let allowed = if any {
                            presence[(b * self.persons + v) * self.segments + s]
                        } else {
                            v == u
                        };
                        if !allowed {
                            mask[(g, v)] = MASK_EXCLUDE;
                        }
                    }
                }
            }
            masks.push(mask);
        }
        masks
    }

    /// Masks for attention across segments within one person. Group index is
    /// `(b, person)`, positions are segments.
    pub fn intra_masks(&self, m: Modality) -> Vec<Value> {
        let presence = &self.cell_presence[&m];
        let groups = self.n * self.persons;
        let mut masks = Vec::with_capacity(self.segments);
        for u in 0..self.segments {
            let mut mask = Value::zeros((groups, self.segments));
            for b in 0..self.n {
                for p in 0..self.persons {
                    let g = b * self.persons + p;
                    let any = (0..self.segments)
                        .any(|s| presence[(b * self.persons + p) * self.segments + s]);
                    for v in 0..self.segments {
                        let allowed = if any {
                            presence[(b * self.persons + p) * self.segments + v]
                        } else {
                            v == u
                        };
                        if !allowed {
                            mask[(g, v)] = MASK_EXCLUDE;
                        }
                    }
                }
            }
            masks.push(mask);
        }
        masks
    }

    /// Row permutation taking the person-major cell grid to segment-major
    /// order (groups of persons within one segment).
    pub fn to_segment_major(&self) -> Vec<usize> {
        let mut index = Vec::with_capacity(self.n * self.cells_per_sample());
        for b in 0..self.n {
            for s in 0..self.segments {
                for p in 0..self.persons {
                    index.push((b * self.persons + p) * self.segments + s);
                }
            }
        }
        index
    }

    /// Inverse of [`BatchLayout::to_segment_major`].
    pub fn from_segment_major(&self) -> Vec<usize> {
        let mut index = Vec::with_capacity(self.n * self.cells_per_sample());
        for b in 0..self.n {
            for p in 0..self.persons {
                for s in 0..self.segments {
                    index.push(b * self.cells_per_sample() + s * self.persons + p);
                }
            }
        }
        index
    }

    /// Cell rows of each sample's target person, R per sample.
    pub fn target_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.n * self.segments);
        for (b, &(p, _)) in self.targets.iter().enumerate() {
            for s in 0..self.segments {
                rows.push((b * self.persons + p) * self.segments + s);
            }
        }
        rows
    }

    /// Segment index of every cell row, for position-embedding lookup.
    pub fn cell_segment_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.n * self.cells_per_sample());
        for _ in 0..self.n {
            for _p in 0..self.persons {
                for s in 0..self.segments {
                    idx.push(s);
                }
            }
        }
        idx
    }
}

/// Personality-enhanced, context-attended features.
pub struct AlphaFeatures<'t> {
    /// `X_α^m`: cell grid per content modality, `(B·T·R) × d`.
    pub grids: BTreeMap<Modality, Var<'t>>,
    /// `x_α^m`: pooled per-sample vector per content modality, `B × d`.
    pub pooled: BTreeMap<Modality, Var<'t>>,
    /// Personality cell grid when enabled.
    pub personality_cells: Option<Var<'t>>,
    /// Presence per cell per modality, carried through for downstream masks.
    pub cell_presence: BTreeMap<Modality, Vec<bool>>,
}

struct GridAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
}

impl GridAttention {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        GridAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim),
        }
    }

    fn forward<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        x: Var<'t>,
        group: usize,
        masks: &[Value],
    ) -> Var<'t> {
        let q = self.wq.forward(store, tape, x);
        let k = self.wk.forward(store, tape, x);
        let v = self.wv.forward(store, tape, x);
        group_attention(tape, q, k, v, group, Some(masks))
    }
}

/// The embedding stage: four token encoders, personality fusion, grid
/// attention and target pooling.
pub struct Embedder {
    pub cfg: EncoderConfig,
    input_proj: BTreeMap<Modality, Linear>,
    placeholders: BTreeMap<Modality, usize>,
    encoders: BTreeMap<Modality, Vec<TransformerLayer>>,
    fuse: BTreeMap<Modality, Linear>,
    seg_pos: usize,
    inter: BTreeMap<Modality, GridAttention>,
    intra: BTreeMap<Modality, GridAttention>,
}

impl Embedder {
    pub fn new(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        dims: &BTreeMap<Modality, usize>,
        segments: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut active: Vec<Modality> = Modality::CONTENT.to_vec();
        if cfg.use_personality {
            active.push(Modality::Personality);
        }
        let mut input_proj = BTreeMap::new();
        let mut placeholders = BTreeMap::new();
        let mut encoders = BTreeMap::new();
        for &m in &active {
            let d_m = *dims
                .get(&m)
                .ok_or_else(|| Error::data(format!("corpus has no dims entry for {m}")))?;
            input_proj.insert(m, Linear::new(store, &format!("embed.{m}.in"), d_m, d));
            placeholders.insert(
                m,
                store.get_or_init(&format!("embed.{m}.placeholder"), (1, d_m), Init::Normal(0.02)),
            );
            let layers = (0..cfg.n_layers[&m])
                .map(|i| TransformerLayer::new(store, &format!("embed.{m}.layer{i}"), d, cfg.n_heads))
                .collect();
            encoders.insert(m, layers);
        }
        let mut fuse = BTreeMap::new();
        let mut inter = BTreeMap::new();
        let mut intra = BTreeMap::new();
        for m in Modality::CONTENT {
            if cfg.use_personality {
                fuse.insert(m, Linear::new(store, &format!("embed.{m}.fuse"), 2 * d, d));
            }
            inter.insert(m, GridAttention::new(store, &format!("embed.{m}.inter"), d));
            intra.insert(m, GridAttention::new(store, &format!("embed.{m}.intra"), d));
        }
        let seg_pos = store.get_or_init("embed.pos", (segments, d), Init::Zeros);
        Ok(Embedder {
            cfg: cfg.clone(),
            input_proj,
            placeholders,
            encoders,
            fuse,
            seg_pos,
            inter,
            intra,
        })
    }

    /// Token encoding for one modality: placeholder injection, input
    /// projection and the modality's transformer stack. Returns the token
    /// matrix `(B·T·R·l_m) × d`.
    pub fn encode_modality<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        m: Modality,
        layout: &BatchLayout,
        phase: Phase,
        step_seed: u64,
    ) -> Result<Var<'t>> {
        let raw = layout
            .raw
            .get(&m)
            .ok_or_else(|| Error::data(format!("batch carries no features for {m}")))?;
        let l = layout.seq_lens[&m];
        let rows = raw.nrows();
        let presence = &layout.cell_presence[&m];

        // x = raw + absent_mask ∘ placeholder  (placeholder stays trainable)
        let x_const = tape.constant(raw.clone());
        let mut absent = Value::zeros((rows, 1));
        for (cell, &present) in presence.iter().enumerate() {
            if !present {
                for t in 0..l {
                    absent[(cell * l + t, 0)] = 1.0;
                }
            }
        }
        let ones = tape.constant(Value::ones((rows, 1)));
        let placeholder = store.var(tape, self.placeholders[&m]);
        let injected = x_const.add(ones.matmul(placeholder).mul_col(tape.constant(absent)));

        let mut x = self.input_proj[&m].forward(store, tape, injected);
        let group = layout.cells_per_sample() * l;
        let masks = layout.token_masks(m);
        for (i, layer) in self.encoders[&m].iter().enumerate() {
            x = layer.forward(store, tape, x, group, Some(&masks));
            if phase == Phase::Train && self.cfg.dropout_rate > 0.0 {
                x = x.mul(tape.constant(dropout_mask(
                    x.shape(),
                    self.cfg.dropout_rate,
                    step_seed,
                    &format!("neural-dropout/{m}/{i}"),
                )));
            }
        }
        Ok(x)
    }

    /// Concatenate a modality's cell row with the personality cell row and
    /// restore width d. Identity when personality fusion is disabled.
    pub fn fuse_personality<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        m: Modality,
        cells: Var<'t>,
        personality: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        if !self.cfg.use_personality {
            return Ok(cells);
        }
        let p = personality
            .ok_or_else(|| Error::data("personality cells required but unavailable"))?;
        Ok(self.fuse[&m].forward(store, tape, concat_cols(&[cells, p])))
    }

    /// Scaled dot-product attention across the person axis, independently per
    /// segment. Absent cells are masked as keys; queries with no visible key
    /// fall back to themselves.
    pub fn inter_person_attention<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        m: Modality,
        grid: Var<'t>,
        layout: &BatchLayout,
    ) -> Var<'t> {
        let seg_major = grid.gather_rows(&layout.to_segment_major());
        let out = self.inter[&m].forward(
            store,
            tape,
            seg_major,
            layout.persons,
            &layout.inter_masks(m),
        );
        out.gather_rows(&layout.from_segment_major())
    }

    /// Scaled dot-product attention across the segment axis, independently
    /// per person.
    pub fn intra_person_attention<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        m: Modality,
        grid: Var<'t>,
        layout: &BatchLayout,
    ) -> Var<'t> {
        self.intra[&m].forward(store, tape, grid, layout.segments, &layout.intra_masks(m))
    }

    /// Max over the target person's segment cells: `(B·T·R) × d` → `B × d`.
    pub fn pool_target<'t>(&self, grid: Var<'t>, layout: &BatchLayout) -> Var<'t> {
        grid.gather_rows(&layout.target_rows())
            .max_pool_groups(layout.segments)
    }

    /// Full embedding stage producing X_α grids and pooled x_α vectors.
    pub fn forward<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        layout: &BatchLayout,
        phase: Phase,
        step_seed: u64,
    ) -> Result<AlphaFeatures<'t>> {
        let personality_cells = if self.cfg.use_personality {
            let tokens =
                self.encode_modality(store, tape, Modality::Personality, layout, phase, step_seed)?;
            Some(tokens.mean_pool_groups(layout.seq_lens[&Modality::Personality]))
        } else {
            None
        };
        let pos = store.var(tape, self.seg_pos);
        let pos_rows = pos.gather_rows(&layout.cell_segment_index());
        let mut grids = BTreeMap::new();
        let mut pooled = BTreeMap::new();
        for m in Modality::CONTENT {
            let tokens = self.encode_modality(store, tape, m, layout, phase, step_seed)?;
            let cells = tokens.mean_pool_groups(layout.seq_lens[&m]);
            let fused = self.fuse_personality(store, tape, m, cells, personality_cells)?;
            let positioned = fused.add(pos_rows);
            let inter = self.inter_person_attention(store, tape, m, positioned, layout);
            let intra = self.intra_person_attention(store, tape, m, inter, layout);
            pooled.insert(m, self.pool_target(intra, layout));
            grids.insert(m, intra);
        }
        Ok(AlphaFeatures {
            grids,
            pooled,
            personality_cells,
            cell_presence: layout.cell_presence.clone(),
        })
    }
}

/// Inverted-dropout mask: entries are `0` with probability `rate`, else
/// `1/(1-rate)`.
fn dropout_mask(shape: (usize, usize), rate: f64, seed: u64, context: &str) -> Value {
    let mut rng = context_rng(seed, context);
    let keep = 1.0 - rate;
    Value::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            1.0 / keep
        }
    })
}
