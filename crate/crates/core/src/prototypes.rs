//! Prototype bank, polarity attention and supervised contrastive loss.
//!
//! The bank keeps one positive and one negative unit prototype per (content
//! modality, label). It is plain state: updates are moving averages over
//! detached embeddings, no gradient ever reaches it. Attention against the
//! bank summarizes where a latent vector sits relative to each label's
//! polarity pair; the concatenated summaries project down to the intrinsic
//! vector that seeds cross-modal generation.

use std::collections::BTreeMap;

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Tape, Value, Var};
use crate::corpus::Modality;
use crate::error::{Error, Result};
use crate::nn::{context_rng, standard_normal, Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Polarity {
    Pos,
    Neg,
}

impl Polarity {
    pub const BOTH: [Polarity; 2] = [Polarity::Pos, Polarity::Neg];

    pub fn as_str(&self) -> &'static str {
        match self {
            Polarity::Pos => "pos",
            Polarity::Neg => "neg",
        }
    }
}

/// How two pooled embeddings count as a positive pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PositiveMode {
    /// Share at least one positive label (cross-modal friendly default).
    #[default]
    ShareAnyLabel,
    /// Identical label vectors.
    ExactLabelSet,
}

const UNIT_FLOOR: f64 = 1e-12;

fn unit(v: &Array1<f64>) -> Option<Array1<f64>> {
    let norm = v.dot(v).sqrt();
    if norm < UNIT_FLOOR {
        return None;
    }
    Some(v / norm)
}

/// Moving-average polarity prototypes, one pair per (modality, label).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub d_latent: usize,
    pub zeta: usize,
    pub momentum: f64,
    pos: BTreeMap<Modality, Value>,
    neg: BTreeMap<Modality, Value>,
    pos_init: BTreeMap<Modality, Vec<bool>>,
    neg_init: BTreeMap<Modality, Vec<bool>>,
}

impl PrototypeBank {
    pub fn new(d_latent: usize, zeta: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "prototype momentum {momentum} outside [0, 1]"
            )));
        }
        if d_latent == 0 || zeta == 0 {
            return Err(Error::config("prototype bank needs d_latent > 0 and zeta > 0"));
        }
        let mut pos = BTreeMap::new();
        let mut neg = BTreeMap::new();
        let mut pos_init = BTreeMap::new();
        let mut neg_init = BTreeMap::new();
        for m in Modality::CONTENT {
            pos.insert(m, Value::zeros((zeta, d_latent)));
            neg.insert(m, Value::zeros((zeta, d_latent)));
            pos_init.insert(m, vec![false; zeta]);
            neg_init.insert(m, vec![false; zeta]);
        }
        Ok(PrototypeBank {
            d_latent,
            zeta,
            momentum,
            pos,
            neg,
            pos_init,
            neg_init,
        })
    }

    fn cell(&mut self, m: Modality, k: Polarity) -> (&mut Value, &mut Vec<bool>) {
        match k {
            Polarity::Pos => (
                self.pos.get_mut(&m).unwrap(),
                self.pos_init.get_mut(&m).unwrap(),
            ),
            Polarity::Neg => (
                self.neg.get_mut(&m).unwrap(),
                self.neg_init.get_mut(&m).unwrap(),
            ),
        }
    }

    pub fn matrix(&self, m: Modality, k: Polarity) -> &Value {
        match k {
            Polarity::Pos => &self.pos[&m],
            Polarity::Neg => &self.neg[&m],
        }
    }

    pub fn prototype(&self, m: Modality, j: usize, k: Polarity) -> Array1<f64> {
        self.matrix(m, k).row(j).to_owned()
    }

    pub fn initialized(&self, m: Modality, j: usize, k: Polarity) -> bool {
        match k {
            Polarity::Pos => self.pos_init[&m][j],
            Polarity::Neg => self.neg_init[&m][j],
        }
    }

    pub fn fully_initialized(&self, m: Modality) -> bool {
        (0..self.zeta)
            .all(|j| self.initialized(m, j, Polarity::Pos) && self.initialized(m, j, Polarity::Neg))
    }

    /// Fill any still-uninitialized cell with a deterministic random unit
    /// vector. Seeding is per cell, so the result does not depend on which
    /// cells happened to be initialized already.
    pub fn ensure_initialized(&mut self, seed: u64) {
        let zeta = self.zeta;
        let d = self.d_latent;
        for m in Modality::CONTENT {
            for k in Polarity::BOTH {
                for j in 0..zeta {
                    if self.initialized(m, j, k) {
                        continue;
                    }
                    let mut rng = context_rng(seed, &format!("bank/{m}/{j}/{}", k.as_str()));
                    let v = Array1::from_shape_fn(d, |_| standard_normal(&mut rng));
                    let v = unit(&v).expect("gaussian draw is degenerate");
                    let (mat, init) = self.cell(m, k);
                    mat.row_mut(j).assign(&v);
                    init[j] = true;
                }
            }
        }
    }

    /// Moving-average update from a batch of detached latent vectors.
    ///
    /// For every (label, polarity) with at least one batch member the cell
    /// moves toward the member mean and is renormalized; memberless cells
    /// are untouched. A degenerate (near-zero) member mean is skipped so
    /// prototypes stay unit-length.
    pub fn update(&mut self, m: Modality, z: &Value, labels: &Value) -> Result<()> {
        let (n, d) = z.dim();
        if d != self.d_latent {
            return Err(Error::data(format!(
                "latent width {d} does not match bank width {}",
                self.d_latent
            )));
        }
        if labels.dim() != (n, self.zeta) {
            return Err(Error::data(format!(
                "labels shaped {:?} for {n} embeddings of width {}",
                labels.dim(),
                self.zeta
            )));
        }
        // Rows are normalized defensively; callers should already pass unit
        // vectors.
        let mut zn = z.clone();
        for mut row in zn.rows_mut() {
            let owned = row.to_owned();
            if let Some(u) = unit(&owned) {
                row.assign(&u);
            }
        }
        let momentum = self.momentum;
        for j in 0..self.zeta {
            for k in Polarity::BOTH {
                let want = match k {
                    Polarity::Pos => 1.0,
                    Polarity::Neg => 0.0,
                };
                let members: Vec<usize> =
                    (0..n).filter(|&r| labels[(r, j)] == want).collect();
                if members.is_empty() {
                    continue;
                }
                let mut b = Array1::zeros(self.d_latent);
                for &r in &members {
                    b += &zn.row(r);
                }
                b /= members.len() as f64;
                let was_init = self.initialized(m, j, k);
                if was_init && momentum == 1.0 {
                    continue;
                }
                let blended = if was_init {
                    let old = self.prototype(m, j, k);
                    old * momentum + &(b * (1.0 - momentum))
                } else {
                    b
                };
                let Some(u) = unit(&blended) else { continue };
                let (mat, init) = self.cell(m, k);
                mat.row_mut(j).assign(&u);
                init[j] = true;
            }
        }
        Ok(())
    }
}

/// Per-modality projection of concatenated polarity summaries down to the
/// latent width.
pub struct DeltaProjector {
    proj: BTreeMap<Modality, Linear>,
}

impl DeltaProjector {
    pub fn new(store: &mut ParamStore, d_latent: usize, zeta: usize) -> Self {
        let mut proj = BTreeMap::new();
        for m in Modality::CONTENT {
            proj.insert(
                m,
                Linear::new(store, &format!("proto.proj.{m}"), zeta * d_latent, d_latent),
            );
        }
        DeltaProjector { proj }
    }

    pub fn project<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        m: Modality,
        deltas: Var<'t>,
    ) -> Var<'t> {
        self.proj[&m].forward(store, tape, deltas)
    }
}

/// Polarity attention for a batch of latents: per label, softmax over the
/// {pos, neg} prototype pair and the resulting convex combination.
///
/// Returns the positive-side weights `B × ζ` and the concatenated summaries
/// `B × (ζ·d_z)` in label order.
pub fn polarity_attention<'t>(
    bank: &PrototypeBank,
    tape: &'t Tape,
    m: Modality,
    z: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if !bank.fully_initialized(m) {
        return Err(Error::data(format!(
            "prototype bank for {m} has uninitialized cells"
        )));
    }
    let (n, d) = z.shape();
    if d != bank.d_latent {
        return Err(Error::data(format!(
            "latent width {d} does not match bank width {}",
            bank.d_latent
        )));
    }
    let mu_pos = bank.matrix(m, Polarity::Pos).clone();
    let mu_neg = bank.matrix(m, Polarity::Neg).clone();
    let s_pos = z.matmul(tape.constant(mu_pos.t().to_owned()));
    let s_neg = z.matmul(tape.constant(mu_neg.t().to_owned()));
    let o_pos = s_pos.sub(s_neg).sigmoid();
    let ones_col = tape.constant(Value::ones((n, 1)));
    let o_neg = ones_col.matmul(tape.constant(Value::ones((1, bank.zeta)))).sub(o_pos);
    let mut deltas = Vec::with_capacity(bank.zeta);
    for j in 0..bank.zeta {
        let row_pos = tape.constant(mu_pos.row(j).to_owned().insert_axis(Axis(0)));
        let row_neg = tape.constant(mu_neg.row(j).to_owned().insert_axis(Axis(0)));
        let part_pos = ones_col.matmul(row_pos).mul_col(o_pos.slice_cols(j, j + 1));
        let part_neg = ones_col.matmul(row_neg).mul_col(o_neg.slice_cols(j, j + 1));
        deltas.push(part_pos.add(part_neg));
    }
    Ok((o_pos, concat_cols(&deltas)))
}

/// Polarity attention followed by the projection head: the intrinsic vector
/// `D̃^m`, `B × d_z`.
pub fn intrinsic_vector<'t>(
    bank: &PrototypeBank,
    projector: &DeltaProjector,
    store: &ParamStore,
    tape: &'t Tape,
    m: Modality,
    z: Var<'t>,
) -> Result<Var<'t>> {
    let (_, deltas) = polarity_attention(bank, tape, m, z)?;
    Ok(projector.project(store, tape, m, deltas))
}

/// Supervised contrastive loss over a pooled embedding set.
///
/// Rows are L2-normalized internally; similarities are cosines divided by
/// the temperature. Anchors whose positive set is empty are skipped; the
/// result averages over contributing anchors.
pub fn supervised_contrastive_loss<'t>(
    z: Var<'t>,
    labels: &Value,
    eta: f64,
    mode: PositiveMode,
) -> Result<Var<'t>> {
    if eta <= 0.0 {
        return Err(Error::config(format!("temperature {eta} must be positive")));
    }
    let (n, _) = z.shape();
    if n < 2 {
        return Err(Error::data(format!(
            "contrastive set needs at least 2 embeddings, got {n}"
        )));
    }
    if labels.nrows() != n {
        return Err(Error::data(format!(
            "{} label rows for {n} embeddings",
            labels.nrows()
        )));
    }
    let tape = z.tape();
    let zn = z.normalize_rows();
    let sims = zn.matmul(zn.transpose()).scale(1.0 / eta);

    let mut not_self = Value::ones((n, n));
    for i in 0..n {
        not_self[(i, i)] = 0.0;
    }
    let mut pos_mask = Value::zeros((n, n));
    let mut pos_count = Value::zeros((n, 1));
    for i in 0..n {
        for p in 0..n {
            if p == i {
                continue;
            }
            let positive = match mode {
                PositiveMode::ShareAnyLabel => (0..labels.ncols())
                    .any(|j| labels[(i, j)] == 1.0 && labels[(p, j)] == 1.0),
                PositiveMode::ExactLabelSet => {
                    (0..labels.ncols()).all(|j| labels[(i, j)] == labels[(p, j)])
                }
            };
            if positive {
                pos_mask[(i, p)] = 1.0;
                pos_count[(i, 0)] += 1.0;
            }
        }
    }
    let contributors: Vec<usize> = (0..n).filter(|&i| pos_count[(i, 0)] > 0.0).collect();
    if contributors.is_empty() {
        return Err(Error::data("no anchor has a positive partner"));
    }
    let mut inv_count = Value::zeros((n, 1));
    let mut contrib = Value::zeros((n, 1));
    for &i in &contributors {
        inv_count[(i, 0)] = 1.0 / pos_count[(i, 0)];
        contrib[(i, 0)] = 1.0;
    }
    // Detached per-row max over non-self entries stabilizes the logsumexp;
    // the subtraction cancels analytically, so gradients are unaffected.
    let sims_val = sims.value();
    let mut row_max = Value::zeros((n, 1));
    for i in 0..n {
        let mut best = f64::NEG_INFINITY;
        for p in 0..n {
            if p != i && sims_val[(i, p)] > best {
                best = sims_val[(i, p)];
            }
        }
        row_max[(i, 0)] = best;
    }
    let row_max = tape.constant(row_max);
    let shifted = sims.add_col(row_max.neg());
    let exp_masked = shifted.exp().mul(tape.constant(not_self));
    let lse = exp_masked.sum_cols().ln().add(row_max);
    let pos_term = sims
        .mul(tape.constant(pos_mask))
        .sum_cols()
        .mul(tape.constant(inv_count));
    let per_anchor = lse.sub(pos_term).mul(tape.constant(contrib));
    Ok(per_anchor
        .sum_all()
        .scale(1.0 / contributors.len() as f64))
}
