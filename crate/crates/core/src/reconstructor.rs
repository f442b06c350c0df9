//! Two-level reconstruction of incomplete modalities.
//!
//! Per-modality encoder/decoder pairs map pooled features to a latent space
//! and back; the decoded X̃_α recovers what the encoder kept. The first
//! generation level combines a modality's prototype summary with the decoded
//! features of the other two modalities to synthesize x_β, a version of the
//! modality rebuilt from cross-modal evidence. The second level refines that
//! into x_γ. Both generators are shared across modalities; only the
//! encoder/decoder pairs are private.

use std::collections::BTreeMap;

use crate::adversary::binary_cross_entropy_rows;
use crate::autodiff::{concat_cols, concat_rows, Tape, Value, Var};
use crate::corpus::{FusionOrder, Modality};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore};

/// The three feature spaces a sample vector can live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Space {
    Alpha,
    Beta,
    Gamma,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Alpha, Space::Beta, Space::Gamma];

    pub fn as_str(&self) -> &'static str {
        match self {
            Space::Alpha => "alpha",
            Space::Beta => "beta",
            Space::Gamma => "gamma",
        }
    }
}

impl std::fmt::Display for Space {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub struct Reconstructor {
    pub d_model: usize,
    pub d_latent: usize,
    enc: BTreeMap<Modality, Linear>,
    dec: BTreeMap<Modality, Linear>,
    gen1: Mlp,
    gen2: Mlp,
    heads: BTreeMap<Space, Linear>,
}

impl Reconstructor {
    pub fn new(store: &mut ParamStore, d_model: usize, d_latent: usize, zeta: usize) -> Self {
        let mut enc = BTreeMap::new();
        let mut dec = BTreeMap::new();
        for m in Modality::CONTENT {
            enc.insert(m, Linear::new(store, &format!("rec.enc.{m}"), d_model, d_latent));
            dec.insert(m, Linear::new(store, &format!("rec.dec.{m}"), d_latent, d_model));
        }
        let gen_in = d_latent + 2 * d_model;
        let mut heads = BTreeMap::new();
        for s in Space::ALL {
            heads.insert(s, Linear::new(store, &format!("rec.head.{s}"), d_model, zeta));
        }
        Reconstructor {
            d_model,
            d_latent,
            enc,
            dec,
            gen1: Mlp::new(store, "rec.g1", gen_in, d_model, d_model),
            gen2: Mlp::new(store, "rec.g2", d_model, d_model, d_model),
            heads,
        }
    }

    /// Z^m = ε^m(x): latent projection, a single affine map.
    pub fn encode<'t>(&self, store: &ParamStore, tape: &'t Tape, m: Modality, x: Var<'t>) -> Var<'t> {
        self.enc[&m].forward(store, tape, x)
    }

    /// X̃ = d^m(z): decoded features, a single affine map.
    pub fn decode<'t>(&self, store: &ParamStore, tape: &'t Tape, m: Modality, z: Var<'t>) -> Var<'t> {
        self.dec[&m].forward(store, tape, z)
    }

    /// (Z^m, X̃^m) in one call.
    pub fn autoencode<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        m: Modality,
        x: Var<'t>,
    ) -> (Var<'t>, Var<'t>) {
        let z = self.encode(store, tape, m, x);
        (z, self.decode(store, tape, m, z))
    }

    /// First-level generation: x_β^m from the modality's prototype summary
    /// and the decoded features of its two fusion partners.
    pub fn generate_beta<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        delta: Var<'t>,
        partner_a: Var<'t>,
        partner_b: Var<'t>,
    ) -> Result<Var<'t>> {
        if delta.shape().1 != self.d_latent {
            return Err(Error::data(format!(
                "prototype summary width {} does not match latent width {}",
                delta.shape().1,
                self.d_latent
            )));
        }
        for (label, v) in [("first", partner_a), ("second", partner_b)] {
            if v.shape().1 != self.d_model {
                return Err(Error::data(format!(
                    "{label} partner width {} does not match feature width {}",
                    v.shape().1,
                    self.d_model
                )));
            }
        }
        Ok(self
            .gen1
            .forward(store, tape, concat_cols(&[delta, partner_a, partner_b])))
    }

    /// Second-level refinement: x_γ = g₂(x_β).
    pub fn generate_gamma<'t>(&self, store: &ParamStore, tape: &'t Tape, x_beta: Var<'t>) -> Var<'t> {
        self.gen2.forward(store, tape, x_beta)
    }

    /// Decoded partner inputs for modality `m` under the given fusion order.
    pub fn partner_inputs<'t>(
        &self,
        m: Modality,
        order: &FusionOrder,
        decoded: &BTreeMap<Modality, Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (a, b) = order.partners(m)?;
        let va = *decoded
            .get(&a)
            .ok_or_else(|| Error::data(format!("no decoded features for {a}")))?;
        let vb = *decoded
            .get(&b)
            .ok_or_else(|| Error::data(format!("no decoded features for {b}")))?;
        Ok((va, vb))
    }

    /// Label logits of one space head applied to a `B × d` batch.
    pub fn head_logits<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        space: Space,
        x: Var<'t>,
    ) -> Var<'t> {
        self.heads[&space].forward(store, tape, x)
    }

    /// Multi-label loss of one space: per-modality head logits fused by
    /// elementwise max, then clamped BCE (sum over labels, mean over batch).
    pub fn space_loss<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        space: Space,
        vectors: &BTreeMap<Modality, Var<'t>>,
        labels: &Value,
    ) -> Result<Var<'t>> {
        let logits: Vec<Var<'t>> = vectors
            .values()
            .map(|&v| self.head_logits(store, tape, space, v))
            .collect();
        let fused = elementwise_max(&logits)?;
        binary_cross_entropy_rows(fused, labels)
    }
}

/// Elementwise maximum across same-shaped matrices. Gradient flows to the
/// first argument attaining the maximum.
pub fn elementwise_max<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = *parts
        .first()
        .ok_or_else(|| Error::data("elementwise max of an empty set"))?;
    if parts.len() == 1 {
        return Ok(first);
    }
    let (n, _) = first.shape();
    for p in parts {
        if p.shape() != first.shape() {
            return Err(Error::data(format!(
                "elementwise max over mixed shapes {:?} and {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    // Interleave rows so each group of k consecutive rows holds one sample's
    // candidates, then max-pool the groups.
    let stacked = concat_rows(parts);
    let k = parts.len();
    let mut index = Vec::with_capacity(n * k);
    for r in 0..n {
        for p in 0..k {
            index.push(p * n + r);
        }
    }
    Ok(stacked.gather_rows(&index).max_pool_groups(k))
}

/// Reconstruction objective: for each modality, the per-sample L2 distance
/// between clean pooled features and the decoded X̃, plus the distance to the
/// cross-modal x_β. Sums over modalities, averages over the batch. Samples
/// whose modality was absent before augmentation contribute nothing for that
/// modality.
pub fn reconstruction_loss<'t>(
    targets: &BTreeMap<Modality, Value>,
    decoded: &BTreeMap<Modality, Var<'t>>,
    generated: &BTreeMap<Modality, Var<'t>>,
    counted: &BTreeMap<Modality, Vec<bool>>,
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    let mut batch = 0usize;
    for (&m, target) in targets {
        let x_tilde = *decoded
            .get(&m)
            .ok_or_else(|| Error::data(format!("no decoded features for {m}")))?;
        let x_beta = *generated
            .get(&m)
            .ok_or_else(|| Error::data(format!("no generated features for {m}")))?;
        let tape = x_tilde.tape();
        let (n, d) = x_tilde.shape();
        if target.dim() != (n, d) || x_beta.shape() != (n, d) {
            return Err(Error::data(format!(
                "reconstruction shapes disagree for {m}: target {:?}, decoded {:?}, generated {:?}",
                target.dim(),
                x_tilde.shape(),
                x_beta.shape()
            )));
        }
        batch = n;
        let flags = counted
            .get(&m)
            .ok_or_else(|| Error::data(format!("no presence flags for {m}")))?;
        if flags.len() != n {
            return Err(Error::data(format!(
                "{} presence flags for {n} samples of {m}",
                flags.len()
            )));
        }
        let mask = Value::from_shape_fn((n, 1), |(r, _)| if flags[r] { 1.0 } else { 0.0 });
        let t = tape.constant(target.clone());
        let mask = tape.constant(mask);
        let d1 = t.sub(x_tilde).square().sum_cols().sqrt().mul(mask);
        let d2 = t.sub(x_beta).square().sum_cols().sqrt().mul(mask);
        let term = d1.add(d2).sum_all();
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::data("reconstruction loss over no modalities"))?;
    Ok(total.scale(1.0 / batch as f64))
}
