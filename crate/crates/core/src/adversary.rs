//! Commonality/specificity disentanglement.
//!
//! Per-modality private encoders produce specificity vectors S^m, a shared
//! encoder produces commonality vectors C^m. A shared modality discriminator
//! is trained to recognize the source modality of S^m (plain classification)
//! and of C^m (through a gradient-reversal layer, so the shared encoder
//! learns to scrub modality identity). Three auxiliary pressures keep the
//! split honest: an orthogonality penalty between C and S, and a shared
//! multi-label head on C that keeps commonality label-informative.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Value, Var};
use crate::corpus::Modality;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore};

pub const PROB_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Private encoders, shared encoder, discriminator and the shared label head.
pub struct Adversary {
    pub d_model: usize,
    pub zeta: usize,
    private: BTreeMap<Modality, Mlp>,
    shared: Mlp,
    discriminator: Mlp,
    label_head: Linear,
}

impl Adversary {
    pub fn new(store: &mut ParamStore, d_model: usize, zeta: usize) -> Self {
        let mut private = BTreeMap::new();
        for m in Modality::CONTENT {
            private.insert(
                m,
                Mlp::new(store, &format!("adv.spec.{m}"), d_model, d_model, d_model),
            );
        }
        Adversary {
            d_model,
            zeta,
            private,
            shared: Mlp::new(store, "adv.common", d_model, d_model, d_model),
            discriminator: Mlp::new(store, "adv.disc", d_model, d_model, Modality::CONTENT.len()),
            label_head: Linear::new(store, "adv.labels", d_model, zeta),
        }
    }

    /// S^m = f^m(x), the modality-private projection.
    pub fn specificity<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        m: Modality,
        x: Var<'t>,
    ) -> Var<'t> {
        self.private[&m].forward(store, tape, x)
    }

    /// C^m = G(x), the shared projection.
    pub fn commonality<'t>(&self, store: &ParamStore, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        self.shared.forward(store, tape, x)
    }

    pub fn discriminator_logits<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        z: Var<'t>,
    ) -> Var<'t> {
        self.discriminator.forward(store, tape, z)
    }

    pub fn label_logits<'t>(&self, store: &ParamStore, tape: &'t Tape, c: Var<'t>) -> Var<'t> {
        self.label_head.forward(store, tape, c)
    }
}

fn check_finite(name: &str, v: &Var<'_>) -> Result<()> {
    if v.value().iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric(format!("{name} produced a non-finite value")));
    }
    Ok(())
}

/// Mean cross-entropy of logit rows against integer class targets.
///
/// Uses the log-softmax path; each row contributes `-log p(target)`.
pub fn cross_entropy_mean<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let (n, k) = logits.shape();
    if targets.len() != n {
        return Err(Error::data(format!(
            "{} logit rows but {} targets",
            n,
            targets.len()
        )));
    }
    check_finite("cross-entropy logits", &logits)?;
    let mut pick = Value::zeros((n, k));
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::data(format!("class {t} out of range {k}")));
        }
        pick[(r, t)] = 1.0;
    }
    let tape = logits.tape();
    let log_p = logits.log_softmax_rows();
    Ok(log_p
        .mul(tape.constant(pick))
        .sum_all()
        .scale(-1.0 / n as f64))
}

/// Modality classification loss over per-modality representation batches.
///
/// Every row of `reps[m]` has target class `content_index(m)`; the mean runs
/// over all rows of all modalities. `reverse_coeff` routes the representation
/// through gradient reversal first (the commonality branch); `None` trains
/// the discriminator cooperatively (the specificity branch).
pub fn modality_confusion_loss<'t>(
    adv: &Adversary,
    store: &ParamStore,
    tape: &'t Tape,
    reps: &BTreeMap<Modality, Var<'t>>,
    reverse_coeff: Option<f64>,
) -> Result<Var<'t>> {
    let mut parts = Vec::new();
    let mut targets = Vec::new();
    for m in Modality::CONTENT {
        let rep = *reps
            .get(&m)
            .ok_or_else(|| Error::data(format!("missing representation for {m}")))?;
        let routed = match reverse_coeff {
            Some(rho) => rep.grad_reverse(rho),
            None => rep,
        };
        parts.push(adv.discriminator_logits(store, tape, routed));
        let class = m
            .content_index()
            .ok_or_else(|| Error::data(format!("{m} is not a content modality")))?;
        targets.extend(std::iter::repeat(class).take(rep.shape().0));
    }
    let stacked = crate::autodiff::concat_rows(&parts);
    cross_entropy_mean(stacked, &targets)
}

/// Multi-label BCE on the shared label head over the commonality vectors.
///
/// Probabilities are clamped to `PROB_CLAMP`; the loss sums over labels and
/// averages over (sample, modality) rows.
pub fn commonality_label_loss<'t>(
    adv: &Adversary,
    store: &ParamStore,
    tape: &'t Tape,
    commonalities: &BTreeMap<Modality, Var<'t>>,
    labels: &Value,
) -> Result<Var<'t>> {
    let mut parts = Vec::new();
    for m in Modality::CONTENT {
        let c = *commonalities
            .get(&m)
            .ok_or_else(|| Error::data(format!("missing commonality for {m}")))?;
        check_finite("label head input", &c)?;
        parts.push(adv.label_logits(store, tape, c));
    }
    let logits = crate::autodiff::concat_rows(&parts);
    let (rows, zeta) = logits.shape();
    if labels.dim() != (rows / Modality::CONTENT.len(), zeta) {
        return Err(Error::data(format!(
            "labels shaped {:?}, expected ({}, {zeta})",
            labels.dim(),
            rows / Modality::CONTENT.len()
        )));
    }
    let mut y = Value::zeros((rows, zeta));
    for block in 0..Modality::CONTENT.len() {
        for r in 0..labels.nrows() {
            for c in 0..zeta {
                y[(block * labels.nrows() + r, c)] = labels[(r, c)];
            }
        }
    }
    binary_cross_entropy_rows(logits, &y)
}

/// Clamped BCE of sigmoid(logits) against 0/1 targets: sum over columns,
/// mean over rows.
pub fn binary_cross_entropy_rows<'t>(logits: Var<'t>, targets: &Value) -> Result<Var<'t>> {
    let (n, k) = logits.shape();
    if targets.dim() != (n, k) {
        return Err(Error::data(format!(
            "targets shaped {:?}, logits shaped ({n}, {k})",
            targets.dim()
        )));
    }
    check_finite("binary cross-entropy logits", &logits)?;
    let tape = logits.tape();
    let p = logits.sigmoid().clamp(PROB_CLAMP.0, PROB_CLAMP.1);
    let y = tape.constant(targets.clone());
    let ones = tape.constant(Value::ones((n, k)));
    let term = y.mul(p.ln()).add(ones.sub(y).mul(ones.sub(p).ln()));
    Ok(term.sum_all().scale(-1.0 / n as f64))
}

/// Mean squared inner product between paired commonality and specificity
/// rows, averaged over (sample, modality).
pub fn orthogonality_loss<'t>(
    commonalities: &BTreeMap<Modality, Var<'t>>,
    specificities: &BTreeMap<Modality, Var<'t>>,
) -> Result<Var<'t>> {
    let mut total: Option<Var<'_>> = None;
    let mut rows = 0usize;
    for m in Modality::CONTENT {
        let c = *commonalities
            .get(&m)
            .ok_or_else(|| Error::data(format!("missing commonality for {m}")))?;
        let s = *specificities
            .get(&m)
            .ok_or_else(|| Error::data(format!("missing specificity for {m}")))?;
        if c.shape() != s.shape() {
            return Err(Error::data(format!(
                "commonality {:?} and specificity {:?} disagree for {m}",
                c.shape(),
                s.shape()
            )));
        }
        rows += c.shape().0;
        let dot = c.mul(s).sum_cols().square().sum_all();
        total = Some(match total {
            Some(t) => t.add(dot),
            None => dot,
        });
    }
    let total = total.ok_or_else(|| Error::data("no modalities to compare"))?;
    Ok(total.scale(1.0 / rows as f64))
}

/// Decomposed adversarial objective.
pub struct AdversarialLoss<'t> {
    pub confusion: Var<'t>,
    pub specificity: Var<'t>,
    pub orthogonality: Var<'t>,
    pub label: Var<'t>,
    pub total: Var<'t>,
}

/// λ_a·(L_C + L_S) + λ_o·L_orth + λ_c·L_cml, with L_C routed through
/// gradient reversal at strength `rho`.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_loss<'t>(
    adv: &Adversary,
    store: &ParamStore,
    tape: &'t Tape,
    commonalities: &BTreeMap<Modality, Var<'t>>,
    specificities: &BTreeMap<Modality, Var<'t>>,
    labels: &Value,
    rho: f64,
    lambda_a: f64,
    lambda_o: f64,
    lambda_c: f64,
) -> Result<AdversarialLoss<'t>> {
    let confusion = modality_confusion_loss(adv, store, tape, commonalities, Some(rho))?;
    let specificity = modality_confusion_loss(adv, store, tape, specificities, None)?;
    let orthogonality = orthogonality_loss(commonalities, specificities)?;
    let label = commonality_label_loss(adv, store, tape, commonalities, labels)?;
    let total = confusion
        .add(specificity)
        .scale(lambda_a)
        .add(orthogonality.scale(lambda_o))
        .add(label.scale(lambda_c));
    Ok(AdversarialLoss {
        confusion,
        specificity,
        orthogonality,
        label,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{max_rel_error, numeric_grad};
    use crate::nn::{context_rng, Adam};
    use ndarray::array;
    use rand::Rng;

    fn rand_value(shape: (usize, usize), seed: u64) -> Value {
        let mut rng = context_rng(seed, "adversary-test");
        Value::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Param id reserved for FD probes; far above any store-assigned id.
    const PROBE: usize = 1 << 40;

    #[test]
    fn cross_entropy_hand_values() {
        let tape = Tape::new();
        // One-hot-confident rows give zero loss up to the softmax itself:
        // use widely separated logits so p(target) ~ 1.
        let logits = tape.constant(array![[50.0, 0.0, 0.0]]);
        let loss = cross_entropy_mean(logits, &[0]).unwrap().value()[(0, 0)];
        assert!(loss.abs() < 1e-6);

        // Uniform logits: -ln(1/3).
        let logits = tape.constant(array![[2.0, 2.0, 2.0], [0.0, 0.0, 0.0]]);
        let loss = cross_entropy_mean(logits, &[1, 2]).unwrap().value()[(0, 0)];
        assert!((loss - 3.0f64.ln()).abs() < 1e-6);

        // p(target) = 0.7 costs -ln 0.7.
        let p: f64 = 0.7;
        let other = ((1.0 - p) / 2.0f64).ln();
        let logits = tape.constant(array![[p.ln(), other, other]]);
        let loss = cross_entropy_mean(logits, &[0]).unwrap().value()[(0, 0)];
        assert!((loss - (-p.ln())).abs() < 1e-6, "got {loss}");
    }

    #[test]
    fn bce_hand_values() {
        let tape = Tape::new();
        // sigmoid(0) = 0.5 for every label: zeta * ln 2.
        let logits = tape.constant(Value::zeros((4, 6)));
        let targets = Value::from_shape_fn((4, 6), |(r, c)| ((r + c) % 2) as f64);
        let loss = binary_cross_entropy_rows(logits, &targets).unwrap().value()[(0, 0)];
        assert!((loss - 6.0 * 2.0f64.ln()).abs() < 1e-6);

        // Hand case: p = (0.9, 0.2), y = (1, 0).
        let logits = tape.constant(array![[(0.9f64 / 0.1).ln(), (0.2f64 / 0.8).ln()]]);
        let targets = array![[1.0, 0.0]];
        let loss = binary_cross_entropy_rows(logits, &targets).unwrap().value()[(0, 0)];
        let expect = -(0.9f64.ln()) - (0.8f64.ln());
        assert!((loss - expect).abs() < 1e-6);
    }

    #[test]
    fn orthogonality_hand_value_and_invariances() {
        let tape = Tape::new();
        let mut cs = BTreeMap::new();
        let mut ss = BTreeMap::new();
        // Single sample per modality; identical pairs across modalities.
        // (c . s) = 11 for each, so loss = 121.
        for m in Modality::CONTENT {
            cs.insert(m, tape.constant(array![[1.0, 2.0, 3.0]]));
            ss.insert(m, tape.constant(array![[3.0, 1.0, 2.0]]));
        }
        let loss = orthogonality_loss(&cs, &ss).unwrap().value()[(0, 0)];
        assert!((loss - 121.0).abs() < 1e-9);

        // Sign flip of one side leaves the square unchanged.
        let mut ss_neg = BTreeMap::new();
        for m in Modality::CONTENT {
            ss_neg.insert(m, tape.constant(array![[-3.0, -1.0, -2.0]]));
        }
        let flipped = orthogonality_loss(&cs, &ss_neg).unwrap().value()[(0, 0)];
        assert_eq!(loss, flipped);

        // Orthogonal pairs vanish exactly.
        let mut ss_orth = BTreeMap::new();
        for m in Modality::CONTENT {
            ss_orth.insert(m, tape.constant(array![[2.0, -1.0, 0.0]]));
        }
        let zero = orthogonality_loss(&cs, &ss_orth).unwrap().value()[(0, 0)];
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn orthogonality_mixed_batch_mean() {
        let tape = Tape::new();
        let mut cs = BTreeMap::new();
        let mut ss = BTreeMap::new();
        for (i, m) in Modality::CONTENT.into_iter().enumerate() {
            let k = i as f64 + 1.0;
            cs.insert(m, tape.constant(array![[k, 0.0], [0.0, k]]));
            ss.insert(m, tape.constant(array![[1.0, 1.0], [2.0, 0.0]]));
        }
        // Row dots: modality i gives (k, 0) with k = i+1, squares (k^2, 0).
        let expect = (1.0 + 4.0 + 9.0) / 6.0;
        let loss = orthogonality_loss(&cs, &ss).unwrap().value()[(0, 0)];
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn confusion_loss_gradients_check_out() {
        let mut store = ParamStore::new(5);
        let adv = Adversary::new(&mut store, 6, 4);
        let x = rand_value((3, 6), 1);
        // FD through the raw input for both branches.
        for reversed in [false, true] {
            let f = |v: &Value| {
                let tape = Tape::new();
                let mut reps = BTreeMap::new();
                for m in Modality::CONTENT {
                    let rep = if m == Modality::Visual {
                        tape.constant(v.clone())
                    } else {
                        tape.constant(rand_value((3, 6), 10 + m.content_index().unwrap() as u64))
                    };
                    reps.insert(m, rep);
                }
                let coeff = if reversed { Some(1.0) } else { None };
                modality_confusion_loss(&adv, &store, &tape, &reps, coeff)
                    .unwrap()
                    .value()[(0, 0)]
            };
            let tape = Tape::new();
            let mut reps = BTreeMap::new();
            let probe = tape.param(PROBE, x.clone());
            for m in Modality::CONTENT {
                let rep = if m == Modality::Visual {
                    probe
                } else {
                    tape.constant(rand_value((3, 6), 10 + m.content_index().unwrap() as u64))
                };
                reps.insert(m, rep);
            }
            let coeff = if reversed { Some(1.0) } else { None };
            let loss = modality_confusion_loss(&adv, &store, &tape, &reps, coeff).unwrap();
            let grads = tape.backward(loss);
            let analytic = grads.param(PROBE).unwrap();
            let numeric = numeric_grad(f, &x, 1e-5);
            // The loss value ignores reversal; the input gradient must flip.
            let compare = if reversed {
                numeric.mapv(|g| -g)
            } else {
                numeric
            };
            assert!(max_rel_error(analytic, &compare) < 1e-4);
        }
    }

    #[test]
    fn label_loss_gradient_checks_out() {
        let mut store = ParamStore::new(6);
        let adv = Adversary::new(&mut store, 5, 3);
        let labels = Value::from_shape_fn((2, 3), |(r, c)| ((r * c) % 2) as f64);
        let x = rand_value((2, 5), 2);
        let f = |v: &Value| {
            let tape = Tape::new();
            let mut cs = BTreeMap::new();
            for m in Modality::CONTENT {
                let c = if m == Modality::Textual {
                    tape.constant(v.clone())
                } else {
                    tape.constant(rand_value((2, 5), 20 + m.content_index().unwrap() as u64))
                };
                cs.insert(m, c);
            }
            commonality_label_loss(&adv, &store, &tape, &cs, &labels)
                .unwrap()
                .value()[(0, 0)]
        };
        let tape = Tape::new();
        let probe = tape.param(PROBE, x.clone());
        let mut cs = BTreeMap::new();
        for m in Modality::CONTENT {
            let c = if m == Modality::Textual {
                probe
            } else {
                tape.constant(rand_value((2, 5), 20 + m.content_index().unwrap() as u64))
            };
            cs.insert(m, c);
        }
        let loss = commonality_label_loss(&adv, &store, &tape, &cs, &labels).unwrap();
        let grads = tape.backward(loss);
        let analytic = grads.param(PROBE).unwrap();
        let numeric = numeric_grad(f, &x, 1e-5);
        assert!(max_rel_error(analytic, &numeric) < 1e-4);
    }

    #[test]
    fn orthogonality_gradient_checks_out() {
        let x = rand_value((4, 5), 3);
        let other = rand_value((4, 5), 4);
        let f = |v: &Value| {
            let tape = Tape::new();
            let mut cs = BTreeMap::new();
            let mut ss = BTreeMap::new();
            for m in Modality::CONTENT {
                cs.insert(m, tape.constant(v.clone()));
                ss.insert(m, tape.constant(other.clone()));
            }
            orthogonality_loss(&cs, &ss).unwrap().value()[(0, 0)]
        };
        let tape = Tape::new();
        let probe = tape.param(PROBE, x.clone());
        let mut cs = BTreeMap::new();
        let mut ss = BTreeMap::new();
        for m in Modality::CONTENT {
            cs.insert(m, probe);
            ss.insert(m, tape.constant(other.clone()));
        }
        let loss = orthogonality_loss(&cs, &ss).unwrap();
        let grads = tape.backward(loss);
        let analytic = grads.param(PROBE).unwrap();
        let numeric = numeric_grad(f, &x, 1e-5);
        assert!(max_rel_error(analytic, &numeric) < 1e-4);
    }

    #[test]
    fn composite_matches_weighted_sum() {
        let mut store = ParamStore::new(7);
        let adv = Adversary::new(&mut store, 6, 4);
        let tape = Tape::new();
        let labels = Value::from_shape_fn((3, 4), |(r, c)| ((r + c) % 2) as f64);
        let mut cs = BTreeMap::new();
        let mut ss = BTreeMap::new();
        for (i, m) in Modality::CONTENT.into_iter().enumerate() {
            let x = tape.constant(rand_value((3, 6), 30 + i as u64));
            cs.insert(m, adv.commonality(&store, &tape, x));
            ss.insert(m, adv.specificity(&store, &tape, m, x));
        }
        let (la, lo, lc) = (0.6, 0.25, 1.4);
        let out =
            adversarial_loss(&adv, &store, &tape, &cs, &ss, &labels, 1.0, la, lo, lc).unwrap();
        let composed = la * (out.confusion.value()[(0, 0)] + out.specificity.value()[(0, 0)])
            + lo * out.orthogonality.value()[(0, 0)]
            + lc * out.label.value()[(0, 0)];
        assert!((out.total.value()[(0, 0)] - composed).abs() < 1e-6);
    }

    #[test]
    fn reversal_scales_upstream_parameter_gradients() {
        // d(loss)/d(shared encoder) with reversal at rho must equal
        // -rho * the same gradient without reversal.
        let mut store = ParamStore::new(8);
        let adv = Adversary::new(&mut store, 5, 3);
        let rho = 0.7;
        let grad_at = |coeff: Option<f64>| {
            let tape = Tape::new();
            let mut cs = BTreeMap::new();
            for (i, m) in Modality::CONTENT.into_iter().enumerate() {
                let x = tape.constant(rand_value((4, 5), 40 + i as u64));
                cs.insert(m, adv.commonality(&store, &tape, x));
            }
            let loss = modality_confusion_loss(&adv, &store, &tape, &cs, coeff).unwrap();
            let grads = tape.backward(loss);
            grads
                .param(store.id_of("adv.common.fc1.w").unwrap())
                .unwrap()
                .clone()
        };
        let plain = grad_at(None);
        let reversed = grad_at(Some(rho));
        let scaled = plain.mapv(|g| -rho * g);
        assert!(max_rel_error(&reversed, &scaled) < 1e-10);
    }

    #[test]
    fn discriminator_alone_separates_separable_batches() {
        // Representations drawn from three well-separated Gaussians; training
        // only the discriminator must reach high accuracy.
        let mut store = ParamStore::new(9);
        let adv = Adversary::new(&mut store, 4, 2);
        let mut opt = Adam::new(0.01);
        let make_reps = |seed: u64| {
            let mut out = BTreeMap::new();
            let mut rng = context_rng(seed, "disc-probe");
            for (i, m) in Modality::CONTENT.into_iter().enumerate() {
                let center = 3.0 * i as f64 - 3.0;
                out.insert(
                    m,
                    Value::from_shape_fn((16, 4), |_| center + 0.3 * rng.random_range(-1.0..1.0)),
                );
            }
            out
        };
        for step in 0..120 {
            let tape = Tape::new();
            let reps = make_reps(step)
                .into_iter()
                .map(|(m, v)| (m, tape.constant(v)))
                .collect();
            let loss = modality_confusion_loss(&adv, &store, &tape, &reps, None).unwrap();
            let grads = tape.backward(loss);
            opt.step(&mut store, &grads.into_map());
        }
        let tape = Tape::new();
        let mut correct = 0usize;
        let mut total = 0usize;
        for (m, v) in make_reps(999) {
            let logits = adv
                .discriminator_logits(&store, &tape, tape.constant(v))
                .value();
            for r in 0..logits.nrows() {
                let mut best = 0;
                for k in 1..logits.ncols() {
                    if logits[(r, k)] > logits[(r, best)] {
                        best = k;
                    }
                }
                if best == m.content_index().unwrap() {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert!(
            correct as f64 / total as f64 >= 0.95,
            "accuracy {}/{total}",
            correct
        );
    }

    #[test]
    fn non_finite_logits_are_a_numeric_error() {
        let tape = Tape::new();
        let logits = tape.constant(array![[f64::NAN, 0.0, 0.0]]);
        assert!(matches!(
            cross_entropy_mean(logits, &[0]),
            Err(Error::Numeric(_))
        ));
        let logits = tape.constant(array![[f64::INFINITY, 0.0]]);
        let targets = array![[1.0, 0.0]];
        assert!(matches!(
            binary_cross_entropy_rows(logits, &targets),
            Err(Error::Numeric(_))
        ));
    }
}
