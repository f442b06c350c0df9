//! Stack-shuffle augmentation over commonality/specificity rows.
//!
//! Two deterministic recombinations run on the per-modality feature rows
//! (each row is one sample's concat(C, S)). The sample-wise pass splits the
//! batch into k contiguous stacks and rotates each stack by a per-modality
//! amount, so one augmented row index draws different source samples per
//! modality. The modality-wise pass then rotates the three modality blocks
//! across slots by (row mod 3). Labels always travel with the features they
//! describe, which is what makes the recombination a usable training signal
//! rather than a relabeling.

use std::collections::BTreeMap;

use crate::adversary::binary_cross_entropy_rows;
use crate::autodiff::{Tape, Value, Var};
use crate::corpus::Modality;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShuffleSpec {
    /// Number of contiguous sample stacks.
    pub k: usize,
    /// Pop-append iterations per stack; the per-modality rotation is
    /// `rounds * slot_index(m)`.
    pub rounds: usize,
    pub enable_sample_wise: bool,
    pub enable_modality_wise: bool,
}

impl Default for ShuffleSpec {
    fn default() -> Self {
        ShuffleSpec {
            k: 4,
            rounds: 1,
            enable_sample_wise: true,
            enable_modality_wise: true,
        }
    }
}

impl ShuffleSpec {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 || self.k > n {
            return Err(Error::config(format!(
                "stack count {} outside 1..={n}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Where each shuffled cell came from; enough to replay both passes.
#[derive(Clone, Debug)]
pub struct ShuffleRecord {
    /// Modality slots in canonical order.
    pub slots: Vec<Modality>,
    /// Per modality: destination row -> source row of the sample-wise pass.
    pub sample_perm: BTreeMap<Modality, Vec<usize>>,
    /// Per row: how many slot positions the modality blocks rotated.
    pub block_rotation: Vec<usize>,
}

impl ShuffleRecord {
    /// The (modality, sample row) whose features ended up in `slot` at `row`.
    pub fn source_of(&self, slot: Modality, row: usize) -> (Modality, usize) {
        let pos = self
            .slots
            .iter()
            .position(|&m| m == slot)
            .expect("slot not part of this shuffle");
        let rho = self.block_rotation[row];
        let src = self.slots[(pos + rho) % self.slots.len()];
        (src, self.sample_perm[&src][row])
    }
}

/// Augmented views: shuffled rows and the labels of their source samples.
pub struct ShuffledViews<'t> {
    pub views: BTreeMap<Modality, Var<'t>>,
    pub label_map: BTreeMap<Modality, Value>,
    pub record: ShuffleRecord,
}

/// Destination-to-source permutation of the stack rotation: `k` contiguous
/// stacks (the first `n % k` one row larger), each rotated by `rotations`
/// pop-append steps.
pub fn stack_permutation(n: usize, k: usize, rotations: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::config(format!("stack count {k} outside 1..={n}")));
    }
    let base = n / k;
    let extra = n % k;
    let mut perm = Vec::with_capacity(n);
    let mut start = 0usize;
    for stack in 0..k {
        let size = base + usize::from(stack < extra);
        for i in 0..size {
            perm.push(start + (i + rotations) % size);
        }
        start += size;
    }
    Ok(perm)
}

fn uniform_shape<'t>(features: &BTreeMap<Modality, Var<'t>>) -> Result<(usize, usize)> {
    let mut shape = None;
    for (&m, v) in features {
        match shape {
            None => shape = Some(v.shape()),
            Some(s) if s != v.shape() => {
                return Err(Error::data(format!(
                    "feature rows for {m} shaped {:?}, expected {s:?}",
                    v.shape()
                )))
            }
            _ => {}
        }
    }
    shape.ok_or_else(|| Error::data("no modalities to shuffle"))
}

/// Rotate the modality blocks of each row by `rho_of_row` slot positions,
/// slots in canonical content order. Slot i of the output takes its row from
/// slot (i + rho) of the input.
pub fn rotate_modality_blocks<'t>(
    tape: &'t Tape,
    views: &BTreeMap<Modality, Var<'t>>,
    rho_of_row: &[usize],
) -> Result<BTreeMap<Modality, Var<'t>>> {
    let slots: Vec<Modality> = views.keys().copied().collect();
    rotate_blocks_ordered(tape, views, rho_of_row, &slots)
}

fn rotate_blocks_ordered<'t>(
    tape: &'t Tape,
    views: &BTreeMap<Modality, Var<'t>>,
    rho_of_row: &[usize],
    slots: &[Modality],
) -> Result<BTreeMap<Modality, Var<'t>>> {
    let (n, _) = uniform_shape(views)?;
    if rho_of_row.len() != n {
        return Err(Error::data(format!(
            "{} rotations for {n} rows",
            rho_of_row.len()
        )));
    }
    let l = slots.len();
    let mut out = BTreeMap::new();
    for (pos, &slot) in slots.iter().enumerate() {
        let mut acc: Option<Var<'t>> = None;
        for rho in 0..l {
            let src = views[&slots[(pos + rho) % l]];
            let mask = Value::from_shape_fn((n, 1), |(r, _)| {
                if rho_of_row[r] % l == rho {
                    1.0
                } else {
                    0.0
                }
            });
            let term = src.mul_col(tape.constant(mask));
            acc = Some(match acc {
                Some(a) => a.add(term),
                None => term,
            });
        }
        out.insert(slot, acc.unwrap());
    }
    Ok(out)
}

/// Run the enabled shuffle passes over per-modality feature rows, slots in
/// canonical content order.
///
/// `labels` holds one row per source sample, in batch order.
pub fn apply_shuffle<'t>(
    tape: &'t Tape,
    spec: &ShuffleSpec,
    features: &BTreeMap<Modality, Var<'t>>,
    labels: &Value,
) -> Result<ShuffledViews<'t>> {
    let slots: Vec<Modality> = features.keys().copied().collect();
    apply_shuffle_ordered(tape, spec, features, labels, &slots)
}

/// [`apply_shuffle`] with an explicit slot order. Rotation offsets and block
/// rotation neighbors follow the given order, which is how alternative
/// fusion orders reach the shuffle.
pub fn apply_shuffle_ordered<'t>(
    tape: &'t Tape,
    spec: &ShuffleSpec,
    features: &BTreeMap<Modality, Var<'t>>,
    labels: &Value,
    slots: &[Modality],
) -> Result<ShuffledViews<'t>> {
    let (n, _) = uniform_shape(features)?;
    if labels.nrows() != n {
        return Err(Error::data(format!(
            "{} label rows for {n} feature rows",
            labels.nrows()
        )));
    }
    if slots.len() != features.len() || slots.iter().any(|m| !features.contains_key(m)) {
        return Err(Error::data(format!(
            "slot order {slots:?} does not cover the shuffled modalities"
        )));
    }
    let slots: Vec<Modality> = slots.to_vec();

    let mut sample_perm = BTreeMap::new();
    let mut staged = BTreeMap::new();
    let mut staged_labels = BTreeMap::new();
    for (idx, &m) in slots.iter().enumerate() {
        let perm = if spec.enable_sample_wise {
            spec.validate(n)?;
            stack_permutation(n, spec.k, spec.rounds * idx)?
        } else {
            (0..n).collect()
        };
        let rows = if perm.iter().enumerate().all(|(d, &s)| d == s) {
            features[&m]
        } else {
            features[&m].gather_rows(&perm)
        };
        let mut lab = Value::zeros((n, labels.ncols()));
        for (dst, &src) in perm.iter().enumerate() {
            lab.row_mut(dst).assign(&labels.row(src));
        }
        staged.insert(m, rows);
        staged_labels.insert(m, lab);
        sample_perm.insert(m, perm);
    }

    let block_rotation: Vec<usize> = if spec.enable_modality_wise {
        (0..n).map(|r| r % slots.len()).collect()
    } else {
        vec![0; n]
    };
    let (views, label_map) = if spec.enable_modality_wise {
        let rotated = rotate_blocks_ordered(tape, &staged, &block_rotation, &slots)?;
        let mut label_map = BTreeMap::new();
        for (pos, &slot) in slots.iter().enumerate() {
            let mut lab = Value::zeros((n, labels.ncols()));
            for r in 0..n {
                let src = slots[(pos + block_rotation[r]) % slots.len()];
                lab.row_mut(r).assign(&staged_labels[&src].row(r));
            }
            label_map.insert(slot, lab);
        }
        (rotated, label_map)
    } else {
        (staged, staged_labels)
    };

    Ok(ShuffledViews {
        views,
        label_map,
        record: ShuffleRecord {
            slots,
            sample_perm,
            block_rotation,
        },
    })
}

/// The shared multi-label classifier applied to shuffled (or plain) rows.
pub struct ShuffleClassifier {
    cls: Linear,
    pub in_dim: usize,
    pub zeta: usize,
}

impl ShuffleClassifier {
    pub fn new(store: &mut ParamStore, d_model: usize, zeta: usize) -> Self {
        ShuffleClassifier {
            cls: Linear::new(store, "shuffle.cls", 2 * d_model, zeta),
            in_dim: 2 * d_model,
            zeta,
        }
    }

    pub fn logits<'t>(&self, store: &ParamStore, tape: &'t Tape, rows: Var<'t>) -> Result<Var<'t>> {
        if rows.shape().1 != self.in_dim {
            return Err(Error::data(format!(
                "classifier input width {} does not match {}",
                rows.shape().1,
                self.in_dim
            )));
        }
        Ok(self.cls.forward(store, tape, rows))
    }

    pub fn probabilities<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        rows: Var<'t>,
    ) -> Result<Var<'t>> {
        Ok(self.logits(store, tape, rows)?.sigmoid())
    }

    /// Multi-label loss over the shuffled views: clamped BCE summed over
    /// labels and modalities, averaged over rows.
    pub fn shuffled_loss<'t>(
        &self,
        store: &ParamStore,
        tape: &'t Tape,
        views: &ShuffledViews<'t>,
    ) -> Result<Var<'t>> {
        let mut total: Option<Var<'t>> = None;
        for (&m, &rows) in &views.views {
            let logits = self.logits(store, tape, rows)?;
            let term = binary_cross_entropy_rows(logits, &views.label_map[&m])?;
            total = Some(match total {
                Some(t) => t.add(term),
                None => term,
            });
        }
        total.ok_or_else(|| Error::data("no views to classify"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::context_rng;
    use rand::Rng;

    fn rand_value(shape: (usize, usize), seed: u64) -> Value {
        let mut rng = context_rng(seed, "shuffle-test");
        Value::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn content_features<'t>(
        tape: &'t Tape,
        n: usize,
        width: usize,
        seed: u64,
    ) -> BTreeMap<Modality, Var<'t>> {
        Modality::CONTENT
            .into_iter()
            .enumerate()
            .map(|(i, m)| (m, tape.constant(rand_value((n, width), seed + i as u64))))
            .collect()
    }

    fn row_bits(v: &Value, r: usize) -> Vec<u64> {
        (0..v.ncols()).map(|c| v[(r, c)].to_bits()).collect()
    }

    #[test]
    fn singleton_stacks_are_identity() {
        let tape = Tape::new();
        let feats = content_features(&tape, 5, 4, 1);
        let labels = rand_value((5, 2), 9);
        let spec = ShuffleSpec {
            k: 5,
            rounds: 3,
            enable_sample_wise: true,
            enable_modality_wise: false,
        };
        let out = apply_shuffle(&tape, &spec, &feats, &labels).unwrap();
        for m in Modality::CONTENT {
            assert_eq!(out.views[&m].value(), feats[&m].value());
            assert_eq!(out.label_map[&m], labels);
            assert_eq!(out.record.sample_perm[&m], vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn hand_traced_rotation_n4_k1() {
        let perm = stack_permutation(4, 1, 1).unwrap();
        assert_eq!(perm, vec![1, 2, 3, 0]);
        let perm2 = stack_permutation(4, 1, 2).unwrap();
        assert_eq!(perm2, vec![2, 3, 0, 1]);
        // Per-modality offsets: visual 0·rounds, textual 1·rounds, acoustic 2·rounds.
        let tape = Tape::new();
        let feats = content_features(&tape, 4, 3, 2);
        let labels = rand_value((4, 2), 10);
        let spec = ShuffleSpec {
            k: 1,
            rounds: 1,
            enable_sample_wise: true,
            enable_modality_wise: false,
        };
        let out = apply_shuffle(&tape, &spec, &feats, &labels).unwrap();
        assert_eq!(out.record.sample_perm[&Modality::Visual], vec![0, 1, 2, 3]);
        assert_eq!(out.record.sample_perm[&Modality::Textual], vec![1, 2, 3, 0]);
        assert_eq!(out.record.sample_perm[&Modality::Acoustic], vec![2, 3, 0, 1]);
        let tv = out.views[&Modality::Textual].value();
        let orig = feats[&Modality::Textual].value();
        for r in 0..4 {
            assert_eq!(row_bits(&tv, r), row_bits(&orig, (r + 1) % 4));
        }
    }

    #[test]
    fn full_cycle_returns_original_order() {
        // Stack sizes 3 and 3: rotating by 3 is the identity.
        let perm = stack_permutation(6, 2, 3).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3, 4, 5]);
        // Mixed sizes 3 and 2: rotation by 6 (lcm) is the identity.
        let perm = stack_permutation(5, 2, 6).unwrap();
        assert_eq!(perm, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn stack_count_bounds_are_config_errors() {
        assert!(matches!(stack_permutation(3, 4, 1), Err(Error::Config(_))));
        assert!(matches!(stack_permutation(3, 0, 1), Err(Error::Config(_))));
        let tape = Tape::new();
        let feats = content_features(&tape, 3, 4, 3);
        let labels = rand_value((3, 2), 11);
        let spec = ShuffleSpec {
            k: 9,
            ..Default::default()
        };
        assert!(matches!(
            apply_shuffle(&tape, &spec, &feats, &labels),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_rotation_rows_keep_their_blocks() {
        let tape = Tape::new();
        let feats = content_features(&tape, 7, 4, 4);
        let labels = rand_value((7, 2), 12);
        let spec = ShuffleSpec {
            k: 7,
            rounds: 0,
            enable_sample_wise: true,
            enable_modality_wise: true,
        };
        let out = apply_shuffle(&tape, &spec, &feats, &labels).unwrap();
        for m in Modality::CONTENT {
            let got = out.views[&m].value();
            let orig = feats[&m].value();
            for r in (0..7).step_by(3) {
                assert_eq!(row_bits(&got, r), row_bits(&orig, r), "row {r} of {m}");
            }
        }
    }

    #[test]
    fn triple_block_rotation_is_identity() {
        let tape = Tape::new();
        let feats = content_features(&tape, 6, 4, 5);
        let rho: Vec<usize> = (0..6).map(|r| r % 3).collect();
        let once = rotate_modality_blocks(&tape, &feats, &rho).unwrap();
        let twice = rotate_modality_blocks(&tape, &once, &rho).unwrap();
        let thrice = rotate_modality_blocks(&tape, &twice, &rho).unwrap();
        for m in Modality::CONTENT {
            assert_eq!(thrice[&m].value(), feats[&m].value());
        }
    }

    #[test]
    fn single_slot_rotation_is_identity() {
        let tape = Tape::new();
        let mut feats = BTreeMap::new();
        feats.insert(Modality::Visual, tape.constant(rand_value((5, 4), 6)));
        let rho: Vec<usize> = (0..5).map(|r| r % 3).collect();
        let out = rotate_modality_blocks(&tape, &feats, &rho).unwrap();
        assert_eq!(out[&Modality::Visual].value(), feats[&Modality::Visual].value());
    }

    #[test]
    fn shuffles_preserve_row_multisets() {
        let tape = Tape::new();
        let feats = content_features(&tape, 10, 5, 7);
        let labels = rand_value((10, 3), 13);
        let spec = ShuffleSpec::default();
        let out = apply_shuffle(&tape, &spec, &feats, &labels).unwrap();
        // Across all slots and rows, the multiset of feature rows survives.
        let mut before: Vec<Vec<u64>> = Vec::new();
        let mut after: Vec<Vec<u64>> = Vec::new();
        for m in Modality::CONTENT {
            let orig = feats[&m].value();
            let got = out.views[&m].value();
            for r in 0..10 {
                before.push(row_bits(&orig, r));
                after.push(row_bits(&got, r));
            }
        }
        before.sort();
        after.sort();
        assert_eq!(before, after);

        // Sample-wise alone preserves the multiset per modality.
        let spec_sw = ShuffleSpec {
            enable_modality_wise: false,
            ..Default::default()
        };
        let out_sw = apply_shuffle(&tape, &spec_sw, &feats, &labels).unwrap();
        for m in Modality::CONTENT {
            let orig = feats[&m].value();
            let got = out_sw.views[&m].value();
            let mut b: Vec<Vec<u64>> = (0..10).map(|r| row_bits(&orig, r)).collect();
            let mut a: Vec<Vec<u64>> = (0..10).map(|r| row_bits(&got, r)).collect();
            b.sort();
            a.sort();
            assert_eq!(b, a, "modality {m}");
        }
    }

    #[test]
    fn record_replay_locates_every_cell() {
        let tape = Tape::new();
        // Tag each row: col 0 = modality index, col 1 = row index.
        let mut feats = BTreeMap::new();
        for (i, m) in Modality::CONTENT.into_iter().enumerate() {
            feats.insert(
                m,
                tape.constant(Value::from_shape_fn((9, 4), |(r, c)| match c {
                    0 => i as f64,
                    1 => r as f64,
                    _ => (i * 100 + r) as f64,
                })),
            );
        }
        let labels = Value::from_shape_fn((9, 2), |(r, c)| (r * 2 + c) as f64);
        let spec = ShuffleSpec {
            k: 3,
            rounds: 1,
            enable_sample_wise: true,
            enable_modality_wise: true,
        };
        let out = apply_shuffle(&tape, &spec, &feats, &labels).unwrap();
        for m in Modality::CONTENT {
            let got = out.views[&m].value();
            for r in 0..9 {
                let (src_m, src_row) = out.record.source_of(m, r);
                let expect_tag = src_m.content_index().unwrap() as f64;
                assert_eq!(got[(r, 0)], expect_tag, "slot {m} row {r}");
                assert_eq!(got[(r, 1)], src_row as f64, "slot {m} row {r}");
                for c in 0..2 {
                    assert_eq!(
                        out.label_map[&m][(r, c)],
                        labels[(src_row, c)],
                        "label of slot {m} row {r}"
                    );
                }
            }
        }
    }

    #[test]
    fn shuffle_is_deterministic() {
        let tape = Tape::new();
        let feats = content_features(&tape, 8, 4, 8);
        let labels = rand_value((8, 2), 14);
        let spec = ShuffleSpec::default();
        let a = apply_shuffle(&tape, &spec, &feats, &labels).unwrap();
        let b = apply_shuffle(&tape, &spec, &feats, &labels).unwrap();
        for m in Modality::CONTENT {
            assert_eq!(a.views[&m].value(), b.views[&m].value());
            assert_eq!(a.label_map[&m], b.label_map[&m]);
            assert_eq!(a.record.sample_perm[&m], b.record.sample_perm[&m]);
        }
    }

    #[test]
    fn half_probability_classifier_loss_is_three_zeta_ln2() {
        let mut store = ParamStore::new(31);
        let cls = ShuffleClassifier::new(&mut store, 3, 4);
        store.set_by_name("shuffle.cls.w", Value::zeros((6, 4)));
        store.set_by_name("shuffle.cls.b", Value::zeros((1, 4)));
        let tape = Tape::new();
        let feats = content_features(&tape, 5, 6, 9);
        let labels = Value::from_shape_fn((5, 4), |(r, c)| ((r + c) % 2) as f64);
        let views = apply_shuffle(&tape, &ShuffleSpec::default(), &feats, &labels).unwrap();
        let loss = cls.shuffled_loss(&store, &tape, &views).unwrap().value()[(0, 0)];
        assert!((loss - 3.0 * 4.0 * 2.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_classifier_without_shuffle_scores_near_zero() {
        let mut store = ParamStore::new(32);
        let cls = ShuffleClassifier::new(&mut store, 2, 2);
        // Rows encode their labels in the first two columns as ±1; a large
        // diagonal weight makes the classifier effectively perfect.
        let mut w = Value::zeros((4, 2));
        w[(0, 0)] = 50.0;
        w[(1, 1)] = 50.0;
        store.set_by_name("shuffle.cls.w", w);
        store.set_by_name("shuffle.cls.b", Value::zeros((1, 2)));
        let labels = Value::from_shape_fn((6, 2), |(r, c)| ((r + c) % 2) as f64);
        let tape = Tape::new();
        let mut feats = BTreeMap::new();
        for m in Modality::CONTENT {
            feats.insert(
                m,
                tape.constant(Value::from_shape_fn((6, 4), |(r, c)| {
                    if c < 2 {
                        2.0 * labels[(r, c)] - 1.0
                    } else {
                        0.3
                    }
                })),
            );
        }
        let spec = ShuffleSpec {
            enable_sample_wise: false,
            enable_modality_wise: false,
            ..Default::default()
        };
        let views = apply_shuffle(&tape, &spec, &feats, &labels).unwrap();
        let loss = cls.shuffled_loss(&store, &tape, &views).unwrap().value()[(0, 0)];
        assert!(loss < 1e-5, "got {loss}");
    }

    #[test]
    fn duplicate_batch_makes_shuffle_a_noop_for_the_loss() {
        let mut store = ParamStore::new(33);
        let cls = ShuffleClassifier::new(&mut store, 3, 2);
        let tape = Tape::new();
        // Every sample identical: shuffling permutes equal (row, label) pairs.
        let row = rand_value((1, 6), 15);
        let mut feats = BTreeMap::new();
        for m in Modality::CONTENT {
            feats.insert(
                m,
                tape.constant(Value::from_shape_fn((6, 6), |(_, c)| row[(0, c)])),
            );
        }
        let labels = Value::from_shape_fn((6, 2), |(_, c)| (c % 2) as f64);
        let shuffled = apply_shuffle(&tape, &ShuffleSpec::default(), &feats, &labels).unwrap();
        let plain_spec = ShuffleSpec {
            enable_sample_wise: false,
            enable_modality_wise: false,
            ..Default::default()
        };
        let plain = apply_shuffle(&tape, &plain_spec, &feats, &labels).unwrap();
        let a = cls.shuffled_loss(&store, &tape, &shuffled).unwrap().value()[(0, 0)];
        let b = cls.shuffled_loss(&store, &tape, &plain).unwrap().value()[(0, 0)];
        assert_eq!(a, b);
    }

    #[test]
    fn classifier_width_mismatch_is_a_data_error() {
        let mut store = ParamStore::new(34);
        let cls = ShuffleClassifier::new(&mut store, 3, 2);
        let tape = Tape::new();
        let rows = tape.constant(rand_value((4, 5), 16));
        assert!(matches!(
            cls.logits(&store, &tape, rows),
            Err(Error::Data(_))
        ));
    }
}
