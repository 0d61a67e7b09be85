//! Class prototypes (per-class mean embeddings) and center-based feature
//! transfer between classes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LabelPrior;
use crate::matrix::Matrix;
use crate::nn::{ModelParams, Network};
use crate::real::Real;

const EXTRACT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub centroid: Vec<f64>,
    pub count: usize,
    /// Round in which this centroid was last recomputed.
    #[serde(default)]
    pub round: usize,
}

/// Map from class id to prototype. Absent classes are unknown, not zero.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrototypeSet {
    entries: BTreeMap<usize, Prototype>,
}

impl PrototypeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (usize, Prototype)>) -> Result<Self> {
        let mut set = PrototypeSet::new();
        for (c, p) in entries {
            set.insert(c, p)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, class: usize, proto: Prototype) -> Result<()> {
        if proto.count == 0 {
            return Err(Error::Data(format!("prototype for class {class} has zero support")));
        }
        if proto.centroid.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("prototype centroid for class {class}")));
        }
        if let Some(d) = self.dim() {
            if d != proto.centroid.len() {
                return Err(Error::shape("prototype dimension", d, proto.centroid.len()));
            }
        }
        self.entries.insert(class, proto);
        Ok(())
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.entries.get(&class)
    }

    pub fn centroid(&self, class: usize) -> Option<&[f64]> {
        self.entries.get(&class).map(|p| p.centroid.as_slice())
    }

    pub fn contains(&self, class: usize) -> bool {
        self.entries.contains_key(&class)
    }

    /// Present class ids in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Prototype)> {
        self.entries.iter().map(|(&c, p)| (c, p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.values().next().map(|p| p.centroid.len())
    }

    /// Most recent round tag over all entries.
    pub fn round(&self) -> Option<usize> {
        self.entries.values().map(|p| p.round).max()
    }

    fn check_compatible(&self, other: &PrototypeSet) -> Result<()> {
        match (self.dim(), other.dim()) {
            (Some(a), Some(b)) if a != b => Err(Error::shape("prototype dimension", a, b)),
            _ => Ok(()),
        }
    }
}

/// Mean embedding of every class present among `indices`, computed with
/// the extractor in `params`.
pub fn extract_local_prototypes<T: Real>(
    network: &Network,
    params: &ModelParams<T>,
    ds: &Dataset,
    indices: &[usize],
    round: usize,
) -> Result<PrototypeSet> {
    if indices.is_empty() {
        return Err(Error::InvalidClient("cannot extract prototypes from an empty shard".into()));
    }
    let d = network.embed_dim();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for chunk in indices.chunks(EXTRACT_CHUNK) {
        let (x, labels) = ds.batch::<T>(chunk);
        let (h, _) = network.forward_features(params, &x)?;
        for (j, &y) in labels.iter().enumerate() {
            let (sum, n) = sums.entry(y).or_insert_with(|| (vec![0.0; d], 0));
            for (s, &v) in sum.iter_mut().zip(h.row(j)) {
                *s += v.as_f64();
            }
            *n += 1;
        }
    }
    PrototypeSet::from_entries(sums.into_iter().map(|(c, (sum, n))| {
        let centroid = sum.into_iter().map(|s| s / n as f64).collect();
        (c, Prototype { centroid, count: n, round })
    }))
}

/// Local classes replace the global entries; every other global class is
/// kept as is.
pub fn merge_prototypes(global: &PrototypeSet, local: &PrototypeSet) -> Result<PrototypeSet> {
    global.check_compatible(local)?;
    let mut out = global.clone();
    for (c, p) in local.iter() {
        out.entries.insert(c, p.clone());
    }
    Ok(out)
}

/// Count-weighted mean of the centroids reported for each class.
pub fn aggregate_prototypes(locals: &[PrototypeSet]) -> Result<PrototypeSet> {
    if locals.is_empty() {
        return Err(Error::Config("aggregate_prototypes needs at least one local set".into()));
    }
    for w in locals.windows(2) {
        w[0].check_compatible(&w[1])?;
    }
    let mut acc: BTreeMap<usize, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for set in locals {
        for (c, p) in set.iter() {
            let (sum, n, round) = acc
                .entry(c)
                .or_insert_with(|| (vec![0.0; p.centroid.len()], 0, 0));
            for (s, &v) in sum.iter_mut().zip(&p.centroid) {
                *s += p.count as f64 * v;
            }
            *n += p.count;
            *round = (*round).max(p.round);
        }
    }
    PrototypeSet::from_entries(acc.into_iter().map(|(c, (sum, n, round))| {
        let centroid = sum.into_iter().map(|s| s / n as f64).collect();
        (c, Prototype { centroid, count: n, round })
    }))
}

/// `dst + lambda * (h - src)`.
pub fn feature_transfer(h: &[f64], src_center: &[f64], dst_center: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if src_center.len() != h.len() {
        return Err(Error::shape("feature_transfer source center", h.len(), src_center.len()));
    }
    if dst_center.len() != h.len() {
        return Err(Error::shape("feature_transfer target center", h.len(), dst_center.len()));
    }
    Ok(h.iter()
        .zip(src_center)
        .zip(dst_center)
        .map(|((&x, &s), &t)| t + lambda * (x - s))
        .collect())
}

/// Embeddings moved to other classes, with the smoothed prior of the new
/// label multiset.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch<T> {
    pub features: Matrix<T>,
    pub labels: Vec<usize>,
    pub prior: LabelPrior,
}

/// Target class for each row: a cursor walks the available classes in
/// ascending order starting at position `start` (mod the class count),
/// skipping the row's own label, and advances past each class it assigns.
pub fn cyclic_targets(labels: &[usize], available: &[usize], start: usize) -> Vec<usize> {
    let k = available.len();
    if k == 0 {
        return Vec::new();
    }
    let mut cursor = start % k;
    labels
        .iter()
        .map(|&y| {
            if available[cursor] == y {
                cursor = (cursor + 1) % k;
            }
            let t = available[cursor];
            cursor = (cursor + 1) % k;
            t
        })
        .collect()
}

/// Transfer every row of `h` to another available class. Returns `None`
/// when fewer than two classes have prototypes.
pub fn cyclic_augment_batch<T: Real>(
    h: &Matrix<T>,
    labels: &[usize],
    prototypes: &PrototypeSet,
    classes: usize,
    lambda: f64,
    epsilon: f64,
    start: usize,
) -> Result<Option<AugmentedBatch<T>>> {
    if labels.len() != h.rows() {
        return Err(Error::shape("augmentation labels", h.rows(), labels.len()));
    }
    if prototypes.len() < 2 || h.rows() == 0 {
        return Ok(None);
    }
    if let Some(d) = prototypes.dim() {
        if d != h.cols() {
            return Err(Error::shape("prototype dimension", h.cols(), d));
        }
    }
    if let Some(&y) = labels.iter().find(|&&y| !prototypes.contains(y)) {
        return Err(Error::Data(format!("no prototype for batch label {y}")));
    }
    let available = prototypes.classes();
    if let Some(&c) = available.iter().find(|&&c| c >= classes) {
        return Err(Error::Data(format!("prototype class {c} out of range for {classes} classes")));
    }
    let targets = cyclic_targets(labels, &available, start);
    let mut data = Vec::with_capacity(h.rows() * h.cols());
    let mut row = vec![0.0; h.cols()];
    for (j, (&y, &t)) in labels.iter().zip(&targets).enumerate() {
        for (r, &v) in row.iter_mut().zip(h.row(j)) {
            *r = v.as_f64();
        }
        let moved = feature_transfer(&row, prototypes.centroid(y).unwrap_or_default(), prototypes.centroid(t).unwrap_or_default(), lambda)?;
        data.extend(moved.into_iter().map(T::from_f64));
    }
    let features = Matrix::from_vec(h.rows(), h.cols(), data)?;
    let prior = LabelPrior::from_labels(&targets, classes, epsilon)?;
    Ok(Some(AugmentedBatch {
        features,
        labels: targets,
        prior,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SampleShape;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn proto(centroid: Vec<f64>, count: usize) -> Prototype {
        Prototype { centroid, count, round: 0 }
    }

    fn set(entries: &[(usize, Vec<f64>, usize)]) -> PrototypeSet {
        PrototypeSet::from_entries(entries.iter().map(|(c, v, n)| (*c, proto(v.clone(), *n)))).unwrap()
    }

    #[test]
    fn weighted_aggregate_example() {
        let a = set(&[(4, vec![1.0, 0.0], 10)]);
        let b = set(&[(4, vec![0.0, 1.0], 30)]);
        let g = aggregate_prototypes(&[a, b]).unwrap();
        let p = g.get(4).unwrap();
        assert_eq!(p.count, 40);
        assert_abs_diff_eq!(p.centroid[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p.centroid[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn single_client_aggregate_is_identity() {
        let a = set(&[(0, vec![0.3, -1.0], 7), (2, vec![5.0, 2.5], 1)]);
        assert_eq!(aggregate_prototypes(std::slice::from_ref(&a)).unwrap(), a);
        assert!(aggregate_prototypes(&[]).is_err());
    }

    #[test]
    fn absent_classes_stay_absent() {
        let g = aggregate_prototypes(&[set(&[(1, vec![1.0], 2)]), set(&[(3, vec![2.0], 2)])]).unwrap();
        assert_eq!(g.classes(), vec![1, 3]);
    }

    #[test]
    fn merge_prefers_local() {
        let global = PrototypeSet::from_entries((0..10).map(|c| (c, proto(vec![c as f64], 5)))).unwrap();
        let local = set(&[(3, vec![-3.0], 1), (7, vec![-7.0], 1)]);
        let m = merge_prototypes(&global, &local).unwrap();
        for c in 0..10 {
            let expect = if c == 3 || c == 7 { -(c as f64) } else { c as f64 };
            assert_eq!(m.centroid(c).unwrap(), &[expect]);
        }
        assert_eq!(merge_prototypes(&PrototypeSet::new(), &local).unwrap(), local);
        assert!(merge_prototypes(&set(&[(0, vec![1.0, 2.0], 1)]), &local).is_err());
    }

    #[test]
    fn transfer_examples() {
        assert_eq!(feature_transfer(&[1.0, 1.0], &[0.0, 0.0], &[2.0, 2.0], 1.0).unwrap(), vec![3.0, 3.0]);
        assert_eq!(feature_transfer(&[0.5, 4.0], &[0.5, 4.0], &[9.0, -1.0], 0.3).unwrap(), vec![9.0, -1.0]);
        assert!(feature_transfer(&[1.0], &[1.0, 2.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn cyclic_targets_skip_own_label() {
        // Cursor starts at class 2 (position 1) and wraps past class 1.
        assert_eq!(cyclic_targets(&[1, 1, 1, 1], &[1, 2, 3, 4], 1), vec![2, 3, 4, 2]);
        assert_eq!(cyclic_targets(&[1, 1, 1, 1], &[1, 2, 3, 4], 0), vec![2, 3, 4, 2]);
        assert_eq!(cyclic_targets(&[0, 1, 0], &[0, 1], 0), vec![1, 0, 1]);
    }

    #[test]
    fn augment_skips_with_single_class() {
        let h = Matrix::<f64>::zeros(3, 2);
        let p = set(&[(0, vec![0.0, 0.0], 3)]);
        assert!(cyclic_augment_batch(&h, &[0, 0, 0], &p, 4, 1.0, 0.01, 0).unwrap().is_none());
    }

    #[test]
    fn augmented_rows_match_transfer_and_prior_counts() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 3.0]]).unwrap();
        let p = set(&[(0, vec![0.5, 0.5], 2), (2, vec![-1.0, 4.0], 1), (3, vec![2.0, 0.0], 6)]);
        let aug = cyclic_augment_batch::<f64>(&h, &[0, 0, 2], &p, 5, 0.7, 0.01, 4).unwrap().unwrap();
        let targets = cyclic_targets(&[0, 0, 2], &[0, 2, 3], 4);
        assert_eq!(aug.labels, targets);
        for j in 0..3 {
            let want = feature_transfer(h.row(j), p.centroid([0, 0, 2][j]).unwrap(), p.centroid(targets[j]).unwrap(), 0.7).unwrap();
            assert_eq!(aug.features.row(j), want.as_slice());
        }
        let mut hist = vec![0; 5];
        for &t in &targets {
            hist[t] += 1;
        }
        assert_eq!(aug.prior.counts(), hist.as_slice());
    }

    #[test]
    fn missing_label_prototype_is_an_error() {
        let h = Matrix::<f64>::zeros(1, 1);
        let p = set(&[(0, vec![0.0], 1), (1, vec![1.0], 1)]);
        assert!(cyclic_augment_batch(&h, &[2], &p, 3, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn extraction_matches_brute_force_means() {
        let net = Network::mlp(SampleShape::flat(3), 4, 3).unwrap();
        let params: ModelParams<f64> = net.init(&mut crate::rng::stream(5, crate::rng::Stream::Init, &[]));
        let inputs: Vec<f32> = (0..30).map(|i| ((i * 7 % 11) as f32) / 11.0).collect();
        let labels = vec![0, 2, 2, 0, 2, 0, 0, 2, 2, 2];
        let ds = Dataset::new("t", SampleShape::flat(3), inputs, labels.clone(), 3).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let protos = extract_local_prototypes(&net, &params, &ds, &idx, 4).unwrap();
        assert_eq!(protos.classes(), vec![0, 2]);
        let (x, _) = ds.batch::<f64>(&idx);
        let (h, _) = net.forward_features(&params, &x).unwrap();
        for c in [0, 2] {
            let rows: Vec<usize> = (0..10).filter(|&j| labels[j] == c).collect();
            let p = protos.get(c).unwrap();
            assert_eq!(p.count, rows.len());
            assert_eq!(p.round, 4);
            for k in 0..4 {
                let mean = rows.iter().map(|&j| h[(j, k)]).sum::<f64>() / rows.len() as f64;
                assert_abs_diff_eq!(p.centroid[k], mean, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn json_shape() {
        let p = set(&[(3, vec![0.5], 2)]);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["3"]["count"], 2);
        assert_eq!(v["3"]["centroid"], serde_json::json!([0.5]));
        let back: PrototypeSet = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }

    fn arb_locals() -> impl Strategy<Value = Vec<PrototypeSet>> {
        prop::collection::vec(
            prop::collection::btree_map(0usize..6, (prop::collection::vec(-10.0f64..10.0, 3), 1usize..50), 1..5),
            1..6,
        )
        .prop_map(|sets| {
            sets.into_iter()
                .map(|m| PrototypeSet::from_entries(m.into_iter().map(|(c, (v, n))| (c, proto(v, n)))).unwrap())
                .collect()
        })
    }

    proptest! {
        #[test]
        fn aggregate_is_order_invariant_and_in_hull(locals in arb_locals(), seed in any::<u64>()) {
            let g = aggregate_prototypes(&locals).unwrap();
            let mut shuffled = locals.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut crate::rng::stream(seed, crate::rng::Stream::Sweep, &[]));
            let h = aggregate_prototypes(&shuffled).unwrap();
            for (c, p) in g.iter() {
                let q = h.get(c).unwrap();
                prop_assert_eq!(p.count, q.count);
                for k in 0..3 {
                    prop_assert!((p.centroid[k] - q.centroid[k]).abs() < 1e-12);
                    let vals: Vec<f64> = locals.iter().filter_map(|s| s.centroid(c)).map(|v| v[k]).collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(p.centroid[k] >= lo - 1e-12 && p.centroid[k] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn unit_lambda_preserves_differences(
            a in prop::collection::vec(-5.0f64..5.0, 4),
            b in prop::collection::vec(-5.0f64..5.0, 4),
            src in prop::collection::vec(-5.0f64..5.0, 4),
            dst in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let ta = feature_transfer(&a, &src, &dst, 1.0).unwrap();
            let tb = feature_transfer(&b, &src, &dst, 1.0).unwrap();
            for k in 0..4 {
                prop_assert!(((ta[k] - tb[k]) - (a[k] - b[k])).abs() < 1e-12);
            }
        }
    }
}
