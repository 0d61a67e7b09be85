//! Label-skew partitioning: every client receives `n_i / N` samples from
//! each of `N` randomly chosen classes, without reuse across clients.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};

/// Redraws of the class assignment before a shortage is reported.
const MAX_ASSIGNMENT_DRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub clients: usize,
    pub classes_per_client: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    Pathological { clients: usize, classes_per_client: usize },
    Clustered { clusters: Vec<ClusterSpec> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub mode: PartitionMode,
    pub samples_per_client: usize,
    /// Partition seed; the experiment seed is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PartitionSpec {
    pub fn clusters(&self) -> Vec<ClusterSpec> {
        match &self.mode {
            PartitionMode::Pathological {
                clients,
                classes_per_client,
            } => vec![ClusterSpec {
                clients: *clients,
                classes_per_client: *classes_per_client,
            }],
            PartitionMode::Clustered { clusters } => clusters.clone(),
        }
    }

    pub fn clients(&self) -> usize {
        self.clusters().iter().map(|c| c.clients).sum()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let clusters = self.clusters();
        if clusters.is_empty() || self.clients() == 0 {
            return Err(Error::Config("partition.clients must be at least 1".into()));
        }
        if self.samples_per_client == 0 {
            return Err(Error::Config("partition.samples_per_client must be positive".into()));
        }
        for (k, c) in clusters.iter().enumerate() {
            let n = c.classes_per_client;
            if n == 0 || n > classes {
                return Err(Error::Config(format!(
                    "partition cluster {k}: classes_per_client = {n} must lie in 1..={classes}"
                )));
            }
            if self.samples_per_client % n != 0 {
                return Err(Error::Config(format!(
                    "partition cluster {k}: samples_per_client = {} is not divisible by classes_per_client = {n}",
                    self.samples_per_client
                )));
            }
        }
        Ok(())
    }
}

pub fn pathological_partition(ds: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientShard>> {
    if !matches!(spec.mode, PartitionMode::Pathological { .. }) {
        return Err(Error::Config("pathological_partition called with a clustered spec".into()));
    }
    allocate(ds, spec, seed)
}

pub fn clustered_partition(ds: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientShard>> {
    allocate(ds, spec, seed)
}

fn draw_label_sets(rng: &mut Rng, clusters: &[ClusterSpec], classes: usize) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (k, c) in clusters.iter().enumerate() {
        for _ in 0..c.clients {
            let mut set = index::sample(rng, classes, c.classes_per_client).into_vec();
            set.sort_unstable();
            out.push((k, set));
        }
    }
    out
}

fn allocate(ds: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Vec<ClientShard>> {
    let classes = ds.classes();
    spec.validate(classes)?;
    let clusters = spec.clusters();
    let available = ds.class_counts();
    let mut rng = stream(spec.seed.unwrap_or(seed), Stream::Partition, &[]);

    let mut assignment = Vec::new();
    let mut shortage = None;
    for _ in 0..MAX_ASSIGNMENT_DRAWS {
        let sets = draw_label_sets(&mut rng, &clusters, classes);
        let mut demand = vec![0usize; classes];
        for (k, set) in &sets {
            let quota = spec.samples_per_client / clusters[*k].classes_per_client;
            for &c in set {
                demand[c] += quota;
            }
        }
        shortage = (0..classes)
            .filter(|&c| demand[c] > available[c])
            .max_by_key(|&c| demand[c] - available[c])
            .map(|c| (c, demand[c]));
        if shortage.is_none() {
            assignment = sets;
            break;
        }
    }
    if let Some((c, need)) = shortage {
        return Err(Error::Partition(format!(
            "class {c} has {} samples but the partition needs {need} (no feasible class assignment in {MAX_ASSIGNMENT_DRAWS} draws)",
            available[c]
        )));
    }

    let mut pools = ds.indices_by_class();
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; classes];
    let shards = assignment
        .into_iter()
        .enumerate()
        .map(|(client_id, (cluster, label_set))| {
            let quota = spec.samples_per_client / clusters[cluster].classes_per_client;
            let mut indices = Vec::with_capacity(spec.samples_per_client);
            for &c in &label_set {
                indices.extend_from_slice(&pools[c][cursor[c]..cursor[c] + quota]);
                cursor[c] += quota;
            }
            ClientShard {
                client_id,
                indices,
                label_set,
                cluster,
            }
        })
        .collect();
    Ok(shards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SampleShape;
    use std::collections::HashSet;

    fn balanced(classes: usize, per_class: usize) -> Dataset {
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        Dataset::new("b", SampleShape::flat(1), vec![0.0; labels.len()], labels, classes).unwrap()
    }

    fn patho(clients: usize, n: usize, per_client: usize) -> PartitionSpec {
        PartitionSpec {
            mode: PartitionMode::Pathological {
                clients,
                classes_per_client: n,
            },
            samples_per_client: per_client,
            seed: None,
        }
    }

    #[test]
    fn fifty_clients_two_classes_each() {
        let ds = balanced(10, 6000);
        let shards = pathological_partition(&ds, &patho(50, 2, 1000), 1).unwrap();
        assert_eq!(shards.len(), 50);
        let mut seen = HashSet::new();
        for s in &shards {
            assert_eq!(s.label_set.len(), 2);
            let counts = s.class_counts(&ds);
            for c in 0..10 {
                let expect = if s.label_set.contains(&c) { 500 } else { 0 };
                assert_eq!(counts[c], expect);
            }
            for &i in &s.indices {
                assert!(seen.insert(i), "sample {i} reused");
            }
        }
    }

    #[test]
    fn all_classes_gives_uniform_histogram() {
        let ds = balanced(5, 100);
        for s in pathological_partition(&ds, &patho(3, 5, 50), 9).unwrap() {
            assert_eq!(s.class_counts(&ds), vec![10; 5]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = balanced(10, 300);
        let a = pathological_partition(&ds, &patho(8, 2, 100), 4).unwrap();
        assert_eq!(a, pathological_partition(&ds, &patho(8, 2, 100), 4).unwrap());
        assert_ne!(a, pathological_partition(&ds, &patho(8, 2, 100), 5).unwrap());
    }

    #[test]
    fn shortage_names_the_class() {
        let ds = balanced(2, 10);
        let err = pathological_partition(&ds, &patho(3, 2, 10), 0).unwrap_err();
        assert!(matches!(err, Error::Partition(ref m) if m.contains("class")), "{err}");
    }

    #[test]
    fn non_divisible_quota_is_a_config_error() {
        let ds = balanced(4, 100);
        assert!(matches!(pathological_partition(&ds, &patho(2, 3, 10), 0), Err(Error::Config(_))));
    }

    #[test]
    fn clustered_counts_per_cluster() {
        let ds = balanced(10, 2000);
        let spec = PartitionSpec {
            mode: PartitionMode::Clustered {
                clusters: [2, 2, 3, 3, 5]
                    .iter()
                    .map(|&n| ClusterSpec {
                        clients: 4,
                        classes_per_client: n,
                    })
                    .collect(),
            },
            samples_per_client: 300,
            seed: None,
        };
        let shards = clustered_partition(&ds, &spec, 2).unwrap();
        assert_eq!(shards.len(), 20);
        let mut hist = [0usize; 5];
        for s in &shards {
            hist[s.cluster] += 1;
            assert_eq!(s.label_set.len(), [2, 2, 3, 3, 5][s.cluster]);
        }
        assert_eq!(hist, [4; 5]);
    }

    #[test]
    fn single_cluster_matches_pathological() {
        let ds = balanced(10, 500);
        let clustered = PartitionSpec {
            mode: PartitionMode::Clustered {
                clusters: vec![ClusterSpec {
                    clients: 6,
                    classes_per_client: 2,
                }],
            },
            samples_per_client: 200,
            seed: None,
        };
        assert_eq!(
            clustered_partition(&ds, &clustered, 3).unwrap(),
            pathological_partition(&ds, &patho(6, 2, 200), 3).unwrap()
        );
    }
}
