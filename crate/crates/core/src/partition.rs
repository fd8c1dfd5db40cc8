//! Label-shard non-IID partitioning.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

/// Device -> sample index assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartitionManifest {
    pub assignments: Vec<Vec<usize>>,
    pub seed: u64,
    pub classes_per_device: usize,
    pub samples_per_class: usize,
}

#[derive(Clone, Debug)]
struct Shard {
    label: usize,
    indices: Vec<usize>,
}

const GREEDY_ATTEMPTS: usize = 64;

/// Shard partitioning: group sample indices by label, shuffle within each
/// label, cut into shards of `samples_per_class`, shuffle the shard pool and
/// deal `classes_per_device` shards of distinct labels to every device.
pub fn partition_noniid<T: Scalar>(
    dataset: &Dataset<T>,
    num_devices: usize,
    classes_per_device: usize,
    samples_per_class: usize,
    seed_: u64,
) -> Result<PartitionManifest> {
    partition_labels(&dataset.labels, num_devices, classes_per_device, samples_per_class, seed_)
}

pub fn partition_labels(
    labels: &[usize],
    num_devices: usize,
    classes_per_device: usize,
    samples_per_class: usize,
    seed_: u64,
) -> Result<PartitionManifest> {
    if num_devices == 0 || classes_per_device == 0 || samples_per_class == 0 {
        return Err(Error::InvalidArgument(
            "devices, classes per device and samples per class must be positive".into(),
        ));
    }
    let mut rng = seed::rng(seed_);
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut pool = Vec::new();
    for (&label, idx) in by_label.iter_mut() {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks_exact(samples_per_class) {
            pool.push(Shard {
                label,
                indices: chunk.to_vec(),
            });
        }
    }

    let demand = num_devices * classes_per_device;
    let needed = demand * samples_per_class;
    if needed > labels.len() {
        return Err(Error::InfeasiblePartition(format!(
            "{num_devices} devices x {classes_per_device} classes x {samples_per_class} samples needs {needed} samples, dataset has {} (short by {})",
            labels.len(),
            needed - labels.len()
        )));
    }
    // a label can serve each device at most once
    let mut per_label: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &pool {
        *per_label.entry(s.label).or_default() += 1;
    }
    let usable: usize = per_label.values().map(|&c| c.min(num_devices)).sum();
    if usable < demand {
        return Err(Error::InfeasiblePartition(format!(
            "need {demand} shards of {samples_per_class} samples with distinct labels per device, only {usable} usable (short by {})",
            demand - usable
        )));
    }

    pool.shuffle(&mut rng);
    for _ in 0..GREEDY_ATTEMPTS {
        if let Some(assignments) = greedy_deal(&pool, num_devices, classes_per_device) {
            return Ok(PartitionManifest {
                assignments,
                seed: seed_,
                classes_per_device,
                samples_per_class,
            });
        }
        pool.shuffle(&mut rng);
    }
    Ok(PartitionManifest {
        assignments: structured_deal(&pool, num_devices, classes_per_device, &mut rng),
        seed: seed_,
        classes_per_device,
        samples_per_class,
    })
}

/// Walks the shuffled pool; each device takes the first shards whose labels
/// it does not hold yet. Fails if a device cannot be filled.
fn greedy_deal(pool: &[Shard], devices: usize, k: usize) -> Option<Vec<Vec<usize>>> {
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::with_capacity(devices);
    for _ in 0..devices {
        let mut labels = Vec::with_capacity(k);
        let mut idx = Vec::new();
        for (i, shard) in pool.iter().enumerate() {
            if labels.len() == k {
                break;
            }
            if !taken[i] && !labels.contains(&shard.label) {
                taken[i] = true;
                labels.push(shard.label);
                idx.extend_from_slice(&shard.indices);
            }
        }
        if labels.len() < k {
            return None;
        }
        out.push(idx);
    }
    Some(out)
}

/// Always succeeds when feasible: take at most `devices` shards per label,
/// lay them out grouped by label and deal position `p` to device `p mod D`,
/// so no device receives two shards of one label. Device ids are then
/// permuted.
fn structured_deal(pool: &[Shard], devices: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<&Shard>> = BTreeMap::new();
    for s in pool {
        by_label.entry(s.label).or_default().push(s);
    }
    let mut groups: Vec<Vec<&Shard>> = by_label
        .into_values()
        .map(|mut v| {
            v.truncate(devices);
            v
        })
        .collect();
    groups.shuffle(rng);
    // largest groups first keeps the cut at D*k from starving any device
    groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
    let layout: Vec<&Shard> = groups.into_iter().flatten().take(devices * k).collect();
    let mut out = vec![Vec::new(); devices];
    for (p, shard) in layout.iter().enumerate() {
        out[p % devices].extend_from_slice(&shard.indices);
    }
    out.shuffle(rng);
    out
}

impl PartitionManifest {
    pub fn num_devices(&self) -> usize {
        self.assignments.len()
    }

    /// Checks index validity, disjointness and per-device class/sample counts.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let mut seen = vec![false; labels.len()];
        let want = self.classes_per_device * self.samples_per_class;
        for (d, idx) in self.assignments.iter().enumerate() {
            if idx.len() != want {
                return Err(Error::InvalidArgument(format!(
                    "device {d} holds {} samples, expected {want}",
                    idx.len()
                )));
            }
            let mut classes: Vec<usize> = Vec::new();
            for &i in idx {
                if i >= labels.len() {
                    return Err(Error::InvalidArgument(format!("device {d}: index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::InvalidArgument(format!("index {i} assigned twice")));
                }
                if !classes.contains(&labels[i]) {
                    classes.push(labels[i]);
                }
            }
            if classes.len() > self.classes_per_device {
                return Err(Error::InvalidArgument(format!(
                    "device {d} spans {} labels, at most {} allowed",
                    classes.len(),
                    self.classes_per_device
                )));
            }
        }
        Ok(())
    }

    /// Header line `# seed=.. num_devices=.. classes_per_device=.. samples_per_class=..`
    /// then one `device_id<TAB>i,j,k` line per device.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# seed={} num_devices={} classes_per_device={} samples_per_class={}\n",
            self.seed,
            self.num_devices(),
            self.classes_per_device,
            self.samples_per_class
        );
        for (d, idx) in self.assignments.iter().enumerate() {
            let list: Vec<String> = idx.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{d}\t{}", list.join(","));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::format("partition manifest", m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest".into()))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        let mut fields: BTreeMap<&str, u64> = BTreeMap::new();
        for kv in header.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad header field {kv:?}")))?;
            fields.insert(k, v.parse().map_err(|_| bad(format!("bad number in {kv:?}")))?);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("header lacks {k}")));
        let devices = get("num_devices")? as usize;
        let mut assignments = Vec::with_capacity(devices);
        for (expected, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let (id, list) = line.split_once('\t').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(bad(format!("expected device {expected}, found {id:?}")));
            }
            let idx = if list.is_empty() {
                Vec::new()
            } else {
                list.split(',')
                    .map(|v| v.parse::<usize>().map_err(|_| bad(format!("bad index {v:?}"))))
                    .collect::<Result<Vec<_>>>()?
            };
            assignments.push(idx);
        }
        if assignments.len() != devices {
            return Err(bad(format!("header says {devices} devices, found {}", assignments.len())));
        }
        Ok(Self {
            assignments,
            seed: get("seed")?,
            classes_per_device: get("classes_per_device")? as usize,
            samples_per_class: get("samples_per_class")? as usize,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_shaped_labels(per_class: usize) -> Vec<usize> {
        (0..10 * per_class).map(|i| (i * 7 + i / 10) % 10).collect()
    }

    #[test]
    fn hundred_devices_two_classes() {
        let labels = cifar_shaped_labels(5000);
        let m = partition_labels(&labels, 100, 2, 100, 1).unwrap();
        m.validate(&labels).unwrap();
        for idx in &m.assignments {
            assert_eq!(idx.len(), 200);
            let mut ls: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            ls.sort_unstable();
            ls.dedup();
            assert_eq!(ls.len(), 2);
        }
    }

    #[test]
    fn single_device_all_classes() {
        let labels = cifar_shaped_labels(20);
        let m = partition_labels(&labels, 1, 10, 10, 3).unwrap();
        m.validate(&labels).unwrap();
        assert_eq!(m.assignments[0].len(), 100);
        let mut ls: Vec<usize> = m.assignments[0].iter().map(|&i| labels[i]).collect();
        ls.sort_unstable();
        ls.dedup();
        assert_eq!(ls, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn deterministic_per_seed() {
        let labels = cifar_shaped_labels(500);
        let a = partition_labels(&labels, 20, 2, 100, 5).unwrap();
        assert_eq!(a, partition_labels(&labels, 20, 2, 100, 5).unwrap());
        assert_ne!(a, partition_labels(&labels, 20, 2, 100, 6).unwrap());
    }

    #[test]
    fn infeasible_demand_reports_shortfall() {
        let labels = cifar_shaped_labels(10);
        let err = partition_labels(&labels, 20, 2, 100, 5).unwrap_err().to_string();
        assert!(err.contains("short by"), "{err}");
        // enough samples overall but only one label
        let err = partition_labels(&[0; 400], 2, 2, 100, 5).unwrap_err().to_string();
        assert!(err.contains("distinct labels"), "{err}");
    }

    #[test]
    fn structured_fallback_is_valid() {
        let labels = cifar_shaped_labels(200);
        let mut rng = seed::rng(0);
        let mut pool = Vec::new();
        for l in 0..10 {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
            for c in idx.chunks_exact(50) {
                pool.push(Shard {
                    label: l,
                    indices: c.to_vec(),
                });
            }
        }
        let assignments = structured_deal(&pool, 13, 3, &mut rng);
        let m = PartitionManifest {
            assignments,
            seed: 0,
            classes_per_device: 3,
            samples_per_class: 50,
        };
        m.validate(&labels).unwrap();
    }

    #[test]
    fn text_round_trip() {
        let labels = cifar_shaped_labels(100);
        let m = partition_labels(&labels, 5, 2, 30, 9).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("# seed=9 num_devices=5 classes_per_device=2 samples_per_class=30\n"));
        assert!(text.lines().nth(1).unwrap().starts_with("0\t"));
        assert_eq!(PartitionManifest::from_text(&text).unwrap(), m);
        assert!(PartitionManifest::from_text("# seed=1 num_devices=2 classes_per_device=1 samples_per_class=1\n0\t1\n").is_err());
    }
}
