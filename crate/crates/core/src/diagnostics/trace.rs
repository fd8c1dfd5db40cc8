//! Weight-norm bookkeeping across federated rounds.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::fed::LocalUpdate;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub device: usize,
    /// L2 norm of every conv/dense weight of the device's local model.
    pub norms: IndexMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormTrace {
    pub entries: Vec<TraceEntry>,
}

/// Spread of one layer's local weight norms within one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormRatio {
    pub round: usize,
    pub layer: String,
    /// max / min over the round's devices; 1 for identical norms
    pub ratio: f64,
}

impl NormTrace {
    pub fn record<T: Scalar>(&mut self, round: usize, locals: &[LocalUpdate<T>]) {
        self.entries.extend(locals.iter().map(|l| TraceEntry {
            round,
            device: l.device,
            norms: l.model.weight_norms(),
        }));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ratios(&self) -> Vec<NormRatio> {
        let mut spans: IndexMap<(usize, String), (f64, f64)> = IndexMap::new();
        for e in &self.entries {
            for (layer, &n) in &e.norms {
                let s = spans.entry((e.round, layer.clone())).or_insert((n, n));
                s.0 = s.0.max(n);
                s.1 = s.1.min(n);
            }
        }
        spans
            .into_iter()
            .map(|((round, layer), (hi, lo))| NormRatio {
                round,
                layer,
                ratio: if hi == lo { 1.0 } else { hi / lo },
            })
            .collect()
    }

    /// Mean of the per-round ratios of `layer`.
    pub fn mean_ratio(&self, layer: &str) -> Option<f64> {
        let r: Vec<f64> = self.ratios().into_iter().filter(|r| r.layer == layer).map(|r| r.ratio).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }
}

pub fn weight_norm_trace<'a, T: Scalar + 'a>(rounds: impl IntoIterator<Item = (usize, &'a [LocalUpdate<T>])>) -> NormTrace {
    let mut trace = NormTrace::default();
    for (round, locals) in rounds {
        trace.record(round, locals);
    }
    trace
}
