use super::FederationError;
use crate::engine::{ChannelMask, LayerParams, Model, ParamSet};

/// Filter rows of one global-scope slot: for each listed filter its full
/// weight row and its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotPayload {
    pub slot: usize,
    pub rows: Vec<usize>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// What crosses the client/server boundary in one direction. Only
/// global-scope slots are ever represented.
#[derive(Clone, Debug, PartialEq)]
pub struct Payload {
    pub slots: Vec<SlotPayload>,
}

impl Payload {
    /// Global-scope parameters of `params`, restricted to the active filters
    /// of `mask` in prunable layers (`None` takes every filter).
    pub fn extract(model: &Model, params: &ParamSet, mask: Option<&ChannelMask>) -> Self {
        let slots = model
            .global_slots()
            .into_iter()
            .map(|slot| {
                let layer = params.layer(slot);
                let rows: Vec<usize> = match ChannelMask::for_slot(model, mask, slot) {
                    Some(active) => (0..layer.filters()).filter(|&f| active[f]).collect(),
                    None => (0..layer.filters()).collect(),
                };
                let mut weights = Vec::with_capacity(rows.len() * layer.fan_in());
                for &f in &rows {
                    weights.extend_from_slice(layer.filter(f));
                }
                let bias = rows.iter().map(|&f| layer.bias.data()[f]).collect();
                SlotPayload {
                    slot,
                    rows,
                    weights,
                    bias,
                }
            })
            .collect();
        Self { slots }
    }

    /// Number of scalars carried.
    pub fn len(&self) -> usize {
        self.slots
            .iter()
            .map(|s| s.weights.len() + s.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Overwrites the carried rows in `params`, leaving everything else alone.
    pub fn apply(&self, params: &mut ParamSet) {
        for s in &self.slots {
            let layer = params.layer_mut(s.slot);
            let k = layer.fan_in();
            for (i, &f) in s.rows.iter().enumerate() {
                layer.filter_mut(f).copy_from_slice(&s.weights[i * k..(i + 1) * k]);
                layer.bias.data_mut()[f] = s.bias[i];
            }
        }
    }

    fn check(&self, model: &Model) -> Result<(), FederationError> {
        let global = model.global_slots();
        if self.slots.len() != global.len() || self.slots.iter().zip(&global).any(|(s, &g)| s.slot != g) {
            return Err(FederationError::Topology("payload slots do not match the model".into()));
        }
        for s in &self.slots {
            let filters = model.slot_filters(s.slot);
            let k = model.slot_fan_in(s.slot);
            let ordered = s.rows.windows(2).all(|w| w[0] < w[1]);
            if !ordered
                || s.rows.last().is_some_and(|&f| f >= filters)
                || s.weights.len() != s.rows.len() * k
                || s.bias.len() != s.rows.len()
            {
                return Err(FederationError::Topology(format!(
                    "payload for slot {} is inconsistent",
                    s.slot
                )));
            }
        }
        Ok(())
    }
}

fn weights_of(sizes: impl Iterator<Item = usize> + Clone) -> Vec<f64> {
    let total: usize = sizes.clone().sum();
    sizes.map(|n| n as f64 / total as f64).collect()
}

/// `Σ_k w_k·x_k` accumulated in f64 in the order given.
fn blend(terms: impl Iterator<Item = (f64, f32)>) -> f32 {
    let mut acc = 0.0f64;
    for (w, x) in terms {
        acc += w * x as f64;
    }
    acc as f32
}

/// Federated averaging weighted by example counts over every slot.
pub fn fedavg_aggregate(updates: &[(&ParamSet, usize)]) -> Result<ParamSet, FederationError> {
    let (first, _) = updates.first().ok_or(FederationError::NoClients)?;
    for (index, (p, n)) in updates.iter().enumerate() {
        if *n == 0 {
            return Err(FederationError::ZeroWeight { index });
        }
        if !p.same_topology(first) {
            return Err(FederationError::Topology(format!("update {index} differs from update 0")));
        }
    }
    let w = weights_of(updates.iter().map(|(_, n)| *n));
    let layers = (0..first.layers().len())
        .map(|slot| {
            let mut out = LayerParams::<f32>::zeros(first.layer(slot).weights.shape());
            for (i, o) in out.weights.data_mut().iter_mut().enumerate() {
                *o = blend(updates.iter().zip(&w).map(|((p, _), &w)| (w, p.layer(slot).weights.data()[i])));
            }
            for (i, o) in out.bias.data_mut().iter_mut().enumerate() {
                *o = blend(updates.iter().zip(&w).map(|((p, _), &w)| (w, p.layer(slot).bias.data()[i])));
            }
            out
        })
        .collect();
    Ok(ParamSet::from_layers(layers))
}

/// Per-filter averaging over the updates that carry that filter, weights
/// renormalized over those updates. Filters nobody carries and all
/// local-scope slots keep their value from `global`.
pub(crate) fn aggregate_payloads(
    model: &Model,
    global: &ParamSet,
    updates: &[(&Payload, usize)],
) -> Result<ParamSet, FederationError> {
    global.check(model)?;
    for (index, (p, n)) in updates.iter().enumerate() {
        if *n == 0 {
            return Err(FederationError::ZeroWeight { index });
        }
        p.check(model)?;
    }
    let mut out = global.clone();
    for (pos, slot) in model.global_slots().into_iter().enumerate() {
        let filters = model.slot_filters(slot);
        let k = model.slot_fan_in(slot);
        // row_of[u][f]: where filter f sits inside update u's payload.
        let row_of: Vec<Vec<Option<usize>>> = updates
            .iter()
            .map(|(p, _)| {
                let mut map = vec![None; filters];
                for (i, &f) in p.slots[pos].rows.iter().enumerate() {
                    map[f] = Some(i);
                }
                map
            })
            .collect();
        let layer = out.layer_mut(slot);
        for f in 0..filters {
            let covering: Vec<(usize, usize)> = (0..updates.len())
                .filter_map(|u| row_of[u][f].map(|i| (u, i)))
                .collect();
            if covering.is_empty() {
                continue;
            }
            let w = weights_of(covering.iter().map(|&(u, _)| updates[u].1));
            for (j, o) in layer.filter_mut(f).iter_mut().enumerate() {
                *o = blend(
                    covering
                        .iter()
                        .zip(&w)
                        .map(|(&(u, i), &w)| (w, updates[u].0.slots[pos].weights[i * k + j])),
                );
            }
            layer.bias.data_mut()[f] = blend(
                covering
                    .iter()
                    .zip(&w)
                    .map(|(&(u, i), &w)| (w, updates[u].0.slots[pos].bias[i])),
            );
        }
    }
    Ok(out)
}

/// Partial aggregation of skeleton updates into `global`.
pub fn partial_aggregate(
    model: &Model,
    global: &ParamSet,
    updates: &[(&ParamSet, &ChannelMask, usize)],
) -> Result<ParamSet, FederationError> {
    let mut payloads = Vec::with_capacity(updates.len());
    for (p, mask, _) in updates {
        p.check(model)?;
        mask.check(model)?;
        payloads.push(Payload::extract(model, p, Some(mask)));
    }
    let refs: Vec<(&Payload, usize)> = payloads.iter().zip(updates).map(|(p, u)| (p, u.2)).collect();
    aggregate_payloads(model, global, &refs)
}
