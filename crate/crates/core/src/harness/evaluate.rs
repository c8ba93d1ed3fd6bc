use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::engine::{argmax, predict, EngineError, Model, ParamSet};

const EVAL_BATCH: usize = 250;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("client {0} has no held-out examples")]
    EmptyHoldout(usize),
    #[error("test set is empty")]
    EmptyTest,
    #[error("no clients to evaluate")]
    NoClients,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Number of correctly classified examples among `indices`.
pub fn count_correct(model: &Model, params: &ParamSet, data: &Dataset, indices: &[usize]) -> Result<usize, EvalError> {
    let classes = model.classes();
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let counts = chunks
        .par_iter()
        .map(|chunk| -> Result<usize, EvalError> {
            let (x, y) = data.gather(chunk);
            let logits = predict(model, params, &x)?;
            Ok(logits
                .data()
                .chunks_exact(classes)
                .zip(&y)
                .filter(|(row, &label)| argmax(row) == label)
                .count())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(counts.into_iter().sum())
}

pub fn accuracy(model: &Model, params: &ParamSet, data: &Dataset, indices: &[usize]) -> Result<f64, EvalError> {
    if indices.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    Ok(count_correct(model, params, data, indices)? as f64 / indices.len() as f64)
}

/// `base` with every local-scope slot replaced by the plain mean of the
/// clients' values.
pub fn average_heads(model: &Model, base: &ParamSet, locals: &[&ParamSet]) -> ParamSet {
    let mut out = base.clone();
    if locals.is_empty() {
        return out;
    }
    let w = 1.0 / locals.len() as f64;
    for slot in model.local_slots() {
        let layer = out.layer_mut(slot);
        for (i, v) in layer.weights.data_mut().iter_mut().enumerate() {
            *v = locals.iter().map(|p| w * p.layer(slot).weights.data()[i] as f64).sum::<f64>() as f32;
        }
        for (i, v) in layer.bias.data_mut().iter_mut().enumerate() {
            *v = locals.iter().map(|p| w * p.layer(slot).bias.data()[i] as f64).sum::<f64>() as f32;
        }
    }
    out
}

/// Local-test and new-test accuracy, as fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean over clients of accuracy on their own held-out examples, using
    /// the global layers plus that client's local layers.
    pub local_acc: f64,
    /// Accuracy on the population test set with the local layers replaced
    /// by the average over all clients.
    pub new_acc: f64,
    pub per_client: Vec<f64>,
}

/// `clients` pairs each client's parameters (only its local-scope slots are
/// read) with its held-out indices into `train`.
pub fn evaluate(
    model: &Model,
    global: &ParamSet,
    clients: &[(&ParamSet, &[usize])],
    train: &Dataset,
    test: &Dataset,
    test_indices: &[usize],
) -> Result<Evaluation, EvalError> {
    if clients.is_empty() {
        return Err(EvalError::NoClients);
    }
    if let Some(i) = clients.iter().position(|(_, h)| h.is_empty()) {
        return Err(EvalError::EmptyHoldout(i));
    }
    let mut per_client = Vec::with_capacity(clients.len());
    for (local, holdout) in clients {
        let view = average_heads(model, global, &[local]);
        per_client.push(accuracy(model, &view, train, holdout)?);
    }
    let local_acc = per_client.iter().sum::<f64>() / per_client.len() as f64;
    let locals: Vec<&ParamSet> = clients.iter().map(|(p, _)| *p).collect();
    let new_acc = accuracy(model, &average_heads(model, global, &locals), test, test_indices)?;
    Ok(Evaluation {
        local_acc,
        new_acc,
        per_client,
    })
}
