//! Filter importance and skeleton selection.
//!
//! The importance of filter `i` in a prunable layer is the mean magnitude
//! of the activation channel it produces, read after the layer's ReLU when
//! one follows. The table sums per-sample spatial means and counts samples,
//! so accumulating two batches is the same as accumulating their
//! concatenation.

use thiserror::Error;

use crate::engine::{forward, ChannelMask, EngineError, ForwardPass, Model, ParamSet};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton ratio must lie in (0, 1], got {0}")]
    Ratio(f64),
    #[error("importance table has no samples; run a forward pass first")]
    NoSamples,
    #[error("prunable layer {ordinal}: table has {expected} channels, activations have {actual}")]
    Shape {
        ordinal: usize,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceTable {
    sums: Vec<Vec<f64>>,
    samples: u64,
}

impl ImportanceTable {
    pub fn new(model: &Model) -> Self {
        Self {
            sums: (0..model.prunable_count())
                .map(|p| vec![0.0; model.slot_filters(model.slot_of_prunable(p))])
                .collect(),
            samples: 0,
        }
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().for_each(|l| l.fill(0.0));
        self.samples = 0;
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn layer_count(&self) -> usize {
        self.sums.len()
    }

    /// Adds the batch's per-sample mean `|a|` of every channel.
    pub fn accumulate<T: Float>(
        &mut self,
        model: &Model,
        pass: &ForwardPass<T>,
    ) -> Result<(), SkeletonError> {
        if self.sums.len() != model.prunable_count() {
            return Err(SkeletonError::Shape {
                ordinal: self.sums.len().min(model.prunable_count()),
                expected: self.sums.len(),
                actual: model.prunable_count(),
            });
        }
        let n = pass.batch_size();
        for (ordinal, sums) in self.sums.iter_mut().enumerate() {
            let act = pass.output(model.importance_source(ordinal));
            let channels = act.shape()[1];
            if channels != sums.len() {
                return Err(SkeletonError::Shape {
                    ordinal,
                    expected: sums.len(),
                    actual: channels,
                });
            }
            let plane = act.len() / (n * channels);
            for sample in act.data().chunks_exact(channels * plane) {
                for (sum, chan) in sums.iter_mut().zip(sample.chunks_exact(plane)) {
                    let total: f64 = chan.iter().map(|v| v.to_f64_lossy().abs()).sum();
                    *sum += total / plane as f64;
                }
            }
        }
        self.samples += n as u64;
        Ok(())
    }

    /// Mean importance per sample, per prunable layer.
    pub fn importance(&self) -> Vec<Vec<f64>> {
        let n = self.samples.max(1) as f64;
        self.sums
            .iter()
            .map(|l| l.iter().map(|s| s / n).collect())
            .collect()
    }

    pub fn layer(&self, ordinal: usize) -> Vec<f64> {
        let n = self.samples.max(1) as f64;
        self.sums[ordinal].iter().map(|s| s / n).collect()
    }

    /// Builds a table directly from importance values (one sample).
    pub fn from_importance(values: Vec<Vec<f64>>) -> Self {
        Self {
            sums: values,
            samples: 1,
        }
    }
}

/// A client's skeleton: the ratio it was selected at plus the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonMask {
    ratio: f64,
    mask: ChannelMask,
}

impl SkeletonMask {
    pub fn new(ratio: f64, mask: ChannelMask) -> Self {
        Self { ratio, mask }
    }

    /// The whole network as skeleton, `r = 1`.
    pub fn full(model: &Model) -> Self {
        Self {
            ratio: 1.0,
            mask: ChannelMask::all_true(model),
        }
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn mask(&self) -> &ChannelMask {
        &self.mask
    }

    pub fn popcounts(&self) -> Vec<usize> {
        (0..self.mask.layers().len())
            .map(|p| self.mask.active_count(p))
            .collect()
    }
}

/// Filters kept at ratio `r` out of `filters`: `max(1, ceil(r·filters))`.
pub fn keep_count(ratio: f64, filters: usize) -> usize {
    // The epsilon stops 0.1·20 = 2.0000000000000004 from rounding up to 3.
    let raw = (ratio * filters as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.clamp(1, filters)
}

pub fn check_ratio(ratio: f64) -> Result<(), SkeletonError> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(SkeletonError::Ratio(ratio))
    }
}

/// Keeps the `keep_count(r, F)` most important filters of every prunable
/// layer. Ties go to the lower channel index.
pub fn select_skeleton(table: &ImportanceTable, ratio: f64) -> Result<SkeletonMask, SkeletonError> {
    check_ratio(ratio)?;
    if table.samples == 0 {
        return Err(SkeletonError::NoSamples);
    }
    let layers = table
        .sums
        .iter()
        .map(|sums| {
            let mut order: Vec<usize> = (0..sums.len()).collect();
            order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
            let mut bits = vec![false; sums.len()];
            for &i in &order[..keep_count(ratio, sums.len())] {
                bits[i] = true;
            }
            bits
        })
        .collect();
    Ok(SkeletonMask {
        ratio,
        mask: ChannelMask::from_layers_unchecked(layers),
    })
}

/// Scalars exchanged in one direction for `mask`: every selected filter's
/// full fan-in plus its bias, all of every other global layer, nothing of
/// local-scope layers.
pub fn skeleton_param_count(model: &Model, mask: &ChannelMask) -> usize {
    model
        .global_slots()
        .into_iter()
        .map(|slot| match model.prunable_of_slot(slot) {
            Some(ordinal) => mask.active_count(ordinal) * (model.slot_fan_in(slot) + 1),
            None => model.slot_param_count(slot),
        })
        .sum()
}

/// One importance table per class, each accumulated over that class's
/// samples only.
pub fn importance_by_class<T: Float>(
    model: &Model,
    params: &ParamSet<T>,
    images: &Tensor<T>,
    labels: &[usize],
    batch: usize,
) -> Result<Vec<ImportanceTable>, SkeletonError> {
    let classes = model.classes();
    let per_sample: usize = images.shape()[1..].iter().product();
    let mut tables = vec![ImportanceTable::new(model); classes];
    for (class, table) in tables.iter_mut().enumerate() {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * per_sample);
            for &i in chunk {
                data.extend_from_slice(&images.data()[i * per_sample..(i + 1) * per_sample]);
            }
            let mut shape = images.shape().to_vec();
            shape[0] = chunk.len();
            let x = Tensor::new(&shape, data).map_err(EngineError::from)?;
            let pass = forward(model, params, &x, &vec![class; chunk.len()])?;
            table.accumulate(model, &pass)?;
        }
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{LayerSpec, ParamSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_layer_table(values: &[f64]) -> ImportanceTable {
        ImportanceTable::from_importance(vec![values.to_vec()])
    }

    fn selected(mask: &SkeletonMask, ordinal: usize) -> Vec<usize> {
        mask.mask()
            .layer(ordinal)
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    #[test]
    fn top_two_by_value() {
        let m = select_skeleton(&single_layer_table(&[0.5, 0.1, 0.9, 0.3]), 0.5).unwrap();
        assert_eq!(selected(&m, 0), vec![0, 2]);
    }

    #[test]
    fn ratio_one_selects_everything() {
        let m = select_skeleton(&single_layer_table(&[0.5, 0.1, 0.9, 0.3]), 1.0).unwrap();
        assert!(m.mask().is_all_true());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let m = select_skeleton(&single_layer_table(&[1.0; 8]), 0.25).unwrap();
        assert_eq!(selected(&m, 0), vec![0, 1]);
    }

    #[test]
    fn rejects_bad_ratio_and_empty_table() {
        let t = single_layer_table(&[1.0, 2.0]);
        for r in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(select_skeleton(&t, r), Err(SkeletonError::Ratio(_))));
        }
        let model = Model::lenet5(true);
        assert!(matches!(
            select_skeleton(&ImportanceTable::new(&model), 0.5),
            Err(SkeletonError::NoSamples)
        ));
    }

    #[test]
    fn keep_count_rounds_up_with_floor_of_one() {
        assert_eq!(keep_count(0.1, 20), 2);
        assert_eq!(keep_count(0.1, 6), 1);
        assert_eq!(keep_count(0.1, 84), 9);
        assert_eq!(keep_count(0.3, 50), 15);
        assert_eq!(keep_count(0.01, 4), 1);
        assert_eq!(keep_count(1.0, 7), 7);
    }

    fn one_conv() -> Model {
        Model::new(
            [1, 3, 3],
            vec![
                LayerSpec::conv(2, 3, 1, 0),
                LayerSpec::relu(),
                LayerSpec::fc(2),
                LayerSpec::loss(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_conv_one_filter_count() {
        let model = one_conv();
        let mask = ChannelMask::new(&model, vec![vec![false, true]]).unwrap();
        // 9 weights + 1 bias of the conv, plus the whole global classifier.
        assert_eq!(skeleton_param_count(&model, &mask), 10 + 6);
        assert_eq!(
            skeleton_param_count(&model, &ChannelMask::all_true(&model)),
            model.global_param_count()
        );

        let local_head = Model::new(
            [1, 3, 3],
            vec![
                LayerSpec::conv(2, 3, 1, 0),
                LayerSpec::relu(),
                LayerSpec::fc(2).local(),
                LayerSpec::loss(),
            ],
        )
        .unwrap();
        let mask = ChannelMask::new(&local_head, vec![vec![false, true]]).unwrap();
        assert_eq!(skeleton_param_count(&local_head, &mask), 10);
    }

    #[test]
    fn constant_activation_adds_its_magnitude() {
        let model = one_conv();
        let mut params = ParamSet::<f64>::zeros(&model);
        params.layer_mut(0).bias.data_mut().copy_from_slice(&[0.75, 0.0]);
        let x = Tensor::from_fn(&[3, 1, 3, 3], |i| i as f64);
        let pass = forward(&model, &params, &x, &[0, 1, 0]).unwrap();
        let mut table = ImportanceTable::new(&model);
        table.accumulate(&model, &pass).unwrap();
        assert_eq!(table.samples(), 3);
        assert_eq!(table.layer(0), vec![0.75, 0.0]);
    }

    #[test]
    fn accumulate_rejects_mismatched_table() {
        let model = one_conv();
        let params = ParamSet::<f32>::zeros(&model);
        let pass = forward(&model, &params, &Tensor::zeros(&[1, 1, 3, 3]), &[0]).unwrap();
        let mut wrong = ImportanceTable::from_importance(vec![vec![0.0; 3]]);
        assert!(matches!(
            wrong.accumulate(&model, &pass),
            Err(SkeletonError::Shape { expected: 3, actual: 2, .. })
        ));
    }

    #[test]
    fn split_batches_match_concatenation() {
        let model = Model::lenet5(true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params: ParamSet = ParamSet::init(&model, &mut rng);
        let x = Tensor::from_fn(&[6, 1, 28, 28], |_| rng.gen_range(0.0..1.0f32));
        let labels = [0, 1, 2, 3, 4, 5];
        let mut whole = ImportanceTable::new(&model);
        whole
            .accumulate(&model, &forward(&model, &params, &x, &labels).unwrap())
            .unwrap();
        let mut parts = ImportanceTable::new(&model);
        for (lo, hi) in [(0, 2), (2, 6)] {
            let part = Tensor::new(&[hi - lo, 1, 28, 28], x.data()[lo * 784..hi * 784].to_vec()).unwrap();
            parts
                .accumulate(&model, &forward(&model, &params, &part, &labels[lo..hi]).unwrap())
                .unwrap();
        }
        for r in [0.1, 0.3, 0.5] {
            assert_eq!(
                select_skeleton(&whole, r).unwrap(),
                select_skeleton(&parts, r).unwrap()
            );
        }
        let mut zero = ImportanceTable::new(&model);
        let blank = Tensor::<f32>::zeros(&[2, 1, 28, 28]);
        zero.accumulate(&model, &forward(&model, &ParamSet::zeros(&model), &blank, &[0, 0]).unwrap())
            .unwrap();
        assert!(zero.importance().iter().flatten().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(
            values in prop::collection::vec(0.0f64..10.0, 1..40),
            scale in 1e-3f64..1e3,
            ratio in 0.01f64..=1.0,
        ) {
            let a = select_skeleton(&single_layer_table(&values), ratio).unwrap();
            let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let b = select_skeleton(&single_layer_table(&scaled), ratio).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.popcounts()[0], keep_count(ratio, values.len()));
            // Deterministic.
            prop_assert_eq!(a, select_skeleton(&single_layer_table(&values), ratio).unwrap());
        }
    }
}
