use rand::Rng;

use super::{EngineError, Model};
use crate::tensor::{Float, Tensor};

/// Weights and biases of one trainable layer. Filter `f` owns weight row
/// `f` (its full fan-in) and bias entry `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> LayerParams<T> {
    pub fn zeros(weight_shape: &[usize]) -> Self {
        Self {
            weights: Tensor::zeros(weight_shape),
            bias: Tensor::zeros(&[weight_shape[0]]),
        }
    }

    pub fn filters(&self) -> usize {
        self.bias.len()
    }

    pub fn fan_in(&self) -> usize {
        self.weights.len() / self.bias.len().max(1)
    }

    pub fn filter(&self, f: usize) -> &[T] {
        let k = self.fan_in();
        &self.weights.data()[f * k..(f + 1) * k]
    }

    pub fn filter_mut(&mut self, f: usize) -> &mut [T] {
        let k = self.fan_in();
        &mut self.weights.data_mut()[f * k..(f + 1) * k]
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One [`LayerParams`] per parameter slot, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    layers: Vec<LayerParams<T>>,
}

impl<T: Float> ParamSet<T> {
    pub fn zeros(model: &Model) -> Self {
        Self {
            layers: (0..model.slot_count())
                .map(|s| LayerParams::zeros(&model.slot_weight_shape(s)))
                .collect(),
        }
    }

    /// He-uniform weights (`U(±sqrt(6/fan_in))`), zero biases.
    pub fn init<R: Rng>(model: &Model, rng: &mut R) -> Self {
        let mut set = Self::zeros(model);
        for (slot, layer) in set.layers.iter_mut().enumerate() {
            let bound = (6.0 / model.slot_fan_in(slot) as f64).sqrt();
            for w in layer.weights.data_mut() {
                *w = T::from_f64_lossy(rng.gen_range(-bound..bound));
            }
        }
        set
    }

    pub fn from_layers(layers: Vec<LayerParams<T>>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn layer(&self, slot: usize) -> &LayerParams<T> {
        &self.layers[slot]
    }

    pub fn layer_mut(&mut self, slot: usize) -> &mut LayerParams<T> {
        &mut self.layers[slot]
    }

    pub fn into_layers(self) -> Vec<LayerParams<T>> {
        self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    pub fn same_topology(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.shape() == b.weights.shape() && a.bias.shape() == b.bias.shape()
            })
    }

    /// Checks that the slots line up with `model`.
    pub fn check(&self, model: &Model) -> Result<(), EngineError> {
        if self.layers.len() != model.slot_count() {
            return Err(EngineError::ParamMismatch(format!(
                "{} parameter slots, model has {}",
                self.layers.len(),
                model.slot_count()
            )));
        }
        for (slot, layer) in self.layers.iter().enumerate() {
            let want = model.slot_weight_shape(slot);
            if layer.weights.shape() != want.as_slice() || layer.bias.len() != want[0] {
                return Err(EngineError::ParamMismatch(format!(
                    "slot {slot}: weights {:?}, expected {want:?}",
                    layer.weights.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.all_finite() && l.bias.all_finite())
    }

    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// All scalars in slot order, weights before biases.
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.same_topology(other)
            && self
                .flat()
                .iter()
                .zip(other.flat())
                .all(|(a, b)| a.to_f64_lossy().to_bits() == b.to_f64_lossy().to_bits())
    }
}

/// Per prunable layer, which output filters (or units) keep their gradient.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChannelMask {
    layers: Vec<Vec<bool>>,
}

impl ChannelMask {
    pub fn all_true(model: &Model) -> Self {
        Self {
            layers: (0..model.prunable_count())
                .map(|p| vec![true; model.slot_filters(model.slot_of_prunable(p))])
                .collect(),
        }
    }

    pub fn new(model: &Model, layers: Vec<Vec<bool>>) -> Result<Self, EngineError> {
        let mask = Self { layers };
        mask.check(model)?;
        Ok(mask)
    }

    pub(crate) fn from_layers_unchecked(layers: Vec<Vec<bool>>) -> Self {
        Self { layers }
    }

    pub fn check(&self, model: &Model) -> Result<(), EngineError> {
        if self.layers.len() != model.prunable_count() {
            return Err(EngineError::MaskLayers {
                expected: model.prunable_count(),
                actual: self.layers.len(),
            });
        }
        for (p, bits) in self.layers.iter().enumerate() {
            let slot = model.slot_of_prunable(p);
            let layer = model.layer_of_slot(slot);
            let expected = model.slot_filters(slot);
            if bits.len() != expected {
                return Err(EngineError::MaskLength {
                    layer,
                    expected,
                    actual: bits.len(),
                });
            }
            if !bits.iter().any(|&b| b) {
                return Err(EngineError::EmptyMask { layer });
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn layer(&self, ordinal: usize) -> &[bool] {
        &self.layers[ordinal]
    }

    pub fn active_count(&self, ordinal: usize) -> usize {
        self.layers[ordinal].iter().filter(|&&b| b).count()
    }

    pub fn is_all_true(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|&b| b))
    }

    /// Active channels of the layer at `slot`, or `None` when every filter
    /// of that slot participates.
    pub(crate) fn for_slot<'a>(model: &Model, mask: Option<&'a Self>, slot: usize) -> Option<&'a [bool]> {
        let ordinal = model.prunable_of_slot(slot)?;
        mask.map(|m| m.layer(ordinal))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let model = Model::lenet5(true);
        let a: ParamSet = ParamSet::init(&model, &mut ChaCha8Rng::seed_from_u64(1));
        let b: ParamSet = ParamSet::init(&model, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(a.bit_eq(&b));
        a.check(&model).unwrap();
        let bound = (6.0f32 / 25.0).sqrt();
        assert!(a.layer(0).weights.data().iter().all(|w| w.abs() <= bound));
        assert!(a.layer(0).bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn mask_validation() {
        let model = Model::lenet5(true);
        let mut layers = ChannelMask::all_true(&model).layers().to_vec();
        layers[0].pop();
        assert!(matches!(
            ChannelMask::new(&model, layers),
            Err(EngineError::MaskLength { layer: 0, expected: 6, actual: 5 })
        ));
        let mut layers = ChannelMask::all_true(&model).layers().to_vec();
        layers[1] = vec![false; 16];
        assert!(matches!(
            ChannelMask::new(&model, layers),
            Err(EngineError::EmptyMask { layer: 3 })
        ));
        assert!(matches!(
            ChannelMask::new(&model, vec![]),
            Err(EngineError::MaskLayers { expected: 4, actual: 0 })
        ));
    }

    #[test]
    fn filter_rows_are_contiguous() {
        let mut p = LayerParams::<f32>::zeros(&[3, 2, 2, 2]);
        p.filter_mut(1).fill(1.0);
        assert_eq!(p.fan_in(), 8);
        assert_eq!(&p.weights.data()[8..16], &[1.0; 8]);
        assert!(p.filter(0).iter().all(|&v| v == 0.0));
    }
}
