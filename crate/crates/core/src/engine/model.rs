use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::tensor::ConvGeometry;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    FullyConnected {
        units: usize,
    },
    Relu,
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    SoftmaxCrossEntropy,
}

fn default_stride() -> usize {
    1
}

impl LayerKind {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::FullyConnected { .. } => "fully_connected",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "max_pool2d",
            LayerKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

/// Whether a layer's parameters are shared through the server or stay on
/// the client.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Global,
    Local,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub scope: Scope,
}

impl LayerSpec {
    pub fn global(kind: LayerKind) -> Self {
        Self {
            kind,
            scope: Scope::Global,
        }
    }

    pub fn conv(filters: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self::global(LayerKind::Conv2d {
            filters,
            kernel,
            stride,
            pad,
        })
    }

    pub fn fc(units: usize) -> Self {
        Self::global(LayerKind::FullyConnected { units })
    }

    pub fn relu() -> Self {
        Self::global(LayerKind::Relu)
    }

    pub fn max_pool(size: usize, stride: usize) -> Self {
        Self::global(LayerKind::MaxPool2d { size, stride })
    }

    pub fn loss() -> Self {
        Self::global(LayerKind::SoftmaxCrossEntropy)
    }

    pub fn local(mut self) -> Self {
        self.scope = Scope::Local;
        self
    }
}

/// A validated layer stack with every derived index the engine needs.
///
/// Trainable layers (conv and fully connected) own a parameter *slot*.
/// Prunable layers are the global-scope trainable layers other than the
/// final classifier; masks are indexed by their ordinal.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input: [usize; 3],
    layers: Vec<LayerSpec>,
    shapes: Vec<[usize; 3]>,
    geometry: Vec<Option<ConvGeometry>>,
    slot_of_layer: Vec<Option<usize>>,
    layer_of_slot: Vec<usize>,
    prunable_of_slot: Vec<Option<usize>>,
    slot_of_prunable: Vec<usize>,
    owner: Vec<Option<usize>>,
}

impl Model {
    pub fn new(input: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self, EngineError> {
        let invalid = |msg: String| Err(EngineError::InvalidModel(msg));
        if input.iter().any(|&e| e == 0) {
            return invalid(format!("input shape {input:?} has a zero extent"));
        }
        let loss_count = layers
            .iter()
            .filter(|l| l.kind == LayerKind::SoftmaxCrossEntropy)
            .count();
        if loss_count != 1 || layers.last().map(|l| &l.kind) != Some(&LayerKind::SoftmaxCrossEntropy)
        {
            return invalid("exactly one softmax_cross_entropy layer is required, last".into());
        }
        if layers.len() < 2 || !matches!(layers[layers.len() - 2].kind, LayerKind::FullyConnected { .. })
        {
            return invalid("the layer before the loss must be fully_connected".into());
        }

        let mut shapes = Vec::with_capacity(layers.len());
        let mut geometry = Vec::with_capacity(layers.len());
        let mut slot_of_layer = Vec::with_capacity(layers.len());
        let mut layer_of_slot = Vec::new();
        let mut owner = Vec::with_capacity(layers.len());
        let mut shape = input;
        let mut current_owner = None;
        for (idx, layer) in layers.iter().enumerate() {
            let [c, h, w] = shape;
            let (out, geo) = match layer.kind {
                LayerKind::Conv2d {
                    filters,
                    kernel,
                    stride,
                    pad,
                } => {
                    if filters == 0 {
                        return invalid(format!("layer {idx}: conv2d needs at least one filter"));
                    }
                    let g = ConvGeometry::new(shape, (kernel, kernel), stride, pad)
                        .map_err(|e| EngineError::InvalidModel(format!("layer {idx}: {e}")))?;
                    ([filters, g.out_h, g.out_w], Some(g))
                }
                LayerKind::FullyConnected { units } => {
                    if units == 0 {
                        return invalid(format!("layer {idx}: fully_connected needs units > 0"));
                    }
                    ([units, 1, 1], None)
                }
                LayerKind::Relu | LayerKind::SoftmaxCrossEntropy => (shape, None),
                LayerKind::MaxPool2d { size, stride } => {
                    if size == 0 || stride == 0 || size > h || size > w {
                        return invalid(format!(
                            "layer {idx}: pool window {size}/{stride} does not fit {h}x{w}"
                        ));
                    }
                    if (h - size) % stride != 0 || (w - size) % stride != 0 {
                        return invalid(format!(
                            "layer {idx}: pool window {size} stride {stride} does not tile {h}x{w}"
                        ));
                    }
                    ([c, (h - size) / stride + 1, (w - size) / stride + 1], None)
                }
            };
            if layer.kind.is_trainable() {
                slot_of_layer.push(Some(layer_of_slot.len()));
                layer_of_slot.push(idx);
                current_owner = Some(idx);
                owner.push(Some(idx));
            } else {
                if layer.scope == Scope::Local {
                    return invalid(format!(
                        "layer {idx}: only trainable layers can be local-scope"
                    ));
                }
                slot_of_layer.push(None);
                owner.push(current_owner);
            }
            shapes.push(out);
            geometry.push(geo);
            shape = out;
        }

        let classifier_slot = layer_of_slot.len() - 1;
        let mut prunable_of_slot = vec![None; layer_of_slot.len()];
        let mut slot_of_prunable = Vec::new();
        for (slot, &layer) in layer_of_slot.iter().enumerate() {
            if slot != classifier_slot && layers[layer].scope == Scope::Global {
                prunable_of_slot[slot] = Some(slot_of_prunable.len());
                slot_of_prunable.push(slot);
            }
        }

        Ok(Self {
            input,
            layers,
            shapes,
            geometry,
            slot_of_layer,
            layer_of_slot,
            prunable_of_slot,
            slot_of_prunable,
            owner,
        })
    }

    /// LeNet-5 topology on 28×28 inputs: 6 and 16 conv filters, 120/84
    /// hidden units, ReLU activations and 2×2 max pooling.
    pub fn lenet5(local_head: bool) -> Self {
        let head = LayerSpec::fc(10);
        let layers = vec![
            LayerSpec::conv(6, 5, 1, 2),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(16, 5, 1, 0),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::fc(120),
            LayerSpec::relu(),
            LayerSpec::fc(84),
            LayerSpec::relu(),
            if local_head { head.local() } else { head },
            LayerSpec::loss(),
        ];
        Self::new([1, 28, 28], layers).expect("lenet5 is well formed")
    }

    /// The Caffe MNIST LeNet variant: 20 and 50 conv filters, 500 hidden units.
    pub fn caffe_lenet(local_head: bool) -> Self {
        let head = LayerSpec::fc(10);
        let layers = vec![
            LayerSpec::conv(20, 5, 1, 0),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::conv(50, 5, 1, 0),
            LayerSpec::relu(),
            LayerSpec::max_pool(2, 2),
            LayerSpec::fc(500),
            LayerSpec::relu(),
            if local_head { head.local() } else { head },
            LayerSpec::loss(),
        ];
        Self::new([1, 28, 28], layers).expect("caffe lenet is well formed")
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample output shape `[C,H,W]` of layer `idx`.
    pub fn output_shape(&self, idx: usize) -> [usize; 3] {
        self.shapes[idx]
    }

    pub fn input_shape_of(&self, idx: usize) -> [usize; 3] {
        if idx == 0 {
            self.input
        } else {
            self.shapes[idx - 1]
        }
    }

    pub fn classes(&self) -> usize {
        self.shapes[self.layers.len() - 1][0]
    }

    pub fn loss_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub(crate) fn geometry(&self, idx: usize) -> Option<&ConvGeometry> {
        self.geometry[idx].as_ref()
    }

    pub fn slot_count(&self) -> usize {
        self.layer_of_slot.len()
    }

    pub fn slot_of_layer(&self, idx: usize) -> Option<usize> {
        self.slot_of_layer[idx]
    }

    pub fn layer_of_slot(&self, slot: usize) -> usize {
        self.layer_of_slot[slot]
    }

    pub fn slot_scope(&self, slot: usize) -> Scope {
        self.layers[self.layer_of_slot[slot]].scope
    }

    pub fn prunable_count(&self) -> usize {
        self.slot_of_prunable.len()
    }

    pub fn prunable_of_slot(&self, slot: usize) -> Option<usize> {
        self.prunable_of_slot[slot]
    }

    pub fn slot_of_prunable(&self, ordinal: usize) -> usize {
        self.slot_of_prunable[ordinal]
    }

    pub fn prunable_of_layer(&self, idx: usize) -> Option<usize> {
        self.slot_of_layer[idx].and_then(|s| self.prunable_of_slot[s])
    }

    /// Trainable layer whose output channels layer `idx` carries.
    pub fn owner(&self, idx: usize) -> Option<usize> {
        self.owner[idx]
    }

    /// Output filters (conv) or units (fully connected) of a slot.
    pub fn slot_filters(&self, slot: usize) -> usize {
        self.shapes[self.layer_of_slot[slot]][0]
    }

    /// Fan-in of one filter of a slot: `C·Kh·Kw` or the flattened input size.
    pub fn slot_fan_in(&self, slot: usize) -> usize {
        let [c, h, w] = self.input_shape_of(self.layer_of_slot[slot]);
        match self.layers[self.layer_of_slot[slot]].kind {
            LayerKind::Conv2d { kernel, .. } => c * kernel * kernel,
            _ => c * h * w,
        }
    }

    pub fn slot_weight_shape(&self, slot: usize) -> Vec<usize> {
        let layer = self.layer_of_slot[slot];
        let f = self.slot_filters(slot);
        match self.layers[layer].kind {
            LayerKind::Conv2d { kernel, .. } => {
                vec![f, self.input_shape_of(layer)[0], kernel, kernel]
            }
            _ => vec![f, self.slot_fan_in(slot)],
        }
    }

    /// Scalars in one slot: weights plus biases.
    pub fn slot_param_count(&self, slot: usize) -> usize {
        self.slot_filters(slot) * (self.slot_fan_in(slot) + 1)
    }

    pub fn param_count(&self) -> usize {
        (0..self.slot_count()).map(|s| self.slot_param_count(s)).sum()
    }

    pub fn global_slots(&self) -> Vec<usize> {
        (0..self.slot_count())
            .filter(|&s| self.slot_scope(s) == Scope::Global)
            .collect()
    }

    pub fn local_slots(&self) -> Vec<usize> {
        (0..self.slot_count())
            .filter(|&s| self.slot_scope(s) == Scope::Local)
            .collect()
    }

    /// Parameters exchanged by a full (unpruned) upload or download.
    pub fn global_param_count(&self) -> usize {
        self.global_slots()
            .into_iter()
            .map(|s| self.slot_param_count(s))
            .sum()
    }

    /// Layer the importance metric reads for a prunable layer: the ReLU that
    /// directly follows it when there is one, otherwise the layer itself.
    pub fn importance_source(&self, ordinal: usize) -> usize {
        let layer = self.layer_of_slot[self.slot_of_prunable[ordinal]];
        match self.layers.get(layer + 1) {
            Some(next) if next.kind == LayerKind::Relu => layer + 1,
            _ => layer,
        }
    }

    /// Index of the first fully connected layer; everything below it is the
    /// convolutional stack.
    pub fn conv_stack_end(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l.kind, LayerKind::FullyConnected { .. }))
            .unwrap_or(0)
    }
}
