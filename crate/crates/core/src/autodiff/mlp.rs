use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

use super::{ParamStore, Tape, Tensor, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

/// Architecture of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    /// Skip connection from the last hidden activation to the output. Valid
    /// only when the widths at the skip site match.
    pub residual: bool,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation: Activation::Relu,
            residual: false,
        }
    }

    pub fn with_residual(mut self) -> Self {
        self.residual = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Contract("mlp dims must be positive".into()));
        }
        if self.residual {
            let skip_width = *self.hidden_dims.last().unwrap_or(&self.input_dim);
            if skip_width != self.output_dim {
                return Err(Error::Contract(format!(
                    "residual skip needs matching widths, got {skip_width} -> {}",
                    self.output_dim
                )));
            }
        }
        Ok(())
    }

    /// Layer widths including input and output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.output_dim);
        w
    }
}

/// A fully connected network bound to slots in a [`ParamStore`].
///
/// Weights are stored as [in, out] so a forward layer is `x * W + b` with one
/// input row per batch element.
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(usize, usize)>, // (weight slot, bias slot)
}

impl Mlp {
    /// Create freshly initialized parameters under `prefix` and bind to them.
    /// Weights use uniform Kaiming fan-in init, biases start at zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: &MlpSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut layers = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / fan_in as f32).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let w = Tensor::new(vec![fan_in, fan_out], data)?;
            let b = Tensor::zeros(&[1, fan_out]);
            let ws = store.insert(&format!("{prefix}.w{l}"), w)?;
            let bs = store.insert(&format!("{prefix}.b{l}"), b)?;
            layers.push((ws, bs));
        }
        Ok(Mlp {
            spec: spec.clone(),
            layers,
        })
    }

    /// Bind to parameters previously created under `prefix` (e.g. loaded
    /// from a checkpoint). Shapes are checked against the spec.
    pub fn bind(store: &ParamStore, prefix: &str, spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut layers = Vec::new();
        for l in 0..widths.len() - 1 {
            let wname = format!("{prefix}.w{l}");
            let bname = format!("{prefix}.b{l}");
            let ws = store
                .slot(&wname)
                .ok_or_else(|| Error::Contract(format!("missing parameter {wname:?}")))?;
            let bs = store
                .slot(&bname)
                .ok_or_else(|| Error::Contract(format!("missing parameter {bname:?}")))?;
            let expect_w = [widths[l], widths[l + 1]];
            if store.tensor(ws).shape != expect_w {
                return Err(Error::shape(
                    "mlp bind",
                    format!(
                        "{wname} has shape {:?}, expected {:?}",
                        store.tensor(ws).shape, expect_w
                    ),
                ));
            }
            if store.tensor(bs).len() != widths[l + 1] {
                return Err(Error::shape(
                    "mlp bind",
                    format!("{bname} has {} values, expected {}", store.tensor(bs).len(), widths[l + 1]),
                ));
            }
            layers.push((ws, bs));
        }
        Ok(Mlp {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Slots of the first layer, for callers that precompute the first
    /// pre-activation themselves (see [`Mlp::forward_from_first_preact`]).
    pub fn first_layer_slots(&self) -> (usize, usize) {
        self.layers[0]
    }

    /// Record the full forward pass on `tape`. `x` is [batch, input_dim].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: TensorId,
    ) -> Result<TensorId> {
        if tape.cols(x) != self.spec.input_dim {
            return Err(Error::shape(
                "mlp forward",
                format!("input has {} cols, expected {}", tape.cols(x), self.spec.input_dim),
            ));
        }
        let (w0, b0) = self.layers[0];
        let w = tape.param(w0, store.tensor(w0));
        let b = tape.param(b0, store.tensor(b0));
        let z = tape.matmul(x, w);
        let z = tape.add_row(z, b);
        self.forward_from_first_preact(tape, store, z)
    }

    /// Continue a forward pass given the first layer's pre-activation
    /// (`x*W0 + b0`), already on the tape. Lets callers exploit structure in
    /// `x` (block-sparse or repeated inputs) without duplicating the rest of
    /// the network.
    pub fn forward_from_first_preact(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z0: TensorId,
    ) -> Result<TensorId> {
        let widths = self.spec.widths();
        if tape.cols(z0) != widths[1] {
            return Err(Error::shape(
                "mlp forward",
                format!("pre-activation has {} cols, expected {}", tape.cols(z0), widths[1]),
            ));
        }
        let n_layers = self.layers.len();
        let mut h = z0;
        // Hidden activations: every layer except the last is followed by the
        // nonlinearity. When there are no hidden layers z0 is the output.
        let mut skip = None;
        for l in 1..n_layers {
            h = tape.relu(h);
            if l == n_layers - 1 {
                skip = Some(h);
            }
            let (ws, bs) = self.layers[l];
            let w = tape.param(ws, store.tensor(ws));
            let b = tape.param(bs, store.tensor(bs));
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
        }
        if self.spec.residual {
            // With no hidden layer the skip source is the input, which the
            // pre-activation path no longer has; spec validation guarantees
            // hidden_dims is non-empty in that case.
            let s = skip.ok_or_else(|| {
                Error::Contract("residual mlp needs at least one hidden layer".into())
            })?;
            h = tape.add(h, s);
        }
        Ok(h)
    }

    /// Forward pass without a tape, for inference-style uses (e.g. scoring
    /// during validation). Matches `forward` bit for bit on the same input.
    pub fn forward_value(&self, store: &ParamStore, x: &[f32], batch: usize) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        if batch * self.spec.input_dim != x.len() {
            return Err(Error::shape(
                "mlp forward",
                format!("{} values do not fill [{batch}, {}]", x.len(), self.spec.input_dim),
            ));
        }
        let xid = tape.leaf(batch, self.spec.input_dim, x.to_vec());
        let out = self.forward(&mut tape, store, xid)?;
        Ok(tape.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_rng;

    #[test]
    fn residual_requires_matching_widths() {
        let spec = MlpSpec::new(4, &[8], 3).with_residual();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, 0);
        assert!(Mlp::init(&mut store, "f", &spec, &mut rng).is_err());
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let spec = MlpSpec::new(4, &[8], 3);
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, 0);
        let mlp = Mlp::init(&mut store, "f", &spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(1, 5, vec![0.0; 5]);
        assert!(mlp.forward(&mut tape, &store, x).is_err());
    }

    #[test]
    fn residual_skip_adds_last_hidden() {
        // One hidden layer, identity-checkable: zero all weights, then the
        // output equals b1 + relu(b0).
        let spec = MlpSpec::new(2, &[3], 3).with_residual();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, 0);
        let mlp = Mlp::init(&mut store, "f", &spec, &mut rng).unwrap();
        for slot in 0..store.len() {
            let t = store.tensor_mut(slot);
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        store.tensor_mut(store.slot("f.b0").unwrap()).data[1] = 2.0;
        store.tensor_mut(store.slot("f.b1").unwrap()).data[2] = -1.0;
        let out = mlp.forward_value(&store, &[5.0, -7.0], 1).unwrap();
        assert_eq!(out, vec![0.0, 2.0, -1.0]);
    }

    #[test]
    fn bind_rejects_shape_drift() {
        let spec = MlpSpec::new(4, &[8], 3);
        let mut store = ParamStore::new();
        let mut rng = stream_rng(0, 0);
        Mlp::init(&mut store, "f", &spec, &mut rng).unwrap();
        let wider = MlpSpec::new(5, &[8], 3);
        assert!(Mlp::bind(&store, "f", &wider).is_err());
    }

    #[test]
    fn init_is_deterministic_per_stream() {
        let spec = MlpSpec::new(3, &[4], 2);
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        Mlp::init(&mut s1, "f", &spec, &mut stream_rng(7, 1)).unwrap();
        Mlp::init(&mut s2, "f", &spec, &mut stream_rng(7, 1)).unwrap();
        assert_eq!(s1.get("f.w0").unwrap().data, s2.get("f.w0").unwrap().data);
    }
}
