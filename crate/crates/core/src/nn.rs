//! Parameterised layers shared by the supernet, derived networks and the
//! classification search space. Each layer owns a name prefix; its tensors
//! live in a [`ParamStore`] under `<prefix>.<field>`.

use rand::Rng;

use crate::error::TensorError;
use crate::search_space::transform::{LayerKind, Stream};
use crate::tensor::{ParamKind, ParamStore, Shape, Tape, Var};

pub const GN_EPS: f32 = 1e-5;

/// Group count for group normalisation: the largest divisor of `channels`
/// that does not exceed 8.
pub fn default_groups(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Pointwise convolution, optionally biased.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1x1 {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

impl Conv1x1 {
    pub fn new(prefix: impl Into<String>, cin: usize, cout: usize, bias: bool) -> Self {
        Conv1x1 {
            prefix: prefix.into(),
            cin,
            cout,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        store.insert_he(self.weight_name(), Shape::new(self.cout, self.cin, 1, 1), rng)?;
        if self.bias {
            store.insert_const(self.bias_name(), Shape::vector(self.cout), 0.0, ParamKind::Weight)?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, &self.weight_name())?;
        let b = if self.bias {
            Some(tape.param(store, &self.bias_name())?)
        } else {
            None
        };
        tape.conv2d(x, w, b, 1, 1, 1)
    }
}

/// Learned affine part of a group-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub prefix: String,
    pub channels: usize,
}

impl GroupNorm {
    pub fn gamma_name(&self) -> String {
        format!("{}.gamma", self.prefix)
    }
    pub fn beta_name(&self) -> String {
        format!("{}.beta", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<(), TensorError> {
        store.insert_const(self.gamma_name(), Shape::vector(self.channels), 1.0, ParamKind::Weight)?;
        store.insert_const(self.beta_name(), Shape::vector(self.channels), 0.0, ParamKind::Weight)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let g = tape.param(store, &self.gamma_name())?;
        let b = tape.param(store, &self.beta_name())?;
        tape.group_norm(x, default_groups(self.channels), g, b, GN_EPS)
    }
}

/// One 3x3 layer of a transformation, followed by group norm and ReLU.
///
/// * standard base: dense 3x3
/// * separable base: depthwise 3x3 then pointwise
/// * dilated: depthwise dilated 3x3 then pointwise, in either stream
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub prefix: String,
    pub stream: Stream,
    pub kind: LayerKind,
    pub channels: usize,
}

impl ConvLayer {
    pub fn new(prefix: impl Into<String>, stream: Stream, kind: LayerKind, channels: usize) -> Self {
        ConvLayer {
            prefix: prefix.into(),
            stream,
            kind,
            channels,
        }
    }

    fn dense(&self) -> bool {
        self.stream == Stream::Standard && self.kind == LayerKind::Base
    }

    fn norm(&self) -> GroupNorm {
        GroupNorm {
            prefix: format!("{}.gn", self.prefix),
            channels: self.channels,
        }
    }

    /// Names of the convolution tensors (not the normalisation).
    pub fn conv_param_names(&self) -> Vec<String> {
        if self.dense() {
            vec![format!("{}.w", self.prefix)]
        } else {
            vec![format!("{}.dw", self.prefix), format!("{}.pw", self.prefix)]
        }
    }

    /// Every tensor this layer owns.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.conv_param_names();
        let n = self.norm();
        names.push(n.gamma_name());
        names.push(n.beta_name());
        names
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        let c = self.channels;
        if self.dense() {
            store.insert_he(format!("{}.w", self.prefix), Shape::new(c, c, 3, 3), rng)?;
        } else {
            store.insert_he(format!("{}.dw", self.prefix), Shape::new(c, 1, 3, 3), rng)?;
            store.insert_he(format!("{}.pw", self.prefix), Shape::new(c, c, 1, 1), rng)?;
        }
        self.norm().init(store)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let c = tape.shape(x).c();
        if c != self.channels {
            return Err(TensorError::InvalidArgument(format!(
                "{}: expected {} input channels, got {c}",
                self.prefix, self.channels
            )));
        }
        let y = if self.dense() {
            let w = tape.param(store, &format!("{}.w", self.prefix))?;
            tape.conv2d(x, w, None, 1, 1, 1)?
        } else {
            let dw = tape.param(store, &format!("{}.dw", self.prefix))?;
            let pw = tape.param(store, &format!("{}.pw", self.prefix))?;
            let d = tape.conv2d(x, dw, None, 1, self.kind.dilation(), self.channels)?;
            tape.conv2d(d, pw, None, 1, 1, 1)?
        };
        let y = self.norm().forward(tape, store, y)?;
        Ok(tape.relu(y))
    }
}

/// Decoupling adapter: pointwise conv followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub conv: Conv1x1,
}

impl Adapter {
    pub fn new(prefix: impl Into<String>, channels: usize) -> Self {
        Adapter {
            conv: Conv1x1::new(prefix, channels, channels, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        self.conv.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let y = self.conv.forward(tape, store, x)?;
        Ok(tape.relu(y))
    }
}

/// Strided dense 3x3 + group norm + ReLU, used to lift images to feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct StemConv {
    pub prefix: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl StemConv {
    fn norm(&self) -> GroupNorm {
        GroupNorm {
            prefix: format!("{}.gn", self.prefix),
            channels: self.cout,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        store.insert_he(
            format!("{}.w", self.prefix),
            Shape::new(self.cout, self.cin, 3, 3),
            rng,
        )?;
        self.norm().init(store)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, &format!("{}.w", self.prefix))?;
        let y = tape.conv2d(x, w, None, self.stride, 1, 1)?;
        let y = self.norm().forward(tape, store, y)?;
        Ok(tape.relu(y))
    }
}
