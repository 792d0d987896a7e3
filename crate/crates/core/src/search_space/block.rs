//! Transformation blocks: the representation-sharing form and the fully
//! unshared form it replaces.

use std::collections::HashMap;

use rand::Rng;

use super::topology::{BlockTopology, Rep};
use super::transform::{Stream, TransformationId, Variant, NUM_CANDIDATES};
use crate::error::TensorError;
use crate::nn::{Adapter, ConvLayer};
use crate::tensor::{ParamStore, Shape, Tape, Tensor, Var};

/// Outputs of one block forward pass, in canonical candidate order, plus
/// counts of the convolutional layers that actually ran.
#[derive(Clone, Debug)]
pub struct CandidateOutputs {
    pub outputs: Vec<Var>,
    /// Conv-produced representations (each counts once, whatever its
    /// internal depthwise/pointwise split).
    pub representation_convs: usize,
    pub adapter_convs: usize,
}

fn check_channels(tape: &Tape, x: Var, c_prime: usize, who: &str) -> Result<(), TensorError> {
    let c = tape.shape(x).c();
    if c != c_prime {
        return Err(TensorError::InvalidArgument(format!(
            "{who}: input has {c} channels, block expects {c_prime}"
        )));
    }
    Ok(())
}

fn check_width(c_prime: usize) -> Result<(), TensorError> {
    if c_prime < 1 {
        return Err(TensorError::InvalidArgument(
            "block channel width must be at least 1".into(),
        ));
    }
    Ok(())
}

/// One conv stream of a shared block, exposing a subset of `t1..t6`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedStream {
    pub stream: Stream,
    pub channels: usize,
    pub topology: BlockTopology,
    pub variants: Vec<Variant>,
    /// `None` where a stem layer is not needed by any exposed variant.
    pub stem: Vec<Option<ConvLayer>>,
    pub branches: Vec<Option<ConvLayer>>,
    /// Adapters on the `t1` and `t2` taps when decoupled.
    pub adapters: Option<[Adapter; 2]>,
}

/// Forward products of a [`SharedStream`].
#[derive(Clone, Debug)]
pub struct StreamOutputs {
    pub outputs: Vec<(Variant, Var)>,
    pub representation_convs: usize,
    pub adapter_convs: usize,
}

impl SharedStream {
    pub fn new(
        prefix: &str,
        stream: Stream,
        channels: usize,
        decouple: bool,
        variants: &[Variant],
    ) -> Result<Self, TensorError> {
        check_width(channels)?;
        let topology = BlockTopology::default();
        topology.check().map_err(TensorError::InvalidArgument)?;
        let needed: Vec<Rep> = variants
            .iter()
            .flat_map(|v| topology.path(topology.tap(*v)))
            .collect();
        let p = format!("{prefix}.{}", stream.tag());
        let stem = (0..topology.stem_len)
            .map(|i| {
                needed.contains(&Rep::Stem(i)).then(|| {
                    ConvLayer::new(format!("{p}.stem{i}"), stream, topology.layer_kind(Rep::Stem(i)), channels)
                })
            })
            .collect();
        let branches = (0..topology.branches.len())
            .map(|i| {
                needed.contains(&Rep::Branch(i)).then(|| {
                    ConvLayer::new(format!("{p}.br{i}"), stream, topology.layer_kind(Rep::Branch(i)), channels)
                })
            })
            .collect();
        let adapters = decouple.then(|| {
            [
                Adapter::new(format!("{p}.h1"), channels),
                Adapter::new(format!("{p}.h2"), channels),
            ]
        });
        Ok(SharedStream {
            stream,
            channels,
            topology,
            variants: variants.to_vec(),
            stem,
            branches,
            adapters,
        })
    }

    pub fn layer(&self, rep: Rep) -> Option<&ConvLayer> {
        match rep {
            Rep::Stem(i) => self.stem[i].as_ref(),
            Rep::Branch(i) => self.branches[i].as_ref(),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.stem.iter().chain(&self.branches).flatten()
    }

    pub fn representation_count(&self) -> usize {
        self.layers().count()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        for l in self.layers() {
            l.init(store, rng)?;
        }
        if let Some(adapters) = &self.adapters {
            for a in adapters {
                a.init(store, rng)?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<StreamOutputs, TensorError> {
        check_channels(tape, x, self.channels, "shared stream")?;
        let mut reps: HashMap<Rep, Var> = HashMap::new();
        let mut convs = 0;
        let mut prev = x;
        for (i, layer) in self.stem.iter().enumerate() {
            let Some(layer) = layer else { break };
            prev = layer.forward(tape, store, prev)?;
            reps.insert(Rep::Stem(i), prev);
            convs += 1;
        }
        for (i, layer) in self.branches.iter().enumerate() {
            let Some(layer) = layer else { continue };
            let src = reps[&self.topology.branches[i].source];
            let out = layer.forward(tape, store, src)?;
            reps.insert(Rep::Branch(i), out);
            convs += 1;
        }
        let mut adapter_convs = 0;
        let mut outputs = Vec::with_capacity(self.variants.len());
        for v in &self.variants {
            let rep = reps[&self.topology.tap(*v)];
            let out = match (&self.adapters, v) {
                (Some(a), Variant::T1) => {
                    adapter_convs += 1;
                    a[0].forward(tape, store, rep)?
                }
                (Some(a), Variant::T2) => {
                    adapter_convs += 1;
                    a[1].forward(tape, store, rep)?
                }
                _ => rep,
            };
            outputs.push((*v, out));
        }
        Ok(StreamOutputs {
            outputs,
            representation_convs: convs,
            adapter_convs,
        })
    }
}

/// Representation-sharing block with both streams and all 13 candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedBlock {
    pub prefix: String,
    pub c_prime: usize,
    pub decouple: bool,
    pub streams: [SharedStream; 2],
}

impl SharedBlock {
    pub fn new(prefix: impl Into<String>, c_prime: usize, decouple: bool) -> Result<Self, TensorError> {
        let prefix = prefix.into();
        check_width(c_prime)?;
        let std = SharedStream::new(&prefix, Stream::Standard, c_prime, decouple, &Variant::ALL)?;
        let sep = SharedStream::new(&prefix, Stream::Separable, c_prime, decouple, &Variant::ALL)?;
        Ok(SharedBlock {
            prefix,
            c_prime,
            decouple,
            streams: [std, sep],
        })
    }

    pub fn stream(&self, s: Stream) -> &SharedStream {
        &self.streams[s as usize]
    }

    pub fn count_representations(&self) -> usize {
        self.streams.iter().map(SharedStream::representation_count).sum()
    }

    pub fn adapter_count(&self) -> usize {
        self.streams
            .iter()
            .map(|s| s.adapters.as_ref().map_or(0, |a| a.len()))
            .sum()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        for s in &self.streams {
            s.init(store, rng)?;
        }
        Ok(())
    }

    pub fn candidate_outputs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<CandidateOutputs, TensorError> {
        check_channels(tape, x, self.c_prime, "shared block")?;
        let mut outputs = Vec::with_capacity(NUM_CANDIDATES);
        let (mut reps, mut adapters) = (0, 0);
        for s in &self.streams {
            let o = s.forward(tape, store, x)?;
            reps += o.representation_convs;
            adapters += o.adapter_convs;
            outputs.extend(o.outputs.into_iter().map(|(_, v)| v));
        }
        outputs.push(zero_like(tape, x));
        Ok(CandidateOutputs {
            outputs,
            representation_convs: reps,
            adapter_convs: adapters,
        })
    }
}

fn zero_like(tape: &mut Tape, x: Var) -> Var {
    let shape: Shape = tape.shape(x);
    tape.constant(Tensor::zeros(shape))
}

/// Twelve independent pipelines, one per convolutional candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct UnsharedBlock {
    pub prefix: String,
    pub c_prime: usize,
    pub pipelines: Vec<(TransformationId, Vec<ConvLayer>)>,
}

impl UnsharedBlock {
    pub fn new(prefix: impl Into<String>, c_prime: usize) -> Result<Self, TensorError> {
        let prefix = prefix.into();
        check_width(c_prime)?;
        let pipelines = TransformationId::convolutional()
            .map(|t| {
                let (stream, variant) = match t {
                    TransformationId::Conv(s, v) => (s, v),
                    TransformationId::None => unreachable!("convolutional() excludes none"),
                };
                let layers = variant
                    .recipe()
                    .iter()
                    .enumerate()
                    .map(|(j, kind)| {
                        ConvLayer::new(
                            format!("{prefix}.{}.{}.l{j}", stream.tag(), variant.tag()),
                            stream,
                            *kind,
                            c_prime,
                        )
                    })
                    .collect();
                (t, layers)
            })
            .collect();
        Ok(UnsharedBlock {
            prefix,
            c_prime,
            pipelines,
        })
    }

    pub fn pipeline(&self, t: TransformationId) -> Option<&[ConvLayer]> {
        self.pipelines
            .iter()
            .find(|(id, _)| *id == t)
            .map(|(_, l)| l.as_slice())
    }

    pub fn count_representations(&self) -> usize {
        self.pipelines.iter().map(|(_, l)| l.len()).sum()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        for (_, layers) in &self.pipelines {
            for l in layers {
                l.init(store, rng)?;
            }
        }
        Ok(())
    }

    pub fn candidate_outputs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<CandidateOutputs, TensorError> {
        check_channels(tape, x, self.c_prime, "unshared block")?;
        let mut outputs = Vec::with_capacity(NUM_CANDIDATES);
        let mut convs = 0;
        for (_, layers) in &self.pipelines {
            let mut h = x;
            for l in layers {
                h = l.forward(tape, store, h)?;
                convs += 1;
            }
            outputs.push(h);
        }
        outputs.push(zero_like(tape, x));
        Ok(CandidateOutputs {
            outputs,
            representation_convs: convs,
            adapter_convs: 0,
        })
    }
}

/// Either block form, so networks can be built over both.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Block {
    Shared(SharedBlock),
    Unshared(UnsharedBlock),
}

impl Block {
    pub fn c_prime(&self) -> usize {
        match self {
            Block::Shared(b) => b.c_prime,
            Block::Unshared(b) => b.c_prime,
        }
    }

    pub fn count_representations(&self) -> usize {
        match self {
            Block::Shared(b) => b.count_representations(),
            Block::Unshared(b) => b.count_representations(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<(), TensorError> {
        match self {
            Block::Shared(b) => b.init(store, rng),
            Block::Unshared(b) => b.init(store, rng),
        }
    }

    pub fn candidate_outputs(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<CandidateOutputs, TensorError> {
        match self {
            Block::Shared(b) => b.candidate_outputs(tape, store, x),
            Block::Unshared(b) => b.candidate_outputs(tape, store, x),
        }
    }
}
