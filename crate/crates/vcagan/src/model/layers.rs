//! Parameter store and the small layer building blocks.

use crate::tensor::{rnn, Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

/// Index of a named parameter in the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named, shaped, trainable tensors with gradient slots. One store is shared
/// by every network module; optimizers and checkpoints address parameters by
/// name.
#[derive(Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, g: Option<Tensor>) {
        self.grads[id.0] = g;
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    /// Ids whose name starts with any of the given prefixes, in store order.
    pub fn group(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| prefixes.iter().any(|p| self.name(id).starts_with(p)))
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }
}

/// Per-step registration of parameters as tape leaves.
pub struct Binding {
    ids: Vec<Option<TensorId>>,
}

impl Binding {
    /// Register every parameter on the tape; `trainable` decides which get
    /// gradients.
    pub fn bind(store: &ParamStore, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Self {
        Self::bind_filtered(store, tape, |_| true, trainable)
    }

    /// Register only the parameters selected by `include`; accessing an
    /// excluded parameter panics, which keeps unrelated subnets off the tape.
    pub fn bind_filtered(
        store: &ParamStore,
        tape: &mut Tape,
        include: impl Fn(&str) -> bool,
        trainable: impl Fn(&str) -> bool,
    ) -> Self {
        let ids = store
            .ids()
            .map(|id| {
                let name = store.name(id);
                include(name).then(|| tape.leaf(store.value(id), trainable(name)))
            })
            .collect();
        Binding { ids }
    }

    pub fn get(&self, id: ParamId) -> TensorId {
        self.ids[id.0].expect("parameter not bound")
    }

    pub fn tensor_ids(&self, params: &[ParamId]) -> Vec<TensorId> {
        params.iter().map(|&p| self.get(p)).collect()
    }
}

/// Centered uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Network-wide activation. SiLU keeps every layer smooth, which the
/// end-to-end gradient checks rely on.
pub fn activate(tape: &mut Tape, x: TensorId) -> TensorId {
    tape.silu(x)
}

/// Convolution of any rank with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
}

impl Conv {
    /// kernel shape: [c_out, c_in, k...]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
    ) -> Self {
        let mut wshape = vec![c_out, c_in];
        wshape.extend_from_slice(kernel);
        let fan_in = c_in * kernel.iter().product::<usize>();
        let w = store.add(format!("{name}.w"), init_uniform(&wshape, fan_in, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv { w, b, stride: stride.to_vec(), pad: pad.to_vec() }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> TensorId {
        let y = tape
            .conv(x, bind.get(self.w), &self.stride, &self.pad)
            .expect("conv geometry fixed at construction");
        tape.add_channel_bias(y, bind.get(self.b))
    }
}

/// Two convs with a (projected) skip connection; leaky ReLU activations.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: &[usize],
        stride: &[usize],
    ) -> Self {
        let pad: Vec<usize> = kernel.iter().map(|&k| k / 2).collect();
        let ones = vec![1usize; kernel.len()];
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), c_in, c_out, kernel, stride, &pad);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), c_out, c_out, kernel, &ones, &pad);
        let needs_proj = c_in != c_out || stride.iter().any(|&s| s != 1);
        let skip = needs_proj.then(|| {
            Conv::new(
                store,
                rng,
                &format!("{name}.skip"),
                c_in,
                c_out,
                &ones,
                stride,
                &vec![0usize; kernel.len()],
            )
        });
        ResBlock { conv1, conv2, skip }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> TensorId {
        let h = self.conv1.forward(tape, bind, x);
        let h = activate(tape, h);
        let h = self.conv2.forward(tape, bind, h);
        let s = match &self.skip {
            Some(proj) => proj.forward(tape, bind, x),
            None => x,
        };
        let y = tape.add(h, s);
        activate(tape, y)
    }
}

/// x[m, k] * w[k, n] + b
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(&[d_in, d_out], d_in, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: TensorId) -> TensorId {
        let y = tape.matmul(x, bind.get(self.w));
        tape.add(y, bind.get(self.b))
    }
}

/// Parameter ids for one stacked bidirectional GRU.
#[derive(Debug, Clone)]
pub struct Gru {
    pub layers: Vec<GruLayerParams>,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct GruLayerParams {
    pub fwd: GruDirParams,
    pub bwd: GruDirParams,
}

#[derive(Debug, Clone)]
pub struct GruDirParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        num_layers: usize,
    ) -> Self {
        let mut layers = Vec::new();
        for l in 0..num_layers {
            let input = if l == 0 { d_in } else { 2 * hidden };
            let mut dir = |tag: &str, rng: &mut ChaCha12Rng| GruDirParams {
                w_ih: store.add(
                    format!("{name}.l{l}.{tag}.w_ih"),
                    init_uniform(&[input, 3 * hidden], input, rng),
                ),
                w_hh: store.add(
                    format!("{name}.l{l}.{tag}.w_hh"),
                    init_uniform(&[hidden, 3 * hidden], hidden, rng),
                ),
                b_ih: store.add(format!("{name}.l{l}.{tag}.b_ih"), Tensor::zeros(&[1, 3 * hidden])),
                b_hh: store.add(format!("{name}.l{l}.{tag}.b_hh"), Tensor::zeros(&[1, 3 * hidden])),
            };
            let fwd = dir("fwd", rng);
            let bwd = dir("bwd", rng);
            layers.push(GruLayerParams { fwd, bwd });
        }
        Gru { layers, hidden }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, seq: TensorId) -> TensorId {
        let layers: Vec<rnn::GruLayer> = self
            .layers
            .iter()
            .map(|l| rnn::GruLayer {
                fwd: rnn::GruDirection {
                    w_ih: bind.get(l.fwd.w_ih),
                    w_hh: bind.get(l.fwd.w_hh),
                    b_ih: bind.get(l.fwd.b_ih),
                    b_hh: bind.get(l.fwd.b_hh),
                },
                bwd: rnn::GruDirection {
                    w_ih: bind.get(l.bwd.w_ih),
                    w_hh: bind.get(l.bwd.w_hh),
                    b_ih: bind.get(l.bwd.b_ih),
                    b_hh: bind.get(l.bwd.b_hh),
                },
            })
            .collect();
        rnn::gru_bidirectional(tape, seq, &layers, self.hidden).expect("non-empty sequence")
    }
}
