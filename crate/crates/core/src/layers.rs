//! Parameterized layers: convolution, dense, dropout and the
//! direct-attention LSTM decoder stack.
//!
//! Every layer exposes its trainable tensors through `params()` in a fixed
//! order, and its graph-building methods take the matching slice of bound
//! [`Var`]s in that same order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::ops::{Activation, Padding};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Whether a parameter counts towards the L2 penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn weight(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            kind: ParamKind::Weight,
        }
    }

    pub fn bias(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
            kind: ParamKind::Bias,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            name: self.name.clone(),
            value: self.value.cast(),
            kind: self.kind,
        }
    }
}

/// Registers parameters as trainable leaves, in order.
pub fn bind_params<T: Scalar>(g: &mut Graph<T>, params: &[&Param<T>]) -> Vec<Var> {
    params.iter().map(|p| g.param(p.value.clone())).collect()
}

/// Seeded Glorot-uniform initializer.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Initializer { rng }
    }

    pub fn glorot<T: Scalar>(
        &mut self,
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor<T> {
        let shape = shape.into();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(self.rng.gen_range(-limit..limit)))
            .collect();
        Tensor::from_parts_unchecked(shape, data)
    }
}

/// Convolution kernels `[K, C, k, k]` with per-filter bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerParams<T> {
    pub kernels: Param<T>,
    pub bias: Param<T>,
    pub activation: Activation,
}

impl<T: Scalar> ConvLayerParams<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        activation: Activation,
        init: &mut Initializer,
    ) -> Self {
        let kk = kernel * kernel;
        ConvLayerParams {
            kernels: Param::weight(
                format!("{name}.kernels"),
                init.glorot([filters, in_channels, kernel, kernel], in_channels * kk, filters * kk),
            ),
            bias: Param::bias(format!("{name}.bias"), Tensor::zeros([filters])),
            activation,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.kernels, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.kernels, &mut self.bias]
    }

    /// Same-padded stride-1 convolution followed by the layer activation.
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.conv2d(x, vars[0], Some(vars[1]), 1, Padding::Same)?;
        Ok(g.activation(y, self.activation))
    }
}

/// Transposed convolution kernels `[C_in, C_out, k, k]` with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DeconvLayerParams<T> {
    pub kernels: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub activation: Activation,
}

impl<T: Scalar> DeconvLayerParams<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
        init: &mut Initializer,
    ) -> Self {
        let kk = kernel * kernel;
        DeconvLayerParams {
            kernels: Param::weight(
                format!("{name}.kernels"),
                init.glorot(
                    [in_channels, out_channels, kernel, kernel],
                    in_channels * kk,
                    out_channels * kk,
                ),
            ),
            bias: Param::bias(format!("{name}.bias"), Tensor::zeros([out_channels])),
            stride,
            activation,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.kernels, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.kernels, &mut self.bias]
    }

    /// Upsamples by exactly `stride` (odd kernels, "same"-style padding).
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let k = self.kernels.value.shape()[2];
        let pad = (k - 1) / 2;
        let out_pad = self.stride - 1;
        let y = g.conv_transpose2d(x, vars[0], Some(vars[1]), self.stride, pad, out_pad)?;
        Ok(g.activation(y, self.activation))
    }
}

/// Fully connected layer `f(x · W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerParams<T> {
    pub weights: Param<T>,
    pub bias: Param<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayerParams<T> {
    pub fn new(
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        init: &mut Initializer,
    ) -> Self {
        DenseLayerParams {
            weights: Param::weight(
                format!("{name}.weights"),
                init.glorot([inputs, outputs], inputs, outputs),
            ),
            bias: Param::bias(format!("{name}.bias"), Tensor::zeros([outputs])),
            activation,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weights, &mut self.bias]
    }

    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = g.dense(x, vars[0], vars[1])?;
        Ok(g.activation(y, self.activation))
    }
}

/// Inverted dropout. Identity unless `training` and `rate > 0`.
pub fn dropout<T: Scalar>(
    input: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.shape(), rate, rng);
    let data = input
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&x, &m)| x * m)
        .collect();
    Ok(Tensor::from_parts_unchecked(input.shape().to_vec(), data))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TensorError::Invalid(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    Ok(())
}

fn dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Tensor<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::from_parts_unchecked(shape.to_vec(), data)
}

/// Dropout applied while building a training graph.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl DropoutCtx<'_> {
    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        check_rate(self.rate)?;
        if self.rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(g.shape(x), self.rate, self.rng);
        g.mul_const(x, mask)
    }
}

pub(crate) fn maybe_dropout<T: Scalar>(
    g: &mut Graph<T>,
    dropout: &mut Option<DropoutCtx<'_>>,
    x: Var,
) -> Result<Var> {
    match dropout {
        Some(ctx) => ctx.apply(g, x),
        None => Ok(x),
    }
}

/// Which gate multiplies `tanh(C_t)` when forming the hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HiddenGate {
    /// `h_t = tanh(C_t) ∘ o_t` (standard LSTM).
    #[default]
    Output,
    /// `h_t = tanh(C_t) ∘ i_t`; the output gate is computed but unused.
    Input,
}

impl HiddenGate {
    pub fn tag(self) -> &'static str {
        match self {
            HiddenGate::Output => "output",
            HiddenGate::Input => "input",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "output" => Some(HiddenGate::Output),
            "input" => Some(HiddenGate::Input),
            _ => None,
        }
    }
}

/// Gate order used throughout: input, forget, output, candidate.
pub const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// One gate of the bottom cell: `x W^x + h W^h + v W^v + y W^y + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectAttentionGate<T> {
    pub w_x: Param<T>,
    pub w_h: Param<T>,
    pub w_v: Param<T>,
    pub w_y: Param<T>,
    pub bias: Param<T>,
}

/// Bottom decoder cell fed by the corrupted row, the thought vector and the
/// previously emitted row.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectAttentionLstmCellParams<T> {
    pub row_width: usize,
    pub hidden: usize,
    pub thought: usize,
    /// Indexed by [`GATES`].
    pub gates: Vec<DirectAttentionGate<T>>,
}

impl<T: Scalar> DirectAttentionLstmCellParams<T> {
    pub fn new(name: &str, row_width: usize, hidden: usize, thought: usize, init: &mut Initializer) -> Self {
        let gates = GATES
            .iter()
            .map(|gate| {
                let bias = if *gate == "f" { T::one() } else { T::zero() };
                DirectAttentionGate {
                    w_x: Param::weight(
                        format!("{name}.{gate}.w_x"),
                        init.glorot([row_width, hidden], row_width, hidden),
                    ),
                    w_h: Param::weight(
                        format!("{name}.{gate}.w_h"),
                        init.glorot([hidden, hidden], hidden, hidden),
                    ),
                    w_v: Param::weight(
                        format!("{name}.{gate}.w_v"),
                        init.glorot([thought, hidden], thought, hidden),
                    ),
                    w_y: Param::weight(
                        format!("{name}.{gate}.w_y"),
                        init.glorot([row_width, hidden], row_width, hidden),
                    ),
                    bias: Param::bias(format!("{name}.{gate}.bias"), Tensor::full([hidden], bias)),
                }
            })
            .collect();
        DirectAttentionLstmCellParams {
            row_width,
            hidden,
            thought,
            gates,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.gates
            .iter()
            .flat_map(|g| [&g.w_x, &g.w_h, &g.w_v, &g.w_y, &g.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.gates
            .iter_mut()
            .flat_map(|g| [&mut g.w_x, &mut g.w_h, &mut g.w_v, &mut g.w_y, &mut g.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (2 * self.row_width + self.hidden + self.thought + 1)
    }

    /// Packs the per-gate matrices into one `[R + H + V + R, 4H]` operand.
    pub fn pack(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<PackedCell> {
        pack_gates(g, vars, 4, self.hidden)
    }

    /// One step of the bottom cell on `[B, *]` operands.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        g: &mut Graph<T>,
        packed: &PackedCell,
        x_t: Var,
        h_prev: Var,
        c_prev: Var,
        v: Var,
        y_prev: Var,
        mode: HiddenGate,
    ) -> Result<CellVars> {
        let joined = g.concat(&[x_t, h_prev, v, y_prev], 1)?;
        gate_update(g, packed, joined, c_prev, self.hidden, mode)
    }
}

/// One gate of an upper cell: `h_below W^in + h W^h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedGate<T> {
    pub w_in: Param<T>,
    pub w_h: Param<T>,
    pub bias: Param<T>,
}

/// Standard LSTM cell for decoder layers above the first.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedLstmCellParams<T> {
    pub hidden: usize,
    pub gates: Vec<StackedGate<T>>,
}

impl<T: Scalar> StackedLstmCellParams<T> {
    pub fn new(name: &str, hidden: usize, init: &mut Initializer) -> Self {
        let gates = GATES
            .iter()
            .map(|gate| {
                let bias = if *gate == "f" { T::one() } else { T::zero() };
                StackedGate {
                    w_in: Param::weight(
                        format!("{name}.{gate}.w_in"),
                        init.glorot([hidden, hidden], hidden, hidden),
                    ),
                    w_h: Param::weight(
                        format!("{name}.{gate}.w_h"),
                        init.glorot([hidden, hidden], hidden, hidden),
                    ),
                    bias: Param::bias(format!("{name}.{gate}.bias"), Tensor::full([hidden], bias)),
                }
            })
            .collect();
        StackedLstmCellParams { hidden, gates }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.gates
            .iter()
            .flat_map(|g| [&g.w_in, &g.w_h, &g.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.gates
            .iter_mut()
            .flat_map(|g| [&mut g.w_in, &mut g.w_h, &mut g.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (2 * self.hidden + 1)
    }

    pub fn pack(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<PackedCell> {
        pack_gates(g, vars, 2, self.hidden)
    }

    pub fn step(
        &self,
        g: &mut Graph<T>,
        packed: &PackedCell,
        h_below: Var,
        h_prev: Var,
        c_prev: Var,
        mode: HiddenGate,
    ) -> Result<CellVars> {
        let joined = g.concat(&[h_below, h_prev], 1)?;
        gate_update(g, packed, joined, c_prev, self.hidden, mode)
    }
}

/// Gate weights stacked into one matrix per cell, built once per graph.
#[derive(Debug, Clone, Copy)]
pub struct PackedCell {
    pub weights: Var,
    pub bias: Var,
}

/// `vars` holds, per gate, `sources` matrices followed by one bias.
fn pack_gates<T: Scalar>(
    g: &mut Graph<T>,
    vars: &[Var],
    sources: usize,
    hidden: usize,
) -> Result<PackedCell> {
    let per_gate = sources + 1;
    if vars.len() != 4 * per_gate {
        return Err(TensorError::Invalid(format!(
            "expected {} cell parameters, got {}",
            4 * per_gate,
            vars.len()
        )));
    }
    let mut blocks = Vec::with_capacity(sources);
    for s in 0..sources {
        let row: Vec<Var> = (0..4).map(|gate| vars[gate * per_gate + s]).collect();
        blocks.push(g.concat(&row, 1)?);
    }
    let weights = g.concat(&blocks, 0)?;
    let mut biases = Vec::with_capacity(4);
    for gate in 0..4 {
        biases.push(g.reshape(vars[gate * per_gate + sources], [1, hidden])?);
    }
    let row = g.concat(&biases, 1)?;
    let bias = g.reshape(row, [4 * hidden])?;
    Ok(PackedCell { weights, bias })
}

/// Per-step cell quantities as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub h: Var,
    pub c: Var,
    pub input_gate: Var,
    pub forget_gate: Var,
    pub output_gate: Var,
    pub candidate: Var,
}

fn gate_update<T: Scalar>(
    g: &mut Graph<T>,
    packed: &PackedCell,
    joined: Var,
    c_prev: Var,
    hidden: usize,
    mode: HiddenGate,
) -> Result<CellVars> {
    let pre = g.dense(joined, packed.weights, packed.bias)?;
    let pre_i = g.slice_cols(pre, 0, hidden)?;
    let pre_f = g.slice_cols(pre, hidden, hidden)?;
    let pre_o = g.slice_cols(pre, 2 * hidden, hidden)?;
    let pre_c = g.slice_cols(pre, 3 * hidden, hidden)?;
    let i = g.sigmoid(pre_i);
    let f = g.sigmoid(pre_f);
    let o = g.sigmoid(pre_o);
    let cand = g.tanh(pre_c);
    let kept = g.mul(c_prev, f)?;
    let fresh = g.mul(cand, i)?;
    let c = g.add(kept, fresh)?;
    let squashed = g.tanh(c);
    let gate = match mode {
        HiddenGate::Output => o,
        HiddenGate::Input => i,
    };
    let h = g.mul(squashed, gate)?;
    Ok(CellVars {
        h,
        c,
        input_gate: i,
        forget_gate: f,
        output_gate: o,
        candidate: cand,
    })
}

/// Row emission `y_t = σ(h_t W^y + b_y)` on top of the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputProjection<T> {
    pub weights: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> OutputProjection<T> {
    pub fn new(name: &str, hidden: usize, row_width: usize, init: &mut Initializer) -> Self {
        OutputProjection {
            weights: Param::weight(
                format!("{name}.weights"),
                init.glorot([hidden, row_width], hidden, row_width),
            ),
            bias: Param::bias(format!("{name}.bias"), Tensor::zeros([row_width])),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weights, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Per-layer `(h, C)` plus the previously emitted row.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub y_prev: Tensor<T>,
}

impl<T: Scalar> LstmState<T> {
    pub fn zeros(layers: usize, hidden: usize, row_width: usize) -> Self {
        LstmState {
            layers: (0..layers)
                .map(|_| (Tensor::zeros([hidden]), Tensor::zeros([hidden])))
                .collect(),
            y_prev: Tensor::zeros([row_width]),
        }
    }
}

/// Graph-side mirror of [`LstmState`] for a batch.
#[derive(Debug, Clone)]
pub struct StateVars {
    pub layers: Vec<(Var, Var)>,
    pub y_prev: Var,
}

/// The multilayer decoder: one direct-attention cell, `L - 1` standard cells
/// and the row projection.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStackParams<T> {
    pub bottom: DirectAttentionLstmCellParams<T>,
    pub upper: Vec<StackedLstmCellParams<T>>,
    pub projection: OutputProjection<T>,
    pub mode: HiddenGate,
}

/// Bound and packed decoder operands for one graph.
pub struct BoundStack {
    cells: Vec<PackedCell>,
    proj_w: Var,
    proj_b: Var,
}

impl<T: Scalar> LstmStackParams<T> {
    pub fn new(
        name: &str,
        layers: usize,
        row_width: usize,
        hidden: usize,
        thought: usize,
        mode: HiddenGate,
        init: &mut Initializer,
    ) -> Result<Self> {
        if layers == 0 || hidden == 0 || row_width == 0 || thought == 0 {
            return Err(TensorError::Invalid("decoder dimensions must be positive".into()));
        }
        let bottom = DirectAttentionLstmCellParams::new(&format!("{name}.l0"), row_width, hidden, thought, init);
        let upper = (1..layers)
            .map(|l| StackedLstmCellParams::new(&format!("{name}.l{l}"), hidden, init))
            .collect();
        let projection = OutputProjection::new(&format!("{name}.out"), hidden, row_width, init);
        Ok(LstmStackParams {
            bottom,
            upper,
            projection,
            mode,
        })
    }

    pub fn layers(&self) -> usize {
        1 + self.upper.len()
    }

    pub fn hidden(&self) -> usize {
        self.bottom.hidden
    }

    pub fn row_width(&self) -> usize {
        self.bottom.row_width
    }

    pub fn thought(&self) -> usize {
        self.bottom.thought
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = self.bottom.params();
        for cell in &self.upper {
            out.extend(cell.params());
        }
        out.extend(self.projection.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = self.bottom.params_mut();
        for cell in &mut self.upper {
            out.extend(cell.params_mut());
        }
        out.extend(self.projection.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.bottom.param_count()
            + self.upper.iter().map(|c| c.param_count()).sum::<usize>()
            + self.hidden() * self.row_width()
            + self.row_width()
    }

    pub fn bind(&self, g: &mut Graph<T>, vars: &[Var]) -> Result<BoundStack> {
        let expected = self.params().len();
        if vars.len() != expected {
            return Err(TensorError::Invalid(format!(
                "expected {expected} decoder parameters, got {}",
                vars.len()
            )));
        }
        let mut cells = Vec::with_capacity(self.layers());
        let bottom_len = 20;
        cells.push(self.bottom.pack(g, &vars[..bottom_len])?);
        let mut offset = bottom_len;
        for cell in &self.upper {
            cells.push(cell.pack(g, &vars[offset..offset + 12])?);
            offset += 12;
        }
        Ok(BoundStack {
            cells,
            proj_w: vars[offset],
            proj_b: vars[offset + 1],
        })
    }

    pub fn zero_state(&self, g: &mut Graph<T>, batch: usize) -> StateVars {
        let h = self.hidden();
        StateVars {
            layers: (0..self.layers())
                .map(|_| {
                    (
                        g.constant(Tensor::zeros([batch, h])),
                        g.constant(Tensor::zeros([batch, h])),
                    )
                })
                .collect(),
            y_prev: g.constant(Tensor::zeros([batch, self.row_width()])),
        }
    }

    /// One decoding step; returns the emitted row and the per-layer cells.
    ///
    /// Layer 1 reads `(x_t, v, y_prev)`; layer `k > 1` reads layer `k - 1`'s
    /// hidden state (after dropout, when active). The emitted row becomes the
    /// next `y_prev`.
    pub fn step_graph(
        &self,
        g: &mut Graph<T>,
        bound: &BoundStack,
        x_t: Var,
        state: &mut StateVars,
        v: Var,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<(Var, Vec<CellVars>)> {
        let mut trace = Vec::with_capacity(self.layers());
        let (h0, c0) = state.layers[0];
        let first = self
            .bottom
            .step(g, &bound.cells[0], x_t, h0, c0, v, state.y_prev, self.mode)?;
        state.layers[0] = (first.h, first.c);
        trace.push(first);
        let mut below = first.h;
        for (k, cell) in self.upper.iter().enumerate() {
            let layer = k + 1;
            let input = maybe_dropout(g, dropout, below)?;
            let (h, c) = state.layers[layer];
            let out = cell.step(g, &bound.cells[layer], input, h, c, self.mode)?;
            state.layers[layer] = (out.h, out.c);
            trace.push(out);
            below = out.h;
        }
        let logits = g.dense(below, bound.proj_w, bound.proj_b)?;
        let y = g.sigmoid(logits);
        state.y_prev = y;
        Ok((y, trace))
    }

    /// Runs all `T` steps of `rows: [B, T, R]` and returns `[B, T, R]`.
    pub fn decode_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        rows: Var,
        v: Var,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let shape = g.shape(rows).to_vec();
        let [batch, steps, width] = shape[..] else {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                left: shape.clone(),
                right: vec![0, 0, self.row_width()],
            });
        };
        if width != self.row_width() || g.shape(v) != [batch, self.thought()] {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                left: shape.clone(),
                right: g.shape(v).to_vec(),
            });
        }
        let bound = self.bind(g, vars)?;
        let mut state = self.zero_state(g, batch);
        let mut emitted = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = g.select_step(rows, t)?;
            let (y, _) = self.step_graph(g, &bound, x_t, &mut state, v, dropout)?;
            emitted.push(y);
        }
        g.stack_steps(&emitted)
    }

    /// Eager single step on unbatched tensors.
    pub fn stack_step(
        &self,
        x_t: &Tensor<T>,
        state: &LstmState<T>,
        v: &Tensor<T>,
    ) -> Result<(Tensor<T>, LstmState<T>)> {
        self.check_state(state)?;
        check_len("x_t", x_t, self.row_width())?;
        check_len("v", v, self.thought())?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().iter().map(|p| g.constant(p.value.clone())).collect();
        let bound = self.bind(&mut g, &vars)?;
        let row = |g: &mut Graph<T>, t: &Tensor<T>| {
            let n = t.len();
            g.constant(t.clone().reshape([1, n]).expect("vector"))
        };
        let x = row(&mut g, x_t);
        let vv = row(&mut g, v);
        let mut sv = StateVars {
            layers: state
                .layers
                .iter()
                .map(|(h, c)| (row(&mut g, h), row(&mut g, c)))
                .collect(),
            y_prev: row(&mut g, &state.y_prev),
        };
        let (y, _) = self.step_graph(&mut g, &bound, x, &mut sv, vv, &mut None)?;
        let flat = |g: &Graph<T>, v: Var| g.value(v).clone().reshape([g.value(v).len()]).expect("row");
        let next = LstmState {
            layers: sv.layers.iter().map(|&(h, c)| (flat(&g, h), flat(&g, c))).collect(),
            y_prev: flat(&g, sv.y_prev),
        };
        Ok((flat(&g, y), next))
    }

    fn check_state(&self, state: &LstmState<T>) -> Result<()> {
        if state.layers.len() != self.layers() {
            return Err(TensorError::Invalid(format!(
                "state has {} layers, decoder has {}",
                state.layers.len(),
                self.layers()
            )));
        }
        for (h, c) in &state.layers {
            check_len("h", h, self.hidden())?;
            check_len("C", c, self.hidden())?;
        }
        check_len("y_prev", &state.y_prev, self.row_width())
    }
}

fn check_len<T: Scalar>(what: &'static str, t: &Tensor<T>, n: usize) -> Result<()> {
    if t.shape() != [n] {
        return Err(TensorError::ShapeMismatch {
            op: what,
            left: t.shape().to_vec(),
            right: vec![n],
        });
    }
    Ok(())
}

/// Eager output of [`cell_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct CellStep<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
    pub input_gate: Tensor<T>,
    pub forget_gate: Tensor<T>,
    pub output_gate: Tensor<T>,
    pub candidate: Tensor<T>,
}

/// Eager single step of the bottom direct-attention cell on `[N]` vectors.
pub fn cell_step<T: Scalar>(
    params: &DirectAttentionLstmCellParams<T>,
    x_t: &Tensor<T>,
    state: (&Tensor<T>, &Tensor<T>),
    v: &Tensor<T>,
    y_prev: &Tensor<T>,
    mode: HiddenGate,
) -> Result<CellStep<T>> {
    check_len("x_t", x_t, params.row_width)?;
    check_len("h", state.0, params.hidden)?;
    check_len("C", state.1, params.hidden)?;
    check_len("v", v, params.thought)?;
    check_len("y_prev", y_prev, params.row_width)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = params.params().iter().map(|p| g.constant(p.value.clone())).collect();
    let packed = params.pack(&mut g, &vars)?;
    let mut row = |t: &Tensor<T>| {
        let n = t.len();
        g.constant(t.clone().reshape([1, n]).expect("vector"))
    };
    let (x, h, c, vv, y) = (row(x_t), row(state.0), row(state.1), row(v), row(y_prev));
    let out = params.step(&mut g, &packed, x, h, c, vv, y, mode)?;
    let flat = |v: Var| g.value(v).clone().reshape([params.hidden]).expect("hidden");
    Ok(CellStep {
        h: flat(out.h),
        c: flat(out.c),
        input_gate: flat(out.input_gate),
        forget_gate: flat(out.forget_gate),
        output_gate: flat(out.output_gate),
        candidate: flat(out.candidate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn init(seed: u64) -> Initializer {
        Initializer::new(ChaCha8Rng::seed_from_u64(seed))
    }

    fn zero_cell(r: usize, h: usize, v: usize) -> DirectAttentionLstmCellParams<f64> {
        let mut cell = DirectAttentionLstmCellParams::new("c", r, h, v, &mut init(0));
        for p in cell.params_mut() {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        cell
    }

    #[test]
    fn zero_cell_halves_memory() {
        let cell = zero_cell(3, 4, 2);
        let c_prev = Tensor::from_f64([4], &[1.0, -2.0, 0.5, 0.0]).unwrap();
        let h_prev = Tensor::from_f64([4], &[0.3, 0.1, -0.2, 0.9]).unwrap();
        let x = Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        for mode in [HiddenGate::Output, HiddenGate::Input] {
            let out = cell_step(&cell, &x, (&h_prev, &c_prev), &Tensor::zeros([2]), &Tensor::zeros([3]), mode)
                .unwrap();
            for k in 0..4 {
                assert_eq!(out.input_gate.data()[k], 0.5);
                assert_eq!(out.forget_gate.data()[k], 0.5);
                assert_eq!(out.output_gate.data()[k], 0.5);
                assert_eq!(out.candidate.data()[k], 0.0);
                let c = 0.5 * c_prev.data()[k];
                assert_eq!(out.c.data()[k], c);
                assert!((out.h.data()[k] - 0.5 * c.tanh()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dropout_rate_checks() {
        let x = Tensor::<f64>::full([10], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, false, &mut rng).is_err());
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.25, false, &mut rng).unwrap(), x);
    }

    #[test]
    fn cell_shape_errors() {
        let cell = zero_cell(3, 4, 2);
        let bad = Tensor::<f64>::zeros([5]);
        let h = Tensor::zeros([4]);
        let r = cell_step(&cell, &bad, (&h, &h), &Tensor::zeros([2]), &Tensor::zeros([3]), HiddenGate::Output);
        assert!(matches!(r, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn stack_state_layer_count_checked() {
        let stack = LstmStackParams::<f64>::new("d", 2, 3, 4, 2, HiddenGate::Output, &mut init(3)).unwrap();
        let state = LstmState::zeros(3, 4, 3);
        assert!(stack
            .stack_step(&Tensor::zeros([3]), &state, &Tensor::zeros([2]))
            .is_err());
    }

    #[test]
    fn param_order_and_counts() {
        let stack = LstmStackParams::<f64>::new("d", 5, 28, 16, 100, HiddenGate::Output, &mut init(3)).unwrap();
        let total: usize = stack.params().iter().map(|p| p.value.len()).sum();
        assert_eq!(total, stack.param_count());
        assert_eq!(stack.params().len(), 20 + 4 * 12 + 2);
        assert_eq!(stack.params()[0].name, "d.l0.i.w_x");
        assert_eq!(stack.params()[6].name, "d.l0.f.w_h");
        let forget_bias = &stack.params()[9];
        assert_eq!(forget_bias.name, "d.l0.f.bias");
        assert!(forget_bias.value.data().iter().all(|&v| v == 1.0));
    }
}
