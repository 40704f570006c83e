//! The two complete architectures: the CNN encoder / direct-attention LSTM
//! decoder, and the convolutional encoder-decoder baseline.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::{images_to_tensor, tensor_to_images, Image};
use crate::layers::{
    bind_params, maybe_dropout, ConvLayerParams, DeconvLayerParams, DenseLayerParams, DropoutCtx,
    HiddenGate, Initializer, LstmStackParams, Param,
};
use crate::ops::Activation;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Stream id reserved for parameter initialization draws.
const INIT_STREAM: u64 = 0x1A17;

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    CnnLstm,
    CnnCnn,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::CnnLstm => "cnn-lstm",
            ModelKind::CnnCnn => "cnn-cnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cnn-lstm" => Some(ModelKind::CnnLstm),
            "cnn-cnn" => Some(ModelKind::CnnCnn),
            _ => None,
        }
    }

    pub const ALL: [ModelKind; 2] = [ModelKind::CnnLstm, ModelKind::CnnCnn];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Encoder layout: conv → pool → conv → pool → fully connected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub thought: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_side: 28,
            conv1_filters: 32,
            conv2_filters: 64,
            kernel: 5,
            pool: 2,
            thought: 100,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        let shrink = self.pool * self.pool;
        if self.image_side == 0 || self.pool == 0 || self.image_side % shrink != 0 {
            return Err(TensorError::Invalid(format!(
                "image side {} must be divisible by {shrink}",
                self.image_side
            )));
        }
        if self.kernel % 2 == 0 || self.conv1_filters == 0 || self.conv2_filters == 0 || self.thought == 0 {
            return Err(TensorError::Invalid(format!("bad encoder config {self:?}")));
        }
        Ok(())
    }

    pub fn flat_features(&self) -> usize {
        let s = self.image_side / (self.pool * self.pool);
        self.conv2_filters * s * s
    }

    /// Shapes after input, conv1, pool1, conv2, pool2 and the dense layer.
    pub fn expected_trace(&self) -> Vec<Vec<usize>> {
        let s = self.image_side;
        let (s2, s4) = (s / self.pool, s / (self.pool * self.pool));
        vec![
            vec![1, s, s],
            vec![self.conv1_filters, s, s],
            vec![self.conv1_filters, s2, s2],
            vec![self.conv2_filters, s2, s2],
            vec![self.conv2_filters, s4, s4],
            vec![self.thought],
        ]
    }

    pub fn param_count(&self) -> usize {
        let kk = self.kernel * self.kernel;
        (self.conv1_filters * kk + self.conv1_filters)
            + (self.conv2_filters * self.conv1_filters * kk + self.conv2_filters)
            + (self.flat_features() * self.thought + self.thought)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub row_width: usize,
    pub thought: usize,
    pub mode: HiddenGate,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 5,
            hidden: 128,
            row_width: 28,
            thought: 100,
            mode: HiddenGate::Output,
        }
    }
}

impl DecoderConfig {
    /// Closed-form trainable-parameter count of the decoder stack.
    pub fn param_count(&self) -> usize {
        let (h, r, v) = (self.hidden, self.row_width, self.thought);
        let bottom = 4 * (r * h + h * h + v * h + r * h + h);
        let upper = (self.layers - 1) * 4 * (h * h + h * h + h);
        bottom + upper + h * r + r
    }
}

/// Convolutional encoder producing the tanh-squashed thought vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub conv1: ConvLayerParams<T>,
    pub conv2: ConvLayerParams<T>,
    pub fc: DenseLayerParams<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, init: &mut Initializer) -> Result<Self> {
        config.validate()?;
        Ok(Encoder {
            config,
            conv1: ConvLayerParams::new("encoder.conv1", 1, config.conv1_filters, config.kernel, Activation::Relu, init),
            conv2: ConvLayerParams::new(
                "encoder.conv2",
                config.conv1_filters,
                config.conv2_filters,
                config.kernel,
                Activation::Relu,
                init,
            ),
            fc: DenseLayerParams::new("encoder.fc", config.flat_features(), config.thought, Activation::Tanh, init),
        })
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.fc.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.fc.params_mut());
        p
    }

    /// `images: [B, S, S]` → `v: [B, thought]`, plus the per-stage shapes
    /// (without batch axis).
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &[Var], images: Var) -> Result<(Var, Vec<Vec<usize>>)> {
        let shape = g.shape(images).to_vec();
        let s = self.config.image_side;
        let [b, h, w] = shape[..] else {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: shape,
                right: vec![0, s, s],
            });
        };
        if h != s || w != s {
            return Err(TensorError::ShapeMismatch {
                op: "encode",
                left: shape,
                right: vec![b, s, s],
            });
        }
        let mut trace = Vec::new();
        let strip = |g: &Graph<T>, v: Var| g.shape(v)[1..].to_vec();
        let x = g.reshape(images, [b, 1, s, s])?;
        trace.push(strip(g, x));
        let c1 = self.conv1.forward(g, &vars[0..2], x)?;
        trace.push(strip(g, c1));
        let p1 = g.maxpool2d(c1, self.config.pool, self.config.pool)?;
        trace.push(strip(g, p1));
        let c2 = self.conv2.forward(g, &vars[2..4], p1)?;
        trace.push(strip(g, c2));
        let p2 = g.maxpool2d(c2, self.config.pool, self.config.pool)?;
        trace.push(strip(g, p2));
        let flat = g.reshape(p2, [b, self.config.flat_features()])?;
        let v = self.fc.forward(g, &vars[4..6], flat)?;
        trace.push(strip(g, v));
        Ok((v, trace))
    }

    /// Runs one image through the encoder and reports every stage shape.
    pub fn trace(&self, image: &Image) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().iter().map(|p| g.constant(p.value.clone())).collect();
        let x = g.constant(images_to_tensor(std::slice::from_ref(image)));
        Ok(self.forward_graph(&mut g, &vars, x)?.1)
    }
}

/// Common surface of both restoration models.
pub trait RestorationModel<T: Scalar> {
    fn kind(&self) -> ModelKind;
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    /// `images: [B, S, S]` → restored `[B, S, S]` in `(0, 1)`.
    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: Var,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var>;
    /// Architecture settings as `key=value` pairs, enough to rebuild the model.
    fn config_echo(&self) -> Vec<(String, String)>;
    fn image_side(&self) -> usize;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Inference (no dropout) on a batch of images, order preserving.
    fn restore_batch(&self, images: &[Image]) -> Result<Vec<Image>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for im in images {
            if im.side() != self.image_side() {
                return Err(TensorError::ShapeMismatch {
                    op: "restore",
                    left: vec![im.side(), im.side()],
                    right: vec![self.image_side(), self.image_side()],
                });
            }
            if !im.is_normalized() {
                return Err(TensorError::Invalid("input image has values outside [0, 1]".into()));
            }
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params().iter().map(|p| g.constant(p.value.clone())).collect();
        let x = g.constant(images_to_tensor(images));
        let y = self.forward_graph(&mut g, &vars, x, &mut None)?;
        Ok(tensor_to_images(g.value(y)))
    }
}

/// CNN encoder with a multilayer direct-attention LSTM decoder that emits
/// the restored image one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnLstmModel<T> {
    pub encoder: Encoder<T>,
    pub decoder: LstmStackParams<T>,
}

impl<T: Scalar> CnnLstmModel<T> {
    pub fn new(enc: EncoderConfig, dec: DecoderConfig, seed: u64) -> Result<Self> {
        if enc.thought != dec.thought {
            return Err(TensorError::Invalid(format!(
                "encoder emits {} features but decoder consumes {}",
                enc.thought, dec.thought
            )));
        }
        if dec.row_width != enc.image_side {
            return Err(TensorError::Invalid(format!(
                "decoder row width {} differs from image side {}",
                dec.row_width, enc.image_side
            )));
        }
        if dec.layers == 0 {
            return Err(TensorError::Invalid("decoder needs at least one layer".into()));
        }
        let mut init = Initializer::new(init_rng(seed));
        let encoder = Encoder::new(enc, &mut init)?;
        let decoder = LstmStackParams::new("decoder", dec.layers, dec.row_width, dec.hidden, dec.thought, dec.mode, &mut init)?;
        let model = CnnLstmModel { encoder, decoder };
        let expected = enc.param_count() + dec.param_count();
        if model.param_count() != expected {
            return Err(TensorError::Invalid(format!(
                "parameter census {} differs from closed form {expected}",
                model.param_count()
            )));
        }
        let trace = shape_algebra_trace(&enc)?;
        if trace != enc.expected_trace() {
            return Err(TensorError::Invalid(format!("encoder shape trace {trace:?}")));
        }
        Ok(model)
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder.layers(),
            hidden: self.decoder.hidden(),
            row_width: self.decoder.row_width(),
            thought: self.decoder.thought(),
            mode: self.decoder.mode,
        }
    }

    fn split_vars<'a>(&self, vars: &'a [Var]) -> (&'a [Var], &'a [Var]) {
        vars.split_at(6)
    }

    /// Thought vector of one normalized image.
    pub fn encode(&self, image: &Image) -> Result<Tensor<T>> {
        check_image(image, self.encoder.config.image_side)?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.encoder.params().iter().map(|p| g.constant(p.value.clone())).collect();
        let x = g.constant(images_to_tensor(std::slice::from_ref(image)));
        let (v, _) = self.encoder.forward_graph(&mut g, &vars, x)?;
        g.value(v).clone().reshape([self.encoder.config.thought])
    }

    /// Emits the restored image row by row from `v` and the corrupted rows.
    pub fn decode(&self, v: &Tensor<T>, corrupted: &Image) -> Result<Image> {
        check_image(corrupted, self.encoder.config.image_side)?;
        if v.shape() != [self.decoder.thought()] {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                left: v.shape().to_vec(),
                right: vec![self.decoder.thought()],
            });
        }
        let mut g = Graph::new();
        let vars: Vec<Var> = self.decoder.params().iter().map(|p| g.constant(p.value.clone())).collect();
        let rows = g.constant(images_to_tensor(std::slice::from_ref(corrupted)));
        let vv = g.constant(v.clone().reshape([1, self.decoder.thought()])?);
        let y = self.decoder.decode_graph(&mut g, &vars, rows, vv, &mut None)?;
        Ok(tensor_to_images(g.value(y)).remove(0))
    }

    pub fn forward(&self, corrupted: &Image) -> Result<Image> {
        let v = self.encode(corrupted)?;
        self.decode(&v, corrupted)
    }
}

fn check_image(image: &Image, side: usize) -> Result<()> {
    if image.side() != side {
        return Err(TensorError::ShapeMismatch {
            op: "image",
            left: vec![image.side(), image.side()],
            right: vec![side, side],
        });
    }
    if !image.is_normalized() {
        return Err(TensorError::Invalid("input image has values outside [0, 1]".into()));
    }
    Ok(())
}

/// Encoder stage shapes derived from the op shape rules, without data.
fn shape_algebra_trace(enc: &EncoderConfig) -> Result<Vec<Vec<usize>>> {
    use crate::ops::{Conv2dPlan, Padding};
    let s = enc.image_side;
    let k = enc.kernel;
    let mut trace = vec![vec![1, s, s]];
    let c1 = Conv2dPlan::new(&[1, s, s], &[enc.conv1_filters, 1, k, k], 1, Padding::Same)?.output_shape();
    trace.push(c1.clone());
    let pool = |shape: &[usize]| vec![shape[0], shape[1] / enc.pool, shape[2] / enc.pool];
    let p1 = pool(&c1);
    trace.push(p1.clone());
    let c2 = Conv2dPlan::new(&p1, &[enc.conv2_filters, enc.conv1_filters, k, k], 1, Padding::Same)?.output_shape();
    trace.push(c2.clone());
    let p2 = pool(&c2);
    trace.push(p2);
    trace.push(vec![enc.thought]);
    Ok(trace)
}

impl<T: Scalar> RestorationModel<T> for CnnLstmModel<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::CnnLstm
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: Var,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        let (enc_vars, dec_vars) = self.split_vars(vars);
        let (v, _) = self.encoder.forward_graph(g, enc_vars, images)?;
        let v = maybe_dropout(g, dropout, v)?;
        self.decoder.decode_graph(g, dec_vars, images, v, dropout)
    }

    fn config_echo(&self) -> Vec<(String, String)> {
        let e = self.encoder.config;
        let d = self.decoder_config();
        [
            ("image_side", e.image_side.to_string()),
            ("conv1_filters", e.conv1_filters.to_string()),
            ("conv2_filters", e.conv2_filters.to_string()),
            ("kernel", e.kernel.to_string()),
            ("pool", e.pool.to_string()),
            ("thought", e.thought.to_string()),
            ("layers", d.layers.to_string()),
            ("hidden", d.hidden.to_string()),
            ("hidden_gate", d.mode.tag().to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn image_side(&self) -> usize {
        self.encoder.config.image_side
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineConfig {
    pub image_side: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub kernel: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            image_side: 28,
            conv1_filters: 32,
            conv2_filters: 64,
            kernel: 5,
        }
    }
}

/// Convolutional encoder-decoder: two conv+pool stages mirrored by two
/// stride-2 transposed convolutions, sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnCnnBaseline<T> {
    pub config: BaselineConfig,
    pub conv1: ConvLayerParams<T>,
    pub conv2: ConvLayerParams<T>,
    pub deconv1: DeconvLayerParams<T>,
    pub deconv2: DeconvLayerParams<T>,
}

impl<T: Scalar> CnnCnnBaseline<T> {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        if config.image_side == 0 || config.image_side % 4 != 0 || config.kernel % 2 == 0 {
            return Err(TensorError::Invalid(format!("bad baseline config {config:?}")));
        }
        let mut init = Initializer::new(init_rng(seed));
        let (c1, c2, k) = (config.conv1_filters, config.conv2_filters, config.kernel);
        Ok(CnnCnnBaseline {
            config,
            conv1: ConvLayerParams::new("baseline.conv1", 1, c1, k, Activation::Relu, &mut init),
            conv2: ConvLayerParams::new("baseline.conv2", c1, c2, k, Activation::Relu, &mut init),
            deconv1: DeconvLayerParams::new("baseline.deconv1", c2, c1, k, 2, Activation::Relu, &mut init),
            deconv2: DeconvLayerParams::new("baseline.deconv2", c1, 1, k, 2, Activation::Sigmoid, &mut init),
        })
    }

    /// Forward pass that also reports the post-pool and post-deconv shapes.
    pub fn forward_traced(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: Var,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<(Var, Vec<Vec<usize>>)> {
        let shape = g.shape(images).to_vec();
        let s = self.config.image_side;
        if shape.len() != 3 || shape[1] != s || shape[2] != s {
            return Err(TensorError::ShapeMismatch {
                op: "baseline",
                left: shape,
                right: vec![0, s, s],
            });
        }
        let b = shape[0];
        let strip = |g: &Graph<T>, v: Var| g.shape(v)[1..].to_vec();
        let mut trace = Vec::new();
        let x = g.reshape(images, [b, 1, s, s])?;
        trace.push(strip(g, x));
        let c1 = self.conv1.forward(g, &vars[0..2], x)?;
        let p1 = g.maxpool2d(c1, 2, 2)?;
        trace.push(strip(g, p1));
        let c2 = self.conv2.forward(g, &vars[2..4], p1)?;
        let p2 = g.maxpool2d(c2, 2, 2)?;
        trace.push(strip(g, p2));
        let bottleneck = maybe_dropout(g, dropout, p2)?;
        let d1 = self.deconv1.forward(g, &vars[4..6], bottleneck)?;
        trace.push(strip(g, d1));
        let d2 = self.deconv2.forward(g, &vars[6..8], d1)?;
        trace.push(strip(g, d2));
        let out = g.reshape(d2, [b, s, s])?;
        Ok((out, trace))
    }

    pub fn baseline_forward(&self, corrupted: &Image) -> Result<Image> {
        check_image(corrupted, self.config.image_side)?;
        Ok(self.restore_batch(std::slice::from_ref(corrupted))?.remove(0))
    }
}

impl<T: Scalar> RestorationModel<T> for CnnCnnBaseline<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::CnnCnn
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p.extend(self.deconv1.params());
        p.extend(self.deconv2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p.extend(self.deconv1.params_mut());
        p.extend(self.deconv2.params_mut());
        p
    }

    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: Var,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, vars, images, dropout)?.0)
    }

    fn config_echo(&self) -> Vec<(String, String)> {
        let c = self.config;
        [
            ("image_side", c.image_side),
            ("conv1_filters", c.conv1_filters),
            ("conv2_filters", c.conv2_filters),
            ("kernel", c.kernel),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    fn image_side(&self) -> usize {
        self.config.image_side
    }
}

/// Either architecture, for code paths that pick the model at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel<T> {
    CnnLstm(CnnLstmModel<T>),
    CnnCnn(CnnCnnBaseline<T>),
}

impl<T: Scalar> AnyModel<T> {
    fn inner(&self) -> &dyn RestorationModel<T> {
        match self {
            AnyModel::CnnLstm(m) => m,
            AnyModel::CnnCnn(m) => m,
        }
    }

    /// Rebuilds an untrained model from a `config_echo` listing.
    pub fn from_echo(kind: ModelKind, echo: &[(String, String)], seed: u64) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            echo.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| TensorError::Invalid(format!("missing config key {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| TensorError::Invalid(format!("bad value for {key}")))
        };
        match kind {
            ModelKind::CnnLstm => {
                let enc = EncoderConfig {
                    image_side: num("image_side")?,
                    conv1_filters: num("conv1_filters")?,
                    conv2_filters: num("conv2_filters")?,
                    kernel: num("kernel")?,
                    pool: num("pool")?,
                    thought: num("thought")?,
                };
                let mode = HiddenGate::parse(get("hidden_gate")?)
                    .ok_or_else(|| TensorError::Invalid("bad hidden_gate value".into()))?;
                let dec = DecoderConfig {
                    layers: num("layers")?,
                    hidden: num("hidden")?,
                    row_width: enc.image_side,
                    thought: enc.thought,
                    mode,
                };
                Ok(AnyModel::CnnLstm(CnnLstmModel::new(enc, dec, seed)?))
            }
            ModelKind::CnnCnn => {
                let cfg = BaselineConfig {
                    image_side: num("image_side")?,
                    conv1_filters: num("conv1_filters")?,
                    conv2_filters: num("conv2_filters")?,
                    kernel: num("kernel")?,
                };
                Ok(AnyModel::CnnCnn(CnnCnnBaseline::new(cfg, seed)?))
            }
        }
    }
}

impl<T: Scalar> RestorationModel<T> for AnyModel<T> {
    fn kind(&self) -> ModelKind {
        self.inner().kind()
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            AnyModel::CnnLstm(m) => m.params_mut(),
            AnyModel::CnnCnn(m) => m.params_mut(),
        }
    }

    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        images: Var,
        dropout: &mut Option<DropoutCtx<'_>>,
    ) -> Result<Var> {
        self.inner().forward_graph(g, vars, images, dropout)
    }

    fn config_echo(&self) -> Vec<(String, String)> {
        self.inner().config_echo()
    }

    fn image_side(&self) -> usize {
        self.inner().image_side()
    }
}

/// Binds all parameters of `model` as trainable leaves.
pub fn bind_model<T: Scalar, M: RestorationModel<T> + ?Sized>(g: &mut Graph<T>, model: &M) -> Vec<Var> {
    bind_params(g, &model.params())
}
