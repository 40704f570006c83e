//! Central-difference gradient checks for every differentiable op and for
//! reduced clones of both models, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, grad_check_steps, AutogradError, Graph, Var};
use crate::layers::{HiddenGate, Initializer, LstmStackParams, Param};
use crate::models::{BaselineConfig, CnnCnnBaseline, CnnLstmModel, DecoderConfig, EncoderConfig, RestorationModel};
use crate::ops::{Activation, Padding};
use crate::tensor::{Tensor, TensorError};
use crate::training::l2_graph;

pub const TOLERANCE: f64 = 1e-4;
/// Step for graphs with ReLU or max-pool kinks, kept tiny so that a probe
/// rarely crosses one.
const EPSILON: f64 = 1e-6;
/// Step for smooth graphs; larger steps keep float roundoff in the loss from
/// swamping very small gradients.
const SMOOTH_EPSILON: f64 = 1e-3;

pub const SCOPES: [&str; 14] = [
    "dense",
    "conv2d",
    "conv-transpose2d",
    "maxpool",
    "activations",
    "shape-ops",
    "rmse",
    "l2",
    "lstm-cell",
    "stacked-cell",
    "decoder",
    "encoder",
    "baseline",
    "cnn-lstm",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub scope: &'static str,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("valid shape")
}

/// Reduces `out` to a scalar with fixed random weights.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    g.dot_const(out, weights.clone())
}

fn jitter(params: &[&Param<f64>], rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    params
        .iter()
        .map(|p| {
            let data = p.value.data().iter().map(|&v| v + rng.gen_range(-0.1..0.1)).collect();
            Tensor::new(p.value.shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

/// Runs one named check. Unknown names yield `None`.
pub fn run_scope(scope: &str, seed: u64, mode: HiddenGate) -> Option<Result<CheckRow, AutogradError>> {
    let name = *SCOPES.iter().find(|s| **s == scope)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let result = match name {
        "dense" => {
            let (x, w, b) = (uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0));
            let proj = uniform(r, &[3, 5], -1.0, 1.0);
            grad_check(
                |g, v| {
                    let y = g.dense(v[0], v[1], v[2])?;
                    project(g, y, &proj)
                },
                &[x, w, b],
                SMOOTH_EPSILON,
            )
        }
        "conv2d" => {
            let x = uniform(r, &[2, 2, 6, 5], -1.0, 1.0);
            let k = uniform(r, &[3, 2, 3, 3], -1.0, 1.0);
            let b = uniform(r, &[3], -1.0, 1.0);
            let k5 = uniform(r, &[2, 2, 5, 5], -1.0, 1.0);
            let p_same = uniform(r, &[2, 3, 6, 5], -1.0, 1.0);
            let p_valid = uniform(r, &[2, 3, 2, 2], -1.0, 1.0);
            let p_five = uniform(r, &[2, 2, 6, 5], -1.0, 1.0);
            grad_check(
                |g, v| {
                    let same = g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Same)?;
                    let valid = g.conv2d(v[0], v[1], None, 2, Padding::Valid)?;
                    let five = g.conv2d(v[0], v[3], None, 1, Padding::Same)?;
                    let a = project(g, same, &p_same)?;
                    let b = project(g, valid, &p_valid)?;
                    let c = project(g, five, &p_five)?;
                    let ab = g.add(a, b)?;
                    g.add(ab, c)
                },
                &[x, k, b, k5],
                EPSILON,
            )
        }
        "conv-transpose2d" => {
            let x = uniform(r, &[2, 3, 3, 3], -1.0, 1.0);
            let k = uniform(r, &[3, 2, 5, 5], -1.0, 1.0);
            let b = uniform(r, &[2], -1.0, 1.0);
            let proj = uniform(r, &[2, 2, 6, 6], -1.0, 1.0);
            grad_check(
                |g, v| {
                    let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 2, 1)?;
                    project(g, y, &proj)
                },
                &[x, k, b],
                SMOOTH_EPSILON,
            )
        }
        "maxpool" => {
            let x = uniform(r, &[2, 2, 4, 6], -1.0, 1.0);
            let proj = uniform(r, &[2, 2, 2, 3], -1.0, 1.0);
            grad_check(
                |g, v| {
                    let y = g.maxpool2d(v[0], 2, 2)?;
                    project(g, y, &proj)
                },
                &[x],
                EPSILON,
            )
        }
        "activations" => {
            let x = uniform(r, &[4, 6], -2.0, 2.0);
            let proj: Vec<Tensor<f64>> = (0..4).map(|_| uniform(r, &[4, 6], -1.0, 1.0)).collect();
            grad_check(
                |g, v| {
                    let mut acc: Option<Var> = None;
                    for (act, p) in [Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::Identity]
                        .into_iter()
                        .zip(&proj)
                    {
                        let y = g.activation(v[0], act);
                        let s = project(g, y, p)?;
                        acc = Some(match acc {
                            Some(a) => g.add(a, s)?,
                            None => s,
                        });
                    }
                    Ok(acc.expect("four activations"))
                },
                &[x],
                EPSILON,
            )
        }
        "shape-ops" => {
            let a = uniform(r, &[2, 3], -1.0, 1.0);
            let b = uniform(r, &[2, 4], -1.0, 1.0);
            let seq = uniform(r, &[2, 3, 4], -1.0, 1.0);
            let proj = uniform(r, &[2, 3, 4], -1.0, 1.0);
            let proj2 = uniform(r, &[4, 4], -1.0, 1.0);
            grad_check(
                |g, v| {
                    let ab = g.concat(&[v[0], v[1]], 1)?;
                    let mid = g.slice_cols(ab, 2, 4)?;
                    let steps: Vec<Var> = (0..3)
                        .map(|t| {
                            let s = g.select_step(v[2], t)?;
                            let m = g.mul(s, mid)?;
                            g.sub(m, s)
                        })
                        .collect::<Result<_, _>>()?;
                    let stacked = g.stack_steps(&steps)?;
                    let flat = g.reshape(stacked, [2, 3, 4])?;
                    let p = project(g, flat, &proj)?;
                    let rows = g.concat(&[mid, mid], 0)?;
                    let scaled = g.scale(rows, 0.5);
                    let q = project(g, scaled, &proj2)?;
                    let t = g.sum(v[0]);
                    let pq = g.add(p, q)?;
                    g.add(pq, t)
                },
                &[a, b, seq],
                SMOOTH_EPSILON,
            )
        }
        "rmse" => {
            let pred = uniform(r, &[3, 4], 0.0, 1.0);
            let target = uniform(r, &[3, 4], 0.0, 1.0);
            grad_check(|g, v| g.rmse(v[0], &target), &[pred], SMOOTH_EPSILON)
        }
        "l2" => {
            let w = uniform(r, &[3, 4], -1.0, 1.0);
            let b = uniform(r, &[4], -1.0, 1.0);
            let params = [Param::weight("w", w.clone()), Param::bias("b", b.clone())];
            grad_check(
                |g, v| {
                    let refs: Vec<&Param<f64>> = params.iter().collect();
                    let pen = l2_graph(g, v, &refs, 0.5)?.expect("one weight");
                    let s = g.sum(v[1]);
                    g.add(pen, s)
                },
                &[w, b],
                SMOOTH_EPSILON,
            )
        }
        "lstm-cell" | "stacked-cell" => {
            let (batch, row, hidden, thought) = (2, 5, 8, 4);
            let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
            let stack = LstmStackParams::<f64>::new("cell", 2, row, hidden, thought, mode, &mut init).expect("dims");
            let bottom = name == "lstm-cell";
            let params: Vec<&Param<f64>> = if bottom { stack.bottom.params() } else { stack.upper[0].params() };
            let mut inputs = jitter(&params, r);
            let n_params = inputs.len();
            let input_width = if bottom { row } else { hidden };
            inputs.push(uniform(r, &[batch, input_width], -1.0, 1.0));
            inputs.push(uniform(r, &[batch, hidden], -1.0, 1.0));
            inputs.push(uniform(r, &[batch, hidden], -1.0, 1.0));
            inputs.push(uniform(r, &[batch, thought], -1.0, 1.0));
            inputs.push(uniform(r, &[batch, row], 0.0, 1.0));
            let p_h = uniform(r, &[batch, hidden], -1.0, 1.0);
            let p_c = uniform(r, &[batch, hidden], -1.0, 1.0);
            grad_check(
                |g, v| {
                    let (x, h, c, th, y) = (v[n_params], v[n_params + 1], v[n_params + 2], v[n_params + 3], v[n_params + 4]);
                    let out = if bottom {
                        let packed = stack.bottom.pack(g, &v[..n_params])?;
                        stack.bottom.step(g, &packed, x, h, c, th, y, mode)?
                    } else {
                        let packed = stack.upper[0].pack(g, &v[..n_params])?;
                        let out = stack.upper[0].step(g, &packed, x, h, c, mode)?;
                        // Keep the unused operands reachable so the check covers
                        // every input uniformly.
                        let th_s = g.sum(th);
                        let y_s = g.sum(y);
                        let extra = g.add(th_s, y_s)?;
                        let hs = project(g, out.h, &p_h)?;
                        let cs = project(g, out.c, &p_c)?;
                        let hc = g.add(hs, cs)?;
                        return g.add(hc, extra);
                    };
                    let hs = project(g, out.h, &p_h)?;
                    let cs = project(g, out.c, &p_c)?;
                    g.add(hs, cs)
                },
                &inputs,
                SMOOTH_EPSILON,
            )
        }
        "decoder" => {
            let (batch, steps, row, hidden, thought) = (2, 6, 5, 8, 4);
            let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(seed ^ 0xdec0));
            let stack = LstmStackParams::<f64>::new("dec", 3, row, hidden, thought, mode, &mut init).expect("dims");
            let mut inputs = jitter(&stack.params(), r);
            let n_params = inputs.len();
            inputs.push(uniform(r, &[batch, steps, row], 0.0, 1.0));
            inputs.push(uniform(r, &[batch, thought], -1.0, 1.0));
            let proj = uniform(r, &[batch, steps, row], -1.0, 1.0);
            grad_check(
                |g, v| {
                    let y = stack.decode_graph(g, &v[..n_params], v[n_params], v[n_params + 1], &mut None)?;
                    project(g, y, &proj)
                },
                &inputs,
                SMOOTH_EPSILON,
            )
        }
        "encoder" | "cnn-lstm" => {
            let enc = EncoderConfig {
                image_side: 8,
                conv1_filters: 2,
                conv2_filters: 3,
                kernel: 3,
                pool: 2,
                thought: 4,
            };
            let dec = DecoderConfig {
                layers: 2,
                hidden: 4,
                row_width: 8,
                thought: 4,
                mode,
            };
            let model = CnnLstmModel::<f64>::new(enc, dec, seed).expect("reduced config");
            let images = uniform(r, &[2, 8, 8], 0.0, 1.0);
            if name == "encoder" {
                let inputs = jitter(&model.encoder.params(), r);
                let proj = uniform(r, &[2, 4], -1.0, 1.0);
                grad_check(
                    |g, v| {
                        let x = g.constant(images.clone());
                        let (out, _) = model.encoder.forward_graph(g, v, x)?;
                        project(g, out, &proj)
                    },
                    &inputs,
                    EPSILON,
                )
            } else {
                let inputs = jitter(&model.params(), r);
                let proj = uniform(r, &[2, 8, 8], -1.0, 1.0);
                // Decoder weights sit downstream of every kink.
                let n_enc = model.encoder.params().len();
                let steps: Vec<f64> = (0..inputs.len())
                    .map(|i| if i < n_enc { EPSILON } else { SMOOTH_EPSILON })
                    .collect();
                grad_check_steps(
                    |g, v| {
                        let x = g.constant(images.clone());
                        let out = model.forward_graph(g, v, x, &mut None)?;
                        project(g, out, &proj)
                    },
                    &inputs,
                    &steps,
                )
            }
        }
        "baseline" => {
            let cfg = BaselineConfig {
                image_side: 8,
                conv1_filters: 2,
                conv2_filters: 3,
                kernel: 3,
            };
            let model = CnnCnnBaseline::<f64>::new(cfg, seed).expect("reduced config");
            let images = uniform(r, &[2, 8, 8], 0.0, 1.0);
            let inputs = jitter(&model.params(), r);
            let proj = uniform(r, &[2, 8, 8], -1.0, 1.0);
            grad_check(
                |g, v| {
                    let x = g.constant(images.clone());
                    let out = model.forward_graph(g, v, x, &mut None)?;
                    project(g, out, &proj)
                },
                &inputs,
                EPSILON,
            )
        }
        _ => unreachable!("scope list and match arms agree"),
    };
    Some(result.map(|max_rel_error| CheckRow {
        scope: name,
        max_rel_error,
    }))
}

/// Runs every scope in order.
pub fn run_all(seed: u64, mode: HiddenGate) -> Result<Vec<CheckRow>, AutogradError> {
    SCOPES
        .iter()
        .map(|s| run_scope(s, seed, mode).expect("listed scope"))
        .collect()
}
