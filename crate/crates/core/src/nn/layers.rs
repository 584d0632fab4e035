//! Sequential layer chains with a recorded forward tape and manual backprop.

use super::conv::{gemm, ConvGeom, KERNEL};
use super::params::{Grads, ParamStore, ParamTensor};
use super::tensor::Tensor;

const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `y = W x + b` with `W: [outputs, inputs]`.
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Reshape {
        c: usize,
        h: usize,
        w: usize,
    },
    Flatten,
    /// Stride-2 5×5 convolution from the big to the small grid; `W: [cout, cin*25]`.
    ConvDown {
        name: String,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
    },
    /// Transposed convolution from the small to the big grid; `W: [cin, cout*25]`.
    ConvUp {
        name: String,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
    },
    InstanceNorm {
        name: String,
        channels: usize,
        eps: f32,
    },
    LeakyRelu {
        slope: f32,
    },
    Sigmoid,
    Tanh,
}

pub fn weight_key(layer: &str) -> String {
    format!("{layer}.w")
}

pub fn bias_key(layer: &str) -> String {
    format!("{layer}.b")
}

impl Op {
    /// Parameter tensors (name, shape, is_weight) owned by this op.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, ParamRole)> {
        match self {
            Op::Linear {
                name,
                inputs,
                outputs,
            } => vec![
                (weight_key(name), vec![*outputs, *inputs], ParamRole::Weight),
                (bias_key(name), vec![*outputs], ParamRole::Bias),
            ],
            Op::ConvDown {
                name, cin, cout, ..
            } => vec![
                (weight_key(name), vec![*cout, *cin * TAPS], ParamRole::Weight),
                (bias_key(name), vec![*cout], ParamRole::Bias),
            ],
            Op::ConvUp {
                name, cin, cout, ..
            } => vec![
                (weight_key(name), vec![*cin, *cout * TAPS], ParamRole::Weight),
                (bias_key(name), vec![*cout], ParamRole::Bias),
            ],
            Op::InstanceNorm { name, channels, .. } => vec![
                (format!("{name}.scale"), vec![*channels], ParamRole::Scale),
                (format!("{name}.offset"), vec![*channels], ParamRole::Bias),
            ],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
}

/// Initializes every parameter of `ops` missing from `params`.
pub fn init_params(ops: &[Op], params: &mut ParamStore, stddev: f32, seed: u64) {
    for op in ops {
        for (key, shape, role) in op.param_specs() {
            if params.contains_key(&key) {
                continue;
            }
            let t = match role {
                ParamRole::Weight => ParamTensor::normal(shape, stddev, seed, &key),
                ParamRole::Bias => ParamTensor::filled(shape, 0.0),
                ParamRole::Scale => ParamTensor::filled(shape, 1.0),
            };
            params.insert(key, t);
        }
    }
}

enum Aux {
    None,
    Norm { xhat: Vec<f32>, inv_std: Vec<f32> },
}

/// Activations recorded by a forward pass; `acts[i]` is the input of op `i`.
pub struct Tape {
    acts: Vec<Tensor>,
    aux: Vec<Aux>,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("tape holds the input")
    }

    pub fn into_output(mut self) -> Tensor {
        self.acts.pop().expect("tape holds the input")
    }

    /// Input of op `i` (equivalently, output of op `i - 1`).
    pub fn activation(&self, i: usize) -> &Tensor {
        &self.acts[i]
    }
}

fn param<'a>(params: &'a ParamStore, key: &str) -> &'a [f32] {
    &params
        .get(key)
        .unwrap_or_else(|| panic!("missing parameter {key}"))
        .data
}

/// Runs `ops` on `x`, keeping every intermediate activation.
pub fn forward(ops: &[Op], params: &ParamStore, x: Tensor) -> Tape {
    let mut acts = Vec::with_capacity(ops.len() + 1);
    let mut aux = Vec::with_capacity(ops.len());
    acts.push(x);
    for op in ops {
        let input = acts.last().unwrap();
        let (out, a) = forward_op(op, params, input);
        acts.push(out);
        aux.push(a);
    }
    Tape { acts, aux }
}

/// Forward pass without keeping intermediates.
pub fn infer(ops: &[Op], params: &ParamStore, x: Tensor) -> Tensor {
    let mut cur = x;
    for op in ops {
        cur = forward_op(op, params, &cur).0;
    }
    cur
}

fn forward_op(op: &Op, params: &ParamStore, x: &Tensor) -> (Tensor, Aux) {
    match op {
        Op::Linear {
            name,
            inputs,
            outputs,
        } => {
            assert_eq!(x.item_len(), *inputs, "linear {name} input width");
            let w = param(params, &weight_key(name));
            let b = param(params, &bias_key(name));
            let mut y = Tensor::zeros(x.n, *outputs, 1, 1);
            for i in 0..x.n {
                let xi = x.item(i);
                let yi = y.item_mut(i);
                for (j, out) in yi.iter_mut().enumerate() {
                    let row = &w[j * inputs..(j + 1) * inputs];
                    let mut acc = 0.0f32;
                    for (xv, wv) in xi.iter().zip(row) {
                        acc += xv * wv;
                    }
                    *out = acc + b[j];
                }
            }
            (y, Aux::None)
        }
        Op::Reshape { c, h, w } => (x.clone().with_shape(*c, *h, *w), Aux::None),
        Op::Flatten => {
            let len = x.item_len();
            (x.clone().with_shape(len, 1, 1), Aux::None)
        }
        Op::ConvDown {
            name,
            cin,
            cout,
            geom,
        } => {
            assert_eq!((x.c, x.h, x.w), (*cin, geom.big.0, geom.big.1), "conv {name} input");
            let w = param(params, &weight_key(name));
            let b = param(params, &bias_key(name));
            let sl = geom.small_len();
            let mut y = Tensor::zeros(x.n, *cout, geom.small.0, geom.small.1);
            let mut col = vec![0.0; cin * TAPS * sl];
            for i in 0..x.n {
                geom.im2col(x.item(i), *cin, &mut col);
                let yi = y.item_mut(i);
                gemm(*cout, cin * TAPS, sl, w, false, &col, false, yi, false);
                add_channel_bias(yi, b, sl);
            }
            (y, Aux::None)
        }
        Op::ConvUp {
            name,
            cin,
            cout,
            geom,
        } => {
            assert_eq!((x.c, x.h, x.w), (*cin, geom.small.0, geom.small.1), "tconv {name} input");
            let w = param(params, &weight_key(name));
            let b = param(params, &bias_key(name));
            let sl = geom.small_len();
            let mut y = Tensor::zeros(x.n, *cout, geom.big.0, geom.big.1);
            let mut col = vec![0.0; cout * TAPS * sl];
            for i in 0..x.n {
                gemm(cout * TAPS, *cin, sl, w, true, x.item(i), false, &mut col, false);
                let yi = y.item_mut(i);
                geom.col2im(&col, *cout, yi);
                add_channel_bias(yi, b, geom.big_len());
            }
            (y, Aux::None)
        }
        Op::InstanceNorm {
            name,
            channels,
            eps,
        } => {
            assert_eq!(x.c, *channels, "instance norm {name} channels");
            let scale = param(params, &format!("{name}.scale"));
            let offset = param(params, &format!("{name}.offset"));
            let plane = x.h * x.w;
            let mut y = x.zeros_like();
            let mut xhat = vec![0.0; x.data.len()];
            let mut inv_std = vec![0.0; x.n * channels];
            for i in 0..x.n {
                for c in 0..*channels {
                    let base = (i * channels + c) * plane;
                    let src = &x.data[base..base + plane];
                    let mean = src.iter().sum::<f32>() / plane as f32;
                    let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / plane as f32;
                    let is = 1.0 / (var + eps).sqrt();
                    inv_std[i * channels + c] = is;
                    for k in 0..plane {
                        let h = (src[k] - mean) * is;
                        xhat[base + k] = h;
                        y.data[base + k] = scale[c] * h + offset[c];
                    }
                }
            }
            (y, Aux::Norm { xhat, inv_std })
        }
        Op::LeakyRelu { slope } => {
            let mut y = x.clone();
            for v in &mut y.data {
                if *v < 0.0 {
                    *v *= slope;
                }
            }
            (y, Aux::None)
        }
        Op::Sigmoid => {
            let mut y = x.clone();
            for v in &mut y.data {
                *v = sigmoid(*v);
            }
            (y, Aux::None)
        }
        Op::Tanh => {
            let mut y = x.clone();
            for v in &mut y.data {
                *v = v.tanh();
            }
            (y, Aux::None)
        }
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_channel_bias(y: &mut [f32], b: &[f32], plane: usize) {
    for (c, chunk) in y.chunks_mut(plane).enumerate() {
        let bc = b[c];
        for v in chunk {
            *v += bc;
        }
    }
}

/// Backpropagates `dy` through the chain.
///
/// Parameter gradients are accumulated into `grads` when given. The input
/// gradient of the whole chain is returned.
pub fn backward(ops: &[Op], params: &ParamStore, tape: &Tape, dy: Tensor, mut grads: Option<&mut Grads>) -> Tensor {
    let mut g = dy;
    for (i, op) in ops.iter().enumerate().rev() {
        g = backward_op(op, params, &tape.acts[i], &tape.acts[i + 1], &tape.aux[i], g, grads.as_deref_mut());
    }
    g
}

fn backward_op(
    op: &Op,
    params: &ParamStore,
    x: &Tensor,
    y: &Tensor,
    aux: &Aux,
    dy: Tensor,
    grads: Option<&mut Grads>,
) -> Tensor {
    match op {
        Op::Linear {
            name,
            inputs,
            outputs,
        } => {
            let w = param(params, &weight_key(name));
            let mut dx = x.zeros_like();
            for i in 0..x.n {
                let dyi = dy.item(i);
                let dxi = dx.item_mut(i);
                for (j, &d) in dyi.iter().enumerate() {
                    let row = &w[j * inputs..(j + 1) * inputs];
                    for (dxv, wv) in dxi.iter_mut().zip(row) {
                        *dxv += d * wv;
                    }
                }
            }
            if let Some(grads) = grads {
                {
                    let dw = grads.entry(&weight_key(name), inputs * outputs);
                    for i in 0..x.n {
                        let xi = x.item(i);
                        for (j, &d) in dy.item(i).iter().enumerate() {
                            let row = &mut dw[j * inputs..(j + 1) * inputs];
                            for (g, xv) in row.iter_mut().zip(xi) {
                                *g += d * xv;
                            }
                        }
                    }
                }
                let db = grads.entry(&bias_key(name), *outputs);
                for i in 0..x.n {
                    for (g, d) in db.iter_mut().zip(dy.item(i)) {
                        *g += d;
                    }
                }
            }
            dx
        }
        Op::Reshape { .. } | Op::Flatten => {
            let (c, h, w) = (x.c, x.h, x.w);
            dy.with_shape(c, h, w)
        }
        Op::ConvDown {
            name,
            cin,
            cout,
            geom,
        } => {
            let w = param(params, &weight_key(name));
            let sl = geom.small_len();
            let mut dx = x.zeros_like();
            let mut col = vec![0.0; cin * TAPS * sl];
            let mut dcol = vec![0.0; cin * TAPS * sl];
            let mut grads = grads;
            for i in 0..x.n {
                let dyi = dy.item(i);
                gemm(cin * TAPS, *cout, sl, w, true, dyi, false, &mut dcol, false);
                geom.col2im(&dcol, *cin, dx.item_mut(i));
                if let Some(grads) = grads.as_deref_mut() {
                    geom.im2col(x.item(i), *cin, &mut col);
                    let dw = grads.entry(&weight_key(name), cout * cin * TAPS);
                    gemm(*cout, sl, cin * TAPS, dyi, false, &col, true, dw, true);
                    let db = grads.entry(&bias_key(name), *cout);
                    accumulate_channel_sums(db, dyi, sl);
                }
            }
            dx
        }
        Op::ConvUp {
            name,
            cin,
            cout,
            geom,
        } => {
            let w = param(params, &weight_key(name));
            let sl = geom.small_len();
            let mut dx = x.zeros_like();
            let mut pcol = vec![0.0; cout * TAPS * sl];
            let mut grads = grads;
            for i in 0..x.n {
                let dyi = dy.item(i);
                geom.im2col(dyi, *cout, &mut pcol);
                gemm(*cin, cout * TAPS, sl, w, false, &pcol, false, dx.item_mut(i), false);
                if let Some(grads) = grads.as_deref_mut() {
                    let dw = grads.entry(&weight_key(name), cin * cout * TAPS);
                    gemm(*cin, sl, cout * TAPS, x.item(i), false, &pcol, true, dw, true);
                    let db = grads.entry(&bias_key(name), *cout);
                    accumulate_channel_sums(db, dyi, geom.big_len());
                }
            }
            dx
        }
        Op::InstanceNorm { name, channels, .. } => {
            let Aux::Norm { xhat, inv_std } = aux else {
                unreachable!("instance norm tape entry")
            };
            let scale = param(params, &format!("{name}.scale"));
            let plane = x.h * x.w;
            let nf = plane as f32;
            let mut dx = x.zeros_like();
            let mut dscale = vec![0.0f32; *channels];
            let mut doffset = vec![0.0f32; *channels];
            for i in 0..x.n {
                for c in 0..*channels {
                    let base = (i * channels + c) * plane;
                    let dyp = &dy.data[base..base + plane];
                    let xh = &xhat[base..base + plane];
                    let mut sum_d = 0.0f32;
                    let mut sum_dx = 0.0f32;
                    for k in 0..plane {
                        dscale[c] += dyp[k] * xh[k];
                        doffset[c] += dyp[k];
                        let dxh = dyp[k] * scale[c];
                        sum_d += dxh;
                        sum_dx += dxh * xh[k];
                    }
                    let is = inv_std[i * channels + c];
                    for k in 0..plane {
                        let dxh = dyp[k] * scale[c];
                        dx.data[base + k] = is / nf * (nf * dxh - sum_d - xh[k] * sum_dx);
                    }
                }
            }
            if let Some(grads) = grads {
                for (g, d) in grads.entry(&format!("{name}.scale"), *channels).iter_mut().zip(&dscale) {
                    *g += d;
                }
                for (g, d) in grads.entry(&format!("{name}.offset"), *channels).iter_mut().zip(&doffset) {
                    *g += d;
                }
            }
            dx
        }
        Op::LeakyRelu { slope } => {
            let mut dx = dy;
            for (d, xv) in dx.data.iter_mut().zip(&x.data) {
                if *xv < 0.0 {
                    *d *= slope;
                }
            }
            dx
        }
        Op::Sigmoid => {
            let mut dx = dy;
            for (d, yv) in dx.data.iter_mut().zip(&y.data) {
                *d *= yv * (1.0 - yv);
            }
            dx
        }
        Op::Tanh => {
            let mut dx = dy;
            for (d, yv) in dx.data.iter_mut().zip(&y.data) {
                *d *= 1.0 - yv * yv;
            }
            dx
        }
    }
}

fn accumulate_channel_sums(db: &mut [f32], dy: &[f32], plane: usize) {
    for (g, chunk) in db.iter_mut().zip(dy.chunks(plane)) {
        *g += chunk.iter().sum::<f32>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = rng::rng(seed, &[]);
        let data = (0..n * c * h * w).map(|_| r.random::<f32>() * 2.0 - 1.0).collect();
        Tensor::from_vec(n, c, h, w, data)
    }

    /// Finite-difference check of input and parameter gradients for a small chain.
    fn check_chain(ops: Vec<Op>, input: Tensor) {
        let mut params = ParamStore::new();
        init_params(&ops, &mut params, 0.3, 5);
        // perturb biases / norm params so they are not trivially zero/one
        for (k, p) in params.iter_mut() {
            if !k.ends_with(".w") {
                for (i, v) in p.data.iter_mut().enumerate() {
                    *v += 0.1 * ((i % 5) as f32 - 2.0);
                }
            }
        }
        let out_len = {
            let t = forward(&ops, &params, input.clone());
            t.output().data.len()
        };
        let proj: Vec<f32> = (0..out_len).map(|i| ((i * 7919 % 13) as f32 - 6.0) / 6.0).collect();
        let loss = |params: &ParamStore, x: &Tensor| -> f64 {
            let y = infer(&ops, params, x.clone());
            y.data.iter().zip(&proj).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };
        let tape = forward(&ops, &params, input.clone());
        let dy = Tensor::from_vec(
            tape.output().n,
            tape.output().c,
            tape.output().h,
            tape.output().w,
            proj.clone(),
        );
        let mut grads = Grads::default();
        let dx = backward(&ops, &params, &tape, dy, Some(&mut grads));

        let h = 1e-2f32;
        for idx in (0..input.data.len()).step_by(7) {
            let mut xp = input.clone();
            xp.data[idx] += h;
            let mut xm = input.clone();
            xm.data[idx] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * f64::from(h));
            let an = f64::from(dx.data[idx]);
            assert!((fd - an).abs() <= 2e-2 * (1.0 + fd.abs()), "dx[{idx}] fd={fd} an={an}");
        }
        for (key, g) in &grads.map {
            for idx in (0..g.len()).step_by(11) {
                let mut pp = params.clone();
                pp.get_mut(key).unwrap().data[idx] += h;
                let mut pm = params.clone();
                pm.get_mut(key).unwrap().data[idx] -= h;
                let fd = (loss(&pp, &input) - loss(&pm, &input)) / (2.0 * f64::from(h));
                let an = f64::from(g[idx]);
                assert!((fd - an).abs() <= 2e-2 * (1.0 + fd.abs()), "{key}[{idx}] fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn generator_like_chain_gradients() {
        let ops = vec![
            Op::Linear {
                name: "lin".into(),
                inputs: 6,
                outputs: 2 * 3 * 3,
            },
            Op::Reshape { c: 2, h: 3, w: 3 },
            Op::ConvUp {
                name: "up".into(),
                cin: 2,
                cout: 3,
                geom: ConvGeom::new((5, 6), (3, 3)),
            },
            Op::InstanceNorm {
                name: "norm".into(),
                channels: 3,
                eps: 1e-5,
            },
            Op::LeakyRelu { slope: 0.2 },
            Op::Sigmoid,
        ];
        check_chain(ops, random_tensor(2, 6, 1, 1, 1));
    }

    #[test]
    fn discriminator_like_chain_gradients() {
        let ops = vec![
            Op::ConvDown {
                name: "down".into(),
                cin: 2,
                cout: 3,
                geom: ConvGeom::new((7, 8), (4, 4)),
            },
            Op::InstanceNorm {
                name: "norm".into(),
                channels: 3,
                eps: 1e-5,
            },
            Op::LeakyRelu { slope: 0.2 },
            Op::Flatten,
            Op::Linear {
                name: "lin".into(),
                inputs: 48,
                outputs: 2,
            },
            Op::Tanh,
        ];
        check_chain(ops, random_tensor(2, 2, 7, 8, 2));
    }

    #[test]
    fn instance_norm_of_zero_map_is_zero() {
        let ops = vec![Op::InstanceNorm {
            name: "n".into(),
            channels: 2,
            eps: 1e-5,
        }];
        let mut params = ParamStore::new();
        init_params(&ops, &mut params, 0.02, 0);
        let y = infer(&ops, &params, Tensor::zeros(1, 2, 4, 4));
        assert!(y.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_follows_roles() {
        let ops = vec![
            Op::Linear {
                name: "l".into(),
                inputs: 3,
                outputs: 4,
            },
            Op::InstanceNorm {
                name: "n".into(),
                channels: 4,
                eps: 1e-5,
            },
        ];
        let mut params = ParamStore::new();
        init_params(&ops, &mut params, 0.02, 3);
        assert!(params["l.b"].data.iter().all(|v| *v == 0.0));
        assert!(params["n.scale"].data.iter().all(|v| *v == 1.0));
        assert!(params["n.offset"].data.iter().all(|v| *v == 0.0));
        assert!(params["l.w"].data.iter().any(|v| *v != 0.0));
    }
}
