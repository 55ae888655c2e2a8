//! The Set-Sequence network.
//!
//! A set layer turns the unit stream `u[M, T, d]` into
//!
//! ```text
//! chunks   = lag windows of u over chunk_len periods
//! e        = phi(chunks)                      per unit and period
//! F        = summary over units of e          (mean, attention or gated)
//! h        = psi([u, F])
//! out      = h + mix(gelu(causal_conv(h)))
//! ```
//!
//! and the network stacks set layers, then plain sequence layers, then a
//! linear head. Everything is causal in time except the gated summary, whose
//! similarity matrix is computed once per sample from time-averaged
//! embeddings.

mod config;
mod params;

pub use config::{SetSeqConfig, SummaryVariant};
pub use params::{Bound, Params};

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::diff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::sim::UnitPanel;

/// Forward-pass switches.
pub struct ForwardOpts<'a> {
    pub train: bool,
    /// Source of dropout masks; required when training with dropout.
    pub rng: Option<&'a mut dyn RngCore>,
    /// Replace the gated similarity matrix by the uniform `1/M` matrix.
    pub uniform_gate: bool,
}

impl ForwardOpts<'_> {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: None,
            uniform_gate: false,
        }
    }
}

/// Handles produced by a forward pass.
pub struct ForwardOut {
    /// `[M, T, output_dim]`.
    pub output: Var,
    /// Per set layer: `[T, r]` for the mean summary, `[M, T, r]` otherwise.
    pub summaries: Vec<Var>,
}

/// Set summaries per layer, averaged over units when they are per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub t: usize,
    pub r: usize,
    /// `layers[l][dim * t + s]`.
    pub layers: Vec<Vec<f64>>,
}

impl LayerTrace {
    pub fn series(&self, layer: usize, dim: usize) -> &[f64] {
        &self.layers[layer][dim * self.t..(dim + 1) * self.t]
    }

    /// Long-format CSV rows `layer,dim,t,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,dim,t,value\n");
        for (l, data) in self.layers.iter().enumerate() {
            for d in 0..self.r {
                for s in 0..self.t {
                    out.push_str(&format!("{l},{d},{s},{}\n", data[d * self.t + s]));
                }
            }
        }
        out
    }
}

/// Two-layer feedforward block with GELU and dropout on the hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Ffn {
    fn bind(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: bound.get(&format!("{prefix}.w1"))?,
            b1: bound.get(&format!("{prefix}.b1"))?,
            w2: bound.get(&format!("{prefix}.w2"))?,
            b2: bound.get(&format!("{prefix}.b2"))?,
        })
    }
}

fn dropout<F: Scalar>(tape: &mut Tape<F>, x: Var, p: f64, opts: &mut ForwardOpts) -> Result<Var> {
    if !opts.train || p == 0.0 {
        return Ok(x);
    }
    let rng = opts
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::Config("training with dropout needs a random source".into()))?;
    tape.dropout(x, p, true, rng)
}

pub fn ffn<F: Scalar>(tape: &mut Tape<F>, x: Var, f: &Ffn, p: f64, opts: &mut ForwardOpts) -> Result<Var> {
    let h = tape.affine(x, f.w1, Some(f.b1))?;
    let h = tape.gelu(h);
    let h = dropout(tape, h, p, opts)?;
    tape.affine(h, f.w2, Some(f.b2))
}

/// Residual causal long-convolution block on `u[M, T, d]`.
#[allow(clippy::too_many_arguments)]
pub fn seq_layer<F: Scalar>(
    tape: &mut Tape<F>,
    u: Var,
    kernel: Var,
    mix_w: Var,
    mix_b: Var,
    p: f64,
    opts: &mut ForwardOpts,
) -> Result<Var> {
    let c = tape.causal_conv(u, kernel)?;
    let c = tape.gelu(c);
    let c = tape.affine(c, mix_w, Some(mix_b))?;
    let c = dropout(tape, c, p, opts)?;
    tape.add(u, c)
}

fn check_units<F: Scalar>(tape: &Tape<F>, e: Var) -> Result<usize> {
    let m = tape.shape(e)[0];
    if m == 0 {
        return Err(Error::domain("a set summary needs at least one unit"));
    }
    Ok(m)
}

/// `rho(mean_i e_i)` for embeddings `e[M, T, p]`, giving `[T, r]`.
pub fn summary_mean<F: Scalar>(tape: &mut Tape<F>, e: Var, rho: &Ffn, p: f64, opts: &mut ForwardOpts) -> Result<Var> {
    check_units(tape, e)?;
    let pooled = tape.mean_axis(e, 0)?;
    ffn(tape, pooled, rho, p, opts)
}

/// Multi-head self-attention across units at each period, projected to `r`
/// dimensions: `e[M, T, p]` to `[M, T, r]`.
#[allow(clippy::too_many_arguments)]
pub fn summary_mha<F: Scalar>(
    tape: &mut Tape<F>,
    e: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
) -> Result<Var> {
    let m = check_units(tape, e)?;
    let (t_len, p) = (tape.shape(e)[1], tape.shape(e)[2]);
    if heads == 0 || p % heads != 0 {
        return Err(Error::shape("summary_mha", &[p], &[heads]));
    }
    let dh = p / heads;
    let split = |tape: &mut Tape<F>, w: Var| -> Result<Var> {
        let x = tape.affine(e, w, None)?;
        let x = tape.reshape(x, &[m, t_len, heads, dh])?;
        let x = tape.permute(x, &[1, 2, 0, 3])?;
        tape.reshape(x, &[t_len * heads, m, dh])
    };
    let q = split(tape, wq)?;
    let k = split(tape, wk)?;
    let v = split(tape, wv)?;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let a = tape.attention(q, k, v, scale)?;
    let a = tape.reshape(a, &[t_len, heads, m, dh])?;
    let a = tape.permute(a, &[2, 0, 1, 3])?;
    let a = tape.reshape(a, &[m, t_len, p])?;
    tape.affine(a, wo, None)
}

/// Row-softmax of cosine similarities between projected time-averaged
/// embeddings, `[1, M, M]`. Zero-norm projections get similarity 0.
pub fn gate_matrix<F: Scalar>(tape: &mut Tape<F>, e: Var, w: Var) -> Result<Var> {
    let m = check_units(tape, e)?;
    let p = tape.shape(e)[2];
    let xbar = tape.mean_axis(e, 1)?;
    let z = tape.affine(xbar, w, None)?;
    let z = tape.l2_normalize(z)?;
    let z = tape.reshape(z, &[1, m, p])?;
    let a = tape.bmm(z, z, true)?;
    tape.softmax(a, 2)
}

/// `rho(sum_j G_ij e_j)` per unit, `[M, T, r]`.
pub fn summary_gated<F: Scalar>(
    tape: &mut Tape<F>,
    e: Var,
    gate: Var,
    rho: &Ffn,
    p: f64,
    opts: &mut ForwardOpts,
) -> Result<Var> {
    let m = check_units(tape, e)?;
    let (t_len, d) = (tape.shape(e)[1], tape.shape(e)[2]);
    if tape.shape(gate) != [1, m, m] {
        return Err(Error::shape("summary_gated", tape.shape(gate), &[1, m, m]));
    }
    let flat = tape.reshape(e, &[1, m, t_len * d])?;
    let mixed = tape.bmm(gate, flat, false)?;
    let mixed = tape.reshape(mixed, &[m, t_len, d])?;
    ffn(tape, mixed, rho, p, opts)
}

/// Model parameters and configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SetSeqModel<F> {
    pub config: SetSeqConfig,
    pub params: Params<F>,
}

fn layer_input_dim(cfg: &SetSeqConfig, layer: usize) -> usize {
    if layer == 0 {
        cfg.input_dim
    } else {
        cfg.d_model
    }
}

impl<F: Scalar> SetSeqModel<F> {
    /// Parameter shapes in name order.
    pub fn param_shapes(cfg: &SetSeqConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut ffn_shapes = |prefix: String, d_in: usize, d_out: usize| {
            let hidden = 4 * d_out;
            out.push((format!("{prefix}.w1"), vec![d_in, hidden]));
            out.push((format!("{prefix}.b1"), vec![hidden]));
            out.push((format!("{prefix}.w2"), vec![hidden, d_out]));
            out.push((format!("{prefix}.b2"), vec![d_out]));
        };
        let (p, r, d) = (cfg.phi_out_dim, cfg.summary_dim, cfg.d_model);
        for l in 0..cfg.n_setseq_layers {
            let d_in = layer_input_dim(cfg, l);
            let prefix = format!("layer{l}");
            let summary_in = match cfg.variant {
                SummaryVariant::None => 0,
                _ => r,
            };
            if cfg.uses_summary() {
                ffn_shapes(format!("{prefix}.phi"), d_in * cfg.chunk_len, p);
            }
            if matches!(cfg.variant, SummaryVariant::Mean | SummaryVariant::Gated) {
                ffn_shapes(format!("{prefix}.rho"), p, r);
            }
            ffn_shapes(format!("{prefix}.psi"), d_in + summary_in, d);
        }
        let mut extra = Vec::new();
        for l in 0..cfg.n_setseq_layers {
            let prefix = format!("layer{l}");
            match cfg.variant {
                SummaryVariant::Mha => {
                    for n in ["wq", "wk", "wv"] {
                        extra.push((format!("{prefix}.mha.{n}"), vec![p, p]));
                    }
                    extra.push((format!("{prefix}.mha.wo"), vec![p, r]));
                }
                SummaryVariant::Gated => extra.push((format!("{prefix}.gate.w"), vec![p, p])),
                _ => {}
            }
            extra.push((format!("{prefix}.seq.kernel"), vec![d, cfg.kernel_len]));
            extra.push((format!("{prefix}.seq.mix_w"), vec![d, d]));
            extra.push((format!("{prefix}.seq.mix_b"), vec![d]));
        }
        for j in 0..cfg.n_plain_seq_layers {
            extra.push((format!("plain{j}.seq.kernel"), vec![d, cfg.kernel_len]));
            extra.push((format!("plain{j}.seq.mix_w"), vec![d, d]));
            extra.push((format!("plain{j}.seq.mix_b"), vec![d]));
        }
        let last = if cfg.n_setseq_layers + cfg.n_plain_seq_layers == 0 {
            cfg.input_dim
        } else {
            d
        };
        extra.push(("head.w".into(), vec![last, cfg.output_dim]));
        extra.push(("head.b".into(), vec![cfg.output_dim]));
        out.extend(extra);
        out
    }

    /// Random initialisation: weights `N(0, 1/fan_in)`, biases zero.
    pub fn init(config: SetSeqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, 0x1417);
        let mut params = Params::new();
        for (name, shape) in Self::param_shapes(&config) {
            let numel: usize = shape.iter().product();
            let data: Vec<F> = if shape.len() == 1 {
                vec![F::zero(); numel]
            } else {
                // Kernels are [d, K]: each output mixes K taps.
                let fan_in = if name.ends_with("kernel") { shape[1] } else { shape[0] };
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                (0..numel).map(|_| F::lit(normal.sample(&mut rng))).collect()
            };
            params.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: SetSeqConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in Self::param_shapes(&config) {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", t.shape(), &shape));
            }
            if !t.is_finite() {
                return Err(Error::numeric(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records the parameters on `tape`, trainable when the tape records gradients.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound::new(tape, &self.params)
    }

    /// Forward pass over `input[M, T, input_dim]`.
    pub fn forward(&self, tape: &mut Tape<F>, bound: &Bound, input: Var, opts: &mut ForwardOpts) -> Result<ForwardOut> {
        let cfg = &self.config;
        let shape = tape.shape(input).to_vec();
        if shape.len() != 3 || shape[2] != cfg.input_dim {
            return Err(Error::shape("forward", &shape, &[cfg.input_dim]));
        }
        let (m, t_len) = (shape[0], shape[1]);
        if m == 0 || t_len == 0 {
            return Err(Error::domain("forward needs at least one unit and one period"));
        }
        let p = cfg.dropout;
        let mut u = input;
        let mut summaries = Vec::with_capacity(cfg.n_setseq_layers);
        for l in 0..cfg.n_setseq_layers {
            let prefix = format!("layer{l}");
            let psi_in = if cfg.uses_summary() {
                let phi = Ffn::bind(bound, &format!("{prefix}.phi"))?;
                let chunks = tape.lag_chunk(u, cfg.chunk_len)?;
                let e = ffn(tape, chunks, &phi, p, opts)?;
                let per_unit = match cfg.variant {
                    SummaryVariant::Mean => {
                        let rho = Ffn::bind(bound, &format!("{prefix}.rho"))?;
                        let f = summary_mean(tape, e, &rho, p, opts)?;
                        summaries.push(f);
                        tape.expand(f, 0, m)?
                    }
                    SummaryVariant::Mha => {
                        let f = summary_mha(
                            tape,
                            e,
                            bound.get(&format!("{prefix}.mha.wq"))?,
                            bound.get(&format!("{prefix}.mha.wk"))?,
                            bound.get(&format!("{prefix}.mha.wv"))?,
                            bound.get(&format!("{prefix}.mha.wo"))?,
                            cfg.mha_heads,
                        )?;
                        summaries.push(f);
                        f
                    }
                    SummaryVariant::Gated => {
                        let rho = Ffn::bind(bound, &format!("{prefix}.rho"))?;
                        let gate = if opts.uniform_gate {
                            let inv = F::one() / F::lit(m as f64);
                            tape.constant(Tensor::full(&[1, m, m], inv))
                        } else {
                            gate_matrix(tape, e, bound.get(&format!("{prefix}.gate.w"))?)?
                        };
                        let f = summary_gated(tape, e, gate, &rho, p, opts)?;
                        summaries.push(f);
                        f
                    }
                    SummaryVariant::None => unreachable!("checked by uses_summary"),
                };
                tape.concat(&[u, per_unit], 2)?
            } else {
                u
            };
            let psi = Ffn::bind(bound, &format!("{prefix}.psi"))?;
            let h = ffn(tape, psi_in, &psi, p, opts)?;
            u = seq_layer(
                tape,
                h,
                bound.get(&format!("{prefix}.seq.kernel"))?,
                bound.get(&format!("{prefix}.seq.mix_w"))?,
                bound.get(&format!("{prefix}.seq.mix_b"))?,
                p,
                opts,
            )?;
        }
        for j in 0..cfg.n_plain_seq_layers {
            u = seq_layer(
                tape,
                u,
                bound.get(&format!("plain{j}.seq.kernel"))?,
                bound.get(&format!("plain{j}.seq.mix_w"))?,
                bound.get(&format!("plain{j}.seq.mix_b"))?,
                p,
                opts,
            )?;
        }
        let output = tape.affine(u, bound.get("head.w")?, Some(bound.get("head.b")?))?;
        Ok(ForwardOut { output, summaries })
    }

    /// Eval-mode forward on a panel, returning `[M, T, output_dim]` and the trace.
    pub fn predict(&self, panel: &UnitPanel) -> Result<(Tensor<F>, LayerTrace)> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape);
        let input = tape.constant(panel.to_tensor());
        let out = self.forward(&mut tape, &bound, input, &mut ForwardOpts::eval())?;
        let trace = trace_from(&tape, &out.summaries, panel.t, self.config.summary_dim);
        let value = tape.value(out.output).clone();
        if !value.is_finite() {
            return Err(Error::numeric("model output is not finite"));
        }
        Ok((value, trace))
    }
}

/// Collects summaries into a [`LayerTrace`].
pub fn trace_from<F: Scalar>(tape: &Tape<F>, summaries: &[Var], t_len: usize, r: usize) -> LayerTrace {
    let layers = summaries
        .iter()
        .map(|&v| {
            let value = tape.value(v);
            let data = value.data();
            let rows = data.len() / (t_len * r);
            let mut out = vec![0.0; r * t_len];
            for unit in 0..rows {
                for s in 0..t_len {
                    for d in 0..r {
                        out[d * t_len + s] += data[(unit * t_len + s) * r + d].as_f64();
                    }
                }
            }
            if rows > 1 {
                out.iter_mut().for_each(|v| *v /= rows as f64);
            }
            out
        })
        .collect();
    LayerTrace { t: t_len, r, layers }
}
