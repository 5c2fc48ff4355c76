//! GPT-2 style decoder with every stored value routed through the
//! containers of a [`PrecisionConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::optim::{project_tensors, AdamW, ParamState};
use super::precision::PrecisionConfig;
use super::TrainError;
use crate::tensor::kernels::{self, AttnShape};
use crate::tensor::{matmul_backward, matmul_forward, ContainerKind, MatmulMode};

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub max_seq_len: usize,
    pub vocab: usize,
    /// Rows of the token embedding; at least `vocab`.
    pub padded_vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub channels: usize,
}

const WTE: usize = 0;
const WPE: usize = 1;
const LN1W: usize = 2;
const LN1B: usize = 3;
const QKVW: usize = 4;
const QKVB: usize = 5;
const ATTPROJW: usize = 6;
const ATTPROJB: usize = 7;
const LN2W: usize = 8;
const LN2B: usize = 9;
const FCW: usize = 10;
const FCB: usize = 11;
const FCPROJW: usize = 12;
const FCPROJB: usize = 13;
const LNFW: usize = 14;
const LNFB: usize = 15;
const NUM_TENSORS: usize = 16;

impl ModelConfig {
    /// Byte-level model with 2 layers, 4 heads, 64 channels, context 64.
    pub fn toy() -> Self {
        Self { max_seq_len: 64, vocab: 256, padded_vocab: 256, layers: 2, heads: 4, channels: 64 }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.vocab > 0
            && self.padded_vocab >= self.vocab
            && self.layers > 0
            && self.heads > 0
            && self.channels.is_multiple_of(self.heads)
            && self.max_seq_len > 0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("inconsistent model dimensions {self:?}")))
        }
    }

    /// Sizes of the parameter tensors in llm.c order.
    pub fn param_sizes(&self) -> [usize; NUM_TENSORS] {
        let (c, l, vp, t) = (self.channels, self.layers, self.padded_vocab, self.max_seq_len);
        [
            vp * c,
            t * c,
            l * c,
            l * c,
            l * 3 * c * c,
            l * 3 * c,
            l * c * c,
            l * c,
            l * c,
            l * c,
            l * 4 * c * c,
            l * 4 * c,
            l * c * 4 * c,
            l * c,
            c,
            c,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.param_sizes().iter().sum()
    }

    /// GPT-2 initialization: normal(0, 0.02) matrices, residual projections
    /// scaled by `1/sqrt(2L)`, unit layernorm gains, zero biases.
    pub fn init_weights(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let residual_std = std / (2.0 * self.layers as f64).sqrt();
        let mut out = Vec::with_capacity(self.num_params());
        for (i, n) in self.param_sizes().into_iter().enumerate() {
            match i {
                WTE | WPE | QKVW | FCW => {
                    let d = Normal::new(0.0, std).unwrap();
                    out.extend((0..n).map(|_| d.sample(&mut rng)));
                }
                ATTPROJW | FCPROJW => {
                    let d = Normal::new(0.0, residual_std).unwrap();
                    out.extend((0..n).map(|_| d.sample(&mut rng)));
                }
                LN1W | LN2W | LNFW => out.extend(std::iter::repeat_n(1.0, n)),
                _ => out.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        out
    }
}

fn split<'a>(buf: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut rest = buf;
    sizes
        .iter()
        .map(|&n| {
            let (h, t) = rest.split_at(n);
            rest = t;
            h
        })
        .collect()
}

fn split_mut<'a>(buf: &'a mut [f64], sizes: &[usize]) -> Vec<&'a mut [f64]> {
    let mut rest = buf;
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let (h, t) = std::mem::take(&mut rest).split_at_mut(n);
        out.push(h);
        rest = t;
    }
    out
}

/// Forward activations of one batch.
#[derive(Debug, Clone)]
pub struct Activations {
    pub b: usize,
    pub t: usize,
    encoded: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    atty: Vec<f64>,
    preatt: Vec<f64>,
    att: Vec<f64>,
    attproj: Vec<f64>,
    residual2: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fch: Vec<f64>,
    fch_gelu: Vec<f64>,
    fcproj: Vec<f64>,
    residual3: Vec<f64>,
    lnf: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
    /// `(B, T, padded_vocab)`.
    pub logits: Vec<f64>,
    /// `(B, T, padded_vocab)`, zero beyond `vocab`.
    pub probs: Vec<f64>,
    pub losses: Vec<f64>,
}

impl Activations {
    fn new(cfg: &ModelConfig, b: usize, t: usize) -> Self {
        let (c, l, nh, vp) = (cfg.channels, cfg.layers, cfg.heads, cfg.padded_vocab);
        let btc = b * t * c;
        let z = vec![0.0; 0];
        let mut a = Self {
            b,
            t,
            encoded: z.clone(),
            ln1: z.clone(),
            ln1_mean: z.clone(),
            ln1_rstd: z.clone(),
            qkv: z.clone(),
            atty: z.clone(),
            preatt: z.clone(),
            att: z.clone(),
            attproj: z.clone(),
            residual2: z.clone(),
            ln2: z.clone(),
            ln2_mean: z.clone(),
            ln2_rstd: z.clone(),
            fch: z.clone(),
            fch_gelu: z.clone(),
            fcproj: z.clone(),
            residual3: z.clone(),
            lnf: z.clone(),
            lnf_mean: z.clone(),
            lnf_rstd: z.clone(),
            logits: z.clone(),
            probs: z.clone(),
            losses: z,
        };
        let zeros = |n: usize| vec![0.0; n];
        a.encoded = zeros(btc);
        a.ln1 = zeros(l * btc);
        a.ln1_mean = zeros(l * b * t);
        a.ln1_rstd = zeros(l * b * t);
        a.qkv = zeros(l * 3 * btc);
        a.atty = zeros(l * btc);
        a.preatt = zeros(l * b * nh * t * t);
        a.att = zeros(l * b * nh * t * t);
        a.attproj = zeros(l * btc);
        a.residual2 = zeros(l * btc);
        a.ln2 = zeros(l * btc);
        a.ln2_mean = zeros(l * b * t);
        a.ln2_rstd = zeros(l * b * t);
        a.fch = zeros(l * 4 * btc);
        a.fch_gelu = zeros(l * 4 * btc);
        a.fcproj = zeros(l * btc);
        a.residual3 = zeros(l * btc);
        a.lnf = zeros(btc);
        a.lnf_mean = zeros(b * t);
        a.lnf_rstd = zeros(b * t);
        a.logits = zeros(b * t * vp);
        a.probs = zeros(b * t * vp);
        a.losses = zeros(b * t);
        a
    }

    /// Mean loss over all positions.
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// Model dimensions, precision configuration and parameter state.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub precision: PrecisionConfig,
    params: ParamState,
}

fn per_layer(buf: &[f64], l: usize, n: usize) -> &[f64] {
    &buf[l * n..(l + 1) * n]
}

fn per_layer_mut(buf: &mut [f64], l: usize, n: usize) -> &mut [f64] {
    &mut buf[l * n..(l + 1) * n]
}

impl Model {
    pub fn new(config: ModelConfig, precision: PrecisionConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let w = config.init_weights(seed);
        Self::from_weights(config, precision, w)
    }

    pub fn from_weights(config: ModelConfig, precision: PrecisionConfig, weights: Vec<f64>) -> Result<Self, TrainError> {
        config.validate()?;
        precision.validate()?;
        if weights.len() != config.num_params() {
            return Err(TrainError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                config.num_params(),
                weights.len()
            )));
        }
        let params = ParamState::new(
            weights,
            config.param_sizes().to_vec(),
            precision.weights_kind(),
            precision.adam_kind(),
            precision.master_copy,
        );
        Ok(Self { config, precision, params })
    }

    /// The same `f64` weights under another precision configuration, with
    /// fresh optimizer state.
    pub fn with_precision(&self, precision: PrecisionConfig) -> Result<Self, TrainError> {
        Self::from_weights(self.config, precision, self.params.weights().to_vec())
    }

    pub fn params(&self) -> &ParamState {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamState {
        &mut self.params
    }

    /// Best available `f64` weights (the master copy when kept).
    pub fn weights(&self) -> &[f64] {
        self.params.weights()
    }

    fn check_batch(&self, tokens: &[u32], b: usize, t: usize) -> Result<(), TrainError> {
        if tokens.len() != b * t || t == 0 || t > self.config.max_seq_len {
            return Err(TrainError::InvalidConfig(format!(
                "batch of {} tokens does not match B={b}, T={t} (context {})",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&x| x as usize >= self.config.vocab) {
            return Err(TrainError::InvalidConfig(format!("token {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Forward pass; with targets the per-position losses are filled in.
    pub fn forward(&self, tokens: &[u32], targets: Option<&[u32]>, b: usize, t: usize) -> Result<Activations, TrainError> {
        self.check_batch(tokens, b, t)?;
        if let Some(tg) = targets {
            self.check_batch(tg, b, t)?;
        }
        let cfg = &self.config;
        let (c, l_count, nh, v, vp) = (cfg.channels, cfg.layers, cfg.heads, cfg.vocab, cfg.padded_vocab);
        let (bt, btc) = (b * t, b * t * c);
        let act = self.precision.activations_kind();
        let probs_kind = self.precision.probs_kind();
        let mode = self.precision.matmul_mode();
        let p = split(self.params.values(), &cfg.param_sizes());
        let mut a = Activations::new(cfg, b, t);

        kernels::encoder_forward(&mut a.encoded, tokens, p[WTE], p[WPE], t, c);
        probs_kind.project(&mut a.encoded);

        for l in 0..l_count {
            let residual: Vec<f64> = if l == 0 { a.encoded.clone() } else { per_layer(&a.residual3, l - 1, btc).to_vec() };
            let ln1 = per_layer_mut(&mut a.ln1, l, btc);
            let (m1, r1) = (per_layer_mut(&mut a.ln1_mean, l, bt), per_layer_mut(&mut a.ln1_rstd, l, bt));
            kernels::layernorm_forward(ln1, m1, r1, &residual, per_layer(p[LN1W], l, c), per_layer(p[LN1B], l, c), c);
            act.project(ln1);
            act.project(m1);
            act.project(r1);

            let qkv = per_layer_mut(&mut a.qkv, l, 3 * btc);
            matmul_forward(
                qkv,
                per_layer(&a.ln1, l, btc),
                per_layer(p[QKVW], l, 3 * c * c),
                Some(per_layer(p[QKVB], l, 3 * c)),
                bt,
                c,
                3 * c,
                &mode,
            )?;
            act.project(qkv);

            let att_n = b * nh * t * t;
            let shape = AttnShape { b, t, c, nh };
            kernels::attention_forward(
                per_layer_mut(&mut a.atty, l, btc),
                per_layer_mut(&mut a.preatt, l, att_n),
                per_layer_mut(&mut a.att, l, att_n),
                per_layer(&a.qkv, l, 3 * btc),
                shape,
            );
            act.project(per_layer_mut(&mut a.atty, l, btc));
            act.project(per_layer_mut(&mut a.preatt, l, att_n));
            act.project(per_layer_mut(&mut a.att, l, att_n));

            matmul_forward(
                per_layer_mut(&mut a.attproj, l, btc),
                per_layer(&a.atty, l, btc),
                per_layer(p[ATTPROJW], l, c * c),
                Some(per_layer(p[ATTPROJB], l, c)),
                bt,
                c,
                c,
                &mode,
            )?;
            act.project(per_layer_mut(&mut a.attproj, l, btc));

            let res2 = per_layer_mut(&mut a.residual2, l, btc);
            kernels::residual_forward(res2, &residual, &a.attproj[l * btc..(l + 1) * btc]);
            act.project(res2);

            let ln2 = per_layer_mut(&mut a.ln2, l, btc);
            let (m2, r2) = (per_layer_mut(&mut a.ln2_mean, l, bt), per_layer_mut(&mut a.ln2_rstd, l, bt));
            kernels::layernorm_forward(
                ln2,
                m2,
                r2,
                &a.residual2[l * btc..(l + 1) * btc],
                per_layer(p[LN2W], l, c),
                per_layer(p[LN2B], l, c),
                c,
            );
            act.project(ln2);
            act.project(m2);
            act.project(r2);

            let fch = per_layer_mut(&mut a.fch, l, 4 * btc);
            matmul_forward(
                fch,
                per_layer(&a.ln2, l, btc),
                per_layer(p[FCW], l, 4 * c * c),
                Some(per_layer(p[FCB], l, 4 * c)),
                bt,
                c,
                4 * c,
                &mode,
            )?;
            act.project(fch);
            let gelu = per_layer_mut(&mut a.fch_gelu, l, 4 * btc);
            kernels::gelu_forward(gelu, &a.fch[l * 4 * btc..(l + 1) * 4 * btc]);
            act.project(gelu);

            matmul_forward(
                per_layer_mut(&mut a.fcproj, l, btc),
                per_layer(&a.fch_gelu, l, 4 * btc),
                per_layer(p[FCPROJW], l, 4 * c * c),
                Some(per_layer(p[FCPROJB], l, c)),
                bt,
                4 * c,
                c,
                &mode,
            )?;
            act.project(per_layer_mut(&mut a.fcproj, l, btc));

            let res3 = per_layer_mut(&mut a.residual3, l, btc);
            kernels::residual_forward(res3, &a.residual2[l * btc..(l + 1) * btc], &a.fcproj[l * btc..(l + 1) * btc]);
            act.project(res3);
        }

        let last = per_layer(&a.residual3, l_count - 1, btc).to_vec();
        kernels::layernorm_forward(&mut a.lnf, &mut a.lnf_mean, &mut a.lnf_rstd, &last, p[LNFW], p[LNFB], c);
        act.project(&mut a.lnf);
        act.project(&mut a.lnf_mean);
        act.project(&mut a.lnf_rstd);

        matmul_forward(&mut a.logits, &a.lnf, p[WTE], None, bt, c, vp, &mode)?;
        act.project(&mut a.logits);

        for (pr, lg) in a.probs.chunks_mut(vp).zip(a.logits.chunks(vp)) {
            kernels::softmax_forward(&mut pr[..v], &lg[..v], v, &probs_kind);
        }
        if let Some(tg) = targets {
            for (i, (loss, pr)) in a.losses.iter_mut().zip(a.probs.chunks(vp)).enumerate() {
                *loss = -pr[tg[i] as usize].ln();
            }
            probs_kind.project(&mut a.losses);
        }
        Ok(a)
    }

    /// Mean loss and parameter gradients (already stored through the
    /// gradients container).
    pub fn loss_and_grads(&self, tokens: &[u32], targets: &[u32], b: usize, t: usize) -> Result<(f64, Vec<f64>), TrainError> {
        let a = self.forward(tokens, Some(targets), b, t)?;
        let loss = a.mean_loss();
        let grads = self.backward(&a, tokens, targets)?;
        Ok((loss, grads))
    }

    fn backward(&self, a: &Activations, tokens: &[u32], targets: &[u32]) -> Result<Vec<f64>, TrainError> {
        let cfg = &self.config;
        let (b, t) = (a.b, a.t);
        let (c, l_count, nh, v, vp) = (cfg.channels, cfg.layers, cfg.heads, cfg.vocab, cfg.padded_vocab);
        let (bt, btc) = (b * t, b * t * c);
        let gk = self.precision.gradients_kind();
        let mode: MatmulMode = self.precision.matmul_mode();
        let sizes = cfg.param_sizes();
        let p = split(self.params.values(), &sizes);
        let mut grads = vec![0.0; cfg.num_params()];
        let g = &mut split_mut(&mut grads, &sizes);

        let dloss = 1.0 / bt as f64;
        let mut dlogits = vec![0.0; bt * vp];
        for ((dl, pr), &ix) in dlogits.chunks_mut(vp).zip(a.probs.chunks(vp)).zip(targets) {
            kernels::crossentropy_softmax_backward(&mut dl[..v], &[dloss], &pr[..v], &[ix], v);
        }
        gk.project(&mut dlogits);

        let mut dlnf = vec![0.0; btc];
        matmul_backward(&mut dlnf, g[WTE], None, &dlogits, &a.lnf, p[WTE], bt, c, vp, &mode)?;
        let mut dres = vec![0.0; btc];
        {
            let (w, bias) = two_mut(g, LNFW, LNFB);
            kernels::layernorm_backward(
                &mut dres,
                w,
                bias,
                &dlnf,
                per_layer(&a.residual3, l_count - 1, btc),
                p[LNFW],
                &a.lnf_mean,
                &a.lnf_rstd,
                c,
            );
        }
        gk.project(&mut dres);

        let att_n = b * nh * t * t;
        for l in (0..l_count).rev() {
            let residual = if l == 0 { &a.encoded[..] } else { per_layer(&a.residual3, l - 1, btc) };
            // residual3 = residual2 + fcproj
            let mut dres2 = dres.clone();
            let dfcproj = dres.clone();
            let mut dfch_gelu = vec![0.0; 4 * btc];
            {
                let (w, bias) = two_mut(g, FCPROJW, FCPROJB);
                matmul_backward(
                    &mut dfch_gelu,
                    per_layer_mut(w, l, 4 * c * c),
                    Some(per_layer_mut(bias, l, c)),
                    &dfcproj,
                    per_layer(&a.fch_gelu, l, 4 * btc),
                    per_layer(p[FCPROJW], l, 4 * c * c),
                    bt,
                    4 * c,
                    c,
                    &mode,
                )?;
            }
            let mut dfch = vec![0.0; 4 * btc];
            kernels::gelu_backward(&mut dfch, per_layer(&a.fch, l, 4 * btc), &dfch_gelu);
            let mut dln2 = vec![0.0; btc];
            {
                let (w, bias) = two_mut(g, FCW, FCB);
                matmul_backward(
                    &mut dln2,
                    per_layer_mut(w, l, 4 * c * c),
                    Some(per_layer_mut(bias, l, 4 * c)),
                    &dfch,
                    per_layer(&a.ln2, l, btc),
                    per_layer(p[FCW], l, 4 * c * c),
                    bt,
                    c,
                    4 * c,
                    &mode,
                )?;
            }
            {
                let (w, bias) = two_mut(g, LN2W, LN2B);
                kernels::layernorm_backward(
                    &mut dres2,
                    per_layer_mut(w, l, c),
                    per_layer_mut(bias, l, c),
                    &dln2,
                    per_layer(&a.residual2, l, btc),
                    per_layer(p[LN2W], l, c),
                    per_layer(&a.ln2_mean, l, bt),
                    per_layer(&a.ln2_rstd, l, bt),
                    c,
                );
            }
            // residual2 = residual + attproj
            let mut dres_in = dres2.clone();
            let dattproj = dres2;
            let mut datty = vec![0.0; btc];
            {
                let (w, bias) = two_mut(g, ATTPROJW, ATTPROJB);
                matmul_backward(
                    &mut datty,
                    per_layer_mut(w, l, c * c),
                    Some(per_layer_mut(bias, l, c)),
                    &dattproj,
                    per_layer(&a.atty, l, btc),
                    per_layer(p[ATTPROJW], l, c * c),
                    bt,
                    c,
                    c,
                    &mode,
                )?;
            }
            let mut dqkv = vec![0.0; 3 * btc];
            let mut dpreatt = vec![0.0; att_n];
            let mut datt = vec![0.0; att_n];
            kernels::attention_backward(
                &mut dqkv,
                &mut dpreatt,
                &mut datt,
                &datty,
                per_layer(&a.qkv, l, 3 * btc),
                per_layer(&a.att, l, att_n),
                AttnShape { b, t, c, nh },
            );
            let mut dln1 = vec![0.0; btc];
            {
                let (w, bias) = two_mut(g, QKVW, QKVB);
                matmul_backward(
                    &mut dln1,
                    per_layer_mut(w, l, 3 * c * c),
                    Some(per_layer_mut(bias, l, 3 * c)),
                    &dqkv,
                    per_layer(&a.ln1, l, btc),
                    per_layer(p[QKVW], l, 3 * c * c),
                    bt,
                    c,
                    3 * c,
                    &mode,
                )?;
            }
            {
                let (w, bias) = two_mut(g, LN1W, LN1B);
                kernels::layernorm_backward(
                    &mut dres_in,
                    per_layer_mut(w, l, c),
                    per_layer_mut(bias, l, c),
                    &dln1,
                    residual,
                    per_layer(p[LN1W], l, c),
                    per_layer(&a.ln1_mean, l, bt),
                    per_layer(&a.ln1_rstd, l, bt),
                    c,
                );
            }
            gk.project(&mut dres_in);
            dres = dres_in;
        }
        {
            let (wte, wpe) = two_mut(g, WTE, WPE);
            kernels::encoder_backward(wte, wpe, &dres, tokens, t, c);
        }
        project_tensors(&gk, &mut grads, &sizes);
        Ok(grads)
    }

    /// Forward, backward and one optimizer step; returns the mean loss.
    pub fn train_step(&mut self, tokens: &[u32], targets: &[u32], b: usize, t: usize, opt: &AdamW) -> Result<f64, TrainError> {
        let (loss, grads) = self.loss_and_grads(tokens, targets, b, t)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: self.params.step_count() as usize });
        }
        self.params.adamw_step(&grads, opt);
        Ok(loss)
    }

    /// Next-token distribution (`f64` softmax of the logits) after each
    /// position of a single sequence.
    pub fn next_token_probs(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, TrainError> {
        let a = self.forward(tokens, None, 1, tokens.len())?;
        let (v, vp) = (self.config.vocab, self.config.padded_vocab);
        Ok(a
            .logits
            .chunks(vp)
            .map(|lg| {
                let mut pr = vec![0.0; v];
                kernels::softmax_forward(&mut pr, &lg[..v], v, &ContainerKind::Wide);
                pr
            })
            .collect())
    }
}

fn two_mut<'a>(g: &'a mut [&mut [f64]], i: usize, j: usize) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(i < j);
    let (x, y) = g.split_at_mut(j);
    (&mut *x[i], &mut *y[0])
}
