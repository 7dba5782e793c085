//! Full encoder-decoder forward pass, applied to each channel independently
//! with shared weights.

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attention, AttentionConfig, AttentionParams};
use crate::autodiff::{Graph, Var};
use crate::embedding::{compute_patch_count, patch_embed, EmbeddingParams, PatchConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ParameterStore, Tensor};

/// Which entries share one mean/deviation in layer normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One mean and deviation over the whole `Z × D` block.
    #[default]
    Global,
    /// Conventional per-row statistics over the feature axis.
    #[serde(alias = "per-row")]
    PerRow,
}

/// Hyperparameters. Defaults follow the reference setup: patch 16, stride 8,
/// `D = 512`, 8 heads, 2 encoder layers, 1 decoder layer, dropout 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub pred_len: usize,
    pub channels: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Per-head query/key width; `None` means `d_model / n_heads`.
    pub d_k: Option<usize>,
    /// Per-head value width; `None` means `d_model`.
    pub d_v: Option<usize>,
    pub e_layers: usize,
    pub d_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub norm_mode: NormMode,
    /// Positional table rows; `None` means the larger of the encoder and
    /// decoder patch counts.
    pub max_patches: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 96,
            pred_len: 96,
            channels: 1,
            patch_len: 16,
            stride: 8,
            d_model: 512,
            n_heads: 8,
            d_k: None,
            d_v: None,
            e_layers: 2,
            d_layers: 1,
            d_ff: 2048,
            dropout: 0.1,
            ln_eps: 1e-5,
            norm_mode: NormMode::Global,
            max_patches: None,
        }
    }
}

impl ModelConfig {
    /// Small layout for gradient checks and overfit runs: `I = 16, O = 8,
    /// C = 2, P = 4, S = 2, D = 8, H = 2`, one encoder and one decoder
    /// layer, `d_ff = 16`, no dropout.
    pub fn tiny() -> Self {
        Self {
            seq_len: 16,
            pred_len: 8,
            channels: 2,
            patch_len: 4,
            stride: 2,
            d_model: 8,
            n_heads: 2,
            e_layers: 1,
            d_layers: 1,
            d_ff: 16,
            dropout: 0.0,
            ..Self::default()
        }
    }

    /// Known half of the lookback prepended to the decoder input.
    pub fn label_len(&self) -> usize {
        self.seq_len / 2
    }

    pub fn decoder_len(&self) -> usize {
        self.label_len() + self.pred_len
    }

    fn patch_probe(&self) -> PatchConfig {
        PatchConfig {
            patch_len: self.patch_len,
            stride: self.stride,
            d_model: self.d_model,
            max_patches: usize::MAX,
        }
    }

    pub fn encoder_patches(&self) -> Result<usize> {
        compute_patch_count(self.seq_len, &self.patch_probe())
    }

    pub fn decoder_patches(&self) -> Result<usize> {
        compute_patch_count(self.decoder_len(), &self.patch_probe())
    }

    pub fn patch_config(&self) -> Result<PatchConfig> {
        let needed = self.encoder_patches()?.max(self.decoder_patches()?);
        let max_patches = self.max_patches.unwrap_or(needed);
        Ok(PatchConfig {
            max_patches,
            ..self.patch_probe()
        })
    }

    pub fn attention_config(&self) -> Result<AttentionConfig> {
        let mut cfg = match self.d_k {
            Some(d_k) => AttentionConfig {
                n_heads: self.n_heads,
                d_model: self.d_model,
                d_k,
                d_v: self.d_model,
            },
            None => AttentionConfig::new(self.d_model, self.n_heads)?,
        };
        if let Some(d_v) = self.d_v {
            cfg.d_v = d_v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.pred_len == 0 || self.channels == 0 {
            return Err(Error::Config(
                "seq_len, pred_len and channels must be >= 1".into(),
            ));
        }
        if self.e_layers == 0 || self.d_layers == 0 {
            return Err(Error::Config(
                "need at least one encoder and one decoder layer".into(),
            ));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("layer-norm epsilon must be positive".into()));
        }
        self.patch_config()?.validate()?;
        self.attention_config()?;
        Ok(())
    }
}

/// Per-call settings threaded through the layers.
pub struct Ctx<'r> {
    pub dropout: f64,
    pub norm_mode: NormMode,
    /// `Some` in training mode (dropout active), `None` in evaluation mode.
    pub rng: Option<&'r mut Rng>,
}

impl Ctx<'_> {
    pub fn eval(norm_mode: NormMode) -> Self {
        Ctx {
            dropout: 0.0,
            norm_mode,
            rng: None,
        }
    }

    fn drop<'g>(&mut self, x: Var<'g>) -> Result<Var<'g>> {
        x.dropout(self.dropout, self.rng.as_deref_mut())
    }
}

fn uniform_weight(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(&[rows, cols], -bound, bound, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: String,
    pub beta: String,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init(store: &mut ParameterStore, prefix: &str, d_model: usize, eps: f64) -> Result<Self> {
        let gamma = format!("{prefix}.gamma");
        let beta = format!("{prefix}.beta");
        store.insert(&gamma, Tensor::full(&[d_model], 1.0))?;
        store.insert(&beta, Tensor::zeros(&[d_model]))?;
        Ok(Self { gamma, beta, eps })
    }
}

/// `γ ⊙ (x − μ) / (σ + ε) + β` on `[..., Z, D]` with population statistics
/// taken per `Z × D` block (or per row in [`NormMode::PerRow`]).
pub fn layer_norm<'g>(
    graph: &'g Graph,
    store: &ParameterStore,
    params: &LayerNormParams,
    x: Var<'g>,
    mode: NormMode,
) -> Result<Var<'g>> {
    let r = x.shape().len();
    if r < 2 {
        return Err(Error::dim(format!(
            "layer_norm needs [.., Z, D], got {:?}",
            x.shape()
        )));
    }
    let axes: &[usize] = match mode {
        NormMode::Global => &[r - 2, r - 1],
        NormMode::PerRow => &[r - 1],
    };
    let (mean, var) = x.mean_var(axes)?;
    let normed = x.sub(&mean)?.div(&var.sqrt().add_scalar(params.eps))?;
    let gamma = graph.param(store, &params.gamma)?;
    let beta = graph.param(store, &params.beta)?;
    normed.mul(&gamma)?.add(&beta)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl FeedForwardParams {
    pub fn init(
        store: &mut ParameterStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let p = Self {
            w1: format!("{prefix}.w1"),
            b1: format!("{prefix}.b1"),
            w2: format!("{prefix}.w2"),
            b2: format!("{prefix}.b2"),
        };
        store.insert(&p.w1, uniform_weight(d_model, d_ff, d_model, rng))?;
        store.insert(&p.b1, Tensor::zeros(&[d_ff]))?;
        store.insert(&p.w2, uniform_weight(d_ff, d_model, d_ff, rng))?;
        store.insert(&p.b2, Tensor::zeros(&[d_model]))?;
        Ok(p)
    }
}

/// `relu(x W1 + b1) W2 + b2`, biases broadcast across rows.
pub fn feed_forward<'g>(
    graph: &'g Graph,
    store: &ParameterStore,
    params: &FeedForwardParams,
    x: Var<'g>,
) -> Result<Var<'g>> {
    let w1 = graph.param(store, &params.w1)?;
    let b1 = graph.param(store, &params.b1)?;
    let w2 = graph.param(store, &params.w2)?;
    let b2 = graph.param(store, &params.b2)?;
    x.matmul(&w1)?.add(&b1)?.relu().matmul(&w2)?.add(&b2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm2: LayerNormParams,
}

impl EncoderLayerParams {
    pub fn init(store: &mut ParameterStore, prefix: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let attn = AttentionParams::init(store, &format!("{prefix}.attn"), cfg.attention_config()?, rng)?;
        let norm1 = LayerNormParams::init(store, &format!("{prefix}.norm1"), cfg.d_model, cfg.ln_eps)?;
        let ffn = FeedForwardParams::init(store, &format!("{prefix}.ffn"), cfg.d_model, cfg.d_ff, rng)?;
        let norm2 = LayerNormParams::init(store, &format!("{prefix}.norm2"), cfg.d_model, cfg.ln_eps)?;
        Ok(Self {
            attn,
            norm1,
            ffn,
            norm2,
        })
    }
}

/// Post-norm encoder layer:
/// `h = LN(attn(x) + x)`, `out = LN(ffn(h) + h)`.
pub fn encoder_layer<'g>(
    graph: &'g Graph,
    store: &ParameterStore,
    params: &EncoderLayerParams,
    x: Var<'g>,
    ctx: &mut Ctx<'_>,
) -> Result<Var<'g>> {
    let attn = multi_head_attention(
        graph,
        store,
        &params.attn,
        x,
        x,
        ctx.dropout,
        ctx.rng.as_deref_mut(),
    )?;
    let attn = ctx.drop(attn)?;
    let h = layer_norm(graph, store, &params.norm1, attn.add(&x)?, ctx.norm_mode)?;
    let ff = ctx.drop(feed_forward(graph, store, &params.ffn, h)?)?;
    layer_norm(graph, store, &params.norm2, ff.add(&h)?, ctx.norm_mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm3: LayerNormParams,
}

impl DecoderLayerParams {
    pub fn init(store: &mut ParameterStore, prefix: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let acfg = cfg.attention_config()?;
        let self_attn = AttentionParams::init(store, &format!("{prefix}.self_attn"), acfg, rng)?;
        let norm1 = LayerNormParams::init(store, &format!("{prefix}.norm1"), cfg.d_model, cfg.ln_eps)?;
        let cross_attn = AttentionParams::init(store, &format!("{prefix}.cross_attn"), acfg, rng)?;
        let norm2 = LayerNormParams::init(store, &format!("{prefix}.norm2"), cfg.d_model, cfg.ln_eps)?;
        let ffn = FeedForwardParams::init(store, &format!("{prefix}.ffn"), cfg.d_model, cfg.d_ff, rng)?;
        let norm3 = LayerNormParams::init(store, &format!("{prefix}.norm3"), cfg.d_model, cfg.ln_eps)?;
        Ok(Self {
            self_attn,
            norm1,
            cross_attn,
            norm2,
            ffn,
            norm3,
        })
    }
}

/// Post-norm decoder layer with self-attention, cross-attention over
/// `enc_out`, and the feed-forward block, each followed by residual + LN.
pub fn decoder_layer<'g>(
    graph: &'g Graph,
    store: &ParameterStore,
    params: &DecoderLayerParams,
    x: Var<'g>,
    enc_out: Var<'g>,
    ctx: &mut Ctx<'_>,
) -> Result<Var<'g>> {
    let (xs, es) = (x.shape(), enc_out.shape());
    if xs.last() != es.last() {
        return Err(Error::dim(format!(
            "decoder input {xs:?} and encoder output {es:?} differ in width"
        )));
    }
    let sa = multi_head_attention(
        graph,
        store,
        &params.self_attn,
        x,
        x,
        ctx.dropout,
        ctx.rng.as_deref_mut(),
    )?;
    let sa = ctx.drop(sa)?;
    let h1 = layer_norm(graph, store, &params.norm1, sa.add(&x)?, ctx.norm_mode)?;
    let ca = multi_head_attention(
        graph,
        store,
        &params.cross_attn,
        h1,
        enc_out,
        ctx.dropout,
        ctx.rng.as_deref_mut(),
    )?;
    let ca = ctx.drop(ca)?;
    let h2 = layer_norm(graph, store, &params.norm2, ca.add(&h1)?, ctx.norm_mode)?;
    let ff = ctx.drop(feed_forward(graph, store, &params.ffn, h2)?)?;
    layer_norm(graph, store, &params.norm3, ff.add(&h2)?, ctx.norm_mode)
}

/// Complete parameter set plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchformerModel {
    cfg: ModelConfig,
    patch: PatchConfig,
    store: ParameterStore,
    embedding: EmbeddingParams,
    encoder: Vec<EncoderLayerParams>,
    decoder: Vec<DecoderLayerParams>,
    head: String,
}

impl PatchformerModel {
    /// Seeded initialization; the same `(cfg, seed)` always yields a
    /// bitwise-identical parameter store.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let patch = cfg.patch_config()?;
        let mut store = ParameterStore::new(seed);
        let mut rng = Rng::new(seed);
        let embedding = EmbeddingParams::init(&mut store, "embed", &patch, &mut rng)?;
        let encoder = (0..cfg.e_layers)
            .map(|l| EncoderLayerParams::init(&mut store, &format!("encoder.{l}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.d_layers)
            .map(|l| DecoderLayerParams::init(&mut store, &format!("decoder.{l}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let flat = cfg.decoder_patches()? * cfg.d_model;
        let head = "head.w_y".to_string();
        store.insert(&head, uniform_weight(flat, cfg.pred_len, flat, &mut rng))?;
        Ok(Self {
            cfg,
            patch,
            store,
            embedding,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParameterStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn embedding(&self) -> &EmbeddingParams {
        &self.embedding
    }

    pub fn encoder_layers(&self) -> &[EncoderLayerParams] {
        &self.encoder
    }

    pub fn decoder_layers(&self) -> &[DecoderLayerParams] {
        &self.decoder
    }

    pub fn head_name(&self) -> &str {
        &self.head
    }

    /// Replaces every parameter with the same-named entry of `store`.
    /// Names, order and shapes must match exactly.
    pub fn load_params(&mut self, store: ParameterStore) -> Result<()> {
        let names_match = self.store.names().eq(store.names());
        if !names_match {
            return Err(Error::Checkpoint(
                "parameter names do not match model layout".into(),
            ));
        }
        for ((name, a), (_, b)) in self.store.iter().zip(store.iter()) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, model expects {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        self.store = store;
        Ok(())
    }

    /// Forward pass over `N` univariate series `x` of shape `[N, I]`,
    /// returning `[N, O]`. Parameters are read from `store`, which must have
    /// this model's layout.
    pub fn forward_series_with<'g>(
        &self,
        graph: &'g Graph,
        store: &ParameterStore,
        x: Var<'g>,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var<'g>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.cfg.seq_len {
            return Err(Error::Config(format!(
                "expected series batch [N, {}], got {shape:?}",
                self.cfg.seq_len
            )));
        }
        let n = shape[0];
        let label = self.cfg.label_len();

        let mut enc = ctx.drop(patch_embed(graph, store, &self.embedding, &self.patch, x)?)?;
        for layer in &self.encoder {
            enc = encoder_layer(graph, store, layer, enc, ctx)?;
        }

        let known = x.narrow(1, self.cfg.seq_len - label, label)?;
        let zeros = graph.constant(Tensor::zeros(&[n, self.cfg.pred_len]));
        let dec_in = Var::concat(&[known, zeros], 1)?;
        let mut dec = ctx.drop(patch_embed(graph, store, &self.embedding, &self.patch, dec_in)?)?;
        for layer in &self.decoder {
            dec = decoder_layer(graph, store, layer, dec, enc, ctx)?;
        }

        let w_y = graph.param(store, &self.head)?;
        dec.flatten_from(1)?.matmul(&w_y)
    }

    /// [`Self::forward_series_with`] using the model's own parameters.
    pub fn forward_series<'g>(&self, graph: &'g Graph, x: Var<'g>, ctx: &mut Ctx<'_>) -> Result<Var<'g>> {
        self.forward_series_with(graph, &self.store, x, ctx)
    }

    /// Forward pass over a batch of windows `[B, I, C]` into `[B, O, C]`.
    /// Channels become independent rows sharing every weight.
    pub fn forward_batch_with<'g>(
        &self,
        graph: &'g Graph,
        store: &ParameterStore,
        x: Var<'g>,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.cfg.seq_len || s[2] != self.cfg.channels {
            return Err(Error::Config(format!(
                "expected input [B, {}, {}], got {s:?}",
                self.cfg.seq_len, self.cfg.channels
            )));
        }
        let (b, c) = (s[0], s[2]);
        let series = x.transpose()?.reshape(&[b * c, self.cfg.seq_len])?;
        let out = self.forward_series_with(graph, store, series, ctx)?;
        out.reshape(&[b, c, self.cfg.pred_len])?.transpose()
    }

    /// Evaluation-mode forecast for one window `[I, C]`, returning `[O, C]`.
    pub fn forward(&self, x_enc: &Tensor) -> Result<Tensor> {
        let s = x_enc.shape();
        if s.len() != 2 || s[0] != self.cfg.seq_len || s[1] != self.cfg.channels {
            return Err(Error::Config(format!(
                "expected window [{}, {}], got {s:?}",
                self.cfg.seq_len, self.cfg.channels
            )));
        }
        let g = Graph::new();
        let x = g.constant(x_enc.reshaped(&[1, s[0], s[1]])?);
        let mut ctx = Ctx::eval(self.cfg.norm_mode);
        let out = self.forward_batch_with(&g, &self.store, x, &mut ctx)?;
        out.tensor().reshaped(&[self.cfg.pred_len, self.cfg.channels])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig::tiny()
    }

    fn ln_params(store: &mut ParameterStore, d: usize, eps: f64) -> LayerNormParams {
        LayerNormParams::init(store, "ln", d, eps).unwrap()
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut store = ParameterStore::new(0);
        let p = ln_params(&mut store, 3, 1e-5);
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3], 4.2));
        let y = layer_norm(&g, &store, &p, x, NormMode::Global).unwrap();
        assert!(y.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut store = ParameterStore::new(0);
        let p = ln_params(&mut store, 2, 1e-5);
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = layer_norm(&g, &store, &p, x, NormMode::Global).unwrap().tensor();
        let den = 1.25f64.sqrt() + 1e-5;
        for (out, xin) in y.data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((out - (xin - 2.5) / den).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut store = ParameterStore::new(0);
        let p = ln_params(&mut store, 3, 1e-5);
        store.get_mut(&p.gamma).unwrap().data_mut().fill(0.0);
        store
            .get_mut(&p.beta)
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, -2.0, 0.5]);
        let g = Graph::new();
        let x = g.constant(Tensor::uniform(&[4, 3], -5.0, 5.0, &mut Rng::new(3)));
        let y = layer_norm(&g, &store, &p, x, NormMode::Global).unwrap().tensor();
        for row in y.data().chunks(3) {
            assert_eq!(row, &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn per_row_mode_normalizes_each_row() {
        let mut store = ParameterStore::new(0);
        let p = ln_params(&mut store, 4, 1e-12);
        let g = Graph::new();
        let x = g.constant(Tensor::uniform(&[3, 4], -2.0, 7.0, &mut Rng::new(4)));
        let y = layer_norm(&g, &store, &p, x, NormMode::PerRow).unwrap().tensor();
        for row in y.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn feed_forward_cases() {
        let mut store = ParameterStore::new(0);
        let p = FeedForwardParams::init(&mut store, "ff", 3, 3, &mut Rng::new(0)).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::uniform(&[5, 3], 0.0, 2.0, &mut Rng::new(1)));
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let y = feed_forward(&g, &store, &p, x).unwrap();
        assert!(y.tensor().data().iter().all(|&v| v == 0.0));
        store
            .get_mut(&p.w1)
            .unwrap()
            .data_mut()
            .copy_from_slice(Tensor::eye(3).data());
        store
            .get_mut(&p.w2)
            .unwrap()
            .data_mut()
            .copy_from_slice(Tensor::eye(3).data());
        let g = Graph::new();
        let x = g.constant(Tensor::uniform(&[5, 3], 0.0, 2.0, &mut Rng::new(1)));
        let y = feed_forward(&g, &store, &p, x).unwrap();
        assert_eq!(y.tensor().data(), x.tensor().data());
    }

    #[test]
    fn feed_forward_preserves_shape() {
        let mut store = ParameterStore::new(0);
        let p = FeedForwardParams::init(&mut store, "ff", 8, 32, &mut Rng::new(0)).unwrap();
        let g = Graph::new();
        let x = g.constant(Tensor::uniform(&[5, 8], -1.0, 1.0, &mut Rng::new(1)));
        assert_eq!(feed_forward(&g, &store, &p, x).unwrap().shape(), vec![5, 8]);
    }

    #[test]
    fn tiny_model_shapes() {
        let cfg = tiny_config();
        assert_eq!(cfg.encoder_patches().unwrap(), 8);
        assert_eq!(cfg.decoder_len(), 16);
        let m = PatchformerModel::new(cfg, 0).unwrap();
        let x = Tensor::uniform(&[16, 2], -1.0, 1.0, &mut Rng::new(2));
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[8, 2]);
        assert!(m.forward(&Tensor::zeros(&[15, 2])).is_err());
        assert!(m.forward(&Tensor::zeros(&[16, 3])).is_err());
    }

    #[test]
    fn reference_patch_counts() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.encoder_patches().unwrap(), 12);
        assert_eq!(cfg.decoder_len(), 144);
        assert_eq!(cfg.decoder_patches().unwrap(), 18);
        assert_eq!(cfg.patch_config().unwrap().max_patches, 18);
        let odd = ModelConfig {
            seq_len: 97,
            ..ModelConfig::default()
        };
        assert_eq!(odd.label_len(), 48);
    }

    #[test]
    fn same_seed_same_params() {
        let a = PatchformerModel::new(tiny_config(), 11).unwrap();
        let b = PatchformerModel::new(tiny_config(), 11).unwrap();
        let c = PatchformerModel::new(tiny_config(), 12).unwrap();
        assert!(a.params().bit_eq(b.params()));
        assert!(!a.params().bit_eq(c.params()));
    }

    #[test]
    fn decoder_owns_three_norms() {
        let m = PatchformerModel::new(tiny_config(), 0).unwrap();
        let d = &m.decoder_layers()[0];
        let norms = [&d.norm1.gamma, &d.norm2.gamma, &d.norm3.gamma];
        assert!(norms.iter().all(|n| m.params().get(n).is_some()));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ModelConfig {
                e_layers: 0,
                ..tiny_config()
            },
            ModelConfig {
                stride: 5,
                ..tiny_config()
            },
            ModelConfig {
                n_heads: 3,
                ..tiny_config()
            },
            ModelConfig {
                dropout: 1.0,
                ..tiny_config()
            },
            ModelConfig {
                seq_len: 3,
                ..tiny_config()
            },
        ];
        for cfg in bad {
            assert!(PatchformerModel::new(cfg.clone(), 0).is_err(), "{cfg:?}");
        }
    }
}
