//! The toy multimodal transformer: frozen random base weights, trainable
//! low-rank attention adapters, a trainable visual projection, per-linear
//! bias/scale deltas for the second tuning stage, and hand-written
//! backpropagation in f64 throughout.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::mat::Mat;
use crate::num;
use crate::raster::GrayImage;
use crate::rng::Rng;

use super::encoder::{
    concat_channels, concat_scales, encode_image_multiscale, BackboneTag, EncoderStandIn,
};
use super::tokenizer::{Tokenizer, EOS, SEP, VOCAB_SIZE};
use super::FusionError;

const RMS_EPS: f64 = 1e-6;

/// Model hyperparameters. Everything is seeded; two models built from equal
/// configs are bitwise identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub total_layers: usize,
    /// How many of the topmost layers carry low-rank adapters.
    pub lora_top_layers: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Pyramid scale counts for the two stand-in backbones.
    pub scales_a: usize,
    pub scales_b: usize,
    pub patch_size: u32,
    pub enc_dim_a: usize,
    pub enc_dim_b: usize,
    pub mlp_hidden: usize,
    pub max_answer_len: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            model_dim: 64,
            heads: 4,
            total_layers: 4,
            lora_top_layers: 3,
            lora_rank: 4,
            lora_alpha: 8.0,
            scales_a: 2,
            scales_b: 2,
            patch_size: 8,
            enc_dim_a: 32,
            enc_dim_b: 32,
            mlp_hidden: 256,
            max_answer_len: 48,
            max_seq_len: 192,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(FusionError::ShapeMismatch(String::from(
                "model_dim must be a positive multiple of heads",
            )));
        }
        if self.lora_top_layers > self.total_layers {
            return Err(FusionError::ShapeMismatch(String::from(
                "lora_top_layers exceeds total_layers",
            )));
        }
        if self.total_layers == 0
            || self.lora_rank == 0
            || self.scales_a == 0
            || self.scales_b == 0
            || self.patch_size == 0
            || self.mlp_hidden == 0
            || self.max_answer_len == 0
            || self.max_seq_len == 0
        {
            return Err(FusionError::ShapeMismatch(String::from(
                "all size parameters must be positive",
            )));
        }
        Ok(())
    }
}

/// What a parameter tensor is, for stage scoping and reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamClass {
    LoraDown,
    LoraUp,
    Projection,
    DeltaBias,
    DeltaScale,
    TokenEmbedding,
    PosEmbedding,
}

/// Which parameters a training pass may update. `Full` exists for gradient
/// checking; the two training stages never touch embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainScope {
    /// Low-rank adapters and the visual projection.
    Alignment,
    /// Alignment set plus every linear's bias and scale deltas.
    ShipAdaption,
    /// Everything trainable, including embeddings.
    Full,
}

impl TrainScope {
    pub fn includes(&self, class: ParamClass) -> bool {
        use ParamClass::*;
        match self {
            TrainScope::Alignment => matches!(class, LoraDown | LoraUp | Projection),
            TrainScope::ShipAdaption => matches!(
                class,
                LoraDown | LoraUp | Projection | DeltaBias | DeltaScale
            ),
            TrainScope::Full => true,
        }
    }
}

/// A mutable view of one trainable tensor and its gradient buffer.
pub struct TensorMut<'a> {
    pub name: String,
    pub class: ParamClass,
    pub value: &'a mut Mat,
    pub grad: &'a mut Mat,
}

/// Standalone low-rank adapted linear map: frozen base plus
/// `(alpha / r) * up * down`. The up factor starts at zero, so a fresh
/// adapter computes exactly the base map.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Mat,
    pub down: Mat,
    pub up: Mat,
    pub alpha: f64,
}

impl LoraLinear {
    pub fn new(base: Mat, rank: usize, alpha: f64, rng: &mut Rng) -> Self {
        let (out_dim, in_dim) = (base.rows(), base.cols());
        let down = Mat::randn(rank, in_dim, 1.0 / num::sqrt(in_dim as f64), rng);
        let up = Mat::zeros(out_dim, rank);
        LoraLinear {
            base,
            down,
            up,
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.down.rows()
    }

    pub fn effective_weight(&self) -> Mat {
        let mut w = self.base.clone();
        let delta = self.up.matmul(&self.down);
        w.add_assign_scaled(&delta, self.alpha / self.rank() as f64);
        w
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.matmul_transb(&self.effective_weight())
    }
}

/// Standalone bias/scale-tuned linear map:
/// `f(x) = delta_scale ⊙ (W x + delta_bias)`.
#[derive(Clone, Debug)]
pub struct BiasScaleLinear {
    pub base: Mat,
    pub delta_bias: Mat,  // 1 x out
    pub delta_scale: Mat, // 1 x out
}

impl BiasScaleLinear {
    /// Identity configuration: zero bias, unit scale.
    pub fn identity(base: Mat) -> Self {
        let out = base.rows();
        let mut scale = Mat::zeros(1, out);
        scale.fill(1.0);
        BiasScaleLinear {
            base,
            delta_bias: Mat::zeros(1, out),
            delta_scale: scale,
        }
    }

    /// Standard initialization: zero bias, Gaussian scale around 1.
    pub fn gaussian(base: Mat, std: f64, rng: &mut Rng) -> Self {
        let out = base.rows();
        let scale = Mat::from_fn(1, out, |_, _| 1.0 + rng.normal() * std);
        BiasScaleLinear {
            base,
            delta_bias: Mat::zeros(1, out),
            delta_scale: scale,
        }
    }
}

/// `delta_scale ⊙ (W x + delta_bias)` for a batch of row vectors.
pub fn bias_scale_forward(x: &Mat, layer: &BiasScaleLinear) -> Mat {
    let mut z = x.matmul_transb(&layer.base);
    for r in 0..z.rows() {
        let row = z.row_mut(r);
        for (o, v) in row.iter_mut().enumerate() {
            *v = layer.delta_scale.get(0, o) * (*v + layer.delta_bias.get(0, o));
        }
    }
    z
}

// One linear layer of the model: frozen base weight, optional low-rank
// factors (attention projections in the top layers), always-present
// bias/scale deltas that only act when the model is in stage-2 mode, and a
// trainable base only for the visual projection.
#[derive(Clone, Debug)]
struct LinearUnit {
    name: String,
    weight: Mat, // out x in
    weight_trainable: bool,
    lora: Option<LoraPair>,
    bias: Mat,  // 1 x out
    scale: Mat, // 1 x out
    g_weight: Option<Mat>,
    g_down: Option<Mat>,
    g_up: Option<Mat>,
    g_bias: Mat,
    g_scale: Mat,
}

#[derive(Clone, Debug)]
struct LoraPair {
    down: Mat, // r x in
    up: Mat,   // out x r
    alpha: f64,
}

struct LinearCache {
    x: Mat,
    /// Pre-bias/scale output, kept only when stage-2 mode is active.
    z: Option<Mat>,
    w_eff: Mat,
}

impl LinearUnit {
    fn new(
        name: &str,
        weight: Mat,
        weight_trainable: bool,
        lora: Option<LoraPair>,
        scale_std: f64,
        rng: &mut Rng,
    ) -> Self {
        let out = weight.rows();
        let scale = Mat::from_fn(1, out, |_, _| 1.0 + rng.normal() * scale_std);
        let g_weight = weight_trainable.then(|| Mat::zeros(weight.rows(), weight.cols()));
        let g_down = lora
            .as_ref()
            .map(|l| Mat::zeros(l.down.rows(), l.down.cols()));
        let g_up = lora.as_ref().map(|l| Mat::zeros(l.up.rows(), l.up.cols()));
        LinearUnit {
            name: name.to_string(),
            weight,
            weight_trainable,
            lora,
            bias: Mat::zeros(1, out),
            scale,
            g_weight,
            g_down,
            g_up,
            g_bias: Mat::zeros(1, out),
            g_scale: Mat::zeros(1, out),
        }
    }

    fn effective_weight(&self, adapted: bool) -> Mat {
        let mut w = self.weight.clone();
        if adapted {
            if let Some(l) = &self.lora {
                let delta = l.up.matmul(&l.down);
                w.add_assign_scaled(&delta, l.alpha / l.down.rows() as f64);
            }
        }
        w
    }

    fn forward(&self, x: &Mat, adapted: bool, bias_scale: bool) -> (Mat, LinearCache) {
        let w_eff = self.effective_weight(adapted);
        let z = x.matmul_transb(&w_eff);
        if !bias_scale {
            return (
                z,
                LinearCache {
                    x: x.clone(),
                    z: None,
                    w_eff,
                },
            );
        }
        let mut y = z.clone();
        for r in 0..y.rows() {
            let row = y.row_mut(r);
            for (o, v) in row.iter_mut().enumerate() {
                *v = self.scale.get(0, o) * (*v + self.bias.get(0, o));
            }
        }
        (
            y,
            LinearCache {
                x: x.clone(),
                z: Some(z),
                w_eff,
            },
        )
    }

    fn backward(&mut self, cache: &LinearCache, dy: &Mat) -> Mat {
        let dz = match &cache.z {
            Some(z) => {
                let mut dz = dy.clone();
                for r in 0..dz.rows() {
                    for o in 0..dz.cols() {
                        let g = dy.get(r, o);
                        self.g_scale
                            .set(0, o, self.g_scale.get(0, o) + g * (z.get(r, o) + self.bias.get(0, o)));
                        let dzv = g * self.scale.get(0, o);
                        dz.set(r, o, dzv);
                        self.g_bias.set(0, o, self.g_bias.get(0, o) + dzv);
                    }
                }
                dz
            }
            None => dy.clone(),
        };
        // full dW = dz^T . x is only materialized for a trainable base;
        // low-rank factor gradients contract through the thin side instead
        if let Some(g) = &mut self.g_weight {
            g.add_assign(&dz.transa_matmul(&cache.x));
        }
        if let Some(l) = &self.lora {
            let s = l.alpha / l.down.rows() as f64;
            if let Some(gu) = &mut self.g_up {
                // s * dz^T . (x . down^T)
                let t = cache.x.matmul_transb(&l.down);
                gu.add_assign_scaled(&dz.transa_matmul(&t), s);
            }
            if let Some(gd) = &mut self.g_down {
                // s * (dz . up)^T . x
                let t = dz.matmul(&l.up);
                gd.add_assign_scaled(&t.transa_matmul(&cache.x), s);
            }
        }
        dz.matmul(&cache.w_eff)
    }

    fn zero_grads(&mut self) {
        if let Some(g) = &mut self.g_weight {
            g.fill(0.0);
        }
        if let Some(g) = &mut self.g_down {
            g.fill(0.0);
        }
        if let Some(g) = &mut self.g_up {
            g.fill(0.0);
        }
        self.g_bias.fill(0.0);
        self.g_scale.fill(0.0);
    }

    fn collect<'a>(&'a self, out: &mut Vec<(String, &'a Mat)>) {
        out.push((format!("{}.weight", self.name), &self.weight));
        if let Some(l) = &self.lora {
            out.push((format!("{}.lora_down", self.name), &l.down));
            out.push((format!("{}.lora_up", self.name), &l.up));
        }
        out.push((format!("{}.delta_bias", self.name), &self.bias));
        out.push((format!("{}.delta_scale", self.name), &self.scale));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Mat)>) {
        out.push((format!("{}.weight", self.name), &mut self.weight));
        if let Some(l) = &mut self.lora {
            out.push((format!("{}.lora_down", self.name), &mut l.down));
            out.push((format!("{}.lora_up", self.name), &mut l.up));
        }
        out.push((format!("{}.delta_bias", self.name), &mut self.bias));
        out.push((format!("{}.delta_scale", self.name), &mut self.scale));
    }

    fn collect_trainable<'a>(&'a mut self, out: &mut Vec<TensorMut<'a>>) {
        if self.weight_trainable {
            if let Some(g) = &mut self.g_weight {
                out.push(TensorMut {
                    name: format!("{}.weight", self.name),
                    class: ParamClass::Projection,
                    value: &mut self.weight,
                    grad: g,
                });
            }
        }
        if let Some(l) = &mut self.lora {
            if let (Some(gd), Some(gu)) = (&mut self.g_down, &mut self.g_up) {
                out.push(TensorMut {
                    name: format!("{}.lora_down", self.name),
                    class: ParamClass::LoraDown,
                    value: &mut l.down,
                    grad: gd,
                });
                out.push(TensorMut {
                    name: format!("{}.lora_up", self.name),
                    class: ParamClass::LoraUp,
                    value: &mut l.up,
                    grad: gu,
                });
            }
        }
        out.push(TensorMut {
            name: format!("{}.delta_bias", self.name),
            class: ParamClass::DeltaBias,
            value: &mut self.bias,
            grad: &mut self.g_bias,
        });
        out.push(TensorMut {
            name: format!("{}.delta_scale", self.name),
            class: ParamClass::DeltaScale,
            value: &mut self.scale,
            grad: &mut self.g_scale,
        });
    }

    fn param_count(&self) -> usize {
        let mut n = self.weight.rows() * self.weight.cols()
            + 2 * self.bias.cols();
        if let Some(l) = &self.lora {
            n += l.down.rows() * l.down.cols() + l.up.rows() * l.up.cols();
        }
        n
    }

    fn trainable_count(&self, scope: TrainScope) -> usize {
        let mut n = 0;
        if self.weight_trainable && scope.includes(ParamClass::Projection) {
            n += self.weight.rows() * self.weight.cols();
        }
        if let Some(l) = &self.lora {
            if scope.includes(ParamClass::LoraDown) {
                n += l.down.rows() * l.down.cols() + l.up.rows() * l.up.cols();
            }
        }
        if scope.includes(ParamClass::DeltaBias) {
            n += 2 * self.bias.cols();
        }
        n
    }
}

#[derive(Clone, Debug)]
struct Block {
    wq: LinearUnit,
    wk: LinearUnit,
    wv: LinearUnit,
    wo: LinearUnit,
    w1: LinearUnit,
    w2: LinearUnit,
}

struct NormCache {
    x: Mat,
    inv_rms: Vec<f64>,
}

fn rmsnorm(x: &Mat) -> (Mat, NormCache) {
    let mut y = x.clone();
    let mut inv_rms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / num::sqrt(ms + RMS_EPS);
        inv_rms.push(inv);
        for v in y.row_mut(r) {
            *v *= inv;
        }
    }
    (
        y,
        NormCache {
            x: x.clone(),
            inv_rms,
        },
    )
}

fn rmsnorm_backward(cache: &NormCache, dy: &Mat) -> Mat {
    let mut dx = Mat::zeros(dy.rows(), dy.cols());
    let d = dy.cols() as f64;
    for r in 0..dy.rows() {
        let inv = cache.inv_rms[r];
        let xr = cache.x.row(r);
        let dyr = dy.row(r);
        let dot: f64 = xr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        let k = dot * inv * inv * inv / d;
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = dyr[c] * inv - xr[c] * k;
        }
    }
    dx
}

struct AttnCache {
    norm: NormCache,
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    o_cache: LinearCache,
    q: Mat,
    k: Mat,
    v: Mat,
    att: Vec<Mat>, // per head, T x T (row-causal)
}

struct MlpCache {
    norm: NormCache,
    w1_cache: LinearCache,
    u: Mat,
    w2_cache: LinearCache,
}

struct BlockCache {
    attn: AttnCache,
    mlp: MlpCache,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + num::exp(-v))
}

/// A prepared sample: fused visual features plus the language id stream.
pub struct Prepared {
    fused: Mat, // n_visual x (enc_dim_a + enc_dim_b)
    lang_ids: Vec<usize>,
    /// Index of SEP within `lang_ids`.
    sep_index: usize,
    /// Target ids (answer tokens then EOS); empty when no answer given.
    targets: Vec<usize>,
    pub n_visual: usize,
}

impl Prepared {
    pub fn seq_len(&self) -> usize {
        self.n_visual + self.lang_ids.len()
    }

    /// Positions in the full sequence whose logits are supervised, paired
    /// with their target ids.
    pub fn supervised(&self) -> Vec<(usize, usize)> {
        let sep_pos = self.n_visual + self.sep_index;
        self.targets
            .iter()
            .enumerate()
            .map(|(k, t)| (sep_pos + k, *t))
            .collect()
    }
}

struct ForwardCache {
    proj_cache: LinearCache,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    head_cache: LinearCache,
    x_rows: usize,
}

/// The model. Construction is fully determined by the config (including its
/// seed); see [`ToyModelConfig`].
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub tokenizer: Tokenizer,
    enc_a: EncoderStandIn,
    enc_b: EncoderStandIn,
    token_embed: Mat,
    pos_embed: Mat,
    g_token_embed: Mat,
    g_pos_embed: Mat,
    projection: LinearUnit,
    blocks: Vec<Block>,
    head: LinearUnit,
    bias_scale_active: bool,
}

const SCALE_INIT_STD: f64 = 0.02;

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self, FusionError> {
        config.validate()?;
        let d = config.model_dim;
        let seed = config.seed;
        let enc_a = EncoderStandIn::new(seed, "backbone-a", config.patch_size, config.enc_dim_a);
        let enc_b = EncoderStandIn::new(seed, "backbone-b", config.patch_size, config.enc_dim_b);

        // embeddings carry the token/position identity through the frozen
        // random blocks, so they get the dominant share of the residual
        // stream's norm; block output projections are scaled down by
        // 1 / (2 * layers) to keep their accumulated contribution
        // comparable to a single embedding
        let embed_std = 1.0 / num::sqrt(d as f64);
        let residual_scale = 1.0 / (2.0 * config.total_layers as f64);
        let mut rng = Rng::from_label(seed, "token-embed");
        let token_embed = Mat::randn(VOCAB_SIZE, d, embed_std, &mut rng);
        let mut rng = Rng::from_label(seed, "pos-embed");
        let pos_embed = Mat::randn(config.max_seq_len, d, embed_std, &mut rng);

        let fused_dim = config.enc_dim_a + config.enc_dim_b;
        let mut rng = Rng::from_label(seed, "projection");
        let proj_w = Mat::randn(d, fused_dim, 1.0 / num::sqrt(fused_dim as f64), &mut rng);
        let projection = LinearUnit::new("projection", proj_w, true, None, SCALE_INIT_STD, &mut rng);

        let mut blocks = Vec::with_capacity(config.total_layers);
        let first_adapted = config.total_layers - config.lora_top_layers;
        for layer in 0..config.total_layers {
            let adapted = layer >= first_adapted;
            let mk_attn = |tag: &str, rng_seed_label: String, adapted: bool, std: f64| -> LinearUnit {
                let mut rng = Rng::from_label(seed, &rng_seed_label);
                let w = Mat::randn(d, d, std, &mut rng);
                let lora = adapted.then(|| {
                    let mut lr = Rng::from_label(seed, &format!("{rng_seed_label}.lora"));
                    LoraPair {
                        down: Mat::randn(
                            config.lora_rank,
                            d,
                            1.0 / num::sqrt(d as f64),
                            &mut lr,
                        ),
                        up: Mat::zeros(d, config.lora_rank),
                        alpha: config.lora_alpha,
                    }
                });
                LinearUnit::new(
                    &format!("block{layer}.{tag}"),
                    w,
                    false,
                    lora,
                    SCALE_INIT_STD,
                    &mut rng,
                )
            };
            let base_std = 1.0 / num::sqrt(d as f64);
            let wq = mk_attn("wq", format!("block{layer}.wq"), adapted, base_std);
            let wk = mk_attn("wk", format!("block{layer}.wk"), adapted, base_std);
            let wv = mk_attn("wv", format!("block{layer}.wv"), adapted, base_std);
            let wo = mk_attn(
                "wo",
                format!("block{layer}.wo"),
                adapted,
                base_std * residual_scale,
            );

            let mut rng = Rng::from_label(seed, &format!("block{layer}.w1"));
            let w1 = LinearUnit::new(
                &format!("block{layer}.w1"),
                Mat::randn(config.mlp_hidden, d, base_std, &mut rng),
                false,
                None,
                SCALE_INIT_STD,
                &mut rng,
            );
            let mut rng = Rng::from_label(seed, &format!("block{layer}.w2"));
            let w2 = LinearUnit::new(
                &format!("block{layer}.w2"),
                Mat::randn(
                    d,
                    config.mlp_hidden,
                    residual_scale / num::sqrt(config.mlp_hidden as f64),
                    &mut rng,
                ),
                false,
                None,
                SCALE_INIT_STD,
                &mut rng,
            );
            blocks.push(Block {
                wq,
                wk,
                wv,
                wo,
                w1,
                w2,
            });
        }

        let mut rng = Rng::from_label(seed, "head");
        let head = LinearUnit::new(
            "head",
            Mat::randn(VOCAB_SIZE, d, 0.02, &mut rng),
            false,
            None,
            SCALE_INIT_STD,
            &mut rng,
        );

        Ok(ToyModel {
            config,
            tokenizer: Tokenizer,
            enc_a,
            enc_b,
            token_embed,
            pos_embed,
            g_token_embed: Mat::zeros(VOCAB_SIZE, d),
            g_pos_embed: Mat::zeros(0, 0),
            projection,
            blocks,
            head,
            bias_scale_active: false,
        })
        .map(|mut m| {
            m.g_pos_embed = Mat::zeros(m.pos_embed.rows(), m.pos_embed.cols());
            m
        })
    }

    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    /// Stage-2 mode: when active, every linear applies its bias/scale
    /// deltas around the (possibly adapted) base map.
    pub fn set_bias_scale_active(&mut self, active: bool) {
        self.bias_scale_active = active;
    }

    pub fn bias_scale_active(&self) -> bool {
        self.bias_scale_active
    }

    /// Encodes the image through both frozen backbones and assembles the
    /// language id stream. `answer` is required for training/loss, absent
    /// for decoding prompts.
    pub fn prepare(
        &self,
        image: &GrayImage,
        instruction: &str,
        answer: Option<&str>,
    ) -> Result<Prepared, FusionError> {
        let fa = encode_image_multiscale(image, &self.enc_a, self.config.scales_a, BackboneTag::A);
        let fb = encode_image_multiscale(image, &self.enc_b, self.config.scales_b, BackboneTag::B);
        let f_v = concat_scales(&fa)?;
        let g_v = concat_scales(&fb)?;
        let fused = concat_channels(&f_v, &g_v)?;
        let n_visual = fused.rows();

        let mut lang_ids = self.tokenizer.encode(instruction);
        if lang_ids.is_empty() {
            return Err(FusionError::ShapeMismatch(String::from(
                "empty instruction",
            )));
        }
        let sep_index = lang_ids.len();
        lang_ids.push(SEP);
        let mut targets = Vec::new();
        if let Some(ans) = answer {
            let mut ans_ids = self.tokenizer.encode(ans);
            ans_ids.truncate(self.config.max_answer_len);
            targets = ans_ids.clone();
            targets.push(EOS);
            lang_ids.extend_from_slice(&ans_ids);
            lang_ids.push(EOS);
        }
        let seq = n_visual + lang_ids.len();
        if seq > self.config.max_seq_len {
            return Err(FusionError::SequenceTooLong {
                len: seq,
                max: self.config.max_seq_len,
            });
        }
        Ok(Prepared {
            fused,
            lang_ids,
            sep_index,
            targets,
            n_visual,
        })
    }

    fn embed_sequence(&self, prepared: &Prepared, proj_cache: &mut Option<LinearCache>) -> Mat {
        let d = self.config.model_dim;
        let t = prepared.seq_len();
        let (p_v, cache) =
            self.projection
                .forward(&prepared.fused, true, self.bias_scale_active);
        *proj_cache = Some(cache);
        let mut x = Mat::zeros(t, d);
        for r in 0..prepared.n_visual {
            let dst = x.row_mut(r);
            dst.copy_from_slice(p_v.row(r));
            for (c, v) in dst.iter_mut().enumerate() {
                *v += self.pos_embed.get(r, c);
            }
        }
        for (j, &id) in prepared.lang_ids.iter().enumerate() {
            let r = prepared.n_visual + j;
            let dst = x.row_mut(r);
            dst.copy_from_slice(self.token_embed.row(id));
            for (c, v) in dst.iter_mut().enumerate() {
                *v += self.pos_embed.get(r, c);
            }
        }
        x
    }

    fn attention(&self, block: &Block, x: &Mat, adapted: bool) -> (Mat, AttnCache) {
        let bs = self.bias_scale_active;
        let (xn, norm) = rmsnorm(x);
        let (q, q_cache) = block.wq.forward(&xn, adapted, bs);
        let (k, k_cache) = block.wk.forward(&xn, adapted, bs);
        let (v, v_cache) = block.wv.forward(&xn, adapted, bs);
        let t = x.rows();
        let h = self.config.heads;
        let dk = self.config.head_dim();
        let inv_sqrt = 1.0 / num::sqrt(dk as f64);

        let mut ctx = Mat::zeros(t, self.config.model_dim);
        let mut att_all = Vec::with_capacity(h);
        for head in 0..h {
            let off = head * dk;
            let mut att = Mat::zeros(t, t);
            for i in 0..t {
                // causal: keys 0..=i
                let qi = &q.row(i)[off..off + dk];
                let mut max_s = f64::NEG_INFINITY;
                let mut scores = alloc::vec![0.0f64; i + 1];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dk];
                    *s = crate::mat::dot(qi, kj) * inv_sqrt;
                    max_s = max_s.max(*s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = num::exp(*s - max_s);
                    denom += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    att.set(i, j, s / denom);
                }
                let ctx_row = ctx.row_mut(i);
                for (j, s) in scores.iter().enumerate() {
                    let w = s / denom;
                    let vj = &v.row(j)[off..off + dk];
                    for (c, vv) in vj.iter().enumerate() {
                        ctx_row[off + c] += w * vv;
                    }
                }
            }
            att_all.push(att);
        }
        let (out, o_cache) = block.wo.forward(&ctx, adapted, bs);
        (
            out,
            AttnCache {
                norm,
                q_cache,
                k_cache,
                v_cache,
                o_cache,
                q,
                k,
                v,
                att: att_all,
            },
        )
    }

    fn attention_backward(&self, block: &mut Block, cache: &AttnCache, dout: &Mat) -> Mat {
        let t = dout.rows();
        let h = self.config.heads;
        let dk = self.config.head_dim();
        let inv_sqrt = 1.0 / num::sqrt(dk as f64);

        // reconstruct ctx gradient through wo
        let dctx = block.wo.backward(&cache.o_cache, dout);

        let mut dq = Mat::zeros(t, self.config.model_dim);
        let mut dkm = Mat::zeros(t, self.config.model_dim);
        let mut dv = Mat::zeros(t, self.config.model_dim);

        for head in 0..h {
            let off = head * dk;
            let att = &cache.att[head];
            for i in 0..t {
                let dctx_i = &dctx.row(i)[off..off + dk];
                // datt over keys 0..=i, and dv accumulation
                let mut datt = alloc::vec![0.0f64; i + 1];
                for (j, da) in datt.iter_mut().enumerate() {
                    let vj = &cache.v.row(j)[off..off + dk];
                    *da = crate::mat::dot(dctx_i, vj);
                    let w = att.get(i, j);
                    let dv_j = &mut dv.row_mut(j)[off..off + dk];
                    for (c, g) in dctx_i.iter().enumerate() {
                        dv_j[c] += w * g;
                    }
                }
                // softmax backward
                let mut dot = 0.0;
                for (j, da) in datt.iter().enumerate() {
                    dot += da * att.get(i, j);
                }
                for (j, da) in datt.iter().enumerate() {
                    let ds = att.get(i, j) * (da - dot) * inv_sqrt;
                    let kj = &cache.k.row(j)[off..off + dk];
                    let qi = &cache.q.row(i)[off..off + dk];
                    let dq_i = &mut dq.row_mut(i)[off..off + dk];
                    for (c, kv) in kj.iter().enumerate() {
                        dq_i[c] += ds * kv;
                    }
                    let dk_j = &mut dkm.row_mut(j)[off..off + dk];
                    for (c, qv) in qi.iter().enumerate() {
                        dk_j[c] += ds * qv;
                    }
                }
            }
        }

        let mut dxn = block.wq.backward(&cache.q_cache, &dq);
        dxn.add_assign(&block.wk.backward(&cache.k_cache, &dkm));
        dxn.add_assign(&block.wv.backward(&cache.v_cache, &dv));
        rmsnorm_backward(&cache.norm, &dxn)
    }

    fn mlp(&self, block: &Block, x: &Mat, adapted: bool) -> (Mat, MlpCache) {
        let bs = self.bias_scale_active;
        let (xn, norm) = rmsnorm(x);
        let (u, w1_cache) = block.w1.forward(&xn, adapted, bs);
        let mut s = u.clone();
        for v in s.data_mut() {
            *v *= sigmoid(*v);
        }
        let (y, w2_cache) = block.w2.forward(&s, adapted, bs);
        (
            y,
            MlpCache {
                norm,
                w1_cache,
                u,
                w2_cache,
            },
        )
    }

    fn mlp_backward(&self, block: &mut Block, cache: &MlpCache, dy: &Mat) -> Mat {
        let ds = block.w2.backward(&cache.w2_cache, dy);
        let mut du = ds;
        for (g, u) in du.data_mut().iter_mut().zip(cache.u.data()) {
            let sg = sigmoid(*u);
            *g *= sg * (1.0 + u * (1.0 - sg));
        }
        let dxn = block.w1.backward(&cache.w1_cache, &du);
        rmsnorm_backward(&cache.norm, &dxn)
    }

    fn forward_impl(&self, prepared: &Prepared, adapted: bool) -> (Mat, ForwardCache) {
        let first_adapted = self.config.total_layers - self.config.lora_top_layers;
        let mut proj_cache = None;
        let mut x = self.embed_sequence(prepared, &mut proj_cache);
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (layer, block) in self.blocks.iter().enumerate() {
            let layer_adapted = adapted && layer >= first_adapted;
            let (attn_out, attn_cache) = self.attention(block, &x, layer_adapted);
            x.add_assign(&attn_out);
            let (mlp_out, mlp_cache) = self.mlp(block, &x, layer_adapted);
            x.add_assign(&mlp_out);
            block_caches.push(BlockCache {
                attn: attn_cache,
                mlp: mlp_cache,
            });
        }
        let (xf, final_norm) = rmsnorm(&x);
        let (logits, head_cache) = self.head.forward(&xf, adapted, self.bias_scale_active);
        (
            logits,
            ForwardCache {
                proj_cache: proj_cache.expect("projection ran"),
                blocks: block_caches,
                final_norm,
                head_cache,
                x_rows: x.rows(),
            },
        )
    }

    /// Full adapted forward pass: logits for every sequence position.
    pub fn forward(
        &self,
        image: &GrayImage,
        instruction: &str,
        answer: Option<&str>,
    ) -> Result<Mat, FusionError> {
        let prepared = self.prepare(image, instruction, answer)?;
        Ok(self.forward_impl(&prepared, true).0)
    }

    /// Forward pass ignoring every low-rank delta (the unadapted base).
    pub fn forward_unadapted(
        &self,
        image: &GrayImage,
        instruction: &str,
        answer: Option<&str>,
    ) -> Result<Mat, FusionError> {
        let prepared = self.prepare(image, instruction, answer)?;
        Ok(self.forward_impl(&prepared, false).0)
    }

    /// Logits for an already-prepared sample.
    pub fn forward_prepared(&self, prepared: &Prepared) -> Mat {
        self.forward_impl(prepared, true).0
    }

    fn backward_impl(&mut self, prepared: &Prepared, cache: &ForwardCache, dlogits: &Mat) {
        // split borrow: blocks vs the rest
        let dxf = self.head.backward(&cache.head_cache, dlogits);
        let mut dx = rmsnorm_backward(&cache.final_norm, &dxf);
        debug_assert_eq!(dx.rows(), cache.x_rows);

        let first_adapted = self.config.total_layers - self.config.lora_top_layers;
        let _ = first_adapted;
        // iterate blocks in reverse; attention/mlp backward need &self for
        // config only, so temporarily move blocks out
        let mut blocks = core::mem::take(&mut self.blocks);
        for (layer, block) in blocks.iter_mut().enumerate().rev() {
            let bcache = &cache.blocks[layer];
            let d_mlp_in = self.mlp_backward(block, &bcache.mlp, &dx);
            dx.add_assign(&d_mlp_in);
            let d_attn_in = self.attention_backward(block, &bcache.attn, &dx);
            dx.add_assign(&d_attn_in);
        }
        self.blocks = blocks;

        // embedding and visual-path gradients
        let n_v = prepared.n_visual;
        let mut d_pv = Mat::zeros(n_v, self.config.model_dim);
        for r in 0..n_v {
            d_pv.row_mut(r).copy_from_slice(dx.row(r));
            for (c, g) in dx.row(r).iter().enumerate() {
                self.g_pos_embed.set(r, c, self.g_pos_embed.get(r, c) + g);
            }
        }
        self.projection.backward(&cache.proj_cache, &d_pv);
        for (j, &id) in prepared.lang_ids.iter().enumerate() {
            let r = n_v + j;
            for (c, g) in dx.row(r).iter().enumerate() {
                self.g_token_embed
                    .set(id, c, self.g_token_embed.get(id, c) + g);
                self.g_pos_embed.set(r, c, self.g_pos_embed.get(r, c) + g);
            }
        }
    }

    /// Mean cross-entropy over the supervised (answer) positions of one
    /// prepared sample, without touching gradients.
    pub fn loss_prepared(&self, prepared: &Prepared) -> f64 {
        let (logits, _) = self.forward_impl(prepared, true);
        let (sum, count) = ce_sum(&logits, &prepared.supervised());
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Accumulates gradients for a batch; returns the mean cross-entropy
    /// per supervised token. Call [`ToyModel::zero_grads`] first.
    pub fn loss_and_grads(&mut self, batch: &[(&GrayImage, &str, &str)]) -> Result<f64, FusionError> {
        if batch.is_empty() {
            return Err(FusionError::EmptyBatch);
        }
        let mut prepared_all = Vec::with_capacity(batch.len());
        for (image, instruction, answer) in batch {
            prepared_all.push(self.prepare(image, instruction, Some(answer))?);
        }
        let total_tokens: usize = prepared_all.iter().map(|p| p.targets.len()).sum();
        if total_tokens == 0 {
            return Err(FusionError::EmptyBatch);
        }
        let mut total_loss = 0.0;
        for prepared in &prepared_all {
            let (logits, cache) = self.forward_impl(prepared, true);
            let supervised = prepared.supervised();
            let (sum, _) = ce_sum(&logits, &supervised);
            total_loss += sum;
            let dlogits = ce_backward(&logits, &supervised, 1.0 / total_tokens as f64);
            self.backward_impl(prepared, &cache, &dlogits);
        }
        Ok(total_loss / total_tokens as f64)
    }

    pub fn zero_grads(&mut self) {
        self.g_token_embed.fill(0.0);
        self.g_pos_embed.fill(0.0);
        self.projection.zero_grads();
        for b in &mut self.blocks {
            b.wq.zero_grads();
            b.wk.zero_grads();
            b.wv.zero_grads();
            b.wo.zero_grads();
            b.w1.zero_grads();
            b.w2.zero_grads();
        }
        self.head.zero_grads();
    }

    /// Every named tensor, frozen bases included (checkpoint order).
    pub fn named_tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = Vec::new();
        out.push((String::from("token_embed"), &self.token_embed));
        out.push((String::from("pos_embed"), &self.pos_embed));
        self.projection.collect(&mut out);
        for b in &self.blocks {
            b.wq.collect(&mut out);
            b.wk.collect(&mut out);
            b.wv.collect(&mut out);
            b.wo.collect(&mut out);
            b.w1.collect(&mut out);
            b.w2.collect(&mut out);
        }
        self.head.collect(&mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        out.push((String::from("token_embed"), &mut self.token_embed));
        out.push((String::from("pos_embed"), &mut self.pos_embed));
        self.projection.collect_mut(&mut out);
        for b in &mut self.blocks {
            b.wq.collect_mut(&mut out);
            b.wk.collect_mut(&mut out);
            b.wv.collect_mut(&mut out);
            b.wo.collect_mut(&mut out);
            b.w1.collect_mut(&mut out);
            b.w2.collect_mut(&mut out);
        }
        self.head.collect_mut(&mut out);
        out
    }

    /// Trainable tensors with their gradient buffers (all scopes; filter by
    /// [`TrainScope::includes`]).
    pub fn trainable_tensors(&mut self) -> Vec<TensorMut<'_>> {
        let mut out: Vec<TensorMut<'_>> = Vec::new();
        out.push(TensorMut {
            name: String::from("token_embed"),
            class: ParamClass::TokenEmbedding,
            value: &mut self.token_embed,
            grad: &mut self.g_token_embed,
        });
        out.push(TensorMut {
            name: String::from("pos_embed"),
            class: ParamClass::PosEmbedding,
            value: &mut self.pos_embed,
            grad: &mut self.g_pos_embed,
        });
        self.projection.collect_trainable(&mut out);
        for b in &mut self.blocks {
            b.wq.collect_trainable(&mut out);
            b.wk.collect_trainable(&mut out);
            b.wv.collect_trainable(&mut out);
            b.wo.collect_trainable(&mut out);
            b.w1.collect_trainable(&mut out);
            b.w2.collect_trainable(&mut out);
        }
        self.head.collect_trainable(&mut out);
        out
    }

    /// One layer's attention sublayer (pre-norm plus causal multi-head
    /// attention) applied to a token matrix. `adapted` selects whether the
    /// layer's low-rank deltas take part; a freshly initialized model
    /// computes identical outputs either way because the up-factors start
    /// at zero.
    pub fn attention_forward(
        &self,
        tokens: &Mat,
        layer: usize,
        adapted: bool,
    ) -> Result<Mat, FusionError> {
        let block = self.blocks.get(layer).ok_or_else(|| {
            FusionError::ShapeMismatch(format!(
                "layer {layer} out of range (model has {})",
                self.blocks.len()
            ))
        })?;
        if tokens.cols() != self.config.model_dim {
            return Err(FusionError::ShapeMismatch(format!(
                "token dim {} does not match model dim {}",
                tokens.cols(),
                self.config.model_dim
            )));
        }
        let (out, _) = self.attention(block, tokens, adapted);
        Ok(out)
    }

    /// Per-row attention sums across every layer and head, for tests that
    /// verify softmax normalization.
    #[cfg(any(test, feature = "testkit"))]
    pub fn probe_attention_row_sums(
        &self,
        image: &GrayImage,
        instruction: &str,
    ) -> Result<Vec<f64>, FusionError> {
        let prepared = self.prepare(image, instruction, None)?;
        let mut proj_cache = None;
        let mut x = self.embed_sequence(&prepared, &mut proj_cache);
        let mut sums = Vec::new();
        for block in &self.blocks {
            let (attn_out, cache) = self.attention(block, &x, true);
            for att in &cache.att {
                for i in 0..att.rows() {
                    sums.push(att.row(i)[..=i].iter().sum());
                }
            }
            x.add_assign(&attn_out);
            let (mlp_out, _) = self.mlp(block, &x, true);
            x.add_assign(&mlp_out);
        }
        Ok(sums)
    }

    /// Total parameter count (frozen weights included).
    pub fn total_params(&self) -> usize {
        let mut n = self.token_embed.rows() * self.token_embed.cols()
            + self.pos_embed.rows() * self.pos_embed.cols();
        n += self.projection.param_count();
        for b in &self.blocks {
            n += b.wq.param_count()
                + b.wk.param_count()
                + b.wv.param_count()
                + b.wo.param_count()
                + b.w1.param_count()
                + b.w2.param_count();
        }
        n + self.head.param_count()
    }

    /// Parameters trainable under a scope.
    pub fn trainable_params(&self, scope: TrainScope) -> usize {
        let mut n = 0;
        if scope.includes(ParamClass::TokenEmbedding) {
            n += self.token_embed.rows() * self.token_embed.cols();
            n += self.pos_embed.rows() * self.pos_embed.cols();
        }
        n += self.projection.trainable_count(scope);
        for b in &self.blocks {
            n += b.wq.trainable_count(scope)
                + b.wk.trainable_count(scope)
                + b.wv.trainable_count(scope)
                + b.wo.trainable_count(scope)
                + b.w1.trainable_count(scope)
                + b.w2.trainable_count(scope);
        }
        n + self.head.trainable_count(scope)
    }
}

fn ce_sum(logits: &Mat, supervised: &[(usize, usize)]) -> (f64, usize) {
    let mut sum = 0.0;
    for &(pos, target) in supervised {
        let row = logits.row(pos);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + num::ln(row.iter().map(|v| num::exp(v - m)).sum::<f64>());
        sum += lse - row[target];
    }
    (sum, supervised.len())
}

fn ce_backward(logits: &Mat, supervised: &[(usize, usize)], weight: f64) -> Mat {
    let mut d = Mat::zeros(logits.rows(), logits.cols());
    for &(pos, target) in supervised {
        let row = logits.row(pos);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| num::exp(v - m)).sum();
        let drow = d.row_mut(pos);
        for (c, v) in row.iter().enumerate() {
            drow[c] = num::exp(v - m) / denom * weight;
        }
        drow[target] -= weight;
    }
    d
}

/// Concatenation order of Eq-style multimodal assembly, exposed separately
/// for its contract tests: visual tokens first, then language tokens.
pub struct MultiModalSequence {
    pub tokens: Mat,
    pub n_visual: usize,
    pub n_language: usize,
}

/// Stacks visual tokens above language tokens (both already at model dim).
pub fn assemble_multimodal(p_v: &Mat, p_l: &Mat) -> Result<MultiModalSequence, FusionError> {
    if p_l.rows() == 0 {
        return Err(FusionError::ShapeMismatch(String::from(
            "language token set is empty",
        )));
    }
    if p_v.cols() != p_l.cols() {
        return Err(FusionError::ShapeMismatch(format!(
            "dim mismatch: visual {} vs language {}",
            p_v.cols(),
            p_l.cols()
        )));
    }
    let mut tokens = Mat::zeros(p_v.rows() + p_l.rows(), p_v.cols());
    for r in 0..p_v.rows() {
        tokens.row_mut(r).copy_from_slice(p_v.row(r));
    }
    for r in 0..p_l.rows() {
        tokens.row_mut(p_v.rows() + r).copy_from_slice(p_l.row(r));
    }
    Ok(MultiModalSequence {
        tokens,
        n_visual: p_v.rows(),
        n_language: p_l.rows(),
    })
}
