//! The multiview multimodal transformer.
//!
//! Each view tokenizes its modality with `t×16×16` tubelets, adds a learned
//! position embedding and prepends a per-view CLS vector at every temporal
//! index, giving `[T, S+1, d]`. Blocks attend only within a temporal index.
//! Adjacent views (written order) are fused once: before block
//! `⌊min(depth)/2⌋` the earlier view attends over the later view's full
//! token set. Per-index CLS outputs of every view are projected to the
//! global width, a global CLS is prepended and a global encoder runs over
//! the sequence; verb and noun heads read the global CLS.

mod checkpoint;
mod layers;
mod params;
mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{survival, Attention, Block, Builder, Depth, Linear, Norm, LN_EPS};
pub use params::{init_value, truncated_normal, ParamId, ParamKind, ParamStore};
pub use tokenizer::{adapt_rgb_kernel, extract_tubelets};

use mmvt_tensor::{Element, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model_spec::{token_geometry, view_image_dims, EncoderDims, Modality, ModelSpec, ViewSpec};
use crate::rng;

pub const DEFAULT_VERBS: usize = 97;
pub const DEFAULT_NOUNS: usize = 300;
pub const DEFAULT_DROPLAYER: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub spec: ModelSpec,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub droplayer: f64,
    /// Replaces every view's backbone dims (small test models).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_dims: Option<EncoderDims>,
    /// Replaces the global encoder dims.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_dims: Option<EncoderDims>,
    /// Block index before which each adjacent pair is fused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion_layer: Option<usize>,
}

impl ModelConfig {
    pub fn new(spec: ModelSpec, frames: usize, height: usize, width: usize) -> Self {
        Self {
            spec,
            frames,
            height,
            width,
            n_verbs: DEFAULT_VERBS,
            n_nouns: DEFAULT_NOUNS,
            droplayer: DEFAULT_DROPLAYER,
            view_dims: None,
            global_dims: None,
            fusion_layer: None,
        }
    }

    pub fn view_encoder_dims(&self, v: &ViewSpec) -> EncoderDims {
        self.view_dims.unwrap_or_else(|| v.backbone.dims())
    }

    pub fn global_encoder_dims(&self) -> EncoderDims {
        self.global_dims.unwrap_or_else(|| self.spec.global_encoder())
    }

    /// Fusion depth for the pair `(i, i+1)`.
    pub fn fusion_depth(&self, i: usize) -> usize {
        let a = self.view_encoder_dims(&self.spec.views[i]).layers;
        let b = self.view_encoder_dims(&self.spec.views[i + 1]).layers;
        self.fusion_layer.unwrap_or(a.min(b) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.spec.views.is_empty() {
            return Err(CoreError::Invalid("model spec has no views".into()));
        }
        if self.n_verbs < 1 || self.n_nouns < 1 {
            return Err(CoreError::Invalid("class counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.droplayer) {
            return Err(CoreError::Invalid(format!("droplayer rate {} outside [0, 1)", self.droplayer)));
        }
        for v in &self.spec.views {
            token_geometry(v, self.frames, self.height, self.width)?;
            self.view_encoder_dims(v).validate()?;
        }
        self.global_encoder_dims().validate()?;
        for i in 0..self.spec.views.len().saturating_sub(1) {
            let f = self.fusion_depth(i);
            let a = self.view_encoder_dims(&self.spec.views[i]).layers;
            let b = self.view_encoder_dims(&self.spec.views[i + 1]).layers;
            if f > a.min(b) {
                return Err(CoreError::Invalid(format!(
                    "fusion layer {f} exceeds depth {} of views {i}/{}",
                    a.min(b),
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ViewEncoder {
    pub spec: ViewSpec,
    pub dims: EncoderDims,
    pub temporal: usize,
    pub spatial: usize,
    pub embed: Linear,
    pub pos: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

/// Cross-view attention from `receiver` (queries) to `donor` (keys/values).
#[derive(Debug, Clone)]
pub struct Fusion {
    pub receiver: usize,
    pub donor: usize,
    pub layer: usize,
    pub receiver_norm: Norm,
    pub donor_norm: Norm,
    pub donor_proj: Linear,
    pub attn: Attention,
}

#[derive(Debug, Clone)]
pub struct GlobalEncoder {
    pub dims: EncoderDims,
    pub view_proj: Vec<Linear>,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

/// Per-modality clip tensors: RGB `[F,H,W,3]`, flow `[F,H,W,2]`,
/// spectrogram `[F,96,64]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputs<E> {
    pub rgb: Option<Tensor<E>>,
    pub flow: Option<Tensor<E>>,
    pub spec: Option<Tensor<E>>,
}

impl<E: Element> Default for ModelInputs<E> {
    fn default() -> Self {
        Self {
            rgb: None,
            flow: None,
            spec: None,
        }
    }
}

impl<E: Element> ModelInputs<E> {
    pub fn get(&self, m: Modality) -> Option<&Tensor<E>> {
        match m {
            Modality::Rgb => self.rgb.as_ref(),
            Modality::Flow => self.flow.as_ref(),
            Modality::Spectrogram => self.spec.as_ref(),
        }
    }

    pub fn cast<F: Element>(&self) -> ModelInputs<F> {
        ModelInputs {
            rgb: self.rgb.as_ref().map(Tensor::cast),
            flow: self.flow.as_ref().map(Tensor::cast),
            spec: self.spec.as_ref().map(Tensor::cast),
        }
    }
}

/// Logit variables, each `[1 × classes]`.
#[derive(Debug, Clone, Copy)]
pub struct Logits {
    pub verb: Var,
    pub noun: Var,
}

#[derive(Debug, Clone)]
pub struct MMModel<E> {
    pub config: ModelConfig,
    pub params: ParamStore<E>,
    pub views: Vec<ViewEncoder>,
    pub fusions: Vec<Fusion>,
    pub global: GlobalEncoder,
    pub verb_head: Linear,
    pub noun_head: Linear,
}

impl<E: Element> MMModel<E> {
    /// Lays out parameters, drawing each value from `init` in registration
    /// order.
    pub fn build(config: ModelConfig, init: &mut dyn FnMut(ParamKind, &[usize]) -> Tensor<E>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::default(),
            init,
        };
        let mut views = Vec::new();
        for (i, v) in config.spec.views.iter().enumerate() {
            let dims = config.view_encoder_dims(v);
            let (temporal, spatial) = token_geometry(v, config.frames, config.height, config.width)?;
            let name = format!("view{i}");
            let embed = b.linear(&format!("{name}.embed"), v.tubelet_width(), dims.hidden);
            let pos = b.param(format!("{name}.pos"), ParamKind::PosEmbed, &[temporal * spatial, dims.hidden]);
            let cls = b.param(format!("{name}.cls"), ParamKind::Cls, &[dims.hidden]);
            let blocks = (0..dims.layers)
                .map(|l| b.block(&format!("{name}.block{l}"), &dims))
                .collect();
            let norm = b.norm(&format!("{name}.norm"), dims.hidden);
            views.push(ViewEncoder {
                spec: *v,
                dims,
                temporal,
                spatial,
                embed,
                pos,
                cls,
                blocks,
                norm,
            });
        }
        let mut fusions = Vec::new();
        for i in 0..views.len().saturating_sub(1) {
            let (r, d) = (&views[i].dims, &views[i + 1].dims);
            let name = format!("fusion{i}");
            fusions.push(Fusion {
                receiver: i,
                donor: i + 1,
                layer: config.fusion_depth(i),
                receiver_norm: b.norm(&format!("{name}.receiver_norm"), r.hidden),
                donor_norm: b.norm(&format!("{name}.donor_norm"), d.hidden),
                donor_proj: b.linear(&format!("{name}.donor_proj"), d.hidden, r.hidden),
                attn: b.attention(&format!("{name}.attn"), r.hidden, r.heads),
            });
        }
        let gd = config.global_encoder_dims();
        let view_proj = views
            .iter()
            .enumerate()
            .map(|(i, v)| b.linear(&format!("global.proj{i}"), v.dims.hidden, gd.hidden))
            .collect();
        let gcls = b.param("global.cls".into(), ParamKind::Cls, &[gd.hidden]);
        let gblocks = (0..gd.layers).map(|l| b.block(&format!("global.block{l}"), &gd)).collect();
        let gnorm = b.norm("global.norm", gd.hidden);
        let verb_head = b.linear("head.verb", gd.hidden, config.n_verbs);
        let noun_head = b.linear("head.noun", gd.hidden, config.n_nouns);
        Ok(Self {
            config,
            params: b.store,
            views,
            fusions,
            global: GlobalEncoder {
                dims: gd,
                view_proj,
                cls: gcls,
                blocks: gblocks,
                norm: gnorm,
            },
            verb_head,
            noun_head,
        })
    }

    /// Standard initialization from `seed` with weight std `std`.
    pub fn init(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        let mut r = rng::stream(seed, "init", &[]);
        Self::build(config, &mut |kind, dims| init_value(kind, dims, std, &mut r))
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<F: Element>(&self) -> MMModel<F> {
        MMModel {
            config: self.config.clone(),
            params: self.params.cast(),
            views: self.views.clone(),
            fusions: self.fusions.clone(),
            global: self.global.clone(),
            verb_head: self.verb_head,
            noun_head: self.noun_head,
        }
    }

    fn view_input(&self, view: &ViewEncoder, inputs: &ModelInputs<E>) -> Result<Tensor<E>> {
        let m = view.spec.modality;
        let x = inputs
            .get(m)
            .ok_or_else(|| CoreError::Missing(format!("{} input for view {}", m.name(), view.spec)))?;
        let (h, w) = view_image_dims(&view.spec, self.config.height, self.config.width);
        let want = [self.config.frames, h, w, m.channels()];
        let x = match m {
            Modality::Spectrogram if x.rank() == 3 => x.reshape(want.to_vec())?,
            _ => x.clone(),
        };
        if x.dims() != want {
            return Err(CoreError::Geometry(format!(
                "{} input {:?} does not match expected {want:?}",
                m.name(),
                x.dims()
            )));
        }
        Ok(x)
    }

    /// Tubelet embedding plus position embedding, `[T, S, d]`.
    pub fn embed_tokens(&self, t: &mut Tape<E>, p: &[Var], view: usize, input: &Tensor<E>) -> Result<Var> {
        let v = &self.views[view];
        let patches = t.constant(extract_tubelets(input, v.spec.tubelet_t)?);
        let tokens = v.embed.forward(t, p, patches)?;
        let tokens = t.add(tokens, p[v.pos.0])?;
        Ok(t.reshape(tokens, vec![v.temporal, v.spatial, v.dims.hidden])?)
    }

    /// Prepends the view's CLS vector at every temporal index: `[T, S+1, d]`.
    pub fn prepend_cls(&self, t: &mut Tape<E>, p: &[Var], view: usize, tokens: Var) -> Result<Var> {
        let v = &self.views[view];
        let cls = t.reshape(p[v.cls.0], vec![1, 1, v.dims.hidden])?;
        let reps = vec![cls; v.temporal];
        let cls = t.concat(&reps, 0)?;
        Ok(t.concat(&[cls, tokens], 1)?)
    }

    /// Tokenized view input ready for the block stack.
    pub fn view_tokens(&self, t: &mut Tape<E>, p: &[Var], view: usize, inputs: &ModelInputs<E>) -> Result<Var> {
        let x = self.view_input(&self.views[view], inputs)?;
        let tokens = self.embed_tokens(t, p, view, &x)?;
        self.prepend_cls(t, p, view, tokens)
    }

    pub fn run_block(
        &self,
        t: &mut Tape<E>,
        p: &[Var],
        view: usize,
        layer: usize,
        x: Var,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let v = &self.views[view];
        let s = survival(self.config.droplayer, layer, v.dims.layers);
        let depth = match train_rng {
            Some(rng) => Depth::Train { survival: s, rng },
            None => Depth::Eval { survival: s },
        };
        v.blocks[layer].forward(t, p, x, depth)
    }

    /// Receiver tokens after attending over the donor's flattened tokens.
    pub fn cross_view_attend(&self, t: &mut Tape<E>, p: &[Var], fusion: usize, receiver: Var, donor: Var) -> Result<Var> {
        let f = &self.fusions[fusion];
        let rd = t.dims(receiver).to_vec();
        let dd = t.dims(donor).to_vec();
        let r = t.reshape(receiver, vec![1, rd[0] * rd[1], rd[2]])?;
        let d = t.reshape(donor, vec![1, dd[0] * dd[1], dd[2]])?;
        let q = f.receiver_norm.forward(t, p, r)?;
        let kv = f.donor_norm.forward(t, p, d)?;
        let kv = f.donor_proj.forward(t, p, kv)?;
        let mixed = f.attn.forward(t, p, q, kv)?;
        let out = t.add(r, mixed)?;
        Ok(t.reshape(out, rd)?)
    }

    /// Per-view token states after every view block and fusion.
    pub fn encode_views(
        &self,
        t: &mut Tape<E>,
        p: &[Var],
        inputs: &ModelInputs<E>,
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        let mut states = (0..self.views.len())
            .map(|i| self.view_tokens(t, p, i, inputs))
            .collect::<Result<Vec<_>>>()?;
        let max_depth = self.views.iter().map(|v| v.dims.layers).max().unwrap_or(0);
        for layer in 0..=max_depth {
            let snapshot = states.clone();
            for (i, f) in self.fusions.iter().enumerate() {
                if f.layer == layer {
                    states[f.receiver] = self.cross_view_attend(t, p, i, snapshot[f.receiver], snapshot[f.donor])?;
                }
            }
            for (i, v) in self.views.iter().enumerate() {
                if layer < v.dims.layers {
                    let rng = train_rng.as_deref_mut();
                    states[i] = self.run_block(t, p, i, layer, states[i], rng)?;
                }
            }
        }
        states
            .into_iter()
            .zip(&self.views)
            .map(|(s, v)| v.norm.forward(t, p, s))
            .collect()
    }

    /// Global-encoder input: global CLS followed by every view's projected
    /// per-index CLS outputs, `[1, 1 + ΣT, D]`.
    fn global_tokens(&self, t: &mut Tape<E>, p: &[Var], view_states: &[Var]) -> Result<Var> {
        let gd = self.global.dims.hidden;
        let mut parts = vec![t.reshape(p[self.global.cls.0], vec![1, gd])?];
        for (i, (&s, v)) in view_states.iter().zip(&self.views).enumerate() {
            let cls = t.narrow(s, 1, 0, 1)?;
            let cls = t.reshape(cls, vec![v.temporal, v.dims.hidden])?;
            parts.push(self.global.view_proj[i].forward(t, p, cls)?);
        }
        let seq = t.concat(&parts, 0)?;
        let n = t.dims(seq)[0];
        Ok(t.reshape(seq, vec![1, n, gd])?)
    }

    /// Full forward pass for one clip. `train_rng` enables stochastic depth.
    pub fn forward(
        &self,
        t: &mut Tape<E>,
        p: &[Var],
        inputs: &ModelInputs<E>,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Logits> {
        let states = self.encode_views(t, p, inputs, train_rng)?;
        let mut x = self.global_tokens(t, p, &states)?;
        for block in &self.global.blocks {
            x = block.forward(t, p, x, Depth::Eval { survival: 1.0 })?;
        }
        let x = self.global.norm.forward(t, p, x)?;
        let cls = t.narrow(x, 1, 0, 1)?;
        let cls = t.reshape(cls, vec![1, self.global.dims.hidden])?;
        Ok(Logits {
            verb: self.verb_head.forward(t, p, cls)?,
            noun: self.noun_head.forward(t, p, cls)?,
        })
    }

    /// Eval-mode logits without recording gradients.
    pub fn predict(&self, inputs: &ModelInputs<E>) -> Result<(Vec<E>, Vec<E>)> {
        let mut t = Tape::no_grad();
        let p = self.params.bind(&mut t);
        let l = self.forward(&mut t, &p, inputs, None)?;
        Ok((t.value(l.verb).data().to_vec(), t.value(l.noun).data().to_vec()))
    }
}
