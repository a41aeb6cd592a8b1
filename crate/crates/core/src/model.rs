//! The hyper-connected transformer for two-modality segmentation, plus its
//! early/late-fusion and convolution-only ablation variants.
//!
//! Data flow of the full model: three encoder branches (PET, CT, and the
//! channel-concatenated pair) each run a residual backbone to a /16 feature
//! map, project it to the embedding width, flatten to tokens, add a learned
//! positional table and apply a transformer stack. The fusion decoder
//! concatenates the three token streams, adds a fresh positional table over
//! all 3N slots, runs transformers whose attention spans the modalities,
//! splits the stream back into three aligned parts and averages them. A
//! convolutional head reshapes tokens to a map, upsamples, fuses a /4
//! skip feature from the concatenated branch and emits per-pixel class
//! probabilities.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{
    param_node, positional_table, Conv2d, Norm2d, ParamStore, ResidualBlock, Scope,
    TransformerModule,
};
use crate::tensor::{Scalar, Tensor};

/// Fusion strategy / architecture variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Hyper fusion with transformers (the full model; alias HF-TN).
    #[serde(rename = "HCT", alias = "HF-TN")]
    Hct,
    #[serde(rename = "EF-TN")]
    EfTn,
    #[serde(rename = "LF-TN")]
    LfTn,
    #[serde(rename = "EF-FCN")]
    EfFcn,
    #[serde(rename = "LF-FCN")]
    LfFcn,
    #[serde(rename = "HF-FCN")]
    HfFcn,
}

pub const ALL_VARIANTS: [Variant; 6] = [
    Variant::Hct,
    Variant::EfTn,
    Variant::LfTn,
    Variant::EfFcn,
    Variant::LfFcn,
    Variant::HfFcn,
];

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Hct => "HCT",
            Variant::EfTn => "EF-TN",
            Variant::LfTn => "LF-TN",
            Variant::EfFcn => "EF-FCN",
            Variant::LfFcn => "LF-FCN",
            Variant::HfFcn => "HF-FCN",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "HCT" | "HF-TN" => Ok(Variant::Hct),
            "EF-TN" => Ok(Variant::EfTn),
            "LF-TN" => Ok(Variant::LfTn),
            "EF-FCN" => Ok(Variant::EfFcn),
            "LF-FCN" => Ok(Variant::LfFcn),
            "HF-FCN" => Ok(Variant::HfFcn),
            other => Err(Error::config(format!(
                "unknown variant {other:?}; valid: HCT (alias HF-TN), EF-TN, LF-TN, EF-FCN, LF-FCN, HF-FCN"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub h: usize,
    pub w: usize,
    pub d_embed: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub backbone_widths: [usize; 4],
    pub n_classes: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h: 64,
            w: 64,
            d_embed: 256,
            depth: 4,
            n_heads: 4,
            backbone_widths: [16, 32, 64, 128],
            n_classes: 2,
            variant: Variant::Hct,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || !self.h.is_multiple_of(16) || !self.w.is_multiple_of(16) {
            return Err(Error::config(format!(
                "input dims must be positive multiples of 16, got {}x{}",
                self.h, self.w
            )));
        }
        if self.n_heads == 0 || !self.d_embed.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "embedding dim {} must divide by {} heads",
                self.d_embed, self.n_heads
            )));
        }
        if !self.d_embed.is_multiple_of(4) {
            return Err(Error::config(format!(
                "embedding dim {} must divide by 4 for the head channel ladder",
                self.d_embed
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1".to_string()));
        }
        if self.n_classes != 2 {
            return Err(Error::config(format!(
                "n_classes must be 2, got {}",
                self.n_classes
            )));
        }
        if self.backbone_widths.contains(&0) {
            return Err(Error::config(
                "backbone widths must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Tokens per encoder branch: (h/16) * (w/16).
    pub fn n_tokens(&self) -> usize {
        (self.h / 16) * (self.w / 16)
    }
}

// ── Components ───────────────────────────────────────────────────────────

/// Four-stage residual backbone: stem stride 2, then three strided residual
/// blocks. Exposes the /4-resolution stage as the skip feature.
struct BackboneNet {
    stem: Conv2d,
    stem_norm: Norm2d,
    stage2: ResidualBlock,
    stage3: ResidualBlock,
    stage4: ResidualBlock,
}

impl BackboneNet {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_ch: usize,
        widths: &[usize; 4],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(BackboneNet {
            stem: Conv2d::init(store, &scope.child("stem"), in_ch, widths[0], 4, 2, 1, rng)?,
            stem_norm: Norm2d::init(store, &scope.child("stem_norm"), widths[0])?,
            stage2: ResidualBlock::init(
                store,
                &scope.child("stage2"),
                widths[0],
                widths[1],
                2,
                rng,
            )?,
            stage3: ResidualBlock::init(
                store,
                &scope.child("stage3"),
                widths[1],
                widths[2],
                2,
                rng,
            )?,
            stage4: ResidualBlock::init(
                store,
                &scope.child("stage4"),
                widths[2],
                widths[3],
                2,
                rng,
            )?,
        })
    }

    /// Returns (deep map at /16, skip map at /4).
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let s = g.shape(x);
        if !s[2].is_multiple_of(16) || !s[3].is_multiple_of(16) {
            return Err(Error::config(format!(
                "backbone input dims must divide by 16, got {:?}",
                s
            )));
        }
        let x = self.stem.forward(g, store, x)?;
        let x = self.stem_norm.forward(g, store, x)?;
        let x = g.relu(x)?;
        let skip = self.stage2.forward(g, store, x)?;
        let x = self.stage3.forward(g, store, skip)?;
        let deep = self.stage4.forward(g, store, x)?;
        Ok((deep, skip))
    }
}

/// Backbone → 1x1 projection to D → tokens (+ positional) → transformer
/// stack. Emits (N, D) tokens and the backbone's /4 skip feature.
struct EncoderBranch {
    backbone: BackboneNet,
    proj: Conv2d,
    pos: String,
    blocks: Vec<TransformerModule>,
    h16: usize,
    w16: usize,
}

impl EncoderBranch {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_ch: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let backbone = BackboneNet::init(
            store,
            &scope.child("backbone"),
            in_ch,
            &cfg.backbone_widths,
            rng,
        )?;
        let proj = Conv2d::init(
            store,
            &scope.child("proj"),
            cfg.backbone_widths[3],
            cfg.d_embed,
            1,
            1,
            0,
            rng,
        )?;
        let pos = scope.name("pos");
        store.insert(&pos, positional_table(cfg.n_tokens(), cfg.d_embed, rng))?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerModule::init(
                    store,
                    &scope.child(&format!("blocks.{i}")),
                    cfg.d_embed,
                    cfg.n_heads,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderBranch {
            backbone,
            proj,
            pos,
            blocks,
            h16: cfg.h / 16,
            w16: cfg.w / 16,
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (deep, skip) = self.backbone.forward(g, store, x)?;
        let p = self.proj.forward(g, store, deep)?;
        let d = g.shape(p)[1];
        let p3 = g.reshape(p, &[d, self.h16, self.w16])?;
        let mut t = g.map_to_tokens(p3)?;
        let pos = param_node(g, store, &self.pos)?;
        if g.shape(pos) != g.shape(t) {
            return Err(Error::dim(format!(
                "positional table {:?} does not match tokens {:?}",
                g.shape(pos),
                g.shape(t)
            )));
        }
        t = g.add(t, pos)?;
        for blk in &self.blocks {
            t = blk.forward(g, store, t)?;
        }
        Ok((t, skip))
    }
}

/// Fusion decoder: concatenate the three (N, D) streams along the token
/// axis, add a fresh (3N, D) positional table, run the transformer stack
/// over all 3N tokens, split back into aligned streams and average.
struct HyperDecoder {
    pos: String,
    blocks: Vec<TransformerModule>,
}

impl HyperDecoder {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pos = scope.name("pos");
        store.insert(&pos, positional_table(3 * cfg.n_tokens(), cfg.d_embed, rng))?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerModule::init(
                    store,
                    &scope.child(&format!("blocks.{i}")),
                    cfg.d_embed,
                    cfg.n_heads,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HyperDecoder { pos, blocks })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        e_pet: NodeId,
        e_ct: NodeId,
        e_con: NodeId,
        trace: &mut Option<&mut ForwardTrace>,
    ) -> Result<NodeId> {
        let n = g.shape(e_pet)[0];
        if g.shape(e_ct)[0] != n || g.shape(e_con)[0] != n {
            return Err(Error::dim(format!(
                "branch token counts disagree: {} / {} / {}",
                n,
                g.shape(e_ct)[0],
                g.shape(e_con)[0]
            )));
        }
        let mut cat = g.concat_rows(&[e_pet, e_ct, e_con])?;
        let pos = param_node(g, store, &self.pos)?;
        if g.shape(pos) != g.shape(cat) {
            return Err(Error::dim(format!(
                "decoder positional table {:?} does not match {:?}",
                g.shape(pos),
                g.shape(cat)
            )));
        }
        cat = g.add(cat, pos)?;
        if let Some(t) = trace.as_deref_mut() {
            t.decoder_in = Some(g.shape(cat).to_vec());
        }
        for blk in &self.blocks {
            let (out, attns) = blk.forward_with_attn(g, store, cat)?;
            cat = out;
            if let Some(t) = trace.as_deref_mut() {
                t.decoder_attn.extend(attns);
            }
        }
        let s1 = g.slice_rows(cat, 0, n)?;
        let s2 = g.slice_rows(cat, n, 2 * n)?;
        let s3 = g.slice_rows(cat, 2 * n, 3 * n)?;
        let fused = g.mean_of(&[s1, s2, s3])?;
        if let Some(t) = trace.as_deref_mut() {
            t.decoder_out = Some(g.shape(fused).to_vec());
        }
        Ok(fused)
    }
}

/// Convolutional segmentation head. Takes a (1, D, H/16, W/16) map, refines
/// with two 3x3 convs (D → D/2 → D/4), upsamples to /4, adds the projected
/// skip feature, upsamples to full resolution and emits per-pixel class
/// probabilities.
pub struct SegHead {
    conv1: Conv2d,
    conv2: Conv2d,
    skip_proj: Conv2d,
    out_conv: Conv2d,
    h: usize,
    w: usize,
}

impl SegHead {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        skip_ch: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.d_embed;
        Ok(SegHead {
            conv1: Conv2d::init(store, &scope.child("conv1"), d, d / 2, 3, 1, 1, rng)?,
            conv2: Conv2d::init(store, &scope.child("conv2"), d / 2, d / 4, 3, 1, 1, rng)?,
            skip_proj: Conv2d::init(
                store,
                &scope.child("skip_proj"),
                skip_ch,
                d / 4,
                1,
                1,
                0,
                rng,
            )?,
            out_conv: Conv2d::init(
                store,
                &scope.child("out"),
                d / 4,
                cfg.n_classes,
                1,
                1,
                0,
                rng,
            )?,
            h: cfg.h,
            w: cfg.w,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        map: NodeId,
        skip: NodeId,
    ) -> Result<NodeId> {
        let skip_shape = g.shape(skip);
        if skip_shape[2] != self.h / 4 || skip_shape[3] != self.w / 4 {
            return Err(Error::dim(format!(
                "skip feature {:?} does not sit at /4 resolution ({}, {})",
                skip_shape,
                self.h / 4,
                self.w / 4
            )));
        }
        let x = self.conv1.forward(g, store, map)?;
        let x = g.relu(x)?;
        let x = self.conv2.forward(g, store, x)?;
        let x = g.relu(x)?;
        let x = g.bilinear_resize(x, self.h / 4, self.w / 4)?;
        let sp = self.skip_proj.forward(g, store, skip)?;
        let x = g.add(x, sp)?;
        let x = g.bilinear_resize(x, self.h, self.w)?;
        let logits = self.out_conv.forward(g, store, x)?;
        g.softmax_channels(logits)
    }
}

/// Convolution-only pipeline used by the FCN variants: backbone → 1x1
/// projection to D → two residual blocks at /16 → head.
struct FcnPipe {
    backbone: BackboneNet,
    proj: Conv2d,
    fuse1: ResidualBlock,
    fuse2: ResidualBlock,
    head: SegHead,
}

impl FcnPipe {
    fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        in_ch: usize,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.d_embed;
        Ok(FcnPipe {
            backbone: BackboneNet::init(
                store,
                &scope.child("backbone"),
                in_ch,
                &cfg.backbone_widths,
                rng,
            )?,
            proj: Conv2d::init(
                store,
                &scope.child("proj"),
                cfg.backbone_widths[3],
                d,
                1,
                1,
                0,
                rng,
            )?,
            fuse1: ResidualBlock::init(store, &scope.child("fuse1"), d, d, 1, rng)?,
            fuse2: ResidualBlock::init(store, &scope.child("fuse2"), d, d, 1, rng)?,
            head: SegHead::init(
                store,
                &scope.child("head"),
                cfg.backbone_widths[1],
                cfg,
                rng,
            )?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let (deep, skip) = self.backbone.forward(g, store, x)?;
        let m = self.proj.forward(g, store, deep)?;
        let m = self.fuse1.forward(g, store, m)?;
        let m = self.fuse2.forward(g, store, m)?;
        self.head.forward(g, store, m, skip)
    }
}

enum Arch {
    Hct {
        enc_pet: EncoderBranch,
        enc_ct: EncoderBranch,
        enc_con: EncoderBranch,
        decoder: HyperDecoder,
        head: SegHead,
    },
    EfTn {
        enc: EncoderBranch,
        head: SegHead,
    },
    LfTn {
        pet_enc: EncoderBranch,
        pet_head: SegHead,
        ct_enc: EncoderBranch,
        ct_head: SegHead,
    },
    EfFcn(FcnPipe),
    LfFcn {
        pet: FcnPipe,
        ct: FcnPipe,
    },
    HfFcn {
        bb_pet: BackboneNet,
        bb_ct: BackboneNet,
        bb_con: BackboneNet,
        fuse1: ResidualBlock,
        fuse2: ResidualBlock,
        head: SegHead,
    },
}

/// Shapes and attention nodes recorded during a traced forward pass.
#[derive(Default)]
pub struct ForwardTrace {
    /// Token-matrix shape per encoder branch, in forward order.
    pub branch_tokens: Vec<Vec<usize>>,
    /// Shape of the concatenated decoder input (3N, D), when a decoder runs.
    pub decoder_in: Option<Vec<usize>>,
    /// Shape of the fused decoder output (N, D), when a decoder runs.
    pub decoder_out: Option<Vec<usize>>,
    /// Attention matrices recorded inside the decoder stack.
    pub decoder_attn: Vec<NodeId>,
}

/// A built variant: configuration, parameters, and wiring.
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

/// Construct and initialize the requested variant. Initialization is a pure
/// function of (config, seed).
pub fn build_variant<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let arch = match config.variant {
        Variant::Hct => {
            let enc_pet =
                EncoderBranch::init(&mut store, &Scope::root("enc_pet"), 1, config, &mut rng)?;
            let enc_ct =
                EncoderBranch::init(&mut store, &Scope::root("enc_ct"), 1, config, &mut rng)?;
            let enc_con =
                EncoderBranch::init(&mut store, &Scope::root("enc_con"), 2, config, &mut rng)?;
            let decoder =
                HyperDecoder::init(&mut store, &Scope::root("decoder"), config, &mut rng)?;
            let head = SegHead::init(
                &mut store,
                &Scope::root("head"),
                config.backbone_widths[1],
                config,
                &mut rng,
            )?;
            Arch::Hct {
                enc_pet,
                enc_ct,
                enc_con,
                decoder,
                head,
            }
        }
        Variant::EfTn => {
            let enc = EncoderBranch::init(&mut store, &Scope::root("enc"), 2, config, &mut rng)?;
            let head = SegHead::init(
                &mut store,
                &Scope::root("head"),
                config.backbone_widths[1],
                config,
                &mut rng,
            )?;
            Arch::EfTn { enc, head }
        }
        Variant::LfTn => {
            let pet_enc =
                EncoderBranch::init(&mut store, &Scope::root("pet.enc"), 1, config, &mut rng)?;
            let pet_head = SegHead::init(
                &mut store,
                &Scope::root("pet.head"),
                config.backbone_widths[1],
                config,
                &mut rng,
            )?;
            let ct_enc =
                EncoderBranch::init(&mut store, &Scope::root("ct.enc"), 1, config, &mut rng)?;
            let ct_head = SegHead::init(
                &mut store,
                &Scope::root("ct.head"),
                config.backbone_widths[1],
                config,
                &mut rng,
            )?;
            Arch::LfTn {
                pet_enc,
                pet_head,
                ct_enc,
                ct_head,
            }
        }
        Variant::EfFcn => Arch::EfFcn(FcnPipe::init(
            &mut store,
            &Scope::root("ef"),
            2,
            config,
            &mut rng,
        )?),
        Variant::LfFcn => Arch::LfFcn {
            pet: FcnPipe::init(&mut store, &Scope::root("pet"), 1, config, &mut rng)?,
            ct: FcnPipe::init(&mut store, &Scope::root("ct"), 1, config, &mut rng)?,
        },
        Variant::HfFcn => {
            let widths = &config.backbone_widths;
            let d = config.d_embed;
            let bb_pet =
                BackboneNet::init(&mut store, &Scope::root("bb_pet"), 1, widths, &mut rng)?;
            let bb_ct = BackboneNet::init(&mut store, &Scope::root("bb_ct"), 1, widths, &mut rng)?;
            let bb_con =
                BackboneNet::init(&mut store, &Scope::root("bb_con"), 2, widths, &mut rng)?;
            let fuse1 = ResidualBlock::init(
                &mut store,
                &Scope::root("fuse1"),
                3 * widths[3],
                d,
                1,
                &mut rng,
            )?;
            let fuse2 = ResidualBlock::init(&mut store, &Scope::root("fuse2"), d, d, 1, &mut rng)?;
            let head = SegHead::init(
                &mut store,
                &Scope::root("head"),
                widths[1],
                config,
                &mut rng,
            )?;
            Arch::HfFcn {
                bb_pet,
                bb_ct,
                bb_con,
                fuse1,
                fuse2,
                head,
            }
        }
    };
    Ok(Model {
        config: config.clone(),
        store,
        arch,
    })
}

fn image_to_tensor<T: Scalar>(img: &Image, channels: &[&Image]) -> Result<Tensor<T>> {
    let (h, w) = (img.h, img.w);
    let mut data = Vec::with_capacity((1 + channels.len()) * h * w);
    data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
    for extra in channels {
        if (extra.h, extra.w) != (h, w) {
            return Err(Error::dim(format!(
                "channel shapes disagree: {}x{} vs {}x{}",
                h, w, extra.h, extra.w
            )));
        }
        data.extend(extra.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(&[1, 1 + channels.len(), h, w], data)
}

impl<T: Scalar> Model<T> {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Forward on one normalized sample; returns the (1, 2, H, W)
    /// probability node.
    pub fn forward(&self, g: &mut Graph<T>, pet: &Image, ct: &Image) -> Result<NodeId> {
        self.forward_inner(g, pet, ct, &mut None)
    }

    /// Forward that records token shapes and decoder attention nodes.
    pub fn forward_traced(
        &self,
        g: &mut Graph<T>,
        pet: &Image,
        ct: &Image,
    ) -> Result<(NodeId, ForwardTrace)> {
        let mut trace = ForwardTrace::default();
        let out = {
            let mut slot = Some(&mut trace);
            self.forward_inner(g, pet, ct, &mut slot)?
        };
        Ok((out, trace))
    }

    fn forward_inner(
        &self,
        g: &mut Graph<T>,
        pet: &Image,
        ct: &Image,
        trace: &mut Option<&mut ForwardTrace>,
    ) -> Result<NodeId> {
        if (pet.h, pet.w) != (self.config.h, self.config.w)
            || (ct.h, ct.w) != (self.config.h, self.config.w)
        {
            return Err(Error::dim(format!(
                "inputs {}x{} / {}x{} do not match configured {}x{}",
                pet.h, pet.w, ct.h, ct.w, self.config.h, self.config.w
            )));
        }
        let (h16, w16) = (self.config.h / 16, self.config.w / 16);
        let store = &self.store;
        match &self.arch {
            Arch::Hct {
                enc_pet,
                enc_ct,
                enc_con,
                decoder,
                head,
            } => {
                let x_pet = g.leaf(image_to_tensor(pet, &[])?);
                let x_ct = g.leaf(image_to_tensor(ct, &[])?);
                let x_con = g.leaf(image_to_tensor(pet, &[ct])?);
                let (e_pet, _) = enc_pet.forward(g, store, x_pet)?;
                let (e_ct, _) = enc_ct.forward(g, store, x_ct)?;
                let (e_con, skip) = enc_con.forward(g, store, x_con)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.branch_tokens.push(g.shape(e_pet).to_vec());
                    t.branch_tokens.push(g.shape(e_ct).to_vec());
                    t.branch_tokens.push(g.shape(e_con).to_vec());
                }
                let fused = decoder.forward(g, store, e_pet, e_ct, e_con, trace)?;
                let map = g.tokens_to_map(fused, h16, w16)?;
                let d = g.shape(map)[0];
                let map4 = g.reshape(map, &[1, d, h16, w16])?;
                head.forward(g, store, map4, skip)
            }
            Arch::EfTn { enc, head } => {
                let x_con = g.leaf(image_to_tensor(pet, &[ct])?);
                let (tokens, skip) = enc.forward(g, store, x_con)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.branch_tokens.push(g.shape(tokens).to_vec());
                }
                let map = g.tokens_to_map(tokens, h16, w16)?;
                let d = g.shape(map)[0];
                let map4 = g.reshape(map, &[1, d, h16, w16])?;
                head.forward(g, store, map4, skip)
            }
            Arch::LfTn {
                pet_enc,
                pet_head,
                ct_enc,
                ct_head,
            } => {
                let x_pet = g.leaf(image_to_tensor(pet, &[])?);
                let x_ct = g.leaf(image_to_tensor(ct, &[])?);
                let (t_pet, skip_pet) = pet_enc.forward(g, store, x_pet)?;
                let (t_ct, skip_ct) = ct_enc.forward(g, store, x_ct)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.branch_tokens.push(g.shape(t_pet).to_vec());
                    t.branch_tokens.push(g.shape(t_ct).to_vec());
                }
                let d = self.config.d_embed;
                let m_pet = g.tokens_to_map(t_pet, h16, w16)?;
                let m_pet = g.reshape(m_pet, &[1, d, h16, w16])?;
                let p_pet = pet_head.forward(g, store, m_pet, skip_pet)?;
                let m_ct = g.tokens_to_map(t_ct, h16, w16)?;
                let m_ct = g.reshape(m_ct, &[1, d, h16, w16])?;
                let p_ct = ct_head.forward(g, store, m_ct, skip_ct)?;
                g.mean_of(&[p_pet, p_ct])
            }
            Arch::EfFcn(pipe) => {
                let x_con = g.leaf(image_to_tensor(pet, &[ct])?);
                pipe.forward(g, store, x_con)
            }
            Arch::LfFcn { pet: p, ct: c } => {
                let x_pet = g.leaf(image_to_tensor(pet, &[])?);
                let x_ct = g.leaf(image_to_tensor(ct, &[])?);
                let p_pet = p.forward(g, store, x_pet)?;
                let p_ct = c.forward(g, store, x_ct)?;
                g.mean_of(&[p_pet, p_ct])
            }
            Arch::HfFcn {
                bb_pet,
                bb_ct,
                bb_con,
                fuse1,
                fuse2,
                head,
            } => {
                let x_pet = g.leaf(image_to_tensor(pet, &[])?);
                let x_ct = g.leaf(image_to_tensor(ct, &[])?);
                let x_con = g.leaf(image_to_tensor(pet, &[ct])?);
                let (d_pet, _) = bb_pet.forward(g, store, x_pet)?;
                let (d_ct, _) = bb_ct.forward(g, store, x_ct)?;
                let (d_con, skip) = bb_con.forward(g, store, x_con)?;
                let cat = g.concat_channels(&[d_pet, d_ct, d_con])?;
                let m = fuse1.forward(g, store, cat)?;
                let m = fuse2.forward(g, store, m)?;
                head.forward(g, store, m, skip)
            }
        }
    }

    /// Convenience: run a fresh forward pass and return the probability map.
    pub fn forward_probs(&self, pet: &Image, ct: &Image) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, pet, ct)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            h: 32,
            w: 32,
            d_embed: 16,
            depth: 1,
            n_heads: 2,
            backbone_widths: [2, 2, 4, 4],
            variant,
            ..ModelConfig::default()
        }
    }

    fn unit_image(h: usize, w: usize, seed: u64) -> Image {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(
            h,
            w,
            (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation_edges() {
        assert!(ModelConfig {
            h: 60,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            d_embed: 30,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            depth: 0,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn variant_parsing_and_aliases() {
        assert_eq!("hct".parse::<Variant>().unwrap(), Variant::Hct);
        assert_eq!("HF-TN".parse::<Variant>().unwrap(), Variant::Hct);
        assert_eq!("ef-fcn".parse::<Variant>().unwrap(), Variant::EfFcn);
        let err = "bogus".parse::<Variant>().unwrap_err().to_string();
        for name in ["EF-TN", "LF-TN", "EF-FCN", "LF-FCN", "HF-FCN"] {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn backbone_shape_contract_with_default_widths() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let bb = BackboneNet::init(
            &mut store,
            &Scope::root("bb"),
            1,
            &[16, 32, 64, 128],
            &mut rng,
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 64, 64]));
        let (deep, skip) = bb.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(deep), &[1, 128, 4, 4]);
        assert_eq!(g.shape(skip), &[1, 32, 16, 16]);
        // two-channel concatenated input keeps the same spatial contract
        let mut store2 = ParamStore::<f32>::new();
        let bb2 = BackboneNet::init(
            &mut store2,
            &Scope::root("bb"),
            2,
            &[16, 32, 64, 128],
            &mut rng,
        )
        .unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.leaf(Tensor::zeros(&[1, 2, 64, 64]));
        let (deep2, skip2) = bb2.forward(&mut g2, &store2, x2).unwrap();
        assert_eq!(g2.shape(deep2), &[1, 128, 4, 4]);
        assert_eq!(g2.shape(skip2), &[1, 32, 16, 16]);
    }

    #[test]
    fn encoder_branch_token_count_and_zero_block_identity() {
        use rand::SeedableRng;
        let cfg = tiny(Variant::Hct);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = EncoderBranch::init(&mut store, &Scope::root("enc"), 1, &cfg, &mut rng).unwrap();
        store.zero_prefixed("enc.blocks");
        let mut g = Graph::new();
        let x = g.leaf(trunc_normal(&[1, 1, 32, 32], 0.5, &mut rng));
        let (tokens, _skip) = enc.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(tokens), &[4, 16]); // (32/16)^2 tokens of dim D
                                               // with zeroed transformer blocks the output is projected tokens + positional table
        let (deep, _) = enc.backbone.forward(&mut g, &store, x).unwrap();
        let p = enc.proj.forward(&mut g, &store, deep).unwrap();
        let p3 = g.reshape(p, &[16, 2, 2]).unwrap();
        let t = g.map_to_tokens(p3).unwrap();
        let pos = param_node(&mut g, &store, "enc.pos").unwrap();
        let expect = g.add(t, pos).unwrap();
        assert_eq!(g.value(tokens).data(), g.value(expect).data());
    }

    #[test]
    fn hyper_decoder_zero_blocks_reduce_to_fusion_rule() {
        use rand::SeedableRng;
        let cfg = tiny(Variant::Hct);
        let n = cfg.n_tokens();
        let d = cfg.d_embed;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let dec = HyperDecoder::init(&mut store, &Scope::root("dec"), &cfg, &mut rng).unwrap();
        store.zero_prefixed("dec.blocks");
        let mut g = Graph::new();
        let e_pet = g.leaf(trunc_normal(&[n, d], 1.0, &mut rng));
        let e_ct = g.leaf(trunc_normal(&[n, d], 1.0, &mut rng));
        let e_con = g.leaf(trunc_normal(&[n, d], 1.0, &mut rng));
        let fused = dec
            .forward(&mut g, &store, e_pet, e_ct, e_con, &mut None)
            .unwrap();
        assert_eq!(g.shape(fused), &[n, d]);
        let pos = store.get("dec.pos").unwrap();
        for i in 0..n {
            for j in 0..d {
                let want = (g.value(e_pet).data()[i * d + j]
                    + pos.data()[i * d + j]
                    + g.value(e_ct).data()[i * d + j]
                    + pos.data()[(n + i) * d + j]
                    + g.value(e_con).data()[i * d + j]
                    + pos.data()[(2 * n + i) * d + j])
                    / 3.0;
                let got = g.value(fused).data()[i * d + j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_runs_over_three_n_tokens() {
        let model = build_variant::<f32>(&tiny(Variant::Hct), 1).unwrap();
        let pet = unit_image(32, 32, 10);
        let ct = unit_image(32, 32, 11);
        let mut g = Graph::new();
        let (out, trace) = model.forward_traced(&mut g, &pet, &ct).unwrap();
        assert_eq!(trace.branch_tokens, vec![vec![4, 16]; 3]);
        assert_eq!(trace.decoder_in, Some(vec![12, 16]));
        assert_eq!(trace.decoder_out, Some(vec![4, 16]));
        assert_eq!(g.shape(out), &[1, 2, 32, 32]);
        // decoder attention is (3N, 3N), rows normalized
        assert!(!trace.decoder_attn.is_empty());
        for &attn in &trace.decoder_attn {
            assert_eq!(g.shape(attn), &[12, 12]);
            for r in 0..12 {
                let sum: f32 = g.value(attn).data()[r * 12..(r + 1) * 12].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn swapping_pet_and_ct_changes_the_output() {
        let model = build_variant::<f32>(&tiny(Variant::Hct), 2).unwrap();
        let pet = unit_image(32, 32, 20);
        let ct = unit_image(32, 32, 21);
        let a = model.forward_probs(&pet, &ct).unwrap();
        let b = model.forward_probs(&ct, &pet).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-6, "swap changed nothing: {max_diff}");
    }

    #[test]
    fn zeroing_pet_input_changes_the_output() {
        let model = build_variant::<f32>(&tiny(Variant::Hct), 5).unwrap();
        let pet = unit_image(32, 32, 30);
        let ct = unit_image(32, 32, 31);
        let zeros = Image::zeros(32, 32);
        let a = model.forward_probs(&pet, &ct).unwrap();
        let b = model.forward_probs(&zeros, &ct).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-6);
    }

    #[test]
    fn forward_is_deterministic_and_seed_sensitive() {
        let pet = unit_image(32, 32, 40);
        let ct = unit_image(32, 32, 41);
        let m1 = build_variant::<f32>(&tiny(Variant::Hct), 7).unwrap();
        let m2 = build_variant::<f32>(&tiny(Variant::Hct), 7).unwrap();
        assert_eq!(
            m1.forward_probs(&pet, &ct).unwrap(),
            m2.forward_probs(&pet, &ct).unwrap()
        );
        let m3 = build_variant::<f32>(&tiny(Variant::Hct), 8).unwrap();
        assert_ne!(
            m1.forward_probs(&pet, &ct).unwrap(),
            m3.forward_probs(&pet, &ct).unwrap()
        );
    }

    #[test]
    fn zeroed_final_conv_gives_uniform_half_probabilities() {
        let mut model = build_variant::<f32>(&tiny(Variant::Hct), 3).unwrap();
        model.store.zero_prefixed("head.out");
        let probs = model
            .forward_probs(&unit_image(32, 32, 50), &unit_image(32, 32, 51))
            .unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn all_variants_emit_normalized_probability_maps() {
        let pet = unit_image(32, 32, 60);
        let ct = unit_image(32, 32, 61);
        for (i, &variant) in ALL_VARIANTS.iter().enumerate() {
            let model = build_variant::<f32>(&tiny(variant), 100 + i as u64).unwrap();
            let probs = model.forward_probs(&pet, &ct).unwrap();
            assert_eq!(probs.shape(), &[1, 2, 32, 32], "{variant}");
            let hw = 32 * 32;
            for pix in 0..hw {
                let sum = probs.data()[pix] + probs.data()[hw + pix];
                assert!((sum - 1.0).abs() < 1e-6, "{variant}: sum {sum}");
            }
        }
    }

    #[test]
    fn lf_tn_average_of_identical_submodels_is_the_submodel_output() {
        let mut model = build_variant::<f32>(&tiny(Variant::LfTn), 9).unwrap();
        // copy the pet pipeline's weights onto the ct pipeline
        let names: Vec<String> = model.store.names().map(|s| s.to_string()).collect();
        for name in &names {
            if let Some(rest) = name.strip_prefix("pet.") {
                let value = model.store.get(name).unwrap().clone();
                model.store.set(&format!("ct.{rest}"), value).unwrap();
            }
        }
        let img = unit_image(32, 32, 70);
        let fused = model.forward_probs(&img, &img).unwrap();
        // run the pet pipeline alone
        let Arch::LfTn {
            pet_enc, pet_head, ..
        } = &model.arch
        else {
            panic!("expected LF-TN");
        };
        let mut g = Graph::new();
        let x = g.leaf(image_to_tensor::<f32>(&img, &[]).unwrap());
        let (tokens, skip) = pet_enc.forward(&mut g, &model.store, x).unwrap();
        let map = g.tokens_to_map(tokens, 2, 2).unwrap();
        let map4 = g.reshape(map, &[1, 16, 2, 2]).unwrap();
        let solo = pet_head.forward(&mut g, &model.store, map4, skip).unwrap();
        for (a, b) in fused.data().iter().zip(g.value(solo).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn parameter_counts_are_reported_and_ordered() {
        let hct = build_variant::<f32>(&tiny(Variant::Hct), 0).unwrap();
        let ef = build_variant::<f32>(&tiny(Variant::EfTn), 0).unwrap();
        assert!(hct.param_count() > ef.param_count());
        assert!(ef.param_count() > 0);
        let mut counts = std::collections::HashSet::new();
        for &v in &ALL_VARIANTS {
            counts.insert(build_variant::<f32>(&tiny(v), 0).unwrap().param_count());
        }
        assert!(counts.len() >= 4, "variants should differ in size");
    }
}
