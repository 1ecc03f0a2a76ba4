//! Patch-token model family: encoder, decoder, segmentation head, and
//! reconstruction head, built exclusively from linear layers, residual MLP
//! blocks with pre-normalization, and a learnable mask token — so that
//! "every linear layer of the encoder" is a well-defined adapter target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::{lit, Scalar};
use crate::tensor::{Binder, HostTensor, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Identity,
}

/// Architecture hyperparameters. The spatial grid is fully determined by the
/// image size and patch size; every learnable projection is a linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchMeta {
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub width: usize,
    pub mlp_hidden: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub n_classes: usize,
    pub activation: Activation,
    pub use_norm: bool,
    pub mask_ratio: f64,
}

impl Default for ArchMeta {
    fn default() -> Self {
        ArchMeta {
            in_channels: 1,
            image_h: 32,
            image_w: 32,
            patch_size: 4,
            width: 32,
            mlp_hidden: 64,
            enc_depth: 4,
            dec_depth: 2,
            n_classes: 2,
            activation: Activation::Gelu,
            use_norm: true,
            mask_ratio: 0.6,
        }
    }
}

impl ArchMeta {
    pub fn validate(&self) -> Result<()> {
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::shape(
                "arch",
                format!(
                    "image {}x{} not divisible by patch size {}",
                    self.image_h, self.image_w, self.patch_size
                ),
            ));
        }
        if self.width == 0 || self.mlp_hidden == 0 || self.n_classes < 2 {
            return Err(Error::Config("width/mlp_hidden must be positive, classes >= 2".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn n_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Values per patch token (channels x patch area).
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Segmentation head output dim per token: one logit vector per pixel.
    pub fn seg_out_dim(&self) -> usize {
        self.n_classes * self.patch_size * self.patch_size
    }

    pub fn n_cells(&self) -> usize {
        self.image_h * self.image_w
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LinearP<F> {
    /// `[d x k]`: output dim x input dim.
    pub w: HostTensor<F>,
    pub b: Option<HostTensor<F>>,
}

impl<F: Scalar> LinearP<F> {
    pub fn out_in(&self) -> (usize, usize) {
        (self.w.shape[0], self.w.shape[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormP<F> {
    pub gamma: HostTensor<F>,
    pub beta: HostTensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockP<F> {
    pub norm: NormP<F>,
    pub fc1: LinearP<F>,
    pub fc2: LinearP<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderP<F> {
    pub patch_embed: LinearP<F>,
    pub mask_token: HostTensor<F>,
    pub blocks: Vec<BlockP<F>>,
    pub final_norm: NormP<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderP<F> {
    pub blocks: Vec<BlockP<F>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    SegHead,
    SslHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    pub arch: ArchMeta,
    pub encoder: EncoderP<F>,
    pub decoder: DecoderP<F>,
    pub seg_head: LinearP<F>,
    pub ssl_head: LinearP<F>,
}

fn push_linear<'m, F>(out: &mut Vec<(String, &'m HostTensor<F>)>, name: &str, l: &'m LinearP<F>) {
    out.push((format!("{name}.weight"), &l.w));
    if let Some(b) = &l.b {
        out.push((format!("{name}.bias"), b));
    }
}

fn push_norm<'m, F>(out: &mut Vec<(String, &'m HostTensor<F>)>, name: &str, n: &'m NormP<F>) {
    out.push((format!("{name}.gamma"), &n.gamma));
    out.push((format!("{name}.beta"), &n.beta));
}

impl<F: Scalar> EncoderP<F> {
    /// Linear layers of the encoder (adapter targets), in depth order with a
    /// depth index: patch embedding at 0, block `i` layers at `i + 1`.
    pub fn linear_layer_names(&self) -> Vec<(String, usize)> {
        let mut out = vec![("encoder.patch_embed".to_string(), 0)];
        for i in 0..self.blocks.len() {
            out.push((format!("encoder.block{i}.fc1"), i + 1));
            out.push((format!("encoder.block{i}.fc2"), i + 1));
        }
        out
    }

    pub fn linear_by_name(&self, name: &str) -> Option<&LinearP<F>> {
        if name == "encoder.patch_embed" {
            return Some(&self.patch_embed);
        }
        let rest = name.strip_prefix("encoder.block")?;
        let (idx, field) = rest.split_once('.')?;
        let block = self.blocks.get(idx.parse::<usize>().ok()?)?;
        match field {
            "fc1" => Some(&block.fc1),
            "fc2" => Some(&block.fc2),
            _ => None,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &HostTensor<F>)> {
        let mut out = Vec::new();
        push_linear(&mut out, "encoder.patch_embed", &self.patch_embed);
        out.push(("encoder.mask_token".to_string(), &self.mask_token));
        for (i, b) in self.blocks.iter().enumerate() {
            push_norm(&mut out, &format!("encoder.block{i}.norm"), &b.norm);
            push_linear(&mut out, &format!("encoder.block{i}.fc1"), &b.fc1);
            push_linear(&mut out, &format!("encoder.block{i}.fc2"), &b.fc2);
        }
        push_norm(&mut out, "encoder.final_norm", &self.final_norm);
        out
    }
}

impl<F: Scalar> ModelState<F> {
    /// All parameters in canonical (serialization) order.
    pub fn named_params(&self) -> Vec<(String, &HostTensor<F>)> {
        let mut out = self.encoder.named_params();
        for (i, b) in self.decoder.blocks.iter().enumerate() {
            push_norm(&mut out, &format!("decoder.block{i}.norm"), &b.norm);
            push_linear(&mut out, &format!("decoder.block{i}.fc1"), &b.fc1);
            push_linear(&mut out, &format!("decoder.block{i}.fc2"), &b.fc2);
        }
        push_linear(&mut out, "seg_head", &self.seg_head);
        push_linear(&mut out, "ssl_head", &self.ssl_head);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut HostTensor<F>)> {
        fn push_lin<'a, F>(
            out: &mut Vec<(String, &'a mut HostTensor<F>)>,
            name: &str,
            l: &'a mut LinearP<F>,
        ) {
            let LinearP { w, b } = l;
            out.push((format!("{name}.weight"), w));
            if let Some(b) = b {
                out.push((format!("{name}.bias"), b));
            }
        }
        fn push_block<'a, F>(
            out: &mut Vec<(String, &'a mut HostTensor<F>)>,
            name: &str,
            blk: &'a mut BlockP<F>,
        ) {
            let BlockP { norm, fc1, fc2 } = blk;
            out.push((format!("{name}.norm.gamma"), &mut norm.gamma));
            out.push((format!("{name}.norm.beta"), &mut norm.beta));
            push_lin(out, &format!("{name}.fc1"), fc1);
            push_lin(out, &format!("{name}.fc2"), fc2);
        }
        let mut out: Vec<(String, &mut HostTensor<F>)> = Vec::new();
        push_lin(&mut out, "encoder.patch_embed", &mut self.encoder.patch_embed);
        out.push(("encoder.mask_token".to_string(), &mut self.encoder.mask_token));
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            push_block(&mut out, &format!("encoder.block{i}"), b);
        }
        out.push(("encoder.final_norm.gamma".to_string(), &mut self.encoder.final_norm.gamma));
        out.push(("encoder.final_norm.beta".to_string(), &mut self.encoder.final_norm.beta));
        for (i, b) in self.decoder.blocks.iter_mut().enumerate() {
            push_block(&mut out, &format!("decoder.block{i}"), b);
        }
        push_lin(&mut out, "seg_head", &mut self.seg_head);
        push_lin(&mut out, "ssl_head", &mut self.ssl_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn group_of(name: &str) -> Option<ParamGroup> {
        if name.starts_with("encoder.") {
            Some(ParamGroup::Encoder)
        } else if name.starts_with("decoder.") {
            Some(ParamGroup::Decoder)
        } else if name.starts_with("seg_head") {
            Some(ParamGroup::SegHead)
        } else if name.starts_with("ssl_head") {
            Some(ParamGroup::SslHead)
        } else {
            None
        }
    }
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

fn init_linear<F: Scalar>(seed: u64, name: &str, d: usize, k: usize, w_amp: Option<f64>) -> LinearP<F> {
    let mut r = Rng::new(rng::derive(seed, name));
    let amp = w_amp.unwrap_or(1.0 / (k as f64).sqrt());
    let w = HostTensor::new(
        vec![d, k],
        (0..d * k).map(|_| lit::<F>(r.uniform(-amp, amp))).collect(),
    );
    LinearP {
        w,
        b: Some(HostTensor::zeros(vec![d])),
    }
}

fn init_norm<F: Scalar>(width: usize) -> NormP<F> {
    NormP {
        gamma: HostTensor::new(vec![width], vec![F::one(); width]),
        beta: HostTensor::zeros(vec![width]),
    }
}

fn init_block<F: Scalar>(seed: u64, name: &str, width: usize, hidden: usize) -> BlockP<F> {
    BlockP {
        norm: init_norm(width),
        fc1: init_linear(seed, &format!("{name}.fc1"), hidden, width, None),
        fc2: init_linear(seed, &format!("{name}.fc2"), width, hidden, None),
    }
}

/// Deterministic model initialization: each parameter is drawn from a stream
/// derived from `(seed, parameter path)`, so layouts can change without
/// shifting unrelated draws.
pub fn init_model<F: Scalar>(arch: &ArchMeta, seed: u64) -> Result<ModelState<F>> {
    arch.validate()?;
    let mut mt_rng = Rng::new(rng::derive(seed, "encoder.mask_token"));
    let encoder = EncoderP {
        patch_embed: init_linear(seed, "encoder.patch_embed", arch.width, arch.patch_dim(), None),
        mask_token: HostTensor::new(
            vec![arch.width],
            (0..arch.width)
                .map(|_| lit::<F>(mt_rng.uniform(-0.02, 0.02)))
                .collect(),
        ),
        blocks: (0..arch.enc_depth)
            .map(|i| init_block(seed, &format!("encoder.block{i}"), arch.width, arch.mlp_hidden))
            .collect(),
        final_norm: init_norm(arch.width),
    };
    let decoder = DecoderP {
        blocks: (0..arch.dec_depth)
            .map(|i| init_block(seed, &format!("decoder.block{i}"), arch.width, arch.mlp_hidden))
            .collect(),
    };
    let seg_head = init_linear(seed, "seg_head", arch.seg_out_dim(), arch.width, None);
    // Reconstruction head starts near the mid-intensity constant predictor
    // for [0,1] images: tiny weights, bias 0.5.
    let mut ssl_head = init_linear(seed, "ssl_head", arch.patch_dim(), arch.width, Some(0.01));
    ssl_head.b = Some(HostTensor::new(
        vec![arch.patch_dim()],
        vec![lit::<F>(0.5); arch.patch_dim()],
    ));
    Ok(ModelState {
        arch: arch.clone(),
        encoder,
        decoder,
        seg_head,
        ssl_head,
    })
}

/// Replace the segmentation head with a fresh one for `classes` classes.
/// No other parameter is touched.
pub fn reinit_seg_head<F: Scalar>(model: &mut ModelState<F>, classes: usize, seed: u64) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!("class count must be >= 2, got {classes}")));
    }
    model.arch.n_classes = classes;
    model.seg_head = init_linear(seed, "seg_head", model.arch.seg_out_dim(), model.arch.width, None);
    Ok(())
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

/// Split a `[C,H,W]` image into row-major patch tokens `[P x patch_dim]`.
pub fn patchify<F: Scalar>(arch: &ArchMeta, image: &HostTensor<F>) -> Result<Tensor<F>> {
    let expected = arch.in_channels * arch.image_h * arch.image_w;
    if image.numel() != expected {
        return Err(Error::shape(
            "patchify",
            format!("image has {} values, arch expects {expected}", image.numel()),
        ));
    }
    let ps = arch.patch_size;
    let (gh, gw) = arch.grid();
    let pd = arch.patch_dim();
    let mut out = vec![F::zero(); arch.n_patches() * pd];
    for py in 0..gh {
        for px in 0..gw {
            let p = py * gw + px;
            let mut o = p * pd;
            for c in 0..arch.in_channels {
                for iy in 0..ps {
                    for ix in 0..ps {
                        let y = py * ps + iy;
                        let x = px * ps + ix;
                        out[o] = image.data[(c * arch.image_h + y) * arch.image_w + x];
                        o += 1;
                    }
                }
            }
        }
    }
    Tensor::constant(vec![arch.n_patches(), pd], out)
}

fn activation<F: Scalar>(arch: &ArchMeta, x: Tensor<F>) -> Tensor<F> {
    match arch.activation {
        Activation::Gelu => x.gelu(),
        Activation::Identity => x,
    }
}

/// How a named linear layer is applied inside the encoder; the adapter path
/// overrides this to add its low-rank branch.
pub type LinearApply<'a, F> =
    dyn Fn(&Binder<F>, &str, &LinearP<F>, &Tensor<F>) -> crate::error::Result<Tensor<F>> + 'a;

pub fn apply_linear_plain<F: Scalar>(
    binder: &Binder<F>,
    name: &str,
    layer: &LinearP<F>,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let w = binder.bind(&format!("{name}.weight"), &layer.w);
    let b = layer.b.as_ref().map(|b| binder.bind(&format!("{name}.bias"), b));
    x.linear(&w, b.as_ref())
}

fn block_forward<F: Scalar>(
    arch: &ArchMeta,
    binder: &Binder<F>,
    prefix: &str,
    block: &BlockP<F>,
    x: Tensor<F>,
    apply: &LinearApply<'_, F>,
) -> Result<Tensor<F>> {
    let h = if arch.use_norm {
        let gamma = binder.bind(&format!("{prefix}.norm.gamma"), &block.norm.gamma);
        let beta = binder.bind(&format!("{prefix}.norm.beta"), &block.norm.beta);
        x.layer_norm(&gamma, &beta, NORM_EPS)?
    } else {
        x.clone()
    };
    let h = apply(binder, &format!("{prefix}.fc1"), &block.fc1, &h)?;
    let h = activation(arch, h);
    let h = apply(binder, &format!("{prefix}.fc2"), &block.fc2, &h)?;
    x.add(&h)
}

/// Token pipeline of the encoder: patch embedding, optional mask-token
/// substitution, residual blocks, final normalization.
pub fn encoder_forward_with<F: Scalar>(
    arch: &ArchMeta,
    enc: &EncoderP<F>,
    binder: &Binder<F>,
    image: &HostTensor<F>,
    mask: Option<&[bool]>,
    apply: &LinearApply<'_, F>,
) -> Result<Tensor<F>> {
    arch.validate()?;
    let patches = patchify(arch, image)?;
    let mut tokens = apply(binder, "encoder.patch_embed", &enc.patch_embed, &patches)?;
    if let Some(mask) = mask {
        if mask.len() != arch.n_patches() {
            return Err(Error::shape(
                "encoder",
                format!("mask length {} != patch count {}", mask.len(), arch.n_patches()),
            ));
        }
        let mt = binder.bind("encoder.mask_token", &enc.mask_token);
        tokens = tokens.replace_rows(mask, &mt)?;
    }
    for (i, block) in enc.blocks.iter().enumerate() {
        tokens = block_forward(arch, binder, &format!("encoder.block{i}"), block, tokens, apply)?;
    }
    if arch.use_norm {
        let gamma = binder.bind("encoder.final_norm.gamma", &enc.final_norm.gamma);
        let beta = binder.bind("encoder.final_norm.beta", &enc.final_norm.beta);
        tokens = tokens.layer_norm(&gamma, &beta, NORM_EPS)?;
    }
    Ok(tokens)
}

/// Encoder features of an image: `[tokens x width]`, tapped after the final
/// block and final normalization.
#[derive(Debug, Clone)]
pub struct FeatureMap<F: Scalar> {
    pub values: Tensor<F>,
    pub provenance: String,
}

pub fn forward_features<F: Scalar>(
    model: &ModelState<F>,
    binder: &Binder<F>,
    image: &HostTensor<F>,
    provenance: &str,
) -> Result<FeatureMap<F>> {
    let values = encoder_forward_with(
        &model.arch,
        &model.encoder,
        binder,
        image,
        None,
        &apply_linear_plain,
    )?;
    Ok(FeatureMap {
        values,
        provenance: format!("{provenance}/encoder.final"),
    })
}

fn decoder_forward<F: Scalar>(
    model: &ModelState<F>,
    binder: &Binder<F>,
    mut tokens: Tensor<F>,
) -> Result<Tensor<F>> {
    for (i, block) in model.decoder.blocks.iter().enumerate() {
        tokens = block_forward(
            &model.arch,
            binder,
            &format!("decoder.block{i}"),
            block,
            tokens,
            &apply_linear_plain,
        )?;
    }
    Ok(tokens)
}

/// Builds the index map from per-token pixel logits to row-major image cells.
fn unpatchify_map(arch: &ArchMeta) -> Vec<usize> {
    let ps = arch.patch_size;
    let (gh, gw) = arch.grid();
    let c = arch.n_classes;
    let token_dim = ps * ps * c;
    let mut map = vec![0usize; arch.n_cells() * c];
    for py in 0..gh {
        for px in 0..gw {
            let p = py * gw + px;
            for iy in 0..ps {
                for ix in 0..ps {
                    let cell = (py * ps + iy) * arch.image_w + (px * ps + ix);
                    for cls in 0..c {
                        map[cell * c + cls] = p * token_dim + (iy * ps + ix) * c + cls;
                    }
                }
            }
        }
    }
    map
}

/// Per-cell class logits `[cells x classes]`, cells in row-major image order.
pub fn forward_segmentation<F: Scalar>(
    model: &ModelState<F>,
    binder: &Binder<F>,
    image: &HostTensor<F>,
) -> Result<Tensor<F>> {
    let feats = forward_features(model, binder, image, "seg")?;
    let tokens = decoder_forward(model, binder, feats.values)?;
    let logits_tok = apply_linear_plain(binder, "seg_head", &model.seg_head, &tokens)?;
    let c = model.arch.n_classes;
    logits_tok.reindex(vec![model.arch.n_cells(), c], unpatchify_map(&model.arch))
}

/// Masked reconstruction: masked tokens are swapped for the learned mask
/// token before encoding; the head reconstructs every patch.
pub fn forward_ssl<F: Scalar>(
    model: &ModelState<F>,
    binder: &Binder<F>,
    image: &HostTensor<F>,
    mask: &[bool],
) -> Result<Tensor<F>> {
    let tokens = encoder_forward_with(
        &model.arch,
        &model.encoder,
        binder,
        image,
        Some(mask),
        &apply_linear_plain,
    )?;
    apply_linear_plain(binder, "ssl_head", &model.ssl_head, &tokens)
}

/// Draw a patch mask with exactly `floor(ratio * patches)` masked entries.
pub fn draw_patch_mask(n_patches: usize, ratio: f64, rng: &mut Rng) -> Vec<bool> {
    let k = (ratio * n_patches as f64).floor() as usize;
    let mut mask = vec![false; n_patches];
    for idx in rng.choose_k(n_patches, k) {
        mask[idx] = true;
    }
    mask
}

// ---------------------------------------------------------------------------
// checkpoint adapters (f32 models only; the on-disk payload is f32)
// ---------------------------------------------------------------------------

impl ModelState<f32> {
    pub fn to_entries(&self) -> Vec<(String, HostTensor<f32>)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }

    /// Rebuild a model from checkpoint entries. The class count is recovered
    /// from the stored segmentation head shape.
    pub fn from_entries(base_arch: &ArchMeta, entries: &[(String, HostTensor<f32>)]) -> Result<Self> {
        let mut arch = base_arch.clone();
        let lookup = |name: &str| -> Result<&HostTensor<f32>> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint missing parameter '{name}'")))
        };
        let seg_w = lookup("seg_head.weight")?;
        let per_px = arch.patch_size * arch.patch_size;
        if seg_w.shape.len() != 2 || seg_w.shape[0] % per_px != 0 {
            return Err(Error::Format(format!(
                "seg_head.weight shape {:?} inconsistent with patch size {}",
                seg_w.shape, arch.patch_size
            )));
        }
        arch.n_classes = seg_w.shape[0] / per_px;
        let mut model = init_model::<f32>(&arch, 0)?;
        for (name, p) in model.named_params_mut() {
            let src = lookup(&name)?;
            if src.shape != p.shape {
                return Err(Error::Format(format!(
                    "parameter '{name}': checkpoint shape {:?} != expected {:?}",
                    src.shape, p.shape
                )));
            }
            p.data.copy_from_slice(&src.data);
        }
        Ok(model)
    }

    /// Encoder parameters only, in canonical order.
    pub fn encoder_entries(&self) -> Vec<(String, HostTensor<f32>)> {
        self.encoder
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }
}

impl EncoderP<f32> {
    pub fn to_entries(&self) -> Vec<(String, HostTensor<f32>)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect()
    }
}
