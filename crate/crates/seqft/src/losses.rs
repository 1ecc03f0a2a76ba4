//! Training objectives: segmentation loss (soft Dice + cross-entropy),
//! feature-matching distillation loss, adapter refinement loss, and the
//! masked reconstruction loss of the pretext task.
//!
//! The segmentation total is the plain sum of its Dice and cross-entropy
//! components. The distillation and refinement losses are kept as separate
//! objectives driving separate backward passes; they are never folded into
//! the segmentation total.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Smoothing added to the soft-Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

/// Scalar objective plus its named components for reporting.
#[derive(Debug)]
pub struct LossValue<F: Scalar> {
    pub total: Tensor<F>,
    pub components: BTreeMap<&'static str, f64>,
}

impl<F: Scalar> LossValue<F> {
    pub fn total_value(&self) -> f64 {
        self.total.item().as_f64()
    }
}

/// Soft Dice + cross-entropy over per-cell class logits.
///
/// `logits` is `[cells x classes]`; `target` holds one label per cell. Dice
/// is computed on softmax probabilities per foreground class with smoothing
/// [`DICE_EPS`] and averaged over non-background classes; cross-entropy uses
/// mean reduction over cells.
pub fn seg_loss<F: Scalar>(logits: &Tensor<F>, target: &[usize]) -> Result<LossValue<F>> {
    let shape = logits.shape();
    let (cells, classes) = match shape {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::shape(
                "seg_loss",
                format!("expected [cells x classes] logits, got {s:?}"),
            ))
        }
    };
    if classes < 2 {
        return Err(Error::Config(format!("seg_loss needs >= 2 classes, got {classes}")));
    }
    if target.len() != cells {
        return Err(Error::shape(
            "seg_loss",
            format!("{} labels for {cells} cells", target.len()),
        ));
    }
    if let Some(cell) = target.iter().position(|&t| t >= classes) {
        return Err(Error::Data(format!(
            "label {} out of range [0,{classes}) at cell {cell}",
            target[cell]
        )));
    }

    let mut onehot = vec![F::zero(); cells * classes];
    for (cell, &t) in target.iter().enumerate() {
        onehot[cell * classes + t] = F::one();
    }
    let onehot = Tensor::constant(vec![cells, classes], onehot)?;

    let log_p = logits.log_softmax_rows()?;
    let ce = onehot
        .mul(&log_p)?
        .sum_all()
        .scale(lit::<F>(-1.0 / cells as f64));

    let p = logits.softmax_rows()?;
    let ones = Tensor::constant(vec![1, cells], vec![F::one(); cells])?;
    let inter = ones.matmul(&p.mul(&onehot)?)?; // [1 x classes] sum of p on target cells
    let p_sum = ones.matmul(&p)?;
    let t_sum = ones.matmul(&onehot)?;
    let eps = lit::<F>(DICE_EPS);
    let num = inter.scale(lit::<F>(2.0)).add_scalar(eps);
    let den = p_sum.add(&t_sum)?.add_scalar(eps);
    let dice_per_class = num.div(&den)?; // [1 x classes]
    // mean over foreground classes only
    let mut sel = vec![F::zero(); classes];
    for s in sel.iter_mut().skip(1) {
        *s = lit::<F>(1.0 / (classes - 1) as f64);
    }
    let selector = Tensor::constant(vec![classes, 1], sel)?;
    let dice_mean = dice_per_class.matmul(&selector)?.sum_all(); // scalar
    let dice_loss = dice_mean.scale(lit::<F>(-1.0)).add_scalar(F::one());

    let total = dice_loss.add(&ce)?;
    let mut components = BTreeMap::new();
    components.insert("dice", dice_loss.item().as_f64());
    components.insert("ce", ce.item().as_f64());
    Ok(LossValue { total, components })
}

fn feature_mse<F: Scalar>(op: &str, student: &FeatureMap<F>, teacher: &FeatureMap<F>) -> Result<Tensor<F>> {
    if student.values.shape() != teacher.values.shape() {
        return Err(Error::shape(
            op,
            format!(
                "student {:?} vs teacher {:?}",
                student.values.shape(),
                teacher.values.shape()
            ),
        ));
    }
    if teacher.values.requires_grad() {
        return Err(Error::Contract(format!(
            "{op}: teacher features must be detached from the gradient graph"
        )));
    }
    let d = student.values.sub(&teacher.values)?;
    Ok(d.mul(&d)?.mean_all())
}

/// Mean squared error between student and frozen teacher features.
/// Gradient reaches the student only.
pub fn kd_loss<F: Scalar>(student: &FeatureMap<F>, teacher: &FeatureMap<F>) -> Result<Tensor<F>> {
    feature_mse("kd_loss", student, teacher)
}

/// Same contract as [`kd_loss`]; a separate identity for the adapter
/// distillation stage so configs and reports can address it on its own.
pub fn refine_loss<F: Scalar>(adapted: &FeatureMap<F>, target: &FeatureMap<F>) -> Result<Tensor<F>> {
    feature_mse("refine_loss", adapted, target)
}

/// Reconstruction MSE restricted to masked patches.
///
/// `recon` and `target` are `[patches x patch_dim]`; only rows with
/// `mask[row] == true` contribute. With no masked rows the loss is zero.
pub fn masked_recon_loss<F: Scalar>(
    recon: &Tensor<F>,
    target: &Tensor<F>,
    mask: &[bool],
) -> Result<Tensor<F>> {
    if recon.shape() != target.shape() {
        return Err(Error::shape(
            "masked_recon_loss",
            format!("recon {:?} vs target {:?}", recon.shape(), target.shape()),
        ));
    }
    let (rows, width) = match recon.shape() {
        [r, w] => (*r, *w),
        s => {
            return Err(Error::shape(
                "masked_recon_loss",
                format!("expected 2-d patches, got {s:?}"),
            ))
        }
    };
    if mask.len() != rows {
        return Err(Error::shape(
            "masked_recon_loss",
            format!("mask length {} for {rows} patches", mask.len()),
        ));
    }
    let masked = mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Ok(Tensor::scalar(F::zero()));
    }
    let mut weights = vec![F::zero(); rows * width];
    for (r, &m) in mask.iter().enumerate() {
        if m {
            for wv in &mut weights[r * width..(r + 1) * width] {
                *wv = F::one();
            }
        }
    }
    let wmat = Tensor::constant(vec![rows, width], weights)?;
    let d = recon.sub(target)?;
    Ok(d.mul(&d)?
        .mul(&wmat)?
        .sum_all()
        .scale(lit::<F>(1.0 / (masked * width) as f64)))
}
