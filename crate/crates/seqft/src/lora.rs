//! Low-rank adapters over a frozen encoder, and their exact merge-back.
//!
//! Every linear layer `W ∈ R^{d×k}` of the frozen encoder gets a pair
//! `A ∈ R^{r×k}`, `B ∈ R^{d×r}`; the adapted layer computes
//! `y = W x + B (A x) + bias` and merging folds the update into the weight:
//! `W' = W + B·A`. `B` starts at zero so the adapted encoder is exactly the
//! base encoder until training moves it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::{encoder_forward_with, ArchMeta, EncoderP, FeatureMap, LinearP};
use crate::rng::{self, Rng};
use crate::scalar::{lit, Scalar};
use crate::tensor::{matmul_raw, Binder, HostTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F> {
    /// Path of the linear layer this adapter attaches to.
    pub layer_name: String,
    /// `[r x k]`.
    pub a: HostTensor<F>,
    /// `[d x r]`.
    pub b: HostTensor<F>,
    pub rank: usize,
}

/// Frozen encoder snapshot plus one adapter per linear layer. Only the
/// adapters are trainable.
#[derive(Debug, Clone)]
pub struct AdaptedEncoder<F> {
    pub arch: ArchMeta,
    pub base: EncoderP<F>,
    pub adapters: Vec<LoraAdapter<F>>,
}

impl<F: Scalar> AdaptedEncoder<F> {
    pub fn adapter_for(&self, layer_name: &str) -> Option<&LoraAdapter<F>> {
        self.adapters.iter().find(|a| a.layer_name == layer_name)
    }
}

/// Insert rank-`rank` adapters into every linear layer of the encoder.
/// `B` is zero-initialized and `A` small uniform, so the adapted forward is
/// bit-identical to the base forward at the start.
pub fn inject<F: Scalar>(
    arch: &ArchMeta,
    encoder: &EncoderP<F>,
    rank: usize,
    seed: u64,
) -> Result<AdaptedEncoder<F>> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be positive".into()));
    }
    let mut adapters = Vec::new();
    for (name, _depth) in encoder.linear_layer_names() {
        let layer = encoder
            .linear_by_name(&name)
            .expect("linear_layer_names only yields known layers");
        let (d, k) = layer.out_in();
        if rank > d.min(k) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} exceeds min(d,k)={} for layer '{name}' ({d}x{k})",
                d.min(k)
            )));
        }
        let mut r = Rng::new(rng::derive(seed, &format!("{name}.lora")));
        let amp = 1.0 / (k as f64).sqrt();
        let a = HostTensor::new(
            vec![rank, k],
            (0..rank * k).map(|_| lit::<F>(r.uniform(-amp, amp))).collect(),
        );
        let b = HostTensor::zeros(vec![d, rank]);
        adapters.push(LoraAdapter {
            layer_name: name,
            a,
            b,
            rank,
        });
    }
    Ok(AdaptedEncoder {
        arch: arch.clone(),
        base: encoder.clone(),
        adapters,
    })
}

/// Encoder features through the frozen base plus adapter branches:
/// `y = W x + bias + B (A x)` at every linear layer.
///
/// `base_binder` carries the frozen weights; `lora_binder` carries A/B and is
/// the one to read gradients from.
pub fn adapted_forward<F: Scalar>(
    adapted: &AdaptedEncoder<F>,
    base_binder: &Binder<F>,
    lora_binder: &Binder<F>,
    image: &HostTensor<F>,
) -> Result<FeatureMap<F>> {
    let by_name: HashMap<&str, &LoraAdapter<F>> = adapted
        .adapters
        .iter()
        .map(|a| (a.layer_name.as_str(), a))
        .collect();
    let apply = move |binder: &Binder<F>, name: &str, layer: &LinearP<F>, x: &Tensor<F>| {
        let w = binder.bind(&format!("{name}.weight"), &layer.w);
        let b = layer.b.as_ref().map(|b| binder.bind(&format!("{name}.bias"), b));
        let base = x.linear(&w, b.as_ref())?;
        match by_name.get(name) {
            Some(ad) => {
                let a_t = lora_binder.bind(&format!("{name}.lora.A"), &ad.a);
                let b_t = lora_binder.bind(&format!("{name}.lora.B"), &ad.b);
                let delta = x.linear(&a_t, None)?.linear(&b_t, None)?;
                base.add(&delta)
            }
            None => Ok(base),
        }
    };
    let values = encoder_forward_with(
        &adapted.arch,
        &adapted.base,
        base_binder,
        image,
        None,
        &apply,
    )?;
    Ok(FeatureMap {
        values,
        provenance: "adapted/encoder.final".to_string(),
    })
}

/// `W' = W + B·A` for one layer.
pub fn merged_weight<F: Scalar>(w: &HostTensor<F>, adapter: &LoraAdapter<F>) -> HostTensor<F> {
    let (d, k) = (w.shape[0], w.shape[1]);
    let r = adapter.rank;
    let delta = matmul_raw(&adapter.b.data, &adapter.a.data, d, r, k);
    let data = w
        .data
        .iter()
        .zip(&delta)
        .map(|(&wv, &dv)| wv + dv)
        .collect();
    HostTensor::new(w.shape.clone(), data)
}

/// Fold every adapter into the base weights. Biases, normalization
/// parameters, and the mask token are bit-identical copies; the parameter
/// count and architecture are unchanged.
pub fn merge<F: Scalar>(adapted: &AdaptedEncoder<F>) -> Result<EncoderP<F>> {
    let mut merged = adapted.base.clone();
    for ad in &adapted.adapters {
        let layer = adapted
            .base
            .linear_by_name(&ad.layer_name)
            .ok_or_else(|| Error::Config(format!("adapter for unknown layer '{}'", ad.layer_name)))?;
        let (d, k) = layer.out_in();
        if ad.a.shape != [ad.rank, k] || ad.b.shape != [d, ad.rank] {
            return Err(Error::shape(
                "merge",
                format!(
                    "adapter '{}' shapes A{:?}/B{:?} incompatible with W [{d}x{k}]",
                    ad.layer_name, ad.a.shape, ad.b.shape
                ),
            ));
        }
        let new_w = merged_weight(&layer.w, ad);
        let target = match ad.layer_name.as_str() {
            "encoder.patch_embed" => &mut merged.patch_embed,
            name => {
                let rest = name
                    .strip_prefix("encoder.block")
                    .ok_or_else(|| Error::Config(format!("unexpected layer '{name}'")))?;
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("unexpected layer '{name}'")))?;
                let block = merged
                    .blocks
                    .get_mut(idx.parse::<usize>().map_err(|_| {
                        Error::Config(format!("unexpected layer '{name}'"))
                    })?)
                    .ok_or_else(|| Error::Config(format!("unexpected layer '{name}'")))?;
                match field {
                    "fc1" => &mut block.fc1,
                    "fc2" => &mut block.fc2,
                    _ => return Err(Error::Config(format!("unexpected layer '{name}'"))),
                }
            }
        };
        target.w = new_w;
    }
    Ok(merged)
}

// ---------------------------------------------------------------------------
// checkpoint adapters
// ---------------------------------------------------------------------------

pub fn adapters_to_entries(adapters: &[LoraAdapter<f32>]) -> Vec<(String, HostTensor<f32>)> {
    let mut out = Vec::new();
    for a in adapters {
        out.push((format!("{}.lora.A", a.layer_name), a.a.clone()));
        out.push((format!("{}.lora.B", a.layer_name), a.b.clone()));
    }
    out
}

pub fn adapters_from_entries(entries: &[(String, HostTensor<f32>)]) -> Result<Vec<LoraAdapter<f32>>> {
    let mut out: Vec<LoraAdapter<f32>> = Vec::new();
    for (name, t) in entries {
        if let Some(layer) = name.strip_suffix(".lora.A") {
            let rank = t.shape[0];
            out.push(LoraAdapter {
                layer_name: layer.to_string(),
                a: t.clone(),
                b: HostTensor::zeros(vec![0]),
                rank,
            });
        }
    }
    for (name, t) in entries {
        if let Some(layer) = name.strip_suffix(".lora.B") {
            let ad = out
                .iter_mut()
                .find(|a| a.layer_name == layer)
                .ok_or_else(|| Error::Format(format!("B without A for layer '{layer}'")))?;
            if t.shape.len() != 2 || t.shape[1] != ad.rank {
                return Err(Error::Format(format!(
                    "adapter '{layer}': B shape {:?} incompatible with rank {}",
                    t.shape, ad.rank
                )));
            }
            ad.b = t.clone();
        }
    }
    if let Some(bad) = out.iter().find(|a| a.b.shape == [0]) {
        return Err(Error::Format(format!("A without B for layer '{}'", bad.layer_name)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward_features, init_model, ModelState};
    use crate::optim::{AdamConfig, AdamW};

    fn bits<F: Scalar>(xs: &[F]) -> Vec<u64> {
        xs.iter().map(|v| v.as_f64().to_bits()).collect()
    }

    #[test]
    fn inject_is_a_bitwise_no_op_and_covers_every_linear_layer() {
        let arch = ArchMeta::default();
        let model: ModelState<f32> = init_model(&arch, 5).unwrap();
        let adapted = inject(&arch, &model.encoder, 2, 17).unwrap();
        assert_eq!(
            adapted.adapters.len(),
            model.encoder.linear_layer_names().len()
        );
        let img = HostTensor::new(
            vec![1, 32, 32],
            (0..1024).map(|i| (i % 7) as f32 * 0.1).collect(),
        );
        let base = forward_features(&model, &Binder::frozen(), &img, "m").unwrap();
        let ad = adapted_forward(&adapted, &Binder::frozen(), &Binder::frozen(), &img).unwrap();
        assert_eq!(bits(base.values.data()), bits(ad.values.data()));
    }

    #[test]
    fn rank_too_large_names_the_layer() {
        let arch = ArchMeta::default();
        let model: ModelState<f32> = init_model(&arch, 5).unwrap();
        // patch_embed is [32x16]; min(d,k)=16
        let err = inject(&arch, &model.encoder, 17, 0).unwrap_err().to_string();
        assert!(err.contains("encoder.patch_embed"), "{err}");
    }

    #[test]
    fn hand_example_merged_weight_and_application() {
        // W = I2, A = [[1,2]], B = [[3],[4]]  =>  W' = [[4,6],[4,9]]
        let w = HostTensor::new(vec![2, 2], vec![1.0f64, 0.0, 0.0, 1.0]);
        let adapter = LoraAdapter {
            layer_name: "l".into(),
            a: HostTensor::new(vec![1, 2], vec![1.0, 2.0]),
            b: HostTensor::new(vec![2, 1], vec![3.0, 4.0]),
            rank: 1,
        };
        let merged = merged_weight(&w, &adapter);
        assert_eq!(merged.data, vec![4.0, 6.0, 4.0, 9.0]);
        // x = [1, 0] -> W' x = [4, 4]
        let x = Tensor::constant(vec![1, 2], vec![1.0f64, 0.0]).unwrap();
        let wt = Tensor::constant(vec![2, 2], merged.data.clone()).unwrap();
        let y = x.linear(&wt, None).unwrap();
        assert_eq!(y.data(), &[4.0, 4.0]);
    }

    #[test]
    fn inject_then_merge_reproduces_base_bit_exactly() {
        let arch = ArchMeta::default();
        let model: ModelState<f32> = init_model(&arch, 11).unwrap();
        let adapted = inject(&arch, &model.encoder, 2, 3).unwrap();
        let merged = merge(&adapted).unwrap();
        for ((n1, p1), (n2, p2)) in model
            .encoder
            .named_params()
            .iter()
            .zip(merged.named_params())
        {
            assert_eq!(n1, &n2);
            assert_eq!(bits(&p1.data), bits(&p2.data), "param {n1}");
        }
    }

    #[test]
    fn merge_equivalence_on_random_adapters() {
        let arch = ArchMeta::default();
        let model: ModelState<f64> = init_model(&arch, 2).unwrap();
        let mut adapted = inject(&arch, &model.encoder, 2, 9).unwrap();
        let mut r = Rng::new(31);
        for ad in &mut adapted.adapters {
            for v in &mut ad.b.data {
                *v = r.uniform(-0.2, 0.2);
            }
        }
        let merged_enc = merge(&adapted).unwrap();
        let merged_model = ModelState {
            arch: arch.clone(),
            encoder: merged_enc,
            decoder: model.decoder.clone(),
            seg_head: model.seg_head.clone(),
            ssl_head: model.ssl_head.clone(),
        };
        for trial in 0..10 {
            let img = HostTensor::new(
                vec![1, 32, 32],
                (0..1024)
                    .map(|i| ((i * (trial + 3)) % 11) as f64 * 0.07)
                    .collect(),
            );
            let via_adapter =
                adapted_forward(&adapted, &Binder::frozen(), &Binder::frozen(), &img).unwrap();
            let via_merge = forward_features(&merged_model, &Binder::frozen(), &img, "m").unwrap();
            for (a, b) in via_adapter.values.data().iter().zip(via_merge.values.data()) {
                let tol = 1e-5 * (1.0 + b.abs());
                assert!((a - b).abs() < tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn frozen_base_is_bit_identical_after_adapter_training() {
        let arch = ArchMeta::default();
        let model: ModelState<f32> = init_model(&arch, 4).unwrap();
        let snapshot: Vec<Vec<u64>> = model
            .encoder
            .named_params()
            .iter()
            .map(|(_, p)| bits(&p.data))
            .collect();
        let mut adapted = inject(&arch, &model.encoder, 2, 1).unwrap();
        let img = HostTensor::new(
            vec![1, 32, 32],
            (0..1024).map(|i| ((i % 13) as f32) * 0.05).collect(),
        );
        let target = forward_features(&model, &Binder::frozen(), &img, "t")
            .unwrap()
            .values;
        let target_const =
            Tensor::constant(target.shape().to_vec(), target.data().to_vec()).unwrap();
        let mut opt: AdamW<f32> = AdamW::new(AdamConfig::with_lr(1e-2));
        for _ in 0..5 {
            let lora_binder = Binder::trainable();
            let out = adapted_forward(&adapted, &Binder::frozen(), &lora_binder, &img).unwrap();
            let d = out.values.sub(&target_const).unwrap();
            let loss = d.mul(&d).unwrap().mean_all();
            loss.backward().unwrap();
            let grads = lora_binder.grads();
            let mut params: Vec<(String, &mut HostTensor<f32>)> = Vec::new();
            for ad in &mut adapted.adapters {
                params.push((format!("{}.lora.A", ad.layer_name), &mut ad.a));
                params.push((format!("{}.lora.B", ad.layer_name), &mut ad.b));
            }
            opt.step(params.iter_mut().map(|(n, p)| (n.as_str(), &mut **p)), &grads)
                .unwrap();
        }
        let after: Vec<Vec<u64>> = adapted
            .base
            .named_params()
            .iter()
            .map(|(_, p)| bits(&p.data))
            .collect();
        assert_eq!(snapshot, after);
    }

    #[test]
    fn delta_w_rank_is_bounded_by_adapter_rank() {
        // Gaussian-elimination rank of B.A on a small layer.
        let mut r = Rng::new(8);
        let (d, k, rank) = (6usize, 5usize, 2usize);
        let a = HostTensor::new(
            vec![rank, k],
            (0..rank * k).map(|_| r.uniform(-1.0, 1.0)).collect(),
        );
        let b = HostTensor::new(
            vec![d, rank],
            (0..d * rank).map(|_| r.uniform(-1.0, 1.0)).collect(),
        );
        let mut delta = matmul_raw(&b.data, &a.data, d, rank, k);
        // row-echelon rank with pivot tolerance
        let mut rnk = 0usize;
        for col in 0..k {
            let Some(pivot) = (rnk..d).max_by(|&i, &j| {
                delta[i * k + col]
                    .abs()
                    .partial_cmp(&delta[j * k + col].abs())
                    .unwrap()
            }) else {
                break;
            };
            if delta[pivot * k + col].abs() < 1e-6 {
                continue;
            }
            for c in 0..k {
                delta.swap(rnk * k + c, pivot * k + c);
            }
            for row in (rnk + 1)..d {
                let f = delta[row * k + col] / delta[rnk * k + col];
                for c in 0..k {
                    delta[row * k + c] -= f * delta[rnk * k + c];
                }
            }
            rnk += 1;
        }
        assert!(rnk <= rank, "rank {rnk} > adapter rank {rank}");
        assert!(rnk >= 1);
    }

    #[test]
    fn adapter_entries_round_trip() {
        let arch = ArchMeta::default();
        let model: ModelState<f32> = init_model(&arch, 4).unwrap();
        let mut adapted = inject(&arch, &model.encoder, 2, 1).unwrap();
        let mut r = Rng::new(2);
        for ad in &mut adapted.adapters {
            for v in &mut ad.b.data {
                *v = r.uniform(-0.1, 0.1) as f32;
            }
        }
        let entries = adapters_to_entries(&adapted.adapters);
        let back = adapters_from_entries(&entries).unwrap();
        assert_eq!(adapted.adapters, back);
    }
}
