use alloc::format;
use alloc::vec::Vec;

use crate::data::{downsample_labels, LabelMap, VOID};
use crate::{Error, Real, Result, Tensor};

/// Weight of the context-branch auxiliary loss.
pub const AUX_WEIGHT: f64 = 0.4;

/// Scalar loss with its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossGrad<T = f32> {
    pub loss: f64,
    pub grad: Tensor<T>,
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`.
/// `labels` holds `n·h·w` entries in batch-major, row-major order.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[u8], ignore_index: u8) -> Result<LossGrad<T>> {
    let c = logits.c();
    let pixels = logits.len() / c;
    if labels.len() != pixels {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for logits of shape {:?}", labels.len(), logits.dims()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l != ignore_index && l as usize >= c) {
        return Err(Error::InvalidLabel { label, classes: c });
    }
    let count = labels.iter().filter(|&&l| l != ignore_index).count();
    let mut grad = Tensor::zeros(logits.dims());
    if count == 0 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut p = alloc::vec![0.0f64; c];
    for ((z, g), &l) in logits.data().chunks_exact(c).zip(grad.data_mut().chunks_exact_mut(c)).zip(labels) {
        if l == ignore_index {
            continue;
        }
        let m = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut s = 0.0;
        for (pi, zi) in p.iter_mut().zip(z) {
            *pi = num_traits::Float::exp(zi.as_f64() - m);
            s += *pi;
        }
        loss += (num_traits::Float::ln(s) + m - z[l as usize].as_f64()) * inv;
        for (k, (gi, pi)) in g.iter_mut().zip(&p).enumerate() {
            let onehot = if k == l as usize { 1.0 } else { 0.0 };
            *gi = T::of_f64((pi / s - onehot) * inv);
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Nearest-neighbour downsampling of a flattened label batch.
pub fn downsample_label_batch(labels: &[u8], n: usize, h: usize, w: usize, factor: usize) -> Result<Vec<u8>> {
    if labels.len() != n * h * w {
        return Err(Error::DataLength { dims: [n, h, w, 1], len: labels.len() });
    }
    let mut out = Vec::with_capacity(labels.len() / (factor * factor).max(1));
    for chunk in labels.chunks_exact(h * w) {
        let map = LabelMap::new(h, w, chunk.to_vec())?;
        out.extend_from_slice(downsample_labels(&map, factor)?.data());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ContextNetLoss<T = f32> {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    pub grad_final: Tensor<T>,
    pub grad_aux: Option<Tensor<T>>,
}

/// `CE(final, labels) + aux_weight · CE(aux, labels downsampled to the aux
/// resolution)`. `final_logits` must be at label resolution.
pub fn contextnet_loss<T: Real>(
    final_logits: &Tensor<T>,
    aux_logits: Option<&Tensor<T>>,
    labels: &[u8],
    aux_weight: f64,
) -> Result<ContextNetLoss<T>> {
    let main = cross_entropy(final_logits, labels, VOID)?;
    let mut out = ContextNetLoss { total: main.loss, main: main.loss, aux: 0.0, grad_final: main.grad, grad_aux: None };
    let Some(aux_logits) = aux_logits else { return Ok(out) };
    let [n, h, w, _] = final_logits.dims();
    let (ah, aw) = (aux_logits.h(), aux_logits.w());
    if aux_logits.n() != n || ah == 0 || h % ah != 0 || w % aw != 0 || h / ah != w / aw {
        return Err(Error::dim(
            "contextnet_loss",
            format!("aux logits {:?} not an integer reduction of {:?}", aux_logits.dims(), final_logits.dims()),
        ));
    }
    let aux_labels = downsample_label_batch(labels, n, h, w, h / ah)?;
    let aux = cross_entropy(aux_logits, &aux_labels, VOID)?;
    out.aux = aux.loss;
    out.total += aux_weight * aux.loss;
    let wt = T::of_f64(aux_weight);
    out.grad_aux = Some(aux.grad.map(|g| g * wt));
    Ok(out)
}
