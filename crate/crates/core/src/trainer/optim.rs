use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales the whole gradient set so its global L2 norm is at most
/// `max_norm`. Returns the factor applied (1 when untouched).
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    scale
}

/// Plain SGD with L2 weight decay: `p ← p − lr·(g + wd·p)`.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let mut count = 0;
    for (p, g) in params.into_iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * (d + weight_decay * *w);
        }
        count += 1;
    }
    if count != grads.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{count} parameters for {} gradients", grads.len()),
        ));
    }
    Ok(())
}
