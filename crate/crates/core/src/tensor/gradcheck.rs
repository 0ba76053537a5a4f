//! Finite-difference oracles for gradient verification.
//!
//! The oracle never touches backward rules: it re-runs the forward pass at
//! perturbed parameter values and forms central differences. Checks compare
//! Jacobian-vector products along the analytic gradient direction, which
//! keeps the comparison well-conditioned in f32.

use alloc::vec::Vec;

use super::{zero_grads, Error, Result, Tensor};

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central-difference directional derivative of `f` at `param` along `dir`.
/// The parameter buffer is restored before returning.
pub fn numeric_directional(
    f: &mut dyn FnMut() -> Result<f32>,
    param: &Tensor,
    dir: &[f32],
    h: f32,
) -> Result<f64> {
    let orig = param.to_vec();
    if dir.len() != orig.len() {
        return Err(Error::InvalidArgument {
            op: "numeric_directional",
            detail: "direction length mismatch".into(),
        });
    }
    let mut perturbed = orig.clone();
    for (p, d) in perturbed.iter_mut().zip(dir) {
        *p += h * d;
    }
    param.set_data(&perturbed)?;
    let fp = f()? as f64;
    for (p, (&o, d)) in perturbed.iter_mut().zip(orig.iter().zip(dir)) {
        *p = o - h * d;
    }
    param.set_data(&perturbed)?;
    let fm = f()? as f64;
    param.set_data(&orig)?;
    Ok((fp - fm) / (2.0 * h as f64))
}

/// Per-element central differences; only sensible for small tensors.
pub fn numeric_gradient(
    f: &mut dyn FnMut() -> Result<f32>,
    param: &Tensor,
    h: f32,
) -> Result<Vec<f64>> {
    let orig = param.to_vec();
    let mut out = Vec::with_capacity(orig.len());
    let mut work = orig.clone();
    for i in 0..orig.len() {
        work[i] = orig[i] + h;
        param.set_data(&work)?;
        let fp = f()? as f64;
        work[i] = orig[i] - h;
        param.set_data(&work)?;
        let fm = f()? as f64;
        work[i] = orig[i];
        out.push((fp - fm) / (2.0 * h as f64));
    }
    param.set_data(&orig)?;
    Ok(out)
}

/// Verifies the gradient of `build`'s loss with respect to every parameter
/// at once: a single central difference along the joint gradient direction
/// spanning all parameters. The signal is the full gradient norm, which
/// keeps the comparison well above f32 forward noise even for deep
/// compositions.
pub fn check_loss_gradients_joint(
    build: &mut dyn FnMut() -> Result<Tensor>,
    params: &[Tensor],
    h: f32,
) -> Result<f64> {
    zero_grads(params);
    let loss = build()?;
    loss.backward()?;
    let grads: Vec<Vec<f32>> = params
        .iter()
        .map(|p| {
            p.grad().ok_or(Error::InvalidArgument {
                op: "check_loss_gradients_joint",
                detail: "parameter received no gradient".into(),
            })
        })
        .collect::<Result<_>>()?;
    let norm: f64 = libm::sqrt(
        grads.iter().flat_map(|g| g.iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>(),
    );
    if norm < 1e-12 {
        return Err(Error::InvalidArgument {
            op: "check_loss_gradients_joint",
            detail: "joint gradient is identically zero".into(),
        });
    }
    let originals: Vec<Vec<f32>> = params.iter().map(|p| p.to_vec()).collect();
    let set_offset = |sign: f32| -> Result<()> {
        for ((p, orig), g) in params.iter().zip(&originals).zip(&grads) {
            let data: Vec<f32> = orig
                .iter()
                .zip(g)
                .map(|(&o, &gv)| o + sign * h * (gv as f64 / norm) as f32)
                .collect();
            p.set_data(&data)?;
        }
        Ok(())
    };
    set_offset(1.0)?;
    let fp = build()?.item()? as f64;
    set_offset(-1.0)?;
    let fm = build()?.item()? as f64;
    for (p, orig) in params.iter().zip(&originals) {
        p.set_data(orig)?;
    }
    let fd = (fp - fm) / (2.0 * h as f64);
    zero_grads(params);
    Ok(relative_error(norm, fd))
}

/// Builds the loss with `build`, backpropagates, then verifies each
/// parameter's gradient against a finite-difference JVP along its own
/// gradient direction. Returns the worst relative error seen.
///
/// Parameters whose analytic gradient is identically zero are checked with
/// an absolute tolerance instead (the finite difference must also vanish).
pub fn check_loss_gradients(
    build: &mut dyn FnMut() -> Result<Tensor>,
    params: &[Tensor],
    h: f32,
) -> Result<f64> {
    zero_grads(params);
    let loss = build()?;
    loss.backward()?;
    let mut worst = 0.0f64;
    for p in params {
        let grad = p.grad().ok_or(Error::InvalidArgument {
            op: "check_loss_gradients",
            detail: "parameter received no gradient".into(),
        })?;
        let norm: f64 = libm::sqrt(grad.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>());
        let mut f = || build()?.item();
        if norm < 1e-12 {
            // degenerate direction: probe along all-ones instead
            let n = grad.len();
            let dir = alloc::vec![1.0f32 / libm::sqrtf(n as f32); n];
            let fd = numeric_directional(&mut f, p, &dir, h)?;
            if fd.abs() > 1e-4 {
                return Err(Error::InvalidArgument {
                    op: "check_loss_gradients",
                    detail: alloc::format!("zero analytic gradient but finite difference {fd}"),
                });
            }
            continue;
        }
        let dir: Vec<f32> = grad.iter().map(|&v| (v as f64 / norm) as f32).collect();
        let analytic: f64 = grad.iter().zip(&dir).map(|(&g, &d)| g as f64 * d as f64).sum();
        let fd = numeric_directional(&mut f, p, &dir, h)?;
        let rel = relative_error(analytic, fd);
        if rel > worst {
            worst = rel;
        }
    }
    zero_grads(params);
    Ok(worst)
}
