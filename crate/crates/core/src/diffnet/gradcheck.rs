use super::layers::{Layer, LayerKind};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the scalar value and its analytic gradient at the given
/// point. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, &all)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(mut f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("h", "step must be positive"));
    }
    if let Some(&i) = coords.iter().find(|&&i| i >= x.len()) {
        return Err(Error::invalid("coords", format!("coordinate {i} out of range {}", x.len())));
    }
    let (v0, analytic) = f(x)?;
    if !v0.is_finite() {
        return Err(Error::Divergence("non-finite value at base point".into()));
    }
    x.same_dims(&analytic, "analytic gradient")?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Divergence(format!("non-finite value probing coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Checks every gradient of one freshly initialised layer (input, each
/// parameter tensor and the auxiliary input if any) against central
/// differences of `sum(r * layer(x))` for a random projection `r`.
/// Returns the worst relative error.
pub fn layer_grad_error(kind: LayerKind, input_dims: &[usize], seed: u64, h: f64) -> Result<f64> {
    let mut rng = RngStream::new(seed, 0);
    let layer = Layer::new(kind, &mut rng)?;
    let mut x = rng.gaussian(input_dims);
    if kind == LayerKind::Relu {
        // keep probes away from the kink
        x = x.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
    }
    let aux = match kind {
        LayerKind::ResidualBlock {
            temb_dim: Some(td), ..
        } => Some(rng.gaussian(&[td])),
        _ => None,
    };
    let (y, cache) = layer.forward(&x, aux.as_ref())?;
    let r = rng.gaussian(y.dims());
    let grads = layer.backward(&cache, &r)?;
    let project = |y: &Tensor| y.dot(&r);

    let mut worst = grad_check(
        |xp| {
            let (yp, _) = layer.forward(xp, aux.as_ref())?;
            Ok((project(&yp)?, grads.input.clone()))
        },
        &x,
        h,
    )?;
    if let (Some(a), Some(ga)) = (&aux, &grads.aux) {
        let e = grad_check(
            |ap| {
                let (yp, _) = layer.forward(&x, Some(ap))?;
                Ok((project(&yp)?, ga.clone()))
            },
            a,
            h,
        )?;
        worst = worst.max(e);
    }
    let n_params = layer.params().len();
    if grads.params.len() != n_params {
        return Err(Error::invalid("layer", "parameter gradient count mismatch"));
    }
    for (i, g) in grads.params.iter().enumerate() {
        let base = layer.params()[i].value.clone();
        let mut probe_layer = layer.clone();
        let e = grad_check(
            |pv| {
                probe_layer.params_mut()[i].value = pv.clone();
                let (yp, _) = probe_layer.forward(&x, aux.as_ref())?;
                Ok((project(&yp)?, g.clone()))
            },
            &base,
            h,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Ten small random shapes (with kind-compatible channel counts) per layer
/// kind, used by the layer gradient suites.
pub fn random_layer_cases(seed: u64) -> Vec<(LayerKind, Vec<usize>)> {
    let mut rng = RngStream::new(seed, 1);
    let mut pick = |lo: u64, hi: u64| rng.int_range(lo, hi) as usize;
    let mut cases = Vec::new();
    for _ in 0..10 {
        let (c, o, h, w) = (pick(1, 3), pick(1, 3), pick(2, 6), pick(2, 6));
        let g = pick(1, 2);
        let stride = pick(1, 2);
        let td = 2 * pick(1, 3);
        let n = pick(1, 4);
        cases.push((LayerKind::Conv3x3 { in_ch: c, out_ch: o, stride }, vec![c, h, w]));
        cases.push((LayerKind::Upsample2xConv3x3 { in_ch: c, out_ch: o }, vec![c, h, w]));
        cases.push((LayerKind::GroupNorm { channels: c * g, groups: g }, vec![c * g, h, w]));
        cases.push((LayerKind::Silu, vec![c, h, w]));
        cases.push((LayerKind::Relu, vec![c, h, w]));
        cases.push((LayerKind::Tanh, vec![c, h, w]));
        cases.push((LayerKind::ChannelL2Norm, vec![c + 1, h, w]));
        cases.push((LayerKind::Linear { in_dim: c + 1, out_dim: o }, vec![n, c + 1]));
        cases.push((LayerKind::SinusoidalTimeEmbed { dim: td }, vec![n]));
        cases.push((
            // at least two channels per group, otherwise biases ahead of a
            // norm are exactly cancelled and their gradient is identically zero
            LayerKind::ResidualBlock {
                channels: (c + 1) * g,
                groups: g,
                temb_dim: if stride == 1 { Some(td) } else { None },
            },
            vec![(c + 1) * g, h, w],
        ));
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.7, -0.1, 5.0]).unwrap();
        let err = grad_check(|x| Ok((x.data().iter().map(|v| v * v).sum(), x.scale(2.0))), &x, 1e-4)
            .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(|x| Ok((x.data().iter().map(|v| v * v).sum(), x.clone())), &x, 1e-4)
            .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn every_layer_kind_on_ten_shapes() {
        let cases = random_layer_cases(5);
        assert_eq!(cases.len(), 100);
        for (i, (kind, dims)) in cases.into_iter().enumerate() {
            let err = layer_grad_error(kind, &dims, 100 + i as u64, 1e-4).unwrap();
            assert!(err < 1e-4, "{kind:?} {dims:?}: {err}");
        }
    }

    #[test]
    fn non_finite_is_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = grad_check(|x| Ok((1.0 / x.data()[0] - 1.0 / x.data()[0], x.clone())), &x, 1e-4);
        assert!(r.is_err());
    }
}
