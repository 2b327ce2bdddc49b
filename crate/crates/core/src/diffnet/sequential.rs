use super::layers::{Cache, Layer, LayerKind};
use super::param::{adamw_step, AdamW, Param};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A chain of layers without auxiliary inputs.
#[derive(Clone, Debug)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(kinds: &[LayerKind], rng: &mut RngStream) -> Result<Self> {
        let layers = kinds
            .iter()
            .map(|&k| Layer::new(k, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let (y, c) = l.forward(&h, None)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h, None)?.0;
        }
        Ok(h)
    }

    /// Backpropagates `grad`, accumulating parameter gradients, and returns
    /// the gradient with respect to the input.
    pub fn backward(&mut self, caches: &[Cache], grad: &Tensor) -> Result<Tensor> {
        if caches.len() != self.layers.len() {
            return Err(Error::invalid("caches", "cache count differs from layer count"));
        }
        let mut g = grad.clone();
        for (l, c) in self.layers.iter_mut().zip(caches).rev() {
            let lg = l.backward(c, &g)?;
            l.accumulate(&lg.params)?;
            g = lg.input;
        }
        Ok(g)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn step(&mut self, opt: &AdamW) -> Result<()> {
        for p in self.params_mut() {
            adamw_step(p, opt)?;
        }
        Ok(())
    }
}
