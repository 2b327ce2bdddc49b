use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor with its gradient accumulator and AdamW moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u64,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let dims = value.dims().to_vec();
        Self {
            value,
            grad: Tensor::zeros(&dims),
            adam_m: Tensor::zeros(&dims),
            adam_v: Tensor::zeros(&dims),
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        self.grad.add_scaled(g, 1.0)
    }
}

/// FNV-1a digest of parameter values (shapes and exact bits), used to
/// verify that two computations saw identical weights.
pub fn value_digest<'a>(params: impl IntoIterator<Item = &'a Param>) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |word: u64| {
        for b in word.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    for p in params {
        for &d in p.value.dims() {
            eat(d as u64);
        }
        for v in p.value.data() {
            eat(v.to_bits());
        }
    }
    h
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update using `param.grad`.
///
/// Decay is applied as `theta *= 1 - lr * weight_decay` before the
/// bias-corrected Adam step. A zero learning rate leaves `value` untouched.
pub fn adamw_step(param: &mut Param, opt: &AdamW) -> Result<()> {
    opt.validate()?;
    if !param.grad.all_finite() {
        return Err(Error::Divergence(format!(
            "non-finite gradient in parameter of dims {:?}",
            param.value.dims()
        )));
    }
    param.step_count += 1;
    let t = param.step_count as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - opt.lr * opt.weight_decay;
    let theta = param.value.data_mut();
    let g = param.grad.data();
    let m = param.adam_m.data_mut();
    let v = param.adam_v.data_mut();
    for i in 0..theta.len() {
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
        if opt.lr == 0.0 {
            continue;
        }
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] = theta[i] * decay - opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    Ok(())
}
