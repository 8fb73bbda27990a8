use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay applied as `p -= lr·wd·p`.
    pub weight_decay: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step(params: &mut [Tensor], grads: &[Option<Tensor>], state: &mut AdamState, lr: f32, hp: &AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hp.beta1 as f64, hp.beta2 as f64);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref();
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::shape("adam_step", format!("grad {:?} for param {:?}", g.shape(), p.shape())));
            }
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let pd = p.data_mut();
        for k in 0..pd.len() {
            let gk = g.map_or(0.0, |g| g.data()[k]) as f64;
            let mk = b1 * m[k] as f64 + (1.0 - b1) * gk;
            let vk = b2 * v[k] as f64 + (1.0 - b2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = (mk / c1) / ((vk / c2).sqrt() + hp.eps as f64);
            let decay = hp.weight_decay as f64 * pd[k] as f64;
            pd[k] = (pd[k] as f64 - lr as f64 * (update + decay)) as f32;
        }
    }
    Ok(())
}

/// Linear ramp from 0 to `base_lr` over `warmup_steps`, constant afterwards.
pub fn warmup_lr(step: u64, warmup_steps: u64, base_lr: f32) -> f32 {
    if warmup_steps == 0 || step >= warmup_steps {
        base_lr
    } else {
        (base_lr as f64 * step as f64 / warmup_steps as f64) as f32
    }
}

/// Shadow parameter copies, one set per decay.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub decays: Vec<f32>,
    pub shadows: Vec<Vec<Tensor>>,
}

impl EmaState {
    pub fn new(decays: &[f32], params: &[Tensor]) -> Self {
        Self {
            decays: decays.to_vec(),
            shadows: decays.iter().map(|_| params.to_vec()).collect(),
        }
    }

    pub fn update(&mut self, params: &[Tensor]) {
        for (d, shadow) in self.decays.iter().zip(&mut self.shadows) {
            for (s, p) in shadow.iter_mut().zip(params) {
                ema_update(s, p, *d);
            }
        }
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(shadow: &mut Tensor, params: &Tensor, decay: f32) {
    for (s, &p) in shadow.data_mut().iter_mut().zip(params.data()) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = scalar(1.5);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Some(Tensor::scalar(0.0))], &mut s, 0.1, &AdamParams::default()).unwrap();
        adam_step(&mut p, &[None], &mut s, 0.1, &AdamParams::default()).unwrap();
        assert_eq!(p[0].item(), 1.5);
    }

    #[test]
    fn descends_on_square() {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        let g = Tensor::scalar(2.0 * p[0].item());
        adam_step(&mut p, &[Some(g)], &mut s, 0.01, &AdamParams::default()).unwrap();
        assert!(p[0].item() < 1.0);
    }

    #[test]
    fn two_step_trace() {
        // hand-unrolled Adam in f64, gradients 2w for f(w) = w²
        let (b1, b2, eps, lr) = (0.9f64, 0.95f64, 1e-8f64, 0.1f64);
        let mut w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut p = scalar(1.0);
        let mut s = AdamState::new(&p);
        for t in 1..=2 {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
            let gt = Tensor::scalar(2.0 * p[0].item());
            adam_step(&mut p, &[Some(gt)], &mut s, lr as f32, &AdamParams::default()).unwrap();
            assert!((p[0].item() as f64 - w).abs() < 1e-7, "step {t}: {} vs {w}", p[0].item());
        }
    }

    #[test]
    fn warmup_examples() {
        assert_eq!(warmup_lr(0, 100, 2e-4), 0.0);
        assert_eq!(warmup_lr(100, 100, 2e-4), 2e-4);
        assert_eq!(warmup_lr(50, 100, 2e-4), 1e-4);
        assert_eq!(warmup_lr(5000, 100, 2e-4), 2e-4);
    }

    #[test]
    fn ema_examples() {
        let p = scalar(3.0);
        let mut s = scalar(1.0);
        ema_update(&mut s[0], &p[0], 0.0);
        assert_eq!(s[0].item(), 3.0);

        let mut e = EmaState::new(&[0.5, 0.9, 0.99], &scalar(0.0));
        for _ in 0..4 {
            e.update(&scalar(1.0));
        }
        for (d, sh) in e.decays.iter().zip(&e.shadows) {
            let gap = 1.0 - sh[0].item();
            assert!((gap - d.powi(4)).abs() < 1e-6);
        }
        assert_eq!(e.shadows.len(), 3);
    }
}
