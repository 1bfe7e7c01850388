//! SGD, AdamW and Adafactor.
//!
//! Updates are computed in `f64` and stored back in the parameter type.

use iml_numerics::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdafactorConfig {
    /// Fixed learning rate; `None` uses the relative step `min(1e-2, 1/sqrt(t))`.
    pub lr: Option<f64>,
    /// Added to the squared gradient.
    pub eps1: f64,
    /// Floor on the parameter RMS used by `scale_parameter`.
    pub eps2: f64,
    pub clip_threshold: f64,
    /// Second-moment decay is `beta2_t = 1 - t^decay_rate`.
    pub decay_rate: f64,
    /// Optional first-moment coefficient.
    pub beta1: Option<f64>,
    pub weight_decay: f64,
    pub scale_parameter: bool,
    pub warmup_init: bool,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            lr: None,
            eps1: 1e-30,
            eps2: 1e-3,
            clip_threshold: 1.0,
            decay_rate: -0.8,
            beta1: None,
            weight_decay: 0.0,
            scale_parameter: true,
            warmup_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adamw {
        lr: f64,
        #[serde(default = "beta1_default")]
        beta1: f64,
        #[serde(default = "beta2_default")]
        beta2: f64,
        #[serde(default = "eps_default")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adafactor(AdafactorConfig),
}

fn beta1_default() -> f64 {
    0.9
}
fn beta2_default() -> f64 {
    0.999
}
fn eps_default() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adafactor(AdafactorConfig::default())
    }
}

impl OptimizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgd { .. } => "sgd",
            OptimizerConfig::Adamw { .. } => "adamw",
            OptimizerConfig::Adafactor(_) => "adafactor",
        }
    }
}

/// Per-parameter auxiliary state.
#[derive(Debug, Clone, PartialEq)]
enum Slot {
    None,
    Adam { m: Vec<f64>, v: Vec<f64> },
    Factored { row: Vec<f64>, col: Vec<f64>, m: Option<Vec<f64>> },
    Full { v: Vec<f64>, m: Option<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    shapes: Vec<Vec<usize>>,
    slots: Vec<Slot>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, shapes: Vec<Vec<usize>>) -> Self {
        let slots = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                match &config {
                    OptimizerConfig::Sgd { .. } => Slot::None,
                    OptimizerConfig::Adamw { .. } => Slot::Adam { m: vec![0.0; n], v: vec![0.0; n] },
                    OptimizerConfig::Adafactor(c) => {
                        let m = c.beta1.map(|_| vec![0.0; n]);
                        if s.len() >= 2 {
                            let (r, k) = rows_cols(s);
                            Slot::Factored { row: vec![0.0; r], col: vec![0.0; k], m }
                        } else {
                            Slot::Full { v: vec![0.0; n], m }
                        }
                    }
                }
            })
            .collect();
        Self { config, step: 0, shapes, slots }
    }

    /// Apply one update. `names` label parameters in error messages.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], names: &[String]) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != params.len() {
            return Err(CoreError::Optimizer(format!(
                "{} parameters, {} gradients, optimizer built for {}",
                params.len(),
                grads.len(),
                self.slots.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map_or_else(|| format!("#{i}"), Clone::clone);
            if p.shape() != self.shapes[i].as_slice() || g.len() != p.len() {
                return Err(CoreError::Optimizer(format!("shape mismatch for parameter {name}")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::Optimizer(format!("non-finite gradient for parameter {name}")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        for ((p, g), (slot, shape)) in params.iter_mut().zip(grads).zip(self.slots.iter_mut().zip(&self.shapes)) {
            let mut x: Vec<f64> = p.data().iter().map(|v| v.as_f64()).collect();
            let g: Vec<f64> = g.iter().map(|v| v.as_f64()).collect();
            match (&self.config, slot) {
                (OptimizerConfig::Sgd { lr, weight_decay }, _) => {
                    for (xi, gi) in x.iter_mut().zip(&g) {
                        *xi = *xi * (1.0 - lr * weight_decay) - lr * gi;
                    }
                }
                (OptimizerConfig::Adamw { lr, beta1, beta2, eps, weight_decay }, Slot::Adam { m, v }) => {
                    let (bc1, bc2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    for i in 0..x.len() {
                        x[i] *= 1.0 - lr * weight_decay;
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        x[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    }
                }
                (OptimizerConfig::Adafactor(c), slot) => adafactor_update(c, t, &mut x, &g, shape, slot),
                _ => unreachable!("slot kind follows optimizer kind"),
            }
            for (dst, v) in p.data_mut().iter_mut().zip(x) {
                *dst = T::from_f64_lossy(v);
            }
        }
        Ok(())
    }

    /// Auxiliary tensors for checkpointing, named `<param index>.<slot>`.
    pub fn export(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, slot) in self.slots.iter().enumerate() {
            let mut push = |name: &str, v: &[f64]| out.push((format!("{i}.{name}"), vec![v.len()], v.to_vec()));
            match slot {
                Slot::None => {}
                Slot::Adam { m, v } => {
                    push("m", m);
                    push("v", v);
                }
                Slot::Factored { row, col, m } => {
                    push("row", row);
                    push("col", col);
                    if let Some(m) = m {
                        push("m", m);
                    }
                }
                Slot::Full { v, m } => {
                    push("v", v);
                    if let Some(m) = m {
                        push("m", m);
                    }
                }
            }
        }
        out
    }

    /// Restore tensors produced by [`Optimizer::export`].
    pub fn import(&mut self, step: u64, tensors: &[(String, Vec<f64>)]) -> Result<()> {
        let mut it = tensors.iter();
        let mut take = |want: String, dst: &mut Vec<f64>| -> Result<()> {
            match it.next() {
                Some((name, v)) if *name == want && v.len() == dst.len() => {
                    dst.copy_from_slice(v);
                    Ok(())
                }
                _ => Err(CoreError::Optimizer(format!("optimizer state missing or malformed at {want}"))),
            }
        };
        for (i, slot) in self.slots.iter_mut().enumerate() {
            match slot {
                Slot::None => {}
                Slot::Adam { m, v } => {
                    take(format!("{i}.m"), m)?;
                    take(format!("{i}.v"), v)?;
                }
                Slot::Factored { row, col, m } => {
                    take(format!("{i}.row"), row)?;
                    take(format!("{i}.col"), col)?;
                    if let Some(m) = m {
                        take(format!("{i}.m"), m)?;
                    }
                }
                Slot::Full { v, m } => {
                    take(format!("{i}.v"), v)?;
                    if let Some(m) = m {
                        take(format!("{i}.m"), m)?;
                    }
                }
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Learning rate of step `t` for a parameter with RMS `param_rms`.
pub fn adafactor_lr(c: &AdafactorConfig, t: f64, param_rms: f64) -> f64 {
    let rel = match c.lr {
        Some(lr) => lr,
        None => {
            let min_step = if c.warmup_init { 1e-6 * t } else { 1e-2 };
            min_step.min(1.0 / t.sqrt())
        }
    };
    let scale = if c.scale_parameter { c.eps2.max(param_rms) } else { 1.0 };
    scale * rel
}

fn adafactor_update(c: &AdafactorConfig, t: f64, x: &mut [f64], g: &[f64], shape: &[usize], slot: &mut Slot) {
    let lr = adafactor_lr(c, t, rms(x));
    let beta2t = 1.0 - t.powf(c.decay_rate);
    let sq: Vec<f64> = g.iter().map(|v| v * v + c.eps1).collect();
    let mut update: Vec<f64>;
    let m = match slot {
        Slot::Factored { row, col, m } => {
            let (r, k) = rows_cols(shape);
            for i in 0..r {
                let mean = sq[i * k..(i + 1) * k].iter().sum::<f64>() / k as f64;
                row[i] = beta2t * row[i] + (1.0 - beta2t) * mean;
            }
            for j in 0..k {
                let mean = (0..r).map(|i| sq[i * k + j]).sum::<f64>() / r as f64;
                col[j] = beta2t * col[j] + (1.0 - beta2t) * mean;
            }
            let row_mean = row.iter().sum::<f64>() / r as f64;
            update = vec![0.0; x.len()];
            for i in 0..r {
                let rf = (row[i] / row_mean).sqrt().recip();
                for j in 0..k {
                    update[i * k + j] = rf * col[j].sqrt().recip() * g[i * k + j];
                }
            }
            m
        }
        Slot::Full { v, m } => {
            for i in 0..v.len() {
                v[i] = beta2t * v[i] + (1.0 - beta2t) * sq[i];
            }
            update = v.iter().zip(g).map(|(vi, gi)| vi.sqrt().recip() * gi).collect();
            m
        }
        _ => unreachable!("adafactor slots"),
    };
    let denom = (rms(&update) / c.clip_threshold).max(1.0);
    for u in update.iter_mut() {
        *u = *u / denom * lr;
    }
    if let (Some(b1), Some(m)) = (c.beta1, m) {
        for (mi, u) in m.iter_mut().zip(update.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * *u;
            *u = *mi;
        }
    }
    for (xi, u) in x.iter_mut().zip(&update) {
        if c.weight_decay != 0.0 {
            *xi -= c.weight_decay * lr * *xi;
        }
        *xi -= u;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    fn names() -> Vec<String> {
        vec!["w".into()]
    }

    #[test]
    fn sgd_worked_example() {
        let mut p = scalar(1.0);
        let mut o = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, weight_decay: 0.0 }, vec![vec![1]]);
        o.step(&mut p, &[vec![0.5]], &names()).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(o.step, 1);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut p = scalar(1.0);
        let cfg = OptimizerConfig::Adamw { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut o = Optimizer::new(cfg, vec![vec![1]]);
        o.step(&mut p, &[vec![-0.3]], &names()).unwrap();
        // mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps).
        let want = 1.0 + 1e-3 * 0.3 / (0.3 + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays() {
        for cfg in [
            OptimizerConfig::Sgd { lr: 0.1, weight_decay: 0.5 },
            OptimizerConfig::Adamw { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.5 },
        ] {
            let mut p = scalar(2.0);
            let mut o = Optimizer::new(cfg, vec![vec![1]]);
            o.step(&mut p, &[vec![0.0]], &names()).unwrap();
            assert!((p[0].data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        }
        let mut p = vec![Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap()];
        let before = p[0].clone();
        let mut o = Optimizer::new(OptimizerConfig::default(), vec![vec![2, 2]]);
        o.step(&mut p, &[vec![0.0; 4]], &names()).unwrap();
        assert_eq!(p[0], before);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar(1.0);
        let mut o = Optimizer::new(OptimizerConfig::default(), vec![vec![1]]);
        let err = o.step(&mut p, &[vec![f64::NAN]], &names()).unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
        assert_eq!(o.step, 0);
    }

    #[test]
    fn factored_state_shapes_and_export_round_trip() {
        let shapes = vec![vec![3, 4], vec![4]];
        let mut o = Optimizer::new(OptimizerConfig::default(), shapes.clone());
        let mut p: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::from_f64(s.clone(), &vec![0.3; s.iter().product()]).unwrap()).collect();
        let g = vec![(0..12).map(|i| i as f64 * 0.1 - 0.5).collect(), vec![0.1, 0.2, -0.3, 0.4]];
        o.step(&mut p, &g, &["a".into(), "b".into()]).unwrap();
        let ex = o.export();
        let lens: Vec<usize> = ex.iter().map(|(_, _, v)| v.len()).collect();
        assert_eq!(lens, vec![3, 4, 4]);
        let mut o2 = Optimizer::new(OptimizerConfig::default(), shapes);
        o2.import(1, &ex.into_iter().map(|(n, _, v)| (n, v)).collect::<Vec<_>>()).unwrap();
        assert_eq!(o, o2);
    }
}
