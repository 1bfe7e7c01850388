//! Central finite-difference gradient checks (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, HeadLayout, NumericsError, Tensor, Var};

pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError> + 'a;

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).data()[0])
}

/// Relative error between the backward pass and central differences with
/// step `h`, over the concatenated gradient of every input.
pub fn gradcheck(build: &Build, inputs: &[Tensor<f64>], h: f64) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        analytic.extend(grads.get_or_zeros(vars[i], t.len()));
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric.push((eval(build, &plus)? - eval(build, &minus)?) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

/// Reduce a tensor to a scalar through fixed random weights so every
/// output element contributes a distinct amount.
pub fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

/// Relative error of every differentiable op, checked on fixed random inputs.
pub fn op_checks() -> Result<Vec<(&'static str, f64)>, NumericsError> {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape);
    let mut out = Vec::new();
    let mut check = |name: &'static str, build: &Build, inputs: Vec<Tensor<f64>>| -> Result<(), NumericsError> {
        out.push((name, gradcheck(build, &inputs, H)?));
        Ok(())
    };

    check("matmul", &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 9)
    }, vec![t(&[2, 3, 4]), t(&[4, 5])])?;
    check("batched_matmul", &|g, v| {
        let y = g.batched_matmul(v[0], v[1], false)?;
        weighted_sum(g, y, 9)
    }, vec![t(&[3, 2, 4]), t(&[3, 4, 5])])?;
    check("batched_matmul_transposed", &|g, v| {
        let y = g.batched_matmul(v[0], v[1], true)?;
        weighted_sum(g, y, 9)
    }, vec![t(&[3, 2, 4]), t(&[3, 5, 4])])?;
    check("add", &|g, v| {
        let y = g.add(v[0], v[1])?;
        weighted_sum(g, y, 4)
    }, vec![t(&[3, 4]), t(&[3, 4])])?;
    check("mul", &|g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted_sum(g, y, 4)
    }, vec![t(&[3, 4]), t(&[3, 4])])?;
    check("scale", &|g, v| {
        let y = g.scale(v[0], -1.7)?;
        weighted_sum(g, y, 4)
    }, vec![t(&[3, 4])])?;
    check("add_bias", &|g, v| {
        let y = g.add_bias(v[0], v[1])?;
        weighted_sum(g, y, 4)
    }, vec![t(&[3, 4]), t(&[4])])?;
    check("sum", &|g, v| {
        let y = g.mul(v[0], v[0])?;
        g.sum(y)
    }, vec![t(&[3, 4])])?;
    check("embedding_gather", &|g, v| {
        let y = g.embedding_gather(v[0], &[4, 0, 4, 2, 4])?;
        weighted_sum(g, y, 5)
    }, vec![t(&[5, 3])])?;
    check("causal_mask_softmax", &|g, v| {
        let m = g.causal_mask(v[0])?;
        let y = g.softmax(m)?;
        weighted_sum(g, y, 6)
    }, vec![t(&[2, 4, 4])])?;
    check("layer_norm", &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2])?;
        weighted_sum(g, y, 7)
    }, vec![t(&[3, 6]), t(&[6]), t(&[6])])?;
    check("gelu", &|g, v| {
        let y = g.gelu(v[0])?;
        weighted_sum(g, y, 8)
    }, vec![t(&[4, 5]).map(|x| x * 3.0)])?;
    check("cross_entropy", &|g, v| g.cross_entropy(v[0], &[1, 6, 0, 3, 3], &[true, true, false, true, true]), vec![t(&[5, 7])])?;
    check("cross_entropy_weighted", &|g, v| {
        g.cross_entropy_weighted(v[0], &[1, 6, 0, 3, 3], &[0.5, 0.25, 0.0, 2.0, 0.125])
    }, vec![t(&[5, 7])])?;
    let (batch, len, heads, head_dim) = (2, 3, 2, 4);
    let cols = 3 * heads * head_dim;
    let layout = HeadLayout { batch, len, heads, head_dim, cols, offset: heads * head_dim };
    check("split_merge_heads", &move |g, v| {
        let h = g.split_heads(v[0], layout)?;
        let m = g.merge_heads(h, batch, heads)?;
        weighted_sum(g, m, 10)
    }, vec![t(&[batch * len, cols])])?;
    check("rotary", &move |g, v| {
        let h = g.split_heads(v[0], layout)?;
        let r = g.rotary(h, 10000.0)?;
        let m = g.merge_heads(r, batch, heads)?;
        weighted_sum(g, m, 10)
    }, vec![t(&[batch * len, cols])])?;
    Ok(out)
}
