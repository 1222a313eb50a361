use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

fn eval<F>(f: &F, x: Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x);
    let out = f(&mut g, leaf)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v}")));
    }
    Ok(v)
}

/// Max relative error between the reverse-mode gradient of the scalar
/// `f(input)` and central differences with step `eps`.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(input.clone());
    let out = f(&mut g, leaf)?;
    g.backward(out)?;
    let analytic = g.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(input.rows, input.cols));
    if !analytic.is_finite() {
        return Err(Error::Numeric("analytic gradient".into()));
    }
    let mut worst = 0.0f64;
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data[i] += eps;
        let mut minus = input.clone();
        minus.data[i] -= eps;
        let num = (eval(&f, plus)? - eval(&f, minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data[i], num));
    }
    Ok(worst)
}

/// Same check over every coordinate of every parameter in `store`.
pub fn grad_check_params<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    let mut work = store.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, &work)?;
    g.backward(out)?;
    work.accumulate(&g);
    let analytic: Vec<Tensor<f64>> = work.ids().map(|id| work.grad(id).clone()).collect();
    if analytic.iter().any(|t| !t.is_finite()) {
        return Err(Error::Numeric("analytic gradient".into()));
    }
    let value = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v}")));
        }
        Ok(v)
    };
    let mut worst = 0.0f64;
    for id in store.ids() {
        for i in 0..store.value(id).len() {
            let orig = work.value(id).data[i];
            work.value_mut(id).data[i] = orig + eps;
            let fp = value(&work)?;
            work.value_mut(id).data[i] = orig - eps;
            let fm = value(&work)?;
            work.value_mut(id).data[i] = orig;
            let num = (fp - fm) / (2.0 * eps);
            worst = worst.max(rel_err(analytic[id.0].data[i], num));
        }
    }
    Ok(worst)
}

fn rand_t(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
pub fn probe(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let [r, c] = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let w = g.input(rand_t(r, c, &mut rng));
    let m = g.mul(y, w)?;
    g.sum(m)
}

pub type OpFn = fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

pub fn op_suite() -> Vec<(&'static str, Vec<[usize; 2]>, OpFn)> {
    vec![
        ("matmul", vec![[3, 4], [4, 2]], |g, x| g.matmul(x[0], x[1])),
        ("linear", vec![[3, 4], [4, 2], [1, 2]], |g, x| g.linear(x[0], x[1], x[2])),
        ("add", vec![[2, 3], [2, 3]], |g, x| g.add(x[0], x[1])),
        ("mul", vec![[2, 3], [2, 3]], |g, x| g.mul(x[0], x[1])),
        ("scale", vec![[2, 3]], |g, x| g.scale(x[0], -1.7)),
        ("gelu", vec![[3, 3]], |g, x| g.gelu(x[0])),
        ("sigmoid", vec![[3, 3]], |g, x| g.sigmoid(x[0])),
        ("tanh", vec![[3, 3]], |g, x| g.tanh(x[0])),
        ("layer_norm", vec![[3, 5], [1, 5], [1, 5]], |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)),
        ("attention", vec![[3, 4], [5, 4], [5, 2]], |g, x| g.attention(x[0], x[1], x[2], 1, 1)),
        ("attention_mh", vec![[4, 4], [6, 4], [6, 6]], |g, x| g.attention(x[0], x[1], x[2], 2, 2)),
        ("concat_cols", vec![[2, 3], [2, 1]], |g, x| g.concat_cols(&[x[0], x[1]])),
        ("concat_rows", vec![[2, 3], [1, 3]], |g, x| g.concat_rows(&[x[0], x[1]])),
        ("slice_rows", vec![[4, 3]], |g, x| g.slice_rows(x[0], 1, 3)),
        ("slice_cols", vec![[4, 3]], |g, x| g.slice_cols(x[0], 1, 3)),
        ("mean_rows", vec![[6, 2]], |g, x| g.mean_rows(x[0], 3)),
        ("repeat_rows", vec![[2, 3]], |g, x| g.repeat_rows(x[0], 3)),
        ("sum", vec![[2, 3]], |g, x| g.sum(x[0])),
        ("l1", vec![[2, 3], [2, 3]], |g, x| g.l1(x[0], x[1])),
    ]
}

/// Checks every op of [`op_suite`] over `seeds` random inputs, plus ReLU
/// away from its kink, BCE and the external node. Returns the worst
/// relative error per op.
pub fn check_every_op(seeds: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for (name, shapes, op) in op_suite() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ids = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.add(&format!("x{i}"), rand_t(s[0], s[1], &mut rng)))
                .collect::<Result<Vec<_>>>()?;
            let err = grad_check_params(
                &store,
                |g, s| {
                    let xs: Vec<NodeId> = ids.iter().map(|&id| g.param(s, id)).collect();
                    let y = op(g, &xs)?;
                    probe(g, y, seed)
                },
                eps,
            )?;
            worst = worst.max(err);
        }
        out.push((name, worst));
    }
    let mut relu = 0.0f64;
    let mut bce = 0.0f64;
    let mut ext = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_vec(
            4,
            4,
            (0..16).map(|_| rng.random_range(0.1..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
        )?;
        relu = relu.max(grad_check(
            |g, x| {
                let y = g.relu(x)?;
                probe(g, y, seed)
            },
            &x,
            eps,
        )?);
        let p = Tensor::from_vec(3, 1, (0..3).map(|_| rng.random_range(0.05..0.95)).collect())?;
        bce = bce.max(grad_check(|g, x| g.bce(x, &[1.0, 0.0, 1.0], &[1.0, 2.0, 0.5]), &p, eps)?);
        // external: f(x) = Σ x², gradient supplied from outside
        let x = rand_t(1, 3, &mut rng);
        ext = ext.max(grad_check(
            |g, x| {
                let v = g.value(x).clone();
                let val = v.data.iter().map(|e| e * e).sum();
                let grad = Tensor::from_vec(1, 3, v.data.iter().map(|e| 2.0 * e).collect())?;
                g.external(x, val, grad)
            },
            &x,
            eps,
        )?);
    }
    out.extend([("relu", relu), ("bce", bce), ("external", ext)]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_op_passes_gradient_check() {
        for (name, err) in check_every_op(10, 1e-5).unwrap() {
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn relu_away_from_kink() {
        let eps = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(
            4,
            4,
            (0..16)
                .map(|_| {
                    let v: f64 = rng.random_range(0.1..1.0);
                    if rng.random_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .unwrap();
        let err = grad_check(
            |g, x| {
                let y = g.relu(x)?;
                probe(g, y, 1)
            },
            &x,
            eps,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_layer_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_t(4, 3, &mut rng);
        let b = rand_t(1, 3, &mut rng);
        let x = rand_t(5, 4, &mut rng);
        let err = grad_check(
            |g, x| {
                let w = g.input(w.clone());
                let b = g.input(b.clone());
                let y = g.linear(x, w, b)?;
                probe(g, y, 2)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn bce_and_external() {
        let p = Tensor::from_vec(3, 1, vec![0.2, 0.6, 0.9]).unwrap();
        let err = grad_check(|g, x| g.bce(x, &[1.0, 0.0, 1.0], &[1.0, 2.0, 0.5]), &p, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
        // external: f(x) = Σ x², gradient supplied from outside
        let x = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let v = g.value(x).clone();
                let val = v.data.iter().map(|e| e * e).sum();
                let grad = Tensor::from_vec(1, 3, v.data.iter().map(|e| 2.0 * e).collect()).unwrap();
                g.external(x, val, grad)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
