//! Projector (linear, ReLU, linear, L2 normalize) and predictor (linear).

use rand_distr::{Distribution, Normal};

use super::layers::{linear_backward, linear_forward, relu_backward, relu_forward};
use crate::error::{GerspError, Result};
use crate::rng::RngStream;
use crate::tensor::{ParamSet, Scalar, Tensor};

/// Rows with a smaller norm are left unnormalized (scaled by 1/floor).
pub const NORM_FLOOR: f64 = 1e-12;

fn normal_matrix<T: Scalar>(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::from_vec(&[rows, cols], data).expect("shape")
}

pub fn init_projector<T: Scalar>(in_dim: usize, hidden: usize, out: usize, rng: &mut RngStream) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert("fc1.weight", normal_matrix(hidden, in_dim, (2.0 / in_dim as f64).sqrt(), rng));
    p.insert("fc1.bias", Tensor::zeros(&[hidden]));
    p.insert("fc2.weight", normal_matrix(out, hidden, (1.0 / hidden as f64).sqrt(), rng));
    p.insert("fc2.bias", Tensor::zeros(&[out]));
    p
}

/// Fan-in normal weights, zero bias.
pub fn init_predictor<T: Scalar>(in_dim: usize, n_classes: usize, rng: &mut RngStream) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.insert("weight", normal_matrix(n_classes, in_dim, (1.0 / in_dim as f64).sqrt(), rng));
    p.insert("bias", Tensor::zeros(&[n_classes]));
    p
}

#[derive(Debug, Clone)]
pub struct ProjectionCache<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    mask: Vec<bool>,
    norms: Vec<T>,
    output: Tensor<T>,
}

fn check_finite<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(GerspError::NonFinite(what.into()))
    }
}

/// Projects pooled features to L2-normalized rows.
pub fn project<T: Scalar>(params: &ParamSet<T>, pooled: &Tensor<T>) -> Result<Tensor<T>> {
    project_with_cache(params, pooled).map(|(z, _)| z)
}

pub fn project_with_cache<T: Scalar>(params: &ParamSet<T>, pooled: &Tensor<T>) -> Result<(Tensor<T>, ProjectionCache<T>)> {
    check_finite(pooled, "projector input")?;
    let w1 = params.get("fc1.weight")?;
    if w1.dims2().1 != pooled.dims2().1 {
        return Err(GerspError::ShapeMismatch {
            name: "fc1.weight".into(),
            expected: vec![w1.dims2().0, pooled.dims2().1],
            found: w1.shape().to_vec(),
        });
    }
    let mut hidden = linear_forward(pooled, w1, params.get("fc1.bias")?);
    let mask = relu_forward(hidden.data_mut());
    let mut z = linear_forward(&hidden, params.get("fc2.weight")?, params.get("fc2.bias")?);
    let (b, _) = z.dims2();
    let floor = T::lit(NORM_FLOOR);
    let mut norms = Vec::with_capacity(b);
    for i in 0..b {
        let row = z.row_mut(i);
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
        row.iter_mut().for_each(|v| *v = *v / n);
        norms.push(n);
    }
    check_finite(&z, "projector output")?;
    Ok((
        z.clone(),
        ProjectionCache {
            input: pooled.clone(),
            hidden,
            mask,
            norms,
            output: z,
        },
    ))
}

/// Accumulates projector gradients; returns the gradient on the pooled input.
pub fn project_backward<T: Scalar>(
    params: &ParamSet<T>,
    cache: &ProjectionCache<T>,
    dz: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let (b, d) = dz.dims2();
    let floor = T::lit(NORM_FLOOR);
    let mut draw = Tensor::zeros(&[b, d]);
    for i in 0..b {
        let z = cache.output.row(i);
        let g = dz.row(i);
        let n = cache.norms[i];
        let out = draw.row_mut(i);
        if n > floor {
            let dot: T = z.iter().zip(g).map(|(&a, &c)| a * c).sum();
            for ((o, &gi), &zi) in out.iter_mut().zip(g).zip(z) {
                *o = (gi - zi * dot) / n;
            }
        } else {
            for (o, &gi) in out.iter_mut().zip(g) {
                *o = gi / n;
            }
        }
    }
    let mut dw2 = grads.get("fc2.weight")?.clone();
    let mut db2 = grads.get("fc2.bias")?.clone();
    let mut dh = linear_backward(&cache.hidden, params.get("fc2.weight")?, &draw, &mut dw2, &mut db2);
    *grads.get_mut("fc2.weight")? = dw2;
    *grads.get_mut("fc2.bias")? = db2;
    relu_backward(dh.data_mut(), &cache.mask);
    let mut dw1 = grads.get("fc1.weight")?.clone();
    let mut db1 = grads.get("fc1.bias")?.clone();
    let dx = linear_backward(&cache.input, params.get("fc1.weight")?, &dh, &mut dw1, &mut db1);
    *grads.get_mut("fc1.weight")? = dw1;
    *grads.get_mut("fc1.bias")? = db1;
    Ok(dx)
}

/// Class logits from pooled features: a single affine map.
pub fn predict_logits<T: Scalar>(params: &ParamSet<T>, pooled: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite(pooled, "predictor input")?;
    let w = params.get("weight")?;
    if w.dims2().1 != pooled.dims2().1 {
        return Err(GerspError::ShapeMismatch {
            name: "weight".into(),
            expected: vec![w.dims2().0, pooled.dims2().1],
            found: w.shape().to_vec(),
        });
    }
    Ok(linear_forward(pooled, w, params.get("bias")?))
}

pub fn predict_backward<T: Scalar>(
    params: &ParamSet<T>,
    pooled: &Tensor<T>,
    dlogits: &Tensor<T>,
    grads: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let mut dw = grads.get("weight")?.clone();
    let mut db = grads.get("bias")?.clone();
    let dx = linear_backward(pooled, params.get("weight")?, dlogits, &mut dw, &mut db);
    *grads.get_mut("weight")? = dw;
    *grads.get_mut("bias")? = db;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pooled(b: usize, d: usize, seed: u64) -> Tensor<f64> {
        normal_matrix(b, d, 1.0, &mut RngStream::new(seed))
    }

    #[test]
    fn projected_rows_are_unit_norm() {
        let p = init_projector::<f64>(8, 16, 4, &mut RngStream::new(1));
        let x = pooled(5, 8, 2);
        for scale in [1.0, 1e-3, 1e3] {
            let xs = Tensor::from_vec(&[5, 8], x.data().iter().map(|v| v * scale).collect()).unwrap();
            let z = project(&p, &xs).unwrap();
            for i in 0..5 {
                let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_input_projects_through_bias_path() {
        let mut p = init_projector::<f64>(4, 6, 3, &mut RngStream::new(3));
        p.get_mut("fc2.bias").unwrap().data_mut().copy_from_slice(&[3.0, 0.0, 4.0]);
        let z = project(&p, &Tensor::zeros(&[2, 4])).unwrap();
        // fc1 bias is zero so the hidden layer is zero and only fc2.bias survives.
        for i in 0..2 {
            assert_eq!(z.row(i), &[0.6, 0.0, 0.8]);
        }
        let p0 = init_projector::<f64>(4, 6, 3, &mut RngStream::new(3));
        let z0 = project(&p0, &Tensor::zeros(&[1, 4])).unwrap();
        assert_eq!(z0.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(project(&p0, &Tensor::zeros(&[1, 4])).unwrap(), z0);
    }

    #[test]
    fn predictor_is_affine() {
        let mut p = init_predictor::<f64>(6, 3, &mut RngStream::new(4));
        p.get_mut("bias").unwrap().data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let zero = predict_logits(&p, &Tensor::zeros(&[2, 6])).unwrap();
        assert_eq!(zero.row(1), &[0.5, -1.0, 2.0]);
        let a = pooled(2, 6, 5);
        let b = pooled(2, 6, 6);
        let sum = Tensor::from_vec(&[2, 6], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let la = predict_logits(&p, &a).unwrap();
        let lb = predict_logits(&p, &b).unwrap();
        let ls = predict_logits(&p, &sum).unwrap();
        assert_eq!(ls.shape(), &[2, 3]);
        for i in 0..6 {
            let bias = p.get("bias").unwrap().data()[i % 3];
            assert!((ls.data()[i] - (la.data()[i] + lb.data()[i] - bias)).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        let p = init_projector::<f64>(5, 7, 3, &mut RngStream::new(8));
        let x = pooled(3, 5, 9);
        let target = pooled(3, 3, 10);
        let loss = |params: &ParamSet<f64>, x: &Tensor<f64>| -> f64 {
            let z = project(params, x).unwrap();
            z.data().iter().zip(target.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = project_with_cache(&p, &x).unwrap();
        let mut grads = p.zeros_like();
        let dx = project_backward(&p, &cache, &target, &mut grads).unwrap();
        let h = 1e-6;
        for (name, t) in p.iter() {
            for i in 0..t.len() {
                let mut pp = p.clone();
                pp.get_mut(name).unwrap().data_mut()[i] += h;
                let mut pm = p.clone();
                pm.get_mut(name).unwrap().data_mut()[i] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                let a = grads.get(name).unwrap().data()[i];
                assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3), "{name}[{i}]: {a} vs {fd}");
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((dx.data()[i] - fd).abs() < 1e-6);
        }
    }
}
