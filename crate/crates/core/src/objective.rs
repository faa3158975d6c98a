//! Training objectives: cross-entropy, InfoNCE against a FIFO negative queue,
//! the weighted total, and the EMA coupling between student and teacher.

use serde::{Deserialize, Serialize};

use crate::error::{GerspError, Result};
use crate::tensor::{gemm, ParamSet, Scalar, Tensor};

/// Fixed-capacity FIFO of unit-norm teacher keys used as negatives.
#[derive(Debug, Clone)]
pub struct NegativeQueue<T> {
    capacity: usize,
    dim: usize,
    storage: Vec<T>,
    head: usize,
    filled: usize,
}

impl<T: Scalar> NegativeQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(GerspError::Config(
                "queue capacity and dimension must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            dim,
            storage: vec![T::zero(); capacity * dim],
            head: 0,
            filled: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    /// Raw slot storage (`capacity x dim`), including unfilled slots.
    pub fn storage(&self) -> &[T] {
        &self.storage
    }

    /// Valid rows, oldest first.
    pub fn rows_fifo(&self) -> impl Iterator<Item = &[T]> {
        let start = if self.filled < self.capacity { 0 } else { self.head };
        (0..self.filled).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.storage[slot * self.dim..(slot + 1) * self.dim]
        })
    }

    /// Valid rows as a contiguous `filled x dim` slice, in slot order.
    fn valid_block(&self) -> &[T] {
        &self.storage[..self.filled * self.dim]
    }

    /// Writes `keys` (`b x dim`) at the head, overwriting the oldest entries.
    pub fn push(&mut self, keys: &Tensor<T>) -> Result<()> {
        let (b, d) = keys.dims2();
        if d != self.dim {
            return Err(GerspError::ShapeMismatch {
                name: "queue keys".into(),
                expected: vec![b, self.dim],
                found: vec![b, d],
            });
        }
        if b > self.capacity {
            return Err(GerspError::InvalidInput(format!(
                "cannot push {b} keys into a queue of capacity {}",
                self.capacity
            )));
        }
        for i in 0..b {
            let slot = (self.head + i) % self.capacity;
            self.storage[slot * d..(slot + 1) * d].copy_from_slice(keys.row(i));
        }
        self.head = (self.head + b) % self.capacity;
        self.filled = (self.filled + b).min(self.capacity);
        Ok(())
    }
}

/// Mean cross-entropy of `logits` (`B x K`) against integer labels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    cross_entropy_with_grad(logits, labels).map(|(l, _)| l)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (b, k) = logits.dims2();
    if labels.len() != b {
        return Err(GerspError::InvalidInput(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(GerspError::InvalidInput(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = T::zero();
    let inv_b = T::one() / T::lit(b as f64);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let g = grad.row_mut(i);
        let mut sum = T::zero();
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - max).exp();
            sum += *gj;
        }
        total += sum.ln() - (row[y] - max);
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_b;
        }
        g[y] -= inv_b;
    }
    Ok((total * inv_b, grad))
}

/// InfoNCE with the positive at index 0 and the queue rows as shared negatives.
pub fn info_nce<T: Scalar>(
    z_q: &Tensor<T>,
    z_k_plus: &Tensor<T>,
    queue: &NegativeQueue<T>,
    tau: f64,
) -> Result<T> {
    info_nce_with_grad(z_q, z_k_plus, queue, tau).map(|(l, _)| l)
}

/// InfoNCE and its gradient with respect to `z_q`. Keys and queue are constants.
pub fn info_nce_with_grad<T: Scalar>(
    z_q: &Tensor<T>,
    z_k_plus: &Tensor<T>,
    queue: &NegativeQueue<T>,
    tau: f64,
) -> Result<(T, Tensor<T>)> {
    if !(tau > 0.0) {
        return Err(GerspError::InvalidInput(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let (b, d) = z_q.dims2();
    if z_k_plus.shape() != z_q.shape() {
        return Err(GerspError::ShapeMismatch {
            name: "z_k_plus".into(),
            expected: vec![b, d],
            found: z_k_plus.shape().to_vec(),
        });
    }
    if queue.dim() != d {
        return Err(GerspError::ShapeMismatch {
            name: "queue".into(),
            expected: vec![queue.capacity(), d],
            found: vec![queue.capacity(), queue.dim()],
        });
    }
    let n_neg = queue.filled();
    let width = n_neg + 1;
    let inv_tau = T::lit(1.0 / tau);
    let negs = queue.valid_block();

    // logits[i] = [q_i . k_i, q_i . n_1, ..., q_i . n_filled] / tau
    let mut logits = vec![T::zero(); b * width];
    for i in 0..b {
        let pos: T = z_q.row(i).iter().zip(z_k_plus.row(i)).map(|(&a, &c)| a * c).sum();
        logits[i * width] = pos * inv_tau;
    }
    if n_neg > 0 {
        let mut neg = vec![T::zero(); b * n_neg];
        gemm(false, true, b, n_neg, d, inv_tau, z_q.data(), negs, T::zero(), &mut neg);
        for i in 0..b {
            logits[i * width + 1..(i + 1) * width].copy_from_slice(&neg[i * n_neg..(i + 1) * n_neg]);
        }
    }

    let inv_b = T::one() / T::lit(b as f64);
    let mut total = T::zero();
    // Reuse the logits buffer for d loss / d logit.
    for i in 0..b {
        let row = &mut logits[i * width..(i + 1) * width];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let pos = row[0];
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        total += sum.ln() - (pos - max);
        for v in row.iter_mut() {
            *v = *v / sum * inv_b;
        }
        row[0] -= inv_b;
    }

    let mut grad = Tensor::zeros(&[b, d]);
    for i in 0..b {
        let coef = logits[i * width] * inv_tau;
        for (g, &k) in grad.row_mut(i).iter_mut().zip(z_k_plus.row(i)) {
            *g = coef * k;
        }
    }
    if n_neg > 0 {
        let mut dneg = vec![T::zero(); b * n_neg];
        for i in 0..b {
            dneg[i * n_neg..(i + 1) * n_neg].copy_from_slice(&logits[i * width + 1..(i + 1) * width]);
        }
        gemm(false, false, b, d, n_neg, inv_tau, &dneg, negs, T::one(), grad.data_mut());
    }
    Ok((total * inv_b, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ct: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub alpha: f64,
}

/// `l_total = l_ct + alpha * l_ce`.
pub fn total_loss(l_ct: f64, l_ce: f64, alpha: f64) -> Result<LossBreakdown> {
    if !(alpha >= 0.0) {
        return Err(GerspError::InvalidInput(format!(
            "alpha must be non-negative, got {alpha}"
        )));
    }
    Ok(LossBreakdown {
        l_ct,
        l_ce,
        l_total: l_ct + alpha * l_ce,
        alpha,
    })
}

/// `W_t <- m W_t + (1 - m) W_s` for every named tensor.
pub fn ema_update<T: Scalar>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(GerspError::InvalidInput(format!(
            "EMA momentum must lie in [0,1], got {m}"
        )));
    }
    teacher.check_congruent(student)?;
    let keep = T::lit(m);
    let take = T::lit(1.0 - m);
    for (name, t) in teacher.iter_mut() {
        let s = student.get(name)?;
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = keep * *tv + take * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(&[rows, cols], v).unwrap()
    }

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let mut data: Vec<f64> = (0..rows * cols).map(|_| next()).collect();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        mat(rows, cols, data)
    }

    #[test]
    fn ce_uniform_logits() {
        let l = cross_entropy(&Tensor::<f64>::zeros(&[3, 10]), &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_large_margin_is_stable() {
        let mut logits = Tensor::<f64>::zeros(&[1, 4]);
        logits.data_mut()[2] = 1000.0;
        let l = cross_entropy(&logits, &[2]).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        let l32 = cross_entropy(&logits.cast::<f32>(), &[2]).unwrap();
        assert!(l32.is_finite() && l32.abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        assert!(cross_entropy(&Tensor::<f64>::zeros(&[1, 3]), &[3]).is_err());
    }

    #[test]
    fn info_nce_identical_pair_empty_queue_is_zero() {
        let z = unit_rows(4, 8, 1);
        let q = NegativeQueue::new(16, 8).unwrap();
        assert!(info_nce(&z, &z, &q, 0.07).unwrap().abs() < 1e-15);
    }

    #[test]
    fn info_nce_one_orthogonal_negative() {
        let z = mat(1, 2, vec![1.0, 0.0]);
        let mut q = NegativeQueue::new(4, 2).unwrap();
        q.push(&mat(1, 2, vec![0.0, 1.0])).unwrap();
        let l = info_nce(&z, &z, &q, 1.0).unwrap();
        // -log(e / (e + 1)) = log(1 + e^-1)
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - oracle).abs() < 1e-14);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn info_nce_rejects_bad_tau() {
        let z = unit_rows(2, 4, 3);
        let q = NegativeQueue::new(4, 4).unwrap();
        assert!(info_nce(&z, &z, &q, 0.0).is_err());
        assert!(info_nce(&z, &z, &q, -1.0).is_err());
    }

    #[test]
    fn info_nce_grad_matches_central_differences() {
        let zq = unit_rows(3, 5, 11);
        let zk = unit_rows(3, 5, 12);
        let mut q = NegativeQueue::new(8, 5).unwrap();
        q.push(&unit_rows(6, 5, 13)).unwrap();
        let (_, g) = info_nce_with_grad(&zq, &zk, &q, 0.2).unwrap();
        let h = 1e-6;
        for idx in 0..zq.len() {
            let mut p = zq.clone();
            p.data_mut()[idx] += h;
            let mut m = zq.clone();
            m.data_mut()[idx] -= h;
            let fd = (info_nce(&p, &zk, &q, 0.2).unwrap() - info_nce(&m, &zk, &q, 0.2).unwrap()) / (2.0 * h);
            let a = g.data()[idx];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-5, "{a} vs {fd}");
        }
    }

    #[test]
    fn appending_negative_increases_loss() {
        let zq = unit_rows(2, 4, 21);
        let zk = unit_rows(2, 4, 22);
        let mut q = NegativeQueue::new(8, 4).unwrap();
        let mut prev = info_nce(&zq, &zk, &q, 0.1).unwrap();
        for s in 0..5 {
            q.push(&unit_rows(1, 4, 30 + s)).unwrap();
            let next = info_nce(&zq, &zk, &q, 0.1).unwrap();
            assert!(next > prev);
            prev = next;
        }
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(0.5, 0.25, 1.0).unwrap().l_total, 0.75);
        assert_eq!(total_loss(1.0, 2.0, 0.5).unwrap().l_total, 2.0);
        let b = total_loss(0.7, 3.0, 0.0).unwrap();
        assert_eq!(b.l_total, b.l_ct);
        assert!(total_loss(1.0, 1.0, -0.1).is_err());
    }

    fn scalar(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn ema_extremes_and_geometric_law() {
        let s = scalar(1.0);
        let mut t = scalar(0.0);
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.get("w").unwrap().data()[0], 0.0);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.get("w").unwrap().data()[0], 1.0);

        let mut t = scalar(0.0);
        ema_update(&mut t, &s, 0.996).unwrap();
        assert!((t.get("w").unwrap().data()[0] - 0.004).abs() < 1e-15);
        for n in 2..=50 {
            ema_update(&mut t, &s, 0.996).unwrap();
            let closed = 1.0 - 0.996f64.powi(n);
            assert!((t.get("w").unwrap().data()[0] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_names_mismatched_parameter() {
        let mut t = scalar(0.0);
        let mut s = ParamSet::new();
        s.insert("w", Tensor::<f64>::zeros(&[2]));
        match ema_update(&mut t, &s, 0.5) {
            Err(GerspError::ShapeMismatch { name, .. }) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn rows_of(q: &NegativeQueue<f64>) -> Vec<Vec<f64>> {
        q.rows_fifo().map(<[f64]>::to_vec).collect()
    }

    fn tagged(rows: usize, start: f64) -> Tensor<f64> {
        mat(rows, 1, (0..rows).map(|i| start + i as f64).collect())
    }

    #[test]
    fn queue_fifo_examples() {
        let mut q = NegativeQueue::new(8, 1).unwrap();
        q.push(&tagged(3, 0.0)).unwrap();
        q.push(&tagged(3, 3.0)).unwrap();
        assert_eq!(q.filled(), 6);
        assert_eq!(rows_of(&q), (0..6).map(|i| vec![i as f64]).collect::<Vec<_>>());

        let mut q = NegativeQueue::new(8, 1).unwrap();
        q.push(&tagged(8, 0.0)).unwrap();
        q.push(&tagged(2, 8.0)).unwrap();
        assert_eq!(q.filled(), 8);
        assert_eq!(rows_of(&q), (2..10).map(|i| vec![i as f64]).collect::<Vec<_>>());
    }

    #[test]
    fn queue_rejects_wrong_dim() {
        let mut q = NegativeQueue::<f64>::new(4, 3).unwrap();
        assert!(q.push(&Tensor::zeros(&[1, 2])).is_err());
        assert!(q.push(&Tensor::zeros(&[5, 3])).is_err());
    }

    proptest! {
        #[test]
        fn queue_matches_deque_model(pushes in proptest::collection::vec(1usize..=7, 0..40)) {
            let cap = 7;
            let mut q = NegativeQueue::new(cap, 2).unwrap();
            let mut model: VecDeque<Vec<f64>> = VecDeque::new();
            let mut counter = 0.0;
            for b in pushes {
                let data: Vec<f64> = (0..b).flat_map(|i| [counter + i as f64, -(counter + i as f64)]).collect();
                counter += b as f64;
                q.push(&mat(b, 2, data.clone())).unwrap();
                for r in data.chunks(2) {
                    if model.len() == cap {
                        model.pop_front();
                    }
                    model.push_back(r.to_vec());
                }
                prop_assert_eq!(rows_of(&q), model.iter().cloned().collect::<Vec<_>>());
            }
        }

        #[test]
        fn info_nce_rotation_invariant(seed in 0u64..1000, angle in 0.0f64..std::f64::consts::TAU) {
            let zq = unit_rows(2, 3, seed);
            let zk = unit_rows(2, 3, seed + 1);
            let negs = unit_rows(4, 3, seed + 2);
            let (c, s) = (angle.cos(), angle.sin());
            let rot = |t: &Tensor<f64>| {
                let (r, _) = t.dims2();
                let mut out = t.clone();
                for i in 0..r {
                    let x = t.row(i);
                    out.row_mut(i).copy_from_slice(&[c * x[0] - s * x[1], s * x[0] + c * x[1], x[2]]);
                }
                out
            };
            let mut q1 = NegativeQueue::new(4, 3).unwrap();
            q1.push(&negs).unwrap();
            let mut q2 = NegativeQueue::new(4, 3).unwrap();
            q2.push(&rot(&negs)).unwrap();
            let a = info_nce(&zq, &zk, &q1, 0.5).unwrap();
            let b = info_nce(&rot(&zq), &rot(&zk), &q2, 0.5).unwrap();
            prop_assert!((a - b).abs() < 1e-8);
        }
    }
}
