//! Contrastive losses: in-batch NT-Xent over 2N augmented views with
//! cosine similarity, and the dictionary-lookup variant with dot-product
//! similarity against a FIFO queue of momentum-encoded keys.
//!
//! Both compute, per anchor,
//! `-log( exp(s(q,k+)/tau) / (exp(s(q,k+)/tau) + sum exp(s(q,k-)/tau)) )`
//! and average over anchors. Log-sum-exp is max-subtracted for stability
//! at small temperatures.
//!
//! # Example
//!
//! ```
//! use episodica::loss::{ntxent_simclr_value, partner, LossConfig};
//! use episodica::tensor::Tensor;
//!
//! // row i's positive sits half a batch away
//! assert_eq!(partner(0, 8), 4);
//!
//! // a 2N=4 batch: [view-A rows; view-B rows]
//! let reps = Tensor::from_rows(&[
//!     vec![1.0, 0.0],
//!     vec![0.0, 1.0],
//!     vec![1.0, 0.1],
//!     vec![0.1, 1.0],
//! ])?;
//! let loss = ntxent_simclr_value(&reps, &LossConfig::simclr_default())?;
//! assert!(loss > 0.0 && loss.is_finite());
//! # Ok::<(), episodica::Error>(())
//! ```

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f32,
    pub similarity: Similarity,
}

impl LossConfig {
    /// In-batch variant default: cosine similarity, tau = 0.5.
    pub fn simclr_default() -> Self {
        LossConfig { temperature: 0.5, similarity: Similarity::Cosine }
    }

    /// Queue variant default: dot similarity, tau = 0.2.
    pub fn moco_default() -> Self {
        LossConfig { temperature: 0.2, similarity: Similarity::Dot }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Partner index for the fixed batch layout
/// `[view-A of inputs 0..N-1 ; view-B of inputs 0..N-1]`.
pub fn partner(i: usize, two_n: usize) -> usize {
    (i + two_n / 2) % two_n
}

/// In-batch NT-Xent over `2N x d` representations: anchor `i` has positive
/// `partner(i)` and the other `2N-2` rows (self excluded) as negatives.
/// Differentiable through `reps`.
pub fn ntxent_simclr(tape: &Tape, reps: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape_of(reps);
    if shape.len() != 2 {
        return Err(Error::Shape(format!("ntxent expects 2-D reps, got {shape:?}")));
    }
    let two_n = shape[0];
    if two_n == 0 || two_n % 2 != 0 {
        return Err(Error::Data(format!("ntxent needs a nonempty 2N-row batch, got {two_n}")));
    }
    let z = match cfg.similarity {
        Similarity::Cosine => tape.l2_normalize(reps)?,
        Similarity::Dot => reps,
    };
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, 1.0 / cfg.temperature);
    // self-similarity is excluded by pushing the diagonal far below any
    // attainable logit
    let mut diag = vec![0.0f32; two_n * two_n];
    let mut partner_mask = vec![0.0f32; two_n * two_n];
    for i in 0..two_n {
        diag[i * two_n + i] = -1.0e9;
        partner_mask[i * two_n + partner(i, two_n)] = 1.0;
    }
    let masked = tape.add_const(logits, &Tensor::from_shape_data(vec![two_n, two_n], diag))?;
    let lse = tape.logsumexp_rows(masked)?;
    let pos_matrix =
        tape.mul_const(logits, &Tensor::from_shape_data(vec![two_n, two_n], partner_mask))?;
    let pos = tape.row_sum(pos_matrix)?;
    let per_anchor = tape.sub(lse, pos)?;
    Ok(tape.mean(per_anchor))
}

/// Convenience wrapper computing the loss value on a fresh tape.
pub fn ntxent_simclr_value(reps: &Tensor, cfg: &LossConfig) -> Result<f32> {
    let tape = Tape::new();
    let v = tape.leaf(reps.clone());
    let loss = ntxent_simclr(&tape, v, cfg)?;
    Ok(tape.value(loss).item())
}

/// FIFO ring of past key embeddings supplying negatives independent of the
/// batch size. Single writer; snapshots may be read concurrently.
///
/// # Example
///
/// ```
/// use episodica::loss::KeyQueue;
/// use episodica::tensor::Tensor;
///
/// let mut queue = KeyQueue::new(4, 2)?;
/// queue.push(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?)?;
/// queue.push(&Tensor::from_rows(&[vec![0.5, 0.5], vec![0.2, 0.8]])?)?;
/// queue.push(&Tensor::from_rows(&[vec![0.9, 0.1]])?)?;
/// // capacity 4: the very first row has been evicted, oldest-first order
/// assert_eq!(queue.len(), 4);
/// assert_eq!(queue.as_tensor()?.row(0), &[0.0, 1.0]);
/// # Ok::<(), episodica::Error>(())
/// ```
#[derive(Clone, Debug)]
pub struct KeyQueue {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<f32>>,
}

impl KeyQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and dim must be positive".into()));
        }
        Ok(KeyQueue { capacity, dim, entries: VecDeque::new() })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append the rows of an `N x d` batch, evicting the oldest entries
    /// beyond capacity.
    pub fn push(&mut self, keys: &Tensor) -> Result<()> {
        if keys.rank() != 2 || keys.shape()[1] != self.dim {
            return Err(Error::Shape(format!(
                "queue_push: expected n x {} keys, got {:?}",
                self.dim,
                keys.shape()
            )));
        }
        for i in 0..keys.shape()[0] {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(keys.row(i).to_vec());
        }
        Ok(())
    }

    /// Snapshot as a `len x d` tensor, oldest entry first.
    pub fn as_tensor(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Err(Error::Data("queue is empty".into()));
        }
        let data: Vec<f32> = self.entries.iter().flatten().copied().collect();
        Tensor::new(vec![self.entries.len(), self.dim], data)
    }
}

/// Dictionary-lookup loss: positives are the row-aligned momentum keys,
/// negatives are all queue entries. Gradient flows only through `q_reps`;
/// keys and queue are constants.
pub fn moco_loss(
    tape: &Tape,
    q_reps: Var,
    kplus_reps: &Tensor,
    queue: &KeyQueue,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if queue.is_empty() {
        return Err(Error::Data("moco_loss: queue is empty".into()));
    }
    let qshape = tape.shape_of(q_reps);
    if qshape.len() != 2 || kplus_reps.shape() != qshape.as_slice() {
        return Err(Error::Shape(format!(
            "moco_loss: q {:?} vs k+ {:?}",
            qshape,
            kplus_reps.shape()
        )));
    }
    let negatives = queue.as_tensor()?;
    let pos = tape.rowwise_dot_const(q_reps, kplus_reps)?;
    let neg = tape.matmul_nt_const(q_reps, &negatives)?;
    let logits = tape.prepend_col(pos, neg)?;
    let scaled = tape.scale(logits, 1.0 / cfg.temperature);
    let lse = tape.logsumexp_rows(scaled)?;
    let pos_scaled = tape.scale(pos, 1.0 / cfg.temperature);
    let per_anchor = tape.sub(lse, pos_scaled)?;
    Ok(tape.mean(per_anchor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_reps(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::from_shape_data(
            vec![n, d],
            (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    /// Brute-force Eq.-style oracle: enumerate every anchor, its partner
    /// and its 2N-2 negatives directly in f64.
    fn ntxent_bruteforce(reps: &Tensor, tau: f64) -> f64 {
        let two_n = reps.shape()[0];
        let d = reps.shape()[1];
        let cos = |a: &[f32], b: &[f32]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..two_n {
            let anchor = &reps.data()[i * d..(i + 1) * d];
            let p = partner(i, two_n);
            let pos = (cos(anchor, reps.row(p)) / tau).exp();
            let mut denom = pos;
            for j in 0..two_n {
                if j == i || j == p {
                    continue;
                }
                denom += (cos(anchor, reps.row(j)) / tau).exp();
            }
            total += -(pos / denom).ln();
        }
        total / two_n as f64
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reps = random_reps(&mut rng, 2, 5);
        let loss = ntxent_simclr_value(&reps, &LossConfig::simclr_default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_negative_closed_form() {
        // Each anchor has cos(q,k+) = 1 and two copies of the same
        // negative at cos = -ln 2, so the negative exponentials sum to
        // 2*e^(-ln 2) = e^0: exactly the single-negative case with
        // s(q,k-) = 0, giving per-anchor loss ln(1 + e^-1).
        let c = -(2.0f64.ln());
        let b = vec![c as f32, (1.0 - c * c).sqrt() as f32];
        let a = vec![1.0, 0.0];
        let reps = Tensor::from_rows(&[a.clone(), b.clone(), a, b]).unwrap();
        let cfg = LossConfig { temperature: 1.0, similarity: Similarity::Cosine };
        let loss = ntxent_simclr_value(&reps, &cfg).unwrap() as f64;
        let expected = (1.0 + (-1.0f64).exp()).ln(); // 0.31326...
        assert!((loss - expected).abs() < 1e-6, "{loss} vs {expected}");
    }

    #[test]
    fn matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[1usize, 2, 4, 8] {
            let reps = random_reps(&mut rng, 2 * n, 6);
            let cfg = LossConfig { temperature: 0.5, similarity: Similarity::Cosine };
            let got = ntxent_simclr_value(&reps, &cfg).unwrap() as f64;
            let want = ntxent_bruteforce(&reps, 0.5);
            assert!((got - want).abs() < 1e-5, "N={n}: {got} vs {want}");
        }
    }

    #[test]
    fn invariant_under_view_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 4;
        let reps = random_reps(&mut rng, 2 * n, 5);
        let mut swapped_rows: Vec<Vec<f32>> = Vec::new();
        for i in 0..2 * n {
            swapped_rows.push(reps.row(partner(i, 2 * n)).to_vec());
        }
        let swapped = Tensor::from_rows(&swapped_rows).unwrap();
        let cfg = LossConfig::simclr_default();
        let a = ntxent_simclr_value(&reps, &cfg).unwrap();
        let b = ntxent_simclr_value(&swapped, &cfg).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn invariant_under_global_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let reps = random_reps(&mut rng, 8, 3);
        // random rotation from Rodrigues' formula around a random axis
        let (ax, ay, az) = {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            (v[0] / n, v[1] / n, v[2] / n)
        };
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (s, c) = theta.sin_cos();
        let k = [[0.0, -az, ay], [az, 0.0, -ax], [-ay, ax, 0.0]];
        let mut rot = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let kk: f64 = (0..3).map(|l| k[i][l] * k[l][j]).sum();
                rot[i][j] = if i == j { 1.0 } else { 0.0 } + s * k[i][j] + (1.0 - c) * kk;
            }
        }
        let rotated_rows: Vec<Vec<f32>> = (0..8)
            .map(|r| {
                (0..3)
                    .map(|i| {
                        (0..3).map(|j| rot[i][j] * reps.row(r)[j] as f64).sum::<f64>() as f32
                    })
                    .collect()
            })
            .collect();
        let rotated = Tensor::from_rows(&rotated_rows).unwrap();
        let cfg = LossConfig::simclr_default();
        let a = ntxent_simclr_value(&reps, &cfg).unwrap();
        let b = ntxent_simclr_value(&rotated, &cfg).unwrap();
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn rejects_bad_temperature_and_empty_batch() {
        let reps = Tensor::ones(&[2, 3]);
        let bad = LossConfig { temperature: 0.0, similarity: Similarity::Cosine };
        assert!(ntxent_simclr_value(&reps, &bad).is_err());
        let odd = Tensor::ones(&[3, 3]);
        assert!(ntxent_simclr_value(&odd, &LossConfig::simclr_default()).is_err());
    }

    // ---- queue ------------------------------------------------------------

    #[test]
    fn queue_fills_in_order() {
        let mut q = KeyQueue::new(3, 2).unwrap();
        let batch =
            Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        q.push(&batch).unwrap();
        assert_eq!(q.len(), 3);
        assert_eq!(q.as_tensor().unwrap(), batch);
    }

    #[test]
    fn full_queue_evicts_oldest() {
        let mut q = KeyQueue::new(2, 1).unwrap();
        q.push(&Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap()).unwrap();
        q.push(&Tensor::from_rows(&[vec![3.0]]).unwrap()).unwrap();
        assert_eq!(q.as_tensor().unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn fifo_simulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b1 = random_reps(&mut rng, 3, 2);
        let b2 = random_reps(&mut rng, 4, 2);
        let mut q = KeyQueue::new(4, 2).unwrap();
        q.push(&b1).unwrap();
        q.push(&b2).unwrap();
        assert_eq!(q.as_tensor().unwrap(), b2);
    }

    #[test]
    fn queue_rejects_dim_mismatch() {
        let mut q = KeyQueue::new(4, 3).unwrap();
        assert!(q.push(&Tensor::ones(&[2, 2])).is_err());
    }

    // ---- moco -------------------------------------------------------------

    fn unit_rows(rows: &[Vec<f32>]) -> Tensor {
        let t = Tape::new();
        let v = t.leaf(Tensor::from_rows(rows).unwrap());
        t.value(t.l2_normalize(v).unwrap())
    }

    #[test]
    fn moco_single_orthogonal_negative_closed_form() {
        let q = unit_rows(&[vec![1.0, 0.0]]);
        let kplus = q.clone(); // s(q, k+) = 1
        let mut queue = KeyQueue::new(4, 2).unwrap();
        queue.push(&unit_rows(&[vec![0.0, 1.0]])).unwrap(); // orthogonal
        let tape = Tape::new();
        let qv = tape.leaf(q);
        let cfg = LossConfig { temperature: 1.0, similarity: Similarity::Dot };
        let loss = moco_loss(&tape, qv, &kplus, &queue, &cfg).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((tape.value(loss).item() as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn huge_temperature_limit_is_uniform_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = unit_rows(&[(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()]);
        let kplus = unit_rows(&[(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()]);
        let z = 7usize;
        let mut queue = KeyQueue::new(z, 4).unwrap();
        for _ in 0..z {
            queue
                .push(&unit_rows(&[(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()]))
                .unwrap();
        }
        let tape = Tape::new();
        let qv = tape.leaf(q);
        let cfg = LossConfig { temperature: 1.0e6, similarity: Similarity::Dot };
        let loss = moco_loss(&tape, qv, &kplus, &queue, &cfg).unwrap();
        let expected = (1.0 + z as f64).ln();
        assert!((tape.value(loss).item() as f64 - expected).abs() < 1e-4);
    }

    #[test]
    fn stop_gradient_on_keys_and_queue() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tape = Tape::new();
        let q = tape.leaf(unit_rows(&[
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ]));
        let kplus_leaf = tape.leaf(unit_rows(&[
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ]));
        let queue_keys = unit_rows(&[(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()]);
        let queue_leaf = tape.leaf(queue_keys.clone());
        let mut queue = KeyQueue::new(4, 3).unwrap();
        queue.push(&queue_keys).unwrap();
        let cfg = LossConfig::moco_default();
        let loss = moco_loss(&tape, q, &tape.value(kplus_leaf), &queue, &cfg).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(kplus_leaf), Tensor::zeros(&[2, 3]));
        assert_eq!(g.wrt(queue_leaf), Tensor::zeros(&[1, 3]));
        assert!(g.wrt(q).data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn moco_loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let q = unit_rows(&[
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ]);
            let kplus = unit_rows(&[
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ]);
            let mut queue = KeyQueue::new(8, 4).unwrap();
            for _ in 0..5 {
                queue
                    .push(&unit_rows(&[(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()]))
                    .unwrap();
            }
            let tape = Tape::new();
            let qv = tape.leaf(q);
            let loss =
                moco_loss(&tape, qv, &kplus, &queue, &LossConfig::moco_default()).unwrap();
            assert!(tape.value(loss).item() >= 0.0);
        }
    }

    #[test]
    fn empty_queue_is_state_error() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::ones(&[1, 2]));
        let queue = KeyQueue::new(4, 2).unwrap();
        assert!(moco_loss(&tape, q, &Tensor::ones(&[1, 2]), &queue, &LossConfig::moco_default())
            .is_err());
    }
}
