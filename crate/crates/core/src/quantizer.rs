//! Vector quantisation: nearest-codebook assignment, the straight-through
//! estimator, codebook/commitment losses and usage statistics.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Commitment weight used unless configured otherwise.
pub const DEFAULT_BETA: f64 = 0.25;

/// Distances closer than this (plus a rounding allowance) are re-evaluated
/// exactly before the winner is chosen.
const NEAR_TIE: f64 = 1e-6;

/// Index of the L2-nearest row of `embeddings` (`k × dim`) for every
/// `dim`-vector in `z`. Equal distances resolve to the lowest index.
pub fn nearest_indices<T: Scalar>(z: &[T], embeddings: &[T], dim: usize) -> Result<Vec<usize>> {
    ensure!(dim > 0, "codebook dimension must be positive");
    ensure!(
        !embeddings.is_empty() && embeddings.len() % dim == 0,
        "codebook is empty or ragged ({} values, dim {dim})",
        embeddings.len()
    );
    ensure!(
        z.len() % dim == 0,
        "latent length {} is not a multiple of codebook dimension {dim}",
        z.len()
    );
    let k = embeddings.len() / dim;
    let n = z.len() / dim;
    let sq = |v: &[T]| v.iter().fold(T::zero(), |a, &x| a + x * x);
    let e_norms: Vec<T> = embeddings.chunks_exact(dim).map(sq).collect();
    let e_max = e_norms.iter().copied().fold(T::zero(), T::max);

    // ‖z‖² − 2 z·e + ‖e‖², with the cross term as one matrix product
    let mut dots = vec![T::zero(); n * k];
    T::gemm(n, dim, k, T::one(), z, false, embeddings, true, T::zero(), &mut dots);

    let two = T::lit(2.0);
    let rounding = T::epsilon() * T::lit(32.0 * dim as f64);
    let mut out = Vec::with_capacity(n);
    for (i, (zi, row)) in z.chunks_exact(dim).zip(dots.chunks_exact(k)).enumerate() {
        let zn = sq(zi);
        let dist = |j: usize| zn - two * row[j] + e_norms[j];
        let mut best = 0;
        let mut best_d = dist(0);
        for j in 1..k {
            let d = dist(j);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        let tol = T::lit(NEAR_TIE).max(rounding * (zn + e_max));
        let contenders: Vec<usize> = (0..k).filter(|&j| dist(j) <= best_d + tol).collect();
        if contenders.len() > 1 {
            best = exact_argmin(zi, embeddings, dim, &contenders);
        }
        debug_assert!(best < k, "row {i}");
        out.push(best);
    }
    Ok(out)
}

/// Direct squared-difference distances in 64-bit over the given candidates.
fn exact_argmin<T: Scalar>(z: &[T], embeddings: &[T], dim: usize, candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    let mut best_d = f64::INFINITY;
    for &j in candidates {
        let d: f64 = z
            .iter()
            .zip(&embeddings[j * dim..(j + 1) * dim])
            .map(|(a, b)| {
                let d = a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN);
                d * d
            })
            .sum();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// The dictionary of `K` embeddings of dimension `c`, with usage counters.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T = f32> {
    embeddings: Tensor<T>,
    usage: Vec<u64>,
    instrumented: bool,
}

/// Assignments of a latent grid and the embeddings they select.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T = f32> {
    pub z: Tensor<T>,
    pub indices: Vec<usize>,
    pub quantized: Tensor<T>,
}

impl<T: Scalar> Codebook<T> {
    /// `embeddings` has shape `(K, c)`.
    pub fn new(embeddings: Tensor<T>) -> Result<Self> {
        ensure!(
            embeddings.rank() == 2 && embeddings.shape()[0] >= 1 && embeddings.shape()[1] >= 1,
            "codebook must be a non-empty (K, c) matrix, got {:?}",
            embeddings.shape()
        );
        ensure!(embeddings.is_finite(), "codebook embeddings must be finite");
        let k = embeddings.shape()[0];
        Ok(Self {
            embeddings,
            usage: vec![0; k],
            instrumented: false,
        })
    }

    /// Seed a `k`-entry codebook with random rows drawn from `latents`.
    pub fn from_samples<R: Rng + ?Sized>(latents: &Tensor<T>, k: usize, rng: &mut R) -> Result<Self> {
        Self::new(sample_rows(latents, k, rng)?)
    }

    pub fn size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn set_instrumented(&mut self, on: bool) {
        self.instrumented = on;
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.fill(0);
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.usage[i] += 1;
        }
    }

    /// Entries used at least once since the last reset.
    pub fn active_count(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }

    /// Replace every `c`-vector of `z` (last axis) by its nearest entry.
    pub fn quantize(&mut self, z: &Tensor<T>) -> Result<LatentGrid<T>> {
        let c = self.dim();
        ensure!(
            z.shape().last() == Some(&c),
            "latent channel count {:?} does not match codebook dimension {c}",
            z.shape().last()
        );
        let indices = nearest_indices(z.data(), self.embeddings.data(), c)?;
        let e = self.embeddings.data();
        let mut q = Vec::with_capacity(z.len());
        for &i in &indices {
            q.extend_from_slice(&e[i * c..(i + 1) * c]);
        }
        if self.instrumented {
            self.record(&indices);
        }
        Ok(LatentGrid {
            z: z.clone(),
            quantized: Tensor::new(z.shape(), q)?,
            indices,
        })
    }
}

/// `k` rows drawn uniformly from the `c`-vectors of `latents`, without
/// replacement when enough are available.
pub fn sample_rows<T: Scalar, R: Rng + ?Sized>(latents: &Tensor<T>, k: usize, rng: &mut R) -> Result<Tensor<T>> {
    let c = *latents.shape().last().unwrap_or(&0);
    ensure!(c > 0 && !latents.is_empty() && k > 0, "cannot sample codebook rows");
    let rows: Vec<&[T]> = latents.data().chunks_exact(c).collect();
    let picked: Vec<&[T]> = if rows.len() >= k {
        rows.choose_multiple(rng, k).copied().collect()
    } else {
        (0..k).map(|_| *rows.choose(rng).expect("non-empty")).collect()
    };
    Tensor::new(&[k, c], picked.concat())
}

/// Quantise the latent node `z` against the `(K, c)` table node on `g`.
/// Returns the assignments and a node whose value is the selected rows and
/// whose gradient flows into the table only.
pub fn quantize_node<T: Scalar>(g: &mut Graph<T>, z: Var, table: Var) -> Result<(Vec<usize>, Var)> {
    let c = g.shape(table)[1];
    let indices = nearest_indices(g.value(z).data(), g.value(table).data(), c)?;
    let shape = g.shape(z).to_vec();
    let q = g.gather_rows(table, indices.clone(), &shape)?;
    Ok((indices, q))
}

/// Codebook loss `mean(‖sg(z) − q‖²)` and commitment loss
/// `beta · mean(‖z − sg(q)‖²)`, both averaged over elements.
pub fn vq_losses<T: Scalar>(g: &mut Graph<T>, z: Var, q: Var, beta: f64) -> Result<(Var, Var)> {
    let zs = g.detach(z)?;
    let d = g.sub(zs, q)?;
    let d = g.square(d)?;
    let codebook = g.mean(d)?;
    let qs = g.detach(q)?;
    let d = g.sub(z, qs)?;
    let d = g.square(d)?;
    let m = g.mean(d)?;
    let commitment = g.scale(m, beta)?;
    Ok((codebook, commitment))
}

/// Forward value `q`, gradient passed to `z` unchanged.
pub fn straight_through<T: Scalar>(g: &mut Graph<T>, z: Var, q: Var) -> Result<Var> {
    g.straight_through(z, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cb(rows: &[[f32; 2]]) -> Codebook<f32> {
        Codebook::new(Tensor::new(&[rows.len(), 2], rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn picks_nearest_entry() {
        let mut c = cb(&[[0.0, 0.0], [1.0, 1.0]]);
        let z = Tensor::new(&[1, 1, 1, 2], vec![0.2, 0.1]).unwrap();
        let grid = c.quantize(&z).unwrap();
        assert_eq!(grid.indices, [0]);
        assert_eq!(grid.quantized.data(), [0.0, 0.0]);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let mut rows = vec![[5.0f32, 5.0]; 8];
        rows[3] = [-1.0, 0.0];
        rows[7] = [1.0, 0.0];
        let mut c = cb(&rows);
        let z = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(c.quantize(&z).unwrap().indices, [3]);
        // identical entries
        let mut c = cb(&[[0.5, 0.5], [0.5, 0.5]]);
        let z = Tensor::new(&[1, 2], vec![0.1, 0.9]).unwrap();
        assert_eq!(c.quantize(&z).unwrap().indices, [0]);
    }

    #[test]
    fn rejects_empty_codebook_and_channel_mismatch() {
        assert!(Codebook::<f32>::new(Tensor::new(&[0, 2], vec![]).unwrap()).is_err());
        let mut c = cb(&[[0.0, 0.0]]);
        assert!(c.quantize(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn usage_counts_only_when_instrumented() {
        let mut c = Codebook::new(Tensor::<f32>::from_fn(&[128, 2], |i| (i / 2) as f32)).unwrap();
        assert_eq!(c.active_count(), 0);
        let z = Tensor::full(&[4, 3, 3, 2], 5.0f32);
        c.quantize(&z).unwrap();
        assert_eq!(c.active_count(), 0);
        c.set_instrumented(true);
        c.quantize(&z).unwrap();
        assert_eq!(c.active_count(), 1);
        assert_eq!(c.usage()[5], 36);
        c.reset_usage();
        assert_eq!(c.active_count(), 0);
    }

    #[test]
    fn scalar_vq_losses() {
        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::scalar(1.0)).unwrap();
        let q = g.variable(Tensor::scalar(0.0)).unwrap();
        let (cl, ml) = vq_losses(&mut g, z, q, 0.25).unwrap();
        assert_eq!(g.item(cl), 1.0);
        assert_eq!(g.item(ml), 0.25);

        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::full(&[3], 0.4)).unwrap();
        let q = g.variable(Tensor::full(&[3], 0.4)).unwrap();
        let (cl, ml) = vq_losses(&mut g, z, q, 0.25).unwrap();
        assert_eq!((g.item(cl), g.item(ml)), (0.0, 0.0));
    }

    #[test]
    fn losses_route_gradients_to_their_own_side() {
        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let q = g.variable(Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
        let (cl, _) = vq_losses(&mut g, z, q, 0.25).unwrap();
        let gr = g.backward(cl).unwrap();
        assert!(gr.get(z).is_none());
        assert_eq!(gr.get(q).unwrap(), [-1.0, -2.0]);

        let mut g = Graph::<f64>::new();
        let z = g.variable(Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let q = g.variable(Tensor::new(&[2], vec![0.0, 0.0]).unwrap()).unwrap();
        let (_, ml) = vq_losses(&mut g, z, q, 0.25).unwrap();
        let gr = g.backward(ml).unwrap();
        assert!(gr.get(q).is_none());
        assert_eq!(gr.get(z).unwrap(), [0.25, 0.5]);
    }

    #[test]
    fn commitment_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let zt = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |_| rng.random_range(-1.0..1.0));
        let qt = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |_| rng.random_range(-1.0..1.0));
        let err = grad_check(
            |g, z| {
                let q = g.constant(qt.clone())?;
                let (_, m) = vq_losses(g, z, q, DEFAULT_BETA)?;
                Ok(m)
            },
            &zt,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn straight_through_forwards_q_and_backwards_identity() {
        let mut g = Graph::<f64>::new();
        let table = g
            .variable(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let z = g
            .variable(Tensor::new(&[1, 1, 2, 2], vec![0.9, 0.8, 0.1, -0.2]).unwrap())
            .unwrap();
        let (idx, q) = quantize_node(&mut g, z, table).unwrap();
        assert_eq!(idx, [1, 0]);
        let st = straight_through(&mut g, z, q).unwrap();
        assert_eq!(g.value(st).data(), g.value(q).data());
        let s = g.sum(st).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(z).unwrap(), [1.0; 4]);
        assert!(gr.get(table).is_none());
    }

    #[test]
    fn samples_rows_from_latents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lat = Tensor::<f32>::from_fn(&[1, 2, 2, 3], |i| i as f32);
        let c = Codebook::from_samples(&lat, 3, &mut rng).unwrap();
        for row in c.embeddings().data().chunks_exact(3) {
            assert_eq!(row[0] % 3.0, 0.0);
            assert_eq!(row[1], row[0] + 1.0);
        }
        let c = Codebook::from_samples(&lat, 10, &mut rng).unwrap();
        assert_eq!(c.size(), 10);
    }
}
