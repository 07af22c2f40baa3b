//! Activation matching and permutation application.
//!
//! Two independently trained networks are aligned by matching hidden units:
//! for each hidden boundary the unit-by-unit similarity `Z_B * Z_A^T` of
//! recorded activations is maximized over permutations with an exact linear
//! assignment solve. The resulting per-boundary permutation map can be
//! applied to parameters (leaving the network function unchanged) and to
//! sparse masks (carrying a mask into the other model's basin).

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{forward_recording, Mask, ModelSpec, ParamSet};
use crate::rng::{chacha, derive_seed, fisher_yates, uniform_index};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("boundary {boundary}: dimension mismatch {a} vs {b}")]
    DimensionMismatch { boundary: usize, a: usize, b: usize },
    #[error("cost matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("cost matrix contains non-finite entries")]
    NonFinite,
    #[error("invalid permutation map: {0}")]
    InvalidPermutation(String),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
}

pub type Result<T> = std::result::Result<T, AlignError>;

/// Post-ReLU activations of one hidden boundary, units by samples.
pub type ActivationMatrix<S> = Tensor<S>;

/// Unit similarity matrix `Z_B * Z_A^T`; rows index B units, columns A units.
pub type CostMatrix = Tensor<f64>;

/// Per-boundary unit permutations, `boundaries[l][source] = target`.
/// Boundary 0 (input) and boundary L (output) are fixed to identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationMap {
    boundaries: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct PermutationMapFile {
    version: u32,
    boundaries: Vec<Vec<usize>>,
}

impl PermutationMap {
    pub fn identity(spec: &ModelSpec) -> Self {
        let boundaries = spec
            .effective_sizes()
            .iter()
            .map(|&d| (0..d).collect())
            .collect();
        PermutationMap { boundaries }
    }

    /// Identity at the ends, the given permutations at hidden boundaries.
    pub fn from_hidden(spec: &ModelSpec, hidden: Vec<Vec<usize>>) -> Result<Self> {
        let sizes = spec.effective_sizes();
        if hidden.len() + 2 != sizes.len() {
            return Err(AlignError::InvalidPermutation(format!(
                "expected {} hidden boundaries, got {}",
                sizes.len() - 2,
                hidden.len()
            )));
        }
        let mut boundaries = Vec::with_capacity(sizes.len());
        boundaries.push((0..sizes[0]).collect());
        for (i, p) in hidden.into_iter().enumerate() {
            validate_perm(&p, sizes[i + 1])?;
            boundaries.push(p);
        }
        boundaries.push((0..*sizes.last().unwrap()).collect());
        Ok(PermutationMap { boundaries })
    }

    /// Uniformly random hidden permutations; ends stay identity.
    pub fn random(spec: &ModelSpec, seed: u64) -> Self {
        let sizes = spec.effective_sizes();
        let mut rng = chacha(derive_seed(seed, "perm-map", &[]));
        let hidden = sizes[1..sizes.len() - 1]
            .iter()
            .map(|&d| {
                let mut p: Vec<usize> = (0..d).collect();
                fisher_yates(&mut p, &mut rng);
                p
            })
            .collect();
        PermutationMap::from_hidden(spec, hidden).unwrap()
    }

    pub fn num_boundaries(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundary(&self, l: usize) -> &[usize] {
        &self.boundaries[l]
    }

    pub fn is_identity(&self) -> bool {
        self.boundaries
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &t)| i == t))
    }

    pub fn matches_spec(&self, spec: &ModelSpec) -> bool {
        let sizes = spec.effective_sizes();
        self.boundaries.len() == sizes.len()
            && self.boundaries.iter().zip(&sizes).all(|(p, &d)| p.len() == d)
    }

    pub fn invert(&self) -> PermutationMap {
        let boundaries = self
            .boundaries
            .iter()
            .map(|p| {
                let mut inv = vec![0usize; p.len()];
                for (src, &dst) in p.iter().enumerate() {
                    inv[dst] = src;
                }
                inv
            })
            .collect();
        PermutationMap { boundaries }
    }

    /// `compose(outer, inner)` maps each unit through `inner` first.
    pub fn compose(outer: &PermutationMap, inner: &PermutationMap) -> Result<PermutationMap> {
        if outer.boundaries.len() != inner.boundaries.len() {
            return Err(AlignError::InvalidPermutation(
                "boundary count mismatch in compose".into(),
            ));
        }
        let boundaries = outer
            .boundaries
            .iter()
            .zip(&inner.boundaries)
            .map(|(o, i)| {
                if o.len() != i.len() {
                    return Err(AlignError::InvalidPermutation(
                        "boundary size mismatch in compose".into(),
                    ));
                }
                Ok(i.iter().map(|&t| o[t]).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PermutationMap { boundaries })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PermutationMapFile {
            version: 1,
            boundaries: self.boundaries.clone(),
        })
        .expect("permutation map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PermutationMapFile = serde_json::from_str(text)
            .map_err(|e| AlignError::InvalidPermutation(format!("json: {}", e)))?;
        if file.version != 1 {
            return Err(AlignError::InvalidPermutation(format!(
                "unsupported version {}",
                file.version
            )));
        }
        for p in &file.boundaries {
            validate_perm(p, p.len())?;
        }
        Ok(PermutationMap {
            boundaries: file.boundaries,
        })
    }
}

fn validate_perm(p: &[usize], d: usize) -> Result<()> {
    if p.len() != d {
        return Err(AlignError::InvalidPermutation(format!(
            "length {} does not match boundary size {}",
            p.len(),
            d
        )));
    }
    let mut seen = vec![false; d];
    for &t in p {
        if t >= d || seen[t] {
            return Err(AlignError::InvalidPermutation("not a bijection".into()));
        }
        seen[t] = true;
    }
    Ok(())
}

/// Record post-ReLU activations of every hidden boundary on a deterministic
/// seeded subsample of the dataset. One `d_l x n` matrix per boundary.
pub fn collect_activations<S: Scalar>(
    params: &ParamSet<S>,
    dataset: &Dataset<S>,
    sample_count: usize,
    seed: u64,
) -> Result<Vec<ActivationMatrix<S>>> {
    let count = sample_count.min(dataset.len());
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    fisher_yates(&mut idx, &mut chacha(derive_seed(seed, "act-sample", &[])));
    idx.truncate(count);
    idx.sort_unstable();
    let (x, _) = dataset.gather(&idx);
    let (_, taps) = forward_recording(params, None, &x)?;
    for t in &taps {
        if t.rows() > t.cols() {
            log::warn!(
                "activation matrix {}x{} has fewer samples than units; matching may be degenerate",
                t.rows(),
                t.cols()
            );
        }
    }
    Ok(taps)
}

/// Unit similarity `Z_B * Z_A^T` accumulated in f64.
pub fn cost_matrix<S: Scalar>(
    z_a: &ActivationMatrix<S>,
    z_b: &ActivationMatrix<S>,
    center: bool,
) -> Result<CostMatrix> {
    if z_a.rows() != z_b.rows() || z_a.cols() != z_b.cols() {
        return Err(AlignError::DimensionMismatch {
            boundary: 0,
            a: z_a.rows(),
            b: z_b.rows(),
        });
    }
    let to_f64 = |t: &Tensor<S>| {
        let mut out = Tensor::<f64>::zeros(t.shape().to_vec());
        for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
            *o = v.to_f64();
        }
        if center {
            let n = out.cols();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let mean = row.iter().sum::<f64>() / n as f64;
                for v in row {
                    *v -= mean;
                }
            }
        }
        out
    };
    let a = to_f64(z_a);
    let b = to_f64(z_b);
    let mut cost = Tensor::<f64>::zeros(vec![b.rows(), a.rows()]);
    crate::tensor::matmul_nt(&b, &a, &mut cost);
    if !cost.all_finite() {
        return Err(AlignError::NonFinite);
    }
    Ok(cost)
}

/// Exact linear assignment by shortest augmenting paths with potentials.
/// Returns, for each row, its assigned column, plus the objective value.
/// Ties resolve to the first-found optimum under the fixed scan order.
pub fn hungarian(cost: &CostMatrix, maximize: bool) -> Result<(Vec<usize>, f64)> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(AlignError::NotSquare {
            rows: cost.rows(),
            cols: cost.cols(),
        });
    }
    if !cost.all_finite() {
        return Err(AlignError::NonFinite);
    }
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let sign = if maximize { -1.0 } else { 1.0 };
    let at = |i: usize, j: usize| sign * cost.at(i, j);

    // 1-indexed arrays; p[j] is the row matched to column j, p[0] the row
    // currently seeking a column.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let objective = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost.at(i, j))
        .sum();
    Ok((row_to_col, objective))
}

/// Match model A's hidden units onto model B's by maximizing the Frobenius
/// inner product of the permuted activations, one independent assignment per
/// boundary. Input and output boundaries stay identity.
pub fn match_activations<S: Scalar>(
    spec: &ModelSpec,
    acts_a: &[ActivationMatrix<S>],
    acts_b: &[ActivationMatrix<S>],
    center: bool,
) -> Result<PermutationMap> {
    if acts_a.len() != acts_b.len() {
        return Err(AlignError::InvalidPermutation(format!(
            "boundary count mismatch: {} vs {}",
            acts_a.len(),
            acts_b.len()
        )));
    }
    let mut hidden = Vec::with_capacity(acts_a.len());
    for (l, (za, zb)) in acts_a.iter().zip(acts_b).enumerate() {
        if za.rows() != zb.rows() {
            return Err(AlignError::DimensionMismatch {
                boundary: l + 1,
                a: za.rows(),
                b: zb.rows(),
            });
        }
        let cost = cost_matrix(za, zb, center)?;
        // Row i of the cost indexes a B unit; its assigned column is the A
        // unit sent to position i.
        let (b_to_a, _) = hungarian(&cost, true)?;
        let mut perm = vec![0usize; b_to_a.len()];
        for (b_unit, &a_unit) in b_to_a.iter().enumerate() {
            perm[a_unit] = b_unit;
        }
        hidden.push(perm);
    }
    PermutationMap::from_hidden(spec, hidden)
}

/// Permute rows by the output boundary and columns by the input boundary:
/// the permuted network computes the same function in a reordered basis.
pub fn apply_permutation_params<S: Scalar>(
    params: &ParamSet<S>,
    map: &PermutationMap,
) -> Result<ParamSet<S>> {
    if !map.matches_spec(&params.spec) {
        return Err(AlignError::InvalidPermutation(
            "map does not match model spec".into(),
        ));
    }
    let mut out = ParamSet::zeros(&params.spec);
    for l in 0..params.num_layers() {
        let p_in = map.boundary(l);
        let p_out = map.boundary(l + 1);
        let w = &params.weights[l];
        for r in 0..w.rows() {
            let dst_r = p_out[r];
            for c in 0..w.cols() {
                *out.weights[l].at_mut(dst_r, p_in[c]) = w.at(r, c);
            }
        }
        for (r, &v) in params.biases[l].data().iter().enumerate() {
            out.biases[l].data_mut()[p_out[r]] = v;
        }
    }
    Ok(out)
}

/// Same index mapping as [`apply_permutation_params`], applied to a mask.
pub fn apply_permutation_mask(mask: &Mask, map: &PermutationMap) -> Result<Mask> {
    if mask.layers.len() + 1 != map.num_boundaries() {
        return Err(AlignError::InvalidPermutation(
            "map does not match mask layer count".into(),
        ));
    }
    let mut layers = Vec::with_capacity(mask.layers.len());
    for (l, m) in mask.layers.iter().enumerate() {
        let p_in = map.boundary(l);
        let p_out = map.boundary(l + 1);
        if p_out.len() != m.rows() || p_in.len() != m.cols() {
            return Err(AlignError::InvalidPermutation(format!(
                "boundary sizes do not match mask layer {}",
                l
            )));
        }
        let mut out = Tensor::filled(m.shape().to_vec(), 0u8);
        for r in 0..m.rows() {
            let dst_r = p_out[r];
            for c in 0..m.cols() {
                *out.at_mut(dst_r, p_in[c]) = m.at(r, c);
            }
        }
        layers.push(out);
    }
    Ok(Mask::from_layers(layers))
}

/// Random tensor helper shared by tests and the self-recovery suite.
pub fn random_inputs<S: Scalar>(n: usize, dim: usize, seed: u64) -> Tensor<S> {
    let mut rng = chacha(derive_seed(seed, "rand-inputs", &[]));
    let data = (0..n * dim)
        .map(|_| S::from_f64(uniform_index(&mut rng, 4001) as f64 / 1000.0 - 2.0))
        .collect();
    Tensor::from_vec(vec![n, dim], data)
}
