//! Training objectives: adversarial losses and the three-part encoder loss
//! with optimal-transport / Hungarian alignment of latent sets.
//!
//! Latent sets are stored row-major here: an `(n, d)` matrix holds one
//! instance latent per row. The matching itself is treated as a constant of
//! the current step; gradients flow only through the aligned distance.

use ndarray::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("cost matrix must be square, got {0}x{1}")]
    NonSquare(usize, usize),
    #[error("cost matrix entries must be finite and non-negative")]
    BadCost,
    #[error("invalid parameter: {0}")]
    BadParam(&'static str),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

/// Epsilon used to clamp discriminator scores inside logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Column-alignment strategy for the encoder reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AlignMode {
    /// IPOT transport plan, rounded to a permutation.
    Ot,
    /// Exact assignment.
    Hungarian,
    /// Pick the best remaining match per row in order (ablation only).
    Greedy,
}

impl std::str::FromStr for AlignMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ot" => Ok(AlignMode::Ot),
            "hungarian" => Ok(AlignMode::Hungarian),
            "greedy" => Ok(AlignMode::Greedy),
            other => Err(format!("unknown align mode `{other}`")),
        }
    }
}

/// Pairwise squared Euclidean distances between rows of `z` and `zhat`.
pub fn cost_matrix(z: ArrayView2<f64>, zhat: ArrayView2<f64>) -> Array2<f64> {
    let n = z.nrows();
    let m = zhat.nrows();
    Array2::from_shape_fn((n, m), |(i, j)| {
        z.row(i)
            .iter()
            .zip(zhat.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

fn validate_cost(d: ArrayView2<f64>) -> Result<usize, LossError> {
    let (n, m) = d.dim();
    if n != m {
        return Err(LossError::NonSquare(n, m));
    }
    if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(LossError::BadCost);
    }
    Ok(n)
}

/// Cost-minimizing permutation of a square cost matrix: `perm[row] = col`.
/// Among equal-cost optima, returns the lexicographically smallest assignment.
pub fn hungarian(d: ArrayView2<f64>) -> Result<Vec<usize>, LossError> {
    let n = validate_cost(d)?;
    let (_, opt_cost) = solve_lap(&d.to_owned());
    // Lexicographic refinement: fix rows in order to the smallest column that
    // keeps the optimum attainable.
    let tol = 1e-9 * (1.0 + opt_cost.abs());
    let mut used = vec![false; n];
    let mut perm = vec![0usize; n];
    let mut prefix = 0.0;
    for row in 0..n {
        let mut chosen = None;
        for col in 0..n {
            if used[col] {
                continue;
            }
            let rest = reduced_cost(&d, row + 1, &used, col);
            if prefix + d[[row, col]] + rest <= opt_cost + tol {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.expect("optimal assignment must remain attainable");
        used[col] = true;
        perm[row] = col;
        prefix += d[[row, col]];
    }
    Ok(perm)
}

/// Optimal cost of assigning rows `from_row..n` to the columns not yet used,
/// with `extra_col` also considered used.
fn reduced_cost(d: &ArrayView2<f64>, from_row: usize, used: &[bool], extra_col: usize) -> f64 {
    let n = d.nrows();
    let cols: Vec<usize> = (0..n).filter(|&c| !used[c] && c != extra_col).collect();
    if from_row == n {
        return 0.0;
    }
    let m = cols.len();
    let sub = Array2::from_shape_fn((m, m), |(i, j)| d[[from_row + i, cols[j]]]);
    solve_lap(&sub).1
}

/// Augmenting-path linear assignment (Jonker-Volgenant style, O(n^3)).
/// Returns `(perm, cost)` with `perm[row] = col`.
fn solve_lap(d: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = d.nrows();
    if n == 0 {
        return (vec![], 0.0);
    }
    // 1-based columns with a virtual column 0
    let mut job = vec![usize::MAX; n + 1]; // job[col] = row assigned
    let mut ys = vec![0.0f64; n]; // row potentials
    let mut yt = vec![0.0f64; n + 1]; // col potentials
    for row in 0..n {
        let mut cur_col = n; // virtual
        job[cur_col] = row;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut prv = vec![usize::MAX; n + 1];
        let mut in_z = vec![false; n + 1];
        while job[cur_col] != usize::MAX {
            in_z[cur_col] = true;
            let r = job[cur_col];
            let mut delta = f64::INFINITY;
            let mut next_col = 0;
            for col in 0..n {
                if in_z[col] {
                    continue;
                }
                let rc = d[[r, col]] - ys[r] - yt[col];
                if rc < min_to[col] {
                    min_to[col] = rc;
                    prv[col] = cur_col;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    next_col = col;
                }
            }
            for col in 0..=n {
                if in_z[col] {
                    if job[col] != usize::MAX {
                        ys[job[col]] += delta;
                    }
                    yt[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            cur_col = next_col;
        }
        while cur_col != n {
            let p = prv[cur_col];
            job[cur_col] = job[p];
            cur_col = p;
        }
    }
    let mut perm = vec![0usize; n];
    let mut cost = 0.0;
    for col in 0..n {
        if job[col] != usize::MAX {
            perm[job[col]] = col;
            cost += d[[job[col], col]];
        }
    }
    (perm, cost)
}

/// Proximal-point optimal transport with uniform marginals. Returns an
/// `n x n` doubly stochastic plan (marginals `1/n` within 1e-6).
///
/// One Sinkhorn sweep per outer proximal step, then extra sweeps on the final
/// kernel until the marginals are balanced.
pub fn ipot_align(
    d: ArrayView2<f64>,
    beta: f64,
    iters: usize,
) -> Result<Array2<f64>, LossError> {
    let n = validate_cost(d)?;
    if beta <= 0.0 {
        return Err(LossError::BadParam("beta must be > 0"));
    }
    if iters == 0 {
        return Err(LossError::BadParam("iters must be >= 1"));
    }
    let uniform = 1.0 / n as f64;
    let a = Array1::from_elem(n, uniform);
    let kernel = d.mapv(|c| (-c / beta).exp());
    let mut plan = Array2::from_elem((n, n), uniform * uniform);
    let mut sigma = Array1::from_elem(n, uniform);
    let mut q = Array2::zeros((n, n));
    for _ in 0..iters {
        q.assign(&(&kernel * &plan));
        let delta = &a / &q.dot(&sigma);
        sigma = &a / &q.t().dot(&delta);
        for i in 0..n {
            for j in 0..n {
                plan[[i, j]] = delta[i] * q[[i, j]] * sigma[j];
            }
        }
    }
    // balance the final scaling so both marginals are uniform
    for _ in 0..100_000 {
        let row_err = plan
            .sum_axis(Axis(1))
            .iter()
            .map(|r| (r - uniform).abs())
            .fold(0.0, f64::max);
        let col_err = plan
            .sum_axis(Axis(0))
            .iter()
            .map(|r| (r - uniform).abs())
            .fold(0.0, f64::max);
        if row_err < 1e-10 && col_err < 1e-10 {
            break;
        }
        let rows = plan.sum_axis(Axis(1));
        for i in 0..n {
            for j in 0..n {
                plan[[i, j]] *= uniform / rows[i];
            }
        }
        let cols = plan.sum_axis(Axis(0));
        for j in 0..n {
            for i in 0..n {
                plan[[i, j]] *= uniform / cols[j];
            }
        }
    }
    Ok(plan)
}

/// Round a transport plan to a permutation: row-argmax, with a Hungarian
/// repair on the negated plan when the argmaxes collide.
pub fn round_plan(plan: ArrayView2<f64>) -> Vec<usize> {
    let n = plan.nrows();
    let mut perm = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut collision = false;
    for i in 0..n {
        let mut best = 0;
        for j in 1..n {
            if plan[[i, j]] > plan[[i, best]] {
                best = j;
            }
        }
        perm[i] = best;
        if seen[best] {
            collision = true;
        }
        seen[best] = true;
    }
    if !collision {
        return perm;
    }
    let maxv = plan.iter().cloned().fold(0.0, f64::max);
    let cost = plan.mapv(|p| maxv - p);
    hungarian(cost.view()).expect("repair cost matrix is valid")
}

fn greedy_align(d: ArrayView2<f64>) -> Vec<usize> {
    let n = d.nrows();
    let mut used = vec![false; n];
    let mut perm = vec![0usize; n];
    for i in 0..n {
        let mut best = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            if best.map_or(true, |b: usize| d[[i, j]] < d[[i, b]]) {
                best = Some(j);
            }
        }
        let j = best.unwrap();
        used[j] = true;
        perm[i] = j;
    }
    perm
}

/// IPOT defaults when the caller does not override them.
pub const IPOT_BETA: f64 = 1.0;
pub const IPOT_ITERS: usize = 50;

/// The permutation aligning rows of `zhat` to rows of `z` under the chosen
/// mode: row `perm[i]` of `zhat` matches row `i` of `z`.
pub fn align_permutation(
    z: ArrayView2<f64>,
    zhat: ArrayView2<f64>,
    mode: AlignMode,
) -> Result<Vec<usize>, LossError> {
    let d = cost_matrix(z, zhat);
    match mode {
        AlignMode::Hungarian => hungarian(d.view()),
        AlignMode::Ot => {
            let plan = ipot_align(d.view(), IPOT_BETA, IPOT_ITERS)?;
            Ok(round_plan(plan.view()))
        }
        AlignMode::Greedy => Ok(greedy_align(d.view())),
    }
}

/// Squared Frobenius distance after aligning `zhat`'s rows to `z`'s.
pub fn alignment_loss(
    z: ArrayView2<f64>,
    zhat: ArrayView2<f64>,
    mode: AlignMode,
) -> Result<f64, LossError> {
    if z.dim() != zhat.dim() {
        return Err(LossError::ShapeMismatch(
            z.shape().to_vec(),
            zhat.shape().to_vec(),
        ));
    }
    let perm = align_permutation(z, zhat, mode)?;
    let mut loss = 0.0;
    for (i, &j) in perm.iter().enumerate() {
        loss += z
            .row(i)
            .iter()
            .zip(zhat.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(loss)
}

/// Mean squared error between two equal-shaped tensors.
pub fn intermediate_loss(a: ArrayViewD<f64>, b: ArrayViewD<f64>) -> Result<f64, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Mean absolute (L1) distance between two equal-shaped depth images.
pub fn pose_loss(a: ArrayViewD<f64>, b: ArrayViewD<f64>) -> Result<f64, LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(a.shape().to_vec(), b.shape().to_vec()));
    }
    let n = a.len() as f64;
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Which encoder-loss terms are active (ablation switches).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EncoderLossWeights {
    pub lambda_intermediate: f64,
    pub lambda_pose: f64,
}

impl Default for EncoderLossWeights {
    fn default() -> Self {
        Self { lambda_intermediate: 1.0, lambda_pose: 1.0 }
    }
}

/// `L_E = L_a + lambda1 * L_i + lambda2 * L_p`.
pub fn encoder_loss(align: f64, intermediate: f64, pose: f64, w: EncoderLossWeights) -> f64 {
    align + w.lambda_intermediate * intermediate + w.lambda_pose * pose
}

/// Non-saturating adversarial losses from per-sample scores in [0, 1].
/// Returns `(loss_d, loss_g)`; scores are clamped away from {0, 1}.
pub fn adversarial_losses(real_scores: &[f64], fake_scores: &[f64]) -> (f64, f64) {
    let clamp = |s: f64| s.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
    let mean = |it: &mut dyn Iterator<Item = f64>| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for v in it {
            sum += v;
            n += 1;
        }
        sum / n.max(1) as f64
    };
    let loss_d = -mean(&mut real_scores.iter().map(|&s| clamp(s).ln()))
        - mean(&mut fake_scores.iter().map(|&s| (1.0 - clamp(s)).ln()));
    let loss_g = -mean(&mut fake_scores.iter().map(|&s| clamp(s).ln()));
    (loss_d, loss_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min_cost(d: ArrayView2<f64>) -> f64 {
        let n = d.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = p.iter().enumerate().map(|(i, &j)| d[[i, j]]).sum();
            if c < best {
                best = c;
            }
        });
        best
    }

    fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == p.len() {
            f(p);
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            permute(p, k + 1, f);
            p.swap(k, i);
        }
    }

    #[test]
    fn hungarian_zero_diagonal_is_identity() {
        let d = array![[0.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]];
        assert_eq!(hungarian(d.view()).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_prefers_swap() {
        let d = array![[2.0, 1.0], [1.0, 2.0]];
        assert_eq!(hungarian(d.view()).unwrap(), vec![1, 0]);
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let d = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..10.0));
            let perm = hungarian(d.view()).unwrap();
            let cost: f64 = perm.iter().enumerate().map(|(i, &j)| d[[i, j]]).sum();
            let best = brute_force_min_cost(d.view());
            assert_abs_diff_eq!(cost, best, epsilon = 1e-9);
        }
    }

    #[test]
    fn hungarian_tie_break_is_lexicographic() {
        // every assignment costs 2.0; smallest is the identity
        let d = Array2::from_elem((4, 4), 0.5);
        assert_eq!(hungarian(d.view()).unwrap(), vec![0, 1, 2, 3]);
        // force a specific non-identity optimum set
        let d = array![[0.0, 0.0, 9.0], [0.0, 0.0, 9.0], [9.0, 9.0, 0.0]];
        assert_eq!(hungarian(d.view()).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn hungarian_rejects_non_square() {
        let d = Array2::<f64>::zeros((2, 3));
        assert!(hungarian(d.view()).is_err());
    }

    #[test]
    fn ipot_trivial_diagonal() {
        let mut d = Array2::from_elem((4, 4), 50.0);
        d.diag_mut().fill(0.0);
        let plan = ipot_align(d.view(), 1.0, 50).unwrap();
        for i in 0..4 {
            assert!(plan[[i, i]] > 0.2, "diagonal mass {}", plan[[i, i]]);
        }
        assert_eq!(round_plan(plan.view()), vec![0, 1, 2, 3]);
    }

    #[test]
    fn ipot_single_element() {
        let d = array![[3.0]];
        let plan = ipot_align(d.view(), 1.0, 10).unwrap();
        assert_abs_diff_eq!(plan[[0, 0]], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ipot_marginals_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..20 {
            let d = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0.0..4.0));
            let plan = ipot_align(d.view(), 1.0, 50).unwrap();
            for r in plan.sum_axis(Axis(1)).iter().chain(plan.sum_axis(Axis(0)).iter()) {
                assert_abs_diff_eq!(*r, 0.2, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn ipot_rounding_matches_hungarian_mostly() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let mut agree = 0;
        for _ in 0..100 {
            let d = Array2::from_shape_fn((5, 5), |_| rng.gen_range(0.0..10.0));
            let h = hungarian(d.view()).unwrap();
            let plan = ipot_align(d.view(), IPOT_BETA, IPOT_ITERS).unwrap();
            if round_plan(plan.view()) == h {
                agree += 1;
            }
        }
        assert!(agree >= 95, "IPOT agreed with Hungarian on only {agree}/100");
    }

    #[test]
    fn ipot_rejects_bad_params() {
        let d = Array2::<f64>::zeros((2, 2));
        assert!(ipot_align(d.view(), 0.0, 10).is_err());
        assert!(ipot_align(d.view(), 1.0, 0).is_err());
    }

    fn random_latents(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn alignment_loss_zero_on_equal_and_permuted() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let z = random_latents(&mut rng, 5, 8);
        for mode in [AlignMode::Ot, AlignMode::Hungarian, AlignMode::Greedy] {
            assert_abs_diff_eq!(alignment_loss(z.view(), z.view(), mode).unwrap(), 0.0);
        }
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let zp = Array2::from_shape_fn((5, 8), |(i, j)| z[[perm[i], j]]);
        for mode in [AlignMode::Ot, AlignMode::Hungarian] {
            assert_abs_diff_eq!(
                alignment_loss(z.view(), zp.view(), mode).unwrap(),
                0.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn alignment_loss_matches_permutation_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        for _ in 0..100 {
            let z = random_latents(&mut rng, 4, 8);
            let zhat = random_latents(&mut rng, 4, 8);
            let loss = alignment_loss(z.view(), zhat.view(), AlignMode::Hungarian).unwrap();
            // brute force over all 24 permutations
            let mut perm: Vec<usize> = (0..4).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                let c: f64 = p
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| {
                        z.row(i)
                            .iter()
                            .zip(zhat.row(j).iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .sum();
                if c < best {
                    best = c;
                }
            });
            assert_abs_diff_eq!(loss, best, epsilon = 1e-9);
        }
    }

    #[test]
    fn greedy_never_beats_hungarian() {
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        for _ in 0..100 {
            let z = random_latents(&mut rng, 5, 6);
            let zhat = random_latents(&mut rng, 5, 6);
            let g = alignment_loss(z.view(), zhat.view(), AlignMode::Greedy).unwrap();
            let h = alignment_loss(z.view(), zhat.view(), AlignMode::Hungarian).unwrap();
            assert!(g >= h - 1e-9, "greedy {g} < hungarian {h}");
        }
    }

    #[test]
    fn hungarian_loss_invariant_to_zhat_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let z = random_latents(&mut rng, 5, 6);
        let zhat = random_latents(&mut rng, 5, 6);
        let base = alignment_loss(z.view(), zhat.view(), AlignMode::Hungarian).unwrap();
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let zp = Array2::from_shape_fn((5, 6), |(i, j)| zhat[[perm[i], j]]);
            let l = alignment_loss(z.view(), zp.view(), AlignMode::Hungarian).unwrap();
            assert_abs_diff_eq!(l, base, epsilon = 1e-9);
        }
    }

    #[test]
    fn intermediate_loss_examples() {
        let a = ArrayD::from_elem(ndarray::IxDyn(&[3, 4]), 1.5);
        assert_abs_diff_eq!(intermediate_loss(a.view(), a.view()).unwrap(), 0.0);
        let b = ArrayD::from_elem(ndarray::IxDyn(&[3, 4]), 2.0);
        assert_abs_diff_eq!(intermediate_loss(a.view(), b.view()).unwrap(), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let x = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 5]), |_| rng.gen_range(-1.0..1.0));
        let y = ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 5]), |_| rng.gen_range(-1.0..1.0));
        let mut acc = 0.0;
        for (a, b) in x.iter().zip(y.iter()) {
            acc += (a - b) * (a - b);
        }
        assert_abs_diff_eq!(
            intermediate_loss(x.view(), y.view()).unwrap(),
            acc / 10.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn pose_loss_examples() {
        let a = ArrayD::from_elem(ndarray::IxDyn(&[4, 4]), 0.25);
        assert_abs_diff_eq!(pose_loss(a.view(), a.view()).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.5);
        assert_abs_diff_eq!(pose_loss(a.view(), b.view()).unwrap(), 0.5);
        let c = ArrayD::from_elem(ndarray::IxDyn(&[2, 2]), 0.0);
        assert!(pose_loss(a.view(), c.view()).is_err());
    }

    #[test]
    fn encoder_loss_is_weighted_sum() {
        let w = EncoderLossWeights::default();
        assert_abs_diff_eq!(encoder_loss(0.0, 0.0, 0.0, w), 0.0);
        assert_abs_diff_eq!(encoder_loss(1.0, 2.0, 3.0, w), 6.0);
        let ablated = EncoderLossWeights { lambda_intermediate: 0.0, lambda_pose: 0.0 };
        assert_abs_diff_eq!(encoder_loss(1.0, 2.0, 3.0, ablated), 1.0);
    }

    #[test]
    fn adversarial_losses_plug_in() {
        let (ld, lg) = adversarial_losses(&[0.5, 0.5], &[0.5, 0.5]);
        assert_abs_diff_eq!(ld, 2.0 * (2.0f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lg, (2.0f64).ln(), epsilon = 1e-12);
        // near-perfect discriminator drives L_D toward zero
        let (ld, _) = adversarial_losses(&[1.0 - 1e-9], &[1e-9]);
        assert!(ld < 1e-5, "L_D should vanish, got {ld}");
        // extreme scores stay finite via clamping
        let (ld, lg) = adversarial_losses(&[0.0, 1.0], &[0.0, 1.0]);
        assert!(ld.is_finite() && lg.is_finite());
    }

    #[test]
    fn adversarial_losses_match_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let real: Vec<f64> = (0..16).map(|_| rng.gen_range(0.001..0.999)).collect();
        let fake: Vec<f64> = (0..16).map(|_| rng.gen_range(0.001..0.999)).collect();
        let (ld, lg) = adversarial_losses(&real, &fake);
        let mut sum_r = 0.0;
        let mut sum_f = 0.0;
        let mut sum_g = 0.0;
        for &s in &real {
            sum_r += s.ln();
        }
        for &s in &fake {
            sum_f += (1.0 - s).ln();
            sum_g += s.ln();
        }
        assert_abs_diff_eq!(ld, -sum_r / 16.0 - sum_f / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(lg, -sum_g / 16.0, epsilon = 1e-12);
    }
}
