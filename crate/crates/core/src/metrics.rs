//! Tracking and prediction metrics: Chamfer distance, assignment-based EMD,
//! and per-track accuracy statistics (median error, threshold accuracy,
//! survival rate).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::Vec3;
use crate::render::CameraModel;
use crate::{Error, Result};

/// EMD falls back to a uniform subsample of each set above this size so the
/// exact assignment stays O(cap³).
pub const EMD_SUBSAMPLE_CAP: usize = 128;
const EMD_SUBSAMPLE_SEED: u64 = 0x00e3_7d5a;

/// Symmetric Chamfer distance: half the sum of the two directed mean
/// nearest-neighbor distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("chamfer: empty point set"));
    }
    let directed = |from: &[Vec3], to: &[Vec3]| -> f64 {
        let mut sum = 0.0;
        for p in from {
            let mut best = f64::INFINITY;
            for q in to {
                let d = p.dist(*q);
                if d < best {
                    best = d;
                }
            }
            sum += best;
        }
        sum / from.len() as f64
    };
    Ok(0.5 * (directed(a, b) + directed(b, a)))
}

/// Mean distance under the optimal one-to-one assignment. Sets larger than
/// [`EMD_SUBSAMPLE_CAP`] are first subsampled uniformly (each set with its
/// own fixed-seed stream, so the result is deterministic and symmetric under
/// swapping the arguments).
pub fn emd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("emd: empty point set"));
    }
    for (name, set) in [("first", a), ("second", b)] {
        if set.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric(format!("emd: non-finite point in {name} set")));
        }
    }
    let m = a.len().min(b.len()).min(EMD_SUBSAMPLE_CAP);
    let pick = |set: &[Vec3]| -> Vec<Vec3> {
        if set.len() == m {
            return set.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(EMD_SUBSAMPLE_SEED);
        let mut idx = rand::seq::index::sample(&mut rng, set.len(), m).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| set[i]).collect()
    };
    let sa = pick(a);
    let sb = pick(b);
    let cost: Vec<f64> =
        sa.iter().flat_map(|p| sb.iter().map(move |q| p.dist(*q))).collect();
    let assign = hungarian(m, &cost);
    // Re-summed in row order so the value is bit-identical to any oracle that
    // sums the same assignment the same way.
    let total: f64 = (0..m).map(|i| cost[i * m + assign[i]]).sum();
    Ok(total / m as f64)
}

/// Exact Hungarian assignment (potentials formulation, O(n³)) over a dense
/// row-major n×n cost matrix. Returns, per row, the assigned column.
pub fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n*n");
    // 1-based arrays with a sentinel row/column 0, the classical shortest
    // augmenting path scheme over dual potentials u, v.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
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
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurvivalAggregation {
    /// Mean of per-track surviving fractions.
    MeanOverTracks,
    /// Total surviving frames over total frames.
    PooledFrames,
}

#[derive(Clone, Copy, Debug)]
pub struct TrackEvalOptions {
    /// Accuracy thresholds in the unit of the supplied points, ascending.
    pub thresholds: [f64; 4],
    /// A track fails at its first frame with error at or above this.
    pub survival_threshold: f64,
    pub aggregation: SurvivalAggregation,
}

impl TrackEvalOptions {
    /// 3D defaults: thresholds 2/4/8/16 mm, survival cutoff 0.5 m (meters in).
    pub fn meters() -> TrackEvalOptions {
        TrackEvalOptions {
            thresholds: [0.002, 0.004, 0.008, 0.016],
            survival_threshold: 0.5,
            aggregation: SurvivalAggregation::MeanOverTracks,
        }
    }

    /// Projected-variant defaults: thresholds 1/2/4/8 px, survival 50 px.
    pub fn pixels() -> TrackEvalOptions {
        TrackEvalOptions {
            thresholds: [1.0, 2.0, 4.0, 8.0],
            survival_threshold: 50.0,
            aggregation: SurvivalAggregation::MeanOverTracks,
        }
    }
}

/// Per-track accuracy report. `mte` carries the unit the evaluation ran in
/// (millimeters from [`track_eval`], pixels from [`track_eval_projected`]).
#[derive(Clone, Copy, Debug)]
pub struct TrackEval {
    pub mte: f64,
    /// Percent of all (frame, track) samples within each threshold.
    pub delta_pct: [f64; 4],
    pub delta_avg_pct: f64,
    pub survival_pct: f64,
}

/// Evaluates tracked point trajectories against ground truth with
/// correspondences. Inputs are T frames of N points each, in meters; the
/// median trajectory error is reported in millimeters.
pub fn track_eval(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<TrackEval> {
    let errors = pointwise_errors(pred, gt)?;
    let mut out = eval_errors(&errors, &TrackEvalOptions::meters());
    out.mte *= 1000.0;
    Ok(out)
}

pub fn track_eval_with(
    pred: &[Vec<Vec3>],
    gt: &[Vec<Vec3>],
    opts: &TrackEvalOptions,
) -> Result<TrackEval> {
    let errors = pointwise_errors(pred, gt)?;
    let mut out = eval_errors(&errors, opts);
    out.mte *= 1000.0;
    Ok(out)
}

/// Projects both trajectories through the camera and evaluates in pixel
/// units. Points behind the camera cannot be scored and are an error.
pub fn track_eval_projected(
    pred: &[Vec<Vec3>],
    gt: &[Vec<Vec3>],
    camera: &CameraModel,
    opts: &TrackEvalOptions,
) -> Result<TrackEval> {
    check_shapes(pred, gt)?;
    let mut errors = Vec::with_capacity(pred.len());
    for (t, (pf, gf)) in pred.iter().zip(gt).enumerate() {
        let mut row = Vec::with_capacity(pf.len());
        for (p, g) in pf.iter().zip(gf) {
            let (pu, pv, _) = camera.project_point(*p).ok_or_else(|| {
                Error::invalid(format!("track_eval_projected: predicted point behind camera at frame {t}"))
            })?;
            let (gu, gv, _) = camera.project_point(*g).ok_or_else(|| {
                Error::invalid(format!("track_eval_projected: ground-truth point behind camera at frame {t}"))
            })?;
            row.push(((pu - gu).powi(2) + (pv - gv).powi(2)).sqrt());
        }
        errors.push(row);
    }
    Ok(eval_errors(&errors, opts))
}

fn check_shapes(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::invalid("track_eval: empty trajectory"));
    }
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "track_eval: {} predicted frames vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let n = gt[0].len();
    if n == 0 {
        return Err(Error::invalid("track_eval: no tracks"));
    }
    for (t, (pf, gf)) in pred.iter().zip(gt).enumerate() {
        if pf.len() != n || gf.len() != n {
            return Err(Error::shape(format!(
                "track_eval: frame {t} has {} predicted / {} ground-truth points, expected {n}",
                pf.len(),
                gf.len()
            )));
        }
    }
    Ok(())
}

fn pointwise_errors(pred: &[Vec<Vec3>], gt: &[Vec<Vec3>]) -> Result<Vec<Vec<f64>>> {
    check_shapes(pred, gt)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(pf, gf)| pf.iter().zip(gf).map(|(p, g)| p.dist(*g)).collect())
        .collect())
}

/// Core statistics over an errors[t][i] matrix in a single unit.
fn eval_errors(errors: &[Vec<f64>], opts: &TrackEvalOptions) -> TrackEval {
    let t_len = errors.len();
    let n = errors[0].len();
    let mut flat: Vec<f64> = errors.iter().flatten().copied().collect();
    flat.sort_by(f64::total_cmp);
    let mte = if flat.len() % 2 == 1 {
        flat[flat.len() / 2]
    } else {
        0.5 * (flat[flat.len() / 2 - 1] + flat[flat.len() / 2])
    };

    let total = flat.len() as f64;
    let mut delta_pct = [0.0; 4];
    for (k, thr) in opts.thresholds.iter().enumerate() {
        let hits = flat.iter().filter(|e| **e <= *thr).count();
        delta_pct[k] = 100.0 * hits as f64 / total;
    }
    let delta_avg_pct = delta_pct.iter().sum::<f64>() / 4.0;

    let mut surviving_total = 0usize;
    let mut fraction_sum = 0.0;
    for i in 0..n {
        let mut alive = t_len;
        for (t, row) in errors.iter().enumerate() {
            if row[i] >= opts.survival_threshold {
                alive = t;
                break;
            }
        }
        surviving_total += alive;
        fraction_sum += alive as f64 / t_len as f64;
    }
    let survival_pct = match opts.aggregation {
        SurvivalAggregation::MeanOverTracks => 100.0 * fraction_sum / n as f64,
        SurvivalAggregation::PooledFrames => {
            100.0 * surviving_total as f64 / (t_len * n) as f64
        }
    };

    TrackEval { mte, delta_pct, delta_avg_pct, survival_pct }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vec3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        vec3(
            (rng.random::<f64>() - 0.5) * s,
            (rng.random::<f64>() - 0.5) * s,
            (rng.random::<f64>() - 0.5) * s,
        )
    }

    #[test]
    fn chamfer_basics() {
        let a = [vec3(0.0, 0.0, 0.0)];
        let b = [vec3(1.0, 0.0, 0.0)];
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        assert!(chamfer(&a, &[]).is_err());
    }

    /// Plain double-loop restatement used as the oracle.
    fn chamfer_oracle(a: &[Vec3], b: &[Vec3]) -> f64 {
        let one = |x: &[Vec3], y: &[Vec3]| {
            x.iter()
                .map(|p| y.iter().map(|q| p.dist(*q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        0.5 * (one(a, b) + one(b, a))
    }

    #[test]
    fn chamfer_matches_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let a: Vec<Vec3> = (0..8).map(|_| rv(&mut rng, 2.0)).collect();
            let b: Vec<Vec3> = (0..8).map(|_| rv(&mut rng, 2.0)).collect();
            assert_eq!(chamfer(&a, &b).unwrap(), chamfer_oracle(&a, &b));
            assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut idx: Vec<usize> = (0..n).collect();
        fn heap(k: usize, idx: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if k <= 1 {
                out.push(idx.clone());
                return;
            }
            for i in 0..k {
                heap(k - 1, idx, out);
                if k % 2 == 0 {
                    idx.swap(i, k - 1);
                } else {
                    idx.swap(0, k - 1);
                }
            }
        }
        heap(n, &mut idx, &mut out);
        out
    }

    fn emd_oracle(a: &[Vec3], b: &[Vec3]) -> f64 {
        let n = a.len();
        let mut best = f64::INFINITY;
        for perm in permutations(n) {
            let total: f64 = (0..n).map(|i| a[i].dist(b[perm[i]])).sum();
            if total < best {
                best = total;
            }
        }
        best / n as f64
    }

    #[test]
    fn emd_basics() {
        let a = [vec3(0.0, 0.0, 0.0), vec3(1.0, 0.0, 0.0)];
        let swapped = [a[1], a[0]];
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
        assert_eq!(emd(&a, &swapped).unwrap(), 0.0);
        assert!(emd(&a, &[]).is_err());
        assert!(emd(&[vec3(f64::NAN, 0.0, 0.0)], &a).is_err());
    }

    #[test]
    fn emd_matches_factorial_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..50 {
            let a: Vec<Vec3> = (0..6).map(|_| rv(&mut rng, 2.0)).collect();
            let b: Vec<Vec3> = (0..6).map(|_| rv(&mut rng, 2.0)).collect();
            assert_eq!(emd(&a, &b).unwrap(), emd_oracle(&a, &b));
        }
    }

    #[test]
    fn emd_symmetric_under_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let a: Vec<Vec3> = (0..7).map(|_| rv(&mut rng, 2.0)).collect();
            let b: Vec<Vec3> = (0..7).map(|_| rv(&mut rng, 2.0)).collect();
            assert_relative_eq!(emd(&a, &b).unwrap(), emd(&b, &a).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn emd_subsamples_large_sets_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let a: Vec<Vec3> = (0..200).map(|_| rv(&mut rng, 1.0)).collect();
        let b: Vec<Vec3> = (0..150).map(|_| rv(&mut rng, 1.0)).collect();
        let d1 = emd(&a, &b).unwrap();
        let d2 = emd(&a, &b).unwrap();
        assert_eq!(d1.to_bits(), d2.to_bits());
        assert!(d1.is_finite() && d1 >= 0.0);
        // Identical large sets still assign index-to-index: zero distance.
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_never_exceeds_emd() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..50 {
            let n = rng.random_range(2..=10);
            let a: Vec<Vec3> = (0..n).map(|_| rv(&mut rng, 2.0)).collect();
            let b: Vec<Vec3> = (0..n).map(|_| rv(&mut rng, 2.0)).collect();
            let c = chamfer(&a, &b).unwrap();
            let e = emd(&a, &b).unwrap();
            assert!(c <= e + 1e-12, "chamfer {c} > emd {e}");
        }
    }

    #[test]
    fn hungarian_small_known_case() {
        // Row 0 prefers col 0, row 1 prefers col 1.
        let cost = vec![1.0, 2.0, 2.0, 1.0];
        assert_eq!(hungarian(2, &cost), vec![0, 1]);
        // Forced crossing.
        let cost = vec![10.0, 1.0, 1.0, 10.0];
        assert_eq!(hungarian(2, &cost), vec![1, 0]);
    }

    #[test]
    fn hungarian_matches_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..30 {
            let n = 5;
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let assign = hungarian(n, &cost);
            let total: f64 = (0..n).map(|i| cost[i * n + assign[i]]).sum();
            let best = permutations(n)
                .into_iter()
                .map(|p| (0..n).map(|i| cost[i * n + p[i]]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(total, best);
            let mut cols = assign.clone();
            cols.sort_unstable();
            assert_eq!(cols, (0..n).collect::<Vec<_>>());
        }
    }

    fn constant_error_tracks(t: usize, n: usize, err: Vec3) -> (Vec<Vec<Vec3>>, Vec<Vec<Vec3>>) {
        let gt: Vec<Vec<Vec3>> = (0..t)
            .map(|ti| (0..n).map(|i| vec3(i as f64 * 0.1, ti as f64 * 0.01, 0.0)).collect())
            .collect();
        let pred = gt
            .iter()
            .map(|frame| frame.iter().map(|p| *p + err).collect())
            .collect();
        (pred, gt)
    }

    #[test]
    fn track_eval_perfect_prediction() {
        let (gt, _) = constant_error_tracks(5, 4, Vec3::ZERO);
        let ev = track_eval(&gt, &gt).unwrap();
        assert_eq!(ev.mte, 0.0);
        assert_eq!(ev.delta_avg_pct, 100.0);
        assert_eq!(ev.survival_pct, 100.0);
        assert_eq!(ev.delta_pct, [100.0; 4]);
    }

    #[test]
    fn track_eval_constant_four_mm() {
        let (pred, gt) = constant_error_tracks(6, 3, vec3(0.0, 0.0, 0.004));
        let ev = track_eval(&pred, &gt).unwrap();
        assert_relative_eq!(ev.mte, 4.0, epsilon = 1e-9);
        assert_eq!(ev.delta_pct, [0.0, 100.0, 100.0, 100.0]);
        assert_eq!(ev.delta_avg_pct, 75.0);
        assert_eq!(ev.survival_pct, 100.0);
    }

    #[test]
    fn track_eval_survival_counts_up_to_first_failure() {
        let t = 10;
        let (mut pred, gt) = constant_error_tracks(t, 2, Vec3::ZERO);
        // Track 1 jumps to 1 m error from frame 5 on; recovery afterwards
        // must not count, so zero the error again at frame 8.
        for ti in 5..t {
            pred[ti][1] += vec3(1.0, 0.0, 0.0);
        }
        pred[8][1] = gt[8][1];
        let ev = track_eval(&pred, &gt).unwrap();
        // Track 0 survives all 10 frames, track 1 survives 5 of 10.
        assert_eq!(ev.survival_pct, 75.0);

        let pooled = track_eval_with(
            &pred,
            &gt,
            &TrackEvalOptions {
                aggregation: SurvivalAggregation::PooledFrames,
                ..TrackEvalOptions::meters()
            },
        )
        .unwrap();
        assert_eq!(pooled.survival_pct, 75.0);
    }

    #[test]
    fn track_eval_scaling_errors_up_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let t = 4;
            let n = 5;
            let gt: Vec<Vec<Vec3>> =
                (0..t).map(|_| (0..n).map(|_| rv(&mut rng, 0.5)).collect()).collect();
            let noise: Vec<Vec<Vec3>> =
                (0..t).map(|_| (0..n).map(|_| rv(&mut rng, 0.02)).collect()).collect();
            let scale = 1.0 + rng.random::<f64>() * 30.0;
            let pred1: Vec<Vec<Vec3>> = gt
                .iter()
                .zip(&noise)
                .map(|(g, w)| g.iter().zip(w).map(|(p, d)| *p + *d).collect())
                .collect();
            let pred2: Vec<Vec<Vec3>> = gt
                .iter()
                .zip(&noise)
                .map(|(g, w)| g.iter().zip(w).map(|(p, d)| *p + *d * scale).collect())
                .collect();
            let e1 = track_eval(&pred1, &gt).unwrap();
            let e2 = track_eval(&pred2, &gt).unwrap();
            assert!(e2.delta_avg_pct <= e1.delta_avg_pct + 1e-12);
            assert!(e2.survival_pct <= e1.survival_pct + 1e-12);
        }
    }

    #[test]
    fn track_eval_shape_errors() {
        let (pred, gt) = constant_error_tracks(3, 2, Vec3::ZERO);
        assert!(track_eval(&pred[..2], &gt).is_err());
        let mut bad = pred.clone();
        bad[1].pop();
        assert!(track_eval(&bad, &gt).is_err());
        assert!(track_eval(&[], &[]).is_err());
    }

    #[test]
    fn track_eval_projected_pixel_offsets() {
        let camera = CameraModel::look_at(
            vec3(0.0, 0.0, 1.0),
            Vec3::ZERO,
            vec3(0.0, 1.0, 0.0),
            200.0,
            64,
            64,
        )
        .unwrap();
        let gt = vec![vec![vec3(0.0, 0.0, 0.0), vec3(0.1, 0.0, 0.0)]];
        let ev = track_eval_projected(&gt, &gt, &camera, &TrackEvalOptions::pixels()).unwrap();
        assert_eq!(ev.mte, 0.0);
        assert_eq!(ev.delta_avg_pct, 100.0);

        // 3 px at depth 1 with f=200 is a 0.015 m lateral offset.
        let pred = vec![vec![vec3(0.015, 0.0, 0.0), vec3(0.115, 0.0, 0.0)]];
        let ev = track_eval_projected(&pred, &gt, &camera, &TrackEvalOptions::pixels()).unwrap();
        assert_relative_eq!(ev.mte, 3.0, epsilon = 1e-9);
        assert_eq!(ev.delta_pct, [0.0, 0.0, 100.0, 100.0]);

        // Behind the camera cannot be projected.
        let behind = vec![vec![vec3(0.0, 0.0, 5.0), vec3(0.1, 0.0, 0.0)]];
        assert!(track_eval_projected(&behind, &gt, &camera, &TrackEvalOptions::pixels()).is_err());
    }
}
