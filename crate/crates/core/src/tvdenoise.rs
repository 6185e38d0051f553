//! Spatiotemporal total-variation smoothing of a scene stack.
//!
//! Minimizes
//!
//! ```text
//! F(u) = 1/2 sum_valid (u - f)^2 + lambda * (ws |Dx u| + ws |Dy u| + wt |Dt u|)
//! ```
//!
//! with unit-spaced forward differences and Neumann boundaries, using the
//! first-order primal-dual method of Chambolle and Pock. When every voxel is
//! valid the data term is 1-strongly convex and the accelerated step-size
//! schedule is used. Iterates are projected onto `[min f, max f]`, which
//! contains the minimizer and never increases `F`; the returned solution is
//! the best iterate seen, so the reported objective sequence is monotone.

use serde::{Deserialize, Serialize};

use crate::error::{BuddError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseParams {
    pub lambda: f64,
    pub spatial_weight: f64,
    pub temporal_weight: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            spatial_weight: 1.0,
            temporal_weight: 0.5,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

impl DenoiseParams {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.spatial_weight >= 0.0
            && self.spatial_weight.is_finite()
            && self.temporal_weight >= 0.0
            && self.temporal_weight.is_finite()
            && self.max_iters >= 1
            && self.tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(BuddError::invalid(format!("denoise parameters out of range: {self:?}")))
        }
    }
}

/// A `depth x height x width` stack (time-major) with per-voxel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl Volume {
    pub fn new(depth: usize, height: usize, width: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = depth * height * width;
        if values.len() != n || valid.len() != n {
            return Err(BuddError::ShapeMismatch {
                what: "volume".into(),
                expected: n,
                found: values.len().min(valid.len()),
            });
        }
        Ok(Self {
            depth,
            height,
            width,
            values,
            valid,
        })
    }

    pub fn all_valid(depth: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let n = values.len();
        Self::new(depth, height, width, values, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseResult {
    pub values: Vec<f32>,
    /// Objective of the returned iterate after each iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

struct Axes {
    /// (stride, extent, weight) per axis
    axes: [(usize, usize, f64); 3],
}

impl Axes {
    fn new(vol: &Volume, params: &DenoiseParams) -> Self {
        Self {
            axes: [
                (vol.height * vol.width, vol.depth, params.temporal_weight),
                (vol.width, vol.height, params.spatial_weight),
                (1, vol.width, params.spatial_weight),
            ],
        }
    }
}

/// Contiguous index ranges of voxels that have a forward neighbour at
/// `i + stride` along the axis.
fn forward_ranges(n: usize, stride: usize, extent: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let block = stride * extent;
    let blocks = if extent < 2 { 0 } else { n / block };
    (0..blocks).map(move |b| b * block..b * block + stride * (extent - 1))
}

/// `F(u)` for the given data and validity.
pub fn objective(u: &[f64], f: &[f32], valid: &[bool], vol_shape: (usize, usize, usize), params: &DenoiseParams) -> f64 {
    let (depth, height, width) = vol_shape;
    let axes = [
        (height * width, depth, params.temporal_weight),
        (width, height, params.spatial_weight),
        (1, width, params.spatial_weight),
    ];
    let mut fidelity = 0.0;
    for i in 0..u.len() {
        if valid[i] {
            let d = u[i] - f64::from(f[i]);
            fidelity += d * d;
        }
    }
    let mut tv = 0.0;
    for &(stride, extent, weight) in &axes {
        if weight == 0.0 || extent < 2 {
            continue;
        }
        let mut acc = 0.0;
        for r in forward_ranges(u.len(), stride, extent) {
            acc += r.map(|i| (u[i + stride] - u[i]).abs()).sum::<f64>();
        }
        tv += weight * acc;
    }
    0.5 * fidelity + params.lambda * tv
}

/// Total-variation smoothing of `volume`. Invalid voxels carry no data term
/// and are filled from their neighbours.
pub fn tv_denoise(volume: &Volume, params: &DenoiseParams) -> Result<DenoiseResult> {
    params.validate()?;
    let n = volume.len();
    if volume.valid.len() != n || n != volume.depth * volume.height * volume.width {
        return Err(BuddError::ShapeMismatch {
            what: "volume".into(),
            expected: volume.depth * volume.height * volume.width,
            found: n,
        });
    }
    if let Some(i) = (0..n).find(|&i| volume.valid[i] && !volume.values[i].is_finite()) {
        return Err(BuddError::invalid(format!(
            "non-finite value {} at valid voxel {i}",
            volume.values[i]
        )));
    }
    let valid_count = volume.valid.iter().filter(|&&v| v).count();
    let tv_active = params.lambda > 0.0 && (params.spatial_weight > 0.0 || params.temporal_weight > 0.0);
    if !tv_active || valid_count == 0 {
        return Ok(DenoiseResult {
            values: volume.values.clone(),
            objective: Vec::new(),
            iterations: 0,
        });
    }

    let f = &volume.values;
    let valid = &volume.valid;
    let shape = (volume.depth, volume.height, volume.width);
    let axes = Axes::new(volume, params);

    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for i in (0..n).filter(|&i| valid[i]) {
        let v = f64::from(f[i]);
        lo = lo.min(v);
        hi = hi.max(v);
        sum += v;
    }
    let mean = sum / valid_count as f64;

    let mut u: Vec<f64> = (0..n)
        .map(|i| if valid[i] { f64::from(f[i]) } else { mean })
        .collect();
    let mut u_prev = u.clone();
    let mut ubar = vec![0.0; n];
    let mut duals: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];

    let op_norm_sq: f64 = 4.0 * axes.axes.iter().map(|a| a.2 * a.2).sum::<f64>();
    let mut tau = 1.0 / op_norm_sq.sqrt();
    let mut sigma = tau;
    let strongly_convex = valid_count == n;
    let mut theta = 1.0;

    let mut best = u.clone();
    let mut best_obj = objective(&u, f, valid, shape, params);
    let mut last_obj = best_obj;
    let mut history = Vec::with_capacity(params.max_iters);
    let mut iterations = 0;

    for _ in 0..params.max_iters {
        iterations += 1;
        for i in 0..n {
            ubar[i] = u[i] + theta * (u[i] - u_prev[i]);
        }
        // dual ascent on the extrapolated primal point
        let bound = params.lambda;
        for (k, &(stride, extent, weight)) in axes.axes.iter().enumerate() {
            if weight == 0.0 {
                continue;
            }
            let p = &mut duals[k];
            let step = sigma * weight;
            for r in forward_ranges(n, stride, extent) {
                for i in r {
                    p[i] = (p[i] + step * (ubar[i + stride] - ubar[i])).clamp(-bound, bound);
                }
            }
        }
        // primal descent: dual entries without a forward neighbour stay zero,
        // so the divergence is p[i] - p[i - stride] wherever i has a predecessor
        std::mem::swap(&mut u, &mut u_prev);
        u.copy_from_slice(&u_prev);
        for (k, &(stride, extent, weight)) in axes.axes.iter().enumerate() {
            if weight == 0.0 {
                continue;
            }
            let p = &duals[k];
            let step = tau * weight;
            for r in forward_ranges(n, stride, extent) {
                for i in r {
                    u[i] += step * p[i];
                    u[i + stride] -= step * p[i];
                }
            }
        }
        for i in 0..n {
            u[i] = if valid[i] {
                (u[i] + tau * f64::from(f[i])) / (1.0 + tau)
            } else {
                u[i]
            }
            .clamp(lo, hi);
        }
        if strongly_convex {
            theta = 1.0 / (1.0 + 2.0 * tau).sqrt();
            tau *= theta;
            sigma /= theta;
        }

        let obj = objective(&u, f, valid, shape, params);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&u);
        }
        history.push(best_obj);
        let change = (last_obj - obj).abs();
        last_obj = obj;
        if change <= params.tol * obj.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    Ok(DenoiseResult {
        values: best.iter().map(|&v| v as f32).collect(),
        objective: history,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(d: usize, h: usize, w: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..d * h * w).map(|_| rng.random_range(0.0f32..1.0)).collect();
        Volume::all_valid(d, h, w, values).unwrap()
    }

    #[test]
    fn zero_lambda_is_identity() {
        let vol = random_volume(3, 5, 4, 1);
        let out = tv_denoise(&vol, &DenoiseParams::with_lambda(0.0)).unwrap();
        assert_eq!(out.values, vol.values);
    }

    #[test]
    fn constant_volume_unchanged() {
        let vol = Volume::all_valid(4, 3, 3, vec![0.42; 36]).unwrap();
        let out = tv_denoise(&vol, &DenoiseParams::with_lambda(5.0)).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.42f32));
    }

    #[test]
    fn rejects_non_finite_valid_voxel() {
        let mut vol = random_volume(2, 2, 2, 1);
        vol.values[3] = f32::NAN;
        assert!(tv_denoise(&vol, &DenoiseParams::default()).is_err());
        vol.valid[3] = false;
        assert!(tv_denoise(&vol, &DenoiseParams::default()).is_ok());
    }

    #[test]
    fn rejects_bad_params() {
        let vol = random_volume(2, 2, 2, 1);
        let mut p = DenoiseParams::default();
        p.max_iters = 0;
        assert!(tv_denoise(&vol, &p).is_err());
        p = DenoiseParams::with_lambda(-1.0);
        assert!(tv_denoise(&vol, &p).is_err());
    }

    #[test]
    fn objective_history_is_monotone_and_decreases() {
        let vol = random_volume(5, 8, 8, 2);
        let params = DenoiseParams {
            lambda: 0.2,
            max_iters: 300,
            tol: 1e-12,
            ..DenoiseParams::default()
        };
        let out = tv_denoise(&vol, &params).unwrap();
        let start = objective(
            &vol.values.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &vol.values,
            &vol.valid,
            (5, 8, 8),
            &params,
        );
        assert!(out.objective[0] <= start);
        for w in out.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
        assert!(*out.objective.last().unwrap() < 0.9 * start);
    }

    #[test]
    fn masked_voxel_is_inpainted() {
        // Interior voxel marked invalid inside a constant field takes the field value.
        let mut vol = Volume::all_valid(3, 3, 3, vec![0.7; 27]).unwrap();
        vol.values[13] = 100.0;
        vol.valid[13] = false;
        let params = DenoiseParams {
            lambda: 0.1,
            max_iters: 500,
            tol: 1e-14,
            ..DenoiseParams::default()
        };
        let out = tv_denoise(&vol, &params).unwrap();
        assert!((out.values[13] - 0.7).abs() < 1e-4, "{}", out.values[13]);
    }

    #[test]
    fn temporal_only_smoothing_leaves_spatial_pattern() {
        // Two frames, identical spatial checkerboard: zero temporal variation,
        // spatial weight off -> already optimal.
        let frame: Vec<f32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f32).collect();
        let values = [frame.clone(), frame.clone()].concat();
        let vol = Volume::all_valid(2, 4, 4, values.clone()).unwrap();
        let params = DenoiseParams {
            lambda: 1.0,
            spatial_weight: 0.0,
            temporal_weight: 1.0,
            max_iters: 50,
            tol: 1e-12,
        };
        let out = tv_denoise(&vol, &params).unwrap();
        for (a, b) in out.values.iter().zip(&values) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
