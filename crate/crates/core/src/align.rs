//! Alignment heads: scene classification against the scene class embeddings
//! and spatially weighted distortion classification against the distortion
//! class embeddings.
//!
//! Scene: `softmax(Z_img @ V_scene^T / temp_global)` with cross entropy.
//!
//! Distortion: projected patch tokens of each crop are max-pooled over a
//! `w x w` grid of windows and unit-normalized. For every distortion class
//! the window similarities are combined with spatial attention weights
//! `softmax(sim / temp_spatial)`; the weighted similarity per class feeds a
//! `1 / temp_global` softmax with cross entropy.

use crate::graph::{Graph, NodeId};
use crate::mat::Scalar;

/// `Z_img @ V^T / temp` logits. `z` is `[N, d]`, `classes` is `[K, d]`.
pub fn build_class_logits<T: Scalar>(
    g: &mut Graph<T>,
    z: NodeId,
    classes: NodeId,
    temp: f64,
) -> NodeId {
    let sims = g.matmul_t(z, classes, false, true);
    g.scale(sims, T::from_f64(1.0 / temp))
}

/// Scene class probabilities, `[N, num_scenes]`, rows sum to one.
pub fn build_scene_probs<T: Scalar>(
    g: &mut Graph<T>,
    z_img: NodeId,
    v_scene: NodeId,
    temp_global: f64,
) -> NodeId {
    let logits = build_class_logits(g, z_img, v_scene, temp_global);
    g.softmax_rows(logits)
}

/// Mean cross entropy of `probs` rows against integer labels.
pub fn build_cross_entropy<T: Scalar>(g: &mut Graph<T>, probs: NodeId, labels: &[usize]) -> NodeId {
    let nll = g.nll_rows(probs, labels);
    g.mean_rows(nll)
}

/// Per-crop pooled window features: `window_max_pool` over the patch grid
/// followed by row normalization. `patch_embeds` is `[crops * grid^2, d]`;
/// each returned node is `[window_count^2, d]` with unit rows.
pub fn build_pooled_windows<T: Scalar>(
    g: &mut Graph<T>,
    patch_embeds: NodeId,
    crops: usize,
    grid: usize,
    window_count: usize,
) -> Vec<NodeId> {
    let (rows, _) = g.shape(patch_embeds);
    let p = grid * grid;
    assert_eq!(rows, crops * p, "patch embeds rows disagree with crops * grid^2");
    (0..crops)
        .map(|i| {
            let crop = g.slice_rows(patch_embeds, i * p, p);
            let pooled = g.window_max_pool(crop, grid, window_count);
            g.l2_normalize_rows(pooled)
        })
        .collect()
}

/// Spatially weighted distortion similarities.
pub struct DistortionSim {
    /// `[crops, num_distortions]` similarity scores before the class softmax.
    pub scores: NodeId,
    /// Per-crop spatial attention weights, each `[num_distortions, windows]`
    /// with rows summing to one.
    pub weights: Vec<NodeId>,
}

/// Combine each crop's window features with the distortion class embeddings.
/// `windows[i]` is `[W, d]` unit rows, `v_dist` is `[K, d]` unit rows.
pub fn build_distortion_similarity<T: Scalar>(
    g: &mut Graph<T>,
    windows: &[NodeId],
    v_dist: NodeId,
    temp_spatial: f64,
) -> DistortionSim {
    let k = g.shape(v_dist).0;
    let mut weights = Vec::with_capacity(windows.len());
    let mut per_crop = Vec::with_capacity(windows.len());
    for &win in windows {
        let sims = g.matmul_t(v_dist, win, false, true);
        let scaled = g.scale(sims, T::from_f64(1.0 / temp_spatial));
        let alpha = g.softmax_rows(scaled);
        weights.push(alpha);
        let weighted = g.mul(alpha, sims);
        let score_col = g.sum_cols(weighted);
        per_crop.push(g.reshape(score_col, 1, k));
    }
    let scores = if per_crop.len() == 1 {
        per_crop[0]
    } else {
        g.concat_rows(&per_crop)
    };
    DistortionSim { scores, weights }
}

/// Distortion class probabilities from weighted similarities.
pub fn build_distortion_probs<T: Scalar>(
    g: &mut Graph<T>,
    sim: &DistortionSim,
    temp_global: f64,
) -> NodeId {
    let logits = g.scale(sim.scores, T::from_f64(1.0 / temp_global));
    g.softmax_rows(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;

    fn unit_rows(m: Mat<f64>) -> Mat<f64> {
        let mut out = m;
        for r in 0..out.rows() {
            let n: f64 = out.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            for v in out.row_mut(r) {
                *v /= n;
            }
        }
        out
    }

    #[test]
    fn scene_probs_match_hand_softmax() {
        let mut g = Graph::new();
        // Two unit class vectors along the axes, one query at 45 degrees.
        let z = g.constant(unit_rows(Mat::from_vec(1, 2, vec![3.0, 4.0])));
        let v = g.constant(Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let probs = build_scene_probs(&mut g, z, v, 0.5);
        // logits = [0.6/0.5, 0.8/0.5] = [1.2, 1.6]
        let e = |x: f64| x.exp();
        let denom = e(1.2) + e(1.6);
        assert!((g.value(probs).at(0, 0) - e(1.2) / denom).abs() < 1e-12);
        assert!((g.value(probs).at(0, 1) - e(1.6) / denom).abs() < 1e-12);
        let loss = build_cross_entropy(&mut g, probs, &[1]);
        assert!((g.value(loss).item() - (-(e(1.6) / denom).ln())).abs() < 1e-12);
    }

    #[test]
    fn pooled_windows_are_unit_and_follow_grid_layout() {
        let mut g = Graph::new();
        // One crop, 4x4 patch grid, 2 windows per side, 3 dims. Feature grows
        // with patch index so each window's max is its last patch.
        let patches = Mat::from_fn(16, 3, |r, c| (r * 3 + c) as f64 + 1.0);
        let pid = g.constant(patches);
        let wins = build_pooled_windows(&mut g, pid, 1, 4, 2);
        assert_eq!(wins.len(), 1);
        assert_eq!(g.shape(wins[0]), (4, 3));
        // Window 0 covers patches {0,1,4,5}; max row is patch 5 = [16,17,18].
        let raw = [16.0f64, 17.0, 18.0];
        let n: f64 = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (c, &x) in raw.iter().enumerate() {
            assert!((g.value(wins[0]).at(0, c) - x / n).abs() < 1e-12);
        }
        for r in 0..4 {
            let norm: f64 = g.value(wins[0]).row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_weights_sum_to_one_and_single_window_is_plain_similarity() {
        let mut g = Graph::new();
        let win = g.constant(unit_rows(Mat::from_vec(
            1,
            3,
            vec![0.2, -0.4, 0.9],
        )));
        let v = g.constant(unit_rows(Mat::from_fn(4, 3, |r, c| {
            ((r * 3 + c) as f64 * 0.7).sin()
        })));
        let sim = build_distortion_similarity(&mut g, &[win], v, 0.1);
        assert_eq!(g.shape(sim.scores), (1, 4));
        assert_eq!(sim.weights.len(), 1);
        let w = g.value(sim.weights[0]).clone();
        assert_eq!((w.rows(), w.cols()), (4, 1));
        for r in 0..4 {
            assert!((w.at(r, 0) - 1.0).abs() < 1e-12, "single window weight must be 1");
        }
        // With one window the weighted score is the raw cosine similarity.
        for k in 0..4 {
            let expect: f64 = (0..3).map(|c| g.value(win).at(0, c) * g.value(v).at(k, c)).sum();
            assert!((g.value(sim.scores).at(0, k) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_weights_rows_sum_to_one_multi_window() {
        let mut g = Graph::new();
        let win = g.constant(unit_rows(Mat::from_fn(9, 5, |r, c| {
            ((r * 5 + c) as f64 * 0.31).cos()
        })));
        let v = g.constant(unit_rows(Mat::from_fn(11, 5, |r, c| {
            ((r * 5 + c) as f64 * 0.17).sin() + 0.1
        })));
        let sim = build_distortion_similarity(&mut g, &[win, win], v, 0.1);
        assert_eq!(g.shape(sim.scores), (2, 11));
        for alpha in &sim.weights {
            let a = g.value(*alpha);
            assert_eq!((a.rows(), a.cols()), (11, 9));
            for r in 0..11 {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
            }
        }
        let probs = build_distortion_probs(&mut g, &sim, 0.01);
        for r in 0..2 {
            let s: f64 = g.value(probs).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn distortion_loss_gradient_matches_finite_differences() {
        let base = Mat::from_fn(32, 4, |r, c| ((r * 4 + c) as f64 * 0.23).sin() * 0.8);
        let v = unit_rows(Mat::from_fn(3, 4, |r, c| ((r * 4 + c + 5) as f64 * 0.41).cos()));

        let loss_of = |patches: &Mat<f64>| {
            let mut g = Graph::new();
            let pid = g.leaf(std::sync::Arc::new(patches.clone()), true);
            let vid = g.constant(v.clone());
            let wins = build_pooled_windows(&mut g, pid, 2, 4, 2);
            let sim = build_distortion_similarity(&mut g, &wins, vid, 0.5);
            let probs = build_distortion_probs(&mut g, &sim, 0.7);
            let loss = build_cross_entropy(&mut g, probs, &[1, 2]);
            (g, pid, loss)
        };

        let (g, pid, loss) = loss_of(&base);
        let grads = g.backward(loss);
        let analytic = grads.get(pid).unwrap();
        for &(r, c) in &[(0usize, 0usize), (5, 2), (19, 3), (31, 1)] {
            let eps = 1e-6;
            let eval = |d: f64| {
                let mut p = base.clone();
                let old = p.at(r, c);
                p.set(r, c, old + d);
                let (g, _pid, loss) = loss_of(&p);
                g.value(loss).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.at(r, c);
            assert!(
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4) < 1e-5,
                "({r},{c}): analytic {a} vs numeric {numeric}"
            );
        }
    }
}
