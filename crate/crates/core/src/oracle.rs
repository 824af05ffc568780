//! Slow, independent reference implementations used to cross-check the fast
//! paths: a dense loss, finite-difference gradients, brute-force average
//! linkage and a direct silhouette.
//!
//! Nothing here shares code with the routines it checks beyond the plain
//! data types.

use std::borrow::Borrow;

use crate::error::{Error, Result};
use crate::lora::{local_gradients, FrozenBackbone, LayerExperts, Sample};
use crate::similarity::DistanceMatrix;
use crate::topology::Partition;

/// Step of the five-point central stencil. Its error is fourth order in the
/// step, so a fairly large step keeps rounding in the loss negligible.
pub const FD_STEP: f64 = 1e-3;
/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const FD_FLOOR: f64 = 1e-4;

/// `f'(0)` by the five-point central stencil
/// `(−f(2h) + 8f(h) − 8f(−h) + f(−2h)) / 12h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn dense_weight(w0: &crate::linalg::Matrix, e: &LayerExperts) -> Vec<Vec<f64>> {
    let (rows, cols) = w0.shape();
    let rank = e.cluster().rank();
    let (bc, ac) = (e.cluster().b(), e.cluster().a());
    let (be, ae) = (e.external().b(), e.external().a());
    let lambda = e.lambda();
    let mut w = vec![vec![0.0; cols]; rows];
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let mut c = 0.0;
            let mut x = 0.0;
            for k in 0..rank {
                c += bc[(i, k)] * ac[(k, j)];
                x += be[(i, k)] * ae[(k, j)];
            }
            *v = w0[(i, j)] + lambda * c + (1.0 - lambda) * x;
        }
    }
    w
}

/// Mean squared error of the network with every layer's effective weight
/// materialised densely.
pub fn dense_loss<S: Borrow<Sample>>(backbone: &FrozenBackbone, experts: &[LayerExperts], batch: &[S]) -> f64 {
    let weights: Vec<_> = backbone
        .layers()
        .iter()
        .zip(experts)
        .map(|(w0, e)| dense_weight(w0, e))
        .collect();
    let act = backbone.activation();
    let mut total = 0.0;
    for s in batch {
        let s = s.borrow();
        let mut h = s.x.clone();
        for (l, w) in weights.iter().enumerate() {
            let z: Vec<f64> = w
                .iter()
                .map(|row| row.iter().zip(&h).map(|(a, b)| a * b).sum())
                .collect();
            h = if l + 1 < weights.len() {
                z.into_iter().map(|v| act.apply(v)).collect()
            } else {
                z
            };
        }
        total += h.iter().zip(&s.y).map(|(p, y)| (p - y).powi(2)).sum::<f64>();
    }
    total / batch.len() as f64
}

fn factor_entry(e: &mut LayerExperts, which: usize, idx: usize) -> &mut f64 {
    let (a, b) = e.cluster_mut().factors_mut();
    if which == 0 {
        &mut a.as_mut_slice()[idx]
    } else {
        &mut b.as_mut_slice()[idx]
    }
}

/// Worst disagreement between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub compared: usize,
}

/// Central differences of [`dense_loss`] over every entry of each cluster
/// `A`, `B` and every unfrozen `λ`, compared with [`local_gradients`].
pub fn check_gradients<S: Borrow<Sample>>(
    backbone: &FrozenBackbone,
    experts: &[LayerExperts],
    batch: &[S],
) -> Result<GradientCheck> {
    let (_, analytic) = local_gradients(backbone, experts, batch)?;
    let mut worst = 0.0f64;
    let mut compared = 0;
    let mut probe = experts.to_vec();
    let mut record = |analytic: f64, numeric: f64| {
        let err = relative_error(analytic, numeric, FD_FLOOR);
        if err.is_nan() {
            worst = f64::NAN;
        } else if !worst.is_nan() {
            worst = worst.max(err);
        }
        compared += 1;
    };

    for l in 0..experts.len() {
        for which in 0..2 {
            let len = {
                let (a, b) = probe[l].cluster_mut().factors_mut();
                if which == 0 {
                    a.as_slice().len()
                } else {
                    b.as_slice().len()
                }
            };
            for idx in 0..len {
                let orig = *factor_entry(&mut probe[l], which, idx);
                let numeric = central_difference(
                    |d| {
                        *factor_entry(&mut probe[l], which, idx) = orig + d;
                        dense_loss(backbone, &probe, batch)
                    },
                    FD_STEP,
                );
                *factor_entry(&mut probe[l], which, idx) = orig;
                let g = if which == 0 { &analytic[l].a } else { &analytic[l].b };
                record(g.as_slice()[idx], numeric);
            }
        }
        if !experts[l].lambda_frozen() {
            let orig = probe[l].lambda;
            let numeric = central_difference(
                |d| {
                    probe[l].lambda = orig + d;
                    dense_loss(backbone, &probe, batch)
                },
                FD_STEP,
            );
            probe[l].lambda = orig;
            record(analytic[l].lambda, numeric);
        }
    }
    Ok(GradientCheck {
        max_relative_error: worst,
        compared,
    })
}

/// One brute-force merge, identified by the sorted member sets it joined.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMerge {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub height: f64,
}

/// Average linkage recomputed from scratch at every step. Ties go to the
/// lexicographically smallest (min member, min member) pair.
pub fn brute_force_merges(d: &DistanceMatrix) -> Vec<ReferenceMerge> {
    let mut clusters: Vec<Vec<usize>> = (0..d.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        clusters.sort_by_key(|c| c[0]);
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let mut sum = 0.0;
                for &i in &clusters[x] {
                    for &j in &clusters[y] {
                        sum += d.get(i, j);
                    }
                }
                let link = sum / (clusters[x].len() * clusters[y].len()) as f64;
                let key = (clusters[x][0], clusters[y][0]);
                let better = match best {
                    None => true,
                    Some((h, k, _, _)) => link < h || (link == h && key < k),
                };
                if better {
                    best = Some((link, key, x, y));
                }
            }
        }
        let (height, _, x, y) = best.expect("two or more clusters");
        let right = clusters.remove(y);
        let left = std::mem::take(&mut clusters[x]);
        let mut joined = left.clone();
        joined.extend_from_slice(&right);
        joined.sort_unstable();
        clusters[x] = joined;
        out.push(ReferenceMerge { left, right, height });
    }
    out
}

/// Rousseeuw silhouette straight from the definition, singletons scoring 0.
pub fn direct_silhouette(d: &DistanceMatrix, p: &Partition) -> Result<f64> {
    let n = d.len();
    if p.len() != n {
        return Err(Error::dim("partition size vs distance matrix", n, p.len()));
    }
    let labels = p.assignment();
    let mut total = 0.0;
    for i in 0..n {
        let own_size = labels.iter().filter(|&&c| c == labels[i]).count();
        if own_size == 1 {
            continue;
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                a += d.get(i, j);
            }
        }
        a /= (own_size - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..p.count() {
            if c == labels[i] {
                continue;
            }
            let (mut sum, mut count) = (0.0, 0usize);
            for j in 0..n {
                if labels[j] == c {
                    sum += d.get(i, j);
                    count += 1;
                }
            }
            b = b.min(sum / count as f64);
        }
        let s = if a.max(b) == 0.0 { 0.0 } else { (b - a) / a.max(b) };
        total += s;
    }
    Ok(total / n as f64)
}

/// Every partition obtained by cutting a merge sequence, coarsest first.
pub fn reference_cuts(n: usize, merges: &[ReferenceMerge]) -> Vec<Partition> {
    let mut out = Vec::with_capacity(n);
    for c in 1..=n {
        let mut labels: Vec<usize> = (0..n).collect();
        for m in &merges[..n - c] {
            let target = labels[m.left[0]];
            for &leaf in m.left.iter().chain(&m.right) {
                let old = labels[leaf];
                for l in labels.iter_mut() {
                    if *l == old {
                        *l = target;
                    }
                }
            }
        }
        out.push(Partition::from_labels(&labels));
    }
    out
}
