//! Depth and pointmap evaluation metrics.
//!
//! All means accumulate in double precision over valid pixels only. The
//! pointmap nearest-neighbor metrics come in two routes: exact brute force
//! and a uniform-grid accelerator that must return bit-identical results.

use crate::dense::{DenseMap, MapKind, ValidityMask};
use crate::error::{Error, Result};
use crate::par;

/// Flat report; depth fields are set by [`depth_metrics`], pointmap fields
/// by [`pointmap_metrics`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub abs_rel: Option<f64>,
    pub rmse: Option<f64>,
    pub delta_half: Option<f64>,
    pub accuracy: Option<f64>,
    pub completeness: Option<f64>,
    pub overall: Option<f64>,
    pub valid_count: usize,
}

impl MetricReport {
    /// Flat `metric=value` text form, one metric per line, in fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |name: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push_str(&format!("{name}={v}\n"));
            }
        };
        push("abs_rel", self.abs_rel);
        push("rmse", self.rmse);
        push("delta_half", self.delta_half);
        push("accuracy", self.accuracy);
        push("completeness", self.completeness);
        push("overall", self.overall);
        out.push_str(&format!("valid_count={}\n", self.valid_count));
        out
    }
}

/// δ₀.₅ ratio criterion: max(pred/gt, gt/pred) < 1.25^0.5.
const DELTA_HALF_THRESHOLD: f64 = 1.118033988749895;

/// AbsRel, RMSE and δ₀.₅ over the valid pixels of a depth pair.
pub fn depth_metrics(
    pred: &DenseMap,
    gt: &DenseMap,
    mask: &ValidityMask,
) -> Result<MetricReport> {
    if pred.kind() != MapKind::Depth || gt.kind() != MapKind::Depth {
        return Err(Error::invalid_argument(
            "depth_metrics expects depth maps".to_string(),
        ));
    }
    if !pred.same_shape(gt) || pred.height() != mask.height() || pred.width() != mask.width() {
        return Err(Error::invalid_argument(
            "depth_metrics dimension mismatch".to_string(),
        ));
    }
    let mut n = 0usize;
    let mut abs_rel = 0.0f64;
    let mut sq = 0.0f64;
    let mut within = 0usize;
    for row in 0..pred.height() {
        for col in 0..pred.width() {
            if !mask.get(row, col) {
                continue;
            }
            let p = pred.get(row, col, 0);
            let g = gt.get(row, col, 0);
            if g <= 0.0 {
                return Err(Error::invalid_input(format!(
                    "non-positive ground-truth depth {g} at valid pixel ({row}, {col})"
                )));
            }
            n += 1;
            let d = p - g;
            abs_rel += d.abs() / g;
            sq += d * d;
            if (p / g).max(g / p) < DELTA_HALF_THRESHOLD {
                within += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyEvaluation(
            "no valid pixels to evaluate".to_string(),
        ));
    }
    Ok(MetricReport {
        abs_rel: Some(abs_rel / n as f64),
        rmse: Some((sq / n as f64).sqrt()),
        delta_half: Some(within as f64 / n as f64),
        valid_count: n,
        ..Default::default()
    })
}

/// Same metrics restricted to an explicit pixel list (e.g. the selected set).
pub fn depth_metrics_at(
    pred: &DenseMap,
    gt: &DenseMap,
    mask: &ValidityMask,
    pixels: &[(u32, u32)],
) -> Result<MetricReport> {
    let mut sub = ValidityMask::new(
        mask.height(),
        mask.width(),
        vec![false; mask.height() * mask.width()],
    )?;
    for &(r, c) in pixels {
        let (r, c) = (r as usize, c as usize);
        if mask.get(r, c) {
            sub.set(r, c, true);
        }
    }
    depth_metrics(pred, gt, &sub)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Exact nearest-neighbor distance from each query to the target set.
fn nn_brute(queries: &[[f64; 3]], targets: &[[f64; 3]]) -> Vec<f64> {
    par::map_indexed(queries.len(), |i| {
        let q = &queries[i];
        let mut best = f64::INFINITY;
        for t in targets {
            let d = dist2(q, t);
            if d < best {
                best = d;
            }
        }
        best.sqrt()
    })
}

/// Uniform grid over the target set's bounding box.
struct PointGrid<'a> {
    targets: &'a [[f64; 3]],
    min: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    // CSR: cell -> target indices
    starts: Vec<u32>,
    entries: Vec<u32>,
}

impl<'a> PointGrid<'a> {
    fn build(targets: &'a [[f64; 3]]) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for t in targets {
            for a in 0..3 {
                min[a] = min[a].min(t[a]);
                max[a] = max[a].max(t[a]);
            }
        }
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0f64, f64::max);
        let per_axis = (targets.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims = [0, 1, 2].map(|a| {
            let span = max[a] - min[a];
            ((span / cell).floor() as usize + 1).max(1)
        });
        let n_cells = dims[0] * dims[1] * dims[2];
        let cell_of = |p: &[f64; 3]| -> usize {
            let ix = [0, 1, 2].map(|a| {
                (((p[a] - min[a]) / cell).floor() as usize).min(dims[a] - 1)
            });
            (ix[0] * dims[1] + ix[1]) * dims[2] + ix[2]
        };
        let mut counts = vec![0u32; n_cells + 1];
        for t in targets {
            counts[cell_of(t) + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut entries = vec![0u32; targets.len()];
        let mut fill = counts.clone();
        for (i, t) in targets.iter().enumerate() {
            let c = cell_of(t);
            entries[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        PointGrid {
            targets,
            min,
            cell,
            dims,
            starts: counts,
            entries,
        }
    }

    /// Nearest-neighbor distance via expanding rings; returns the exact
    /// minimum squared distance (identical to brute force).
    fn nn_dist(&self, q: &[f64; 3]) -> f64 {
        let home = [0, 1, 2].map(|a| {
            (((q[a] - self.min[a]) / self.cell).floor() as isize)
                .clamp(0, self.dims[a] as isize - 1) as usize
        });
        let mut best = f64::INFINITY;
        let max_ring = self.dims.iter().max().copied().unwrap_or(1);
        for ring in 0..=max_ring {
            // Once best is closer than the nearest possible point in this
            // ring, no further ring can improve it.
            if ring > 0 {
                let ring_gap = (ring - 1) as f64 * self.cell;
                if best <= ring_gap * ring_gap {
                    break;
                }
            }
            let r = ring as isize;
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let cx = home[0] as isize + dx;
                        let cy = home[1] as isize + dy;
                        let cz = home[2] as isize + dz;
                        if cx < 0
                            || cy < 0
                            || cz < 0
                            || cx >= self.dims[0] as isize
                            || cy >= self.dims[1] as isize
                            || cz >= self.dims[2] as isize
                        {
                            continue;
                        }
                        let cell = (cx as usize * self.dims[1] + cy as usize) * self.dims[2]
                            + cz as usize;
                        let lo = self.starts[cell] as usize;
                        let hi = self.starts[cell + 1] as usize;
                        for &ti in &self.entries[lo..hi] {
                            let d = dist2(q, &self.targets[ti as usize]);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn nn_grid(queries: &[[f64; 3]], targets: &[[f64; 3]]) -> Vec<f64> {
    let grid = PointGrid::build(targets);
    par::map_indexed(queries.len(), |i| grid.nn_dist(&queries[i]).sqrt())
}

fn mean(values: &[f64]) -> f64 {
    let mut s = 0.0f64;
    for v in values {
        s += v;
    }
    s / values.len() as f64
}

/// Pointmap accuracy / completeness / overall.
///
/// accuracy = mean over predicted points of the distance to the nearest
/// ground-truth point; completeness is the reverse direction; overall is
/// their mean.
pub fn pointmap_metrics(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<MetricReport> {
    pointmap_metrics_impl(pred, gt, false)
}

/// Grid-accelerated variant; bit-identical to [`pointmap_metrics`].
pub fn pointmap_metrics_grid(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<MetricReport> {
    pointmap_metrics_impl(pred, gt, true)
}

fn pointmap_metrics_impl(
    pred: &[[f64; 3]],
    gt: &[[f64; 3]],
    accelerate: bool,
) -> Result<MetricReport> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyEvaluation(
            "pointmap metrics need non-empty point sets".to_string(),
        ));
    }
    let (acc_d, comp_d) = if accelerate {
        (nn_grid(pred, gt), nn_grid(gt, pred))
    } else {
        (nn_brute(pred, gt), nn_brute(gt, pred))
    };
    let accuracy = mean(&acc_d);
    let completeness = mean(&comp_d);
    Ok(MetricReport {
        accuracy: Some(accuracy),
        completeness: Some(completeness),
        overall: Some((accuracy + completeness) / 2.0),
        valid_count: pred.len() + gt.len(),
        ..Default::default()
    })
}

/// Collect the valid pixels of a pointmap into a point set.
pub fn pointmap_to_points(map: &DenseMap, mask: &ValidityMask) -> Result<Vec<[f64; 3]>> {
    if map.kind() != MapKind::Pointmap {
        return Err(Error::invalid_argument(
            "expected a pointmap".to_string(),
        ));
    }
    if map.height() != mask.height() || map.width() != mask.width() {
        return Err(Error::invalid_argument(
            "mask dimensions do not match map".to_string(),
        ));
    }
    let mut pts = Vec::new();
    for row in 0..map.height() {
        for col in 0..map.width() {
            if mask.get(row, col) {
                let p = map.pixel(row, col);
                pts.push([p[0], p[1], p[2]]);
            }
        }
    }
    Ok(pts)
}
