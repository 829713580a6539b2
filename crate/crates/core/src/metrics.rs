//! Overlap, surface distance and folding metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::jacobian::jacobian_det;
use crate::volume::{coords_of, linear_index, Dims, DisplacementField, LabelMap, Mask};

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shapes(a.dims, b.dims));
    }
    Ok(())
}

/// Dice coefficient `2|a∩b| / (|a|+|b|)`, 1.0 when both masks are empty.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mask voxels with at least one of the six face neighbours outside the mask
/// or outside the grid.
pub fn surface(mask: &Mask) -> Mask {
    let d = mask.dims;
    let mut out = vec![false; mask.data.len()];
    for (idx, o) in out.iter_mut().enumerate() {
        if !mask.data[idx] {
            continue;
        }
        let c = coords_of(d, idx);
        *o = (0..3).any(|ax| {
            [-1i64, 1].iter().any(|&s| {
                let mut n = c;
                let v = c[ax] as i64 + s;
                if v < 0 || v >= d[ax] as i64 {
                    return true;
                }
                n[ax] = v as usize;
                !mask.data[linear_index(d, n[0], n[1], n[2])]
            })
        });
    }
    Mask { dims: d, data: out }
}

/// Exact squared Euclidean distance to the nearest `true` voxel, with
/// per-axis spacing. Separable lower-envelope transform.
pub fn squared_distance_transform(sites: &Mask, spacing: [f64; 3]) -> Vec<f64> {
    let d = sites.dims;
    let mut f: Vec<f64> = sites.data.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [d[1] * d[2], d[2], 1];
    for ax in 0..3 {
        let len = d[ax];
        let w2 = spacing[ax] * spacing[ax];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let mut env = Envelope::with_capacity(len);
        for start in line_starts(d, ax) {
            for (p, v) in line.iter_mut().enumerate() {
                *v = f[start + p * strides[ax]];
            }
            env.transform(&line, w2, &mut out);
            for (p, v) in out.iter().enumerate() {
                f[start + p * strides[ax]] = *v;
            }
        }
    }
    f
}

fn line_starts(d: Dims, ax: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let ranges = [d[0], d[1], d[2]];
    for i in 0..if ax == 0 { 1 } else { ranges[0] } {
        for j in 0..if ax == 1 { 1 } else { ranges[1] } {
            for k in 0..if ax == 2 { 1 } else { ranges[2] } {
                out.push(linear_index(d, i, j, k));
            }
        }
    }
    out
}

/// Lower envelope of parabolas `w2·(x-q)² + f(q)` over the finite sites.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self {
            v: Vec::with_capacity(n),
            z: Vec::with_capacity(n + 1),
        }
    }

    fn transform(&mut self, f: &[f64], w2: f64, out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        let inter = |f: &[f64], q: usize, p: usize| {
            let (q, p) = (q as f64, p as f64);
            ((f[q as usize] / w2 + q * q) - (f[p as usize] / w2 + p * p)) / (2.0 * (q - p))
        };
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                match self.v.last() {
                    Some(&p) => {
                        let s = inter(f, q, p);
                        if s <= *self.z.last().expect("z tracks v") {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut j = 0;
        for (x, o) in out.iter_mut().enumerate() {
            let xf = x as f64;
            while j + 1 < self.v.len() && self.z[j + 1] < xf {
                j += 1;
            }
            let q = self.v[j];
            let dx = xf - q as f64;
            *o = w2 * dx * dx + f[q];
        }
    }
}

/// Mean over surface voxels of `from` of the distance to the nearest surface
/// voxel of `to`.
fn directed_mean(from: &Mask, to_dist2: &[f64]) -> f64 {
    let (sum, n) = from
        .data
        .iter()
        .zip(to_dist2)
        .filter(|(s, _)| **s)
        .fold((0.0, 0usize), |(acc, n), (_, d2)| (acc + d2.sqrt(), n + 1));
    sum / n as f64
}

/// Average symmetric surface distance, in voxels unless `spacing` is given.
pub fn assd(a: &Mask, b: &Mask, spacing: Option<[f64; 3]>) -> Result<f64> {
    check_dims(a, b)?;
    if a.count() == 0 || b.count() == 0 {
        return Err(Error::UndefinedMetric("ASSD needs two nonempty masks"));
    }
    let sp = spacing.unwrap_or([1.0; 3]);
    if sp.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::Domain(format!("spacing must be positive, got {sp:?}")));
    }
    let (sa, sb) = (surface(a), surface(b));
    let da = squared_distance_transform(&sa, sp);
    let db = squared_distance_transform(&sb, sp);
    Ok(0.5 * (directed_mean(&sa, &db) + directed_mean(&sb, &da)))
}

/// Fraction of voxels whose Jacobian determinant is non-positive.
pub fn neg_jacobian_fraction(field: &DisplacementField) -> Result<f64> {
    let det = jacobian_det(field)?;
    let bad = det.data().iter().filter(|&&v| v <= 0.0).count();
    Ok(bad as f64 / det.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMetrics {
    pub label: u32,
    pub dsc: f64,
    /// `None` when the label is missing from either map.
    pub assd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub labels: Vec<LabelMetrics>,
    pub mean_dsc: f64,
    /// Mean over labels where ASSD is defined.
    pub mean_assd: Option<f64>,
    pub neg_jacobian_fraction: f64,
}

/// Per-label DSC and ASSD between the fixed labels and the warped moving
/// labels over the union of their nonzero labels, plus the folding fraction
/// of `field`.
pub fn evaluate_pair(
    fixed: &LabelMap,
    warped_moving: &LabelMap,
    field: &DisplacementField,
    spacing: Option<[f64; 3]>,
) -> Result<MetricsReport> {
    if fixed.dims() != warped_moving.dims() {
        return Err(Error::shapes(fixed.dims(), warped_moving.dims()));
    }
    if field.dims() != fixed.dims() {
        return Err(Error::shapes(field.dims(), fixed.dims()));
    }
    let mut ids = fixed.labels();
    ids.extend(warped_moving.labels());
    ids.sort_unstable();
    ids.dedup();
    let labels = ids
        .iter()
        .map(|&label| {
            let (a, b) = (fixed.mask(label), warped_moving.mask(label));
            let assd = match assd(&a, &b, spacing) {
                Ok(v) => Some(v),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(LabelMetrics {
                label,
                dsc: dsc(&a, &b)?,
                assd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_dsc = if labels.is_empty() {
        1.0
    } else {
        labels.iter().map(|l| l.dsc).sum::<f64>() / labels.len() as f64
    };
    let defined: Vec<f64> = labels.iter().filter_map(|l| l.assd).collect();
    let mean_assd = if labels.is_empty() {
        Some(0.0)
    } else if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(MetricsReport {
        labels,
        mean_dsc,
        mean_assd,
        neg_jacobian_fraction: neg_jacobian_fraction(field)?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

impl MetricsReport {
    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6} | {:>9} | {:>9}", "label", "DSC", "ASSD");
        let _ = writeln!(s, "{:-<6}-+-{:-<9}-+-{:-<9}", "", "", "");
        for l in &self.labels {
            let _ = writeln!(s, "{:>6} | {:>9.6} | {:>9}", l.label, l.dsc, opt(l.assd));
        }
        let _ = writeln!(s, "{:>6} | {:>9.6} | {:>9}", "mean", self.mean_dsc, opt(self.mean_assd));
        let _ = writeln!(s, "neg_jacobian_fraction {:.6}", self.neg_jacobian_fraction);
        s
    }

    /// One `label,dsc,assd` row per label and a footer with the means and
    /// the folding fraction.
    pub fn to_records(&self) -> String {
        let mut s = String::from("label,dsc,assd\n");
        for l in &self.labels {
            let _ = writeln!(s, "{},{:.6},{}", l.label, l.dsc, opt(l.assd));
        }
        let _ = writeln!(s, "# mean_dsc,{:.6}", self.mean_dsc);
        let _ = writeln!(s, "# mean_assd,{}", opt(self.mean_assd));
        let _ = writeln!(s, "# neg_jacobian_fraction,{:.6}", self.neg_jacobian_fraction);
        s
    }
}
