//! Pairwise registration and manifest-wide evaluation.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::interp::{warp, warp_labels, Interpolation};
use crate::io::dataset::PairEntry;
use crate::io::preprocess::{preprocess, preprocess_labels, PreprocessSpec};
use crate::io::volume_file::{load_labels, load_volume};
use crate::metrics::{evaluate_pair, MetricsReport};
use crate::model::PanModel;
use crate::volume::{Dims, DisplacementField, LabelMap, Volume};

/// Every axis rounded up to the next multiple of 16.
pub fn network_grid(dims: Dims) -> Dims {
    dims.map(|d| d.div_ceil(16).max(1) * 16)
}

#[derive(Debug, Clone)]
pub struct Registration {
    /// Preprocessed moving image resampled through `field`.
    pub warped: Volume,
    pub field: DisplacementField,
    /// Nearest-neighbour warp of the moving labels, when given.
    pub warped_labels: Option<LabelMap>,
    pub fixed: Volume,
    pub moving: Volume,
    /// Wall-clock seconds of the network forward pass and warp.
    pub seconds: f64,
}

/// Registers `moving` to `fixed` on the network grid.
///
/// Both volumes are center-padded (or cropped) to [`network_grid`] of their
/// common dims and min-max normalized; outputs live on that grid.
pub fn register_pair(model: &PanModel, moving: &Volume, fixed: &Volume, moving_labels: Option<&LabelMap>) -> Result<Registration> {
    if moving.dims() != fixed.dims() {
        return Err(Error::shapes(moving.dims(), fixed.dims()));
    }
    if let Some(l) = moving_labels {
        if l.dims() != moving.dims() {
            return Err(Error::shapes(l.dims(), moving.dims()));
        }
    }
    let spec = PreprocessSpec::new(network_grid(fixed.dims()))?;
    let m = preprocess(moving, &spec)?;
    let f = preprocess(fixed, &spec)?;
    let labels = moving_labels.map(|l| preprocess_labels(l, &spec)).transpose()?;

    let start = Instant::now();
    let field = model.register(&m, &f)?;
    let warped = warp(&m, &field, Interpolation::Trilinear)?;
    let seconds = start.elapsed().as_secs_f64();
    let warped_labels = labels.map(|l| warp_labels(&l, &field)).transpose()?;
    Ok(Registration {
        warped,
        field,
        warped_labels,
        fixed: f,
        moving: m,
        seconds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairEvaluation {
    pub index: usize,
    /// Before registration (zero field).
    pub initial: MetricsReport,
    pub registered: MetricsReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub pairs: Vec<PairEvaluation>,
    /// `(pair index, error message)` for pairs that could not be evaluated.
    pub failures: Vec<(usize, String)>,
}

/// Registers one manifest entry and scores it against the fixed labels.
/// ASSD is in voxels unless `physical` asks for the fixed image spacing.
pub fn evaluate_entry(model: &PanModel, index: usize, entry: &PairEntry, physical: bool) -> Result<PairEvaluation> {
    let moving = load_volume(&entry.moving)?;
    let fixed = load_volume(&entry.fixed)?;
    let moving_labels = load_labels(&entry.moving_labels)?;
    let fixed_labels = load_labels(&entry.fixed_labels)?;
    if fixed_labels.dims() != fixed.dims() {
        return Err(Error::shapes(fixed_labels.dims(), fixed.dims()));
    }
    let reg = register_pair(model, &moving, &fixed, Some(&moving_labels))?;
    let spec = PreprocessSpec::new(reg.field.dims())?;
    let fixed_labels = preprocess_labels(&fixed_labels, &spec)?;
    let moving_labels = preprocess_labels(&moving_labels, &spec)?;
    let spacing = physical.then(|| fixed.spacing());
    let zero = DisplacementField::zeros(reg.field.dims())?;
    let initial = evaluate_pair(&fixed_labels, &moving_labels, &zero, spacing)?;
    let warped = reg.warped_labels.as_ref().expect("labels were supplied");
    let registered = evaluate_pair(&fixed_labels, warped, &reg.field, spacing)?;
    Ok(PairEvaluation {
        index,
        initial,
        registered,
        seconds: reg.seconds,
    })
}

/// Evaluates every entry; a failing pair is recorded and the rest continue.
pub fn evaluate_entries(model: &PanModel, entries: &[PairEntry], physical: bool) -> Evaluation {
    let mut out = Evaluation::default();
    for (i, e) in entries.iter().enumerate() {
        match evaluate_entry(model, i, e, physical) {
            Ok(p) => out.pairs.push(p),
            Err(err) => out.failures.push((i, err.to_string())),
        }
    }
    out
}

/// Mean and population standard deviation; `None` when empty.
fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn cell(values: &[f64], decimals: usize) -> String {
    match mean_std(values) {
        Some((m, s)) => format!("{m:.decimals$}±{s:.decimals$}"),
        None => "nan".into(),
    }
}

fn value(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.decimals$}"))
}

const HEADER: [&str; 4] = ["", "DSC (%)", "ASSD", "%|J(φ)|<0"];

impl Evaluation {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn mean_dsc(&self, registered: bool) -> Option<f64> {
        let v: Vec<f64> = self
            .pairs
            .iter()
            .map(|p| if registered { p.registered.mean_dsc } else { p.initial.mean_dsc })
            .collect();
        mean_std(&v).map(|(m, _)| m)
    }

    pub fn mean_neg_jacobian_fraction(&self) -> Option<f64> {
        let v: Vec<f64> = self.pairs.iter().map(|p| p.registered.neg_jacobian_fraction).collect();
        mean_std(&v).map(|(m, _)| m)
    }

    /// Per-pair rows followed by `Initial` and `Registered` summary rows
    /// (mean±std over pairs) and any failures. Timing is left out so the
    /// report is reproducible byte for byte.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, cols: [&str; 4]| {
            let _ = writeln!(s, "{:<14} | {:>13} | {:>13} | {:>13}", cols[0], cols[1], cols[2], cols[3]);
        };
        row(&mut s, HEADER);
        let _ = writeln!(s, "{:-<14}-+-{:-<13}-+-{:-<13}-+-{:-<13}", "", "", "", "");
        for p in &self.pairs {
            for (name, r, jac) in [("initial", &p.initial, false), ("registered", &p.registered, true)] {
                let label = format!("pair {} {name}", p.index);
                let dsc = format!("{:.2}", 100.0 * r.mean_dsc);
                let assd = value(r.mean_assd, 3);
                let j = if jac { format!("{:.4}", 100.0 * r.neg_jacobian_fraction) } else { "-".into() };
                row(&mut s, [&label, &dsc, &assd, &j]);
            }
        }
        let _ = writeln!(s, "{:-<14}-+-{:-<13}-+-{:-<13}-+-{:-<13}", "", "", "", "");
        let pct = |f: &dyn Fn(&PairEvaluation) -> f64| self.pairs.iter().map(|p| 100.0 * f(p)).collect::<Vec<_>>();
        let assd = |f: &dyn Fn(&PairEvaluation) -> Option<f64>| self.pairs.iter().filter_map(f).collect::<Vec<_>>();
        row(
            &mut s,
            [
                "Initial",
                &cell(&pct(&|p| p.initial.mean_dsc), 2),
                &cell(&assd(&|p| p.initial.mean_assd), 3),
                "-",
            ],
        );
        row(
            &mut s,
            [
                "Registered",
                &cell(&pct(&|p| p.registered.mean_dsc), 2),
                &cell(&assd(&|p| p.registered.mean_assd), 3),
                &cell(&pct(&|p| p.registered.neg_jacobian_fraction), 4),
            ],
        );
        for (i, msg) in &self.failures {
            let _ = writeln!(s, "pair {i} FAILED: {msg}");
        }
        s
    }
}
