//! Contrastive objective: NT-Xent over cosine similarities, the Pearson
//! correlation penalty between original and generated windows, and their
//! combination with the stop-gradient switch.
//!
//! Both terms are single fused tape operations with hand-written gradients;
//! the plain `f64` evaluators share the same code path.

use ndarray::{Array2, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Which embeddings enter the NT-Xent denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    /// All 2N anchors; each sums over the other 2N-1 embeddings.
    #[default]
    Symmetric,
    /// First-view anchors only; each sums over the other N-1 first-view
    /// embeddings (the positive is not in the denominator).
    FirstViewOnly,
}

/// How the correlation between `x` and `x_gen` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    /// One coefficient per window over its `W*C` values, averaged.
    #[default]
    PerSample,
    /// One coefficient over the whole flattened batch.
    WholeBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub cr_enabled: bool,
    pub cr_weight: f64,
    pub sg_enabled: bool,
    pub denominator_mode: DenominatorMode,
    pub correlation_mode: CorrelationMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            cr_enabled: true,
            cr_weight: 1.0,
            sg_enabled: true,
            denominator_mode: DenominatorMode::Symmetric,
            correlation_mode: CorrelationMode::PerSample,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.cr_weight >= 0.0 && self.cr_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "cr_weight must be non-negative, got {}",
                self.cr_weight
            )));
        }
        Ok(())
    }
}

fn view2(v: &ArrayD<f64>) -> Result<ArrayView2<'_, f64>> {
    v.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::shape(format!("expected [N, D], got {:?}", v.shape())))
}

fn view3(v: &ArrayD<f64>) -> Result<ArrayView3<'_, f64>> {
    v.view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(format!("expected [N, W, C], got {:?}", v.shape())))
}

/// Loss value and gradients with respect to both views.
fn nt_xent_parts(
    y1: ArrayView2<'_, f64>,
    y2: ArrayView2<'_, f64>,
    tau: f64,
    mode: DenominatorMode,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if y1.dim() != y2.dim() {
        return Err(Error::shape(format!(
            "nt_xent views differ: {:?} vs {:?}",
            y1.dim(),
            y2.dim()
        )));
    }
    let (n, d) = y1.dim();
    if n < 2 {
        return Err(Error::invalid("nt_xent needs at least two pairs for negatives"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let mut y = Array2::zeros((2 * n, d));
    y.slice_mut(ndarray::s![..n, ..]).assign(&y1);
    y.slice_mut(ndarray::s![n.., ..]).assign(&y2);
    let norms: Vec<f64> = y.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    for (i, &norm) in norms.iter().enumerate() {
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm { index: i });
        }
    }
    let mut u = y.clone();
    for (mut row, &norm) in u.rows_mut().into_iter().zip(&norms) {
        row /= norm;
    }
    let s = u.dot(&u.t()) / tau;

    let (anchors, pool) = match mode {
        DenominatorMode::Symmetric => (2 * n, 2 * n),
        DenominatorMode::FirstViewOnly => (n, n),
    };
    let mut loss = 0.0;
    // dL/dS
    let mut g = Array2::<f64>::zeros((2 * n, 2 * n));
    for a in 0..anchors {
        let pos = (a + n) % (2 * n);
        let others = (0..pool).filter(|&k| k != a);
        let max = others.clone().map(|k| s[[a, k]]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = others.clone().map(|k| (s[[a, k]] - max).exp()).sum();
        loss += max + sum.ln() - s[[a, pos]];
        for k in others {
            g[[a, k]] += (s[[a, k]] - max).exp() / sum / anchors as f64;
        }
        g[[a, pos]] -= 1.0 / anchors as f64;
    }
    loss /= anchors as f64;

    let du = (&g + &g.t()).dot(&u) / tau;
    let mut dy = du;
    for ((mut row, urow), &norm) in dy.rows_mut().into_iter().zip(u.rows()).zip(&norms) {
        let along = row.dot(&urow);
        row.zip_mut_with(&urow, |r, &uu| *r = (*r - along * uu) / norm);
    }
    let d1 = dy.slice(ndarray::s![..n, ..]).to_owned();
    let d2 = dy.slice(ndarray::s![n.., ..]).to_owned();
    Ok((loss, d1, d2))
}

/// NT-Xent between paired views `y1[i] <-> y2[i]`, rows L2-normalized.
pub fn nt_xent(
    y1: ArrayView2<'_, f64>,
    y2: ArrayView2<'_, f64>,
    tau: f64,
    mode: DenominatorMode,
) -> Result<f64> {
    nt_xent_parts(y1, y2, tau, mode).map(|(loss, _, _)| loss)
}

/// Graph version of [`nt_xent`].
pub fn nt_xent_op(tape: &Tape, y1: Var, y2: Var, tau: f64, mode: DenominatorMode) -> Result<Var> {
    let v1 = tape.value(y1);
    let v2 = tape.value(y2);
    let (loss, d1, d2) = nt_xent_parts(view2(&v1)?, view2(&v2)?, tau, mode)?;
    Ok(tape.custom(
        ndarray::arr0(loss).into_dyn(),
        &[y1, y2],
        Box::new(move |g, _| {
            let g = g.iter().next().copied().unwrap_or(0.0);
            vec![Some((&d1 * g).into_dyn()), Some((&d2 * g).into_dyn())]
        }),
    ))
}

/// Pearson coefficient of two equally long slices and its gradient with
/// respect to each.
fn pearson_pair(a: &[f64], b: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let len = a.len() as f64;
    let ma = a.iter().sum::<f64>() / len;
    let mb = b.iter().sum::<f64>() / len;
    let ca: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let cb: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let na = ca.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = cb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return None;
    }
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let r = (dot / (na * nb)).clamp(-1.0, 1.0);
    // Both centered vectors sum to zero, so these are already the gradients
    // with respect to the uncentered inputs.
    let ga = ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| y / (na * nb) - r * x / (na * na))
        .collect();
    let gb = ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| x / (na * nb) - r * y / (nb * nb))
        .collect();
    Some((r, ga, gb))
}

type PearsonParts = (f64, Vec<f64>, Vec<f64>);

fn pearson_parts(
    x: ArrayView3<'_, f64>,
    x_gen: ArrayView3<'_, f64>,
    mode: CorrelationMode,
) -> Result<PearsonParts> {
    if x.dim() != x_gen.dim() {
        return Err(Error::shape(format!(
            "pearson_term shapes differ: {:?} vs {:?}",
            x.dim(),
            x_gen.dim()
        )));
    }
    let n = x.len_of(Axis(0));
    if n == 0 {
        return Err(Error::invalid("pearson_term on an empty batch"));
    }
    let xs = x.as_standard_layout();
    let gs = x_gen.as_standard_layout();
    let xf = xs.as_slice().expect("standard layout");
    let gf = gs.as_slice().expect("standard layout");
    match mode {
        CorrelationMode::WholeBatch => {
            pearson_pair(xf, gf).ok_or(Error::ZeroVariance { index: 0 })
        }
        CorrelationMode::PerSample => {
            let m = xf.len() / n;
            let mut total = 0.0;
            let mut dx = Vec::with_capacity(xf.len());
            let mut dg = Vec::with_capacity(xf.len());
            for i in 0..n {
                let (r, ga, gb) = pearson_pair(&xf[i * m..(i + 1) * m], &gf[i * m..(i + 1) * m])
                    .ok_or(Error::ZeroVariance { index: i })?;
                total += r;
                dx.extend(ga.into_iter().map(|v| v / n as f64));
                dg.extend(gb.into_iter().map(|v| v / n as f64));
            }
            Ok((total / n as f64, dx, dg))
        }
    }
}

/// Correlation between original and generated windows, in `[-1, 1]`.
pub fn pearson_term(
    x: ArrayView3<'_, f64>,
    x_gen: ArrayView3<'_, f64>,
    mode: CorrelationMode,
) -> Result<f64> {
    pearson_parts(x, x_gen, mode).map(|(r, _, _)| r)
}

/// Graph version of [`pearson_term`].
pub fn pearson_op(tape: &Tape, x: Var, x_gen: Var, mode: CorrelationMode) -> Result<Var> {
    let vx = tape.value(x);
    let vg = tape.value(x_gen);
    let (r, dx, dg) = pearson_parts(view3(&vx)?, view3(&vg)?, mode)?;
    let shape = vx.raw_dim();
    Ok(tape.custom(
        ndarray::arr0(r).into_dyn(),
        &[x, x_gen],
        Box::new(move |g, need| {
            let g = g.iter().next().copied().unwrap_or(0.0);
            let build = |d: &[f64]| {
                ArrayD::from_shape_vec(shape.clone(), d.iter().map(|v| v * g).collect())
                    .expect("gradient shape")
            };
            vec![
                need[0].then(|| build(&dx)),
                need[1].then(|| build(&dg)),
            ]
        }),
    ))
}

/// Scalar loss node plus the values of its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub total: Var,
    /// The embedding that entered NT-Xent as the first view: a detached copy
    /// of `y` under stop-gradient, `y` itself otherwise.
    pub y_slot: Var,
    pub nt_xent: f64,
    /// Weighted-in correlation term; `None` when correlation reduction is off.
    pub cr: Option<f64>,
    /// Correlation between `x` and `x_gen`, reported even when not
    /// optimized; `None` if it is undefined (a zero-variance window).
    pub correlation: Option<f64>,
}

/// `nt_xent(y or sg(y), y_gen) [+ cr_weight * pearson(x, x_gen)]`.
///
/// The stop-gradient only affects the NT-Xent operand; the generator keeps
/// reading the live `y`, so the encoder is still reached through it.
pub fn autocl_loss(
    tape: &Tape,
    x: Var,
    y: Var,
    x_gen: Var,
    y_gen: Var,
    config: &LossConfig,
) -> Result<LossOutput> {
    config.validate()?;
    let y_used = if config.sg_enabled { tape.detach(y) } else { y };
    let contrastive = nt_xent_op(tape, y_used, y_gen, config.tau, config.denominator_mode)?;
    let nt_value = tape.value(contrastive).iter().next().copied().unwrap_or(f64::NAN);
    if config.cr_enabled {
        let r = pearson_op(tape, x, x_gen, config.correlation_mode)?;
        let r_value = tape.value(r).iter().next().copied().unwrap_or(f64::NAN);
        let weighted = tape.scale(r, config.cr_weight);
        let total = tape.add(contrastive, weighted)?;
        Ok(LossOutput {
            total,
            y_slot: y_used,
            nt_xent: nt_value,
            cr: Some(r_value),
            correlation: Some(r_value),
        })
    } else {
        let vx = tape.value(x);
        let vg = tape.value(x_gen);
        let correlation = match (view3(&vx), view3(&vg)) {
            (Ok(a), Ok(b)) => pearson_term(a, b, config.correlation_mode).ok(),
            _ => None,
        };
        Ok(LossOutput {
            total: contrastive,
            y_slot: y_used,
            nt_xent: nt_value,
            cr: None,
            correlation,
        })
    }
}
