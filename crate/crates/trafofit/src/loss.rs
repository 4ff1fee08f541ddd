//! Censored negative log-likelihood.
//!
//! Every observation is reduced to a censoring status before fitting:
//! exact responses contribute -log f_Z(h(y|x)) - log h'(y|x), interval
//! censored ones -log(F_Z(h(upper|x)) - F_Z(h(lower|x))), and left/right
//! censoring follow as the limits with an infinite bound. Ordinal and
//! count responses are always censored; for ordinal responses the stored
//! bounds are cut indices (1-based) rather than response values.

use crate::error::{Result, TrafoError};
use crate::model::CompiledModel;
use crate::model::{BoundData, ResponseType};
use crate::scalar::Scalar;

/// Censoring status with bounds. For ordinal responses the bound payloads
/// are cut indices 1..K-1; for all other types they are response values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResponseValue {
    Exact(f64),
    /// Upper bound: contributes F_Z(h(upper)).
    LeftCensored(f64),
    /// Lower bound: contributes 1 - F_Z(h(lower)).
    RightCensored(f64),
    /// (lower, upper]: contributes F_Z(h(upper)) - F_Z(h(lower)).
    Interval(f64, f64),
}

/// An encoded observation: censoring status plus the raw response value
/// (for ordinal responses, the 1-based level index).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedResponse {
    pub value: ResponseValue,
    pub raw: f64,
}

pub fn encode_continuous(y: f64) -> EncodedResponse {
    EncodedResponse {
        value: ResponseValue::Exact(y),
        raw: y,
    }
}

/// Survival record: event = true means an exact observation, false a
/// right-censored one.
pub fn encode_survival(time: f64, event: bool) -> EncodedResponse {
    EncodedResponse {
        value: if event {
            ResponseValue::Exact(time)
        } else {
            ResponseValue::RightCensored(time)
        },
        raw: time,
    }
}

/// Counts: 0 is left-censored at 0, y >= 1 is interval-censored on
/// (y-1, y].
pub fn encode_count(y: f64) -> Result<EncodedResponse> {
    if y < 0.0 {
        return Err(TrafoError::Data(format!("negative count {y}")));
    }
    if y.fract() != 0.0 {
        return Err(TrafoError::Data(format!(
            "count responses must be integers, got {y}"
        )));
    }
    let value = if y == 0.0 {
        ResponseValue::LeftCensored(0.0)
    } else {
        ResponseValue::Interval(y - 1.0, y)
    };
    Ok(EncodedResponse { value, raw: y })
}

/// Ordinal level k of K: the first level is left-censored at the first
/// cut, the last right-censored at the last cut, interior levels are
/// interval-censored between adjacent cuts.
pub fn encode_ordinal(level: usize, n_levels: usize) -> Result<EncodedResponse> {
    if level < 1 || level > n_levels {
        return Err(TrafoError::Data(format!(
            "level {level} outside 1..={n_levels}"
        )));
    }
    let value = if level == 1 {
        ResponseValue::LeftCensored(1.0)
    } else if level == n_levels {
        ResponseValue::RightCensored((n_levels - 1) as f64)
    } else {
        ResponseValue::Interval((level - 1) as f64, level as f64)
    };
    Ok(EncodedResponse {
        value,
        raw: level as f64,
    })
}

/// General interval-censored input with +-infinity tokens. Equal finite
/// bounds collapse to an exact observation.
pub fn encode_interval(lower: f64, upper: f64) -> Result<EncodedResponse> {
    if lower.is_nan() || upper.is_nan() {
        return Err(TrafoError::Data("NaN censoring bound".into()));
    }
    let value = match (lower.is_infinite(), upper.is_infinite()) {
        (true, true) => {
            return Err(TrafoError::Data(
                "both censoring bounds are infinite".into(),
            ))
        }
        (true, false) => ResponseValue::LeftCensored(upper),
        (false, true) => ResponseValue::RightCensored(lower),
        (false, false) => {
            if lower == upper {
                ResponseValue::Exact(lower)
            } else if lower < upper {
                ResponseValue::Interval(lower, upper)
            } else {
                return Err(TrafoError::Data(format!(
                    "interval bounds out of order: ({lower}, {upper}]"
                )));
            }
        }
    };
    Ok(EncodedResponse {
        value,
        raw: if lower.is_finite() { lower } else { upper },
    })
}

/// How log-likelihood contributions are summarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertFun {
    /// -sum of the NLL contributions: the log-likelihood. The default.
    LogLik,
    /// The per-observation NLL contributions.
    Identity,
    /// Average NLL.
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogLikOutput<S> {
    Scalar(S),
    PerObservation(Vec<S>),
}

/// Diagnostics accumulated while evaluating a batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossDiagnostics {
    /// Censored probabilities that hit the 1e-16 floor before the log.
    pub floored: usize,
}

/// NLL contribution of one observation.
pub fn nll_contribution<S: Scalar>(
    model: &mut CompiledModel<S>,
    bound: &BoundData<S>,
    row: usize,
) -> Result<S> {
    let mut diag = LossDiagnostics::default();
    model.row_nll(bound, row, &mut diag, None)
}

/// Mean NLL over a batch of rows plus penalties:
/// mean(contributions) + smooth penalties / n_batch + lasso penalties.
pub fn total_loss<S: Scalar>(
    model: &mut CompiledModel<S>,
    bound: &BoundData<S>,
    rows: &[usize],
) -> Result<(S, LossDiagnostics)> {
    batch_loss_impl(model, bound, rows, None, None)
}

/// Batch loss and parameter gradient (accumulated into `grad`, which must
/// be zeroed by the caller). `dropout_rng` enables training-time dropout.
pub fn total_loss_grad<S: Scalar>(
    model: &mut CompiledModel<S>,
    bound: &BoundData<S>,
    rows: &[usize],
    grad: &mut [S],
    dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(S, LossDiagnostics)> {
    batch_loss_impl(model, bound, rows, Some(grad), dropout_rng)
}

fn batch_loss_impl<S: Scalar>(
    model: &mut CompiledModel<S>,
    bound: &BoundData<S>,
    rows: &[usize],
    mut grad: Option<&mut [S]>,
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(S, LossDiagnostics)> {
    if rows.is_empty() {
        return Err(TrafoError::Data("empty batch".into()));
    }
    let n = S::of_f64(rows.len() as f64);
    let inv_n = S::one() / n;
    let mut diag = LossDiagnostics::default();
    let mut acc = S::zero();
    for &row in rows {
        let rng = dropout_rng.as_deref_mut();
        let contribution = model.row_nll(bound, row, &mut diag, rng)?;
        acc += contribution;
        if let Some(g) = grad.as_deref_mut() {
            model.backward_last_loss(inv_n, g);
        }
    }
    let mut loss = acc * inv_n;
    let (pen_scaled, pen_flat) = model.penalty_values()?;
    loss += pen_scaled * inv_n + pen_flat;
    if let Some(g) = grad.as_deref_mut() {
        model.backward_penalties(inv_n, g);
    }
    if !loss.is_finite() {
        return Err(TrafoError::Data("non-finite batch loss".into()));
    }
    Ok((loss, diag))
}

/// In- or out-of-sample log-likelihood with the chosen summary.
pub fn log_lik<S: Scalar>(
    model: &mut CompiledModel<S>,
    bound: &BoundData<S>,
    convert: ConvertFun,
) -> Result<LogLikOutput<S>> {
    let n = bound.n_rows();
    let mut contribs = Vec::with_capacity(n);
    let mut diag = LossDiagnostics::default();
    for row in 0..n {
        contribs.push(model.row_nll(bound, row, &mut diag, None)?);
    }
    Ok(match convert {
        ConvertFun::LogLik => {
            let mut s = S::zero();
            for c in &contribs {
                s += *c;
            }
            LogLikOutput::Scalar(-s)
        }
        ConvertFun::Identity => LogLikOutput::PerObservation(contribs),
        ConvertFun::Mean => {
            let mut s = S::zero();
            for c in &contribs {
                s += *c;
            }
            LogLikOutput::Scalar(s / S::of_f64(n as f64))
        }
    })
}

/// Encode a dataset's response column(s) for a compiled model.
pub fn encode_dataset_response<S: Scalar>(
    model: &CompiledModel<S>,
    data: &crate::data::Dataset<S>,
) -> Result<Vec<EncodedResponse>> {
    let n = data.n_rows();
    let mut out = Vec::with_capacity(n);
    match model.response_type() {
        ResponseType::Continuous => {
            if let Some((lo_col, hi_col)) = model.interval_bounds() {
                for row in 0..n {
                    let lo = data.numeric(lo_col, row)?;
                    let hi = data.numeric(hi_col, row)?;
                    out.push(encode_interval(lo, hi).map_err(|e| at_row(e, row))?);
                }
            } else {
                for row in 0..n {
                    out.push(encode_continuous(data.numeric(model.response_name(), row)?));
                }
            }
        }
        ResponseType::Survival => {
            let event_col = model
                .survival_event()
                .ok_or_else(|| TrafoError::Spec("survival model without event column".into()))?;
            for row in 0..n {
                let time = data.numeric(model.response_name(), row)?;
                let event = data.numeric(event_col, row)?;
                if event != 0.0 && event != 1.0 {
                    return Err(TrafoError::Data(format!(
                        "row {row}: event indicator must be 0 or 1, got {event}"
                    )));
                }
                out.push(encode_survival(time, event == 1.0));
            }
        }
        ResponseType::Count => {
            for row in 0..n {
                let y = data.numeric(model.response_name(), row)?;
                out.push(encode_count(y).map_err(|e| at_row(e, row))?);
            }
        }
        ResponseType::Ordinal => {
            let levels = model.response_levels().ok_or_else(|| {
                TrafoError::Spec("ordinal model without stored levels".into())
            })?;
            let k = levels.len();
            let data_levels = data.levels(model.response_name())?.to_vec();
            // Translate data codes into the training level order.
            let mut translate = Vec::with_capacity(data_levels.len());
            for l in &data_levels {
                translate.push(levels.iter().position(|t| t == l));
            }
            for row in 0..n {
                let code = data.level_code(model.response_name(), row)?;
                let idx = translate[code].ok_or_else(|| TrafoError::UnseenLevel {
                    column: model.response_name().to_string(),
                    level: data_levels[code].clone(),
                })?;
                out.push(encode_ordinal(idx + 1, k).map_err(|e| at_row(e, row))?);
            }
        }
    }
    Ok(out)
}

fn at_row(e: TrafoError, row: usize) -> TrafoError {
    TrafoError::Data(format!("row {row}: {e}"))
}
