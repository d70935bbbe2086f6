//! Held-out evaluation against persistence.

use std::fmt::Write as _;

use super::metrics::{mae, persistence_baseline, skill};
use crate::atmosphere::{knots_to_ms, make_windows, DegradeParams, FieldCube, IntensityRecord, Storm};
use crate::error::{Error, Result};
use crate::forecaster::{ForecastInputs, ForecastModel};

/// One forecast lead for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub storm: String,
    pub init_time: i64,
    pub lead: usize,
    pub truth_msw: f64,
    pub truth_mslp: f64,
    pub pred_msw: f64,
    pub pred_mslp: f64,
    pub persist_msw: f64,
    pub persist_mslp: f64,
}

/// Errors at one lead. Wind in m/s, pressure in hPa.
#[derive(Clone, Debug, PartialEq)]
pub struct LeadErrors {
    pub lead: usize,
    pub msw_mae: f64,
    pub mslp_mae: f64,
    pub persistence_msw_mae: f64,
    pub persistence_mslp_mae: f64,
    /// `None` when persistence is exact at this lead.
    pub msw_skill: Option<f64>,
    pub mslp_skill: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub windows: usize,
    pub leads: Vec<LeadErrors>,
    pub rows: Vec<PredictionRow>,
}

fn skill_or_none(eb: f64, ef: f64) -> Option<f64> {
    if eb > 0.0 {
        skill(eb, ef).ok()
    } else {
        None
    }
}

fn lead_errors(rows: &[PredictionRow], lead: usize) -> Result<LeadErrors> {
    let at: Vec<&PredictionRow> = rows.iter().filter(|r| r.lead == lead).collect();
    let col = |f: fn(&PredictionRow) -> f64| at.iter().map(|r| f(r)).collect::<Vec<_>>();
    let tw = col(|r| r.truth_msw);
    let tp = col(|r| r.truth_mslp);
    let msw_mae = knots_to_ms(mae(&tw, &col(|r| r.pred_msw))?);
    let mslp_mae = mae(&tp, &col(|r| r.pred_mslp))?;
    let persistence_msw_mae = knots_to_ms(mae(&tw, &col(|r| r.persist_msw))?);
    let persistence_mslp_mae = mae(&tp, &col(|r| r.persist_mslp))?;
    Ok(LeadErrors {
        lead,
        msw_mae,
        mslp_mae,
        persistence_msw_mae,
        persistence_mslp_mae,
        msw_skill: skill_or_none(persistence_msw_mae, msw_mae),
        mslp_skill: skill_or_none(persistence_mslp_mae, mslp_mae),
    })
}

impl EvalReport {
    /// Aggregate prediction rows into per-lead errors.
    pub fn from_rows(rows: Vec<PredictionRow>, m: usize) -> Result<Self> {
        let windows = rows.iter().filter(|r| r.lead == 1).count();
        let leads = (1..=m).map(|l| lead_errors(&rows, l)).collect::<Result<Vec<_>>>()?;
        Ok(EvalReport { windows, leads, rows })
    }

    pub fn lead(&self, lead: usize) -> Option<&LeadErrors> {
        self.leads.iter().find(|l| l.lead == lead)
    }

    /// Per-lead errors as CSV. Floats use the shortest exact decimal form.
    pub fn leads_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut s = String::from("lead,msw_mae_ms,mslp_mae_hpa,persist_msw_mae_ms,persist_mslp_mae_hpa,msw_skill,mslp_skill\n");
        for l in &self.leads {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                l.lead,
                l.msw_mae,
                l.mslp_mae,
                l.persistence_msw_mae,
                l.persistence_mslp_mae,
                opt(l.msw_skill),
                opt(l.mslp_skill)
            )
            .unwrap();
        }
        s
    }

    /// Every prediction as CSV, intensities in knots and hPa.
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("storm,init_time,lead,truth_msw,truth_mslp,pred_msw,pred_mslp,persist_msw,persist_mslp\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.storm,
                r.init_time,
                r.lead,
                r.truth_msw,
                r.truth_mslp,
                r.pred_msw,
                r.pred_mslp,
                r.persist_msw,
                r.persist_mslp
            )
            .unwrap();
        }
        s
    }

    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:7.2}")).unwrap_or_else(|| "    n/a".into());
        let mut s = format!("{} windows\nlead   MSW m/s  persist   skill%   MSLP hPa  persist   skill%\n", self.windows);
        for l in &self.leads {
            writeln!(
                s,
                "{:4}  {:8.3} {:8.3} {}  {:9.3} {:8.3} {}",
                l.lead,
                l.msw_mae,
                l.persistence_msw_mae,
                opt(l.msw_skill),
                l.mslp_mae,
                l.persistence_mslp_mae,
                opt(l.mslp_skill)
            )
            .unwrap();
        }
        s
    }
}

/// Forecast every `n + m` window of the selected storms.
///
/// `train_fingerprint` identifies the split the model's statistics must come
/// from; a model fitted on anything else is rejected.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &ForecastModel,
    storms: &[Storm],
    selection: &[usize],
    train_fingerprint: u32,
    n: usize,
    m: usize,
    degrade: &DegradeParams,
    seed: u64,
    batch: usize,
) -> Result<EvalReport> {
    if model.norm.source.fingerprint != train_fingerprint || model.pi_stats.fingerprint != train_fingerprint {
        return Err(Error::Data("model statistics were not fitted on this training split".into()));
    }
    let chosen: Vec<Storm> = selection.iter().map(|&i| storms[i].clone()).collect();
    let windows = make_windows(&chosen, n, m).map_err(Error::Data)?;
    if windows.is_empty() {
        return Err(Error::Data(format!("no evaluation storm spans n + m = {} steps", n + m)));
    }
    let mut rows = Vec::with_capacity(windows.len() * m);
    for group in windows.chunks(batch.max(1)) {
        let data: Vec<_> = group.iter().map(|w| w.materialize(&chosen, degrade, seed)).collect();
        let hist: Vec<&[IntensityRecord]> = data.iter().map(|d| d.history.as_slice()).collect();
        let hc: Vec<&[FieldCube]> = data.iter().map(|d| d.history_cubes.as_slice()).collect();
        let fc: Vec<&[FieldCube]> = data.iter().map(|d| d.future_cubes.as_slice()).collect();
        let preds = model.forecast_batch(
            &ForecastInputs { history: &hist, history_cubes: &hc, future_cubes: &fc },
            m,
        )?;
        for (d, p) in data.iter().zip(preds) {
            let persist = persistence_baseline(&d.history, m)?;
            let init = d.history[n - 1].valid_time;
            for (i, ((t, f), b)) in d.future.iter().zip(&p).zip(&persist).enumerate() {
                rows.push(PredictionRow {
                    storm: t.storm_id.to_string(),
                    init_time: init,
                    lead: i + 1,
                    truth_msw: t.msw,
                    truth_mslp: t.mslp,
                    pred_msw: f.msw,
                    pred_mslp: f.mslp,
                    persist_msw: b.msw,
                    persist_mslp: b.mslp,
                });
            }
        }
    }
    EvalReport::from_rows(rows, m)
}
