//! Executing a model: binding parameters to an executor, assembling step
//! inputs from a panel, and advancing the dual-track network one day at a
//! time.
//!
//! One recurrent step consumes the whole sliding input window as parallel
//! streams (auxiliary stream first, then the daily patches), so consecutive
//! steps see windows shifted by one day.  The same step logic drives training
//! (on a tape) and inference (on the eager executor).

use chrono::NaiveDate;

use crate::autodiff::{Exec, Tensor};
use crate::cells::{cell_step, Cell, CellState};
use crate::dataset::{normalize, Panel};
use crate::{Error, Result};

use super::{week_index, LinearIdx, Model, NetIdx, NetworkConfig};

/// Executor-bound affine map.
#[derive(Debug, Clone)]
pub struct LinearVars<V> {
    pub w: V,
    pub b: V,
}

/// Executor-bound recurrent network: per-layer mixing maps, the cell grid
/// (`cells[layer][stream]`), and the output head.
#[derive(Debug, Clone)]
pub struct NetVars<V> {
    pub mixes: Vec<LinearVars<V>>,
    pub cells: Vec<Vec<Cell<V>>>,
    pub head: LinearVars<V>,
}

/// Every model parameter bound to executor values, mirroring the structural
/// indices on [`Model`].
#[derive(Debug, Clone)]
pub struct ModelVars<V> {
    pub date_map: V,
    pub context: Option<NetVars<V>>,
    pub global_adapter: Option<LinearVars<V>>,
    pub series_adapters: Vec<LinearVars<V>>,
    pub primaries: Vec<Vec<NetVars<V>>>,
}

fn lin_vars<V: Clone>(vals: &[V], l: &LinearIdx) -> LinearVars<V> {
    LinearVars {
        w: vals[l.w].clone(),
        b: vals[l.b].clone(),
    }
}

fn net_vars<V: Clone>(vals: &[V], n: &NetIdx) -> NetVars<V> {
    NetVars {
        mixes: n.mixes.iter().map(|m| lin_vars(vals, m)).collect(),
        cells: n
            .cells
            .iter()
            .map(|row| row.iter().map(|c| c.map(|&id| vals[id].clone())).collect())
            .collect(),
        head: lin_vars(vals, &n.head),
    }
}

impl Model {
    /// Binds every parameter as a differentiable input on the executor.
    pub fn bind<E: Exec>(&self, ex: &mut E) -> ModelVars<E::V> {
        let vals: Vec<E::V> = self.store().tensors().iter().map(|t| ex.param(t)).collect();
        self.vars_from(&vals)
    }

    /// Shapes a flat value slice (aligned with the parameter store) into the
    /// model's structure; for callers that create the executor leaves
    /// themselves.
    pub fn vars_from<V: Clone>(&self, vals: &[V]) -> ModelVars<V> {
        assert_eq!(
            vals.len(),
            self.store().len(),
            "value slice must align with the parameter store"
        );
        ModelVars {
            date_map: vals[self.date_map].clone(),
            context: self.context.as_ref().map(|n| net_vars(vals, n)),
            global_adapter: self.global_adapter.as_ref().map(|l| lin_vars(vals, l)),
            series_adapters: self
                .series_adapters
                .iter()
                .map(|l| lin_vars(vals, l))
                .collect(),
            primaries: self
                .primaries
                .iter()
                .map(|team| team.iter().map(|n| net_vars(vals, n)).collect())
                .collect(),
        }
    }
}

/// Ring-buffer states for one track's cell grid.
#[derive(Debug, Clone)]
pub struct TrackState<V> {
    pub cells: Vec<Vec<CellState<V>>>,
}

impl<V: Clone> TrackState<V> {
    fn cold(cfg: &NetworkConfig, prefix: &str) -> Self {
        let n_streams = cfg.n_streams();
        let cells = cfg
            .layer_dilations()
            .iter()
            .enumerate()
            .map(|(l, &d)| {
                (0..n_streams)
                    .map(|s| CellState::cold_labeled(d, format!("{prefix}.layer{l}.stream{s}")))
                    .collect()
            })
            .collect();
        TrackState { cells }
    }
}

/// Recurrent state for the whole model.
#[derive(Debug, Clone)]
pub struct RunState<V> {
    pub context: Option<TrackState<V>>,
    pub primaries: Vec<Vec<TrackState<V>>>,
}

impl<V: Clone> RunState<V> {
    pub fn cold(model: &Model) -> Self {
        let cfg = model.config();
        RunState {
            context: model.context.as_ref().map(|_| TrackState::cold(cfg, "context")),
            primaries: (0..model.primaries.len())
                .map(|s| {
                    (0..model.primaries[s].len())
                        .map(|k| TrackState::cold(cfg, &format!("sub{s}.mem{k}")))
                        .collect()
                })
                .collect(),
        }
    }
}

/// One step's worth of panel data: the normalized input window of every
/// batch series laid out as stream matrices, plus the matching window levels.
/// The context fields cover *all* series (the context track models the whole
/// panel) and stay empty when the context track is ablated.
#[derive(Debug, Clone)]
pub struct StepBatch {
    /// First target day of this step's forecast window.
    pub origin: usize,
    /// Date of the last input day, which keys the week embedding.
    pub date: NaiveDate,
    /// Panel series behind each primary column.
    pub batch: Vec<usize>,
    /// Data streams for the primary track, each `[width, B]`.
    pub primary_patches: Vec<Tensor>,
    /// Input-window mean of each batch series (the normalizer).
    pub primary_zbar: Vec<f64>,
    /// Data streams for the context track, each `[width, n_series]`.
    pub context_patches: Vec<Tensor>,
    /// Input-window mean of every series in the panel.
    pub context_zbar: Vec<f64>,
}

impl StepBatch {
    /// Builds step inputs for `batch` series at the given origin day (the
    /// first day the forecast window would cover).  Only the input window
    /// must lie inside the panel; targets may extend beyond it.
    pub fn assemble(
        panel: &Panel,
        cfg: &NetworkConfig,
        batch: &[usize],
        origin: usize,
    ) -> Result<StepBatch> {
        let m = cfg.input_days;
        if origin < m || origin > panel.days() {
            return Err(Error::Data(format!(
                "origin day {origin} needs {m} input days inside the panel of {} days",
                panel.days()
            )));
        }
        if batch.is_empty() {
            return Err(Error::Data("a step needs at least one batch series".into()));
        }
        if let Some(&bad) = batch.iter().find(|&&i| i >= panel.regions().len()) {
            return Err(Error::Data(format!(
                "batch series index {bad} out of range for {} regions",
                panel.regions().len()
            )));
        }
        let (primary_patches, primary_zbar) = window_streams(panel, cfg, batch, origin);
        let (context_patches, context_zbar) = if cfg.no_context {
            (Vec::new(), Vec::new())
        } else {
            let all: Vec<usize> = (0..panel.regions().len()).collect();
            window_streams(panel, cfg, &all, origin)
        };
        Ok(StepBatch {
            origin,
            date: panel.date_of_day(origin - 1),
            batch: batch.to_vec(),
            primary_patches,
            primary_zbar,
            context_patches,
            context_zbar,
        })
    }
}

/// Normalized input windows for `cols` series at `origin`, as one matrix per
/// stream with one column per series, plus the window means.
fn window_streams(
    panel: &Panel,
    cfg: &NetworkConfig,
    cols: &[usize],
    origin: usize,
) -> (Vec<Tensor>, Vec<f64>) {
    let m = cfg.input_days;
    let u = cfg.resolution;
    let b = cols.len();
    let mut zbars = Vec::with_capacity(b);
    let mut windows = Vec::with_capacity(b);
    for &i in cols {
        let (xn, zbar) = normalize(&panel.series(i)[(origin - m) * u..origin * u]);
        zbars.push(zbar);
        windows.push(xn);
    }
    let spans: Vec<(usize, usize)> = if cfg.no_patches {
        vec![(0, m * u)]
    } else {
        (0..m).map(|j| (j * u, u)).collect()
    };
    let streams = spans
        .iter()
        .map(|&(off, len)| {
            let mut data = vec![0.0; len * b];
            for (col, w) in windows.iter().enumerate() {
                for r in 0..len {
                    data[r * b + col] = w[off + r];
                }
            }
            Tensor::matrix(len, b, data).expect("sized above")
        })
        .collect();
    (streams, zbars)
}

/// Normalized forecast targets `[horizon_len, B]` for the batch at `origin`,
/// plus a per-column validity flag.  A series whose input window is all zero
/// has no scale; its column is flagged invalid and its targets are pinned to
/// zero so downstream arithmetic stays finite.
pub fn normalized_targets(
    panel: &Panel,
    cfg: &NetworkConfig,
    batch: &[usize],
    origin: usize,
) -> Result<(Tensor, Vec<bool>)> {
    let (m, h, u) = (cfg.input_days, cfg.horizon_days, cfg.resolution);
    if origin < m || origin + h > panel.days() {
        return Err(Error::Data(format!(
            "targets for origin day {origin} need days {origin}..{} inside the panel of {} days",
            origin + h,
            panel.days()
        )));
    }
    let b = batch.len();
    let rows = h * u;
    let mut data = vec![0.0; rows * b];
    let mut valid = Vec::with_capacity(b);
    for (col, &i) in batch.iter().enumerate() {
        let (_, zbar) = normalize(&panel.series(i)[(origin - m) * u..origin * u]);
        let ok = zbar > 0.0;
        valid.push(ok);
        if ok {
            let tgt = &panel.series(i)[origin * u..(origin + h) * u];
            for r in 0..rows {
                data[r * b + col] = tgt[r] / zbar;
            }
        }
    }
    Ok((Tensor::matrix(rows, b, data)?, valid))
}

/// Constants shared by every team in one step: the data streams plus the
/// tiled date embedding and window levels.
pub struct StepInputs<V> {
    pub streams: Vec<V>,
    pub d_tiled: V,
    pub zbar: V,
}

/// Per-member outputs of one step: normalized forecasts `[horizon_len, B]`
/// and confidences `[1, B]`, indexed `[subrange][member]`.
pub struct StepOutput<V> {
    pub forecasts: Vec<Vec<V>>,
    pub confidences: Vec<Vec<V>>,
}

/// A model bound to one executor, with live recurrent state.
pub struct ModelRun<'m, V> {
    model: &'m Model,
    pub vars: ModelVars<V>,
    pub state: RunState<V>,
}

impl<'m, V: Clone> ModelRun<'m, V> {
    /// Binds the model's parameters on `ex` and starts from cold states.
    pub fn new<E: Exec<V = V>>(model: &'m Model, ex: &mut E) -> Self {
        let vars = model.bind(ex);
        ModelRun {
            model,
            vars,
            state: RunState::cold(model),
        }
    }

    /// Wraps pre-bound values (e.g. leaves created by the caller) with cold
    /// states.
    pub fn with_vars(model: &'m Model, vars: ModelVars<V>) -> Self {
        ModelRun {
            model,
            vars,
            state: RunState::cold(model),
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Drops all recurrent state back to cold.
    pub fn reset(&mut self) {
        self.state = RunState::cold(self.model);
    }

    /// Advances the context track one step and returns the adapted context
    /// `[embedded_context, B]` for the batch columns.  With the context track
    /// ablated this is a zero constant.
    pub fn context_step<E: Exec<V = V>>(&mut self, ex: &mut E, sb: &StepBatch) -> Result<V> {
        let cfg = self.model.config();
        let b = sb.batch.len();
        if cfg.no_context {
            return Ok(ex.constant(Tensor::zeros(&[cfg.embedded_context, b])));
        }
        let n_series = self.model.regions().len();
        let d_col = ex.slice(&self.vars.date_map, 1, week_index(sb.date), 1)?;
        let ones = ex.constant(Tensor::filled(&[1, n_series], 1.0));
        let d_tiled = ex.matmul(&d_col, &ones)?;
        let zbar = ex.constant(Tensor::matrix(1, n_series, sb.context_zbar.clone())?);
        let pads = cfg.context_padding.as_deref().expect("pinned at build");
        let x0 = aux_stream(ex, &[zbar, d_tiled], pads)?;
        let mut layer0 = Vec::with_capacity(1 + sb.context_patches.len());
        layer0.push(x0);
        for p in &sb.context_patches {
            layer0.push(ex.constant(p.clone()));
        }
        let net = self.vars.context.as_ref().expect("context params exist");
        let state = self.state.context.as_mut().expect("context state exists");
        let head = net_step(ex, cfg, net, state, layer0, None)?;
        if !ex.value(&head).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite context output at origin day {}",
                sb.origin
            )));
        }
        let flat = ex.reshape(&head, &[cfg.per_series_context * n_series, 1])?;
        self.adapt(ex, &flat, &sb.batch)
    }

    /// Applies the context adapters to the flattened context for each batch
    /// series and stacks the results into `[embedded_context, B]`.
    pub(super) fn adapt<E: Exec<V = V>>(&self, ex: &mut E, flat: &V, batch: &[usize]) -> Result<V> {
        let cfg = self.model.config();
        let global = match &self.vars.global_adapter {
            Some(g) => Some(linear(ex, g, flat)?),
            None => None,
        };
        if self.vars.series_adapters.is_empty() {
            return match global {
                Some(g) => {
                    let ones = ex.constant(Tensor::filled(&[1, batch.len()], 1.0));
                    ex.matmul(&g, &ones)
                }
                None => Ok(ex.constant(Tensor::zeros(&[cfg.embedded_context, batch.len()]))),
            };
        }
        let mut cols = Vec::with_capacity(batch.len());
        for &i in batch {
            let a = &self.vars.series_adapters[i];
            let col = if cfg.sequential_adapters {
                // The per-series map refines the global embedding.
                linear(ex, a, global.as_ref().expect("validated together"))?
            } else {
                let own = linear(ex, a, flat)?;
                match &global {
                    Some(g) => ex.add(&own, g)?,
                    None => own,
                }
            };
            cols.push(col);
        }
        ex.concat(1, &cols)
    }

    /// Registers the step constants shared by every primary team.
    pub fn primary_inputs<E: Exec<V = V>>(
        &self,
        ex: &mut E,
        sb: &StepBatch,
    ) -> Result<StepInputs<V>> {
        let b = sb.batch.len();
        let d_col = ex.slice(&self.vars.date_map, 1, week_index(sb.date), 1)?;
        let ones = ex.constant(Tensor::filled(&[1, b], 1.0));
        let d_tiled = ex.matmul(&d_col, &ones)?;
        let zbar = ex.constant(Tensor::matrix(1, b, sb.primary_zbar.clone())?);
        let streams = sb
            .primary_patches
            .iter()
            .map(|p| ex.constant(p.clone()))
            .collect();
        Ok(StepInputs {
            streams,
            d_tiled,
            zbar,
        })
    }

    /// Advances every member of one subrange team a step and returns each
    /// member's `(forecast, confidence)`.  `q_row` is `[1, B]` of quantile
    /// levels and `r_prime` the adapted context for the same columns.
    pub fn team_step<E: Exec<V = V>>(
        &mut self,
        ex: &mut E,
        sub: usize,
        inputs: &StepInputs<V>,
        q_row: &V,
        r_prime: &V,
        origin: usize,
    ) -> Result<Vec<(V, V)>> {
        let cfg = self.model.config();
        let pads = cfg.primary_padding.as_deref().expect("pinned at build");
        let parts = [
            q_row.clone(),
            r_prime.clone(),
            inputs.zbar.clone(),
            inputs.d_tiled.clone(),
        ];
        let x0 = aux_stream(ex, &parts, pads)?;
        let h_len = cfg.horizon_len();
        let members = self.vars.primaries[sub].len();
        let mut out = Vec::with_capacity(members);
        for k in 0..members {
            let mut layer0 = Vec::with_capacity(1 + inputs.streams.len());
            layer0.push(x0.clone());
            layer0.extend(inputs.streams.iter().cloned());
            let net = &self.vars.primaries[sub][k];
            let state = &mut self.state.primaries[sub][k];
            let head = net_step(ex, cfg, net, state, layer0, Some(q_row))?;
            if !ex.value(&head).is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite forecast head at origin day {origin} (subrange {sub}, member {k})"
                )));
            }
            let raw = ex.slice(&head, 0, 0, h_len)?;
            let fcst = ex.leaky_relu(&raw, cfg.leaky_slope);
            let conf_raw = ex.slice(&head, 0, h_len, 1)?;
            let conf = ex.softplus(&conf_raw);
            out.push((fcst, conf));
        }
        Ok(out)
    }

    /// Advances the whole model one step: the context track once, then every
    /// subrange team with its own quantile row (`q_rows[s]` is `[1, B]`).
    pub fn step<E: Exec<V = V>>(
        &mut self,
        ex: &mut E,
        sb: &StepBatch,
        q_rows: &[Tensor],
    ) -> Result<StepOutput<V>> {
        let n_subs = self.vars.primaries.len();
        if q_rows.len() != n_subs {
            return Err(Error::Config(format!(
                "expected one quantile row per subrange ({n_subs}), got {}",
                q_rows.len()
            )));
        }
        let r_prime = self.context_step(ex, sb)?;
        let inputs = self.primary_inputs(ex, sb)?;
        let mut forecasts = Vec::with_capacity(n_subs);
        let mut confidences = Vec::with_capacity(n_subs);
        for s in 0..n_subs {
            let q_row = ex.constant(q_rows[s].clone());
            let pairs = self.team_step(ex, s, &inputs, &q_row, &r_prime, sb.origin)?;
            let mut fs = Vec::with_capacity(pairs.len());
            let mut cs = Vec::with_capacity(pairs.len());
            for (f, c) in pairs {
                fs.push(f);
                cs.push(c);
            }
            forecasts.push(fs);
            confidences.push(cs);
        }
        Ok(StepOutput {
            forecasts,
            confidences,
        })
    }
}

fn linear<E: Exec>(ex: &mut E, lin: &LinearVars<E::V>, x: &E::V) -> Result<E::V> {
    let wx = ex.matmul(&lin.w, x)?;
    ex.add(&wx, &lin.b)
}

/// Stacks auxiliary components into one patch-width stream by appending the
/// model's pinned repeat-padding rows.
fn aux_stream<E: Exec>(ex: &mut E, parts: &[E::V], padding: &[usize]) -> Result<E::V> {
    let stack = ex.concat(0, parts)?;
    if padding.is_empty() {
        return Ok(stack);
    }
    let mut full = Vec::with_capacity(1 + padding.len());
    full.push(stack.clone());
    for &idx in padding {
        full.push(ex.slice(&stack, 0, idx, 1)?);
    }
    ex.concat(0, &full)
}

/// One recurrent step of a stream-parallel network: mix the current stream
/// inputs, run each stream's cell on `[stream; mix share; quantile?]`, repeat
/// per layer, then apply the head to the concatenated last-layer outputs
/// (plus the quantile row for primary networks).
fn net_step<E: Exec>(
    ex: &mut E,
    cfg: &NetworkConfig,
    net: &NetVars<E::V>,
    state: &mut TrackState<E::V>,
    layer0: Vec<E::V>,
    q_row: Option<&E::V>,
) -> Result<E::V> {
    let pc = cfg.patch_context;
    let mut cur = layer0;
    for (l, mix) in net.mixes.iter().enumerate() {
        let all = ex.concat(0, &cur)?;
        let mixed = linear(ex, mix, &all)?;
        let mut next = Vec::with_capacity(cur.len());
        for (s, x) in cur.iter().enumerate() {
            let share = ex.slice(&mixed, 0, s * pc, pc)?;
            let mut parts = vec![x.clone(), share];
            if let Some(q) = q_row {
                parts.push(q.clone());
            }
            let cell_in = ex.concat(0, &parts)?;
            let y = cell_step(ex, &net.cells[l][s], &mut state.cells[l][s], &cell_in)?;
            next.push(y);
        }
        cur = next;
    }
    if let Some(q) = q_row {
        cur.push(q.clone());
    }
    let feat = ex.concat(0, &cur)?;
    linear(ex, &net.head, &feat)
}
