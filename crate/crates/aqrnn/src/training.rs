//! The training protocol: batched rollouts with warmup, pinball and
//! confidence losses, member ranking with top-K restricted backpropagation,
//! the γ₁/γ₂ feedback controllers, and the epoch-schedule fit loop.
//!
//! Each update unrolls the model over `T` consecutive daily steps on one
//! shared forecast origin, ranks every team's members per series and step by
//! confidence against accuracy, and backpropagates only through the selected
//! members' terms — everything else receives exactly-zero gradients, so the
//! optimizer (which skips zero-gradient tensors) leaves those parameters
//! untouched.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamParams, AdamState, Exec, Tape, Tensor, Var};
use crate::dataset::Panel;
use crate::network::{normalized_targets, Model, ModelRun, NetworkConfig, StepBatch};
use crate::quantile::sample_train_level;
use crate::{Error, Result};

fn default_epochs() -> usize {
    8
}
fn default_batch_schedule() -> BTreeMap<usize, usize> {
    BTreeMap::from([(0, 2), (2, 5), (3, 12), (4, 25)])
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_lr_divisors() -> BTreeMap<usize, f64> {
    BTreeMap::from([(5, 3.0), (6, 8.0), (7, 20.0)])
}
fn default_adapter_lr_multiplier() -> f64 {
    3.0
}
fn default_updates_base() -> usize {
    8320
}
fn default_steps_per_update() -> usize {
    20
}
fn default_criterion_probability() -> f64 {
    0.9
}
fn default_losses_ratio() -> f64 {
    5.0
}
fn default_controller_frequency() -> usize {
    20
}
fn default_controller_constant() -> f64 {
    0.01
}
fn default_beta_shape() -> f64 {
    0.5
}

/// How γ₂ moves at each controller boundary.
///
/// `Literal` follows the printed update γ₂ ← γ₂ + sign(L̄_q)·C, under which γ₂
/// grows almost monotonically because pinball means are positive.  `Ratio`
/// instead compares the realized loss ratio to the target:
/// γ₂ ← γ₂ + sign(L̄_q/(γ₁·p̄⁺) − r)·C, using γ₁ as it stood before this
/// boundary's recomputation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gamma2Rule {
    Literal,
    Ratio,
}

impl Default for Gamma2Rule {
    fn default() -> Self {
        Gamma2Rule::Literal
    }
}

/// Training hyperparameters and schedules.
///
/// Schedules are epoch-keyed maps: an epoch uses the entry with the largest
/// key not exceeding it, so the defaults `{0:2, 2:5, 3:12, 4:25}` expand to
/// batch sizes `[2, 2, 5, 12, 25, 25, 25, 25]` over eight epochs.  Learning
/// rates divide the base rate: `{5:3, 6:8, 7:20}` yields
/// `[1e-3 ×5, 3.33e-4, 1.25e-4, 5e-5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epoch → batch size (series per update).
    pub batch_schedule: BTreeMap<usize, usize>,
    /// Base learning rate (epoch 0).
    pub learning_rate: f64,
    /// Epoch → divisor applied to the base learning rate.
    pub lr_divisors: BTreeMap<usize, f64>,
    /// Learning-rate multiplier for per-series adapter parameters.
    pub adapter_lr_multiplier: f64,
    /// Updates in the first epoch; later epochs scale as `(b₁/bₑ)^0.3`.
    pub updates_base: usize,
    /// Explicit per-epoch update counts, overriding the derived schedule.
    pub updates_per_epoch: Option<Vec<usize>>,
    /// Unrolled steps with loss per update (`T`).
    pub steps_per_update: usize,
    /// Warmup steps before loss accrues; defaults to the maximum dilation.
    pub warmup_steps: Option<usize>,
    /// Probability that an update selects members by confidence (else by
    /// accuracy).
    pub criterion_probability: f64,
    /// Desired pinball-to-confidence losses ratio (`r`).
    pub losses_ratio: f64,
    /// Controller window length in batches (`g`).
    pub controller_frequency: usize,
    /// Controller step size for γ₂ (`C`).
    pub controller_constant: f64,
    /// Shape of the symmetric Beta distribution behind quantile sampling.
    pub beta_shape: f64,
    pub gamma2_rule: Gamma2Rule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_schedule: default_batch_schedule(),
            learning_rate: default_learning_rate(),
            lr_divisors: default_lr_divisors(),
            adapter_lr_multiplier: default_adapter_lr_multiplier(),
            updates_base: default_updates_base(),
            updates_per_epoch: None,
            steps_per_update: default_steps_per_update(),
            warmup_steps: None,
            criterion_probability: default_criterion_probability(),
            losses_ratio: default_losses_ratio(),
            controller_frequency: default_controller_frequency(),
            controller_constant: default_controller_constant(),
            beta_shape: default_beta_shape(),
            gamma2_rule: Gamma2Rule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(why));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !self.batch_schedule.contains_key(&0) {
            return bad("batch_schedule needs an entry for epoch 0".into());
        }
        if self.batch_schedule.values().any(|&b| b == 0) {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.lr_divisors.values().any(|&d| !(d > 0.0 && d.is_finite())) {
            return bad("learning-rate divisors must be positive".into());
        }
        if !(self.adapter_lr_multiplier > 0.0 && self.adapter_lr_multiplier.is_finite()) {
            return bad("adapter_lr_multiplier must be positive".into());
        }
        if self.updates_base == 0 {
            return bad("updates_base must be at least 1".into());
        }
        if let Some(list) = &self.updates_per_epoch {
            if list.len() != self.epochs {
                return bad(format!(
                    "updates_per_epoch has {} entries for {} epochs",
                    list.len(),
                    self.epochs
                ));
            }
            if list.iter().any(|&u| u == 0) {
                return bad("updates_per_epoch entries must be at least 1".into());
            }
        }
        if self.steps_per_update == 0 {
            return bad("steps_per_update must be at least 1".into());
        }
        if !(self.criterion_probability > 0.0 && self.criterion_probability <= 1.0) {
            return bad(format!(
                "criterion_probability must be in (0, 1], got {}",
                self.criterion_probability
            ));
        }
        if !(self.losses_ratio > 0.0 && self.losses_ratio.is_finite()) {
            return bad(format!("losses_ratio must be positive, got {}", self.losses_ratio));
        }
        if self.controller_frequency == 0 {
            return bad("controller_frequency must be at least 1".into());
        }
        if !(self.controller_constant >= 0.0 && self.controller_constant.is_finite()) {
            return bad(format!(
                "controller_constant must be non-negative, got {}",
                self.controller_constant
            ));
        }
        if !(self.beta_shape > 0.0 && self.beta_shape.is_finite()) {
            return bad(format!("beta_shape must be positive, got {}", self.beta_shape));
        }
        Ok(())
    }

    /// Batch size for an epoch: the schedule entry with the largest key not
    /// past the epoch.
    pub fn batch_for_epoch(&self, epoch: usize) -> usize {
        *self
            .batch_schedule
            .range(..=epoch)
            .next_back()
            .map(|(_, b)| b)
            .expect("validated: epoch 0 present")
    }

    /// Learning rate for an epoch: base rate over the latest divisor.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let div = self
            .lr_divisors
            .range(..=epoch)
            .next_back()
            .map(|(_, d)| *d)
            .unwrap_or(1.0);
        self.learning_rate / div
    }

    /// Updates for an epoch: an explicit override, or
    /// `round(updates_base · (b₁/bₑ)^0.3)` so larger batches take fewer
    /// updates.
    pub fn updates_for_epoch(&self, epoch: usize) -> usize {
        if let Some(list) = &self.updates_per_epoch {
            return list[epoch];
        }
        let b1 = self.batch_for_epoch(0) as f64;
        let be = self.batch_for_epoch(epoch) as f64;
        (self.updates_base as f64 * (b1 / be).powf(0.3)).round() as usize
    }

    /// Warmup steps before loss accrues.
    pub fn warmup_for(&self, net: &NetworkConfig) -> usize {
        self.warmup_steps.unwrap_or_else(|| net.max_dilation())
    }
}

/// Per-step mean pinball loss of a forecast column against its target.
///
/// `q·(y−ŷ)` above the forecast, `(q−1)·(y−ŷ)` below it.
pub fn pinball(y: f64, y_hat: f64, q: f64) -> f64 {
    let d = y - y_hat;
    if d >= 0.0 {
        q * d
    } else {
        (q - 1.0) * d
    }
}

/// A member's standing once its confidence rank is compared with its
/// accuracy rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Standing {
    Matched,
    Overconfident,
    Underconfident,
}

/// 1-based ranks per member: `confidence[k] = 1` marks the most confident
/// member, `accuracy[k] = 1` the lowest pinball loss.  Ties go to the lower
/// member index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTable {
    pub confidence: Vec<usize>,
    pub accuracy: Vec<usize>,
}

impl RankTable {
    /// Overconfident when the confidence rank is better (smaller) than the
    /// accuracy rank; underconfident when worse; matched when equal.
    pub fn standing(&self, member: usize) -> Standing {
        match self.confidence[member].cmp(&self.accuracy[member]) {
            std::cmp::Ordering::Equal => Standing::Matched,
            std::cmp::Ordering::Less => Standing::Overconfident,
            std::cmp::Ordering::Greater => Standing::Underconfident,
        }
    }
}

/// Ranks members by confidence (descending) and pinball loss (ascending).
pub fn rank_members(confidences: &[f64], losses: &[f64]) -> RankTable {
    assert_eq!(confidences.len(), losses.len());
    let n = confidences.len();
    let mut by_conf: Vec<usize> = (0..n).collect();
    by_conf.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    let mut by_loss: Vec<usize> = (0..n).collect();
    by_loss.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut confidence = vec![0; n];
    let mut accuracy = vec![0; n];
    for (rank, &m) in by_conf.iter().enumerate() {
        confidence[m] = rank + 1;
    }
    for (rank, &m) in by_loss.iter().enumerate() {
        accuracy[m] = rank + 1;
    }
    RankTable {
        confidence,
        accuracy,
    }
}

/// A member's loss term: the pinball loss, raised by γ₁·p when the member is
/// overconfident and lowered by γ₁·γ₂·p when underconfident.
pub fn member_loss(l_q: f64, p: f64, standing: Standing, gamma1: f64, gamma2: f64) -> f64 {
    match standing {
        Standing::Matched => l_q,
        Standing::Overconfident => l_q + gamma1 * p,
        Standing::Underconfident => l_q - gamma1 * gamma2 * p,
    }
}

/// Member indices whose terms enter the loss: the top `k` by confidence, or
/// by lowest pinball loss when `by_confidence` is false.  Evaluation always
/// selects by confidence.
pub fn select_members(
    confidences: &[f64],
    losses: &[f64],
    k: usize,
    by_confidence: bool,
) -> Vec<usize> {
    let n = confidences.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if by_confidence {
        idx.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    } else {
        idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    }
    idx.truncate(k);
    idx
}

/// The loss-balancing controllers and their rolling window.
///
/// γ₁ starts at zero (no confidence pressure until evidence accumulates) and
/// γ₂ at one.  The window gathers the selected members' pinball losses, their
/// confidence-term contributions, and the confidence scores of selected
/// overconfident cases; both γs are recomputed from it every
/// `controller_frequency` batches and the window then resets.
#[derive(Debug, Clone)]
pub struct ControllerState {
    gamma1: f64,
    gamma2: f64,
    sum_pinball: f64,
    sum_confidence: f64,
    n_selected: u64,
    sum_overconfident: f64,
    n_overconfident: u64,
}

impl Default for ControllerState {
    fn default() -> Self {
        Self::new()
    }
}

impl ControllerState {
    pub fn new() -> Self {
        ControllerState {
            gamma1: 0.0,
            gamma2: 1.0,
            sum_pinball: 0.0,
            sum_confidence: 0.0,
            n_selected: 0,
            sum_overconfident: 0.0,
            n_overconfident: 0,
        }
    }

    pub fn gamma1(&self) -> f64 {
        self.gamma1
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }

    /// Feeds one update's selected-term statistics into the window.
    pub fn observe(&mut self, stats: &UpdateStats) {
        self.sum_pinball += stats.sum_pinball;
        self.sum_confidence += stats.sum_confidence;
        self.n_selected += stats.selected;
        self.sum_overconfident += stats.sum_overconfident;
        self.n_overconfident += stats.n_overconfident;
    }

    /// Window means `(pinball, confidence-term)` for logging; zeros when the
    /// window is empty.
    pub fn window_means(&self) -> (f64, f64) {
        if self.n_selected == 0 {
            (0.0, 0.0)
        } else {
            (
                self.sum_pinball / self.n_selected as f64,
                self.sum_confidence / self.n_selected as f64,
            )
        }
    }

    /// Recomputes both γs from the window and resets it.  γ₂ moves first so
    /// the ratio rule sees γ₁ as it stood during the window; γ₁ then becomes
    /// L̄_q/(r·p̄⁺), unchanged when the window held no overconfident case.
    pub fn recompute(&mut self, cfg: &TrainConfig) {
        let lbar = if self.n_selected == 0 {
            0.0
        } else {
            self.sum_pinball / self.n_selected as f64
        };
        let pbar = if self.n_overconfident == 0 {
            0.0
        } else {
            self.sum_overconfident / self.n_overconfident as f64
        };
        let direction = match cfg.gamma2_rule {
            Gamma2Rule::Literal => sign(lbar),
            Gamma2Rule::Ratio => {
                let v = lbar / (self.gamma1 * pbar) - cfg.losses_ratio;
                if v.is_nan() {
                    0.0
                } else {
                    sign(v)
                }
            }
        };
        self.gamma2 += direction * cfg.controller_constant;
        if self.n_overconfident > 0 {
            self.gamma1 = lbar / (cfg.losses_ratio * pbar);
        }
        self.sum_pinball = 0.0;
        self.sum_confidence = 0.0;
        self.n_selected = 0;
        self.sum_overconfident = 0.0;
        self.n_overconfident = 0;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Scalar outcomes of one update.
///
/// `loss` and `mean_pinball` are read off the same graph accumulation, so
/// when every selected member is rank-matched the two are exactly equal.
#[derive(Debug, Clone)]
pub struct UpdateStats {
    pub loss: f64,
    pub mean_pinball: f64,
    pub mean_confidence: f64,
    /// Selected member-terms in this update (valid columns only).
    pub selected: u64,
    pub sum_pinball: f64,
    pub sum_confidence: f64,
    pub sum_overconfident: f64,
    pub n_overconfident: u64,
    /// How often each member was selected, indexed `[subrange][member]`.
    pub selected_counts: Vec<Vec<u64>>,
}

struct BuiltUpdate {
    tape: Tape,
    leaves: Vec<Var>,
    loss: Var,
    stats: UpdateStats,
    /// FNV-1a fingerprint of every (step, subrange, member, column, standing)
    /// selection event; two builds with equal fingerprints assembled the loss
    /// from the same member terms with the same coefficients.
    selection: u64,
}

fn fnv_mix(mut h: u64, vals: &[u64]) -> u64 {
    for &v in vals {
        h = (h ^ v).wrapping_mul(0x100000001b3);
    }
    h
}

/// Builds one update's full loss graph: warmup steps, `T` unrolled loss
/// steps, per-(series, step) ranking and top-K selection, and the masked
/// loss assembly in which deselected member-terms never connect to the loss.
fn build_update(
    model: &Model,
    panel: &Panel,
    batch: &[usize],
    origin: usize,
    tcfg: &TrainConfig,
    gamma1: f64,
    gamma2: f64,
    rng: &mut ChaCha20Rng,
) -> Result<BuiltUpdate> {
    let cfg = model.config();
    let warmup = tcfg.warmup_for(cfg);
    let t_steps = tcfg.steps_per_update;
    if origin < cfg.input_days + warmup {
        return Err(Error::Data(format!(
            "update origin day {origin} leaves no room for {warmup} warmup steps over \
             {}-day windows",
            cfg.input_days
        )));
    }
    let b = batch.len();
    let n_subs = model.subranges().len();
    let members = cfg.members();
    let k_sel = cfg.selected();

    // Draw the selection criterion for this update, then one level per
    // (team, series) held fixed across the unrolled steps.
    let by_confidence = rng.gen_bool(tcfg.criterion_probability);
    let mut q_vals = vec![vec![0.0; b]; n_subs];
    let mut q_rows = Vec::with_capacity(n_subs);
    for (s, range) in model.subranges().ranges().iter().enumerate() {
        for col in 0..b {
            q_vals[s][col] = sample_train_level(rng, tcfg.beta_shape, *range)?;
        }
        q_rows.push(Tensor::matrix(1, b, q_vals[s].clone())?);
    }

    let mut tape = Tape::new();
    let leaves: Vec<Var> = model
        .store()
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect();
    let vars = model.vars_from(&leaves);
    let mut run = ModelRun::with_vars(model, vars);

    for o in (origin - warmup)..origin {
        let sb = StepBatch::assemble(panel, cfg, batch, o)?;
        run.step(&mut tape, &sb, &q_rows)?;
    }

    let h_len = cfg.horizon_len();
    let avg_row = tape.constant(Tensor::filled(&[1, h_len], 1.0 / h_len as f64));
    // Per-team level tiles [h_len, B] and their complements for the pinball
    // assembly; constants shared across all steps.
    let mut q_tiles = Vec::with_capacity(n_subs);
    let mut q_tiles_inv = Vec::with_capacity(n_subs);
    for s in 0..n_subs {
        let mut tile = vec![0.0; h_len * b];
        let mut inv = vec![0.0; h_len * b];
        for r in 0..h_len {
            for c in 0..b {
                tile[r * b + c] = q_vals[s][c];
                inv[r * b + c] = 1.0 - q_vals[s][c];
            }
        }
        q_tiles.push(tape.constant(Tensor::matrix(h_len, b, tile)?));
        q_tiles_inv.push(tape.constant(Tensor::matrix(h_len, b, inv)?));
    }

    let mut loss_total: Option<Var> = None;
    let mut pin_total: Option<Var> = None;
    let mut count: u64 = 0;
    let mut sum_pinball = 0.0;
    let mut sum_confidence = 0.0;
    let mut sum_overconfident = 0.0;
    let mut n_overconfident: u64 = 0;
    let mut selected_counts = vec![vec![0u64; members]; n_subs];
    let mut selection: u64 = 0xcbf29ce484222325;

    for o in origin..origin + t_steps {
        let sb = StepBatch::assemble(panel, cfg, batch, o)?;
        let (targets, valid) = normalized_targets(panel, cfg, batch, o)?;
        let y_const = tape.constant(targets);
        let out = run.step(&mut tape, &sb, &q_rows)?;

        for s in 0..n_subs {
            // Per-member mean pinball rows [1, B], kept on the graph.
            let mut p_vars = Vec::with_capacity(members);
            for mem in 0..members {
                let f = &out.forecasts[s][mem];
                let neg_f = tape.scale(f, -1.0);
                let diff = tape.add(&y_const, &neg_f)?;
                let above = tape.leaky_relu(&diff, 0.0);
                let neg_diff = tape.scale(&diff, -1.0);
                let below = tape.leaky_relu(&neg_diff, 0.0);
                let upper = tape.hadamard(&q_tiles[s], &above)?;
                let lower = tape.hadamard(&q_tiles_inv[s], &below)?;
                let term = tape.add(&upper, &lower)?;
                p_vars.push(tape.matmul(&avg_row, &term)?);
            }

            // Rank, select, and record the mask rows per member.
            let mut sel_rows = vec![vec![0.0; b]; members];
            let mut coef_rows = vec![vec![0.0; b]; members];
            for col in 0..b {
                if !valid[col] {
                    continue;
                }
                let confs: Vec<f64> = (0..members)
                    .map(|mem| tape.value(out.confidences[s][mem]).at(0, col))
                    .collect();
                let pins: Vec<f64> = (0..members)
                    .map(|mem| tape.value(p_vars[mem]).at(0, col))
                    .collect();
                if let Some(mem) = (0..members)
                    .find(|&mem| !pins[mem].is_finite() || !confs[mem].is_finite())
                {
                    return Err(Error::Numeric(format!(
                        "non-finite loss for series {} at origin day {o} (level {:.6}, \
                         subrange {s}, member {mem})",
                        panel.regions()[batch[col]],
                        q_vals[s][col]
                    )));
                }
                let table = rank_members(&confs, &pins);
                for &mem in &select_members(&confs, &pins, k_sel, by_confidence) {
                    sel_rows[mem][col] = 1.0;
                    let standing = table.standing(mem);
                    let coef = match standing {
                        Standing::Matched => 0.0,
                        Standing::Overconfident => gamma1,
                        Standing::Underconfident => -gamma1 * gamma2,
                    };
                    coef_rows[mem][col] = coef;
                    let standing_code = match standing {
                        Standing::Matched => 0u64,
                        Standing::Overconfident => 1,
                        Standing::Underconfident => 2,
                    };
                    selection = fnv_mix(
                        selection,
                        &[o as u64, s as u64, mem as u64, col as u64, standing_code],
                    );
                    count += 1;
                    selected_counts[s][mem] += 1;
                    sum_pinball += pins[mem];
                    sum_confidence += coef * confs[mem];
                    if standing == Standing::Overconfident {
                        sum_overconfident += confs[mem];
                        n_overconfident += 1;
                    }
                }
            }

            // Masked loss assembly; members never selected at this step add
            // no nodes, so their outputs stay disconnected from the loss.
            for mem in 0..members {
                if sel_rows[mem].iter().all(|&v| v == 0.0) {
                    continue;
                }
                let sel = tape.constant(Tensor::matrix(1, b, sel_rows[mem].clone())?);
                let coef = tape.constant(Tensor::matrix(1, b, coef_rows[mem].clone())?);
                let conf_part = tape.hadamard(&coef, &out.confidences[s][mem])?;
                let term = tape.add(&p_vars[mem], &conf_part)?;
                let picked = tape.hadamard(&sel, &term)?;
                let contrib = tape.sum(&picked);
                loss_total = Some(match loss_total {
                    Some(acc) => tape.add(&acc, &contrib)?,
                    None => contrib,
                });
                let pin_picked = tape.hadamard(&sel, &p_vars[mem])?;
                let pin_contrib = tape.sum(&pin_picked);
                pin_total = Some(match pin_total {
                    Some(acc) => tape.add(&acc, &pin_contrib)?,
                    None => pin_contrib,
                });
            }
        }
    }

    let (Some(loss_total), Some(pin_total)) = (loss_total, pin_total) else {
        return Err(Error::Data(
            "every batch series had an all-zero input window; nothing to train on".into(),
        ));
    };
    let scale = 1.0 / count as f64;
    let loss = tape.scale(&loss_total, scale);
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss ({loss_value}) at origin day {origin}"
        )));
    }
    let mean_pinball = tape.value(pin_total).item() * scale;
    let stats = UpdateStats {
        loss: loss_value,
        mean_pinball,
        mean_confidence: if count == 0 {
            0.0
        } else {
            sum_confidence / count as f64
        },
        selected: count,
        sum_pinball,
        sum_confidence,
        sum_overconfident,
        n_overconfident,
        selected_counts,
    };
    Ok(BuiltUpdate {
        tape,
        leaves,
        loss,
        stats,
        selection,
    })
}

/// One update's loss surface, probed without touching the model: the loss
/// value, analytic gradients in parameter-store order, the update's summary
/// statistics, and the selection fingerprint.  Probing twice with the same
/// seed draws the same criterion and levels, so two probes whose
/// fingerprints agree evaluated the same branch of the piecewise loss —
/// the precondition for comparing gradients against finite differences.
#[derive(Debug)]
pub struct UpdateProbe {
    pub loss: f64,
    /// One gradient tensor per parameter tensor, in store order; parameters
    /// the loss never touched get all-zero gradients.
    pub grads: Vec<Tensor>,
    pub stats: UpdateStats,
    /// Fingerprint of every (step, subrange, member, series, standing)
    /// selection event in this update.
    pub selection: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn probe_update(
    model: &Model,
    panel: &Panel,
    batch: &[usize],
    origin: usize,
    tcfg: &TrainConfig,
    gamma1: f64,
    gamma2: f64,
    seed: u64,
) -> Result<UpdateProbe> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let built = build_update(model, panel, batch, origin, tcfg, gamma1, gamma2, &mut rng)?;
    let grads = built.tape.backward(built.loss)?;
    let grads = built
        .leaves
        .iter()
        .map(|&leaf| grads.wrt_or_zero(&built.tape, leaf))
        .collect();
    Ok(UpdateProbe {
        loss: built.stats.loss,
        grads,
        stats: built.stats,
        selection: built.selection,
    })
}

/// One full training update: builds the loss graph, backpropagates, applies
/// one Adam step (per-series adapters at their learning-rate multiplier),
/// and feeds the controller window.  Parameters whose gradient is exactly
/// zero — deselected members, adapters of out-of-batch series — are left
/// bitwise unchanged by the optimizer.
#[allow(clippy::too_many_arguments)]
pub fn train_update(
    model: &mut Model,
    panel: &Panel,
    batch: &[usize],
    origin: usize,
    tcfg: &TrainConfig,
    ctl: &mut ControllerState,
    adam: &mut AdamState,
    lr: f64,
    rng: &mut ChaCha20Rng,
) -> Result<UpdateStats> {
    let built = build_update(
        model,
        panel,
        batch,
        origin,
        tcfg,
        ctl.gamma1(),
        ctl.gamma2(),
        rng,
    )?;
    let grads = built.tape.backward(built.loss)?;
    let grad_tensors: Vec<Tensor> = built
        .leaves
        .iter()
        .map(|&leaf| grads.wrt_or_zero(&built.tape, leaf))
        .collect();
    let lrs: Vec<f64> = model
        .store()
        .series_tags()
        .iter()
        .map(|tag| {
            if tag.is_some() {
                lr * tcfg.adapter_lr_multiplier
            } else {
                lr
            }
        })
        .collect();
    adam.step(model.store_mut().tensors_mut(), &grad_tensors, &lrs)?;
    ctl.observe(&built.stats);
    Ok(built.stats)
}

/// Admissible first-loss origins for training rollouts: the earliest warmup
/// step's input window and the last loss step's targets must both lie inside
/// the training day range.
pub fn admissible_origins(
    train_days: &Range<usize>,
    cfg: &NetworkConfig,
    tcfg: &TrainConfig,
) -> Range<usize> {
    let lo = train_days.start + cfg.input_days + tcfg.warmup_for(cfg);
    let hi = (train_days.end + 2).saturating_sub(cfg.horizon_days + tcfg.steps_per_update);
    lo..hi.max(lo)
}

/// Trains a fresh model on the training day range of `panel`.
///
/// `log` receives one tab-separated line per controller window: batch index,
/// mean pinball, mean confidence loss, γ₁, γ₂, learning rate, batch size.
pub fn fit(
    panel: &Panel,
    train_days: Range<usize>,
    net_cfg: NetworkConfig,
    tcfg: &TrainConfig,
    mut log: impl FnMut(&str),
) -> Result<Model> {
    tcfg.validate()?;
    net_cfg.validate()?;
    if train_days.end > panel.days() {
        return Err(Error::Data(format!(
            "training range ends at day {} but the panel has {} days",
            train_days.end,
            panel.days()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(tcfg.seed);
    let mut model = Model::new(net_cfg, panel.regions().to_vec(), &mut rng)?;
    let origins = admissible_origins(&train_days, model.config(), tcfg);
    if origins.is_empty() {
        let needed = model.config().input_days
            + tcfg.warmup_for(model.config())
            + tcfg.steps_per_update
            + model.config().horizon_days
            - 1;
        return Err(Error::Config(format!(
            "training range of {} days cannot fit a rollout needing {needed} days",
            train_days.len()
        )));
    }

    let n_series = panel.regions().len();
    let mut adam = AdamState::for_tensors(model.store().tensors(), AdamParams::default());
    let mut ctl = ControllerState::new();
    let mut batch_index: u64 = 0;
    for epoch in 0..tcfg.epochs {
        let bsz = tcfg.batch_for_epoch(epoch).min(n_series);
        let lr = tcfg.lr_for_epoch(epoch);
        for _ in 0..tcfg.updates_for_epoch(epoch) {
            batch_index += 1;
            let mut batch = rand::seq::index::sample(&mut rng, n_series, bsz).into_vec();
            batch.sort_unstable();
            let origin = rng.gen_range(origins.start..origins.end);
            train_update(
                &mut model, panel, &batch, origin, tcfg, &mut ctl, &mut adam, lr, &mut rng,
            )?;
            if batch_index % tcfg.controller_frequency as u64 == 0 {
                let (pin, conf) = ctl.window_means();
                ctl.recompute(tcfg);
                log(&format!(
                    "{batch_index}\t{pin:.6}\t{conf:.6}\t{:.6}\t{:.6}\t{lr:.6}\t{bsz}",
                    ctl.gamma1(),
                    ctl.gamma2()
                ));
            }
        }
    }
    Ok(model)
}
