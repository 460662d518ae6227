//! Model structure: configuration, parameter store, and the dual-track
//! forecasting network (context track + quantile-conditioned primary teams).
//!
//! A model owns every trainable tensor in a flat, name-addressed store so the
//! optimizer, the serializer, and the autodiff binding all see parameters in
//! one canonical order.  The structural index types ([`LinearIdx`], [`NetIdx`])
//! hold positions into that store rather than tensors, which keeps the store
//! contiguous and lets executors bind the whole model in a single pass.

mod forecast;
mod run;

pub use forecast::{
    forecast_range, infer_quantile, median, write_forecast_csv, ForecastBundle, OriginForecast,
};
pub use run::{
    normalized_targets, LinearVars, ModelRun, ModelVars, NetVars, RunState, StepBatch,
    StepInputs, StepOutput, TrackState,
};

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cells::{uniform_bias, uniform_matrix, Cell, Gate};
use crate::quantile::SubrangeSpec;
use crate::{Error, Result};

/// Number of weekly columns in the date embedding (ISO weeks, week 53 folded
/// into week 52).
pub const WEEKS: usize = 52;

/// Magic bytes at the start of a serialized model file.
pub const MODEL_MAGIC: &[u8; 4] = b"AQRN";

/// Serialized model format version.
pub const MODEL_VERSION: u16 = 1;

fn default_input_days() -> usize {
    4
}
fn default_horizon_days() -> usize {
    2
}
fn default_resolution() -> usize {
    24
}
fn default_dilations() -> Vec<Vec<usize>> {
    vec![vec![2], vec![4], vec![8]]
}
fn default_hidden() -> usize {
    5
}
fn default_patch_context() -> usize {
    5
}
fn default_per_series_context() -> usize {
    2
}
fn default_embedded_context() -> usize {
    10
}
fn default_date_embedding() -> usize {
    3
}
fn default_top_k() -> usize {
    3
}
fn default_team_size() -> usize {
    4
}
fn default_knots() -> Vec<f64> {
    vec![0.2, 0.6]
}
fn default_half_overlap() -> f64 {
    0.1
}
fn default_leaky_slope() -> f64 {
    0.01
}

/// Architecture hyperparameters.
///
/// The defaults reproduce the reference configuration; the boolean switches
/// disable individual mechanisms for ablation studies.  `primary_padding`
/// and `context_padding` record the sampled repeat-padding indices so that a
/// saved model reconstructs its exact input layout; they are `None` until the
/// model is instantiated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Input window length in days (`m`).
    pub input_days: usize,
    /// Forecast horizon in days (`h`).
    pub horizon_days: usize,
    /// Values per day; the panel is hourly, so this is 24.
    pub resolution: usize,
    /// Dilation blocks; flattened into one recurrent layer per entry.
    pub dilations: Vec<Vec<usize>>,
    /// Memory rows per cell (`H`).
    pub hidden: usize,
    /// Width of the shared per-layer mixing vector handed to each stream.
    pub patch_context: usize,
    /// Context-head output rows per series.
    pub per_series_context: usize,
    /// Rows of the adapted context vector fed to the primary track.
    pub embedded_context: usize,
    /// Rows of the learned week-of-year embedding.
    pub date_embedding: usize,
    /// Members whose forecasts are kept per series and step.
    pub top_k: usize,
    /// Networks per quantile subrange team.
    pub team_size: usize,
    /// Interior quantile knots; each spawns a subrange of width `2 * half_overlap`
    /// around it plus the flanks.
    pub knots: Vec<f64>,
    /// Half-width of the overlap region around each knot.
    pub half_overlap: f64,
    /// Negative-side slope of the forecast activation.
    pub leaky_slope: f64,
    /// Ablation: drop the context track entirely (adapted context is zero).
    pub no_context: bool,
    /// Ablation: drop the global context adapter.
    pub no_global_adapter: bool,
    /// Ablation: drop the per-series context adapters.
    pub no_per_series_adapter: bool,
    /// Ablation: per-series adapters compose with (instead of adding to) the
    /// global adapter.
    pub sequential_adapters: bool,
    /// Ablation: feed the window as one wide stream instead of daily patches.
    pub no_patches: bool,
    /// Ablation: one network per subrange instead of a ranked team.
    pub no_teams: bool,
    /// Ablation: a single network team covers all of (0, 1).
    pub no_subranges: bool,
    /// Sampled repeat-padding source indices for the primary auxiliary input.
    pub primary_padding: Option<Vec<usize>>,
    /// Sampled repeat-padding source indices for the context auxiliary input.
    pub context_padding: Option<Vec<usize>>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_days: default_input_days(),
            horizon_days: default_horizon_days(),
            resolution: default_resolution(),
            dilations: default_dilations(),
            hidden: default_hidden(),
            patch_context: default_patch_context(),
            per_series_context: default_per_series_context(),
            embedded_context: default_embedded_context(),
            date_embedding: default_date_embedding(),
            top_k: default_top_k(),
            team_size: default_team_size(),
            knots: default_knots(),
            half_overlap: default_half_overlap(),
            leaky_slope: default_leaky_slope(),
            no_context: false,
            no_global_adapter: false,
            no_per_series_adapter: false,
            sequential_adapters: false,
            no_patches: false,
            no_teams: false,
            no_subranges: false,
            primary_padding: None,
            context_padding: None,
        }
    }
}

impl NetworkConfig {
    /// Checks internal consistency; every constructor goes through this.
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(Error::Config(why));
        if self.resolution != crate::dataset::HOURS_PER_DAY {
            return bad(format!(
                "resolution must be {} (hourly panel), got {}",
                crate::dataset::HOURS_PER_DAY,
                self.resolution
            ));
        }
        if self.input_days == 0 || self.horizon_days == 0 {
            return bad("input_days and horizon_days must be at least 1".into());
        }
        if self.hidden == 0 || self.patch_context == 0 {
            return bad("hidden and patch_context must be at least 1".into());
        }
        if self.per_series_context == 0 || self.embedded_context == 0 || self.date_embedding == 0 {
            return bad(
                "per_series_context, embedded_context, and date_embedding must be at least 1"
                    .into(),
            );
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|b| b.is_empty()) {
            return bad("dilations must contain at least one non-empty block".into());
        }
        if self.layer_dilations().iter().any(|&d| d == 0) {
            return bad("dilations must all be at least 1".into());
        }
        if self.team_size == 0 {
            return bad("team_size must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.team_size {
            return bad(format!(
                "top_k must be in 1..={} (team_size), got {}",
                self.team_size, self.top_k
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!(
                "leaky_slope must be finite and non-negative, got {}",
                self.leaky_slope
            ));
        }
        if self.sequential_adapters && (self.no_global_adapter || self.no_per_series_adapter) {
            return bad(
                "sequential_adapters needs both the global and the per-series adapters enabled"
                    .into(),
            );
        }
        // The auxiliary stream must fit its components inside one patch width.
        if self.primary_stack_len() > self.resolution {
            return bad(format!(
                "auxiliary components need {} rows but a patch has only {}; shrink \
                 embedded_context or date_embedding",
                self.primary_stack_len(),
                self.resolution
            ));
        }
        if self.context_stack_len() > self.resolution {
            return bad(format!(
                "context auxiliary components need {} rows but a patch has only {}",
                self.context_stack_len(),
                self.resolution
            ));
        }
        if let Some(p) = &self.primary_padding {
            if p.len() != self.primary_pad_len()
                || p.iter().any(|&i| i >= self.primary_stack_len())
            {
                return bad("primary_padding does not match the configured layout".into());
            }
        }
        if let Some(p) = &self.context_padding {
            if p.len() != self.context_pad_len()
                || p.iter().any(|&i| i >= self.context_stack_len())
            {
                return bad("context_padding does not match the configured layout".into());
            }
        }
        // Knot geometry is validated by the subrange constructor.
        self.subranges().map(|_| ())
    }

    /// Quantile subranges implied by the knots, or the single full range when
    /// the subrange mechanism is ablated.
    pub fn subranges(&self) -> Result<SubrangeSpec> {
        if self.no_subranges {
            SubrangeSpec::new(&[], self.half_overlap)
        } else {
            SubrangeSpec::new(&self.knots, self.half_overlap)
        }
    }

    /// Networks per subrange team after ablation switches.
    pub fn members(&self) -> usize {
        if self.no_teams {
            1
        } else {
            self.team_size
        }
    }

    /// Forecasts kept per series and step after ablation switches.
    pub fn selected(&self) -> usize {
        if self.no_teams {
            1
        } else {
            self.top_k
        }
    }

    /// Dilations flattened into one entry per recurrent layer.
    pub fn layer_dilations(&self) -> Vec<usize> {
        self.dilations.iter().flatten().copied().collect()
    }

    /// Largest dilation; determines the warm-up length before forecasts.
    pub fn max_dilation(&self) -> usize {
        self.layer_dilations().into_iter().max().unwrap_or(1)
    }

    /// Forecast length in values.
    pub fn horizon_len(&self) -> usize {
        self.horizon_days * self.resolution
    }

    /// Input window length in values.
    pub fn window_len(&self) -> usize {
        self.input_days * self.resolution
    }

    /// Widths of the layer-zero streams, auxiliary stream first.
    pub fn stream_widths(&self) -> Vec<usize> {
        let u = self.resolution;
        let mut widths = vec![u];
        if self.no_patches {
            widths.push(self.input_days * u);
        } else {
            widths.extend(std::iter::repeat(u).take(self.input_days));
        }
        widths
    }

    /// Number of parallel streams (auxiliary + data).
    pub fn n_streams(&self) -> usize {
        self.stream_widths().len()
    }

    /// Rows of the primary auxiliary components before repeat padding:
    /// quantile, adapted context, window level, date embedding.
    pub fn primary_stack_len(&self) -> usize {
        1 + self.embedded_context + 1 + self.date_embedding
    }

    /// Repeat-padding rows appended to the primary auxiliary stack.
    pub fn primary_pad_len(&self) -> usize {
        self.resolution - self.primary_stack_len()
    }

    /// Rows of the context auxiliary components before repeat padding:
    /// window level, date embedding.
    pub fn context_stack_len(&self) -> usize {
        1 + self.date_embedding
    }

    /// Repeat-padding rows appended to the context auxiliary stack.
    pub fn context_pad_len(&self) -> usize {
        self.resolution - self.context_stack_len()
    }

    /// Cell input width for the primary track at a given layer.
    fn primary_cell_input(&self, stream_width: usize) -> usize {
        stream_width + self.patch_context + 1
    }

    /// Cell input width for the context track at a given layer.
    fn context_cell_input(&self, stream_width: usize) -> usize {
        stream_width + self.patch_context
    }
}

/// Index of a parameter tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Flat, name-addressed collection of every trainable tensor in a model.
///
/// Order is the creation order and is part of the serialized format.  The
/// optional series tag marks per-series adapter parameters so training can
/// apply their learning-rate multiplier.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    series: Vec<Option<usize>>,
}

impl ParamStore {
    fn add(&mut self, name: String, tensor: Tensor, series: Option<usize>) -> ParamId {
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        self.series.push(series);
        self.names.len() - 1
    }

    /// Number of parameter tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    /// True when the store holds no tensors.
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Canonical parameter names, aligned with [`ParamStore::tensors`].
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// All tensors in creation order.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mutable view used by the optimizer.
    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Which series a parameter belongs to, for per-series adapters.
    pub fn series_tags(&self) -> &[Option<usize>] {
        &self.series
    }

    /// Tensor by id.
    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    /// Look a parameter up by its canonical name.
    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }
}

/// Store positions of one affine map.
#[derive(Debug, Clone)]
pub struct LinearIdx {
    pub w: ParamId,
    pub b: ParamId,
}

/// Store positions of one recurrent network: per-layer mixing maps, the cell
/// grid (`cells[layer][stream]`), and the output head.
#[derive(Debug, Clone)]
pub struct NetIdx {
    pub mixes: Vec<LinearIdx>,
    pub cells: Vec<Vec<Cell<ParamId>>>,
    pub head: LinearIdx,
}

enum Init<'r> {
    Random(&'r mut dyn rand::RngCore),
    Zeros,
}

impl Init<'_> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        match self {
            Init::Random(rng) => uniform_matrix(rows, cols, rng),
            Init::Zeros => Tensor::zeros(&[rows, cols]),
        }
    }

    fn bias(&mut self, rows: usize, fanin: usize) -> Tensor {
        match self {
            Init::Random(rng) => uniform_bias(rows, fanin, rng),
            Init::Zeros => Tensor::zeros(&[rows, 1]),
        }
    }

    fn cell(&mut self, input_dim: usize, hidden: usize, out: usize) -> Cell<Tensor> {
        match self {
            Init::Random(rng) => Cell::init(input_dim, hidden, out, rng),
            Init::Zeros => {
                let gate = |rows: usize| Gate {
                    w: Tensor::zeros(&[rows, input_dim]),
                    v: Tensor::zeros(&[rows, hidden]),
                    u: Tensor::zeros(&[rows, hidden]),
                    b: Tensor::zeros(&[rows, 1]),
                };
                Cell {
                    f: gate(hidden + out),
                    i: gate(hidden + out),
                    g: gate(hidden + out),
                    o: gate(hidden),
                }
            }
        }
    }
}

/// A complete model: configuration, the region list it was built for, and all
/// parameters plus the structural indices that give them meaning.
#[derive(Debug, Clone)]
pub struct Model {
    config: NetworkConfig,
    regions: Vec<String>,
    store: ParamStore,
    pub(crate) date_map: ParamId,
    pub(crate) context: Option<NetIdx>,
    pub(crate) global_adapter: Option<LinearIdx>,
    pub(crate) series_adapters: Vec<LinearIdx>,
    pub(crate) primaries: Vec<Vec<NetIdx>>,
    pub(crate) subranges: SubrangeSpec,
}

impl Model {
    /// Builds a freshly initialized model for the given regions.  Repeat
    /// padding indices are sampled here (unless the config already pins them)
    /// and recorded in the returned model's config.
    pub fn new<R: Rng>(config: NetworkConfig, regions: Vec<String>, rng: &mut R) -> Result<Model> {
        let mut config = config;
        config.validate()?;
        if regions.is_empty() {
            return Err(Error::Config("a model needs at least one region".into()));
        }
        if config.primary_padding.is_none() {
            let n = config.primary_stack_len();
            config.primary_padding = Some(
                (0..config.primary_pad_len())
                    .map(|_| rng.gen_range(0..n))
                    .collect(),
            );
        }
        if config.context_padding.is_none() {
            let n = config.context_stack_len();
            config.context_padding = Some(
                (0..config.context_pad_len())
                    .map(|_| rng.gen_range(0..n))
                    .collect(),
            );
        }
        config.validate()?;
        Self::build(config, regions, Init::Random(rng))
    }

    /// Builds a model with every parameter at zero; used as the skeleton when
    /// loading from disk.  Requires the padding indices to be pinned already.
    fn zeros(config: NetworkConfig, regions: Vec<String>) -> Result<Model> {
        config.validate()?;
        if config.primary_padding.is_none() || config.context_padding.is_none() {
            return Err(Error::Config(
                "a zero-initialized model needs pinned padding indices".into(),
            ));
        }
        Self::build(config, regions, Init::Zeros)
    }

    fn build(config: NetworkConfig, regions: Vec<String>, mut init: Init) -> Result<Model> {
        let mut store = ParamStore::default();
        let u = config.resolution;
        let subranges = config.subranges()?;

        let date_map = store.add(
            "date_map".into(),
            init.matrix(config.date_embedding, WEEKS),
            None,
        );

        let build_net = |store: &mut ParamStore,
                         init: &mut Init,
                         prefix: &str,
                         with_q: bool,
                         head_rows: usize,
                         head_extra: usize|
         -> NetIdx {
            let widths = config.stream_widths();
            let n_streams = widths.len();
            let dils = config.layer_dilations();
            let mut mixes = Vec::with_capacity(dils.len());
            let mut cells = Vec::with_capacity(dils.len());
            for (l, _d) in dils.iter().enumerate() {
                // Every layer above the first sees one u-row output per stream.
                let layer_widths: Vec<usize> = if l == 0 {
                    widths.clone()
                } else {
                    vec![u; n_streams]
                };
                let total: usize = layer_widths.iter().sum();
                let mix_rows = n_streams * config.patch_context;
                let w = store.add(
                    format!("{prefix}layer{l}.mix.w"),
                    init.matrix(mix_rows, total),
                    None,
                );
                let b = store.add(
                    format!("{prefix}layer{l}.mix.b"),
                    init.bias(mix_rows, total),
                    None,
                );
                mixes.push(LinearIdx { w, b });
                let mut row = Vec::with_capacity(n_streams);
                for (s, &width) in layer_widths.iter().enumerate() {
                    let input_dim = if with_q {
                        config.primary_cell_input(width)
                    } else {
                        config.context_cell_input(width)
                    };
                    let cell_t = init.cell(input_dim, config.hidden, u);
                    let cell_prefix = format!("{prefix}layer{l}.stream{s}");
                    let mut ids = Vec::with_capacity(16);
                    cell_t.visit(&mut |name, t: &Tensor| {
                        ids.push(store.add(format!("{cell_prefix}.{name}"), t.clone(), None));
                    });
                    // visit order is f.w f.v f.u f.b, i..., g..., o...
                    let gate = |at: usize| Gate {
                        w: ids[at],
                        v: ids[at + 1],
                        u: ids[at + 2],
                        b: ids[at + 3],
                    };
                    row.push(Cell {
                        f: gate(0),
                        i: gate(4),
                        g: gate(8),
                        o: gate(12),
                    });
                }
                cells.push(row);
            }
            let feat = n_streams * u + head_extra;
            let w = store.add(
                format!("{prefix}head.w"),
                init.matrix(head_rows, feat),
                None,
            );
            let b = store.add(format!("{prefix}head.b"), init.bias(head_rows, feat), None);
            NetIdx {
                mixes,
                cells,
                head: LinearIdx { w, b },
            }
        };

        let context = if config.no_context {
            None
        } else {
            Some(build_net(
                &mut store,
                &mut init,
                "context.",
                false,
                config.per_series_context,
                0,
            ))
        };

        let flat_len = config.per_series_context * regions.len();
        let mut global_adapter = None;
        let mut series_adapters = Vec::new();
        if !config.no_context {
            if !config.no_global_adapter {
                let w = store.add(
                    "adapter.global.w".into(),
                    init.matrix(config.embedded_context, flat_len),
                    None,
                );
                let b = store.add(
                    "adapter.global.b".into(),
                    init.bias(config.embedded_context, flat_len),
                    None,
                );
                global_adapter = Some(LinearIdx { w, b });
            }
            if !config.no_per_series_adapter {
                // Sequential adapters refine the global output, so they map
                // the embedded width onto itself; parallel adapters read the
                // flat context directly.
                let cols = if config.sequential_adapters {
                    config.embedded_context
                } else {
                    flat_len
                };
                for (i, _) in regions.iter().enumerate() {
                    let w = store.add(
                        format!("adapter.series{i}.w"),
                        init.matrix(config.embedded_context, cols),
                        Some(i),
                    );
                    let b = store.add(
                        format!("adapter.series{i}.b"),
                        init.bias(config.embedded_context, cols),
                        Some(i),
                    );
                    series_adapters.push(LinearIdx { w, b });
                }
            }
        }

        let head_rows = config.horizon_len() + 1;
        let mut primaries = Vec::with_capacity(subranges.len());
        for s in 0..subranges.len() {
            let mut team = Vec::with_capacity(config.members());
            for k in 0..config.members() {
                team.push(build_net(
                    &mut store,
                    &mut init,
                    &format!("sub{s}.mem{k}."),
                    true,
                    head_rows,
                    1,
                ));
            }
            primaries.push(team);
        }

        Ok(Model {
            config,
            regions,
            store,
            date_map,
            context,
            global_adapter,
            series_adapters,
            primaries,
            subranges,
        })
    }

    /// The configuration, with padding indices pinned.
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Region ids, in panel order; per-series adapters index into this list.
    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    /// All parameters in canonical order.
    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Mutable parameter access for the optimizer.
    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Quantile subranges this model's teams cover.
    pub fn subranges(&self) -> &SubrangeSpec {
        &self.subranges
    }

    /// Writes the model to disk: magic, version, a JSON envelope holding the
    /// config and region list, then every tensor in store order as f32 data.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Envelope<'a> {
            config: &'a NetworkConfig,
            regions: &'a [String],
        }
        let env = serde_json::to_vec(&Envelope {
            config: &self.config,
            regions: &self.regions,
        })
        .map_err(|e| Error::Format(format!("model envelope: {e}")))?;

        let mut out = Vec::with_capacity(env.len() + 64 + self.store.scalar_count() * 4);
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(env.len() as u32).to_le_bytes());
        out.extend_from_slice(&env);
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, tensor) in self.store.names().iter().zip(self.store.tensors()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in tensor.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        crate::atomic_write(path, &out)
    }

    /// Reads a model written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path)?;
        let mut r = Cursor::new(&bytes, path);

        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::Format(format!(
                "{}: not a model file (bad magic)",
                path.display()
            )));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported model version {version}",
                path.display()
            )));
        }
        let env_len = r.u32()? as usize;
        let env = r.take(env_len)?;

        #[derive(Deserialize)]
        struct Envelope {
            config: NetworkConfig,
            regions: Vec<String>,
        }
        let env: Envelope = serde_json::from_slice(env)
            .map_err(|e| Error::Format(format!("{}: model envelope: {e}", path.display())))?;

        let mut model = Model::zeros(env.config, env.regions)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;

        let n_tensors = r.u32()? as usize;
        if n_tensors != model.store.len() {
            return Err(Error::Format(format!(
                "{}: file holds {n_tensors} tensors but the config implies {}",
                path.display(),
                model.store.len()
            )));
        }
        for _ in 0..n_tensors {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format(format!("{}: tensor name not UTF-8", path.display())))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw = r.take(4)?;
                data.push(f32::from_le_bytes(raw.try_into().unwrap()) as f64);
            }
            let id = model.store.index_of(&name).ok_or_else(|| {
                Error::Format(format!(
                    "{}: tensor {name} does not exist in the configured model",
                    path.display()
                ))
            })?;
            if model.store.tensor(id).shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{}: tensor {name} has shape {:?} but the config implies {:?}",
                    path.display(),
                    shape,
                    model.store.tensor(id).shape()
                )));
            }
            model.store.tensors[id] = Tensor::new(shape, data)?;
        }
        if !r.at_end() {
            return Err(Error::Format(format!(
                "{}: trailing bytes after the last tensor",
                path.display()
            )));
        }
        Ok(model)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor {
            bytes,
            pos: 0,
            path,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: file truncated at byte {}",
                self.path.display(),
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Column of the week embedding for a date: ISO week, with week 53 folded
/// into 52, shifted to a zero-based index.
pub fn week_index(date: NaiveDate) -> usize {
    (date.iso_week().week().min(52) - 1) as usize
}
