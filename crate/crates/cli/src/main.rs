//! `urope` command-line tool.
//!
//! Exit codes: 0 success, 1 validation or invariant failure, 2 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use urope::attention::{sequence_weights, urope_self_attention, Splitting};
use urope::config::{Precision, RunConfig};
use urope::geometry::project_cross_view_eps;
use urope::io::{diagnostic_files, projection_csv, read_tensor, write_atomic, write_tensor, DiagnosticTarget};
use urope::rope::SamplingKind;
use urope::scene::{gen_scene, Scene, SceneParams};
use urope::selftest::{self, Level};
use urope::{Error, Result};

#[derive(Parser)]
#[command(name = "urope", version, about = "Multiview rotary position encoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic camera rig and patch grid as scene JSON.
    GenScene(GenSceneArgs),
    /// Project one source pixel into another view at every anchor depth.
    Project(ProjectArgs),
    /// Run multiview self-attention over a scene's patch tokens.
    Attn(AttnArgs),
    /// Entropy, dominant-head and bias-heatmap diagnostics.
    Diag(DiagArgs),
    /// Run the built-in invariant and golden-file checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Image size as `W` or `WxH`.
    #[arg(long, default_value = "32", value_parser = parse_size)]
    size: (u32, u32),
    #[arg(long, default_value_t = 8)]
    patch: u32,
    /// Focal lengths are scaled by a factor in [1 - jitter, 1 + jitter].
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Yaw step between neighbouring views, radians.
    #[arg(long, default_value_t = 0.5)]
    spread: f64,
    #[arg(long, default_value_t = 0.1)]
    min_baseline: f64,
    /// Number of random 3D test points to include.
    #[arg(long, default_value_t = 0)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Run-config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rope_base: Option<f64>,
    #[arg(long)]
    per_head_dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    position_scale: Option<f64>,
    #[arg(long, value_enum)]
    anchor_kind: Option<KindArg>,
    #[arg(long)]
    d_min: Option<f64>,
    #[arg(long)]
    d_max: Option<f64>,
    /// Number of depth anchors K.
    #[arg(long)]
    anchors: Option<usize>,
    #[arg(long, value_enum)]
    splitting: Option<SplittingArg>,
    #[arg(long)]
    proj_eps: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    mask_invalid: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    rotate_vo: Option<bool>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Uniform,
    LogUniform,
    Lid,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplittingArg {
    HeadWise,
    ChannelWise,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    src: usize,
    #[arg(long)]
    dst: usize,
    #[arg(long)]
    u: f64,
    #[arg(long)]
    v: f64,
    /// Explicit comma-separated depths instead of the configured schedule.
    #[arg(long, value_delimiter = ',')]
    depths: Option<Vec<f64>>,
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    k: PathBuf,
    #[arg(long)]
    v: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output tensor sidecar path (`.json`; payload goes next to it).
    #[arg(long)]
    out: PathBuf,
    /// Also dump attention weights `(B, H, L, L)` here.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DiagArgs {
    /// Weights dumps, one per layer.
    #[arg(long, required = true, num_args = 1..)]
    weights: Vec<PathBuf>,
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// View whose query tokens enter the statistics and the heatmap.
    #[arg(long, default_value_t = 0)]
    query_view: usize,
    /// Heatmap query patch index within the query view; centre by default.
    #[arg(long)]
    query_patch: Option<usize>,
    /// Heatmap key view; the next view by default.
    #[arg(long)]
    target_view: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(value_enum, default_value = "quick")]
    level: LevelArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Quick,
    Full,
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    let parse = |x: &str| x.trim().parse::<u32>().map_err(|e| format!("bad image size '{s}': {e}"));
    match s.split_once(['x', 'X']) {
        Some((w, h)) => Ok((parse(w)?, parse(h)?)),
        None => {
            let w = parse(s)?;
            Ok((w, w))
        }
    }
}

/// Effective config plus which tensor-derived fields were left unset.
struct Resolved {
    cfg: RunConfig,
    heads_set: bool,
    dim_set: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Resolved> {
        let (mut cfg, file_keys) = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                let keys: Vec<String> = match serde_json::from_str::<Value>(&text)? {
                    Value::Object(m) => m.keys().cloned().collect(),
                    _ => return Err(Error::Format("config file must hold a JSON object".into())),
                };
                let cfg: RunConfig = serde_json::from_str(&text)?;
                (cfg, keys)
            }
            None => (RunConfig::default(), Vec::new()),
        };
        let in_file = |k: &str| file_keys.iter().any(|f| f == k);
        let heads_set = self.heads.is_some() || in_file("heads");
        let dim_set = self.per_head_dim.is_some() || in_file("per_head_dim");
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(x) = $flag {
                    $field = x;
                }
            };
        }
        set!(cfg.rope_base, self.rope_base);
        set!(cfg.per_head_dim, self.per_head_dim);
        set!(cfg.heads, self.heads);
        set!(cfg.position_scale, self.position_scale);
        set!(cfg.anchor.d_min, self.d_min);
        set!(cfg.anchor.d_max, self.d_max);
        set!(cfg.anchor.count, self.anchors);
        set!(cfg.proj_eps, self.proj_eps);
        set!(cfg.mask_invalid, self.mask_invalid);
        set!(cfg.rotate_vo, self.rotate_vo);
        set!(cfg.seed, self.seed);
        if let Some(k) = self.anchor_kind {
            cfg.anchor.kind = match k {
                KindArg::Uniform => SamplingKind::Uniform,
                KindArg::LogUniform => SamplingKind::LogUniform,
                KindArg::Lid => SamplingKind::Lid,
            };
        }
        if let Some(s) = self.splitting {
            cfg.anchor.splitting = match s {
                SplittingArg::HeadWise => Splitting::HeadWise,
                SplittingArg::ChannelWise => Splitting::ChannelWise,
            };
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        Ok(Resolved { cfg, heads_set, dim_set })
    }
}

impl Resolved {
    /// Adopts tensor dims for fields nobody set, then checks agreement.
    fn fit(mut self, heads: usize, dim: Option<usize>) -> Result<RunConfig> {
        if !self.heads_set {
            self.cfg.heads = heads;
        }
        if let Some(d) = dim {
            if !self.dim_set {
                self.cfg.per_head_dim = d;
            }
        }
        if self.cfg.heads != heads {
            return Err(Error::ShapeMismatch(format!(
                "config has {} heads but the tensors have {heads}",
                self.cfg.heads
            )));
        }
        if let Some(d) = dim {
            if self.cfg.per_head_dim != d {
                return Err(Error::ShapeMismatch(format!(
                    "config per-head dim {} but the tensors have {d}",
                    self.cfg.per_head_dim
                )));
            }
        }
        self.cfg.validate()?;
        Ok(self.cfg)
    }
}

fn load_scene(path: &Path) -> Result<Scene> {
    Scene::from_json(&fs::read_to_string(path)?)
}

fn config_extra(cfg: &RunConfig) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("config".into(), cfg.to_json_value());
    m
}

fn gen_scene_cmd(a: &GenSceneArgs) -> Result<String> {
    let params = SceneParams {
        seed: a.seed,
        n_views: a.views,
        image_size: a.size,
        patch_size: a.patch,
        pose_spread: a.spread,
        focal_jitter: a.jitter,
        min_baseline: a.min_baseline,
        n_points: a.points,
    };
    let scene = gen_scene(&params)?;
    write_atomic(&a.out, scene.to_json().as_bytes(), a.force)?;
    Ok(format!("wrote {} ({} views)", a.out.display(), scene.n_views()))
}

fn project_cmd(a: &ProjectArgs) -> Result<String> {
    let scene = load_scene(&a.scene)?;
    let n = scene.n_views();
    if a.src >= n || a.dst >= n {
        return Err(Error::InvalidArgument(format!("view index out of range (scene has {n} views)")));
    }
    let cfg = a.config.resolve()?.cfg;
    cfg.validate()?;
    let depths = match &a.depths {
        Some(d) => d.clone(),
        None => cfg.schedule()?.depths().to_vec(),
    };
    let rows = project_cross_view_eps(&scene.cameras[a.src], &scene.cameras[a.dst], a.u, a.v, &depths, cfg.proj_eps)?;
    let csv = projection_csv(&depths, &rows);
    match &a.out {
        Some(p) => {
            write_atomic(p, csv.as_bytes(), a.force)?;
            Ok(format!("wrote {}", p.display()))
        }
        None => {
            print!("{csv}");
            Ok(String::new())
        }
    }
}

fn tensor4(path: &Path) -> Result<ndarray::Array4<f64>> {
    read_tensor(path)?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|_| Error::ShapeMismatch(format!("{} is not a 4-d (B, L, H, C) tensor", path.display())))
}

fn attn_cmd(a: &AttnArgs) -> Result<String> {
    let scene = load_scene(&a.scene)?;
    let (q, k, v) = (tensor4(&a.q)?, tensor4(&a.k)?, tensor4(&a.v)?);
    let (_, _, heads, c) = q.dim();
    let cfg = a.config.resolve()?.fit(heads, Some(c))?;
    let layout = scene.layout()?;
    let out = urope_self_attention(
        &q,
        &k,
        &v,
        &layout,
        &cfg.assignment()?,
        &cfg.rope_config()?,
        &cfg.attention_options(),
    )?;
    let extra = config_extra(&cfg);
    write_tensor(&a.out, &out.out.into_dyn(), cfg.precision, Some(&extra), a.force)?;
    if let Some(w) = &a.weights {
        let seq = sequence_weights(&out.weights, q.dim().0, layout.n_views())?;
        write_tensor(w, &seq.into_dyn(), cfg.precision, Some(&extra), a.force)?;
    }
    Ok(format!("wrote {}", a.out.display()))
}

fn diag_cmd(a: &DiagArgs) -> Result<String> {
    let scene = load_scene(&a.scene)?;
    let layers: Vec<ndarray::Array4<f64>> = a.weights.iter().map(|p| tensor4(p)).collect::<Result<_>>()?;
    let heads = layers[0].dim().1;
    let cfg = a.config.resolve()?.fit(heads, None)?;
    let target = DiagnosticTarget { query_view: a.query_view, query_patch: a.query_patch, key_view: a.target_view };
    let files = diagnostic_files(&layers, &scene, &cfg, target)?;
    fs::create_dir_all(&a.out_dir)?;
    for (name, text) in &files {
        write_atomic(&a.out_dir.join(name), text.as_bytes(), a.force)?;
    }
    Ok(format!("wrote {} files to {}", files.len(), a.out_dir.display()))
}

fn selftest_cmd(a: &SelftestArgs) -> Result<bool> {
    let level = match a.level {
        LevelArg::Quick => Level::Quick,
        LevelArg::Full => Level::Full,
    };
    let outcomes = selftest::run(level);
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} checks, {failed} failed", outcomes.len());
    Ok(failed == 0)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenScene(a) => gen_scene_cmd(a),
        Command::Project(a) => project_cmd(a),
        Command::Attn(a) => attn_cmd(a),
        Command::Diag(a) => diag_cmd(a),
        Command::Selftest(a) => match selftest_cmd(a) {
            Ok(true) => return ExitCode::SUCCESS,
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(msg) => {
            if !msg.is_empty() {
                eprintln!("{msg}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
