//! Study designs on top of [`run_training`]: effectiveness comparison,
//! attack vulnerability, defenses, ablations, the uniformity study and
//! one-parameter sweeps. Every mode runs each configured seed, writes
//! per-seed artifacts and a seed-mean summary CSV, and records a manifest
//! from which the whole output directory can be regenerated.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{AttackKind, ExperimentConfig, Variant};
use crate::data::SplitManifest;
use crate::error::{Error, Result};
use crate::federation::{prepare_data, run_training, PreparedData, TrainingRun};
use crate::metrics::{write_metrics_csv, MetricsReport};
use crate::model::PublicParams;
use crate::numeric::{dot, singular_values, variance, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// The configuration as given.
    Single,
    Effectiveness,
    Attack,
    Defense,
    Ablation,
    Poc,
    Sweep,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "single" | "run" => Self::Single,
            "effectiveness" => Self::Effectiveness,
            "attack" => Self::Attack,
            "defense" => Self::Defense,
            "ablation" => Self::Ablation,
            "poc" => Self::Poc,
            "sweep" => Self::Sweep,
            other => return Err(Error::config("mode", format!("unknown mode `{other}`"))),
        })
    }
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Single => "single",
            Self::Effectiveness => "effectiveness",
            Self::Attack => "attack",
            Self::Defense => "defense",
            Self::Ablation => "ablation",
            Self::Poc => "poc",
            Self::Sweep => "sweep",
        }
    }
}

/// Mode-specific inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModeOptions {
    /// Sweep parameter key and values.
    pub param: Option<String>,
    pub grid: Vec<String>,
    /// Uniformity strengths for the proof-of-concept study.
    pub alpha_grid: Vec<f64>,
}

pub const DEFAULT_ALPHA_GRID: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

/// Seed-level outcome of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub targets: Vec<usize>,
    pub final_metrics: MetricsReport,
    pub metrics: Vec<MetricsReport>,
    pub round_seconds: Vec<f64>,
    /// Sorted singular values of the final item table.
    pub singular_values: Vec<f64>,
}

impl SeedResult {
    pub fn singular_value_variance(&self) -> f64 {
        variance(&self.singular_values)
    }
}

/// All seeds of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub seeds: Vec<SeedResult>,
}

/// `(mean, sample standard deviation)`; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

impl VariantResult {
    fn column(&self, f: impl Fn(&SeedResult) -> f64) -> (f64, f64) {
        mean_std(&self.seeds.iter().map(f).collect::<Vec<_>>())
    }

    pub fn recall(&self) -> (f64, f64) {
        self.column(|s| s.final_metrics.recall)
    }

    pub fn ndcg(&self) -> (f64, f64) {
        self.column(|s| s.final_metrics.ndcg)
    }

    /// Final ER@5; a run without eligible targets counts as 0.
    pub fn er(&self) -> (f64, f64) {
        self.column(|s| s.final_metrics.er.unwrap_or(0.0))
    }

    pub fn sv_variance(&self) -> (f64, f64) {
        self.column(SeedResult::singular_value_variance)
    }
}

/// Per-run manifest: enough to regenerate the directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub mode: Mode,
    pub options: ModeOptions,
    /// Resolved `key=value` configuration, in canonical order.
    pub config: Vec<(String, String)>,
    pub split: SplitManifest,
    pub variants: Vec<VariantResult>,
}

impl Manifest {
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        ExperimentConfig::parse_str(&text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

const EMBED_MAGIC: &[u8; 4] = b"FRLE";

/// Binary dump: magic, u32 version, u64 seed, u64 rows, u64 cols, item table
/// (row-major `f64` LE), u64 tower length, tower parameters.
pub fn write_embeddings(path: &Path, params: &PublicParams, seed: u64) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(EMBED_MAGIC)?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(params.num_items() as u64).to_le_bytes())?;
    w.write_all(&(params.dim() as u64).to_le_bytes())?;
    for x in params.items.as_slice() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&(params.mlp.num_params() as u64).to_le_bytes())?;
    for x in params.mlp.params() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the item table and seed back from [`write_embeddings`] output.
pub fn read_embeddings(path: &Path) -> Result<(DenseMatrix, u64)> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        buf.get(at..at + n)
            .ok_or_else(|| Error::Format("embedding dump is truncated".into()))
    };
    if take(0, 4)? != EMBED_MAGIC {
        return Err(Error::Format("not an embedding dump".into()));
    }
    let u64_at = |at: usize| -> Result<u64> { Ok(u64::from_le_bytes(take(at, 8)?.try_into().expect("8 bytes"))) };
    let seed = u64_at(8)?;
    let rows = u64_at(16)? as usize;
    let cols = u64_at(24)? as usize;
    let data = (0..rows * cols)
        .map(|i| Ok(f64::from_le_bytes(take(32 + 8 * i, 8)?.try_into().expect("8 bytes"))))
        .collect::<Result<Vec<f64>>>()?;
    Ok((DenseMatrix::from_vec(rows, cols, data)?, seed))
}

/// Projection of the rows of `m` onto its top two principal axes
/// (power iteration with deflation on the covariance).
pub fn pca_2d(m: &DenseMatrix) -> Vec<[f64; 2]> {
    let (n, d) = (m.rows(), m.cols());
    if n == 0 || d == 0 {
        return Vec::new();
    }
    let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| m[(r, c)]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = (0..n).map(|r| m.row(r).iter().zip(&mean).map(|(x, mu)| x - mu).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for row in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += row[a] * row[b] / n as f64;
            }
        }
    }
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 / d as f64).collect();
        for _ in 0..500 {
            let mut next: Vec<f64> = (0..d).map(|a| dot(&cov[a], &v)).collect();
            for ax in &axes {
                let p = dot(&next, ax);
                next.iter_mut().zip(ax).for_each(|(x, y)| *x -= p * y);
            }
            let nn = crate::numeric::norm(&next);
            if nn == 0.0 {
                break;
            }
            next.iter_mut().for_each(|x| *x /= nn);
            v = next;
        }
        // fix the sign so output is reproducible
        if v.iter().find(|x| x.abs() > 1e-12).is_some_and(|x| *x < 0.0) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(v);
    }
    centered
        .iter()
        .map(|row| [dot(row, &axes[0]), axes.get(1).map_or(0.0, |a| dot(row, a))])
        .collect()
}

fn write_seed_artifacts(dir: &Path, run: &TrainingRun, data: &PreparedData) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(create(&dir.join("metrics.csv"))?, &run.reports)?;
    let mut w = create(&dir.join("attack_trace.csv"))?;
    writeln!(w, "round,er@5,target_mean_rank,poisoned_delta_norm")?;
    for r in &run.attack_trace {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.round, opt(r.er), opt(r.target_mean_rank), r.poisoned_norm)?;
    }
    w.flush()?;
    let mut w = create(&dir.join("defense_trace.csv"))?;
    writeln!(w, "round,rule,updates,rejected,dropped,clipped,threshold")?;
    for r in &run.defense_trace {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.round, r.rule, r.updates, r.rejected, r.dropped, r.clipped, r.threshold
        )?;
    }
    w.flush()?;
    write_embeddings(&dir.join("embeddings_final.bin"), &run.params, run.seed)?;
    let items = &run.params.items;
    let mut w = create(&dir.join("item_embeddings.csv"))?;
    let header: Vec<String> = (0..items.cols()).map(|c| format!("e{c}")).collect();
    writeln!(w, "item,count,hot,{}", header.join(","))?;
    for i in 0..items.rows() {
        let row: Vec<String> = items.row(i).iter().map(f64::to_string).collect();
        let count = data.popularity.counts[i];
        writeln!(w, "{i},{count},{},{}", data.popularity.is_hot(i) as u8, row.join(","))?;
    }
    w.flush()?;
    let mut w = create(&dir.join("item_projection.csv"))?;
    writeln!(w, "item,hot,target,pc1,pc2")?;
    for (i, p) in pca_2d(items).iter().enumerate() {
        let target = run.targets.binary_search(&i).is_ok() as u8;
        writeln!(w, "{i},{},{target},{},{}", data.popularity.is_hot(i) as u8, p[0], p[1])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every seed of `cfg` and writes `dir/seed_<s>/…`.
pub fn run_variant(label: &str, cfg: &ExperimentConfig, data: &PreparedData, dir: &Path) -> Result<VariantResult> {
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("{label}: seed {seed}");
        let run = run_training(cfg, data, seed, &mut |_| {})?;
        write_seed_artifacts(&dir.join(format!("seed_{seed}")), &run, data)?;
        seeds.push(SeedResult {
            seed,
            targets: run.targets.clone(),
            final_metrics: run.final_report(),
            metrics: run.reports.clone(),
            round_seconds: run.round_seconds.clone(),
            singular_values: singular_values(&run.params.items)?,
        });
    }
    Ok(VariantResult {
        label: label.to_owned(),
        seeds,
    })
}

/// The labelled configurations a mode runs.
pub fn mode_variants(mode: Mode, base: &ExperimentConfig, opts: &ModeOptions) -> Result<Vec<(String, ExperimentConfig)>> {
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let attack_kind = if base.attack.kind == AttackKind::None {
        AttackKind::Ahum
    } else {
        base.attack.kind
    };
    let out = match mode {
        Mode::Single => vec![("run".to_owned(), base.clone())],
        Mode::Effectiveness => Variant::ALL
            .iter()
            .map(|&v| (v.name().to_owned(), with(&|c| c.apply_variant(v))))
            .collect(),
        Mode::Attack => {
            let mut v = Vec::new();
            for &var in &Variant::ALL {
                v.push((
                    format!("{}_{}", var.name(), attack_kind),
                    with(&|c| {
                        c.apply_variant(var);
                        c.attack.kind = attack_kind;
                    }),
                ));
                v.push((
                    format!("{}_none", var.name()),
                    with(&|c| {
                        c.apply_variant(var);
                        c.attack.kind = AttackKind::None;
                    }),
                ));
            }
            v
        }
        Mode::Defense => {
            let mut v: Vec<(String, ExperimentConfig)> = ["fedavg", "krum", "median", "trimmed_mean", "hics"]
                .iter()
                .map(|rule| {
                    (
                        rule.to_string(),
                        with(&|c| {
                            c.apply_variant(Variant::Cl4FedRec);
                            c.attack.kind = attack_kind;
                            c.defense.rule = rule.to_string();
                        }),
                    )
                })
                .collect();
            v.push((
                "regularizer".into(),
                with(&|c| {
                    c.apply_variant(Variant::RCl4FedRec);
                    c.attack.kind = attack_kind;
                    c.defense.rule = "fedavg".into();
                }),
            ));
            v
        }
        Mode::Ablation => {
            let full = with(&|c| c.apply_variant(Variant::RCl4FedRec));
            let tweak = |f: &dyn Fn(&mut ExperimentConfig)| {
                let mut c = full.clone();
                f(&mut c);
                c
            };
            vec![
                ("rcl4fedrec".into(), full.clone()),
                ("-regularizer".into(), tweak(&|c| c.regularizer.enabled = false)),
                ("-user contrastive learning".into(), tweak(&|c| c.contrastive.cfg.user = false)),
                ("-item contrastive learning".into(), tweak(&|c| c.contrastive.cfg.item = false)),
                (
                    "random synthetic users".into(),
                    tweak(&|c| c.contrastive.synthetic_sampling = crate::contrastive::SyntheticSampling::Uniform),
                ),
                (
                    "noise item views".into(),
                    tweak(&|c| c.contrastive.cfg.item_views = crate::contrastive::ItemViewMode::Noise),
                ),
            ]
        }
        Mode::Poc => {
            let grid = if opts.alpha_grid.is_empty() {
                DEFAULT_ALPHA_GRID.to_vec()
            } else {
                opts.alpha_grid.clone()
            };
            grid.iter()
                .map(|&a| {
                    (
                        format!("alpha_{a}"),
                        with(&|c| {
                            c.apply_variant(Variant::Original);
                            c.poc_alpha = a;
                            c.attack.kind = attack_kind;
                        }),
                    )
                })
                .collect()
        }
        Mode::Sweep => {
            let param = opts
                .param
                .as_deref()
                .ok_or_else(|| Error::config("param", "sweep mode needs a parameter"))?;
            if opts.grid.is_empty() {
                return Err(Error::config("grid", "sweep mode needs at least one value"));
            }
            opts.grid
                .iter()
                .map(|value| {
                    let mut c = base.clone();
                    c.set(param, value)?;
                    c.validate()?;
                    Ok((format!("{param}={value}"), c))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    for (_, c) in &out {
        c.validate()?;
    }
    Ok(out)
}

fn label_dir(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '=' { c } else { '_' })
        .collect()
}

fn write_summary(mode: Mode, path: &Path, results: &[VariantResult]) -> Result<()> {
    let mut w = create(path)?;
    match mode {
        Mode::Poc => writeln!(
            w,
            "variant,sv_variance_mean,sv_variance_std,er@5_mean,er@5_std,recall@20_mean,ndcg@20_mean,seeds"
        )?,
        _ => writeln!(
            w,
            "variant,recall@20_mean,recall@20_std,ndcg@20_mean,ndcg@20_std,er@5_mean,er@5_std,seeds"
        )?,
    }
    for r in results {
        let (rm, rs) = r.recall();
        let (nm, ns) = r.ndcg();
        let (em, es) = r.er();
        let name = r.label.replace(',', ";");
        match mode {
            Mode::Poc => {
                let (vm, vs) = r.sv_variance();
                writeln!(w, "{name},{vm},{vs},{em},{es},{rm},{nm},{}", r.seeds.len())?
            }
            _ => writeln!(w, "{name},{rm},{rs},{nm},{ns},{em},{es},{}", r.seeds.len())?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Seed-mean sorted singular values, one row per index, one column per seed.
fn write_spectrum(path: &Path, r: &VariantResult) -> Result<()> {
    let mut w = create(path)?;
    let seeds: Vec<String> = r.seeds.iter().map(|s| format!("seed_{}", s.seed)).collect();
    writeln!(w, "index,mean,{}", seeds.join(","))?;
    let len = r.seeds.iter().map(|s| s.singular_values.len()).min().unwrap_or(0);
    for i in 0..len {
        let vals: Vec<f64> = r.seeds.iter().map(|s| s.singular_values[i]).collect();
        let cols: Vec<String> = vals.iter().map(f64::to_string).collect();
        writeln!(w, "{i},{},{}", mean_std(&vals).0, cols.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Summary file name per mode.
pub fn summary_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Single => "summary.csv",
        Mode::Effectiveness => "effectiveness.csv",
        Mode::Attack => "attack.csv",
        Mode::Defense => "defense.csv",
        Mode::Ablation => "ablation.csv",
        Mode::Poc => "poc.csv",
        Mode::Sweep => "sweep.csv",
    }
}

/// Runs a mode end to end into `out`. The manifest is rewritten after every
/// variant so partial results survive a failure.
pub fn run_mode(mode: Mode, cfg: &ExperimentConfig, opts: &ModeOptions, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let variants = mode_variants(mode, cfg, opts)?;
    fs::create_dir_all(out)?;
    let data = prepare_data(cfg)?;
    let mut manifest = Manifest {
        tool: "fedrec-lab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        mode,
        options: opts.clone(),
        config: cfg.to_pairs(),
        split: data.split.clone(),
        variants: Vec::new(),
    };
    let write_manifest = |m: &Manifest| -> Result<()> {
        let mut w = create(&out.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut w, m)?;
        w.flush()?;
        Ok(())
    };
    write_manifest(&manifest)?;
    let single = variants.len() == 1;
    for (label, vcfg) in &variants {
        let dir: PathBuf = if single { out.to_path_buf() } else { out.join(label_dir(label)) };
        let result = run_variant(label, vcfg, &data, &dir)?;
        if mode == Mode::Poc {
            let a = vcfg.poc_alpha;
            write_spectrum(&out.join(format!("spectrum_alpha_{a}.csv")), &result)?;
        }
        manifest.variants.push(result);
        write_manifest(&manifest)?;
    }
    write_summary(mode, &out.join(summary_name(mode)), &manifest.variants)?;
    if single && cfg.seeds.len() == 1 {
        // top-level copies for the single-seed case
        let seed_dir = out.join(format!("seed_{}", cfg.seeds[0]));
        for f in ["metrics.csv", "attack_trace.csv", "defense_trace.csv", "embeddings_final.bin"] {
            fs::copy(seed_dir.join(f), out.join(f))?;
        }
    }
    Ok(manifest)
}
