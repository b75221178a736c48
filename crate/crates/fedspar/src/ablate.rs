//! Parameter sweeps over a base config.

use std::path::PathBuf;
use std::str::FromStr;

use crate::config::{ChannelConfig, ConfigError, ExperimentConfig, Scheme};
use crate::runner::{run_experiment, RunError, RunOptions, Summary};

/// One swept knob and its values, written `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: SweepKey,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKey {
    /// `opt`, `exhaustive` or a fixed level.
    Q,
    Kappa,
    /// Bits per entry of a homogeneous channel.
    C,
    Subvectors,
    Scheme,
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (key, values) = s.split_once('=').ok_or_else(|| format!("`{s}`: expected key=v1,v2,..."))?;
        let key = match key.trim() {
            "q" => SweepKey::Q,
            "kappa" => SweepKey::Kappa,
            "c" => SweepKey::C,
            "l" | "subvectors" => SweepKey::Subvectors,
            "scheme" => SweepKey::Scheme,
            other => return Err(format!("unknown sweep key `{other}` (q, kappa, c, l, scheme)")),
        };
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        Ok(Self { key, values })
    }
}

fn bad(field: &'static str, value: &str) -> ConfigError {
    ConfigError::Invalid { field, message: format!("cannot sweep to `{value}`") }
}

fn apply(cfg: &mut ExperimentConfig, key: SweepKey, value: &str) -> Result<(), ConfigError> {
    match key {
        SweepKey::Q => match value {
            "opt" | "optimized" => {
                cfg.codec.fixed_q = None;
                cfg.codec.exhaustive = false;
            }
            "exhaustive" => {
                cfg.codec.fixed_q = None;
                cfg.codec.exhaustive = true;
            }
            v => {
                cfg.codec.fixed_q = Some(v.parse().map_err(|_| bad("codec.fixed_q", v))?);
                cfg.codec.exhaustive = false;
            }
        },
        SweepKey::Kappa => cfg.federation.kappa = value.parse().map_err(|_| bad("federation.kappa", value))?,
        SweepKey::C => {
            let c = value.parse().map_err(|_| bad("channel.bits_per_entry", value))?;
            match &mut cfg.channel {
                ChannelConfig::Homogeneous { bits_per_entry } => *bits_per_entry = c,
                ChannelConfig::PathLoss { .. } => return Err(bad("channel.bits_per_entry", value)),
            }
        }
        SweepKey::Subvectors => cfg.codec.subvectors = value.parse().map_err(|_| bad("codec.subvectors", value))?,
        SweepKey::Scheme => {
            cfg.codec.scheme = match value {
                "fedspar" => Scheme::Fedspar,
                "vanilla" => Scheme::Vanilla,
                "top-s-float" => Scheme::TopSFloat,
                v => return Err(bad("codec.scheme", v)),
            }
        }
    }
    Ok(())
}

fn key_name(key: SweepKey) -> &'static str {
    match key {
        SweepKey::Q => "q",
        SweepKey::Kappa => "kappa",
        SweepKey::C => "c",
        SweepKey::Subvectors => "l",
        SweepKey::Scheme => "scheme",
    }
}

/// Cartesian product of the sweeps as `(label, config)` pairs. Any empty
/// sweep makes the product empty.
pub fn expand(base: &ExperimentConfig, sweeps: &[Sweep]) -> Result<Vec<(String, ExperimentConfig)>, ConfigError> {
    let mut points = vec![(String::new(), base.clone())];
    for sweep in sweeps {
        let mut next = Vec::with_capacity(points.len() * sweep.values.len());
        for (label, cfg) in &points {
            for v in &sweep.values {
                let mut c = cfg.clone();
                apply(&mut c, sweep.key, v)?;
                c.validate()?;
                let sep = if label.is_empty() { "" } else { "_" };
                next.push((format!("{label}{sep}{}-{v}", key_name(sweep.key)), c));
            }
        }
        points = next;
    }
    if sweeps.is_empty() {
        points.clear();
    }
    for (label, cfg) in &mut points {
        cfg.name = format!("{}_{label}", base.name);
    }
    Ok(points)
}

/// Result of one sweep point and seed.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub point: String,
    pub summary: Summary,
}

/// Runs every sweep point for every seed. With an output directory each run
/// gets `<point>/seed-<s>/` and a combined `ablation.csv` is written.
pub fn ablate(
    base: &ExperimentConfig,
    sweeps: &[Sweep],
    seeds: &[u64],
    opts: &RunOptions,
) -> Result<Vec<AblationRow>, RunError> {
    let points = expand(base, sweeps)?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let mut rows = Vec::new();
    for (point, cfg) in &points {
        for &seed in &seeds {
            let mut o = opts.clone();
            o.seed = Some(seed);
            o.out_dir = opts.out_dir.as_ref().map(|d| d.join(point).join(format!("seed-{seed}")));
            let out = run_experiment(cfg, &o)?;
            rows.push(AblationRow { point: point.clone(), summary: out.summary });
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_table(&dir.join("ablation.csv"), &rows)?;
    }
    Ok(rows)
}

fn write_table(path: &PathBuf, rows: &[AblationRow]) -> Result<(), RunError> {
    let err = |source| RunError::Csv { path: path.clone(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| RunError::Io { path: parent.into(), source })?;
    }
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["point"];
    header.extend_from_slice(crate::runner::SUMMARY_HEADER);
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.point.clone()];
        rec.extend(crate::runner::summary_row(&r.summary));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|source| RunError::Io { path: path.clone(), source })
}
