use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use super::GlobalArgs;
use crate::error::{Error, Result};
use crate::metrics::{
    chamfer, cosine_alignment, frechet, layered_perceptual, projection_ssim, subsample, FeatureMatrix, LayerFeatures, MetricReport, CHAMFER_POINTS,
};
use crate::numcore::rng;
use crate::voxel::io::load_grid;
use crate::voxel::OCCUPANCY_THRESHOLD;

pub const REPORT_FILE: &str = "report.json";

const KNOWN: [&str; 5] = ["cd", "ssim", "frechet", "cosine", "perceptual"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated asset (BVEG) for `cd` and `ssim`.
    pub pred: Option<PathBuf>,
    /// Reference asset (BVEG) for `cd` and `ssim`.
    pub reference: Option<PathBuf>,
    /// BVEF feature files for `frechet` and `cosine` (row-wise mean).
    pub features_real: Option<PathBuf>,
    pub features_gen: Option<PathBuf>,
    /// Per-layer BVEF files (sites × channels) for `perceptual`.
    pub perceptual_x: Vec<PathBuf>,
    pub perceptual_y: Vec<PathBuf>,
    /// Per-layer BVEF files holding one row of channel weights; all ones when empty.
    pub perceptual_weights: Vec<PathBuf>,
    pub metrics: Vec<String>,
    /// Points drawn from each asset for `cd`.
    pub points: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pred: None,
            reference: None,
            features_real: None,
            features_gen: None,
            perceptual_x: Vec::new(),
            perceptual_y: Vec::new(),
            perceptual_weights: Vec::new(),
            metrics: vec!["cd".into(), "ssim".into()],
            points: CHAMFER_POINTS,
            seed: 0,
            out: PathBuf::from("eval"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub features_real: Option<PathBuf>,
    #[arg(long)]
    pub features_gen: Option<PathBuf>,
    /// Metric to compute; repeat for several.
    #[arg(long = "metric")]
    pub metrics: Vec<String>,
}

impl EvalArgs {
    pub fn apply(self, mut c: EvalConfig, g: &GlobalArgs) -> EvalConfig {
        c.pred = self.pred.or(c.pred);
        c.reference = self.reference.or(c.reference);
        c.features_real = self.features_real.or(c.features_real);
        c.features_gen = self.features_gen.or(c.features_gen);
        if !self.metrics.is_empty() {
            c.metrics = self.metrics;
        }
        c.seed = g.seed.unwrap_or(c.seed);
        c.out = g.out.clone().unwrap_or(c.out);
        c
    }
}

fn layers(paths: &[PathBuf]) -> Result<Vec<LayerFeatures>> {
    paths
        .iter()
        .map(|p| {
            let f = FeatureMatrix::load(p)?;
            LayerFeatures::new(f.rows, f.cols, f.data)
        })
        .collect()
}

fn row_cosine(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    if a.rows != b.rows {
        return Err(Error::Domain(format!("{} and {} feature rows", a.rows, b.rows)));
    }
    let mut s = 0.0;
    for i in 0..a.rows {
        s += cosine_alignment(a.row(i), b.row(i))?;
    }
    Ok(s / a.rows as f64)
}

fn both<'a>(a: &'a Option<PathBuf>, b: &'a Option<PathBuf>) -> Option<(&'a Path, &'a Path)> {
    Some((a.as_deref()?, b.as_deref()?))
}

/// Computes each requested metric whose inputs are present and writes the
/// report; metrics lacking inputs are skipped with a warning.
pub fn eval(cfg: &EvalConfig) -> Result<MetricReport> {
    if let Some(m) = cfg.metrics.iter().find(|m| !KNOWN.contains(&m.as_str())) {
        return Err(Error::Config(format!("unknown metric `{m}` (known: {})", KNOWN.join(", "))));
    }
    let assets = both(&cfg.pred, &cfg.reference).map(|(p, r)| Ok::<_, Error>((load_grid(p)?, load_grid(r)?))).transpose()?;
    let feats = both(&cfg.features_real, &cfg.features_gen).map(|(r, g)| Ok::<_, Error>((FeatureMatrix::load(r)?, FeatureMatrix::load(g)?))).transpose()?;
    let mut report = MetricReport::default();
    for name in &cfg.metrics {
        let value = match (name.as_str(), &assets, &feats) {
            ("cd", Some((p, r)), _) => {
                let mut g = rng(cfg.seed);
                let sp = subsample(&p.to_points(0, OCCUPANCY_THRESHOLD)?, cfg.points, &mut g);
                let sr = subsample(&r.to_points(0, OCCUPANCY_THRESHOLD)?, cfg.points, &mut g);
                Some(chamfer(&sp, &sr)?)
            }
            ("ssim", Some((p, r)), _) => Some(projection_ssim(p, r, 0)?),
            ("frechet", _, Some((r, g))) => Some(frechet(r, g)?),
            ("cosine", _, Some((r, g))) => Some(row_cosine(r, g)?),
            ("perceptual", _, _) if !cfg.perceptual_x.is_empty() && !cfg.perceptual_y.is_empty() => {
                let (x, y) = (layers(&cfg.perceptual_x)?, layers(&cfg.perceptual_y)?);
                let w = if cfg.perceptual_weights.is_empty() {
                    x.iter().map(|l| vec![1.0; l.channels]).collect()
                } else {
                    cfg.perceptual_weights.iter().map(|p| FeatureMatrix::load(p).map(|f| f.row(0).to_vec())).collect::<Result<Vec<_>>>()?
                };
                Some(layered_perceptual(&x, &y, &w)?)
            }
            _ => None,
        };
        match value {
            Some(v) => report.insert(name, v),
            None => eprintln!("warning: inputs for `{name}` not supplied; omitted from the report"),
        }
    }
    fs::create_dir_all(&cfg.out)?;
    report.save(&cfg.out.join(REPORT_FILE))?;
    Ok(report)
}
