use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fdu_core::ablation::{evaluate_masked, fdu_mask, masking_suite, monotonic_decline_sweep};
use fdu_core::fdu::{select_fdus_scoped, train_fdu_classifier, train_layer_probes, triadic_scores};
use fdu_core::localization::{critical_layers, holdout_split};
use fdu_core::synth::generate_dump;
use fdu_core::{
    read_dump, ActivationDump, CriticalLayerResult, FduClassifierF64, FduSignatureF64, LayerProfileF64, LinearDetector,
    OracleAnswerF64, PlantSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::output::Staged;
use crate::CliError;

pub const LAYER_PROFILE: &str = "layer_profile.csv";
pub const CRITICAL_LAYERS: &str = "critical_layers.json";
pub const ATTENTION_SHIFT: &str = "attention_shift.csv";
pub const SIGNATURE: &str = "fdu_signature.json";
pub const SCORE_CURVE: &str = "score_curve.csv";
pub const CLASSIFIER: &str = "fdu_classifier.json";
pub const ABLATION_REPORT: &str = "ablation_report.json";
pub const DECLINE_CURVE: &str = "decline_curve.csv";
pub const ORACLE: &str = "oracle.json";
pub const DEFAULT_SYNTH_DUMP: &str = "synthetic.dump";

fn input(e: fdu_core::Error) -> CliError {
    CliError::Input(e.to_string())
}

fn load_dump(cfg: &RunConfig) -> Result<ActivationDump, CliError> {
    let path = cfg.dump_path()?;
    read_dump(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("invalid {}: {e}", path.display())))
}

/// `critical_layers.json`: the localization settings used plus the result.
#[derive(Debug, Serialize, Deserialize)]
pub struct CriticalLayersReport {
    pub alpha: f64,
    pub gamma: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub result: CriticalLayerResult,
}

fn attention_csv(profile: &LayerProfileF64) -> String {
    let mut out = String::from("layer,position,real,fake,diff\n");
    for e in &profile.layers {
        if let Some((real, fake)) = &e.mean_attention {
            for (p, (r, f)) in real.iter().zip(fake).enumerate() {
                let _ = writeln!(out, "{},{},{},{},{}", e.layer, p + 1, r, f, f - r);
            }
        }
    }
    out
}

pub fn localize(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dump = load_dump(cfg)?;
    let lc = cfg.localization_config();
    let (profile, result) = critical_layers::<f64>(&dump, &lc).map_err(input)?;
    let report = CriticalLayersReport {
        alpha: lc.alpha,
        gamma: lc.gamma,
        holdout_fraction: lc.holdout_fraction,
        seed: lc.probe.seed,
        result,
    };
    let mut out = Staged::default();
    out.add(cfg.output_dir.join(LAYER_PROFILE), profile.to_csv());
    out.add_json(cfg.output_dir.join(CRITICAL_LAYERS), &report)?;
    if dump.has_attention() {
        out.add(cfg.output_dir.join(ATTENTION_SHIFT), attention_csv(&profile));
    }
    out.commit()
}

/// Train and holdout parts of the dump under the configured split.
fn split(cfg: &RunConfig, dump: &ActivationDump) -> Result<(ActivationDump, ActivationDump), CliError> {
    let (tr, ho) = holdout_split(dump.labels(), cfg.localization.holdout_fraction, cfg.probe.seed).map_err(input)?;
    Ok((dump.select_samples(&tr).map_err(input)?, dump.select_samples(&ho).map_err(input)?))
}

pub fn select(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dump = load_dump(cfg)?;
    let layers = match &cfg.layers {
        Some(l) => l.clone(),
        None => read_json::<CriticalLayersReport>(&cfg.output_dir.join(CRITICAL_LAYERS))?.result.l_critical,
    };
    for &l in &layers {
        dump.check_layer(l).map_err(input)?;
    }
    let (train, _) = split(cfg, &dump)?;
    let probes = train_layer_probes::<f64>(&train, &layers, &cfg.probe).map_err(input)?;
    let scores = triadic_scores(&train, &layers, &probes).map_err(input)?;
    let sig = select_fdus_scoped(&scores, cfg.pool_scope).map_err(input)?;
    let clf = train_fdu_classifier(&train, &sig, &cfg.probe).map_err(input)?;

    let mut out = Staged::default();
    out.add_json(cfg.output_dir.join(SIGNATURE), &sig)?;
    out.add(cfg.output_dir.join(SCORE_CURVE), sig.curve_csv());
    out.add_json(cfg.output_dir.join(CLASSIFIER), &clf)?;
    out.commit()
}

pub fn ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dump = load_dump(cfg)?;
    let sig: FduSignatureF64 = read_json(&cfg.output_dir.join(SIGNATURE))?;
    let clf: FduClassifierF64 = read_json(&cfg.output_dir.join(CLASSIFIER))?;
    if clf.signature != sig {
        return Err(CliError::Input(format!("{CLASSIFIER} was trained on a different signature than {SIGNATURE}")));
    }
    let det = LinearDetector::from_classifier(&clf).map_err(input)?;
    let (_, eval) = split(cfg, &dump)?;

    let mut reports = masking_suite(&eval, &det, &sig, &cfg.ablation.seeds).map_err(input)?;
    for &ratio in cfg.ablation.ratios.iter().filter(|&&r| r < 1.0) {
        let mut r = evaluate_masked(&eval, &det, &fdu_mask(&sig, ratio).map_err(input)?).map_err(input)?;
        r.ratio = Some(ratio);
        reports.push(r);
    }
    reports.sort_by(|a, b| {
        (a.mode, a.seed).cmp(&(b.mode, b.seed)).then(a.ratio.partial_cmp(&b.ratio).unwrap_or(std::cmp::Ordering::Equal))
    });
    let curve = monotonic_decline_sweep(&eval, &det, &sig, &cfg.ablation.ratios).map_err(input)?;

    let mut out = Staged::default();
    out.add_json(cfg.output_dir.join(ABLATION_REPORT), &reports)?;
    out.add(cfg.output_dir.join(DECLINE_CURVE), curve.to_csv());
    out.commit()
}

/// `oracle.json`: the generating spec and one answer per layer.
#[derive(Debug, Serialize, Deserialize)]
pub struct OracleFile {
    pub spec: PlantSpec,
    pub layers: Vec<OracleAnswerF64>,
}

pub fn synth(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let spec = cfg.synth.clone().ok_or_else(|| CliError::Input("config has no synth section".into()))?;
    let (dump, layers) = generate_dump(&spec).map_err(input)?;
    let dump_path = cfg.dump_path.clone().unwrap_or_else(|| cfg.output_dir.join(DEFAULT_SYNTH_DUMP));
    let mut out = Staged::default();
    out.add(dump_path, fdu_core::dump::encode_dump(&dump));
    out.add_json(cfg.output_dir.join(ORACLE), &OracleFile { spec, layers })?;
    out.commit()
}
