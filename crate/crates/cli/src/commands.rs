use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use ssd_core::data::{flatten_samples, generate_synthetic, load_dataset, project_records, save_dataset, Dataset};
use ssd_core::eval::{
    predict_all, run_consensus_eval, run_fidelity, run_hallucination_eval, run_ood_eval, ConsensusReport, EvalConfig,
    EvalReport, FidelityReport, Metric,
};
use ssd_core::mdn::train as train_student;
use ssd_core::{MdnConfig, MdnModel, PcaTransform, SyntheticTeacherConfig, TrainConfig};

use crate::config::{
    parse_components, required, snapshot_path, write_snapshot, EvalCmdConfig, FitPcaConfig, ScoreConfig, ScoreMode,
    Suite, SweepConfig, SynthConfig, TrainCmdConfig,
};
use crate::{report, CliError};

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

fn load_pca(path: Option<&Path>, d_raw: usize) -> Result<Option<PcaTransform>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let pca = PcaTransform::load(path)?;
    if pca.d_raw() != d_raw {
        return Err(ssd_core::Error::DimensionMismatch {
            field: format!("PCA input ({})", path.display()),
            expected: d_raw,
            actual: pca.d_raw(),
        }
        .into());
    }
    Ok(Some(pca))
}

pub fn synth(cfg: &SynthConfig) -> Result<(), CliError> {
    let out = required(&cfg.out, "out")?;
    let (min_components, max_components) = parse_components(&cfg.components)?;
    let teacher = SyntheticTeacherConfig {
        n_prompts: cfg.n,
        d_h: cfg.dh,
        d_z: cfg.dz,
        samples_per_prompt: cfg.samples,
        min_components,
        max_components,
        separation: cfg.separation,
        component_scale: cfg.component_scale,
        scale_gain: cfg.scale_gain,
        center_scale: cfg.center_scale,
        noise: cfg.noise,
        label_midpoint: cfg.label_midpoint,
        label_slope: cfg.label_slope,
        seed: cfg.seed,
        ..Default::default()
    };
    eprintln!("synth: generating {} prompts", cfg.n);
    let (train, test) = generate_synthetic(&teacher)?.split_tail(cfg.test)?;
    create_dir(out)?;
    save_dataset(&train, out.join("train.ndjson"))?;
    save_dataset(&test, out.join("test.ndjson"))?;
    write_snapshot("synth", cfg, &out.join("synth.config.json"))?;
    eprintln!(
        "synth: wrote {} train and {} test prompts to {}",
        train.records.len(),
        test.records.len(),
        out.display()
    );
    Ok(())
}

pub fn fit_pca(cfg: &FitPcaConfig) -> Result<(), CliError> {
    let dataset = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let out = required(&cfg.out, "out")?;
    let samples = flatten_samples(&dataset.records);
    eprintln!("fit-pca: {} embeddings of dimension {}", samples.len(), dataset.header.d_raw);
    let pca = PcaTransform::fit(&samples, cfg.dpca)?;
    pca.save(out)?;
    write_snapshot("fit-pca", cfg, &snapshot_path(out))?;
    let kept: f64 = pca.explained_variance().iter().sum();
    eprintln!("fit-pca: kept variance {kept:.6}, id {}", pca.id());
    Ok(())
}

fn train_config(cfg: &TrainCmdConfig) -> (TrainConfig, impl Fn(usize, usize) -> MdnConfig + '_) {
    let tc = TrainConfig {
        learning_rate: cfg.lr,
        batch_size: cfg.batch_size,
        max_epochs: cfg.epochs,
        patience: cfg.patience,
        validation_fraction: cfg.val_fraction,
        clip_norm: cfg.clip,
        seed: cfg.seed,
        ..Default::default()
    };
    let mdn = move |d_h, d_z| MdnConfig {
        components: cfg.k,
        hidden_width: cfg.width,
        depth: cfg.depth,
        scale_floor: cfg.scale_floor,
        seed: cfg.seed,
        ..MdnConfig::new(d_h, d_z)
    };
    (tc, mdn)
}

pub fn train(cfg: &TrainCmdConfig) -> Result<(), CliError> {
    let dataset = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let out = required(&cfg.out, "out")?;
    let pca = load_pca(cfg.pca.as_deref(), dataset.header.d_raw)?;
    let records = project_records(&dataset.records, pca.as_ref())?;
    let d_z = pca.as_ref().map_or(dataset.header.d_raw, PcaTransform::d_pca);
    let (tc, mdn) = train_config(cfg);
    eprintln!("train: {} prompts, d_h={} d_z={d_z}", records.len(), dataset.header.d_h);
    let (mut model, log) = train_student(&records, &mdn(dataset.header.d_h, d_z), &tc)?;
    model.set_pca_id(pca.as_ref().map(|p| p.id().to_string()));
    model.save(out)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log.json");
    write_json(Path::new(&log_path), &log)?;
    write_snapshot("train", cfg, &snapshot_path(out))?;
    eprintln!(
        "train: {} epochs, best validation NLL {:.6} at epoch {}",
        log.epochs.len(),
        log.best_val_nll,
        log.best_epoch
    );
    Ok(())
}

#[derive(Serialize)]
struct ScoreLine<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean: Option<Vec<f64>>,
    label: u8,
}

pub fn score(cfg: &ScoreConfig) -> Result<(), CliError> {
    let model = MdnModel::load(required(&cfg.model, "model")?)?;
    let dataset = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let pca = load_pca(cfg.pca.as_deref(), dataset.header.d_raw)?;
    let (projected, mixtures) = predict_all(&model, pca.as_ref(), &dataset.records)?;

    let mut sink: Box<dyn Write> = match &cfg.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::Io(p.clone(), e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let io_err = |e| CliError::Io(cfg.out.clone().unwrap_or_else(|| "<stdout>".into()), e);
    for (r, q) in projected.iter().zip(&mixtures) {
        let (score, mean) = match cfg.mode {
            ScoreMode::Entropy => (Some(q.renyi2_entropy()), None),
            ScoreMode::Likelihood => (Some(q.log_density(&r.default_embedding)?), None),
            ScoreMode::Mean => (None, Some(q.mean())),
        };
        let line = ScoreLine { id: &r.id, score, mean, label: r.label };
        serde_json::to_writer(&mut sink, &line).map_err(|e| io_err(e.into()))?;
        sink.write_all(b"\n").map_err(io_err)?;
    }
    sink.flush().map_err(io_err)?;
    if let Some(out) = &cfg.out {
        write_snapshot("score", cfg, &snapshot_path(out))?;
    }
    Ok(())
}

#[derive(Serialize, Default)]
struct EvalOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    hallucination: Option<Vec<EvalReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ood: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fidelity: Option<FidelityReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    consensus: Option<ConsensusReport>,
}

pub fn eval(cfg: &EvalCmdConfig) -> Result<(), CliError> {
    let model = MdnModel::load(required(&cfg.model, "model")?)?;
    let dataset = load_dataset(required(&cfg.dataset, "dataset")?)?;
    let out = required(&cfg.out, "out")?;
    let pca = load_pca(cfg.pca.as_deref(), dataset.header.d_raw)?;
    let probe_train = cfg.train_dataset.as_deref().map(load_dataset).transpose()?;
    let ec = EvalConfig { resamples: cfg.resamples, seed: cfg.seed };
    let records = &dataset.records;
    let mut output = EvalOutput::default();
    let mut text = String::new();
    let mut suites = cfg.suites.clone();
    suites.sort();
    suites.dedup();
    for suite in suites {
        eprintln!("eval: {}", suite.name());
        match suite {
            Suite::Hallucination => {
                let probe = probe_train.as_ref().map(|d| d.records.as_slice());
                let reports = run_hallucination_eval(&model, pca.as_ref(), records, probe, &ec)?;
                text.push_str(&report::metric_reports("hallucination detection", &reports));
                output.hallucination = Some(reports);
            }
            Suite::Ood => {
                let r = run_ood_eval(&model, pca.as_ref(), records, &ec)?;
                text.push_str(&report::metric_reports(
                    "context verification (matched answers are positive)",
                    std::slice::from_ref(&r),
                ));
                output.ood = Some(r);
            }
            Suite::Fidelity => {
                let r = run_fidelity(&model, pca.as_ref(), records)?;
                text.push_str(&report::fidelity(&r));
                output.fidelity = Some(r);
            }
            Suite::Consensus => {
                let r = run_consensus_eval(&model, pca.as_ref(), records, &ec)?;
                text.push_str(&report::consensus(&r));
                output.consensus = Some(r);
            }
        }
        text.push('\n');
    }
    create_dir(out)?;
    write_json(&out.join("eval.json"), &output)?;
    write_text(&out.join("eval.txt"), &text)?;
    write_snapshot("eval", cfg, &out.join("eval.config.json"))?;
    print!("{text}");
    Ok(())
}

fn csv_float(x: f64) -> String {
    format!("{x}")
}

pub const SWEEP_HEADER: &str = "k,width,depth,d_pca,auroc,auroc_std,rho_dispersion,rho_truth,best_val_nll,epochs";

pub fn sweep(cfg: &SweepConfig) -> Result<(), CliError> {
    let train_set: Dataset = load_dataset(required(&cfg.train, "train")?)?;
    let test_set: Dataset = load_dataset(required(&cfg.test, "test")?)?;
    let out = required(&cfg.out, "out")?;
    for (name, grid) in [("k", &cfg.k), ("width", &cfg.width), ("depth", &cfg.depth), ("dpca", &cfg.dpca)] {
        if grid.is_empty() {
            return Err(CliError::Config(format!("sweep grid {name} is empty")));
        }
    }
    let d_raw = train_set.header.d_raw;
    let mut pcas: BTreeMap<usize, Option<PcaTransform>> = BTreeMap::new();
    for &d in &cfg.dpca {
        let pca = if d == 0 { None } else { Some(PcaTransform::fit(&flatten_samples(&train_set.records), d)?) };
        pcas.insert(d, pca);
    }
    let ec = EvalConfig { resamples: cfg.resamples, seed: cfg.seed };
    let mut csv = format!("{SWEEP_HEADER}\n");
    for (&d_pca, pca) in &pcas {
        let records = project_records(&train_set.records, pca.as_ref())?;
        let d_z = pca.as_ref().map_or(d_raw, PcaTransform::d_pca);
        for &k in &cfg.k {
            for &width in &cfg.width {
                for &depth in &cfg.depth {
                    let tcc = TrainCmdConfig {
                        k,
                        width,
                        depth,
                        seed: cfg.seed,
                        lr: cfg.lr,
                        batch_size: cfg.batch_size,
                        epochs: cfg.epochs,
                        patience: cfg.patience,
                        ..Default::default()
                    };
                    let (tc, mdn) = train_config(&tcc);
                    eprintln!("sweep: k={k} width={width} depth={depth} d_pca={d_pca}");
                    let (mut model, log) = train_student(&records, &mdn(train_set.header.d_h, d_z), &tc)?;
                    model.set_pca_id(pca.as_ref().map(|p| p.id().to_string()));
                    let reports = run_hallucination_eval(&model, pca.as_ref(), &test_set.records, None, &ec)?;
                    let auroc = reports
                        .iter()
                        .find(|r| r.score == "ssd-entropy" && r.metric == Metric::Auroc)
                        .expect("hallucination eval reports ssd-entropy auroc");
                    let fid = run_fidelity(&model, pca.as_ref(), &test_set.records)?;
                    let row = [
                        k.to_string(),
                        width.to_string(),
                        depth.to_string(),
                        d_pca.to_string(),
                        csv_float(auroc.point),
                        csv_float(auroc.boot_std),
                        csv_float(fid.rho_dispersion),
                        fid.rho_truth.map(csv_float).unwrap_or_default(),
                        csv_float(log.best_val_nll),
                        log.epochs.len().to_string(),
                    ];
                    csv.push_str(&row.join(","));
                    csv.push('\n');
                }
            }
        }
    }
    write_text(out, &csv)?;
    write_snapshot("sweep", cfg, &snapshot_path(out))?;
    Ok(())
}
