//! Subcommand implementations. Each one resolves its configuration, echoes
//! it into the output directory, then does the work.

use std::fs;
use std::path::{Path, PathBuf};

use anchorml::checkpoint::Checkpoint;
use anchorml::io::DatasetFiles;
use anchorml::metrics::Evaluation;
use anchorml::trainer::{sweep_csv, sweep_k as run_sweep, Architecture, ProxyEval};
use anchorml::{synth_generate, Dataset, LossKind, Model, Split, Trainer};

use crate::config::{self, RunConfig};
use crate::CliError;

pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.aadm";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRECISION_FILE: &str = "precision.csv";
pub const AP_AV_FILE: &str = "ap_av.csv";
pub const AP_VA_FILE: &str = "ap_va.csv";
pub const SWEEP_FILE: &str = "sweep_k.csv";

fn io_err(e: std::io::Error) -> CliError {
    CliError::Runtime(e.into())
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))
}

fn existing(cfg: &RunConfig, key: &str) -> Result<PathBuf, CliError> {
    let path = PathBuf::from(cfg.required(key)?);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "`{key}` path {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Vec<Split>), CliError> {
    let dir = existing(cfg, "data")?;
    Ok(DatasetFiles::in_dir(&dir).read()?)
}

fn load_split(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let (data, assignment) = load_dataset(cfg)?;
    Ok(data.apply_split(&assignment)?)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let settings = config::synth_settings(cfg)?;
    prepare_out(out)?;
    cfg.write_echo(out)?;
    let data = synth_generate(&settings.synth)?;
    let assignment = data.stratified_split(settings.train_fraction, settings.synth.seed)?;
    let files = DatasetFiles::in_dir(out);
    files.write(&data, &assignment, settings.dtype)?;
    let train = assignment.iter().filter(|&&s| s == Split::Train).count();
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        data.len(),
        train,
        data.len() - train,
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut tc = config::train_config(cfg)?;
    let resume = match cfg.raw("resume") {
        "" => None,
        _ => Some(Checkpoint::load(&existing(cfg, "resume")?)?),
    };
    let (train_set, test_set) = load_split(cfg)?;
    prepare_out(out)?;
    cfg.write_echo(out)?;
    tc.trace_path = Some(out.join(TRACE_FILE));
    tc.checkpoint_path = Some(out.join(CHECKPOINT_FILE));
    let mut trainer = match &resume {
        Some(c) => Trainer::resume(tc, &train_set, c)?,
        None => Trainer::new(tc, &train_set)?,
    };
    trainer.fit(&train_set, Some(&test_set))?;
    if let Some(last) = trainer.trace.iter().rev().find(|r| r.map_av.is_some()) {
        println!(
            "epoch {}: test MAP A->V {:.3}, V->A {:.3}",
            last.epoch,
            last.map_av.unwrap_or(f64::NAN),
            last.map_va.unwrap_or(f64::NAN)
        );
    }
    println!("wrote {} and {}", TRACE_FILE, CHECKPOINT_FILE);
    Ok(())
}

fn summary(e: &Evaluation) -> String {
    format!(
        "A->V   V->A   Avg\n{:.3}  {:.3}  {:.3}\n",
        e.audio_to_visual.map,
        e.visual_to_audio.map,
        e.average_map()
    )
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let tc = config::train_config(cfg)?;
    let ckpt_path = existing(cfg, "checkpoint")?;
    let checkpoint = Checkpoint::load(&ckpt_path)?;
    let (data, assignment) = load_dataset(cfg)?;
    let test_idx: Vec<usize> = (0..data.len()).filter(|&i| assignment[i] == Split::Test).collect();
    if test_idx.is_empty() {
        return Err(CliError::Usage("the split manifest marks no test samples".into()));
    }
    let test = data.subset(&test_idx, Split::Test)?;
    let arch = Architecture::for_dataset(&data, tc.hidden, tc.heads);
    checkpoint
        .check_fingerprint(arch.fingerprint())
        .map_err(|e| CliError::Usage(format!("{e} (model {})", arch.describe())))?;
    let mut model = Model::new(arch, tc.dropout, tc.seed)?;
    checkpoint.restore_params(&mut model.store)?;
    let proxies = tc.eval_proxies.then_some(ProxyEval {
        k: tc.k,
        pool: tc.neighbor_pool,
        mode: tc.loss.aa_mode,
    });
    let e = model.evaluate(&test, &tc.k_grid, proxies)?;
    prepare_out(out)?;
    cfg.write_echo(out)?;
    fs::write(out.join(METRICS_FILE), e.metrics_csv()).map_err(io_err)?;
    fs::write(out.join(PRECISION_FILE), e.precision_csv()).map_err(io_err)?;
    fs::write(out.join(AP_AV_FILE), Evaluation::ap_csv(&e.audio_to_visual)).map_err(io_err)?;
    fs::write(out.join(AP_VA_FILE), Evaluation::ap_csv(&e.visual_to_audio)).map_err(io_err)?;
    print!("{}", summary(&e));
    Ok(())
}

pub fn sweep_k(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let base = config::train_config(cfg)?;
    let strategies: Vec<LossKind> = cfg.list("strategies")?;
    let k_max: usize = cfg.get("k_max")?;
    let jobs: usize = cfg.get("jobs")?;
    if strategies.is_empty() || k_max == 0 || jobs == 0 {
        return Err(CliError::Usage(
            "`strategies` must be non-empty and `k_max`, `jobs` at least 1".into(),
        ));
    }
    let (train_set, test_set) = load_split(cfg)?;
    prepare_out(out)?;
    cfg.write_echo(out)?;
    let ks: Vec<usize> = (1..=k_max).collect();
    let rows = run_sweep(&train_set, &test_set, &base, &strategies, &ks, jobs)?;
    fs::write(out.join(SWEEP_FILE), sweep_csv(&rows)).map_err(io_err)?;
    println!("wrote {} rows to {}", rows.len(), out.join(SWEEP_FILE).display());
    Ok(())
}
