//! Loading, preprocessing and decoder construction shared by the commands.

use std::path::{Path, PathBuf};

use eegphon_core::dda::{preprocess_dda, DdaParams};
use eegphon_core::epochs::EPOCH_WINDOW_MS;
use eegphon_core::io::archive::load_epochs;
use eegphon_core::io::container::{load_container, MANIFEST_FILE};
use eegphon_core::preprocess::{preprocess_erp, ErpConfig};
use eegphon_core::rng::derive_seed;
use eegphon_core::{EpochSet, Task};
use eegphon_nn::train::TrainConfig;
use eegphon_nn::{ConformerDecoder, ModelConfig};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::args::{FeatureArg, ModelArgs};
use crate::error::{io_error, require_exists, CliError, CliResult};

/// `dir` itself when it is a container, otherwise its container subdirectories
/// in name order.
pub fn find_containers(dir: &Path) -> CliResult<Vec<PathBuf>> {
    require_exists(dir, "input directory")?;
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_error(dir, e))? {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        if path.join(MANIFEST_FILE).is_file() {
            found.push(path);
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(CliError::validation(format!("no recording containers under {}", dir.display())));
    }
    Ok(found)
}

/// Runs the selected feature path on every container and concatenates the
/// epochs. Returns the epochs, the effective parameters and a per-subject log.
pub fn preprocess_all(containers: &[PathBuf], feature: FeatureArg, seed: u64) -> CliResult<(EpochSet, Value, Vec<Value>)> {
    let erp = match feature {
        FeatureArg::Erp => Some(ErpConfig { seed, ..ErpConfig::default() }),
        FeatureArg::ErpWideband => Some(ErpConfig { seed, ..ErpConfig::wideband() }),
        FeatureArg::Dda => None,
    };
    let dda = DdaParams::default();
    let params = match &erp {
        Some(cfg) => json!({ "erp": cfg }),
        None => json!({ "dda": dda, "window_ms": EPOCH_WINDOW_MS }),
    };
    let results: Vec<(EpochSet, Value)> = containers
        .par_iter()
        .enumerate()
        .map(|(i, dir)| -> CliResult<(EpochSet, Value)> {
            let (subject, rec) = load_container(dir)?;
            let context = |e: eegphon_core::Error| -> CliError {
                let inner = CliError::from(e);
                match inner {
                    CliError::Validation(m) => CliError::Validation(format!("subject {subject}: {m}")),
                    CliError::Runtime(m) => CliError::Runtime(format!("subject {subject}: {m}")),
                }
            };
            match &erp {
                Some(cfg) => {
                    let cfg = ErpConfig {
                        seed: derive_seed(cfg.seed, &[i as u64]),
                        ..cfg.clone()
                    };
                    let (set, report) = preprocess_erp(&rec, &cfg).map_err(context)?;
                    log::info!("{subject}: {} epochs", set.len());
                    Ok((set, json!({ "subject": subject, "erp": report })))
                }
                None => {
                    let (set, counts) = preprocess_dda(&rec, &dda, EPOCH_WINDOW_MS).map_err(context)?;
                    log::info!("{subject}: {} epochs", set.len());
                    Ok((set, json!({ "subject": subject, "dda": counts })))
                }
            }
        })
        .collect::<CliResult<_>>()?;
    let (sets, log): (Vec<EpochSet>, Vec<Value>) = results.into_iter().unzip();
    Ok((EpochSet::concat(&sets)?, params, log))
}

/// Loads an archive together with the feature name recorded at preprocessing.
pub fn load_archive(path: &Path) -> CliResult<(EpochSet, Value)> {
    require_exists(path, "archive")?;
    Ok(load_epochs(path)?)
}

pub fn feature_name(provenance: &Value, set: &EpochSet) -> String {
    provenance["feature"]
        .as_str()
        .map(str::to_string)
        .unwrap_or_else(|| set.feature_kind.as_str().to_string())
}

/// Parses a JSON file; errors name the offending field.
pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> CliResult<T> {
    require_exists(path, what)?;
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::validation(format!("{what} {}: field `{field}`: {}", path.display(), e.inner()))
    })
}

/// Effective Conformer decoder: file configurations first, then flags.
pub fn conformer(args: &ModelArgs, task: Task) -> CliResult<ConformerDecoder> {
    let mut model = match &args.model_config {
        Some(p) => read_json::<ModelConfig>(p, "model config")?,
        None if args.tiny => ModelConfig::tiny(vec![task]),
        None => ModelConfig::default(),
    };
    if args.tiny && args.model_config.is_some() {
        return Err(CliError::validation("--tiny and --model-config are mutually exclusive"));
    }
    model.tasks = vec![task];
    model.ctc_enabled |= args.ctc;
    let mut train = match &args.train_config {
        Some(p) => read_json::<TrainConfig>(p, "train config")?,
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        train.max_epochs = e;
    }
    if let Some(lr) = args.lr {
        train.lr_max = lr;
    }
    if let Some(b) = args.batch {
        train.batch = b;
    }
    if let Some(w) = args.warmup {
        train.warmup_epochs = w;
    }
    if let Some(p) = args.patience {
        train.patience = p;
    }
    let dec = ConformerDecoder {
        model,
        train,
        multi_task: args.multi_task,
    };
    let mut check = dec.model.clone();
    check.tasks = dec.tasks_for(task);
    check.validate()?;
    dec.train.validate()?;
    Ok(dec)
}
