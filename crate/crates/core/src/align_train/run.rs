use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    ablation_config, refine_fap_observed, train_hdp, AblationFlag, AlignError, HdpConfig,
    IterationReport, RefineConfig, RefineEvent, TrainingExample, Wiring,
};
use crate::micro_lm::{save_checkpoint, AdapterCheckpoint, AdapterRole, CheckpointMeta, MicroLM};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub hdp: HdpConfig,
    pub refine: RefineConfig,
    pub ablation: Vec<AblationFlag>,
}

/// Contents of `final.json` in a run directory. Paths are relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalPointers {
    pub variant: String,
    pub base_model_hash: String,
    pub fap: PathBuf,
    pub fap_hash: String,
    pub hdp: PathBuf,
    pub hdp_hash: String,
    pub initial_em: Option<f64>,
    pub final_em: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunOutcome {
    pub wiring: Wiring,
    pub hdp: AdapterCheckpoint,
    pub fap: AdapterCheckpoint,
    pub initial_em: Option<f64>,
    pub reports: Vec<IterationReport>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), AlignError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| AlignError::Data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// HDP training followed by FAP refinement, wired per the ablation flags.
///
/// With `out_dir` set, writes `train_config.json`, every checkpoint under
/// `checkpoints/`, one report per round under `iterations/`, and
/// `final.json` pointing at the final FAP and HDP.
pub fn run_training(
    base: &MicroLM,
    data: &[TrainingExample],
    config: &TrainRunConfig,
    out_dir: Option<&Path>,
) -> Result<TrainRunOutcome, AlignError> {
    let wiring = ablation_config(&config.ablation)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        std::fs::create_dir_all(dir.join("iterations"))?;
        write_json(&dir.join("train_config.json"), config)?;
    }

    let hdp = if wiring.train_hdp {
        train_hdp(base, data, &config.hdp)?
    } else {
        let mut meta = CheckpointMeta::new(AdapterRole::Hdp);
        meta.label = "hdp-untrained".into();
        let mut c = AdapterCheckpoint::new(config.hdp.adapter.init(base.d_model()), meta);
        c.freeze();
        c
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&hdp, &dir.join("checkpoints/hdp.json"))?;
    }

    let (fap, initial_em, reports) = if wiring.train_fap {
        let mut observer = |ev: RefineEvent<'_>| -> Result<(), AlignError> {
            let Some(dir) = out_dir else { return Ok(()) };
            match ev {
                RefineEvent::Checkpoint(c) => {
                    let name = format!(
                        "checkpoints/fap_k{}_e{}.json",
                        c.meta.iteration, c.meta.epoch
                    );
                    save_checkpoint(c, &dir.join(name))?;
                }
                RefineEvent::Iteration(r) => write_json(
                    &dir.join(format!("iterations/iteration_{}.json", r.iteration)),
                    r,
                )?,
            }
            Ok(())
        };
        let out = refine_fap_observed(base, &hdp, data, &config.refine, &mut observer)?;
        (out.fap, Some(out.initial_em), out.reports)
    } else {
        let mut meta = CheckpointMeta::new(AdapterRole::Fap);
        meta.label = "fap-untrained".into();
        (
            AdapterCheckpoint::new(config.refine.adapter.init(base.d_model()), meta),
            None,
            Vec::new(),
        )
    };

    if let Some(dir) = out_dir {
        let fap_path = PathBuf::from("checkpoints/fap_final.json");
        let fap_hash = save_checkpoint(&fap, &dir.join(&fap_path))?;
        let pointers = FinalPointers {
            variant: wiring.variant.clone(),
            base_model_hash: base.content_hash(),
            fap: fap_path,
            fap_hash,
            hdp: PathBuf::from("checkpoints/hdp.json"),
            hdp_hash: hdp.content_hash(),
            initial_em,
            final_em: fap.meta.val_em,
        };
        write_json(&dir.join("final.json"), &pointers)?;
    }
    Ok(TrainRunOutcome {
        wiring,
        hdp,
        fap,
        initial_em,
        reports,
    })
}
