//! The prune command: dense pre-training, the search, checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pruning::{prune_finish, prune_init, prune_step, PruneState};
use crate::sparse::worker_pool;
use crate::trainer::{evaluate, make_datasets, train, Dataset, InferenceOptions, Model, SplitKind};

use super::checkpoint::{load_state, recorded_config, save_checkpoint, Manifest, ResultSummary, Scores};
use super::config::{derive_seed, streams, PipelineConfig};

pub fn load_data(config: &PipelineConfig) -> Result<Dataset<f32>> {
    make_datasets(config.dataset_config()?, derive_seed(config.seed, streams::DATA))
}

fn scores(model: &Model<f32>, data: &Dataset<f32>) -> Result<Scores> {
    let opts = InferenceOptions::binary32();
    Ok(Scores {
        validation: evaluate(model, data, SplitKind::Validation, &opts)?.score(),
        test: evaluate(model, data, SplitKind::Test, &opts)?.score(),
    })
}

/// Everything except the iteration budget and checkpoint cadence must
/// match for a resume.
fn check_resumable(recorded: &PipelineConfig, config: &PipelineConfig) -> Result<()> {
    let mut a = recorded.clone();
    let mut b = recorded_config(config);
    for c in [&mut a, &mut b] {
        c.prune.hyper.iterations = 0;
        c.prune.checkpoint_every = 0;
        c.bench = None;
        c.quantize = Default::default();
    }
    if a != b {
        return Err(Error::Config("configuration differs from the checkpoint being resumed".into()));
    }
    Ok(())
}

/// Runs (or resumes) the search and writes the checkpoint to
/// `config.out`. Work runs on a pool of `config.workers` threads.
pub fn run_prune(config: &PipelineConfig, resume: bool) -> Result<Manifest> {
    config.validate()?;
    worker_pool(config.workers).install(|| prune_in_pool(config, resume))
}

fn prune_in_pool(config: &PipelineConfig, resume: bool) -> Result<Manifest> {
    let data = load_data(config)?;
    let hyper = &config.prune.hyper;
    let (mut state, baseline): (PruneState<f32>, Scores) = if resume {
        let (manifest, state) = load_state(&config.out)?;
        check_resumable(&manifest.config, config)?;
        log::info!("resuming at iteration {}", state.iteration);
        (state, manifest.baseline)
    } else {
        let mut model = Model::build(config.model_spec()?, derive_seed(config.seed, streams::INIT))?;
        if config.prune.pretrain {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, streams::PRETRAIN));
            let losses = train(&mut model, &data.train, &config.training, None, &mut rng)?;
            log::info!("dense training losses {losses:?}");
        }
        let baseline = scores(&model, &data)?;
        log::info!("dense baseline: validation {:.4}, test {:.4}", baseline.validation, baseline.test);
        let state = prune_init(model, &data, hyper, &config.training, derive_seed(config.seed, streams::SEARCH))?;
        (state, baseline)
    };

    let every = config.prune.checkpoint_every;
    while state.iteration < hyper.iterations {
        prune_step(&mut state, &data, hyper, &config.training)?;
        if let Some(h) = state.history.last() {
            log::info!(
                "iteration {} score {:.4} {:?} weighted sparsity {:.4}",
                h.iteration,
                h.accuracy,
                h.operator,
                h.weighted_sparsity
            );
        }
        if every > 0 && state.iteration % every == 0 && state.iteration < hyper.iterations {
            save_checkpoint(&config.out, config, baseline, &state, None)?;
        }
    }

    let best = prune_finish(&state, &data)?;
    let summary = ResultSummary {
        scores: Scores {
            validation: best.accuracy,
            test: evaluate(&best.model, &data, SplitKind::Test, &InferenceOptions::binary32())?.score(),
        },
        weighted_sparsity: best.weighted_sparsity(),
        layer_sparsity: best.layer_sparsities(),
        meets_caps: state.meets_caps(&best),
    };
    log::info!(
        "selected: weighted sparsity {:.4}, validation {:.4}, test {:.4}",
        summary.weighted_sparsity,
        summary.scores.validation,
        summary.scores.test
    );
    save_checkpoint(&config.out, config, baseline, &state, Some((&best, &summary)))
}
