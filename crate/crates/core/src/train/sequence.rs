use super::{train, Model, TrainConfig, TrainOutcome};
use crate::data::{standardize, DataSplits, RegressionTaskSeq, Split, StandardizeMode};
use crate::error::{Error, Result};
use crate::init::SchemeKind;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    /// One run per task, in order; stops after a divergence.
    pub tasks: Vec<TrainOutcome>,
    /// Loss of the untrained model on the first task.
    pub init_loss: f64,
    /// Per task, the loss on that task right after training on it
    /// (infinite for tasks that diverged or never ran).
    pub final_losses: Vec<f64>,
}

impl SequenceOutcome {
    pub fn diverged(&self) -> bool {
        self.tasks.iter().any(TrainOutcome::diverged)
    }

    pub fn mean_final_loss(&self) -> f64 {
        self.final_losses.iter().sum::<f64>() / self.final_losses.len() as f64
    }
}

/// Trains on each task in turn for `iterations` steps. Inputs are
/// standardized per task and losses are measured on the task's own points.
/// A hypernet gets freshly drawn embeddings for every task after the first;
/// its other parameters carry over.
pub fn train_sequence(model: Model, seq: &RegressionTaskSeq, cfg: &TrainConfig, iterations: usize) -> Result<SequenceOutcome> {
    if seq.tasks.is_empty() || iterations == 0 {
        return Err(Error::invalid("need at least one task and one iteration"));
    }
    let mut model = model;
    let mut tasks = Vec::with_capacity(seq.tasks.len());
    let mut final_losses = vec![f64::INFINITY; seq.tasks.len()];
    let mut init_loss = f64::NAN;
    for (t, task) in seq.tasks.iter().enumerate() {
        if t > 0 {
            if let Model::Hyper(hn) = &mut model {
                if cfg.scheme.kind != SchemeKind::ConstantEmbeddingKaiming {
                    let mut rng = Rng::with_stream(cfg.seed, 0x7a5c + t as u64);
                    let dist = hn.spec.embedding_distribution;
                    for e in &mut hn.embeddings {
                        dist.fill(e.data_mut(), &mut rng);
                    }
                }
            }
        }
        let train_ds = standardize(&task.data, StandardizeMode::Global)?;
        let mut test_ds = train_ds.clone();
        test_ds.split = Split::Test;
        let data = DataSplits { train: train_ds, test: test_ds };
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(t as u64);
        c.max_steps = Some(iterations);
        c.epochs = (iterations * cfg.batch_size).div_ceil(data.train.len()) + 1;
        c.probe_batch = data.test.len();
        let out = train(model, &data, &c)?;
        if t == 0 {
            init_loss = out.start_loss;
        }
        final_losses[t] = out.end_loss;
        let stop = out.diverged();
        model = out.model.clone();
        tasks.push(out);
        if stop {
            break;
        }
    }
    Ok(SequenceOutcome {
        tasks,
        init_loss,
        final_losses,
    })
}
