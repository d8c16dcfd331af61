//! Episode forward pass, loss, optimization, evaluation and checkpoints.

mod checkpoint;
mod eval;
mod forward;
mod loss;
mod optim;
mod session;
mod step;

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use eval::{eval_episode, evaluate, mean_ci95, EvalReport, EvalSettings, Matcher, Model};
pub use forward::{episode_graph, episode_logits, image_batch, EpisodeGraph};
pub use loss::{accuracy, episode_loss, loss_weights, predict_label, LossReduction, Prediction};
pub use optim::{AdamConfig, OptimState};
pub use session::{SessionSettings, TrainSession};
pub use step::{loss_and_grads, train_step, StepOutcome};
