//! Synthetic tasks, base-model pre-training and the experiment drivers.

pub mod experiments;
pub mod pretrain;
pub mod tasks;

pub use pretrain::{
    answer_loss_grad, fullkv_accuracy, fullkv_answer, pretrain, PretrainConfig, PretrainReport,
};
pub use tasks::{
    gen_kv_recall, gen_needle, gen_needle_at, shuffled, task_corpus, QueryPosition, TaskInstance,
    TaskKind, TaskMix, BINDING_LEN, KEY_LEN, MIN_NEEDLE_CTX, VALUE_LEN,
};
