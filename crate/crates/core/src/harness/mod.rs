//! Episodic sampling, evaluation protocols, training and one-shot
//! evaluation.

mod episode;
mod eval;
mod protocol;
mod train;

pub use episode::{sample_episode, ClassIndex, Episode, EpisodeError};
pub use eval::{
    evaluate_episodic, evaluate_one_shot, fingerprint, ClassAccuracy, Embedder, EvalError, EvalMode,
    EvalReport,
};
pub use protocol::{
    build_explicit_protocol, build_holdout_protocol, build_ntu120_protocol, build_nwucla_protocol,
    label_cmp, parse_exemplar_map, Catalog, ExemplarSource, Exemplars, ProtocolError,
    ProtocolSplit, NTU120_EVAL_CLASSES, NWUCLA_EVAL_CLASSES, NWUCLA_TRAIN_CLASSES,
};
pub use train::{
    learning_rate_at, train, EpochRecord, NoopObserver, Sgd, TrainConfig, TrainError,
    TrainObserver, TrainOutcome,
};
