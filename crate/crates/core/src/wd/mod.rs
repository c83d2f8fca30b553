//! Writer-dependent verification on learned features.

mod dataset;
mod features;
mod svm;

pub use dataset::{
    build_wd_dataset, held_out_rows, reference_rows, score_writers, train_writer_classifiers, ClassifierBundle,
    NegativePolicy, WdDataset, WdProtocol, WriterClassifier,
};
pub use features::{extract_features, prepare_input, FeatureProtocol, FeatureRecord, FeatureSet, SampleKind};
pub use svm::{
    class_bounds, dual_objective, kkt_violation, solve_dual, train_svm, DualSolution, Kernel, SvmConfig, SvmModel,
};
