//! Drivers behind the command-line tool: scene sets, direct fitting,
//! pipeline training, evaluation and benchmarking.

mod bench;
mod config;
mod data;
mod eval;
mod fit;
mod train;


pub use bench::{bench, peak_rss_bytes, BenchEntry, BenchOptions, BenchPreset, BenchReport};
pub use config::{FitConfig, OptimizerConfig, PathsConfig, RunConfig, TrainConfig};
pub use data::{gen_scene_set, load_scenes, scene_name, write_scene_set, SceneSetManifest, SET_MANIFEST};
pub use eval::{
    class_names, eval, evaluate_predictions, predict_grids, read_label_grid, write_label_grid, EvalReport, EvalSource, SceneMetrics,
    METRICS_FILE,
};
pub use fit::{fit_init, fit_objective, fit_scene, FitOutcome, FitRecord};
pub use train::{
    evaluate_model, split_scenes, train, EvalSummary, LogRecord, TrainOptions, TrainReport, TrainScene, Trainer, CHECKPOINT_FILE,
    CONFIG_FILE, LAST_GOOD_FILE, LOG_FILE, REPORT_FILE,
};
