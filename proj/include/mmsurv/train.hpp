#pragma once

#include <filesystem>

#include "mmsurv/checkpoint.hpp"
#include "mmsurv/cohort.hpp"
#include "mmsurv/metrics.hpp"
#include "mmsurv/model.hpp"

namespace mmsurv {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 200;
  int batch_size = 64;
  double lr0 = 0.001;
  double lr_decay_factor = 0.5;
  int lr_decay_every = 40;
  double lambda = 1e-4;
  uint64_t seed = 1;
  bool augment_train = true;  // x8 augmentation, training folds only
  bool desk_scale = false;

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ShapeError("TrainConfig: epochs and batch_size >= 1");
    if (lr0 < 0) throw ShapeError("TrainConfig: lr0 must be >= 0");
    if (lambda < 0) throw ShapeError("TrainConfig: lambda must be >= 0");
  }
};

/// Shrunken profile that runs the full pipeline in minutes on a CPU.
void apply_desk_scale(ModelConfig& mc, TrainConfig& tc);

/// lr0 * factor^floor(epoch / every).
double lr_at(int epoch, const TrainConfig& config);

// ---------------------------------------------------------------------------
// Fold data
// ---------------------------------------------------------------------------

struct TrainSample {
  std::vector<float> volume;    // resized+normalized voxels (empty if image unused)
  std::vector<float> clinical;  // encoded clinical vector
  float label = 0;              // minmax-normalized survival time
  int event = 1;
};

struct EvalPatient {
  std::string patient_id;
  std::vector<float> volume;
  std::vector<float> clinical;
  float label = 0;
  int event = 0;
};

struct FoldData {
  int fold_index = 0;
  std::array<int64_t, 3> volume_shape{0, 0, 0};
  int64_t clinical_width = 0;
  std::vector<TrainSample> train;  // uncensored only, augmented
  std::vector<EvalPatient> val;    // uncensored only, original volumes
  std::vector<EvalPatient> test;   // every test patient
  NormalizationStats label_stats;  // fitted on uncensored training times
  ClinicalStats clinical_stats;    // fitted on the training fold
};

/// The fitted preprocessing state a trained model needs at inference time;
/// serialized into the checkpoint manifest.
struct PipelineStats {
  ClinicalStats clinical;
  NormalizationStats label;
};

nlohmann::ordered_json pipeline_stats_to_json(const PipelineStats& s);
PipelineStats pipeline_stats_from_json(const nlohmann::json& j);

/// Prepares every record of a cohort for scoring with previously fitted
/// statistics (no fitting happens here).
std::vector<EvalPatient> prepare_eval_patients(const Cohort& cohort, const PipelineStats& stats,
                                               const ModelConfig& model_config);

/// Builds per-fold tensors. Label and clinical statistics are fitted on the
/// training fold only; augmentation applies to training samples only; test
/// and validation patients keep one original volume each.
FoldData prepare_fold(const Cohort& cohort, const FoldPlan& plan, int fold,
                      const ModelConfig& model_config, bool augment);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct RunReport {
  int fold = 0;
  std::vector<double> train_loss;  // objective per epoch (mse + l2 penalty)
  std::vector<double> val_loss;
  std::vector<double> lr_curve;
  int best_epoch = -1;
  double test_c_index = 0;
  double test_mae = 0;
  double test_mse = 0;
  int64_t censored_in_loss_count = 0;  // instrumentation: must stay 0
  int64_t dropped_trailing_batches = 0;
  double wall_seconds = 0;
  ModelConfig model_config;
  TrainConfig train_config;
};

struct EvalResult {
  double c_index = 0;
  double mae = 0;
  double mse = 0;
};

/// Adam + lr schedule over uncensored training samples; validation loss per
/// epoch; restores the best-validation checkpoint into the model before
/// returning. Throws TrainError naming the epoch on NaN loss.
RunReport train_fold(MultimodalModel<float>& model, const FoldData& data, const TrainConfig& config);

/// C-index over all test patients, MAE/MSE over the uncensored ones, in
/// normalized label units; eval mode, one prediction per patient.
EvalResult evaluate_fold(MultimodalModel<float>& model, const FoldData& data);

std::vector<float> predict(MultimodalModel<float>& model, const std::vector<EvalPatient>& patients,
                           const std::array<int64_t, 3>& volume_shape, int64_t clinical_width);

struct CvReport {
  std::vector<RunReport> folds;
  double mean_c_index = 0, sd_c_index = 0;
  double mean_mae = 0, sd_mae = 0;
};

/// Full rotation over all k folds; fold seeds derive from the master seed.
CvReport run_cv(const Cohort& cohort, const ModelConfig& mc, const TrainConfig& tc, int k = 5);

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

struct AblationAxes {
  std::vector<int> depths{18, 34, 50, 101};             // grid A: depth x modality
  std::vector<int64_t> ratios{512, 100, 25, 5};         // grid B: ratio x head
  int ratio_depth = 34;                                 // fixed depth for grid B
  int fold = 0;                                         // cell training fold
};

struct AblationRow {
  std::string table;    // "depth_modality" or "ratio_head"
  std::string key;      // "r3d18".. or "512:27"..
  std::string variant;  // "image" / "multi" or "hidden" / "no_hidden"
  double loss = 0;      // test mse
  double c_index = 0;
  double mae = 0;
};

struct AblationCell {
  ModelConfig config;
  std::string table, key, variant;
  uint64_t index = 0;  // position in the grid; drives the cell's model seed
};

std::vector<AblationCell> enumerate_ablation_cells(const ModelConfig& base,
                                                   const AblationAxes& axes);

/// Trains one grid cell on the axes' fold and returns its table row.
AblationRow run_ablation_cell(const Cohort& cohort, const FoldPlan& plan,
                              const AblationCell& cell, const AblationAxes& axes,
                              const TrainConfig& tc);

std::vector<AblationRow> run_ablation(const Cohort& cohort, const ModelConfig& base,
                                      const AblationAxes& axes, const TrainConfig& tc);

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

nlohmann::ordered_json run_report_to_json(const RunReport& r);
nlohmann::ordered_json cv_report_to_json(const CvReport& r);

/// Writes report.json plus loss_curve.csv (epoch, train_loss, val_loss).
void write_run_report(const RunReport& r, const std::filesystem::path& dir,
                      const std::string& stem);

void write_ablation_tables(const std::vector<AblationRow>& rows,
                           const std::filesystem::path& dir);

}  // namespace mmsurv
