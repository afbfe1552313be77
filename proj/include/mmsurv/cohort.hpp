#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mmsurv/preprocess.hpp"
#include "mmsurv/volume.hpp"

namespace mmsurv {

/// One patient as stored in a cohort manifest. Volumes stay on disk and are
/// opened lazily via volume_path (relative paths resolve against the
/// manifest directory).
struct SurvivalRecord {
  std::string patient_id;
  double survival_time_days = 0.0;  // > 0
  int event = 0;                    // 1 = death observed, 0 = censored
  std::string volume_path;
  RawClinicalRow clinical_raw;  // aligned with schema field order
};

struct Cohort {
  ClinicalSchema schema;
  std::vector<SurvivalRecord> records;
  std::filesystem::path root;  // directory of the manifest

  std::filesystem::path resolve_volume(const SurvivalRecord& r) const {
    std::filesystem::path p = r.volume_path;
    return p.is_absolute() ? p : root / p;
  }
};

/// Loads manifest.csv (header: patient_id,survival_time_days,event,
/// volume_path,<clinical fields...>). A schema.json next to the manifest
/// overrides the default 27-column schema. Malformed rows are collected and
/// reported all at once; nothing is silently dropped.
Cohort load_cohort(const std::filesystem::path& manifest_path);

/// Patient-level 5-fold rotation: fold i tests on chunk i, validates on
/// chunk (i+1) mod k, trains on the remaining three chunks, so each patient
/// appears in test exactly once and splits realize 6:2:2.
struct FoldPlan {
  int k = 5;
  uint64_t seed = 0;
  std::vector<std::vector<std::string>> train_ids;
  std::vector<std::vector<std::string>> val_ids;
  std::vector<std::vector<std::string>> test_ids;
};

FoldPlan split_folds(const Cohort& cohort, int k, uint64_t seed);

/// Synthetic cohort: each patient carries an image risk factor (encoded in
/// the tumor blob: high risk = small, bright blob) and a clinical risk
/// factor (encoded in age and stage fields). Survival time is
/// base * exp(-(w_img*img + w_clin*clin)) * lognormal(noise_sd), censored by
/// an independent uniform time calibrated to hit censor_rate.
struct SynthSpec {
  int64_t n = 256;
  std::array<int64_t, 3> volume_shape{8, 24, 24};  // D,H,W
  double image_weight = 1.0;
  double clinical_weight = 1.0;
  double noise_sd = 0.1;
  double censor_rate = 49.0 / 422.0;
  double age_missing_rate = 0.0;
  uint64_t seed = 1;
};

struct SynthSummary {
  int64_t n = 0;
  double censored_fraction = 0.0;
};

/// Writes manifest.csv, schema.json, volumes/ and truth.csv (ground-truth
/// factors for tests) into out_dir. Byte-identical for identical specs.
SynthSummary generate_synthetic_cohort(const SynthSpec& spec,
                                       const std::filesystem::path& out_dir);

}  // namespace mmsurv
