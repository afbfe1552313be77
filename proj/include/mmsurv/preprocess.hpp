#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmsurv/common.hpp"
#include "mmsurv/volume.hpp"

namespace mmsurv {

/// Per-field statistics, fitted on training data only and passed around
/// explicitly so no stage can accidentally peek at held-out folds.
struct NormalizationStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double std = 0.0;
};

/// Fit all four statistics over the given values (population std).
NormalizationStats fit_stats(std::span<const double> values);

/// (x - min) / (max - min), clamped into [0,1] for out-of-range inputs.
double minmax_scale(double x, const NormalizationStats& stats);
/// Inverse of minmax_scale for in-range values.
double minmax_unscale(double scaled, const NormalizationStats& stats);
/// (x - mean) / std.
double standard_score(double x, const NormalizationStats& stats);

/// Unit vector at the vocabulary index; the empty string is the missing
/// token and encodes as all zeros. Unknown values raise DataError naming
/// the field.
std::vector<double> one_hot(const std::string& value, std::span<const std::string> vocabulary,
                            const std::string& field_name);

/// Missing entries replaced by the mean of the present values in the
/// training subset; present entries pass through unchanged.
std::vector<double> impute_mean(std::span<const std::optional<double>> column,
                                std::span<const std::optional<double>> training_subset);

/// Corner-aligned trilinear resampling to the target (D,H,W).
Volume3D resize_volume(const Volume3D& vol, std::array<int64_t, 3> target);

/// Per-volume min-max into [0,1]; a constant volume maps to all zeros.
Volume3D intensity_normalize(const Volume3D& vol);

/// The eight in-plane symmetries {identity, rot90, rot180, rot270} x
/// {no-flip, W-flip}, rotations about the depth axis, in that fixed order
/// (first the four unflipped rotations, then the four flipped ones).
/// Requires H == W. The first output equals the input.
std::vector<Volume3D> augment_x8(const Volume3D& vol);

// ---------------------------------------------------------------------------
// Clinical schema
// ---------------------------------------------------------------------------

struct FieldSpec {
  enum class Kind { Numeric, Categorical };
  enum class Norm { MinMax, Standard };
  std::string name;
  Kind kind = Kind::Numeric;
  std::vector<std::string> vocabulary;  // categorical only
  Norm normalization = Norm::MinMax;    // numeric only

  int64_t encoded_width() const {
    return kind == Kind::Numeric ? 1 : static_cast<int64_t>(vocabulary.size());
  }
};

/// Ordered field descriptors plus the total encoded width. The default
/// schema encodes age + gender + T/N/M stages + overall stage + histology
/// into 27 columns.
struct ClinicalSchema {
  int version = 1;
  std::vector<FieldSpec> fields;

  int64_t encoded_width() const {
    int64_t w = 0;
    for (const auto& f : fields) w += f.encoded_width();
    return w;
  }
  static ClinicalSchema default_27();

  std::string to_json() const;
  static ClinicalSchema from_json(const std::string& text);
};

/// Numeric-field statistics keyed by field name, fitted on training rows.
struct ClinicalStats {
  std::map<std::string, NormalizationStats> numeric;
};

/// Raw clinical values for one patient, aligned with schema field order.
/// Empty string = missing.
using RawClinicalRow = std::vector<std::string>;

/// "" and "NA" read as missing; anything else must parse fully as a number.
std::optional<double> parse_numeric(const std::string& cell, const std::string& field_name);

/// Fits numeric-field statistics on training rows. Degenerate fields
/// (constant under minmax, zero spread under standard score) are rejected
/// with the field named.
ClinicalStats fit_clinical_stats(const ClinicalSchema& schema,
                                 std::span<const RawClinicalRow> training_rows);

std::vector<double> encode_clinical(const ClinicalSchema& schema, const ClinicalStats& stats,
                                    const RawClinicalRow& raw);

}  // namespace mmsurv
