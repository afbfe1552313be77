#include "mmsurv/preprocess.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include <json.hpp>

namespace mmsurv {

NormalizationStats fit_stats(std::span<const double> values) {
  if (values.empty()) throw ShapeError("fit_stats: empty column");
  NormalizationStats s;
  s.min = values[0];
  s.max = values[0];
  double sum = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw ShapeError("fit_stats: non-finite value");
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
    sum += v;
  }
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

double minmax_scale(double x, const NormalizationStats& stats) {
  if (!(stats.max > stats.min))
    throw ShapeError("minmax_scale: degenerate range (max must exceed min)");
  const double y = (x - stats.min) / (stats.max - stats.min);
  return std::clamp(y, 0.0, 1.0);
}

double minmax_unscale(double scaled, const NormalizationStats& stats) {
  if (!(stats.max > stats.min)) throw ShapeError("minmax_unscale: degenerate range");
  return stats.min + scaled * (stats.max - stats.min);
}

double standard_score(double x, const NormalizationStats& stats) {
  if (!(stats.std > 0.0)) throw ShapeError("standard_score: zero std");
  return (x - stats.mean) / stats.std;
}

std::vector<double> one_hot(const std::string& value, std::span<const std::string> vocabulary,
                            const std::string& field_name) {
  std::vector<double> out(vocabulary.size(), 0.0);
  if (value.empty()) return out;  // missing token
  for (size_t i = 0; i < vocabulary.size(); ++i)
    if (vocabulary[i] == value) {
      out[i] = 1.0;
      return out;
    }
  throw DataError("unknown category '" + value + "' for field '" + field_name + "'");
}

std::vector<double> impute_mean(std::span<const std::optional<double>> column,
                                std::span<const std::optional<double>> training_subset) {
  double sum = 0.0;
  size_t count = 0;
  for (const auto& v : training_subset)
    if (v) {
      sum += *v;
      ++count;
    }
  if (count == 0) throw DataError("impute_mean: training column is entirely missing");
  const double mean = sum / static_cast<double>(count);
  std::vector<double> out;
  out.reserve(column.size());
  for (const auto& v : column) out.push_back(v ? *v : mean);
  return out;
}

Volume3D resize_volume(const Volume3D& vol, std::array<int64_t, 3> target) {
  if (vol.numel() <= 0) throw ShapeError("resize_volume: empty volume");
  for (int64_t t : target)
    if (t < 1) throw ShapeError("resize_volume: target dims must be >= 1");
  Volume3D out = Volume3D::zeros(target);
  // Corner-aligned source coordinate for output index i: i*(n_in-1)/(n_out-1).
  auto src_coord = [](int64_t i, int64_t n_out, int64_t n_in) -> double {
    if (n_out == 1 || n_in == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(n_in - 1) /
           static_cast<double>(n_out - 1);
  };
  for (int64_t d = 0; d < target[0]; ++d) {
    const double fd = src_coord(d, target[0], vol.dims[0]);
    const int64_t d0 = static_cast<int64_t>(fd);
    const int64_t d1 = std::min(d0 + 1, vol.dims[0] - 1);
    const double wd = fd - static_cast<double>(d0);
    for (int64_t h = 0; h < target[1]; ++h) {
      const double fh = src_coord(h, target[1], vol.dims[1]);
      const int64_t h0 = static_cast<int64_t>(fh);
      const int64_t h1 = std::min(h0 + 1, vol.dims[1] - 1);
      const double wh = fh - static_cast<double>(h0);
      for (int64_t w = 0; w < target[2]; ++w) {
        const double fw = src_coord(w, target[2], vol.dims[2]);
        const int64_t w0 = static_cast<int64_t>(fw);
        const int64_t w1 = std::min(w0 + 1, vol.dims[2] - 1);
        const double ww = fw - static_cast<double>(w0);
        const double c000 = vol.at(d0, h0, w0), c001 = vol.at(d0, h0, w1);
        const double c010 = vol.at(d0, h1, w0), c011 = vol.at(d0, h1, w1);
        const double c100 = vol.at(d1, h0, w0), c101 = vol.at(d1, h0, w1);
        const double c110 = vol.at(d1, h1, w0), c111 = vol.at(d1, h1, w1);
        const double c00 = c000 * (1 - ww) + c001 * ww;
        const double c01 = c010 * (1 - ww) + c011 * ww;
        const double c10 = c100 * (1 - ww) + c101 * ww;
        const double c11 = c110 * (1 - ww) + c111 * ww;
        const double c0 = c00 * (1 - wh) + c01 * wh;
        const double c1 = c10 * (1 - wh) + c11 * wh;
        out.at(d, h, w) = static_cast<float>(c0 * (1 - wd) + c1 * wd);
      }
    }
  }
  return out;
}

Volume3D intensity_normalize(const Volume3D& vol) {
  if (vol.numel() <= 0) throw ShapeError("intensity_normalize: empty volume");
  float lo = vol.voxels[0], hi = vol.voxels[0];
  for (float v : vol.voxels) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Volume3D out = vol;
  if (!(hi > lo)) {
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    return out;
  }
  const float scale = 1.0f / (hi - lo);
  for (auto& v : out.voxels) v = (v - lo) * scale;
  return out;
}

namespace {

// 90-degree rotation in the H-W plane about the depth axis; requires H == W.
Volume3D rot90_hw(const Volume3D& v) {
  const int64_t s = v.dims[1];
  Volume3D out = Volume3D::zeros(v.dims);
  for (int64_t d = 0; d < v.dims[0]; ++d)
    for (int64_t h = 0; h < s; ++h)
      for (int64_t w = 0; w < s; ++w) out.at(d, h, w) = v.at(d, s - 1 - w, h);
  return out;
}

Volume3D flip_w(const Volume3D& v) {
  Volume3D out = Volume3D::zeros(v.dims);
  for (int64_t d = 0; d < v.dims[0]; ++d)
    for (int64_t h = 0; h < v.dims[1]; ++h)
      for (int64_t w = 0; w < v.dims[2]; ++w) out.at(d, h, w) = v.at(d, h, v.dims[2] - 1 - w);
  return out;
}

}  // namespace

std::vector<Volume3D> augment_x8(const Volume3D& vol) {
  if (vol.dims[1] != vol.dims[2])
    throw ShapeError("augment_x8: requires H == W for shape-preserving rotations, got H=" +
                     std::to_string(vol.dims[1]) + " W=" + std::to_string(vol.dims[2]));
  std::vector<Volume3D> out;
  out.reserve(8);
  for (int flip = 0; flip < 2; ++flip) {
    Volume3D base = flip ? flip_w(vol) : vol;
    out.push_back(base);
    for (int r = 1; r < 4; ++r) {
      base = rot90_hw(base);
      out.push_back(base);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clinical schema
// ---------------------------------------------------------------------------

ClinicalSchema ClinicalSchema::default_27() {
  using K = FieldSpec::Kind;
  using N = FieldSpec::Norm;
  ClinicalSchema s;
  s.version = 1;
  s.fields = {
      {"age", K::Numeric, {}, N::MinMax},
      {"gender", K::Categorical, {"male", "female"}, N::MinMax},
      {"t_stage", K::Categorical, {"T1", "T2", "T3", "T4", "Tx"}, N::MinMax},
      {"n_stage", K::Categorical, {"N0", "N1", "N2", "N3", "Nx"}, N::MinMax},
      {"m_stage", K::Categorical, {"M0", "M1", "Mx"}, N::MinMax},
      {"overall_stage", K::Categorical, {"I", "II", "IIIa", "IIIb", "IV", "unknown"}, N::MinMax},
      {"histology",
       K::Categorical,
       {"adenocarcinoma", "squamous_cell", "large_cell", "nos", "other"},
       N::MinMax},
  };
  return s;
}

std::string ClinicalSchema::to_json() const {
  nlohmann::ordered_json j;
  j["schema_version"] = version;
  j["fields"] = nlohmann::ordered_json::array();
  for (const auto& f : fields) {
    nlohmann::ordered_json fj;
    fj["name"] = f.name;
    fj["kind"] = f.kind == FieldSpec::Kind::Numeric ? "numeric" : "categorical";
    if (f.kind == FieldSpec::Kind::Categorical)
      fj["vocabulary"] = f.vocabulary;
    else
      fj["normalization"] = f.normalization == FieldSpec::Norm::MinMax ? "minmax" : "standard";
    j["fields"].push_back(fj);
  }
  j["encoded_width"] = encoded_width();
  return j.dump(2) + "\n";
}

ClinicalSchema ClinicalSchema::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("clinical schema: invalid JSON: ") + e.what());
  }
  ClinicalSchema s;
  s.version = j.value("schema_version", 0);
  if (s.version != 1)
    throw DataError("clinical schema: unsupported schema_version " + std::to_string(s.version));
  for (const auto& fj : j.at("fields")) {
    FieldSpec f;
    f.name = fj.at("name").get<std::string>();
    const std::string kind = fj.at("kind").get<std::string>();
    if (kind == "numeric") {
      f.kind = FieldSpec::Kind::Numeric;
      const std::string norm = fj.value("normalization", "minmax");
      if (norm == "minmax")
        f.normalization = FieldSpec::Norm::MinMax;
      else if (norm == "standard")
        f.normalization = FieldSpec::Norm::Standard;
      else
        throw DataError("clinical schema: unknown normalization '" + norm + "'");
    } else if (kind == "categorical") {
      f.kind = FieldSpec::Kind::Categorical;
      f.vocabulary = fj.at("vocabulary").get<std::vector<std::string>>();
      if (f.vocabulary.empty())
        throw DataError("clinical schema: empty vocabulary for field '" + f.name + "'");
    } else {
      throw DataError("clinical schema: unknown kind '" + kind + "'");
    }
    s.fields.push_back(std::move(f));
  }
  if (j.contains("encoded_width") &&
      j["encoded_width"].get<int64_t>() != s.encoded_width())
    throw DataError("clinical schema: encoded_width does not match fields");
  return s;
}

std::optional<double> parse_numeric(const std::string& cell, const std::string& field_name) {
  if (cell.empty() || cell == "NA") return std::nullopt;
  double v = 0.0;
  const auto* begin = cell.data();
  const auto* end = cell.data() + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc() || ptr != end)
    throw DataError("field '" + field_name + "': cannot parse numeric value '" + cell + "'");
  return v;
}

ClinicalStats fit_clinical_stats(const ClinicalSchema& schema,
                                 std::span<const RawClinicalRow> training_rows) {
  ClinicalStats out;
  for (size_t fi = 0; fi < schema.fields.size(); ++fi) {
    const auto& f = schema.fields[fi];
    if (f.kind != FieldSpec::Kind::Numeric) continue;
    std::vector<double> present;
    for (const auto& row : training_rows) {
      if (row.size() != schema.fields.size())
        throw DataError("clinical row width does not match schema");
      if (auto v = parse_numeric(row[fi], f.name)) present.push_back(*v);
    }
    if (present.empty())
      throw DataError("field '" + f.name + "': entirely missing in training rows");
    const auto stats = fit_stats(present);
    if (f.normalization == FieldSpec::Norm::MinMax && !(stats.max > stats.min))
      throw DataError("field '" + f.name + "': constant in training rows, cannot min-max scale");
    if (f.normalization == FieldSpec::Norm::Standard && !(stats.std > 0.0))
      throw DataError("field '" + f.name + "': zero spread in training rows");
    out.numeric[f.name] = stats;
  }
  return out;
}

std::vector<double> encode_clinical(const ClinicalSchema& schema, const ClinicalStats& stats,
                                    const RawClinicalRow& raw) {
  if (raw.size() != schema.fields.size())
    throw DataError("clinical row width does not match schema");
  std::vector<double> out;
  out.reserve(static_cast<size_t>(schema.encoded_width()));
  for (size_t fi = 0; fi < schema.fields.size(); ++fi) {
    const auto& f = schema.fields[fi];
    if (f.kind == FieldSpec::Kind::Numeric) {
      const auto& st = stats.numeric.at(f.name);
      const auto v = parse_numeric(raw[fi], f.name);
      const double x = v ? *v : st.mean;  // mean imputation from training stats
      out.push_back(f.normalization == FieldSpec::Norm::MinMax ? minmax_scale(x, st)
                                                               : standard_score(x, st));
    } else {
      const auto bits = one_hot(raw[fi], f.vocabulary, f.name);
      out.insert(out.end(), bits.begin(), bits.end());
    }
  }
  return out;
}

}  // namespace mmsurv
