#include "mmsurv/cohort.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace mmsurv {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

Cohort load_cohort(const std::filesystem::path& manifest_path) {
  std::ifstream f(manifest_path);
  if (!f) throw DataError("manifest not found: " + manifest_path.string());

  Cohort cohort;
  cohort.root = manifest_path.parent_path();

  const auto schema_path = cohort.root / "schema.json";
  if (std::filesystem::exists(schema_path)) {
    std::ifstream sf(schema_path);
    std::stringstream ss;
    ss << sf.rdbuf();
    cohort.schema = ClinicalSchema::from_json(ss.str());
  } else {
    cohort.schema = ClinicalSchema::default_27();
  }

  std::string line;
  if (!std::getline(f, line))
    throw DataError("manifest " + manifest_path.string() + ": missing header row");
  const auto header = split_csv_line(line);
  std::vector<std::string> expected{"patient_id", "survival_time_days", "event", "volume_path"};
  for (const auto& fs : cohort.schema.fields) expected.push_back(fs.name);
  if (header != expected) {
    std::string want;
    for (const auto& h : expected) want += (want.empty() ? "" : ",") + h;
    throw DataError("manifest " + manifest_path.string() + ": header must be exactly '" + want + "'");
  }

  std::vector<std::string> problems;
  std::set<std::string> seen_ids;
  size_t row_no = 1;
  while (std::getline(f, line)) {
    ++row_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != expected.size()) {
      problems.push_back("row " + std::to_string(row_no) + ": expected " +
                         std::to_string(expected.size()) + " columns, got " +
                         std::to_string(cells.size()));
      continue;
    }
    SurvivalRecord r;
    r.patient_id = cells[0];
    const std::string& time_cell = cells[1];
    const std::string& event_cell = cells[2];
    r.volume_path = cells[3];
    r.clinical_raw.assign(cells.begin() + 4, cells.end());

    const bool time_missing = time_cell.empty() || time_cell == "NA";
    const bool event_missing = event_cell.empty() || event_cell == "NA";
    if (time_missing && event_missing) {
      problems.push_back("row " + std::to_string(row_no) + " (" + r.patient_id +
                         "): lacks both survival time and event status");
      continue;
    }
    if (time_missing || event_missing) {
      problems.push_back("row " + std::to_string(row_no) + " (" + r.patient_id +
                         "): missing " + (time_missing ? "survival time" : "event status"));
      continue;
    }
    {
      const auto* b = time_cell.data();
      auto [p, ec] = std::from_chars(b, b + time_cell.size(), r.survival_time_days);
      if (ec != std::errc() || p != b + time_cell.size() || !(r.survival_time_days > 0.0) ||
          !std::isfinite(r.survival_time_days)) {
        problems.push_back("row " + std::to_string(row_no) + ": bad survival_time_days '" +
                           time_cell + "'");
        continue;
      }
    }
    if (event_cell == "0")
      r.event = 0;
    else if (event_cell == "1")
      r.event = 1;
    else {
      problems.push_back("row " + std::to_string(row_no) + ": event must be 0 or 1, got '" +
                         event_cell + "'");
      continue;
    }
    if (r.patient_id.empty()) {
      problems.push_back("row " + std::to_string(row_no) + ": empty patient_id");
      continue;
    }
    if (!seen_ids.insert(r.patient_id).second) {
      problems.push_back("row " + std::to_string(row_no) + ": duplicate patient_id '" +
                         r.patient_id + "'");
      continue;
    }
    if (!std::filesystem::exists(cohort.resolve_volume(r))) {
      problems.push_back("row " + std::to_string(row_no) + ": volume file not found: " +
                         cohort.resolve_volume(r).string());
      continue;
    }
    cohort.records.push_back(std::move(r));
  }

  if (!problems.empty()) {
    std::string msg = "manifest " + manifest_path.string() + ": rejected " +
                      std::to_string(problems.size()) + " row(s):";
    for (const auto& p : problems) msg += "\n  " + p;
    throw DataError(msg);
  }
  return cohort;
}

FoldPlan split_folds(const Cohort& cohort, int k, uint64_t seed) {
  const auto n = cohort.records.size();
  if (k < 2) throw ShapeError("split_folds: k must be >= 2");
  if (n < static_cast<size_t>(k))
    throw ShapeError("split_folds: cohort of " + std::to_string(n) +
                     " patients is smaller than k=" + std::to_string(k));

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(derive_seed(seed, 0x0f01d5));
  rng.shuffle(order);

  // chunk i covers [i*n/k, (i+1)*n/k): sizes differ by at most one patient
  std::vector<std::vector<std::string>> chunks(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    const size_t lo = n * static_cast<size_t>(i) / static_cast<size_t>(k);
    const size_t hi = n * static_cast<size_t>(i + 1) / static_cast<size_t>(k);
    for (size_t j = lo; j < hi; ++j)
      chunks[static_cast<size_t>(i)].push_back(cohort.records[order[j]].patient_id);
  }

  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  plan.train_ids.resize(static_cast<size_t>(k));
  plan.val_ids.resize(static_cast<size_t>(k));
  plan.test_ids.resize(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    plan.test_ids[static_cast<size_t>(i)] = chunks[static_cast<size_t>(i)];
    plan.val_ids[static_cast<size_t>(i)] = chunks[static_cast<size_t>((i + 1) % k)];
    for (int j = 0; j < k; ++j) {
      if (j == i || j == (i + 1) % k) continue;
      auto& tr = plan.train_ids[static_cast<size_t>(i)];
      tr.insert(tr.end(), chunks[static_cast<size_t>(j)].begin(),
                chunks[static_cast<size_t>(j)].end());
    }
  }
  return plan;
}

namespace {

// Fraction censored when censoring times are U(0, c): E[min(T, c)] / c.
double censored_fraction_at(const std::vector<double>& t, double c) {
  double acc = 0.0;
  for (double ti : t) acc += std::min(ti, c);
  return acc / (c * static_cast<double>(t.size()));
}

// Monotone in c, so bisection finds the horizon hitting the target rate.
double calibrate_censor_horizon(const std::vector<double>& t, double rate) {
  double lo = 1e-9, hi = 1e-9;
  for (double ti : t) hi = std::max(hi, ti);
  hi *= 1e6;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (censored_fraction_at(t, mid) > rate)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

SynthSummary generate_synthetic_cohort(const SynthSpec& spec,
                                       const std::filesystem::path& out_dir) {
  if (spec.n < 10) throw ShapeError("generate_synthetic_cohort: need n >= 10");
  if (spec.image_weight < 0 || spec.clinical_weight < 0 || spec.noise_sd < 0)
    throw ShapeError("generate_synthetic_cohort: weights and noise_sd must be >= 0");
  if (spec.censor_rate >= 1.0 || spec.censor_rate < 0.0)
    throw ShapeError("generate_synthetic_cohort: censor_rate must lie in [0, 1)");
  for (int64_t d : spec.volume_shape)
    if (d < 2) throw ShapeError("generate_synthetic_cohort: volume dims must be >= 2");

  std::filesystem::create_directories(out_dir / "volumes");

  Rng factors_rng(derive_seed(spec.seed, 1));
  Rng noise_rng(derive_seed(spec.seed, 2));
  Rng censor_rng(derive_seed(spec.seed, 3));
  Rng voxel_rng(derive_seed(spec.seed, 4));
  Rng clinical_rng(derive_seed(spec.seed, 5));

  const auto n = static_cast<size_t>(spec.n);
  std::vector<double> img(n), clin(n), event_time(n), radius(n);
  constexpr double kBaseDays = 1200.0;
  for (size_t i = 0; i < n; ++i) {
    img[i] = factors_rng.uniform(0.0, 1.0);
    clin[i] = factors_rng.uniform(0.0, 1.0);
    const double risk = spec.image_weight * img[i] + spec.clinical_weight * clin[i];
    const double noise =
        spec.noise_sd > 0.0 ? std::exp(noise_rng.normal(0.0, spec.noise_sd)) : 1.0;
    event_time[i] = kBaseDays * std::exp(-risk) * noise;
  }

  std::vector<double> observed(n);
  std::vector<int> event(n, 1);
  int64_t censored = 0;
  if (spec.censor_rate > 0.0) {
    const double horizon = calibrate_censor_horizon(event_time, spec.censor_rate);
    for (size_t i = 0; i < n; ++i) {
      const double c = censor_rng.uniform(0.0, horizon);
      if (c < event_time[i]) {
        observed[i] = c;
        event[i] = 0;
        ++censored;
      } else {
        observed[i] = event_time[i];
      }
    }
  } else {
    observed = event_time;
  }

  const ClinicalSchema schema = ClinicalSchema::default_27();
  {
    std::ofstream sf(out_dir / "schema.json");
    if (!sf) throw DataError("cannot write schema.json in " + out_dir.string());
    sf << schema.to_json();
  }

  const int id_width = std::max<int>(4, static_cast<int>(std::to_string(spec.n - 1).size()));
  auto patient_id = [&](size_t i) {
    std::string digits = std::to_string(i);
    return "p" + std::string(static_cast<size_t>(id_width) - digits.size(), '0') + digits;
  };

  std::ofstream mf(out_dir / "manifest.csv");
  std::ofstream tf(out_dir / "truth.csv");
  if (!mf || !tf) throw DataError("cannot write cohort files in " + out_dir.string());
  mf << "patient_id,survival_time_days,event,volume_path";
  for (const auto& fs : schema.fields) mf << "," << fs.name;
  mf << "\n";
  tf << "patient_id,image_factor,blob_radius,clinical_factor,event_time_days\n";

  const auto [vd, vh, vw] = spec.volume_shape;
  for (size_t i = 0; i < n; ++i) {
    // Tumor blob: high image risk = small, bright blob. The recorded radius
    // is therefore monotone decreasing in the risk factor, and survival
    // time is monotone increasing in the radius.
    Volume3D vol = Volume3D::zeros(spec.volume_shape);
    const double sd = (0.10 + 0.18 * (1.0 - img[i])) * static_cast<double>(vd);
    const double sh = (0.10 + 0.18 * (1.0 - img[i])) * static_cast<double>(vh);
    const double sw = (0.10 + 0.18 * (1.0 - img[i])) * static_cast<double>(vw);
    radius[i] = (sd + sh + sw) / 3.0;
    const double amp = 0.5 + 0.5 * img[i];
    const double cd = (static_cast<double>(vd) - 1.0) / 2.0;
    const double ch = (static_cast<double>(vh) - 1.0) / 2.0;
    const double cw = (static_cast<double>(vw) - 1.0) / 2.0;
    for (int64_t d = 0; d < vd; ++d)
      for (int64_t h = 0; h < vh; ++h)
        for (int64_t w = 0; w < vw; ++w) {
          const double rd = (static_cast<double>(d) - cd) / sd;
          const double rh = (static_cast<double>(h) - ch) / sh;
          const double rw = (static_cast<double>(w) - cw) / sw;
          const double blob = amp * std::exp(-0.5 * (rd * rd + rh * rh + rw * rw));
          vol.at(d, h, w) = static_cast<float>(blob + voxel_rng.normal(0.0, 0.02));
        }
    const std::string vol_rel = "volumes/" + patient_id(i) + ".json";
    save_volume(vol, out_dir / vol_rel);

    // Clinical fields: age and stages track the clinical risk factor.
    const double jitter = std::clamp(clin[i] + clinical_rng.normal(0.0, 0.06), 0.0, 0.999);
    std::string age;
    if (spec.age_missing_rate > 0.0 &&
        clinical_rng.uniform(0.0, 1.0) < spec.age_missing_rate) {
      age = "";
    } else {
      age = format_double(std::round(38.0 + 42.0 * clin[i] +
                                     clinical_rng.normal(0.0, 1.5)));
    }
    const char* genders[] = {"male", "female"};
    const char* t_stages[] = {"T1", "T2", "T3", "T4"};
    const char* n_stages[] = {"N0", "N1", "N2", "N3"};
    const char* overall[] = {"I", "II", "IIIa", "IIIb", "IV"};
    const char* histologies[] = {"adenocarcinoma", "squamous_cell", "large_cell", "nos", "other"};
    const bool rare = clinical_rng.uniform(0.0, 1.0) < 0.02;
    RawClinicalRow row{
        age,
        genders[clinical_rng.uniform_int(0, 1)],
        rare ? "Tx" : t_stages[static_cast<int>(jitter * 4.0)],
        rare ? "Nx" : n_stages[static_cast<int>(jitter * 4.0)],
        rare ? "Mx" : (jitter < 0.7 ? "M0" : "M1"),
        rare ? "unknown" : overall[static_cast<int>(jitter * 5.0)],
        histologies[clinical_rng.uniform_int(0, 4)],
    };

    mf << patient_id(i) << "," << format_double(observed[i]) << "," << event[i] << ","
       << vol_rel;
    for (const auto& cell : row) mf << "," << cell;
    mf << "\n";
    tf << patient_id(i) << "," << format_double(img[i]) << "," << format_double(radius[i])
       << "," << format_double(clin[i]) << "," << format_double(event_time[i]) << "\n";
  }
  mf.close();
  tf.close();

  return SynthSummary{spec.n, static_cast<double>(censored) / static_cast<double>(spec.n)};
}

}  // namespace mmsurv
