#include "mmsurv/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>

namespace mmsurv {

void apply_desk_scale(ModelConfig& mc, TrainConfig& tc) {
  tc.epochs = 50;
  tc.batch_size = 16;
  mc.base_channels = 8;
  mc.volume_shape = {8, 24, 24};
  tc.desk_scale = true;
}

double lr_at(int epoch, const TrainConfig& config) {
  if (epoch < 0) throw ShapeError("lr_at: epoch must be >= 0");
  return config.lr0 *
         std::pow(config.lr_decay_factor, static_cast<double>(epoch / config.lr_decay_every));
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::vector<float> prepare_volume(const Cohort& cohort, const SurvivalRecord& rec,
                                  const std::array<int64_t, 3>& target) {
  Volume3D vol = load_volume(cohort.resolve_volume(rec));
  if (vol.dims != target) vol = resize_volume(vol, target);
  vol = intensity_normalize(vol);
  return std::move(vol.voxels);
}

std::vector<float> to_float(const std::vector<double>& v) {
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i]);
  return out;
}

}  // namespace

FoldData prepare_fold(const Cohort& cohort, const FoldPlan& plan, int fold,
                      const ModelConfig& model_config, bool augment) {
  if (fold < 0 || fold >= plan.k) throw ShapeError("prepare_fold: fold index out of range");
  std::map<std::string, size_t> index;
  for (size_t i = 0; i < cohort.records.size(); ++i)
    index[cohort.records[i].patient_id] = i;
  auto lookup = [&](const std::string& id) -> const SurvivalRecord& {
    auto it = index.find(id);
    if (it == index.end()) throw DataError("fold plan references unknown patient '" + id + "'");
    return cohort.records[it->second];
  };

  const auto& train_ids = plan.train_ids[static_cast<size_t>(fold)];
  const auto& val_ids = plan.val_ids[static_cast<size_t>(fold)];
  const auto& test_ids = plan.test_ids[static_cast<size_t>(fold)];

  // Fold-local statistics: clinical stats over all training patients, label
  // stats over the uncensored training survival times.
  std::vector<RawClinicalRow> train_rows;
  std::vector<double> uncensored_times;
  for (const auto& id : train_ids) {
    const auto& r = lookup(id);
    train_rows.push_back(r.clinical_raw);
    if (r.event == 1) uncensored_times.push_back(r.survival_time_days);
  }
  if (uncensored_times.empty())
    throw TrainError("prepare_fold: training fold " + std::to_string(fold) +
                     " has no uncensored patients");
  const auto clinical_stats = fit_clinical_stats(cohort.schema, train_rows);

  FoldData data;
  data.fold_index = fold;
  data.volume_shape = model_config.volume_shape;
  data.clinical_width = cohort.schema.encoded_width();
  data.clinical_stats = clinical_stats;
  data.label_stats = fit_stats(uncensored_times);
  if (!(data.label_stats.max > data.label_stats.min))
    throw TrainError("prepare_fold: degenerate survival-time range in training fold");

  const bool need_volumes = model_config.use_image;

  for (const auto& id : train_ids) {
    const auto& r = lookup(id);
    if (r.event != 1) continue;  // censored samples never reach the loss
    const auto clinical = to_float(encode_clinical(cohort.schema, clinical_stats, r.clinical_raw));
    const float label = static_cast<float>(minmax_scale(r.survival_time_days, data.label_stats));
    if (need_volumes) {
      Volume3D vol;
      vol.dims = data.volume_shape;
      vol.voxels = prepare_volume(cohort, r, data.volume_shape);
      if (augment) {
        for (auto& variant : augment_x8(vol))
          data.train.push_back({std::move(variant.voxels), clinical, label, 1});
      } else {
        data.train.push_back({std::move(vol.voxels), clinical, label, 1});
      }
    } else {
      data.train.push_back({{}, clinical, label, 1});
    }
  }

  auto make_eval = [&](const std::string& id) {
    const auto& r = lookup(id);
    EvalPatient p;
    p.patient_id = id;
    p.clinical = to_float(encode_clinical(cohort.schema, clinical_stats, r.clinical_raw));
    p.label = static_cast<float>(minmax_scale(r.survival_time_days, data.label_stats));
    p.event = r.event;
    if (need_volumes) p.volume = prepare_volume(cohort, r, data.volume_shape);
    return p;
  };
  for (const auto& id : val_ids) {
    auto p = make_eval(id);
    if (p.event == 1) data.val.push_back(std::move(p));  // validation loss uses uncensored only
  }
  for (const auto& id : test_ids) data.test.push_back(make_eval(id));
  return data;
}

nlohmann::ordered_json pipeline_stats_to_json(const PipelineStats& s) {
  auto stats_json = [](const NormalizationStats& st) {
    return nlohmann::ordered_json{
        {"min", st.min}, {"max", st.max}, {"mean", st.mean}, {"std", st.std}};
  };
  nlohmann::ordered_json j;
  j["label_stats"] = stats_json(s.label);
  j["clinical_numeric_stats"] = nlohmann::ordered_json::object();
  for (const auto& [name, st] : s.clinical.numeric)
    j["clinical_numeric_stats"][name] = stats_json(st);
  return j;
}

PipelineStats pipeline_stats_from_json(const nlohmann::json& j) {
  auto stats_from = [](const nlohmann::json& sj) {
    NormalizationStats st;
    st.min = sj.at("min").get<double>();
    st.max = sj.at("max").get<double>();
    st.mean = sj.at("mean").get<double>();
    st.std = sj.at("std").get<double>();
    return st;
  };
  PipelineStats s;
  s.label = stats_from(j.at("label_stats"));
  for (const auto& [name, sj] : j.at("clinical_numeric_stats").items())
    s.clinical.numeric[name] = stats_from(sj);
  return s;
}

std::vector<EvalPatient> prepare_eval_patients(const Cohort& cohort, const PipelineStats& stats,
                                               const ModelConfig& model_config) {
  std::vector<EvalPatient> out;
  out.reserve(cohort.records.size());
  for (const auto& r : cohort.records) {
    EvalPatient p;
    p.patient_id = r.patient_id;
    p.clinical = to_float(encode_clinical(cohort.schema, stats.clinical, r.clinical_raw));
    p.label = static_cast<float>(minmax_scale(r.survival_time_days, stats.label));
    p.event = r.event;
    if (model_config.use_image)
      p.volume = prepare_volume(cohort, r, model_config.volume_shape);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

struct Batch {
  Tensor<float> volumes;   // [B,1,D,H,W] (empty tensor when image unused)
  Tensor<float> clinical;  // [B,K]
  Tensor<float> labels;    // [B]
};

template <class SampleT>
Batch assemble_batch(const std::vector<SampleT>& samples, std::span<const size_t> idx,
                     const std::array<int64_t, 3>& vshape, int64_t k, bool with_volumes) {
  const auto b = static_cast<int64_t>(idx.size());
  Batch out;
  if (with_volumes) {
    const int64_t vn = vshape[0] * vshape[1] * vshape[2];
    out.volumes = Tensor<float>::zeros({b, 1, vshape[0], vshape[1], vshape[2]});
    for (int64_t i = 0; i < b; ++i)
      std::copy_n(samples[idx[static_cast<size_t>(i)]].volume.data(), vn,
                  out.volumes.data() + i * vn);
  }
  out.clinical = Tensor<float>::zeros({b, k});
  out.labels = Tensor<float>::zeros({b});
  for (int64_t i = 0; i < b; ++i) {
    const auto& s = samples[idx[static_cast<size_t>(i)]];
    std::copy_n(s.clinical.data(), k, out.clinical.data() + i * k);
    out.labels.data()[i] = s.label;
  }
  return out;
}

double l2_penalty(std::vector<Tensor<float>>& weights) {
  double acc = 0;
  for (auto& w : weights)
    for (int64_t i = 0; i < w.numel(); ++i)
      acc += static_cast<double>(w.data()[i]) * static_cast<double>(w.data()[i]);
  return acc;
}

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> buffers;
};

Snapshot take_snapshot(MultimodalModel<float>& m) {
  Snapshot s;
  for (auto& [name, t] : m.named_parameters()) s.params.push_back(t.values());
  for (auto& [name, v] : m.named_buffers()) s.buffers.push_back(*v);
  return s;
}

void restore_snapshot(MultimodalModel<float>& m, const Snapshot& s) {
  size_t i = 0;
  for (auto& [name, t] : m.named_parameters()) t.values() = s.params[i++];
  size_t j = 0;
  for (auto& [name, v] : m.named_buffers()) *v = s.buffers[j++];
}

}  // namespace

std::vector<float> predict(MultimodalModel<float>& model, const std::vector<EvalPatient>& patients,
                           const std::array<int64_t, 3>& volume_shape, int64_t clinical_width) {
  std::vector<float> out;
  out.reserve(patients.size());
  const size_t chunk = 64;
  for (size_t lo = 0; lo < patients.size(); lo += chunk) {
    const size_t hi = std::min(lo + chunk, patients.size());
    std::vector<size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    auto batch = assemble_batch(patients, idx, volume_shape, clinical_width,
                                model.config.use_image);
    Graph<float> g;
    auto pred = model.forward(g, batch.volumes, batch.clinical, BnMode::Eval);
    for (int64_t i = 0; i < pred.numel(); ++i) out.push_back(pred.data()[i]);
  }
  return out;
}

EvalResult evaluate_fold(MultimodalModel<float>& model, const FoldData& data) {
  const auto preds = predict(model, data.test, data.volume_shape, data.clinical_width);
  std::vector<EvalSample> samples(preds.size());
  double se = 0;
  int64_t events = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    samples[i] = EvalSample{static_cast<double>(preds[i]),
                            static_cast<double>(data.test[i].label), data.test[i].event};
    if (data.test[i].event == 1) {
      const double d = static_cast<double>(data.test[i].label) - preds[i];
      se += d * d;
      ++events;
    }
  }
  EvalResult r;
  r.c_index = c_index(samples);
  r.mae = mae_uncensored(samples);
  r.mse = events > 0 ? se / static_cast<double>(events) : 0.0;
  return r;
}

RunReport train_fold(MultimodalModel<float>& model, const FoldData& data, const TrainConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  if (data.train.empty()) throw TrainError("train_fold: no uncensored training samples");

  RunReport report;
  report.fold = data.fold_index;
  report.model_config = model.config;
  report.train_config = config;

  auto params = model.parameters();
  auto penalized = model.penalized_weights();
  AdamState<float> opt;

  Snapshot best;
  double best_val = std::numeric_limits<double>::infinity();

  std::vector<size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), size_t{0});

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config);
    opt.hyper.lr = lr;
    report.lr_curve.push_back(lr);

    Rng shuffle_rng(derive_seed(config.seed, 0xe90c'0000ULL + static_cast<uint64_t>(epoch) * 31 +
                                                 static_cast<uint64_t>(data.fold_index)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0;
    int64_t seen = 0;
    for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(config.batch_size)) {
      const size_t hi = std::min(lo + static_cast<size_t>(config.batch_size), order.size());
      if (hi - lo < 2) {
        // batch statistics need at least two samples
        ++report.dropped_trailing_batches;
        std::cerr << "[train] fold " << data.fold_index << " epoch " << epoch
                  << ": dropping trailing batch of size " << (hi - lo) << "\n";
        continue;
      }
      std::span<const size_t> idx(order.data() + lo, hi - lo);
      for (size_t ii : idx)
        if (data.train[ii].event != 1) ++report.censored_in_loss_count;
      auto batch = assemble_batch(data.train, idx, data.volume_shape, data.clinical_width,
                                  model.config.use_image);
      Graph<float> g;
      auto pred = model.forward(g, batch.volumes, batch.clinical, BnMode::Train);
      auto loss = mse_l2_objective(g, pred, batch.labels, penalized, config.lambda);
      const double loss_v = static_cast<double>(loss.data()[0]);
      if (!std::isfinite(loss_v))
        throw TrainError("train_fold: non-finite loss at epoch " + std::to_string(epoch));
      zero_grads(params);
      g.backward(loss);
      adam_step(params, opt);
      epoch_loss += loss_v * static_cast<double>(hi - lo);
      seen += static_cast<int64_t>(hi - lo);
    }
    if (seen == 0) throw TrainError("train_fold: every batch was dropped; reduce batch_size");
    report.train_loss.push_back(epoch_loss / static_cast<double>(seen));

    // Validation objective on uncensored validation patients, eval mode.
    double val = std::numeric_limits<double>::quiet_NaN();
    if (!data.val.empty()) {
      const auto preds = predict(model, data.val, data.volume_shape, data.clinical_width);
      double se = 0;
      for (size_t i = 0; i < preds.size(); ++i) {
        const double d = static_cast<double>(data.val[i].label) - preds[i];
        se += d * d;
      }
      val = se / static_cast<double>(preds.size()) + config.lambda * l2_penalty(penalized);
    }
    report.val_loss.push_back(val);
    if (!data.val.empty() && val < best_val) {
      best_val = val;
      best = take_snapshot(model);
      report.best_epoch = epoch;
    }
  }

  if (report.best_epoch >= 0) restore_snapshot(model, best);

  if (!data.test.empty()) {
    const auto result = evaluate_fold(model, data);
    report.test_c_index = result.c_index;
    report.test_mae = result.mae;
    report.test_mse = result.mse;
  }
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

CvReport run_cv(const Cohort& cohort, const ModelConfig& mc, const TrainConfig& tc, int k) {
  const auto plan = split_folds(cohort, k, tc.seed);
  CvReport cv;
  for (int fold = 0; fold < k; ++fold) {
    auto model = MultimodalModel<float>::build(mc, derive_seed(tc.seed, 0xf01d + static_cast<uint64_t>(fold)));
    auto data = prepare_fold(cohort, plan, fold, mc, tc.augment_train);
    cv.folds.push_back(train_fold(model, data, tc));
  }
  auto mean_sd = [&](auto getter) {
    double mean = 0;
    for (const auto& r : cv.folds) mean += getter(r);
    mean /= static_cast<double>(cv.folds.size());
    double sq = 0;
    for (const auto& r : cv.folds) sq += (getter(r) - mean) * (getter(r) - mean);
    const double sd = std::sqrt(sq / static_cast<double>(cv.folds.size()));
    return std::pair<double, double>{mean, sd};
  };
  std::tie(cv.mean_c_index, cv.sd_c_index) =
      mean_sd([](const RunReport& r) { return r.test_c_index; });
  std::tie(cv.mean_mae, cv.sd_mae) = mean_sd([](const RunReport& r) { return r.test_mae; });
  return cv;
}

std::vector<AblationCell> enumerate_ablation_cells(const ModelConfig& base,
                                                   const AblationAxes& axes) {
  std::vector<AblationCell> cells;
  for (int depth : axes.depths) {
    for (const bool multi : {false, true}) {
      ModelConfig mc = base;
      mc.resnet_depth = depth;
      mc.use_image = true;
      mc.use_clinical = multi;
      cells.push_back({mc, "depth_modality", "r3d" + std::to_string(depth),
                       multi ? "multi" : "image", cells.size()});
    }
  }
  for (int64_t ratio : axes.ratios) {
    for (const bool hidden : {true, false}) {
      ModelConfig mc = base;
      mc.resnet_depth = axes.ratio_depth;
      mc.use_image = true;
      mc.use_clinical = true;
      mc.image_proj_dim = ratio;
      mc.head_hidden = hidden;
      cells.push_back({mc, "ratio_head",
                       std::to_string(ratio) + ":" + std::to_string(mc.clinical_dim),
                       hidden ? "hidden" : "no_hidden", cells.size()});
    }
  }
  return cells;
}

AblationRow run_ablation_cell(const Cohort& cohort, const FoldPlan& plan,
                              const AblationCell& cell, const AblationAxes& axes,
                              const TrainConfig& tc) {
  auto model = MultimodalModel<float>::build(cell.config, derive_seed(tc.seed, 0xab1a + cell.index));
  auto data = prepare_fold(cohort, plan, axes.fold, cell.config, tc.augment_train);
  auto report = train_fold(model, data, tc);
  return {cell.table, cell.key, cell.variant, report.test_mse, report.test_c_index,
          report.test_mae};
}

std::vector<AblationRow> run_ablation(const Cohort& cohort, const ModelConfig& base,
                                      const AblationAxes& axes, const TrainConfig& tc) {
  const auto plan = split_folds(cohort, 5, tc.seed);
  std::vector<AblationRow> rows;
  for (const auto& cell : enumerate_ablation_cells(base, axes))
    rows.push_back(run_ablation_cell(cohort, plan, cell, axes, tc));
  return rows;
}

nlohmann::ordered_json run_report_to_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["fold"] = r.fold;
  j["c_index"] = r.test_c_index;
  j["mae"] = r.test_mae;
  j["test_mse"] = r.test_mse;
  j["loss_curve"] = {{"train", r.train_loss}, {"val", r.val_loss}, {"lr", r.lr_curve}};
  j["best_epoch"] = r.best_epoch;
  j["censored_in_loss_count"] = r.censored_in_loss_count;
  j["dropped_trailing_batches"] = r.dropped_trailing_batches;
  j["wall_seconds"] = r.wall_seconds;
  j["config"] = {{"model", model_config_to_json(r.model_config)},
                 {"train",
                  {{"epochs", r.train_config.epochs},
                   {"batch_size", r.train_config.batch_size},
                   {"lr0", r.train_config.lr0},
                   {"lr_decay_factor", r.train_config.lr_decay_factor},
                   {"lr_decay_every", r.train_config.lr_decay_every},
                   {"lambda", r.train_config.lambda},
                   {"seed", r.train_config.seed},
                   {"augment_train", r.train_config.augment_train},
                   {"desk_scale", r.train_config.desk_scale}}}};
  return j;
}

nlohmann::ordered_json cv_report_to_json(const CvReport& r) {
  nlohmann::ordered_json j;
  j["folds"] = nlohmann::ordered_json::array();
  for (const auto& f : r.folds) j["folds"].push_back(run_report_to_json(f));
  j["mean"] = {{"c_index", r.mean_c_index}, {"mae", r.mean_mae}};
  j["sd"] = {{"c_index", r.sd_c_index}, {"mae", r.sd_mae}};
  return j;
}

void write_run_report(const RunReport& r, const std::filesystem::path& dir,
                      const std::string& stem) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / (stem + ".json"));
    if (!f) throw DataError("cannot write report to " + dir.string());
    f << run_report_to_json(r).dump(2) << "\n";
  }
  std::ofstream c(dir / (stem + "_loss_curve.csv"));
  c << "epoch,train_loss,val_loss\n";
  for (size_t e = 0; e < r.train_loss.size(); ++e)
    c << e << "," << format_double(r.train_loss[e]) << "," << format_double(r.val_loss[e])
      << "\n";
}

void write_ablation_tables(const std::vector<AblationRow>& rows,
                           const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  std::ofstream csv(dir / "ablation.csv");
  csv << "table,key,variant,loss,c_index,mae\n";
  for (const auto& r : rows) {
    csv << r.table << "," << r.key << "," << r.variant << "," << format_double(r.loss) << ","
        << format_double(r.c_index) << "," << format_double(r.mae) << "\n";
    j.push_back({{"table", r.table},
                 {"key", r.key},
                 {"variant", r.variant},
                 {"loss", r.loss},
                 {"c_index", r.c_index},
                 {"mae", r.mae}});
  }
  std::ofstream jf(dir / "ablation.json");
  jf << j.dump(2) << "\n";
}

}  // namespace mmsurv
