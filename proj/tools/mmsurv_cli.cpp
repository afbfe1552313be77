// mmsurv: survival-analysis pipeline driver.
// Subcommands: synth, train, eval, baseline, ablate.
// stdout carries machine-readable results only; logs go to stderr.
// Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

#include <sys/wait.h>
#include <unistd.h>

#include <charconv>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmsurv/classical.hpp"
#include "mmsurv/train.hpp"

using namespace mmsurv;
namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// Options shared by train and ablate; fed by the [train]/[ablate] sections
// of the global --config TOML plus command-line overrides.
struct PipelineOptions {
  std::string manifest;
  std::string out = "runs/out";
  ModelConfig mc;
  TrainConfig tc;
  int folds = 5;
  int fold = -1;  // train a single fold when >= 0
  int jobs = 1;
  bool desk_scale = false;
  std::array<int64_t, 3> vshape{8, 24, 24};

  void add_common(CLI::App* cmd) {
    cmd->add_option("--manifest", manifest, "cohort manifest CSV")->required();
    cmd->add_option("--out", out, "output directory");
    cmd->add_option("--epochs", tc.epochs, "training epochs");
    cmd->add_option("--batch-size", tc.batch_size, "batch size");
    cmd->add_option("--lr0", tc.lr0, "initial learning rate");
    cmd->add_option("--lr-decay-factor", tc.lr_decay_factor, "learning-rate decay factor");
    cmd->add_option("--lr-decay-every", tc.lr_decay_every, "epochs between decays");
    cmd->add_option("--lambda", tc.lambda, "L2 penalty coefficient");
    cmd->add_flag("--augment-train,!--no-augment-train", tc.augment_train,
                  "x8 augmentation of training folds");
    cmd->add_option("--folds", folds, "number of cross-validation folds");
    cmd->add_option("--depth", mc.resnet_depth, "image branch depth (18/34/50/101)");
    cmd->add_flag("--use-image,!--no-image", mc.use_image, "enable the image branch");
    cmd->add_flag("--use-clinical,!--no-clinical", mc.use_clinical,
                  "enable the clinical branch");
    cmd->add_option("--image-proj-dim", mc.image_proj_dim, "image feature width at fusion");
    cmd->add_flag("--head-hidden,!--no-head-hidden", mc.head_hidden,
                  "hidden layer in the survival head");
    cmd->add_option("--base-channels", mc.base_channels, "stem channel count");
    cmd->add_option("--volume-d", vshape[0], "volume depth after resize");
    cmd->add_option("--volume-h", vshape[1], "volume height after resize");
    cmd->add_option("--volume-w", vshape[2], "volume width after resize");
  }

  // Desk scale provides the baseline; anything given explicitly (command
  // line or config file) wins over it.
  void finalize(CLI::App* cmd, uint64_t seed, int jobs_n, bool desk) {
    tc.seed = seed;
    jobs = jobs_n;
    desk_scale = desk;
    if (desk_scale) {
      ModelConfig dm;
      TrainConfig dt;
      apply_desk_scale(dm, dt);
      if (!cmd->count("--epochs")) tc.epochs = dt.epochs;
      if (!cmd->count("--batch-size")) tc.batch_size = dt.batch_size;
      if (!cmd->count("--base-channels")) mc.base_channels = dm.base_channels;
      if (!cmd->count("--volume-d")) vshape[0] = dm.volume_shape[0];
      if (!cmd->count("--volume-h")) vshape[1] = dm.volume_shape[1];
      if (!cmd->count("--volume-w")) vshape[2] = dm.volume_shape[2];
      tc.desk_scale = true;
    }
    mc.volume_shape = vshape;
    mc.lambda = tc.lambda;
    mc.validate();
    tc.validate();
  }
};

// Forks one child per task (up to `jobs` in flight). Children write their
// results to disk and exit; a nonzero child status fails the whole run.
int run_parallel(int jobs, const std::vector<std::function<int()>>& tasks) {
  if (jobs <= 1) {
    for (const auto& t : tasks) {
      const int rc = t();
      if (rc != 0) return rc;
    }
    return 0;
  }
  size_t next = 0;
  int in_flight = 0;
  int failures = 0;
  while (next < tasks.size() || in_flight > 0) {
    while (next < tasks.size() && in_flight < jobs) {
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        int rc = 1;
        try {
          rc = tasks[next]();
        } catch (const std::exception& e) {
          std::cerr << "[worker] " << e.what() << "\n";
        }
        _exit(rc);
      }
      ++next;
      ++in_flight;
    }
    int status = 0;
    if (waitpid(-1, &status, 0) > 0) {
      --in_flight;
      if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failures;
    }
  }
  return failures == 0 ? 0 : 1;
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path))
    throw CLI::ValidationError(what, "file not found: " + path);
}

int cmd_synth(const SynthSpec& spec, const std::string& out_dir) {
  const auto summary = generate_synthetic_cohort(spec, out_dir);
  nlohmann::ordered_json j;
  j["n"] = summary.n;
  j["censored_fraction"] = summary.censored_fraction;
  j["manifest"] = (fs::path(out_dir) / "manifest.csv").string();
  std::cout << j.dump() << "\n";
  return 0;
}

int train_one_fold(const Cohort& cohort, const FoldPlan& plan, int fold,
                   const PipelineOptions& opt) {
  auto model =
      MultimodalModel<float>::build(opt.mc, derive_seed(opt.tc.seed, 0xf01d + static_cast<uint64_t>(fold)));
  auto data = prepare_fold(cohort, plan, fold, opt.mc, opt.tc.augment_train);
  auto report = train_fold(model, data, opt.tc);
  const auto out = fs::path(opt.out);
  write_run_report(report, out, "fold" + std::to_string(fold));
  PipelineStats stats{data.clinical_stats, data.label_stats};
  save_checkpoint(out / ("fold" + std::to_string(fold) + "_ckpt"), model,
                  pipeline_stats_to_json(stats));
  std::cerr << "[train] fold " << fold << ": c_index=" << report.test_c_index
            << " mae=" << report.test_mae << " (" << report.wall_seconds << "s)\n";
  return 0;
}

int cmd_train(const PipelineOptions& opt) {
  require_file(opt.manifest, "--manifest");
  const auto cohort = load_cohort(opt.manifest);
  const auto plan = split_folds(cohort, opt.folds, opt.tc.seed);
  fs::create_directories(opt.out);

  std::vector<int> fold_list;
  if (opt.fold >= 0) {
    if (opt.fold >= opt.folds) throw CLI::ValidationError("--fold", "fold index out of range");
    fold_list.push_back(opt.fold);
  } else {
    for (int f = 0; f < opt.folds; ++f) fold_list.push_back(f);
  }

  std::vector<std::function<int()>> tasks;
  for (int f : fold_list)
    tasks.push_back([&, f]() { return train_one_fold(cohort, plan, f, opt); });
  if (const int rc = run_parallel(opt.jobs, tasks); rc != 0) return rc;

  // Aggregate from the per-fold reports on disk.
  nlohmann::ordered_json summary;
  summary["folds"] = nlohmann::ordered_json::array();
  double mean_c = 0, mean_mae = 0;
  for (int f : fold_list) {
    std::ifstream rf(fs::path(opt.out) / ("fold" + std::to_string(f) + ".json"));
    nlohmann::ordered_json r;
    rf >> r;
    mean_c += r["c_index"].get<double>();
    mean_mae += r["mae"].get<double>();
    summary["folds"].push_back(r);
  }
  const auto nf = static_cast<double>(fold_list.size());
  double sd_c = 0, sd_mae = 0;
  for (const auto& r : summary["folds"]) {
    sd_c += std::pow(r["c_index"].get<double>() - mean_c / nf, 2);
    sd_mae += std::pow(r["mae"].get<double>() - mean_mae / nf, 2);
  }
  summary["mean"] = {{"c_index", mean_c / nf}, {"mae", mean_mae / nf}};
  summary["sd"] = {{"c_index", std::sqrt(sd_c / nf)}, {"mae", std::sqrt(sd_mae / nf)}};
  {
    std::ofstream sf(fs::path(opt.out) / "summary.json");
    sf << summary.dump(2) << "\n";
  }
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest,
             const std::string& format) {
  require_file(checkpoint + ".json", "--checkpoint");
  require_file(manifest, "--manifest");
  const auto ckpt_manifest = read_checkpoint_manifest(checkpoint);
  const auto mc = model_config_from_json(ckpt_manifest.at("model"));
  if (!ckpt_manifest.contains("pipeline"))
    throw DataError("checkpoint lacks pipeline statistics; cannot score new manifests");
  const auto stats = pipeline_stats_from_json(ckpt_manifest.at("pipeline"));

  auto model = MultimodalModel<float>::build(mc, 0);
  load_checkpoint(checkpoint, model);

  const auto cohort = load_cohort(manifest);
  auto patients = prepare_eval_patients(cohort, stats, mc);
  const auto preds = predict(model, patients, mc.volume_shape, cohort.schema.encoded_width());
  std::vector<EvalSample> samples(preds.size());
  for (size_t i = 0; i < preds.size(); ++i)
    samples[i] = EvalSample{static_cast<double>(preds[i]),
                            static_cast<double>(patients[i].label), patients[i].event};
  const double c = c_index(samples);
  const double mae = mae_uncensored(samples);
  if (format == "csv") {
    std::cout << "c_index,mae\n" << format_double(c) << "," << format_double(mae) << "\n";
  } else {
    nlohmann::ordered_json j;
    j["c_index"] = c;
    j["mae"] = mae;
    j["n"] = samples.size();
    std::cout << j.dump() << "\n";
  }
  return 0;
}

// Design matrix for the Cox baseline: raw numeric columns (cox_fit
// standardizes internally, and its guard zeroes constant columns exactly);
// categoricals one-hot with the first vocabulary level dropped as the
// reference so the matrix has full column rank. Missing numerics take the
// column mean.
std::pair<Eigen::MatrixXd, std::vector<std::string>> cox_design_matrix(const Cohort& cohort) {
  const auto n = cohort.records.size();
  std::vector<std::string> names;
  std::vector<std::vector<double>> columns;

  for (size_t fi = 0; fi < cohort.schema.fields.size(); ++fi) {
    const auto& f = cohort.schema.fields[fi];
    if (f.kind == FieldSpec::Kind::Numeric) {
      std::vector<std::optional<double>> raw(n);
      for (size_t i = 0; i < n; ++i)
        raw[i] = parse_numeric(cohort.records[i].clinical_raw[fi], f.name);
      names.push_back(f.name);
      columns.push_back(impute_mean(raw, raw));
    } else {
      for (size_t v = 1; v < f.vocabulary.size(); ++v) {
        names.push_back(f.name + "=" + f.vocabulary[v]);
        std::vector<double> col(n, 0.0);
        for (size_t i = 0; i < n; ++i)
          if (cohort.records[i].clinical_raw[fi] == f.vocabulary[v]) col[i] = 1.0;
        columns.push_back(std::move(col));
      }
    }
  }

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(names.size()));
  for (size_t c = 0; c < columns.size(); ++c)
    for (size_t i = 0; i < n; ++i)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = columns[c][i];
  return {x, names};
}

int cmd_baseline(const std::string& manifest, const std::string& method,
                 const std::string& format) {
  require_file(manifest, "--manifest");
  const auto cohort = load_cohort(manifest);
  std::vector<double> times;
  std::vector<int> events;
  for (const auto& r : cohort.records) {
    times.push_back(r.survival_time_days);
    events.push_back(r.event);
  }

  if (method == "km" || method == "na") {
    const auto sf = method == "km" ? kaplan_meier(times, events) : nelson_aalen(times, events);
    std::cout << "time,value\n0," << format_double(sf.initial_value) << "\n";
    for (size_t i = 0; i < sf.knots.size(); ++i)
      std::cout << format_double(sf.knots[i]) << "," << format_double(sf.values[i]) << "\n";
    return 0;
  }
  if (method == "cox") {
    auto [x, names] = cox_design_matrix(cohort);
    const auto model = cox_fit(x, times, events);
    const auto scores = cox_risk_scores(model, x);
    std::vector<EvalSample> samples(times.size());
    for (size_t i = 0; i < times.size(); ++i)
      samples[i] = EvalSample{scores(static_cast<Eigen::Index>(i)), times[i], events[i]};
    const double c = c_index(samples);
    if (format == "csv") {
      std::cout << "covariate,coefficient\n";
      for (size_t i = 0; i < names.size(); ++i)
        std::cout << names[i] << "," << format_double(model.coefficients(static_cast<Eigen::Index>(i)))
                  << "\n";
      std::cout << "c_index," << format_double(c) << "\n";
    } else {
      nlohmann::ordered_json j;
      j["coefficients"] = nlohmann::ordered_json::object();
      for (size_t i = 0; i < names.size(); ++i)
        j["coefficients"][names[i]] = model.coefficients(static_cast<Eigen::Index>(i));
      j["c_index"] = c;
      j["iterations"] = model.n_iterations;
      j["log_partial_likelihood"] = model.final_log_partial_likelihood;
      std::cout << j.dump() << "\n";
    }
    return 0;
  }
  throw CLI::ValidationError("--method", "unknown method '" + method + "' (use km, na or cox)");
}

int cmd_ablate(const PipelineOptions& opt, const AblationAxes& axes_in) {
  require_file(opt.manifest, "--manifest");
  AblationAxes axes = axes_in;
  for (int d : axes.depths)
    if (d != 18 && d != 34 && d != 50 && d != 101)
      throw CLI::ValidationError("--depths", "depth must be one of 18, 34, 50, 101");
  for (int64_t r : axes.ratios)
    if (r < 1) throw CLI::ValidationError("--ratios", "ratios must be positive");
  if (axes.fold < 0 || axes.fold >= opt.folds)
    throw CLI::ValidationError("--ablate-fold", "fold index out of range");

  const auto cohort = load_cohort(opt.manifest);
  const auto plan = split_folds(cohort, opt.folds, opt.tc.seed);
  const auto cells_dir = fs::path(opt.out) / "ablation_cells";
  fs::create_directories(cells_dir);

  // every cell's configuration must be buildable before any cell trains
  const auto cells = enumerate_ablation_cells(opt.mc, axes);
  for (const auto& cell : cells) cell.config.validate();
  std::vector<std::function<int()>> tasks;
  for (const auto& cell : cells) {
    const auto cell_path = cells_dir / (cell.table + "_" + cell.key + "_" + cell.variant + ".json");
    if (fs::exists(cell_path)) {
      std::cerr << "[ablate] skipping completed cell " << cell_path.filename().string() << "\n";
      continue;
    }
    tasks.push_back([&, cell, cell_path]() {
      const auto row = run_ablation_cell(cohort, plan, cell, axes, opt.tc);
      nlohmann::ordered_json j;
      j["table"] = row.table;
      j["key"] = row.key;
      j["variant"] = row.variant;
      j["loss"] = row.loss;
      j["c_index"] = row.c_index;
      j["mae"] = row.mae;
      std::ofstream f(cell_path);
      f << j.dump(2) << "\n";
      std::cerr << "[ablate] " << row.key << "/" << row.variant << ": c_index=" << row.c_index
                << "\n";
      return 0;
    });
  }
  if (const int rc = run_parallel(opt.jobs, tasks); rc != 0) return rc;

  // Reassemble the full tables from the cell files.
  std::vector<AblationRow> rows;
  for (const auto& cell : cells) {
    const auto cell_path = cells_dir / (cell.table + "_" + cell.key + "_" + cell.variant + ".json");
    std::ifstream f(cell_path);
    if (!f) throw DataError("missing ablation cell result: " + cell_path.string());
    nlohmann::json j;
    f >> j;
    rows.push_back({j["table"], j["key"], j["variant"], j["loss"], j["c_index"], j["mae"]});
  }
  write_ablation_tables(rows, opt.out);
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : rows)
    out.push_back({{"table", r.table},
                   {"key", r.key},
                   {"variant", r.variant},
                   {"loss", r.loss},
                   {"c_index", r.c_index},
                   {"mae", r.mae}});
  std::cout << out.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal survival-analysis pipeline"};
  app.require_subcommand(1);

  // global flags; the config file addresses subcommand options through
  // [synth]/[train]/[ablate] sections and global keys at top level
  app.set_config("--config", "", "TOML config with [synth]/[train]/[ablate] sections");
  uint64_t seed = 1;
  int jobs = 1;
  std::string format = "json";
  bool desk_scale = false;
  app.add_option("--seed", seed, "master seed");
  app.add_option("--jobs", jobs, "parallel fold/cell processes")->check(CLI::Range(1, 64));
  app.add_option("--format", format, "output format")->check(CLI::IsMember({"json", "csv"}));
  app.add_flag("--desk-scale", desk_scale, "shrunken profile (epochs 50, batch 16, ...)");
  app.allow_config_extras(false);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
  synth->fallthrough();
  SynthSpec spec;
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--n", spec.n, "number of patients");
  synth->add_option("--volume-d", spec.volume_shape[0], "volume depth");
  synth->add_option("--volume-h", spec.volume_shape[1], "volume height");
  synth->add_option("--volume-w", spec.volume_shape[2], "volume width");
  synth->add_option("--image-weight", spec.image_weight, "image risk weight");
  synth->add_option("--clinical-weight", spec.clinical_weight, "clinical risk weight");
  synth->add_option("--noise-sd", spec.noise_sd, "lognormal noise sigma");
  synth->add_option("--censor-rate", spec.censor_rate, "target censored fraction");
  synth->add_option("--age-missing-rate", spec.age_missing_rate, "fraction of missing ages");

  // train
  auto* train = app.add_subcommand("train", "train with patient-level cross-validation");
  train->fallthrough();
  PipelineOptions topt;
  topt.add_common(train);
  train->add_option("--fold", topt.fold, "train a single fold index");

  // eval
  auto* eval = app.add_subcommand("eval", "score a checkpoint against a manifest");
  eval->fallthrough();
  std::string eval_ckpt, eval_manifest;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path prefix")->required();
  eval->add_option("--manifest", eval_manifest, "cohort manifest CSV")->required();

  // baseline
  auto* baseline = app.add_subcommand("baseline", "classical estimators on a manifest");
  baseline->fallthrough();
  std::string b_manifest, b_method;
  baseline->add_option("--manifest", b_manifest, "cohort manifest CSV")->required();
  baseline->add_option("--method", b_method, "km, na or cox")->required();

  // ablate
  auto* ablate = app.add_subcommand("ablate", "architecture ablation sweeps");
  ablate->fallthrough();
  PipelineOptions aopt;
  AblationAxes axes;
  aopt.add_common(ablate);
  ablate->add_option("--depths", axes.depths, "depth axis for the depth x modality grid");
  ablate->add_option("--ratios", axes.ratios, "image widths for the ratio x head grid");
  ablate->add_option("--ratio-depth", axes.ratio_depth, "fixed depth for the ratio grid");
  ablate->add_option("--ablate-fold", axes.fold, "fold used for every cell");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*synth) {
      spec.seed = seed;
      return cmd_synth(spec, synth_out);
    }
    if (*train) {
      topt.finalize(train, seed, jobs, desk_scale);
      return cmd_train(topt);
    }
    if (*eval) return cmd_eval(eval_ckpt, eval_manifest, format);
    if (*baseline) return cmd_baseline(b_manifest, b_method, format);
    if (*ablate) {
      aopt.finalize(ablate, seed, jobs, desk_scale);
      return cmd_ablate(aopt, axes);
    }
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
