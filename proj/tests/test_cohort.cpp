#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "mmsurv/cohort.hpp"

using namespace mmsurv;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() /
           ("mmsurv_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p);
  f << content;
}

// Minimal manifest with volumes on disk, for loader tests.
std::filesystem::path tiny_cohort(const std::string& tag,
                                  const std::vector<std::string>& rows) {
  auto dir = temp_dir(tag);
  std::filesystem::create_directories(dir / "volumes");
  Volume3D v = Volume3D::zeros({2, 3, 3});
  for (size_t i = 0; i < v.voxels.size(); ++i) v.voxels[i] = static_cast<float>(i);
  save_volume(v, dir / "volumes" / "v0.json");
  std::string manifest =
      "patient_id,survival_time_days,event,volume_path,age,gender,t_stage,n_stage,m_stage,"
      "overall_stage,histology\n";
  for (const auto& r : rows) manifest += r + "\n";
  write_file(dir / "manifest.csv", manifest);
  return dir / "manifest.csv";
}

}  // namespace

TEST_CASE("volume files round-trip bit-exactly") {
  auto dir = temp_dir("vol");
  Volume3D v = Volume3D::zeros({4, 6, 5});
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-10, 10);
  for (auto& x : v.voxels) x = u(rng);
  save_volume(v, dir / "a.json");
  auto back = load_volume(dir / "a.json");
  CHECK(back.dims == v.dims);
  CHECK(back.voxels == v.voxels);  // bit-identical float32
}

TEST_CASE("volume loader rejects size mismatches and bad dtypes") {
  auto dir = temp_dir("volbad");
  Volume3D v = Volume3D::zeros({2, 3, 4});
  save_volume(v, dir / "a.json");

  // truncate the blob
  std::filesystem::resize_file(dir / "a.raw", 10);
  CHECK_THROWS_WITH_AS((void)load_volume(dir / "a.json"), doctest::Contains("size"), DataError);

  write_file(dir / "b.json", "{\"dims\":[2,3,4],\"dtype\":\"f64le\",\"data\":\"a.raw\"}");
  CHECK_THROWS_WITH_AS((void)load_volume(dir / "b.json"), doctest::Contains("dtype"), DataError);

  // header dims [2,3,4] with exactly 24 floats is accepted
  save_volume(Volume3D::zeros({2, 3, 4}), dir / "c.json");
  CHECK(load_volume(dir / "c.json").numel() == 24);
}

TEST_CASE("load_cohort accepts valid rows and empty manifests") {
  auto manifest = tiny_cohort(
      "ok", {"p1,100,1,volumes/v0.json,55,male,T1,N0,M0,I,nos",
             "p2,200.5,0,volumes/v0.json,,female,T2,N1,M1,IV,other"});
  auto c = load_cohort(manifest);
  CHECK(c.records.size() == 2);
  CHECK(c.records[0].event == 1);
  CHECK(c.records[1].survival_time_days == 200.5);
  CHECK(c.records[1].clinical_raw[0].empty());  // missing age kept raw

  auto empty = tiny_cohort("empty", {});
  CHECK(load_cohort(empty).records.empty());
}

TEST_CASE("load_cohort rejects malformed rows with row numbers") {
  auto dup = tiny_cohort("dup", {"p1,100,1,volumes/v0.json,55,male,T1,N0,M0,I,nos",
                                 "p1,90,1,volumes/v0.json,60,male,T1,N0,M0,I,nos"});
  CHECK_THROWS_WITH_AS((void)load_cohort(dup), doctest::Contains("duplicate"), DataError);

  auto lacking = tiny_cohort("lack", {"p1,,,volumes/v0.json,55,male,T1,N0,M0,I,nos"});
  CHECK_THROWS_WITH_AS((void)load_cohort(lacking), doctest::Contains("lacks both"), DataError);

  auto missing_vol = tiny_cohort("novol", {"p1,100,1,volumes/zzz.json,55,male,T1,N0,M0,I,nos"});
  CHECK_THROWS_WITH_AS((void)load_cohort(missing_vol), doctest::Contains("not found"), DataError);

  auto bad_event = tiny_cohort("bade", {"p1,100,7,volumes/v0.json,55,male,T1,N0,M0,I,nos"});
  CHECK_THROWS_WITH_AS((void)load_cohort(bad_event), doctest::Contains("row 2"), DataError);

  // reject count is reported
  auto two_bad = tiny_cohort("twobad", {"p1,100,7,volumes/v0.json,55,male,T1,N0,M0,I,nos",
                                        "p2,-5,1,volumes/v0.json,55,male,T1,N0,M0,I,nos"});
  CHECK_THROWS_WITH_AS((void)load_cohort(two_bad), doctest::Contains("2 row(s)"), DataError);
}

TEST_CASE("split_folds partitions patients with each in test exactly once") {
  auto spec = SynthSpec{};
  spec.n = 23;
  spec.seed = 77;
  spec.volume_shape = {2, 4, 4};
  auto dir = temp_dir("folds");
  generate_synthetic_cohort(spec, dir);
  auto cohort = load_cohort(dir / "manifest.csv");

  auto plan = split_folds(cohort, 5, 123);
  std::set<std::string> all_ids;
  for (const auto& r : cohort.records) all_ids.insert(r.patient_id);

  std::multiset<std::string> test_union;
  for (int f = 0; f < 5; ++f) {
    const auto& test = plan.test_ids[static_cast<size_t>(f)];
    const auto& val = plan.val_ids[static_cast<size_t>(f)];
    const auto& train = plan.train_ids[static_cast<size_t>(f)];
    CHECK(test.size() + val.size() + train.size() == all_ids.size());

    // sizes within +-1 patient of 20/20/60 percent
    const double n = static_cast<double>(all_ids.size());
    CHECK(std::abs(static_cast<double>(test.size()) - 0.2 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(val.size()) - 0.2 * n) <= 1.0);
    CHECK(std::abs(static_cast<double>(train.size()) - 0.6 * n) <= 2.0);

    // no overlap within a fold
    std::set<std::string> seen;
    for (const auto* group : {&test, &val, &train})
      for (const auto& id : *group) CHECK(seen.insert(id).second);
    CHECK(seen == all_ids);
    for (const auto& id : test) test_union.insert(id);
  }
  // exact partition across folds: every patient tests exactly once
  CHECK(test_union.size() == all_ids.size());
  for (const auto& id : all_ids) CHECK(test_union.count(id) == 1);

  // determinism
  auto plan2 = split_folds(cohort, 5, 123);
  CHECK(plan2.test_ids == plan.test_ids);
  CHECK(plan2.train_ids == plan.train_ids);

  // cohort smaller than k
  SynthSpec small = spec;
  small.n = 10;
  auto dir2 = temp_dir("folds_small");
  generate_synthetic_cohort(small, dir2);
  auto tiny = load_cohort(dir2 / "manifest.csv");
  CHECK_THROWS_AS((void)split_folds(tiny, 11, 1), ShapeError);

  // 10 patients, k=5: every test fold has exactly 2
  auto plan10 = split_folds(tiny, 5, 9);
  for (const auto& t : plan10.test_ids) CHECK(t.size() == 2);
}

TEST_CASE("synthetic cohort is reproducible byte for byte") {
  SynthSpec spec;
  spec.n = 12;
  spec.volume_shape = {2, 4, 4};
  spec.seed = 31;
  auto d1 = temp_dir("synth_a");
  auto d2 = temp_dir("synth_b");
  auto s1 = generate_synthetic_cohort(spec, d1);
  auto s2 = generate_synthetic_cohort(spec, d2);
  CHECK(s1.n == 12);
  CHECK(s1.censored_fraction == s2.censored_fraction);
  for (const auto& name : {"manifest.csv", "schema.json", "truth.csv"})
    CHECK(slurp(d1 / name) == slurp(d2 / name));
  for (auto& e : std::filesystem::directory_iterator(d1 / "volumes")) {
    const auto rel = e.path().filename();
    CHECK(slurp(e.path()) == slurp(d2 / "volumes" / rel));
  }
}

TEST_CASE("synthetic censoring rate lands near the target") {
  double total = 0;
  int trials = 0;
  for (uint64_t seed : {1u, 2u, 3u}) {
    SynthSpec spec;
    spec.n = 500;
    spec.volume_shape = {2, 4, 4};
    spec.censor_rate = 0.12;
    spec.seed = seed;
    auto dir = temp_dir("censor" + std::to_string(seed));
    auto s = generate_synthetic_cohort(spec, dir);
    CHECK(std::abs(s.censored_fraction - 0.12) <= 0.04);
    total += s.censored_fraction;
    ++trials;
  }
  CHECK(std::abs(total / trials - 0.12) <= 0.04);
}

TEST_CASE("zero censor rate marks every record an event") {
  SynthSpec spec;
  spec.n = 30;
  spec.volume_shape = {2, 4, 4};
  spec.censor_rate = 0.0;
  auto dir = temp_dir("nocensor");
  auto s = generate_synthetic_cohort(spec, dir);
  CHECK(s.censored_fraction == 0.0);
  auto cohort = load_cohort(dir / "manifest.csv");
  for (const auto& r : cohort.records) CHECK(r.event == 1);

  SynthSpec bad = spec;
  bad.censor_rate = 1.0;
  CHECK_THROWS_AS((void)generate_synthetic_cohort(bad, dir), ShapeError);
}

TEST_CASE("with pure image signal, survival time is monotone in blob radius") {
  SynthSpec spec;
  spec.n = 40;
  spec.volume_shape = {2, 4, 4};
  spec.noise_sd = 0.0;
  spec.censor_rate = 0.0;
  spec.clinical_weight = 0.0;
  spec.image_weight = 1.0;
  auto dir = temp_dir("mono");
  generate_synthetic_cohort(spec, dir);

  // rank correlation between blob radius and event time from truth.csv
  std::ifstream tf(dir / "truth.csv");
  std::string line;
  std::getline(tf, line);  // header
  std::vector<double> radius, time;
  while (std::getline(tf, line)) {
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    radius.push_back(std::stod(cells[2]));
    time.push_back(std::stod(cells[4]));
  }
  REQUIRE(radius.size() == 40);
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < idx.size(); ++i) r[idx[i]] = static_cast<double>(i);
    return r;
  };
  auto ra = ranks(radius), rt = ranks(time);
  // identical rank orderings = Spearman correlation exactly 1
  CHECK(ra == rt);
}
