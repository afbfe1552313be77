#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "fd_check.hpp"
#include "mmsurv/adam.hpp"
#include "mmsurv/autodiff.hpp"
#include "mmsurv/conv3d.hpp"

using namespace mmsurv;
using TD = Tensor<double>;

namespace {

std::mt19937_64 g_rng(2024);

TD random_tensor(Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = u(g_rng);
  return TD::from(std::move(shape), std::move(v), requires_grad);
}

// Keeps values away from zero so relu's kink cannot sit inside the
// finite-difference stencil.
TD random_tensor_away_from_zero(Shape shape) {
  std::uniform_real_distribution<double> u(0.2, 1.5);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : v) x = (sign(g_rng) ? 1.0 : -1.0) * u(g_rng);
  return TD::from(std::move(shape), std::move(v), true);
}

// Scalarizes an op output with data-dependent per-element weights so
// gradient checks see a non-uniform upstream gradient.
TD scalarize(Graph<double>& g, const TD& out, const TD& target) {
  auto flat = reshape(g, out, {out.numel()});
  return mse_l2_objective(g, flat, target, {}, 0.0);
}

}  // namespace

TEST_CASE("add forwards elementwise sums and errors on shape mismatch") {
  Graph<double> g;
  auto a = TD::from({2, 2}, {1, 2, 3, 4});
  auto b = TD::from({2, 2}, {10, 20, 30, 40});
  auto c = add(g, a, b);
  CHECK(c.values() == std::vector<double>{11, 22, 33, 44});
  CHECK_THROWS_AS((void)add(g, a, TD::zeros({3})), ShapeError);
}

TEST_CASE("relu semantics and subgradient at zero") {
  Graph<double> g;
  auto x = TD::from({4}, {-1.0, 0.0, 2.0, -0.5}, true);
  auto y = relu(g, x);
  CHECK(y.values() == std::vector<double>{0, 0, 2, 0});
  auto loss = mean_all(g, y);
  g.backward(loss);
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);  // subgradient 0 at exactly 0
  CHECK(x.grad()[2] == doctest::Approx(0.25));
}

TEST_CASE("sigmoid values and symmetry") {
  Graph<double> g;
  auto x = TD::from({1}, {0.0});
  CHECK(sigmoid(g, x).data()[0] == 0.5);
  for (double v : {0.5, 5.0, 50.0}) {
    auto p = sigmoid(g, TD::from({1}, {v}));
    auto m = sigmoid(g, TD::from({1}, {-v}));
    CHECK(p.data()[0] + m.data()[0] == doctest::Approx(1.0).epsilon(1e-15));
  }
  // stable at extreme magnitudes
  auto big = sigmoid(g, TD::from({2}, {700.0, -700.0}));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] == doctest::Approx(0.0));
}

TEST_CASE("linear identity and zero-weight cases") {
  Graph<double> g;
  auto x = TD::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto eye = TD::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto zero_b = TD::zeros({3});
  CHECK(linear(g, x, eye, zero_b).values() == x.values());

  auto w0 = TD::zeros({2, 3});
  auto b = TD::from({2}, {7, 9});
  auto out = linear(g, x, w0, b);
  CHECK(out.values() == std::vector<double>{7, 9, 7, 9});
}

TEST_CASE("elementwise and structural ops pass finite-difference checks") {
  std::uniform_int_distribution<int64_t> dim(1, 6);
  for (int rep = 0; rep < 20; ++rep) {
    const int64_t n = dim(g_rng), k = dim(g_rng);

    SUBCASE("") {}  // keep doctest quiet about empty body

    {  // add
      auto a = random_tensor({n, k});
      auto b = random_tensor({n, k});
      auto target = random_tensor({n * k}, -1, 1, false);
      auto forward = [&]() {
        Graph<double> g;
        return scalarize(g, add(g, a, b), target).data()[0];
      };
      Graph<double> g;
      auto loss = scalarize(g, add(g, a, b), target);
      a.zero_grad();
      b.zero_grad();
      g.backward(loss);
      CHECK(fd::fd_max_rel_error({a, b}, forward) <= 1e-4);
    }
    {  // relu
      auto x = random_tensor_away_from_zero({n, k});
      auto target = random_tensor({n * k}, -1, 1, false);
      auto forward = [&]() {
        Graph<double> g;
        return scalarize(g, relu(g, x), target).data()[0];
      };
      Graph<double> g;
      auto loss = scalarize(g, relu(g, x), target);
      x.zero_grad();
      g.backward(loss);
      CHECK(fd::fd_max_rel_error({x}, forward) <= 1e-4);
    }
    {  // sigmoid
      auto x = random_tensor({n, k}, -3, 3);
      auto target = random_tensor({n * k}, -1, 1, false);
      auto forward = [&]() {
        Graph<double> g;
        return scalarize(g, sigmoid(g, x), target).data()[0];
      };
      Graph<double> g;
      auto loss = scalarize(g, sigmoid(g, x), target);
      x.zero_grad();
      g.backward(loss);
      CHECK(fd::fd_max_rel_error({x}, forward) <= 1e-4);
    }
    {  // concat
      auto a = random_tensor({n, k});
      auto b = random_tensor({n, k + 1});
      auto target = random_tensor({n * (2 * k + 1)}, -1, 1, false);
      auto forward = [&]() {
        Graph<double> g;
        return scalarize(g, concat_features(g, a, b), target).data()[0];
      };
      Graph<double> g;
      auto loss = scalarize(g, concat_features(g, a, b), target);
      a.zero_grad();
      b.zero_grad();
      g.backward(loss);
      CHECK(fd::fd_max_rel_error({a, b}, forward) <= 1e-4);
    }
    {  // global_avg_pool
      auto x = random_tensor({n, k, 2, 3, 2});
      auto target = random_tensor({n * k}, -1, 1, false);
      auto forward = [&]() {
        Graph<double> g;
        return scalarize(g, global_avg_pool(g, x), target).data()[0];
      };
      Graph<double> g;
      auto loss = scalarize(g, global_avg_pool(g, x), target);
      x.zero_grad();
      g.backward(loss);
      CHECK(fd::fd_max_rel_error({x}, forward) <= 1e-4);
    }
    {  // linear
      const int64_t out_w = dim(g_rng);
      auto x = random_tensor({n, k});
      auto w = random_tensor({out_w, k});
      auto b = random_tensor({out_w});
      auto target = random_tensor({n * out_w}, -1, 1, false);
      auto forward = [&]() {
        Graph<double> g;
        return scalarize(g, linear(g, x, w, b), target).data()[0];
      };
      Graph<double> g;
      auto loss = scalarize(g, linear(g, x, w, b), target);
      x.zero_grad();
      w.zero_grad();
      b.zero_grad();
      g.backward(loss);
      CHECK(fd::fd_max_rel_error({x, w, b}, forward) <= 1e-4);
    }
    {  // mean_all and reshape
      auto x = random_tensor({n, k, 2});
      auto forward = [&]() {
        Graph<double> g;
        return mean_all(g, reshape(g, x, {n * k * 2})).data()[0];
      };
      Graph<double> g;
      auto loss = mean_all(g, reshape(g, x, {n * k * 2}));
      x.zero_grad();
      g.backward(loss);
      CHECK(fd::fd_max_rel_error({x}, forward) <= 1e-4);
    }
  }
}

TEST_CASE("batch_norm matches the hand-computed single-feature batch") {
  Graph<double> g;
  auto z = TD::from({3, 1}, {1, 2, 3}, true);
  auto gamma = TD::from({1}, {1.0}, true);
  auto beta = TD::from({1}, {0.0}, true);
  auto rs = RunningStats<double>::make(1);
  auto out = batch_norm(g, z, gamma, beta, 1e-8, BnMode::Train, rs);
  const double e = std::sqrt(1.5);  // 1/sqrt(2/3)
  CHECK(out.data()[0] == doctest::Approx(-e).epsilon(1e-7));
  CHECK(out.data()[1] == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(out.data()[2] == doctest::Approx(e).epsilon(1e-7));
  CHECK(out.data()[2] == doctest::Approx(1.2247448713).epsilon(1e-6));
}

TEST_CASE("batch_norm centers batches and collapses to beta when gamma is zero") {
  std::uniform_real_distribution<double> u(-5, 5);
  auto x = random_tensor({6, 4}, -5, 5);
  auto gamma = TD::full({4}, 1.0, true);
  auto beta = TD::zeros({4}, true);
  auto rs = RunningStats<double>::make(4);
  Graph<double> g;
  auto out = batch_norm(g, x, gamma, beta, 1e-5, BnMode::Train, rs);
  for (int64_t c = 0; c < 4; ++c) {
    double m = 0;
    for (int64_t r = 0; r < 6; ++r) m += out.data()[r * 4 + c];
    CHECK(std::abs(m / 6) <= 1e-6);
  }

  auto gz = TD::zeros({4}, true);
  auto b2 = TD::from({4}, {1, 2, 3, 4}, true);
  auto out2 = batch_norm(g, x, gz, b2, 1e-5, BnMode::Train, rs);
  for (int64_t r = 0; r < 6; ++r)
    for (int64_t c = 0; c < 4; ++c) CHECK(out2.data()[r * 4 + c] == b2.data()[c]);
}

TEST_CASE("batch_norm rejects degenerate train batches") {
  Graph<double> g;
  auto x = TD::from({1, 3}, {1, 2, 3});
  auto gamma = TD::full({3}, 1.0);
  auto beta = TD::zeros({3});
  auto rs = RunningStats<double>::make(3);
  CHECK_THROWS_AS((void)batch_norm(g, x, gamma, beta, 1e-5, BnMode::Train, rs), ShapeError);
  CHECK_NOTHROW((void)batch_norm(g, x, gamma, beta, 1e-5, BnMode::Eval, rs));
}

TEST_CASE("batch_norm eval mode uses running statistics") {
  auto x = random_tensor({8, 2}, -2, 2, false);
  auto gamma = TD::full({2}, 1.0);
  auto beta = TD::zeros({2});
  auto rs = RunningStats<double>::make(2);
  Graph<double> g;
  // run train mode many times on the same batch: running stats converge
  // to the batch statistics (unbiased variance)
  for (int i = 0; i < 200; ++i) (void)batch_norm(g, x, gamma, beta, 1e-9, BnMode::Train, rs);
  auto out = batch_norm(g, x, gamma, beta, 1e-9, BnMode::Eval, rs);
  for (int64_t c = 0; c < 2; ++c) {
    double mean = 0;
    for (int64_t r = 0; r < 8; ++r) mean += x.data()[r * 2 + c];
    mean /= 8;
    double var = 0;
    for (int64_t r = 0; r < 8; ++r) {
      const double d = x.data()[r * 2 + c] - mean;
      var += d * d;
    }
    var /= 7;  // unbiased in the running copy
    for (int64_t r = 0; r < 8; ++r)
      CHECK(out.data()[r * 2 + c] ==
            doctest::Approx((x.data()[r * 2 + c] - mean) / std::sqrt(var + 1e-9)).epsilon(1e-6));
  }
}

TEST_CASE("batch_norm passes finite-difference checks in both modes and ranks") {
  for (int rep = 0; rep < 20; ++rep) {
    std::uniform_int_distribution<int64_t> dim(2, 5);
    const int64_t n = dim(g_rng), c = dim(g_rng);
    const bool rank5 = rep % 2 == 0;
    const Shape xs = rank5 ? Shape{n, c, 2, 3, 2} : Shape{n, c};
    auto x = random_tensor(xs);
    auto gamma = random_tensor({c}, 0.5, 1.5);
    auto beta = random_tensor({c});
    auto rs = RunningStats<double>::make(c);
    const BnMode mode = rep % 3 == 0 ? BnMode::Eval : BnMode::Train;
    if (mode == BnMode::Eval)
      for (size_t i = 0; i < rs.var.size(); ++i) {
        rs.mean[i] = 0.1 * static_cast<double>(i);
        rs.var[i] = 0.5 + 0.2 * static_cast<double>(i);
      }
    auto target = random_tensor({shape_numel(xs)}, -1, 1, false);
    auto forward = [&]() {
      Graph<double> g;
      auto rs_copy = rs;  // keep running stats frozen across FD evaluations
      return scalarize(g, batch_norm(g, x, gamma, beta, 1e-5, mode, rs_copy), target).data()[0];
    };
    Graph<double> g;
    auto rs_main = rs;
    auto loss = scalarize(g, batch_norm(g, x, gamma, beta, 1e-5, mode, rs_main), target);
    x.zero_grad();
    gamma.zero_grad();
    beta.zero_grad();
    g.backward(loss);
    CHECK(fd::fd_max_rel_error({x, gamma, beta}, forward) <= 1e-4);
  }
}

TEST_CASE("mse_l2_objective values") {
  Graph<double> g;
  auto y = TD::from({2}, {1.0, 2.0});
  {
    auto loss = mse_l2_objective(g, y, y, {}, 0.0);
    CHECK(loss.data()[0] == 0.0);
  }
  {
    auto pred = TD::from({1}, {0.0});
    auto target = TD::from({1}, {1.0});
    CHECK(mse_l2_objective(g, pred, target, {}, 0.0).data()[0] == 1.0);
  }
  {
    auto w = TD::from({1, 1}, {2.0}, true);
    auto loss = mse_l2_objective(g, y, y, {w}, 1.0);
    CHECK(loss.data()[0] == 4.0);  // penalty only
  }
  CHECK_THROWS_AS((void)mse_l2_objective(g, y, y, {}, -1.0), ShapeError);
  CHECK_THROWS_AS((void)mse_l2_objective(g, TD::zeros({0}), TD::zeros({0}), {}, 0.0), ShapeError);
}

TEST_CASE("mse_l2_objective finite-difference check including the penalty") {
  for (int rep = 0; rep < 20; ++rep) {
    std::uniform_int_distribution<int64_t> dim(1, 8);
    const int64_t n = dim(g_rng);
    auto pred = random_tensor({n});
    auto target = random_tensor({n}, -1, 1, false);
    auto w1 = random_tensor({3, 2});
    auto w2 = random_tensor({2, 2});
    const double lambda = 0.37;
    auto forward = [&]() {
      Graph<double> g;
      return mse_l2_objective(g, pred, target, {w1, w2}, lambda).data()[0];
    };
    Graph<double> g;
    auto loss = mse_l2_objective(g, pred, target, {w1, w2}, lambda);
    pred.zero_grad();
    w1.zero_grad();
    w2.zero_grad();
    g.backward(loss);
    CHECK(fd::fd_max_rel_error({pred, w1, w2}, forward) <= 1e-4);
  }
}

TEST_CASE("conv3d trivial kernels") {
  Graph<double> g;
  {  // 1x1x1 everything: scalar multiply
    auto x = TD::from({1, 1, 1, 1, 1}, {3.0});
    auto w = TD::from({1, 1, 1, 1, 1}, {2.0});
    auto b = TD::zeros({1});
    auto out = conv3d(g, x, w, b, {1, 1, 1}, {0, 0, 0});
    CHECK(out.data()[0] == 6.0);
  }
  {  // identity kernel with same padding reproduces the input
    auto x = random_tensor({2, 1, 3, 4, 4}, -1, 1, false);
    std::vector<double> kw(27, 0.0);
    kw[13] = 1.0;  // center of a 3x3x3 kernel
    auto w = TD::from({1, 1, 3, 3, 3}, kw);
    auto b = TD::zeros({1});
    auto out = conv3d(g, x, w, b, {1, 1, 1}, {1, 1, 1});
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(out.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv3d validates shapes") {
  Graph<double> g;
  auto x = TD::zeros({1, 2, 3, 3, 3});
  auto w = TD::zeros({1, 3, 2, 2, 2});  // wrong channel count
  auto b = TD::zeros({1});
  CHECK_THROWS_AS((void)conv3d(g, x, w, b, {1, 1, 1}, {0, 0, 0}), ShapeError);
  auto w2 = TD::zeros({1, 2, 5, 5, 5});  // kernel larger than padded input
  CHECK_THROWS_AS((void)conv3d(g, x, w2, b, {1, 1, 1}, {0, 0, 0}), ShapeError);
}

TEST_CASE("conv3d naive and im2col paths agree to 1e-10") {
  std::uniform_int_distribution<int64_t> dim(1, 5), chan(1, 3), kk(1, 3), st(1, 2), pd(0, 1);
  for (int rep = 0; rep < 30; ++rep) {
    const int64_t c = chan(g_rng), f = chan(g_rng);
    const int64_t d = dim(g_rng) + 1, h = dim(g_rng) + 1, w = dim(g_rng) + 1;
    const int64_t kd = std::min(kk(g_rng), d), kh = std::min(kk(g_rng), h),
                  kw = std::min(kk(g_rng), w);
    Triple stride{st(g_rng), st(g_rng), st(g_rng)};
    Triple pad{pd(g_rng), pd(g_rng), pd(g_rng)};
    auto x = random_tensor({2, c, d, h, w});
    auto wt = random_tensor({f, c, kd, kh, kw});
    auto b = random_tensor({f});
    Graph<double> g1, g2;
    auto o1 = conv3d(g1, x, wt, b, stride, pad, ConvImpl::Naive);
    auto o2 = conv3d(g2, x, wt, b, stride, pad, ConvImpl::Im2col);
    REQUIRE(o1.shape() == o2.shape());
    double max_rel = 0;
    for (int64_t i = 0; i < o1.numel(); ++i) {
      const double denom = std::max({std::abs(o1.data()[i]), std::abs(o2.data()[i]), 1.0});
      max_rel = std::max(max_rel, std::abs(o1.data()[i] - o2.data()[i]) / denom);
    }
    CHECK(max_rel <= 1e-10);

    // gradients agree too
    auto target = random_tensor({o1.numel()}, -1, 1, false);
    auto run = [&](Graph<double>& g, TD out) {
      auto loss = scalarize(g, out, target);
      x.zero_grad();
      wt.zero_grad();
      b.zero_grad();
      g.backward(loss);
      std::vector<double> all;
      for (auto* t : {&x, &wt, &b})
        all.insert(all.end(), t->grad().begin(), t->grad().end());
      return all;
    };
    auto ga = run(g1, o1);
    auto gb = run(g2, o2);
    for (size_t i = 0; i < ga.size(); ++i)
      CHECK(std::abs(ga[i] - gb[i]) / std::max({std::abs(ga[i]), std::abs(gb[i]), 1.0}) <= 1e-10);
  }
}

TEST_CASE("conv3d passes finite-difference checks on random shapes") {
  std::uniform_int_distribution<int64_t> dim(2, 4), chan(1, 2), kk(1, 3), st(1, 2), pd(0, 1);
  for (int rep = 0; rep < 20; ++rep) {
    const int64_t c = chan(g_rng), f = chan(g_rng);
    const int64_t d = dim(g_rng), h = dim(g_rng), w = dim(g_rng);
    const int64_t kd = std::min(kk(g_rng), d), kh = std::min(kk(g_rng), h),
                  kw = std::min(kk(g_rng), w);
    Triple stride{st(g_rng), st(g_rng), st(g_rng)};
    Triple pad{pd(g_rng), pd(g_rng), pd(g_rng)};
    const ConvImpl impl = rep % 2 ? ConvImpl::Naive : ConvImpl::Im2col;
    auto x = random_tensor({2, c, d, h, w});
    auto wt = random_tensor({f, c, kd, kh, kw});
    auto b = random_tensor({f});
    Graph<double> g;
    auto out = conv3d(g, x, wt, b, stride, pad, impl);
    auto target = random_tensor({out.numel()}, -1, 1, false);
    auto loss = scalarize(g, out, target);
    x.zero_grad();
    wt.zero_grad();
    b.zero_grad();
    g.backward(loss);
    auto forward = [&]() {
      Graph<double> gg;
      return scalarize(gg, conv3d(gg, x, wt, b, stride, pad, impl), target).data()[0];
    };
    CHECK(fd::fd_max_rel_error({x, wt, b}, forward) <= 1e-4);
  }
}

TEST_CASE("backward seeds d(loss)/d(loss) = 1 and doubles on a second pass") {
  Graph<double> g;
  auto x = TD::from({2}, {1.0, 2.0}, true);
  auto y = sigmoid(g, x);
  auto loss = mean_all(g, y);
  x.zero_grad();
  g.backward(loss);
  CHECK(loss.grad()[0] == 1.0);
  const auto once = x.grad();
  g.backward(loss);
  for (size_t i = 0; i < once.size(); ++i)
    CHECK(x.grad()[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-14));
}

TEST_CASE("grads of unused parameters read as zeros, not absent") {
  auto unused = TD::zeros({3, 3}, true);
  CHECK(!unused.has_grad());
  for (double v : unused.grad()) CHECK(v == 0.0);
}

TEST_CASE("backward requires a scalar loss") {
  Graph<double> g;
  auto x = TD::from({2}, {1.0, 2.0}, true);
  auto y = relu(g, x);
  CHECK_THROWS_AS(g.backward(y), ShapeError);
}

TEST_CASE("adam leaves parameters unchanged under zero gradients") {
  auto p = TD::from({3}, {1.0, -2.0, 3.0}, true);
  p.zero_grad();
  std::vector<TD> params{p};
  AdamState<double> st;
  st.hyper.lr = 0.1;
  adam_step(params, st);
  CHECK(p.values() == std::vector<double>{1.0, -2.0, 3.0});
  CHECK(st.step_count == 1);
}

TEST_CASE("adam first step moves by almost exactly lr against the gradient sign") {
  auto p = TD::from({4}, {0.0, 0.0, 0.0, 0.0}, true);
  p.grad() = {0.5, -2.0, 10.0, -0.25};
  std::vector<TD> params{p};
  AdamState<double> st;
  st.hyper.lr = 0.01;
  adam_step(params, st);
  for (int64_t i = 0; i < 4; ++i) {
    const double delta = p.data()[i];
    const double gsign = p.grad()[static_cast<size_t>(i)] > 0 ? 1.0 : -1.0;
    CHECK(std::abs(delta) <= 0.01 + 1e-15);
    CHECK(std::abs(delta) >= 0.01 * (1.0 - 1e-6));
    CHECK(delta * gsign < 0.0);  // moves against the gradient
  }
}

TEST_CASE("adam keeps identical parameters identical") {
  auto a = TD::from({2}, {0.3, 0.7}, true);
  auto b = TD::from({2}, {0.3, 0.7}, true);
  a.grad() = {1.0, -1.0};
  b.grad() = {1.0, -1.0};
  std::vector<TD> params{a, b};
  AdamState<double> st;
  for (int i = 0; i < 5; ++i) adam_step(params, st);
  CHECK(a.values() == b.values());
}

TEST_CASE("forward passes are deterministic for fixed inputs") {
  auto x = random_tensor({2, 3, 4, 4, 4}, -1, 1, false);
  auto w = random_tensor({2, 3, 3, 3, 3}, -1, 1, false);
  auto b = random_tensor({2}, -1, 1, false);
  Graph<double> g1, g2;
  auto o1 = conv3d(g1, x, w, b, {1, 1, 1}, {1, 1, 1});
  auto o2 = conv3d(g2, x, w, b, {1, 1, 1}, {1, 1, 1});
  CHECK(o1.values() == o2.values());  // bitwise
}
