#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "fd_util.hpp"
#include "hafusion/ops.hpp"
#include "hafusion/tape.hpp"
#include "hafusion/tensor.hpp"
#include "hafusion/warnings.hpp"

using namespace hafusion;
using fdtest::max_grad_error;
using fdtest::random_tensor;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) {
  return Tensor<double>::from_values({r, c}, std::move(v));
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor<double>::from_values({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(Tensor<double>({0, 3}), ShapeError);
  Tensor<double> t({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.at2(1, 2) == 1.5);
}

TEST_CASE("linear basics") {
  Tape<double> t;
  SECTION("identity weight") {
    VarId x = t.constant(mat(1, 2, {1, 2}));
    VarId w = t.constant(mat(2, 2, {1, 0, 0, 1}));
    VarId y = ops::linear(t, x, w);
    CHECK(t.val(y).at2(0, 0) == 1.0);
    CHECK(t.val(y).at2(0, 1) == 2.0);
  }
  SECTION("zero weight plus bias") {
    VarId x = t.constant(mat(1, 2, {1, 2}));
    VarId w = t.constant(mat(2, 2, {0, 0, 0, 0}));
    VarId b = t.constant(Tensor<double>::from_values({2}, {3, 4}));
    VarId y = ops::linear(t, x, w, b);
    CHECK(t.val(y).at2(0, 0) == 3.0);
    CHECK(t.val(y).at2(0, 1) == 4.0);
  }
  SECTION("hand multiply") {
    VarId x = t.constant(mat(1, 2, {1, 1}));
    VarId w = t.constant(mat(2, 2, {2, 3, 4, 5}));
    VarId y = ops::linear(t, x, w);
    CHECK(t.val(y).at2(0, 0) == 6.0);
    CHECK(t.val(y).at2(0, 1) == 8.0);
  }
  SECTION("shape mismatch") {
    VarId x = t.constant(mat(1, 3, {1, 1, 1}));
    VarId w = t.constant(mat(2, 2, {1, 1, 1, 1}));
    CHECK_THROWS_AS(ops::linear(t, x, w), ShapeError);
  }
}

TEST_CASE("softmax values and properties") {
  Tape<double> t;
  SECTION("symmetry") {
    VarId y = ops::softmax(t, t.constant(Tensor<double>::from_values({2}, {0, 0})), 0);
    CHECK(t.val(y)[0] == Catch::Approx(0.5));
  }
  SECTION("three way") {
    VarId y = ops::softmax(t, t.constant(Tensor<double>::from_values({3}, {1, 2, 3})), 0);
    CHECK(t.val(y)[0] == Catch::Approx(0.09003).margin(1e-5));
    CHECK(t.val(y)[1] == Catch::Approx(0.24473).margin(1e-5));
    CHECK(t.val(y)[2] == Catch::Approx(0.66524).margin(1e-5));
  }
  SECTION("single element") {
    VarId y = ops::softmax(t, t.constant(Tensor<double>::from_values({1}, {42.0})), 0);
    CHECK(t.val(y)[0] == 1.0);
  }
  SECTION("rows sum to one for |x| <= 50") {
    Rng rng(11);
    for (int rep = 0; rep < 20; ++rep) {
      Tensor<double> x = random_tensor({4, 7}, rng, -50.0, 50.0);
      VarId y = ops::softmax(t, t.constant(x), 1);
      for (std::size_t i = 0; i < 4; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 7; ++j) s += t.val(y).at2(i, j);
        CHECK(std::fabs(s - 1.0) < 1e-6);
      }
    }
  }
  SECTION("shift invariance") {
    Rng rng(12);
    Tensor<double> x = random_tensor({3, 5}, rng, -5.0, 5.0);
    Tensor<double> xs = x;
    for (std::size_t i = 0; i < xs.numel(); ++i) xs[i] += 17.25;
    VarId a = ops::softmax(t, t.constant(x), 1);
    VarId b = ops::softmax(t, t.constant(xs), 1);
    for (std::size_t i = 0; i < x.numel(); ++i)
      CHECK(std::fabs(t.val(a)[i] - t.val(b)[i]) < 1e-9);
  }
  SECTION("middle axis of a rank-3 tensor") {
    Rng rng(13);
    Tensor<double> x = random_tensor({2, 3, 4}, rng);
    VarId y = ops::softmax(t, t.constant(x), 1);
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        double s = 0;
        for (std::size_t j = 0; j < 3; ++j) s += t.val(y).at3(i, j, k);
        CHECK(std::fabs(s - 1.0) < 1e-9);
      }
  }
}

TEST_CASE("leaky relu definition") {
  Tape<double> t;
  VarId x = t.constant(Tensor<double>::from_values({3}, {2.0, -1.0, 0.0}));
  VarId y = ops::leaky_relu(t, x, 0.2);
  CHECK(t.val(y)[0] == 2.0);
  CHECK(t.val(y)[1] == Catch::Approx(-0.2));
  CHECK(t.val(y)[2] == 0.0);
  CHECK_THROWS_AS(ops::leaky_relu(t, x, 1.5), ConfigError);
}

TEST_CASE("layer norm rows") {
  Tape<double> t;
  SECTION("constant row maps to shift") {
    VarId x = t.constant(mat(1, 3, {1, 1, 1}));
    VarId g = t.constant(Tensor<double>::from_values({3}, {1, 1, 1}));
    VarId s = t.constant(Tensor<double>::from_values({3}, {0, 0, 0}));
    VarId y = ops::layer_norm(t, x, g, s, 1e-8);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::fabs(t.val(y)[j]) < 1e-9);
  }
  SECTION("already standardized row") {
    VarId x = t.constant(mat(1, 2, {1, -1}));
    VarId g = t.constant(Tensor<double>::from_values({2}, {1, 1}));
    VarId s = t.constant(Tensor<double>::from_values({2}, {0, 0}));
    VarId y = ops::layer_norm(t, x, g, s, 1e-14);
    CHECK(t.val(y)[0] == Catch::Approx(1.0).epsilon(1e-6));
    CHECK(t.val(y)[1] == Catch::Approx(-1.0).epsilon(1e-6));
  }
  SECTION("zero gain leaves only shift") {
    Rng rng(5);
    VarId x = t.constant(random_tensor({4, 2}, rng));
    VarId g = t.constant(Tensor<double>::from_values({2}, {0, 0}));
    VarId s = t.constant(Tensor<double>::from_values({2}, {5, 5}));
    VarId y = ops::layer_norm(t, x, g, s, 1e-8);
    for (std::size_t i = 0; i < t.val(y).numel(); ++i) CHECK(t.val(y)[i] == 5.0);
  }
  SECTION("rows have near-zero mean with unit gain") {
    Rng rng(6);
    VarId x = t.constant(random_tensor({5, 9}, rng, -3.0, 3.0));
    VarId g = t.constant(Tensor<double>({9}, 1.0));
    VarId s = t.constant(Tensor<double>({9}, 0.0));
    VarId y = ops::layer_norm(t, x, g, s, 1e-8);
    for (std::size_t i = 0; i < 5; ++i) {
      double m = 0;
      for (std::size_t j = 0; j < 9; ++j) m += t.val(y).at2(i, j);
      CHECK(std::fabs(m / 9.0) < 1e-6);
    }
  }
}

TEST_CASE("conv2d values") {
  Tape<double> t;
  SECTION("scaling kernel") {
    VarId x = t.constant(Tensor<double>({1, 3, 3}, 1.0));
    VarId k = t.constant(Tensor<double>({1, 1, 1, 1}, 2.0));
    VarId y = ops::conv2d(t, x, k, 0, 1);
    CHECK(t.val(y).shape() == Shape{1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(t.val(y)[i] == 2.0);
  }
  SECTION("impulse response") {
    Tensor<double> delta({1, 5, 5}, 0.0);
    delta.at3(0, 2, 2) = 1.0;
    Rng rng(7);
    Tensor<double> kern = random_tensor({1, 1, 3, 3}, rng);
    VarId y = ops::conv2d(t, t.constant(delta), t.constant(kern), 1, 1);
    CHECK(t.val(y).shape() == Shape{1, 5, 5});
    // cross-correlation places the point-reflected kernel around the delta
    for (std::size_t dy = 0; dy < 3; ++dy)
      for (std::size_t dx = 0; dx < 3; ++dx)
        CHECK(t.val(y).at3(0, 3 - dy, 3 - dx) == Catch::Approx(kern.at4(0, 0, dy, dx)));
  }
  SECTION("zero kernel") {
    Rng rng(8);
    VarId x = t.constant(random_tensor({2, 4, 4}, rng));
    VarId k = t.constant(Tensor<double>({3, 2, 3, 3}, 0.0));
    VarId y = ops::conv2d(t, x, k, 1, 1);
    for (std::size_t i = 0; i < t.val(y).numel(); ++i) CHECK(t.val(y)[i] == 0.0);
  }
  SECTION("kernel larger than padded input") {
    VarId x = t.constant(Tensor<double>({1, 2, 2}, 1.0));
    VarId k = t.constant(Tensor<double>({1, 1, 5, 5}, 1.0));
    CHECK_THROWS_AS(ops::conv2d(t, x, k, 1, 1), ShapeError);
  }
}

TEST_CASE("avg pool values") {
  Tape<double> t;
  SECTION("constant input") {
    VarId x = t.constant(Tensor<double>({2, 4, 4}, 3.25));
    VarId y = ops::avg_pool2d(t, x, 3, 1, 1);
    CHECK(t.val(y).shape() == Shape{2, 4, 4});
    for (std::size_t i = 0; i < t.val(y).numel(); ++i)
      CHECK(t.val(y)[i] == Catch::Approx(3.25));
  }
  SECTION("1x1 window is identity") {
    Rng rng(9);
    Tensor<double> x = random_tensor({1, 3, 3}, rng);
    VarId y = ops::avg_pool2d(t, t.constant(x), 1, 0, 1);
    for (std::size_t i = 0; i < 9; ++i) CHECK(t.val(y)[i] == x[i]);
  }
  SECTION("2x2 mean") {
    VarId x = t.constant(Tensor<double>::from_values({1, 2, 2}, {1, 2, 3, 4}));
    VarId y = ops::avg_pool2d(t, x, 2, 0, 2);
    CHECK(t.val(y).shape() == Shape{1, 1, 1});
    CHECK(t.val(y)[0] == Catch::Approx(2.5));
  }
}

TEST_CASE("l1 normalize") {
  Tape<double> t;
  SECTION("positive entries") {
    VarId y = ops::l1_normalize(t, t.constant(Tensor<double>::from_values({2}, {1, 3})), 0);
    CHECK(t.val(y)[0] == Catch::Approx(0.25));
    CHECK(t.val(y)[1] == Catch::Approx(0.75));
  }
  SECTION("absolute value denominator") {
    VarId y = ops::l1_normalize(t, t.constant(Tensor<double>::from_values({2}, {-1, 1})), 0);
    CHECK(t.val(y)[0] == Catch::Approx(-0.5));
    CHECK(t.val(y)[1] == Catch::Approx(0.5));
  }
  SECTION("zero slice policy") {
    Warnings::instance().reset();
    VarId y = ops::l1_normalize(t, t.constant(Tensor<double>::from_values({2}, {0, 0})), 0);
    CHECK(t.val(y)[0] == 0.0);
    CHECK(t.val(y)[1] == 0.0);
    CHECK(Warnings::instance().count("l1_normalize.zero_slice") == 1);
  }
}

TEST_CASE("cosine similarity") {
  Tape<double> t;
  auto vec = [&](std::vector<double> v) {
    const std::size_t n = v.size();
    return t.constant(Tensor<double>::from_values({n}, std::move(v)));
  };
  CHECK(t.val(ops::cosine_similarity(t, vec({1, 0}), vec({0, 1}), 1e-8))[0] == 0.0);
  CHECK(t.val(ops::cosine_similarity(t, vec({2, 0}), vec({1, 0}), 1e-8))[0] ==
        Catch::Approx(1.0));
  CHECK(t.val(ops::cosine_similarity(t, vec({0, 0}), vec({1, 1}), 1e-8))[0] == 0.0);
}

TEST_CASE("dropout") {
  SECTION("rate zero and eval mode are identity") {
    Tape<double> t;
    Rng rng(3);
    VarId x = t.constant(Tensor<double>::from_values({3}, {1, 2, 3}));
    CHECK(ops::dropout(t, x, 0.0, true, &rng) == x);
    CHECK(ops::dropout(t, x, 0.5, false, nullptr) == x);
  }
  SECTION("fixed seed gives a deterministic mask") {
    auto run = [](std::uint64_t seed) {
      Tape<double> t;
      Rng rng(seed);
      VarId x = t.constant(Tensor<double>({64}, 1.0));
      VarId y = ops::dropout(t, x, 0.5, true, &rng);
      return t.val(y).values();
    };
    CHECK(run(42) == run(42));
    CHECK(run(42) != run(43));
  }
  SECTION("expected output equals input within 1% over 1e5 draws") {
    Rng rng(123);
    const double value = 0.8;
    double sum = 0.0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
      Tape<double> t;
      VarId x = t.constant(Tensor<double>::scalar(value));
      VarId y = ops::dropout(t, x, 0.5, true, &rng);
      sum += t.val(y)[0];
    }
    CHECK(std::fabs(sum / draws - value) < 0.01 * value);
  }
}

TEST_CASE("non-finite outputs are hard errors") {
  Tape<double> t;
  VarId x = t.constant(Tensor<double>::from_values({1}, {-2.0}));
  CHECK_THROWS_AS(ops::log_shifted(t, x, 1.0), NumericError);  // log(-1)
  Tensor<double> bad({1}, 0.0);
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(t.constant(bad), NumericError);
}

TEST_CASE("gradients match finite differences") {
  Rng rng(21);
  const double tol = 1e-4;

  SECTION("linear") {
    Parameter<double> x("x", random_tensor({3, 4}, rng));
    Parameter<double> w("w", random_tensor({4, 2}, rng));
    Parameter<double> b("b", random_tensor({2}, rng));
    CHECK(max_grad_error({&x, &w, &b}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::linear(t, p[0], p[1], p[2]);
          }) < tol);
  }
  SECTION("matmul and transpose") {
    Parameter<double> a("a", random_tensor({3, 4}, rng));
    Parameter<double> b("b", random_tensor({3, 2}, rng));
    CHECK(max_grad_error({&a, &b}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::matmul(t, ops::transpose(t, p[0]), p[1]);
          }) < tol);
  }
  SECTION("softmax over each axis of rank 3") {
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Parameter<double> x("x", random_tensor({2, 3, 4}, rng));
      CHECK(max_grad_error({&x}, [axis](Tape<double>& t, const std::vector<VarId>& p) {
              return ops::softmax(t, p[0], axis);
            }) < tol);
    }
  }
  SECTION("l1 normalize") {
    // keep coordinates away from the |x| kink at zero
    Parameter<double> x("x", random_tensor({3, 4}, rng, 0.2, 1.0));
    CHECK(max_grad_error({&x}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::l1_normalize(t, p[0], 1);
          }) < tol);
    Parameter<double> y("y", random_tensor({3, 4}, rng, -1.0, -0.2));
    CHECK(max_grad_error({&y}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::l1_normalize(t, p[0], 0);
          }) < tol);
  }
  SECTION("activations") {
    Parameter<double> x("x", random_tensor({40}, rng, 0.05, 1.0));
    Parameter<double> y("y", random_tensor({40}, rng, -1.0, -0.05));
    for (auto* p : {&x, &y}) {
      CHECK(max_grad_error({p}, [](Tape<double>& t, const std::vector<VarId>& q) {
              return ops::leaky_relu(t, q[0], 0.2);
            }) < tol);
      CHECK(max_grad_error({p}, [](Tape<double>& t, const std::vector<VarId>& q) {
              return ops::relu(t, q[0]);
            }) < tol);
      CHECK(max_grad_error({p}, [](Tape<double>& t, const std::vector<VarId>& q) {
              return ops::sigmoid(t, q[0]);
            }) < tol);
      CHECK(max_grad_error({p}, [](Tape<double>& t, const std::vector<VarId>& q) {
              return ops::abs(t, q[0]);
            }) < tol);
    }
  }
  SECTION("layer norm") {
    Parameter<double> x("x", random_tensor({4, 6}, rng));
    Parameter<double> g("g", random_tensor({6}, rng, 0.5, 1.5));
    Parameter<double> s("s", random_tensor({6}, rng));
    CHECK(max_grad_error({&x, &g, &s}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::layer_norm(t, p[0], p[1], p[2], 1e-8);
          }) < tol);
  }
  SECTION("conv2d and avg pool") {
    Parameter<double> x("x", random_tensor({2, 5, 5}, rng));
    Parameter<double> k("k", random_tensor({3, 2, 3, 3}, rng));
    CHECK(max_grad_error({&x, &k}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::conv2d(t, p[0], p[1], 1, 1);
          }) < tol);
    CHECK(max_grad_error({&x}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::avg_pool2d(t, p[0], 3, 1, 1);
          }) < tol);
    CHECK(max_grad_error({&x}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::avg_pool2d(t, p[0], 2, 0, 2);
          }) < tol);
  }
  SECTION("cosine similarity") {
    Parameter<double> a("a", random_tensor({5}, rng, 0.3, 1.0));
    Parameter<double> b("b", random_tensor({5}, rng, -1.0, -0.3));
    CHECK(max_grad_error({&a, &b}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::cosine_similarity(t, p[0], p[1], 1e-8);
          }) < tol);
  }
  SECTION("reductions, stacking and selection") {
    Parameter<double> x("x", random_tensor({2, 3, 4}, rng));
    CHECK(max_grad_error({&x}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::reduce_mean_axis(t, p[0], 0);
          }) < tol);
    Parameter<double> a("a", random_tensor({3, 2}, rng));
    Parameter<double> b("b", random_tensor({3, 2}, rng));
    CHECK(max_grad_error({&a, &b}, [](Tape<double>& t, const std::vector<VarId>& p) {
            VarId stacked = ops::stack_views(t, {p[0], p[1]});
            VarId taken = ops::take_view(t, stacked, 1);
            VarId joined = ops::concat_cols(t, {ops::slice_cols(t, p[0], 0, 1), taken});
            return ops::reduce_mean_all(t, joined);
          }) < tol);
  }
  SECTION("scalar plumbing") {
    Parameter<double> s("s", Tensor<double>::scalar(0.3));
    Parameter<double> x("x", random_tensor({3, 3}, rng));
    CHECK(max_grad_error({&s, &x}, [](Tape<double>& t, const std::vector<VarId>& p) {
            VarId beta = ops::sigmoid(t, p[0]);
            VarId one_minus = ops::affine(t, beta, -1.0, 1.0);
            VarId mixed = ops::add(t, ops::scale_by(t, beta, p[1]),
                                   ops::scale_by(t, one_minus, ops::scale(t, p[1], 2.0)));
            VarId vec = ops::stack_scalars(t, {ops::reduce_mean_all(t, mixed), ops::pick(t, p[0], 0)});
            return ops::softmax(t, vec, 0);
          }) < tol);
  }
  SECTION("log shifted") {
    Parameter<double> x("x", random_tensor({8}, rng, 0.1, 1.0));
    CHECK(max_grad_error({&x}, [](Tape<double>& t, const std::vector<VarId>& p) {
            return ops::log_shifted(t, p[0], 1e-12);
          }) < tol);
  }
  SECTION("dropout with a frozen mask") {
    Parameter<double> x("x", random_tensor({16}, rng));
    CHECK(max_grad_error({&x}, [](Tape<double>& t, const std::vector<VarId>& p) {
            Rng mask_rng(77);  // same mask on every evaluation
            return ops::dropout(t, p[0], 0.5, true, &mask_rng);
          }) < tol);
  }
}
