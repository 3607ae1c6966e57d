#include <doctest.h>

#include <cmath>
#include <memory>

#include "tvo/autodiff.hpp"
#include "tvo/errors.hpp"
#include "tvo/rng.hpp"

using namespace tvo;

namespace {

ParamVector scalar_params(std::initializer_list<std::pair<const char*, double>> values) {
  auto layout = std::make_shared<ParamLayout>();
  for (const auto& [name, v] : values) layout->add(name, {});
  ParamVector p(layout);
  std::size_t i = 0;
  for (const auto& [name, v] : values) p[i++] = v;
  return p;
}

}  // namespace

TEST_CASE("forward: identity, inverse pair and sigmoid symmetry") {
  {
    Tape t;
    t.set_output(t.param("a"));
    CHECK(t.forward(scalar_params({{"a", 3.0}})) == 3.0);
  }
  {
    Tape t;
    t.set_output(t.log(t.exp(t.param("a"))));
    CHECK(t.forward(scalar_params({{"a", -2.5}})) == doctest::Approx(-2.5).epsilon(1e-15));
  }
  {
    Tape t;
    t.set_output(t.sigmoid(t.constant(0.0)));
    auto layout = std::make_shared<ParamLayout>();
    CHECK(t.forward(ParamVector(layout)) == 0.5);
  }
}

TEST_CASE("backward: polynomial and product rule") {
  {
    Tape t;
    const Var a = t.param("a");
    t.set_output(t.mul(a, a));
    t.forward(scalar_params({{"a", 3.0}}));
    CHECK(t.backward()[0] == 6.0);
  }
  {
    Tape t;
    t.set_output(t.param("a") * t.param("b"));
    t.forward(scalar_params({{"a", 2.0}, {"b", 5.0}}));
    const ParamVector g = t.backward();
    CHECK(g[0] == 5.0);
    CHECK(g[1] == 2.0);
  }
}

TEST_CASE("backward before forward is a usage error") {
  Tape t;
  t.set_output(t.param("a"));
  CHECK_THROWS_AS(t.backward(), UsageError);
}

TEST_CASE("shape mismatch is a structural error naming the node") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("u", {3});
  layout->add("v", {2});
  ParamVector p(layout);
  Tape t;
  t.set_output(t.sum(t.add(t.param("u"), t.param("v"))));
  try {
    t.forward(p);
    FAIL("expected StructuralError");
  } catch (const StructuralError& e) {
    CHECK(std::string(e.what()).find("add") != std::string::npos);
  }
}

TEST_CASE("missing parameters and inputs are usage errors") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("a", {});
  Tape t;
  t.set_output(t.add(t.param("a"), t.sum(t.input("x"))));
  CHECK_THROWS_AS(t.forward(ParamVector(layout)), UsageError);
  Tape t2;
  t2.set_output(t2.param("missing"));
  CHECK_THROWS_AS(t2.forward(ParamVector(layout)), UsageError);
}

TEST_CASE("finite differences: quadratic and exponential") {
  const auto q = finite_difference_gradient([](const ParamVector& p) { return p[0] * p[0]; }, scalar_params({{"a", 3.0}}),
                                            1e-4);
  CHECK(std::abs(q[0] - 6.0) < 1e-7);
  const auto e = finite_difference_gradient([](const ParamVector& p) { return std::exp(p[0]); },
                                            scalar_params({{"a", 0.0}}), 1e-5);
  CHECK(std::abs(e[0] - 1.0) < 1e-9);
}

TEST_CASE("finite differences report the non-finite coordinate") {
  const auto p = scalar_params({{"a", 1.0}, {"b", 1e-4}});
  try {
    finite_difference_gradient([](const ParamVector& v) { return std::log(v[1]); }, p, 1e-3);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("coordinate 1") != std::string::npos);
  }
}

TEST_CASE("random three-layer tanh network matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto layout = std::make_shared<ParamLayout>();
    layout->add("w1", {2, 3});
    layout->add("b1", {3});
    layout->add("w2", {3, 2});
    layout->add("b2", {2});
    layout->add("w3", {2, 1});
    layout->add("b3", {1});
    ParamVector p(layout);
    for (double& v : p.values()) v = rng.normal();
    CHECK(p.size() == 20);
    Inputs in;
    in["x"] = RealArray::matrix(4, 2, {0.1, -0.3, 0.5, 0.2, -0.7, 0.9, 0.0, 1.1});
    Tape t;
    Var h = t.tanh(t.add_row(t.matmul(t.input("x"), t.param("w1")), t.param("b1")));
    h = t.tanh(t.add_row(t.matmul(h, t.param("w2")), t.param("b2")));
    t.set_output(t.sum(t.tanh(t.add_row(t.matmul(h, t.param("w3")), t.param("b3")))));
    t.forward(p, in);
    const ParamVector g = t.backward();
    const auto fd = finite_difference_gradient([&](const ParamVector& v) { return t.forward(v, in); }, p, 1e-5);
    for (std::size_t d = 0; d < fd.size(); ++d) CHECK(std::abs(g[d] - fd[d]) <= 1e-6 * std::max(1.0, std::abs(fd[d])));
  }
}

TEST_CASE("every primitive differentiates correctly") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("m", {2, 3});
  layout->add("r", {3});
  layout->add("s", {});
  ParamVector p(layout);
  Rng rng(3);
  for (double& v : p.values()) v = 0.5 * rng.normal();
  using Builder = Var (*)(Tape&);
  const Builder builders[] = {
      [](Tape& t) { return t.sum(t.exp(t.param("m"))); },
      [](Tape& t) { return t.sum(t.log(t.shift(t.square(t.param("m")), 1.0))); },
      [](Tape& t) { return t.sum(t.sigmoid(t.param("m"))); },
      [](Tape& t) { return t.sum(t.tanh(t.param("m"))); },
      [](Tape& t) { return t.sum(t.log_sigmoid(t.param("m"))); },
      [](Tape& t) { return t.sum(t.softplus(t.param("m"))); },
      [](Tape& t) { return t.sum(t.neg(t.scale(t.param("m"), 2.0))); },
      [](Tape& t) { return t.log_sum_exp(t.param("r")); },
      [](Tape& t) { return t.index(t.param("r"), 1) * t.param("s"); },
      [](Tape& t) { return t.sum(t.slice_cols(t.param("m"), 1, 3)); },
      [](Tape& t) { return t.sum(t.square(t.sum_rows(t.param("m")))); },
      [](Tape& t) { return t.sum(t.mul(t.broadcast_rows(t.param("r"), 2), t.param("m"))); },
      [](Tape& t) { return t.sum(t.square(t.add_row(t.param("m"), t.param("r")))); },
      [](Tape& t) { return t.sum(t.sub(t.param("m"), t.param("s"))); },
      [](Tape& t) { return t.sum(t.square(t.matmul(t.param("m"), t.broadcast_rows(t.param("r"), 3)))); },
  };
  for (Builder b : builders) {
    Tape t;
    t.set_output(b(t));
    t.forward(p);
    const ParamVector g = t.backward();
    const auto fd = finite_difference_gradient([&](const ParamVector& v) { return t.forward(v); }, p, 1e-6);
    for (std::size_t d = 0; d < fd.size(); ++d) CHECK(std::abs(g[d] - fd[d]) <= 1e-5 * std::max(1.0, std::abs(fd[d])));
  }
}

TEST_CASE("linearity: gradient of a sum is the sum of gradients") {
  const auto p = scalar_params({{"a", 0.7}, {"b", -1.3}});
  auto grad = [&](int which) {
    Tape t;
    const Var a = t.param("a");
    const Var b = t.param("b");
    const Var f1 = t.tanh(a * b);
    const Var f2 = t.exp(a) + t.square(b);
    t.set_output(which == 0 ? f1 : which == 1 ? f2 : f1 + f2);
    t.forward(p);
    return t.backward();
  };
  const ParamVector g1 = grad(0);
  const ParamVector g2 = grad(1);
  const ParamVector g12 = grad(2);
  for (std::size_t d = 0; d < 2; ++d) CHECK(g12[d] == doctest::Approx(g1[d] + g2[d]).epsilon(1e-14));
}

TEST_CASE("repeated forward and backward is bit-identical") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("w", {3, 3});
  ParamVector p(layout);
  Rng rng(9);
  for (double& v : p.values()) v = rng.normal();
  Tape t;
  t.set_output(t.log_sum_exp(t.sum_rows(t.tanh(t.matmul(t.param("w"), t.param("w"))))));
  const double v1 = t.forward(p);
  const ParamVector g1 = t.backward();
  const double v2 = t.forward(p);
  const ParamVector g2 = t.backward();
  CHECK(v1 == v2);
  for (std::size_t d = 0; d < p.size(); ++d) CHECK(g1[d] == g2[d]);
}

TEST_CASE("parameter layout rejects duplicate names and partitions the vector") {
  ParamLayout layout;
  CHECK(layout.add("theta/a", {2, 2}) == 0);
  CHECK(layout.add("phi/b", {3}) == 4);
  CHECK(layout.size() == 7);
  CHECK_THROWS_AS(layout.add("theta/a", {1}), StructuralError);
  CHECK(is_theta_segment(layout.segment("theta/a")));
  CHECK(is_phi_segment(layout.segment("phi/b")));
}

TEST_CASE("seeded backward accumulates adjoints of vector nodes") {
  auto layout = std::make_shared<ParamLayout>();
  layout->add("v", {3});
  ParamVector p(layout, {1.0, 2.0, 3.0});
  Tape t;
  const Var sq = t.square(t.param("v"));
  t.evaluate(p);
  const double adj[] = {1.0, 0.5, -1.0};
  const Seed seeds[] = {{sq, adj}};
  const ParamVector g = t.backward(seeds);
  CHECK(g[0] == 2.0);
  CHECK(g[1] == 2.0);
  CHECK(g[2] == -6.0);
}
