#include <doctest.h>

#include <cmath>
#include <limits>

#include "ctxreg/optim.hpp"
#include "helpers.hpp"

using namespace ctxreg;

namespace {

// Reference replay of the plateau rule, written independently.
double naive_schedule(const std::vector<double>& history, double lr, std::size_t patience, double factor) {
  double best = -1;
  bool seen = false;
  std::size_t bad = 0;
  for (double s : history) {
    if (!seen || s > best) {
      best = s;
      seen = true;
      bad = 0;
      continue;
    }
    if (++bad == patience) {
      lr *= factor;
      bad = 0;
    }
  }
  return lr;
}

}  // namespace

TEST_CASE("first Adam step moves a weight by the learning rate") {
  ParameterStore p;
  Tensor w = p.add("w", Tensor::scalar(Real(1)));
  AdamState s = AdamState::for_params(p);
  w.grad()[0] = Real(1);  // d(w)/dw
  adam_step(p, s, 0.1, AdamHyper{});
  CHECK(double(w.item()) == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(s.step == 1);
}

TEST_CASE("a zero gradient leaves weights unchanged") {
  ParameterStore p;
  Tensor w = p.add("w", Tensor::from({3}, {Real(0.5), Real(-2), Real(3)}));
  AdamState s = AdamState::for_params(p);
  w.zero_grad();
  (void)w.grad();
  adam_step(p, s, 0.1, AdamHyper{});
  CHECK(w.at(0) == Real(0.5));
  CHECK(w.at(1) == Real(-2));
  CHECK(w.at(2) == Real(3));
}

TEST_CASE("Adam decreases a quadratic step after step") {
  ParameterStore p;
  Tensor w = p.add("w", Tensor::from({2}, {Real(2), Real(-1.5)}));
  AdamState s = AdamState::for_params(p);
  auto loss = [&] { return double(w.at(0)) * double(w.at(0)) + 3 * double(w.at(1)) * double(w.at(1)); };
  std::vector<double> values{loss()};
  for (int k = 0; k < 20; ++k) {
    w.grad()[0] = Real(2) * w.at(0);
    w.grad()[1] = Real(6) * w.at(1);
    adam_step(p, s, 0.05, AdamHyper{});
    values.push_back(loss());
  }
  CHECK(values[2] <= values[1]);
  CHECK(values[1] <= values[0]);
  CHECK(values.back() < values.front() * 0.5);
}

TEST_CASE("non-finite gradients are rejected before any update") {
  ParameterStore p;
  Tensor a = p.add("a", Tensor::scalar(Real(1)));
  Tensor b = p.add("b", Tensor::scalar(Real(1)));
  AdamState s = AdamState::for_params(p);
  a.grad()[0] = Real(1);
  b.grad()[0] = std::numeric_limits<Real>::quiet_NaN();
  try {
    adam_step(p, s, 0.1, AdamHyper{});
    FAIL("expected NonFiniteGradient");
  } catch (const NonFiniteGradient& e) {
    CHECK(e.param() == "b");
  }
  CHECK(a.item() == Real(1));
  CHECK(s.step == 0);
}

TEST_CASE("gradient clipping rescales to the global norm") {
  ParameterStore p;
  Tensor a = p.add("a", Tensor::from({2}, {Real(0), Real(0)}));
  Tensor b = p.add("b", Tensor::scalar(Real(0)));
  a.grad()[0] = Real(3);
  a.grad()[1] = Real(0);
  b.grad()[0] = Real(4);
  CHECK(clip_gradients(p, 1.0) == doctest::Approx(5.0));
  CHECK(gradient_norm(p) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(double(a.grad()[0]) == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(clip_gradients(p, 10.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(double(b.grad()[0]) == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("five stagnant evaluations halve the rate") {
  CHECK(lr_schedule({10, 9, 9, 9, 9, 9}, 1.0, 5, 0.5) == 0.5);
  CHECK(lr_schedule({10, 9, 9, 9, 9}, 1.0, 5, 0.5) == 1.0);
  // Ties do not count as improvement.
  CHECK(lr_schedule({10, 10, 10, 10, 10, 10}, 1.0, 5, 0.5) == 0.5);
  CHECK(lr_schedule({10, 9, 9, 9, 9, 11, 9}, 1.0, 5, 0.5) == 1.0);
  CHECK(lr_schedule(std::vector<double>(11, 3.0), 1.0, 5, 0.5) == 0.25);

  PlateauState st;
  CHECK_FALSE(st.observe(0.0, 2));
  CHECK(st.has_best);
  CHECK_FALSE(st.observe(0.0, 2));
  CHECK(st.observe(0.0, 2));
  CHECK(st.halvings == 1);
  CHECK(st.stagnant == 0);
}

TEST_CASE("schedule matches a brute-force replay on random histories") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> h(1 + uniform_index(rng, 40));
    for (auto& v : h) v = double(uniform_index(rng, 6));
    const std::size_t patience = 1 + uniform_index(rng, 5);
    CHECK(lr_schedule(h, 1e-3, patience, 0.5) == naive_schedule(h, 1e-3, patience, 0.5));
  }
}
