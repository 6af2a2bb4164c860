#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ctxreg/data.hpp"
#include "ctxreg/model.hpp"
#include "ctxreg/tensor.hpp"

namespace testing {

using namespace ctxreg;

inline Sequence random_sequence(std::mt19937_64& rng, std::size_t vocab, std::size_t lo, std::size_t hi) {
  const std::size_t len = lo + uniform_index(rng, hi - lo + 1);
  Sequence s(len);
  for (auto& t : s) t = static_cast<TokenId>(Vocabulary::kNumReserved + uniform_index(rng, vocab - Vocabulary::kNumReserved));
  return s;
}

/// Random triplets over ids [4, vocab).
inline Corpus random_corpus(std::uint64_t seed, std::size_t n, std::size_t vocab, std::size_t lo = 1,
                            std::size_t hi = 5) {
  std::mt19937_64 rng(seed);
  Corpus c;
  for (std::size_t i = 0; i < n; ++i) {
    TranslationTriplet t;
    t.source = random_sequence(rng, vocab, lo, hi);
    t.target = random_sequence(rng, vocab, lo, hi);
    t.context = random_sequence(rng, vocab, lo, hi);
    c.push_back(std::move(t));
  }
  return c;
}

inline PaddedBatch whole_batch(const Corpus& c, std::uint64_t seed = 7) {
  std::vector<std::size_t> rows(c.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  std::mt19937_64 rng(seed);
  return make_batch(c, rows, rng);
}

inline ModelConfig tiny_config(std::size_t vocab, std::size_t layers = 2, std::size_t width = 8, std::size_t heads = 4) {
  ModelConfig m;
  m.layers = layers;
  m.width = width;
  m.heads = heads;
  m.ff_width = 2 * width;
  m.dropout = 0.0;
  m.vocab_size = vocab;
  return m;
}

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(u(rng));
  return Tensor::from(std::move(shape), std::move(v));
}

struct GradCheckResult {
  double max_rel_error = 0;
  double worst_analytic = 0, worst_numeric = 0;
  std::size_t checked = 0;
};

/// Central differences of `loss` against the analytic gradients of `inputs`.
/// Relative error uses max(|a|, |n|, floor) as the denominator.
inline GradCheckResult grad_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs, double h = 1e-5,
                                  double floor = 1e-5, std::size_t stride = 1) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor l = loss();
  backward(l);
  GradCheckResult r;
  for (auto& t : inputs) {
    const std::vector<Real> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.numel(); i += stride) {
      const Real saved = t.ptr()[i];
      double fp, fm;
      {
        NoGradGuard g;
        t.ptr()[i] = static_cast<Real>(saved + h);
        fp = static_cast<double>(loss().item());
        t.ptr()[i] = static_cast<Real>(saved - h);
        fm = static_cast<double>(loss().item());
        t.ptr()[i] = saved;
      }
      const double numeric = (fp - fm) / (2 * h);
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), floor});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst_analytic = a;
        r.worst_numeric = numeric;
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace testing
