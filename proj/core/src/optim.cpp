#include "ctxreg/optim.hpp"

#include <cmath>

namespace ctxreg {

AdamState AdamState::for_params(const ParameterStore& params) {
  AdamState s;
  for (const auto& [name, p] : params) {
    s.first.push_back(Tensor::zeros(p.shape()));
    s.second.push_back(Tensor::zeros(p.shape()));
  }
  return s;
}

void adam_step(ParameterStore& params, AdamState& state, double lr, const AdamHyper& hyper) {
  if (state.first.size() != params.size() || state.second.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state does not match the parameter store");
  }
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) {
      if (!std::isfinite(g)) throw NonFiniteGradient(name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(hyper.beta1, t);
  const double c2 = 1.0 - std::pow(hyper.beta2, t);
  const Real b1 = static_cast<Real>(hyper.beta1), b2 = static_cast<Real>(hyper.beta2);
  std::size_t i = 0;
  for (auto& [name, p] : params) {
    Real* m = state.first[i].ptr();
    Real* v = state.second[i].ptr();
    Real* w = p.ptr();
    const bool has = p.has_grad();
    const Real* g = has ? p.grad().data() : nullptr;
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const Real gk = has ? g[k] : Real(0);
      m[k] = b1 * m[k] + (Real(1) - b1) * gk;
      v[k] = b2 * v[k] + (Real(1) - b2) * gk * gk;
      const double mhat = static_cast<double>(m[k]) / c1;
      const double vhat = static_cast<double>(v[k]) / c2;
      w[k] = static_cast<Real>(static_cast<double>(w[k]) - lr * mhat / (std::sqrt(vhat) + hyper.epsilon));
    }
    ++i;
  }
}

double gradient_norm(const ParameterStore& params) {
  double sq = 0;
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

double clip_gradients(ParameterStore& params, double max_norm) {
  const double norm = gradient_norm(params);
  if (max_norm > 0 && norm > max_norm) {
    const Real factor = static_cast<Real>(max_norm / norm);
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      for (Real& g : p.grad()) g *= factor;
    }
  }
  return norm;
}

bool PlateauState::observe(double score, std::size_t patience) {
  if (!has_best || score > best) {
    best = score;
    has_best = true;
    stagnant = 0;
    return false;
  }
  if (++stagnant >= patience) {
    stagnant = 0;
    ++halvings;
    return true;
  }
  return false;
}

double lr_schedule(const std::vector<double>& history, double initial_lr, std::size_t patience, double factor) {
  PlateauState state;
  double lr = initial_lr;
  for (double score : history) {
    if (state.observe(score, patience)) lr *= factor;
  }
  return lr;
}

}  // namespace ctxreg
