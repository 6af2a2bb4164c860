#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ctxreg/keyvalue.hpp"
#include "ctxreg/log.hpp"
#include "ctxreg/loss.hpp"
#include "ctxreg/scoring.hpp"
#include "helpers.hpp"

using namespace ctxreg;

namespace {

double tol() { return sizeof(Real) == 8 ? 1e-12 : 1e-5; }

struct FakeScores {
  std::vector<std::size_t> lengths;
  std::vector<std::vector<double>> with, without;  // [n][t], t < lengths[n]
  std::size_t cols = 0;

  ScoreBundle bundle() const {
    const std::size_t rows = lengths.size();
    std::vector<Real> a(rows * cols, 0), b(rows * cols, 0);
    std::vector<std::uint8_t> pad(rows * cols, 1);
    for (std::size_t n = 0; n < rows; ++n) {
      for (std::size_t t = 0; t < lengths[n]; ++t) {
        a[n * cols + t] = static_cast<Real>(with[n][t]);
        b[n * cols + t] = static_cast<Real>(without[n][t]);
        pad[n * cols + t] = 0;
      }
    }
    return make_bundle(Tensor::from({rows, cols}, a, true), Tensor::from({rows, cols}, b, true), lengths, pad);
  }
};

FakeScores random_scores(std::uint64_t seed, std::size_t rows, std::size_t cols) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-3.0, -0.01);
  FakeScores f;
  f.cols = cols;
  for (std::size_t n = 0; n < rows; ++n) {
    f.lengths.push_back(1 + uniform_index(rng, cols));
    std::vector<double> w, wo;
    for (std::size_t t = 0; t < f.lengths.back(); ++t) {
      w.push_back(static_cast<Real>(u(rng)));
      wo.push_back(static_cast<Real>(u(rng)));
    }
    f.with.push_back(w);
    f.without.push_back(wo);
  }
  return f;
}

struct FlatTerms {
  double data = 0, sent = 0, tok = 0;
};

// Straight loops over the definition, in double precision.
FlatTerms flat_regularizer(const FakeScores& f, const RegConfig& cfg) {
  auto h = [](double x) { return x > 0 ? x : 0.0; };
  double total = 0, data_w = 0, data_wo = 0;
  FlatTerms r;
  for (std::size_t n = 0; n < f.lengths.size(); ++n) {
    double sw = 0, swo = 0;
    for (std::size_t t = 0; t < f.lengths[n]; ++t) {
      sw += f.with[n][t];
      swo += f.without[n][t];
      r.tok += h(cfg.delta_tok - f.with[n][t] + f.without[n][t]);
    }
    r.sent += h(double(f.lengths[n]) * cfg.delta_sent - sw + swo);
    data_w += sw;
    data_wo += swo;
    total += double(f.lengths[n]);
  }
  r.data = h(total * cfg.delta_data - data_w + data_wo);
  r.data /= total;
  r.sent /= total;
  r.tok /= total;
  return r;
}

struct CaptureLog {
  std::vector<std::string> lines;
  LogSink previous;
  CaptureLog() {
    previous = set_log_sink([this](LogLevel, std::string_view m) { lines.emplace_back(m); });
  }
  ~CaptureLog() { set_log_sink(previous); }
};

}  // namespace

TEST_CASE("hinge examples") {
  CHECK(hinge(Real(0), Real(-1), Real(-1)) == Real(0));
  CHECK(double(hinge(Real(0), Real(-2), Real(-1))) == doctest::Approx(1.0));
  const Real margin = static_cast<Real>(std::log(1.1));
  CHECK(double(hinge(margin, Real(-1.0), Real(-1.05))) == doctest::Approx(0.0453101798).epsilon(1e-5));
  CHECK(hinge(Real(0), Real(-1), Real(-3)) == Real(0));
}

TEST_CASE("log-mean-exp of log 0.1 and log 0.3 is log 0.2") {
  const double v[] = {std::log(0.1), std::log(0.3)};
  CHECK(log_mean_exp(v) == doctest::Approx(std::log(0.2)).epsilon(1e-14));
  const double big[] = {-1000.0, -1000.0, -1000.0};
  CHECK(log_mean_exp(big) == doctest::Approx(-1000.0));
  const double one[] = {-2.5};
  CHECK(log_mean_exp(one) == -2.5);
}

TEST_CASE("sentence and data scores are sums of token scores") {
  const FakeScores f = random_scores(3, 5, 6);
  const ScoreBundle b = f.bundle();
  double data = 0;
  for (std::size_t n = 0; n < 5; ++n) {
    double s = 0;
    for (double v : f.with[n]) s += v;
    CHECK(double(b.sent_true.at(n)) == doctest::Approx(s).epsilon(tol()));
    data += s;
  }
  CHECK(double(b.data_true.item()) == doctest::Approx(data).epsilon(tol()));
  CHECK(b.total_tokens() == std::accumulate(f.lengths.begin(), f.lengths.end(), std::size_t{0}));
}

TEST_CASE("regularizer agrees with a direct loop over the definition") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const FakeScores f = random_scores(seed, 6, 7);
    RegConfig cfg;
    cfg.alpha_sent = 0.5;
    cfg.delta_data = 0.3 * double(seed % 4);
    cfg.delta_sent = 0.1 * double(seed % 3);
    cfg.delta_tok = 0.2 * double(seed % 5);
    const RegTerms terms = context_regularizer(f.bundle(), cfg);
    const FlatTerms ref = flat_regularizer(f, cfg);
    CHECK(double(terms.data.item()) == doctest::Approx(ref.data).epsilon(tol()));
    CHECK(double(terms.sent.item()) == doctest::Approx(ref.sent).epsilon(tol()));
    CHECK(double(terms.tok.item()) == doctest::Approx(ref.tok).epsilon(tol()));
  }
}

TEST_CASE("identical scores with zero margins give zero terms") {
  FakeScores f = random_scores(4, 4, 5);
  f.without = f.with;
  RegConfig cfg;
  cfg.delta_data = 0;
  const RegTerms t = context_regularizer(f.bundle(), cfg);
  CHECK(t.data.item() == Real(0));
  CHECK(t.sent.item() == Real(0));
  CHECK(t.tok.item() == Real(0));
}

TEST_CASE("true context far ahead of every margin gives zero terms") {
  FakeScores f = random_scores(5, 4, 5);
  for (auto& row : f.without) {
    for (auto& v : row) v = -50.0;
  }
  const RegTerms t = context_regularizer(f.bundle(), RegConfig{});
  CHECK(t.data.item() == Real(0));
  CHECK(t.sent.item() == Real(0));
  CHECK(t.tok.item() == Real(0));
}

TEST_CASE("larger margins never shrink a term") {
  const FakeScores f = random_scores(6, 5, 6);
  const ScoreBundle b = f.bundle();
  RegConfig cfg;
  double prev_d = -1, prev_s = -1, prev_t = -1;
  for (double delta = 0; delta <= 2.0; delta += 0.1) {
    cfg.delta_data = cfg.delta_sent = cfg.delta_tok = delta;
    const RegTerms t = context_regularizer(b, cfg);
    CHECK(double(t.data.item()) >= prev_d);
    CHECK(double(t.sent.item()) >= prev_s);
    CHECK(double(t.tok.item()) >= prev_t);
    prev_d = double(t.data.item());
    prev_s = double(t.sent.item());
    prev_t = double(t.tok.item());
  }
}

TEST_CASE("combined loss skips terms with zero strength") {
  const FakeScores f = random_scores(7, 4, 5);
  const ScoreBundle b = f.bundle();
  const Tensor n = nll(b);
  const RegTerms terms = context_regularizer(b, RegConfig{});

  const LossBreakdown off = combine_loss(n, terms, RegConfig::disabled());
  CHECK(off.total_value == double(n.item()));

  RegConfig cfg;
  cfg.alpha_data = 2.0;
  cfg.alpha_sent = 0.0;
  cfg.alpha_tok = 0.5;
  const LossBreakdown on = combine_loss(n, terms, cfg);
  const double expected = double(n.item()) + 2.0 * double(terms.data.item()) + 0.5 * double(terms.tok.item());
  CHECK(on.total_value == doctest::Approx(expected).epsilon(tol()));
  CHECK(on.reg_sent == double(terms.sent.item()));

  // With zero sentence strength the sentence scores cannot move the total.
  RegTerms altered = terms;
  altered.sent = Tensor::scalar(Real(123.5));
  CHECK(combine_loss(n, altered, cfg).total_value == on.total_value);
}

TEST_CASE("nll is the per-token mean of negative scores") {
  const FakeScores f = random_scores(8, 3, 4);
  double s = 0, tokens = 0;
  for (std::size_t n = 0; n < 3; ++n) {
    for (double v : f.with[n]) s -= v;
    tokens += double(f.lengths[n]);
  }
  CHECK(double(nll(f.bundle()).item()) == doctest::Approx(s / tokens).epsilon(tol()));
}

TEST_CASE("a batch of one skips the regularizer with a warning") {
  ContextTransformer m(testing::tiny_config(10), 1);
  const Corpus c = testing::random_corpus(1, 1, 10);
  CaptureLog log;
  LossOptions opt;
  opt.reg = RegConfig{};
  const LossBreakdown l = total_loss(m, testing::whole_batch(c), opt);
  CHECK(l.reg_data == 0);
  CHECK(l.reg_tok == 0);
  CHECK(l.total_value == l.nll);
  REQUIRE(log.lines.size() == 1);
  CHECK(log.lines[0].find("size 1") != std::string::npos);
}

TEST_CASE("regularizer terms vanish for a context-blind model with zero margins") {
  ModelConfig cfg = testing::tiny_config(10);
  cfg.context_mode = ContextMode::kContextBlind;
  ContextTransformer m(cfg, 1);
  const Corpus c = testing::random_corpus(2, 4, 10);
  LossOptions opt;
  opt.reg = RegConfig{};
  opt.reg.delta_data = 0;
  const LossBreakdown l = total_loss(m, testing::whole_batch(c), opt);
  CHECK(l.reg_data == 0);
  CHECK(l.reg_sent == 0);
  CHECK(l.reg_tok == 0);
}

TEST_CASE("single-sample context-less scores use the batch substitution") {
  ContextTransformer m(testing::tiny_config(10), 2);
  const Corpus c = testing::random_corpus(3, 4, 10);
  const PaddedBatch b = testing::whole_batch(c);
  ScoreOptions opt;
  const ScoreBundle s = score_batch(m, b, opt);
  REQUIRE(s.has_contextless);
  const Tensor shuffled = m.forward_batch(b, ContextChoice::kShuffled);
  const Tensor with = m.forward_batch(b, ContextChoice::kTrue);
  for (std::size_t i = 0; i < with.numel(); ++i) {
    CHECK(double(s.token_contextless.at(i)) == doctest::Approx(double(shuffled.at(i))).epsilon(tol()));
    CHECK(double(s.token_true.at(i)) == doctest::Approx(double(with.at(i))).epsilon(tol()));
  }
}

TEST_CASE("multi-sample estimate is a per-token log-mean-exp over distinct derangements") {
  ContextTransformer m(testing::tiny_config(10), 2);
  const Corpus c = testing::random_corpus(4, 4, 10);
  const PaddedBatch b = testing::whole_batch(c);
  const auto perms = substitution_permutations(b, 3, 9);
  REQUIRE(perms.size() == 3);
  CHECK(perms[0] == b.perm);
  CHECK(perms[0] != perms[1]);
  CHECK(perms[1] != perms[2]);
  CHECK(perms[0] != perms[2]);

  const ContextLessEstimate est = contextless_scores(m, b, 3, 9);
  std::vector<Tensor> per_perm;
  for (const auto& p : perms) {
    PaddedBatch q = b;
    q.perm = p;
    per_perm.push_back(m.forward_batch(q, ContextChoice::kShuffled));
  }
  for (std::size_t i = 0; i < est.token_scores.numel(); ++i) {
    const double v[] = {double(per_perm[0].at(i)), double(per_perm[1].at(i)), double(per_perm[2].at(i))};
    CHECK(double(est.token_scores.at(i)) == doctest::Approx(log_mean_exp(v)).epsilon(sizeof(Real) == 8 ? 1e-10 : 1e-4));
  }
  CHECK_THROWS_AS(substitution_permutations(b, 10, 1), std::invalid_argument);  // only 9 derangements of 4
}

TEST_CASE("detaching the substituted branch removes its gradient") {
  ContextTransformer m(testing::tiny_config(10), 3);
  const Corpus c = testing::random_corpus(5, 4, 10);
  const PaddedBatch b = testing::whole_batch(c);
  auto grad_of = [&](bool detach) {
    m.params().zero_grad();
    LossOptions opt;
    opt.reg = RegConfig{};
    opt.reg.alpha_data = 0;
    opt.reg.alpha_tok = 1;
    opt.reg.delta_tok = 5.0;  // every token hinge active
    opt.detach_contextless = detach;
    backward(total_loss(m, b, opt).total);
    const auto g = m.params().get("merge.attn.k.weight").grad();
    return std::vector<Real>(g.begin(), g.end());
  };
  const auto attached = grad_of(false);
  const auto detached = grad_of(true);
  CHECK(attached != detached);

  // Detached with every token hinge active, the loss is 2 * nll + const.
  m.params().zero_grad();
  backward(total_loss(m, b, LossOptions{}).total);
  const auto g = m.params().get("merge.attn.k.weight").grad();
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(double(detached[i]) == doctest::Approx(2.0 * double(g[i])).epsilon(sizeof(Real) == 8 ? 1e-9 : 1e-3));
  }
}

TEST_CASE("substituted passes reuse the dropout masks of the true-context pass") {
  ModelConfig cfg = testing::tiny_config(10);
  cfg.dropout = 0.3;
  ContextTransformer m(cfg, 4);
  for (Real& w : m.params().get("merge.gate.weight").data()) w = 0;
  for (Real& w : m.params().get("merge.gate.bias").data()) w = 0;
  m.set_training(true);
  m.reseed_dropout(9);
  const Corpus c = testing::random_corpus(6, 5, 10);
  ScoreOptions opt;
  opt.samples = 3;
  const ScoreBundle s = score_batch(m, testing::whole_batch(c), opt);
  // A zero gate hides the context, so only mismatched masks could separate the scores.
  for (std::size_t i = 0; i < s.token_true.numel(); ++i) {
    CHECK(double(s.token_contextless.at(i)) == doctest::Approx(double(s.token_true.at(i))).epsilon(1e-6));
  }
  const Tensor again = m.forward_batch(testing::whole_batch(c), ContextChoice::kTrue);
  CHECK(std::vector<Real>(s.token_true.data().begin(), s.token_true.data().end()) !=
        std::vector<Real>(again.data().begin(), again.data().end()));
}
