#include "ctxreg/model.hpp"

#include <cmath>
#include <numbers>
#include <ostream>

#include "ctxreg/keyvalue.hpp"
#include "ctxreg/ops.hpp"

namespace ctxreg {
namespace {

constexpr Real kMaskedScore = Real(-1e9);

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (Real& v : t.data()) v = static_cast<Real>((2.0 * uniform01(rng) - 1.0) * bound);
  return t;
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  auto data = t.data();
  for (std::size_t i = 0; i < data.size(); i += 2) {
    // Box-Muller; avoids implementation-defined std::normal_distribution.
    const double u1 = 1.0 - uniform01(rng);
    const double u2 = uniform01(rng);
    const double r = std::sqrt(-2.0 * std::log(u1));
    data[i] = static_cast<Real>(stddev * r * std::cos(2.0 * std::numbers::pi * u2));
    if (i + 1 < data.size()) data[i + 1] = static_cast<Real>(stddev * r * std::sin(2.0 * std::numbers::pi * u2));
  }
  return t;
}

}  // namespace

std::string to_string(GateMode mode) { return mode == GateMode::kSigmoid ? "sigmoid" : "unbounded"; }
std::string to_string(ContextMode mode) { return mode == ContextMode::kContextBlind ? "blind" : "larger"; }

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model: layers must be >= 1");
  if (width == 0 || heads == 0 || width % heads != 0) throw ConfigError("model: width must be divisible by heads");
  if (ff_width == 0) throw ConfigError("model: ff_width must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model: dropout must be in [0, 1)");
  if (vocab_size <= static_cast<std::size_t>(Vocabulary::kNumReserved)) {
    throw ConfigError("model: vocab_size must exceed the reserved ids");
  }
}

void ModelConfig::write(std::ostream& out) const {
  out << "model.layers = " << layers << '\n'
      << "model.width = " << width << '\n'
      << "model.heads = " << heads << '\n'
      << "model.ff_width = " << ff_width << '\n'
      << "model.dropout = " << format_exact(dropout) << '\n'
      << "model.gate = " << to_string(gate) << '\n'
      << "model.vocab_size = " << vocab_size << '\n'
      << "model.context = " << to_string(context_mode) << '\n';
}

ModelConfig ModelConfig::read(KeyValueReader& kv) {
  ModelConfig c;
  c.layers = kv.get_uint("model.layers");
  c.width = kv.get_uint("model.width");
  c.heads = kv.get_uint("model.heads");
  c.ff_width = kv.get_uint("model.ff_width");
  c.dropout = kv.get_double("model.dropout");
  const std::string gate = kv.get_string("model.gate");
  if (gate == "unbounded") {
    c.gate = GateMode::kUnbounded;
  } else if (gate == "sigmoid") {
    c.gate = GateMode::kSigmoid;
  } else {
    throw ConfigError("model.gate must be 'unbounded' or 'sigmoid', got '" + gate + "'");
  }
  c.vocab_size = kv.get_uint("model.vocab_size");
  const std::string ctx = kv.get_string("model.context");
  if (ctx == "larger") {
    c.context_mode = ContextMode::kLargerContext;
  } else if (ctx == "blind") {
    c.context_mode = ContextMode::kContextBlind;
  } else {
    throw ConfigError("model.context must be 'larger' or 'blind', got '" + ctx + "'");
  }
  return c;
}

Tensor& ParameterStore::add(std::string name, Tensor value) {
  if (contains(name)) throw std::logic_error("duplicate parameter " + name);
  value.set_requires_grad(true);
  entries_.emplace_back(std::move(name), std::move(value));
  return entries_.back().second;
}

Tensor& ParameterStore::get(const std::string& name) {
  for (auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + name);
}

const Tensor& ParameterStore::get(const std::string& name) const {
  return const_cast<ParameterStore*>(this)->get(name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return true;
  }
  return false;
}

std::size_t ParameterStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

std::vector<std::uint8_t> attention_fill_mask(const IdMatrix& keys, std::size_t query_len, bool causal) {
  std::vector<std::uint8_t> mask(keys.rows * query_len * keys.cols, 0);
  for (std::size_t b = 0; b < keys.rows; ++b) {
    for (std::size_t q = 0; q < query_len; ++q) {
      std::uint8_t* row = mask.data() + (b * query_len + q) * keys.cols;
      for (std::size_t k = 0; k < keys.cols; ++k) row[k] = (!keys.valid(b, k) || (causal && k > q)) ? 1 : 0;
    }
  }
  return mask;
}

ContextTransformer::ContextTransformer(const ModelConfig& config, std::uint64_t init_seed)
    : config_(config), dropout_rng_(init_seed ^ 0x9e3779b97f4a7c15ULL) {
  config_.validate();
  std::mt19937_64 rng(init_seed);
  const std::size_t d = config_.width;
  embedding_ = params_.add("embedding", normal_tensor({config_.vocab_size, d}, 1.0 / std::sqrt(double(d)), rng));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "encoder." + std::to_string(l) + ".";
    EncoderLayer layer;
    layer.self = make_attention(p + "self", rng);
    layer.self_norm = make_norm(p + "self_norm");
    layer.ff = make_ff(p + "ff", rng);
    layer.ff_norm = make_norm(p + "ff_norm");
    encoder_.push_back(std::move(layer));
  }
  merge_.attn = make_attention("merge.attn", rng);
  merge_.gate = make_linear("merge.gate", 2 * d, d, rng);
  merge_.ff = make_ff("merge.ff", rng);
  merge_.norm = make_norm("merge.norm");
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::string p = "decoder." + std::to_string(l) + ".";
    DecoderLayer layer;
    layer.self = make_attention(p + "self", rng);
    layer.self_norm = make_norm(p + "self_norm");
    layer.cross = make_attention(p + "cross", rng);
    layer.cross_norm = make_norm(p + "cross_norm");
    layer.ff = make_ff(p + "ff", rng);
    layer.ff_norm = make_norm(p + "ff_norm");
    decoder_.push_back(std::move(layer));
  }
}

Linear ContextTransformer::make_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / double(in + out));
  Linear lin;
  lin.weight = params_.add(name + ".weight", uniform_tensor({in, out}, bound, rng));
  lin.bias = params_.add(name + ".bias", Tensor::zeros({out}));
  return lin;
}

AttentionBlock ContextTransformer::make_attention(const std::string& name, std::mt19937_64& rng) {
  const std::size_t d = config_.width;
  return AttentionBlock{make_linear(name + ".q", d, d, rng), make_linear(name + ".k", d, d, rng),
                        make_linear(name + ".v", d, d, rng), make_linear(name + ".out", d, d, rng)};
}

FeedForward ContextTransformer::make_ff(const std::string& name, std::mt19937_64& rng) {
  return FeedForward{make_linear(name + ".inner", config_.width, config_.ff_width, rng),
                     make_linear(name + ".outer", config_.ff_width, config_.width, rng)};
}

Norm ContextTransformer::make_norm(const std::string& name) {
  Norm n;
  n.gain = params_.add(name + ".gain", Tensor::full({config_.width}, Real(1)));
  n.bias = params_.add(name + ".bias", Tensor::zeros({config_.width}));
  return n;
}

Tensor ContextTransformer::linear(const Linear& lin, const Tensor& x) const {
  return ops::add(ops::matmul(x, lin.weight), lin.bias);
}

Tensor ContextTransformer::norm(const Norm& n, const Tensor& x) const { return ops::layer_norm(x, n.gain, n.bias); }

Tensor ContextTransformer::drop(const Tensor& x) const {
  return ops::dropout(x, static_cast<Real>(config_.dropout), training_, dropout_rng_);
}

Tensor ContextTransformer::feed_forward(const FeedForward& ff, const Tensor& x) const {
  return linear(ff.outer, ops::relu(linear(ff.inner, x)));
}

Tensor ContextTransformer::positional(std::size_t length) const {
  const std::size_t d = config_.width;
  std::vector<Real> pe(length * d);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = double(pos) / std::pow(10000.0, double(i) / double(d));
      pe[pos * d + i] = static_cast<Real>(std::sin(angle));
      if (i + 1 < d) pe[pos * d + i + 1] = static_cast<Real>(std::cos(angle));
    }
  }
  return Tensor::from({length, d}, std::move(pe));
}

Tensor ContextTransformer::embed(const IdMatrix& ids) const {
  Tensor e = ops::embedding(embedding_, ids.ids, {ids.rows, ids.cols});
  e = ops::scale(e, static_cast<Real>(std::sqrt(double(config_.width))));
  return drop(ops::add(e, positional(ids.cols)));
}

Tensor ContextTransformer::attention(const AttentionBlock& block, const Tensor& query, const Tensor& keys,
                                     const std::vector<std::uint8_t>& fill_mask) const {
  const std::size_t heads = config_.heads;
  const Real inv_sqrt = static_cast<Real>(1.0 / std::sqrt(double(config_.width / heads)));
  auto q = ops::split_last(linear(block.q, query), heads);
  auto k = ops::split_last(linear(block.k, keys), heads);
  auto v = ops::split_last(linear(block.v, keys), heads);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor scores = ops::scale(ops::matmul(q[h], ops::transpose_last2(k[h])), inv_sqrt);
    scores = ops::masked_fill(scores, fill_mask, kMaskedScore);
    outs.push_back(ops::matmul(ops::softmax(scores), v[h]));
  }
  return linear(block.out, heads == 1 ? outs.front() : ops::concat_last(outs));
}

Tensor ContextTransformer::encode(const IdMatrix& ids) const {
  Tensor h = embed(ids);
  const auto mask = attention_fill_mask(ids, ids.cols, false);
  for (const EncoderLayer& layer : encoder_) {
    h = norm(layer.self_norm, ops::add(h, drop(attention(layer.self, h, h, mask))));
    h = norm(layer.ff_norm, ops::add(h, drop(feed_forward(layer.ff, h))));
  }
  return h;
}

Tensor ContextTransformer::merge(const Tensor& x, const Tensor& c, const IdMatrix& context) const {
  const auto mask = attention_fill_mask(context, x.dim(1), false);
  Tensor attended = attention(merge_.attn, x, c, mask);
  Tensor gate = linear(merge_.gate, ops::concat_last({x, attended}));
  if (config_.gate == GateMode::kSigmoid) gate = ops::sigmoid(gate);
  Tensor blended = ops::add(ops::mul(gate, drop(attended)), ops::mul(ops::scale(gate, Real(-1), Real(1)), x));
  return norm(merge_.norm, feed_forward(merge_.ff, blended));
}

Tensor ContextTransformer::merge_without_context(const Tensor& x) const {
  return norm(merge_.norm, feed_forward(merge_.ff, x));
}

Tensor ContextTransformer::decode(const IdMatrix& target_in, const Tensor& memory, const IdMatrix& source) const {
  Tensor h = embed(target_in);
  const auto self_mask = attention_fill_mask(target_in, target_in.cols, true);
  const auto cross_mask = attention_fill_mask(source, target_in.cols, false);
  for (const DecoderLayer& layer : decoder_) {
    h = norm(layer.self_norm, ops::add(h, drop(attention(layer.self, h, h, self_mask))));
    h = norm(layer.cross_norm, ops::add(h, drop(attention(layer.cross, h, memory, cross_mask))));
    h = norm(layer.ff_norm, ops::add(h, drop(feed_forward(layer.ff, h))));
  }
  return ops::log_softmax(ops::matmul(h, ops::transpose_last2(embedding_)));
}

Tensor ContextTransformer::decode_step(const IdMatrix& prefixes, const Tensor& memory, const IdMatrix& source) const {
  Tensor all = decode(prefixes, memory, source);
  const std::size_t rows = prefixes.rows, vocab = config_.vocab_size;
  std::vector<Real> last(rows * vocab);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = prefixes.row_length(r) - 1;
    std::copy_n(all.ptr() + (r * prefixes.cols + t) * vocab, vocab, last.begin() + static_cast<std::ptrdiff_t>(r * vocab));
  }
  return Tensor::from({rows, vocab}, std::move(last));
}

Tensor ContextTransformer::memory(const PaddedBatch& batch, ContextChoice choice) const {
  Tensor x = encode_source(batch.source);
  if (!uses_context()) return merge_without_context(x);
  switch (choice) {
    case ContextChoice::kNone:
      throw UnsupportedModeError(
          "forward with no context is only supported by context-blind models; "
          "larger-context models estimate context-less scores by substitution");
    case ContextChoice::kTrue:
      return merge(x, encode_context(batch.context), batch.context);
    case ContextChoice::kShuffled: {
      if (!batch.has_derangement) throw std::logic_error("batch has no context substitution");
      const IdMatrix shuffled = permute_rows(batch.context, batch.perm);
      return merge(x, encode_context(shuffled), shuffled);
    }
  }
  throw std::logic_error("unreachable");
}

Tensor ContextTransformer::forward_logprobs(const PaddedBatch& batch, ContextChoice choice) const {
  return decode(batch.target_in, memory(batch, choice), batch.source);
}

Tensor ContextTransformer::gather_reference(const Tensor& logprobs, const PaddedBatch& batch) {
  Tensor picked = ops::pick_last(logprobs, batch.target_out.ids);
  std::vector<std::uint8_t> pad(batch.target_out.mask.size());
  for (std::size_t i = 0; i < pad.size(); ++i) pad[i] = batch.target_out.mask[i] ? 0 : 1;
  return ops::masked_fill(picked, pad, Real(0));
}

Tensor ContextTransformer::forward_batch(const PaddedBatch& batch, ContextChoice choice) const {
  return gather_reference(forward_logprobs(batch, choice), batch);
}

}  // namespace ctxreg
