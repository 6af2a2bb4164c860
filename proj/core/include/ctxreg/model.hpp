#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ctxreg/data.hpp"
#include "ctxreg/tensor.hpp"

namespace ctxreg {

class KeyValueReader;

enum class GateMode { kUnbounded, kSigmoid };
enum class ContextMode { kLargerContext, kContextBlind };
/// Which context feeds the merge: the paired one, the batch's substituted
/// one, or none at all (context-blind models only).
enum class ContextChoice { kTrue, kShuffled, kNone };

class UnsupportedModeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t ff_width = 128;
  double dropout = 0.1;
  GateMode gate = GateMode::kUnbounded;
  std::size_t vocab_size = 0;
  ContextMode context_mode = ContextMode::kLargerContext;

  void validate() const;
  /// Writes `model.*` keys.
  void write(std::ostream& out) const;
  static ModelConfig read(KeyValueReader& kv);
  bool operator==(const ModelConfig&) const = default;
};

std::string to_string(GateMode mode);
std::string to_string(ContextMode mode);

/// Named parameter tensors in registration order.
class ParameterStore {
 public:
  /// The returned reference is invalidated by the next add(); copy the handle to keep it.
  Tensor& add(std::string name, Tensor value);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t size() const { return entries_.size(); }
  std::size_t element_count() const;
  void zero_grad();

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct AttentionBlock {
  Linear q, k, v, out;
};

struct FeedForward {
  Linear inner, outer;
};

struct Norm {
  Tensor gain, bias;
};

struct EncoderLayer {
  AttentionBlock self;
  Norm self_norm;
  FeedForward ff;
  Norm ff_norm;
};

struct DecoderLayer {
  AttentionBlock self;
  Norm self_norm;
  AttentionBlock cross;
  Norm cross_norm;
  FeedForward ff;
  Norm ff_norm;
};

struct MergeBlock {
  AttentionBlock attn;
  Linear gate;  // [2 * width, width]
  FeedForward ff;
  Norm norm;
};

/// Gated larger-context transformer. One encoder stack is shared by context
/// and source; the attended context is blended into the source through a
/// per-position elementwise gate, passed through a feed-forward block, and
/// fed to a standard decoder. A single embedding matrix serves both encoders,
/// the decoder input, and the output projection.
class ContextTransformer {
 public:
  ContextTransformer(const ModelConfig& config, std::uint64_t init_seed);

  ContextTransformer(const ContextTransformer&) = delete;
  ContextTransformer& operator=(const ContextTransformer&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }
  /// Dropout stream position. Restoring it replays the same masks for
  /// activations of the same shapes.
  std::mt19937_64 dropout_state() const { return dropout_rng_; }
  void restore_dropout_state(const std::mt19937_64& state) const { dropout_rng_ = state; }

  /// [B, S, width]; PAD keys are excluded from every attention.
  Tensor encode_context(const IdMatrix& context) const { return encode(context); }
  Tensor encode_source(const IdMatrix& source) const { return encode(source); }

  /// Gate merge of source states x with context states c.
  Tensor merge(const Tensor& x, const Tensor& c, const IdMatrix& context) const;
  /// Merge with the context path removed (x_c = FF(x)); used by context-blind models.
  Tensor merge_without_context(const Tensor& x) const;

  /// Log-probabilities [B, T, V] for every prefix of `target_in`.
  Tensor decode(const IdMatrix& target_in, const Tensor& memory, const IdMatrix& source) const;
  /// Log-probabilities [B, V] of the token following each row of `prefixes`.
  Tensor decode_step(const IdMatrix& prefixes, const Tensor& memory, const IdMatrix& source) const;

  /// Merged source memory for a batch under the given context choice.
  Tensor memory(const PaddedBatch& batch, ContextChoice choice) const;
  Tensor forward_logprobs(const PaddedBatch& batch, ContextChoice choice) const;
  /// log p(y_t | y_<t, X, C) of the reference tokens, [B, T], zero at PAD.
  Tensor forward_batch(const PaddedBatch& batch, ContextChoice choice) const;

  /// Gathers reference log-probabilities from a [B, T, V] tensor.
  static Tensor gather_reference(const Tensor& logprobs, const PaddedBatch& batch);

  bool uses_context() const { return config_.context_mode == ContextMode::kLargerContext; }

  const MergeBlock& merge_block() const { return merge_; }

 private:
  Tensor encode(const IdMatrix& ids) const;
  Tensor embed(const IdMatrix& ids) const;
  Tensor attention(const AttentionBlock& block, const Tensor& query, const Tensor& keys,
                   const std::vector<std::uint8_t>& fill_mask) const;
  Tensor feed_forward(const FeedForward& ff, const Tensor& x) const;
  Tensor linear(const Linear& lin, const Tensor& x) const;
  Tensor norm(const Norm& n, const Tensor& x) const;
  Tensor drop(const Tensor& x) const;
  Tensor positional(std::size_t length) const;

  Linear make_linear(const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng);
  AttentionBlock make_attention(const std::string& name, std::mt19937_64& rng);
  FeedForward make_ff(const std::string& name, std::mt19937_64& rng);
  Norm make_norm(const std::string& name);

  ModelConfig config_;
  ParameterStore params_;
  Tensor embedding_;
  std::vector<EncoderLayer> encoder_;
  MergeBlock merge_;
  std::vector<DecoderLayer> decoder_;
  bool training_ = false;
  mutable std::mt19937_64 dropout_rng_;
};

/// Key mask for attention scores [B, Tq, Tk]: 1 where the key is PAD, or in
/// the future of the query when `causal`.
std::vector<std::uint8_t> attention_fill_mask(const IdMatrix& keys, std::size_t query_len, bool causal);

}  // namespace ctxreg
