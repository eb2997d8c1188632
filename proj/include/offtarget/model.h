#pragma once

// Decoder-only causal transformer: pre-norm residual blocks, learned
// positional embeddings, output projection tied to the token embedding.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "offtarget/autodiff.h"

namespace offtarget::model {

using Token = std::int32_t;
using Tokens = std::vector<Token>;

struct ModelConfig {
  int vocab_size = 77;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ffn = 256;
  int max_context = 192;
  double init_std = 0.14;  // weight and embedding init scale
  bool sinusoidal_init = true;  // positional table starts as init_std-scaled sinusoids (still learned)
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <typename T>
struct ParamTensor {
  std::string name;
  ad::Shape shape;
  std::vector<T> values;
};

// Named weights in a fixed order determined by ModelConfig.
template <typename T>
struct BasicParams {
  ModelConfig config;
  std::vector<ParamTensor<T>> tensors;

  std::size_t count() const;
  const ParamTensor<T>& get(const std::string& name) const;

  template <typename U>
  BasicParams<U> cast() const {
    BasicParams<U> out;
    out.config = config;
    for (const auto& t : tensors) out.tensors.push_back({t.name, t.shape, std::vector<U>(t.values.begin(), t.values.end())});
    return out;
  }
};

using ModelParams = BasicParams<float>;

// Parameter layout (name, shape) implied by a config.
std::vector<std::pair<std::string, ad::Shape>> parameter_layout(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

// Normal(0, init_std) weights and embeddings (positional table as scaled
// sinusoids when sinusoidal_init); layer-norm gains 1; all biases 0.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// Parameters entered into a graph as leaves, in layout order.
template <typename T>
struct BoundParams {
  const ModelConfig* config = nullptr;
  std::vector<ad::Tensor<T>> leaves;
};

template <typename T>
BoundParams<T> bind(ad::Graph<T>& graph, const BasicParams<T>& params, bool requires_grad);

// Logits [batch, time, vocab] for equal-length sequences. Positions holding
// pad_id are excluded as attention keys. Row t scores the token at t+1.
template <typename T>
ad::Tensor<T> forward(ad::Graph<T>& graph, const BoundParams<T>& params, const std::vector<Tokens>& batch,
                      Token pad_id);

// Per-position log p(target_t | prompt, target_<t) as a [len(target)] tensor.
template <typename T>
ad::Tensor<T> target_log_probs(ad::Graph<T>& graph, const BoundParams<T>& params, const Tokens& prompt,
                               const Tokens& target);

// Sum of target_log_probs; differentiable scalar.
template <typename T>
ad::Tensor<T> sequence_log_prob(ad::Graph<T>& graph, const BoundParams<T>& params, const Tokens& prompt,
                                const Tokens& target);

// Convenience: graph-free logits for a batch.
std::vector<float> forward_logits(const ModelParams& params, const std::vector<Tokens>& batch, Token pad_id);

// Incremental decoder over a key/value cache. Cheap to copy, so beam search
// can fork hypotheses by value.
class InferenceSession {
 public:
  explicit InferenceSession(const ModelParams& params);

  // Appends one token and returns the logits for the next position.
  std::span<const float> feed(Token token);
  std::span<const float> feed(std::span<const Token> tokens);
  std::span<const float> logits() const { return logits_; }
  std::size_t position() const { return position_; }

 private:
  const ModelParams* params_;
  std::size_t position_ = 0;
  std::vector<std::vector<float>> keys_;    // per layer, position-major [pos, d_model]
  std::vector<std::vector<float>> values_;  // same layout as keys_
  std::vector<float> logits_;
};

// Checkpoint file: little-endian u64 header length, JSON header
// {format_version, model_config, tensors:[{name, shape, offset}], metadata},
// then raw little-endian float32 values in header order.
inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  ModelParams params;
  nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);  // atomic
Checkpoint load_checkpoint(const std::filesystem::path& path);

// FNV-1a over the file bytes, as 16 hex digits.
std::string file_fingerprint(const std::filesystem::path& path);

extern template BoundParams<float> bind(ad::Graph<float>&, const BasicParams<float>&, bool);
extern template BoundParams<double> bind(ad::Graph<double>&, const BasicParams<double>&, bool);

}  // namespace offtarget::model
