#include "offtarget/model.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include "offtarget/linalg.h"

namespace offtarget::model {

using nlohmann::json;

void ModelConfig::validate() const {
  if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ffn < 1 || max_context < 2)
    throw std::invalid_argument("model config: all sizes must be positive");
  if (!(init_std > 0) || !std::isfinite(init_std)) throw std::invalid_argument("model config: init_std must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                std::to_string(n_heads));
}

json to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},       {"d_ffn", c.d_ffn},     {"max_context", c.max_context},
              {"init_std", c.init_std},     {"sinusoidal_init", c.sinusoidal_init},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.max_context = j.value("max_context", c.max_context);
  c.init_std = j.value("init_std", c.init_std);
  c.sinusoidal_init = j.value("sinusoidal_init", c.sinusoidal_init);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

// Offsets into the layout.
constexpr std::size_t kTokEmb = 0;
constexpr std::size_t kPosEmb = 1;
enum LayerSlot : std::size_t { kLn1G, kLn1B, kWq, kWk, kWv, kWo, kLn2G, kLn2B, kW1, kB1, kW2, kB2 };

constexpr std::size_t layer_base(std::size_t l) { return 2 + l * 12; }
constexpr std::size_t final_base(std::size_t n_layers) { return 2 + n_layers * 12; }

constexpr float kLnEps = 1e-5f;
constexpr float kGeluC = 0.7978845608028654f;
constexpr float kGeluA = 0.044715f;

}  // namespace

std::vector<std::pair<std::string, ad::Shape>> parameter_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t v = c.vocab_size, d = c.d_model, f = c.d_ffn, t = c.max_context;
  std::vector<std::pair<std::string, ad::Shape>> out{{"tok_emb", {v, d}}, {"pos_emb", {t, d}}};
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    out.push_back({p + "ln1.gain", {d}});
    out.push_back({p + "ln1.bias", {d}});
    out.push_back({p + "attn.wq", {d, d}});
    out.push_back({p + "attn.wk", {d, d}});
    out.push_back({p + "attn.wv", {d, d}});
    out.push_back({p + "attn.wo", {d, d}});
    out.push_back({p + "ln2.gain", {d}});
    out.push_back({p + "ln2.bias", {d}});
    out.push_back({p + "ffn.w1", {d, f}});
    out.push_back({p + "ffn.b1", {f}});
    out.push_back({p + "ffn.w2", {f, d}});
    out.push_back({p + "ffn.b2", {d}});
  }
  out.push_back({"ln_f.gain", {d}});
  out.push_back({"ln_f.bias", {d}});
  return out;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  for (const auto& [name, shape] : parameter_layout(config)) n += ad::numel(shape);
  return n;
}

template <typename T>
std::size_t BasicParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.values.size();
  return n;
}

template <typename T>
const ParamTensor<T>& BasicParams<T>::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw std::out_of_range("no parameter named " + name);
}

template struct BasicParams<float>;
template struct BasicParams<double>;

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p;
  p.config = config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, static_cast<float>(config.init_std));
  for (auto& [name, shape] : parameter_layout(config)) {
    ParamTensor<float> t{name, shape, std::vector<float>(ad::numel(shape), 0.0f)};
    const bool is_gain = name.ends_with(".gain");
    const bool is_bias = name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2");
    if (is_gain) {
      std::fill(t.values.begin(), t.values.end(), 1.0f);
    } else if (name == "pos_emb" && config.sinusoidal_init) {
      const std::size_t d = config.d_model;
      for (std::size_t pos = 0; pos < t.shape[0]; ++pos)
        for (std::size_t i = 0; i < d; i += 2) {
          const double angle = pos / std::pow(1000.0, static_cast<double>(i) / d);
          t.values[pos * d + i] = static_cast<float>(config.init_std * std::sin(angle));
          if (i + 1 < d) t.values[pos * d + i + 1] = static_cast<float>(config.init_std * std::cos(angle));
        }
    } else if (!is_bias) {
      for (auto& v : t.values) v = normal(rng);
    }
    p.tensors.push_back(std::move(t));
  }
  return p;
}

template <typename T>
BoundParams<T> bind(ad::Graph<T>& graph, const BasicParams<T>& params, bool requires_grad) {
  BoundParams<T> b;
  b.config = &params.config;
  for (const auto& t : params.tensors) b.leaves.push_back(graph.leaf(t.shape, t.values, requires_grad));
  return b;
}

template BoundParams<float> bind(ad::Graph<float>&, const BasicParams<float>&, bool);
template BoundParams<double> bind(ad::Graph<double>&, const BasicParams<double>&, bool);

template <typename T>
ad::Tensor<T> forward(ad::Graph<T>&, const BoundParams<T>& params, const std::vector<Tokens>& batch, Token pad_id) {
  const ModelConfig& c = *params.config;
  if (batch.empty() || batch.front().empty()) throw std::invalid_argument("forward: empty batch");
  const std::size_t b = batch.size(), t = batch.front().size(), d = c.d_model, hd = c.head_dim();
  if (t > static_cast<std::size_t>(c.max_context))
    throw std::length_error("forward: sequence length " + std::to_string(t) + " exceeds max_context " +
                            std::to_string(c.max_context));

  std::vector<std::int64_t> ids, positions;
  std::vector<std::uint8_t> key_mask(b * t, 0);
  bool any_pad = false;
  for (std::size_t i = 0; i < b; ++i) {
    if (batch[i].size() != t) throw std::invalid_argument("forward: sequences in a batch must share one length");
    for (std::size_t j = 0; j < t; ++j) {
      const Token tok = batch[i][j];
      if (tok < 0 || tok >= c.vocab_size)
        throw std::out_of_range("forward: token id " + std::to_string(tok) + " outside vocabulary of " +
                                std::to_string(c.vocab_size));
      ids.push_back(tok);
      positions.push_back(static_cast<std::int64_t>(j));
      if (tok == pad_id) {
        key_mask[i * t + j] = 1;
        any_pad = true;
      }
    }
  }
  if (!any_pad) key_mask.clear();

  const auto& p = params.leaves;
  auto x = ad::reshape(ad::add(ad::embedding(p[kTokEmb], ids), ad::embedding(p[kPosEmb], positions)), {b, t, d});
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  for (int l = 0; l < c.n_layers; ++l) {
    const std::size_t base = layer_base(l);
    auto h = ad::layer_norm(x, p[base + kLn1G], p[base + kLn1B]);
    auto q = ad::matmul(h, p[base + kWq]);
    auto k = ad::matmul(h, p[base + kWk]);
    auto v = ad::matmul(h, p[base + kWv]);
    std::vector<ad::Tensor<T>> heads;
    for (int head = 0; head < c.n_heads; ++head) {
      const std::size_t lo = head * hd, hi = lo + hd;
      auto qh = ad::slice(q, 2, lo, hi);
      auto kh = ad::slice(k, 2, lo, hi);
      auto vh = ad::slice(v, 2, lo, hi);
      auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
      auto attn = ad::softmax(ad::causal_mask(scores, key_mask));
      heads.push_back(ad::matmul(attn, vh));
    }
    auto mixed = c.n_heads == 1 ? heads.front() : ad::concat_last<T>(heads);
    x = ad::add(x, ad::matmul(mixed, p[base + kWo]));
    auto h2 = ad::layer_norm(x, p[base + kLn2G], p[base + kLn2B]);
    auto ff = ad::gelu(ad::add(ad::matmul(h2, p[base + kW1]), p[base + kB1]));
    x = ad::add(x, ad::add(ad::matmul(ff, p[base + kW2]), p[base + kB2]));
  }
  const std::size_t fb = final_base(c.n_layers);
  auto xf = ad::layer_norm(x, p[fb], p[fb + 1]);
  return ad::matmul(xf, ad::transpose(p[kTokEmb]));
}

template <typename T>
ad::Tensor<T> target_log_probs(ad::Graph<T>& graph, const BoundParams<T>& params, const Tokens& prompt,
                               const Tokens& target) {
  if (target.empty()) throw std::invalid_argument("sequence_log_prob: empty target");
  if (prompt.empty()) throw std::invalid_argument("sequence_log_prob: empty prompt");
  Tokens full = prompt;
  full.insert(full.end(), target.begin(), target.end());
  // The last token is never an input for a prediction we need.
  full.pop_back();
  const std::size_t len = full.size(), vocab = params.config->vocab_size;
  auto logits = ad::reshape(forward(graph, params, {full}, -1), {len, vocab});
  auto rows = ad::slice(logits, 0, prompt.size() - 1, len);
  std::vector<std::int64_t> cols(target.begin(), target.end());
  return ad::gather(ad::log_softmax(rows), cols);
}

template <typename T>
ad::Tensor<T> sequence_log_prob(ad::Graph<T>& graph, const BoundParams<T>& params, const Tokens& prompt,
                                const Tokens& target) {
  return ad::sum(target_log_probs(graph, params, prompt, target));
}

template ad::Tensor<float> forward(ad::Graph<float>&, const BoundParams<float>&, const std::vector<Tokens>&, Token);
template ad::Tensor<double> forward(ad::Graph<double>&, const BoundParams<double>&, const std::vector<Tokens>&, Token);
template ad::Tensor<float> target_log_probs(ad::Graph<float>&, const BoundParams<float>&, const Tokens&, const Tokens&);
template ad::Tensor<double> target_log_probs(ad::Graph<double>&, const BoundParams<double>&, const Tokens&,
                                             const Tokens&);
template ad::Tensor<float> sequence_log_prob(ad::Graph<float>&, const BoundParams<float>&, const Tokens&, const Tokens&);
template ad::Tensor<double> sequence_log_prob(ad::Graph<double>&, const BoundParams<double>&, const Tokens&,
                                              const Tokens&);

std::vector<float> forward_logits(const ModelParams& params, const std::vector<Tokens>& batch, Token pad_id) {
  ad::Graph<float> g;
  auto bound = bind(g, params, false);
  auto out = forward(g, bound, batch, pad_id);
  return {out.values().begin(), out.values().end()};
}

// ---------------------------------------------------------------------------
// Incremental inference

namespace {

void layer_norm_vec(const float* x, const float* gain, const float* bias, std::size_t n, float* y) {
  float mu = 0;
  for (std::size_t i = 0; i < n; ++i) mu += x[i];
  mu /= static_cast<float>(n);
  float var = 0;
  for (std::size_t i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= static_cast<float>(n);
  const float rstd = 1.0f / std::sqrt(var + kLnEps);
  for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mu) * rstd * gain[i] + bias[i];
}

}  // namespace

InferenceSession::InferenceSession(const ModelParams& params)
    : params_(&params), keys_(params.config.n_layers), values_(params.config.n_layers) {}

std::span<const float> InferenceSession::feed(std::span<const Token> tokens) {
  if (tokens.empty()) throw std::invalid_argument("InferenceSession: nothing to feed");
  for (Token t : tokens) feed(t);
  return logits_;
}

std::span<const float> InferenceSession::feed(Token token) {
  const ModelConfig& c = params_->config;
  const auto& p = params_->tensors;
  const std::size_t d = c.d_model, f = c.d_ffn, hd = c.head_dim(), vocab = c.vocab_size;
  if (position_ >= static_cast<std::size_t>(c.max_context))
    throw std::length_error("InferenceSession: position exceeds max_context " + std::to_string(c.max_context));
  if (token < 0 || static_cast<std::size_t>(token) >= vocab)
    throw std::out_of_range("InferenceSession: token id " + std::to_string(token) + " outside vocabulary");

  std::vector<float> x(d), h(d), q(d), k(d), v(d), o(d), ff(f);
  const float* tok = p[kTokEmb].values.data() + token * d;
  const float* pos = p[kPosEmb].values.data() + position_ * d;
  for (std::size_t i = 0; i < d; ++i) x[i] = tok[i] + pos[i];

  const std::size_t steps = position_ + 1;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> scores(steps);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::size_t base = layer_base(l);
    layer_norm_vec(x.data(), p[base + kLn1G].values.data(), p[base + kLn1B].values.data(), d, h.data());
    std::fill(q.begin(), q.end(), 0.0f);
    std::fill(k.begin(), k.end(), 0.0f);
    std::fill(v.begin(), v.end(), 0.0f);
    linalg::vecmat(d, d, h.data(), p[base + kWq].values.data(), q.data());
    linalg::vecmat(d, d, h.data(), p[base + kWk].values.data(), k.data());
    linalg::vecmat(d, d, h.data(), p[base + kWv].values.data(), v.data());
    keys_[l].insert(keys_[l].end(), k.begin(), k.end());
    values_[l].insert(values_[l].end(), v.begin(), v.end());

    std::fill(o.begin(), o.end(), 0.0f);
    for (int head = 0; head < c.n_heads; ++head) {
      const std::size_t off = head * hd;
      float mx = -INFINITY;
      for (std::size_t j = 0; j < steps; ++j) {
        const float* kj = keys_[l].data() + j * d + off;
        float s = 0;
        for (std::size_t e = 0; e < hd; ++e) s += q[off + e] * kj[e];
        scores[j] = s * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      float z = 0;
      for (std::size_t j = 0; j < steps; ++j) {
        scores[j] = std::exp(scores[j] - mx);
        z += scores[j];
      }
      for (std::size_t j = 0; j < steps; ++j) {
        const float a = scores[j] / z;
        const float* vj = values_[l].data() + j * d + off;
        for (std::size_t e = 0; e < hd; ++e) o[off + e] += a * vj[e];
      }
    }
    linalg::vecmat(d, d, o.data(), p[base + kWo].values.data(), x.data());

    layer_norm_vec(x.data(), p[base + kLn2G].values.data(), p[base + kLn2B].values.data(), d, h.data());
    std::copy(p[base + kB1].values.begin(), p[base + kB1].values.end(), ff.begin());
    linalg::vecmat(d, f, h.data(), p[base + kW1].values.data(), ff.data());
    for (auto& e : ff) e = 0.5f * e * (1.0f + std::tanh(kGeluC * (e + kGeluA * e * e * e)));
    for (std::size_t i = 0; i < d; ++i) x[i] += p[base + kB2].values[i];
    linalg::vecmat(f, d, ff.data(), p[base + kW2].values.data(), x.data());
  }
  const std::size_t fb = final_base(c.n_layers);
  layer_norm_vec(x.data(), p[fb].values.data(), p[fb + 1].values.data(), d, h.data());
  logits_.assign(vocab, 0.0f);
  const float* emb = p[kTokEmb].values.data();
  for (std::size_t t = 0; t < vocab; ++t) {
    float s = 0;
    for (std::size_t i = 0; i < d; ++i) s += emb[t * d + i] * h[i];
    logits_[t] = s;
  }
  ++position_;
  return logits_;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

void put_u64_le(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64_le(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated header length");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_floats_le(std::ostream& out, const std::vector<float>& vals) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(vals.data()), static_cast<std::streamsize>(vals.size() * sizeof(float)));
  } else {
    for (float f : vals) {
      auto u = std::bit_cast<std::uint32_t>(f);
      unsigned char b[4] = {static_cast<unsigned char>(u), static_cast<unsigned char>(u >> 8),
                            static_cast<unsigned char>(u >> 16), static_cast<unsigned char>(u >> 24)};
      out.write(reinterpret_cast<const char*>(b), 4);
    }
  }
}

void read_floats_le(std::istream& in, std::vector<float>& vals) {
  std::vector<unsigned char> raw(vals.size() * 4);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::runtime_error("checkpoint: truncated tensor data");
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const std::uint32_t u = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                            (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    vals[i] = std::bit_cast<float>(u);
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json tensors = json::array();
  std::size_t offset = 0;
  for (const auto& t : ckpt.params.tensors) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += t.values.size();
  }
  const json header{{"format_version", kCheckpointFormatVersion},
                    {"model_config", to_json(ckpt.params.config)},
                    {"tensors", tensors},
                    {"metadata", ckpt.metadata}};
  const std::string text = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    put_u64_le(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : ckpt.params.tensors) write_floats_le(out, t.values);
    if (!out) throw std::runtime_error("checkpoint write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::uint64_t len = get_u64_le(in);
  if (len > (1u << 26)) throw std::runtime_error("checkpoint: implausible header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  const json header = json::parse(text);
  if (header.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version");

  Checkpoint ckpt;
  ckpt.params.config = model_config_from_json(header.at("model_config"));
  ckpt.metadata = header.value("metadata", json::object());
  const auto layout = parameter_layout(ckpt.params.config);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != layout.size()) throw std::runtime_error("checkpoint: tensor table does not match config");
  std::size_t offset = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& entry = tensors[i];
    ParamTensor<float> t{entry.at("name").get<std::string>(), entry.at("shape").get<ad::Shape>(), {}};
    if (t.name != layout[i].first || t.shape != layout[i].second || entry.at("offset").get<std::size_t>() != offset)
      throw std::runtime_error("checkpoint: unexpected tensor entry " + t.name);
    t.values.resize(ad::numel(t.shape));
    read_floats_le(in, t.values);
    offset += t.values.size();
    ckpt.params.tensors.push_back(std::move(t));
  }
  return ckpt;
}

std::string file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 15];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

}  // namespace offtarget::model
