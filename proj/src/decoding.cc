#include "offtarget/decoding.h"

#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

#include "offtarget/parallel.h"

namespace offtarget::decode {

using nlohmann::json;

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kGreedy: return "greedy";
    case Strategy::kBeam: return "beam";
    case Strategy::kContrastive: return "contrastive";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "greedy") return Strategy::kGreedy;
  if (s == "beam") return Strategy::kBeam;
  if (s == "contrastive") return Strategy::kContrastive;
  throw std::invalid_argument("unknown strategy '" + s + "' (expected greedy|beam|contrastive)");
}

void DecodeConfig::validate() const {
  if (beam_size < 1) throw std::invalid_argument("decode config: beam_size must be >= 1");
  if (!(lambda_lang >= 0)) throw std::invalid_argument("decode config: lambda_lang must be non-negative");
  if (k_shot < 0) throw std::invalid_argument("decode config: k_shot must be >= 0");
  if (max_new_tokens < 0) throw std::invalid_argument("decode config: max_new_tokens must be >= 0");
  if (contrast_target < -1) throw std::invalid_argument("decode config: contrast_target must be -1 or a language id");
}

json to_json(const DecodeConfig& c) {
  json j{{"strategy", to_string(c.strategy)},
         {"k_shot", c.k_shot},
         {"template", data::to_string(c.tmpl)},
         {"max_new_tokens", c.max_new_tokens == 0 ? json("2*len(x)+4") : json(c.max_new_tokens)},
         {"seed", c.seed}};
  if (c.strategy == Strategy::kBeam) j["beam_size"] = c.beam_size;
  if (c.strategy == Strategy::kContrastive) {
    j["lambda_lang"] = c.lambda_lang;
    j["contrast_target"] = c.contrast_target < 0 ? json("src") : json(c.contrast_target);
  }
  return j;
}

DecodeConfig decode_config_from_json(const json& j) {
  DecodeConfig c;
  if (j.contains("strategy")) c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  c.beam_size = j.value("beam_size", c.beam_size);
  c.k_shot = j.value("k_shot", c.k_shot);
  c.lambda_lang = j.value("lambda_lang", c.lambda_lang);
  if (j.contains("max_new_tokens") && j.at("max_new_tokens").is_number_integer())
    c.max_new_tokens = j.at("max_new_tokens").get<int>();
  if (j.contains("contrast_target") && j.at("contrast_target").is_number_integer())
    c.contrast_target = j.at("contrast_target").get<int>();
  if (j.contains("template")) c.tmpl = data::template_from_string(j.at("template").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

std::string config_hash(const DecodeConfig& c) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Tokens greedy_decode(const model::ModelParams& params, const Tokens& prompt, int max_new_tokens) {
  return greedy_search(model::InferenceSession(params), prompt, max_new_tokens).tokens;
}

Tokens beam_decode(const model::ModelParams& params, const Tokens& prompt, int beam_size, int max_new_tokens) {
  return beam_search(model::InferenceSession(params), prompt, beam_size, max_new_tokens).tokens;
}

Tokens contrastive_decode(const model::ModelParams& params, const Tokens& prompt, const Tokens& contrast_prompt,
                          double lambda, int max_new_tokens) {
  return contrastive_search(model::InferenceSession(params), prompt, contrast_prompt, lambda, max_new_tokens).tokens;
}

std::vector<data::InstructionSample> pick_demos(const data::InstructionSample& sample,
                                                const std::vector<data::InstructionSample>& pool, int k,
                                                std::uint64_t seed, std::size_t index) {
  if (k <= 0) return {};
  std::vector<const data::InstructionSample*> same;
  for (const auto& d : pool)
    if (d.direction == sample.direction && d.x != sample.x) same.push_back(&d);
  if (static_cast<int>(same.size()) < k)
    throw std::invalid_argument("pick_demos: only " + std::to_string(same.size()) + " demonstrations for " +
                                data::to_string(sample.direction) + ", need " + std::to_string(k));
  std::mt19937_64 rng(seed * 0x100000001b3ULL + index);
  // Partial Fisher-Yates; keeps the draw independent of std::shuffle details.
  for (int i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng() % (same.size() - i));
    std::swap(same[i], same[j]);
  }
  std::vector<data::InstructionSample> out;
  for (int i = 0; i < k; ++i) out.push_back(*same[i]);
  return out;
}

Tokens decode_sample(const model::ModelParams& params, const data::InstructionSample& sample,
                     const data::Vocabulary& vocab, const DecodeConfig& config,
                     const std::vector<data::InstructionSample>& demos) {
  const auto ctx = static_cast<std::size_t>(params.config.max_context);
  const auto prompt = data::format_with_instruction(sample.ins, sample.x, {}, config.tmpl, demos, ctx).prompt;
  const int max_new = config.max_new_for(sample.x.size());
  switch (config.strategy) {
    case Strategy::kGreedy: return greedy_decode(params, prompt, max_new);
    case Strategy::kBeam: return beam_decode(params, prompt, config.beam_size, max_new);
    case Strategy::kContrastive: {
      const int lang = config.contrast_target < 0 ? sample.direction.src : config.contrast_target;
      if (lang >= vocab.num_languages())
        throw std::invalid_argument("contrast_target " + std::to_string(lang) + " is not a language");
      const auto ins = vocab.instruction({sample.direction.src, lang});
      const auto contrast = data::format_with_instruction(ins, sample.x, {}, config.tmpl, demos, ctx).prompt;
      return contrastive_decode(params, prompt, contrast, config.lambda_lang, max_new);
    }
  }
  return {};
}

std::vector<DecodedSample> decode_all(const model::ModelParams& params, const std::vector<data::InstructionSample>& samples,
                                      const data::Vocabulary& vocab, const DecodeConfig& config,
                                      const std::vector<data::InstructionSample>& demo_pool) {
  config.validate();
  std::vector<DecodedSample> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    const auto demos = pick_demos(samples[i], demo_pool, config.k_shot, config.seed, i);
    out[i] = {samples[i], decode_sample(params, samples[i], vocab, config, demos)};
  });
  return out;
}

void write_decodes(const std::filesystem::path& path, const std::vector<DecodedSample>& decoded,
                   const DecodeConfig& config) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const auto hash = config_hash(config);
  const auto strategy = to_string(config.strategy);
  for (const auto& d : decoded)
    out << json{{"direction", data::to_string(d.sample.direction)},
                {"x", d.sample.x},
                {"y_ref", d.sample.y},
                {"y_hyp", d.hypothesis},
                {"strategy", strategy},
                {"config_hash", hash}}
               .dump()
        << "\n";
}

}  // namespace offtarget::decode
