#include "freqtune/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>

#include "freqtune/error.hpp"

namespace freqtune {

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double parse_real(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw UsageError("config key '" + key + "': expected a number, got '" + text + "'");
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& text) {
  Int v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw UsageError("config key '" + key + "': expected an integer, got '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw UsageError("config key '" + key + "': expected true or false, got '" + text + "'");
}

const char* to_string(LabelRateMode m) { return m == LabelRateMode::kTypes ? "types" : "token_mass"; }
const char* to_string(MaskingMode m) {
  return m == MaskingMode::kPerLowFrequencyToken ? "per_token" : "whole_sentence";
}
const char* to_string(MaskingRealization m) {
  return m == MaskingRealization::kReplaceWithMask ? "mask" : "delete";
}

template <typename E>
E parse_enum(const std::string& key, const std::string& text, std::initializer_list<E> options) {
  for (E e : options)
    if (text == to_string(e)) return e;
  std::string expected;
  for (E e : options) expected += std::string(expected.empty() ? "" : ", ") + to_string(e);
  throw UsageError("config key '" + key + "': unknown value '" + text + "' (expected " + expected + ")");
}

struct Field {
  ConfigKey key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define REAL_FIELD(name, member, help)                                                \
  Field {                                                                             \
    {name, help}, [](const TrainConfig& c) { return format_real(c.member); },        \
        [](TrainConfig& c, const std::string& v) { c.member = parse_real(name, v); } \
  }
#define INT_FIELD(name, member, help)                                                          \
  Field {                                                                                      \
    {name, help}, [](const TrainConfig& c) { return std::to_string(c.member); },              \
        [](TrainConfig& c, const std::string& v) {                                             \
          c.member = parse_int<std::remove_cvref_t<decltype(c.member)>>(name, v);              \
        }                                                                                      \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {{"backbone", "consert or simcse; sets warm-up and view defaults"},
       [](const TrainConfig& c) { return std::string(to_string(c.backbone)); },
       [](TrainConfig& c, const std::string& v) { c.backbone = parse_backbone(v); }},
      INT_FIELD("batch_size", batch_size, "sentences per step (last partial batch dropped)"),
      INT_FIELD("epochs", epochs, "passes over the corpus"),
      REAL_FIELD("warmup_fraction", warmup_fraction,
                 "contrastive-only warm-up, as a fraction of the first epoch (consert 0.5, simcse 0.1)"),
      REAL_FIELD("learning_rate", learning_rate, "Adam step size for the encoder"),
      REAL_FIELD("discriminator_learning_rate", discriminator_learning_rate,
                 "Adam step size for both discriminators"),
      REAL_FIELD("adam_beta1", adam_beta1, "first-moment decay"),
      REAL_FIELD("adam_beta2", adam_beta2, "second-moment decay"),
      REAL_FIELD("adam_epsilon", adam_epsilon, "Adam denominator offset"),
      REAL_FIELD("alpha", weights.alpha, "weight of the adversarial frequency loss"),
      REAL_FIELD("beta", weights.beta, "weight of the incomplete-sentence loss"),
      REAL_FIELD("tau", weights.tau, "contrastive temperature"),
      {{"denominator_includes_positive", "add the positive pair to the contrastive denominator"},
       [](const TrainConfig& c) { return std::string(c.contrastive.denominator_includes_positive ? "true" : "false"); },
       [](TrainConfig& c, const std::string& v) {
         c.contrastive.denominator_includes_positive = parse_bool("denominator_includes_positive", v);
       }},
      REAL_FIELD("lambda", label_rate, "fraction of the vocabulary labelled low-frequency"),
      {{"label_mode", "types or token_mass"},
       [](const TrainConfig& c) { return std::string(to_string(c.label_mode)); },
       [](TrainConfig& c, const std::string& v) {
         c.label_mode = parse_enum("label_mode", v, {LabelRateMode::kTypes, LabelRateMode::kTokenMass});
       }},
      REAL_FIELD("epsilon", masking_rate, "masking probability of each low-frequency token"),
      {{"masking_mode", "per_token or whole_sentence"},
       [](const TrainConfig& c) { return std::string(to_string(c.masking.mode)); },
       [](TrainConfig& c, const std::string& v) {
         c.masking.mode = parse_enum("masking_mode", v, {MaskingMode::kPerLowFrequencyToken, MaskingMode::kWholeSentence});
       }},
      {{"masking_realization", "mask (replace with [MASK]) or delete"},
       [](const TrainConfig& c) { return std::string(to_string(c.masking.realization)); },
       [](TrainConfig& c, const std::string& v) {
         c.masking.realization = parse_enum("masking_realization", v,
                                            {MaskingRealization::kReplaceWithMask, MaskingRealization::kDelete});
       }},
      {{"view_a", "augmentation of the first view"},
       [](const TrainConfig& c) { return std::string(to_string(c.view_a.strategy)); },
       [](TrainConfig& c, const std::string& v) { c.view_a.strategy = parse_augment_strategy(v); }},
      REAL_FIELD("view_a_rate", view_a.rate, "rate of the first view's augmentation"),
      {{"view_b", "augmentation of the second view"},
       [](const TrainConfig& c) { return std::string(to_string(c.view_b.strategy)); },
       [](TrainConfig& c, const std::string& v) { c.view_b.strategy = parse_augment_strategy(v); }},
      REAL_FIELD("view_b_rate", view_b.rate, "rate of the second view's augmentation"),
      INT_FIELD("vocab_size", encoder.vocab_size, "filled from the vocabulary file"),
      INT_FIELD("dim", encoder.dim, "hidden size D"),
      INT_FIELD("layers", encoder.layers, "transformer layers"),
      INT_FIELD("heads", encoder.heads, "attention heads"),
      INT_FIELD("ffn_dim", encoder.ffn_dim, "feed-forward width"),
      INT_FIELD("max_len", encoder.max_len, "maximum sentence length including [CLS]/[SEP]"),
      REAL_FIELD("dropout", encoder.dropout, "encoder dropout probability"),
      REAL_FIELD("init_std", encoder.init_std, "standard deviation of encoder weight init"),
      REAL_FIELD("layer_norm_eps", encoder.layer_norm_eps, "layer norm variance offset"),
      INT_FIELD("discriminator_hidden", discriminator_hidden, "discriminator hidden width (0 = dim)"),
      INT_FIELD("seed", init_seed, "parameter initialisation seed"),
      INT_FIELD("data_seed", data_seed, "epoch shuffling seed"),
      INT_FIELD("dropout_seed", dropout_seed, "encoder dropout seed"),
      INT_FIELD("mask_seed", mask_seed, "incomplete-sentence masking seed"),
      INT_FIELD("augment_seed", augment_seed, "view augmentation seed"),
      INT_FIELD("checkpoint_every", checkpoint_every, "steps between checkpoints (0 = final only)"),
  };
  return table;
}

#undef REAL_FIELD
#undef INT_FIELD

}  // namespace

const std::vector<ConfigKey>& train_config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return keys;
}

std::map<std::string, std::string> TrainConfig::to_key_values() const {
  std::map<std::string, std::string> out;
  for (const auto& f : fields()) out[std::string(f.key.name)] = f.get(*this);
  return out;
}

ConfigValues parse_config(std::istream& in, const std::string& source) {
  ConfigValues values;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    const std::string body = trim(std::string_view(line).substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw UsageError(source + ":" + std::to_string(number) + ": expected 'key = value'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty()) throw UsageError(source + ":" + std::to_string(number) + ": empty key");
    if (!values.emplace(key, value).second)
      throw UsageError(source + ":" + std::to_string(number) + ": duplicate key '" + key + "'");
  }
  return values;
}

ConfigValues read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  return parse_config(in, path.string());
}

TrainConfig resolve_train_config(const ConfigValues& values, std::span<const std::string> extra_keys,
                                 bool ignore_unknown) {
  std::vector<std::string> unknown;
  for (const auto& [key, value] : values) {
    const bool known = std::any_of(fields().begin(), fields().end(),
                                   [&](const Field& f) { return f.key.name == key; }) ||
                       std::find(extra_keys.begin(), extra_keys.end(), key) != extra_keys.end();
    if (!known) unknown.push_back(key);
  }
  if (!unknown.empty() && !ignore_unknown) {
    std::string msg = "unknown config key";
    msg += unknown.size() > 1 ? "s: " : ": ";
    for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", " : "") + unknown[i];
    throw UsageError(msg);
  }

  TrainConfig config;
  if (auto it = values.find("backbone"); it != values.end()) config.backbone = parse_backbone(it->second);
  config.warmup_fraction = default_warmup_fraction(config.backbone);
  std::tie(config.view_a, config.view_b) = default_views(config.backbone);
  for (const auto& f : fields())
    if (auto it = values.find(std::string(f.key.name)); it != values.end()) f.set(config, it->second);
  if (values.count("seed")) {
    const std::pair<const char*, std::uint64_t*> derived[] = {{"data_seed", &config.data_seed},
                                                              {"dropout_seed", &config.dropout_seed},
                                                              {"mask_seed", &config.mask_seed},
                                                              {"augment_seed", &config.augment_seed}};
    std::uint64_t offset = 1;
    for (const auto& [key, target] : derived) {
      if (!values.count(key)) *target = config.init_seed + offset;
      ++offset;
    }
  }
  return config;
}

void write_config(std::ostream& out, const TrainConfig& config) {
  for (const auto& [k, v] : config.to_key_values()) out << k << " = " << v << '\n';
}

}  // namespace freqtune
