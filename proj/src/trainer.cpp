#include "freqtune/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <sstream>

#include "freqtune/config.hpp"
#include "freqtune/error.hpp"
#include "freqtune/random.hpp"

namespace freqtune {

const char* to_string(Backbone b) { return b == Backbone::kConsert ? "consert" : "simcse"; }

Backbone parse_backbone(std::string_view name) {
  if (name == "consert") return Backbone::kConsert;
  if (name == "simcse") return Backbone::kSimcse;
  throw UsageError("unknown backbone '" + std::string(name) + "' (expected consert or simcse)");
}

double default_warmup_fraction(Backbone b) { return b == Backbone::kConsert ? 0.5 : 0.1; }

std::pair<ViewSpec, ViewSpec> default_views(Backbone b) {
  if (b == Backbone::kConsert)
    return {{AugmentStrategy::kTokenShuffle, 0.0}, {AugmentStrategy::kFeatureCutoff, 0.2}};
  return {{AugmentStrategy::kDropout, 0.0}, {AugmentStrategy::kDropout, 0.0}};
}

void TrainConfig::validate() const {
  encoder.validate();
  weights.validate();
  if (batch_size < 2) throw UsageError("batch_size must be >= 2");
  if (epochs < 1) throw UsageError("epochs must be >= 1");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0))
    throw UsageError("warmup_fraction must be in [0, 1)");
  if (!(learning_rate > 0.0) || !(discriminator_learning_rate > 0.0))
    throw UsageError("learning rates must be > 0");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) ||
      !(adam_epsilon > 0.0))
    throw UsageError("invalid Adam coefficients");
  if (!(label_rate > 0.0 && label_rate < 1.0)) throw UsageError("lambda must be in (0, 1)");
  if (!(masking_rate >= 0.0 && masking_rate < 1.0)) throw UsageError("epsilon must be in [0, 1)");
  AugmentSpec{view_a.strategy, view_a.rate, 0}.validate();
  AugmentSpec{view_b.strategy, view_b.rate, 0}.validate();
  if (discriminator_hidden < 0) throw UsageError("discriminator_hidden must be >= 0");
  if (checkpoint_every < 0) throw UsageError("checkpoint_every must be >= 0");
}

std::vector<std::string> TrainConfig::resume_keys() {
  std::vector<std::string> keys;
  for (const auto& k : train_config_keys())
    if (k.name != "epochs" && k.name != "checkpoint_every") keys.emplace_back(k.name);
  return keys;
}

// Model ------------------------------------------------------------------------

Model Model::initialize(const TrainConfig& config) {
  config.validate();
  const Index hidden = config.discriminator_hidden > 0 ? config.discriminator_hidden : config.encoder.dim;
  return Model{
      EncoderParams::initialize(config.encoder, config.init_seed),
      Discriminator<Real>::initialize(config.encoder.dim, hidden, derive_seed({config.init_seed, 1})),
      Discriminator<Real>::initialize(config.encoder.dim, hidden, derive_seed({config.init_seed, 2})),
  };
}

std::vector<NamedTensor> Model::named_parameters() const {
  auto out = encoder.named_parameters();
  for (auto& [name, t] : similarity.named_parameters("disc_similarity")) out.push_back({name, t});
  for (auto& [name, t] : information.named_parameters("disc_information")) out.push_back({name, t});
  return out;
}

// Schedule ---------------------------------------------------------------------

Index warmup_steps(const TrainConfig& config, Index steps_per_epoch) {
  const double exact = config.warmup_fraction * static_cast<double>(steps_per_epoch);
  return static_cast<Index>(std::ceil(exact * (1.0 - 1e-12)));
}

Phase phase_at(const TrainConfig& config, Index steps_per_epoch, Index step) {
  return step < warmup_steps(config, steps_per_epoch) ? Phase::kWarmup : Phase::kMain;
}

std::vector<std::size_t> epoch_order(std::size_t corpus_size, std::uint64_t data_seed, Index epoch) {
  std::vector<std::size_t> order(corpus_size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed({data_seed, static_cast<std::uint64_t>(epoch)}));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

// Forward ----------------------------------------------------------------------

namespace {

enum Pass : std::uint64_t { kViewA = 0, kViewB = 1, kOriginal = 2, kIncomplete = 3 };

struct Views {
  std::vector<std::vector<TokenId>> ids;
  std::vector<std::vector<Index>> cutoff;
};

Views build_views(std::span<const std::vector<TokenId>> batch, const ViewSpec& spec,
                  const TrainConfig& config, Index step, std::uint64_t which) {
  Views v;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const AugmentSpec aug{spec.strategy, spec.rate,
                          derive_seed({config.augment_seed, static_cast<std::uint64_t>(step), i, which})};
    auto view = augment(batch[i], aug, config.encoder.dim);
    v.ids.push_back(std::move(view.ids));
    v.cutoff.push_back(std::move(view.feature_cutoff));
  }
  return v;
}

EncodeOptions train_pass(const TrainConfig& config, Index step, Pass pass,
                         std::span<const std::vector<Index>> cutoff = {}) {
  EncodeOptions o;
  o.train = true;
  o.dropout_seed = derive_seed({config.dropout_seed, static_cast<std::uint64_t>(step), pass});
  o.feature_cutoff = cutoff;
  return o;
}

}  // namespace

LossComponents<Real> step_losses(std::span<const std::vector<TokenId>> batch, const Model& model,
                                 const TrainConfig& config, const FrequencyTable& labels, Index step,
                                 Phase phase) {
  const Views a = build_views(batch, config.view_a, config, step, kViewA);
  const Views b = build_views(batch, config.view_b, config, step, kViewB);
  const RealTensor ha = sentence_embedding(encode(a.ids, model.encoder, train_pass(config, step, kViewA, a.cutoff)));
  const RealTensor hb = sentence_embedding(encode(b.ids, model.encoder, train_pass(config, step, kViewB, b.cutoff)));

  LossComponents<Real> parts;
  parts.contrastive = contrastive_loss(ha, hb, config.weights.tau, config.contrastive);
  if (phase == Phase::kWarmup) return parts;

  const EncodedBatch original = encode(batch, model.encoder, train_pass(config, step, kOriginal));
  std::vector<std::vector<Index>> positions(batch.size()), token_labels(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ids = original.ids[i];
    for (Index p : original.content_positions(static_cast<Index>(i))) {
      const TokenId id = ids[static_cast<std::size_t>(p)];
      if (is_special(id)) continue;  // UNK/MASK carry no frequency label
      positions[i].push_back(p);
      token_labels[i].push_back(labels.label(id));
    }
  }
  parts.adversarial = adversarial_loss<Real>(original.hidden, positions, token_labels, model.similarity);

  std::vector<std::vector<TokenId>> incomplete_ids;
  std::unique_ptr<bool[]> usable(new bool[batch.size()]);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto inc = make_incomplete(batch[i], labels, config.masking_rate,
                               derive_seed({config.mask_seed, static_cast<std::uint64_t>(step), i}),
                               config.masking);
    usable[i] = inc.usable();
    incomplete_ids.push_back(std::move(inc.masked));
  }
  const RealTensor h = sentence_embedding(original);
  const RealTensor h_hat =
      sentence_embedding(encode(incomplete_ids, model.encoder, train_pass(config, step, kIncomplete)));
  parts.filtering = isf_loss<Real>(h, h_hat, std::span<const bool>(usable.get(), batch.size()),
                                   model.information);
  return parts;
}

// Update -----------------------------------------------------------------------

namespace {

bool is_discriminator(const std::string& name) { return name.rfind("disc_", 0) == 0; }

double max_abs_grad(const std::vector<NamedTensor>& params) {
  double m = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad()) {
      for (Index i = 0; i < p.tensor.grad().size(); ++i) {
        const double g = std::abs(p.tensor.grad().data()[i]);
        if (std::isnan(g) || g > m) m = g;
        if (std::isnan(m)) return m;
      }
    }
  return m;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

LossReport train_step(std::span<const std::vector<TokenId>> batch, Model& model, TrainState& state,
                      const TrainConfig& config, const FrequencyTable& labels, Phase phase) {
  if (static_cast<Index>(batch.size()) != config.batch_size)
    throw UsageError("train_step: batch of " + std::to_string(batch.size()) + ", configured " +
                     std::to_string(config.batch_size));
  auto params = model.named_parameters();
  for (auto& p : params) p.tensor.zero_grad();

  LossReport report;
  report.step = state.step;
  report.phase = phase;

  Tape<Real> tape;
  Tape<Real>::Scope scope(tape);
  const LossComponents<Real> parts = step_losses(batch, model, config, labels, state.step, phase);
  const RealTensor total = total_loss(parts, config.weights, phase);
  report.contrastive = parts.contrastive.item();
  if (parts.adversarial) report.adversarial = parts.adversarial->item();
  if (parts.filtering) report.filtering = parts.filtering->item();
  report.total = total.item();

  tape.backward(total);
  report.max_abs_grad = max_abs_grad(params);

  const std::pair<const char*, std::optional<double>> components[] = {
      {"L_AT", report.adversarial}, {"L_ISF", report.filtering},
      {"R_USRL", report.contrastive}, {"total", report.total}};
  for (const auto& [name, value] : components)
    if (value && !std::isfinite(*value))
      throw NumericError("non-finite loss at step " + std::to_string(state.step) + ": component " +
                         name + " = " + format_double(*value) + ", max |grad| = " +
                         format_double(report.max_abs_grad));

  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(config.adam_beta1, t);
  const double c2 = 1.0 - std::pow(config.adam_beta2, t);
  for (auto& p : params) {
    auto& mom = state.moments[p.name];
    RealMatrix& value = p.tensor.mutable_value();
    if (mom.first.size() == 0) {
      mom.first = RealMatrix::Zero(value.rows(), value.cols());
      mom.second = RealMatrix::Zero(value.rows(), value.cols());
    }
    const double lr = is_discriminator(p.name) ? config.discriminator_learning_rate : config.learning_rate;
    if (p.tensor.has_grad()) {
      const RealMatrix& g = p.tensor.grad();
      mom.first = config.adam_beta1 * mom.first + (1.0 - config.adam_beta1) * g;
      mom.second = config.adam_beta2 * mom.second + (1.0 - config.adam_beta2) * g.cwiseAbs2();
    } else {
      mom.first *= config.adam_beta1;
      mom.second *= config.adam_beta2;
    }
    value.array() -= lr * (mom.first.array() / c1) / ((mom.second.array() / c2).sqrt() + config.adam_epsilon);
  }
  ++state.step;
  return report;
}

// Metrics ----------------------------------------------------------------------

void write_metrics_header(std::ostream& out) { out << "step\tphase\tL_AT\tL_ISF\tR_USRL\ttotal\n"; }

void write_metrics_record(std::ostream& out, const LossReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("NA"); };
  out << r.step << '\t' << to_string(r.phase) << '\t' << opt(r.adversarial) << '\t' << opt(r.filtering)
      << '\t' << format_double(r.contrastive) << '\t' << format_double(r.total) << '\n';
}

// Checkpoints ------------------------------------------------------------------

Checkpoint make_checkpoint(const Model& model, const TrainState& state, const TrainConfig& config,
                           const std::map<std::string, std::string>& extra_header) {
  Checkpoint ck;
  ck.header = config.to_key_values();
  for (const auto& [k, v] : extra_header) ck.header[k] = v;
  ck.header["format"] = "freqtune-checkpoint-1";
  ck.header["step"] = std::to_string(state.step);
  const auto params = model.named_parameters();
  for (const auto& p : params) ck.blocks.push_back(make_block(p.name, p.tensor));
  for (const auto& p : params) {
    auto it = state.moments.find(p.name);
    if (it == state.moments.end()) continue;
    ck.blocks.push_back({"adam.first/" + p.name, p.tensor.shape(), it->second.first});
    ck.blocks.push_back({"adam.second/" + p.name, p.tensor.shape(), it->second.second});
  }
  return ck;
}

void restore_checkpoint(const Checkpoint& checkpoint, const TrainConfig& config, Model& model,
                        TrainState& state) {
  const auto expected_all = config.to_key_values();
  std::map<std::string, std::string> expected;
  for (const auto& k : TrainConfig::resume_keys()) expected[k] = expected_all.at(k);
  const auto diffs = header_mismatches(expected, checkpoint.header);
  if (!diffs.empty()) {
    std::string msg = "checkpoint does not match the configuration:";
    for (const auto& d : diffs) msg += "\n  " + d;
    throw UsageError(msg);
  }
  // Parse everything first so that a bad checkpoint leaves the model untouched.
  const auto params = model.named_parameters();
  std::vector<const CheckpointBlock*> values;
  for (const auto& p : params) {
    const auto& b = checkpoint.block(p.name);
    if (b.shape != p.tensor.shape())
      throw FormatError("checkpoint block '" + p.name + "' has shape " + shape_string(b.shape));
    values.push_back(&b);
  }
  TrainState restored;
  restored.step = std::stoll(checkpoint.header_value("step"));
  for (const auto& p : params) {
    const auto* m = checkpoint.find("adam.first/" + p.name);
    const auto* v = checkpoint.find("adam.second/" + p.name);
    if (!m || !v) continue;
    if (m->shape != p.tensor.shape() || v->shape != p.tensor.shape())
      throw FormatError("checkpoint moments for '" + p.name + "' have the wrong shape");
    restored.moments[p.name] = AdamMoments{m->values, v->values};
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    RealTensor t = params[i].tensor;
    t.mutable_value() = values[i]->values;
  }
  state = std::move(restored);
}

EncoderConfig encoder_config_from_header(const std::map<std::string, std::string>& header) {
  return resolve_train_config(header, {}, /*ignore_unknown=*/true).encoder;
}

EncoderParams load_encoder(const Checkpoint& checkpoint) {
  const EncoderConfig config = encoder_config_from_header(checkpoint.header);
  EncoderParams params = EncoderParams::initialize(config, 0);
  for (auto& p : params.named_parameters()) {
    RealTensor t = p.tensor;
    assign_block(t, checkpoint.block(p.name));
  }
  return params;
}

// Trainer ----------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, FrequencyTable labels)
    : config_(std::move(config)), labels_(std::move(labels)), model_(Model::initialize(config_)) {
  if (labels_.size() != config_.encoder.vocab_size)
    throw UsageError("frequency table covers " + std::to_string(labels_.size()) +
                     " ids, vocabulary has " + std::to_string(config_.encoder.vocab_size));
}

Trainer::Trainer(TrainConfig config, FrequencyTable labels, const Checkpoint& checkpoint)
    : Trainer(std::move(config), std::move(labels)) {
  restore_checkpoint(checkpoint, config_, model_, state_);
}

Index Trainer::steps_per_epoch(std::size_t corpus_size) const {
  return static_cast<Index>(corpus_size) / config_.batch_size;
}

Index Trainer::total_steps(std::size_t corpus_size) const {
  return steps_per_epoch(corpus_size) * config_.epochs;
}

std::vector<LossReport> Trainer::run(std::span<const std::vector<TokenId>> corpus, const TrainOutputs& outputs,
                                     std::optional<Index> stop_at) {
  const Index spe = steps_per_epoch(corpus.size());
  if (spe == 0)
    throw UsageError("corpus of " + std::to_string(corpus.size()) + " sentences is smaller than one batch");
  const Index end = std::min(stop_at.value_or(total_steps(corpus.size())), total_steps(corpus.size()));

  std::vector<LossReport> trace;
  Index cached_epoch = -1;
  std::vector<std::size_t> order;
  std::vector<std::vector<TokenId>> batch(static_cast<std::size_t>(config_.batch_size));
  while (state_.step < end) {
    const Index epoch = state_.step / spe;
    const Index pos = state_.step % spe;
    if (epoch != cached_epoch) {
      order = epoch_order(corpus.size(), config_.data_seed, epoch);
      cached_epoch = epoch;
    }
    for (Index j = 0; j < config_.batch_size; ++j)
      batch[static_cast<std::size_t>(j)] = corpus[order[static_cast<std::size_t>(pos * config_.batch_size + j)]];

    LossReport report = train_step(batch, model_, state_, config_, labels_, phase_at(config_, spe, state_.step));
    if (outputs.metrics) write_metrics_record(*outputs.metrics, report);
    if (outputs.on_step) outputs.on_step(report);
    trace.push_back(report);

    if (config_.checkpoint_every > 0 && !outputs.checkpoint_dir.empty() &&
        state_.step % config_.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step-%06lld.ckpt", static_cast<long long>(state_.step));
      save_checkpoint(outputs.checkpoint_dir / name, make_checkpoint(model_, state_, config_, outputs.extra_header));
    }
  }
  if (!outputs.final_checkpoint.empty())
    save_checkpoint(outputs.final_checkpoint, make_checkpoint(model_, state_, config_, outputs.extra_header));
  return trace;
}

}  // namespace freqtune
