#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "freqtune/augment.hpp"
#include "freqtune/checkpoint.hpp"
#include "freqtune/encoder.hpp"
#include "freqtune/objectives.hpp"
#include "freqtune/vocab.hpp"

namespace freqtune {

/// Contrastive backbone: which augmentations build the two views and the
/// default warm-up length.
enum class Backbone { kConsert, kSimcse };

const char* to_string(Backbone b);
Backbone parse_backbone(std::string_view name);

/// Warm-up length, in epochs, for each backbone.
double default_warmup_fraction(Backbone b);

struct ViewSpec {
  AugmentStrategy strategy = AugmentStrategy::kDropout;
  double rate = 0.0;
};

/// View pair of a backbone: token shuffle + feature cutoff (0.2) for
/// ConSERT-style training, dropout on both views for SimCSE-style training.
std::pair<ViewSpec, ViewSpec> default_views(Backbone b);

struct TrainConfig {
  EncoderConfig encoder;          ///< vocab_size filled from the vocabulary
  Index discriminator_hidden = 0;  ///< 0 = encoder.dim

  Backbone backbone = Backbone::kConsert;
  ViewSpec view_a{AugmentStrategy::kTokenShuffle, 0.0};
  ViewSpec view_b{AugmentStrategy::kFeatureCutoff, 0.2};

  Index batch_size = 32;
  Index epochs = 1;
  double warmup_fraction = 0.5;  ///< of the first epoch, in [0, 1)

  double learning_rate = 1e-4;
  double discriminator_learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  LossWeights weights;
  ContrastiveOptions contrastive;
  double label_rate = kDefaultLabelRate;
  LabelRateMode label_mode = LabelRateMode::kTypes;
  double masking_rate = kDefaultMaskingRate;
  MaskingOptions masking;

  std::uint64_t init_seed = 42;
  std::uint64_t data_seed = 43;
  std::uint64_t dropout_seed = 44;
  std::uint64_t mask_seed = 45;
  std::uint64_t augment_seed = 46;

  Index checkpoint_every = 0;  ///< steps; 0 = final checkpoint only

  void validate() const;
  /// Every value as text (doubles with round-trip precision), for checkpoint
  /// headers and manifests.
  std::map<std::string, std::string> to_key_values() const;
  /// Keys whose value must agree between a checkpoint and the resuming run.
  static std::vector<std::string> resume_keys();
};

/// Encoder plus both discriminators.
struct Model {
  EncoderParams encoder;
  Discriminator<Real> similarity;   ///< token-level frequency discriminator
  Discriminator<Real> information;  ///< sentence-level incomplete-sentence discriminator

  static Model initialize(const TrainConfig& config);
  std::vector<NamedTensor> named_parameters() const;
};

struct AdamMoments {
  RealMatrix first;
  RealMatrix second;
};

struct LossReport {
  Index step = 0;
  Phase phase = Phase::kWarmup;
  std::optional<double> adversarial;
  std::optional<double> filtering;
  double contrastive = 0.0;
  double total = 0.0;
  double max_abs_grad = 0.0;
};

/// Step counter and optimiser moments. All randomness is derived from the
/// configured seeds and the step counter, so this is the whole resumable state.
struct TrainState {
  Index step = 0;
  std::map<std::string, AdamMoments> moments;
};

/// Phase of a given step: warm-up for the first ceil(warmup_fraction *
/// steps_per_epoch) steps.
Index warmup_steps(const TrainConfig& config, Index steps_per_epoch);
Phase phase_at(const TrainConfig& config, Index steps_per_epoch, Index step);

/// Forward pass of one step: builds the two views, encodes, pools and
/// evaluates the phase's loss components. Records onto the active tape.
LossComponents<Real> step_losses(std::span<const std::vector<TokenId>> batch, const Model& model,
                                 const TrainConfig& config, const FrequencyTable& labels, Index step,
                                 Phase phase);

/// One optimisation step: forward, backward and an Adam update applied to the
/// encoder and both discriminators together. Throws NumericError on a
/// non-finite loss without touching the parameters.
LossReport train_step(std::span<const std::vector<TokenId>> batch, Model& model, TrainState& state,
                      const TrainConfig& config, const FrequencyTable& labels, Phase phase);

/// `step  phase  L_AT  L_ISF  R_USRL  total` records, tab-separated; absent
/// components are written as NA and values with 17 significant digits.
void write_metrics_header(std::ostream& out);
void write_metrics_record(std::ostream& out, const LossReport& report);

Checkpoint make_checkpoint(const Model& model, const TrainState& state, const TrainConfig& config,
                           const std::map<std::string, std::string>& extra_header = {});
/// Restores parameters and optimiser state; the architecture and resume keys
/// of `config` must match the checkpoint header.
void restore_checkpoint(const Checkpoint& checkpoint, const TrainConfig& config, Model& model,
                        TrainState& state);
/// Encoder only, with its configuration rebuilt from the header.
EncoderParams load_encoder(const Checkpoint& checkpoint);
EncoderConfig encoder_config_from_header(const std::map<std::string, std::string>& header);

struct TrainOutputs {
  std::ostream* metrics = nullptr;            ///< optional metrics log
  std::filesystem::path checkpoint_dir;       ///< periodic checkpoints, if non-empty
  std::filesystem::path final_checkpoint;     ///< written at the end, if non-empty
  std::map<std::string, std::string> extra_header;
  std::function<void(const LossReport&)> on_step;
};

/// Drives epochs of seeded shuffling and train_step calls.
class Trainer {
 public:
  Trainer(TrainConfig config, FrequencyTable labels);
  /// Continues from a checkpoint written by a run with the same config.
  Trainer(TrainConfig config, FrequencyTable labels, const Checkpoint& checkpoint);

  Index steps_per_epoch(std::size_t corpus_size) const;
  Index total_steps(std::size_t corpus_size) const;

  /// Runs until `stop_at` steps have been taken (default: all epochs). The
  /// last partial batch of every epoch is dropped.
  std::vector<LossReport> run(std::span<const std::vector<TokenId>> corpus, const TrainOutputs& outputs = {},
                              std::optional<Index> stop_at = std::nullopt);

  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const TrainState& state() const { return state_; }
  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  FrequencyTable labels_;
  Model model_;
  TrainState state_;
};

/// Sentence order of an epoch (seeded permutation).
std::vector<std::size_t> epoch_order(std::size_t corpus_size, std::uint64_t data_seed, Index epoch);

}  // namespace freqtune
