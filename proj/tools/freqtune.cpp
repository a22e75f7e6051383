// freqtune: vocabulary building, training, evaluation and diagnostics.
//
// Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "freqtune/checkpoint.hpp"
#include "freqtune/config.hpp"
#include "freqtune/diagnostics.hpp"
#include "freqtune/error.hpp"
#include "freqtune/eval.hpp"
#include "freqtune/manifest.hpp"
#include "freqtune/trainer.hpp"
#include "freqtune/vocab.hpp"

namespace fs = std::filesystem;
using namespace freqtune;

namespace {

constexpr int kUsage = 2;
constexpr int kNumeric = 3;

std::ifstream open_input(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError(std::string("cannot read ") + what + " '" + path + "'");
  return in;
}

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write '" + path.string() + "'");
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_output(path);
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

/// Encoded non-empty lines; a line too long for the encoder is an input error.
std::vector<std::vector<TokenId>> load_corpus(const std::string& path, const Vocabulary& vocab, Index max_len) {
  auto in = open_input(path, "corpus");
  std::vector<std::vector<TokenId>> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!is_valid_utf8(line)) {
      std::cerr << "warning: " << path << ":" << number << ": invalid UTF-8, line skipped\n";
      continue;
    }
    auto ids = vocab.encode(line);
    if (ids.size() <= 2) continue;
    if (static_cast<Index>(ids.size()) > max_len)
      throw UsageError(path + ":" + std::to_string(number) + ": " + std::to_string(ids.size() - 2) +
                       " tokens, max_len " + std::to_string(max_len) + " allows " + std::to_string(max_len - 2));
    out.push_back(std::move(ids));
  }
  if (out.empty()) throw UsageError("empty corpus");
  return out;
}

struct LoadedCheckpoint {
  Checkpoint checkpoint;
  EncoderParams encoder;
  Vocabulary vocab;
};

LoadedCheckpoint load_model(const std::string& checkpoint_path, const std::string& vocab_path) {
  LoadedCheckpoint out;
  if (!fs::exists(checkpoint_path)) throw UsageError("checkpoint '" + checkpoint_path + "' does not exist");
  out.checkpoint = load_checkpoint(checkpoint_path);
  if (!fs::exists(vocab_path)) throw UsageError("vocabulary '" + vocab_path + "' does not exist");
  out.vocab = load_vocabulary(vocab_path);
  std::map<std::string, std::string> expected{{"vocab_size", std::to_string(out.vocab.size())}};
  if (out.checkpoint.header.count("vocab_sha256")) expected["vocab_sha256"] = sha256_file(vocab_path);
  const auto diffs = header_mismatches(expected, out.checkpoint.header);
  if (!diffs.empty()) {
    std::string msg = "checkpoint does not match the vocabulary:";
    for (const auto& d : diffs) msg += "\n  " + d;
    throw UsageError(msg);
  }
  out.encoder = load_encoder(out.checkpoint);
  return out;
}

FrequencyTable load_label_table(const std::string& labels_path, const Vocabulary& vocab) {
  if (!fs::exists(labels_path)) throw UsageError("label file '" + labels_path + "' does not exist");
  return FrequencyTable::from_labels(vocab, load_labels(labels_path));
}

void record_inputs(RunManifest& m, std::initializer_list<std::string> paths) {
  for (const auto& p : paths)
    if (!p.empty()) m.inputs[p] = sha256_file(p);
}

fs::path manifest_path(const std::string& explicit_path, const std::string& out, const std::string& command) {
  if (!explicit_path.empty()) return explicit_path;
  if (!out.empty()) return out + ".manifest.json";
  return command + ".manifest.json";
}

int run(std::vector<std::string> args);

// build-vocab ------------------------------------------------------------------

struct BuildVocabArgs {
  std::string corpus, out, label_mode = "types";
  double lambda = kDefaultLabelRate;
  std::uint64_t min_count = 1;
  std::size_t max_vocab = 0;
};

int cmd_build_vocab(const BuildVocabArgs& a) {
  const LabelRateMode mode = a.label_mode == "types"        ? LabelRateMode::kTypes
                             : a.label_mode == "token_mass" ? LabelRateMode::kTokenMass
                             : throw UsageError("label mode must be types or token_mass");
  auto in = open_input(a.corpus, "corpus");
  const auto build = build_vocabulary(in, a.min_count, a.max_vocab);
  for (const auto& w : build.scan.warnings) std::cerr << "warning: " << w << '\n';
  const auto labels = assign_frequency_labels(build.counts, a.lambda, mode);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  {
    auto out = open_output(dir / "vocab.tsv");
    write_vocabulary(out, build.vocab);
  }
  {
    auto out = open_output(dir / "counts.tsv");
    write_counts(out, build.counts);
  }
  {
    auto out = open_output(dir / "labels.tsv");
    write_labels(out, build.counts, labels);
  }

  RunManifest m;
  m.command = "build-vocab";
  m.arguments = {"build-vocab", "--corpus", a.corpus, "--lambda", format_real(a.lambda), "--label-mode",
                 a.label_mode, "--min-count", std::to_string(a.min_count), "--max-vocab",
                 std::to_string(a.max_vocab), "--out", a.out};
  m.config = {{"lambda", format_real(a.lambda)}, {"label_mode", a.label_mode},
              {"min_count", std::to_string(a.min_count)}, {"max_vocab", std::to_string(a.max_vocab)}};
  record_inputs(m, {a.corpus});
  m.outputs = {{"vocab", (dir / "vocab.tsv").string()},
               {"counts", (dir / "counts.tsv").string()},
               {"labels", (dir / "labels.tsv").string()}};
  write_manifest(dir / "manifest.json", m);

  Index low = 0;
  for (const auto& [token, label] : labels) low += label;
  std::cout << "vocabulary: " << build.vocab.content_size() << " tokens (" << low << " low-frequency), "
            << build.scan.lines_read << " lines read, " << build.scan.lines_skipped << " skipped\n";
  return 0;
}

// train ------------------------------------------------------------------------

const std::vector<std::string> kPathKeys = {"corpus", "vocab", "counts", "labels", "out", "resume"};

struct TrainArgs {
  std::string config_file;
  std::map<std::string, std::string> flags;  ///< config key -> value, from named flags
  std::vector<std::string> sets;             ///< key=value overrides
};

int cmd_train(const TrainArgs& a) {
  ConfigValues values;
  if (!a.config_file.empty()) values = read_config_file(a.config_file);
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
    values[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  for (const auto& [k, v] : a.flags) values[k] = v;

  TrainConfig config = resolve_train_config(values, kPathKeys);
  auto path = [&](const std::string& key) {
    auto it = values.find(key);
    return it == values.end() ? std::string() : it->second;
  };
  const std::string corpus_path = path("corpus"), vocab_path = path("vocab"), counts_path = path("counts"),
                    labels_path = path("labels"), out = path("out"), resume = path("resume");
  if (corpus_path.empty()) throw UsageError("train: no corpus (set --corpus or 'corpus' in the config)");
  if (vocab_path.empty()) throw UsageError("train: no vocabulary (set --vocab or 'vocab' in the config)");
  if (out.empty()) throw UsageError("train: no output directory (set --out)");
  if (labels_path.empty() && counts_path.empty())
    throw UsageError("train: need a label file ('labels') or a count file ('counts')");
  for (const auto& p : {corpus_path, vocab_path, counts_path, labels_path, resume})
    if (!p.empty() && !fs::exists(p)) throw UsageError("train: input '" + p + "' does not exist");

  const Vocabulary vocab = load_vocabulary(vocab_path);
  if (values.count("vocab_size") && config.encoder.vocab_size != vocab.size())
    throw UsageError("vocab_size " + std::to_string(config.encoder.vocab_size) + " does not match the vocabulary (" +
                     std::to_string(vocab.size()) + ")");
  config.encoder.vocab_size = vocab.size();
  config.validate();

  const TokenCounts counts = counts_path.empty() ? TokenCounts{} : load_counts(counts_path);
  FrequencyTable labels = labels_path.empty()
                              ? FrequencyTable::build(vocab, counts, config.label_rate, config.label_mode)
                              : FrequencyTable::from_labels(vocab, load_labels(labels_path), counts);
  const auto corpus = load_corpus(corpus_path, vocab, config.encoder.max_len);

  const fs::path dir(out);
  fs::create_directories(dir);
  TrainOutputs outputs;
  outputs.extra_header = {{"vocab_sha256", sha256_file(vocab_path)}};
  outputs.final_checkpoint = dir / "checkpoint.ckpt";
  if (config.checkpoint_every > 0) {
    outputs.checkpoint_dir = dir / "checkpoints";
    fs::create_directories(outputs.checkpoint_dir);
  }
  std::ostringstream resolved;
  write_config(resolved, config);
  write_text(dir / "config.txt", resolved.str());
  auto metrics = open_output(dir / "metrics.tsv");
  write_metrics_header(metrics);
  outputs.metrics = &metrics;

  std::optional<Trainer> trainer;
  if (resume.empty())
    trainer.emplace(config, labels);
  else
    trainer.emplace(config, labels, load_checkpoint(resume));

  RunManifest m;
  m.command = "train";
  m.arguments = {"train", "--corpus", corpus_path, "--vocab", vocab_path};
  if (!counts_path.empty()) m.arguments.insert(m.arguments.end(), {"--counts", counts_path});
  if (!labels_path.empty()) m.arguments.insert(m.arguments.end(), {"--labels", labels_path});
  if (!resume.empty()) m.arguments.insert(m.arguments.end(), {"--resume", resume});
  m.arguments.insert(m.arguments.end(), {"--out", out});
  m.config = config.to_key_values();
  for (const auto& [k, v] : m.config) m.arguments.insert(m.arguments.end(), {"--set", k + "=" + v});
  for (const auto* k : {"seed", "data_seed", "dropout_seed", "mask_seed", "augment_seed"}) m.seeds[k] = m.config.at(k);
  record_inputs(m, {corpus_path, vocab_path, counts_path, labels_path, resume});
  m.outputs = {{"checkpoint", outputs.final_checkpoint.string()},
               {"metrics", (dir / "metrics.tsv").string()},
               {"config", (dir / "config.txt").string()}};
  if (!outputs.checkpoint_dir.empty()) m.outputs["checkpoints"] = outputs.checkpoint_dir.string();

  const auto trace = trainer->run(corpus, outputs);
  metrics.flush();
  write_manifest(dir / "manifest.json", m);
  std::cout << "trained " << trace.size() << " steps (" << trainer->steps_per_epoch(corpus.size())
            << " per epoch, warm-up " << warmup_steps(config, trainer->steps_per_epoch(corpus.size())) << ")";
  if (!trace.empty()) std::cout << ", final total loss " << format_real(trace.back().total);
  std::cout << "\ncheckpoint: " << outputs.final_checkpoint.string() << '\n';
  return 0;
}

// eval -------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, vocab, pairs, out, manifest;
};

int cmd_eval(const EvalArgs& a) {
  const auto model = load_model(a.checkpoint, a.vocab);
  auto in = open_input(a.pairs, "pairs file");
  const auto pairs = read_sts_pairs(in, a.pairs);
  const auto report = evaluate_sts(pairs, model.encoder, model.vocab);
  std::ostringstream text;
  write_sts_report(text, report);
  std::cout << text.str();
  if (!a.out.empty()) write_text(a.out, text.str());

  RunManifest m;
  m.command = "eval";
  const auto manifest = manifest_path(a.manifest, a.out, "eval");
  m.arguments = {"eval", "--checkpoint", a.checkpoint, "--vocab", a.vocab, "--pairs", a.pairs};
  if (!a.out.empty()) m.arguments.insert(m.arguments.end(), {"--out", a.out});
  m.arguments.insert(m.arguments.end(), {"--manifest", manifest.string()});
  m.config = model.checkpoint.header;
  record_inputs(m, {a.checkpoint, a.vocab, a.pairs});
  if (!a.out.empty()) m.outputs["report"] = a.out;
  write_manifest(manifest, m);
  return 0;
}

// diagnose / export ------------------------------------------------------------

struct DiagnoseArgs {
  std::string checkpoint, vocab, corpus, labels, out, manifest;
  DiagnosticsOptions options;
  bool projection = false;
};

std::vector<std::string> diagnose_arguments(const std::string& command, const DiagnoseArgs& a,
                                            const fs::path& manifest) {
  std::vector<std::string> args = {command,     "--checkpoint", a.checkpoint, "--vocab",
                                   a.vocab,     "--corpus",     a.corpus,     "--labels",
                                   a.labels,    "--sample",     std::to_string(a.options.sample_sentences),
                                   "--seed",    std::to_string(a.options.seed)};
  if (command == "diagnose") {
    args.insert(args.end(), {"--max-per-type", std::to_string(a.options.max_per_type), "--max-pairs",
                             std::to_string(a.options.max_pairs), "--probe-epochs",
                             std::to_string(a.options.probe.epochs), "--probe-learning-rate",
                             format_real(a.options.probe.learning_rate), "--probe-repeats",
                             std::to_string(a.options.probe_repeats)});
  } else if (a.projection) {
    args.push_back("--projection");
  }
  if (!a.out.empty()) args.insert(args.end(), {"--out", a.out});
  args.insert(args.end(), {"--manifest", manifest.string()});
  return args;
}

int cmd_diagnose(const DiagnoseArgs& a) {
  const auto model = load_model(a.checkpoint, a.vocab);
  const auto labels = load_label_table(a.labels, model.vocab);
  const auto corpus = load_corpus(a.corpus, model.vocab, model.encoder.config.max_len);
  DiagnosticsOptions options = a.options;
  options.probe.seed = derive_seed({options.seed, 0x70726f6265});
  const auto report = anisotropy_report(model.encoder, corpus, labels, options);
  std::ostringstream text;
  write_diagnostics(text, report);
  std::cout << text.str();
  if (!a.out.empty()) write_text(a.out, text.str());

  const auto manifest = manifest_path(a.manifest, a.out, "diagnose");
  RunManifest m;
  m.command = "diagnose";
  m.arguments = diagnose_arguments("diagnose", a, manifest);
  m.config = model.checkpoint.header;
  m.seeds = {{"seed", std::to_string(a.options.seed)}};
  record_inputs(m, {a.checkpoint, a.vocab, a.corpus, a.labels});
  if (!a.out.empty()) m.outputs["report"] = a.out;
  write_manifest(manifest, m);
  return 0;
}

int cmd_export(const DiagnoseArgs& a) {
  const auto model = load_model(a.checkpoint, a.vocab);
  const auto labels = load_label_table(a.labels, model.vocab);
  const auto corpus = load_corpus(a.corpus, model.vocab, model.encoder.config.max_len);
  const auto sample = collect_token_embeddings(model.encoder, corpus, labels, a.options.sample_sentences, 0,
                                               a.options.seed);

  // One row per token type (mean over its sampled occurrences), then one per sentence.
  std::map<TokenId, std::pair<RealMatrix, Index>> per_type;
  for (std::size_t i = 0; i < sample.ids.size(); ++i) {
    auto& [acc, n] = per_type[sample.ids[i]];
    if (n == 0) acc = RealMatrix::Zero(1, sample.embeddings.cols());
    acc += sample.embeddings.row(static_cast<Index>(i));
    ++n;
  }
  auto picked = sample_without_replacement(static_cast<Index>(corpus.size()), a.options.sample_sentences,
                                           a.options.seed);
  std::sort(picked.begin(), picked.end());
  RealMatrix points(static_cast<Index>(per_type.size() + picked.size()), model.encoder.config.dim);
  std::vector<ExportRow> rows;
  for (const auto& [id, entry] : per_type) {
    points.row(static_cast<Index>(rows.size())) = entry.first / static_cast<double>(entry.second);
    rows.push_back({"token:" + model.vocab.token(id), std::to_string(labels.label(id))});
  }
  for (Index s : picked) {
    const std::vector<std::vector<TokenId>> one{corpus[static_cast<std::size_t>(s)]};
    points.row(static_cast<Index>(rows.size())) = sentence_embedding(encode(one, model.encoder, {})).value();
    rows.push_back({"sentence:" + std::to_string(s), "NA"});
  }
  {
    auto out = open_output(a.out);
    export_embeddings(out, points, rows, a.projection, a.options.seed);
  }
  std::cout << "exported " << rows.size() << " embeddings to " << a.out << '\n';

  const auto manifest = manifest_path(a.manifest, a.out, "export");
  RunManifest m;
  m.command = "export";
  m.arguments = diagnose_arguments("export", a, manifest);
  m.config = model.checkpoint.header;
  m.seeds = {{"seed", std::to_string(a.options.seed)}};
  record_inputs(m, {a.checkpoint, a.vocab, a.corpus, a.labels});
  m.outputs["embeddings"] = a.out;
  write_manifest(manifest, m);
  return 0;
}

// replay -----------------------------------------------------------------------

int cmd_replay(const std::string& manifest_file) {
  const auto m = read_manifest(manifest_file);
  if (m.tool_version != kToolVersion)
    std::cerr << "warning: manifest written by version " << m.tool_version << ", running " << kToolVersion << '\n';
  const auto changed = changed_inputs(m);
  if (!changed.empty()) {
    std::string msg = "inputs changed since the manifest was written:";
    for (const auto& c : changed) msg += "\n  " + c;
    throw UsageError(msg);
  }
  if (m.arguments.empty() || m.arguments.front() == "replay") throw UsageError("manifest has no replayable command");
  return run(m.arguments);
}

int cmd_defaults() {
  TrainConfig defaults;
  const auto values = defaults.to_key_values();
  for (const auto& k : train_config_keys())
    std::cout << k.name << " = " << values.at(std::string(k.name)) << "    # " << k.help << '\n';
  return 0;
}

int run(std::vector<std::string> args) {
  CLI::App app{"Frequency-adversarial sentence encoder training", "freqtune"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  BuildVocabArgs bv;
  auto* build = app.add_subcommand("build-vocab", "Count tokens, build the vocabulary and frequency labels");
  build->add_option("--corpus", bv.corpus, "Corpus, one sentence per line")->required();
  build->add_option("--lambda", bv.lambda, "Fraction of the vocabulary labelled low-frequency")->capture_default_str();
  build->add_option("--label-mode", bv.label_mode, "types or token_mass")->capture_default_str();
  build->add_option("--min-count", bv.min_count, "Drop tokens seen fewer times")->capture_default_str();
  build->add_option("--max-vocab", bv.max_vocab, "Keep at most this many tokens (0 = all)")->capture_default_str();
  build->add_option("--out", bv.out, "Output directory")->required();

  TrainArgs tr;
  std::map<std::string, std::string> train_flag_values;
  auto* train = app.add_subcommand("train", "Train the encoder and discriminators");
  train->add_option("--config", tr.config_file, "Flat key = value config file");
  const std::pair<const char*, const char*> train_flags[] = {
      {"--corpus", "corpus"},     {"--vocab", "vocab"},
      {"--counts", "counts"},     {"--labels", "labels"},
      {"--out", "out"},           {"--resume", "resume"},
      {"--lambda", "lambda"},     {"--epsilon", "epsilon"},
      {"--alpha", "alpha"},       {"--beta", "beta"},
      {"--tau", "tau"},           {"--batch-size", "batch_size"},
      {"--warmup-fraction", "warmup_fraction"},
      {"--backbone", "backbone"}, {"--seed", "seed"},
      {"--epochs", "epochs"},     {"--learning-rate", "learning_rate"}};
  for (const auto& [flag, key] : train_flags)
    train->add_option(flag, train_flag_values[key], std::string("Overrides config key '") + key + "'");
  train->add_option("--set", tr.sets, "Any config key as key=value (repeatable)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Spearman correlation on a sentence-pair file");
  eval->add_option("--checkpoint", ev.checkpoint)->required();
  eval->add_option("--vocab", ev.vocab)->required();
  eval->add_option("--pairs", ev.pairs, "sentence_a<TAB>sentence_b<TAB>score")->required();
  eval->add_option("--out", ev.out, "Also write the report here");
  eval->add_option("--manifest", ev.manifest, "Manifest path");

  DiagnoseArgs dg;
  auto* diagnose = app.add_subcommand("diagnose", "Isotropy statistics and frequency probe");
  DiagnoseArgs ex;
  auto* exp = app.add_subcommand("export", "Write token and sentence embeddings as TSV");
  for (auto [cmd, target] : {std::pair{diagnose, &dg}, std::pair{exp, &ex}}) {
    cmd->add_option("--checkpoint", target->checkpoint)->required();
    cmd->add_option("--vocab", target->vocab)->required();
    cmd->add_option("--corpus", target->corpus)->required();
    cmd->add_option("--labels", target->labels)->required();
    cmd->add_option("--sample", target->options.sample_sentences, "Sentences to sample")->capture_default_str();
    cmd->add_option("--seed", target->options.seed)->capture_default_str();
    cmd->add_option("--manifest", target->manifest, "Manifest path");
  }
  diagnose->add_option("--out", dg.out, "Also write the report here");
  diagnose->add_option("--max-per-type", dg.options.max_per_type)->capture_default_str();
  diagnose->add_option("--max-pairs", dg.options.max_pairs)->capture_default_str();
  diagnose->add_option("--probe-epochs", dg.options.probe.epochs)->capture_default_str();
  diagnose->add_option("--probe-learning-rate", dg.options.probe.learning_rate)->capture_default_str();
  diagnose->add_option("--probe-repeats", dg.options.probe_repeats, "Type splits averaged")->capture_default_str();
  exp->add_option("--out", ex.out, "Output TSV")->required();
  exp->add_flag("--projection", ex.projection, "Append a 2-D principal projection");

  std::string replay_manifest;
  auto* replay = app.add_subcommand("replay", "Re-run a command from its manifest");
  replay->add_option("manifest", replay_manifest)->required();

  auto* defaults = app.add_subcommand("defaults", "Print every training config key with its default");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsage;
  }

  if (*build) return cmd_build_vocab(bv);
  if (*train) {
    for (const auto& [flag, key] : train_flags)
      if (train->count(flag) > 0) tr.flags[key] = train_flag_values[key];
    return cmd_train(tr);
  }
  if (*eval) return cmd_eval(ev);
  if (*diagnose) return cmd_diagnose(dg);
  if (*exp) return cmd_export(ex);
  if (*replay) return cmd_replay(replay_manifest);
  if (*defaults) return cmd_defaults();
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return run(std::move(args));
  } catch (const NumericError& e) {
    std::cerr << "freqtune: numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "freqtune: error: " << e.what() << '\n';
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "freqtune: error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "freqtune: internal error: " << e.what() << '\n';
    return 1;
  }
}
