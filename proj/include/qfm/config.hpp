#pragma once

// Run configuration: a key-value text file with [sections], `include = path` directives (resolved
// against the including file) and `#` comments. Every key maps onto one typed field; unknown keys
// and malformed values raise ConfigError naming the key path and file:line.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "qfm/downstream.hpp"
#include "qfm/model.hpp"
#include "qfm/preprocess.hpp"
#include "qfm/probe.hpp"
#include "qfm/sqi.hpp"
#include "qfm/train.hpp"

namespace qfm::config {

enum class Precision { f32, f64 };

struct AblateConfig {
  int steps = 200;         // pretraining steps per run
  int pairs = 500;         // pairs sampled from the mined pool
  int seeds = 10;          // repetitions per axis value
  int subjects = 12;       // pretraining corpus subjects
  double minutes = 10.0;   // per subject
  int probe_subjects = 16;  // held-out subjects for the probe set
  int probe_train_subjects = 11;
  double noise_level = 1.0;
  int batch_size = 16;
  double lr = 1e-3;
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  Precision precision = Precision::f32;
  std::string model_preset = "base";
  model::ModelConfig model = model::ModelConfig::base();
  train::PretrainConfig pretrain;
  downstream::FinetuneConfig finetune;
  FilterConfig filter;
  SqiConfig sqi;
  double pair_max_gap_s = kPairMaxGapSeconds;
  probe::ProbeConfig probe;
  AblateConfig ablate;

  /// Cross-field checks of every section (ConfigError).
  void validate() const;
};

/// One `key = value` after include expansion; `key` is the full dotted path.
struct Entry {
  std::string key;
  std::string value;
  std::string file;
  int line = 0;

  std::string where() const { return file + ":" + std::to_string(line); }
};

/// Parses text into entries; includes are resolved relative to `origin`'s directory.
std::vector<Entry> parse_text(const std::string& text, const std::string& origin);
std::vector<Entry> parse_file(const std::string& path);

/// Applies entries in order. model.preset resets every model field, so model keys written after
/// it (later in the file, in a later include, or as overrides) take precedence.
void apply(RunConfig& cfg, const std::vector<Entry>& entries);

/// `key=value` command-line overrides, reported as "<override>:N".
std::vector<Entry> parse_overrides(const std::vector<std::string>& assignments);

/// Defaults, then `path` (optional, empty for none), then overrides; validated.
RunConfig load(const std::string& path, const std::vector<std::string>& overrides = {});

/// Every key with its current value, grouped by section; parses back to the same config.
std::string to_text(const RunConfig& cfg);

/// All recognized dotted keys in output order.
std::vector<std::string> known_keys();

}  // namespace qfm::config
