// qfm: command-line front end for the synthetic-data pipeline, pretraining, fine-tuning and the
// verification suites.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "qfm/binary_io.hpp"
#include "qfm/config.hpp"
#include "qfm/downstream.hpp"
#include "qfm/errors.hpp"
#include "qfm/smoke.hpp"
#include "qfm/verify.hpp"

namespace {

using namespace qfm;
namespace fs = std::filesystem;

bool g_quiet = false;

void log_info(const std::string& msg) {
  if (!g_quiet) std::cerr << "[qfm] " << msg << "\n";
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("no such file: " + path);
}

// Sources recorded in manifests and pair lists are used as given, or relative to the referring file.
std::string resolve_source(const std::string& source, const std::string& referrer) {
  if (source.empty()) throw ContractError("'" + referrer + "' does not record its source file");
  if (fs::exists(source) || fs::path(source).is_absolute()) return source;
  const auto alt = (fs::path(referrer).parent_path() / source).string();
  return fs::exists(alt) ? alt : source;
}

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--values: '" + item + "' is not an integer");
    }
  }
  if (out.empty()) throw ConfigError("--values: empty list");
  return out;
}

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  int threads = 0;
  std::int64_t seed = -1;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", path, "Run configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "Override a config key, e.g. --set pretrain.lr=3e-4");
    cmd->add_option("--threads", threads, "Worker threads (overrides the config)");
    cmd->add_option("--seed", seed, "Global seed (overrides the config)");
  }

  config::RunConfig load() const {
    auto extra = overrides;
    if (threads > 0) extra.push_back("threads=" + std::to_string(threads));
    if (seed >= 0) extra.push_back("seed=" + std::to_string(seed));
    return config::load(path, extra);
  }
};

// ---- gen-synth --------------------------------------------------------------------------------------

struct GenSynthArgs {
  double bpm = 75.0;
  std::string noise = "none";
  double level = 0.0;
  double duration = 600.0;
  std::uint64_t seed = 0;
  std::string out;
  int subjects = 1;
  double rate = 125.0;
  double irregularity = 0.0;
  std::string task;
  double minutes = 5.0;
  int threads = 1;
};

void cmd_gen_synth(const GenSynthArgs& a) {
  if (!a.task.empty()) {
    downstream::SyntheticTaskSpec spec;
    spec.task = downstream::parse_task(a.task);
    spec.subjects = a.subjects;
    spec.minutes = a.minutes;
    spec.seed = a.seed;
    spec.threads = a.threads;
    const auto data = downstream::generate_task_dataset(spec);
    downstream::write_dataset(data, a.out);
    log_info("wrote " + std::to_string(data.segments.size()) + " labeled segments (" + a.task + ") to " + a.out);
    return;
  }
  std::vector<WaveformRecord> records;
  for (int i = 0; i < a.subjects; ++i) {
    SyntheticSpec spec;
    spec.heart_rate_bpm = a.bpm;
    spec.noise_kind = parse_noise_kind(a.noise);
    spec.noise_level = a.level;
    spec.duration_s = a.duration;
    spec.seed = a.seed + static_cast<std::uint64_t>(i);
    spec.sampling_rate_hz = a.rate;
    spec.rr_irregularity = a.irregularity;
    char id[32];
    std::snprintf(id, sizeof id, a.subjects == 1 ? "synth" : "synth%03d", i);
    spec.subject_id = id;
    auto pair = generate_synthetic(spec);
    records.push_back(std::move(pair.ppg));
    records.push_back(std::move(pair.ecg));
  }
  write_corpus(records, a.out);
  log_info("wrote " + std::to_string(records.size()) + " records to " + a.out);
}

// ---- pipeline stages -------------------------------------------------------------------------------

void cmd_preprocess(const std::string& in, const std::string& out, const ConfigArgs& ca) {
  const auto cfg = ca.load();
  require_file(in);
  const auto segments = preprocess_corpus(read_corpus(in), cfg.filter);
  write_segments(segments, out);
  log_info("wrote " + std::to_string(segments.size()) + " segments to " + out);
}

void cmd_sqi(const std::string& in, const std::string& out, const ConfigArgs& ca) {
  const auto cfg = ca.load();
  require_file(in);
  const auto assessed = assess_all(read_segments(in), cfg.sqi, cfg.threads);
  write_manifest(assessed, in, out);
  std::map<std::string, int> counts;
  for (const auto& a : assessed) counts[to_string(a.quality.label)]++;
  std::string summary;
  for (const auto& [k, v] : counts) summary += " " + k + "=" + std::to_string(v);
  log_info("scored " + std::to_string(assessed.size()) + " segments:" + summary);
}

void cmd_pairs(const std::string& in, const std::string& out, const ConfigArgs& ca) {
  const auto cfg = ca.load();
  require_file(in);
  std::string source;
  const auto assessed = read_manifest(in, &source);
  const auto pairs = mine_pairs(assessed, cfg.pair_max_gap_s);
  write_pairs(pairs, source, out);
  log_info("mined " + std::to_string(pairs.size()) + " pairs into " + out);
}

template <typename S>
model::Checkpoint pretrain_as(const std::vector<Segment>& segments, const std::vector<QualityPair>& pairs,
                              const config::RunConfig& cfg, std::ostream* log) {
  const auto samples = train::make_samples<S>(segments, pairs, cfg.pretrain.amplitude_scale, cfg.threads);
  const long total = train::total_steps_for(samples.size(), cfg.pretrain);
  log_info("pretraining on " + std::to_string(samples.size()) + " pairs for " + std::to_string(total) + " steps");
  auto res = train::pretrain<S>(samples, cfg.model, cfg.pretrain, [&](const train::StepLog& s) {
    if (log) *log << train::to_jsonl(s) << "\n";
    if (s.step % 50 == 0) log_info("step " + std::to_string(s.step) + " L_pre " + std::to_string(s.loss.pre));
  });
  auto ckpt = train::to_checkpoint(res.state, cfg.model);
  ckpt.meta["seed"] = static_cast<double>(cfg.seed);
  ckpt.meta["pairs"] = static_cast<double>(samples.size());
  if (!res.history.empty()) ckpt.meta["final_L_pre"] = res.history.back().loss.pre;
  return ckpt;
}

void cmd_pretrain(const std::string& pairs_path, const std::string& out, const std::string& log_path,
                  const ConfigArgs& ca) {
  const auto cfg = ca.load();
  require_file(pairs_path);
  std::string source;
  const auto pairs = read_pairs(pairs_path, &source);
  const auto seg_path = resolve_source(source, pairs_path);
  require_file(seg_path);
  const auto segments = read_segments(seg_path);
  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, std::ios::binary);
    if (!log) throw std::runtime_error("cannot open file for writing: " + log_path);
  }
  std::ostream* sink = log_path.empty() ? nullptr : &log;
  const auto ckpt = cfg.precision == config::Precision::f64 ? pretrain_as<double>(segments, pairs, cfg, sink)
                                                            : pretrain_as<float>(segments, pairs, cfg, sink);
  model::save_checkpoint(out, ckpt);
  log_info("saved checkpoint to " + out);
}

void cmd_finetune(const std::string& task, const std::string& ckpt_path, const std::string& data_path,
                  const std::string& out, const ConfigArgs& ca) {
  const auto cfg = ca.load();
  require_file(ckpt_path);
  require_file(data_path);
  const auto ckpt = model::load_checkpoint(ckpt_path);
  const auto data = downstream::read_dataset(data_path);
  const auto spec = downstream::TaskSpec::make(downstream::parse_task(task), cfg.finetune.class_weight);
  const auto m = downstream::finetune(ckpt, data, spec, cfg.finetune);
  downstream::save_finetuned(out, m);
  log_info("fine-tuned " + task + " head, final loss " + std::to_string(m.final_loss) + ", saved to " + out);
}

void cmd_eval(const std::string& model_path, const std::string& data_path, const std::string& report,
              const std::string& predictions, bool all, const ConfigArgs& ca) {
  const auto cfg = ca.load();
  require_file(model_path);
  require_file(data_path);
  auto m = downstream::load_finetuned(model_path);
  const auto data = downstream::read_dataset(data_path);
  const auto e = downstream::evaluate(m, data, all, cfg.threads);
  const auto json = downstream::report_json(e);
  if (report.empty() || report == "-")
    std::cout << json;
  else
    write_text(report, json);
  if (!predictions.empty()) write_text(predictions, downstream::predictions_tsv(e, data));
}

int cmd_gradcheck(const std::string& scope) {
  const auto results = verify::gradcheck_suite(scope);
  bool ok = true;
  std::printf("%-22s %-12s %-10s %s\n", "check", "error", "threshold", "status");
  for (const auto& r : results) {
    std::printf("%-22s %-12.3e %-10.0e %s\n", r.name.c_str(), r.error, r.threshold, r.pass() ? "PASS" : "FAIL");
    ok = ok && r.pass();
  }
  return ok ? 0 : 1;
}

// ---- ablate ------------------------------------------------------------------------------------------

smoke::SmokeConfig smoke_config(const config::RunConfig& cfg) {
  smoke::SmokeConfig s;
  s.pretrain = cfg.pretrain;
  s.probe = cfg.probe;
  s.sqi = cfg.sqi;
  s.steps = cfg.ablate.steps;
  s.pairs = cfg.ablate.pairs;
  s.subjects = cfg.ablate.subjects;
  s.minutes = cfg.ablate.minutes;
  s.noise_level = cfg.ablate.noise_level;
  s.probe_subjects = cfg.ablate.probe_subjects;
  s.probe_train_subjects = cfg.ablate.probe_train_subjects;
  s.batch_size = cfg.ablate.batch_size;
  s.lr = cfg.ablate.lr;
  s.threads = cfg.threads;
  return s;
}

int cmd_ablate(const std::string& axis, const std::string& values, int seeds, const std::string& out,
               const ConfigArgs& ca) {
  const auto cfg = ca.load();
  if (axis != "window" && axis != "loss") throw ConfigError("--axis must be window or loss, got '" + axis + "'");
  const int n_seeds = seeds > 0 ? seeds : cfg.ablate.seeds;

  // Window values are integers; loss values are amp:pha weight pairs.
  std::vector<std::string> labels;
  std::vector<std::pair<double, double>> loss_values;
  std::vector<int> windows;
  if (axis == "window") {
    windows = parse_int_list(values.empty() ? "0,2,4,8,16" : values);
    for (int w : windows) labels.push_back(std::to_string(w));
  } else {
    std::stringstream ss(values.empty() ? "0.5:0.5,0.5:0,0:0.5,0:0" : values);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("--values: loss entries are amp:pha, got '" + item + "'");
      try {
        loss_values.emplace_back(std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1)));
      } catch (const std::exception&) {
        throw ConfigError("--values: cannot parse '" + item + "'");
      }
      labels.push_back(smoke::loss_label(loss_values.back().first, loss_values.back().second));
    }
  }

  const auto base = smoke_config(cfg);
  std::vector<std::uint64_t> seed_list;
  for (int s = 0; s < n_seeds; ++s) seed_list.push_back(cfg.seed + static_cast<std::uint64_t>(s) + 1);
  log_info("ablating " + axis + " over " + std::to_string(labels.size()) + " values x " + std::to_string(n_seeds) +
           " seeds");
  const auto points =
      axis == "window" ? smoke::ablate_window(base, windows, seed_list) : smoke::ablate_loss(base, loss_values, seed_list);
  std::string text = smoke::ablation_table(axis, points);
  if (axis == "window") {
    const auto [below, both] = smoke::count_below(points, "0", "8");
    if (both > 0) text += "w=0 below w=8 in " + std::to_string(below) + " of " + std::to_string(both) + " seeds\n";
  }
  std::cout << text;
  if (!out.empty()) write_text(out, text);
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"QualityFM desk-scale pipeline"};
  app.require_subcommand(1);
  app.add_flag("-q,--quiet", g_quiet, "Suppress progress messages");

  GenSynthArgs gs;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic PPG/ECG corpus or a labeled task dataset");
  gen->add_option("--bpm", gs.bpm, "Heart rate in beats per minute");
  gen->add_option("--noise", gs.noise, "none|gaussian|baseline_wander|motion_burst|dropout|mixed");
  gen->add_option("--level", gs.level, "Noise level");
  gen->add_option("--duration", gs.duration, "Record duration in seconds");
  gen->add_option("--seed", gs.seed, "Generator seed");
  gen->add_option("--out", gs.out, "Output file")->required();
  gen->add_option("--subjects", gs.subjects, "Number of subjects (35 by default with --task)");
  gen->add_option("--rate", gs.rate, "Sampling rate in Hz");
  gen->add_option("--irregularity", gs.irregularity, "RR interval coefficient of variation");
  gen->add_option("--task", gs.task, "Write a labeled dataset for vtac|af|bp instead of a corpus");
  gen->add_option("--minutes", gs.minutes, "Minutes per subject for --task");
  gen->add_option("--threads", gs.threads, "Worker threads");

  std::string in, out, report, predictions, log_path, pairs_path, ckpt_path, data_path, task, model_path, scope = "all";
  std::string axis, values;
  int seeds = 0;
  bool all = false;
  ConfigArgs ca;

  auto* pre = app.add_subcommand("preprocess", "Filter, segment and normalize a corpus");
  pre->add_option("--in", in, "Corpus file")->required();
  pre->add_option("--out", out, "Segment file")->required();
  ca.add_to(pre);

  auto* sqi = app.add_subcommand("sqi", "Score segments and write a quality manifest");
  sqi->add_option("--in", in, "Segment file")->required();
  sqi->add_option("--out", out, "Manifest file")->required();
  ca.add_to(sqi);

  auto* pairs = app.add_subcommand("pairs", "Mine quality-divergent pairs from a manifest");
  pairs->add_option("--in", in, "Manifest file")->required();
  pairs->add_option("--out", out, "Pair file")->required();
  ca.add_to(pairs);

  auto* pt = app.add_subcommand("pretrain", "Self-distillation pretraining");
  pt->add_option("--pairs", pairs_path, "Pair file")->required();
  pt->add_option("--out", out, "Checkpoint file")->required();
  pt->add_option("--log", log_path, "Per-step JSONL log");
  ca.add_to(pt);

  auto* ft = app.add_subcommand("finetune", "Fine-tune a task head on the pretrained teacher");
  ft->add_option("--task", task, "vtac|af|bp")->required();
  ft->add_option("--checkpoint", ckpt_path, "Pretraining checkpoint")->required();
  ft->add_option("--data", data_path, "Labeled dataset")->required();
  ft->add_option("--out", out, "Fine-tuned model file")->required();
  ca.add_to(ft);

  auto* ev = app.add_subcommand("eval", "Evaluate a fine-tuned model");
  ev->add_option("--model", model_path, "Fine-tuned model file")->required();
  ev->add_option("--data", data_path, "Labeled dataset")->required();
  ev->add_option("--report", report, "Report JSON path ('-' for stdout)");
  ev->add_option("--predictions", predictions, "Per-segment predictions TSV");
  ev->add_flag("--all", all, "Evaluate every segment instead of the held-out subjects");
  ca.add_to(ev);

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--scope", scope, "all|primitives|block|loss");

  auto* ab = app.add_subcommand("ablate", "Window-size or loss-term ablation on synthetic data");
  ab->add_option("--axis", axis, "window|loss")->required();
  ab->add_option("--values", values, "Comma-separated values (window sizes, or amp:pha weights)");
  ab->add_option("--seeds", seeds, "Repetitions per value (overrides ablate.seeds)");
  ab->add_option("--out", out, "Summary table path");
  ca.add_to(ab);

  auto* show = app.add_subcommand("show-config", "Print the effective configuration");
  ca.add_to(show);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  if (gen->parsed()) {
    if (!gs.task.empty() && gen->count("--subjects") == 0) gs.subjects = 35;
    cmd_gen_synth(gs);
  } else if (pre->parsed()) {
    cmd_preprocess(in, out, ca);
  } else if (sqi->parsed()) {
    cmd_sqi(in, out, ca);
  } else if (pairs->parsed()) {
    cmd_pairs(in, out, ca);
  } else if (pt->parsed()) {
    cmd_pretrain(pairs_path, out, log_path, ca);
  } else if (ft->parsed()) {
    cmd_finetune(task, ckpt_path, data_path, out, ca);
  } else if (ev->parsed()) {
    cmd_eval(model_path, data_path, report, predictions, all, ca);
  } else if (gc->parsed()) {
    return cmd_gradcheck(scope);
  } else if (ab->parsed()) {
    return cmd_ablate(axis, values, seeds, out, ca);
  } else if (show->parsed()) {
    std::cout << config::to_text(ca.load());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error[config]: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "error[format]: " << e.what() << "\n";
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "error[contract]: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "error[numeric]: " << e.what() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error[io]: " << e.what() << "\n";
    return 6;
  }
}
