#include <filesystem>
#include <functional>
#include <fstream>

#include "doctest.h"
#include "qfm/config.hpp"
#include "qfm/errors.hpp"

using namespace qfm;
namespace fs = std::filesystem;

namespace {

fs::path write(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
  return p;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("defaults carry the published hyperparameters") {
  const auto c = config::load("");
  CHECK(c.model.window == 8);
  CHECK(c.model_preset == "base");
  CHECK(c.pretrain.lr == 1e-4);
  CHECK(c.pretrain.weight_decay == 0.04);
  CHECK(c.pretrain.epochs == 10);
  CHECK(c.pretrain.lambda_amp == 0.5);
  CHECK(c.pretrain.lambda_pha == 0.5);
  CHECK(c.pretrain.batch_size == 512);
  CHECK(c.pretrain.beta1 == 0.7);
  CHECK(c.finetune.weight_decay == 0.005);
  CHECK(c.finetune.class_weight == 3.54);
  CHECK(c.finetune.powerline_hz == 60);
  CHECK(c.finetune.lr == 1e-4);
  CHECK(c.finetune.epochs == 500);
}

TEST_CASE("shipped default config file matches the built-in defaults") {
  const auto dir = fs::path(QFM_CONFIG_DIR);
  const auto file = config::load((dir / "default.conf").string());
  CHECK(config::to_text(file) == config::to_text(config::load("")));
  const auto tiny = config::load((dir / "tiny.conf").string());
  CHECK(tiny.model == model::ModelConfig::tiny());
  CHECK(tiny.pretrain.weight_decay == 0.04);
  CHECK_NOTHROW(config::load((dir / "ablate.conf").string()));
}

TEST_CASE("sections, comments, includes and overrides") {
  const auto dir = fs::temp_directory_path() / "qfm_test_config";
  write(dir / "base" / "common.conf", "# shared\nseed = 5\n[pretrain]\nlr = 2e-3  # inline\n");
  const auto main = write(dir / "run.conf", "include = base/common.conf\n[model]\npreset = tiny\nwindow = 4\n");
  const auto c = config::load(main.string(), {"pretrain.epochs=3", "model.heads=2"});
  CHECK(c.seed == 5);
  CHECK(c.pretrain.lr == 2e-3);
  CHECK(c.pretrain.epochs == 3);
  CHECK(c.model.hidden == 64);
  CHECK(c.model.window == 4);
  CHECK(c.model.heads == 2);
  CHECK(c.pretrain.seed == 5);  // copied into the stage configs
  fs::remove_all(dir);
}

TEST_CASE("a preset resets model keys written before it") {
  const auto c = config::load("", {"model.hidden=128", "model.preset=tiny"});
  CHECK(c.model.hidden == 64);
  const auto d = config::load("", {"model.preset=tiny", "model.hidden=128"});
  CHECK(d.model.hidden == 128);
}

TEST_CASE("errors name the key and the location") {
  const auto dir = fs::temp_directory_path() / "qfm_test_config_err";
  const auto bad = write(dir / "bad.conf", "seed = 1\n\n[pretrain]\nlearning_rate = 1\n");
  CHECK(error_of([&] { config::load(bad.string()); }).find("bad.conf:4: unknown key 'pretrain.learning_rate'") !=
        std::string::npos);
  const auto typed = write(dir / "typed.conf", "[model]\nlayers = two\n");
  const auto msg = error_of([&] { config::load(typed.string()); });
  CHECK(msg.find("typed.conf:2") != std::string::npos);
  CHECK(msg.find("model.layers") != std::string::npos);
  CHECK(error_of([] { config::load("", {"pretrain.tau_s=0"}); }).find("temperature") != std::string::npos);
  CHECK(error_of([] { config::load("", {"noequals"}); }).find("<override>:1") != std::string::npos);
  CHECK_THROWS_AS(config::load((dir / "missing.conf").string()), ConfigError);

  write(dir / "a.conf", "include = b.conf\n");
  write(dir / "b.conf", "include = a.conf\n");
  CHECK(error_of([&] { config::load((dir / "a.conf").string()); }).find("include") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("to_text parses back to the same configuration") {
  auto c = config::load("", {"model.preset=tiny", "sqi.ppg_component_weights=0.1,0.2,0.3,0.2,0.2",
                             "pretrain.center_teacher=true", "precision=double"});
  const auto text = config::to_text(c);
  config::RunConfig back;
  config::apply(back, config::parse_text(text, "<text>"));
  CHECK(config::to_text(back) == text);
  CHECK(back.sqi.ppg_component_weights[2] == 0.3);
  CHECK(back.precision == config::Precision::f64);
  for (const auto& k : config::known_keys()) CHECK(text.find(k.substr(k.find('.') + 1)) != std::string::npos);
}
