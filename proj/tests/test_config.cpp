#include <doctest.h>

#include "r2d2/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

using namespace r2d2;

namespace {

std::string error_key(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<no error>";
}

}  // namespace

TEST_CASE("unknown keys are hard errors that name the key") {
  RunConfig cfg;
  CHECK(error_key([&] { parse_config_text("hidden_dim=32\nhiden_dim=16\n", cfg); }) == "hiden_dim");
  CHECK(error_key([&] { apply_setting(cfg, "learningrate", "1e-3"); }) == "learningrate");
  CHECK(error_key([&] { parse_config_text("epochs 3\n", cfg); }) == "epochs 3");
}

TEST_CASE("values are type-checked per key") {
  RunConfig cfg;
  CHECK(error_key([&] { apply_setting(cfg, "hidden_dim", "3.5"); }) == "hidden_dim");
  CHECK(error_key([&] { apply_setting(cfg, "learning_rate", "fast"); }) == "learning_rate");
  CHECK(error_key([&] { apply_setting(cfg, "use_mlm", "maybe"); }) == "use_mlm");
  CHECK(error_key([&] { apply_setting(cfg, "seed", "-1"); }) == "seed");
  CHECK(error_key([&] { apply_setting(cfg, "field_mode", "titles"); }) == "field_mode");

  apply_setting(cfg, "use_mlm", "false");
  apply_setting(cfg, "learning_rate", "2.5e-4");
  apply_setting(cfg, "field_mode", "no_query");
  CHECK_FALSE(cfg.train.ablation.mlm);
  CHECK(cfg.train.learning_rate == 2.5e-4);
  CHECK(cfg.train.field_mode == FieldMode::no_query);
}

TEST_CASE("validation names the offending key") {
  RunConfig cfg;
  cfg.model.num_heads = 5;
  CHECK(error_key([&] { cfg.model.validate(); }) == "num_heads");
  cfg = {};
  cfg.model.image_resolution = 30;
  CHECK(error_key([&] { cfg.model.validate(); }) == "image_resolution");
  cfg = {};
  cfg.train.shards = 3;
  CHECK(error_key([&] { cfg.train.validate(); }) == "shards");
  cfg = {};
  cfg.model.attention_map_layer = cfg.model.cross_layers;
  CHECK(error_key([&] { cfg.model.validate(); }) == "attention_map_layer");
}

TEST_CASE("comments, blanks and whitespace in config text") {
  const auto cfg = parse_config_text("# desk run\n\n  epochs = 3   # short\nbatch_size=8\n", RunConfig{});
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.train.batch_size == 8);
}

TEST_CASE("dump and parse round-trip every key") {
  RunConfig a = presets::by_name("paper");
  a.model.tgd_alpha = 0.123456789012345;
  a.train.seed = 18446744073709551615ull;
  a.train.field_mode = FieldMode::title_only;
  a.train.ablation.fgd = false;
  const RunConfig b = parse_config_text(dump_config(a), RunConfig{});
  CHECK(dump_config(b) == dump_config(a));
  CHECK(b.model.tgd_alpha == a.model.tgd_alpha);

  std::set<std::string> keys;
  for (const auto& k : known_keys()) CHECK(keys.insert(k).second);
  int lines = 0;
  for (char c : dump_config(a)) lines += c == '\n';
  CHECK(lines == static_cast<int>(keys.size()));
}

TEST_CASE("environment overrides use the R2D2_ prefix") {
  RunConfig cfg;
  ::setenv("R2D2_HIDDEN_DIM", "32", 1);
  ::setenv("R2D2_USE_TGD", "false", 1);
  apply_env_overrides(cfg);
  ::unsetenv("R2D2_HIDDEN_DIM");
  ::unsetenv("R2D2_USE_TGD");
  CHECK(cfg.model.hidden_dim == 32);
  CHECK_FALSE(cfg.train.ablation.tgd);

  ::setenv("R2D2_EPOCHS", "lots", 1);
  CHECK(error_key([&] { apply_env_overrides(cfg); }) == "epochs");
  ::unsetenv("R2D2_EPOCHS");
}

TEST_CASE("config files load over a base") {
  const auto path = std::filesystem::temp_directory_path() / "r2d2_test_config.cfg";
  std::ofstream(path) << "cross_layers=3\n";
  const auto cfg = load_config_file(path.string(), presets::by_name("desk"));
  CHECK(cfg.model.cross_layers == 3);
  CHECK(cfg.model.hidden_dim == 64);
  std::filesystem::remove(path);
  CHECK(error_key([&] { load_config_file(path.string(), RunConfig{}); }) == "config");
}

TEST_CASE("paper preset holds the large-scale pre-training values") {
  const auto cfg = presets::by_name("paper");
  CHECK(cfg.model.hidden_dim == 768);
  CHECK(cfg.model.image_resolution == 224);
  CHECK(cfg.model.tau_init == 0.07);
  CHECK(cfg.model.tau_s == 0.1);
  CHECK(cfg.model.tau_t == 0.04);
  CHECK(cfg.model.ema_momentum == 0.995);
  CHECK(cfg.model.queue_capacity == 36864);
  CHECK(cfg.model.queue_decay == 0.99);
  CHECK(cfg.train.epochs == 15);
  CHECK(cfg.train.batch_size == 4096);
  CHECK(cfg.train.shards == 128);
  CHECK(cfg.train.batch_size / cfg.train.shards == 32);
  CHECK_NOTHROW(cfg.model.validate());
  CHECK_NOTHROW(cfg.train.validate());

  const auto rt = presets::retrieval_finetune(true);
  CHECK(rt.epochs == 20);
  CHECK(rt.batch_size == 32);
  CHECK(rt.learning_rate == 1e-5);
  const auto mt = presets::matching_finetune(true);
  CHECK(mt.epochs == 5);
  CHECK(mt.batch_size == 64);
  CHECK(mt.learning_rate == 1e-5);
  CHECK(error_key([] { presets::by_name("laptop"); }) == "preset");
}

TEST_CASE("ablation table has the seven component rows") {
  const auto rows = ablation_table();
  REQUIRE(rows.size() == 7);
  CHECK(rows[0].name == "PRD2");
  CHECK_FALSE(rows[0].flags.cross_encoders);
  CHECK_FALSE(rows[0].flags.fgr);
  CHECK(rows[0].flags.gcpr);
  CHECK(rows[0].flags.tgd);
  CHECK(rows[0].flags.fgd);
  CHECK(rows[1].flags == AblationFlags{});
  CHECK_FALSE(rows[4].flags.tgd);
  CHECK_FALSE(rows[4].flags.fgd);
  std::set<std::string> names;
  for (const auto& r : rows) names.insert(r.name);
  CHECK(names.size() == 7);

  CHECK(parse_ablation_list("no-twd") == parse_ablation_list("no-tgd, no-fgd"));
  CHECK(parse_ablation_list("") == AblationFlags{});
  CHECK(error_key([] { parse_ablation_list("no-et,no-magic"); }) == "ablation");
}

TEST_CASE("field modes parse and print") {
  for (auto m : {FieldMode::all, FieldMode::title_only, FieldMode::content_only, FieldMode::query_only,
                 FieldMode::no_title, FieldMode::no_content, FieldMode::no_query}) {
    CHECK(parse_field_mode(to_string(m)) == m);
  }
}

TEST_CASE("bundled preset files match the built-in presets") {
  for (const char* name : {"desk", "paper"}) {
    const auto path = std::string(R2D2_SOURCE_DIR) + "/configs/" + name + ".cfg";
    const auto loaded = load_config_file(path, RunConfig{});
    CHECK(dump_config(loaded) == dump_config(presets::by_name(name)));
  }
}
