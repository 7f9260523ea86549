#include "r2d2/cli.hpp"

#include "r2d2/evaluation.hpp"
#include "r2d2/experiments.hpp"
#include "r2d2/training.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#ifndef R2D2_VERSION
#define R2D2_VERSION "unknown"
#endif

namespace r2d2 {

std::string code_version() { return R2D2_VERSION; }

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string command;
  std::string config_path;
  std::string preset = "desk";
  uint64_t seed = 0;
  bool seed_given = false;
  std::string out = "out";
  std::string ablation;
  std::vector<std::string> sets;
  std::string data;
  std::string checkpoint;
  int k = 8;
  std::string field = "content";

  int count = 640;
  double noise = 0.0;
  double ctr_fraction = 1.0;
  double corrupt = 0.0;
  int ways = 8;
  int seeds = 1;
  int64_t record = -1;
  std::vector<std::string> rows;
};

TextField parse_field(const std::string& s) {
  if (s == "title") return TextField::title;
  if (s == "content") return TextField::content;
  if (s == "query") return TextField::query;
  throw ConfigError("field", "expected title, content or query, got '" + s + "'");
}

// preset -> fine-tune defaults -> file -> environment -> --set -> --seed -> --ablation
RunConfig resolve_config(const Options& o, const TrainingState* checkpoint) {
  RunConfig cfg = presets::by_name(o.preset);
  const bool paper = o.preset == "paper";
  if (o.command == "finetune-retrieval") cfg.train = presets::retrieval_finetune(paper);
  if (o.command == "finetune-matching") cfg.train = presets::matching_finetune(paper);
  if (!o.config_path.empty()) cfg = load_config_file(o.config_path, cfg);
  apply_env_overrides(cfg);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(kv, "--set expects key=value");
    apply_setting(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed_given) {
    cfg.train.seed = o.seed;
  } else if (checkpoint) {
    cfg.train.seed = checkpoint->config.train.seed;
  }
  if (!o.ablation.empty()) cfg.train.ablation = parse_ablation_list(o.ablation, cfg.train.ablation);
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

json config_json(const RunConfig& cfg) {
  json j = json::object();
  std::istringstream in(dump_config(cfg));
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) j[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return j;
}

void write_manifest(const Options& o, const RunConfig& cfg, const std::vector<std::string>& args) {
  fs::create_directories(o.out);
  json m;
  m["command"] = o.command;
  m["config_path"] = o.config_path;
  m["preset"] = o.preset;
  m["seed"] = cfg.train.seed;
  m["out"] = o.out;
  m["version"] = code_version();
  m["metric_stream_version"] = kMetricVersion;
  m["args"] = args;
  m["config"] = config_json(cfg);
  std::ofstream(fs::path(o.out) / "manifest.json") << m.dump(2) << '\n';
}

void write_json(const Options& o, const std::string& name, const json& j) {
  std::ofstream(fs::path(o.out) / name) << j.dump(2) << '\n';
}

// Dataset from --data, or a synthetic corpus drawn from the seed.
Corpus load_corpus(const Options& o, const RunConfig& cfg) {
  if (!o.data.empty()) return Corpus(read_dataset(o.data));
  return synthetic_corpus(o.count, o.noise, cfg.train.seed, cfg.model.image_resolution);
}

TrainOptions train_options(const Options& o, std::ofstream& metrics) {
  metrics.open(fs::path(o.out) / "metrics.jsonl");
  TrainOptions t;
  t.metrics = &metrics;
  t.abort_checkpoint = (fs::path(o.out) / "aborted.ckpt").string();
  return t;
}

int cmd_data_gen(const Options& o, const RunConfig& cfg, std::ostream& out) {
  GeneratorOptions g;
  g.resolution = cfg.model.image_resolution;
  g.bad_dimension_rate = o.corrupt;
  g.short_query_rate = o.corrupt;
  g.sensitive_rate = o.corrupt;
  auto raw = generate_pairs(o.count, o.noise, cfg.train.seed, g);
  const size_t generated = raw.size();
  auto kept = filter_records(std::move(raw), {});
  const size_t filtered = kept.size();
  kept = ctr_rank_select(std::move(kept), o.ctr_fraction);
  assign_splits(kept, cfg.train.seed);

  std::vector<RawRecord> pre, down;
  for (auto& r : kept) (r.split == Split::train ? pre : down).push_back(std::move(r));
  auto leak = leakage_check(pre, down, true);
  std::vector<RawRecord> records = std::move(leak.cleaned);
  for (auto& r : down) records.push_back(std::move(r));
  write_dataset(o.out, records, cfg.model.max_text_len);

  json s;
  s["generated"] = generated;
  s["after_filters"] = filtered;
  s["after_ctr"] = kept.size();
  s["leakage_removed"] = leak.hits.size();
  s["written"] = records.size();
  write_json(o, "data_stats.json", s);
  out << s.dump() << '\n';
  return 0;
}

int cmd_pretrain(const Options& o, const RunConfig& cfg, std::ostream& out) {
  const Corpus data = load_corpus(o, cfg);
  auto state = TrainingState::fresh(cfg);
  std::ofstream metrics;
  const auto logs = pretrain(*state, data.train, train_options(o, metrics));
  save_checkpoint(*state, (fs::path(o.out) / "model.ckpt").string());
  out << "pretrained " << logs.size() << " steps on " << data.train.size() << " pairs, final loss "
      << (logs.empty() ? 0.0 : logs.back().losses.total) << '\n';
  return 0;
}

int cmd_finetune(const Options& o, const RunConfig& cfg, TrainingState* state, std::ostream& out) {
  const Corpus data = load_corpus(o, state->config);
  std::ofstream metrics;
  TrainConfig train = cfg.train;
  std::vector<StepLog> logs;
  if (o.command == "finetune-retrieval") {
    std::vector<const RawRecord*> matched;
    for (const auto* r : data.train) {
      if (r->is_match) matched.push_back(r);
    }
    logs = finetune_retrieval(*state, matched, train, train_options(o, metrics));
  } else {
    logs = finetune_matching(*state, data.train, train, train_options(o, metrics));
  }
  save_checkpoint(*state, (fs::path(o.out) / "model.ckpt").string());
  out << o.command << ": " << logs.size() << " steps, final loss " << (logs.empty() ? 0.0 : logs.back().losses.total)
      << '\n';
  return 0;
}

int cmd_eval_retrieval(const Options& o, const TrainingState* state, std::ostream& out) {
  const Corpus data = load_corpus(o, state->config);
  const auto test = data.matched_test();
  const auto images = eval_images(test);
  const auto texts = eval_texts(test, parse_field(o.field));
  const RerankConfig rr{o.k};
  const auto dual = evaluate_retrieval(*state->model, images, texts, false, rr);
  const auto rerank = evaluate_retrieval(*state->model, images, texts, true, rr);
  print_retrieval_table(out, {{"dual-stream", dual}, {"rerank top-" + std::to_string(o.k), rerank}});
  json j;
  j["k"] = o.k;
  j["field"] = o.field;
  j["queries"] = test.size();
  j["dual"] = json::parse(retrieval_record(dual, "dual"));
  j["rerank"] = json::parse(retrieval_record(rerank, "rerank"));
  write_json(o, "retrieval.json", j);
  out << j["rerank"].dump() << '\n';
  return 0;
}

int cmd_eval_matching(const Options& o, const TrainingState* state, std::ostream& out) {
  const Corpus data = load_corpus(o, state->config);
  const auto r = evaluate_matching(*state->model, data.test, parse_field(o.field));
  json j;
  j["auc"] = r.auc;
  j["pairs"] = r.labels.size();
  j["positives"] = std::count(r.labels.begin(), r.labels.end(), 1);
  write_json(o, "matching.json", j);
  out << j.dump() << '\n';
  return 0;
}

int cmd_eval_zeroshot(const Options& o, const RunConfig& cfg, const TrainingState* state, std::ostream& out) {
  const Corpus data = load_corpus(o, state->config);
  const double acc =
      zero_shot_accuracy(*state->model, data.matched_test(), o.ways, cfg.train.seed, parse_field(o.field));
  json j;
  j["ways"] = o.ways;
  j["field"] = o.field;
  j["accuracy"] = acc;
  j["chance"] = 100.0 / o.ways;
  write_json(o, "zeroshot.json", j);
  out << j.dump() << '\n';
  return 0;
}

int cmd_attn_map(const Options& o, const TrainingState* state, std::ostream& out) {
  const Corpus data = load_corpus(o, state->config);
  const auto test = data.matched_test();
  const RawRecord* pick = nullptr;
  for (const auto* r : test) {
    if (o.record >= 0 ? r->id == o.record : r->latent.object_count() == 1) {
      pick = r;
      break;
    }
  }
  if (!pick) throw std::runtime_error("attn-map: no matching test record");
  int q = 0;
  while (!pick->latent.cells[static_cast<size_t>(q)]) ++q;
  const Object obj = *pick->latent.cells[static_cast<size_t>(q)];
  const TextField field = parse_field(o.field);
  const auto map = attention_map(*state->model, pick->image, pick->field(field),
                                 {vocab::color_id(obj.color), vocab::shape_id(obj.shape)});
  const auto pgm = fs::path(o.out) / ("attn_" + std::to_string(pick->id) + ".pgm");
  write_heatmap_pgm(map, pgm.string());
  json j;
  j["record"] = pick->id;
  j["text"] = vocab::decode(pick->field(field));
  j["layer"] = map.layer;
  j["argmax"] = {map.argmax().first, map.argmax().second};
  j["heatmap"] = pgm.string();
  j["localization"] = attention_localization(*state->model, test, field);
  write_json(o, "attention.json", j);
  out << j.dump() << '\n';
  return 0;
}

int cmd_ablate(const Options& o, const RunConfig& cfg, std::ostream& out) {
  const TextField field = parse_field(o.field);
  std::vector<AblationRow> rows;
  for (const auto& r : ablation_table()) {
    if (o.rows.empty() || std::find(o.rows.begin(), o.rows.end(), r.name) != o.rows.end()) rows.push_back(r);
  }
  if (rows.empty()) throw UsageError("ablate: --row matched no table row");
  std::ofstream jsonl(fs::path(o.out) / "ablation.jsonl");
  std::map<std::string, std::vector<RetrievalResult>> dual, rerank;
  for (int s = 0; s < o.seeds; ++s) {
    RunConfig run = cfg;
    run.train.seed = cfg.train.seed + static_cast<uint64_t>(s);
    const Corpus data = load_corpus(o, run);
    for (const auto& row : rows) {
      const auto res = run_ablation_row(run, row, data, field, RerankConfig{o.k});
      jsonl << ablation_record(res) << '\n' << std::flush;
      dual[row.name].push_back(res.dual);
      if (res.rerank) rerank[row.name].push_back(*res.rerank);
    }
  }
  auto average = [](const std::vector<RetrievalResult>& v) {
    RetrievalResult a;
    for (const auto& r : v) {
      a.i2t.r1 += r.i2t.r1 / v.size();
      a.i2t.r5 += r.i2t.r5 / v.size();
      a.i2t.r10 += r.i2t.r10 / v.size();
      a.t2i.r1 += r.t2i.r1 / v.size();
      a.t2i.r5 += r.t2i.r5 / v.size();
      a.t2i.r10 += r.t2i.r10 / v.size();
    }
    a.mean_recall = mean_recall(a.i2t, a.t2i);
    return a;
  };
  std::vector<std::pair<std::string, RetrievalResult>> table;
  for (const auto& row : rows) table.emplace_back(row.name, average(dual[row.name]));
  out << "dual-stream, mean over " << o.seeds << " seed(s)\n";
  print_retrieval_table(out, table);
  table.clear();
  for (const auto& row : rows) {
    if (!rerank[row.name].empty()) table.emplace_back(row.name, average(rerank[row.name]));
  }
  if (!table.empty()) {
    out << "rerank top-" << o.k << "\n";
    print_retrieval_table(out, table);
  }
  return 0;
}

int dispatch(const Options& o, const RunConfig& cfg, TrainingState* state, std::ostream& out) {
  if (o.command == "data-gen") return cmd_data_gen(o, cfg, out);
  if (o.command == "pretrain") return cmd_pretrain(o, cfg, out);
  if (o.command == "ablate") return cmd_ablate(o, cfg, out);
  if (!state) throw UsageError(o.command + " needs --checkpoint");
  if (o.command == "finetune-retrieval" || o.command == "finetune-matching") return cmd_finetune(o, cfg, state, out);
  if (o.command == "eval-retrieval") return cmd_eval_retrieval(o, state, out);
  if (o.command == "eval-matching") return cmd_eval_matching(o, state, out);
  if (o.command == "eval-zeroshot") return cmd_eval_zeroshot(o, cfg, state, out);
  return cmd_attn_map(o, state, out);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"R2D2 vision-language pre-training at desk scale", "r2d2"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", code_version());

  auto common = [&o](CLI::App* c) {
    c->add_option("--config", o.config_path, "flat key=value config file")->check(CLI::ExistingFile);
    c->add_option("--preset", o.preset, "base preset")->check(CLI::IsMember({"desk", "paper"}));
    c->add_option("--seed", o.seed, "seed for every random choice");
    c->add_option("--out", o.out, "output directory");
    c->add_option("--ablation", o.ablation, "comma list: no-et,no-mlm,no-twd,no-tgd,no-fgd,no-gcpr,no-fgr,prd2");
    c->add_option("--set", o.sets, "key=value override, repeatable");
    c->add_option("--field", o.field, "evaluation text field")->check(CLI::IsMember({"title", "content", "query"}));
  };
  auto data_opts = [&o](CLI::App* c) {
    c->add_option("--data", o.data, "dataset directory written by data-gen")->check(CLI::ExistingDirectory);
    c->add_option("--count", o.count, "synthetic pairs when --data is absent")->check(CLI::PositiveNumber);
    c->add_option("--noise", o.noise, "fraction of mismatched pairs")->check(CLI::Range(0.0, 1.0));
  };
  auto ckpt = [&o](CLI::App* c) { c->add_option("--checkpoint", o.checkpoint, "model checkpoint")->check(CLI::ExistingFile); };

  auto* gen = app.add_subcommand("data-gen", "generate, filter, rank and split a synthetic corpus");
  common(gen);
  gen->add_option("--count", o.count)->check(CLI::PositiveNumber);
  gen->add_option("--noise", o.noise)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--ctr-fraction", o.ctr_fraction, "keep this top fraction by CTR")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--corrupt", o.corrupt, "rate of records violating each filter rule")->check(CLI::Range(0.0, 1.0));

  for (const char* name : {"pretrain", "finetune-retrieval", "finetune-matching", "eval-retrieval", "eval-matching",
                           "eval-zeroshot", "attn-map", "ablate"}) {
    auto* c = app.add_subcommand(name);
    common(c);
    data_opts(c);
    const std::string n = name;
    if (n != "pretrain" && n != "ablate") ckpt(c);
    if (n == "eval-retrieval" || n == "ablate") c->add_option("--k", o.k, "rerank depth")->check(CLI::PositiveNumber);
    if (n == "eval-zeroshot") c->add_option("--ways", o.ways, "candidate labels per image")->check(CLI::PositiveNumber);
    if (n == "attn-map") c->add_option("--record", o.record, "record id (default: first single-object test record)");
    if (n == "ablate") {
      c->add_option("--seeds", o.seeds, "consecutive seeds starting at --seed")->check(CLI::PositiveNumber);
      c->add_option("--row", o.rows, "restrict to named rows");
    }
  }
  app.get_subcommand("pretrain")->description("pre-train from scratch; writes model.ckpt and metrics.jsonl");
  app.get_subcommand("finetune-retrieval")->description("GCPR + FGR fine-tuning from --checkpoint");
  app.get_subcommand("finetune-matching")->description("FGR-only fine-tuning on match labels");
  app.get_subcommand("eval-retrieval")->description("recall@1/5/10 and R@M, dual-stream and top-K rerank");
  app.get_subcommand("eval-matching")->description("AUC of the averaged match probability");
  app.get_subcommand("eval-zeroshot")->description("caption vs distractor captions accuracy");
  app.get_subcommand("attn-map")->description("entity attention heatmap and quadrant localization");
  app.get_subcommand("ablate")->description("component ablation table");

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    app.exit(e, out, err);
    err << '\n' << app.help();
    return 2;
  }
  o.command = app.get_subcommands().front()->get_name();
  o.seed_given = app.get_subcommands().front()->count("--seed") > 0;

  try {
    std::unique_ptr<TrainingState> state;
    if (!o.checkpoint.empty()) state = load_checkpoint(o.checkpoint);
    const RunConfig cfg = resolve_config(o, state.get());
    write_manifest(o, cfg, args);
    return dispatch(o, cfg, state.get(), out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace r2d2
