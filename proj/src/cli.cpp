#include "fusekit/cli.hpp"

#include "fusekit/alignment.hpp"
#include "fusekit/distribution.hpp"
#include "fusekit/errors.hpp"
#include "fusekit/fusion.hpp"
#include "fusekit/merge.hpp"
#include "fusekit/parallel.hpp"
#include "fusekit/projection.hpp"
#include "fusekit/tensorio.hpp"
#include "fusekit/toy_lm.hpp"
#include "fusekit/vocabulary.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace fusekit {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum class Kind { InputPath, InputPaths, OutputDir, Text, Real, Count, Flag };

struct KeySpec {
  std::string key;
  Kind kind;
  json fallback;  // null: no default
  bool required = false;
  std::string help;
};

struct CommandSpec {
  std::string name;
  std::string help;
  std::vector<KeySpec> keys;
};

// Keys that never reach the echoed config: they do not influence output bytes.
const std::vector<std::string> kUnechoedKeys = {"out", "workers", "overwrite"};

std::vector<KeySpec> common_keys() {
  return {
      {"out", Kind::OutputDir, nullptr, true, "output directory"},
      {"workers", Kind::Count, 1, false, "worker threads (never changes output bytes)"},
      {"overwrite", Kind::Flag, false, false, "allow writing into a non-empty output directory"},
  };
}

std::vector<CommandSpec> command_specs() {
  std::vector<CommandSpec> specs = {
      {"align-stats",
       "align pivot and source tokenizations of a corpus and accumulate mapping statistics",
       {
           {"pivot_vocab", Kind::InputPath, nullptr, true, "pivot vocabulary file"},
           {"source_vocab", Kind::InputPath, nullptr, true, "source vocabulary file"},
           {"corpus", Kind::InputPath, nullptr, true, "JSONL corpus with response and source_response ids"},
           {"max_span", Kind::Count, 16, false, "longest many-token side of a segment"},
       }},
      {"project",
       "project a source-vocabulary dump into the pivot vocabulary",
       {
           {"pivot_vocab", Kind::InputPath, nullptr, true, "pivot vocabulary file"},
           {"source_vocab", Kind::InputPath, nullptr, true, "source vocabulary file"},
           {"corpus", Kind::InputPath, nullptr, true, "JSONL corpus with response and source_response ids"},
           {"dump", Kind::InputPath, nullptr, true, "source distribution dump"},
           {"stats", Kind::InputPath, nullptr, false, "mapping statistics (MS only)"},
           {"strategy", Kind::Text, "MS", false, "EM | MinED | MS"},
           {"max_span", Kind::Count, 16, false, "longest many-token side of a segment"},
       }},
      {"fuse-train",
       "train a target model against the MinCE fusion of pivot and source distributions",
       {
           {"corpus", Kind::InputPath, nullptr, true, "JSONL corpus with instruction and response ids"},
           {"source_dump", Kind::InputPath, nullptr, true, "source distributions in pivot space"},
           {"pivot_dump", Kind::InputPath, nullptr, false, "pivot distributions (default: the initial model's)"},
           {"init", Kind::InputPath, nullptr, false, "initial checkpoint (default: random init from seed)"},
           {"lambda", Kind::Real, 0.9, false, "weight of the SFT loss"},
           {"learning_rate", Kind::Real, 0.5, false, "gradient descent step size"},
           {"epochs", Kind::Count, 100, false, "full-batch epochs"},
           {"seed", Kind::Count, 0, false, "initialization seed"},
           {"embed_dim", Kind::Count, 8, false, "embedding width for random init"},
           {"hidden_dim", Kind::Count, 16, false, "hidden width for random init"},
           {"model_id", Kind::Text, "target", false, "model id stored in the checkpoint"},
       }},
      {"merge",
       "merge target checkpoints into the pivot",
       {
           {"pivot", Kind::InputPath, nullptr, true, "pivot checkpoint"},
           {"targets", Kind::InputPaths, nullptr, true, "target checkpoints"},
           {"method", Kind::Text, "sce", false, "sce | sce-ce | sce-c | linear | ta | ties | dare"},
           {"tau", Kind::Real, kDefaultSceTau, false, "SCE selection percentage"},
           {"scale", Kind::Real, kDefaultTaskArithmeticScale, false, "task-arithmetic scale"},
           {"trim_rate", Kind::Real, kDefaultTiesTrimRate, false, "TIES trim rate"},
           {"drop_rate", Kind::Real, kDefaultDareDropRate, false, "DARE drop rate"},
           {"seed", Kind::Count, 0, false, "DARE seed"},
       }},
  };
  for (auto& spec : specs) {
    const auto common = common_keys();
    spec.keys.insert(spec.keys.end(), common.begin(), common.end());
  }
  return specs;
}

std::string flag_name(const std::string& key) {
  std::string name = "--" + key;
  std::replace(name.begin(), name.end(), '_', '-');
  return name;
}

void register_flags(CLI::App* app, const CommandSpec& spec, json& overlay) {
  for (const auto& k : spec.keys) {
    const std::string key = k.key;
    switch (k.kind) {
      case Kind::InputPath:
      case Kind::OutputDir:
      case Kind::Text:
        app->add_option_function<std::string>(
            flag_name(key), [&overlay, key](const std::string& v) { overlay[key] = v; }, k.help);
        break;
      case Kind::InputPaths:
        app->add_option_function<std::vector<std::string>>(
            flag_name(key), [&overlay, key](const std::vector<std::string>& v) { overlay[key] = v; }, k.help);
        break;
      case Kind::Real:
        app->add_option_function<double>(flag_name(key), [&overlay, key](double v) { overlay[key] = v; }, k.help);
        break;
      case Kind::Count:
        app->add_option_function<std::uint64_t>(
            flag_name(key), [&overlay, key](std::uint64_t v) { overlay[key] = v; }, k.help);
        break;
      case Kind::Flag:
        app->add_flag_function(
            flag_name(key), [&overlay, key](std::int64_t n) { overlay[key] = n > 0; }, k.help);
        break;
    }
  }
}

json read_config_file(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  const auto bytes = read_file_bytes(path);
  json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object: " + path);
  return j;
}

void check_kind(const KeySpec& k, const json& v) {
  const auto fail = [&](const std::string& what) { throw ConfigError("config key '" + k.key + "': " + what); };
  switch (k.kind) {
    case Kind::InputPath:
      if (!v.is_string()) fail("expected a path string");
      if (!fs::exists(v.get<std::string>())) fail("file not found: " + v.get<std::string>());
      break;
    case Kind::InputPaths:
      if (!v.is_array() || v.empty()) fail("expected a non-empty list of paths");
      for (const auto& p : v) {
        if (!p.is_string()) fail("expected a list of path strings");
        if (!fs::exists(p.get<std::string>())) fail("file not found: " + p.get<std::string>());
      }
      break;
    case Kind::OutputDir:
    case Kind::Text:
      if (!v.is_string()) fail("expected a string");
      break;
    case Kind::Real:
      if (!v.is_number() || !std::isfinite(v.get<double>())) fail("expected a finite number");
      break;
    case Kind::Count:
      if (!v.is_number_integer() || v.get<std::int64_t>() < 0) fail("expected a non-negative integer");
      break;
    case Kind::Flag:
      if (!v.is_boolean()) fail("expected true or false");
      break;
  }
}

void check_range(const json& cfg, const std::string& key, double lo, double hi, bool lo_open, bool hi_open) {
  if (!cfg.contains(key)) return;
  const double v = cfg[key].get<double>();
  const bool ok = (lo_open ? v > lo : v >= lo) && (hi_open ? v < hi : v <= hi);
  if (!ok) {
    std::ostringstream msg;
    msg << "config key '" << key << "': " << v << " outside " << (lo_open ? "(" : "[") << lo << ", " << hi
        << (hi_open ? ")" : "]");
    throw ConfigError(msg.str());
  }
}

json effective_config(const CommandSpec& spec, const std::string& config_path, const json& overlay) {
  json cfg = config_path.empty() ? json::object() : read_config_file(config_path);
  for (const auto& [key, value] : overlay.items()) cfg[key] = value;
  for (const auto& [key, value] : cfg.items()) {
    const bool known = std::any_of(spec.keys.begin(), spec.keys.end(), [&](const KeySpec& k) { return k.key == key; });
    if (!known) throw ConfigError("unknown config key '" + key + "' for command " + spec.name);
  }
  for (const auto& k : spec.keys) {
    if (!cfg.contains(k.key)) {
      if (k.required) throw ConfigError("missing required setting '" + k.key + "' (" + flag_name(k.key) + ")");
      if (k.fallback.is_null()) continue;
      cfg[k.key] = k.fallback;
    }
    check_kind(k, cfg[k.key]);
  }
  for (const char* key : {"workers", "max_span", "embed_dim", "hidden_dim"}) {
    if (cfg.contains(key) && cfg[key].get<std::uint64_t>() == 0) {
      throw ConfigError(std::string("config key '") + key + "' must be at least 1");
    }
  }
  check_range(cfg, "lambda", 0.0, 1.0, false, false);
  check_range(cfg, "learning_rate", 0.0, INFINITY, true, true);
  check_range(cfg, "tau", 0.0, 100.0, true, false);
  check_range(cfg, "trim_rate", 0.0, 1.0, false, true);
  check_range(cfg, "drop_rate", 0.0, 1.0, false, true);
  if (cfg.contains("strategy")) parse_strategy(cfg["strategy"].get<std::string>());
  if (cfg.contains("method")) {
    static const std::vector<std::string> methods = {"sce", "sce-ce", "sce-c", "linear", "ta", "ties", "dare"};
    const auto m = cfg["method"].get<std::string>();
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) {
      throw ConfigError("unknown merge method '" + m + "'");
    }
  }
  return cfg;
}

void prepare_output_dir(const fs::path& dir, bool overwrite) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw ConfigError("output path exists and is not a directory: " + dir.string());
    if (!fs::is_empty(dir) && !overwrite) {
      throw ConfigError("output directory is not empty (pass --overwrite to reuse it): " + dir.string());
    }
  }
  fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump() + "\n"); }

void echo_config(const fs::path& dir, json cfg) {
  for (const auto& key : kUnechoedKeys) cfg.erase(key);
  write_json(dir / "config.json", cfg);
}

struct CorpusRecord {
  std::vector<TokenId> instruction;
  std::vector<TokenId> response;
  std::vector<TokenId> source_response;
};

std::vector<TokenId> id_list(const json& record, const char* key, std::size_t line, bool required) {
  const auto it = record.find(key);
  if (it == record.end()) {
    if (required) throw DataError("corpus line " + std::to_string(line) + ": missing '" + key + "'");
    return {};
  }
  if (!it->is_array()) throw DataError("corpus line " + std::to_string(line) + ": '" + key + "' is not a list");
  std::vector<TokenId> ids;
  ids.reserve(it->size());
  for (const auto& v : *it) {
    if (!v.is_number_unsigned() || v.get<std::uint64_t>() > 0xFFFFFFFEULL) {
      throw DataError("corpus line " + std::to_string(line) + ": '" + key + "' holds an invalid token id");
    }
    ids.push_back(v.get<TokenId>());
  }
  return ids;
}

std::vector<CorpusRecord> read_corpus(const fs::path& path, bool need_source) {
  const auto bytes = read_file_bytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::vector<CorpusRecord> corpus;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json record = json::parse(line, nullptr, false);
    if (record.is_discarded() || !record.is_object()) {
      throw DataError("corpus line " + std::to_string(number) + ": not a JSON object");
    }
    CorpusRecord r;
    r.instruction = id_list(record, "instruction", number, false);
    r.response = id_list(record, "response", number, true);
    r.source_response = id_list(record, "source_response", number, need_source);
    corpus.push_back(std::move(r));
  }
  if (corpus.empty()) throw DataError("corpus is empty: " + path.string());
  return corpus;
}

void check_ids(std::span<const TokenId> ids, std::size_t vocab_size, const char* what) {
  for (TokenId id : ids) {
    if (id >= vocab_size) {
      throw DataError(std::string(what) + " token " + std::to_string(id) + " outside vocabulary of size " +
                      std::to_string(vocab_size));
    }
  }
}

/// Runs `body` for every instruction; per-instruction data errors are
/// collected and reported together with their indices.
void for_each_instruction(std::size_t n, std::size_t workers, const char* what,
                          const std::function<void(std::size_t)>& body) {
  std::vector<std::string> failures(n);
  parallel_for(n, workers, [&](std::size_t i) {
    try {
      body(i);
    } catch (const DataError& e) {
      failures[i] = e.what();
    }
  });
  std::vector<std::size_t> failed;
  for (std::size_t i = 0; i < n; ++i) {
    if (!failures[i].empty()) failed.push_back(i);
  }
  if (failed.empty()) return;
  std::ostringstream msg;
  msg << what << " failed for " << failed.size() << " instruction(s) [";
  for (std::size_t i = 0; i < failed.size(); ++i) msg << (i ? ", " : "") << failed[i];
  msg << "]; instruction " << failed.front() << ": " << failures[failed.front()];
  throw DataError(msg.str());
}

struct Run {
  const json& cfg;
  fs::path out_dir;
  std::size_t workers;
  std::ostream& out;
};

void cmd_align_stats(const Run& run) {
  const auto pivot_vocab = read_vocabulary(run.cfg["pivot_vocab"].get<std::string>());
  const auto source_vocab = read_vocabulary(run.cfg["source_vocab"].get<std::string>());
  const auto corpus = read_corpus(run.cfg["corpus"].get<std::string>(), true);
  AlignOptions options;
  options.max_span = run.cfg["max_span"].get<std::size_t>();

  std::vector<AlignedInstruction> aligned(corpus.size());
  for_each_instruction(corpus.size(), run.workers, "alignment", [&](std::size_t i) {
    const auto& r = corpus[i];
    check_ids(r.response, pivot_vocab.size(), "pivot");
    check_ids(r.source_response, source_vocab.size(), "source");
    aligned[i] = {align_sequences(r.response, r.source_response, pivot_vocab, source_vocab, options), r.response,
                  r.source_response};
  });

  const auto stats = accumulate_statistics(aligned, run.workers);
  write_statistics({pivot_vocab.size(), source_vocab.size(), stats}, run.out_dir / "mapping_stats.txt");

  const auto kinds = count_segment_kinds(aligned);
  const auto total = kinds.one_to_one + kinds.one_to_many + kinds.many_to_one;
  json summary = {{"instructions", corpus.size()},
                  {"segments",
                   {{"OneToOne", kinds.one_to_one},
                    {"OneToMany", kinds.one_to_many},
                    {"ManyToOne", kinds.many_to_one},
                    {"total", total}}},
                  {"mapping_entries", stats.counts().size()}};
  write_json(run.out_dir / "summary.json", summary);

  const auto pct = [total](std::uint64_t n) { return total ? 100.0 * static_cast<double>(n) / total : 0.0; };
  run.out << "instructions: " << corpus.size() << "\n"
          << "segments: " << total << "\n"
          << "  OneToOne:  " << kinds.one_to_one << " (" << pct(kinds.one_to_one) << "%)\n"
          << "  OneToMany: " << kinds.one_to_many << " (" << pct(kinds.one_to_many) << "%)\n"
          << "  ManyToOne: " << kinds.many_to_one << " (" << pct(kinds.many_to_one) << "%)\n";
}

void cmd_project(const Run& run) {
  const auto pivot_vocab = read_vocabulary(run.cfg["pivot_vocab"].get<std::string>());
  const auto source_vocab = read_vocabulary(run.cfg["source_vocab"].get<std::string>());
  const auto corpus = read_corpus(run.cfg["corpus"].get<std::string>(), true);
  const auto dump = read_dump(run.cfg["dump"].get<std::string>());
  const auto strategy = parse_strategy(run.cfg["strategy"].get<std::string>());
  AlignOptions options;
  options.max_span = run.cfg["max_span"].get<std::size_t>();

  std::optional<StatisticsFile> stats;
  if (strategy == Strategy::Statistics) {
    if (!run.cfg.contains("stats")) throw ConfigError("strategy MS requires --stats");
    stats = read_statistics(run.cfg["stats"].get<std::string>());
    if (stats->pivot_vocab_size != pivot_vocab.size() || stats->source_vocab_size != source_vocab.size()) {
      throw DataError("statistics file vocabulary sizes do not match the given vocabularies");
    }
  } else if (run.cfg.contains("stats")) {
    throw ConfigError(std::string("strategy ") + to_string(strategy) + " does not use mapping statistics");
  }
  if (dump.vocab_size != source_vocab.size()) {
    throw DataError("dump vocabulary size " + std::to_string(dump.vocab_size) + " does not match source vocabulary (" +
                    std::to_string(source_vocab.size()) + ")");
  }
  if (dump.instructions.size() != corpus.size()) {
    throw DataError("dump holds " + std::to_string(dump.instructions.size()) + " instructions, corpus holds " +
                    std::to_string(corpus.size()));
  }

  const auto table = build_projection_table(strategy, pivot_vocab, source_vocab, stats ? &stats->stats : nullptr,
                                            run.workers);
  DistributionDump projected{dump.model_id, pivot_vocab.size(), dump.k, {}};
  projected.instructions.resize(corpus.size());
  std::vector<ProjectionReport> reports(corpus.size());
  for_each_instruction(corpus.size(), run.workers, "projection", [&](std::size_t i) {
    const auto& r = corpus[i];
    check_ids(r.response, pivot_vocab.size(), "pivot");
    check_ids(r.source_response, source_vocab.size(), "source");
    const auto map = align_sequences(r.response, r.source_response, pivot_vocab, source_vocab, options);
    projected.instructions[i] =
        project_distribution(dump.instructions[i], map, r.response, r.source_response, table, &reports[i]);
  });
  write_dump(projected, run.out_dir / "projected.dump");

  double unmatched = 0.0;
  std::size_t rows = 0;
  for (const auto& r : reports) {
    unmatched += r.unmatched_mass;
    rows += r.rows;
  }
  json report = {{"strategy", to_string(strategy)},
                 {"instructions", corpus.size()},
                 {"rows", rows},
                 {"unmatched_mass", unmatched},
                 {"unk_bucket", table.unk_bucket ? json(*table.unk_bucket) : json(nullptr)}};
  write_json(run.out_dir / "projection_report.json", report);
  run.out << "strategy: " << to_string(strategy) << "\n"
          << "instructions: " << corpus.size() << ", rows: " << rows << "\n"
          << "unmatched mass: " << unmatched << " (" << (table.unk_bucket ? "routed to unknown bucket" : "renormalized")
          << ")\n";
}

void cmd_fuse_train(const Run& run) {
  const auto corpus = read_corpus(run.cfg["corpus"].get<std::string>(), false);
  std::vector<SupervisedExample> dataset;
  dataset.reserve(corpus.size());
  for (const auto& r : corpus) dataset.push_back({r.instruction, r.response});

  const auto source_dump = read_dump(run.cfg["source_dump"].get<std::string>());
  ToyLM<double> init;
  if (run.cfg.contains("init")) {
    init = toy_lm_from_tensor_map(read_checkpoint(run.cfg["init"].get<std::string>()));
    if (static_cast<std::size_t>(init.vocab_size()) != source_dump.vocab_size) {
      throw DataError("initial checkpoint vocabulary does not match the source dump");
    }
  } else {
    init = init_toy_lm<double>(static_cast<Eigen::Index>(source_dump.vocab_size),
                               run.cfg["embed_dim"].get<Eigen::Index>(), run.cfg["hidden_dim"].get<Eigen::Index>(),
                               run.cfg["seed"].get<std::uint64_t>());
  }
  const auto pivot_dump = run.cfg.contains("pivot_dump") ? read_dump(run.cfg["pivot_dump"].get<std::string>())
                                                         : predict_dump(init, dataset, source_dump.k, "pivot");

  TrainConfig config;
  config.lambda = run.cfg["lambda"].get<double>();
  config.learning_rate = run.cfg["learning_rate"].get<double>();
  config.epochs = run.cfg["epochs"].get<std::size_t>();
  config.seed = run.cfg["seed"].get<std::uint64_t>();
  config.workers = run.workers;
  const auto result = train_pairwise_fusion(init, dataset, pivot_dump, source_dump, config);

  write_checkpoint(to_tensor_map(result.model, run.cfg["model_id"].get<std::string>()),
                   run.out_dir / "model.safetensors");
  write_text(run.out_dir / "loss_trace.jsonl", format_loss_trace(result.trace));

  json summary = {{"instructions", dataset.size()}, {"pivot_selected", result.pivot_selected},
                  {"epochs", result.trace.size()}};
  if (!result.trace.empty()) {
    const auto& last = result.trace.back();
    summary["final"] = {{"sft_loss", last.sft}, {"fusion_loss", last.fusion}, {"combined_loss", last.combined}};
  }
  write_json(run.out_dir / "train_summary.json", summary);
  run.out << "instructions: " << dataset.size() << " (MinCE kept the pivot for " << result.pivot_selected << ")\n";
  if (!result.trace.empty()) {
    run.out << "final combined loss: " << result.trace.back().combined << " after " << result.trace.size()
            << " epochs\n";
  }
}

TensorMap<double> single_tensor(const NamedTensorMap& map, const std::string& name) {
  TensorMap<double> out;
  out.metadata = map.metadata;
  const auto& t = map.tensors.at(name);
  out.tensors.emplace(name, Tensor<double>{t.shape, t.values.cast<double>()});
  return out;
}

MergeResult<double> merge_one(const std::string& method, const json& cfg, const TensorMap<double>& pivot,
                              std::span<const TensorMap<double>> targets) {
  if (method == "sce") return sce_merge(pivot, targets, cfg["tau"].get<double>(), SceVariant::Full);
  if (method == "sce-ce") return sce_merge(pivot, targets, cfg["tau"].get<double>(), SceVariant::NoSelect);
  if (method == "sce-c") return sce_merge(pivot, targets, cfg["tau"].get<double>(), SceVariant::CalculateOnly);
  if (method == "linear") return merge_linear(targets);
  if (method == "ta") return merge_task_arithmetic(pivot, targets, cfg["scale"].get<double>());
  if (method == "ties") return merge_ties(pivot, targets, cfg["trim_rate"].get<double>());
  if (method == "dare") return merge_dare(pivot, targets, cfg["drop_rate"].get<double>(), cfg["seed"].get<std::uint64_t>());
  throw ConfigError("unknown merge method '" + method + "'");
}

void cmd_merge(const Run& run) {
  const auto pivot = read_checkpoint(run.cfg["pivot"].get<std::string>());
  std::vector<NamedTensorMap> targets;
  for (const auto& p : run.cfg["targets"]) targets.push_back(read_checkpoint(p.get<std::string>()));
  std::vector<NamedTensorMap> all = targets;
  all.insert(all.begin(), pivot);
  validate_same_geometry(all);

  const auto method = run.cfg["method"].get<std::string>();
  std::vector<std::string> names;
  for (const auto& [name, t] : pivot.tensors) names.push_back(name);

  std::vector<MergeResult<double>> parts(names.size());
  parallel_for(names.size(), run.workers, [&](std::size_t i) {
    std::vector<TensorMap<double>> ts;
    for (const auto& t : targets) ts.push_back(single_tensor(t, names[i]));
    parts[i] = merge_one(method, run.cfg, single_tensor(pivot, names[i]), ts);
  });

  NamedTensorMap merged;
  MergeReport report;
  if (parts.empty()) {
    const std::vector<TensorMap<double>> none(targets.size());
    auto empty = merge_one(method, run.cfg, TensorMap<double>{{}, pivot.metadata}, none);
    merged.metadata = empty.merged.metadata;
    report = empty.report;
  } else {
    merged.metadata = parts.front().merged.metadata;
    report = parts.front().report;
    report.matrices.clear();
  }
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto& t = parts[i].merged.tensors.at(names[i]);
    merged.tensors.emplace(names[i], Tensor<float>{t.shape, t.values.cast<float>()});
    report.matrices[names[i]] = parts[i].report.matrices.at(names[i]);
  }
  write_checkpoint(merged, run.out_dir / "merged.safetensors");
  write_text(run.out_dir / "merge_report.json", format_merge_report(report) + "\n");

  run.out << "method: " << report.method << ", targets: " << report.targets << "\n";
  for (const auto& [name, m] : report.matrices) {
    run.out << "  " << name << ": selected " << m.selected << "/" << m.numel << ", erased " << m.erased
            << ", dropped " << m.dropped << ", eta [";
    for (std::size_t j = 0; j < m.eta.size(); ++j) run.out << (j ? ", " : "") << m.eta[j];
    run.out << "]\n";
  }
}

std::string first_line_format(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty() || bytes.front() != '{') return {};
  const auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t{'\n'});
  const json header = json::parse(bytes.begin(), nl, nullptr, false);
  if (header.is_discarded() || !header.is_object()) return {};
  const auto it = header.find("format");
  return it != header.end() && it->is_string() ? it->get<std::string>() : std::string{};
}

void inspect_checkpoint(const std::vector<std::uint8_t>& bytes, std::ostream& out) {
  const auto map = parse_checkpoint(bytes);
  std::size_t params = 0;
  for (const auto& [name, t] : map.tensors) params += t.numel();
  out << "checkpoint: " << map.tensors.size() << " tensors, " << params << " parameters\n";
  for (const auto& [key, value] : map.metadata) out << "  meta " << key << " = " << value << "\n";
  for (const auto& [name, t] : map.tensors) {
    out << "  " << name << "  " << format_shape(t.shape) << "  " << t.numel() << "\n";
  }
}

void inspect_dump(const std::vector<std::uint8_t>& bytes, std::ostream& out) {
  const auto dump = parse_dump(bytes);
  std::size_t rows = 0;
  std::size_t lo = dump.instructions.empty() ? 0 : SIZE_MAX;
  std::size_t hi = 0;
  for (const auto& m : dump.instructions) {
    rows += m.rows.size();
    lo = std::min(lo, m.rows.size());
    hi = std::max(hi, m.rows.size());
  }
  out << "dump: model_id " << dump.model_id << ", vocab_size " << dump.vocab_size << ", k " << dump.k << "\n"
      << "  instructions (M): " << dump.instructions.size() << "\n"
      << "  positions (N): total " << rows << ", min " << lo << ", max " << hi << "\n";
}

void inspect_statistics(const std::vector<std::uint8_t>& bytes, std::ostream& out) {
  const auto file = parse_statistics(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  const auto& counts = file.stats.counts();
  std::size_t entries = 0;
  for (const auto& [p, row] : counts) entries += row.size();
  out << "statistics: pivot vocab " << file.pivot_vocab_size << ", source vocab " << file.source_vocab_size
      << ", pivot tokens " << counts.size() << ", entries " << entries << "\n";
  for (const auto& [p, row] : counts) {
    std::vector<std::pair<std::uint64_t, TokenId>> ranked;
    for (const auto& [s, n] : row) ranked.emplace_back(n, s);
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    out << "  " << p << " (total " << file.stats.total(p) << "):";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, ranked.size()); ++i) {
      out << " " << ranked[i].second << "x" << ranked[i].first;
    }
    out << "\n";
  }
}

void inspect_vocabulary(const std::vector<std::uint8_t>& bytes, std::ostream& out) {
  const auto vocab = parse_vocabulary(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  out << "vocabulary: " << vocab.size() << " tokens, space marker \"" << vocab.space_marker() << "\", unk "
      << (vocab.unk_id() ? std::to_string(*vocab.unk_id()) : std::string("none")) << ", special ids "
      << vocab.special_ids().size() << "\n";
}

void cmd_inspect(const std::string& path, std::ostream& out) {
  if (!fs::exists(path)) throw ConfigError("file not found: " + path);
  const auto bytes = read_file_bytes(path);
  const auto format = first_line_format(bytes);
  if (format == "fusekit-vocab") {
    inspect_vocabulary(bytes, out);
  } else if (format == "fusekit-dump") {
    inspect_dump(bytes, out);
  } else if (format == "fusekit-stats") {
    inspect_statistics(bytes, out);
  } else {
    inspect_checkpoint(bytes, out);
  }
}

void write_error(std::ostream& err, const std::string& type, const std::string& command, const std::string& message) {
  json record = {{"error", type}, {"message", message}};
  if (!command.empty()) record["command"] = command;
  err << record.dump() << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"fusekit: cross-tokenizer distillation and model merging toolkit", "fusekit"};
  app.require_subcommand(1);

  const auto specs = command_specs();
  std::map<std::string, json> overlays;
  std::map<std::string, std::string> config_paths;
  std::vector<std::pair<CLI::App*, const CommandSpec*>> subs;
  for (const auto& spec : specs) {
    auto* sub = app.add_subcommand(spec.name, spec.help);
    overlays[spec.name] = json::object();
    sub->add_option("--config", config_paths[spec.name], "JSON config file; flags override its keys");
    register_flags(sub, spec, overlays[spec.name]);
    subs.emplace_back(sub, &spec);
  }
  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "summarize and validate any fusekit artifact");
  inspect->add_option("path", inspect_path, "checkpoint, dump, statistics or vocabulary file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    write_error(err, "ConfigError", "", e.what());
    return kExitConfig;
  }

  std::string command;
  try {
    if (inspect->parsed()) {
      command = "inspect";
      cmd_inspect(inspect_path, out);
      return kExitOk;
    }
    for (const auto& [sub, spec] : subs) {
      if (!sub->parsed()) continue;
      command = spec->name;
      const json cfg = effective_config(*spec, config_paths[spec->name], overlays[spec->name]);
      const fs::path out_dir = cfg["out"].get<std::string>();
      prepare_output_dir(out_dir, cfg["overwrite"].get<bool>());
      const Run run{cfg, out_dir, cfg["workers"].get<std::size_t>(), out};
      if (command == "align-stats") cmd_align_stats(run);
      if (command == "project") cmd_project(run);
      if (command == "fuse-train") cmd_fuse_train(run);
      if (command == "merge") cmd_merge(run);
      echo_config(out_dir, cfg);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    write_error(err, "ConfigError", command, e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    write_error(err, "DataError", command, e.what());
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    write_error(err, "DataError", command, e.what());
    return kExitData;
  } catch (const std::exception& e) {
    write_error(err, "InternalError", command, e.what());
    return 1;
  }
  return kExitConfig;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("fusekit");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace fusekit
