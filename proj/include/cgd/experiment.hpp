#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cgd/dataio.hpp"
#include "cgd/descriptor.hpp"
#include "cgd/errors.hpp"
#include "cgd/io.hpp"
#include "cgd/loss.hpp"
#include "cgd/retrieval.hpp"
#include "cgd/trainer.hpp"
#include "json.hpp"

namespace cgd {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// INI helpers

namespace ini {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) throw ConfigError(key + ": '" + v + "' is not a number");
  return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
  }
  return out;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

inline std::vector<std::size_t> to_uint_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_uint(key, trim(item)));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

inline std::string format_double(double v) {
  char buf[40];
  auto end = std::to_chars(buf, buf + sizeof buf, v).ptr;  // shortest form that round-trips
  return std::string(buf, end);
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace ini

// ---------------------------------------------------------------------------
// Experiment configuration

/// Everything a run needs. Defaults are tuned for the synthetic desk-scale corpus.
struct ExperimentConfig {
  std::string descriptor = "SM";
  std::size_t embedding_dim = 24;
  Architecture architecture = Architecture::cgd;
  CombineMethod combine = CombineMethod::concat;
  BackboneConfig backbone;
  TrainOptions options = default_options();
  std::string manifest;
  std::string out_dir;

  static TrainOptions default_options() {
    TrainOptions o;
    o.train.lr = 1e-2;
    return o;
  }

  /// Applies one `section.key = value` setting.
  void set(const std::string& key, const std::string& raw) {
    const std::string v = ini::trim(raw);
    auto& t = options.train;
    if (key == "descriptor" || key == "model.descriptor") descriptor = v;
    else if (key == "model.embedding_dim") embedding_dim = ini::to_uint(key, v);
    else if (key == "model.architecture") architecture = parse_architecture(v);
    else if (key == "model.combine") combine = parse_combine_method(v);
    else if (key == "backbone.channels") backbone.stage_channels = ini::to_uint_list(key, v);
    else if (key == "backbone.strides") backbone.stage_strides = ini::to_uint_list(key, v);
    else if (key == "backbone.remove_last_downsample") backbone.remove_last_downsample = ini::to_bool(key, v);
    else if (key == "backbone.input_size") backbone.input_size = ini::to_uint(key, v);
    else if (key == "train.epochs") t.epochs = ini::to_uint(key, v);
    else if (key == "train.batch_p") t.batch_p = ini::to_uint(key, v);
    else if (key == "train.batch_k") t.batch_k = ini::to_uint(key, v);
    else if (key == "train.lr") t.lr = ini::to_double(key, v);
    else if (key == "train.decay_factor") t.decay_factor = ini::to_double(key, v);
    else if (key == "train.decay_every") t.decay_every = ini::to_uint(key, v);
    else if (key == "train.seed") t.seed = ini::to_uint(key, v);
    else if (key == "loss.margin") options.triplet.margin = ini::to_double(key, v);
    else if (key == "loss.variant") options.triplet.variant = parse_triplet_variant(v);
    else if (key == "loss.temperature") options.softmax.temperature = ini::to_double(key, v);
    else if (key == "loss.label_smoothing") options.softmax.label_smoothing = ini::to_double(key, v);
    else if (key == "loss.rank_weight") options.rank_weight = ini::to_double(key, v);
    else if (key == "loss.cls_weight") options.cls_weight = ini::to_double(key, v);
    else if (key == "data.manifest") manifest = v;
    else if (key == "out.dir") out_dir = v;
    else throw ConfigError("unknown config key '" + key + "'");
  }

  /// Parses `key=value`, as given to --set.
  void set_assignment(const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    set(ini::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  /// Cross-field checks; throws ConfigError before any work starts.
  void validate() const {
    if (!is_valid_configuration(descriptor)) {
      throw ConfigError("descriptor '" + descriptor + "' is not one of the twelve configurations");
    }
    auto desc = descriptor_config();
    if (embedding_dim < desc.size()) throw ConfigError("model.embedding_dim smaller than the branch count");
    if (combine == CombineMethod::sum && architecture != Architecture::cgd) {
      throw ConfigError("model.combine = sum requires model.architecture = cgd");
    }
    backbone.validate();
    if (backbone.output_extent() == 0) throw ConfigError("backbone reduces the input to nothing");
    options.train.validate();
    options.triplet.validate();
    options.softmax.validate();
    if (!(options.rank_weight > 0.0)) throw ConfigError("loss.rank_weight must be > 0");
    if (!(options.cls_weight >= 0.0)) throw ConfigError("loss.cls_weight must be >= 0");
  }

  DescriptorConfig descriptor_config() const { return DescriptorConfig::parse(descriptor, embedding_dim); }

  ModelConfig model_config(std::size_t num_classes) const {
    return ModelConfig{descriptor_config(), backbone, architecture, combine, num_classes};
  }

  /// Snapshot text; parse(to_ini()) reproduces the config exactly.
  std::string to_ini() const {
    const auto& t = options.train;
    std::ostringstream os;
    os << "descriptor = " << descriptor << "\n"
       << "model.embedding_dim = " << embedding_dim << "\n"
       << "model.architecture = " << to_string(architecture) << "\n"
       << "model.combine = " << to_string(combine) << "\n"
       << "backbone.channels = " << ini::join(backbone.stage_channels) << "\n"
       << "backbone.strides = " << ini::join(backbone.stage_strides) << "\n"
       << "backbone.remove_last_downsample = " << (backbone.remove_last_downsample ? "true" : "false") << "\n"
       << "backbone.input_size = " << backbone.input_size << "\n"
       << "train.epochs = " << t.epochs << "\n"
       << "train.batch_p = " << t.batch_p << "\n"
       << "train.batch_k = " << t.batch_k << "\n"
       << "train.lr = " << ini::format_double(t.lr) << "\n"
       << "train.decay_factor = " << ini::format_double(t.decay_factor) << "\n"
       << "train.decay_every = " << t.decay_every << "\n"
       << "train.seed = " << t.seed << "\n"
       << "loss.margin = " << ini::format_double(options.triplet.margin) << "\n"
       << "loss.variant = " << to_string(options.triplet.variant) << "\n"
       << "loss.temperature = " << ini::format_double(options.softmax.temperature) << "\n"
       << "loss.label_smoothing = " << ini::format_double(options.softmax.label_smoothing) << "\n"
       << "loss.rank_weight = " << ini::format_double(options.rank_weight) << "\n"
       << "loss.cls_weight = " << ini::format_double(options.cls_weight) << "\n";
    if (!manifest.empty()) os << "data.manifest = " << manifest << "\n";
    if (!out_dir.empty()) os << "out.dir = " << out_dir << "\n";
    return os.str();
  }

  /// Lines are `section.key = value`; `#`/`;` start comments; `[section]` prefixes later bare keys.
  static ExperimentConfig parse(const std::string& text, const std::string& origin = "config") {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      auto hash = line.find_first_of("#;");
      if (hash != std::string::npos) line.erase(hash);
      line = ini::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(origin + ":" + std::to_string(lineno) + ": malformed section header");
        section = ini::trim(line.substr(1, line.size() - 2));
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = ini::trim(line.substr(0, eq));
      if (!section.empty() && key.find('.') == std::string::npos) key = section + "." + key;
      try {
        cfg.set(key, line.substr(eq + 1));
      } catch (const ConfigError& e) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    return cfg;
  }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }
};

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  LabeledImages train;
  LabeledImages test;
  std::size_t num_classes = 0;
};

inline Dataset load_dataset(const std::string& manifest_path) {
  auto m = read_manifest(manifest_path);
  Dataset d{load_split(m, Split::train), load_split(m, Split::test), m.num_classes()};
  if (d.train.size() == 0) throw DataError(manifest_path + ": no train rows");
  if (d.test.size() == 0) throw DataError(manifest_path + ": no test rows");
  return d;
}

inline Dataset synthetic_dataset(const SyntheticSpec& spec) {
  auto [train, test] = synthetic_in_memory(spec);
  return Dataset{std::move(train), std::move(test), spec.num_classes};
}

/// Data-dependent checks that config validation alone cannot make.
inline void check_compatible(const ExperimentConfig& cfg, const Dataset& data) {
  std::map<Label, std::size_t> counts;
  for (auto l : data.train.labels) ++counts[l];
  std::size_t eligible = 0;
  for (const auto& [l, n] : counts) eligible += n >= 2 ? 1 : 0;
  if (eligible < cfg.options.train.batch_p) {
    throw DataError("train split has " + std::to_string(eligible) + " classes with two or more images; train.batch_p = " +
                    std::to_string(cfg.options.train.batch_p));
  }
  for (const auto& im : data.train.images) {
    if (im.dim(1) == 0 || im.dim(2) == 0) throw DataError("empty image in train split");
  }
  if (data.num_classes < 2) throw DataError("at least two classes are required");
}

// ---------------------------------------------------------------------------
// Single run

inline const std::vector<std::size_t> kDefaultKList{1, 2, 4, 8};

struct RunSummary {
  TrainResult train;
  RecallReport final_report;  // last-epoch parameters on the test split
  RecallReport best_report;   // best-validation checkpoint on the test split
  NamedTensors final_state;
};

/**
 * Trains one configuration and evaluates it on the test split, which also serves
 * as validation. With out_dir set, writes config.ini, metrics.tsv, best.ckpt,
 * last.ckpt, report.json and (type A) branch_losses.tsv.
 */
inline RunSummary run_experiment(const ExperimentConfig& cfg, const Dataset& data,
                                 const std::optional<fs::path>& out_dir = std::nullopt) {
  cfg.validate();
  check_compatible(cfg, data);
  CgdModel model(cfg.model_config(data.num_classes), cfg.options.train.seed);

  std::ofstream metrics, branch_log;
  if (out_dir) {
    fs::create_directories(*out_dir);
    std::ofstream(*out_dir / "config.ini") << cfg.to_ini();
    metrics.open(*out_dir / "metrics.tsv");
    metrics << kMetricsHeader << "\n";
    if (cfg.architecture == Architecture::type_a) {
      branch_log.open(*out_dir / "branch_losses.tsv");
      branch_log << "epoch";
      for (char c : cfg.descriptor) branch_log << "\trank_loss_" << c;
      branch_log << "\n";
    }
  }
  auto on_epoch = [&](const EpochMetrics& m) {
    if (metrics.is_open()) metrics << format_metrics_line(m) << "\n" << std::flush;
    if (branch_log.is_open()) {
      branch_log << m.epoch;
      for (double v : m.branch_rank_losses) branch_log << "\t" << ini::format_double(v);
      branch_log << "\n";
    }
  };

  RunSummary s;
  s.train = train(model, data.train, data.test, cfg.options, on_epoch);
  s.final_state = model.state();
  auto final_emb = embed_dataset(model, data.test);
  s.final_report = evaluate_recall(final_emb, final_emb, kDefaultKList, true);
  model.load_state(s.train.best_state);
  auto best_emb = embed_dataset(model, data.test);
  s.best_report = evaluate_recall(best_emb, best_emb, kDefaultKList, true);

  if (out_dir) {
    save_checkpoint((*out_dir / "best.ckpt").string(), s.train.best_state);
    save_checkpoint((*out_dir / "last.ckpt").string(), s.final_state);
    nlohmann::json j;
    j["best_epoch"] = s.train.best_epoch;
    j["best"] = to_json(s.best_report);
    j["last"] = to_json(s.final_report);
    j["aborted"] = s.train.aborted;
    if (s.train.aborted) j["abort_reason"] = s.train.abort_reason;
    std::ofstream(*out_dir / "report.json") << j.dump(2) << "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Multi-seed experiments

inline const std::vector<std::uint64_t> kDefaultSeeds{1, 2, 3, 4, 5};

/// Median; the mean of the middle pair for even counts.
inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per-seed test recall of the last-epoch parameters.
struct SeedRuns {
  std::vector<std::uint64_t> seeds;
  std::vector<std::map<std::size_t, double>> recall;  // per seed, K -> Recall@K
  std::vector<double> best_recall_at_1;               // validation-selected checkpoint
  bool any_aborted = false;

  double median_at(std::size_t k) const {
    std::vector<double> v;
    for (const auto& r : recall) v.push_back(r.at(k));
    return median(v);
  }
  std::vector<double> values_at(std::size_t k) const {
    std::vector<double> v;
    for (const auto& r : recall) v.push_back(r.at(k));
    return v;
  }
};

/// Runs one config over several seeds; identical effective configs are served from the cache.
class RunCache {
 public:
  explicit RunCache(const Dataset& data) : data_(data) {}

  const SeedRuns& run(ExperimentConfig cfg, const std::vector<std::uint64_t>& seeds,
                      const std::function<void(const std::string&)>& progress = {}) {
    cfg.manifest.clear();
    cfg.out_dir.clear();
    cfg.options.train.seed = 0;
    auto canonical = cfg;
    if (!canonical.options.uses_classifier()) canonical.options.softmax = {};
    std::string key = canonical.to_ini();
    for (auto s : seeds) key += "#" + std::to_string(s);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    SeedRuns out;
    for (auto seed : seeds) {
      cfg.options.train.seed = seed;
      auto s = run_experiment(cfg, data_);
      out.seeds.push_back(seed);
      out.recall.push_back(s.final_report.recall_at_k);
      out.best_recall_at_1.push_back(s.train.best_recall);
      out.any_aborted = out.any_aborted || s.train.aborted;
      ++runs_;
      if (progress) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s %s seed %llu: R@1 %.4f", cfg.descriptor.c_str(), to_string(cfg.architecture).c_str(),
                      static_cast<unsigned long long>(seed), s.final_report.at(1));
        progress(buf);
      }
    }
    return cache_.emplace(key, std::move(out)).first->second;
  }

  std::size_t runs() const { return runs_; }

 private:
  const Dataset& data_;
  std::map<std::string, SeedRuns> cache_;
  std::size_t runs_ = 0;
};

// ---------------------------------------------------------------------------
// Sweep

struct SweepRow {
  std::string config;
  SeedRuns runs;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::optional<std::string> recommended;  // needs S, M and G in the list

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row;
      row["config"] = r.config;
      row["seeds"] = r.runs.seeds;
      for (auto k : kDefaultKList) {
        row["median_recall_at_" + std::to_string(k)] = r.runs.median_at(k);
        row["recall_at_" + std::to_string(k)] = r.runs.values_at(k);
      }
      j["rows"].push_back(std::move(row));
    }
    j["recommended"] = recommended ? nlohmann::json(*recommended) : nlohmann::json(nullptr);
    return j;
  }

  std::string to_table() const {
    std::ostringstream os;
    os << "config\tmedian_R@1\tmedian_R@2\tmedian_R@4\tmedian_R@8\tper_seed_R@1\n";
    for (const auto& r : rows) {
      os << r.config;
      char buf[32];
      for (auto k : kDefaultKList) {
        std::snprintf(buf, sizeof buf, "\t%.4f", r.runs.median_at(k));
        os << buf;
      }
      os << "\t";
      auto v = r.runs.values_at(1);
      for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%s%.4f", i ? "," : "", v[i]);
        os << buf;
      }
      os << "\n";
    }
    if (recommended) os << "recommended\t" << *recommended << "\n";
    return os.str();
  }
};

inline std::vector<std::string> parse_config_list(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = ini::trim(item);
    if (!is_valid_configuration(item)) throw ConfigError("'" + item + "' is not one of the twelve configurations");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty configuration list");
  return out;
}

inline std::vector<std::string> all_configurations() { return {kConfigurations.begin(), kConfigurations.end()}; }

/// Every config string is checked before the first run starts.
inline SweepReport run_sweep(const ExperimentConfig& base, const std::vector<std::string>& configs,
                             const std::vector<std::uint64_t>& seeds, RunCache& cache,
                             const std::function<void(const std::string&)>& progress = {}) {
  for (const auto& c : configs) {
    if (!is_valid_configuration(c)) throw ConfigError("'" + c + "' is not one of the twelve configurations");
    auto probe = base;
    probe.descriptor = c;
    probe.validate();
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  SweepReport rep;
  std::map<PoolKind, double> singles;
  for (const auto& c : configs) {
    auto cfg = base;
    cfg.descriptor = c;
    SweepRow row{c, cache.run(cfg, seeds, progress)};
    if (c.size() == 1) singles[DescriptorKind::from_letter(c[0]).tag] = row.runs.median_at(1);
    rep.rows.push_back(std::move(row));
  }
  if (singles.size() == 3) rep.recommended = select_best_config(singles, base.embedding_dim).name();
  return rep;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationArm {
  std::string table;  // rank_vs_joint | tricks | architecture | combination
  std::string name;
  ExperimentConfig config;
};

/// {rank-only, joint} x {none, LS, TS, both}, {A, B, CGD}, {sum, concat}.
inline std::vector<AblationArm> ablation_arms(const ExperimentConfig& base, double label_smoothing = 0.1,
                                              double temperature = 0.5) {
  std::vector<AblationArm> arms;
  auto with_tricks = [&](ExperimentConfig c, bool ls, bool ts) {
    c.options.softmax.label_smoothing = ls ? label_smoothing : 0.0;
    c.options.softmax.temperature = ts ? temperature : 1.0;
    return c;
  };
  auto both = with_tricks(base, true, true);
  both.architecture = Architecture::cgd;
  both.combine = CombineMethod::concat;
  both.options.cls_weight = base.options.cls_weight > 0.0 ? base.options.cls_weight : 1.0;

  const std::pair<const char*, std::pair<bool, bool>> tricks[] = {
      {"none", {false, false}}, {"LS", {true, false}}, {"TS", {false, true}}, {"both", {true, true}}};
  for (const char* loss : {"rank-only", "joint"}) {
    for (const auto& [tname, flags] : tricks) {
      auto c = with_tricks(both, flags.first, flags.second);
      if (std::string(loss) == "rank-only") c.options.cls_weight = 0.0;
      arms.push_back({"loss_and_tricks", std::string(loss) + "/" + tname, c});
    }
  }
  for (auto [name, arch] : {std::pair{"A", Architecture::type_a}, std::pair{"B", Architecture::type_b},
                            std::pair{"CGD", Architecture::cgd}}) {
    auto c = both;
    c.architecture = arch;
    arms.push_back({"architecture", name, c});
  }
  for (auto [name, method] : {std::pair{"sum", CombineMethod::sum}, std::pair{"concat", CombineMethod::concat}}) {
    auto c = both;
    c.combine = method;
    arms.push_back({"combination", name, c});
  }
  return arms;
}

struct AblationRow {
  AblationArm arm;
  SeedRuns runs;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  const AblationRow& find(const std::string& table, const std::string& name) const {
    for (const auto& r : rows)
      if (r.arm.table == table && r.arm.name == name) return r;
    throw std::out_of_range("no ablation arm " + table + "/" + name);
  }

  std::string to_table() const {
    std::ostringstream os;
    os << "table\tarm\tmedian_R@1\tper_seed_R@1\n";
    char buf[32];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%.4f", r.runs.median_at(1));
      os << r.arm.table << "\t" << r.arm.name << "\t" << buf << "\t";
      auto v = r.runs.values_at(1);
      for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%s%.4f", i ? "," : "", v[i]);
        os << buf;
      }
      os << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      j.push_back({{"table", r.arm.table},
                   {"arm", r.arm.name},
                   {"seeds", r.runs.seeds},
                   {"median_recall_at_1", r.runs.median_at(1)},
                   {"recall_at_1", r.runs.values_at(1)}});
    }
    return j;
  }
};

inline AblationReport run_ablation(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds, RunCache& cache,
                                   const std::function<void(const std::string&)>& progress = {}) {
  auto arms = ablation_arms(base);
  for (const auto& a : arms) a.config.validate();
  if (seeds.empty()) throw ConfigError("empty seed list");
  AblationReport rep;
  for (auto& a : arms) {
    const auto& runs = cache.run(a.config, seeds, progress);
    rep.rows.push_back({std::move(a), runs});
  }
  return rep;
}

}  // namespace cgd
