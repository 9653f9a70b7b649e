// cgd: synthetic data, training, embedding, retrieval evaluation, sweeps and ablations.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cgd/experiment.hpp"

namespace fs = std::filesystem;
using namespace cgd;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfigError = 2, kDataError = 3, kNumericError = 4 };

struct ConfigFlags {
  std::string config_file;
  std::string manifest;
  std::string descriptor;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "INI experiment config (section.key = value)")->check(CLI::ExistingFile);
    cmd->add_option("--data", manifest, "manifest CSV (path,label,split)");
    cmd->add_option("--descriptor", descriptor, "descriptor configuration, e.g. SM");
    cmd->add_option("--seed", seed, "training seed");
    cmd->add_option("--set", overrides, "override a config key: section.key=value (repeatable)");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = config_file.empty() ? ExperimentConfig{} : ExperimentConfig::load(config_file);
    for (const auto& o : overrides) cfg.set_assignment(o);
    if (!descriptor.empty()) cfg.descriptor = descriptor;
    if (seed) cfg.options.train.seed = *seed;
    if (!manifest.empty()) cfg.manifest = manifest;
    if (cfg.manifest.empty()) throw ConfigError("no manifest given (--data or data.manifest)");
    cfg.manifest = fs::absolute(cfg.manifest).lexically_normal().string();
    cfg.validate();
    return cfg;
  }
};

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  for (auto v : ini::to_uint_list("--seeds", csv)) out.push_back(v);
  return out;
}

std::vector<std::size_t> parse_k_list(const std::string& csv) {
  auto ks = ini::to_uint_list("--k", csv);
  for (auto k : ks)
    if (k == 0) throw ConfigError("--k: K must be positive");
  return ks;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void progress_line(const std::string& s) { std::cerr << s << "\n"; }

int cmd_gen_data(const SyntheticSpec& spec, const std::string& out) {
  spec.validate();
  auto m = generate_synthetic(spec, out);
  std::printf("wrote %zu images (%zu classes) and %s\n", m.rows.size(), m.num_classes(),
              (fs::path(out) / "manifest.csv").string().c_str());
  return kOk;
}

int cmd_train(const ConfigFlags& flags, const std::string& out) {
  auto cfg = flags.resolve();
  if (!out.empty()) cfg.out_dir = out;
  if (cfg.out_dir.empty()) throw ConfigError("no output directory given (--out or out.dir)");
  auto data = load_dataset(cfg.manifest);
  check_compatible(cfg, data);
  auto run = run_experiment(cfg, data, fs::path(cfg.out_dir));
  if (run.train.aborted) {
    std::fprintf(stderr, "training aborted: %s (best checkpoint from epoch %zu kept)\n", run.train.abort_reason.c_str(),
                 run.train.best_epoch);
    return kNumericError;
  }
  std::printf("best epoch %zu, validation Recall@1 %.4f; last epoch test Recall@1 %.4f\n", run.train.best_epoch,
              run.train.best_recall, run.final_report.at(1));
  return kOk;
}

int cmd_embed(const ConfigFlags& flags, const std::string& checkpoint, const std::string& split, const std::string& out) {
  auto cfg = flags.resolve();
  std::optional<Split> which;
  if (split != "all") which = parse_split(split);
  auto state = load_checkpoint(checkpoint);
  auto manifest = read_manifest(cfg.manifest);
  LabeledImages data;
  for (std::size_t i = 0; i < manifest.rows.size(); ++i) {
    const auto& r = manifest.rows[i];
    if (which && r.split != *which) continue;
    data.images.push_back(load_image(manifest.resolve(r).string()));
    data.labels.push_back(r.label);
    data.ids.push_back(i);
  }
  if (data.size() == 0) throw DataError("no rows in split '" + split + "'");
  CgdModel model(cfg.model_config(manifest.num_classes()), 0);
  model.load_state(state);
  auto emb = embed_dataset(model, data);
  save_embeddings(out, emb);
  std::printf("wrote %zu x %zu embeddings to %s\n", emb.count, emb.dim, out.c_str());
  return kOk;
}

int cmd_eval(const std::string& query, const std::string& gallery, const std::string& k_csv, bool exclude_self,
             const std::string& out) {
  auto ks = parse_k_list(k_csv);
  auto q = load_embeddings(query);
  auto g = load_embeddings(gallery);
  if (q.dim != g.dim) throw ConfigError("query dim " + std::to_string(q.dim) + " != gallery dim " + std::to_string(g.dim));
  auto report = evaluate_recall(q, g, ks, exclude_self);
  std::string text = to_json(report).dump(2) + "\n";
  if (!out.empty()) write_text(out, text);
  std::cout << text;
  return kOk;
}

int cmd_sweep(const ConfigFlags& flags, const std::string& configs_csv, const std::string& seeds_csv,
              const std::string& out) {
  auto cfg = flags.resolve();
  auto configs = configs_csv.empty() ? all_configurations() : parse_config_list(configs_csv);
  auto seeds = parse_seeds(seeds_csv);
  auto data = load_dataset(cfg.manifest);
  check_compatible(cfg, data);
  RunCache cache(data);
  auto report = run_sweep(cfg, configs, seeds, cache, progress_line);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "config.ini", cfg.to_ini());
    write_text(fs::path(out) / "sweep.tsv", report.to_table());
    write_text(fs::path(out) / "sweep.json", report.to_json().dump(2) + "\n");
  }
  std::cout << report.to_table();
  return kOk;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& seeds_csv, const std::string& out) {
  auto cfg = flags.resolve();
  auto seeds = parse_seeds(seeds_csv);
  auto data = load_dataset(cfg.manifest);
  check_compatible(cfg, data);
  RunCache cache(data);
  auto report = run_ablation(cfg, seeds, cache, progress_line);
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "config.ini", cfg.to_ini());
    write_text(fs::path(out) / "ablation.tsv", report.to_table());
    write_text(fs::path(out) / "ablation.json", report.to_json().dump(2) + "\n");
  }
  std::cout << report.to_table();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Combined global descriptors for image retrieval"};
  app.require_subcommand(1);

  SyntheticSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic PPM corpus and manifest.csv");
  gen->add_option("--classes", spec.num_classes, "number of classes");
  gen->add_option("--per-class", spec.instances_per_class, "instances per class");
  gen->add_option("--size", spec.image_size, "image side length");
  gen->add_option("--jitter", spec.intra_class_jitter, "intra-class jitter in [0,1]");
  gen->add_option("--seed", spec.seed, "corpus seed");
  gen->add_option("--out", gen_out, "output directory")->required();

  ConfigFlags train_flags;
  std::string train_out;
  auto* train_cmd = app.add_subcommand("train", "train one configuration");
  train_flags.attach(train_cmd);
  train_cmd->add_option("--out", train_out, "output directory (metrics.tsv, best.ckpt, config.ini)");

  ConfigFlags embed_flags;
  std::string checkpoint, split = "test", embed_out;
  auto* embed = app.add_subcommand("embed", "embed a manifest split with a checkpoint");
  embed_flags.attach(embed);
  embed->add_option("--checkpoint", checkpoint, "CKPT1 file")->required()->check(CLI::ExistingFile);
  embed->add_option("--split", split, "train | test | all")->check(CLI::IsMember({"train", "test", "all"}));
  embed->add_option("--out", embed_out, "EMB1 output file")->required();

  std::string query, gallery, k_csv = "1,2,4,8", eval_out;
  bool exclude_self = false;
  auto* eval = app.add_subcommand("eval", "Recall@K of query embeddings against a gallery");
  eval->add_option("--query", query, "EMB1 query set")->required()->check(CLI::ExistingFile);
  eval->add_option("--gallery", gallery, "EMB1 gallery set")->required()->check(CLI::ExistingFile);
  eval->add_option("--k", k_csv, "comma-separated K list");
  eval->add_flag("--exclude-self", exclude_self, "drop the gallery row sharing the query's id");
  eval->add_option("--out", eval_out, "also write the JSON report here");

  ConfigFlags sweep_flags;
  std::string configs_csv, sweep_seeds = "1,2,3,4,5", sweep_out;
  auto* sweep = app.add_subcommand("sweep", "train and evaluate descriptor configurations over seeds");
  sweep_flags.attach(sweep);
  sweep->add_option("--configs", configs_csv, "comma-separated configurations (default: all twelve)");
  sweep->add_option("--seeds", sweep_seeds, "comma-separated seeds");
  sweep->add_option("--out", sweep_out, "output directory for sweep.tsv / sweep.json");

  ConfigFlags ablate_flags;
  std::string ablate_seeds = "1,2,3,4,5", ablate_out;
  auto* ablate = app.add_subcommand("ablate", "loss, trick, architecture and combination ablations");
  ablate_flags.attach(ablate);
  ablate->add_option("--seeds", ablate_seeds, "comma-separated seeds");
  ablate->add_option("--out", ablate_out, "output directory for ablation.tsv / ablation.json");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*gen) return cmd_gen_data(spec, gen_out);
    if (*train_cmd) return cmd_train(train_flags, train_out);
    if (*embed) return cmd_embed(embed_flags, checkpoint, split, embed_out);
    if (*eval) return cmd_eval(query, gallery, k_csv, exclude_self, eval_out);
    if (*sweep) return cmd_sweep(sweep_flags, configs_csv, sweep_seeds, sweep_out);
    if (*ablate) return cmd_ablate(ablate_flags, ablate_seeds, ablate_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumericError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
