#include "hat/cli.hpp"

#include <omp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "hat/inspect.hpp"
#include "hat/training.hpp"

namespace hat::cli {

namespace fs = std::filesystem;

namespace {

/// Bad input detected by the CLI itself (exit code 2).
struct ValidationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string join_lines(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& e : items) s += "\n  - " + e;
  return s;
}

RunConfig validated(const FlatConfig& flat) {
  std::vector<std::string> errors;
  RunConfig cfg = from_flat(flat, errors);
  if (!errors.empty()) throw ValidationFailure("invalid configuration:" + join_lines(errors));
  return cfg;
}

FlatConfig read_flat(const std::string& config_path, const std::vector<std::string>& overrides) {
  FlatConfig flat;
  if (!config_path.empty()) flat = read_config_file(config_path);
  std::vector<std::string> errors;
  apply_overrides(flat, overrides, errors);
  if (!errors.empty()) throw ValidationFailure("invalid overrides:" + join_lines(errors));
  return flat;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

double rank_or_last(const metrics::EvalResult& r, int k) {
  if (r.cmc.empty()) return 0;
  return r.cmc[std::min(r.cmc.size(), static_cast<size_t>(k)) - 1];
}

std::string eval_csv(const metrics::EvalResult& r, const std::string& hash) {
  return "map,rank1,rank5,rank10,num_valid_queries,config_hash\n" + fixed(r.mAP, 6) + "," +
         fixed(rank_or_last(r, 1), 6) + "," + fixed(rank_or_last(r, 5), 6) + "," + fixed(rank_or_last(r, 10), 6) +
         "," + std::to_string(r.num_valid_queries) + "," + hash + "\n";
}

void print_eval(const metrics::EvalResult& r) {
  std::printf("mAP      %s\n", fixed(r.mAP).c_str());
  for (int k : {1, 5, 10}) std::printf("Rank-%-3d %s\n", k, fixed(rank_or_last(r, k)).c_str());
  std::printf("valid queries: %lld\n", static_cast<long long>(r.num_valid_queries));
  std::printf("CMC:");
  for (size_t k = 0; k < std::min<size_t>(r.cmc.size(), 20); ++k) std::printf(" %s", fixed(r.cmc[k], 3).c_str());
  std::printf("\n");
}

void write_eval(const fs::path& dir, const metrics::EvalResult& r, const std::string& hash) {
  write_text(dir / "eval.json", metrics::to_json(r, hash) + "\n");
  write_text(dir / "eval.csv", eval_csv(r, hash));
}

data::DatasetSplits load_data(const RunConfig& cfg) {
  data::DatasetSplits splits =
      data::load_splits(cfg.dataset, cfg.model.backbone.image_height, cfg.model.backbone.image_width);
  for (const auto& w : splits.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  return splits;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string resume;
  int64_t stop_after = 0;
  bool verbose = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = validated(read_flat(a.config, a.sets));
  cfg.output_dir = resolve_output_dir(cfg.output_dir);
  const data::DatasetSplits splits = load_data(cfg);
  TrainOptions opts;
  opts.resume_from = a.resume;
  opts.stop_after_epoch = a.stop_after;
  opts.verbose = a.verbose;
  TrainResult result = train(cfg, splits, opts);
  const metrics::EvalResult r = evaluate_model(*result.model, splits, cfg);
  write_eval(cfg.output_dir, r, config_hash(cfg));
  print_eval(r);
  std::printf("outputs in %s\n", cfg.output_dir.c_str());
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string features;
  bool l2 = false;
  std::string out;
  std::vector<std::string> sets;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  FlatConfig flat = ckpt.config;
  std::vector<std::string> errors;
  apply_overrides(flat, a.sets, errors);
  if (!errors.empty()) throw ValidationFailure("invalid overrides:" + join_lines(errors));
  if (!a.dataset.empty()) flat["data.dataset"] = a.dataset;
  if (!a.features.empty()) flat["eval.features"] = a.features;
  if (a.l2) flat["eval.l2_normalize"] = "true";
  RunConfig cfg = validated(flat);
  cfg.output_dir = resolve_output_dir(cfg.output_dir);
  const fs::path out = a.out.empty() ? fs::path(cfg.output_dir) / "eval" : fs::path(resolve_output_dir(a.out));

  auto model = build_model(cfg, ckpt.num_ids);
  restore_checkpoint(ckpt, *model, nullptr);
  const data::DatasetSplits splits = load_data(cfg);
  const metrics::EvalResult r = evaluate_model(*model, splits, cfg);
  write_text(out / "config.yaml", to_yaml(cfg));
  write_eval(out, r, config_hash(cfg));
  print_eval(r);
  return kOk;
}

struct InspectArgs {
  std::string checkpoint;
  std::string input;
  std::string out;
};

int cmd_inspect(const InspectArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  RunConfig cfg;
  auto model = model_from_checkpoint(ckpt, &cfg);
  cfg.output_dir = resolve_output_dir(cfg.output_dir);
  const fs::path out = a.out.empty() ? fs::path(cfg.output_dir) / "inspect" : fs::path(resolve_output_dir(a.out));
  const int64_t h = cfg.model.backbone.image_height, w = cfg.model.backbone.image_width;

  Tensor<float> pixels;
  if (a.input.rfind("synth://", 0) == 0) {
    auto spec = data::parse_synth_uri(a.input);
    if (!spec) throw ValidationFailure("malformed synthetic URI '" + a.input + "'");
    pixels = data::synth_dataset(spec->num_ids, spec->per_id, h, w, spec->seed).samples.at(0).image;
  } else {
    if (!fs::is_regular_file(a.input)) throw std::runtime_error("cannot read image '" + a.input + "'");
    pixels = data::load_image(a.input, h, w);
  }
  const auto maps = aggregation_maps(*model, data::normalize(pixels, cfg.augment));
  write_text(out / "config.yaml", to_yaml(cfg));
  for (const auto& p : write_level_maps(maps, out.string())) std::printf("%s\n", p.c_str());
  return kOk;
}

struct SweepArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string axis;
  std::vector<std::string> values;
  int jobs = 1;
};

std::string arm_dir_name(const std::string& value) {
  std::string s;
  for (char c : value) s += std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' ? c : '_';
  return s;
}

int cmd_sweep(const SweepArgs& a) {
  if (a.values.empty()) throw ValidationFailure("sweep needs at least one value for --values");
  if (a.jobs < 1) throw ValidationFailure("--jobs must be at least 1");
  const FlatConfig base = read_flat(a.config, a.sets);
  const auto keys = config_keys();
  const bool ablation = a.axis == kAblationAxis;
  if (!ablation && std::find(keys.begin(), keys.end(), a.axis) == keys.end())
    throw ValidationFailure("sweep axis '" + a.axis + "' is not a config key");

  RunConfig base_cfg = validated(base);
  const fs::path sweep_dir = fs::path(resolve_output_dir(base_cfg.output_dir)) / ("sweep_" + arm_dir_name(a.axis));

  // Validate every arm before running any of them.
  std::vector<RunConfig> arms;
  std::vector<std::string> errors;
  for (const auto& v : a.values) {
    FlatConfig flat = base;
    if (ablation) {
      for (const auto& [k, x] : ablation_overrides(v)) flat[k] = x;
    } else {
      flat[a.axis] = v;
    }
    std::vector<std::string> arm_errors;
    RunConfig cfg = from_flat(flat, arm_errors);
    for (const auto& e : arm_errors) errors.push_back(a.axis + "=" + v + ": " + e);
    cfg.output_dir = (sweep_dir / arm_dir_name(v)).string();
    arms.push_back(cfg);
  }
  if (!errors.empty()) throw ValidationFailure("invalid sweep arms:" + join_lines(errors));

  base_cfg.output_dir = sweep_dir.string();
  write_text(sweep_dir / "config.yaml", to_yaml(base_cfg));

  std::vector<SweepRow> rows(arms.size());
  std::vector<std::exception_ptr> failures(arms.size());
  std::mutex io;
  auto run_arm = [&](size_t i) {
    try {
      const RunConfig& cfg = arms[i];
      const data::DatasetSplits splits = load_data(cfg);
      TrainResult res = train(cfg, splits);
      const metrics::EvalResult r = evaluate_model(*res.model, splits, cfg);
      write_eval(cfg.output_dir, r, config_hash(cfg));
      rows[i] = {a.values[i], cfg.output_dir, r.mAP, rank_or_last(r, 1), rank_or_last(r, 5), rank_or_last(r, 10),
                 res.log.empty() ? 0.0 : res.log.back().total};
      std::lock_guard<std::mutex> lock(io);
      std::printf("%s=%s  mAP %s  Rank-1 %s\n", a.axis.c_str(), a.values[i].c_str(), fixed(r.mAP).c_str(),
                  fixed(rows[i].rank1).c_str());
      std::fflush(stdout);
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };
  if (a.jobs == 1) {
    for (size_t i = 0; i < arms.size(); ++i) run_arm(i);
  } else {
    // Arms write to disjoint directories; each worker claims the next arm.
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min<int>(a.jobs, static_cast<int>(arms.size())); ++t)
      pool.emplace_back([&] {
        for (size_t i = next++; i < arms.size(); i = next++) run_arm(i);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);

  write_text(sweep_dir / "summary.csv", sweep_csv(a.axis, rows));
  const std::string table = sweep_table(a.axis, rows);
  write_text(sweep_dir / "summary.txt", table);
  std::printf("%s", table.c_str());
  return kOk;
}

}  // namespace

std::string resolve_output_dir(const std::string& output_dir) {
  const char* root = std::getenv(kOutputRootEnv);
  const fs::path p(output_dir);
  if (root == nullptr || *root == '\0' || p.is_absolute()) return output_dir;
  return (fs::path(root) / p).string();
}

FlatConfig ablation_overrides(const std::string& arm) {
  if (arm == "full") return {};
  if (arm == "no-mfe") return {{"dsa.use_mfe_supervision", "false"}};
  if (arm == "no-aux") return {{"dsa.use_aux_loss", "false"}};
  if (arm == "no-nea") return {{"dsa.use_nea", "false"}};
  throw ValidationFailure("unknown ablation arm '" + arm + "' (expected full, no-mfe, no-aux or no-nea)");
}

std::string sweep_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "axis,value,map,rank1,rank5,rank10,final_loss,output_dir\n";
  for (const auto& r : rows)
    os << axis << ",\"" << r.value << "\"," << fixed(r.map, 6) << "," << fixed(r.rank1, 6) << "," << fixed(r.rank5, 6)
       << "," << fixed(r.rank10, 6) << "," << fixed(r.final_loss, 6) << "," << r.output_dir << "\n";
  return os.str();
}

std::string sweep_table(const std::string& axis, const std::vector<SweepRow>& rows) {
  size_t width = axis.size();
  for (const auto& r : rows) width = std::max(width, r.value.size());
  auto pad = [&](const std::string& s) { return s + std::string(width - s.size(), ' '); };
  std::ostringstream os;
  os << pad(axis) << "  mAP(%)  Rank-1(%)  Rank-5(%)  Rank-10(%)\n";
  os << std::string(width, '-') << "  ------  ---------  ---------  ----------\n";
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "  %6.2f  %9.2f  %9.2f  %10.2f\n", 100 * r.map, 100 * r.rank1, 100 * r.rank5,
                  100 * r.rank10);
    os << pad(r.value) << buf;
  }
  return os.str();
}

int run(int argc, const char* const* argv) {
  CLI::App app{"Hierarchical aggregation transformer for re-identification"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads (0 keeps the default)");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model and evaluate it on the query/gallery split");
  train_cmd->add_option("--config", ta.config, "YAML run configuration");
  train_cmd->add_option("--set", ta.sets, "Dotted override key=value (repeatable)");
  train_cmd->add_option("--resume", ta.resume, "Continue from a checkpoint");
  train_cmd->add_option("--stop-after", ta.stop_after, "Stop after this epoch");
  train_cmd->add_flag("--verbose", ta.verbose, "Per-epoch progress on stderr");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--dataset", ea.dataset, "Dataset folder or synth:// URI (defaults to the trained one)");
  eval_cmd->add_option("--features", ea.features, "concat | backbone-only | hat-only");
  eval_cmd->add_flag("--l2", ea.l2, "L2-normalize features before ranking");
  eval_cmd->add_option("--out", ea.out, "Report directory");
  eval_cmd->add_option("--set", ea.sets, "Dotted override key=value (repeatable)");

  InspectArgs ia;
  auto* inspect_cmd = app.add_subcommand("inspect", "Dump channel-averaged TFC output maps");
  inspect_cmd->add_option("--checkpoint", ia.checkpoint, "Checkpoint file")->required();
  inspect_cmd->add_option("--input", ia.input, "Image path or synth:// URI")->required();
  inspect_cmd->add_option("--out", ia.out, "Output directory");

  SweepArgs sa;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate one run per value of a config key");
  sweep_cmd->add_option("--config", sa.config, "YAML run configuration");
  sweep_cmd->add_option("--set", sa.sets, "Dotted override key=value (repeatable)");
  sweep_cmd->add_option("--axis", sa.axis, "Config key to vary, or 'ablation'")->required();
  sweep_cmd->add_option("--values", sa.values, "Values to try")->expected(0, -1);
  sweep_cmd->add_option("--jobs", sa.jobs, "Arms run concurrently");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidation;
  }
  if (threads > 0) omp_set_num_threads(threads);

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_eval(ea);
    if (*inspect_cmd) return cmd_inspect(ia);
    if (*sweep_cmd) return cmd_sweep(sa);
  } catch (const ValidationFailure& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const InputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kValidation;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace hat::cli
