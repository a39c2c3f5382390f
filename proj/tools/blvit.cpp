// SPDX-License-Identifier: Apache-2.0
// blvit: train, evaluate, cost and inspect token-routed vision transformers.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <blvit/costmodel.hpp>
#include <blvit/gradcheck.hpp>
#include <blvit/localize.hpp>
#include <blvit/pgm.hpp>
#include <blvit/run.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>

using namespace blvit;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Config file (optional), then BLVIT_SEED, then --set overrides.
RunConfig resolve(const std::string& path, const std::vector<std::string>& sets) {
  KeyValues kv;
  if (!path.empty()) kv = config::load(path);
  if (const char* seed = std::getenv("BLVIT_SEED")) kv["seed"] = seed;
  for (const auto& s : sets) {
    auto [key, value] = split_assignment(s);
    kv[key] = value;
  }
  return RunConfig::from_key_values(kv);
}

void print_row(const train::EpochLog& e) {
  std::cout << train::format_log_row(e) << "\n" << std::flush;
}

int cmd_train(const std::string& path, const std::vector<std::string>& sets, const std::string& output_dir,
              const std::string& ablate) {
  RunConfig rc = resolve(path, sets);
  if (!output_dir.empty()) rc.output_dir = output_dir;
  if (ablate.empty()) {
    std::cout << train::kLogHeader << "\n";
    const auto s = run_training(rc, print_row);
    std::cout << "checkpoint: " << s.checkpoint << "\n";
    return 0;
  }

  const auto [key, values] = split_assignment(ablate);
  std::vector<std::string> settings;
  std::stringstream in(values);
  for (std::string item; std::getline(in, item, ',');)
    if (!config::trim(item).empty()) settings.push_back(config::trim(item));
  if (settings.empty()) throw ConfigError("--ablate " + key + " needs at least one value");
  const fs::path base(rc.output_dir);
  fs::create_directories(base);
  std::ofstream summary(base / "ablation.csv", std::ios::trunc);
  if (!summary) throw std::runtime_error("cannot write '" + (base / "ablation.csv").string() + "'");
  const std::string header = key + ",val_acc,train_loss,distill_loss,flops,speedup";
  summary << header << "\n";
  std::vector<std::string> rows;
  for (const auto& value : settings) {
    RunConfig one = rc;
    one.apply(key, value);
    one.output_dir = (base / (key + "=" + value)).string();
    one.validate();
    std::cerr << "== " << key << " = " << value << "\n";
    const auto s = run_training(one, [](const train::EpochLog& e) { std::cerr << train::format_log_row(e) << "\n"; });
    const auto cost = cost::analytic_report(cost::shape_of(one.model));
    std::ostringstream row;
    row << value << "," << s.final_val_acc << ","
        << s.final_train_loss << "," << s.result.log.back().distill_loss << "," << cost.total_analytic << ","
        << cost.model_speedup;
    summary << row.str() << "\n" << std::flush;
    rows.push_back(row.str());
  }
  std::cout << header << "\n";
  for (const auto& r : rows) std::cout << r << "\n";
  return 0;
}

data::Dataset eval_split(const Model& m, const std::string& path, const std::vector<std::string>& sets,
                         const std::string& split) {
  RunConfig rc = resolve(path, sets);
  rc.data.image_size = m.config.image_size;
  rc.data.num_classes = m.config.num_classes;
  auto [train_set, val_set] = data::make_dataset(rc.data);
  if (split == "train") return train_set;
  if (split == "val") return val_set;
  throw UsageError("--split must be train or val");
}

int cmd_eval(const std::string& checkpoint, const std::string& path, const std::vector<std::string>& sets,
             const std::string& split) {
  const Model m = load(checkpoint);
  const auto d = eval_split(m, path, sets, split);
  const auto r = train::evaluate(m, d);
  std::printf("samples: %zu\naccuracy: %.6f\n", d.size(), r.accuracy);
  for (const auto& [layer, e] : r.entropy) std::printf("entropy.predictor.%zu: %.6f\n", layer, e);
  std::printf("entropy.mean: %.6f\n", r.mean_entropy());
  return 0;
}

int cmd_flops(const std::string& path, const std::string& preset, const std::vector<std::string>& sets,
              bool paper_scale, const std::string& format) {
  ModelConfig c;
  if (!preset.empty()) {
    c = presets::by_name(preset);
    for (const auto& s : sets) {
      auto [key, value] = split_assignment(s);
      if (!c.apply(key, value)) throw ConfigError("unknown model key '" + key + "'");
    }
    c.validate();
  } else {
    c = resolve(path, sets).model;
  }
  const auto report = paper_scale ? cost::analytic_report(cost::paper_scale(c)) : cost::model_cost(c);
  if (format == "kv")
    std::cout << cost::format_keyvalue(report);
  else if (format == "table")
    std::cout << cost::format_table(report);
  else
    throw UsageError("--format must be table or kv");
  return report.total_counted && !report.all_exact() ? 1 : 0;
}

int cmd_gradcheck(const std::string& path, const std::vector<std::string>& sets, bool freeze_alpha,
                  const std::string& corrupt) {
  ModelConfig c = gradcheck::tiny_config();
  if (!path.empty() || !sets.empty()) {
    KeyValues kv = c.to_key_values();
    if (!path.empty())
      for (const auto& [k, v] : config::load(path)) kv[k] = v;
    for (const auto& s : sets) {
      auto [key, value] = split_assignment(s);
      kv[key] = value;
    }
    c = ModelConfig::from_key_values(kv);
  }
  if (!corrupt.empty()) {
    const auto colon = corrupt.find(':');
    debug::backward_fault() = {corrupt.substr(0, colon),
                               colon == std::string::npos ? 1.01
                                                          : config::parse_double("--corrupt", corrupt.substr(colon + 1))};
  }
  const auto report = gradcheck::run(c, {.freeze_alpha = freeze_alpha});
  std::cout << report.format();
  if (!report.passed()) {
    std::cerr << "failing groups:";
    for (const auto& g : report.failing()) std::cerr << " " << g;
    std::cerr << "\n";
    return 1;
  }
  return 0;
}

int cmd_route_viz(const std::string& checkpoint, const std::string& out_dir, const std::string& path,
                  const std::vector<std::string>& sets, const std::string& split, std::size_t count) {
  const Model m = load(checkpoint);
  if (m.config.predictor_layers.empty()) throw ConfigError("checkpoint '" + checkpoint + "' has no routed layers");
  const auto d = eval_split(m, path, sets, split);
  count = std::min(count, d.size());
  if (count == 0) throw UsageError("--count must be positive");
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  NoGradGuard no_grad;
  const auto out = forward(m, d.images(idx), {.trace = true});
  const std::size_t grid = m.config.grid(), patch = m.config.patch_size, side = m.config.image_size;
  std::size_t written = 0;
  for (std::size_t b = 0; b < count; ++b) {
    const std::string stem = "image" + std::to_string(b);
    std::vector<std::uint8_t> input(side * side);
    for (std::size_t i = 0; i < input.size(); ++i)
      input[i] = static_cast<std::uint8_t>(std::lround(255.0 * d.pixels[b * d.pixels_per_image() + i]));
    pgm::write((dir / (stem + ".pgm")).string(), side, side, input);
    std::size_t last = 0;
    for (const auto& t : out.trace) {
      if (t.predictor_layer == last) continue;
      last = t.predictor_layer;
      const std::string seg = stem + "_pred" + std::to_string(t.predictor_layer);
      std::ofstream((dir / (seg + "_select.txt")).string()) << pgm::selection_grid(t.mask, b, grid);
      pgm::write((dir / (seg + "_select.pgm")).string(), side, side,
                 pgm::upscale(pgm::selection_levels(t.mask, b), grid, patch));
      const std::span<const double> row(t.scores.values().data() + b * t.mask.tokens, t.mask.tokens);
      pgm::write((dir / (seg + "_scores.pgm")).string(), side, side, pgm::upscale(pgm::score_levels(row), grid, patch));
      written += 3;
    }
  }
  const auto loc = localize::measure(m, d, count);
  std::printf("wrote %zu files to %s\n", written + count, out_dir.c_str());
  for (const auto& s : loc.segments)
    std::printf("predictor %zu: box overlap %.4f vs random %.4f\n", s.predictor_layer, s.mean_selected(),
                s.mean_random());
  std::printf("mean box overlap %.4f vs random %.4f (t = %.3f over %zu images)\n", loc.mean_selected, loc.mean_random,
              loc.t_statistic, count);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"token-routed vision transformer toolkit"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, output_dir, ablate, preset, format = "table", corrupt, split = "val",
                                                                  out_dir;
  std::vector<std::string> sets;
  bool paper_scale = false, freeze_alpha = false;
  std::size_t count = 4;
  auto add_common = [&](CLI::App* sub, bool config_positional) {
    if (config_positional)
      sub->add_option("config", config_path, "key = value config file")->check(CLI::ExistingFile);
    else
      sub->add_option("--config", config_path, "config file for dataset settings")->check(CLI::ExistingFile);
    sub->add_option("--set", sets, "override a config key (key=value), repeatable");
  };

  auto* train = app.add_subcommand("train", "train a model and write checkpoint, log and resolved config");
  add_common(train, true);
  train->add_option("--output-dir", output_dir, "overrides output_dir");
  train->add_option("--ablate", ablate, "key=v1,v2,... one run per value plus a summary table");

  auto* eval = app.add_subcommand("eval", "top-1 accuracy and per-predictor score entropy");
  eval->add_option("checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  add_common(eval, false);
  eval->add_option("--split", split, "train or val");

  auto* flops = app.add_subcommand("flops", "analytic and instrumented multiply-accumulate counts");
  add_common(flops, true);
  flops->add_option("--preset", preset, "vanilla, base-tiny or huge-base instead of a config file");
  flops->add_flag("--paper-scale", paper_scale, "evaluate the plan at 197 tokens, width 768");
  flops->add_option("--format", format, "table or kv");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient audit on a tiny model");
  add_common(grad, true);
  grad->add_flag("--freeze-alpha", freeze_alpha, "hold score scaling at zero");
  grad->add_option("--corrupt", corrupt, "scale the backward of one op, OP[:FACTOR] (harness self-test)");

  auto* viz = app.add_subcommand("route-viz", "token selection grids and greymaps per image and predictor");
  viz->add_option("checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  viz->add_option("out_dir", out_dir)->required();
  add_common(viz, false);
  viz->add_option("--split", split, "train or val");
  viz->add_option("--count", count, "number of images");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(config_path, sets, output_dir, ablate);
    if (*eval) return cmd_eval(checkpoint, config_path, sets, split);
    if (*flops) return cmd_flops(config_path, preset, sets, paper_scale, format);
    if (*grad) return cmd_gradcheck(config_path, sets, freeze_alpha, corrupt);
    if (*viz) return cmd_route_viz(checkpoint, out_dir, config_path, sets, split, count);
  } catch (const ConfigError& e) {
    std::cerr << "blvit: config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    std::cerr << "blvit: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "blvit: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
