// SPDX-License-Identifier: Apache-2.0
/**
 * @file   run.hpp
 * @brief  Everything one command needs, read from a single `key = value`
 *         file: model, optimiser, distillation, dataset and output location.
 *
 * The resolved form (to_key_values) lists every key, so a run can be
 * repeated from it alone.
 */
#pragma once

#include <blvit/config.hpp>
#include <blvit/data.hpp>
#include <blvit/model.hpp>
#include <blvit/train.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

namespace blvit {

struct RunConfig {
  ModelConfig model;
  train::OptimConfig optim;
  data::DatasetSpec data;
  bool distill = false;
  double lambda_fd = train::kDefaultDistillWeight;
  std::string teacher;  // checkpoint path; empty means no teacher
  bool pretrain = false;  // start the performance blocks from the teacher's weights
  std::string output_dir = "runs/default";

  /// Sets one key; throws ConfigError on unknown keys or bad values.
  void apply(const std::string& key, const std::string& value) {
    using namespace config;
    if (model.apply(key, value)) {
      optim.seed = model.seed;
      data.image_size = model.image_size;
      data.num_classes = model.num_classes;
      return;
    }
    if (key == "learning_rate") optim.learning_rate = parse_double(key, value);
    else if (key == "beta1") optim.beta1 = parse_double(key, value);
    else if (key == "beta2") optim.beta2 = parse_double(key, value);
    else if (key == "adam_eps") optim.eps = parse_double(key, value);
    else if (key == "weight_decay") optim.weight_decay = parse_double(key, value);
    else if (key == "epochs") optim.epochs = parse_uint(key, value);
    else if (key == "batch_size") optim.batch_size = parse_uint(key, value);
    else if (key == "distill") distill = parse_bool(key, value);
    else if (key == "lambda_fd") lambda_fd = parse_double(key, value);
    else if (key == "teacher") teacher = value;
    else if (key == "pretrain") pretrain = parse_bool(key, value);
    else if (key == "output_dir") output_dir = value;
    else if (key == "data_source") {
      if (value == "synthetic") data.source = data::Source::Synthetic;
      else if (value == "idx") data.source = data::Source::Idx;
      else throw ConfigError("key 'data_source': expected synthetic or idx, got '" + value + "'");
    } else if (key == "train_count") data.train_count = parse_uint(key, value);
    else if (key == "val_count") data.val_count = parse_uint(key, value);
    else if (key == "noise") data.noise = parse_double(key, value);
    else if (key == "data_seed") data.seed = parse_uint(key, value);
    else if (key == "train_images") data.train_images = value;
    else if (key == "train_labels") data.train_labels = value;
    else if (key == "val_images") data.val_images = value;
    else if (key == "val_labels") data.val_labels = value;
    else throw ConfigError("unknown key '" + key + "'");
  }

  void validate() const {
    model.validate();
    if (model.channels != 1) throw ConfigError("datasets are single-channel; channels must be 1");
    if (optim.batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(optim.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if ((distill || pretrain) && teacher.empty()) throw ConfigError("distill and pretrain need a teacher checkpoint");
    if (data.source == data::Source::Idx &&
        (data.train_images.empty() || data.train_labels.empty() || data.val_images.empty() || data.val_labels.empty()))
      throw ConfigError("data_source = idx needs train_images, train_labels, val_images and val_labels");
  }

  KeyValues to_key_values() const {
    using config::to_text;
    KeyValues kv = model.to_key_values();
    auto put = [&](const char* k, std::string v) { kv[k] = std::move(v); };
    put("learning_rate", to_text(optim.learning_rate));
    put("beta1", to_text(optim.beta1));
    put("beta2", to_text(optim.beta2));
    put("adam_eps", to_text(optim.eps));
    put("weight_decay", to_text(optim.weight_decay));
    put("epochs", to_text(std::uint64_t{optim.epochs}));
    put("batch_size", to_text(std::uint64_t{optim.batch_size}));
    put("distill", distill ? "true" : "false");
    put("lambda_fd", to_text(lambda_fd));
    put("teacher", teacher);
    put("pretrain", pretrain ? "true" : "false");
    put("output_dir", output_dir);
    put("data_source", data.source == data::Source::Idx ? "idx" : "synthetic");
    put("train_count", to_text(std::uint64_t{data.train_count}));
    put("val_count", to_text(std::uint64_t{data.val_count}));
    put("noise", to_text(data.noise));
    put("data_seed", to_text(data.seed));
    put("train_images", data.train_images);
    put("train_labels", data.train_labels);
    put("val_images", data.val_images);
    put("val_labels", data.val_labels);
    return kv;
  }

  /// Defaults, then `kv`, then validation.
  static RunConfig from_key_values(const KeyValues& kv) {
    RunConfig r;
    for (const auto& [key, value] : kv) r.apply(key, value);
    r.validate();
    return r;
  }
};

/// Splits `key=value`; throws ConfigError when there is no '='.
inline std::pair<std::string, std::string> split_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("expected key=value, got '" + text + "'");
  return {config::trim(text.substr(0, eq)), config::trim(text.substr(eq + 1))};
}

struct RunSummary {
  std::string checkpoint;
  train::TrainResult result;
  double final_val_acc = 0.0;
  double final_train_loss = 0.0;
};

/// Loads the teacher and checks it produces features the student can be compared with.
inline Model load_teacher(const RunConfig& rc) {
  Model t = load(rc.teacher);
  const ModelConfig& s = rc.model;
  if (t.config.tokens() != s.tokens() || t.config.dim != s.dim || t.config.image_size != s.image_size)
    throw ConfigError("teacher '" + rc.teacher + "' has " + std::to_string(t.config.tokens()) + " tokens of width " +
                      std::to_string(t.config.dim) + ", student needs " + std::to_string(s.tokens()) + " of width " +
                      std::to_string(s.dim));
  return t;
}

/**
 * Trains as configured and writes `resolved.cfg`, `train_log.csv` and
 * `model.ckpt` into output_dir. `on_epoch` sees every log row as it is written.
 */
inline RunSummary run_training(const RunConfig& rc, const train::EpochCallback& on_epoch = {}) {
  rc.validate();
  namespace fs = std::filesystem;
  const fs::path dir(rc.output_dir);
  fs::create_directories(dir);
  auto open = [](const fs::path& p) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
    return out;
  };
  open(dir / "resolved.cfg") << config::format(rc.to_key_values());

  const auto [train_set, val_set] = data::make_dataset(rc.data);
  Model m = build(rc.model);
  std::optional<Model> teacher;
  if (!rc.teacher.empty()) teacher = load_teacher(rc);
  if (rc.pretrain) transfer_parameters(m, *teacher, performance_prefix_map(rc.model));

  std::ofstream log = open(dir / "train_log.csv");
  log << train::kLogHeader << "\n";
  const train::DistillConfig dc{rc.distill, rc.lambda_fd, teacher ? &*teacher : nullptr};
  RunSummary summary;
  summary.result = train::train_loop(m, train_set, val_set, rc.optim, dc, [&](const train::EpochLog& e) {
    log << train::format_log_row(e) << "\n" << std::flush;
    if (on_epoch) on_epoch(e);
  });
  summary.checkpoint = (dir / "model.ckpt").string();
  save(m, summary.checkpoint);
  summary.final_val_acc = summary.result.log.back().val_acc;
  summary.final_train_loss = summary.result.log.back().train_loss;
  return summary;
}

}  // namespace blvit
