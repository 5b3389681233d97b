#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "gaitforge/train.hpp"

namespace gaitforge::train {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int64_t parse_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    int64_t v = std::stoll(value, &used);
    check(used == value.size(), "trailing characters");
    return v;
  } catch (const std::exception&) {
    throw Error("config key '" + key + "': not an integer: " + value);
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    double v = std::stod(value, &used);
    check(used == value.size(), "trailing characters");
    return v;
  } catch (const std::exception&) {
    throw Error("config key '" + key + "': not a number: " + value);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "yes" || value == "1") return true;
  if (value == "false" || value == "no" || value == "0") return false;
  throw Error("config key '" + key + "': not a boolean: " + value);
}

std::vector<int64_t> parse_int_list(const std::string& key,
                                    const std::string& value) {
  std::vector<int64_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_int(key, item));
  }
  check(!out.empty(), "config key '" + key + "': empty list");
  return out;
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  std::stringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    check(eq != std::string::npos, "config line " + std::to_string(lineno) +
                                       ": expected key=value, got: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    check(!key.empty(), "config line " + std::to_string(lineno) +
                            ": missing key");
    check(!value.empty(), "config key '" + key + "': missing value");

    if (key == "family") {
      cfg.backbone.family = backbone::family_from_string(value);
    } else if (key == "base_channels") {
      cfg.backbone.base_channels = parse_int(key, value);
    } else if (key == "block_counts") {
      auto counts = parse_int_list(key, value);
      check(counts.size() == 4,
            "config key 'block_counts': expected four comma-separated "
            "entries");
      for (size_t i = 0; i < 4; ++i) cfg.backbone.block_counts[i] = counts[i];
    } else if (key == "swin_conv_kind") {
      cfg.backbone.swin_conv_kind = backbone::conv_kind_from_string(value);
      cfg.backbone.swin_conv_kind_set = true;
    } else if (key == "part_count") {
      cfg.backbone.part_count = parse_int(key, value);
    } else if (key == "drop_path_rate") {
      cfg.backbone.drop_path_rate = parse_double(key, value);
    } else if (key == "embed_dim") {
      cfg.embed_dim = parse_int(key, value);
    } else if (key == "hp_mode") {
      cfg.hp_mode = head::hp_mode_from_string(value);
    } else if (key == "triplet_margin") {
      cfg.triplet_margin = parse_double(key, value);
    } else if (key == "optimizer") {
      cfg.optimizer.kind = opt_kind_from_string(value);
    } else if (key == "lr") {
      cfg.optimizer.lr = parse_double(key, value);
    } else if (key == "weight_decay") {
      cfg.optimizer.weight_decay = parse_double(key, value);
    } else if (key == "momentum") {
      cfg.optimizer.momentum = parse_double(key, value);
    } else if (key == "beta1") {
      cfg.optimizer.beta1 = parse_double(key, value);
    } else if (key == "beta2") {
      cfg.optimizer.beta2 = parse_double(key, value);
    } else if (key == "eps") {
      cfg.optimizer.eps = parse_double(key, value);
    } else if (key == "lr_min") {
      cfg.optimizer.lr_min = parse_double(key, value);
    } else if (key == "schedule") {
      cfg.schedule.kind = sched_kind_from_string(value);
    } else if (key == "milestones") {
      cfg.schedule.milestones = parse_int_list(key, value);
    } else if (key == "gamma") {
      cfg.schedule.gamma = parse_double(key, value);
    } else if (key == "i_max") {
      cfg.schedule.i_max = parse_int(key, value);
    } else if (key == "update_granularity") {
      cfg.schedule.update_granularity = parse_int(key, value);
    } else if (key == "total_steps") {
      cfg.schedule.total_steps = parse_int(key, value);
    } else if (key == "batch_q") {
      cfg.batch.q = parse_int(key, value);
    } else if (key == "batch_k") {
      cfg.batch.k = parse_int(key, value);
    } else if (key == "frames") {
      cfg.batch.frames = parse_int(key, value);
    } else if (key == "ordered") {
      cfg.batch.ordered = parse_bool(key, value);
    } else if (key == "augment") {
      cfg.augment = parse_bool(key, value);
    } else if (key == "log_every") {
      cfg.log_every = parse_int(key, value);
    } else if (key == "checkpoint_every") {
      cfg.checkpoint_every = parse_int(key, value);
    } else if (key == "warm_start") {
      cfg.warm_start = value;
    } else if (key == "warm_lr") {
      cfg.warm_lr = parse_double(key, value);
    } else {
      throw Error("unknown config key: " + key);
    }
  }
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  check(bool(is), "cannot open config: " + path);
  std::stringstream buffer;
  buffer << is.rdbuf();
  return parse_train_config(buffer.str());
}

}  // namespace gaitforge::train
