// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Run configuration: an INI file with sections, validated against a fixed
// schema. Precedence, lowest to highest: schema defaults, config file,
// command-line overrides.

#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "invgen/checkpoint.hpp"
#include "invgen/denoiser.hpp"
#include "invgen/infer.hpp"
#include "invgen/train.hpp"
#include "invgen/world.hpp"

namespace invgen {

class RunConfig {
 public:
  using Section = std::map<std::string, std::string>;

  RunConfig() : values_(schema()) {}

  /// Every accepted section and key with its default value.
  static const std::map<std::string, Section>& schema() {
    static const std::map<std::string, Section> s = {
        {"run", {{"seed", "0"}, {"out", "out"}, {"jobs", "1"}}},
        {"world",
         {{"task", "local"},
          {"height", "16"},
          {"width", "16"},
          {"channels", "1"},
          {"k_min", "1"},
          {"k_max", "2"},
          {"palette", "0"},
          {"radius", "0.12"},
          {"margin", "0.1"},
          {"min_separation", "0.15"},
          {"texture", "0"},
          {"count", "64"},
          {"split", "train"},
          {"disjoint_from_train", "false"}}},
        {"schedule",
         {{"step_count", "1000"}, {"beta_start", "0.0001"}, {"beta_end", "0.02"}}},
        {"architecture",
         {{"hidden", "256"},
          {"time_embed_dim", "16"},
          {"fourier_bands", "4"},
          {"window_radius", "0.12"}}},
        {"train",
         {{"dataset", ""},
          {"learning_rate", "0.001"},
          {"batch_size", "32"},
          {"step_budget", "1000"},
          {"optimizer", "adam"},
          {"clip_norm", "0"},
          {"checkpoint_every", "0"}}},
        {"infer",
         {{"checkpoint", ""},
          {"dataset", ""},
          {"algorithm", "count"},
          {"scenes", "0"},
          {"k", "0"},
          {"k_min", "1"},
          {"k_max", "5"},
          {"pick_count", "2"},
          {"sample_count", "256"},
          {"sgd_steps", "400"},
          {"restarts", "8"},
          {"concept_lr", "0.05"},
          {"warmup_steps", "10"},
          {"lr_final_fraction", "1"},
          {"optimizer", "adam"},
          {"prune_cadence", "0"},
          {"prune_fraction", "0.5"},
          {"prune_decay", "0.9"},
          {"warm_fraction", "0"},
          {"init", "uniform"},
          {"sgd_t_lo", "1"},
          {"sgd_t_hi", "0"},
          {"score_t_lo", "1"},
          {"score_t_hi", "0"},
          {"enumeration_cap", "4096"},
          {"relaxed_init", "0.5"},
          {"overlay", "true"}}},
        {"eval",
         {{"reports", ""},
          {"dataset", ""},
          {"threshold", "0.002"},
          {"sentinel_x", "0"},
          {"sentinel_y", "0"}}},
        {"sweep", {{"restarts", "1,5,10,20"}, {"seeds", "0"}, {"k", "0"}}},
    };
    return s;
  }

  /// Merges an INI file; unknown sections or keys are rejected.
  void load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    boost::property_tree::ptree tree;
    try {
      boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError("config '" + path + "': " + e.message() + " (line " +
                        std::to_string(e.line()) + ")");
    }
    for (const auto& [section, body] : tree) {
      if (body.empty()) {
        throw ConfigError("config '" + path + "': key '" + section +
                          "' must live inside a [section]");
      }
      for (const auto& [key, value] : body) {
        set(section, key, value.get_value<std::string>(), "config '" + path + "'");
      }
    }
  }

  /// Applies a `section.key=value` override.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("override '" + assignment +
                        "' must have the form section.key=value");
    }
    set(assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1),
        assignment.substr(eq + 1), "override");
  }

  void set(const std::string& section, const std::string& key,
           const std::string& value, const std::string& origin = "override") {
    const auto& sch = schema();
    const auto sec = sch.find(section);
    if (sec == sch.end()) {
      throw ConfigError(origin + ": unknown section [" + section + "]");
    }
    if (!sec->second.count(key)) {
      std::string known;
      for (const auto& [k, v] : sec->second) known += (known.empty() ? "" : ", ") + k;
      throw ConfigError(origin + ": unknown key '" + key + "' in [" + section +
                        "] (known: " + known + ")");
    }
    values_[section][key] = value;
  }

  const std::string& str(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    if (s == values_.end() || !s->second.count(key)) {
      throw ConfigError("internal: no schema entry " + section + "." + key);
    }
    return s->second.at(key);
  }

  template <typename T>
  T get(const std::string& section, const std::string& key) const {
    const std::string& v = str(section, key);
    if constexpr (std::is_same_v<T, std::string>) {
      return v;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (v == "true" || v == "1" || v == "yes") return true;
      if (v == "false" || v == "0" || v == "no") return false;
      throw ConfigError(section + "." + key + ": expected a boolean, got '" + v + "'");
    } else {
      T out{};
      const auto* end = v.data() + v.size();
      const auto res = std::from_chars(v.data(), end, out);
      if (res.ec != std::errc() || res.ptr != end) {
        throw ConfigError(section + "." + key + ": cannot parse '" + v + "'");
      }
      return out;
    }
  }

  template <typename T>
  std::vector<T> get_list(const std::string& section, const std::string& key) const {
    std::vector<T> out;
    std::stringstream ss(str(section, key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto first = item.find_first_not_of(" \t");
      const auto last = item.find_last_not_of(" \t");
      item = first == std::string::npos ? "" : item.substr(first, last - first + 1);
      T v{};
      const auto res = std::from_chars(item.data(), item.data() + item.size(), v);
      if (res.ec != std::errc() || res.ptr != item.data() + item.size()) {
        throw ConfigError(section + "." + key + ": bad list entry '" + item + "'");
      }
      out.push_back(v);
    }
    if (out.empty()) throw ConfigError(section + "." + key + ": empty list");
    return out;
  }

  /// The fully resolved configuration, in the input format.
  std::string echo() const {
    std::ostringstream os;
    for (const auto& [section, body] : values_) {
      os << '[' << section << "]\n";
      for (const auto& [k, v] : body) os << k << " = " << v << '\n';
      os << '\n';
    }
    return os.str();
  }

  WorldConfig world() const {
    WorldConfig w;
    w.task = task_kind_from_string(get<std::string>("world", "task"));
    w.shape = {get<int>("world", "height"), get<int>("world", "width"),
               get<int>("world", "channels")};
    w.k_min = get<int>("world", "k_min");
    w.k_max = get<int>("world", "k_max");
    w.palette = get<int>("world", "palette");
    w.radius = get<double>("world", "radius");
    w.margin = get<double>("world", "margin");
    w.min_separation = get<double>("world", "min_separation");
    w.texture = get<double>("world", "texture");
    w.validate();
    return w;
  }

  ScheduleSettings schedule() const {
    ScheduleSettings s{get<int>("schedule", "step_count"),
                       get<double>("schedule", "beta_start"),
                       get<double>("schedule", "beta_end")};
    try {
      (void)s.build();
    } catch (const ParameterError& e) {
      throw ConfigError(std::string("schedule: ") + e.what());
    }
    return s;
  }

  Architecture architecture(TaskKind task, ImageShape shape) const {
    Architecture a;
    a.image = shape;
    a.concept_kind = concept_kind_for(task);
    a.concept_dim = concept_dim_for(task);
    a.hidden = get<int>("architecture", "hidden");
    a.time_embed_dim = get<int>("architecture", "time_embed_dim");
    a.fourier_bands = get<int>("architecture", "fourier_bands");
    a.window_radius = get<double>("architecture", "window_radius");
    a.step_count = get<int>("schedule", "step_count");
    try {
      a.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(std::string("architecture: ") + e.what());
    }
    return a;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.learning_rate = get<double>("train", "learning_rate");
    t.batch_size = get<int>("train", "batch_size");
    t.step_budget = get<int>("train", "step_budget");
    t.optimizer = optimizer_from_string(get<std::string>("train", "optimizer"));
    t.clip_norm = get<double>("train", "clip_norm");
    t.checkpoint_every = get<int>("train", "checkpoint_every");
    t.seed = get<std::uint64_t>("run", "seed");
    t.validate();
    return t;
  }

  InferenceConfig inference() const {
    InferenceConfig c;
    c.sample_count = get<int>("infer", "sample_count");
    c.sgd_steps = get<int>("infer", "sgd_steps");
    c.restarts = get<int>("infer", "restarts");
    c.concept_lr = get<double>("infer", "concept_lr");
    c.warmup_steps = get<int>("infer", "warmup_steps");
    c.lr_final_fraction = get<double>("infer", "lr_final_fraction");
    c.optimizer = concept_optimizer_from_string(get<std::string>("infer", "optimizer"));
    c.k_min = get<int>("infer", "k_min");
    c.k_max = get<int>("infer", "k_max");
    c.prune_cadence = get<int>("infer", "prune_cadence");
    c.prune_fraction = get<double>("infer", "prune_fraction");
    c.prune_decay = get<double>("infer", "prune_decay");
    c.warm_fraction = get<double>("infer", "warm_fraction");
    c.init = init_mode_from_string(get<std::string>("infer", "init"));
    c.sgd_t = {get<int>("infer", "sgd_t_lo"), get<int>("infer", "sgd_t_hi")};
    c.score_t = {get<int>("infer", "score_t_lo"), get<int>("infer", "score_t_hi")};
    c.enumeration_cap = get<int>("infer", "enumeration_cap");
    c.relaxed_init = get<double>("infer", "relaxed_init");
    c.seed = get<std::uint64_t>("run", "seed");
    const double margin = get<double>("world", "margin");
    c.coord_lower = margin;
    c.coord_upper = 1.0 - margin;
    c.validate();
    return c;
  }

 private:
  std::map<std::string, Section> values_;
};

}  // namespace invgen
