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

// invgen: dataset generation, training, inference, evaluation and sweeps.
//
//   invgen gen      --config run.ini --out data/
//   invgen train    --config run.ini --set train.dataset=data/dataset.igds
//   invgen infer    --config run.ini --jobs 4
//   invgen eval     --config run.ini
//   invgen sweep    --config run.ini
//   invgen describe model.igck
//
// Every run writes resolved.ini into its output directory.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "invgen/checkpoint.hpp"
#include "invgen/config.hpp"
#include "invgen/dataset.hpp"
#include "invgen/eval.hpp"
#include "invgen/infer.hpp"
#include "invgen/train.hpp"

namespace fs = std::filesystem;
using namespace invgen;

namespace {

enum ExitCode : int {
  kExitOk = 0,
  kExitUnexpected = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitNumeric = 4,
  kExitParameter = 5,
};

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> jobs;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config,-c", o.config, "INI configuration file");
  app->add_option("--seed", o.seed, "Master seed (overrides run.seed)");
  app->add_option("--out,-o", o.out, "Output directory (overrides run.out)");
  app->add_option("--jobs,-j", o.jobs, "Worker threads (overrides run.jobs)")
      ->check(CLI::PositiveNumber);
  app->add_option("--set", o.overrides, "Override as section.key=value")
      ->take_all();
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig cfg;
  if (!o.config.empty()) cfg.load_file(o.config);
  for (const auto& s : o.overrides) cfg.apply_override(s);
  if (o.seed) cfg.set("run", "seed", std::to_string(*o.seed), "--seed");
  if (!o.out.empty()) cfg.set("run", "out", o.out, "--out");
  if (o.jobs) cfg.set("run", "jobs", std::to_string(*o.jobs), "--jobs");
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read '" + path.string() + "'");
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

fs::path prepare_out(const RunConfig& cfg) {
  const fs::path out = cfg.get<std::string>("run", "out");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create '" + out.string() + "': " + ec.message());
  write_text(out / "resolved.ini", cfg.echo());
  return out;
}

std::string required(const RunConfig& cfg, const std::string& section,
                     const std::string& key) {
  const auto v = cfg.get<std::string>(section, key);
  if (v.empty()) throw ConfigError(section + "." + key + " is required");
  return v;
}

std::string scene_name(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu.%s", i, ext);
  return buf;
}

/// Runs f(i) for i in [0, n) on `jobs` threads. Results must not depend on
/// which thread runs which index; the first exception is rethrown.
template <typename F>
void parallel_for(std::size_t n, int jobs, F&& f) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      {
        std::lock_guard<std::mutex> lock(mu);
        if (failure) return;
      }
      try {
        f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const int t = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  std::vector<std::thread> pool;
  for (int k = 1; k < t; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------- overlays

constexpr int kOverlayScale = 8;

struct Rgb {
  unsigned char r, g, b;
};

/// Upscaled grayscale rendering with truth marked by green plus signs and
/// predictions by red diagonal crosses, each spanning 3x3 source pixels.
std::string overlay_ppm(const Image& img, const ImageShape& shape,
                        const std::vector<Point2>& truth,
                        const std::vector<Point2>& predicted) {
  const int W = shape.width * kOverlayScale, H = shape.height * kOverlayScale;
  std::vector<Rgb> px(static_cast<std::size_t>(W) * H);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int sx = x / kOverlayScale, sy = y / kOverlayScale;
      double v = 0.0;
      for (int c = 0; c < shape.channels; ++c) {
        v += img[(sy * shape.width + sx) * shape.channels + c];
      }
      const auto g = static_cast<unsigned char>(
          std::clamp(v / shape.channels, 0.0, 1.0) * 255.0 + 0.5);
      px[static_cast<std::size_t>(y) * W + x] = {g, g, g};
    }
  }
  auto put = [&](int x, int y, Rgb c) {
    if (x >= 0 && y >= 0 && x < W && y < H) px[static_cast<std::size_t>(y) * W + x] = c;
  };
  const int arm = 3 * kOverlayScale / 2;
  for (const auto& p : truth) {
    const int cx = static_cast<int>(p[0] * W), cy = static_cast<int>(p[1] * H);
    for (int d = -arm; d <= arm; ++d) {
      put(cx + d, cy, {0, 220, 0});
      put(cx, cy + d, {0, 220, 0});
    }
  }
  for (const auto& p : predicted) {
    const int cx = static_cast<int>(p[0] * W), cy = static_cast<int>(p[1] * H);
    for (int d = -arm; d <= arm; ++d) {
      put(cx + d, cy + d, {230, 0, 0});
      put(cx + d, cy - d, {230, 0, 0});
    }
  }
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (const auto& c : px) {
    out.push_back(static_cast<char>(c.r));
    out.push_back(static_cast<char>(c.g));
    out.push_back(static_cast<char>(c.b));
  }
  return out;
}

std::vector<Point2> points_of(const ConceptSet& set) {
  std::vector<Point2> out;
  for (const auto& c : set.concepts) out.push_back({c.values[0], c.values[1]});
  return out;
}

std::vector<Point2> points_of(const nlohmann::json& concepts) {
  std::vector<Point2> out;
  for (const auto& c : concepts) {
    const auto v = c.at("values").get<std::vector<double>>();
    if (v.size() != 2) throw IoError("report: coordinate concept is not 2-D");
    out.push_back({v[0], v[1]});
  }
  return out;
}

// --------------------------------------------------------------- inference

using Model = MlpDenoiser<float>;

struct Loaded {
  Checkpoint ck;
  SceneDataset ds;
  NoiseSchedule schedule;
};

Loaded load_inputs(const RunConfig& cfg) {
  Loaded in{load_checkpoint(required(cfg, "infer", "checkpoint")),
            load_dataset(required(cfg, "infer", "dataset")), make_default_schedule()};
  in.schedule = in.ck.schedule.build();
  const auto& a = in.ck.params.arch;
  if (!(a.image == in.ds.header.shape) || a.concept_dim != in.ds.header.concept_dim) {
    throw ConfigError("checkpoint and dataset disagree on image shape or concept size");
  }
  return in;
}

std::size_t scene_limit(const RunConfig& cfg, const SceneDataset& ds) {
  const int n = cfg.get<int>("infer", "scenes");
  if (n < 0) throw ConfigError("infer.scenes must be >= 0");
  return n == 0 ? ds.size() : std::min<std::size_t>(ds.size(), n);
}

InferenceReport run_algorithm(const std::string& algorithm, const Model& model,
                              const SceneRecord& rec, TaskKind task,
                              const NoiseSchedule& schedule,
                              const InferenceConfig& icfg, int k_override,
                              int pick_count) {
  const Image x = rec.image.cast<double>();
  auto require = [&](TaskKind want) {
    if (task != want) {
      throw ConfigError("algorithm '" + algorithm + "' needs a " +
                        std::string(to_string(want)) + " task dataset");
    }
  };
  if (algorithm == "count") {
    require(TaskKind::kLocal);
    return infer_concept_count(model, x, schedule, icfg);
  }
  if (algorithm == "continuous") {
    require(TaskKind::kLocal);
    const int K = k_override > 0 ? k_override : rec.concepts.size();
    return infer_continuous_sgd(model, x, K, schedule, icfg);
  }
  if (algorithm == "enumerate") {
    require(TaskKind::kGlobal);
    return infer_discrete_enumerate(model, x, binary_attribute_vocabulary(kAttributeCount),
                                    schedule, icfg);
  }
  if (algorithm == "relaxed") {
    require(TaskKind::kGlobal);
    return infer_discrete_relaxed(model, x, kAttributeCount, schedule, icfg);
  }
  if (algorithm == "weighted") {
    require(TaskKind::kCompose);
    std::vector<ConceptVector> vocab;
    for (int i = 0; i < kProfileCount; ++i) vocab.push_back(ConceptVector::one_hot(i, kProfileCount));
    return infer_weighted_composition(model, x, vocab, pick_count, schedule, icfg);
  }
  throw ConfigError("unknown infer.algorithm '" + algorithm +
                    "' (count, continuous, enumerate, relaxed, weighted)");
}

/// Ground-truth labels in the form each discrete algorithm reports.
std::vector<int> truth_labels(const SceneSpec& spec, TaskKind task) {
  std::vector<int> out;
  if (task == TaskKind::kGlobal) {
    out.assign(spec.attributes.begin(), spec.attributes.end());
  } else if (task == TaskKind::kCompose) {
    for (const auto& o : spec.objects) out.push_back(static_cast<int>(o.profile));
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
  }
  return out;
}

// ---------------------------------------------------------------- commands

int cmd_gen(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const WorldConfig world = cfg.world();
  const int count = cfg.get<int>("world", "count");
  if (count < 1) throw ConfigError("world.count must be >= 1");
  const auto seed = cfg.get<std::uint64_t>("run", "seed");
  SceneDataset ds = sample_dataset(world, static_cast<std::size_t>(count), seed,
                                   cfg.get<std::string>("world", "split"));
  ds.header.split.disjoint_from_train = cfg.get<bool>("world", "disjoint_from_train");
  const fs::path out = prepare_out(cfg);
  save_dataset(ds, (out / "dataset.igds").string());
  std::cout << "wrote " << ds.size() << " scenes to " << (out / "dataset.igds").string()
            << '\n';
  return kExitOk;
}

int cmd_train(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const SceneDataset ds = load_dataset(required(cfg, "train", "dataset"));
  const ScheduleSettings sched = cfg.schedule();
  const Architecture arch = cfg.architecture(ds.header.task, ds.header.shape);
  const TrainConfig tc = cfg.train();
  const fs::path out = prepare_out(cfg);
  const auto init = DenoiserParams<float>::initialize(arch, derive_seed(tc.seed, 1));
  auto hook = [&](int step, const DenoiserParams<float>& p) {
    save_checkpoint({p, sched, static_cast<std::uint64_t>(step)},
                    (out / ("checkpoint_step" + std::to_string(step) + ".igck")).string());
  };
  const TrainReport rep = train_loop(init, to_examples(ds), sched.build(), tc, hook);
  save_checkpoint({rep.params, sched, static_cast<std::uint64_t>(rep.steps_completed)},
                  (out / "model.igck").string());
  std::ostringstream csv;
  csv.precision(17);
  csv << "step,loss\n";
  for (std::size_t i = 0; i < rep.losses.size(); ++i) csv << i << ',' << rep.losses[i] << '\n';
  write_text(out / "loss.csv", csv.str());
  const auto tail = smooth(rep.losses, 100);
  std::cout << "trained " << rep.steps_completed << " steps in " << rep.seconds
            << " s; smoothed final loss " << tail.back() << '\n';
  return kExitOk;
}

int cmd_infer(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const Loaded in = load_inputs(cfg);
  const InferenceConfig base = cfg.inference();
  const auto algorithm = cfg.get<std::string>("infer", "algorithm");
  const int k_override = cfg.get<int>("infer", "k");
  const int pick_count = cfg.get<int>("infer", "pick_count");
  const bool overlay = cfg.get<bool>("infer", "overlay");
  const auto seed = cfg.get<std::uint64_t>("run", "seed");
  const std::size_t n = scene_limit(cfg, in.ds);
  const fs::path out = prepare_out(cfg);
  fs::create_directories(out / "reports");
  if (overlay && in.ds.header.task == TaskKind::kLocal) {
    fs::create_directories(out / "overlays");
  }
  const Model model(in.ck.params);
  std::vector<double> seconds(n, 0.0);
  parallel_for(n, cfg.get<int>("run", "jobs"), [&](std::size_t i) {
    const auto& rec = in.ds.records[i];
    InferenceConfig icfg = base;
    icfg.seed = derive_seed(seed, i);
    const auto rep = run_algorithm(algorithm, model, rec, in.ds.header.task, in.schedule,
                                   icfg, k_override, pick_count);
    seconds[i] = rep.seconds;
    nlohmann::json j = {{"scene", i},
                        {"task", std::string(to_string(in.ds.header.task))},
                        {"truth", to_json(rec.concepts)},
                        {"report", to_json(rep, icfg)}};
    const auto labels = truth_labels(rec.spec, in.ds.header.task);
    if (!labels.empty()) j["truth_labels"] = labels;
    write_text(out / "reports" / scene_name(i, "json"), j.dump(2) + "\n");
    if (overlay && in.ds.header.task == TaskKind::kLocal) {
      write_text(out / "overlays" / scene_name(i, "ppm"),
                 overlay_ppm(rec.image.cast<double>(), in.ds.header.shape,
                             points_of(rec.concepts), points_of(rep.chosen)));
    }
  });
  double total = 0.0;
  for (double s : seconds) total += s;
  std::cout << "inferred " << n << " scenes with '" << algorithm << "' in " << total
            << " s of search time\n";
  return kExitOk;
}

MetricsReport evaluate_reports(const fs::path& dir, const SceneDataset& ds,
                               const PerceptionOptions& opt) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) throw IoError("no report directory '" + dir.string() + "'");
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  if (files.empty()) throw IoError("no reports in '" + dir.string() + "'");
  std::sort(files.begin(), files.end());
  std::vector<std::vector<Point2>> pred, truth;
  std::vector<std::vector<int>> pred_labels, truth_lab;
  const TaskKind task = ds.header.task;
  for (const auto& f : files) {
    const auto j = read_json(f);
    const auto idx = j.at("scene").get<std::size_t>();
    if (idx >= ds.size()) {
      throw IoError("'" + f.string() + "' refers to scene " + std::to_string(idx) +
                    " beyond the dataset");
    }
    const auto& rep = j.at("report");
    if (task == TaskKind::kLocal) {
      pred.push_back(points_of(rep.at("chosen")));
      truth.push_back(points_of(ds.records[idx].concepts));
    } else {
      pred_labels.push_back(rep.at("labels").get<std::vector<int>>());
      truth_lab.push_back(truth_labels(ds.records[idx].spec, task));
    }
  }
  if (task == TaskKind::kLocal) return perception_metrics(pred, truth, opt);
  MetricsReport m;
  m.multi_label_accuracy = multi_label_accuracy(pred_labels, truth_lab);
  for (std::size_t s = 0; s < truth_lab.size(); ++s) {
    SceneMetrics sm;
    sm.scene_id = static_cast<int>(s);
    sm.objects = 1;
    sm.predicted = 1;
    sm.matched = 1;
    sm.discovered = pred_labels[s] == truth_lab[s] ? 1 : 0;
    m.scenes.push_back(sm);
    m.objects += 1;
    m.discovered += sm.discovered;
  }
  m.perception_rate = static_cast<double>(m.discovered) / m.objects;
  return m;
}

int cmd_eval(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const SceneDataset ds = load_dataset(required(cfg, "eval", "dataset"));
  PerceptionOptions opt;
  opt.threshold = cfg.get<double>("eval", "threshold");
  opt.sentinel = {cfg.get<double>("eval", "sentinel_x"), cfg.get<double>("eval", "sentinel_y")};
  const auto m = evaluate_reports(required(cfg, "eval", "reports"), ds, opt);
  const fs::path out = prepare_out(cfg);
  std::ostringstream csv;
  write_metrics_csv(csv, m);
  write_text(out / "metrics.csv", csv.str());
  nlohmann::json j = {{"perception_rate", m.perception_rate},
                      {"estimation_error", m.estimation_error},
                      {"objects", m.objects},
                      {"discovered", m.discovered},
                      {"threshold", opt.threshold}};
  if (m.multi_label_accuracy) j["multi_label_accuracy"] = *m.multi_label_accuracy;
  write_text(out / "metrics.json", j.dump(2) + "\n");
  std::cout << j.dump() << '\n';
  return kExitOk;
}

int cmd_sweep(const CommonOptions& o) {
  const RunConfig cfg = resolve(o);
  const Loaded in = load_inputs(cfg);
  if (in.ds.header.task != TaskKind::kLocal) {
    throw ConfigError("sweep runs continuous inference on a local task dataset");
  }
  const auto restarts = cfg.get_list<int>("sweep", "restarts");
  const auto seeds = cfg.get_list<std::uint64_t>("sweep", "seeds");
  const int k_override = cfg.get<int>("sweep", "k");
  const InferenceConfig base = cfg.inference();
  const std::size_t n = scene_limit(cfg, in.ds);
  PerceptionOptions opt;
  opt.threshold = cfg.get<double>("eval", "threshold");
  opt.sentinel = {cfg.get<double>("eval", "sentinel_x"), cfg.get<double>("eval", "sentinel_y")};
  const fs::path out = prepare_out(cfg);
  const Model model(in.ck.params);

  // One work item per (restarts, seed, scene). Per-scene seeds depend only
  // on (seed, scene), so runs with different R share their random draws.
  const std::size_t cells = restarts.size() * seeds.size();
  std::vector<std::vector<Point2>> pred(cells * n);
  parallel_for(cells * n, cfg.get<int>("run", "jobs"), [&](std::size_t item) {
    const std::size_t cell = item / n, i = item % n;
    InferenceConfig icfg = base;
    icfg.restarts = restarts[cell / seeds.size()];
    icfg.seed = derive_seed(seeds[cell % seeds.size()], i);
    const auto rep = run_algorithm("continuous", model, in.ds.records[i], TaskKind::kLocal,
                                   in.schedule, icfg, k_override, 0);
    pred[item] = points_of(rep.chosen);
  });
  std::vector<std::vector<Point2>> truth;
  for (std::size_t i = 0; i < n; ++i) truth.push_back(points_of(in.ds.records[i].concepts));
  std::ostringstream csv;
  csv.precision(17);
  csv << "restarts,seed,scenes,perception_rate,estimation_error\n";
  for (std::size_t cell = 0; cell < cells; ++cell) {
    std::vector<std::vector<Point2>> p(pred.begin() + cell * n, pred.begin() + (cell + 1) * n);
    const auto m = perception_metrics(p, truth, opt);
    csv << restarts[cell / seeds.size()] << ',' << seeds[cell % seeds.size()] << ',' << n
        << ',' << m.perception_rate << ',' << m.estimation_error << '\n';
  }
  write_text(out / "sweep.csv", csv.str());
  std::cout << csv.str();
  return kExitOk;
}

int cmd_describe(const std::string& path) {
  const auto bytes = io::read_file(path);
  if (bytes.size() < 4) throw IoError("'" + path + "' is too short to hold a header");
  const std::string magic(bytes.data(), 4);
  nlohmann::json j;
  if (magic == std::string(kDatasetMagic, 4)) {
    j = describe_dataset(path);
  } else if (magic == std::string(kCheckpointMagic, 4)) {
    j = describe_checkpoint(path);
  } else {
    throw IoError("'" + path + "' is neither a dataset nor a checkpoint");
  }
  std::cout << j.dump(2) << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inverse inference with composed diffusion denoisers"};
  app.require_subcommand(1);
  CommonOptions gen_o, train_o, infer_o, eval_o, sweep_o;
  add_common(app.add_subcommand("gen", "Sample a scene dataset"), gen_o);
  add_common(app.add_subcommand("train", "Train a denoiser on a dataset"), train_o);
  add_common(app.add_subcommand("infer", "Infer concepts for each scene"), infer_o);
  add_common(app.add_subcommand("eval", "Score inference reports"), eval_o);
  add_common(app.add_subcommand("sweep", "Perception rate across restart counts"), sweep_o);
  std::string describe_path;
  app.add_subcommand("describe", "Print a dataset or checkpoint header")
      ->add_option("file", describe_path, "Dataset or checkpoint")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  try {
    if (app.got_subcommand("gen")) return cmd_gen(gen_o);
    if (app.got_subcommand("train")) return cmd_train(train_o);
    if (app.got_subcommand("infer")) return cmd_infer(infer_o);
    if (app.got_subcommand("eval")) return cmd_eval(eval_o);
    if (app.got_subcommand("sweep")) return cmd_sweep(sweep_o);
    if (app.got_subcommand("describe")) return cmd_describe(describe_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitParameter;
  } catch (const std::exception& e) {
    std::cerr << "unexpected failure: " << e.what() << '\n';
    return kExitUnexpected;
  }
  return kExitUnexpected;
}
