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

// Procedural blob world: scenes are additive radial bumps on a background,
// with three global binary attributes and a palette that shifts intensities
// between train and test splits.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "invgen/common.hpp"
#include "invgen/concepts.hpp"

namespace invgen {

enum class TaskKind {
  kLocal,    // concepts are object centre coordinates
  kGlobal,   // concepts are binary scene attributes
  kCompose,  // concepts are object kinds drawn from a small vocabulary
};

inline std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kLocal: return "local";
    case TaskKind::kGlobal: return "global";
    case TaskKind::kCompose: return "compose";
  }
  return "?";
}

inline TaskKind task_kind_from_string(std::string_view s) {
  if (s == "local") return TaskKind::kLocal;
  if (s == "global") return TaskKind::kGlobal;
  if (s == "compose") return TaskKind::kCompose;
  throw ConfigError("unknown task kind '" + std::string(s) +
                    "' (expected local, global or compose)");
}

enum class BlobProfile : std::uint32_t { kDisc = 0, kRing = 1, kBar = 2 };

inline constexpr int kProfileCount = 3;

struct ObjectSpec {
  double cx = 0.5;
  double cy = 0.5;
  double radius = 0.12;
  BlobProfile profile = BlobProfile::kDisc;

  bool operator==(const ObjectSpec&) const = default;
};

/// Global attribute bits, in concept-block order.
enum Attribute : int { kLightBackground = 0, kBorder = 1, kRingStyle = 2 };
inline constexpr int kAttributeCount = 3;

struct SceneSpec {
  ImageShape shape;
  std::vector<ObjectSpec> objects;
  std::array<int, kAttributeCount> attributes{0, 0, 0};
  int palette = 0;
  std::uint64_t seed = 0;
  double texture = 0.0;  // amplitude of per-pixel texture noise; 0 disables
  double margin = 0.1;

  bool operator==(const SceneSpec&) const = default;

  void validate() const {
    if (shape.size() <= 0) throw ParameterError("scene: empty image shape");
    if (palette < 0 || palette > 1) {
      throw ParameterError("scene: palette must be 0 or 1");
    }
    for (const auto& o : objects) {
      if (o.cx < margin || o.cx > 1.0 - margin || o.cy < margin ||
          o.cy > 1.0 - margin) {
        throw ParameterError("scene: object centre (" + std::to_string(o.cx) +
                             ", " + std::to_string(o.cy) +
                             ") outside [margin, 1 - margin]");
      }
      if (!(o.radius > 0.0)) throw ParameterError("scene: radius must be > 0");
    }
    for (int a : attributes) {
      if (a != 0 && a != 1) throw ParameterError("scene: attribute bit not 0/1");
    }
    if (texture < 0.0) throw ParameterError("scene: texture amplitude < 0");
  }
};

/// Intensity levels for a palette.
struct Palette {
  double dark_background;
  double light_background;
  double border_level;
  double blob_amplitude;
  std::array<double, 3> channel_gain;
};

inline Palette palette(int id) {
  if (id == 0) return {0.1, 0.45, 0.35, 0.8, {1.0, 0.8, 0.6}};
  return {0.05, 0.55, 0.25, 0.65, {0.6, 0.8, 1.0}};
}

/// Per-channel tint of each blob profile in 3-channel images.
inline constexpr std::array<std::array<double, 3>, 3> kProfileTint = {{
    {1.0, 0.15, 0.15},
    {0.15, 1.0, 0.15},
    {0.15, 0.15, 1.0},
}};

namespace detail {

inline double blob_value(const ObjectSpec& o, double px, double py,
                         bool ring_style) {
  const double sigma = o.radius / 2.0;
  const double dx = px - o.cx, dy = py - o.cy;
  BlobProfile profile = o.profile;
  if (ring_style && profile == BlobProfile::kDisc) profile = BlobProfile::kRing;
  switch (profile) {
    case BlobProfile::kDisc:
      return std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    case BlobProfile::kRing: {
      const double outer = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      const double s2 = sigma * 0.5;
      const double inner = std::exp(-(dx * dx + dy * dy) / (2 * s2 * s2));
      return 1.3 * (outer - 0.8 * inner);
    }
    case BlobProfile::kBar: {
      const double sx = sigma * 1.8, sy = sigma * 0.6;
      return std::exp(-(dx * dx) / (2 * sx * sx) - (dy * dy) / (2 * sy * sy));
    }
  }
  return 0.0;
}

}  // namespace detail

/// Renders a scene: background, optional border frame, additive bumps,
/// optional seeded texture, clipped to [0, 1].
inline Image render_scene(const SceneSpec& spec) {
  spec.validate();
  const auto& sh = spec.shape;
  const Palette pal = palette(spec.palette);
  const double bg = spec.attributes[kLightBackground] ? pal.light_background
                                                      : pal.dark_background;
  const bool ring = spec.attributes[kRingStyle] != 0;
  Image img(sh.size());
  Rng texture_rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int y = 0; y < sh.height; ++y) {
    for (int x = 0; x < sh.width; ++x) {
      const double px = (x + 0.5) / sh.width, py = (y + 0.5) / sh.height;
      double v = bg;
      if (spec.attributes[kBorder] &&
          (x == 0 || y == 0 || x == sh.width - 1 || y == sh.height - 1)) {
        v += pal.border_level;
      }
      std::array<double, 3> blobs{};
      for (const auto& o : spec.objects) {
        const double b = pal.blob_amplitude * detail::blob_value(o, px, py, ring);
        if (sh.channels == 1) {
          v += b;
          continue;
        }
        const auto& tint = kProfileTint[static_cast<int>(o.profile)];
        for (int ch = 0; ch < 3; ++ch) blobs[ch] += b * tint[ch];
      }
      for (int ch = 0; ch < sh.channels; ++ch) {
        double value = sh.channels == 1
                           ? v
                           : v * pal.channel_gain[ch % 3] + blobs[ch % 3];
        if (spec.texture > 0.0) value += spec.texture * normal(texture_rng);
        img[(y * sh.width + x) * sh.channels + ch] =
            std::clamp(value, 0.0, 1.0);
      }
    }
  }
  return img;
}

/// Sampling ranges for one task and split.
struct WorldConfig {
  TaskKind task = TaskKind::kLocal;
  ImageShape shape;
  int k_min = 1;
  int k_max = 2;
  int palette = 0;
  double radius = 0.12;
  double margin = 0.1;
  double min_separation = 0.15;
  double texture = 0.0;
  int max_placement_attempts = 10000;

  void validate() const {
    if (k_min < 0 || k_max < k_min) {
      throw ConfigError("world: require 0 <= k_min <= k_max");
    }
    if (task == TaskKind::kCompose && (k_min < 1 || k_max > kProfileCount)) {
      throw ConfigError("world: compose scenes hold 1..3 distinct kinds");
    }
    if (palette < 0 || palette > 1) throw ConfigError("world: palette 0 or 1");
    if (margin < 0.0 || margin >= 0.5) throw ConfigError("world: bad margin");
  }
};

/// Concepts a scene exposes for its task kind.
inline ConceptSet scene_concepts(const SceneSpec& spec, TaskKind task) {
  ConceptSet set;
  switch (task) {
    case TaskKind::kLocal:
      for (const auto& o : spec.objects) {
        set.concepts.push_back(ConceptVector::coordinate(
            o.cx, o.cy, spec.margin, 1.0 - spec.margin));
      }
      break;
    case TaskKind::kGlobal:
      for (int a = 0; a < kAttributeCount; ++a) {
        set.concepts.push_back(
            ConceptVector::binary_attribute(a, kAttributeCount, spec.attributes[a]));
      }
      break;
    case TaskKind::kCompose:
      for (const auto& o : spec.objects) {
        set.concepts.push_back(ConceptVector::one_hot(
            static_cast<int>(o.profile), kProfileCount));
      }
      break;
  }
  return set;
}

/// Number of objects rendered in a global-task scene.
inline constexpr int kGlobalTaskObjects = 2;

namespace detail {

inline bool place_objects(int count, const WorldConfig& cfg, Rng& rng,
                          std::vector<ObjectSpec>& out) {
  std::uniform_real_distribution<double> u(cfg.margin, 1.0 - cfg.margin);
  out.clear();
  int attempts = 0;
  while (static_cast<int>(out.size()) < count) {
    if (++attempts > cfg.max_placement_attempts) return false;
    ObjectSpec o;
    o.cx = u(rng);
    o.cy = u(rng);
    o.radius = cfg.radius;
    bool ok = true;
    for (const auto& p : out) {
      if (std::hypot(p.cx - o.cx, p.cy - o.cy) < cfg.min_separation) {
        ok = false;
        break;
      }
    }
    if (ok) out.push_back(o);
  }
  return true;
}

}  // namespace detail

/// Draws one scene specification from the world configuration.
inline SceneSpec sample_scene(const WorldConfig& cfg, Rng& rng) {
  cfg.validate();
  SceneSpec s;
  s.shape = cfg.shape;
  s.palette = cfg.palette;
  s.texture = cfg.texture;
  s.margin = cfg.margin;
  s.seed = rng();
  std::uniform_int_distribution<int> k_dist(cfg.k_min, cfg.k_max);
  std::bernoulli_distribution coin(0.5);
  int count = 0;
  switch (cfg.task) {
    case TaskKind::kLocal:
      count = k_dist(rng);
      break;
    case TaskKind::kGlobal:
      for (auto& a : s.attributes) a = coin(rng) ? 1 : 0;
      count = kGlobalTaskObjects;
      break;
    case TaskKind::kCompose:
      count = k_dist(rng);
      break;
  }
  // Retry whole layouts, so an unlucky early placement cannot wedge us.
  bool placed = false;
  for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
    placed = detail::place_objects(count, cfg, rng, s.objects);
  }
  if (!placed) {
    throw ConfigError("world: cannot place " + std::to_string(count) +
                      " objects with minimum separation " +
                      std::to_string(cfg.min_separation));
  }
  if (cfg.task == TaskKind::kCompose) {
    std::array<int, kProfileCount> kinds{0, 1, 2};
    std::shuffle(kinds.begin(), kinds.end(), rng);
    std::sort(kinds.begin(), kinds.begin() + count);
    for (int i = 0; i < count; ++i) {
      s.objects[i].profile = static_cast<BlobProfile>(kinds[i]);
    }
  }
  return s;
}

}  // namespace invgen
