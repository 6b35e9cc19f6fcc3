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

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "invgen/binary_io.hpp"
#include "invgen/concepts.hpp"
#include "invgen/world.hpp"

namespace invgen {

inline constexpr char kDatasetMagic[] = "IGDS";
inline constexpr std::uint32_t kDatasetVersion = 1;

struct SplitDescriptor {
  std::string name = "train";
  int palette = 0;
  int k_min = 1;
  int k_max = 2;
  bool disjoint_from_train = false;

  bool operator==(const SplitDescriptor&) const = default;
};

struct DatasetHeader {
  std::uint32_t version = kDatasetVersion;
  ImageShape shape;
  TaskKind task = TaskKind::kLocal;
  ConceptKind concept_kind = ConceptKind::kCoordinate;
  int concept_dim = 2;
  SplitDescriptor split;
  std::uint64_t seed = 0;
  std::size_t record_count = 0;

  bool operator==(const DatasetHeader&) const = default;
};

struct SceneRecord {
  Vec<float> image;
  ConceptSet concepts;
  SceneSpec spec;

  bool operator==(const SceneRecord& o) const {
    return image.size() == o.image.size() &&
           (image.array() == o.image.array()).all() && concepts == o.concepts &&
           spec == o.spec;
  }
};

struct SceneDataset {
  DatasetHeader header;
  std::vector<SceneRecord> records;

  std::size_t size() const { return records.size(); }
  bool operator==(const SceneDataset&) const = default;

  /// Every record's concepts match its spec, and the header schema matches.
  void validate() const {
    if (header.record_count != records.size()) {
      throw ParameterError("dataset: header record count " +
                           std::to_string(header.record_count) +
                           " != stored records " +
                           std::to_string(records.size()));
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      if (r.image.size() != header.shape.size() || !(r.spec.shape == header.shape)) {
        throw ShapeError("dataset: record " + std::to_string(i) +
                         " image shape differs from header");
      }
      if (!(scene_concepts(r.spec, header.task) == r.concepts)) {
        throw ParameterError("dataset: record " + std::to_string(i) +
                             " concepts do not match its scene spec");
      }
      for (const auto& c : r.concepts.concepts) {
        if (c.kind != header.concept_kind || c.dim() != header.concept_dim) {
          throw ParameterError("dataset: record " + std::to_string(i) +
                               " concept schema differs from header");
        }
      }
    }
  }
};

inline ConceptKind concept_kind_for(TaskKind task) {
  switch (task) {
    case TaskKind::kLocal: return ConceptKind::kCoordinate;
    case TaskKind::kGlobal: return ConceptKind::kOneHotLabel;
    case TaskKind::kCompose: return ConceptKind::kEmbedding;
  }
  return ConceptKind::kCoordinate;
}

inline int concept_dim_for(TaskKind task) {
  switch (task) {
    case TaskKind::kLocal: return 2;
    case TaskKind::kGlobal: return 2 * kAttributeCount;
    case TaskKind::kCompose: return kProfileCount;
  }
  return 2;
}

inline SceneRecord make_record(const SceneSpec& spec, TaskKind task) {
  SceneRecord r;
  r.spec = spec;
  r.image = render_scene(spec).cast<float>();
  r.concepts = scene_concepts(spec, task);
  return r;
}

/// Draws `count` scenes with per-record derived seeds.
inline SceneDataset sample_dataset(const WorldConfig& cfg, std::size_t count,
                                   std::uint64_t seed,
                                   const std::string& split_name = "train") {
  if (count < 1) throw ParameterError("sample_dataset: count must be >= 1");
  cfg.validate();
  SceneDataset ds;
  ds.header.shape = cfg.shape;
  ds.header.task = cfg.task;
  ds.header.concept_kind = concept_kind_for(cfg.task);
  ds.header.concept_dim = concept_dim_for(cfg.task);
  ds.header.split = {split_name, cfg.palette, cfg.k_min, cfg.k_max, false};
  ds.header.seed = seed;
  ds.records.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, i));
    ds.records.push_back(make_record(sample_scene(cfg, rng), cfg.task));
  }
  ds.header.record_count = ds.records.size();
  return ds;
}

/// True when two splits differ in palette or have non-overlapping K ranges.
inline bool splits_disjoint(const SplitDescriptor& a, const SplitDescriptor& b) {
  const bool k_overlap = !(a.k_max < b.k_min || b.k_max < a.k_min);
  return a.palette != b.palette || !k_overlap;
}

namespace detail {

inline nlohmann::json header_to_json(const DatasetHeader& h) {
  return {
      {"format", "invgen-dataset"},
      {"version", h.version},
      {"height", h.shape.height},
      {"width", h.shape.width},
      {"channels", h.shape.channels},
      {"task", std::string(to_string(h.task))},
      {"concept_kind", std::string(to_string(h.concept_kind))},
      {"concept_dim", h.concept_dim},
      {"split",
       {{"name", h.split.name},
        {"palette", h.split.palette},
        {"k_min", h.split.k_min},
        {"k_max", h.split.k_max},
        {"disjoint_from_train", h.split.disjoint_from_train}}},
      {"seed", h.seed},
      {"record_count", h.record_count},
  };
}

inline DatasetHeader header_from_json(const nlohmann::json& j) {
  DatasetHeader h;
  try {
    h.version = j.at("version").get<std::uint32_t>();
    h.shape = {j.at("height").get<int>(), j.at("width").get<int>(),
               j.at("channels").get<int>()};
    h.task = task_kind_from_string(j.at("task").get<std::string>());
    h.concept_kind =
        concept_kind_from_string(j.at("concept_kind").get<std::string>());
    h.concept_dim = j.at("concept_dim").get<int>();
    const auto& s = j.at("split");
    h.split = {s.at("name").get<std::string>(), s.at("palette").get<int>(),
               s.at("k_min").get<int>(), s.at("k_max").get<int>(),
               s.at("disjoint_from_train").get<bool>()};
    h.seed = j.at("seed").get<std::uint64_t>();
    h.record_count = j.at("record_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset header malformed: ") + e.what());
  }
  return h;
}

}  // namespace detail

inline std::vector<char> encode_dataset(const SceneDataset& ds) {
  io::Writer w;
  for (const auto& r : ds.records) {
    const auto& s = r.spec;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.objects.size()));
    for (const auto& o : s.objects) {
      w.put<double>(o.cx);
      w.put<double>(o.cy);
      w.put<double>(o.radius);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(o.profile));
    }
    for (int a : s.attributes) w.put<std::uint8_t>(static_cast<std::uint8_t>(a));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.palette));
    w.put<std::uint64_t>(s.seed);
    w.put<double>(s.texture);
    w.put<double>(s.margin);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(r.concepts.size()));
    for (const auto& c : r.concepts.concepts) {
      w.put_array(c.values.data(), static_cast<std::size_t>(c.dim()));
    }
    w.put_array(r.image.data(), static_cast<std::size_t>(r.image.size()));
  }
  return io::frame(std::string_view(kDatasetMagic, 4), ds.header.version,
                   detail::header_to_json(ds.header).dump(), w.bytes());
}

inline SceneDataset decode_dataset(const std::vector<char>& bytes,
                                   const std::string& context) {
  const auto framed =
      io::unframe(bytes, std::string_view(kDatasetMagic, 4), kDatasetVersion, context);
  SceneDataset ds;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(framed.header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(context + ": header is not valid JSON: " + e.what());
  }
  ds.header = detail::header_from_json(j);
  io::Reader r(framed.payload.data(), framed.payload.size(), context);
  const int dim = ds.header.concept_dim;
  for (std::size_t i = 0; i < ds.header.record_count; ++i) {
    SceneRecord rec;
    auto& s = rec.spec;
    s.shape = ds.header.shape;
    const auto n_obj = r.get<std::uint32_t>();
    s.objects.resize(n_obj);
    for (auto& o : s.objects) {
      o.cx = r.get<double>();
      o.cy = r.get<double>();
      o.radius = r.get<double>();
      o.profile = static_cast<BlobProfile>(r.get<std::uint32_t>());
    }
    for (int& a : s.attributes) a = r.get<std::uint8_t>();
    s.palette = static_cast<int>(r.get<std::uint32_t>());
    s.seed = r.get<std::uint64_t>();
    s.texture = r.get<double>();
    s.margin = r.get<double>();
    const auto k = r.get<std::uint32_t>();
    // Bounds are part of the schema, so rebuild concepts from the spec and
    // then overwrite the stored values.
    rec.concepts = scene_concepts(s, ds.header.task);
    if (rec.concepts.size() != static_cast<int>(k)) {
      throw IoError(context + ": record " + std::to_string(i) +
                    " concept count disagrees with its scene spec");
    }
    for (auto& c : rec.concepts.concepts) {
      if (c.dim() != dim) throw IoError(context + ": concept dimension mismatch");
      r.get_array(c.values.data(), static_cast<std::size_t>(dim));
    }
    rec.image.resize(ds.header.shape.size());
    r.get_array(rec.image.data(), static_cast<std::size_t>(rec.image.size()));
    ds.records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) {
    throw IoError(context + ": " + std::to_string(r.remaining()) +
                  " unexpected trailing payload bytes");
  }
  ds.validate();
  return ds;
}

inline void save_dataset(const SceneDataset& ds, const std::string& path) {
  io::write_file(path, encode_dataset(ds));
}

inline SceneDataset load_dataset(const std::string& path) {
  return decode_dataset(io::read_file(path), "dataset '" + path + "'");
}

/// Header only, for `describe`.
inline nlohmann::json describe_dataset(const std::string& path) {
  const auto bytes = io::read_file(path);
  const auto framed = io::unframe(bytes, std::string_view(kDatasetMagic, 4),
                                  kDatasetVersion, "dataset '" + path + "'");
  return nlohmann::json::parse(framed.header);
}

}  // namespace invgen
