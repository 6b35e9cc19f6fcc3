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

#include <json.hpp>

#include "invgen/binary_io.hpp"
#include "invgen/denoiser.hpp"
#include "invgen/schedule.hpp"

namespace invgen {

inline constexpr char kCheckpointMagic[] = "IGCK";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ScheduleSettings {
  int step_count = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;

  NoiseSchedule build() const {
    return make_linear_schedule(step_count, beta_start, beta_end);
  }
  bool operator==(const ScheduleSettings&) const = default;
};

struct Checkpoint {
  DenoiserParams<float> params;
  ScheduleSettings schedule;
  std::uint64_t steps_completed = 0;

  bool operator==(const Checkpoint&) const = default;
};

inline nlohmann::json architecture_to_json(const Architecture& a) {
  return {{"height", a.image.height},
          {"width", a.image.width},
          {"channels", a.image.channels},
          {"concept_dim", a.concept_dim},
          {"concept_kind", std::string(to_string(a.concept_kind))},
          {"time_embed_dim", a.time_embed_dim},
          {"fourier_bands", a.fourier_bands},
          {"hidden", a.hidden},
          {"window_radius", a.window_radius},
          {"step_count", a.step_count}};
}

inline Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  a.image = {j.at("height").get<int>(), j.at("width").get<int>(),
             j.at("channels").get<int>()};
  a.concept_dim = j.at("concept_dim").get<int>();
  a.concept_kind = concept_kind_from_string(j.at("concept_kind").get<std::string>());
  a.time_embed_dim = j.at("time_embed_dim").get<int>();
  a.fourier_bands = j.at("fourier_bands").get<int>();
  a.hidden = j.at("hidden").get<int>();
  a.window_radius = j.at("window_radius").get<double>();
  a.step_count = j.at("step_count").get<int>();
  return a;
}

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  ck.params.validate();
  nlohmann::json header = {
      {"format", "invgen-checkpoint"},
      {"architecture", architecture_to_json(ck.params.arch)},
      {"schedule",
       {{"step_count", ck.schedule.step_count},
        {"beta_start", ck.schedule.beta_start},
        {"beta_end", ck.schedule.beta_end}}},
      {"steps_completed", ck.steps_completed},
      {"parameter_count", ck.params.parameter_count()},
  };
  io::Writer w;
  ck.params.for_each_block([&](const char* name, const auto& m) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(std::strlen(name)));
    w.put_bytes(name);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    w.put_array(m.data(), static_cast<std::size_t>(m.size()));
  });
  return io::frame(std::string_view(kCheckpointMagic, 4), kCheckpointVersion,
                   header.dump(), w.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes,
                                    const std::string& context) {
  const auto framed = io::unframe(bytes, std::string_view(kCheckpointMagic, 4),
                                  kCheckpointVersion, context);
  Checkpoint ck;
  try {
    const auto j = nlohmann::json::parse(framed.header);
    ck.params = DenoiserParams<float>::zeros(architecture_from_json(j.at("architecture")));
    const auto& s = j.at("schedule");
    ck.schedule = {s.at("step_count").get<int>(), s.at("beta_start").get<double>(),
                   s.at("beta_end").get<double>()};
    ck.steps_completed = j.at("steps_completed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError(context + ": header malformed: " + e.what());
  }
  io::Reader r(framed.payload.data(), framed.payload.size(), context);
  ck.params.for_each_block([&](const char* name, auto& m) {
    const auto len = r.get<std::uint32_t>();
    const std::string stored = r.get_bytes(len);
    if (stored != name) {
      throw IoError(context + ": expected block '" + name + "', found '" +
                    stored + "'");
    }
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (rows != static_cast<std::uint64_t>(m.rows()) ||
        cols != static_cast<std::uint64_t>(m.cols())) {
      throw IoError(context + ": block '" + stored +
                    "' shape disagrees with the architecture");
    }
    r.get_array(m.data(), static_cast<std::size_t>(m.size()));
  });
  if (r.remaining() != 0) throw IoError(context + ": trailing payload bytes");
  ck.params.validate();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  io::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(io::read_file(path), "checkpoint '" + path + "'");
}

inline nlohmann::json describe_checkpoint(const std::string& path) {
  const auto bytes = io::read_file(path);
  const auto framed = io::unframe(bytes, std::string_view(kCheckpointMagic, 4),
                                  kCheckpointVersion, "checkpoint '" + path + "'");
  return nlohmann::json::parse(framed.header);
}

}  // namespace invgen
