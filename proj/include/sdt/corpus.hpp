#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdt/dataset.hpp"

namespace sdt {

/// Sidecar for a corpus file: split membership by maze seed, the normalizer
/// fit on the training split, and bookkeeping counters.
struct CorpusManifest {
  std::vector<std::uint64_t> train_seeds, val_seeds, test_seeds;
  NormStats norm;
  std::uint64_t zero_velocity_warnings = 0;
  std::uint64_t rejected_mazes = 0;
  int maze_width = 0;
  int maze_height = 0;
  std::uint64_t base_seed = 0;
};

namespace detail {

inline nlohmann::json record_to_json(const TrajectoryRecord& rec) {
  nlohmann::json j;
  j["seed"] = rec.seed;
  j["width"] = rec.width;
  j["height"] = rec.height;
  auto states = nlohmann::json::array();
  for (const auto& s : rec.trajectory.states) states.push_back({s[0], s[1]});
  j["states"] = std::move(states);
  j["actions"] = rec.trajectory.actions;
  j["rewards"] = rec.trajectory.rewards;
  j["returns_to_go"] = rec.trajectory.returns_to_go;
  return j;
}

inline TrajectoryRecord record_from_json(const nlohmann::json& j) {
  TrajectoryRecord rec;
  rec.seed = j.at("seed").get<std::uint64_t>();
  rec.width = j.at("width").get<int>();
  rec.height = j.at("height").get<int>();
  for (const auto& s : j.at("states")) {
    rec.trajectory.states.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
  }
  rec.trajectory.actions = j.at("actions").get<std::vector<int>>();
  rec.trajectory.rewards = j.at("rewards").get<std::vector<double>>();
  rec.trajectory.returns_to_go = j.at("returns_to_go").get<std::vector<double>>();
  return rec;
}

}  // namespace detail

inline void write_corpus(const std::filesystem::path& path,
                         const std::vector<TrajectoryRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_corpus: cannot open " + path.string());
  for (const auto& rec : records) out << detail::record_to_json(rec).dump() << '\n';
}

inline std::vector<TrajectoryRecord> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_corpus: cannot open " + path.string());
  std::vector<TrajectoryRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(detail::record_from_json(nlohmann::json::parse(line)));
      validate_trajectory(records.back().trajectory);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (records.empty()) throw std::runtime_error("read_corpus: " + path.string() + " is empty");
  return records;
}

inline void write_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
  nlohmann::json j;
  j["splits"]["train"] = m.train_seeds;
  j["splits"]["val"] = m.val_seeds;
  j["splits"]["test"] = m.test_seeds;
  j["norm_stats"]["mu"] = m.norm.mu;
  j["norm_stats"]["sigma"] = m.norm.sigma;
  j["norm_stats"]["epsilon"] = m.norm.epsilon;
  j["zero_velocity_warnings"] = m.zero_velocity_warnings;
  j["rejected_mazes"] = m.rejected_mazes;
  j["maze"]["width"] = m.maze_width;
  j["maze"]["height"] = m.maze_height;
  j["maze"]["base_seed"] = m.base_seed;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_manifest: cannot open " + path.string());
  out << j.dump(2) << '\n';
}

inline CorpusManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_manifest: cannot open " + path.string());
  nlohmann::json j;
  in >> j;
  CorpusManifest m;
  m.train_seeds = j.at("splits").at("train").get<std::vector<std::uint64_t>>();
  m.val_seeds = j.at("splits").at("val").get<std::vector<std::uint64_t>>();
  m.test_seeds = j.at("splits").at("test").get<std::vector<std::uint64_t>>();
  m.norm.mu = j.at("norm_stats").at("mu").get<std::array<double, 2>>();
  m.norm.sigma = j.at("norm_stats").at("sigma").get<std::array<double, 2>>();
  m.norm.epsilon = j.at("norm_stats").at("epsilon").get<double>();
  m.zero_velocity_warnings = j.at("zero_velocity_warnings").get<std::uint64_t>();
  m.rejected_mazes = j.at("rejected_mazes").get<std::uint64_t>();
  m.maze_width = j.at("maze").at("width").get<int>();
  m.maze_height = j.at("maze").at("height").get<int>();
  m.base_seed = j.at("maze").at("base_seed").get<std::uint64_t>();
  return m;
}

/// Regroups corpus records into splits using the manifest's seed lists.
inline SplitIndices resolve_splits(const std::vector<TrajectoryRecord>& records,
                                   const CorpusManifest& manifest) {
  std::unordered_map<std::uint64_t, int> where;
  for (auto s : manifest.train_seeds) where[s] = 0;
  for (auto s : manifest.val_seeds) where[s] = 1;
  for (auto s : manifest.test_seeds) where[s] = 2;
  SplitIndices split;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto it = where.find(records[i].seed);
    if (it == where.end()) {
      throw std::runtime_error("resolve_splits: seed " + std::to_string(records[i].seed) +
                               " missing from manifest");
    }
    if (it->second == 0) split.train.push_back(i);
    else if (it->second == 1) split.val.push_back(i);
    else split.test.push_back(i);
  }
  return split;
}

/// Reads the line-delimited interchange format: per line `states` (list of
/// [x,y]) plus either explicit `actions` or `velocities` to discretize, and
/// `rewards`. Returns-to-go are recomputed from the full reward sequence;
/// overlong episodes keep their first 100 steps (with the true suffix sums).
inline std::vector<TrajectoryRecord> read_interchange(const std::filesystem::path& path,
                                                      std::uint64_t* zero_velocity_warnings) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_interchange: cannot open " + path.string());
  std::vector<TrajectoryRecord> records;
  std::uint64_t warnings = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const auto j = nlohmann::json::parse(line);
      TrajectoryRecord rec;
      rec.seed = static_cast<std::uint64_t>(records.size());
      for (const auto& s : j.at("states")) {
        rec.trajectory.states.push_back({s.at(0).get<double>(), s.at(1).get<double>()});
      }
      if (rec.trajectory.states.empty()) throw std::runtime_error("record has no states");

      const bool has_actions = j.contains("actions");
      const bool has_velocities = j.contains("velocities");
      if (has_actions == has_velocities) {
        throw std::runtime_error("record needs exactly one of 'actions' or 'velocities'");
      }
      if (has_actions) {
        rec.trajectory.actions = j.at("actions").get<std::vector<int>>();
        for (int a : rec.trajectory.actions) {
          if (a < 0 || a >= kNumActions) throw std::runtime_error("action out of range");
        }
      } else {
        for (const auto& v : j.at("velocities")) {
          bool zero = false;
          rec.trajectory.actions.push_back(
              discretize_velocity(v.at(0).get<double>(), v.at(1).get<double>(), &zero));
          if (zero) ++warnings;
        }
      }
      rec.trajectory.rewards = j.at("rewards").get<std::vector<double>>();
      const std::size_t n = rec.trajectory.states.size();
      if (rec.trajectory.actions.size() != n || rec.trajectory.rewards.size() != n) {
        throw std::runtime_error("states/actions/rewards lengths disagree");
      }
      rec.trajectory.returns_to_go = returns_to_go(rec.trajectory.rewards);
      if (n > kMaxSteps) {
        rec.trajectory.states.resize(kMaxSteps);
        rec.trajectory.actions.resize(kMaxSteps);
        rec.trajectory.rewards.resize(kMaxSteps);
        rec.trajectory.returns_to_go.resize(kMaxSteps);
      }
      records.push_back(std::move(rec));
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
  }
  if (records.empty()) {
    throw std::runtime_error("read_interchange: " + path.string() + " contains no records");
  }
  if (zero_velocity_warnings) *zero_velocity_warnings = warnings;
  return records;
}

}  // namespace sdt
