#pragma once

#include <cmath>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "asea/tensor.hpp"

namespace asea {

enum class SkeletonKind { Sbu15, Ntu25, Custom };

inline std::string to_string(SkeletonKind k) {
  switch (k) {
    case SkeletonKind::Sbu15: return "sbu15";
    case SkeletonKind::Ntu25: return "ntu25";
    case SkeletonKind::Custom: return "custom";
  }
  return "custom";
}

inline SkeletonKind parse_skeleton_kind(const std::string& s) {
  if (s == "sbu15") return SkeletonKind::Sbu15;
  if (s == "ntu25") return SkeletonKind::Ntu25;
  if (s == "custom") return SkeletonKind::Custom;
  throw ConfigError("unknown skeleton kind '" + s + "' (expected sbu15, ntu25 or custom)");
}

using Edge = std::pair<std::size_t, std::size_t>;

struct SkeletonGraph {
  SkeletonKind kind = SkeletonKind::Custom;
  std::size_t n_joints = 0;
  std::vector<Edge> edges;
  std::vector<std::string> names;
};

namespace detail {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), std::size_t{0}); }
  std::size_t find(std::size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) { parent_[find(a)] = find(b); }

 private:
  std::vector<std::size_t> parent_;
};

}  // namespace detail

inline std::size_t connected_components(std::size_t n, const std::vector<Edge>& edges) {
  detail::UnionFind uf(n);
  for (auto [a, b] : edges) uf.unite(a, b);
  std::size_t roots = 0;
  for (std::size_t i = 0; i < n; ++i) roots += uf.find(i) == i;
  return roots;
}

/// Validates and wraps an explicit joint list and bone list.
inline SkeletonGraph make_custom_graph(std::vector<std::string> names, std::vector<Edge> edges) {
  const std::size_t n = names.size();
  if (n == 0) throw ConfigError("custom skeleton has no joints");
  for (auto [a, b] : edges) {
    if (a >= n || b >= n) {
      throw ConfigError("skeleton edge (" + std::to_string(a) + "," + std::to_string(b) + ") references a joint outside [0," +
                        std::to_string(n) + ")");
    }
    if (a == b) throw ConfigError("skeleton edge (" + std::to_string(a) + "," + std::to_string(b) + ") is a self-loop");
  }
  if (connected_components(n, edges) != 1) throw ConfigError("skeleton graph is not connected");
  return SkeletonGraph{SkeletonKind::Custom, n, std::move(edges), std::move(names)};
}

/// Standard bone lists; joint order follows the dataset files.
inline SkeletonGraph build_graph(SkeletonKind kind) {
  switch (kind) {
    case SkeletonKind::Sbu15: {
      SkeletonGraph g = make_custom_graph(
          {"head", "neck", "torso", "left_shoulder", "left_elbow", "left_hand", "right_shoulder", "right_elbow",
           "right_hand", "left_hip", "left_knee", "left_foot", "right_hip", "right_knee", "right_foot"},
          {{0, 1}, {1, 2}, {1, 3}, {3, 4}, {4, 5}, {1, 6}, {6, 7}, {7, 8}, {2, 9}, {9, 10}, {10, 11}, {2, 12}, {12, 13}, {13, 14}});
      g.kind = kind;
      return g;
    }
    case SkeletonKind::Ntu25: {
      const std::vector<std::pair<int, int>> one_based = {
          {1, 2},   {2, 21},  {3, 21},  {4, 3},   {5, 21},  {6, 5},   {7, 6},   {8, 7},
          {9, 21},  {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13}, {15, 14}, {16, 15},
          {17, 1},  {18, 17}, {19, 18}, {20, 19}, {22, 23}, {23, 8},  {24, 25}, {25, 12}};
      std::vector<Edge> edges;
      for (auto [a, b] : one_based) edges.emplace_back(a - 1, b - 1);
      SkeletonGraph g = make_custom_graph(
          {"spine_base", "spine_mid", "neck", "head", "left_shoulder", "left_elbow", "left_wrist", "left_hand",
           "right_shoulder", "right_elbow", "right_wrist", "right_hand", "left_hip", "left_knee", "left_ankle",
           "left_foot", "right_hip", "right_knee", "right_ankle", "right_foot", "spine_shoulder", "left_hand_tip",
           "left_thumb", "right_hand_tip", "right_thumb"},
          std::move(edges));
      g.kind = kind;
      return g;
    }
    case SkeletonKind::Custom: break;
  }
  throw ConfigError("custom skeletons need an explicit joint and edge list");
}

/// Parses {"names": [...], "edges": [[a,b], ...]}.
inline SkeletonGraph graph_from_json(const nlohmann::json& j) {
  try {
    auto names = j.at("names").get<std::vector<std::string>>();
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges")) {
      if (!e.is_array() || e.size() != 2) throw ConfigError("skeleton edge entries must be [a, b] pairs");
      edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
    }
    return make_custom_graph(std::move(names), std::move(edges));
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("invalid skeleton JSON: ") + ex.what());
  }
}

inline SkeletonGraph load_graph_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open skeleton file " + path);
  try {
    return graph_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& ex) {
    throw ConfigError("invalid skeleton JSON in " + path + ": " + ex.what());
  }
}

inline nlohmann::json graph_to_json(const SkeletonGraph& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (auto [a, b] : g.edges) edges.push_back({a, b});
  return {{"names", g.names}, {"edges", edges}};
}

/// D^{-1/2} (Adj + I) D^{-1/2}, the starting point of the learnable adjacency.
inline Tensor init_adjacency(const SkeletonGraph& g) {
  const std::size_t n = g.n_joints;
  Tensor a(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) a.at({i, i}) = 1.0;
  for (auto [i, j] : g.edges) {
    a.at({i, j}) = 1.0;
    a.at({j, i}) = 1.0;
  }
  std::vector<double> deg(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) deg[i] += a.at({i, j});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a.at({i, j}) /= std::sqrt(deg[i] * deg[j]);
  return a;
}

}  // namespace asea
