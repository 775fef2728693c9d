#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "asea/rng.hpp"
#include "asea/tensor.hpp"

namespace asea {

inline constexpr std::size_t kCoordDims = 3;
inline constexpr std::size_t kPersons = 2;
inline constexpr std::size_t kSbuJoints = 15;

enum class ClipSource { Sbu, Synthetic };

/// One labeled two-person clip. `coords` is laid out [C=3, T, M=2, N].
struct SkeletonSequence {
  Tensor coords;
  std::vector<std::uint8_t> missing;  // [T, M, N]; 1 = joint absent, its coordinates are zero
  std::size_t label = 0;
  std::string subject;  // participant pair, used for fold assignment
  ClipSource source = ClipSource::Sbu;
  std::string origin;  // file the clip came from, if any

  std::size_t frames() const { return coords.dim(1); }
  std::size_t joints() const { return coords.dim(3); }
  double& at(std::size_t c, std::size_t t, std::size_t m, std::size_t n) { return coords.at({c, t, m, n}); }
  double at(std::size_t c, std::size_t t, std::size_t m, std::size_t n) const { return coords.at({c, t, m, n}); }
  bool is_missing(std::size_t t, std::size_t m, std::size_t n) const {
    return missing[(t * kPersons + m) * joints() + n] != 0;
  }
};

inline const std::vector<std::string>& sbu_class_names() {
  static const std::vector<std::string> names = {"approaching", "departing",      "kicking",   "pushing",
                                                 "shaking_hands", "hugging", "exchanging", "punching"};
  return names;
}

inline void validate_sequence(const SkeletonSequence& s) {
  const Shape& sh = s.coords.shape();
  if (sh.size() != 4 || sh[0] != kCoordDims || sh[2] != kPersons) {
    throw DataError("skeleton sequence must be [3,T,2,N], got " + shape_str(sh));
  }
  if (sh[1] < 2) throw DataError("skeleton sequence needs at least 2 frames, got " + std::to_string(sh[1]));
  if (s.missing.size() != sh[1] * kPersons * sh[3]) throw DataError("missing-joint flags do not match the clip shape");
  if (!s.coords.all_finite()) throw DataError("skeleton sequence contains non-finite coordinates");
}

// Missing joints are those reported at exactly the origin.
inline void flag_missing(SkeletonSequence& s) {
  const std::size_t T = s.frames(), N = s.joints();
  s.missing.assign(T * kPersons * N, 0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t m = 0; m < kPersons; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        if (s.at(0, t, m, n) == 0.0 && s.at(1, t, m, n) == 0.0 && s.at(2, t, m, n) == 0.0) {
          s.missing[(t * kPersons + m) * N + n] = 1;
        }
      }
}

// ---------------------------------------------------------------------------
// SBU text format: one frame per line, a frame index followed by 2*N*3
// comma-separated floats (person 1 joints as x,y,z triples, then person 2).

namespace detail {

inline double parse_double_field(std::string_view f, const std::string& file, std::size_t line) {
  while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
  while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
  if (ec != std::errc{} || ptr != f.data() + f.size() || !std::isfinite(v)) {
    throw ParseError(file + ":" + std::to_string(line) + ": invalid number '" + std::string(f) + "'");
  }
  return v;
}

inline void append_double(std::string& out, double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, ptr);
}

}  // namespace detail

/// Parses one clip; throws ParseError naming file and line on malformed rows.
/// Returns a sequence with zero frames (coords empty) when the file has no rows.
inline std::vector<std::vector<double>> parse_sbu_rows(std::istream& in, const std::string& file,
                                                       std::size_t n_joints = kSbuJoints) {
  const std::size_t width = 1 + kPersons * n_joints * kCoordDims;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (true) {
      const auto pos = rest.find(',');
      fields.push_back(rest.substr(0, pos));
      if (pos == std::string_view::npos) break;
      rest.remove_prefix(pos + 1);
    }
    if (fields.size() != width) {
      throw ParseError(file + ":" + std::to_string(lineno) + ": expected " + std::to_string(width) + " fields, got " +
                       std::to_string(fields.size()));
    }
    std::vector<double> row(width - 1);
    detail::parse_double_field(fields[0], file, lineno);
    for (std::size_t i = 1; i < width; ++i) row[i - 1] = detail::parse_double_field(fields[i], file, lineno);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline SkeletonSequence sequence_from_rows(const std::vector<std::vector<double>>& rows, std::size_t n_joints) {
  SkeletonSequence s;
  const std::size_t T = rows.size();
  s.coords = Tensor(Shape{kCoordDims, T, kPersons, n_joints});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t m = 0; m < kPersons; ++m)
      for (std::size_t n = 0; n < n_joints; ++n)
        for (std::size_t c = 0; c < kCoordDims; ++c) s.at(c, t, m, n) = rows[t][(m * n_joints + n) * kCoordDims + c];
  flag_missing(s);
  return s;
}

/// Reads one clip file. Returns false (after a warning) for an empty clip.
inline bool read_sbu_clip(const std::filesystem::path& file, SkeletonSequence& out, std::size_t n_joints = kSbuJoints) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open " + file.string());
  auto rows = parse_sbu_rows(in, file.string(), n_joints);
  if (rows.empty()) {
    warn("skipping empty clip " + file.string());
    return false;
  }
  out = sequence_from_rows(rows, n_joints);
  out.origin = file.string();
  return true;
}

inline std::string format_sbu_clip(const SkeletonSequence& s) {
  std::string out;
  const std::size_t N = s.joints();
  for (std::size_t t = 0; t < s.frames(); ++t) {
    out += std::to_string(t + 1);
    for (std::size_t m = 0; m < kPersons; ++m)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < kCoordDims; ++c) {
          out += ',';
          detail::append_double(out, s.at(c, t, m, n));
        }
    out += '\n';
  }
  return out;
}

inline void write_sbu_clip(const std::filesystem::path& file, const SkeletonSequence& s) {
  std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  out << format_sbu_clip(s);
  if (!out) throw DataError("failed writing " + file.string());
}

/// Loads every clip under an SBU-layout tree: <root>/sXXsYY/<class 01..>/<clip>/*.txt.
/// Labels come from the class folder, subject ids from the participant-pair folder.
inline std::vector<SkeletonSequence> load_sbu(const std::filesystem::path& root, std::size_t n_joints = kSbuJoints,
                                              ClipSource source = ClipSource::Sbu) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("data directory not found: " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  static const std::regex pair_re("s[0-9]+s[0-9]+");
  static const std::regex class_re("[0-9]{2}");
  std::vector<SkeletonSequence> out;
  for (const auto& f : files) {
    const fs::path rel = fs::relative(f, root);
    std::vector<std::string> parts;
    for (const auto& p : rel.parent_path()) parts.push_back(p.string());
    std::string subject;
    long label = -1;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (std::regex_match(parts[i], pair_re)) {
        subject = parts[i];
        if (i + 1 < parts.size() && std::regex_match(parts[i + 1], class_re)) label = std::stol(parts[i + 1]) - 1;
        break;
      }
    }
    if (subject.empty() || label < 0) {
      throw DataError("cannot derive participant pair and class from path " + rel.string() +
                      " (expected sXXsYY/<class>/...)");
    }
    SkeletonSequence s;
    if (!read_sbu_clip(f, s, n_joints)) continue;
    s.label = static_cast<std::size_t>(label);
    s.subject = subject;
    s.source = source;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Default torso bone (neck, torso centre) for the known layouts.
inline std::pair<std::size_t, std::size_t> default_torso_joints(std::size_t n_joints) {
  if (n_joints == 25) return {20, 0};
  if (n_joints == 15) return {1, 2};
  return {0, std::min<std::size_t>(1, n_joints - 1)};
}

/// Moves frame 0's two-person joint centroid to the origin and scales so the
/// first person's frame-0 torso bone has unit length. Missing joints stay zero.
inline SkeletonSequence normalize(const SkeletonSequence& seq) {
  validate_sequence(seq);
  SkeletonSequence s = seq;
  const std::size_t T = s.frames(), N = s.joints();
  double centroid[3] = {0, 0, 0};
  std::size_t count = 0;
  for (std::size_t m = 0; m < kPersons; ++m)
    for (std::size_t n = 0; n < N; ++n) {
      if (s.is_missing(0, m, n)) continue;
      for (std::size_t c = 0; c < 3; ++c) centroid[c] += s.at(c, 0, m, n);
      ++count;
    }
  if (count > 0)
    for (double& c : centroid) c /= static_cast<double>(count);

  const auto [ja, jb] = default_torso_joints(N);
  double d2 = 0.0;
  const bool torso_present = !s.is_missing(0, 0, ja) && !s.is_missing(0, 0, jb);
  if (torso_present)
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = s.at(c, 0, 0, ja) - s.at(c, 0, 0, jb);
      d2 += d * d;
    }
  double scale = 1.0;
  if (d2 > 0.0) {
    scale = 1.0 / std::sqrt(d2);
  } else {
    warn("torso length unavailable in frame 0 of " + (s.origin.empty() ? std::string("clip") : s.origin) +
         "; using unit scale");
  }

  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t m = 0; m < kPersons; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        if (s.is_missing(t, m, n)) continue;
        for (std::size_t c = 0; c < 3; ++c) s.at(c, t, m, n) = (s.at(c, t, m, n) - centroid[c]) * scale;
      }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthSpec {
  std::vector<std::string> classes = {"approach", "depart", "handshake", "wave"};
  std::size_t samples_per_class = 50;
  std::size_t frames = 32;
  double noise = 0.01;
  std::size_t pairs = 10;  // distinct participant pairs; samples are spread across them
};

inline const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names = {"approach", "depart", "handshake", "wave"};
  return names;
}

namespace detail {

struct Vec3 {
  double x, y, z;
};

// Standing pose facing +x, metres, y up, left side at +z. SBU joint order.
inline const std::array<Vec3, kSbuJoints>& rest_pose() {
  static const std::array<Vec3, kSbuJoints> pose = {{{0, 1.65, 0},
                                                     {0, 1.45, 0},
                                                     {0, 1.15, 0},
                                                     {0, 1.42, 0.18},
                                                     {0, 1.15, 0.22},
                                                     {0, 0.90, 0.24},
                                                     {0, 1.42, -0.18},
                                                     {0, 1.15, -0.22},
                                                     {0, 0.90, -0.24},
                                                     {0, 0.95, 0.10},
                                                     {0, 0.50, 0.10},
                                                     {0, 0.05, 0.10},
                                                     {0, 0.95, -0.10},
                                                     {0, 0.50, -0.10},
                                                     {0, 0.05, -0.10}}};
  return pose;
}

enum Joint : std::size_t { kHead = 0, kNeck, kTorso, kLShoulder, kLElbow, kLHand, kRShoulder, kRElbow, kRHand };

inline Vec3 lerp(Vec3 a, Vec3 b, double r) { return {a.x + (b.x - a.x) * r, a.y + (b.y - a.y) * r, a.z + (b.z - a.z) * r}; }

inline double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace detail

inline std::size_t synth_class_index(const std::string& name) {
  const auto& all = synth_class_names();
  auto it = std::find(all.begin(), all.end(), name);
  if (it == all.end()) throw ConfigError("unknown synthetic class '" + name + "' (expected approach, depart, handshake, wave)");
  return static_cast<std::size_t>(it - all.begin());
}

inline std::string pair_subject_id(std::size_t pair) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%02zus%02zu", 2 * pair + 1, 2 * pair + 2);
  return buf;
}

/// Procedural two-person clips. Labels index `spec.classes` in order.
inline std::vector<SkeletonSequence> synthesize(const SynthSpec& spec, std::uint64_t seed) {
  using detail::Vec3;
  if (spec.samples_per_class < 1) throw ConfigError("samples per class must be at least 1");
  if (spec.classes.empty()) throw ConfigError("synthetic spec lists no classes");
  if (spec.frames < 2) throw ConfigError("synthetic clips need at least 2 frames");
  if (spec.pairs < 1) throw ConfigError("synthetic spec needs at least one participant pair");
  if (spec.noise < 0.0) throw ConfigError("synthetic noise must be non-negative");
  std::set<std::string> uniq(spec.classes.begin(), spec.classes.end());
  if (uniq.size() != spec.classes.size()) throw ConfigError("synthetic class list has duplicates");
  std::vector<std::size_t> kinds;
  for (const auto& c : spec.classes) kinds.push_back(synth_class_index(c));

  Rng rng(seed);
  // Per-pair body scales make the participant pair a real nuisance factor.
  std::vector<std::array<double, 2>> pair_scale(spec.pairs);
  for (auto& ps : pair_scale) ps = {rng.uniform(0.9, 1.1), rng.uniform(0.9, 1.1)};

  const std::size_t T = spec.frames;
  const auto& rest = detail::rest_pose();
  std::vector<SkeletonSequence> out;
  std::size_t serial = 0;
  for (std::size_t ci = 0; ci < kinds.size(); ++ci) {
    for (std::size_t k = 0; k < spec.samples_per_class; ++k, ++serial) {
      const std::size_t pair = serial % spec.pairs;
      const std::size_t kind = kinds[ci];
      SkeletonSequence s;
      s.coords = Tensor(Shape{3, T, kPersons, kSbuJoints});
      s.label = ci;
      s.subject = pair_subject_id(pair);
      s.source = ClipSource::Synthetic;

      const double yaw = rng.uniform(-0.5, 0.5);
      const double off_x = rng.uniform(-0.5, 0.5), off_z = rng.uniform(-0.5, 0.5);
      const double freq = rng.uniform(1.5, 3.0);  // cycles per clip
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      const double swing = rng.uniform(0.03, 0.08);
      const double d_near = rng.uniform(0.7, 1.0), d_far = rng.uniform(2.2, 2.8);
      const double d_meet = rng.uniform(0.9, 1.1), d_wave = rng.uniform(1.6, 2.2);
      const std::size_t waver = rng.index(2);
      const double amp = rng.uniform(0.08, 0.15);

      for (std::size_t t = 0; t < T; ++t) {
        const double u = static_cast<double>(t) / static_cast<double>(T - 1);
        double dist = d_meet;
        if (kind == 0) dist = d_far + (d_near - d_far) * u;
        if (kind == 1) dist = d_near + (d_far - d_near) * u;
        if (kind == 3) dist = d_wave;
        const double osc = std::sin(2.0 * M_PI * freq * u + phase);

        for (std::size_t m = 0; m < kPersons; ++m) {
          std::array<Vec3, kSbuJoints> p = rest;
          const double sc = pair_scale[pair][m];
          for (auto& j : p) j = {j.x * sc, j.y * sc, j.z * sc};

          if (kind == 0 || kind == 1) {
            // Arm swing while walking, antisymmetric so the body centroid is unchanged.
            const double a = swing * osc;
            p[detail::kLHand].x += a;
            p[detail::kLElbow].x += 0.5 * a;
            p[detail::kRHand].x -= a;
            p[detail::kRElbow].x -= 0.5 * a;
          } else if (kind == 2) {
            // Right hand reaches the midpoint (local x = dist/2), then pumps vertically.
            const double reach = detail::smoothstep(0.1, 0.4, u);
            const Vec3 target{0.5 * dist, 1.05 * sc, 0.0};
            Vec3 hand = detail::lerp(p[detail::kRHand], target, reach);
            hand.y += reach * 0.05 * osc;
            p[detail::kRHand] = hand;
            p[detail::kRElbow] = detail::lerp(p[detail::kRElbow], detail::lerp(p[detail::kRShoulder], hand, 0.5), reach);
          } else if (kind == 3 && m == waver) {
            const double raise = detail::smoothstep(0.0, 0.25, u);
            const Vec3 sh = p[detail::kRShoulder];
            const Vec3 elbow_up{sh.x + 0.05, sh.y + 0.05, sh.z - 0.25};
            Vec3 hand_up{sh.x + 0.05, sh.y + 0.35 + amp * osc, sh.z - 0.3};
            p[detail::kRElbow] = detail::lerp(p[detail::kRElbow], elbow_up, raise);
            p[detail::kRHand] = detail::lerp(p[detail::kRHand], hand_up, raise);
          }

          // Person 1 stands at -dist/2 facing +x; person 2 is rotated half a turn about y.
          for (std::size_t n = 0; n < kSbuJoints; ++n) {
            Vec3 j = p[n];
            Vec3 w = m == 0 ? Vec3{j.x - 0.5 * dist, j.y, j.z} : Vec3{-j.x + 0.5 * dist, j.y, -j.z};
            const double cx = std::cos(yaw), sx = std::sin(yaw);
            Vec3 r{cx * w.x + sx * w.z + off_x, w.y, -sx * w.x + cx * w.z + off_z};
            s.at(0, t, m, n) = r.x;
            s.at(1, t, m, n) = r.y;
            s.at(2, t, m, n) = r.z;
          }
        }
      }
      if (spec.noise > 0.0) {
        for (double& v : s.coords.storage()) v += spec.noise * rng.normal();
      }
      flag_missing(s);
      out.push_back(std::move(s));
    }
  }
  return out;
}

inline nlohmann::json synth_spec_to_json(const SynthSpec& spec) {
  return {{"classes", spec.classes},
          {"samples_per_class", spec.samples_per_class},
          {"frames", spec.frames},
          {"noise", spec.noise},
          {"pairs", spec.pairs}};
}

inline std::filesystem::path synthetic_clip_path(const SkeletonSequence& s, std::size_t serial) {
  char cls[8], clip[16];
  std::snprintf(cls, sizeof(cls), "%02zu", s.label + 1);
  std::snprintf(clip, sizeof(clip), "%03zu", serial + 1);
  return std::filesystem::path(s.subject) / cls / clip / "skeleton_pos.txt";
}

/// Writes clips in the SBU layout plus manifest.json {class_names, seed, spec, clips}.
inline nlohmann::json write_synthetic_corpus(const std::filesystem::path& root, const std::vector<SkeletonSequence>& seqs,
                                             const SynthSpec& spec, std::uint64_t seed) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw DataError("cannot create output directory " + root.string());
  nlohmann::json clips = nlohmann::json::array();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const fs::path rel = synthetic_clip_path(seqs[i], i);
    write_sbu_clip(root / rel, seqs[i]);
    clips.push_back({{"file", rel.generic_string()}, {"label", seqs[i].label}, {"subject", seqs[i].subject}});
  }
  nlohmann::json manifest = {{"format", "asea-synthetic-v1"},
                             {"class_names", spec.classes},
                             {"seed", seed},
                             {"spec", synth_spec_to_json(spec)},
                             {"clips", clips}};
  std::ofstream out(root / "manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot write " + (root / "manifest.json").string());
  out << manifest.dump(2) << '\n';
  return manifest;
}

struct Corpus {
  std::vector<SkeletonSequence> sequences;
  std::vector<std::string> class_names;
  ClipSource source = ClipSource::Sbu;
};

/// Loads either a synthetic corpus (manifest.json present) or an SBU tree.
inline Corpus load_corpus(const std::filesystem::path& root, std::size_t n_joints = kSbuJoints) {
  namespace fs = std::filesystem;
  Corpus c;
  const fs::path manifest = root / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream in(manifest);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
      c.class_names = j.at("class_names").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& ex) {
      throw DataError("invalid corpus manifest " + manifest.string() + ": " + ex.what());
    }
    c.source = ClipSource::Synthetic;
    c.sequences = load_sbu(root, n_joints, ClipSource::Synthetic);
  } else {
    c.class_names = sbu_class_names();
    c.source = ClipSource::Sbu;
    c.sequences = load_sbu(root, n_joints, ClipSource::Sbu);
  }
  for (const auto& s : c.sequences) {
    if (s.label >= c.class_names.size()) {
      throw DataError("clip " + s.origin + " has label " + std::to_string(s.label + 1) + " beyond the " +
                      std::to_string(c.class_names.size()) + " known classes");
    }
  }
  if (c.sequences.empty()) throw DataError("no clips found under " + root.string());
  return c;
}

// ---------------------------------------------------------------------------
// Splits

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// k folds over participant pairs: every pair's clips land in exactly one test fold.
inline std::vector<Split> make_folds(const std::vector<SkeletonSequence>& seqs, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2");
  std::vector<std::string> pairs;
  for (const auto& s : seqs) {
    if (s.subject.empty()) throw ConfigError("sequence without a participant-pair id cannot be assigned to a fold");
    pairs.push_back(s.subject);
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  if (pairs.size() < k) {
    throw ConfigError("only " + std::to_string(pairs.size()) + " participant pairs for " + std::to_string(k) + " folds");
  }
  Rng rng(seed);
  rng.shuffle(pairs);
  std::map<std::string, std::size_t> fold_of;
  for (std::size_t i = 0; i < pairs.size(); ++i) fold_of[pairs[i]] = i % k;
  std::vector<Split> folds(k);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const std::size_t f = fold_of[seqs[i].subject];
    for (std::size_t j = 0; j < k; ++j) (j == f ? folds[j].test : folds[j].train).push_back(i);
  }
  return folds;
}

/// Per-class shuffled holdout split.
inline Split stratified_split(const std::vector<SkeletonSequence>& seqs, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must be in (0, 1)");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < seqs.size(); ++i) by_class[seqs[i].label].push_back(i);
  Rng rng(seed);
  Split sp;
  for (auto& [label, idx] : by_class) {
    rng.shuffle(idx);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? sp.train : sp.test).push_back(idx[i]);
  }
  std::sort(sp.train.begin(), sp.train.end());
  std::sort(sp.test.begin(), sp.test.end());
  return sp;
}

// ---------------------------------------------------------------------------
// Batching

/// data [B,3,T,2,N], pad_mask [B,T] with 1 on real frames.
struct Batch {
  Tensor data;
  std::vector<std::size_t> labels;
  Tensor pad_mask;

  std::size_t size() const { return data.dim(0); }
  std::size_t frames() const { return data.dim(2); }
  std::size_t joints() const { return data.dim(4); }
};

/// Linear interpolation of a clip onto `frames` evenly spaced samples.
inline SkeletonSequence resample(const SkeletonSequence& s, std::size_t frames) {
  if (frames < 2) throw ConfigError("resampling target must be at least 2 frames");
  const std::size_t T = s.frames(), N = s.joints();
  SkeletonSequence r = s;
  r.coords = Tensor(Shape{3, frames, kPersons, N});
  r.missing.assign(frames * kPersons * N, 0);
  for (std::size_t f = 0; f < frames; ++f) {
    const double pos = static_cast<double>(f) * static_cast<double>(T - 1) / static_cast<double>(frames - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, T - 1);
    const double w = pos - static_cast<double>(lo);
    for (std::size_t m = 0; m < kPersons; ++m)
      for (std::size_t n = 0; n < N; ++n) {
        const bool miss = s.is_missing(lo, m, n) || s.is_missing(hi, m, n);
        r.missing[(f * kPersons + m) * N + n] = miss;
        for (std::size_t c = 0; c < 3; ++c)
          r.at(c, f, m, n) = miss ? 0.0 : (1.0 - w) * s.at(c, lo, m, n) + w * s.at(c, hi, m, n);
      }
  }
  return r;
}

/// Stacks clips, zero-padding to the longest one.
inline Batch make_batch(const std::vector<SkeletonSequence>& seqs, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw DataError("empty batch");
  const std::size_t N = seqs[idx[0]].joints();
  std::size_t T = 0;
  for (std::size_t i : idx) {
    if (seqs[i].joints() != N) throw DataError("batch mixes skeletons with different joint counts");
    T = std::max(T, seqs[i].frames());
  }
  const std::size_t B = idx.size();
  Batch b;
  b.data = Tensor(Shape{B, 3, T, kPersons, N});
  b.pad_mask = Tensor(Shape{B, T});
  b.labels.reserve(B);
  for (std::size_t k = 0; k < B; ++k) {
    const SkeletonSequence& s = seqs[idx[k]];
    const std::size_t Ts = s.frames();
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t t = 0; t < Ts; ++t)
        for (std::size_t m = 0; m < kPersons; ++m)
          for (std::size_t n = 0; n < N; ++n) b.data.at({k, c, t, m, n}) = s.at(c, t, m, n);
    for (std::size_t t = 0; t < Ts; ++t) b.pad_mask.at({k, t}) = 1.0;
    b.labels.push_back(s.label);
  }
  return b;
}

inline Batch make_batch(const std::vector<SkeletonSequence>& seqs) {
  std::vector<std::size_t> idx(seqs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return make_batch(seqs, idx);
}

}  // namespace asea
