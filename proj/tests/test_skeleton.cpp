#include <fstream>
#include <set>

#include "asea/skeleton.hpp"
#include "test_util.hpp"

using namespace asea;
namespace fs = std::filesystem;

namespace {

std::string uniform_line(std::size_t frame, const std::string& value, std::size_t count = 90) {
  std::string s = std::to_string(frame);
  for (std::size_t i = 0; i < count; ++i) s += "," + value;
  return s;
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

SkeletonSequence random_sequence(std::uint64_t seed, std::size_t T = 5) {
  Rng rng(seed);
  SkeletonSequence s;
  s.coords = rng.uniform_tensor({3, T, 2, 15}, -2, 2);
  flag_missing(s);
  s.subject = "s01s02";
  return s;
}

std::array<double, 3> frame_centroid(const SkeletonSequence& s, std::size_t t) {
  std::array<double, 3> c{0, 0, 0};
  std::size_t n = 0;
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t j = 0; j < s.joints(); ++j) {
      if (s.is_missing(t, m, j)) continue;
      for (std::size_t k = 0; k < 3; ++k) c[k] += s.at(k, t, m, j);
      ++n;
    }
  for (double& v : c) v /= static_cast<double>(n);
  return c;
}

double person_gap(const SkeletonSequence& s, std::size_t t) {
  std::array<double, 3> c[2] = {{0, 0, 0}, {0, 0, 0}};
  for (std::size_t m = 0; m < 2; ++m)
    for (std::size_t j = 0; j < s.joints(); ++j)
      for (std::size_t k = 0; k < 3; ++k) c[m][k] += s.at(k, t, m, j) / static_cast<double>(s.joints());
  double d2 = 0;
  for (std::size_t k = 0; k < 3; ++k) d2 += (c[0][k] - c[1][k]) * (c[0][k] - c[1][k]);
  return std::sqrt(d2);
}

std::vector<SkeletonSequence> dummy_corpus(std::size_t pairs, std::size_t per_pair) {
  std::vector<SkeletonSequence> v;
  for (std::size_t p = 0; p < pairs; ++p)
    for (std::size_t i = 0; i < per_pair; ++i) {
      SkeletonSequence s = random_sequence(p * 31 + i, 2);
      s.subject = pair_subject_id(p);
      s.label = i % 4;
      v.push_back(std::move(s));
    }
  return v;
}

}  // namespace

TEST_CASE("a line of 0.5 values parses to joints at (0.5,0.5,0.5)", "[skeleton][sbu]") {
  std::istringstream in(uniform_line(1, "0.5") + "\n");
  auto rows = parse_sbu_rows(in, "fixture.txt");
  auto s = sequence_from_rows(rows, 15);
  REQUIRE(s.frames() == 1);
  for (double v : s.coords.data()) REQUIRE(v == 0.5);
}

TEST_CASE("malformed lines report file and line number", "[skeleton][sbu]") {
  std::istringstream in(uniform_line(1, "0.5") + "\n" + uniform_line(2, "0.5", 89) + "\n");
  REQUIRE_THROWS_AS(parse_sbu_rows(in, "clip.txt"), ParseError);
  std::istringstream in2(uniform_line(1, "0.5") + "\n" + uniform_line(2, "0.5", 89) + "\n");
  REQUIRE_THROWS_WITH(parse_sbu_rows(in2, "clip.txt"), Catch::Matchers::ContainsSubstring("clip.txt:2") &&
                                                           Catch::Matchers::ContainsSubstring("91"));
  std::istringstream in3(uniform_line(1, "abc") + "\n");
  REQUIRE_THROWS_AS(parse_sbu_rows(in3, "clip.txt"), ParseError);
}

TEST_CASE("a two-frame clip round-trips exactly through the text format", "[skeleton][sbu]") {
  auto dir = test::scratch_dir("sbu_roundtrip");
  SkeletonSequence s = random_sequence(42, 2);
  s.label = 3;
  write_sbu_clip(dir / "s01s02" / "04" / "001" / "skeleton_pos.txt", s);
  auto loaded = load_sbu(dir);
  REQUIRE(loaded.size() == 1);
  REQUIRE(loaded[0].frames() == 2);
  REQUIRE(loaded[0].coords == s.coords);
  REQUIRE(loaded[0].label == 3);
  REQUIRE(loaded[0].subject == "s01s02");
}

TEST_CASE("empty clips are skipped with a warning", "[skeleton][sbu]") {
  auto dir = test::scratch_dir("sbu_empty");
  write_text(dir / "s01s02" / "01" / "001" / "skeleton_pos.txt", "");
  write_text(dir / "s01s02" / "01" / "002" / "skeleton_pos.txt",
             uniform_line(1, "0.1") + "\n" + uniform_line(2, "0.2") + "\n");
  std::vector<std::string> warnings;
  auto saved = warning_sink();
  warning_sink() = [&](const std::string& m) { warnings.push_back(m); };
  auto loaded = load_sbu(dir);
  warning_sink() = saved;
  REQUIRE(loaded.size() == 1);
  REQUIRE(warnings.size() == 1);
  REQUIRE(warnings[0].find("empty") != std::string::npos);
}

TEST_CASE("paths without a participant pair and class are rejected", "[skeleton][sbu]") {
  auto dir = test::scratch_dir("sbu_badpath");
  write_text(dir / "misc" / "clip.txt", uniform_line(1, "0.1") + "\n" + uniform_line(2, "0.2") + "\n");
  REQUIRE_THROWS_AS(load_sbu(dir), DataError);
  REQUIRE_THROWS_AS(load_sbu(dir / "does_not_exist"), DataError);
}

TEST_CASE("zero joints are flagged as missing", "[skeleton]") {
  SkeletonSequence s = random_sequence(3, 2);
  for (std::size_t c = 0; c < 3; ++c) s.at(c, 1, 1, 4) = 0.0;
  flag_missing(s);
  REQUIRE(s.is_missing(1, 1, 4));
  REQUIRE_FALSE(s.is_missing(0, 1, 4));
}

TEST_CASE("synthesis is deterministic and sized by SynthSpec", "[skeleton][synth]") {
  SynthSpec spec;
  auto a = synthesize(spec, 7);
  auto b = synthesize(spec, 7);
  REQUIRE(a.size() == 200);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].coords == b[i].coords);
    REQUIRE(a[i].label == b[i].label);
    REQUIRE(a[i].subject == b[i].subject);
  }
  REQUIRE_FALSE(synthesize(spec, 8)[0].coords == a[0].coords);
  SynthSpec bad = spec;
  bad.samples_per_class = 0;
  REQUIRE_THROWS_AS(synthesize(bad, 1), ConfigError);
  bad = spec;
  bad.classes = {"approach", "jump"};
  REQUIRE_THROWS_AS(synthesize(bad, 1), ConfigError);
}

TEST_CASE("noise-free approach and depart move the bodies monotonically", "[skeleton][synth]") {
  SynthSpec spec;
  spec.classes = {"approach", "depart"};
  spec.samples_per_class = 5;
  spec.noise = 0.0;
  for (const auto& s : synthesize(spec, 11)) {
    for (std::size_t t = 1; t < s.frames(); ++t) {
      if (s.label == 0) REQUIRE(person_gap(s, t) < person_gap(s, t - 1));
      if (s.label == 1) REQUIRE(person_gap(s, t) > person_gap(s, t - 1));
    }
  }
}

TEST_CASE("handshake brings the right hands together and wave raises one arm", "[skeleton][synth]") {
  SynthSpec spec;
  spec.classes = {"handshake", "wave"};
  spec.samples_per_class = 4;
  spec.noise = 0.0;
  for (const auto& s : synthesize(spec, 5)) {
    const std::size_t last = s.frames() - 1;
    auto hand_gap = [&](std::size_t t) {
      double d2 = 0;
      for (std::size_t c = 0; c < 3; ++c) d2 += std::pow(s.at(c, t, 0, 8) - s.at(c, t, 1, 8), 2);
      return std::sqrt(d2);
    };
    if (s.label == 0) {
      REQUIRE(hand_gap(last) < 0.5 * hand_gap(0));
    } else {
      // Exactly one person ends with a hand above the head.
      int raised = 0;
      for (std::size_t m = 0; m < 2; ++m) raised += s.at(1, last, m, 8) > s.at(1, last, m, 0);
      REQUIRE(raised == 1);
    }
  }
}

TEST_CASE("synthetic corpus persists and reloads bit-exactly", "[skeleton][synth]") {
  auto dir = test::scratch_dir("synth_corpus");
  SynthSpec spec;
  spec.samples_per_class = 3;
  auto seqs = synthesize(spec, 21);
  auto manifest = write_synthetic_corpus(dir, seqs, spec, 21);
  REQUIRE(manifest["seed"] == 21);
  auto corpus = load_corpus(dir);
  REQUIRE(corpus.class_names == spec.classes);
  REQUIRE(corpus.sequences.size() == seqs.size());
  // Files are sorted by path, so match clips by label and subject before comparing.
  std::multiset<std::string> want, got;
  for (const auto& s : seqs) want.insert(format_sbu_clip(s));
  for (const auto& s : corpus.sequences) got.insert(format_sbu_clip(s));
  REQUIRE(want == got);
  for (const auto& s : corpus.sequences) REQUIRE(s.source == ClipSource::Synthetic);
}

TEST_CASE("normalization fixed point, translation invariance, centroid", "[skeleton][normalize]") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    SkeletonSequence s = random_sequence(seed);
    SkeletonSequence n = normalize(s);
    auto c = frame_centroid(n, 0);
    for (double v : c) REQUIRE(std::abs(v) <= 1e-12);
    double torso = 0;
    for (std::size_t k = 0; k < 3; ++k) torso += std::pow(n.at(k, 0, 0, 1) - n.at(k, 0, 0, 2), 2);
    REQUIRE(std::abs(std::sqrt(torso) - 1.0) <= 1e-12);

    SkeletonSequence again = normalize(n);
    test::require_close(again.coords, n.coords, 1e-12);

    SkeletonSequence moved = s;
    for (std::size_t i = 0; i < moved.coords.size(); ++i) moved.coords[i] += 5.0;
    test::require_close(normalize(moved).coords, n.coords, 1e-12);
  }
}

TEST_CASE("normalization keeps missing joints at zero and warns on a degenerate torso", "[skeleton][normalize]") {
  SkeletonSequence s = random_sequence(4);
  for (std::size_t c = 0; c < 3; ++c) s.at(c, 2, 0, 7) = 0.0;
  flag_missing(s);
  SkeletonSequence n = normalize(s);
  for (std::size_t c = 0; c < 3; ++c) REQUIRE(n.at(c, 2, 0, 7) == 0.0);

  SkeletonSequence d = random_sequence(5);
  for (std::size_t c = 0; c < 3; ++c) d.at(c, 0, 0, 2) = d.at(c, 0, 0, 1);
  int warnings = 0;
  auto saved = warning_sink();
  warning_sink() = [&](const std::string&) { ++warnings; };
  SkeletonSequence nd = normalize(d);
  warning_sink() = saved;
  REQUIRE(warnings == 1);
  auto c = frame_centroid(d, 0);
  REQUIRE(std::abs(nd.at(0, 1, 1, 3) - (d.at(0, 1, 1, 3) - c[0])) <= 1e-12);
}

TEST_CASE("folds partition participant pairs", "[skeleton][folds]") {
  auto seqs = dummy_corpus(10, 4);
  auto folds = make_folds(seqs, 5, 3);
  REQUIRE(folds.size() == 5);
  std::vector<int> seen(seqs.size(), 0);
  for (const auto& f : folds) {
    std::set<std::string> test_pairs, train_pairs;
    for (auto i : f.test) {
      test_pairs.insert(seqs[i].subject);
      ++seen[i];
    }
    for (auto i : f.train) train_pairs.insert(seqs[i].subject);
    REQUIRE(test_pairs.size() == 2);
    for (const auto& p : test_pairs) REQUIRE(train_pairs.count(p) == 0);
    REQUIRE(f.train.size() + f.test.size() == seqs.size());
  }
  for (int v : seen) REQUIRE(v == 1);

  auto again = make_folds(seqs, 5, 3);
  for (std::size_t k = 0; k < 5; ++k) REQUIRE(again[k].test == folds[k].test);
  REQUIRE_THROWS_AS(make_folds(dummy_corpus(3, 2), 5, 1), ConfigError);
}

TEST_CASE("21 pairs over 5 folds differ by at most one pair", "[skeleton][folds]") {
  auto seqs = dummy_corpus(21, 2);
  auto folds = make_folds(seqs, 5, 9);
  std::size_t lo = 99, hi = 0;
  for (const auto& f : folds) {
    std::set<std::string> pairs;
    for (auto i : f.test) pairs.insert(seqs[i].subject);
    lo = std::min(lo, pairs.size());
    hi = std::max(hi, pairs.size());
  }
  REQUIRE(hi - lo <= 1);
  REQUIRE(lo == 21 / 5);
}

TEST_CASE("stratified split keeps class proportions", "[skeleton][folds]") {
  auto seqs = dummy_corpus(10, 8);  // 20 clips per class
  auto sp = stratified_split(seqs, 0.8, 4);
  REQUIRE(sp.train.size() == 64);
  REQUIRE(sp.test.size() == 16);
  std::vector<int> per_class(4, 0);
  for (auto i : sp.test) ++per_class[seqs[i].label];
  for (int c : per_class) REQUIRE(c == 4);
}

TEST_CASE("batching pads to the longest clip and reproduces each clip", "[skeleton][batch]") {
  std::vector<SkeletonSequence> seqs = {random_sequence(1, 4), random_sequence(2, 7), random_sequence(3, 2)};
  for (std::size_t i = 0; i < seqs.size(); ++i) seqs[i].label = i;
  Batch b = make_batch(seqs);
  REQUIRE(b.data.shape() == Shape{3, 3, 7, 2, 15});
  REQUIRE(b.labels == std::vector<std::size_t>{0, 1, 2});
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& s = seqs[k];
    for (std::size_t t = 0; t < 7; ++t) {
      REQUIRE(b.pad_mask.at({k, t}) == (t < s.frames() ? 1.0 : 0.0));
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t m = 0; m < 2; ++m)
          for (std::size_t n = 0; n < 15; ++n)
            REQUIRE(b.data.at({k, c, t, m, n}) == (t < s.frames() ? s.at(c, t, m, n) : 0.0));
    }
  }
}

TEST_CASE("resampling keeps the endpoints and interpolates linearly", "[skeleton][batch]") {
  SkeletonSequence s = random_sequence(6, 5);
  SkeletonSequence r = resample(s, 9);
  REQUIRE(r.frames() == 9);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t n = 0; n < 15; ++n) {
      REQUIRE(r.at(c, 0, 0, n) == s.at(c, 0, 0, n));
      REQUIRE(std::abs(r.at(c, 8, 1, n) - s.at(c, 4, 1, n)) <= 1e-12);
      REQUIRE(std::abs(r.at(c, 1, 0, n) - 0.5 * (s.at(c, 0, 0, n) + s.at(c, 1, 0, n))) <= 1e-12);
    }
}
