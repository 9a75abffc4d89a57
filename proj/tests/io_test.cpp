#include "clga/io.hpp"

#include <algorithm>
#include <fstream>
#include <random>

#include "gtest/gtest.h"

namespace clga {
namespace {

class IoTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("clga_io_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& content) {
    fs::path p = dir_ / name;
    std::ofstream(p) << content;
    return p;
  }

  std::string read(const fs::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  }

  fs::path dir_;
};

TEST_F(IoTest, EdgeListCanonicalization) {
  std::vector<std::string> warnings;
  Matrix adj = read_edge_list(write("e.txt", "0 1\n1 0\n1 1\n"), 2, &warnings);
  Matrix expected(2, 2);
  expected << 0, 1, 1, 0;
  EXPECT_EQ(adj, expected);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("self-loop"), std::string::npos);
  EXPECT_NE(warnings[0].find("line 3"), std::string::npos);
}

TEST_F(IoTest, EmptyEdgeFileIsAcceptedWithWarning) {
  std::vector<std::string> warnings;
  Matrix adj = read_edge_list(write("e.txt", "# nothing here\n\n"), 3, &warnings);
  EXPECT_EQ(adj, Matrix::Zero(3, 3));
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("no edges"), std::string::npos);
}

TEST_F(IoTest, MalformedLinesReportLineNumbers) {
  auto message = [&](const std::string& content, Index n) {
    try {
      read_edge_list(write("bad.txt", content), n);
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(message("0 1\n1 2\nx 3\n", 4).find("bad.txt:3"), std::string::npos);
  EXPECT_NE(message("0 1\n0 1 2\n", 4).find("bad.txt:2"), std::string::npos);
  const std::string range = message("0 1\n\n2 9\n", 4);
  EXPECT_NE(range.find("bad.txt:3"), std::string::npos);
  EXPECT_NE(range.find("out of range"), std::string::npos);
}

TEST_F(IoTest, ShuffledInputGivesIdenticalAdjacency) {
  Rng rng(1);
  Graph g = generate_sbm(SbmSpec{30, 2, 0.3, 0.05, 4, 0.1}, rng);
  std::vector<std::string> lines;
  for (auto [i, j] : g.edges()) {
    lines.push_back(std::to_string(i) + " " + std::to_string(j));
    lines.push_back(std::to_string(j) + " " + std::to_string(i));
  }
  std::string a, b;
  for (const auto& l : lines) a += l + "\n";
  std::shuffle(lines.begin(), lines.end(), rng);
  for (const auto& l : lines) b += l + "\n";
  Matrix from_a = read_edge_list(write("a.txt", a), 30);
  EXPECT_EQ(from_a, g.adjacency);
  EXPECT_EQ(read_edge_list(write("b.txt", b), 30), from_a);
  // Writing and reading back is a fixed point.
  write_edge_list(dir_ / "c.txt", from_a);
  EXPECT_EQ(read_edge_list(dir_ / "c.txt", 30), from_a);
}

TEST_F(IoTest, FeatureAndLabelFiles) {
  Matrix x = read_features(write("x.txt", "1 0 0.5\n0 1 -2e-3\n"), 2);
  EXPECT_EQ(x.rows(), 2);
  EXPECT_EQ(x(1, 2), -2e-3);
  EXPECT_THROW(read_features(write("x2.txt", "1 0\n0 1 1\n"), 2), FormatError);
  EXPECT_THROW(read_features(write("x3.txt", "1 0\n"), 2), FormatError);
  EXPECT_EQ(read_labels(write("y.txt", "0\n2\n1\n"), 3), (std::vector<int>{0, 2, 1}));
  EXPECT_THROW(read_labels(write("y2.txt", "0\n-1\n"), 2), FormatError);
  EXPECT_THROW(read_labels(write("y3.txt", "0\n"), 2), FormatError);
}

TEST_F(IoTest, FeatureRoundTripIsExact) {
  Rng rng(5);
  Matrix x = random_features(6, 3, rng);
  x(0, 0) = 1.0 / 3.0;
  write_features(dir_ / "x.txt", x);
  EXPECT_EQ(read_features(dir_ / "x.txt", 6), x);
}

fs::path write_dataset(const fs::path& dir, const std::string& manifest_extra) {
  std::ofstream(dir / "g.edges") << "0 1\n1 2\n2 3\n3 0\n";
  std::ofstream(dir / "g.features") << "1 0\n0 1\n1 1\n0 0.5\n";
  std::ofstream(dir / "g.labels") << "0\n1\n0\n1\n";
  std::ofstream(dir / "train.txt") << "0\n1\n";
  std::ofstream(dir / "val.txt") << "2\n";
  std::ofstream(dir / "test.txt") << "3\n";
  const fs::path m = dir / "g.manifest.json";
  std::ofstream(m) << R"({"name": "square", "nodes": 4, "edge_file": "g.edges", "feature_file": "g.features",
    "label_file": "g.labels", "split": {"train": "train.txt", "val": "val.txt", "test": "test.txt"})"
                   << manifest_extra << "}";
  return m;
}

TEST_F(IoTest, ManifestCountsAreChecked) {
  DatasetManifest m = load_manifest(write_dataset(dir_, R"(, "edges": 4, "feature_dim": 2, "classes": 2)"));
  Graph g = load_graph(m);
  EXPECT_EQ(g.num_nodes(), 4);
  EXPECT_EQ(g.num_edges(), 4);
  EXPECT_EQ(g.num_classes(), 2);
  auto split = load_public_split(m);
  ASSERT_TRUE(split);
  EXPECT_EQ(split->train, (std::vector<Index>{0, 1}));

  EXPECT_THROW(load_graph(load_manifest(write_dataset(dir_, R"(, "edges": 5)"))), FormatError);
  EXPECT_THROW(load_graph(load_manifest(write_dataset(dir_, R"(, "feature_dim": 3)"))), FormatError);
  EXPECT_THROW(load_graph(load_manifest(write_dataset(dir_, R"(, "classes": 7)"))), FormatError);
}

TEST_F(IoTest, ManifestChecksum) {
  DatasetManifest m = load_manifest(write_dataset(dir_, ""));
  const std::string good = checksum_hex(adjacency_checksum(load_graph(m).adjacency));
  EXPECT_NO_THROW(load_graph(load_manifest(write_dataset(dir_, R"(, "checksum": ")" + good + "\""))));
  EXPECT_THROW(load_graph(load_manifest(write_dataset(dir_, R"(, "checksum": "0000000000000001")"))), FormatError);
}

TEST_F(IoTest, ManifestWithoutFeaturesUsesSeededRandomFeatures) {
  std::ofstream(dir_ / "g.edges") << "0 1\n";
  std::ofstream(dir_ / "m.json") << R"({"nodes": 3, "edge_file": "g.edges", "random_feature_dim": 5})";
  Graph a = load_graph(load_manifest(dir_ / "m.json"));
  Graph b = load_graph(load_manifest(dir_ / "m.json"));
  EXPECT_EQ(a.feature_dim(), 5);
  EXPECT_EQ(a.features, b.features);
}

TEST_F(IoTest, BadManifestsAreFormatErrors) {
  EXPECT_THROW(load_manifest(write("m1.json", "{not json")), FormatError);
  EXPECT_THROW(load_manifest(write("m2.json", R"({"nodes": 3})")), FormatError);
  EXPECT_THROW(load_manifest(dir_ / "missing.json"), FormatError);
}

// The shipped Cora manifest declares the published statistics; the data
// itself is not vendored, so the load is skipped when files are absent.
TEST(CoraManifestTest, DeclaresPublishedCounts) {
  const fs::path path = fs::path(CLGA_SOURCE_DIR) / "data" / "cora.manifest.json";
  DatasetManifest m = load_manifest(path);
  EXPECT_EQ(m.nodes, 2708);
  EXPECT_EQ(m.edges, 5278);
  EXPECT_EQ(m.feature_dim, 1433);
  EXPECT_EQ(m.classes, 7);
  if (!fs::exists(m.edge_file)) GTEST_SKIP() << "Cora files not present under data/";
  Graph g = load_graph(m);
  EXPECT_EQ(g.num_nodes(), 2708);
  EXPECT_EQ(g.num_edges(), 5278);
  EXPECT_EQ(g.feature_dim(), 1433);
  EXPECT_EQ(g.num_classes(), 7);
}

AttackState two_flip_state() {
  Rng rng(3);
  Graph g = generate_sbm(SbmSpec{12, 2, 0.5, 0.1, 4, 0.2}, rng);
  AttackState s;
  s.attack = "clga";
  s.adjacency = g.adjacency;
  s.frozen = g.frozen;
  s.budget = 2;
  s.seed = 0xfeedbeefcafeULL;
  s.clean_checksum = adjacency_checksum(g.adjacency);
  auto [a, b] = g.edges().front();
  apply_flip(s.adjacency, s.frozen, a, b);
  s.flips.push_back({0, a, b, FlipDirection::kDelete, -0.1234567890123, 812.5, 733.0000000001});
  Index m = 0, n = 1;
  while (g.adjacency(m, n) != 0.0) ++n;
  apply_flip(s.adjacency, s.frozen, m, n);
  s.flips.push_back({1, m, n, FlipDirection::kAdd, 1.0 / 3.0, 811.0, 700.25});
  return s;
}

Graph clean_of_two_flip() {
  Rng rng(3);
  return generate_sbm(SbmSpec{12, 2, 0.5, 0.1, 4, 0.2}, rng);
}

TEST_F(IoTest, PoisonedRoundTripIsBitExact) {
  AttackState s = two_flip_state();
  save_poisoned(s, dir_ / "p.graphdelta");
  AttackState back = load_poisoned(dir_ / "p.graphdelta", clean_of_two_flip());
  EXPECT_EQ(back.flips, s.flips);
  EXPECT_EQ(back.adjacency, s.adjacency);
  EXPECT_EQ(back.frozen, s.frozen);
  EXPECT_EQ(back.seed, s.seed);
  EXPECT_EQ(back.budget, s.budget);
  EXPECT_EQ(back.clean_checksum, s.clean_checksum);
  EXPECT_EQ(back.attack, "clga");
  EXPECT_FALSE(fs::exists(dir_ / "p.graphdelta.tmp"));
}

TEST_F(IoTest, ReplayReconstructsPoisonedAdjacency) {
  AttackState s = two_flip_state();
  save_poisoned(s, dir_ / "p.graphdelta");
  GraphDelta d = read_graphdelta(dir_ / "p.graphdelta");
  Matrix replay = clean_of_two_flip().adjacency;
  for (const FlipRecord& f : d.flips) {
    replay(f.m, f.n) = 1.0 - replay(f.m, f.n);
    replay(f.n, f.m) = replay(f.m, f.n);
  }
  EXPECT_EQ(replay, s.adjacency);
  EXPECT_EQ(adjacency_checksum(replay), d.final_checksum);
}

TEST_F(IoTest, HaltedStateMayHaveFewerFlips) {
  AttackState s = two_flip_state();
  s.budget = 5;
  s.status = AttackStatus::kHalted;
  s.message = "no eligible pair\nat iteration 2";
  save_poisoned(s, dir_ / "h.graphdelta");
  AttackState back = load_poisoned(dir_ / "h.graphdelta", clean_of_two_flip());
  EXPECT_EQ(back.status, AttackStatus::kHalted);
  EXPECT_EQ(back.message, "no eligible pair at iteration 2");
}

std::string replace_line(std::string text, const std::string& prefix, const std::string& with) {
  const auto pos = text.find(prefix);
  const auto end = text.find('\n', pos);
  return text.replace(pos, end - pos, with);
}

TEST_F(IoTest, CorruptContainersAreRejected) {
  save_poisoned(two_flip_state(), dir_ / "p.graphdelta");
  const std::string good = read(dir_ / "p.graphdelta");
  const Graph clean = clean_of_two_flip();

  auto rejects = [&](const std::string& content, const std::string& needle) {
    write("bad.graphdelta", content);
    try {
      load_poisoned(dir_ / "bad.graphdelta", clean);
    } catch (const FormatError& e) {
      return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
  };
  EXPECT_TRUE(rejects(replace_line(good, "clga-graphdelta", "clga-graphdelta 2"), "version"));
  EXPECT_TRUE(rejects(good.substr(0, good.size() / 2), "truncated"));
  EXPECT_TRUE(rejects(good.substr(0, good.rfind("end")), "truncated"));
  EXPECT_TRUE(rejects(replace_line(good, "budget", "budget 3"), "budget"));
  EXPECT_TRUE(rejects(replace_line(good, "final_checksum", "final_checksum 0000000000000000"), "final checksum"));
  EXPECT_TRUE(rejects(replace_line(good, "clean_checksum", "clean_checksum 0000000000000000"), "clean graph"));

  Rng rng(99);
  Graph other = generate_sbm(SbmSpec{12, 2, 0.5, 0.1, 4, 0.2}, rng);
  EXPECT_THROW(load_poisoned(dir_ / "p.graphdelta", other), FormatError);
}

TEST_F(IoTest, FlipLogHasOneLinePerFlip) {
  AttackState s = two_flip_state();
  write_flip_log(s, dir_ / "flips.log");
  std::ifstream in(dir_ / "flips.log");
  std::string line;
  int flips = 0;
  while (std::getline(in, line))
    if (line.rfind("iter ", 0) == 0) ++flips;
  EXPECT_EQ(flips, 2);
  EXPECT_NE(format_flip(s.flips[1]).find("add"), std::string::npos);
}

}  // namespace
}  // namespace clga
