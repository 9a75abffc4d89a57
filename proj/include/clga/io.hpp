#pragma once

// Dataset manifests, text graph loaders, and the poisoned-graph container.

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "clga/attack.hpp"
#include "clga/error.hpp"
#include "clga/evaluation.hpp"
#include "clga/graph.hpp"
#include "json.hpp"

namespace clga {

namespace fs = std::filesystem;

inline std::string checksum_hex(std::uint64_t c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, c);
  return buf;
}

inline std::uint64_t parse_checksum_hex(const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  if (ec != std::errc() || p != s.data() + s.size() || s.size() != 16) {
    throw FormatError("bad checksum '" + s + "'");
  }
  return v;
}

struct DatasetManifest {
  std::string name;
  Index nodes = 0;
  std::optional<Index> edges;  // undirected, after canonicalization
  std::optional<Index> feature_dim;
  std::optional<int> classes;
  fs::path edge_file;
  fs::path feature_file;  // empty: N(0,1) features of width random_feature_dim
  fs::path label_file;
  Index random_feature_dim = 32;
  std::uint64_t feature_seed = 0;
  // Public split node-id lists.
  fs::path train_file;
  fs::path val_file;
  fs::path test_file;
  std::optional<std::uint64_t> checksum;  // adjacency_checksum of the loaded graph
};

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

inline std::string where(const fs::path& file, std::size_t line) {
  return file.string() + ":" + std::to_string(line);
}

inline std::ifstream open_in(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  return in;
}

// Splits on whitespace; returns false for blank and '#' lines.
inline bool tokens(const std::string& line, std::vector<std::string>& out) {
  out.clear();
  std::istringstream ss(line);
  std::string t;
  while (ss >> t) {
    if (out.empty() && t[0] == '#') return false;
    out.push_back(t);
  }
  return !out.empty();
}

template <typename T>
T parse_number(const std::string& tok, const fs::path& file, std::size_t line) {
  T v{};
  auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || p != tok.data() + tok.size()) {
    throw FormatError(where(file, line) + ": cannot parse '" + tok + "'");
  }
  return v;
}

inline double parse_real(const std::string& tok, const fs::path& file, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size()) throw FormatError(where(file, line) + ": cannot parse '" + tok + "'");
  return v;
}

}  // namespace detail

inline DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  const fs::path base = path.parent_path();
  DatasetManifest m;
  try {
    m.name = j.value("name", path.stem().string());
    m.nodes = j.at("nodes").get<Index>();
    if (j.contains("edges")) m.edges = j["edges"].get<Index>();
    if (j.contains("feature_dim")) m.feature_dim = j["feature_dim"].get<Index>();
    if (j.contains("classes")) m.classes = j["classes"].get<int>();
    m.edge_file = detail::resolve(base, j.at("edge_file").get<std::string>());
    m.feature_file = detail::resolve(base, j.value("feature_file", std::string()));
    m.label_file = detail::resolve(base, j.value("label_file", std::string()));
    m.random_feature_dim = j.value("random_feature_dim", Index{32});
    m.feature_seed = j.value("feature_seed", std::uint64_t{0});
    if (j.contains("split")) {
      const auto& s = j["split"];
      m.train_file = detail::resolve(base, s.at("train").get<std::string>());
      m.val_file = detail::resolve(base, s.at("val").get<std::string>());
      m.test_file = detail::resolve(base, s.at("test").get<std::string>());
    }
    if (j.contains("checksum")) m.checksum = parse_checksum_hex(j["checksum"].get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": " + e.what());
  }
  if (m.nodes < 1) throw FormatError("manifest " + path.string() + ": node count must be positive");
  return m;
}

// Undirected edge list over n nodes: one "u v" per line, '#' comments allowed.
// Directed duplicates collapse into one edge; self-loops are dropped with a warning.
inline Matrix read_edge_list(const fs::path& path, Index n, std::vector<std::string>* warnings = nullptr) {
  std::ifstream in = detail::open_in(path);
  Matrix adj = Matrix::Zero(n, n);
  std::string line;
  std::vector<std::string> tok;
  std::size_t lineno = 0, loops = 0, first_loop = 0, edges = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!detail::tokens(line, tok)) continue;
    if (tok.size() != 2) {
      throw FormatError(detail::where(path, lineno) + ": expected 'u v', got " + std::to_string(tok.size()) +
                        " fields");
    }
    const auto u = detail::parse_number<Index>(tok[0], path, lineno);
    const auto v = detail::parse_number<Index>(tok[1], path, lineno);
    if (u < 0 || u >= n || v < 0 || v >= n) {
      throw FormatError(detail::where(path, lineno) + ": node id out of range [0, " + std::to_string(n) + ")");
    }
    if (u == v) {
      if (loops++ == 0) first_loop = lineno;
      continue;
    }
    adj(u, v) = adj(v, u) = 1.0;
    ++edges;
  }
  if (warnings) {
    if (loops > 0) {
      warnings->push_back(path.string() + ": dropped " + std::to_string(loops) + " self-loop(s), first at line " +
                          std::to_string(first_loop));
    }
    if (edges == 0) warnings->push_back(path.string() + ": no edges");
  }
  return adj;
}

// Dense whitespace-delimited rows, one per node.
inline Matrix read_features(const fs::path& path, Index n) {
  std::ifstream in = detail::open_in(path);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::vector<std::string> tok;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!detail::tokens(line, tok)) continue;
    if (!rows.empty() && tok.size() != rows.front().size()) {
      throw FormatError(detail::where(path, lineno) + ": expected " + std::to_string(rows.front().size()) +
                        " values, got " + std::to_string(tok.size()));
    }
    std::vector<double> r;
    r.reserve(tok.size());
    for (const auto& t : tok) r.push_back(detail::parse_real(t, path, lineno));
    rows.push_back(std::move(r));
  }
  if (static_cast<Index>(rows.size()) != n) {
    throw FormatError(path.string() + ": " + std::to_string(rows.size()) + " feature rows for " + std::to_string(n) +
                      " nodes");
  }
  if (rows.empty()) return Matrix(0, 0);
  Matrix x(n, static_cast<Index>(rows.front().size()));
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < x.cols(); ++c) x(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
  return x;
}

// One integer per line; with n >= 0 the count must be exactly n.
inline std::vector<Index> read_integers(const fs::path& path, Index n = -1) {
  std::ifstream in = detail::open_in(path);
  std::vector<Index> out;
  std::string line;
  std::vector<std::string> tok;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!detail::tokens(line, tok)) continue;
    if (tok.size() != 1) throw FormatError(detail::where(path, lineno) + ": expected one integer");
    out.push_back(detail::parse_number<Index>(tok[0], path, lineno));
  }
  if (n >= 0 && static_cast<Index>(out.size()) != n) {
    throw FormatError(path.string() + ": " + std::to_string(out.size()) + " entries for " + std::to_string(n) +
                      " nodes");
  }
  return out;
}

inline std::vector<int> read_labels(const fs::path& path, Index n) {
  std::vector<int> labels;
  for (Index v : read_integers(path, n)) {
    if (v < 0) throw FormatError(path.string() + ": negative label");
    labels.push_back(static_cast<int>(v));
  }
  return labels;
}

inline void write_integers(const fs::path& path, const std::vector<Index>& values) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (Index v : values) out << v << '\n';
}

// Rows in the read_features format, printed exactly.
inline void write_features(const fs::path& path, const Matrix& x) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  char buf[32];
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index c = 0; c < x.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", x(i, c));
      out << (c ? " " : "") << buf;
    }
    out << '\n';
  }
}

inline void write_edge_list(const fs::path& path, const Matrix& adjacency) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  for (Index i = 0; i < adjacency.rows(); ++i)
    for (Index j = i + 1; j < adjacency.cols(); ++j)
      if (adjacency(i, j) != 0.0) out << i << ' ' << j << '\n';
}

// Loads a graph and checks every count the manifest declares.
inline Graph load_graph(const DatasetManifest& m, std::vector<std::string>* warnings = nullptr) {
  Matrix adj = read_edge_list(m.edge_file, m.nodes, warnings);
  Matrix x;
  if (m.feature_file.empty()) {
    Rng rng(m.feature_seed);
    x = random_features(m.nodes, m.random_feature_dim, rng);
  } else {
    x = read_features(m.feature_file, m.nodes);
  }
  std::optional<std::vector<int>> labels;
  if (!m.label_file.empty()) labels = read_labels(m.label_file, m.nodes);
  Graph g(std::move(adj), std::move(x), std::move(labels));

  const std::string ds = "dataset '" + m.name + "': ";
  if (m.edges && g.num_edges() != *m.edges) {
    throw FormatError(ds + "expected " + std::to_string(*m.edges) + " edges, loaded " + std::to_string(g.num_edges()));
  }
  if (m.feature_dim && g.feature_dim() != *m.feature_dim) {
    throw FormatError(ds + "expected feature width " + std::to_string(*m.feature_dim) + ", loaded " +
                      std::to_string(g.feature_dim()));
  }
  if (m.classes && g.num_classes() != *m.classes) {
    throw FormatError(ds + "expected " + std::to_string(*m.classes) + " classes, loaded " +
                      std::to_string(g.num_classes()));
  }
  if (m.checksum && adjacency_checksum(g.adjacency) != *m.checksum) {
    throw FormatError(ds + "checksum mismatch: expected " + checksum_hex(*m.checksum) + ", loaded " +
                      checksum_hex(adjacency_checksum(g.adjacency)));
  }
  return g;
}

inline std::optional<NodeSplit> load_public_split(const DatasetManifest& m) {
  if (m.train_file.empty()) return std::nullopt;
  NodeSplit s;
  s.train = read_integers(m.train_file);
  s.val = read_integers(m.val_file);
  s.test = read_integers(m.test_file);
  s.validate(m.nodes);
  return s;
}

// ---------------------------------------------------------------------------
// Poisoned-graph container (.graphdelta)
// ---------------------------------------------------------------------------

inline constexpr int kGraphDeltaVersion = 1;
inline constexpr const char* kGraphDeltaMagic = "clga-graphdelta";

namespace detail {

inline std::string hexfloat(double v) {
  std::ostringstream ss;
  ss << std::hexfloat << v;
  return ss.str();
}

// Writes via a sibling temporary and renames it into place.
template <typename Fn>
void write_atomically(const fs::path& path, Fn&& body) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    body(out);
    out.flush();
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

}  // namespace detail

// Header and flip log exactly as stored; the adjacency is rebuilt from the clean graph.
struct GraphDelta {
  std::string attack;
  Index nodes = 0;
  std::uint64_t seed = 0;
  Index budget = 0;
  AttackStatus status = AttackStatus::kComplete;
  std::string message;
  std::uint64_t clean_checksum = 0;
  std::uint64_t final_checksum = 0;
  std::vector<FlipRecord> flips;
};

inline void save_poisoned(const AttackState& s, const fs::path& path) {
  const Index n = s.adjacency.rows();
  detail::write_atomically(path, [&](std::ostream& out) {
    out << kGraphDeltaMagic << ' ' << kGraphDeltaVersion << '\n';
    out << "attack " << s.attack << '\n';
    out << "nodes " << n << '\n';
    out << "seed " << s.seed << '\n';
    out << "budget " << s.budget << '\n';
    out << "status " << (s.status == AttackStatus::kComplete ? "complete" : "halted") << '\n';
    std::string msg = s.message;
    for (char& c : msg)
      if (c == '\n' || c == '\r') c = ' ';
    out << "message " << msg << '\n';
    out << "clean_checksum " << checksum_hex(s.clean_checksum) << '\n';
    out << "flips " << s.flips.size() << '\n';
    for (const FlipRecord& f : s.flips) {
      out << f.iteration << ' ' << f.m << ' ' << f.n << ' ' << to_string(f.direction) << ' '
          << detail::hexfloat(f.score) << ' ' << detail::hexfloat(f.loss_before) << ' '
          << detail::hexfloat(f.loss_after) << '\n';
    }
    out << "final_checksum " << checksum_hex(adjacency_checksum(s.adjacency)) << '\n';
    out << "end\n";
  });
}

inline GraphDelta read_graphdelta(const fs::path& path) {
  std::string content;
  {
    std::ifstream file = detail::open_in(path);
    content.assign(std::istreambuf_iterator<char>(file), {});
  }
  const bool terminated = content == "end\n" || (content.size() >= 5 && content.ends_with("\nend\n"));
  if (!terminated) throw FormatError(path.string() + ": truncated file, no end marker");
  std::istringstream in(content);
  std::string line;
  std::size_t lineno = 0;
  auto next = [&](const std::string& what) {
    if (!std::getline(in, line)) throw FormatError(path.string() + ": truncated file, missing " + what);
    ++lineno;
    return line;
  };
  auto field = [&](const std::string& key) {
    std::string l = next("'" + key + "'");
    if (l.rfind(key + " ", 0) != 0 && l != key) {
      throw FormatError(detail::where(path, lineno) + ": expected '" + key + "'");
    }
    return l.size() > key.size() ? l.substr(key.size() + 1) : std::string();
  };

  {
    std::istringstream head(next("header"));
    std::string magic;
    int version = 0;
    head >> magic >> version;
    if (magic != kGraphDeltaMagic) throw FormatError(path.string() + ": not a graphdelta file");
    if (version != kGraphDeltaVersion) {
      throw FormatError(path.string() + ": unsupported version " + std::to_string(version) + " (expected " +
                        std::to_string(kGraphDeltaVersion) + ")");
    }
  }
  GraphDelta d;
  d.attack = field("attack");
  d.nodes = detail::parse_number<Index>(field("nodes"), path, lineno);
  d.seed = detail::parse_number<std::uint64_t>(field("seed"), path, lineno);
  d.budget = detail::parse_number<Index>(field("budget"), path, lineno);
  const std::string status = field("status");
  if (status == "complete") {
    d.status = AttackStatus::kComplete;
  } else if (status == "halted") {
    d.status = AttackStatus::kHalted;
  } else {
    throw FormatError(detail::where(path, lineno) + ": unknown status '" + status + "'");
  }
  d.message = field("message");
  d.clean_checksum = parse_checksum_hex(field("clean_checksum"));
  const auto count = detail::parse_number<std::size_t>(field("flips"), path, lineno);
  std::vector<std::string> tok;
  for (std::size_t k = 0; k < count; ++k) {
    detail::tokens(next("flip " + std::to_string(k)), tok);
    if (tok.size() != 7) throw FormatError(detail::where(path, lineno) + ": flip record needs 7 fields");
    FlipRecord f;
    f.iteration = detail::parse_number<std::int64_t>(tok[0], path, lineno);
    f.m = detail::parse_number<Index>(tok[1], path, lineno);
    f.n = detail::parse_number<Index>(tok[2], path, lineno);
    if (tok[3] == "add") {
      f.direction = FlipDirection::kAdd;
    } else if (tok[3] == "delete") {
      f.direction = FlipDirection::kDelete;
    } else {
      throw FormatError(detail::where(path, lineno) + ": unknown direction '" + tok[3] + "'");
    }
    f.score = detail::parse_real(tok[4], path, lineno);
    f.loss_before = detail::parse_real(tok[5], path, lineno);
    f.loss_after = detail::parse_real(tok[6], path, lineno);
    if (f.m < 0 || f.n <= f.m || f.n >= d.nodes) throw FormatError(detail::where(path, lineno) + ": bad pair");
    d.flips.push_back(f);
  }
  d.final_checksum = parse_checksum_hex(field("final_checksum"));
  if (next("'end'") != "end") throw FormatError(detail::where(path, lineno) + ": expected 'end'");

  const auto flips = static_cast<Index>(d.flips.size());
  if (d.status == AttackStatus::kComplete && flips != d.budget) {
    throw FormatError(path.string() + ": budget " + std::to_string(d.budget) + " but " + std::to_string(flips) +
                      " flips recorded");
  }
  if (flips > d.budget) throw FormatError(path.string() + ": more flips than budget");
  return d;
}

// Rebuilds the attack state by replaying the flip log on `clean`, checking
// both checksums and the direction of every flip.
inline AttackState load_poisoned(const fs::path& path, const Graph& clean) {
  GraphDelta d = read_graphdelta(path);
  if (clean.num_nodes() != d.nodes) throw FormatError(path.string() + ": node count does not match the clean graph");
  if (adjacency_checksum(clean.adjacency) != d.clean_checksum) {
    throw FormatError(path.string() + ": clean graph checksum mismatch");
  }
  AttackState s;
  s.attack = d.attack;
  s.adjacency = clean.adjacency;
  s.frozen = clean.frozen;
  s.budget = d.budget;
  s.seed = d.seed;
  s.clean_checksum = d.clean_checksum;
  s.status = d.status;
  s.message = d.message;
  for (const FlipRecord& f : d.flips) {
    const bool present = s.adjacency(f.m, f.n) != 0.0;
    if (present != (f.direction == FlipDirection::kDelete) || s.frozen(f.m, f.n)) {
      throw FormatError(path.string() + ": flip (" + std::to_string(f.m) + "," + std::to_string(f.n) +
                        ") does not replay on the clean graph");
    }
    apply_flip(s.adjacency, s.frozen, f.m, f.n);
  }
  s.flips = std::move(d.flips);
  if (adjacency_checksum(s.adjacency) != d.final_checksum) {
    throw FormatError(path.string() + ": final checksum mismatch after replay");
  }
  return s;
}

// Human-readable flip log, one line per flip.
inline std::string format_flip(const FlipRecord& f) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "iter %" PRId64 " flip (%td,%td) %s score %.6g loss %.6f -> %.6f", f.iteration,
                static_cast<std::ptrdiff_t>(f.m), static_cast<std::ptrdiff_t>(f.n), to_string(f.direction), f.score,
                f.loss_before, f.loss_after);
  return buf;
}

inline void write_flip_log(const AttackState& s, const fs::path& path) {
  detail::write_atomically(path, [&](std::ostream& out) {
    out << "# attack " << s.attack << " seed " << s.seed << " budget " << s.budget << '\n';
    for (const FlipRecord& f : s.flips) out << format_flip(f) << '\n';
    if (s.status == AttackStatus::kHalted) out << "# halted: " << s.message << '\n';
  });
}

}  // namespace clga
