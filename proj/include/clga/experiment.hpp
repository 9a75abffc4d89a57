#pragma once

// Config-driven experiment runner: load or generate a graph, attack it, retrain
// the contrastive encoder on the poisoned graph, evaluate, and write reports.

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "clga/attack.hpp"
#include "clga/contrastive.hpp"
#include "clga/error.hpp"
#include "clga/evaluation.hpp"
#include "clga/graph.hpp"
#include "clga/io.hpp"
#include "clga/random.hpp"
#include "json.hpp"

#ifndef CLGA_VERSION
#define CLGA_VERSION "0.0.0"
#endif

namespace clga {

inline constexpr const char* kVersion = CLGA_VERSION;

using json = nlohmann::json;

// A budget is either a fraction of the clean edge count or an absolute flip count.
struct Budget {
  std::optional<double> fraction;
  std::optional<Index> flips;

  static Budget of_fraction(double f) { return Budget{f, std::nullopt}; }
  static Budget of_flips(Index n) { return Budget{std::nullopt, n}; }

  Index resolve(Index edges) const { return flips ? *flips : budget_from_fraction(edges, *fraction); }

  // "0.05" for fractions, "12flips" for absolute counts.
  std::string label() const {
    if (flips) return std::to_string(*flips) + "flips";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", *fraction);
    return buf;
  }

  friend bool operator==(const Budget&, const Budget&) = default;
};

inline const std::vector<std::string>& known_tasks() {
  static const std::vector<std::string> t{"node_classification", "link_prediction", "transfer_gcn"};
  return t;
}

inline std::string metric_for(const std::string& task) { return task == "link_prediction" ? "auc" : "accuracy"; }

struct ExperimentConfig {
  std::string name = "experiment";
  // Exactly one of these.
  std::optional<std::string> manifest;
  std::optional<SbmSpec> sbm;

  std::string attack = "clga";  // none, clga or random
  std::vector<Budget> budgets{Budget::of_fraction(0.01), Budget::of_fraction(0.05), Budget::of_fraction(0.10)};
  int k = 10;
  std::optional<int> retrain_epochs;
  Index flips_per_iteration = 1;
  bool warm_start = false;
  std::vector<std::uint64_t> seeds{0};
  std::vector<std::string> tasks{"node_classification"};

  ContrastiveConfig contrastive;
  AugmentationSpec augmentation;
  LogRegConfig logreg;
  LinkPredictionConfig link_prediction;
  GcnConfig gcn;
  SplitSpec split;
  bool public_split = true;  // use the manifest's split lists when present
  // Evaluations per seed and budget, averaged. Each repeat redraws the node
  // split (unless public), the encoder and the downstream model.
  int repeats = 1;
  int threads = 1;

  // attack=none has a single zero budget whatever was configured.
  void normalize() {
    if (attack == "none") budgets = {Budget::of_fraction(0.0)};
  }

  void validate() const {
    if (manifest.has_value() == sbm.has_value()) {
      throw InvalidArgument("experiment: dataset needs exactly one of 'manifest' or 'sbm'");
    }
    if (attack != "none" && attack != "clga" && attack != "random") {
      throw InvalidArgument("experiment: unknown attack '" + attack + "'");
    }
    if (budgets.empty()) throw InvalidArgument("experiment: no budgets");
    std::set<std::string> labels;
    for (const Budget& b : budgets) {
      if (b.fraction.has_value() == b.flips.has_value()) throw InvalidArgument("experiment: malformed budget");
      if (b.fraction && !(*b.fraction >= 0.0 && *b.fraction <= 1.0)) {
        throw InvalidArgument("experiment: budget fraction must be in [0,1]");
      }
      if (b.flips && *b.flips < 0) throw InvalidArgument("experiment: negative flip budget");
      if (!labels.insert(b.label()).second) throw InvalidArgument("experiment: duplicate budget " + b.label());
    }
    if (seeds.empty()) throw InvalidArgument("experiment: no seeds");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
      throw InvalidArgument("experiment: duplicate seed");
    }
    if (tasks.empty()) throw InvalidArgument("experiment: no tasks");
    std::set<std::string> seen;
    for (const std::string& t : tasks) {
      if (std::find(known_tasks().begin(), known_tasks().end(), t) == known_tasks().end()) {
        throw InvalidArgument("experiment: unknown task '" + t + "'");
      }
      if (!seen.insert(t).second) throw InvalidArgument("experiment: duplicate task '" + t + "'");
    }
    if (threads < 1) throw InvalidArgument("experiment: threads must be >= 1");
    if (repeats < 1) throw InvalidArgument("experiment: repeats must be >= 1");
    AttackConfig a;
    a.k = k;
    a.retrain_epochs = retrain_epochs;
    a.flips_per_iteration = flips_per_iteration;
    a.budget = std::max<Index>(flips_per_iteration, 0);
    a.validate();
    contrastive.validate();
    augmentation.validate();
    split.validate();
  }
};

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace detail {

// Reads typed fields from a JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string context) : j_(j), ctx_(std::move(context)) {
    if (!j.is_object()) throw FormatError(ctx_ + ": expected an object");
  }

  const json* find(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, double& out) {
    if (const json* v = find(key)) out = number(*v, key);
  }
  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  template <class T>
    requires std::is_integral_v<T>
  void get(const char* key, T& out) {
    if (const json* v = find(key)) out = integer<T>(*v, key);
  }
  template <class T>
  void get(const char* key, std::optional<T>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        T tmp{};
        const json wrapped{{key, *v}};
        ObjectReader one(wrapped, ctx_);
        one.get(key, tmp);
        out = tmp;
      }
    }
  }
  void get(const char* key, std::array<double, 2>& out) {
    if (const json* v = find(key)) {
      if (!v->is_array() || v->size() != 2) fail(key, "an array of two numbers");
      for (std::size_t i = 0; i < 2; ++i) out[i] = number((*v)[i], key);
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw FormatError(ctx_ + ": unknown key '" + k + "'");
    }
  }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw FormatError(ctx_ + "." + key + ": expected " + what);
  }

  double number(const json& v, const std::string& key) const {
    if (!v.is_number()) fail(key, "a number");
    return v.get<double>();
  }

  template <class T>
  T integer(const json& v, const std::string& key) const {
    if (!v.is_number_integer()) fail(key, "an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) fail(key, "a non-negative integer");
      return static_cast<T>(v.get<std::uint64_t>());
    } else {
      return static_cast<T>(v.get<std::int64_t>());
    }
  }

  const std::string& context() const { return ctx_; }

 private:
  const json& j_;
  std::string ctx_;
  std::set<std::string> used_;
};

inline const char* masking_name(FeatureMasking m) {
  return m == FeatureMasking::kPerDimension ? "per_dimension" : "per_entry";
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json j;
  j["name"] = c.name;
  json ds = json::object();
  if (c.manifest) ds["manifest"] = *c.manifest;
  if (c.sbm) {
    const SbmSpec& s = *c.sbm;
    ds["sbm"] = {{"nodes", s.nodes},
                 {"blocks", s.blocks},
                 {"p_in", s.p_in},
                 {"p_out", s.p_out},
                 {"feature_dim", s.feature_dim},
                 {"feature_noise", s.feature_noise},
                 {"feature_signal", s.feature_signal}};
  }
  j["dataset"] = ds;
  j["attack"] = c.attack;
  json budgets = json::array();
  for (const Budget& b : c.budgets) {
    if (b.flips) {
      budgets.push_back({{"flips", *b.flips}});
    } else {
      budgets.push_back(*b.fraction);
    }
  }
  j["budgets"] = budgets;
  j["k"] = c.k;
  j["retrain_epochs"] = c.retrain_epochs ? json(*c.retrain_epochs) : json(nullptr);
  j["flips_per_iteration"] = c.flips_per_iteration;
  j["warm_start"] = c.warm_start;
  j["seeds"] = c.seeds;
  j["tasks"] = c.tasks;
  const ContrastiveConfig& cc = c.contrastive;
  j["contrastive"] = {{"tau", cc.tau},
                      {"epochs", cc.epochs},
                      {"learning_rate", cc.learning_rate},
                      {"hidden_dim", cc.hidden_dim},
                      {"output_dim", cc.output_dim},
                      {"patience", cc.patience ? json(*cc.patience) : json(nullptr)},
                      {"cosine_eps", cc.cosine_eps}};
  j["augmentation"] = {{"edge_drop", c.augmentation.edge_drop},
                       {"feature_drop", c.augmentation.feature_drop},
                       {"masking", detail::masking_name(c.augmentation.masking)}};
  j["logreg"] = {{"learning_rate", c.logreg.learning_rate},
                 {"epochs", c.logreg.epochs},
                 {"weight_decay", c.logreg.weight_decay},
                 {"normalize_rows", c.logreg.normalize_rows}};
  j["link_prediction"] = {{"hidden_dim", c.link_prediction.hidden_dim},
                          {"output_dim", c.link_prediction.output_dim},
                          {"epochs", c.link_prediction.epochs},
                          {"learning_rate", c.link_prediction.learning_rate}};
  j["gcn"] = {{"hidden_dim", c.gcn.hidden_dim},
              {"epochs", c.gcn.epochs},
              {"learning_rate", c.gcn.learning_rate},
              {"weight_decay", c.gcn.weight_decay}};
  j["split"] = {{"train_fraction", c.split.train_fraction},
                {"val_fraction", c.split.val_fraction},
                {"edge_train_fraction", c.split.edge_train_fraction},
                {"edge_test_fraction", c.split.edge_test_fraction},
                {"public", c.public_split}};
  j["repeats"] = c.repeats;
  j["threads"] = c.threads;
  return j;
}

// Missing keys keep their defaults; unknown keys and wrong types are errors.
inline ExperimentConfig config_from_json(const json& j) {
  using detail::ObjectReader;
  ExperimentConfig c;
  ObjectReader r(j, "config");
  r.get("name", c.name);

  if (const json* ds = r.find("dataset")) {
    ObjectReader d(*ds, "config.dataset");
    std::string manifest;
    if (d.find("manifest")) {
      d.get("manifest", manifest);
      c.manifest = manifest;
    }
    if (const json* sj = d.find("sbm")) {
      ObjectReader s(*sj, "config.dataset.sbm");
      SbmSpec spec;
      s.get("nodes", spec.nodes);
      s.get("blocks", spec.blocks);
      s.get("p_in", spec.p_in);
      s.get("p_out", spec.p_out);
      s.get("feature_dim", spec.feature_dim);
      s.get("feature_noise", spec.feature_noise);
      s.get("feature_signal", spec.feature_signal);
      s.finish();
      c.sbm = spec;
    }
    d.finish();
  }

  r.get("attack", c.attack);
  if (const json* bs = r.find("budgets")) {
    if (!bs->is_array()) r.fail("budgets", "an array");
    c.budgets.clear();
    for (const json& b : *bs) {
      if (b.is_number()) {
        c.budgets.push_back(Budget::of_fraction(b.get<double>()));
      } else {
        ObjectReader br(b, "config.budgets[]");
        Index flips = -1;
        if (!br.find("flips")) br.fail("flips", "a flip count");
        br.get("flips", flips);
        br.finish();
        c.budgets.push_back(Budget::of_flips(flips));
      }
    }
  }
  r.get("k", c.k);
  r.get("retrain_epochs", c.retrain_epochs);
  r.get("flips_per_iteration", c.flips_per_iteration);
  r.get("warm_start", c.warm_start);
  if (const json* s = r.find("seeds")) {
    if (!s->is_array()) r.fail("seeds", "an array");
    c.seeds.clear();
    for (const json& v : *s) c.seeds.push_back(r.integer<std::uint64_t>(v, "seeds"));
  }
  if (const json* t = r.find("tasks")) {
    if (!t->is_array()) r.fail("tasks", "an array");
    c.tasks.clear();
    for (const json& v : *t) {
      if (!v.is_string()) r.fail("tasks", "an array of strings");
      c.tasks.push_back(v.get<std::string>());
    }
  }

  if (const json* cj = r.find("contrastive")) {
    ObjectReader s(*cj, "config.contrastive");
    s.get("tau", c.contrastive.tau);
    s.get("epochs", c.contrastive.epochs);
    s.get("learning_rate", c.contrastive.learning_rate);
    s.get("hidden_dim", c.contrastive.hidden_dim);
    s.get("output_dim", c.contrastive.output_dim);
    s.get("patience", c.contrastive.patience);
    s.get("cosine_eps", c.contrastive.cosine_eps);
    s.finish();
  }
  if (const json* aj = r.find("augmentation")) {
    ObjectReader s(*aj, "config.augmentation");
    s.get("edge_drop", c.augmentation.edge_drop);
    s.get("feature_drop", c.augmentation.feature_drop);
    std::string masking = detail::masking_name(c.augmentation.masking);
    s.get("masking", masking);
    if (masking == "per_dimension") {
      c.augmentation.masking = FeatureMasking::kPerDimension;
    } else if (masking == "per_entry") {
      c.augmentation.masking = FeatureMasking::kPerEntry;
    } else {
      s.fail("masking", "'per_dimension' or 'per_entry'");
    }
    s.finish();
  }
  if (const json* lj = r.find("logreg")) {
    ObjectReader s(*lj, "config.logreg");
    s.get("learning_rate", c.logreg.learning_rate);
    s.get("epochs", c.logreg.epochs);
    s.get("weight_decay", c.logreg.weight_decay);
    s.get("normalize_rows", c.logreg.normalize_rows);
    s.finish();
  }
  if (const json* lj = r.find("link_prediction")) {
    ObjectReader s(*lj, "config.link_prediction");
    s.get("hidden_dim", c.link_prediction.hidden_dim);
    s.get("output_dim", c.link_prediction.output_dim);
    s.get("epochs", c.link_prediction.epochs);
    s.get("learning_rate", c.link_prediction.learning_rate);
    s.finish();
  }
  if (const json* gj = r.find("gcn")) {
    ObjectReader s(*gj, "config.gcn");
    s.get("hidden_dim", c.gcn.hidden_dim);
    s.get("epochs", c.gcn.epochs);
    s.get("learning_rate", c.gcn.learning_rate);
    s.get("weight_decay", c.gcn.weight_decay);
    s.finish();
  }
  if (const json* sj = r.find("split")) {
    ObjectReader s(*sj, "config.split");
    s.get("train_fraction", c.split.train_fraction);
    s.get("val_fraction", c.split.val_fraction);
    s.get("edge_train_fraction", c.split.edge_train_fraction);
    s.get("edge_test_fraction", c.split.edge_test_fraction);
    s.get("public", c.public_split);
    s.finish();
  }
  r.get("repeats", c.repeats);
  r.get("threads", c.threads);
  r.finish();
  return c;
}

// Reads a config file; a relative manifest path is taken relative to the file.
inline ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  ExperimentConfig c = config_from_json(j);
  if (c.manifest && fs::path(*c.manifest).is_relative()) {
    c.manifest = (path.parent_path() / *c.manifest).lexically_normal().string();
  }
  return c;
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Hash of everything that can change results; the thread count cannot.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("threads");
  return checksum_hex(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

struct SeedError {
  std::uint64_t seed = 0;
  std::string message;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::string config_hash;
  std::string dataset;
  // One report per (budget, task), in config order; values in seed order.
  std::vector<MetricsReport> reports;
  std::vector<SeedError> errors;
};

struct RunOptions {
  fs::path out_dir = {};  // empty: write nothing
  bool resume = false;  // continue from seed_<s>/attack.graphdelta checkpoints
  std::function<void(const std::string&)> progress = {};
};

// Random stream tags; each stage of a seed draws from its own stream.
enum class Stage : std::uint64_t {
  kGraph = 1,
  kAttack,
  kSplit,
  kEdgeSplit,
  kEncoder,
  kLogReg,
  kLinkEncoder,
  kLink,
  kGcn,
  kLinkAttack,
};

inline std::uint64_t stage_seed(std::uint64_t seed, Stage s, int repeat = 0) {
  return derive_seed(seed, {0x65787074ULL, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(repeat)});
}

struct Dataset {
  std::string name;
  Graph graph;
  std::optional<NodeSplit> public_split;
};

// The manifest graph, or the SBM drawn for `seed`.
inline Dataset load_dataset(const ExperimentConfig& cfg, std::uint64_t seed) {
  if (cfg.sbm) {
    Rng rng(stage_seed(seed, Stage::kGraph));
    return Dataset{"sbm", generate_sbm(*cfg.sbm, rng), std::nullopt};
  }
  DatasetManifest m = load_manifest(*cfg.manifest);
  Graph g = load_graph(m);
  return Dataset{m.name, std::move(g), load_public_split(m)};
}

inline bool needs_task(const ExperimentConfig& cfg, const char* task) {
  return std::find(cfg.tasks.begin(), cfg.tasks.end(), task) != cfg.tasks.end();
}

inline bool needs_node_target(const ExperimentConfig& cfg) {
  return needs_task(cfg, "node_classification") || needs_task(cfg, "transfer_gcn");
}

// Splits shared by every attack and budget of one seed.
struct TaskContext {
  std::vector<NodeSplit> splits;  // one per evaluation repeat
  std::optional<EdgeSplit> edges;  // drawn on the clean graph
};

inline TaskContext task_context(const ExperimentConfig& cfg, const Dataset& d, std::uint64_t seed) {
  TaskContext ctx;
  if (needs_node_target(cfg)) {
    if (!d.graph.labels) throw InvalidArgument("dataset '" + d.name + "' has no labels");
    for (int r = 0; r < cfg.repeats; ++r) {
      if (cfg.public_split && d.public_split) {
        ctx.splits.push_back(*d.public_split);
        continue;
      }
      Rng rng(stage_seed(seed, Stage::kSplit, r));
      ctx.splits.push_back(
          stratified_node_split(*d.graph.labels, cfg.split.train_fraction, cfg.split.val_fraction, rng));
    }
  }
  if (needs_task(cfg, "link_prediction")) {
    Rng rng(stage_seed(seed, Stage::kEdgeSplit));
    ctx.edges = split_edges(d.graph, cfg.split.edge_train_fraction, cfg.split.edge_test_fraction, rng);
  }
  return ctx;
}

// The graph the link-prediction encoder trains on, and hence the one attacked
// for that task: the clean graph without the held-out pairs.
inline Graph link_training_graph(const Dataset& d, const TaskContext& ctx) {
  if (!ctx.edges) throw InvalidArgument("no edge split");
  return Graph(ctx.edges->training_adjacency(d.graph.adjacency), d.graph.features, d.graph.labels);
}

inline AttackConfig attack_config_for(const ExperimentConfig& cfg, Index budget, int threads) {
  AttackConfig a;
  a.budget = budget;
  a.k = cfg.k;
  a.retrain_epochs = cfg.retrain_epochs;
  a.flips_per_iteration = std::min<Index>(cfg.flips_per_iteration, std::max<Index>(budget, 1));
  a.warm_start = cfg.warm_start;
  a.threads = threads;
  return a;
}

// The attack of `cfg` on `g` at `budget`, seeded by `seed`. With `checkpoint`
// set, the state is saved there after every flip and, if `resume`, picked up
// from it.
inline AttackState run_attack(const ExperimentConfig& cfg, const Graph& g, Index budget, std::uint64_t seed,
                              int threads = 1, const fs::path& checkpoint = {}, bool resume = false,
                              const FlipCallback& on_flip = {}) {
  if (cfg.attack == "random") return random_flip_attack(g, budget, seed);
  if (cfg.attack == "none") {
    if (budget != 0) throw InvalidArgument("attack 'none' takes no budget");
    AttackState st = random_flip_attack(g, 0, seed);
    st.attack = "none";
    return st;
  }

  std::optional<AttackState> prior;
  if (resume && !checkpoint.empty() && fs::exists(checkpoint)) {
    prior = load_poisoned(checkpoint, g);
    const auto have = static_cast<Index>(prior->flips.size());
    if (have > budget || (prior->status == AttackStatus::kComplete && have == budget)) {
      return truncate_attack(g, *prior, budget);
    }
  }
  FlipCallback cb = [&](const FlipRecord& rec, const AttackState& st) {
    if (!checkpoint.empty()) {
      AttackState snap = st;
      if (static_cast<Index>(snap.flips.size()) < snap.budget) {
        snap.status = AttackStatus::kHalted;
        snap.message = "checkpoint after iteration " + std::to_string(rec.iteration);
      }
      save_poisoned(snap, checkpoint);
    }
    if (on_flip) on_flip(rec, st);
  };
  AttackState st = clga_attack(g, attack_config_for(cfg, budget, threads), cfg.contrastive, cfg.augmentation, seed,
                               prior ? &*prior : nullptr, cb);
  if (!checkpoint.empty()) save_poisoned(st, checkpoint);
  return st;
}

// Poisoned graphs of one seed for every budget. `node` targets the full graph
// (node classification, GCN transfer); `link` targets the link-prediction
// training graph. Each is attacked once at the largest budget and truncated.
struct SeedAttacks {
  std::vector<Index> node_flips;
  std::vector<Index> link_flips;
  std::vector<AttackState> node;  // per budget, empty if no node task
  std::vector<AttackState> link;  // per budget, empty if no link task
};

// Writes <dir>/attack.graphdelta as the checkpoint and, per budget,
// <dir>/budget_<label>/{poisoned.graphdelta,flips.log}.
inline std::vector<AttackState> attack_budgets(const ExperimentConfig& cfg, const Graph& target,
                                               const std::vector<Index>& flips, std::uint64_t seed, int threads,
                                               const fs::path& dir, bool resume,
                                               const std::function<void(const std::string&)>& log) {
  const Index max_budget = *std::max_element(flips.begin(), flips.end());
  if (!dir.empty()) fs::create_directories(dir);
  const fs::path checkpoint = dir.empty() ? fs::path() : dir / "attack.graphdelta";
  AttackState full = run_attack(cfg, target, max_budget, seed, threads, checkpoint, resume,
                                [&](const FlipRecord& rec, const AttackState&) { log(format_flip(rec)); });
  if (full.status == AttackStatus::kHalted) log("attack halted: " + full.message);
  std::vector<AttackState> out;
  for (std::size_t i = 0; i < flips.size(); ++i) {
    out.push_back(truncate_attack(target, full, flips[i]));
    if (dir.empty()) continue;
    const fs::path bdir = dir / ("budget_" + cfg.budgets[i].label());
    fs::create_directories(bdir);
    save_poisoned(out.back(), bdir / "poisoned.graphdelta");
    write_flip_log(out.back(), bdir / "flips.log");
  }
  return out;
}

// Budgets are fractions of the attacked graph's edge count.
inline SeedAttacks attack_seed(const ExperimentConfig& cfg, const Dataset& d, const TaskContext& ctx,
                               std::uint64_t seed, int threads, const fs::path& seed_dir, bool resume,
                               const std::function<void(const std::string&)>& log) {
  SeedAttacks a;
  const std::string tag = "seed " + std::to_string(seed) + " ";
  if (needs_node_target(cfg)) {
    for (const Budget& b : cfg.budgets) a.node_flips.push_back(b.resolve(d.graph.num_edges()));
    a.node = attack_budgets(cfg, d.graph, a.node_flips, stage_seed(seed, Stage::kAttack), threads, seed_dir, resume,
                            [&](const std::string& l) { log(tag + l); });
  }
  if (needs_task(cfg, "link_prediction")) {
    const Graph target = link_training_graph(d, ctx);
    for (const Budget& b : cfg.budgets) a.link_flips.push_back(b.resolve(target.num_edges()));
    a.link = attack_budgets(cfg, target, a.link_flips, stage_seed(seed, Stage::kLinkAttack), threads,
                            seed_dir.empty() ? fs::path() : seed_dir / "link", resume,
                            [&](const std::string& l) { log(tag + "link " + l); });
  }
  return a;
}

// Contrastive encoder trained on `adjacency`, embedding the same graph.
inline Matrix gca_embeddings(const ExperimentConfig& cfg, const Graph& g, const Matrix& adjacency, std::uint64_t seed) {
  Graph pg(adjacency, g.features, g.labels);
  Rng rng(seed);
  TrainResult r = train(pg, cfg.augmentation, cfg.contrastive, rng);
  return embed(r.params, adjacency, g.features);
}

// One task on `d` with its adjacency replaced by `adjacency`, averaged over
// the evaluation repeats. For link prediction `adjacency` is the (possibly
// poisoned) training graph and is used as is.
inline double evaluate_task(const ExperimentConfig& cfg, const Dataset& d, const TaskContext& ctx,
                            const Matrix& adjacency, const std::string& task, std::uint64_t seed) {
  const Graph& g = d.graph;
  double total = 0.0;
  for (int r = 0; r < cfg.repeats; ++r) {
    if (task == "link_prediction") {
      if (!ctx.edges) throw InvalidArgument("evaluate: no edge split for link prediction");
      Matrix emb = gca_embeddings(cfg, g, adjacency, stage_seed(seed, Stage::kLinkEncoder, r));
      Rng rng(stage_seed(seed, Stage::kLink, r));
      total += link_prediction(emb, *ctx.edges, rng, cfg.link_prediction);
      continue;
    }
    if (!g.labels) throw InvalidArgument("dataset '" + d.name + "' has no labels");
    if (ctx.splits.size() != static_cast<std::size_t>(cfg.repeats)) throw InvalidArgument("evaluate: no node split");
    const NodeSplit& split = ctx.splits[static_cast<std::size_t>(r)];
    if (task == "node_classification") {
      Matrix emb = gca_embeddings(cfg, g, adjacency, stage_seed(seed, Stage::kEncoder, r));
      Rng rng(stage_seed(seed, Stage::kLogReg, r));
      total += node_classification(emb, *g.labels, split, rng, cfg.logreg);
    } else if (task == "transfer_gcn") {
      Rng rng(stage_seed(seed, Stage::kGcn, r));
      total += transfer_gcn(Graph(adjacency, g.features, g.labels), *g.labels, split, rng, cfg.gcn);
    } else {
      throw InvalidArgument("evaluate: unknown task '" + task + "'");
    }
  }
  return total / cfg.repeats;
}

// Metric values of one seed, indexed [budget][task].
inline std::vector<std::vector<double>> run_seed(const ExperimentConfig& cfg, std::uint64_t seed, int attack_threads,
                                                 const RunOptions& opt, const std::function<void(const std::string&)>& log) {
  const Dataset d = load_dataset(cfg, seed);
  const TaskContext ctx = task_context(cfg, d, seed);
  const fs::path seed_dir = opt.out_dir.empty() ? fs::path() : opt.out_dir / ("seed_" + std::to_string(seed));
  const SeedAttacks attacks = attack_seed(cfg, d, ctx, seed, attack_threads, seed_dir, opt.resume, log);

  std::vector<std::vector<double>> out;
  for (std::size_t bi = 0; bi < cfg.budgets.size(); ++bi) {
    std::vector<double> row;
    for (const std::string& task : cfg.tasks) {
      const bool link = task == "link_prediction";
      const AttackState& st = link ? attacks.link[bi] : attacks.node[bi];
      const double v = evaluate_task(cfg, d, ctx, st.adjacency, task, seed);
      char buf[96];
      std::snprintf(buf, sizeof buf, " (%td flips) %s %s %.6f", static_cast<std::ptrdiff_t>(st.flips.size()),
                    task.c_str(), metric_for(task).c_str(), v);
      log("seed " + std::to_string(seed) + " budget " + cfg.budgets[bi].label() + buf);
      row.push_back(v);
    }
    out.push_back(std::move(row));
  }
  return out;
}

inline void write_results(const ExperimentResult& r, const fs::path& dir);

// Runs every seed (in parallel up to cfg.threads) and merges the reports in
// seed order. A failing seed is recorded in `errors`; the others continue.
inline ExperimentResult run_experiment(ExperimentConfig cfg, const RunOptions& opt = {}) {
  cfg.normalize();
  cfg.validate();
  ExperimentResult result;
  result.config = cfg;
  result.config_hash = config_hash(cfg);
  result.dataset = cfg.sbm ? "sbm" : load_manifest(*cfg.manifest).name;

  std::mutex log_mutex;
  auto log = [&](const std::string& line) {
    if (!opt.progress) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    opt.progress(line);
  };

  const std::size_t n = cfg.seeds.size();
  const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), n));
  const int attack_threads = std::max(1, cfg.threads / workers);
  std::vector<std::optional<std::vector<std::vector<double>>>> values(n);
  std::vector<std::string> failures(n);
  auto work = [&](int w) {
    for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(workers)) {
      try {
        values[i] = run_seed(cfg, cfg.seeds[i], attack_threads, opt, log);
      } catch (const std::exception& e) {
        failures[i] = e.what();
        log("seed " + std::to_string(cfg.seeds[i]) + " failed: " + e.what());
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (std::thread& t : pool) t.join();
  }

  for (std::size_t bi = 0; bi < cfg.budgets.size(); ++bi) {
    for (std::size_t ti = 0; ti < cfg.tasks.size(); ++ti) {
      MetricsReport rep;
      rep.dataset = result.dataset;
      rep.task = cfg.tasks[ti];
      rep.attack = cfg.attack;
      rep.budget = cfg.budgets[bi].label();
      rep.metric = metric_for(rep.task);
      for (std::size_t i = 0; i < n; ++i) {
        if (!values[i]) continue;
        rep.seeds.push_back(cfg.seeds[i]);
        rep.values.push_back((*values[i])[bi][ti]);
      }
      result.reports.push_back(std::move(rep));
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (!values[i]) result.errors.push_back(SeedError{cfg.seeds[i], failures[i]});

  if (!opt.out_dir.empty()) write_results(result, opt.out_dir);
  return result;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Long-format CSV: a provenance comment, a header, then one row per
// (budget, task, seed).
inline std::string results_csv(const ExperimentResult& r) {
  std::ostringstream out;
  out << "# clga " << kVersion << " config " << r.config_hash << '\n';
  out << "dataset,attack,budget,task,seed,metric,value\n";
  for (const MetricsReport& rep : r.reports)
    for (std::size_t i = 0; i < rep.values.size(); ++i)
      out << rep.dataset << ',' << rep.attack << ',' << rep.budget << ',' << rep.task << ',' << rep.seeds[i] << ','
          << rep.metric << ',' << format_value(rep.values[i]) << '\n';
  return out.str();
}

inline json report_to_json(const MetricsReport& rep) {
  json j{{"dataset", rep.dataset}, {"task", rep.task},   {"attack", rep.attack},
         {"budget", rep.budget},   {"metric", rep.metric}, {"seeds", rep.seeds},
         {"values", rep.values}};
  j["mean"] = rep.values.empty() ? json(nullptr) : json(rep.mean());
  j["std"] = rep.values.empty() ? json(nullptr) : json(rep.stddev());
  return j;
}

inline json results_json(const ExperimentResult& r) {
  json j;
  j["version"] = kVersion;
  j["config_hash"] = r.config_hash;
  j["config"] = to_json(r.config);
  j["dataset"] = r.dataset;
  j["reports"] = json::array();
  for (const MetricsReport& rep : r.reports) j["reports"].push_back(report_to_json(rep));
  j["errors"] = json::array();
  for (const SeedError& e : r.errors) j["errors"].push_back({{"seed", e.seed}, {"message", e.message}});
  return j;
}

inline void write_results(const ExperimentResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  const std::string csv = results_csv(r);
  const std::string js = results_json(r).dump(2) + "\n";
  detail::write_atomically(dir / "results.csv", [&](std::ostream& out) { out << csv; });
  detail::write_atomically(dir / "results.json", [&](std::ostream& out) { out << js; });
}

// Reports stored in a results.json file.
inline std::vector<MetricsReport> read_reports(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  std::vector<MetricsReport> out;
  try {
    for (const json& rj : j.at("reports")) {
      MetricsReport rep;
      rep.dataset = rj.at("dataset").get<std::string>();
      rep.task = rj.at("task").get<std::string>();
      rep.attack = rj.at("attack").get<std::string>();
      rep.budget = rj.at("budget").get<std::string>();
      rep.metric = rj.at("metric").get<std::string>();
      rep.seeds = rj.at("seeds").get<std::vector<std::uint64_t>>();
      rep.values = rj.at("values").get<std::vector<double>>();
      if (rep.seeds.size() != rep.values.size()) throw FormatError(path.string() + ": seed/value count mismatch");
      out.push_back(std::move(rep));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

struct ComparisonCell {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t count = 0;
  bool best = false;
};

// Attack x budget matrix of means for one task.
struct ComparisonTable {
  std::string dataset;
  std::string task;
  std::string metric;
  std::vector<std::string> attacks;
  std::vector<std::string> budgets;
  std::vector<std::vector<std::optional<ComparisonCell>>> cells;  // [attack][budget]
};

namespace detail {

// Fractions by value, then absolute counts by value.
inline std::pair<int, double> budget_order(const std::string& label) {
  const bool absolute = label.size() > 5 && label.ends_with("flips");
  return {absolute ? 1 : 0, std::stod(absolute ? label.substr(0, label.size() - 5) : label)};
}

}  // namespace detail

// Merges report sets (one per run) into per-task tables. All sets must share
// the dataset and task list. In every budget column the attack with the lowest
// mean, "none" excluded, is flagged; ties flag all of them.
inline std::vector<ComparisonTable> compare(const std::vector<std::vector<MetricsReport>>& runs) {
  if (runs.empty()) throw InvalidArgument("compare: no reports");
  std::optional<std::string> dataset;
  std::optional<std::set<std::string>> tasks;
  std::vector<std::string> task_order;
  for (const auto& run : runs) {
    if (run.empty()) throw InvalidArgument("compare: empty report");
    std::set<std::string> ts;
    for (const MetricsReport& r : run) {
      if (!dataset) dataset = r.dataset;
      if (r.dataset != *dataset) {
        throw InvalidArgument("compare: incompatible reports, dataset '" + r.dataset + "' vs '" + *dataset + "'");
      }
      if (ts.insert(r.task).second && !tasks) task_order.push_back(r.task);
    }
    if (!tasks) tasks = ts;
    if (ts != *tasks) throw InvalidArgument("compare: incompatible reports, task lists differ");
  }

  std::vector<ComparisonTable> tables;
  for (const std::string& task : task_order) {
    ComparisonTable t;
    t.dataset = *dataset;
    t.task = task;
    std::map<std::pair<std::string, std::string>, const MetricsReport*> by_cell;
    std::set<std::string> attacks;
    std::vector<std::string> budgets;
    for (const auto& run : runs)
      for (const MetricsReport& r : run) {
        if (r.task != task) continue;
        if (t.metric.empty()) t.metric = r.metric;
        if (!by_cell.emplace(std::make_pair(r.attack, r.budget), &r).second) {
          throw InvalidArgument("compare: duplicate cell " + r.attack + " @ " + r.budget + " for " + task);
        }
        attacks.insert(r.attack);
        if (std::find(budgets.begin(), budgets.end(), r.budget) == budgets.end()) budgets.push_back(r.budget);
      }
    std::stable_sort(budgets.begin(), budgets.end(), [](const std::string& a, const std::string& b) {
      return detail::budget_order(a) < detail::budget_order(b);
    });
    if (attacks.erase("none")) t.attacks.push_back("none");
    t.attacks.insert(t.attacks.end(), attacks.begin(), attacks.end());
    t.budgets = budgets;
    t.cells.assign(t.attacks.size(), std::vector<std::optional<ComparisonCell>>(budgets.size()));
    for (std::size_t a = 0; a < t.attacks.size(); ++a)
      for (std::size_t b = 0; b < budgets.size(); ++b) {
        auto it = by_cell.find({t.attacks[a], budgets[b]});
        if (it == by_cell.end() || it->second->values.empty()) continue;
        t.cells[a][b] = ComparisonCell{it->second->mean(), it->second->stddev(), it->second->values.size(), false};
      }
    for (std::size_t b = 0; b < budgets.size(); ++b) {
      std::optional<double> lowest;
      for (std::size_t a = 0; a < t.attacks.size(); ++a)
        if (t.attacks[a] != "none" && t.cells[a][b] && (!lowest || t.cells[a][b]->mean < *lowest))
          lowest = t.cells[a][b]->mean;
      for (std::size_t a = 0; a < t.attacks.size(); ++a)
        if (t.attacks[a] != "none" && t.cells[a][b] && t.cells[a][b]->mean == *lowest) t.cells[a][b]->best = true;
    }
    tables.push_back(std::move(t));
  }
  return tables;
}

// Plain-text rendering; flagged cells carry a trailing '*'.
inline std::string render(const std::vector<ComparisonTable>& tables) {
  std::ostringstream out;
  for (const ComparisonTable& t : tables) {
    out << t.dataset << " / " << t.task << " (" << t.metric << " mean +- std, * = lowest)\n";
    std::vector<std::vector<std::string>> grid;
    grid.push_back({"attack"});
    for (const std::string& b : t.budgets) grid[0].push_back(b);
    for (std::size_t a = 0; a < t.attacks.size(); ++a) {
      std::vector<std::string> row{t.attacks[a]};
      for (const auto& c : t.cells[a]) {
        if (!c) {
          row.push_back("-");
          continue;
        }
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.4f +- %.4f%s", c->mean, c->stddev, c->best ? "*" : "");
        row.push_back(buf);
      }
      grid.push_back(std::move(row));
    }
    std::vector<std::size_t> width(grid[0].size(), 0);
    for (const auto& row : grid)
      for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    for (const auto& row : grid) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        out << (i ? "  " : "") << row[i] << std::string(width[i] - row[i].size(), ' ');
      }
      out << '\n';
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace clga
