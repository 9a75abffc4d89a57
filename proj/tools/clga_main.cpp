// clga: command-line front end for attacks, training, evaluation and
// end-to-end experiment runs.

#include <charconv>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clga/experiment.hpp"

namespace {

using namespace clga;

struct Overrides {
  std::string config;
  std::string dataset;
  std::string attack;
  std::string budget;
  std::string seeds;
  std::string tasks;
  std::optional<int> k;
  std::optional<int> epochs;
  std::optional<int> retrain_epochs;
  std::optional<Index> flips_per_iter;
  std::optional<int> threads;
  std::optional<int> repeats;
  std::string out_dir;
  bool resume = false;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

template <class T>
T parse_int(const std::string& s, const char* what) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw InvalidArgument(std::string("bad ") + what + " '" + s + "'");
  return v;
}

// "0.05" is a fraction of the edge count, "12" an absolute number of flips.
std::vector<Budget> parse_budgets(const std::string& s) {
  std::vector<Budget> out;
  for (const std::string& tok : split_list(s)) {
    if (tok.find_first_of(".eE") != std::string::npos) {
      std::size_t used = 0;
      double f = 0.0;
      try {
        f = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size()) throw InvalidArgument("bad budget '" + tok + "'");
      out.push_back(Budget::of_fraction(f));
    } else {
      out.push_back(Budget::of_flips(parse_int<Index>(tok, "budget")));
    }
  }
  return out;
}

// "0,1,2" or "0-4".
std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const std::string& tok : split_list(s)) {
    const auto dash = tok.find('-');
    if (dash == std::string::npos) {
      out.push_back(parse_int<std::uint64_t>(tok, "seed"));
      continue;
    }
    const auto lo = parse_int<std::uint64_t>(tok.substr(0, dash), "seed range");
    const auto hi = parse_int<std::uint64_t>(tok.substr(dash + 1), "seed range");
    if (hi < lo) throw InvalidArgument("bad seed range '" + tok + "'");
    for (std::uint64_t v = lo; v <= hi; ++v) out.push_back(v);
  }
  return out;
}

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "experiment config (JSON)");
  app->add_option("--dataset", o.dataset, "dataset manifest, or 'sbm' for the default block model");
  app->add_option("--attack", o.attack, "none, clga or random");
  app->add_option("--budget", o.budget, "comma list; 0.05 = fraction of edges, 12 = flips");
  app->add_option("--k", o.k, "augmentation pairs per gradient estimate");
  app->add_option("--seeds", o.seeds, "comma list or range, e.g. 0-4");
  app->add_option("--epochs", o.epochs, "contrastive training epochs");
  app->add_option("--retrain-epochs", o.retrain_epochs, "encoder epochs per attack iteration");
  app->add_option("--flips-per-iter", o.flips_per_iter, "flips per attack iteration");
  app->add_option("--tasks", o.tasks, "comma list of node_classification, link_prediction, transfer_gcn");
  app->add_option("--threads", o.threads, "worker threads");
  app->add_option("--repeats", o.repeats, "evaluations averaged per seed and budget");
  app->add_option("--out-dir", o.out_dir, "output directory");
}

ExperimentConfig build_config(const Overrides& o) {
  ExperimentConfig c;
  if (!o.config.empty()) {
    c = load_experiment_config(o.config);
  } else if (o.dataset.empty()) {
    throw InvalidArgument("need --config or --dataset");
  }
  if (o.dataset == "sbm") {
    c.manifest.reset();
    c.sbm = SbmSpec{};
  } else if (!o.dataset.empty()) {
    c.sbm.reset();
    c.manifest = o.dataset;
  }
  if (!o.attack.empty()) c.attack = o.attack;
  if (!o.budget.empty()) c.budgets = parse_budgets(o.budget);
  if (!o.seeds.empty()) c.seeds = parse_seeds(o.seeds);
  if (!o.tasks.empty()) c.tasks = split_list(o.tasks);
  if (o.k) c.k = *o.k;
  if (o.epochs) c.contrastive.epochs = *o.epochs;
  if (o.retrain_epochs) c.retrain_epochs = *o.retrain_epochs;
  if (o.flips_per_iter) c.flips_per_iteration = *o.flips_per_iter;
  if (o.threads) c.threads = *o.threads;
  if (o.repeats) c.repeats = *o.repeats;
  c.normalize();
  c.validate();
  return c;
}

void progress(const std::string& line) { std::cerr << line << std::endl; }

fs::path require_out_dir(const Overrides& o) {
  if (o.out_dir.empty()) throw InvalidArgument("--out-dir is required");
  return o.out_dir;
}

int cmd_run(const Overrides& o) {
  ExperimentConfig cfg = build_config(o);
  ExperimentResult r = run_experiment(cfg, RunOptions{require_out_dir(o), o.resume, progress});
  std::cout << render(compare({r.reports}));
  for (const SeedError& e : r.errors) std::cerr << "seed " << e.seed << " failed: " << e.message << '\n';
  return r.errors.empty() ? 0 : 3;
}

int cmd_attack(const Overrides& o) {
  ExperimentConfig cfg = build_config(o);
  const fs::path out = require_out_dir(o);
  for (std::uint64_t seed : cfg.seeds) {
    const Dataset d = load_dataset(cfg, seed);
    const TaskContext ctx = task_context(cfg, d, seed);
    const fs::path seed_dir = out / ("seed_" + std::to_string(seed));
    const SeedAttacks a = attack_seed(cfg, d, ctx, seed, cfg.threads, seed_dir, o.resume, progress);
    for (std::size_t i = 0; i < cfg.budgets.size(); ++i) {
      const std::string b = "budget_" + cfg.budgets[i].label();
      if (!a.node.empty()) std::cout << (seed_dir / b).string() << ": " << a.node[i].flips.size() << " flips\n";
      if (!a.link.empty()) {
        std::cout << (seed_dir / "link" / b).string() << ": " << a.link[i].flips.size() << " flips\n";
      }
    }
  }
  return 0;
}

int cmd_train(const Overrides& o, const std::string& poisoned) {
  ExperimentConfig cfg = build_config(o);
  const fs::path out = require_out_dir(o);
  fs::create_directories(out);
  const std::uint64_t seed = cfg.seeds.front();
  const Dataset d = load_dataset(cfg, seed);
  const Matrix adj = poisoned.empty() ? d.graph.adjacency : load_poisoned(poisoned, d.graph).adjacency;
  Graph g(adj, d.graph.features, d.graph.labels);
  Rng rng(stage_seed(seed, Stage::kEncoder));
  TrainResult r = train(g, cfg.augmentation, cfg.contrastive, rng);
  write_features(out / "embeddings.txt", embed(r.params, adj, g.features));
  std::ofstream losses(out / "losses.txt");
  for (double l : r.losses) losses << format_value(l) << '\n';
  std::printf("trained %zu epochs, final loss %.6f\n", r.losses.size(), r.losses.empty() ? 0.0 : r.losses.back());
  return 0;
}

// Node tasks run on the full graph (or --poisoned); link prediction on the
// training graph (or --poisoned-link, an attack on that graph).
int cmd_eval(const Overrides& o, const std::string& poisoned, const std::string& poisoned_link,
             const std::string& embeddings) {
  ExperimentConfig cfg = build_config(o);
  for (std::uint64_t seed : cfg.seeds) {
    const Dataset d = load_dataset(cfg, seed);
    const TaskContext ctx = task_context(cfg, d, seed);
    if (!embeddings.empty()) {
      if (ctx.splits.empty()) throw InvalidArgument("--embeddings needs the node_classification task");
      Matrix emb = read_features(embeddings, d.graph.num_nodes());
      Rng rng(stage_seed(seed, Stage::kLogReg));
      std::printf("seed %llu node_classification accuracy %.6f\n", static_cast<unsigned long long>(seed),
                  node_classification(emb, *d.graph.labels, ctx.splits.front(), rng, cfg.logreg));
      continue;
    }
    for (const std::string& task : cfg.tasks) {
      Matrix adj;
      if (task == "link_prediction") {
        const Graph target = link_training_graph(d, ctx);
        adj = poisoned_link.empty() ? target.adjacency : load_poisoned(poisoned_link, target).adjacency;
      } else {
        adj = poisoned.empty() ? d.graph.adjacency : load_poisoned(poisoned, d.graph).adjacency;
      }
      const double v = evaluate_task(cfg, d, ctx, adj, task, seed);
      std::printf("seed %llu %s %s %.6f\n", static_cast<unsigned long long>(seed), task.c_str(),
                  metric_for(task).c_str(), v);
    }
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& files) {
  std::vector<std::vector<MetricsReport>> runs;
  for (const std::string& f : files) runs.push_back(read_reports(f));
  std::cout << render(compare(runs));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive-loss gradient attack on graph contrastive learning"};
  app.set_version_flag("--version", std::string(clga::kVersion));
  app.require_subcommand(1);

  Overrides run_o, attack_o, train_o, eval_o;
  std::string train_poisoned, eval_poisoned, eval_poisoned_link, eval_embeddings;
  std::vector<std::string> compare_files;

  CLI::App* run = app.add_subcommand("run", "attack, retrain and evaluate end to end");
  add_common(run, run_o);
  run->add_flag("--resume", run_o.resume, "continue attacks from checkpoints in --out-dir");

  CLI::App* attack = app.add_subcommand("attack", "poison the graph and write .graphdelta files");
  add_common(attack, attack_o);
  attack->add_flag("--resume", attack_o.resume, "continue from checkpoints in --out-dir");

  CLI::App* trn = app.add_subcommand("train", "train the contrastive encoder and write embeddings");
  add_common(trn, train_o);
  trn->add_option("--poisoned", train_poisoned, "train on this .graphdelta instead of the clean graph");

  CLI::App* ev = app.add_subcommand("eval", "retrain and evaluate on a clean or poisoned graph");
  add_common(ev, eval_o);
  ev->add_option("--poisoned", eval_poisoned, "node tasks on this .graphdelta (attack on the full graph)");
  ev->add_option("--poisoned-link", eval_poisoned_link, "link prediction on this .graphdelta (attack on the training graph)");
  ev->add_option("--embeddings", eval_embeddings, "node classification on precomputed embeddings");

  CLI::App* cmp = app.add_subcommand("compare", "tabulate results.json files");
  cmp->add_option("results", compare_files, "results.json files")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(run_o);
    if (*attack) return cmd_attack(attack_o);
    if (*trn) return cmd_train(train_o, train_poisoned);
    if (*ev) return cmd_eval(eval_o, eval_poisoned, eval_poisoned_link, eval_embeddings);
    if (*cmp) return cmd_compare(compare_files);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
