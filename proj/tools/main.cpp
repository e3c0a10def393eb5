// Command-line surface of the robustness workbench. Subcommands:
//   train    fit a model on a dataset and write a checkpoint
//   sweep    run a fault-injection grid over a checkpoint, write CSV + reports
//   profile  micro-benchmark aggregation latency against graph size
//   prune    magnitude-prune a checkpoint, optionally fine-tune under masks
//   inject   single fault draw: print clean/faulty accuracy and hit counts
//   synth    generate a planted-partition dataset file
// Every flag can also come from a key=value config file via --config.
// Exit code 0 on success, 2 on any configuration or runtime error.

#include <cinttypes>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rgnn/harness.hpp"

using namespace rgnn;

namespace {

// A dataset argument is either a file path or an inline generator spec:
//   synth:n=200,k=2,p_in=0.1,p_out=0.01,feat_dim=8,noise=0.3,seed=1
Graph load_dataset(const std::string& spec) {
  if (spec.rfind("synth:", 0) != 0) return load_graph(spec);
  PlantedPartitionParams p;
  std::string body = spec.substr(6);
  size_t pos = 0;
  while (pos < body.size()) {
    size_t comma = body.find(',', pos);
    if (comma == std::string::npos) comma = body.size();
    const std::string kv = body.substr(pos, comma - pos);
    pos = comma + 1;
    if (kv.empty()) continue;
    const size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ConfigError("synth spec entry '" + kv + "' is not key=value");
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    try {
      if (key == "n") p.n = std::stoi(val);
      else if (key == "k") p.k = std::stoi(val);
      else if (key == "p_in") p.p_in = std::stof(val);
      else if (key == "p_out") p.p_out = std::stof(val);
      else if (key == "feat_dim") p.feat_dim = std::stoi(val);
      else if (key == "noise") p.noise = std::stof(val);
      else if (key == "seed") p.seed = std::stoull(val);
      else throw ConfigError("unknown synth key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad synth value for '" + key + "': " + val);
    } catch (const std::out_of_range&) {
      throw ConfigError("synth value out of range for '" + key + "': " + val);
    }
  }
  return synth_planted_partition(p);
}

std::vector<AggregatorConfig> parse_agg_list(const std::vector<std::string>& specs) {
  std::vector<AggregatorConfig> out;
  for (const auto& s : specs) out.push_back(parse_aggregator(s));
  return out;
}

struct TrainArgs {
  std::string arch = "gcn";
  std::string dataset;
  std::string agg = "mean";
  std::string out = "model.rgnn";
  std::vector<int> hidden{64};
  float dropout = 0.5f;
  std::string optim = "adam";
  float lr = 0.01f;
  float weight_decay = 5e-4f;
  int epochs = 200;
  int patience = 20;
  uint64_t seed = 0;
};

TrainConfig to_train_config(const TrainArgs& a) {
  TrainConfig tc;
  tc.optim = parse_optim(a.optim);
  tc.lr = a.lr;
  tc.weight_decay = a.weight_decay;
  tc.epochs = a.epochs;
  tc.patience = a.patience;
  tc.seed = a.seed;
  return tc;
}

int run_train(const TrainArgs& a) {
  const Graph g = load_dataset(a.dataset);
  ModelConfig mc;
  mc.arch = parse_arch(a.arch);
  mc.widths.push_back(g.feat_dim());
  for (int h : a.hidden) mc.widths.push_back(h);
  mc.widths.push_back(g.num_classes);
  mc.dropout = a.dropout;
  mc.aggregator = parse_aggregator(a.agg);
  Model m = init_model(mc, a.seed);

  const TrainConfig tc = to_train_config(a);
  TrainResult res;
  double test_acc = 0.0;
  if (g.task == Task::graph_level) {
    const GraphBatch batch = batch_from_components(g);
    res = train_graph_model(m, batch, tc);
    test_acc = evaluate_graphs(m, batch, batch.test_mask);
  } else {
    res = train_node_model(m, g, tc);
    test_acc = evaluate_nodes(m, g, g.test_mask);
  }
  save_model(m, a.out);
  std::printf("trained arch=%s agg=%s epochs_run=%d best_val=%.4f test_acc=%.4f ckpt=%s\n",
              a.arch.c_str(), a.agg.c_str(), res.epochs_run, res.best_val_acc, test_acc,
              a.out.c_str());
  return 0;
}

struct SweepArgs {
  std::string ckpt;
  std::string dataset;
  std::vector<std::string> aggs{"mean"};
  std::vector<std::string> sites{"weights"};
  std::vector<double> bers = default_ber_grid();
  std::vector<uint64_t> seeds{0, 1, 2, 3, 4};
  int repeats = 10;
  int threads = 1;
  double affected_rel = 1e-6;
  std::string out = "sweep_out";
};

int run_sweep(const SweepArgs& a) {
  const Model m = load_model(a.ckpt);
  const Graph g = load_dataset(a.dataset);
  SweepSpec spec;
  spec.aggs = parse_agg_list(a.aggs);
  spec.sites.clear();
  for (const auto& s : a.sites) spec.sites.push_back(parse_site(s));
  spec.bers = a.bers;
  spec.seeds = a.seeds;
  spec.repeats = a.repeats;
  spec.threads = a.threads;
  spec.affected_rel = a.affected_rel;
  spec.arch_label = arch_name(m.cfg.arch);
  spec.dataset_label = a.dataset;

  std::filesystem::create_directories(a.out);
  const std::string table = a.out + "/runs.csv";
  const auto executed = sweep(m, g, spec, table);
  const auto all = read_records(table);
  report(all, a.out);
  std::printf("sweep wrote %zu new records (%zu total) to %s\n", executed.size(), all.size(),
              a.out.c_str());
  return 0;
}

struct ProfileArgs {
  std::string ckpt;
  std::vector<std::string> aggs;
  std::vector<long> sizes{10000, 30000, 100000};
  int nodes = 2000;
  int dim = 64;
  int warmup = 3;
  int iters = 30;
  uint64_t seed = 0;
  std::string out = "profile.csv";
};

int run_profile(const ProfileArgs& a) {
  ProfileSpec ps;
  if (!a.aggs.empty()) {
    ps.aggs = parse_agg_list(a.aggs);
  } else if (!a.ckpt.empty()) {
    ps.aggs = {load_model(a.ckpt).cfg.aggregator};
  } else {
    ps.aggs = {parse_aggregator("distribution"), parse_aggregator("dynamic_weight"),
               parse_aggregator("cosine")};
  }
  ps.edge_targets = a.sizes;
  ps.n_nodes = a.nodes;
  ps.dim = a.dim;
  ps.warmup = a.warmup;
  ps.iters = a.iters;
  ps.seed = a.seed;
  const ProfileResult pr = profile(ps);
  write_profile_csv(pr, a.out);
  for (const auto& r : pr.rows)
    std::printf("profile agg=%s edges=%ld median_s=%.6g ratio_vs_mean=%.3f\n",
                r.aggregator.c_str(), r.edges, r.median_s, r.ratio_vs_mean);
  for (const auto& f : pr.fits)
    std::printf("fit agg=%s slope=%.6g intercept=%.6g r2=%.5f\n", f.aggregator.c_str(), f.slope,
                f.intercept, f.r2);
  std::printf("profile table written to %s\n", a.out.c_str());
  return 0;
}

struct PruneArgs {
  std::string ckpt;
  float sparsity = 0.0f;
  int finetune_epochs = 0;
  std::string dataset;
  std::string out = "pruned.rgnn";
  std::string optim = "adam";
  float lr = 0.01f;
  float weight_decay = 5e-4f;
  int patience = 20;
  uint64_t seed = 0;
};

int run_prune(const PruneArgs& a) {
  Model m = load_model(a.ckpt);
  const PruneMasks masks = magnitude_prune(m, a.sparsity);
  if (a.finetune_epochs > 0) {
    if (a.dataset.empty()) throw ConfigError("--finetune-epochs requires --dataset");
    const Graph g = load_dataset(a.dataset);
    TrainConfig tc;
    tc.optim = parse_optim(a.optim);
    tc.lr = a.lr;
    tc.weight_decay = a.weight_decay;
    tc.epochs = a.finetune_epochs;
    tc.patience = a.patience;
    tc.seed = a.seed;
    tc.masks = &masks;
    if (g.task == Task::graph_level) {
      const GraphBatch batch = batch_from_components(g);
      train_graph_model(m, batch, tc);
    } else {
      train_node_model(m, g, tc);
    }
  }
  save_model(m, a.out);
  size_t zeros = 0, total = 0;
  const Model& cm = m;
  for (const auto* w : cm.weight_matrices()) {
    total += w->size();
    for (size_t i = 0; i < w->size(); ++i)
      if (w->data()[i] == 0.0f) ++zeros;
  }
  std::printf("pruned sparsity=%.4f (%zu of %zu weights zero) ckpt=%s\n",
              total ? double(zeros) / double(total) : 0.0, zeros, total, a.out.c_str());
  return 0;
}

struct InjectArgs {
  std::string ckpt;
  std::string dataset;
  std::string site = "weights";
  double ber = 0.0;
  uint64_t seed = 0;
};

int run_inject(const InjectArgs& a) {
  Model m = load_model(a.ckpt);
  const Graph g = load_dataset(a.dataset);
  const FaultSite site = parse_site(a.site);

  const DenseMatrix clean_logits = forward_nodes(m, g);
  const double clean_acc = masked_accuracy(clean_logits, g.labels, g.test_mask);

  Model mf = m;
  Graph gf = g;
  std::mt19937_64 rng(a.seed);
  const InjectionReport rep = apply_fault(mf, gf, site, a.ber, rng);
  InferStats is;
  const DenseMatrix faulty_logits = forward_nodes(mf, gf, {}, &is);
  const double faulty_acc = masked_accuracy(faulty_logits, g.labels, g.test_mask);

  std::printf("site=%s ber=%g seed=%" PRIu64 "\n", a.site.c_str(), a.ber, a.seed);
  std::printf("clean_accuracy=%.6f\n", clean_acc);
  std::printf("faulty_accuracy=%.6f\n", faulty_acc);
  std::printf("affected_fraction=%.6f\n", affected_fraction(clean_logits, faulty_logits));
  std::printf("trimmed_fraction=%.6f\n", is.discards.fraction());
  std::printf("bits_total=%" PRIu64 " bits_flipped=%" PRIu64 " words_affected=%" PRIu64
              " entries_toggled=%" PRIu64 "\n",
              rep.bits_total, rep.bits_flipped, rep.words_affected, rep.entries_toggled);
  return 0;
}

struct SynthArgs {
  int n = 200;
  int k = 2;
  float p_in = 0.1f;
  float p_out = 0.01f;
  int feat_dim = 8;
  float noise = 0.3f;
  uint64_t seed = 0;
  std::string out = "synth.graph";
};

int run_synth(const SynthArgs& a) {
  PlantedPartitionParams p;
  p.n = a.n;
  p.k = a.k;
  p.p_in = a.p_in;
  p.p_out = a.p_out;
  p.feat_dim = a.feat_dim;
  p.noise = a.noise;
  p.seed = a.seed;
  const Graph g = synth_planted_partition(p);
  save_graph(g, a.out);
  std::printf("synth nodes=%d edges=%lld classes=%d feat_dim=%d file=%s\n", g.num_nodes,
              static_cast<long long>(g.num_edge_slots() / 2), g.num_classes, g.feat_dim(),
              a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GNN bit-flip robustness workbench"};
  app.require_subcommand(1);

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->set_config("--config");
  train->add_option("--arch", ta.arch, "gcn|gin")->capture_default_str();
  train->add_option("--dataset", ta.dataset, "graph file or synth:k=v,... spec")->required();
  train->add_option("--agg", ta.agg, "aggregator spec, e.g. combined:alpha=0.2")
      ->capture_default_str();
  train->add_option("--hidden", ta.hidden, "hidden layer widths")->capture_default_str();
  train->add_option("--dropout", ta.dropout)->capture_default_str();
  train->add_option("--optim", ta.optim, "adam|sgd")->capture_default_str();
  train->add_option("--lr", ta.lr)->capture_default_str();
  train->add_option("--weight-decay", ta.weight_decay)->capture_default_str();
  train->add_option("--epochs", ta.epochs)->capture_default_str();
  train->add_option("--patience", ta.patience)->capture_default_str();
  train->add_option("--seed", ta.seed)->capture_default_str();
  train->add_option("--out", ta.out, "checkpoint path")->capture_default_str();

  SweepArgs sa;
  CLI::App* sw = app.add_subcommand("sweep", "fault-injection grid over a checkpoint");
  sw->set_config("--config");
  sw->add_option("--ckpt", sa.ckpt)->required();
  sw->add_option("--dataset", sa.dataset)->required();
  sw->add_option("--aggs", sa.aggs, "aggregator specs")->capture_default_str();
  sw->add_option("--sites", sa.sites, "weights|embeddings|adjacency")->capture_default_str();
  sw->add_option("--bers", sa.bers, "bit error rates")->capture_default_str();
  sw->add_option("--seeds", sa.seeds)->capture_default_str();
  sw->add_option("--repeats", sa.repeats)->capture_default_str();
  sw->add_option("--threads", sa.threads)->capture_default_str();
  sw->add_option("--affected-rel", sa.affected_rel, "relative threshold for affected rows")
      ->capture_default_str();
  sw->add_option("--out", sa.out, "output directory")->capture_default_str();

  ProfileArgs pa;
  CLI::App* pr = app.add_subcommand("profile", "aggregation latency vs graph size");
  pr->set_config("--config");
  pr->add_option("--ckpt", pa.ckpt, "optional; supplies the aggregator when --aggs is empty");
  pr->add_option("--aggs", pa.aggs, "aggregator specs")->capture_default_str();
  pr->add_option("--sizes", pa.sizes, "target edge counts")->capture_default_str();
  pr->add_option("--nodes", pa.nodes)->capture_default_str();
  pr->add_option("--dim", pa.dim)->capture_default_str();
  pr->add_option("--warmup", pa.warmup)->capture_default_str();
  pr->add_option("--iters", pa.iters)->capture_default_str();
  pr->add_option("--seed", pa.seed)->capture_default_str();
  pr->add_option("--out", pa.out, "profile CSV path")->capture_default_str();

  PruneArgs pru;
  CLI::App* pn = app.add_subcommand("prune", "magnitude-prune a checkpoint");
  pn->set_config("--config");
  pn->add_option("--ckpt", pru.ckpt)->required();
  pn->add_option("--sparsity", pru.sparsity, "fraction of weights to zero")->required();
  pn->add_option("--finetune-epochs", pru.finetune_epochs)->capture_default_str();
  pn->add_option("--dataset", pru.dataset, "needed when fine-tuning");
  pn->add_option("--optim", pru.optim)->capture_default_str();
  pn->add_option("--lr", pru.lr)->capture_default_str();
  pn->add_option("--weight-decay", pru.weight_decay)->capture_default_str();
  pn->add_option("--patience", pru.patience)->capture_default_str();
  pn->add_option("--seed", pru.seed)->capture_default_str();
  pn->add_option("--out", pru.out)->capture_default_str();

  InjectArgs ia;
  CLI::App* in = app.add_subcommand("inject", "single-shot fault injection report");
  in->set_config("--config");
  in->add_option("--ckpt", ia.ckpt)->required();
  in->add_option("--dataset", ia.dataset)->required();
  in->add_option("--site", ia.site, "weights|embeddings|adjacency")->capture_default_str();
  in->add_option("--ber", ia.ber)->required();
  in->add_option("--seed", ia.seed)->capture_default_str();

  SynthArgs sy;
  CLI::App* syn = app.add_subcommand("synth", "generate a planted-partition dataset");
  syn->set_config("--config");
  syn->add_option("--n", sy.n)->capture_default_str();
  syn->add_option("--k", sy.k)->capture_default_str();
  syn->add_option("--p-in", sy.p_in)->capture_default_str();
  syn->add_option("--p-out", sy.p_out)->capture_default_str();
  syn->add_option("--feat-dim", sy.feat_dim)->capture_default_str();
  syn->add_option("--noise", sy.noise)->capture_default_str();
  syn->add_option("--seed", sy.seed)->capture_default_str();
  syn->add_option("--out", sy.out)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(train)) return run_train(ta);
    if (app.got_subcommand(sw)) return run_sweep(sa);
    if (app.got_subcommand(pr)) return run_profile(pa);
    if (app.got_subcommand(pn)) return run_prune(pru);
    if (app.got_subcommand(in)) return run_inject(ia);
    if (app.got_subcommand(syn)) return run_synth(sy);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
