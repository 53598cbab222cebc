// nestnet: train doubly nested models, extract slices, and audit the
// numerics. Every command is reproducible from the config echo + seed.
//
// Exit codes:
//   0  success
//   1  command-line parse error
//   2  configuration error (bad descriptor, bad flag combination, ...)
//   3  data error (unreadable dataset or CSV, corrupt model container, ...)
//   4  no slice satisfies the requested budget
//   5  verification failure
//   6  training diverged (non-finite loss)
//   10 unexpected internal error

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "nestnet/cost.hpp"
#include "nestnet/csv.hpp"
#include "nestnet/dataset.hpp"
#include "nestnet/descriptor.hpp"
#include "nestnet/errors.hpp"
#include "nestnet/loss_weights.hpp"
#include "nestnet/model.hpp"
#include "nestnet/select.hpp"
#include "nestnet/serialize.hpp"
#include "nestnet/slice.hpp"
#include "nestnet/train.hpp"
#include "nestnet/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nestnet;

namespace {

constexpr int kExitParse = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitInfeasible = 4;
constexpr int kExitVerify = 5;
constexpr int kExitDiverged = 6;
constexpr int kExitInternal = 10;

// Output root: --out flag, else $NESTNET_OUT, else ./out.
std::string resolve_out(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("NESTNET_OUT"); env && *env) return env;
  return "out";
}

struct DataFlags {
  std::string source = "synth";
  int synth_count = 600;
  int synth_test = 300;
  int synth_hw = 8;
  int synth_classes = 0;  // 0: min(model classes, 4)
  double synth_noise = 0.1;
};

void add_data_flags(CLI::App* cmd, DataFlags& df) {
  cmd->add_option("--data", df.source,
                  "Dataset: 'synth' or 'cifar10:DIR' (directory with the binary batches)")
      ->capture_default_str();
  cmd->add_option("--synth-count", df.synth_count, "Synthetic training set size")
      ->capture_default_str();
  cmd->add_option("--synth-test", df.synth_test, "Synthetic test set size")
      ->capture_default_str();
  cmd->add_option("--synth-hw", df.synth_hw, "Synthetic image side length")
      ->capture_default_str();
  cmd->add_option("--synth-classes", df.synth_classes,
                  "Synthetic class count (default: min(model classes, 4))");
  cmd->add_option("--synth-noise", df.synth_noise, "Synthetic Gaussian noise sigma")
      ->capture_default_str();
}

// Train/test pair for a data spec. The synthetic test split uses seed+1 so
// it never overlaps the training draw.
std::pair<Dataset, Dataset> load_data(const DataFlags& df, int model_classes, uint64_t seed) {
  if (df.source == "synth") {
    int classes = df.synth_classes > 0 ? df.synth_classes : std::min(model_classes, 4);
    Dataset train = synth_bars(df.synth_count, df.synth_hw, classes, df.synth_noise, seed, "train");
    Dataset test = synth_bars(df.synth_test, df.synth_hw, classes, df.synth_noise, seed + 1, "test");
    return {std::move(train), std::move(test)};
  }
  if (df.source.rfind("cifar10:", 0) == 0) {
    const std::string dir = df.source.substr(8);
    if (dir.empty()) throw ConfigError("--data cifar10: requires a directory, e.g. cifar10:/data");
    return load_cifar10_binary(dir);
  }
  throw ConfigError("--data must be 'synth' or 'cifar10:DIR', got '" + df.source + "'");
}

json data_flags_json(const DataFlags& df, int resolved_classes) {
  json j;
  j["source"] = df.source;
  if (df.source == "synth") {
    j["synth_count"] = df.synth_count;
    j["synth_test"] = df.synth_test;
    j["synth_hw"] = df.synth_hw;
    j["synth_classes"] = resolved_classes;
    j["synth_noise"] = df.synth_noise;
  }
  return j;
}

struct LambdaFlags {
  std::string spec = "flat";
  double gamma = 1.2;
};

void add_lambda_flags(CLI::App* cmd, LambdaFlags& lf) {
  cmd->add_option("--lambda", lf.spec,
                  "Loss weights: flat | descend | ascend | custom:FILE (L x C CSV) | "
                  "pick:L,C,K (weight K at head (L,C), 1 elsewhere; 1-based)")
      ->capture_default_str();
  cmd->add_option("--gamma", lf.gamma, "Geometric ratio for descend/ascend (> 1)")
      ->capture_default_str();
}

LossWeights parse_lambda(const LambdaFlags& lf, int L, int C) {
  const std::string& s = lf.spec;
  if (s == "flat") return LossWeights::flat(L, C);
  if (s == "descend") return LossWeights::descend(L, C, lf.gamma);
  if (s == "ascend") return LossWeights::ascend(L, C, lf.gamma);
  if (s.rfind("custom:", 0) == 0) {
    GridCsv g = read_grid_csv(s.substr(7));
    if (g.L != L || g.C != C)
      throw ConfigError("--lambda custom table is " + std::to_string(g.L) + "x" +
                        std::to_string(g.C) + ", model grid is " + std::to_string(L) + "x" +
                        std::to_string(C));
    return LossWeights::custom(L, C, g.values);
  }
  if (s.rfind("pick:", 0) == 0) {
    int l = 0, c = 0;
    double k = 0;
    if (std::sscanf(s.c_str() + 5, "%d,%d,%lf", &l, &c, &k) != 3)
      throw ConfigError("--lambda pick wants pick:L,C,K (e.g. pick:2,3,100), got '" + s + "'");
    return LossWeights::single_pick(L, C, l, c, k);
  }
  throw ConfigError("--lambda must be flat, descend, ascend, custom:FILE or pick:L,C,K, got '" +
                    s + "'");
}

// "default" = x0.1 at 60% and 80% of the run; "none" = constant; otherwise
// a comma list of step:factor pairs.
std::vector<std::pair<int64_t, double>> parse_decay(const std::string& s, int64_t steps) {
  if (s == "default") return TrainConfig::default_decay(steps);
  if (s == "none" || s.empty()) return {};
  std::vector<std::pair<int64_t, double>> out;
  size_t pos = 0;
  while (pos <= s.size()) {
    size_t end = s.find(',', pos);
    if (end == std::string::npos) end = s.size();
    const std::string item = s.substr(pos, end - pos);
    long long step = 0;
    double factor = 0;
    if (std::sscanf(item.c_str(), "%lld:%lf", &step, &factor) != 2 || step < 0 || !(factor > 0))
      throw ConfigError("--decay wants step:factor pairs (e.g. 1200:0.1,1600:0.1), got '" + item +
                        "'");
    out.emplace_back(step, factor);
    pos = end + 1;
  }
  return out;
}

json decay_json(const std::vector<std::pair<int64_t, double>>& decay) {
  json arr = json::array();
  for (auto& [step, factor] : decay) arr.push_back({{"step", step}, {"factor", factor}});
  return arr;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

NestedModel<float> load_full_checked(const std::string& path, const char* cmd) {
  if (peek_model_kind(path) != kModelKindFull)
    throw ConfigError(std::string(cmd) + ": '" + path +
                      "' holds a sliced model; a full model container is required");
  return load_full_model(path);
}

// ---------------------------------------------------------------- train ---

struct TrainArgs {
  std::string arch;
  DataFlags data;
  LambdaFlags lambda;
  int64_t steps = 2000;
  int batch = 128;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0;
  std::string decay = "default";
  int64_t eval_every = 0;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string precision = "f32";
  std::string out;
};

template <class S>
int run_train_typed(const TrainArgs& a, const ArchDescriptor& desc, const Dataset& train_set,
                    const Dataset& test_set, const TrainConfig& cfg, const LossWeights& lw,
                    const fs::path& root) {
  NestedModel<S> model = build_model<S>(desc);
  MetricsLog log = nestnet::train(model, train_set, &test_set, cfg, lw);

  NestedModel<float> to_save = model_cast<float>(model);
  to_save.frozen = true;
  save_model(to_save, (root / "model.nnm").string());
  write_metrics_csv((root / "metrics.csv").string(), log);
  const MetricsEntry& last = log.entries.back();
  write_grid_csv((root / "accuracy_grid.csv").string(), last.accuracy.data, log.L, log.C);

  std::printf("trained %lld steps (%s): aggregate loss %.6f, full-head accuracy %.4f\n",
              static_cast<long long>(cfg.steps), a.precision.c_str(), last.aggregate,
              last.accuracy.data.back());
  std::printf("artifacts in %s: model.nnm, metrics.csv, accuracy_grid.csv, config.json\n",
              root.string().c_str());
  return 0;
}

int run_train(const TrainArgs& a) {
  ArchDescriptor desc = ArchDescriptor::from_file(a.arch);
  if (a.seed_set) desc.seed = a.seed;

  auto [train_set, test_set] = load_data(a.data, desc.classes, desc.seed);

  TrainConfig cfg;
  cfg.batch = a.batch;
  cfg.lr = a.lr;
  cfg.momentum = a.momentum;
  cfg.weight_decay = a.weight_decay;
  cfg.steps = a.steps;
  cfg.seed = desc.seed;
  cfg.eval_every = a.eval_every;
  cfg.decay = parse_decay(a.decay, a.steps);

  const int L = desc.num_layer_groups(), C = desc.groups;
  LossWeights lw = parse_lambda(a.lambda, L, C);

  const fs::path root = resolve_out(a.out);
  fs::create_directories(root);

  json echo;
  echo["command"] = "train";
  echo["arch"] = json::parse(desc.to_json());
  echo["data"] = data_flags_json(a.data, train_set.num_classes);
  echo["steps"] = cfg.steps;
  echo["batch"] = cfg.batch;
  echo["lr"] = cfg.lr;
  echo["momentum"] = cfg.momentum;
  echo["weight_decay"] = cfg.weight_decay;
  echo["decay"] = decay_json(cfg.decay);
  echo["eval_every"] = cfg.eval_every;
  echo["seed"] = desc.seed;
  echo["lambda"] = lw.descriptor;
  echo["precision"] = a.precision;
  echo["out"] = root.string();
  write_text_file(root / "config.json", echo.dump(2) + "\n");

  if (a.precision == "f64")
    return run_train_typed<double>(a, desc, train_set, test_set, cfg, lw, root);
  if (a.precision == "f32")
    return run_train_typed<float>(a, desc, train_set, test_set, cfg, lw, root);
  throw ConfigError("--precision must be f32 or f64, got '" + a.precision + "'");
}

// ----------------------------------------------------------------- grid ---

struct GridArgs {
  std::string model;
  DataFlags data;
  std::string baseline;
  int batch = 256;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
};

int run_grid(const GridArgs& a) {
  NestedModel<float> model = load_full_checked(a.model, "grid");
  const uint64_t seed = a.seed_set ? a.seed : model.desc.seed;
  auto [train_set, test_set] = load_data(a.data, model.desc.classes, seed);
  GridEval<float> ev = evaluate_grid(model, test_set, a.batch);
  const int L = model.layer_groups(), C = model.channel_groups();

  const fs::path root = resolve_out(a.out);
  fs::create_directories(root);
  write_grid_csv((root / "accuracy_grid.csv").string(), ev.accuracy.data, L, C);
  write_grid_csv((root / "loss_grid.csv").string(), ev.loss.data, L, C);

  if (!a.baseline.empty()) {
    GridCsv base = read_grid_csv(a.baseline);
    if (base.L != L || base.C != C)
      throw DataError("baseline grid '" + a.baseline + "' is " + std::to_string(base.L) + "x" +
                      std::to_string(base.C) + ", model grid is " + std::to_string(L) + "x" +
                      std::to_string(C));
    std::vector<double> delta(ev.accuracy.data.size());
    for (size_t i = 0; i < delta.size(); ++i) delta[i] = ev.accuracy.data[i] - base.values[i];
    write_grid_csv((root / "delta_grid.csv").string(), delta, L, C);
  }

  json echo;
  echo["command"] = "grid";
  echo["model"] = a.model;
  echo["arch"] = json::parse(model.desc.to_json());
  echo["data"] = data_flags_json(a.data, test_set.num_classes);
  echo["seed"] = seed;
  echo["batch"] = a.batch;
  if (!a.baseline.empty()) echo["baseline"] = a.baseline;
  echo["out"] = root.string();
  write_text_file(root / "config.json", echo.dump(2) + "\n");

  std::printf("accuracy grid (%dx%d) written to %s\n", L, C,
              (root / "accuracy_grid.csv").string().c_str());
  std::printf("full-head accuracy %.4f\n", ev.accuracy.data.back());
  return 0;
}

// ---------------------------------------------------------------- slice ---

int run_slice(const std::string& model_path, int d, int w, const std::string& out) {
  NestedModel<float> model = load_full_checked(model_path, "slice");
  SlicedModel<float> sm = slice(model, SliceId{d, w});
  fs::path path = out.empty()
                      ? fs::path(resolve_out("")) /
                            ("slice_d" + std::to_string(d) + "_w" + std::to_string(w) + ".nnm")
                      : fs::path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_model(sm, path.string());
  std::printf("slice (d=%d, w=%d): %lld parameters, written to %s\n", d, w,
              static_cast<long long>(sm.parameter_count()), path.string().c_str());
  return 0;
}

// ----------------------------------------------------------------- cost ---

int run_cost(const std::string& model_path, const std::string& arch_path, int hw,
             const std::string& out) {
  if (model_path.empty() == arch_path.empty())
    throw ConfigError("cost: pass exactly one of --model or --arch");
  ArchDescriptor desc = model_path.empty() ? ArchDescriptor::from_file(arch_path)
                                           : load_full_checked(model_path, "cost").desc;
  const int L = desc.num_layer_groups(), C = desc.groups;
  std::vector<SliceCost> table = cost_table(desc, hw, hw);
  fs::path path = out.empty() ? fs::path(resolve_out("")) / "cost_table.csv" : fs::path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_cost_csv(path.string(), table, L, C);
  std::printf("cost table (%dx%d grid at %dx%d input) written to %s\n", L, C, hw, hw,
              path.string().c_str());
  return 0;
}

// --------------------------------------------------------------- select ---

int run_select(const std::string& cost_path, const std::string& score_path, int64_t max_macs,
               int64_t max_params, int64_t max_mem) {
  CostCsv costs = read_cost_csv(cost_path);
  GridCsv scores = read_grid_csv(score_path);
  if (scores.L != costs.L || scores.C != costs.C)
    throw DataError("score grid '" + score_path + "' is " + std::to_string(scores.L) + "x" +
                    std::to_string(scores.C) + ", cost table is " + std::to_string(costs.L) +
                    "x" + std::to_string(costs.C));
  Budget budget;
  if (max_macs >= 0) budget.max_macs = max_macs;
  if (max_params >= 0) budget.max_params = max_params;
  if (max_mem >= 0) budget.max_peak_activation = max_mem;

  std::optional<SliceId> pick = select_slice(costs.table, scores.values, costs.L, costs.C, budget);
  if (!pick) {
    std::fprintf(stderr, "no slice satisfies the budget\n");
    return kExitInfeasible;
  }
  const size_t i = static_cast<size_t>(pick->d - 1) * costs.C + (pick->w - 1);
  std::printf("selected d=%d w=%d (score %.17g, params %lld, macs %lld, peak %lld)\n", pick->d,
              pick->w, scores.values[i], static_cast<long long>(costs.table[i].params),
              static_cast<long long>(costs.table[i].macs),
              static_cast<long long>(costs.table[i].peak_activation));
  return 0;
}

// --------------------------------------------------------------- verify ---

int run_verify(const std::string& model_path, bool fresh, const std::string& arch_path, int hw,
               uint64_t seed, bool seed_set) {
  if (fresh == !model_path.empty())
    throw ConfigError("verify: pass exactly one of --model or --fresh");
  NestedModel<float> model = [&] {
    if (!fresh) return load_full_checked(model_path, "verify");
    ArchDescriptor desc =
        arch_path.empty() ? ArchDescriptor::toy() : ArchDescriptor::from_file(arch_path);
    return build_model<float>(desc);
  }();
  const uint64_t s = seed_set ? seed : model.desc.seed;
  std::vector<CheckResult> results = run_verification(model, hw, s);
  bool all = true;
  for (const CheckResult& r : results) {
    std::printf("[%s] %-18s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all = all && r.pass;
  }
  std::printf("%s\n", all ? "all checks passed" : "verification FAILED");
  return all ? 0 : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "nestnet: train doubly nested networks, evaluate accuracy grids, extract slices,\n"
      "compute cost tables, select slices under budgets, and verify invariants.\n"
      "Output root: --out, else $NESTNET_OUT, else ./out.\n"
      "Exit codes: 0 ok, 1 usage, 2 config error, 3 data error, 4 infeasible budget,\n"
      "5 verification failure, 6 training diverged, 10 internal error."};
  app.require_subcommand(1);

  TrainArgs ta;
  CLI::App* train = app.add_subcommand("train", "Train a model and write all artifacts");
  train->add_option("--arch", ta.arch, "Architecture descriptor file (text or JSON)")->required();
  add_data_flags(train, ta.data);
  add_lambda_flags(train, ta.lambda);
  train->add_option("--steps", ta.steps, "Optimizer steps")->capture_default_str();
  train->add_option("--batch", ta.batch, "Mini-batch size")->capture_default_str();
  train->add_option("--lr", ta.lr, "Learning rate")->capture_default_str();
  train->add_option("--momentum", ta.momentum, "Momentum coefficient")->capture_default_str();
  train->add_option("--weight-decay", ta.weight_decay, "L2 penalty coefficient")
      ->capture_default_str();
  train->add_option("--decay", ta.decay,
                    "LR schedule: 'default' (x0.1 at 60% and 80%), 'none', or step:factor,...")
      ->capture_default_str();
  train->add_option("--eval-every", ta.eval_every, "Evaluate every N steps (0: only at the end)")
      ->capture_default_str();
  train->add_option("--seed", ta.seed, "Override the descriptor's seed (init + batch order)")
      ->each([&ta](const std::string&) { ta.seed_set = true; });
  train->add_option("--precision", ta.precision, "Training scalar type: f32 or f64")
      ->capture_default_str();
  train->add_option("--out", ta.out, "Output directory");

  GridArgs ga;
  CLI::App* grid = app.add_subcommand("grid", "Evaluate the accuracy grid of a trained model");
  grid->add_option("--model", ga.model, "Full model container")->required();
  add_data_flags(grid, ga.data);
  grid->add_option("--baseline", ga.baseline,
                   "Baseline accuracy grid CSV; also writes delta_grid.csv (this minus baseline)");
  grid->add_option("--batch", ga.batch, "Evaluation batch size")->capture_default_str();
  grid->add_option("--seed", ga.seed, "Synthetic data seed (default: the model's seed)")
      ->each([&ga](const std::string&) { ga.seed_set = true; });
  grid->add_option("--out", ga.out, "Output directory");

  std::string sl_model, sl_out;
  int sl_d = 0, sl_w = 0;
  CLI::App* slice_cmd = app.add_subcommand("slice", "Extract slice (d, w) to a standalone file");
  slice_cmd->add_option("--model", sl_model, "Full model container")->required();
  slice_cmd->add_option("--d", sl_d, "Layer groups to keep (1-based)")->required();
  slice_cmd->add_option("--w", sl_w, "Channel groups to keep (1-based)")->required();
  slice_cmd->add_option("--out", sl_out, "Output file (default: <root>/slice_d<d>_w<w>.nnm)");

  std::string co_model, co_arch, co_out;
  int co_hw = 8;
  CLI::App* cost = app.add_subcommand("cost", "Write the analytic cost table for every slice");
  cost->add_option("--model", co_model, "Full model container");
  cost->add_option("--arch", co_arch, "Architecture descriptor file (alternative to --model)");
  cost->add_option("--hw", co_hw, "Input side length for MAC/activation accounting")
      ->capture_default_str();
  cost->add_option("--out", co_out, "Output file (default: <root>/cost_table.csv)");

  std::string se_costs, se_scores;
  int64_t se_macs = -1, se_params = -1, se_mem = -1;
  CLI::App* select = app.add_subcommand("select", "Pick the best slice under a budget");
  select->add_option("--costs", se_costs, "Cost table CSV (from the cost command)")->required();
  select->add_option("--scores", se_scores, "Score grid CSV, L rows x C columns")->required();
  select->add_option("--max-macs", se_macs, "MAC budget");
  select->add_option("--max-params", se_params, "Parameter budget");
  select->add_option("--max-mem", se_mem, "Peak activation budget (scalars)");

  std::string ve_model, ve_arch;
  bool ve_fresh = false;
  int ve_hw = 8;
  uint64_t ve_seed = 0;
  bool ve_seed_set = false;
  CLI::App* verify = app.add_subcommand("verify", "Run the invariant suite and report per check");
  verify->add_option("--model", ve_model, "Full model container to verify");
  verify->add_flag("--fresh", ve_fresh, "Verify a freshly initialized model instead");
  verify->add_option("--arch", ve_arch, "Descriptor for --fresh (default: built-in toy grid)");
  verify->add_option("--hw", ve_hw, "Input side length")->capture_default_str();
  verify->add_option("--seed", ve_seed, "Perturbation/probe seed (default: the model's seed)")
      ->each([&ve_seed_set](const std::string&) { ve_seed_set = true; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitParse;
  }

  try {
    if (*train) return run_train(ta);
    if (*grid) return run_grid(ga);
    if (*slice_cmd) return run_slice(sl_model, sl_d, sl_w, sl_out);
    if (*cost) return run_cost(co_model, co_arch, co_hw, co_out);
    if (*select) return run_select(se_costs, se_scores, se_macs, se_params, se_mem);
    if (*verify) return run_verify(ve_model, ve_fresh, ve_arch, ve_hw, ve_seed, ve_seed_set);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return kExitDiverged;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInternal;
  }
  return 0;
}
