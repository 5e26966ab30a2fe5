// ccenet command-line tool: gen-data, train, predict, eval.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
// error. Set CCENET_VERBOSE=1 for per-iteration progress on stderr.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ccenet/ccenet.hpp"

namespace fs = std::filesystem;
using namespace ccenet;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Validation failures that should map to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int verbosity() {
  const char* v = std::getenv("CCENET_VERBOSE");
  return v ? std::atoi(v) : 0;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open config file " + path.string());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// ---------------------------------------------------------------------------
// gen-data

struct GenArgs {
  std::string out;
  std::size_t n = 8;
  std::size_t size = 64;
  std::uint64_t seed = 1;
};

int run_gen_data(const GenArgs& a) {
  const auto samples = gen_synthetic(a.n, a.size, a.seed);
  write_dataset(a.out, samples);
  std::ostringstream cfg;
  cfg << "n = " << a.n << "\nsize = " << a.size << "\nseed = " << a.seed << "\n";
  write_text(fs::path(a.out) / "resolved_config.txt", cfg.str());
  std::cout << "wrote " << samples.size() << " samples to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string eval_data;
  std::string out;
  std::string config_file;
  bool no_cca = false;
  bool no_cgl = false;
  bool no_aux = false;
  bool no_norm = false;
  bool no_augment = false;
  bool no_hflip = false;
  bool no_vflip = false;
  bool no_crop = false;
  bool no_rotate = false;
  bool ablation_suite = false;
  std::size_t ckpt_every = 0;
  // overrides, applied only when given on the command line
  std::size_t total_iters = 0;
  std::size_t batch = 0;
  double lr = 0.0;
  double lambda = 0.0;
  std::uint64_t seed = 0;
  std::size_t size = 0;
  CLI::Option* o_total = nullptr;
  CLI::Option* o_batch = nullptr;
  CLI::Option* o_lr = nullptr;
  CLI::Option* o_lambda = nullptr;
  CLI::Option* o_seed = nullptr;
  CLI::Option* o_size = nullptr;
};

ModelConfig resolve_train_config(const TrainArgs& a) {
  ModelConfig cfg;
  if (!a.config_file.empty()) cfg = ModelConfig::from_text(read_text(a.config_file));
  if (a.o_total->count()) cfg.total_iters = a.total_iters;
  if (a.o_batch->count()) cfg.batch_size = a.batch;
  if (a.o_lr->count()) cfg.lr0 = a.lr;
  if (a.o_lambda->count()) cfg.lambda = a.lambda;
  if (a.o_seed->count()) cfg.seed = a.seed;
  if (a.o_size->count()) cfg.input_size = a.size;
  if (a.no_cca) cfg.use_cca = false;
  if (a.no_cgl) cfg.use_cgl = false;
  if (a.no_aux) cfg.use_aux = false;
  if (a.no_norm) cfg.norm = false;
  if (a.no_augment) cfg.augment.hflip = cfg.augment.vflip = cfg.augment.crop = cfg.augment.rotate = false;
  if (a.no_hflip) cfg.augment.hflip = false;
  if (a.no_vflip) cfg.augment.vflip = false;
  if (a.no_crop) cfg.augment.crop = false;
  if (a.no_rotate) cfg.augment.rotate = false;
  cfg.validate();
  return cfg;
}

std::vector<SegSample> load_dataset(const std::string& dir) {
  auto samples = load_manifest(dir);
  if (samples.empty()) throw UsageError("dataset " + dir + " has no samples");
  return samples;
}

struct TrainOutcome {
  std::vector<TrainLogRow> log;
  Network net;
};

TrainOutcome train_one(const ModelConfig& cfg, const std::vector<SegSample>& data,
                       const fs::path& out, std::size_t ckpt_every) {
  fs::create_directories(out);
  write_text(out / "resolved_config.txt", cfg.to_text());
  std::ofstream log(out / "train_log.csv", std::ios::binary);
  if (!log) throw std::runtime_error("cannot write " + (out / "train_log.csv").string());
  log << train_log_header() << "\n";
  Network net(cfg);
  const bool verbose = verbosity() > 0;
  auto sink = [&](const TrainLogRow& r) {
    log << format_log_row(r) << "\n";
    if (verbose) std::cerr << "iter " << r.iter << " lr " << r.lr << " loss " << r.total << "\n";
  };
  auto hook = [&](std::size_t iter) {
    save_checkpoint((out / ("checkpoint_iter" + std::to_string(iter) + ".bin")).string(), cfg, net.state());
  };
  auto rows = train(net, data, sink, hook, ckpt_every);
  log.flush();
  save_checkpoint((out / "checkpoint.bin").string(), cfg, net.state());
  return {std::move(rows), std::move(net)};
}

void write_report(const fs::path& dir, const MetricsReport& rep) {
  write_records_csv((dir / "per_image.csv").string(), rep);
  write_text(dir / "summary.json", report_json(rep).dump(2) + "\n");
  write_histogram_csv((dir / "histogram.csv").string(), rep.ja_histogram);
}

struct AblationRow {
  const char* label;
  bool use_cca;
  bool use_cgl;
  bool use_aux;
};

// Row order of the ablation table.
constexpr AblationRow kAblationRows[] = {
    {"baseline", false, false, false},
    {"baseline+L", false, true, false},
    {"baseline+CCA", true, false, false},
    {"baseline+CCA+CGL", true, true, false},
    {"baseline+CCA+CGL+AL", true, true, true},
};

std::string dir_name(std::string label) {
  for (char& c : label) {
    if (c == '+') c = '_';
  }
  return label;
}

int run_train(const TrainArgs& a) {
  const ModelConfig cfg = resolve_train_config(a);
  const auto data = load_dataset(a.data);
  const fs::path out(a.out);

  if (!a.ablation_suite) {
    auto result = train_one(cfg, data, out, a.ckpt_every);
    if (!a.eval_data.empty()) {
      const auto rep = aggregate(evaluate(result.net, load_dataset(a.eval_data)));
      write_report(out, rep);
      std::cout << "eval JA " << rep.overall.ja << " DI " << rep.overall.di << "\n";
    }
    std::cout << "trained " << cfg.total_iters << " iterations, final loss "
              << (result.log.empty() ? 0.0 : result.log.back().total) << "\n";
    return 0;
  }

  // Every row is evaluated on the held-out set when given, else the training set.
  const auto eval_set = a.eval_data.empty() ? data : load_dataset(a.eval_data);
  fs::create_directories(out);
  write_text(out / "resolved_config.txt", cfg.to_text());
  std::ofstream table(out / "ablation.csv", std::ios::binary);
  if (!table) throw std::runtime_error("cannot write ablation.csv");
  table << "method,DI,JA,final_main_loss,final_total_loss\n";
  table.precision(17);
  std::printf("%-22s %6s %6s %12s\n", "method", "DI", "JA", "main_loss");
  for (const auto& row : kAblationRows) {
    ModelConfig rc = cfg;
    rc.use_cca = row.use_cca;
    rc.use_cgl = row.use_cgl;
    rc.use_aux = row.use_aux;
    auto result = train_one(rc, data, out / dir_name(row.label), a.ckpt_every);
    const auto rep = aggregate(evaluate(result.net, eval_set));
    write_report(out / dir_name(row.label), rep);
    const double main_loss = result.log.empty() ? 0.0 : result.log.back().main_loss;
    const double total_loss = result.log.empty() ? 0.0 : result.log.back().total;
    char pct[64];
    std::snprintf(pct, sizeof pct, "%.1f,%.1f", percent(rep.overall.di), percent(rep.overall.ja));
    table << row.label << "," << pct << "," << main_loss << "," << total_loss << "\n";
    table.flush();
    std::printf("%-22s %6.1f %6.1f %12.6f\n", row.label, percent(rep.overall.di),
                percent(rep.overall.ja), main_loss);
    std::fflush(stdout);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string config_file;
  bool dump_gates = false;
  bool dump_affinity = false;
};

[[noreturn]] void config_mismatch(const std::string& why, const ModelConfig& ckpt,
                                  const std::string& other_label, const std::string& other) {
  std::cerr << "error: " << why << "\n--- checkpoint config ---\n"
            << ckpt.to_text() << "--- " << other_label << " ---\n"
            << other;
  throw UsageError("checkpoint/config mismatch");
}

// Architecture keys that must agree between a checkpoint and a requested config.
bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
  return a.input_size == b.input_size && a.encoder_channels == b.encoder_channels &&
         a.ctx_channels == b.ctx_channels && a.aspp_rate_divisor == b.aspp_rate_divisor &&
         a.aspp_branch_norm == b.aspp_branch_norm && a.norm == b.norm && a.use_cca == b.use_cca &&
         a.use_cgl == b.use_cgl && a.use_aux == b.use_aux && a.gate_bias == b.gate_bias &&
         a.cgl_qk_proj == b.cgl_qk_proj;
}

// Channel mean of a (1,c,h,w) map in (0,1), written as grayscale.
Image8 channel_mean_image(const Tensor& t) {
  const Shape s = t.shape();
  Tensor m(Shape{1, 1, s.h, s.w});
  auto md = m.mutable_data();
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t i = 0; i < s.plane(); ++i) md[i] += t[c * s.plane() + i] / static_cast<double>(s.c);
  }
  return to_image8(m);
}

Image8 affinity_image(const Tensor& s) {
  double peak = 0.0;
  for (double v : s.data()) peak = std::max(peak, v);
  Tensor m(Shape{1, 1, s.shape().h, s.shape().w});
  auto md = m.mutable_data();
  for (std::size_t i = 0; i < md.size(); ++i) md[i] = peak > 0.0 ? s[i] / peak : 0.0;
  return to_image8(m);
}

int run_predict(const PredictArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  const ModelConfig cfg = ck.config();
  if (!a.config_file.empty()) {
    const std::string text = read_text(a.config_file);
    if (!same_architecture(cfg, ModelConfig::from_text(text))) {
      config_mismatch("requested config does not match the checkpoint architecture", cfg,
                      "requested config", text);
    }
  }
  if (a.dump_gates && !cfg.use_cca) {
    config_mismatch("--dump-gates needs a model trained with CCA", cfg, "requested",
                    "use_cca = true  # required by --dump-gates\n");
  }
  if (a.dump_affinity && !cfg.use_cgl) {
    config_mismatch("--dump-affinity needs a model trained with CGL", cfg, "requested",
                    "use_cgl = true  # required by --dump-affinity\n");
  }
  Network net(cfg);
  try {
    net.load_state(ck.tensors);
  } catch (const std::invalid_argument& e) {
    config_mismatch(e.what(), cfg, "tensors in checkpoint", std::to_string(ck.tensors.size()) + "\n");
  }

  const auto samples = load_manifest(a.data);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_text(out / "resolved_config.txt", cfg.to_text());
  const std::string ext = image_extension();
  for (const auto& s : samples) {
    const Prediction p = predict_sample(net, s);
    write_image((out / (s.id + "_pred." + ext)).string(), to_image8(p.mask));
    if (a.dump_gates || a.dump_affinity) {
      const ForwardResult r = net.forward(resize_sample(s, cfg.input_size).image, false);
      if (a.dump_gates) {
        for (std::size_t i = 1; i < 4; ++i) {
          const std::string stage = "_s" + std::to_string(i + 1) + "." + ext;
          write_image((out / (s.id + "_gate_img" + stage)).string(), channel_mean_image(r.cca.gate_img[i]));
          write_image((out / (s.id + "_gate_ctx" + stage)).string(), channel_mean_image(r.cca.gate_ctx[i]));
        }
      }
      if (a.dump_affinity) {
        write_image((out / (s.id + "_affinity." + ext)).string(), affinity_image(r.cgl.affinity));
      }
    }
  }
  std::cout << "wrote " << samples.size() << " predictions to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::string out;
  std::size_t bins = 10;
};

// Maps `<id>_pred.<ext>` files in a directory to their ids.
std::map<std::string, fs::path> prediction_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw UsageError("prediction directory " + dir.string() + " not found");
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string stem = e.path().stem().string();
    const std::string suffix = "_pred";
    if (stem.size() > suffix.size() && stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0) {
      out[stem.substr(0, stem.size() - suffix.size())] = e.path();
    }
  }
  return out;
}

int run_eval(const EvalArgs& a) {
  const auto preds = prediction_files(a.pred);
  const auto gts = load_manifest(a.gt);
  std::set<std::string> gt_ids;
  std::vector<ImageRecord> records;
  for (const auto& s : gts) {
    gt_ids.insert(s.id);
    auto it = preds.find(s.id);
    if (it == preds.end()) continue;
    Tensor pm = to_tensor(read_image(it->second.string()));
    if (pm.shape().h != s.mask.shape().h || pm.shape().w != s.mask.shape().w) {
      throw std::runtime_error("prediction for '" + s.id + "' is " + std::to_string(pm.shape().w) +
                               "x" + std::to_string(pm.shape().h) + ", ground truth " +
                               std::to_string(s.mask.shape().w) + "x" +
                               std::to_string(s.mask.shape().h));
    }
    // first channel of the prediction image, thresholded like a mask
    Tensor bin(s.mask.shape());
    auto bd = bin.mutable_data();
    for (std::size_t i = 0; i < bd.size(); ++i) bd[i] = pm[i] > 127.0 / 255.0 ? 1.0 : 0.0;
    ImageRecord r;
    r.id = s.id;
    r.category = category_name(s.category);
    r.counts = confusion(bin, s.mask);
    r.scores = compute_metrics(r.counts);
    records.push_back(std::move(r));
  }
  std::vector<std::string> only_pred;
  std::vector<std::string> only_gt;
  for (const auto& [id, path] : preds) {
    if (!gt_ids.count(id)) only_pred.push_back(id);
  }
  for (const auto& id : gt_ids) {
    if (!preds.count(id)) only_gt.push_back(id);
  }
  for (const auto& id : only_pred) std::cerr << "excluded: '" << id << "' has a prediction but no ground truth\n";
  for (const auto& id : only_gt) std::cerr << "excluded: '" << id << "' has ground truth but no prediction\n";
  if (records.empty()) {
    std::cerr << "error: no ids in common between " << a.pred << " and " << a.gt << "\n";
    return kExitRuntime;
  }

  const MetricsReport rep = aggregate(std::move(records), a.bins);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_report(out, rep);
  std::ostringstream cfg;
  cfg << "pred = " << a.pred << "\ngt = " << a.gt << "\nhistogram = " << a.bins << "\n";
  write_text(out / "resolved_config.txt", cfg.str());
  const auto& o = rep.overall;
  std::printf("AC %.1f  DI %.1f  JA %.1f  SE %.1f  SP %.1f  (%zu images)\n", percent(o.ac),
              percent(o.di), percent(o.ja), percent(o.se), percent(o.sp), rep.records.size());
  return only_pred.empty() && only_gt.empty() ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ccenet: lesion segmentation with cascaded context and local affinity"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "generate a synthetic dataset");
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--n", gen.n, "number of samples");
  g->add_option("--size", gen.size, "image side in pixels (multiple of 8)");
  g->add_option("--seed", gen.seed, "random seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--data", tr.data, "dataset directory with manifest.csv")->required();
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--config", tr.config_file, "key = value config file (flags override it)");
  t->add_option("--eval-data", tr.eval_data, "dataset to evaluate after training");
  t->add_flag("--no-cca", tr.no_cca, "disable cascaded context aggregation");
  t->add_flag("--no-cgl", tr.no_cgl, "disable context-guided local affinity");
  t->add_flag("--no-aux", tr.no_aux, "disable the auxiliary head");
  t->add_flag("--no-norm", tr.no_norm, "disable batch normalization");
  t->add_flag("--no-augment", tr.no_augment, "disable all augmentation");
  t->add_flag("--no-hflip", tr.no_hflip, "disable horizontal flips");
  t->add_flag("--no-vflip", tr.no_vflip, "disable vertical flips");
  t->add_flag("--no-crop", tr.no_crop, "disable random centre crops");
  t->add_flag("--no-rotate", tr.no_rotate, "disable random rotation");
  t->add_flag("--ablation-suite", tr.ablation_suite, "train all five ablation configurations");
  t->add_option("--ckpt-every", tr.ckpt_every, "save a checkpoint every N iterations");
  tr.o_total = t->add_option("--total-iters", tr.total_iters, "training iterations");
  tr.o_batch = t->add_option("--batch", tr.batch, "batch size");
  tr.o_lr = t->add_option("--lr", tr.lr, "initial learning rate");
  tr.o_lambda = t->add_option("--lambda", tr.lambda, "dice loss weight");
  tr.o_seed = t->add_option("--seed", tr.seed, "random seed");
  tr.o_size = t->add_option("--size", tr.size, "network input size (multiple of 8)");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "predict masks with a checkpoint");
  p->add_option("--ckpt", pr.ckpt, "checkpoint file")->required();
  p->add_option("--data", pr.data, "dataset directory with manifest.csv")->required();
  p->add_option("--out", pr.out, "output directory")->required();
  p->add_option("--config", pr.config_file, "config the checkpoint must match");
  p->add_flag("--dump-gates", pr.dump_gates, "write CCA gate maps");
  p->add_flag("--dump-affinity", pr.dump_affinity, "write CGL affinity matrices");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score predicted masks against ground truth");
  e->add_option("--pred", ev.pred, "directory of <id>_pred images")->required();
  e->add_option("--gt", ev.gt, "dataset directory with manifest.csv")->required();
  e->add_option("--out", ev.out, "report directory")->required();
  e->add_option("--histogram", ev.bins, "JA histogram bins")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*g) return run_gen_data(gen);
    if (*t) return run_train(tr);
    if (*p) return run_predict(pr);
    if (*e) return run_eval(ev);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& err) {  // ConfigError, ShapeError
    std::cerr << "error: " << err.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
