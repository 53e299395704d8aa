// iffdet: dataset generation, training, inference, M_I sweep, invariant checks and analysis export.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "iff/checkpoint.hpp"
#include "iff/train.hpp"
#include "iff/verify.hpp"

namespace fs = std::filesystem;
using namespace iff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream os(path, mode);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  return os;
}

std::vector<SyntheticScene> load_scenes(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest '" + path + "'");
  auto scenes = read_manifest(is);
  if (scenes.empty()) throw std::runtime_error("manifest '" + path + "' has no scenes");
  return scenes;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_loss_csv(const std::string& path, const std::vector<EpochStat>& curve) {
  auto os = open_out(path);
  os << "epoch,loss,map_estimate\n";
  for (const auto& e : curve) os << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.map_estimate) << '\n';
}

struct GenArgs {
  std::size_t count = 0;
  std::uint64_t seed = 1;
  double noise = SceneSpec{}.noise_level;
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  auto scenes = gen_dataset(a.count, a.seed, a.noise);
  auto os = open_out(a.out);
  write_manifest(os, scenes);
  std::cout << "wrote " << scenes.size() << " scenes to " << a.out << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::uint32_t mi = 1;
  TrainConfig tc;
  std::string out;
  std::string loss_csv;
};

int cmd_train(const TrainArgs& a) {
  const auto scenes = load_scenes(a.data);
  IffConfig cfg;
  cfg.iterations = a.mi;
  auto res = train(DetectorModel::initialize(a.tc.seed, cfg), scenes, a.tc);
  Checkpoint ck{res.model, {a.tc.seed, res.curve.back().epoch, res.curve.back().loss}};
  save_checkpoint(a.out, ck);
  const std::string loss_path = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;
  write_loss_csv(loss_path, res.curve);
  std::cout << "M_I=" << a.mi << " epochs=" << res.curve.back().epoch << " loss " << fmt(res.curve.front().loss)
            << " -> " << fmt(res.curve.back().loss) << (res.early_stopped ? " (early stop)" : "") << '\n'
            << "checkpoint " << a.out << ", loss curve " << loss_path << '\n';
  return kExitOk;
}

struct SweepArgs {
  std::string data;
  std::string test;
  std::vector<std::uint32_t> mi_list{0, 1, 2, 3};
  TrainConfig tc;
  std::string out;
};

int cmd_sweep(const SweepArgs& a) {
  const auto train_set = load_scenes(a.data);
  const auto test_set = a.test.empty() ? train_set : load_scenes(a.test);
  const auto rows = sweep_mi(train_set, test_set, a.mi_list, a.tc);
  std::ostringstream csv;
  csv << "mi,map,final_loss,epochs\n";
  for (const auto& r : rows) csv << r.iterations << ',' << fmt(r.test_map) << ',' << fmt(r.final_loss) << ',' << r.epochs_run << '\n';
  std::cout << csv.str();
  if (!a.out.empty()) open_out(a.out) << csv.str();
  return kExitOk;
}

struct InferArgs {
  std::string ckpt;
  std::string data;
  std::optional<std::uint32_t> mi;
  DetectOptions opt;
  std::string out;
};

int cmd_infer(const InferArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  const auto scenes = load_scenes(a.data);
  IffConfig cfg = ck.model.config;
  if (a.mi) cfg.iterations = *a.mi;
  const auto dets = run_detection(ck.model, scenes, cfg, a.opt);
  std::ostringstream csv;
  csv << "scene,class,score,x,y,w,h\n";
  std::size_t total = 0;
  for (std::size_t i = 0; i < dets.size(); ++i)
    for (const auto& d : dets[i]) {
      csv << i << ',' << class_name(d.cls) << ',' << fmt(d.score) << ',' << fmt(d.box.x) << ',' << fmt(d.box.y) << ','
          << fmt(d.box.w) << ',' << fmt(d.box.h) << '\n';
      ++total;
    }
  if (!a.out.empty()) open_out(a.out) << csv.str();
  else std::cout << csv.str();
  std::cerr << total << " detections on " << scenes.size() << " scenes (M_I=" << cfg.iterations
            << "), mAP@0.5 " << fmt(evaluate_map(ck.model, scenes, cfg)) << '\n';
  return kExitOk;
}

struct VerifyArgs {
  std::string suite;
  std::size_t trials = 1000;
  std::uint64_t seed = 1;
  std::string csv;
};

int cmd_verify(const VerifyArgs& a) {
  const auto r = run_verify_suite(a.suite, a.trials, a.seed);
  std::cout << r.suite << ": " << r.trials << " checks, " << r.violations << " violations";
  if (r.skipped) std::cout << ", " << r.skipped << " skipped";
  std::cout << ", worst " << fmt(r.worst) << '\n';
  if (!a.csv.empty()) {
    auto os = open_out(a.csv);
    write_suite_csv(os, r);
  }
  return r.passed() ? kExitOk : kExitRuntime;
}

struct AnalyzeArgs {
  std::string ckpt;
  std::string data;
  std::string out_dir;
  std::size_t scenes = 60;
  std::size_t heatmaps = 4;
  std::uint32_t steps = 20;
  std::uint32_t probes = 12;
  std::uint64_t seed = 1;
  std::size_t timing_images = 100;
};

int cmd_analyze(const AnalyzeArgs& a) {
  const auto ck = load_checkpoint(a.ckpt);
  auto scenes = load_scenes(a.data);
  if (scenes.size() > a.scenes) scenes.resize(a.scenes);
  fs::create_directories(a.out_dir);
  const fs::path dir(a.out_dir);
  const DetectorModel& m = ck.model;

  for (std::size_t i = 0; i < std::min(a.heatmaps, scenes.size()); ++i) {
    auto traj = detector_forward(m, scenes[i].image, m.config);
    const std::string id = std::to_string(i);
    auto without = open_out((dir / ("heatmap_without_" + id + ".pgm")).string(), std::ios::binary);
    write_pgm(without, heatmap_export(traj.states.front().x, kImageSize, kImageSize));
    auto with = open_out((dir / ("heatmap_with_" + id + ".pgm")).string(), std::ios::binary);
    write_pgm(with, heatmap_export(traj.final_feature(), kImageSize, kImageSize));
  }

  const auto cmp = compare_features(m, scenes);
  {
    auto os = open_out((dir / "histogram_without.csv").string());
    write_histogram_csv(os, cmp.without_iff);
  }
  {
    auto os = open_out((dir / "histogram_with.csv").string());
    write_histogram_csv(os, cmp.with_iff);
  }

  // Stability on the first scene: n is the backbone output on the noiseless rendering.
  const auto& s0 = scenes.front();
  const Tensor n = backbone_forward(m, render_clean(s0));
  const Tensor x0 = backbone_forward(m, s0.image);
  IffConfig scfg = m.config;
  scfg.pad = PaddingMode::Circular;
  scfg.enforce_contraction = true;
  const auto stab = bound_check(x0, m.head(), m.feedback(), scfg, IdealFeatureModel::from_observation(n, x0), a.steps,
                                a.probes, a.seed);
  {
    auto os = open_out((dir / "stability.csv").string());
    write_stability_csv(os, stab);
  }

  {
    auto os = open_out((dir / "summary.csv").string());
    os << "key,value\n"
       << "iterations," << m.config.iterations << '\n'
       << "scenes," << scenes.size() << '\n'
       << "bg_mean_without," << fmt(cmp.without_iff.bg_mean) << '\n'
       << "bg_mean_with," << fmt(cmp.with_iff.bg_mean) << '\n'
       << "fg_mean_without," << fmt(cmp.without_iff.fg_mean) << '\n'
       << "fg_mean_with," << fmt(cmp.with_iff.fg_mean) << '\n'
       << "A," << fmt(stab.constants.A) << '\n'
       << "stability_violations," << stab.violations << '\n'
       << "feedback_params," << m.feedback_parameter_count() << '\n'
       << "total_params," << m.params.parameter_count() << '\n';
  }

  std::cout << "background mean: without " << fmt(cmp.without_iff.bg_mean) << ", with " << fmt(cmp.with_iff.bg_mean)
            << '\n';
  if (a.timing_images > 0) {
    const auto timing_set = gen_dataset(std::max<std::size_t>(a.timing_images, 100), a.seed, SceneSpec{}.noise_level);
    std::vector<Tensor> images;
    for (const auto& s : timing_set) images.push_back(s.image);
    const auto t = timing_probe(m, images, m.config);
    auto os = open_out((dir / "timing.csv").string());
    os << "latency_mi0_s,latency_mi1_s,latency_mi2_s,ratio_mi1_mi0\n"
       << fmt(t.latency_mi0) << ',' << fmt(t.latency_mi1) << ',' << fmt(t.latency_mi2) << ',' << fmt(t.ratio()) << '\n';
    std::cout << "latency ratio M_I=1 / M_I=0: " << fmt(t.ratio()) << '\n';
  }
  std::cout << "wrote " << a.out_dir << '\n';
  return kExitOk;
}

void add_train_options(CLI::App* sub, TrainConfig& tc) {
  sub->add_option("--epochs", tc.epochs, "Training epochs")->capture_default_str()->check(CLI::NonNegativeNumber);
  sub->add_option("--lr", tc.lr, "Base learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
  sub->add_option("--seed", tc.seed, "Seed for initialisation and shuffling")->capture_default_str();
  sub->add_option("--batch", tc.batch_size, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
  sub->add_option("--momentum", tc.momentum, "SGD momentum")->capture_default_str()->check(CLI::Range(0.0, 0.999999));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative feature-feedback detector toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic scene manifest");
  g->add_option("--count", gen.count, "Number of scenes")->required()->check(CLI::PositiveNumber);
  g->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  g->add_option("--noise", gen.noise, "Pixel noise standard deviation")->capture_default_str()->check(CLI::NonNegativeNumber);
  g->add_option("--out", gen.out, "Manifest path")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a detector");
  t->add_option("--data", tr.data, "Training manifest")->required()->check(CLI::ExistingFile);
  t->add_option("--mi", tr.mi, "Feedback iterations M_I")->capture_default_str();
  add_train_options(t, tr.tc);
  t->add_option("--out", tr.out, "Checkpoint path")->required();
  t->add_option("--loss-csv", tr.loss_csv, "Loss curve path (default <out>.loss.csv)");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep-mi", "Train and evaluate one detector per M_I");
  s->add_option("--data", sw.data, "Training manifest")->required()->check(CLI::ExistingFile);
  s->add_option("--test", sw.test, "Test manifest (default: the training manifest)")->check(CLI::ExistingFile);
  s->add_option("--mi-list", sw.mi_list, "Comma-separated M_I values")->delimiter(',')->capture_default_str();
  add_train_options(s, sw.tc);
  s->add_option("--out", sw.out, "CSV table path");

  InferArgs in;
  auto* f = app.add_subcommand("infer", "Run detection with a checkpoint");
  f->add_option("--ckpt", in.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  f->add_option("--data", in.data, "Manifest")->required()->check(CLI::ExistingFile);
  f->add_option("--mi", in.mi, "Override M_I");
  f->add_option("--score", in.opt.score_thresh, "Score threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  f->add_option("--iou", in.opt.nms_iou, "NMS IoU threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  f->add_option("--out", in.out, "Detections CSV (default stdout)");

  VerifyArgs ve;
  auto* v = app.add_subcommand("verify", "Run a randomized invariant sweep");
  v->add_option("--suite", ve.suite, "Suite name")->required()->check(CLI::IsMember(verify_suites()));
  v->add_option("--trials", ve.trials, "Trials")->capture_default_str()->check(CLI::PositiveNumber);
  v->add_option("--seed", ve.seed, "Seed")->capture_default_str();
  v->add_option("--csv", ve.csv, "Per-check CSV report");

  AnalyzeArgs an;
  auto* z = app.add_subcommand("analyze", "Export heatmaps, energy histograms, stability report and timing");
  z->add_option("--ckpt", an.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  z->add_option("--data", an.data, "Manifest")->required()->check(CLI::ExistingFile);
  z->add_option("--out-dir", an.out_dir, "Output directory")->required();
  z->add_option("--scenes", an.scenes, "Scenes used for the histograms")->capture_default_str()->check(CLI::PositiveNumber);
  z->add_option("--heatmaps", an.heatmaps, "Scenes exported as heatmaps")->capture_default_str();
  z->add_option("--steps", an.steps, "Feedback steps in the stability report")->capture_default_str();
  z->add_option("--probes", an.probes, "Perturbed states probed in the stability report")->capture_default_str();
  z->add_option("--seed", an.seed, "Seed for probes and timing images")->capture_default_str();
  z->add_option("--timing-images", an.timing_images, "Images for the latency probe (0 disables, minimum 100)")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*s) {
      if (sw.mi_list.empty()) throw UsageError("--mi-list must not be empty");
      return cmd_sweep(sw);
    }
    if (*f) return cmd_infer(in);
    if (*v) return cmd_verify(ve);
    if (*z) return cmd_analyze(an);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
