#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssa/errors.hpp"
#include "ssa/head.hpp"
#include "ssa/label_mask.hpp"
#include "ssa/losses.hpp"
#include "ssa/metrics.hpp"
#include "ssa/synth.hpp"
#include "ssa/tensor_io.hpp"
#include "ssa/train.hpp"
#include "ssa/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssa;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitFormat = 3;

std::string fnum(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

const std::map<std::string, HeadMode> kHeadModes = {{"vanilla", HeadMode::kVanilla},
                                                    {"ssa", HeadMode::kSSA}};
const std::map<std::string, PEKind> kPEKinds = {{"conditional", PEKind::kConditional},
                                                {"sinusoidal", PEKind::kSinusoidal},
                                                {"learnable", PEKind::kLearnable},
                                                {"none", PEKind::kNone}};
const std::map<std::string, SpatialAxis> kAxes = {{"spatial", SpatialAxis::kSpatial},
                                                  {"channel", SpatialAxis::kChannel}};
const std::map<std::string, TeacherMode> kTeacherModes = {{"gt", TeacherMode::kGroundTruth},
                                                          {"self", TeacherMode::kSelf}};
const std::map<std::string, OptimKind> kOptimKinds = {{"adam", OptimKind::kAdam},
                                                      {"sgd", OptimKind::kSgdMomentum}};

// CI convenience: SSA_SEED beats --seed wherever a seed is accepted.
void apply_seed_env(std::uint64_t& seed) {
  const char* env = std::getenv("SSA_SEED");
  if (!env || !*env) return;
  try {
    std::size_t used = 0;
    const std::uint64_t v = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
    seed = v;
  } catch (const std::exception&) {
    throw std::invalid_argument(std::string("SSA_SEED is not an unsigned integer: '") + env +
                                "'");
  }
}

struct HeadFlags {
  HeadConfig cfg;
  CLI::Option* classes_opt = nullptr;
};

// Every ablation axis is a flag so paper-style comparisons are one-liners.
HeadFlags add_head_flags(CLI::App& cmd) {
  HeadFlags flags;
  flags.classes_opt =
      cmd.add_option("--classes", flags.cfg.num_classes, "Number of classes (dataset default)");
  cmd.add_option("--embed-dim", flags.cfg.embed_dim, "Feature channels per pixel")
      ->capture_default_str();
  cmd.add_option("--lambda-r", flags.cfg.lambda_r, "Response distillation weight")
      ->capture_default_str();
  cmd.add_option("--lambda-s", flags.cfg.lambda_s, "Semantic prototype distillation weight")
      ->capture_default_str();
  cmd.add_option("--lambda-p", flags.cfg.lambda_p, "Spatial prototype distillation weight")
      ->capture_default_str();
  cmd.add_option("--edge-size", flags.cfg.edge_size, "Boundary band width in pixels")
      ->capture_default_str();
  cmd.add_option("--spatial-softmax-axis", flags.cfg.spatial_axis,
                 "Weighting axis for spatial centers: spatial|channel")
      ->transform(CLI::CheckedTransformer(kAxes))
      ->default_str("spatial");
  cmd.add_option("--pe-kind", flags.cfg.pe_kind,
                 "Position encoding: conditional|sinusoidal|learnable|none")
      ->transform(CLI::CheckedTransformer(kPEKinds))
      ->default_str("conditional");
  cmd.add_flag("--center-normalize,!--no-center-normalize", flags.cfg.center_normalize,
               "Divide semantic centers by their total weight")
      ->capture_default_str();
  cmd.add_option("--teacher-mode", flags.cfg.teacher_mode, "Teacher guidance: gt|self")
      ->transform(CLI::CheckedTransformer(kTeacherModes))
      ->default_str("gt");
  cmd.add_option("--ignore-index", flags.cfg.ignore_index, "Label value excluded from losses")
      ->capture_default_str();
  return flags;
}

json head_json(const HeadConfig& cfg) {
  return json{{"num_classes", cfg.num_classes},
              {"embed_dim", cfg.embed_dim},
              {"lambda_r", cfg.lambda_r},
              {"lambda_s", cfg.lambda_s},
              {"lambda_p", cfg.lambda_p},
              {"edge_size", cfg.edge_size},
              {"spatial_softmax_axis", to_string(cfg.spatial_axis)},
              {"pe_kind", to_string(cfg.pe_kind)},
              {"center_normalize", cfg.center_normalize},
              {"teacher_mode", to_string(cfg.teacher_mode)},
              {"ignore_index", cfg.ignore_index}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
  out << text;
  if (!out) throw std::runtime_error(path.string() + ": write failed");
}

void write_manifest(const fs::path& dir, const json& body) {
  json manifest = body;
  manifest["version"] = kVersion;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

// ---- generate -----------------------------------------------------------------

struct GenerateArgs {
  SynthConfig cfg;
  std::string out;
  std::size_t count = 100;
  std::uint64_t seed = 1;
};

int run_generate(GenerateArgs& args) {
  apply_seed_env(args.seed);
  args.cfg.validate();
  Dataset ds;
  ds.config = args.cfg;
  ds.base_seed = args.seed;
  ds.samples = make_dataset(args.cfg, args.seed, args.count);
  save_dataset(args.out, ds);
  write_manifest(args.out, json{{"command", "generate"},
                                {"out", args.out},
                                {"count", args.count},
                                {"seed", args.seed},
                                {"synth_config",
                                 {{"height", args.cfg.height},
                                  {"width", args.cfg.width},
                                  {"classes", args.cfg.num_classes},
                                  {"shapes_per_image", args.cfg.shapes_per_image},
                                  {"noise_sigma", args.cfg.noise_sigma}}}});
  std::cout << "wrote " << args.count << " samples to " << args.out << "\n";
  return 0;
}

// ---- train --------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  HeadConfig head_cfg;
  bool classes_given = false;
  TrainConfig train_cfg;
};

json train_json(const TrainConfig& cfg) {
  return json{{"head", to_string(cfg.head_mode)},
              {"batch_size", cfg.batch_size},
              {"iterations", cfg.iterations},
              {"eval_interval", cfg.eval_interval},
              {"seed", cfg.seed},
              {"optimizer", to_string(cfg.optim.kind)},
              {"lr", cfg.optim.lr},
              {"beta1", cfg.optim.beta1},
              {"beta2", cfg.optim.beta2},
              {"adam_eps", cfg.optim.eps},
              {"momentum", cfg.optim.momentum}};
}

int run_train(TrainArgs& args) {
  apply_seed_env(args.train_cfg.seed);
  Dataset ds = load_dataset(args.data);
  if (!args.classes_given)
    args.head_cfg.num_classes = ds.config.num_classes;
  else if (args.head_cfg.num_classes != ds.config.num_classes)
    throw std::invalid_argument("--classes " + std::to_string(args.head_cfg.num_classes) +
                                " does not match the dataset's " +
                                std::to_string(ds.config.num_classes));
  args.head_cfg.validate();

  fs::create_directories(args.out);
  const fs::path out_dir(args.out);
  write_manifest(out_dir, json{{"command", "train"},
                               {"data", args.data},
                               {"out", args.out},
                               {"head_config", head_json(args.head_cfg)},
                               {"train_config", train_json(args.train_cfg)},
                               {"artifacts",
                                {{"reports", "reports.jsonl"},
                                 {"checkpoint", "checkpoint.ssah"}}}});

  const auto [train_split, eval_split] = split_dataset(ds.samples);
  Model model =
      init_model(args.head_cfg, ds.config.height, ds.config.width, args.train_cfg.seed);

  std::ofstream reports(out_dir / "reports.jsonl", std::ios::binary | std::ios::trunc);
  if (!reports) throw std::runtime_error((out_dir / "reports.jsonl").string() + ": cannot open");
  TrainResult result =
      train(model, args.head_cfg, args.train_cfg, train_split, eval_split, &reports);
  reports.close();

  if (result.diverged) {
    std::cerr << "training diverged: " << result.diagnostic << "\n";
    return kExitNumeric;
  }
  save_checkpoint((out_dir / "checkpoint.ssah").string(),
                  Checkpoint{std::move(model), args.head_cfg, args.train_cfg.head_mode,
                             result.completed_iterations});
  if (!result.reports.empty())
    std::cout << report_json(result.reports.back()) << "\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------------

int run_eval(const std::string& checkpoint_path, const std::string& data_dir) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  Dataset ds = load_dataset(data_dir);
  if (ckpt.head_cfg.num_classes != ds.config.num_classes)
    throw std::invalid_argument("checkpoint expects " +
                                std::to_string(ckpt.head_cfg.num_classes) +
                                " classes but the dataset has " +
                                std::to_string(ds.config.num_classes));
  const auto [train_split, eval_split] = split_dataset(ds.samples);
  EvalReport rep =
      evaluate_split(ckpt.model, ckpt.head_cfg, ckpt.mode, eval_split, ckpt.iteration);
  std::cout << report_json(rep) << "\n";
  return 0;
}

// ---- gradcheck ----------------------------------------------------------------

int run_gradcheck(const std::string& preset) {
  SynthConfig scfg;
  HeadConfig hcfg;
  std::uint64_t sample_seed = 0, model_seed = 0;
  if (preset == "small") {
    scfg.height = 6;
    scfg.width = 6;
    scfg.num_classes = 3;
    scfg.shapes_per_image = 2;
    hcfg.num_classes = 3;
    hcfg.embed_dim = 4;
    sample_seed = 21;
    model_seed = 22;
  } else {
    scfg.height = 8;
    scfg.width = 8;
    scfg.num_classes = 4;
    scfg.shapes_per_image = 3;
    hcfg.num_classes = 4;
    hcfg.embed_dim = 8;
    sample_seed = 4;
    model_seed = 5;
  }
  const SynthSample sample = generate(scfg, sample_seed);
  Model model = init_model(hcfg, scfg.height, scfg.width, model_seed);
  GradCheckReport report = grad_check(model, hcfg, HeadMode::kSSA, sample, 1e-5);
  for (const auto& [name, err] : report.per_param)
    std::cout << name << " " << fnum(err) << "\n";
  std::cout << "max_rel_err " << fnum(report.max_rel_err) << " at " << report.worst_param << "["
            << report.worst_index << "] analytic " << fnum(report.worst_analytic) << " numeric "
            << fnum(report.worst_numeric) << " over " << report.coords_checked << " coords\n";
  return report.max_rel_err < 1e-4 ? 0 : kExitNumeric;
}

// ---- losses -------------------------------------------------------------------

Tensor bundle_tensor(const NamedTensors& bundle, const std::string& path,
                     const std::string& name, std::size_t rank) {
  const Tensor* t = bundle.find(name);
  if (!t) throw FormatError(path, 0, "bundle is missing tensor '" + name + "'");
  if (t->rank() != rank)
    throw FormatError(path, 0, "tensor '" + name + "' must have rank " + std::to_string(rank) +
                                   ", got " + shape_str(t->shape()));
  return *t;
}

// Head outputs rebuilt from bundles holding fused [H,W,K] and the adapted
// prototype matrices [K,D] under fixed names.
HeadOutput load_head_output(const std::string& path) {
  NamedTensors bundle = load_bundle(path);
  HeadOutput out;
  out.fused = bundle_tensor(bundle, path, "fused", 3);
  out.s_proto = bundle_tensor(bundle, path, "s_proto", 2);
  out.p_proto = bundle_tensor(bundle, path, "p_proto", 2);
  return out;
}

int run_losses(const std::string& student_path, const std::string& teacher_path,
               const std::string& labels_path, HeadConfig cfg, bool classes_given) {
  HeadOutput student = load_head_output(student_path);
  HeadOutput teacher = load_head_output(teacher_path);
  LabelMask labels = load_pgm(labels_path);
  const std::size_t k = student.fused.shape()[2];
  if (!classes_given) cfg.num_classes = k;
  cfg.embed_dim = student.s_proto.shape()[1];
  cfg.validate();
  if (cfg.num_classes != k)
    throw std::invalid_argument("--classes " + std::to_string(cfg.num_classes) +
                                " does not match the logits' " + std::to_string(k));
  if (student.fused.shape() != teacher.fused.shape())
    throw std::invalid_argument("student and teacher logits differ in shape");
  if (labels.height != student.fused.shape()[0] || labels.width != student.fused.shape()[1])
    throw std::invalid_argument("label mask extents do not match the logits");

  LossBreakdown bd = total_loss(student, teacher, labels, cfg);
  std::cout << "l_c=" << fnum(bd.l_c.value()) << "\n";
  std::cout << "l_g=" << fnum(bd.l_g.value()) << "\n";
  std::cout << "l_rd=" << fnum(bd.l_rd.value()) << "\n";
  std::cout << "l_sd=" << fnum(bd.l_sd.value()) << "\n";
  std::cout << "l_pd=" << fnum(bd.l_pd.value()) << "\n";
  std::cout << "total=" << fnum(bd.total.value()) << "\n";
  return 0;
}

// ---- export-masks -------------------------------------------------------------

int run_export_masks(const std::string& checkpoint_path, const std::string& data_dir,
                     const std::string& out_dir) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  Dataset ds = load_dataset(data_dir);
  if (ckpt.head_cfg.num_classes != ds.config.num_classes)
    throw std::invalid_argument("checkpoint expects " +
                                std::to_string(ckpt.head_cfg.num_classes) +
                                " classes but the dataset has " +
                                std::to_string(ds.config.num_classes));
  for (auto& [name, p] : trainable_params(ckpt.model, ckpt.head_cfg, ckpt.mode))
    p.set_requires_grad(false);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    SampleForward fw = forward_sample(ckpt.model, ckpt.head_cfg, ckpt.mode, ds.samples[i]);
    const Tensor& logits =
        (ckpt.mode == HeadMode::kSSA) ? fw.student.fused : fw.student.coarse;
    char name[32];
    std::snprintf(name, sizeof(name), "pred_%05zu.pgm", i);
    save_pgm((fs::path(out_dir) / name).string(), predict_labels(logits));
  }
  std::cout << "wrote " << ds.samples.size() << " masks to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-adaptive segmentation head workbench"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // generate
  GenerateArgs gen;
  CLI::App* generate = app.add_subcommand("generate", "Write a synthetic dataset directory");
  generate->set_config("--config");
  generate->add_option("--out", gen.out, "Output directory")->required();
  generate->add_option("--count", gen.count, "Number of samples")->capture_default_str();
  generate->add_option("--seed", gen.seed, "Base seed; sample i uses seed+i")
      ->capture_default_str();
  generate->add_option("--height", gen.cfg.height, "Canvas height")->capture_default_str();
  generate->add_option("--width", gen.cfg.width, "Canvas width")->capture_default_str();
  generate->add_option("--classes", gen.cfg.num_classes, "Class count including background")
      ->capture_default_str();
  generate->add_option("--shapes", gen.cfg.shapes_per_image, "Shapes drawn per image")
      ->capture_default_str();
  generate->add_option("--noise", gen.cfg.noise_sigma, "Gaussian pixel noise sigma")
      ->capture_default_str();

  // train
  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "Fit a head on a dataset directory");
  train_cmd->set_config("--config");
  train_cmd->add_option("--data", tr.data, "Dataset directory")->required();
  train_cmd->add_option("--out", tr.out, "Run directory for artifacts")->required();
  train_cmd->add_option("--head", tr.train_cfg.head_mode, "Head variant: vanilla|ssa")
      ->transform(CLI::CheckedTransformer(kHeadModes))
      ->default_str("ssa");
  HeadFlags train_head = add_head_flags(*train_cmd);
  train_cmd->add_option("--batch-size", tr.train_cfg.batch_size, "Samples per step")
      ->capture_default_str();
  train_cmd->add_option("--iterations", tr.train_cfg.iterations, "Optimization steps")
      ->capture_default_str();
  train_cmd->add_option("--eval-interval", tr.train_cfg.eval_interval,
                        "Iterations between held-out evaluations")
      ->capture_default_str();
  train_cmd->add_option("--seed", tr.train_cfg.seed, "Initialization and batch sampling seed")
      ->capture_default_str();
  train_cmd->add_option("--optimizer", tr.train_cfg.optim.kind, "adam|sgd")
      ->transform(CLI::CheckedTransformer(kOptimKinds))
      ->default_str("adam");
  train_cmd->add_option("--lr", tr.train_cfg.optim.lr, "Learning rate")->capture_default_str();
  train_cmd->add_option("--beta1", tr.train_cfg.optim.beta1, "Adam first-moment decay")
      ->capture_default_str();
  train_cmd->add_option("--beta2", tr.train_cfg.optim.beta2, "Adam second-moment decay")
      ->capture_default_str();
  train_cmd->add_option("--adam-eps", tr.train_cfg.optim.eps, "Adam denominator floor")
      ->capture_default_str();
  train_cmd->add_option("--momentum", tr.train_cfg.optim.momentum, "SGD momentum factor")
      ->capture_default_str();

  // eval
  std::string eval_checkpoint, eval_data;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "Score a checkpoint on a dataset's held-out split");
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset directory")->required();

  // gradcheck
  std::string preset = "small";
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
  gradcheck_cmd->add_option("--preset", preset, "Fixture size: small|full")
      ->check(CLI::IsMember({"small", "full"}))
      ->capture_default_str();

  // losses
  std::string losses_student, losses_teacher, losses_labels;
  CLI::App* losses_cmd =
      app.add_subcommand("losses", "Print the loss breakdown for one sample");
  losses_cmd->add_option("--student", losses_student, "Student head-output bundle")->required();
  losses_cmd->add_option("--teacher", losses_teacher, "Teacher head-output bundle")->required();
  losses_cmd->add_option("--labels", losses_labels, "Label mask PGM")->required();
  HeadFlags losses_head = add_head_flags(*losses_cmd);

  // export-masks
  std::string export_checkpoint, export_data, export_out;
  CLI::App* export_cmd =
      app.add_subcommand("export-masks", "Write predicted label masks as PGM files");
  export_cmd->add_option("--checkpoint", export_checkpoint, "Checkpoint file")->required();
  export_cmd->add_option("--data", export_data, "Dataset directory")->required();
  export_cmd->add_option("--out", export_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (generate->parsed()) return run_generate(gen);
    if (train_cmd->parsed()) {
      tr.head_cfg = train_head.cfg;
      tr.classes_given = train_head.classes_opt->count() > 0;
      return run_train(tr);
    }
    if (eval_cmd->parsed()) return run_eval(eval_checkpoint, eval_data);
    if (gradcheck_cmd->parsed()) return run_gradcheck(preset);
    if (losses_cmd->parsed())
      return run_losses(losses_student, losses_teacher, losses_labels, losses_head.cfg,
                        losses_head.classes_opt->count() > 0);
    if (export_cmd->parsed())
      return run_export_masks(export_checkpoint, export_data, export_out);
  } catch (const FormatError& e) {
    std::cerr << e.what() << "\n";
    return kExitFormat;
  } catch (const NumericError& e) {
    std::cerr << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }
  return 0;
}
