// End-to-end gate for the head, losses, benchmark, and training harness.
// Each check prints one PASS/FAIL line; the exit code is the failure count.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ssa/head.hpp"
#include "ssa/label_mask.hpp"
#include "ssa/losses.hpp"
#include "ssa/rng.hpp"
#include "ssa/synth.hpp"
#include "ssa/tensor.hpp"
#include "ssa/train.hpp"

#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace ssa;
using Clock = std::chrono::steady_clock;

namespace {

// Benchmark margins, pinned from paired runs of this exact protocol
// (measured mean gaps: adaptive-plain 0.232, spatial-channel 0.018,
// gt-self 0.056). The adaptive head's advantage over the plain head is
// the headline gate; the axis and guidance floors sit well below the
// measured values to absorb platform-level float reordering.
constexpr double kMinAdaptiveGap = 0.02;
constexpr double kMinAxisGap = 0.005;
constexpr double kMinGuidanceGap = 0.02;

int g_failures = 0;

void report(int index, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] %d %s: %s\n", pass ? "PASS" : "FAIL", index, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::vector<double> to_vec(const Tensor& t) {
  return {t.array().data(), t.array().data() + t.array().size()};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  return (a.array() - b.array()).abs().maxCoeff();
}

Tensor make_random(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  SplitMix64 rng(seed);
  for (Eigen::Index i = 0; i < t.array().size(); ++i) t.array()[i] = rng.uniform(lo, hi);
  return t;
}

LabelMask random_labels(std::size_t h, std::size_t w, std::size_t k, std::uint64_t seed,
                        double ignore_prob) {
  LabelMask mg(h, w);
  SplitMix64 rng(seed);
  for (std::size_t p = 0; p < h * w; ++p)
    mg.labels[p] = rng.uniform() < ignore_prob ? 255 : static_cast<std::int32_t>(rng.below(k));
  return mg;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return "<unreadable:" + path.string() + ">";
  std::ostringstream buf;
  buf << in.rdbuf();
  return std::move(buf).str();
}

// ---- 1: full-head gradient check ----------------------------------------------

void check_gradients() {
  const auto start = Clock::now();
  SynthConfig scfg;
  scfg.height = 8;
  scfg.width = 8;
  scfg.num_classes = 4;
  scfg.shapes_per_image = 3;
  const SynthSample sample = generate(scfg, 4);

  HeadConfig hcfg;
  hcfg.num_classes = 4;
  hcfg.embed_dim = 8;
  Model model = init_model(hcfg, scfg.height, scfg.width, 5);
  GradCheckReport rep = grad_check(model, hcfg, HeadMode::kSSA, sample, 1e-5);

  const double elapsed = seconds_since(start);
  char detail[256];
  std::snprintf(detail, sizeof(detail),
                "max rel err %.3g (%s[%zu]) over %zu coords in %.1fs (limits 1e-4, 60s)",
                rep.max_rel_err, rep.worst_param.c_str(), rep.worst_index, rep.coords_checked,
                elapsed);
  report(1, "full-head gradient check", rep.max_rel_err < 1e-4 && elapsed < 60.0, detail);
}

// ---- 2: loss oracle equivalence ------------------------------------------------

void check_loss_oracles() {
  const std::size_t h = 6, w = 6, k = 3, d = 4;
  double worst = 0.0;
  std::string worst_name = "none";
  auto track = [&](const char* name, double got, double want) {
    const double diff = std::abs(got - want);
    if (diff > worst) {
      worst = diff;
      worst_name = name;
    }
  };

  for (int trial = 0; trial < 20; ++trial) {
    const std::uint64_t seed = 7000 + 10 * static_cast<std::uint64_t>(trial);
    Tensor student = make_random({h, w, k}, seed, -2.0, 2.0);
    Tensor teacher = make_random({h, w, k}, seed + 1, -2.0, 2.0);
    Tensor sp = make_random({k, d}, seed + 2);
    Tensor sp_hat = make_random({k, d}, seed + 3);
    Tensor pp = make_random({k, d}, seed + 4);
    Tensor pp_hat = make_random({k, d}, seed + 5);
    LabelMask mg = random_labels(h, w, k, seed + 6, trial % 2 ? 0.15 : 0.0);

    track("ce", ce_loss(student, mg, 255).value(), oracle::ce(to_vec(student), mg, k, 255));
    track("dice", dice_loss(student, mg, 255).value(),
          oracle::dice(to_vec(student), mg, k, 255));
    BoundaryMasks masks = boundary_band(mg, k, 4, 255);
    track("response", response_distill(student, teacher, masks).value(),
          oracle::response_distill(to_vec(student), to_vec(teacher), mg, k, 4, 255));
    track("semantic", semantic_distill(sp, sp_hat).value(),
          oracle::semantic_distill(to_vec(sp), to_vec(sp_hat), k, d));
    track("spatial", spatial_distill(pp, pp_hat).value(),
          oracle::spatial_distill(to_vec(pp), to_vec(pp_hat), k, d));
  }

  char detail[160];
  std::snprintf(detail, sizeof(detail),
                "20 fixtures x 5 losses, worst |diff| %.3g (%s) vs 1e-10", worst,
                worst_name.c_str());
  report(2, "loss oracle equivalence", worst <= 1e-10, detail);
}

// ---- 3: degenerate head reduces to the plain classifier ------------------------

void check_reduction() {
  const std::size_t h = 7, w = 5, k = 4, d = 6;
  HeadConfig cfg;
  cfg.num_classes = k;
  cfg.embed_dim = d;
  cfg.pe_kind = PEKind::kNone;

  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    SplitMix64 rng(800 + static_cast<std::uint64_t>(trial));
    PrototypeSet protos = PrototypeSet::init(cfg, h, w, rng);
    protos.phi_p_w = Tensor::zeros({2 * d, d}, true);
    protos.phi_p_b = Tensor::zeros({d}, true);
    Tensor select_proto = Tensor::zeros({2 * d, d}, true);
    for (std::size_t j = 0; j < d; ++j)
      select_proto.array()[static_cast<Eigen::Index>((d + j) * d + j)] = 1.0;
    protos.phi_s_w = select_proto;
    protos.phi_s_b = Tensor::zeros({d}, true);

    Tensor sf = make_random({h, w, d}, 900 + static_cast<std::uint64_t>(trial), -1.5, 1.5);
    HeadOutput out = ssa_forward(sf, protos, cfg);
    Tensor vanilla = vanilla_forward(sf, protos.s_proto);
    worst = std::max(worst, max_abs_diff(out.fused, vanilla));
  }

  char detail[128];
  std::snprintf(detail, sizeof(detail), "10 inputs, worst |fused - plain| %.3g vs 1e-12", worst);
  report(3, "inert adapters reduce to the plain head", worst <= 1e-12, detail);
}

// ---- 4: guided and unguided passes coincide on peaked inputs -------------------

void check_teacher_consistency() {
  const std::size_t h = 6, w = 6, k = 3;
  HeadConfig cfg;
  cfg.num_classes = k;
  cfg.embed_dim = k;
  SplitMix64 rng(99);
  PrototypeSet protos = PrototypeSet::init(cfg, h, w, rng);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      protos.s_proto.array()[static_cast<Eigen::Index>(i * k + j)] = (i == j) ? 50.0 : 0.0;
  Tensor sf = Tensor::zeros({h, w, k});
  LabelMask labels(h, w);
  for (std::size_t p = 0; p < h * w; ++p) {
    labels.labels[p] = static_cast<std::int32_t>(p % k);
    sf.array()[static_cast<Eigen::Index>(p * k + p % k)] = 1.0;
  }

  HeadOutput student = ssa_forward(sf, protos, cfg);
  HeadOutput teacher = teacher_forward(sf, labels, protos, cfg, student);
  const double center_gap = std::max(max_abs_diff(student.s_center, teacher.s_center),
                                     max_abs_diff(student.p_center, teacher.p_center));
  const double l_sd = semantic_distill(student.s_proto, detach(teacher.s_proto)).value();

  char detail[128];
  std::snprintf(detail, sizeof(detail), "center gap %.3g vs 1e-9, prototype loss %.3g vs 1e-12",
                center_gap, l_sd);
  report(4, "guided pass matches peaked student", center_gap <= 1e-9 && l_sd <= 1e-12, detail);
}

// ---- 5: boundary band contract --------------------------------------------------

void check_boundary_band() {
  bool pass = true;
  std::string note;

  LabelMask half(8, 8);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) half.at(y, x) = x < 4 ? 0 : 1;
  BoundaryMasks band = boundary_band(half, 2, 4, 255);
  for (std::size_t y = 0; y < 8 && pass; ++y)
    for (std::size_t x = 0; x < 8 && pass; ++x) {
      const bool expected = x >= 2 && x <= 5;
      if (band.in_band(y, x) != expected) {
        pass = false;
        note = "half-split band wrong at (" + std::to_string(y) + "," + std::to_string(x) + ")";
      }
    }

  std::size_t checked = 0;
  for (int trial = 0; trial < 50 && pass; ++trial) {
    const std::uint64_t seed = 2000 + static_cast<std::uint64_t>(trial);
    LabelMask mg = random_labels(6, 8, 4, seed, 0.1);
    BoundaryMasks got = boundary_band(mg, 4, 4, 255);
    oracle::Masks want = oracle::boundary_masks(mg, 4, 4, 255);
    for (std::size_t p = 0; p < 48 && pass; ++p)
      if ((got.boundary[p] != 0) != (want.boundary[p] != 0)) {
        pass = false;
        note = "band mismatch, map seed " + std::to_string(seed);
      }
    const auto counts = class_counts(mg, 4, 255);
    for (std::size_t c = 0; c < 4 && pass; ++c) {
      std::size_t banded = 0, plain = 0;
      for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          if ((got.onehot[(c * 6 + y) * 8 + x] != 0) !=
              (want.onehot[(c * 48) + y * 8 + x] != 0)) {
            pass = false;
            note = "class mask mismatch, map seed " + std::to_string(seed);
          }
          if (!got.in_class(c, y, x)) continue;
          ++(got.in_band(y, x) ? banded : plain);
        }
      if (pass && banded + plain != counts[c]) {
        pass = false;
        note = "band split does not partition class " + std::to_string(c);
      }
    }
    ++checked;
  }

  if (pass)
    note = "half-split band is the 4 straddling columns; partition holds on " +
           std::to_string(checked) + " random maps";
  report(5, "boundary band contract", pass, note);
}

// ---- 6: benchmark separates the head variants ----------------------------------

struct VariantScore {
  std::string name;
  HeadMode mode;
  HeadConfig cfg;
  double mean_miou = 0.0;
  double worst_seconds = 0.0;
};

void check_benchmark() {
  SynthConfig scfg;
  Dataset ds;
  ds.config = scfg;
  ds.base_seed = 4242;
  ds.samples = make_dataset(scfg, 4242, 200);
  const auto [train_split, eval_split] = split_dataset(ds.samples);

  HeadConfig base;
  base.num_classes = scfg.num_classes;

  std::vector<VariantScore> variants(4);
  variants[0] = {"plain", HeadMode::kVanilla, base};
  variants[1] = {"adaptive", HeadMode::kSSA, base};
  variants[2] = {"channel-axis", HeadMode::kSSA, base};
  variants[2].cfg.spatial_axis = SpatialAxis::kChannel;
  variants[3] = {"self-guided", HeadMode::kSSA, base};
  variants[3].cfg.teacher_mode = TeacherMode::kSelf;

  bool pass = true;
  std::string note;
  for (VariantScore& v : variants) {
    double sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const auto start = Clock::now();
      TrainConfig tcfg;
      tcfg.seed = seed;
      tcfg.head_mode = v.mode;
      Model model = init_model(v.cfg, scfg.height, scfg.width, seed);
      TrainResult result = train(model, v.cfg, tcfg, train_split, eval_split, nullptr);
      v.worst_seconds = std::max(v.worst_seconds, seconds_since(start));
      if (result.diverged || result.reports.empty()) {
        pass = false;
        note = v.name + " seed " + std::to_string(seed) + " diverged";
        break;
      }
      sum += result.reports.back().miou;
    }
    if (!pass) break;
    v.mean_miou = sum / 3.0;
    if (v.worst_seconds > 600.0) {
      pass = false;
      note = v.name + " exceeded 600s per run";
    }
  }

  if (pass) {
    const double adaptive_gap = variants[1].mean_miou - variants[0].mean_miou;
    const double axis_gap = variants[1].mean_miou - variants[2].mean_miou;
    const double guidance_gap = variants[1].mean_miou - variants[3].mean_miou;
    pass = adaptive_gap >= kMinAdaptiveGap && axis_gap >= kMinAxisGap &&
           guidance_gap >= kMinGuidanceGap;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "mean mIoU plain %.4f adaptive %.4f channel-axis %.4f self-guided %.4f; "
                  "gaps %+.1f / %+.1f / %+.1f points vs %.1f / %.1f / %.1f",
                  variants[0].mean_miou, variants[1].mean_miou, variants[2].mean_miou,
                  variants[3].mean_miou, 100.0 * adaptive_gap, 100.0 * axis_gap,
                  100.0 * guidance_gap, 100.0 * kMinAdaptiveGap, 100.0 * kMinAxisGap,
                  100.0 * kMinGuidanceGap);
    note = buf;
  }
  report(6, "benchmark separates the variants", pass, note);
}

// ---- 7: the train command is deterministic --------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SSA_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void check_determinism() {
  const fs::path root = fs::temp_directory_path() / "ssa_acceptance_determinism";
  fs::remove_all(root);
  const fs::path data = root / "data";
  bool pass = run_cli("generate --out " + data.string() +
                      " --count 12 --height 8 --width 8 --classes 3 --shapes 2 --noise 0.05"
                      " --seed 40") == 0;
  const std::string flags = " --embed-dim 4 --batch-size 2 --iterations 40 --eval-interval 20"
                            " --seed 3 --lr 3e-3";
  std::string note = "generate failed";
  if (pass) {
    pass = run_cli("train --data " + data.string() + " --out " + (root / "a").string() + flags) ==
               0 &&
           run_cli("train --data " + data.string() + " --out " + (root / "b").string() + flags) ==
               0;
    note = "train failed";
  }
  if (pass) {
    const bool reports_equal =
        slurp(root / "a" / "reports.jsonl") == slurp(root / "b" / "reports.jsonl");
    const bool ckpt_equal =
        slurp(root / "a" / "checkpoint.ssah") == slurp(root / "b" / "checkpoint.ssah");
    pass = reports_equal && ckpt_equal;
    note = std::string("reports ") + (reports_equal ? "identical" : "DIFFER") + ", checkpoints " +
           (ckpt_equal ? "identical" : "DIFFER");
  }
  report(7, "repeated training runs are byte-identical", pass, note);
}

// ---- 8: degenerate inputs stay finite -------------------------------------------

bool all_finite(const LossBreakdown& bd) {
  return std::isfinite(bd.l_c.value()) && std::isfinite(bd.l_g.value()) &&
         std::isfinite(bd.l_rd.value()) && std::isfinite(bd.l_sd.value()) &&
         std::isfinite(bd.l_pd.value()) && std::isfinite(bd.total.value());
}

bool grads_finite(const PrototypeSet& protos, PEKind kind) {
  for (const auto& [name, p] : protos.named_params(kind))
    if (p.has_grad() && !p.grad_array().allFinite()) return false;
  return true;
}

void check_degenerate_inputs() {
  const std::size_t h = 6, w = 6, k = 4, d = 4;
  HeadConfig cfg;
  cfg.num_classes = k;
  cfg.embed_dim = d;
  bool pass = true;
  std::string note;

  auto run_case = [&](const char* name, const LabelMask& mg, const HeadOutput* fixed_teacher) {
    if (!pass) return;
    SplitMix64 rng(321);
    PrototypeSet protos = PrototypeSet::init(cfg, h, w, rng);
    Tensor sf = make_random({h, w, d}, 654, -1.0, 1.0);
    sf.set_requires_grad(true);
    HeadOutput student = ssa_forward(sf, protos, cfg);
    HeadOutput teacher =
        fixed_teacher ? *fixed_teacher : teacher_forward(sf, mg, protos, cfg, student);
    LossBreakdown bd = total_loss(student, teacher, mg, cfg);
    if (!all_finite(bd)) {
      pass = false;
      note = std::string(name) + ": non-finite loss";
      return;
    }
    backward(bd.total);
    if (!grads_finite(protos, cfg.pe_kind) ||
        (sf.has_grad() && !sf.grad_array().allFinite())) {
      pass = false;
      note = std::string(name) + ": non-finite gradient";
    }
  };

  LabelMask all_ignored(h, w, 255);
  run_case("all pixels ignored", all_ignored, nullptr);

  LabelMask single_class(h, w, 2);
  run_case("one class everywhere", single_class, nullptr);

  LabelMask background_only(h, w, 0);
  run_case("background only", background_only, nullptr);

  LabelMask mixed = random_labels(h, w, k, 77, 0.1);
  HeadOutput certain;
  certain.fused = Tensor::zeros({h, w, k});
  for (std::size_t p = 0; p < h * w; ++p) {
    const std::int32_t lab = mixed.labels[p];
    for (std::size_t c = 0; c < k; ++c)
      certain.fused.array()[static_cast<Eigen::Index>(p * k + c)] =
          (lab != 255 && static_cast<std::size_t>(lab) == c) ? 40.0 : -40.0;
  }
  certain.s_proto = make_random({k, d}, 88);
  certain.p_proto = make_random({k, d}, 89);
  run_case("zero-entropy teacher", mixed, &certain);

  if (pass) note = "ignored, single-class, background-only, zero-entropy all finite";
  report(8, "degenerate inputs stay finite", pass, note);
}

}  // namespace

int main() {
  check_gradients();
  check_loss_oracles();
  check_reduction();
  check_teacher_consistency();
  check_boundary_band();
  check_benchmark();
  check_determinism();
  check_degenerate_inputs();
  std::printf("%d/8 passed\n", 8 - g_failures);
  return g_failures;
}
