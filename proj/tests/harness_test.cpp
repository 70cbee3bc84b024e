#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "ssa/errors.hpp"
#include "ssa/metrics.hpp"
#include "ssa/optim.hpp"
#include "ssa/tensor_io.hpp"
#include "ssa/train.hpp"

using namespace ssa;

namespace {

std::string temp_path(const char* name) {
  static int counter = 0;
  const auto dir = std::filesystem::temp_directory_path() / "ssaseg_harness_tests";
  std::filesystem::create_directories(dir);
  return (dir / (std::to_string(counter++) + "_" + name)).string();
}

SynthConfig tiny_canvas() {
  SynthConfig cfg;
  cfg.height = 8;
  cfg.width = 8;
  cfg.num_classes = 3;
  cfg.shapes_per_image = 2;
  cfg.noise_sigma = 0.05;
  return cfg;
}

HeadConfig tiny_head() {
  HeadConfig cfg;
  cfg.num_classes = 3;
  cfg.embed_dim = 4;
  return cfg;
}

}  // namespace

TEST_CASE("argmax predictions break ties toward the lower class") {
  Tensor logits = Tensor::from_data({1, 3, 3},
                                    {0.1, 0.9, 0.3,    //
                                     2.0, 2.0, -1.0,   //
                                     -5.0, -5.0, -5.0});
  LabelMask pred = predict_labels(logits);
  CHECK(pred.at(0, 0) == 1);
  CHECK(pred.at(0, 1) == 0);
  CHECK(pred.at(0, 2) == 0);
}

TEST_CASE("intersection and union tallies stream across images") {
  IouAccumulator acc(3, 255);
  LabelMask truth(2, 2);
  truth.at(0, 0) = 0;
  truth.at(0, 1) = 1;
  truth.at(1, 0) = 1;
  truth.at(1, 1) = 255;
  LabelMask pred(2, 2);
  pred.at(0, 0) = 0;
  pred.at(0, 1) = 1;
  pred.at(1, 0) = 0;
  pred.at(1, 1) = 1;  // lands on an ignored pixel, must not count
  acc.add(pred, truth);

  // class 0: inter 1, pred {2 valid}, truth {1} -> union 2; class 1: inter 1,
  // union 2; class 2 never appears.
  const auto per_class = acc.per_class();
  CHECK(per_class[0] == doctest::Approx(0.5));
  CHECK(per_class[1] == doctest::Approx(0.5));
  CHECK(std::isnan(per_class[2]));
  CHECK(acc.miou() == doctest::Approx(0.5));

  // A second image shifts the tallies.
  LabelMask truth2(1, 2);
  truth2.at(0, 0) = 2;
  truth2.at(0, 1) = 2;
  LabelMask pred2(1, 2);
  pred2.at(0, 0) = 2;
  pred2.at(0, 1) = 0;
  acc.add(pred2, truth2);
  const auto updated = acc.per_class();
  CHECK(updated[2] == doctest::Approx(0.5));
  CHECK(updated[0] == doctest::Approx(1.0 / 3.0));

  IouAccumulator empty(2, 255);
  CHECK(empty.miou() == 0.0);

  LabelMask bad(1, 1);
  bad.at(0, 0) = 7;
  CHECK_THROWS_AS(acc.add(pred2, bad), std::invalid_argument);
}

TEST_CASE("one optimizer step matches the update rule by hand") {
  SUBCASE("adam") {
    OptimConfig cfg;
    cfg.lr = 0.01;
    Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
    Optimizer opt(cfg, {{"p", p}});

    double m[2] = {0.0, 0.0}, v[2] = {0.0, 0.0};
    double expect[2] = {1.0, -2.0};
    for (int t = 1; t <= 3; ++t) {
      p.zero_grad();
      backward(reduce_sum(mul(p, p)));  // gradient 2p
      double g[2];
      for (int i = 0; i < 2; ++i) g[i] = 2.0 * expect[i];
      opt.step();
      for (int i = 0; i < 2; ++i) {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
        const double mh = m[i] / (1.0 - std::pow(0.9, t));
        const double vh = v[i] / (1.0 - std::pow(0.999, t));
        expect[i] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
        CHECK(p[static_cast<std::size_t>(i)] == doctest::Approx(expect[i]).epsilon(1e-14));
      }
    }
  }

  SUBCASE("sgd with momentum") {
    OptimConfig cfg;
    cfg.kind = OptimKind::kSgdMomentum;
    cfg.lr = 0.1;
    cfg.momentum = 0.5;
    Tensor p = Tensor::from_data({1}, {3.0}, true);
    Optimizer opt(cfg, {{"p", p}});

    double buf = 0.0, expect = 3.0;
    for (int t = 0; t < 3; ++t) {
      p.zero_grad();
      backward(reduce_sum(mul(p, p)));
      const double g = 2.0 * expect;
      opt.step();
      buf = 0.5 * buf + g;
      expect -= 0.1 * buf;
      CHECK(p.value() == doctest::Approx(expect).epsilon(1e-14));
    }
  }
}

TEST_CASE("missing gradients leave parameters untouched") {
  Tensor p = Tensor::from_data({2}, {1.5, -0.5}, true);
  Optimizer opt(OptimConfig{}, {{"p", p}});
  opt.zero_grad();
  opt.step();
  CHECK(p[0] == 1.5);
  CHECK(p[1] == -0.5);
}

TEST_CASE("a non-finite gradient aborts the step and names the parameter") {
  Tensor p = Tensor::from_data({1}, {2.0}, true);
  Optimizer opt(OptimConfig{}, {{"weights.w1", p}});
  p.zero_grad();
  Tensor loss = reduce_sum(div(p, Tensor::from_data({1}, {0.0})));
  backward(loss);
  try {
    opt.step();
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("weights.w1") != std::string::npos);
  }
}

TEST_CASE("checkpoints restore every trainable tensor and setting") {
  HeadConfig hcfg = tiny_head();
  hcfg.lambda_r = 0.5;
  hcfg.edge_size = 3;
  hcfg.spatial_axis = SpatialAxis::kChannel;
  hcfg.teacher_mode = TeacherMode::kSelf;
  Model model = init_model(hcfg, 8, 8, 11);
  Checkpoint ckpt{model, hcfg, HeadMode::kSSA, 140};
  const std::string path = temp_path("full.ssah");
  save_checkpoint(path, ckpt);

  Checkpoint back = load_checkpoint(path);
  CHECK(back.iteration == 140);
  CHECK(back.mode == HeadMode::kSSA);
  CHECK(back.head_cfg.num_classes == 3);
  CHECK(back.head_cfg.embed_dim == 4);
  CHECK(back.head_cfg.lambda_r == 0.5);
  CHECK(back.head_cfg.edge_size == 3);
  CHECK(back.head_cfg.spatial_axis == SpatialAxis::kChannel);
  CHECK(back.head_cfg.teacher_mode == TeacherMode::kSelf);

  auto before = trainable_params(model, hcfg, HeadMode::kSSA);
  auto after = trainable_params(back.model, back.head_cfg, HeadMode::kSSA);
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK(before[i].first == after[i].first);
    CHECK(after[i].second.requires_grad());
    REQUIRE(before[i].second.size() == after[i].second.size());
    for (std::size_t j = 0; j < before[i].second.size(); ++j)
      CHECK(before[i].second[j] == after[i].second[j]);
  }
}

TEST_CASE("vanilla checkpoints carry only the classifier parameters") {
  HeadConfig hcfg = tiny_head();
  Model model = init_model(hcfg, 8, 8, 12);
  const std::string path = temp_path("vanilla.ssah");
  save_checkpoint(path, Checkpoint{model, hcfg, HeadMode::kVanilla, 10});

  NamedTensors bundle = load_bundle(path);
  CHECK_NOTHROW(bundle.get("head.s_proto"));
  CHECK_NOTHROW(bundle.get("encoder.w1"));
  CHECK_THROWS_AS(bundle.get("head.p_proto"), std::invalid_argument);
  CHECK_THROWS_AS(bundle.get("head.phi_s_w"), std::invalid_argument);

  Checkpoint back = load_checkpoint(path);
  CHECK(back.mode == HeadMode::kVanilla);
  for (std::size_t j = 0; j < model.protos.s_proto.size(); ++j)
    CHECK(back.model.protos.s_proto[j] == model.protos.s_proto[j]);
}

TEST_CASE("tampered checkpoint metadata is rejected") {
  HeadConfig hcfg = tiny_head();
  Model model = init_model(hcfg, 8, 8, 13);
  const std::string path = temp_path("tamper.ssah");
  save_checkpoint(path, Checkpoint{model, hcfg, HeadMode::kSSA, 5});

  auto overwrite = [](NamedTensors& bundle, const std::string& name, double v) {
    for (auto& [key, t] : bundle.items)
      if (key == name) t = Tensor::scalar(v);
  };

  SUBCASE("out-of-range enum") {
    NamedTensors bundle = load_bundle(path);
    overwrite(bundle, "meta.pe_kind", 9.0);
    save_bundle(path, bundle);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }

  SUBCASE("prototype shape contradicts the config") {
    NamedTensors bundle = load_bundle(path);
    overwrite(bundle, "meta.num_classes", 5.0);
    save_bundle(path, bundle);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
  }
}

TEST_CASE("report lines format canonically") {
  EvalReport rep;
  rep.iteration = 20;
  rep.miou = 62.5;
  rep.per_class_iou = {0.1, std::nan(""), 1.0};
  rep.loss.l_c = 0.25;
  rep.loss.l_g = 0.5;
  rep.loss.l_rd = 0.0;
  rep.loss.l_sd = 1e-17;
  rep.loss.l_pd = 2.0;
  rep.loss.total = 2.75 + 1e-17;
  const std::string line = report_json(rep);
  CHECK(line ==
        "{\"iteration\":20,\"miou\":62.5,\"per_class_iou\":[0.10000000000000001,null,1],"
        "\"loss\":{\"l_c\":0.25,\"l_g\":0.5,\"l_rd\":0,\"l_sd\":1.0000000000000001e-17,"
        "\"l_pd\":2,\"total\":2.75}}");
  CHECK(report_json(rep) == line);
}

TEST_CASE("dataset splitting holds out every fifth seed") {
  SynthConfig cfg = tiny_canvas();
  const auto samples = make_dataset(cfg, 100, 12);
  const auto [train_split, eval_split] = split_dataset(samples);
  CHECK(train_split.size() + eval_split.size() == 12);
  for (const auto& s : eval_split) CHECK(s.seed % 5 == 0);
  for (const auto& s : train_split) CHECK(s.seed % 5 != 0);
  CHECK(eval_split.size() == 3);  // seeds 100, 105, 110
}

TEST_CASE("full-model gradients agree with finite differences in both modes") {
  SynthConfig scfg = tiny_canvas();
  scfg.height = 6;
  scfg.width = 6;
  HeadConfig hcfg = tiny_head();
  SynthSample sample = generate(scfg, 21);

  Model ssa_model = init_model(hcfg, 6, 6, 22);
  GradCheckReport ssa_report = grad_check(ssa_model, hcfg, HeadMode::kSSA, sample, 1e-5);
  CAPTURE(ssa_report.worst_param);
  CAPTURE(ssa_report.worst_analytic);
  CAPTURE(ssa_report.worst_numeric);
  CHECK(ssa_report.max_rel_err < 1e-4);
  std::size_t expected_coords = 0;
  for (const auto& [name, p] : trainable_params(ssa_model, hcfg, HeadMode::kSSA))
    expected_coords += p.size();
  CHECK(ssa_report.coords_checked == expected_coords);

  Model vanilla_model = init_model(hcfg, 6, 6, 23);
  GradCheckReport vanilla_report =
      grad_check(vanilla_model, hcfg, HeadMode::kVanilla, sample, 1e-5);
  CAPTURE(vanilla_report.worst_param);
  CHECK(vanilla_report.max_rel_err < 1e-4);
}

TEST_CASE("training runs deterministically and reduces the loss") {
  SynthConfig scfg = tiny_canvas();
  const auto samples = make_dataset(scfg, 40, 10);
  const auto [train_split, eval_split] = split_dataset(samples);
  REQUIRE(!train_split.empty());
  REQUIRE(!eval_split.empty());

  HeadConfig hcfg = tiny_head();
  TrainConfig tcfg;
  tcfg.batch_size = 2;
  tcfg.iterations = 40;
  tcfg.eval_interval = 20;
  tcfg.seed = 3;
  tcfg.optim.lr = 3e-3;

  auto run = [&]() {
    Model model = init_model(hcfg, scfg.height, scfg.width, tcfg.seed);
    std::ostringstream reports;
    TrainResult result = train(model, hcfg, tcfg, train_split, eval_split, &reports);
    return std::make_tuple(std::move(result), std::move(reports).str(), std::move(model));
  };
  auto [first, first_lines, first_model] = run();
  auto [second, second_lines, second_model] = run();

  CHECK_FALSE(first.diverged);
  CHECK(first.completed_iterations == 40);
  REQUIRE(first.reports.size() == 2);
  CHECK(first_lines == second_lines);
  CHECK(first.reports.back().loss.total < first.reports.front().loss.total);

  // The streamed lines are exactly the canonical formatting of the reports.
  std::string expected;
  for (const auto& rep : first.reports) expected += report_json(rep) + "\n";
  CHECK(first_lines == expected);

  // Evaluating the final model reproduces the last report.
  EvalReport fresh = evaluate_split(first_model, hcfg, tcfg.head_mode, eval_split,
                                    first.completed_iterations);
  CHECK(report_json(fresh) == report_json(first.reports.back()));

  // Evaluation leaves the parameters trainable.
  for (const auto& [name, p] : trainable_params(first_model, hcfg, tcfg.head_mode))
    CHECK(p.requires_grad());
}

TEST_CASE("the plain classifier trains without the guided losses") {
  SynthConfig scfg = tiny_canvas();
  const auto samples = make_dataset(scfg, 60, 8);
  const auto [train_split, eval_split] = split_dataset(samples);

  HeadConfig hcfg = tiny_head();
  TrainConfig tcfg;
  tcfg.head_mode = HeadMode::kVanilla;
  tcfg.batch_size = 2;
  tcfg.iterations = 30;
  tcfg.eval_interval = 30;
  tcfg.seed = 4;
  tcfg.optim.lr = 3e-3;

  Model model = init_model(hcfg, scfg.height, scfg.width, tcfg.seed);
  TrainResult result = train(model, hcfg, tcfg, train_split, eval_split, nullptr);
  CHECK_FALSE(result.diverged);
  REQUIRE(result.reports.size() == 1);
  CHECK(result.reports[0].loss.l_g == 0.0);
  CHECK(result.reports[0].loss.l_rd == 0.0);
  CHECK(result.reports[0].loss.total == result.reports[0].loss.l_c);
}

TEST_CASE("exploding updates stop training with a diagnostic") {
  SynthConfig scfg = tiny_canvas();
  const auto samples = make_dataset(scfg, 40, 10);
  const auto [train_split, eval_split] = split_dataset(samples);

  HeadConfig hcfg = tiny_head();
  TrainConfig tcfg;
  tcfg.batch_size = 2;
  tcfg.iterations = 50;
  tcfg.eval_interval = 10;
  tcfg.seed = 5;
  tcfg.optim.kind = OptimKind::kSgdMomentum;
  tcfg.optim.lr = 1e18;

  Model model = init_model(hcfg, scfg.height, scfg.width, tcfg.seed);
  TrainResult result = train(model, hcfg, tcfg, train_split, eval_split, nullptr);
  CHECK(result.diverged);
  CHECK(result.completed_iterations < 50);
  CHECK(result.diagnostic.find("iteration") != std::string::npos);
}

TEST_CASE("training rejects unusable arguments") {
  SynthConfig scfg = tiny_canvas();
  const auto samples = make_dataset(scfg, 40, 4);
  HeadConfig hcfg = tiny_head();
  TrainConfig tcfg;
  Model model = init_model(hcfg, scfg.height, scfg.width, 1);
  CHECK_THROWS_AS(train(model, hcfg, tcfg, {}, samples, nullptr), std::invalid_argument);
  TrainConfig bad = tcfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(train(model, hcfg, bad, samples, samples, nullptr), std::invalid_argument);
}
