#include "ssa/train.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <unordered_map>

#include "ssa/errors.hpp"
#include "ssa/metrics.hpp"
#include "ssa/tensor_io.hpp"

namespace ssa {

Model init_model(const HeadConfig& cfg, std::size_t height, std::size_t width,
                 std::uint64_t seed) {
  Model m;
  SplitMix64 encoder_rng(mix64(seed, 1));
  m.encoder = EncoderParams::init(cfg.embed_dim, encoder_rng);
  SplitMix64 head_rng(mix64(seed, 2));
  m.protos = PrototypeSet::init(cfg, height, width, head_rng);
  return m;
}

std::vector<std::pair<std::string, Tensor>> trainable_params(const Model& model,
                                                             const HeadConfig& cfg,
                                                             HeadMode mode) {
  auto params = model.encoder.named_params();
  if (mode == HeadMode::kVanilla) {
    params.emplace_back("head.s_proto", model.protos.s_proto);
  } else {
    auto head = model.protos.named_params(cfg.pe_kind);
    params.insert(params.end(), head.begin(), head.end());
  }
  return params;
}

namespace {

Tensor meta_scalar(double v) { return Tensor::scalar(v); }

double meta_value(const NamedTensors& bundle, const std::string& name) {
  return bundle.get(name).value();
}

int encode_enum(PEKind v) { return static_cast<int>(v); }
int encode_enum(SpatialAxis v) { return static_cast<int>(v); }
int encode_enum(TeacherMode v) { return static_cast<int>(v); }
int encode_enum(HeadMode v) { return static_cast<int>(v); }

template <typename E>
E decode_enum(const std::string& path, double raw, int max_value) {
  const int v = static_cast<int>(raw);
  if (v < 0 || v > max_value || static_cast<double>(v) != raw)
    throw FormatError(path, 0, "invalid enum value " + std::to_string(raw));
  return static_cast<E>(v);
}

// Restores requires_grad=true on scope exit; evaluation passes run with
// tracking off so no graph is recorded.
class GradToggle {
 public:
  explicit GradToggle(std::vector<std::pair<std::string, Tensor>> params)
      : params_(std::move(params)) {
    for (auto& [name, p] : params_) p.set_requires_grad(false);
  }
  ~GradToggle() {
    for (auto& [name, p] : params_) p.set_requires_grad(true);
  }
  GradToggle(const GradToggle&) = delete;
  GradToggle& operator=(const GradToggle&) = delete;

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const HeadConfig& cfg = ckpt.head_cfg;
  NamedTensors bundle;
  bundle.add("meta.iteration", meta_scalar(static_cast<double>(ckpt.iteration)));
  bundle.add("meta.head_mode", meta_scalar(encode_enum(ckpt.mode)));
  bundle.add("meta.num_classes", meta_scalar(static_cast<double>(cfg.num_classes)));
  bundle.add("meta.embed_dim", meta_scalar(static_cast<double>(cfg.embed_dim)));
  bundle.add("meta.lambda_r", meta_scalar(cfg.lambda_r));
  bundle.add("meta.lambda_s", meta_scalar(cfg.lambda_s));
  bundle.add("meta.lambda_p", meta_scalar(cfg.lambda_p));
  bundle.add("meta.edge_size", meta_scalar(static_cast<double>(cfg.edge_size)));
  bundle.add("meta.spatial_axis", meta_scalar(encode_enum(cfg.spatial_axis)));
  bundle.add("meta.pe_kind", meta_scalar(encode_enum(cfg.pe_kind)));
  bundle.add("meta.center_normalize", meta_scalar(cfg.center_normalize ? 1.0 : 0.0));
  bundle.add("meta.teacher_mode", meta_scalar(encode_enum(cfg.teacher_mode)));
  bundle.add("meta.ignore_index", meta_scalar(static_cast<double>(cfg.ignore_index)));
  for (const auto& [name, t] : trainable_params(ckpt.model, cfg, ckpt.mode))
    bundle.add(name, t);
  save_bundle(path, bundle);
}

Checkpoint load_checkpoint(const std::string& path) {
  NamedTensors bundle = load_bundle(path);
  Checkpoint ckpt;
  ckpt.iteration = static_cast<std::size_t>(meta_value(bundle, "meta.iteration"));
  ckpt.mode = decode_enum<HeadMode>(path, meta_value(bundle, "meta.head_mode"), 1);
  HeadConfig& cfg = ckpt.head_cfg;
  cfg.num_classes = static_cast<std::size_t>(meta_value(bundle, "meta.num_classes"));
  cfg.embed_dim = static_cast<std::size_t>(meta_value(bundle, "meta.embed_dim"));
  cfg.lambda_r = meta_value(bundle, "meta.lambda_r");
  cfg.lambda_s = meta_value(bundle, "meta.lambda_s");
  cfg.lambda_p = meta_value(bundle, "meta.lambda_p");
  cfg.edge_size = static_cast<std::size_t>(meta_value(bundle, "meta.edge_size"));
  cfg.spatial_axis = decode_enum<SpatialAxis>(path, meta_value(bundle, "meta.spatial_axis"), 1);
  cfg.pe_kind = decode_enum<PEKind>(path, meta_value(bundle, "meta.pe_kind"), 3);
  cfg.center_normalize = meta_value(bundle, "meta.center_normalize") != 0.0;
  cfg.teacher_mode = decode_enum<TeacherMode>(path, meta_value(bundle, "meta.teacher_mode"), 1);
  cfg.ignore_index = static_cast<std::int32_t>(meta_value(bundle, "meta.ignore_index"));
  cfg.validate();

  auto take = [&](const std::string& name) {
    Tensor t = bundle.get(name);
    t.set_requires_grad(true);
    return t;
  };
  ckpt.model.encoder.w1 = take("encoder.w1");
  ckpt.model.encoder.b1 = take("encoder.b1");
  ckpt.model.encoder.w2 = take("encoder.w2");
  ckpt.model.encoder.b2 = take("encoder.b2");
  ckpt.model.protos.s_proto = take("head.s_proto");
  if (ckpt.mode == HeadMode::kSSA) {
    ckpt.model.protos.p_proto = take("head.p_proto");
    ckpt.model.protos.phi_s_w = take("head.phi_s_w");
    ckpt.model.protos.phi_s_b = take("head.phi_s_b");
    ckpt.model.protos.phi_p_w = take("head.phi_p_w");
    ckpt.model.protos.phi_p_b = take("head.phi_p_b");
    if (cfg.pe_kind == PEKind::kConditional) ckpt.model.protos.pe_kernel = take("head.pe_kernel");
    if (cfg.pe_kind == PEKind::kLearnable) ckpt.model.protos.pe_table = take("head.pe_table");
  }
  const Shape expect = {cfg.num_classes, cfg.embed_dim};
  if (ckpt.model.protos.s_proto.shape() != expect)
    throw FormatError(path, 0, "prototype shape " + shape_str(ckpt.model.protos.s_proto.shape()) +
                                   " does not match config " + shape_str(expect));
  return ckpt;
}

namespace {

std::string fnum(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string report_json(const EvalReport& report) {
  std::string out = "{\"iteration\":" + std::to_string(report.iteration);
  out += ",\"miou\":" + fnum(report.miou);
  out += ",\"per_class_iou\":[";
  for (std::size_t i = 0; i < report.per_class_iou.size(); ++i) {
    if (i) out += ",";
    out += fnum(report.per_class_iou[i]);
  }
  out += "],\"loss\":{\"l_c\":" + fnum(report.loss.l_c);
  out += ",\"l_g\":" + fnum(report.loss.l_g);
  out += ",\"l_rd\":" + fnum(report.loss.l_rd);
  out += ",\"l_sd\":" + fnum(report.loss.l_sd);
  out += ",\"l_pd\":" + fnum(report.loss.l_pd);
  out += ",\"total\":" + fnum(report.loss.total);
  out += "}}";
  return out;
}

SampleForward forward_sample(const Model& model, const HeadConfig& cfg, HeadMode mode,
                             const SynthSample& sample) {
  SampleForward fw;
  fw.features = encode(sample.image, model.encoder);
  if (mode == HeadMode::kVanilla) {
    fw.student.coarse = vanilla_forward(fw.features, model.protos.s_proto);
  } else {
    fw.student = ssa_forward(fw.features, model.protos, cfg);
    fw.teacher = teacher_forward(fw.features, sample.labels, model.protos, cfg, fw.student);
  }
  return fw;
}

namespace {

LossStats vanilla_loss(const Tensor& coarse, const LabelMask& labels, const HeadConfig& cfg) {
  LossStats s;
  bool all_ignored = false;
  const double ce = ce_loss(coarse, labels, cfg.ignore_index, &all_ignored).value();
  const double dice = dice_loss(coarse, labels, cfg.ignore_index).value();
  s.l_c = ce + dice;
  s.total = s.l_c;
  return s;
}

}  // namespace

EvalReport evaluate_split(const Model& model, const HeadConfig& cfg, HeadMode mode,
                          const std::vector<SynthSample>& samples, std::size_t iteration) {
  GradToggle no_grad(trainable_params(model, cfg, mode));
  EvalReport report;
  report.iteration = iteration;
  IouAccumulator acc(cfg.num_classes, cfg.ignore_index);
  LossStats sums;
  for (const SynthSample& sample : samples) {
    SampleForward fw = forward_sample(model, cfg, mode, sample);
    const Tensor& logits = (mode == HeadMode::kSSA) ? fw.student.fused : fw.student.coarse;
    acc.add(predict_labels(logits), sample.labels);
    if (mode == HeadMode::kSSA) {
      LossBreakdown bd = total_loss(fw.student, fw.teacher, sample.labels, cfg);
      sums.l_c += bd.l_c.value();
      sums.l_g += bd.l_g.value();
      sums.l_rd += bd.l_rd.value();
      sums.l_sd += bd.l_sd.value();
      sums.l_pd += bd.l_pd.value();
      sums.total += bd.total.value();
    } else {
      const LossStats s = vanilla_loss(fw.student.coarse, sample.labels, cfg);
      sums.l_c += s.l_c;
      sums.total += s.total;
    }
  }
  if (!samples.empty()) {
    const double n = static_cast<double>(samples.size());
    sums.l_c /= n;
    sums.l_g /= n;
    sums.l_rd /= n;
    sums.l_sd /= n;
    sums.l_pd /= n;
    sums.total /= n;
  }
  report.loss = sums;
  report.per_class_iou = acc.per_class();
  report.miou = acc.miou();
  return report;
}

TrainResult train(Model& model, const HeadConfig& hcfg, const TrainConfig& tcfg,
                  const std::vector<SynthSample>& train_split,
                  const std::vector<SynthSample>& eval_split, std::ostream* report_out) {
  if (train_split.empty()) throw std::invalid_argument("train: empty training split");
  if (tcfg.batch_size < 1 || tcfg.eval_interval < 1)
    throw std::invalid_argument("train: batch_size and eval_interval must be positive");
  hcfg.validate();

  auto params = trainable_params(model, hcfg, tcfg.head_mode);
  Optimizer opt(tcfg.optim, params);
  SplitMix64 batch_rng(mix64(tcfg.seed, 3));

  TrainResult result;
  auto emit = [&](std::size_t iteration) {
    EvalReport rep = evaluate_split(model, hcfg, tcfg.head_mode, eval_split, iteration);
    if (report_out) (*report_out) << report_json(rep) << "\n" << std::flush;
    result.reports.push_back(std::move(rep));
  };

  for (std::size_t it = 0; it < tcfg.iterations; ++it) {
    std::vector<const SynthSample*> batch;
    batch.reserve(tcfg.batch_size);
    for (std::size_t b = 0; b < tcfg.batch_size; ++b)
      batch.push_back(&train_split[batch_rng.below(train_split.size())]);

    opt.zero_grad();
    Tensor batch_total;
    if (tcfg.head_mode == HeadMode::kSSA) {
      std::vector<SampleForward> fws;
      fws.reserve(batch.size());
      for (const SynthSample* s : batch) fws.push_back(forward_sample(model, hcfg, tcfg.head_mode, *s));

      std::vector<Tensor> centers;
      std::vector<std::vector<double>> counts;
      centers.reserve(fws.size());
      counts.reserve(fws.size());
      for (const SampleForward& fw : fws) {
        centers.push_back(detach(fw.teacher.s_center));
        counts.push_back(fw.teacher.guide_counts);
      }
      Tensor batch_center = batch_semantic_center(centers, counts);
      Tensor sd_target = detach(adapt_semantic(batch_center, model.protos.s_proto,
                                               model.protos.phi_s_w, model.protos.phi_s_b));

      Tensor sum = Tensor::scalar(0.0);
      for (std::size_t i = 0; i < fws.size(); ++i) {
        LossBreakdown bd = total_loss(fws[i].student, fws[i].teacher, batch[i]->labels, hcfg,
                                      &sd_target);
        sum = add(sum, bd.total);
      }
      batch_total = mul_scalar(sum, 1.0 / static_cast<double>(batch.size()));
    } else {
      Tensor sum = Tensor::scalar(0.0);
      for (const SynthSample* s : batch) {
        Tensor coarse = vanilla_forward(encode(s->image, model.encoder), model.protos.s_proto);
        Tensor l = add(ce_loss(coarse, s->labels, hcfg.ignore_index),
                       dice_loss(coarse, s->labels, hcfg.ignore_index));
        sum = add(sum, l);
      }
      batch_total = mul_scalar(sum, 1.0 / static_cast<double>(batch.size()));
    }

    if (!std::isfinite(batch_total.value())) {
      result.diverged = true;
      result.diagnostic =
          "non-finite batch loss at iteration " + std::to_string(it + 1);
      break;
    }
    backward(batch_total);
    try {
      opt.step();
    } catch (const NumericError& e) {
      result.diverged = true;
      result.diagnostic = std::string(e.what()) + " at iteration " + std::to_string(it + 1);
      break;
    }
    result.completed_iterations = it + 1;
    if ((it + 1) % tcfg.eval_interval == 0 || it + 1 == tcfg.iterations) emit(it + 1);
  }
  return result;
}

std::pair<std::vector<SynthSample>, std::vector<SynthSample>> split_dataset(
    const std::vector<SynthSample>& samples) {
  std::pair<std::vector<SynthSample>, std::vector<SynthSample>> out;
  for (const SynthSample& s : samples) {
    if (is_eval_sample(s.seed))
      out.second.push_back(s);
    else
      out.first.push_back(s);
  }
  return out;
}

GradCheckReport grad_check(Model& model, const HeadConfig& cfg, HeadMode mode,
                           const SynthSample& sample, double fd_eps) {
  auto params = trainable_params(model, cfg, mode);

  // The distillation targets are constants of the objective: the backward
  // pass never differentiates through them, so the perturbed evaluations
  // must hold them at their base-point values as well. The teacher's own
  // task loss keeps its live gradient path and is differenced normally.
  DistillTargets frozen;
  if (mode == HeadMode::kSSA) {
    SampleForward base = forward_sample(model, cfg, mode, sample);
    frozen.response = detach(base.teacher.fused);
    frozen.semantic = detach(base.teacher.s_proto);
    frozen.spatial = detach(base.teacher.p_proto);
  }

  auto loss_value = [&]() -> double {
    SampleForward fw = forward_sample(model, cfg, mode, sample);
    if (mode == HeadMode::kSSA)
      return total_loss(fw.student, fw.teacher, sample.labels, cfg, nullptr, &frozen)
          .total.value();
    return vanilla_loss(fw.student.coarse, sample.labels, cfg).total;
  };

  for (auto& [name, p] : params) p.zero_grad();
  {
    SampleForward fw = forward_sample(model, cfg, mode, sample);
    Tensor total = (mode == HeadMode::kSSA)
                       ? total_loss(fw.student, fw.teacher, sample.labels, cfg).total
                       : add(ce_loss(fw.student.coarse, sample.labels, cfg.ignore_index),
                             dice_loss(fw.student.coarse, sample.labels, cfg.ignore_index));
    backward(total);
  }
  std::unordered_map<std::string, Eigen::ArrayXd> analytic;
  for (auto& [name, p] : params)
    analytic[name] = p.has_grad() ? p.grad_array()
                                  : Eigen::ArrayXd::Zero(p.array().size());

  GradCheckReport report;
  GradToggle no_grad(params);
  for (auto& [name, p] : params) {
    const Eigen::ArrayXd& a = analytic[name];
    double param_worst = 0.0;
    for (Eigen::Index i = 0; i < p.array().size(); ++i) {
      const double orig = p.array()[i];
      p.array()[i] = orig + fd_eps;
      const double up = loss_value();
      p.array()[i] = orig - fd_eps;
      const double down = loss_value();
      p.array()[i] = orig;
      const double numeric = (up - down) / (2.0 * fd_eps);
      const double denom = std::max({std::abs(a[i]), std::abs(numeric), 1e-6});
      const double rel = std::abs(a[i] - numeric) / denom;
      ++report.coords_checked;
      param_worst = std::max(param_worst, rel);
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_index = static_cast<std::size_t>(i);
        report.worst_analytic = a[i];
        report.worst_numeric = numeric;
      }
    }
    report.per_param.emplace_back(name, param_worst);
  }
  return report;
}

}  // namespace ssa
