#include "ssa/head.hpp"

#include <cmath>
#include <stdexcept>

namespace ssa {

namespace {

void fill_uniform(Tensor& t, SplitMix64& rng, double bound) {
  for (Eigen::Index i = 0; i < t.array().size(); ++i)
    t.array()[i] = rng.uniform(-bound, bound);
}

void check_features(const char* op, const Tensor& sf) {
  if (sf.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": features must be [H, W, D], got " +
                                shape_str(sf.shape()));
}

}  // namespace

const char* to_string(PEKind v) {
  switch (v) {
    case PEKind::kConditional: return "conditional";
    case PEKind::kSinusoidal: return "sinusoidal";
    case PEKind::kLearnable: return "learnable";
    case PEKind::kNone: return "none";
  }
  return "?";
}

const char* to_string(SpatialAxis v) {
  return v == SpatialAxis::kSpatial ? "spatial" : "channel";
}

const char* to_string(TeacherMode v) {
  return v == TeacherMode::kGroundTruth ? "gt" : "self";
}

const char* to_string(HeadMode v) { return v == HeadMode::kVanilla ? "vanilla" : "ssa"; }

void HeadConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("config: num_classes must be at least 2");
  if (embed_dim < 1) throw std::invalid_argument("config: embed_dim must be positive");
  if (edge_size < 1) throw std::invalid_argument("config: edge_size must be at least 1");
  if (lambda_r < 0.0 || lambda_s < 0.0 || lambda_p < 0.0)
    throw std::invalid_argument("config: loss weights must be non-negative");
  if (ignore_index >= 0 && static_cast<std::size_t>(ignore_index) < num_classes)
    throw std::invalid_argument("config: ignore_index collides with a class index");
}

PrototypeSet PrototypeSet::init(const HeadConfig& cfg, std::size_t height, std::size_t width,
                                SplitMix64& rng) {
  cfg.validate();
  const std::size_t k = cfg.num_classes, d = cfg.embed_dim;
  PrototypeSet p;
  const double proto_bound = 1.0 / std::sqrt(static_cast<double>(d));
  const double phi_bound = 1.0 / std::sqrt(static_cast<double>(2 * d));
  p.s_proto = Tensor::zeros({k, d}, true);
  fill_uniform(p.s_proto, rng, proto_bound);
  p.p_proto = Tensor::zeros({k, d}, true);
  fill_uniform(p.p_proto, rng, proto_bound);
  p.phi_s_w = Tensor::zeros({2 * d, d}, true);
  fill_uniform(p.phi_s_w, rng, phi_bound);
  p.phi_s_b = Tensor::zeros({d}, true);
  p.phi_p_w = Tensor::zeros({2 * d, d}, true);
  fill_uniform(p.phi_p_w, rng, phi_bound);
  p.phi_p_b = Tensor::zeros({d}, true);
  if (cfg.pe_kind == PEKind::kConditional) {
    p.pe_kernel = Tensor::zeros({3, 3, d}, true);
    fill_uniform(p.pe_kernel, rng, 1.0 / 3.0);
  } else if (cfg.pe_kind == PEKind::kLearnable) {
    p.pe_table = Tensor::zeros({height * width, d}, true);
    fill_uniform(p.pe_table, rng, proto_bound);
  }
  return p;
}

std::vector<std::pair<std::string, Tensor>> PrototypeSet::named_params(PEKind kind) const {
  std::vector<std::pair<std::string, Tensor>> out = {
      {"head.s_proto", s_proto}, {"head.p_proto", p_proto},
      {"head.phi_s_w", phi_s_w}, {"head.phi_s_b", phi_s_b},
      {"head.phi_p_w", phi_p_w}, {"head.phi_p_b", phi_p_b},
  };
  if (kind == PEKind::kConditional) out.emplace_back("head.pe_kernel", pe_kernel);
  if (kind == PEKind::kLearnable) out.emplace_back("head.pe_table", pe_table);
  return out;
}

Tensor vanilla_forward(const Tensor& sf, const Tensor& s_proto) {
  check_features("vanilla_forward", sf);
  const std::size_t h = sf.shape()[0], w = sf.shape()[1], d = sf.shape()[2];
  if (s_proto.rank() != 2 || s_proto.shape()[1] != d)
    throw std::invalid_argument("vanilla_forward: prototypes " + shape_str(s_proto.shape()) +
                                " do not match feature depth " + std::to_string(d));
  const std::size_t k = s_proto.shape()[0];
  Tensor logits = matmul(reshape(sf, {h * w, d}), transpose(s_proto));
  return reshape(logits, {h, w, k});
}

Tensor make_sinusoidal_table(std::size_t height, std::size_t width, std::size_t dim) {
  const std::size_t dy = (dim + 1) / 2;
  const std::size_t dx = dim - dy;
  Tensor table = Tensor::zeros({height, width, dim});
  double* out = table.data();
  for (std::size_t h = 0; h < height; ++h) {
    for (std::size_t w = 0; w < width; ++w) {
      double* cell = out + (h * width + w) * dim;
      for (std::size_t i = 0; i < dy; ++i) {
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) /
                                                   static_cast<double>(dy));
        cell[i] = (i % 2 == 0) ? std::sin(static_cast<double>(h) * omega)
                               : std::cos(static_cast<double>(h) * omega);
      }
      for (std::size_t j = 0; j < dx; ++j) {
        const double omega = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) /
                                                   static_cast<double>(dx));
        cell[dy + j] = (j % 2 == 0) ? std::sin(static_cast<double>(w) * omega)
                                    : std::cos(static_cast<double>(w) * omega);
      }
    }
  }
  return table;
}

Tensor position_encode(const Tensor& sf, const PrototypeSet& protos, PEKind kind) {
  check_features("position_encode", sf);
  const std::size_t h = sf.shape()[0], w = sf.shape()[1], d = sf.shape()[2];
  switch (kind) {
    case PEKind::kConditional: {
      if (!protos.pe_kernel.defined())
        throw std::invalid_argument("position_encode: conditional encoding needs pe_kernel");
      return add(depthwise_conv3x3(sf, protos.pe_kernel), sf);
    }
    case PEKind::kSinusoidal:
      return make_sinusoidal_table(h, w, d);
    case PEKind::kLearnable: {
      if (!protos.pe_table.defined())
        throw std::invalid_argument("position_encode: learnable encoding needs pe_table");
      if (protos.pe_table.rank() != 2 || protos.pe_table.shape()[0] != h * w ||
          protos.pe_table.shape()[1] != d)
        throw std::invalid_argument("position_encode: pe_table " +
                                    shape_str(protos.pe_table.shape()) + " does not match [" +
                                    std::to_string(h * w) + ", " + std::to_string(d) + "]");
      return reshape(protos.pe_table, {h, w, d});
    }
    case PEKind::kNone:
      return Tensor::zeros({h, w, d});
  }
  throw std::invalid_argument("position_encode: unknown encoding kind");
}

Tensor semantic_center(const Tensor& coarse, const Tensor& sf, bool normalize) {
  check_features("semantic_center", sf);
  const std::size_t h = sf.shape()[0], w = sf.shape()[1], d = sf.shape()[2];
  const std::size_t k = coarse.shape()[2];
  Tensor weights = reshape(softmax(coarse, 2), {h * w, k});
  Tensor raw = matmul(transpose(weights), reshape(sf, {h * w, d}));
  if (!normalize) return raw;
  Tensor denom = add_scalar(reduce_sum(weights, 0), kEps);
  return div_rows(raw, denom);
}

Tensor spatial_center(const Tensor& coarse, const Tensor& pos, SpatialAxis axis) {
  check_features("spatial_center", pos);
  const std::size_t h = pos.shape()[0], w = pos.shape()[1], d = pos.shape()[2];
  const std::size_t k = coarse.shape()[2];
  Tensor weights;
  if (axis == SpatialAxis::kSpatial) {
    weights = softmax(transpose(reshape(coarse, {h * w, k})), 1);  // [K, HW]
  } else {
    weights = transpose(reshape(softmax(coarse, 2), {h * w, k}));
  }
  return matmul(weights, reshape(pos, {h * w, d}));
}

Tensor adapt_semantic(const Tensor& center, const Tensor& s_proto, const Tensor& w,
                      const Tensor& b) {
  return linear_1x1(concat_channel(center, s_proto), w, b);
}

Tensor adapt_spatial(const Tensor& center, const Tensor& p_proto, const Tensor& w,
                     const Tensor& b) {
  return linear_1x1(concat_channel(center, p_proto), w, b);
}

HeadOutput ssa_forward(const Tensor& sf, const PrototypeSet& protos, const HeadConfig& cfg) {
  check_features("ssa_forward", sf);
  const std::size_t h = sf.shape()[0], w = sf.shape()[1], d = sf.shape()[2];
  const std::size_t k = cfg.num_classes;
  HeadOutput out;
  out.coarse = vanilla_forward(sf, protos.s_proto);
  out.pos = position_encode(sf, protos, cfg.pe_kind);
  out.s_center = semantic_center(out.coarse, sf, cfg.center_normalize);
  out.s_proto = adapt_semantic(out.s_center, protos.s_proto, protos.phi_s_w, protos.phi_s_b);
  out.p_center = spatial_center(out.coarse, out.pos, cfg.spatial_axis);
  out.p_proto = adapt_spatial(out.p_center, protos.p_proto, protos.phi_p_w, protos.phi_p_b);
  Tensor mixed = reshape(add(sf, out.pos), {h * w, d});
  Tensor proto = add(out.s_proto, out.p_proto);
  out.fused = reshape(matmul(mixed, transpose(proto)), {h, w, k});
  return out;
}

HeadOutput teacher_forward(const Tensor& sf, const LabelMask& mg, const PrototypeSet& protos,
                           const HeadConfig& cfg, const HeadOutput& student) {
  check_features("teacher_forward", sf);
  const std::size_t h = sf.shape()[0], w = sf.shape()[1], d = sf.shape()[2];
  const std::size_t k = cfg.num_classes;
  if (mg.height != h || mg.width != w)
    throw std::invalid_argument("teacher_forward: mask " + std::to_string(mg.height) + "x" +
                                std::to_string(mg.width) + " does not match features " +
                                std::to_string(h) + "x" + std::to_string(w));
  const std::size_t hw = h * w;

  // Guidance weights [HW, K]: one-hot labels, or the student's coarse
  // probabilities taken as constants. Ignored pixels get an all-zero row.
  Tensor guide = Tensor::zeros({hw, k});
  double* g = guide.data();
  if (cfg.teacher_mode == TeacherMode::kGroundTruth) {
    for (std::size_t p = 0; p < hw; ++p) {
      const std::int32_t label = mg.labels[p];
      if (label == cfg.ignore_index) continue;
      if (label < 0 || static_cast<std::size_t>(label) >= k)
        throw std::invalid_argument("teacher_forward: label " + std::to_string(label) +
                                    " outside [0, " + std::to_string(k) + ")");
      g[p * k + static_cast<std::size_t>(label)] = 1.0;
    }
  } else {
    Tensor probs = softmax(detach(student.coarse), 2);
    const double* pv = probs.data();
    for (std::size_t p = 0; p < hw; ++p) {
      if (mg.labels[p] == cfg.ignore_index) continue;
      for (std::size_t c = 0; c < k; ++c) g[p * k + c] = pv[p * k + c];
    }
  }

  std::vector<double> counts(k, 0.0);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < k; ++c) counts[c] += g[p * k + c];

  HeadOutput out;
  out.guide_counts = counts;
  out.coarse = student.coarse;
  out.pos = student.pos;

  Tensor raw = matmul(transpose(guide), reshape(sf, {hw, d}));  // [K, D]
  if (cfg.center_normalize) {
    Tensor denom = Tensor::zeros({k});
    for (std::size_t c = 0; c < k; ++c) denom.array()[static_cast<Eigen::Index>(c)] = counts[c] + kEps;
    out.s_center = div_rows(raw, denom);
  } else {
    out.s_center = raw;
  }

  // Spatial weights: each class row is its guidance column normalized to unit
  // mass, so present classes average uniformly and absent ones stay zero.
  Tensor spatial = Tensor::zeros({k, hw});
  double* sp = spatial.data();
  for (std::size_t c = 0; c < k; ++c) {
    if (counts[c] <= kEps) continue;
    for (std::size_t p = 0; p < hw; ++p) sp[c * hw + p] = g[p * k + c] / counts[c];
  }
  out.p_center = matmul(spatial, reshape(out.pos, {hw, d}));

  out.s_proto = adapt_semantic(out.s_center, protos.s_proto, protos.phi_s_w, protos.phi_s_b);
  out.p_proto = adapt_spatial(out.p_center, protos.p_proto, protos.phi_p_w, protos.phi_p_b);
  Tensor mixed = reshape(add(sf, out.pos), {hw, d});
  Tensor proto = add(out.s_proto, out.p_proto);
  out.fused = reshape(matmul(mixed, transpose(proto)), {h, w, k});
  return out;
}

std::vector<std::size_t> class_counts(const LabelMask& mg, std::size_t num_classes,
                                      std::int32_t ignore_index) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::int32_t label : mg.labels) {
    if (label == ignore_index) continue;
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
      throw std::invalid_argument("class_counts: label " + std::to_string(label) +
                                  " outside [0, " + std::to_string(num_classes) + ")");
    ++counts[static_cast<std::size_t>(label)];
  }
  return counts;
}

Tensor batch_semantic_center(const std::vector<Tensor>& centers,
                             const std::vector<std::vector<double>>& guide_counts) {
  if (centers.empty() || centers.size() != guide_counts.size())
    throw std::invalid_argument("batch_semantic_center: need one count vector per center");
  const std::size_t k = centers[0].shape()[0], d = centers[0].shape()[1];
  Tensor out = Tensor::zeros({k, d});
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t present = 0;
    for (std::size_t i = 0; i < centers.size(); ++i) {
      if (guide_counts[i][c] <= kEps) continue;
      ++present;
      for (std::size_t j = 0; j < d; ++j)
        out.array()[static_cast<Eigen::Index>(c * d + j)] += centers[i].at(c, j);
    }
    if (present > 1)
      for (std::size_t j = 0; j < d; ++j)
        out.array()[static_cast<Eigen::Index>(c * d + j)] /= static_cast<double>(present);
  }
  return out;
}

}  // namespace ssa
