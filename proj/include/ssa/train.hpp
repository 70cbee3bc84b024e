#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "ssa/head.hpp"
#include "ssa/losses.hpp"
#include "ssa/optim.hpp"
#include "ssa/synth.hpp"
#include "ssa/tensor.hpp"

namespace ssa {

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t iterations = 2000;
  std::size_t eval_interval = 100;
  std::uint64_t seed = 1;
  HeadMode head_mode = HeadMode::kSSA;
  OptimConfig optim;
};

struct Model {
  EncoderParams encoder;
  PrototypeSet protos;
};

// Encoder and head draw from separate sub-streams, so two head variants
// initialized from the same seed share their encoder weights.
Model init_model(const HeadConfig& cfg, std::size_t height, std::size_t width,
                 std::uint64_t seed);

std::vector<std::pair<std::string, Tensor>> trainable_params(const Model& model,
                                                             const HeadConfig& cfg,
                                                             HeadMode mode);

struct Checkpoint {
  Model model;
  HeadConfig head_cfg;
  HeadMode mode = HeadMode::kSSA;
  std::size_t iteration = 0;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

struct LossStats {
  double l_c = 0.0, l_g = 0.0, l_rd = 0.0, l_sd = 0.0, l_pd = 0.0, total = 0.0;
};

struct EvalReport {
  std::size_t iteration = 0;
  std::vector<double> per_class_iou;  // NaN marks classes with empty union
  double miou = 0.0;
  LossStats loss;
};

// Canonical single-line JSON with round-trippable floats; equal reports
// format to identical bytes.
std::string report_json(const EvalReport& report);

// Forward pass for one sample under either head mode. The teacher pass runs
// only in SSA mode.
struct SampleForward {
  Tensor features;
  HeadOutput student;
  HeadOutput teacher;
};
SampleForward forward_sample(const Model& model, const HeadConfig& cfg, HeadMode mode,
                             const SynthSample& sample);

// Metrics and component-wise mean loss over a sample list, without touching
// gradients or parameters.
EvalReport evaluate_split(const Model& model, const HeadConfig& cfg, HeadMode mode,
                          const std::vector<SynthSample>& samples, std::size_t iteration);

struct TrainResult {
  std::vector<EvalReport> reports;
  std::size_t completed_iterations = 0;
  bool diverged = false;
  std::string diagnostic;
};

// Seeded with-replacement batches; evaluates every eval_interval iterations
// and after the last one. A non-finite batch loss or gradient stops training
// with the reports produced so far. Report lines stream to report_out as
// they are produced when it is non-null.
TrainResult train(Model& model, const HeadConfig& hcfg, const TrainConfig& tcfg,
                  const std::vector<SynthSample>& train_split,
                  const std::vector<SynthSample>& eval_split, std::ostream* report_out);

std::pair<std::vector<SynthSample>, std::vector<SynthSample>> split_dataset(
    const std::vector<SynthSample>& samples);

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  std::vector<std::pair<std::string, double>> per_param;  // max rel err per tensor
};

// Central finite differences over every coordinate of every trainable
// parameter against one reverse pass. Relative error uses
// |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport grad_check(Model& model, const HeadConfig& cfg, HeadMode mode,
                           const SynthSample& sample, double fd_eps);

}  // namespace ssa
