#pragma once

// MIL aggregators and prediction heads.
//
// Every architecture first projects patches, h_i = relu(W f_i + b), then pools
// them into a slide embedding s. The head MLP maps s to one scalar: a logit
// (classification, y_hat = sigmoid) or a log-hazard (survival, h = exp).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bagforge/autodiff.hpp"
#include "bagforge/bag.hpp"
#include "bagforge/kvdoc.hpp"
#include "bagforge/rng.hpp"

namespace bagforge {

enum class Arch { mean, max, abmil, gated_abmil, varmil, clam_sb, clam_mb, simple_transmil };
enum class Task { classification, survival };

std::string_view arch_name(Arch a);
Arch parse_arch(std::string_view name);
std::string_view task_name(Task t);
Task parse_task(std::string_view name);
bool arch_has_instance_branch(Arch a);

struct MilConfig {
  Arch arch = Arch::abmil;
  int input_dim = 0;
  int embed_dim = 256;
  int attn_dim = 128;
  /// Applied to projected patches during training only.
  double dropout = 0.25;
  std::vector<int> head_hidden_dims{128};
  Task task = Task::classification;
  std::uint64_t init_seed = 0;
  /// clam_mb attention branches (one per class).
  int n_branches = 2;
  /// simple_transmil attention heads.
  int n_heads = 4;
  /// clam_* auxiliary instance-loss weight in [0, 1].
  double instance_loss_weight = 0.3;
  /// clam_* top-k / bottom-k patches pseudo-labeled per slide.
  int instance_k = 8;

  void validate() const;
  void write(KvDoc& doc, const std::string& prefix = "model.") const;
  static MilConfig read(const KvDoc& doc, const std::string& prefix = "model.");
  static MilConfig read(const KvDoc& doc, const std::string& prefix, MilConfig defaults);
};

struct Prediction {
  std::string slide_id;
  std::optional<double> y_hat;
  /// Raw head output for classification; ranks without sigmoid saturation.
  std::optional<double> logit;
  std::optional<double> log_hazard;
  std::optional<double> hazard;
  std::vector<double> attention;
  std::optional<std::vector<double>> instance_logits;

  /// Higher = more likely positive / higher risk.
  double score() const { return logit ? *logit : y_hat ? *y_hat : log_hazard.value_or(0.0); }
};

struct InstanceTargets {
  std::vector<Eigen::Index> indices;
  std::vector<double> targets;
  bool clamped = false;
};

/// Pseudo-labels for the CLAM instance branch: the top `n_pos` patches by
/// attention get the slide label, the bottom `n_neg` get the opposite one.
/// Patches are ranked by descending attention, ties by ascending index.
/// When n_pos + n_neg exceeds k the counts are clamped and `clamped` is set.
InstanceTargets clam_instance_targets(std::span<const double> attention, int n_pos, int n_neg, int slide_label);

class MilModel {
 public:
  struct Forward {
    /// 1x1 logit or log-hazard.
    ad::Var output;
    /// 1 x embedding width (clam_mb: the last branch's embedding).
    ad::Var embedding;
    /// Reported patch attention, 1 x k, sums to 1.
    ad::RowVector attention;
    /// Per-branch attention, branches x k (attention archs only).
    ad::Matrix branch_attention;
    /// k x 1 instance logits (clam_* only).
    std::optional<ad::Var> instance_logits;
  };

  static MilModel init(const MilConfig& config);

  const MilConfig& config() const { return config_; }
  ad::ParameterSet& params() { return params_; }
  const ad::ParameterSet& params() const { return params_; }

  /// Records the forward pass on `tape`. `dropout_rng` enables training-mode
  /// dropout; pass nullptr for inference.
  Forward forward(ad::Tape& tape, const ad::Matrix& features, Rng* dropout_rng = nullptr) const;

  /// Slide embedding and attention, inference mode.
  std::pair<ad::RowVector, std::vector<double>> aggregate(const EmbeddingBag& bag) const;
  Prediction predict(const EmbeddingBag& bag) const;

  void save(const std::filesystem::path& path) const;
  static MilModel load(const std::filesystem::path& path);
  std::vector<std::uint8_t> encode() const;
  static MilModel decode(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

 private:
  MilModel() = default;
  ad::Var head(ad::Tape& tape, ad::Var s, const std::string& prefix) const;
  void check_input(const ad::Matrix& features) const;

  MilConfig config_;
  ad::ParameterSet params_;
};

/// Bag features promoted to 64-bit.
ad::Matrix to_matrix(const FeatureMatrix& features);

}  // namespace bagforge
