// Training loop, cross-validation and hold-out protocols, run reports and
// checkpoint-based inference.
//
// Output directory layout (every file optional when no directory is given):
//   report.json                 run summary, config echo, per-fold metrics
//   metrics.jsonl               one {fold, epoch, dice, focal, nll, combined, dsc, c_index} line per epoch
//   checkpoints/fold<k>/best    parameters at the best validation C-index
//   checkpoints/fold<k>/last    parameters after the final epoch
//   predictions/fold<k>.csv     validation risks and pmfs (id, risk, pmf_0..pmf_{K-1})
#pragma once

#include "segsurv/baselines.hpp"
#include "segsurv/model.hpp"
#include "segsurv/optim.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace segsurv {

struct TrainConfig {
  int epochs = 50;
  Index batch_size = 16;
  double lr = 4e-3;
  double weight_decay = 1e-5;
  int decay_epoch = 35;      // last epoch (1-based) at the initial rate
  double decay_factor = 10;
  double beta = 0.3;
  std::optional<std::uint64_t> seed;
  int folds = 5;
  double holdout_ratio = 0.8;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double momentum = 0.9;
  bool double_precision = false;
  double threshold = 0.5;    // foreground probability cut for masks
  bool baseline = true;      // fit an EHR-only CoxPH on every training split
  ModelConfig model;
  LossConfig loss;           // loss.beta is overwritten by beta

  void validate() const;
  /// Learning rate for a 1-based epoch: lr for e <= decay_epoch, lr / decay_factor after.
  double lr_at(int epoch) const;
  std::uint64_t require_seed() const;

  nlohmann::json to_json() const;
  /// Keys mirror the field names; "model" nests a ModelConfig. Unknown keys are errors.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EvalMetrics {
  double dice = 0, focal = 0, nll = 0, combined = 0;
  double dsc = 0;
  std::optional<double> c_index;  // empty when no pair is comparable
  long long comparable_pairs = 0;
  std::vector<std::string> ids;
  Eigen::VectorXd risk;
  Eigen::MatrixXd pmf;
};

/// Everything needed to run inference: network, EHR encoding and time bins.
template <typename S>
struct TrainedModel {
  std::unique_ptr<Model<S>> model;
  EhrEncoder encoder;
  std::vector<double> edges;
  double threshold = 0.5;
};

/// Evaluation-mode metrics of a trained model on subjects.
template <typename S>
EvalMetrics evaluate(const TrainedModel<S>& m, const std::vector<const Subject*>& subjects, const LossConfig& loss,
                     Index batch_size);

/// Per-subject masks (0/1) from evaluation-mode logits.
template <typename S>
std::vector<Volume> predict_masks(const TrainedModel<S>& m, const std::vector<const Subject*>& subjects,
                                  Index batch_size);

using EpochSink = std::function<void(const nlohmann::json&)>;

struct FoldSummary {
  int fold = 0;
  Index n_train = 0, n_val = 0;
  EvalMetrics final;          // validation metrics after the last epoch
  int best_epoch = 0;         // epoch with the highest validation C-index
  std::optional<double> best_c_index;
  std::optional<double> coxph_c_index;
  std::vector<double> train_loss;  // mean combined training loss per epoch
  std::string checkpoint;
};

/// Trains one model on `train`, scoring `val` after each epoch (the training
/// set itself when `val` is empty). Writes checkpoints under ckpt_dir when
/// non-empty and forwards each epoch's metrics line to `sink`.
/// The EHR encoder is fitted on `train` only and the model's EHR input width
/// follows the schema.
template <typename S>
TrainedModel<S> train_model(const std::vector<const Subject*>& train, const std::vector<const Subject*>& val,
                            const EhrSchema& schema, const TrainConfig& cfg, int fold, const EpochSink& sink,
                            const std::filesystem::path& ckpt_dir, FoldSummary* summary);

/// Seeded partition of 0..n-1 into k folds whose sizes differ by at most one.
std::vector<std::vector<size_t>> kfold_partition(size_t n, int k, std::uint64_t seed);
/// Seeded split into round(ratio·n) training and the remaining test indices.
std::pair<std::vector<size_t>, std::vector<size_t>> holdout_split(size_t n, double ratio, std::uint64_t seed);

/// Fits the model on every subject and reports training-set metrics.
nlohmann::json run_train(const std::vector<Subject>& data, const EhrSchema& schema, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir);
nlohmann::json run_kfold(const std::vector<Subject>& data, const EhrSchema& schema, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir);
nlohmann::json run_holdout(const std::vector<Subject>& data, const EhrSchema& schema, const TrainConfig& cfg,
                           const std::filesystem::path& out_dir);

/// EHR-only CoxPH, linear MTLR and deep MTLR evaluated on the same seeded folds.
nlohmann::json run_baselines(const std::vector<Subject>& data, const EhrSchema& schema, const TrainConfig& cfg,
                             const MtlrFitConfig& mtlr, const std::filesystem::path& out_dir);

template <typename S>
void save_trained(const TrainedModel<S>& m, const std::filesystem::path& dir, const nlohmann::json& extra = {});
template <typename S>
TrainedModel<S> load_trained(const std::filesystem::path& dir);

struct Prediction {
  std::string id;
  Volume mask;
  double risk = 0;
  Eigen::VectorXd pmf;
};

/// Deterministic inference from a checkpoint directory, in the checkpoint's precision.
std::vector<Prediction> predict_from_checkpoint(const std::filesystem::path& checkpoint,
                                                const std::vector<Subject>& subjects);

void write_risk_csv(const std::filesystem::path& path, const std::vector<std::string>& ids,
                    const Eigen::VectorXd& risk, const Eigen::MatrixXd& pmf);

}  // namespace segsurv
