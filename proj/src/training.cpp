#include "segsurv/training.hpp"

#include "segsurv/checkpoint.hpp"
#include "segsurv/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace segsurv {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train config: epochs must be positive");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(lr > 0)) throw std::invalid_argument("train config: lr must be positive");
  if (weight_decay < 0) throw std::invalid_argument("train config: weight_decay must be >= 0");
  if (decay_epoch < 1 || decay_epoch >= epochs)
    throw std::invalid_argument("train config: decay_epoch must satisfy 1 <= decay_epoch < epochs (got " +
                                std::to_string(decay_epoch) + " with epochs " + std::to_string(epochs) + ")");
  if (!(decay_factor > 0)) throw std::invalid_argument("train config: decay_factor must be positive");
  if (beta < 0 || beta > 1) throw std::invalid_argument("train config: beta must lie in [0, 1]");
  if (folds < 2) throw std::invalid_argument("train config: folds must be >= 2");
  if (!(holdout_ratio > 0 && holdout_ratio < 1)) throw std::invalid_argument("train config: holdout_ratio must lie in (0, 1)");
  if (threshold < 0 || threshold > 1) throw std::invalid_argument("train config: threshold must lie in [0, 1]");
  model.validate();
  loss.validate();
}

double TrainConfig::lr_at(int epoch) const { return epoch <= decay_epoch ? lr : lr / decay_factor; }

std::uint64_t TrainConfig::require_seed() const {
  if (!seed) throw std::invalid_argument("train config: a seed is required");
  return *seed;
}

json TrainConfig::to_json() const {
  json j{{"epochs", epochs},
         {"batch_size", batch_size},
         {"lr", lr},
         {"weight_decay", weight_decay},
         {"decay_epoch", decay_epoch},
         {"decay_factor", decay_factor},
         {"beta", beta},
         {"folds", folds},
         {"holdout_ratio", holdout_ratio},
         {"optimizer", to_string(optimizer)},
         {"momentum", momentum},
         {"precision", double_precision ? "f64" : "f32"},
         {"threshold", threshold},
         {"baseline", baseline},
         {"focal_alpha", loss.alpha},
         {"focal_gamma", loss.gamma},
         {"dice_eps", loss.dice_eps},
         {"model", model.to_json()}};
  j["seed"] = seed ? json(*seed) : json(nullptr);
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  static const std::set<std::string> known{"epochs",   "batch_size", "lr",        "weight_decay", "decay_epoch",
                                           "decay_factor", "beta",   "seed",      "folds",        "holdout_ratio",
                                           "optimizer", "momentum",  "precision", "threshold",    "baseline",
                                           "focal_alpha", "focal_gamma", "dice_eps", "model"};
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("train config: unknown key '" + k + "'");
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.decay_epoch = j.value("decay_epoch", c.decay_epoch);
  c.decay_factor = j.value("decay_factor", c.decay_factor);
  c.beta = j.value("beta", c.beta);
  if (j.contains("seed") && !j.at("seed").is_null()) c.seed = j.at("seed").get<std::uint64_t>();
  c.folds = j.value("folds", c.folds);
  c.holdout_ratio = j.value("holdout_ratio", c.holdout_ratio);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer"));
  c.momentum = j.value("momentum", c.momentum);
  if (j.contains("precision")) {
    const std::string p = j.at("precision");
    if (p != "f32" && p != "f64") throw std::invalid_argument("train config: precision must be f32 or f64");
    c.double_precision = p == "f64";
  }
  c.threshold = j.value("threshold", c.threshold);
  c.baseline = j.value("baseline", c.baseline);
  c.loss.alpha = j.value("focal_alpha", c.loss.alpha);
  c.loss.gamma = j.value("focal_gamma", c.loss.gamma);
  c.loss.dice_eps = j.value("dice_eps", c.loss.dice_eps);
  if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
  return c;
}

// ---------------------------------------------------------------- helpers

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over seed and stream
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_line(int fold, int epoch, const EvalMetrics& m) {
  return {{"fold", fold},          {"epoch", epoch},   {"dice", m.dice}, {"focal", m.focal},
          {"nll", m.nll},          {"combined", m.combined}, {"dsc", m.dsc},
          {"c_index", optional_json(m.c_index)}};
}

struct MeanStd {
  double mean = 0, std = 0;
  size_t n = 0;
};

// Sample standard deviation (n - 1); zero for a single value.
MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  r.n = v.size();
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

json to_json(const MeanStd& m) {
  if (m.n == 0) return {{"mean", nullptr}, {"std", nullptr}, {"n", 0}};
  return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}};
}

Eigen::MatrixXd ehr_matrix(const std::vector<const Subject*>& s, const EhrEncoder& enc) {
  Eigen::MatrixXd x(static_cast<Index>(s.size()), enc.length());
  for (size_t i = 0; i < s.size(); ++i) x.row(static_cast<Index>(i)) = enc.encode(s[i]->ehr).transpose();
  return x;
}

void survival_arrays(const std::vector<const Subject*>& s, Eigen::VectorXd& time, std::vector<int>& event) {
  time.resize(static_cast<Index>(s.size()));
  event.resize(s.size());
  for (size_t i = 0; i < s.size(); ++i) {
    time[static_cast<Index>(i)] = s[i]->label.time;
    event[i] = s[i]->label.event;
  }
}

std::optional<double> safe_c_index(const Eigen::VectorXd& risk, const Eigen::VectorXd& time,
                                   const std::vector<int>& event, long long* comparable = nullptr) {
  const ConcordanceCounts c = concordance(risk, time, event);
  if (comparable) *comparable = c.comparable;
  if (c.comparable == 0) return std::nullopt;
  return c.value();
}

EhrEncoder fit_encoder(const std::vector<const Subject*>& train, const EhrSchema& schema) {
  std::vector<const EhrRecord*> recs;
  for (const Subject* s : train) recs.push_back(&s->ehr);
  return EhrEncoder(schema, recs);
}

std::optional<double> coxph_c_index(const std::vector<const Subject*>& train, const std::vector<const Subject*>& val,
                                    const EhrEncoder& enc) {
  Eigen::VectorXd t_train, t_val;
  std::vector<int> e_train, e_val;
  survival_arrays(train, t_train, e_train);
  survival_arrays(val, t_val, e_val);
  if (std::none_of(e_train.begin(), e_train.end(), [](int e) { return e != 0; })) return std::nullopt;
  const CoxModel cox = coxph_fit(ehr_matrix(train, enc), t_train, e_train);
  return safe_c_index(cox.risk(ehr_matrix(val, enc)), t_val, e_val);
}

std::vector<const Subject*> pick(const std::vector<Subject>& data, const std::vector<size_t>& idx) {
  std::vector<const Subject*> out;
  for (size_t i : idx) out.push_back(&data[i]);
  return out;
}

class RunFiles {
 public:
  explicit RunFiles(const fs::path& out) : out_(out) {
    if (out_.empty()) return;
    fs::create_directories(out_);
    metrics_.open(out_ / "metrics.jsonl", std::ios::trunc);
    if (!metrics_) throw std::runtime_error("cannot write " + (out_ / "metrics.jsonl").string());
  }
  EpochSink sink() {
    return [this](const json& line) {
      if (metrics_.is_open()) metrics_ << line.dump() << '\n' << std::flush;
    };
  }
  fs::path checkpoint_dir(const std::string& name) const { return out_.empty() ? fs::path() : out_ / "checkpoints" / name; }
  void predictions(const std::string& name, const EvalMetrics& m) const {
    if (out_.empty()) return;
    fs::create_directories(out_ / "predictions");
    write_risk_csv(out_ / "predictions" / (name + ".csv"), m.ids, m.risk, m.pmf);
  }
  void report(const json& r) const {
    if (out_.empty()) return;
    std::ofstream f(out_ / "report.json", std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + (out_ / "report.json").string());
    f << r.dump(2) << '\n';
  }

 private:
  fs::path out_;
  std::ofstream metrics_;
};

json eval_json(const EvalMetrics& m) {
  return {{"dice", m.dice},     {"focal", m.focal}, {"nll", m.nll},
          {"combined", m.combined}, {"dsc", m.dsc}, {"c_index", optional_json(m.c_index)},
          {"comparable_pairs", m.comparable_pairs}};
}

json fold_json(const FoldSummary& f) {
  json j = eval_json(f.final);
  j["fold"] = f.fold;
  j["n_train"] = f.n_train;
  j["n_val"] = f.n_val;
  j["best_epoch"] = f.best_epoch;
  j["best_c_index"] = optional_json(f.best_c_index);
  j["coxph_c_index"] = optional_json(f.coxph_c_index);
  j["flagged"] = !f.final.c_index.has_value();
  j["train_loss"] = f.train_loss;
  j["checkpoint"] = f.checkpoint;
  return j;
}

}  // namespace

// ---------------------------------------------------------------- evaluation

template <typename S>
EvalMetrics evaluate(const TrainedModel<S>& m, const std::vector<const Subject*>& subjects, const LossConfig& loss,
                     Index batch_size) {
  if (subjects.empty()) throw std::invalid_argument("evaluate: no subjects");
  const ModelConfig& mc = m.model->config();
  const Index n = static_cast<Index>(subjects.size());
  EvalMetrics out;
  out.risk.resize(n);
  out.pmf.resize(n, mc.head.bins);
  double dsc_sum = 0;
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    std::vector<const Subject*> part(subjects.begin() + start, subjects.begin() + end);
    const Batch<S> batch = make_batch<S>(part, m.encoder, m.edges, mc);
    Tape<S> tape;
    const ForwardResult<S> fwd = m.model->forward(tape, batch, NormMode::Eval);
    const LossTerms<S> terms = joint_loss(fwd, batch, loss);
    const double w = static_cast<double>(end - start);
    out.dice += w * static_cast<double>(terms.dice.value().item());
    out.focal += w * static_cast<double>(terms.focal.value().item());
    out.nll += w * static_cast<double>(terms.nll.value().item());
    const Eigen::MatrixXd scores = fwd.scores.value().matrix().template cast<double>();
    const Eigen::MatrixXd pmf = survival_pmf(scores);
    const Tensor<S>& logits = fwd.logits.value();
    const Index vox = logits.size() / (end - start);
    for (Index i = start; i < end; ++i) {
      const Subject& s = *subjects[static_cast<size_t>(i)];
      out.pmf.row(i) = pmf.row(i - start);
      out.risk[i] = risk_score(pmf.row(i - start).transpose());
      out.ids.push_back(s.id);
      Volume lv = s.mask;
      lv.data = logits.data.segment((i - start) * vox, vox).template cast<float>();
      dsc_sum += dsc_metric(logits_to_mask(lv, m.threshold), s.mask);
    }
  }
  out.dice /= static_cast<double>(n);
  out.focal /= static_cast<double>(n);
  out.nll /= static_cast<double>(n);
  out.combined = combined_loss(out.dice, out.focal, out.nll, loss.beta);
  out.dsc = dsc_sum / static_cast<double>(n);
  Eigen::VectorXd time;
  std::vector<int> event;
  survival_arrays(subjects, time, event);
  out.c_index = safe_c_index(out.risk, time, event, &out.comparable_pairs);
  return out;
}

template <typename S>
std::vector<Volume> predict_masks(const TrainedModel<S>& m, const std::vector<const Subject*>& subjects,
                                  Index batch_size) {
  std::vector<Volume> out;
  const Index n = static_cast<Index>(subjects.size());
  for (Index start = 0; start < n; start += batch_size) {
    const Index end = std::min(n, start + batch_size);
    std::vector<const Subject*> part(subjects.begin() + start, subjects.begin() + end);
    const Batch<S> batch = make_batch<S>(part, m.encoder, {}, m.model->config());
    Tape<S> tape;
    const ForwardResult<S> fwd = m.model->forward(tape, batch, NormMode::Eval);
    const Tensor<S>& logits = fwd.logits.value();
    const Index vox = logits.size() / (end - start);
    for (Index i = start; i < end; ++i) {
      Volume lv = subjects[static_cast<size_t>(i)]->ct;
      lv.data = logits.data.segment((i - start) * vox, vox).template cast<float>();
      out.push_back(logits_to_mask(lv, m.threshold));
    }
  }
  return out;
}

// ---------------------------------------------------------------- training

template <typename S>
TrainedModel<S> train_model(const std::vector<const Subject*>& train, const std::vector<const Subject*>& val,
                            const EhrSchema& schema, const TrainConfig& cfg_in, int fold, const EpochSink& sink,
                            const fs::path& ckpt_dir, FoldSummary* summary) {
  TrainConfig cfg = cfg_in;
  cfg.loss.beta = cfg.beta;
  cfg.validate();
  const std::uint64_t seed = cfg.require_seed();
  if (train.empty()) throw std::invalid_argument("train: empty training set");

  TrainedModel<S> tm;
  tm.threshold = cfg.threshold;
  tm.encoder = fit_encoder(train, schema);
  std::vector<double> times;
  for (const Subject* s : train) times.push_back(s->label.time);
  tm.edges = quantile_bin_edges(times, cfg.model.head.bins);
  ModelConfig mc = cfg.model;
  mc.embed.ehr_features = tm.encoder.length();
  tm.model = std::make_unique<Model<S>>(mc);
  tm.model->initialize(mix_seed(seed, 2 * static_cast<std::uint64_t>(fold)));
  ParameterSet<S>& params = tm.model->params();

  // A branch with zero weight in the joint loss contributes no gradient; its
  // parameters are also excluded from weight decay so they stay untouched.
  std::vector<bool> was_trainable;
  for (auto& p : params) {
    was_trainable.push_back(p.trainable);
    const std::string g = parameter_group(p.name);
    if ((cfg.beta == 0.0 && g == "decoder") || (cfg.beta == 1.0 && (g == "head" || g == "mtlr"))) p.trainable = false;
  }

  Optimizer<S> opt(cfg.optimizer, cfg.weight_decay, cfg.momentum);
  std::mt19937_64 order_rng(mix_seed(seed, 2 * static_cast<std::uint64_t>(fold) + 1));
  std::vector<size_t> order(train.size());
  std::iota(order.begin(), order.end(), size_t(0));
  const std::vector<const Subject*>& scored = val.empty() ? train : val;

  FoldSummary local;
  FoldSummary& fs_out = summary ? *summary : local;
  fs_out = FoldSummary{};
  fs_out.fold = fold;
  fs_out.n_train = static_cast<Index>(train.size());
  fs_out.n_val = static_cast<Index>(val.size());

  const Index n = static_cast<Index>(train.size());
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index end = std::min(n, start + cfg.batch_size);
      std::vector<const Subject*> part;
      for (Index i = start; i < end; ++i) part.push_back(train[order[static_cast<size_t>(i)]]);
      const Batch<S> batch = make_batch<S>(part, tm.encoder, tm.edges, mc);
      Tape<S> tape;
      params.zero_grad();
      const ForwardResult<S> fwd = tm.model->forward(tape, batch, NormMode::Train);
      const LossTerms<S> terms = joint_loss(fwd, batch, cfg.loss);
      for (const auto& [name, v] : {std::pair{"dice", terms.dice}, {"focal", terms.focal}, {"nll", terms.nll}})
        if (!std::isfinite(static_cast<double>(v.value().item())))
          throw std::domain_error(std::string("train: non-finite ") + name + " loss at fold " + std::to_string(fold) +
                                  ", epoch " + std::to_string(epoch));
      tape.backward(terms.total);
      opt.step(params, lr);
      loss_sum += static_cast<double>(end - start) * static_cast<double>(terms.total.value().item());
    }
    fs_out.train_loss.push_back(loss_sum / static_cast<double>(n));

    EvalMetrics m = evaluate(tm, scored, cfg.loss, cfg.batch_size);
    if (sink) sink(metrics_line(fold, epoch, m));
    if (m.c_index && (!fs_out.best_c_index || *m.c_index > *fs_out.best_c_index)) {
      fs_out.best_c_index = m.c_index;
      fs_out.best_epoch = epoch;
      if (!ckpt_dir.empty()) save_trained(tm, ckpt_dir / "best", {{"epoch", epoch}, {"fold", fold}});
    }
    fs_out.final = std::move(m);
  }
  for (size_t i = 0; i < was_trainable.size(); ++i) params[i].trainable = was_trainable[i];
  if (!ckpt_dir.empty()) {
    save_trained(tm, ckpt_dir / "last", {{"epoch", cfg.epochs}, {"fold", fold}});
    fs_out.checkpoint = (ckpt_dir / "last").string();
  }
  return tm;
}

// ---------------------------------------------------------------- splits

std::vector<std::vector<size_t>> kfold_partition(size_t n, int k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold: k must be >= 2");
  if (n < static_cast<size_t>(k))
    throw std::invalid_argument("kfold: " + std::to_string(n) + " subjects cannot fill " + std::to_string(k) + " folds");
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t(0));
  std::mt19937_64 rng(mix_seed(seed, 0xf01d));
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<size_t>> folds(static_cast<size_t>(k));
  for (size_t i = 0; i < n; ++i) folds[i % static_cast<size_t>(k)].push_back(idx[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

std::pair<std::vector<size_t>, std::vector<size_t>> holdout_split(size_t n, double ratio, std::uint64_t seed) {
  if (n < 5) throw std::invalid_argument("holdout: need at least 5 subjects");
  if (!(ratio > 0 && ratio < 1)) throw std::invalid_argument("holdout: ratio must lie in (0, 1)");
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t(0));
  std::mt19937_64 rng(mix_seed(seed, 0x401d));
  std::shuffle(idx.begin(), idx.end(), rng);
  const size_t n_train = std::clamp<size_t>(static_cast<size_t>(std::llround(ratio * static_cast<double>(n))), 1, n - 1);
  std::vector<size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {a, b};
}

// ---------------------------------------------------------------- protocols

namespace {

template <typename S>
FoldSummary run_split(const std::vector<const Subject*>& train, const std::vector<const Subject*>& val,
                      const EhrSchema& schema, const TrainConfig& cfg, int fold, RunFiles& files,
                      const std::string& name) {
  FoldSummary fsum;
  TrainedModel<S> tm = train_model<S>(train, val, schema, cfg, fold, files.sink(), files.checkpoint_dir(name), &fsum);
  if (cfg.baseline && !val.empty()) fsum.coxph_c_index = coxph_c_index(train, val, tm.encoder);
  files.predictions(name, fsum.final);
  return fsum;
}

FoldSummary run_split_any(const std::vector<const Subject*>& train, const std::vector<const Subject*>& val,
                          const EhrSchema& schema, const TrainConfig& cfg, int fold, RunFiles& files,
                          const std::string& name) {
  return cfg.double_precision ? run_split<double>(train, val, schema, cfg, fold, files, name)
                              : run_split<float>(train, val, schema, cfg, fold, files, name);
}

json report_header(const std::string& command, const TrainConfig& cfg, Index n) {
  return {{"command", command}, {"n_subjects", n}, {"config", cfg.to_json()}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

json run_train(const std::vector<Subject>& data, const EhrSchema& schema, const TrainConfig& cfg,
               const fs::path& out_dir) {
  cfg.require_seed();
  const auto t0 = std::chrono::steady_clock::now();
  RunFiles files(out_dir);
  std::vector<size_t> all(data.size());
  std::iota(all.begin(), all.end(), size_t(0));
  const FoldSummary f = run_split_any(pick(data, all), {}, schema, cfg, 0, files, "train");
  json r = report_header("train", cfg, static_cast<Index>(data.size()));
  r["train"] = fold_json(f);
  r["wall_clock_seconds"] = seconds_since(t0);
  files.report(r);
  return r;
}

json run_kfold(const std::vector<Subject>& data, const EhrSchema& schema, const TrainConfig& cfg,
               const fs::path& out_dir) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto parts = kfold_partition(data.size(), cfg.folds, cfg.require_seed());
  RunFiles files(out_dir);
  json folds = json::array(), warnings = json::array();
  std::vector<double> c, dsc, nll, combined, cox, best;
  for (int k = 0; k < cfg.folds; ++k) {
    std::vector<size_t> train_idx;
    for (int o = 0; o < cfg.folds; ++o)
      if (o != k) train_idx.insert(train_idx.end(), parts[static_cast<size_t>(o)].begin(), parts[static_cast<size_t>(o)].end());
    std::sort(train_idx.begin(), train_idx.end());
    const FoldSummary f = run_split_any(pick(data, train_idx), pick(data, parts[static_cast<size_t>(k)]), schema, cfg,
                                        k, files, "fold" + std::to_string(k));
    folds.push_back(fold_json(f));
    dsc.push_back(f.final.dsc);
    nll.push_back(f.final.nll);
    combined.push_back(f.final.combined);
    if (f.final.c_index) c.push_back(*f.final.c_index);
    else warnings.push_back("fold " + std::to_string(k) + " has no comparable pairs; excluded from the C-index mean");
    if (f.best_c_index) best.push_back(*f.best_c_index);
    if (f.coxph_c_index) cox.push_back(*f.coxph_c_index);
  }
  json r = report_header("kfold", cfg, static_cast<Index>(data.size()));
  r["folds"] = folds;
  r["summary"] = {{"c_index", to_json(mean_std(c))},
                  {"dsc", to_json(mean_std(dsc))},
                  {"nll", to_json(mean_std(nll))},
                  {"combined", to_json(mean_std(combined))},
                  {"best_epoch_c_index", to_json(mean_std(best))},
                  {"coxph_c_index", to_json(mean_std(cox))}};
  r["warnings"] = warnings;
  r["wall_clock_seconds"] = seconds_since(t0);
  files.report(r);
  return r;
}

json run_holdout(const std::vector<Subject>& data, const EhrSchema& schema, const TrainConfig& cfg,
                 const fs::path& out_dir) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto [train_idx, test_idx] = holdout_split(data.size(), cfg.holdout_ratio, cfg.require_seed());
  RunFiles files(out_dir);
  const FoldSummary f = run_split_any(pick(data, train_idx), pick(data, test_idx), schema, cfg, 0, files, "holdout");
  json r = report_header("holdout", cfg, static_cast<Index>(data.size()));
  r["test"] = fold_json(f);
  json ids_train = json::array(), ids_test = json::array();
  for (size_t i : train_idx) ids_train.push_back(data[i].id);
  for (size_t i : test_idx) ids_test.push_back(data[i].id);
  r["train_ids"] = ids_train;
  r["test_ids"] = ids_test;
  r["warnings"] = f.final.c_index ? json::array() : json::array({"hold-out split has no comparable pairs"});
  r["wall_clock_seconds"] = seconds_since(t0);
  files.report(r);
  return r;
}

json run_baselines(const std::vector<Subject>& data, const EhrSchema& schema, const TrainConfig& cfg,
                   const MtlrFitConfig& mtlr, const fs::path& out_dir) {
  const std::uint64_t seed = cfg.require_seed();
  const auto parts = kfold_partition(data.size(), cfg.folds, seed);
  json folds = json::array();
  std::map<std::string, std::vector<double>> cidx, nll;
  for (int k = 0; k < cfg.folds; ++k) {
    std::vector<size_t> train_idx;
    for (int o = 0; o < cfg.folds; ++o)
      if (o != k) train_idx.insert(train_idx.end(), parts[static_cast<size_t>(o)].begin(), parts[static_cast<size_t>(o)].end());
    std::sort(train_idx.begin(), train_idx.end());
    const auto train = pick(data, train_idx), val = pick(data, parts[static_cast<size_t>(k)]);
    const EhrEncoder enc = fit_encoder(train, schema);
    const Eigen::MatrixXd x_train = ehr_matrix(train, enc), x_val = ehr_matrix(val, enc);
    Eigen::VectorXd t_train, t_val;
    std::vector<int> e_train, e_val;
    survival_arrays(train, t_train, e_train);
    survival_arrays(val, t_val, e_val);
    std::vector<SurvivalLabel> l_train, l_val;
    for (const Subject* s : train) l_train.push_back(s->label);
    for (const Subject* s : val) l_val.push_back(s->label);

    json fj{{"fold", k}, {"n_train", train.size()}, {"n_val", val.size()}};
    const CoxModel cox = coxph_fit(x_train, t_train, e_train);
    const auto cox_c = safe_c_index(cox.risk(x_val), t_val, e_val);
    fj["coxph"] = {{"c_index", optional_json(cox_c)}, {"converged", cox.converged}, {"iterations", cox.iterations}};
    if (cox_c) cidx["coxph"].push_back(*cox_c);

    for (const auto& [name, hidden] : {std::pair{"mtlr", Index(0)}, {"deep_mtlr", Index(128)}}) {
      MtlrFitConfig mcfg = mtlr;
      mcfg.hidden = hidden;
      mcfg.seed = mix_seed(seed, static_cast<std::uint64_t>(k));
      const MtlrModel m = MtlrModel::fit(x_train, l_train, mcfg);
      const auto c = safe_c_index(m.risk(x_val), t_val, e_val);
      const double v_nll = m.nll(x_val, l_val);
      fj[name] = {{"c_index", optional_json(c)}, {"nll", v_nll}};
      if (c) cidx[name].push_back(*c);
      nll[name].push_back(v_nll);
    }
    folds.push_back(fj);
  }
  json r = report_header("baselines", cfg, static_cast<Index>(data.size()));
  r["folds"] = folds;
  json summary;
  for (const char* name : {"coxph", "mtlr", "deep_mtlr"}) {
    summary[name]["c_index"] = to_json(mean_std(cidx[name]));
    if (nll.count(name)) summary[name]["nll"] = to_json(mean_std(nll[name]));
  }
  r["summary"] = summary;
  if (!out_dir.empty()) {
    RunFiles files(out_dir);
    files.report(r);
  }
  return r;
}

// ---------------------------------------------------------------- persistence and inference

template <typename S>
void save_trained(const TrainedModel<S>& m, const fs::path& dir, const json& extra) {
  json meta{{"model", m.model->config().to_json()},
            {"ehr_encoder", m.encoder.to_json()},
            {"edges", m.edges},
            {"threshold", m.threshold}};
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) meta[k] = v;
  save_checkpoint(m.model->params(), dir, meta);
}

template <typename S>
TrainedModel<S> load_trained(const fs::path& dir) {
  const json manifest = read_checkpoint_manifest(dir);
  const json& meta = manifest.at("metadata");
  TrainedModel<S> m;
  m.model = std::make_unique<Model<S>>(ModelConfig::from_json(meta.at("model")));
  load_checkpoint(m.model->params(), dir);
  m.encoder = EhrEncoder::from_json(meta.at("ehr_encoder"));
  m.edges = meta.at("edges").get<std::vector<double>>();
  m.threshold = meta.value("threshold", 0.5);
  return m;
}

namespace {

template <typename S>
std::vector<Prediction> predict_with(const fs::path& checkpoint, const std::vector<Subject>& subjects) {
  const TrainedModel<S> m = load_trained<S>(checkpoint);
  std::vector<Prediction> out;
  for (const Subject& s : subjects) {
    // One subject per batch: evaluation-mode outputs do not depend on batch composition.
    const std::vector<const Subject*> one{&s};
    const Batch<S> batch = make_batch<S>(one, m.encoder, {}, m.model->config());
    Tape<S> tape;
    const ForwardResult<S> fwd = m.model->forward(tape, batch, NormMode::Eval);
    Prediction p;
    p.id = s.id;
    Volume lv = s.ct;
    lv.data = fwd.logits.value().data.template cast<float>();
    p.mask = logits_to_mask(lv, m.threshold);
    p.pmf = survival_pmf(Eigen::VectorXd(fwd.scores.value().data.template cast<double>().matrix()));
    p.risk = risk_score(p.pmf);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

std::vector<Prediction> predict_from_checkpoint(const fs::path& checkpoint, const std::vector<Subject>& subjects) {
  const std::string precision = read_checkpoint_manifest(checkpoint).at("precision");
  return precision == "f64" ? predict_with<double>(checkpoint, subjects) : predict_with<float>(checkpoint, subjects);
}

void write_risk_csv(const fs::path& path, const std::vector<std::string>& ids, const Eigen::VectorXd& risk,
                    const Eigen::MatrixXd& pmf) {
  if (static_cast<Index>(ids.size()) != risk.size() || pmf.rows() != risk.size())
    throw std::invalid_argument("write_risk_csv: ids, risks and pmf rows differ in count");
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  auto num = [](double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  };
  f << "id,risk";
  for (Index k = 0; k < pmf.cols(); ++k) f << ",pmf_" << k;
  f << '\n';
  for (size_t i = 0; i < ids.size(); ++i) {
    f << ids[i] << ',' << num(risk[static_cast<Index>(i)]);
    for (Index k = 0; k < pmf.cols(); ++k) f << ',' << num(pmf(static_cast<Index>(i), k));
    f << '\n';
  }
}

#define SEGSURV_INSTANTIATE_TRAINING(S)                                                                            \
  template EvalMetrics evaluate(const TrainedModel<S>&, const std::vector<const Subject*>&, const LossConfig&,     \
                                Index);                                                                            \
  template std::vector<Volume> predict_masks(const TrainedModel<S>&, const std::vector<const Subject*>&, Index);   \
  template TrainedModel<S> train_model(const std::vector<const Subject*>&, const std::vector<const Subject*>&,     \
                                       const EhrSchema&, const TrainConfig&, int, const EpochSink&,                \
                                       const fs::path&, FoldSummary*);                                             \
  template void save_trained(const TrainedModel<S>&, const fs::path&, const json&);                                \
  template TrainedModel<S> load_trained(const fs::path&);

SEGSURV_INSTANTIATE_TRAINING(float)
SEGSURV_INSTANTIATE_TRAINING(double)

}  // namespace segsurv
