// Command-line front end: synthetic cohorts, preprocessing, training protocols,
// inference, gradient checks and tabular baselines.
#include "segsurv/diagnostics.hpp"
#include "segsurv/synthetic.hpp"
#include "segsurv/training.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace segsurv;

namespace {

Extent3 parse_extent(const std::vector<Index>& v, const char* flag) {
  if (v.size() != 3) throw std::invalid_argument(std::string(flag) + " needs three extents");
  return {v[0], v[1], v[2]};
}

// Training flags; each one overrides the matching --config key when given.
struct TrainFlags {
  std::string config, data, out_dir, optimizer, precision, preset;
  std::map<std::string, double> numbers;
  std::optional<std::uint64_t> seed;
  bool no_baseline = false;

  void attach(CLI::App* app, bool seed_required) {
    app->add_option("--data", data, "Preprocessed dataset directory")->required()->check(CLI::ExistingDirectory);
    app->add_option("--out-dir", out_dir, "Output directory")->required();
    app->add_option("--config", config, "JSON file with TrainConfig keys")->check(CLI::ExistingFile);
    auto* s = app->add_option("--seed", seed, "Seed for initialization, data order and splits");
    if (seed_required) s->required();
    for (const char* key : {"epochs", "batch-size", "lr", "weight-decay", "decay-epoch", "decay-factor", "beta",
                            "folds", "holdout-ratio", "momentum", "threshold"})
      app->add_option(std::string("--") + key, numbers[key]);
    app->add_option("--optimizer", optimizer, "sgd, momentum or adamw");
    app->add_option("--precision", precision, "f32 or f64");
    app->add_option("--preset", preset, "Model size preset: desk, full or toy");
    app->add_flag("--no-baseline", no_baseline, "Skip the EHR-only CoxPH comparison");
  }

  TrainConfig resolve(const CLI::App* app) const {
    json j = json::object();
    if (!config.empty()) {
      std::ifstream f(config);
      j = json::parse(f);
    }
    for (const auto& [key, value] : numbers) {
      if (app->count("--" + key) == 0) continue;
      std::string k = key;
      for (char& c : k)
        if (c == '-') c = '_';
      if (k == "epochs" || k == "batch_size" || k == "decay_epoch" || k == "folds")
        j[k] = static_cast<long long>(value);
      else
        j[k] = value;
    }
    if (seed) j["seed"] = *seed;
    if (!optimizer.empty()) j["optimizer"] = optimizer;
    if (!precision.empty()) j["precision"] = precision;
    if (no_baseline) j["baseline"] = false;
    if (!preset.empty()) {
      json m = j.value("model", json::object());
      m["preset"] = preset;
      j["model"] = m;
    }
    return TrainConfig::from_json(j);
  }
};

void print_summary(const json& report) {
  if (report.contains("summary")) std::cout << report["summary"].dump(2) << '\n';
  else if (report.contains("test")) std::cout << report["test"].dump(2) << '\n';
  else if (report.contains("train")) std::cout << report["train"].dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint tumor segmentation and survival prediction from PET/CT and health records"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort");
  Index synth_n = 100;
  std::uint64_t synth_seed = 0;
  std::string synth_out;
  std::vector<Index> synth_shape{40, 40, 24};
  SynthConfig synth_cfg;
  synth->add_option("--n", synth_n, "Number of subjects")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed)->required();
  synth->add_option("--out-dir", synth_out)->required();
  synth->add_option("--shape", synth_shape, "Volume extents X Y Z")->expected(3);
  synth->add_option("--tumor-effect", synth_cfg.tumor_effect);
  synth->add_option("--ehr-effect", synth_cfg.ehr_effect);
  synth->add_option("--nonlinear-effect", synth_cfg.nonlinear_effect);
  synth->add_option("--censor-fraction", synth_cfg.censor_fraction);
  synth->add_option("--radius-min", synth_cfg.radius_min_mm);
  synth->add_option("--radius-max", synth_cfg.radius_max_mm);

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "Resample, normalize and crop a dataset");
  std::string prep_in, prep_out;
  PreprocessConfig prep_cfg;
  std::vector<Index> prep_crop{32, 32, 16};
  prep->add_option("--data", prep_in)->required()->check(CLI::ExistingDirectory);
  prep->add_option("--out-dir", prep_out)->required();
  prep->add_option("--spacing", prep_cfg.spacing, "Isotropic spacing in mm");
  prep->add_option("--crop", prep_crop, "Crop extents X Y Z")->expected(3);

  // train / kfold / holdout
  TrainFlags train_flags, kfold_flags, holdout_flags, baseline_flags;
  auto* train = app.add_subcommand("train", "Train on every subject");
  train_flags.attach(train, true);
  auto* kfold = app.add_subcommand("kfold", "k-fold cross-validation");
  kfold_flags.attach(kfold, true);
  auto* holdout = app.add_subcommand("holdout", "Train/test hold-out split");
  holdout_flags.attach(holdout, true);

  // predict
  auto* predict = app.add_subcommand("predict", "Masks and risks from a checkpoint");
  std::string pred_ckpt, pred_data, pred_out;
  predict->add_option("--checkpoint", pred_ckpt)->required()->check(CLI::ExistingDirectory);
  predict->add_option("--data", pred_data)->required()->check(CLI::ExistingDirectory);
  predict->add_option("--out-dir", pred_out)->required();

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks (64-bit)");
  std::string gc_component = "all";
  GradCheckOptions gc_opts = gradient_suite_options();
  gradcheck->add_option("--component", gc_component, "all, dice, focal, mtlr_nll, attention or model");
  gradcheck->add_option("--tolerance", gc_opts.tolerance);
  gradcheck->add_option("--step", gc_opts.step);
  gradcheck->add_option("--max-entries", gc_opts.max_entries, "Entries probed per tensor (-1: all)");

  // baselines
  auto* baselines = app.add_subcommand("baselines", "EHR-only CoxPH, MTLR and deep MTLR on seeded folds");
  baseline_flags.attach(baselines, true);
  MtlrFitConfig mtlr_cfg;
  baselines->add_option("--mtlr-epochs", mtlr_cfg.epochs);
  baselines->add_option("--mtlr-lr", mtlr_cfg.lr);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*synth) {
      synth_cfg.shape = parse_extent(synth_shape, "--shape");
      const auto subjects = generate_synthetic(synth_n, synth_seed, synth_cfg);
      write_dataset(synth_out, subjects, default_ehr_schema());
      std::cout << "wrote " << subjects.size() << " subjects to " << synth_out << '\n';
    } else if (*prep) {
      prep_cfg.crop = parse_extent(prep_crop, "--crop");
      EhrSchema schema;
      const auto raw = read_dataset(prep_in, &schema);
      std::vector<Subject> out;
      for (const auto& s : raw) out.push_back(preprocess_subject(s, prep_cfg));
      write_dataset(prep_out, out, schema);
      std::cout << "preprocessed " << out.size() << " subjects into " << prep_out << '\n';
    } else if (*train || *kfold || *holdout) {
      CLI::App* sub = *train ? train : (*kfold ? kfold : holdout);
      const TrainFlags& flags = *train ? train_flags : (*kfold ? kfold_flags : holdout_flags);
      const TrainConfig cfg = flags.resolve(sub);
      EhrSchema schema;
      const auto data = read_dataset(flags.data, &schema);
      const json report = *train   ? run_train(data, schema, cfg, flags.out_dir)
                          : *kfold ? run_kfold(data, schema, cfg, flags.out_dir)
                                   : run_holdout(data, schema, cfg, flags.out_dir);
      print_summary(report);
    } else if (*predict) {
      const auto data = read_dataset(pred_data);
      // Everything is computed before anything is written.
      const auto preds = predict_from_checkpoint(pred_ckpt, data);
      fs::create_directories(fs::path(pred_out) / "predictions");
      std::vector<std::string> ids;
      Eigen::VectorXd risk(static_cast<Index>(preds.size()));
      Eigen::MatrixXd pmf(static_cast<Index>(preds.size()), preds.empty() ? 0 : preds[0].pmf.size());
      for (size_t i = 0; i < preds.size(); ++i) {
        write_volume(preds[i].mask, fs::path(pred_out) / "predictions" / (preds[i].id + "_mask.rvol"));
        ids.push_back(preds[i].id);
        risk[static_cast<Index>(i)] = preds[i].risk;
        pmf.row(static_cast<Index>(i)) = preds[i].pmf.transpose();
      }
      write_risk_csv(fs::path(pred_out) / "predictions" / "risk.csv", ids, risk, pmf);
      std::cout << "predicted " << preds.size() << " subjects\n";
    } else if (*gradcheck) {
      bool ok = true;
      for (const auto& [name, r] : run_gradient_suite(gc_component, gc_opts)) {
        Index probed = 0;
        for (const auto& e : r.entries) probed += e.checked;
        std::cout << (r.passed ? "PASS " : "FAIL ") << name << " max_rel_error=" << r.max_rel_error
                  << " tolerance=" << r.tolerance << " entries=" << probed << '\n';
        ok = ok && r.passed;
      }
      return ok ? 0 : 1;
    } else if (*baselines) {
      const TrainConfig cfg = baseline_flags.resolve(baselines);
      EhrSchema schema;
      const auto data = read_dataset(baseline_flags.data, &schema);
      print_summary(run_baselines(data, schema, cfg, mtlr_cfg, baseline_flags.out_dir));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
