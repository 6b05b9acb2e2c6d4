// Command-line entry point: dataset generation, unsupervised training,
// classifier training, evaluation, and report aggregation.
//
// Exit codes: 0 success, 2 usage/config error, 3 runtime/data error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "atomflow/codec.hpp"
#include "atomflow/common.hpp"
#include "atomflow/model.hpp"
#include "atomflow/recognition.hpp"
#include "atomflow/synth.hpp"
#include "atomflow/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Config problems exit with 2; everything else that throws exits with 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

json load_json_file(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  try {
    return json::parse(atomflow::read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
}

void check_allowed(const json& j, const std::string& ctx,
                   const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + ctx + "' must be an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      throw ConfigError("unknown key '" + key + "' in config section '" + ctx + "'");
}

template <typename T>
T get_or(const json& j, const std::string& key, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("bad value for config key '" + key + "': " + e.what());
  }
}

struct RunConfig {
  uint64_t seed = 1;
  atomflow::CodecParams codec;
  atomflow::SceneConfig geometry;
  int clips_per_program = 10;
  double amplitude_scale = 1.0;  // scales program amplitudes for small frames
  atomflow::TrainConfig train;
  atomflow::ClsConfig classifier;
  std::vector<int> down_filters = {16, 32, 32};
  int feat_channels = 32;
  int up_channels = 16;
};

RunConfig parse_run_config(const std::string& path) {
  const json j = load_json_file(path);
  check_allowed(j, "<top>", {"seed", "codec", "geometry", "clips_per_program",
                             "amplitude_scale", "train", "model", "classifier"});
  RunConfig rc;
  rc.seed = get_or<uint64_t>(j, "seed", 1);
  rc.amplitude_scale = get_or(j, "amplitude_scale", rc.amplitude_scale);
  if (j.contains("codec")) {
    const json& c = j.at("codec");
    check_allowed(c, "codec", {"bins_per_axis", "bound", "k_nn", "lambda"});
    rc.codec.bins_per_axis = get_or(c, "bins_per_axis", rc.codec.bins_per_axis);
    rc.codec.bound = get_or(c, "bound", rc.codec.bound);
    rc.codec.k_nn = get_or(c, "k_nn", rc.codec.k_nn);
    rc.codec.lambda = get_or(c, "lambda", rc.codec.lambda);
  }
  if (j.contains("geometry")) {
    const json& g = j.at("geometry");
    check_allowed(g, "geometry", {"H", "W", "T_total", "M", "min_shapes", "max_shapes",
                                  "min_size", "max_size"});
    rc.geometry.H = get_or(g, "H", rc.geometry.H);
    rc.geometry.W = get_or(g, "W", rc.geometry.W);
    rc.geometry.T_total = get_or(g, "T_total", rc.geometry.T_total);
    rc.geometry.M = get_or(g, "M", rc.geometry.M);
    rc.geometry.min_shapes = get_or(g, "min_shapes", rc.geometry.min_shapes);
    rc.geometry.max_shapes = get_or(g, "max_shapes", rc.geometry.max_shapes);
    rc.geometry.min_size = get_or(g, "min_size", rc.geometry.min_size);
    rc.geometry.max_size = get_or(g, "max_size", rc.geometry.max_size);
  }
  rc.clips_per_program = get_or(j, "clips_per_program", rc.clips_per_program);
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_allowed(t, "train",
                  {"batch_size", "lr", "weight_decay", "patience", "plateau_factor",
                   "epochs", "steps_per_epoch", "lambda", "T", "modality", "seed"});
    rc.train.batch_size = get_or(t, "batch_size", rc.train.batch_size);
    rc.train.lr = get_or(t, "lr", rc.train.lr);
    rc.train.weight_decay = get_or(t, "weight_decay", rc.train.weight_decay);
    rc.train.patience = get_or(t, "patience", rc.train.patience);
    rc.train.plateau_factor = get_or(t, "plateau_factor", rc.train.plateau_factor);
    rc.train.epochs = get_or(t, "epochs", rc.train.epochs);
    rc.train.steps_per_epoch = get_or(t, "steps_per_epoch", rc.train.steps_per_epoch);
    rc.train.lambda = get_or(t, "lambda", rc.train.lambda);
    rc.train.T = get_or(t, "T", rc.train.T);
    rc.train.modality = get_or(t, "modality", rc.train.modality);
    rc.train.seed = get_or<uint64_t>(t, "seed", rc.seed);
  } else {
    rc.train.seed = rc.seed;
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    check_allowed(m, "model", {"down_filters", "feat_channels", "up_channels"});
    rc.down_filters = get_or(m, "down_filters", rc.down_filters);
    rc.feat_channels = get_or(m, "feat_channels", rc.feat_channels);
    rc.up_channels = get_or(m, "up_channels", rc.up_channels);
  }
  if (j.contains("classifier")) {
    const json& c = j.at("classifier");
    check_allowed(c, "classifier",
                  {"batch_size", "head_lr", "encoder_lr", "lr_decay", "decay_every",
                   "steps", "eval_every", "num_samples", "head_weight_decay", "modality",
                   "seed", "head_seed"});
    rc.classifier.batch_size = get_or(c, "batch_size", rc.classifier.batch_size);
    rc.classifier.head_lr = get_or(c, "head_lr", rc.classifier.head_lr);
    rc.classifier.encoder_lr = get_or(c, "encoder_lr", rc.classifier.encoder_lr);
    rc.classifier.lr_decay = get_or(c, "lr_decay", rc.classifier.lr_decay);
    rc.classifier.decay_every = get_or(c, "decay_every", rc.classifier.decay_every);
    rc.classifier.steps = get_or(c, "steps", rc.classifier.steps);
    rc.classifier.eval_every = get_or(c, "eval_every", rc.classifier.eval_every);
    rc.classifier.num_samples = get_or(c, "num_samples", rc.classifier.num_samples);
    rc.classifier.head_weight_decay =
        get_or(c, "head_weight_decay", rc.classifier.head_weight_decay);
    rc.classifier.modality = get_or(c, "modality", rc.classifier.modality);
    rc.classifier.seed = get_or<uint64_t>(c, "seed", rc.seed);
    rc.classifier.head_seed = get_or<uint64_t>(c, "head_seed", rc.classifier.head_seed);
  } else {
    rc.classifier.seed = rc.seed;
  }

  // Structural validation; failures here are config errors (exit 2).
  const auto& g = rc.geometry;
  if (g.H < 1 || g.W < 1 || g.T_total < 2)
    throw ConfigError("geometry needs H,W >= 1 and T_total >= 2");
  if (g.M < 1 || g.H % g.M != 0 || g.W % g.M != 0)
    throw ConfigError("frame size " + std::to_string(g.H) + "x" + std::to_string(g.W) +
                      " is not divisible by patch size M=" + std::to_string(g.M));
  if (rc.codec.bins_per_axis < 1 || rc.codec.bins_per_axis % 2 == 0)
    throw ConfigError("codec bins_per_axis must be odd and positive, got " +
                      std::to_string(rc.codec.bins_per_axis));
  if (rc.codec.bound <= 0.0) throw ConfigError("codec bound must be positive");
  if (rc.codec.k_nn < 1 ||
      rc.codec.k_nn > rc.codec.bins_per_axis * rc.codec.bins_per_axis * rc.codec.bins_per_axis)
    throw ConfigError("codec k_nn out of range");
  if (rc.clips_per_program < 1) throw ConfigError("clips_per_program must be >= 1");
  if (!(rc.amplitude_scale > 0.0)) throw ConfigError("amplitude_scale must be positive");
  try {
    rc.train.validate();
    rc.classifier.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return rc;
}

void ensure_fresh_dir(const std::string& path, bool force) {
  if (fs::exists(path) && !fs::is_empty(path)) {
    if (!force)
      throw ConfigError("output directory '" + path +
                        "' exists and is not empty; pass --force to overwrite");
    fs::remove_all(path);
  }
  fs::create_directories(path);
}

void ensure_fresh_file(const std::string& path, bool force) {
  if (fs::exists(path) && !force)
    throw ConfigError("output file '" + path + "' exists; pass --force to overwrite");
  if (const auto parent = fs::path(path).parent_path(); !parent.empty())
    fs::create_directories(parent);
}

void store_config_verbatim(const std::string& config_path, const std::string& out_dir) {
  atomflow::write_text_file((fs::path(out_dir) / "run_config.json").string(),
                            atomflow::read_text_file(config_path));
}

atomflow::ModelConfig model_config_for(const RunConfig& rc, const atomflow::Dataset& ds,
                                       const std::string& modality) {
  atomflow::ModelConfig mc;
  mc.H = ds.geometry.H;
  mc.W = ds.geometry.W;
  mc.M = ds.geometry.M;
  mc.K = ds.codebook().size();
  mc.in_channels = static_cast<int>(atomflow::modality_channels(modality).size());
  mc.down_filters = rc.down_filters;
  mc.feat_channels = rc.feat_channels;
  mc.up_channels = rc.up_channels;
  return mc;
}

int parse_split(const std::string& s) {
  if (s == "train") return atomflow::kTrain;
  if (s == "val") return atomflow::kVal;
  if (s == "test") return atomflow::kTest;
  throw ConfigError("unknown split '" + s + "' (expected train, val, or test)");
}

// ---------------------------------------------------------------------------

void cmd_gen_data(const std::string& config, const std::string& out, bool force) {
  RunConfig rc = parse_run_config(config);
  ensure_fresh_dir(out, force);
  auto programs = atomflow::default_programs();
  for (auto& p : programs) p.amp *= rc.amplitude_scale;
  atomflow::build_dataset(programs, rc.clips_per_program, rc.seed, rc.geometry, rc.codec,
                          out);
  store_config_verbatim(config, out);
  const auto ds = atomflow::load_dataset(out);
  std::cout << "dataset: " << ds.clips.size() << " clips ("
            << ds.by_split[atomflow::kTrain].size() << " train, "
            << ds.by_split[atomflow::kVal].size() << " val, "
            << ds.by_split[atomflow::kTest].size() << " test) at " << out << "\n";
}

void cmd_train_unsup(const std::string& config, const std::string& data,
                     const std::string& out, bool resume, long long max_steps,
                     bool force) {
  RunConfig rc = parse_run_config(config);
  const atomflow::Dataset ds = atomflow::load_dataset(data);
  if (!resume) ensure_fresh_dir(out, force);
  atomflow::SeqModel model(model_config_for(rc, ds, rc.train.modality), rc.train.seed);
  auto r = atomflow::train_unsupervised(rc.train, ds, model, out, resume, max_steps,
                                        &std::cout);
  if (!resume || !fs::exists(fs::path(out) / "run_config.json"))
    store_config_verbatim(config, out);
  std::cout << "trained " << r.step << " steps; best val F1 " << r.best_f1 << "; best at "
            << r.best_dir << "\n";
}

void cmd_train_cls(const std::string& config, const std::string& data,
                   const std::string& out, const std::string& scenario,
                   const std::string& pretrained, bool force) {
  RunConfig rc = parse_run_config(config);
  const atomflow::Scenario sc = [&] {
    try {
      return atomflow::scenario_from_string(scenario);
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }();
  if (sc != atomflow::Scenario::kArchitectureOnly && pretrained.empty())
    throw ConfigError("--scenario " + scenario + " requires --pretrained <checkpoint>");
  const atomflow::Dataset ds = atomflow::load_dataset(data);
  ensure_fresh_dir(out, force);
  atomflow::ModelConfig arch = model_config_for(rc, ds, rc.classifier.modality);
  auto r = atomflow::train_classifier(sc, ds, pretrained, rc.classifier, arch, out,
                                      &std::cout);
  store_config_verbatim(config, out);
  std::cout << "classifier (" << scenario << "): final val accuracy " << r.val_acc
            << " at " << out << "\n";
}

void cmd_eval_flow(const std::string& checkpoint, const std::string& data,
                   const std::string& split_str, const std::string& out, bool baseline,
                   int T_override, bool force) {
  const atomflow::Dataset ds = atomflow::load_dataset(data);
  const int split = parse_split(split_str);
  ensure_fresh_file(out, force);
  const json meta = atomflow::checkpoint_meta(checkpoint);
  // The checkpoint must have been trained against compatible codec geometry.
  const json& cd = meta.at("codec");
  AF_CHECK(cd.at("bins_per_axis").get<int>() == ds.codec.bins_per_axis &&
               cd.at("bound").get<double>() == ds.codec.bound &&
               cd.at("k_nn").get<int>() == ds.codec.k_nn,
           "codec mismatch between checkpoint (" << cd.dump() << ") and dataset");
  const json& gm = meta.at("geometry");
  AF_CHECK(gm.at("H").get<int>() == ds.geometry.H &&
               gm.at("W").get<int>() == ds.geometry.W &&
               gm.at("M").get<int>() == ds.geometry.M,
           "geometry mismatch between checkpoint (" << gm.dump() << ") and dataset ("
                                                    << ds.geometry.H << "x"
                                                    << ds.geometry.W << " M="
                                                    << ds.geometry.M << ")");
  const std::string modality =
      meta.at("train_config").at("modality").get<std::string>();
  const int T = T_override > 0 ? T_override : meta.at("train_config").at("T").get<int>();
  atomflow::SeqModel model(atomflow::model_config_from_meta(meta), 1);
  model.load_params(checkpoint);
  const atomflow::EvalResult r = atomflow::evaluate_model(model, ds, split, T, modality);

  std::string csv = "kind,split,modality,T,pairs,loss,f1";
  for (int t = 1; t <= T; ++t) csv += ",rmse_t" + std::to_string(t);
  csv += "\n";
  auto row = [&](const std::string& kind, const atomflow::EvalResult& e) {
    csv += kind + "," + split_str + "," + modality + "," + std::to_string(T) + "," +
           std::to_string(e.pairs) + "," + atomflow::train_detail::fmt_double(e.loss) +
           "," + atomflow::train_detail::fmt_double(e.f1);
    for (double v : e.rmse) csv += "," + atomflow::train_detail::fmt_double(v);
    csv += "\n";
  };
  row("model", r);
  if (baseline) row("zero_baseline", atomflow::evaluate_zero_baseline(ds, split, T));
  atomflow::write_text_file(out, csv);
  std::cout << "eval-flow: split " << split_str << ", " << r.pairs << " pairs, f1 "
            << r.f1 << ", rmse_t1 " << r.rmse.front() << ", rmse_t" << T << " "
            << r.rmse.back() << " -> " << out << "\n";
}

void cmd_eval_cls(const std::string& classifier, const std::string& data,
                  const std::string& split_str, const std::string& out, int num_samples,
                  bool force) {
  const atomflow::Dataset ds = atomflow::load_dataset(data);
  const int split = parse_split(split_str);
  ensure_fresh_dir(out, force);
  atomflow::ClassifierBundle b = atomflow::load_classifier(classifier);
  const json meta =
      json::parse(atomflow::read_text_file((fs::path(classifier) / "meta.json").string()));
  const std::string modality = meta.at("config").at("modality").get<std::string>();
  const int pretrain_T = meta.value("pretrain_T", 0);
  AF_CHECK(b.label_names == ds.label_names,
           "label names in classifier do not match dataset");
  const atomflow::ClsEval e =
      atomflow::eval_classifier(b.model, b.head, ds, split, modality, num_samples);
  std::string acc = "scenario,T,split,mean_per_class_accuracy,clips\n";
  acc += b.scenario + "," + std::to_string(pretrain_T) + "," + split_str + "," +
         atomflow::train_detail::fmt_double(e.mean_acc) + "," +
         std::to_string(ds.by_split[split].size()) + "\n";
  atomflow::write_text_file((fs::path(out) / "accuracy.csv").string(), acc);
  atomflow::write_confusion_csv(e.conf, ds.label_names,
                                (fs::path(out) / "confusion.csv").string());
  std::cout << "eval-cls (" << b.scenario << "): mean per-class accuracy " << e.mean_acc
            << " over " << ds.by_split[split].size() << " clips -> " << out << "\n";
}

void cmd_report(const std::string& runs, const std::string& out,
                const std::string& require, bool force) {
  if (!fs::exists(runs) || !fs::is_directory(runs))
    throw ConfigError("runs directory not found: " + runs);

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(runs))
    if (entry.is_directory()) names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());

  if (!require.empty()) {
    std::vector<std::string> missing;
    std::stringstream ss(require);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty() &&
          std::find(names.begin(), names.end(), item) == names.end())
        missing.push_back(item);
    if (!missing.empty()) {
      std::string msg = "missing runs:";
      for (const auto& m : missing) msg += " " + m;
      throw std::runtime_error(msg);
    }
  }
  // Only touch the output once the inputs are known to be present.
  ensure_fresh_dir(out, force);

  // rmse_curve.csv: one row per eval-flow artifact row, padded to the widest T.
  struct FlowRow {
    std::string run;
    std::vector<std::string> fields;  // kind,split,modality,T,pairs,loss,f1,rmse...
  };
  std::vector<FlowRow> flow_rows;
  int max_T = 0;
  std::vector<std::string> abl_rows;
  for (const auto& name : names) {
    const fs::path flow = fs::path(runs) / name / "eval_flow.csv";
    if (fs::exists(flow)) {
      std::istringstream in(atomflow::read_text_file(flow.string()));
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        FlowRow fr{name, atomflow::train_detail::split_csv_line(line)};
        AF_CHECK(fr.fields.size() >= 8, "malformed eval_flow.csv row in " << name);
        max_T = std::max(max_T, static_cast<int>(fr.fields.size()) - 7);
        flow_rows.push_back(std::move(fr));
      }
    }
    const fs::path acc = fs::path(runs) / name / "accuracy.csv";
    if (fs::exists(acc)) {
      std::istringstream in(atomflow::read_text_file(acc.string()));
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line))
        if (!line.empty()) abl_rows.push_back(name + "," + line);
    }
  }
  AF_CHECK(!flow_rows.empty() || !abl_rows.empty(),
           "no eval_flow.csv or accuracy.csv artifacts under " << runs);

  std::string curve = "run,kind,split,modality,T,pairs,loss,f1";
  for (int t = 1; t <= max_T; ++t) curve += ",rmse_t" + std::to_string(t);
  curve += "\n";
  for (const auto& fr : flow_rows) {
    curve += fr.run;
    for (const auto& f : fr.fields) curve += "," + f;
    for (int t = static_cast<int>(fr.fields.size()) - 7; t < max_T; ++t) curve += ",";
    curve += "\n";
  }
  atomflow::write_text_file((fs::path(out) / "rmse_curve.csv").string(), curve);

  std::string abl = "run,scenario,T,split,mean_per_class_accuracy,clips\n";
  for (const auto& r : abl_rows) abl += r + "\n";
  atomflow::write_text_file((fs::path(out) / "ablation.csv").string(), abl);
  std::cout << "report: " << flow_rows.size() << " flow rows, " << abl_rows.size()
            << " ablation rows -> " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"atomic 3D flow toolchain: quantized motion prediction and recognition"};
  app.require_subcommand(1);
  std::function<void()> run;

  std::string config, data, out, checkpoint, classifier, scenario, pretrained, split,
      require;
  bool force = false, resume = false, baseline = false;
  long long max_steps = -1;
  int num_samples = 25, T_override = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic RGB-D clip dataset");
  gen->add_option("--config", config, "Run config JSON")->required();
  gen->add_option("--out", out, "Output dataset directory")->required();
  gen->add_flag("--force", force, "Overwrite existing output");
  gen->callback([&] { run = [&] { cmd_gen_data(config, out, force); }; });

  auto* tu = app.add_subcommand("train-unsup", "Train the flow-prediction model");
  tu->add_option("--config", config)->required();
  tu->add_option("--data", data, "Dataset directory")->required();
  tu->add_option("--out", out, "Run output directory")->required();
  tu->add_flag("--resume", resume, "Resume from the last checkpoint in --out");
  tu->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
  tu->add_flag("--force", force);
  tu->callback(
      [&] { run = [&] { cmd_train_unsup(config, data, out, resume, max_steps, force); }; });

  auto* tc = app.add_subcommand("train-cls", "Train the activity classifier");
  tc->add_option("--config", config)->required();
  tc->add_option("--data", data)->required();
  tc->add_option("--out", out)->required();
  tc->add_option("--scenario", scenario, "architecture_only | finetune | frozen")
      ->required();
  tc->add_option("--pretrained", pretrained, "Pretrained checkpoint directory");
  tc->add_flag("--force", force);
  tc->callback([&] {
    run = [&] { cmd_train_cls(config, data, out, scenario, pretrained, force); };
  });

  auto* ef = app.add_subcommand("eval-flow", "Evaluate flow prediction RMSE/F1");
  ef->add_option("--checkpoint", checkpoint)->required();
  ef->add_option("--data", data)->required();
  ef->add_option("--split", split)->default_val("test");
  ef->add_option("--out", out, "Output CSV path")->required();
  ef->add_option("--T", T_override, "Override prediction horizon");
  ef->add_flag("--baseline", baseline, "Also evaluate the zero-flow baseline");
  ef->add_flag("--force", force);
  ef->callback([&] {
    run = [&] { cmd_eval_flow(checkpoint, data, split, out, baseline, T_override, force); };
  });

  auto* ec = app.add_subcommand("eval-cls", "Evaluate the activity classifier");
  ec->add_option("--classifier", classifier)->required();
  ec->add_option("--data", data)->required();
  ec->add_option("--split", split)->default_val("test");
  ec->add_option("--out", out, "Output directory for CSVs")->required();
  ec->add_option("--num-samples", num_samples, "Pair starts per clip");
  ec->add_flag("--force", force);
  ec->callback([&] {
    run = [&] { cmd_eval_cls(classifier, data, split, out, num_samples, force); };
  });

  auto* rp = app.add_subcommand("report", "Aggregate eval artifacts into report CSVs");
  rp->add_option("--runs", data, "Directory of run directories")->required();
  rp->add_option("--out", out)->required();
  rp->add_option("--require", require, "Comma-separated run names that must exist");
  rp->add_flag("--force", force);
  rp->callback([&] { run = [&] { cmd_report(data, out, require, force); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  try {
    run();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
