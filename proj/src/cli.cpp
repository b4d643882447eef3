#include "jointstereo/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "jointstereo/error.hpp"
#include "jointstereo/seeding.hpp"
#include "jointstereo/tensor_archive.hpp"
#include "jointstereo/toy.hpp"

namespace jointstereo {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kRunKeys = {"synthetic_manifest", "real_manifest", "eval_manifest",
                                        "output_dir", "d1_combine"};

std::string resolve(const std::string& path, const std::string& base_dir) {
  if (path.empty() || base_dir.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

}  // namespace

void RunConfig::validate() const {
  if (synthetic_manifest.empty()) throw ConfigError("config: synthetic_manifest is required");
  if (real_manifest.empty()) throw ConfigError("config: real_manifest is required");
  if (output_dir.empty()) throw ConfigError("config: output_dir is required");
  training.validate();
}

nlohmann::json to_json(const RunConfig& config) {
  nlohmann::json j = config.training;
  j["synthetic_manifest"] = config.synthetic_manifest;
  j["real_manifest"] = config.real_manifest;
  j["eval_manifest"] = config.eval_manifest.empty() ? config.real_manifest : config.eval_manifest;
  j["output_dir"] = config.output_dir;
  j["d1_combine"] = to_string(config.d1_combine);
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::string& base_dir) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  const nlohmann::json known_training = TrainingConfig{};
  for (const auto& [key, value] : j.items()) {
    if (!kRunKeys.contains(key) && !known_training.contains(key)) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  RunConfig c;
  try {
    nlohmann::json training = j;
    for (const auto& key : kRunKeys) training.erase(key);
    c.training = training.get<TrainingConfig>();
    c.synthetic_manifest = resolve(j.value("synthetic_manifest", std::string{}), base_dir);
    c.real_manifest = resolve(j.value("real_manifest", std::string{}), base_dir);
    c.eval_manifest = resolve(j.value("eval_manifest", std::string{}), base_dir);
    c.output_dir = resolve(j.value("output_dir", c.output_dir), base_dir);
    c.d1_combine = parse_d1_combine(j.value("d1_combine", std::string("and")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j, fs::path(path).parent_path().string());
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot write");
  out << text;
  if (!out) throw IoError(path.string(), "write failed");
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), ec.message());
}

// ---------------------------------------------------------------------------
// make-toy

struct MakeToyArgs {
  ToyConfig toy;
  std::string shift = "default";
  std::string out_dir;
};

int cmd_make_toy(MakeToyArgs args, std::ostream& out) {
  args.toy.shift = ShiftProfile::parse(args.shift);
  try {
    args.toy.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  const auto paths = write_toy_datasets(args.toy, args.out_dir);

  // A ready-to-use run config next to the data.
  RunConfig run;
  run.training.seed = args.toy.seed;
  nlohmann::json j = to_json(run);
  j["synthetic_manifest"] = "source/manifest.json";
  j["real_manifest"] = "target/manifest.json";
  j["eval_manifest"] = "target/manifest.json";
  j["output_dir"] = "run";
  write_text(fs::path(args.out_dir) / "config.json", j.dump(2) + "\n");
  out << "wrote " << args.toy.num_pairs << " pairs to " << paths.source << " and " << paths.target
      << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::string stage = "all";
  std::string resume;
  std::string ablate;
  std::string out;
  int64_t stop_after = -1;
};

std::optional<EvalReport> final_report(const RunConfig& run, const StereoMatcher& matcher,
                                       std::ostream& out) {
  const std::string manifest = run.eval_manifest.empty() ? run.real_manifest : run.eval_manifest;
  const auto data = Dataset::load(manifest, DatasetPurpose::kEvaluation);
  for (const auto& s : data.samples()) {
    if (!s.disparity) {
      out << "no final report: " << manifest << " has no ground-truth disparity\n";
      return std::nullopt;
    }
  }
  EvalOptions options;
  options.d1_combine = run.d1_combine;
  options.label = run.training.ablation.tag();
  return evaluate(matcher_predictor(matcher), data, options);
}

int cmd_train(const TrainArgs& args, std::ostream& out) {
  RunConfig run = RunConfig::load(args.config);
  if (!args.ablate.empty()) {
    const auto extra = Ablation::parse(args.ablate);
    run.training.ablation.fx |= extra.fx;
    run.training.ablation.fy |= extra.fy;
    run.training.ablation.corr |= extra.corr;
    run.training.ablation.ms |= extra.ms;
  }
  if (!args.out.empty()) run.output_dir = args.out;
  run.validate();

  const fs::path dir(run.output_dir);
  const fs::path checkpoints = dir / "checkpoints";
  ensure_directory(checkpoints);
  ensure_directory(dir / "reports");
  write_text(dir / "config.json", to_json(run).dump(2) + "\n");
  write_text(dir / "seed", std::to_string(run.training.seed) + "\n");

  auto synthetic = Dataset::load(run.synthetic_manifest, DatasetPurpose::kTraining);
  auto real = Dataset::load(run.real_manifest, DatasetPurpose::kTraining);

  std::optional<TrainingEngine> engine;
  if (!args.resume.empty()) {
    engine.emplace(TrainingEngine::resume(args.resume, std::move(synthetic), std::move(real)));
    const auto& stored = engine->config();
    if (stored.seed != run.training.seed || !(stored.generator == run.training.generator) ||
        !(stored.discriminator == run.training.discriminator) ||
        !(stored.matcher == run.training.matcher) ||
        !(stored.translation_optimizer == run.training.translation_optimizer) ||
        !(stored.stereo_optimizer == run.training.stereo_optimizer)) {
      throw ConfigError("resume: seed, architecture or optimizer settings differ from " +
                        args.resume);
    }
    engine->update_config(run.training);
  } else {
    engine.emplace(run.training, std::move(synthetic), std::move(real));
  }

  std::ofstream log(dir / "log.ndjson", std::ios::app);
  if (!log) throw IoError((dir / "log.ndjson").string(), "cannot open log");
  TrainingHooks hooks;
  hooks.on_record = [&log](const nlohmann::json& record) { log << record.dump() << "\n"; };
  engine->set_hooks(hooks);
  engine->set_diagnostic_path((checkpoints / "diagnostic.ckpt").string());
  if (args.stop_after >= 0) engine->stop_after(args.stop_after);

  auto finish_stage = [&](const std::string& name, bool completed) {
    log.flush();
    engine->save_checkpoint((checkpoints / "latest.ckpt").string());
    if (completed) {
      engine->save_checkpoint((checkpoints / (name + ".ckpt")).string());
      out << name << ": complete\n";
    } else {
      out << name << ": stopped; resume from " << (checkpoints / "latest.ckpt").string() << "\n";
    }
    return completed;
  };

  const bool all = args.stage == "all";
  bool ok = true;
  if (all || args.stage == "warmup-translation") {
    ok = finish_stage("warmup-translation", engine->warmup_translation());
  }
  if (ok && (all || args.stage == "warmup-stereo")) {
    ok = finish_stage("warmup-stereo", engine->warmup_stereo());
  }
  if (ok && (all || args.stage == "joint")) {
    ok = finish_stage("joint", engine->joint_train());
    if (ok) {
      if (auto report = final_report(run, engine->networks().matcher, out)) {
        write_report(*report, (dir / "reports" / "final").string());
        out << report->format_table();
      }
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string d1_mode = "and";
  std::string out = "eval";
  std::string predictor = "matcher";
};

StereoMatcher load_matcher(const std::string& path) {
  const auto archive = TensorArchive::load(path);
  const auto kind = archive.meta.value("kind", std::string{});
  if (kind == "training-state") return load_networks(path).matcher;
  if (kind == "matcher") {
    MatcherSpec spec;
    try {
      spec = archive.meta.at("spec").get<MatcherSpec>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ": corrupt matcher spec (" + e.what() + ")");
    }
    StereoMatcher matcher(spec);
    load_network(matcher, path);
    return matcher;
  }
  throw FormatError(path + ": expected a training-state or matcher checkpoint, found '" + kind +
                    "'");
}

int cmd_eval(const EvalArgs& args, std::ostream& out) {
  EvalOptions options;
  options.d1_combine = parse_d1_combine(args.d1_mode);
  Predictor predictor;
  if (args.predictor == "matcher") {
    if (args.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
    predictor = matcher_predictor(load_matcher(args.checkpoint));
    options.label = fs::path(args.checkpoint).stem().string();
  } else if (args.predictor == "ground-truth") {
    predictor = [](const torch::Tensor&, const torch::Tensor&, const StereoSample& s) {
      return s.disparity->values.clone();
    };
    options.label = "ground-truth";
  } else {
    predictor = [](const torch::Tensor& left, const torch::Tensor&, const StereoSample&) {
      return torch::zeros({1, left.size(2), left.size(3)});
    };
    options.label = "zero";
  }
  const auto data = Dataset::load(args.manifest, DatasetPurpose::kEvaluation);
  const auto report = evaluate(predictor, data, options);
  if (const auto parent = fs::path(args.out).parent_path(); !parent.empty()) {
    ensure_directory(parent);
  }
  write_report(report, args.out);
  out << report.format_table();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// translate

struct TranslateArgs {
  std::string checkpoint;
  std::string manifest;
  uint64_t seed = 0;
  std::optional<uint64_t> seed2;
  std::string out_dir;
};

torch::Tensor pad_to(const torch::Tensor& images, int64_t stride) {
  const int64_t pad_h = (stride - images.size(2) % stride) % stride;
  const int64_t pad_w = (stride - images.size(3) % stride) % stride;
  if (pad_h == 0 && pad_w == 0) return images;
  namespace F = torch::nn::functional;
  return F::pad(images, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReflect));
}

int cmd_translate(const TranslateArgs& args, std::ostream& out) {
  auto nets = load_networks(args.checkpoint);
  const auto data = Dataset::load(args.manifest, DatasetPurpose::kEvaluation);
  std::vector<uint64_t> seeds{args.seed};
  if (args.seed2) seeds.push_back(*args.seed2);
  const int64_t stride = nets.g_x2y->spec().total_stride();

  torch::NoGradGuard no_grad;
  double difference = 0;
  for (size_t i = 0; i < data.size(); ++i) {
    const auto& sample = data[i];
    const int64_t h = sample.height(), w = sample.width();
    const auto pair = pad_to(torch::stack({sample.left, sample.right}), stride);
    std::vector<torch::Tensor> outputs;
    for (const auto seed : seeds) {
      const auto z = NoiseMap::sample(derive_seed(seed, "translate", {i}), 2, pair.size(2),
                                      pair.size(3));
      auto image = nets.g_x2y->forward(pair, z).image.narrow(2, 0, h).narrow(3, 0, w);
      const fs::path dir = fs::path(args.out_dir) / ("seed-" + std::to_string(seed));
      ensure_directory(dir);
      write_image((dir / (sample.source_id + "_left.png")).string(), image[0]);
      write_image((dir / (sample.source_id + "_right.png")).string(), image[1]);
      outputs.push_back(image);
    }
    if (outputs.size() == 2) difference += (outputs[0] - outputs[1]).abs().mean().item<double>();
  }
  out << "translated " << data.size() << " pairs into " << args.out_dir << "\n";
  if (seeds.size() == 2 && data.size() > 0) {
    out << "mean L1 between seeds: " << difference / static_cast<double>(data.size()) << "\n";
  }
  return kExitOk;
}

void report_error(std::ostream& err, const char* kind, const std::string& message,
                  const std::string& path = "") {
  nlohmann::json j = {{"error", kind}, {"message", message}};
  if (!path.empty()) j["path"] = path;
  err << j.dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint domain translation and stereo matching on toy and benchmark data"};
  app.require_subcommand(1);

  MakeToyArgs toy;
  auto* make_toy = app.add_subcommand("make-toy", "Generate a toy source/target dataset");
  make_toy->add_option("--seed", toy.toy.seed, "Scene seed");
  make_toy->add_option("--count", toy.toy.num_pairs, "Number of pairs")->check(CLI::PositiveNumber);
  make_toy->add_option("--height", toy.toy.height, "Image height")->check(CLI::PositiveNumber);
  make_toy->add_option("--width", toy.toy.width, "Image width")->check(CLI::PositiveNumber);
  make_toy->add_option("--max-disparity", toy.toy.max_disparity, "Largest disparity")
      ->check(CLI::PositiveNumber);
  make_toy->add_option("--shift-profile", toy.shift,
                       "identity, default, or gamma=G,gain=R:G:B,noise=S");
  make_toy->add_option("--out-dir", toy.out_dir, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run training stages");
  train_cmd->add_option("--config", train.config, "Run config (JSON)")->required();
  train_cmd->add_option("--stage", train.stage, "Stage to run")
      ->check(CLI::IsMember({"warmup-translation", "warmup-stereo", "joint", "all"}));
  train_cmd->add_option("--resume", train.resume, "Training-state checkpoint to resume from");
  train_cmd->add_option("--ablate", train.ablate, "Comma-separated terms to disable: fx,fy,corr,ms");
  train_cmd->add_option("--out", train.out, "Run directory (overrides output_dir)");
  train_cmd->add_option("--stop-after", train.stop_after,
                        "Stop after this many iterations and checkpoint");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate disparity predictions");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Training-state or matcher checkpoint");
  eval_cmd->add_option("--manifest", eval.manifest, "Dataset manifest")->required();
  eval_cmd->add_option("--d1-mode", eval.d1_mode, "D1 combination")
      ->check(CLI::IsMember({"and", "or"}));
  eval_cmd->add_option("--out", eval.out, "Report path stem (.txt and .json are written)");
  eval_cmd->add_option("--predictor", eval.predictor, "matcher, ground-truth or zero")
      ->check(CLI::IsMember({"matcher", "ground-truth", "zero"}));

  TranslateArgs translate;
  std::optional<uint64_t> seed2;
  auto* translate_cmd = app.add_subcommand("translate", "Export G_x2y translations");
  translate_cmd->add_option("--checkpoint", translate.checkpoint, "Training-state checkpoint")
      ->required();
  translate_cmd->add_option("--manifest", translate.manifest, "Source manifest")->required();
  translate_cmd->add_option("--seed", translate.seed, "Noise seed");
  translate_cmd->add_option("--seed2", seed2, "Second noise seed for a variation pair");
  translate_cmd->add_option("--out-dir", translate.out_dir, "Output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what());
    err << app.help();
    return kExitUsage;
  }

  try {
    configure_compute();
    if (*make_toy) return cmd_make_toy(toy, out);
    if (*train_cmd) return cmd_train(train, out);
    if (*eval_cmd) return cmd_eval(eval, out);
    translate.seed2 = seed2;
    return cmd_translate(translate, out);
  } catch (const ConfigError& e) {
    report_error(err, "config", e.what());
    return kExitConfig;
  } catch (const IoError& e) {
    report_error(err, "io", e.what(), e.path());
    return kExitData;
  } catch (const FormatError& e) {
    report_error(err, "format", e.what());
    return kExitData;
  } catch (const NumericalAbort& e) {
    report_error(err, "numerical", e.what());
    return kExitNumerical;
  } catch (const ContractViolation& e) {
    report_error(err, "config", e.what());
    return kExitConfig;
  } catch (const UndefinedResult& e) {
    report_error(err, "data", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return kExitFailure;
  }
}

}  // namespace jointstereo
