#pragma once

// Command-line pipeline: gen-synth -> train -> infer -> localize -> eval.
// `pl2map --config FILE <command> ...` reads TOML/INI key = value options
// from the [<command>] section (keys are the long flag names); flags given on
// the command line win. Each run writes a JSON manifest next to its main
// output. Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include <chrono>
#include <ctime>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pl2map/dataio.hpp"
#include "pl2map/model.hpp"
#include "pl2map/pose.hpp"
#include "pl2map/training.hpp"

#ifndef PL2MAP_GIT_DESCRIBE
#define PL2MAP_GIT_DESCRIBE "unknown"
#endif

namespace pl2map {

namespace cli_detail {

inline std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    const long long v = std::stoll(item, &pos);
    if (pos != item.size() || v <= 0) throw std::invalid_argument("bad width list '" + s + "'");
    out.push_back(std::size_t(v));
  }
  return out;
}

inline std::vector<AttentionKind> parse_layers(const std::string& s) {
  std::vector<AttentionKind> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(attention_kind_from_string(item));
  return out;
}

inline std::string join_widths(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string join_layers(const std::vector<AttentionKind>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += std::string(i ? "," : "") + to_string(v[i]);
  return s;
}

inline std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct Manifest {
  std::string command;
  std::vector<std::string> args;
  std::string config;  // effective options, as a config file
  std::uint64_t seed = 0;
  std::string started = utc_now();
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

  void write(const fs::path& primary_output, std::ostream& err) const {
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    nlohmann::json j{{"command", command}, {"args", args},       {"config", config},      {"seed", seed},
                     {"git", PL2MAP_GIT_DESCRIBE}, {"started_utc", started}, {"elapsed_s", elapsed}};
    fs::path path = primary_output;
    path += ".manifest.json";
    detail::write_text_atomic(path, j.dump(2) + "\n");
    err << "manifest: " << path.string() << "\n";
  }
};

inline Split split_option(const std::string& s) {
  try {
    return split_from_string(s);
  } catch (const SceneError&) {
    throw CLI::ValidationError("--split", "must be train or test");
  }
}

}  // namespace cli_detail

/// Runs one command. `args` excludes the program name.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Point/line scene-coordinate regression and relocalization", "pl2map"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(PL2MAP_GIT_DESCRIBE));
  app.set_config("--config", "", "Options file with one [command] section per command");

  // gen-synth
  SyntheticSpec synth;
  std::string synth_out;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic scene directory");
  gen->add_option("--out", synth_out, "Output scene directory")->required();
  gen->add_option("--train-views", synth.train_views)->capture_default_str();
  gen->add_option("--test-views", synth.test_views)->capture_default_str();
  gen->add_option("--points", synth.points)->capture_default_str();
  gen->add_option("--lines", synth.lines)->capture_default_str();
  gen->add_option("--extent", synth.extent, "Side of the landmark cube (m)")->capture_default_str();
  gen->add_option("--camera-distance", synth.camera_distance, "Radius of the camera sphere (m)")->capture_default_str();
  gen->add_option("--dim", synth.descriptor_dim, "Descriptor dimension D")->capture_default_str();
  gen->add_option("--tokens", synth.line_tokens, "Tokens per line T")->capture_default_str();
  gen->add_option("--noise", synth.noise, "Descriptor noise sigma")->capture_default_str();
  gen->add_option("--dropout", synth.dropout, "Fraction of label-dropped landmarks")->capture_default_str();
  gen->add_option("--seed", synth.seed)->capture_default_str();

  // train
  std::string train_scene, train_out, train_log;
  ModelConfig model;
  std::string point_head = join_widths(model.point_head), line_head = join_widths(model.line_head),
              layers = join_layers(model.layers);
  TrainConfig tc;
  bool no_augment = false;
  auto* train = app.add_subcommand("train", "Train the network on a scene's train split");
  train->add_option("--scene", train_scene, "Scene directory")->required();
  train->add_option("--out", train_out, "Checkpoint path")->required();
  train->add_option("--log", train_log, "Training log path (default: <out>.log)");
  train->add_option("--iters", tc.iterations)->capture_default_str();
  train->add_option("--lr", tc.learning_rate)->capture_default_str();
  train->add_option("--decay", tc.decay)->capture_default_str();
  train->add_option("--milestones", tc.milestones)->capture_default_str();
  train->add_flag("--no-augment", no_augment, "Disable geometric and descriptor augmentation");
  train->add_option("--rotation-deg", tc.max_rotation_deg)->capture_default_str();
  train->add_option("--scale-min", tc.min_scale)->capture_default_str();
  train->add_option("--scale-max", tc.max_scale)->capture_default_str();
  train->add_option("--descriptor-noise", tc.descriptor_noise)->capture_default_str();
  train->add_option("--tau-max", tc.tau.tau_max)->capture_default_str();
  train->add_option("--tau-min", tc.tau.tau_min)->capture_default_str();
  train->add_option("--w-map", tc.weights.map)->capture_default_str();
  train->add_option("--w-reliability", tc.weights.reliability)->capture_default_str();
  train->add_option("--w-reprojection", tc.weights.reprojection)->capture_default_str();
  train->add_option("--log-every", tc.log_every)->capture_default_str();
  train->add_option("--seed", tc.seed, "Seeds initialization (seed) and sampling/augmentation (seed + 1)")
      ->capture_default_str();
  train->add_option("--heads", model.heads)->capture_default_str();
  train->add_option("--layers", layers, "Comma-separated self/cross pattern")->capture_default_str();
  train->add_option("--point-head", point_head, "Hidden widths of the point head")->capture_default_str();
  train->add_option("--line-head", line_head, "Hidden widths of the line head")->capture_default_str();
  train->add_option("--expansion", model.encoder_expansion, "Line encoder MLP width / D")->capture_default_str();
  train->add_option("--beta", model.beta)->capture_default_str();

  // infer
  std::string infer_ckpt, infer_scene, infer_out, infer_map, infer_split = "test";
  double map_threshold = 0.5;
  auto* infer = app.add_subcommand("infer", "Predict 3D points/lines for a scene split");
  infer->add_option("--checkpoint", infer_ckpt)->required();
  infer->add_option("--scene", infer_scene)->required();
  infer->add_option("--out", infer_out, "Predictions file")->required();
  infer->add_option("--split", infer_split)->capture_default_str();
  infer->add_option("--map", infer_map, "Also export the reliability-filtered map here");
  infer->add_option("--map-threshold", map_threshold)->capture_default_str();

  // localize
  std::string loc_pred, loc_ckpt, loc_scene, loc_out, loc_split = "test";
  LocalizeOptions lo;
  bool no_lines = false;
  auto* loc = app.add_subcommand("localize", "Estimate camera poses for a scene split");
  auto* pred_opt = loc->add_option("--predictions", loc_pred, "Predictions from infer");
  auto* ckpt_opt = loc->add_option("--checkpoint", loc_ckpt, "Run the network instead of reading predictions");
  pred_opt->excludes(ckpt_opt);
  loc->add_option("--scene", loc_scene)->required();
  loc->add_option("--out", loc_out, "Pose estimates file")->required();
  loc->add_option("--split", loc_split)->capture_default_str();
  loc->add_flag("--no-lines", no_lines, "Point-only RANSAC and refinement");
  loc->add_option("--threshold-px", lo.threshold_px)->capture_default_str();
  loc->add_option("--confidence", lo.confidence)->capture_default_str();
  loc->add_option("--max-iters", lo.max_iterations)->capture_default_str();
  loc->add_option("--min-point-reliability", lo.min_point_reliability)->capture_default_str();
  loc->add_option("--min-line-reliability", lo.min_line_reliability)->capture_default_str();
  loc->add_option("--seed", lo.seed, "RANSAC seed; image i uses seed + i")->capture_default_str();

  // eval
  std::string eval_est, eval_scene, eval_gt, eval_out, eval_split = "test";
  auto* ev = app.add_subcommand("eval", "Median errors and accuracy at 5 cm / 5 deg");
  ev->add_option("--estimates", eval_est)->required();
  auto* scene_opt = ev->add_option("--scene", eval_scene, "Ground truth from a scene split");
  auto* gt_opt = ev->add_option("--ground-truth", eval_gt, "Ground truth from a poses file");
  scene_opt->excludes(gt_opt);
  ev->add_option("--split", eval_split)->capture_default_str();
  ev->add_option("--out", eval_out, "Also write the row and per-image errors here");

  const std::vector<std::string> original = args;
  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
    if (loc->parsed() && loc_pred.empty() && loc_ckpt.empty())
      throw CLI::RequiredError("--predictions or --checkpoint");
    if (ev->parsed() && eval_scene.empty() && eval_gt.empty())
      throw CLI::RequiredError("--scene or --ground-truth");
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    Manifest manifest;
    manifest.args = original;
    if (gen->parsed()) {
      manifest.command = "gen-synth";
      manifest.config = "[gen-synth]\n" + gen->config_to_str(true, false);
      manifest.seed = synth.seed;
      const auto scene = generate_synthetic(synth);
      save_scene(scene, synth_out);
      err << "wrote " << scene.images.size() << " images to " << synth_out << "\n";
      manifest.write(fs::path(synth_out) / "scene.json", err);
    } else if (train->parsed()) {
      manifest.command = "train";
      manifest.config = "[train]\n" + train->config_to_str(true, false);
      manifest.seed = tc.seed;
      const auto scene = load_scene(train_scene);
      model.descriptor_dim = scene.descriptor_dim;
      model.line_tokens = scene.line_tokens;
      model.point_head = parse_widths(point_head);
      model.line_head = parse_widths(line_head);
      model.layers = parse_layers(layers);
      tc.augment = !no_augment;
      const std::uint64_t init_seed = tc.seed;
      TrainConfig run = tc;
      run.seed = tc.seed + 1;
      Trainer trainer(scene, init_params<float>(model, init_seed), run);
      if (train_log.empty()) train_log = train_out + ".log";
      std::string log_text;
      TrainLog log;
      const std::size_t every = std::max<std::size_t>(1, tc.log_every);
      while (!trainer.done()) {
        const StepStats s = trainer.step();
        log.add(s);
        if ((s.iteration + 1) % every == 0 || trainer.done()) {
          const std::string line = log.flush();
          err << line << "\n";
          log_text += line + "\n";
        }
      }
      save_checkpoint({trainer.params(), trainer.iteration()}, train_out);
      detail::write_text_atomic(train_log, log_text);
      err << "wrote " << train_out << " (" << ModelLayout(model).parameter_count() << " parameters)\n";
      manifest.write(train_out, err);
    } else if (infer->parsed()) {
      manifest.command = "infer";
      manifest.config = "[infer]\n" + infer->config_to_str(true, false);
      const Split split = split_option(infer_split);
      const auto ck = load_checkpoint(infer_ckpt);
      const auto scene = load_scene(infer_scene);
      std::vector<ImagePrediction> preds;
      for (std::size_t i : scene.indices(split)) {
        const auto& im = scene.images[i];
        preds.push_back({im.id, predict(ck.params, im.descriptors, im.line_tokens)});
      }
      save_predictions(preds, ck.params.config.beta, infer_out);
      if (!infer_map.empty()) detail::write_text_atomic(infer_map, export_map(preds, map_threshold));
      err << "predicted " << preds.size() << " images\n";
      manifest.write(infer_out, err);
    } else if (loc->parsed()) {
      manifest.command = "localize";
      manifest.config = "[localize]\n" + loc->config_to_str(true, false);
      manifest.seed = lo.seed;
      const Split split = split_option(loc_split);
      const auto scene = load_scene(loc_scene);
      std::map<std::string, Prediction<float>> preds;
      std::optional<Checkpoint> ck;
      if (!loc_pred.empty()) {
        for (auto& p : load_predictions(loc_pred)) preds.emplace(p.id, std::move(p.prediction));
      } else {
        ck = load_checkpoint(loc_ckpt);
      }
      std::vector<PoseRecord> poses;
      const auto idx = scene.indices(split);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& im = scene.images[idx[k]];
        Prediction<float> p;
        if (ck) {
          p = predict(ck->params, im.descriptors, im.line_tokens);
        } else {
          const auto it = preds.find(im.id);
          if (it == preds.end()) throw std::runtime_error("no predictions for image '" + im.id + "'");
          p = it->second;
        }
        LocalizeOptions opt = lo;
        opt.seed = lo.seed + k;
        const auto e = localize(correspondences_from(p, im), scene.intrinsics(im), !no_lines, opt);
        poses.push_back({im.id, e.success, e.pose, e.num_point_inliers(), e.num_line_inliers()});
      }
      save_poses(poses, loc_out);
      err << "localized " << poses.size() << " images\n";
      manifest.write(loc_out, err);
    } else if (ev->parsed()) {
      manifest.command = "eval";
      manifest.config = "[eval]\n" + ev->config_to_str(true, false);
      std::vector<PoseRecord> gt;
      if (!eval_scene.empty()) {
        const auto scene = load_scene(eval_scene);
        for (std::size_t i : scene.indices(split_option(eval_split)))
          gt.push_back({scene.images[i].id, true, scene.images[i].pose, 0, 0});
      } else {
        gt = load_poses(eval_gt);
      }
      std::map<std::string, PoseRecord> est;
      for (auto& p : load_poses(eval_est)) est.emplace(p.id, p);
      std::vector<PoseErrors> errors;
      std::string detail_text;
      for (const auto& g : gt) {
        const auto it = est.find(g.id);
        PoseErrors e{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
        if (it != est.end() && it->second.success) e = pose_errors(it->second.pose, g.pose);
        errors.push_back(e);
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s %.4f %.4f\n", g.id.c_str(), e.translation_cm, e.rotation_deg);
        detail_text += buf;
      }
      const std::string row = format_eval_row(eval_metrics(errors));
      out << row << "\n";
      if (!eval_out.empty()) {
        detail::write_text_atomic(eval_out, "# median cm / median deg / accuracy %\n" + row +
                                                "\n# id translation_cm rotation_deg\n" + detail_text);
        manifest.write(eval_out, err);
      }
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run_cli(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace pl2map
