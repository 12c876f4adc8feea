#pragma once

// Command-line front end: prepare, synth, train, infer, refine, eval, export.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "fconv/checkpoint.hpp"
#include "fconv/config.hpp"
#include "fconv/eval.hpp"
#include "fconv/pipeline.hpp"
#include "fconv/synthetic.hpp"

namespace fconv {

namespace cli_detail {

inline std::string frame_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

inline std::vector<SceneSample> load_dataset(const std::filesystem::path& root, bool with_labels, bool need_proposals) {
  const DatasetPaths ds{root};
  std::vector<FrameProposal> props;
  const bool have_props = std::filesystem::exists(ds.proposals());
  if (have_props)
    props = load_proposals(ds.proposals());
  else if (need_proposals)
    throw MissingFileError("missing " + ds.proposals().string());
  std::vector<SceneSample> scenes;
  for (const auto& id : list_frames(ds)) {
    SceneSample s = load_scene(ds, id, props, with_labels);
    // Without a proposal file, training falls back to the labels' 2D boxes.
    if (!have_props && s.labels)
      for (const auto& l : *s.labels)
        if (l.category >= 0)
          s.proposals.push_back({l.image_box[0], l.image_box[1], l.image_box[2], l.image_box[3], l.category, 1.0});
    scenes.push_back(std::move(s));
  }
  return scenes;
}

inline std::map<std::string, std::vector<Label>> load_label_map(const std::filesystem::path& root) {
  const DatasetPaths ds{root};
  std::map<std::string, std::vector<Label>> out;
  for (const auto& id : list_frames(ds))
    out[id] = std::filesystem::exists(ds.label(id)) ? load_kitti_labels(ds.label(id)) : std::vector<Label>{};
  return out;
}

template <class T>
Model<T> load_model(const std::filesystem::path& path, const std::string& stage) {
  Model<T> m = model_from_checkpoint_data<T>(load_checkpoint(path));
  if (m.spec.stage != stage)
    throw ConfigError("checkpoint " + path.string() + " holds a '" + m.spec.stage + "' model, expected '" + stage + "'");
  return m;
}

}  // namespace cli_detail

/// Entry point of the fconv executable. Returns the process exit code; errors are reported on
/// `err` as a single line "error: code=<kind> msg=<text>".
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Frustum ConvNet 3D detector"};
  app.require_subcommand(1);
  std::string config_path, preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::vector<std::string> overrides;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "configuration file (key = value lines)");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--workers", workers, "worker threads");
    sub->add_option("--preset", preset, "network preset")->check(CLI::IsMember(preset_names()));
    sub->add_option("overrides", overrides, "key=value configuration overrides");
  };

  std::string data, out_path, checkpoint, detections, frame, stage = "detect";
  std::optional<std::size_t> count;

  auto* prepare = app.add_subcommand("prepare", "compute per-category mean box sizes from labels");
  prepare->add_option("--data", data, "dataset directory")->required();
  prepare->add_option("--out", out_path, "write the resolved config with the new sizes here");
  auto* synth = app.add_subcommand("synth", "write synthetic scenes in the dataset layout");
  synth->add_option("--out", out_path, "output dataset directory")->required();
  synth->add_option("--count", count, "number of scenes");
  auto* train = app.add_subcommand("train", "train a detector or refiner");
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out_path, "checkpoint to write")->required();
  train->add_option("--stage", stage, "detect or refine")->check(CLI::IsMember({"detect", "refine"}));
  auto* infer = app.add_subcommand("infer", "run the first stage on every frame");
  infer->add_option("--data", data, "dataset directory")->required();
  infer->add_option("--checkpoint", checkpoint, "detector checkpoint")->required();
  infer->add_option("--out", out_path, "detection file to write")->required();
  auto* refine = app.add_subcommand("refine", "refine first-stage detections");
  refine->add_option("--data", data, "dataset directory")->required();
  refine->add_option("--checkpoint", checkpoint, "refiner checkpoint")->required();
  refine->add_option("--detections", detections, "first-stage detection file")->required();
  refine->add_option("--out", out_path, "detection file to write")->required();
  auto* eval = app.add_subcommand("eval", "average precision against the labels");
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--detections", detections, "detection file")->required();
  eval->add_option("--out", out_path, "write key=value results here");
  auto* exporter = app.add_subcommand("export", "write one frame as an OBJ file");
  exporter->add_option("--data", data, "dataset directory")->required();
  exporter->add_option("--frame", frame, "frame id")->required();
  exporter->add_option("--detections", detections, "optional detection file");
  exporter->add_option("--out", out_path, "OBJ file to write")->required();
  for (auto* sub : {prepare, synth, train, infer, refine, eval, exporter}) common(sub);

  auto fail = [&](ErrorKind kind, const std::string& msg) {
    std::string one_line = msg;
    for (char& ch : one_line)
      if (ch == '\n' || ch == '\r') ch = ' ';
    err << "error: code=" << to_string(kind) << " msg=" << one_line << "\n";
    return static_cast<int>(kind);
  };

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      return fail(ErrorKind::config, e.what());
    }

    Config cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    if (!preset.empty()) cfg.set("net.preset", preset);
    if (seed) cfg.set("seed", std::to_string(*seed));
    if (workers) cfg.set("workers", std::to_string(*workers));
    if (count) cfg.set("synth.count", std::to_string(*count));
    for (const auto& kv : overrides) cfg.apply_override(kv);
    out << "# resolved config\n" << cfg.dump() << "# end config\n";
    const std::uint64_t rng_seed = cfg.count("seed");

    if (*prepare) {
      std::map<std::string, std::pair<MeanSize, std::size_t>> acc;
      for (const auto& [id, labels] : cli_detail::load_label_map(data))
        for (const auto& l : labels) {
          if (l.category < 0) continue;
          auto& [m, n] = acc.try_emplace(l.type, MeanSize{0.0, 0.0, 0.0}, 0).first->second;
          m.l += l.box.l;
          m.w += l.box.w;
          m.h += l.box.h;
          ++n;
        }
      if (acc.empty()) throw MalformedFileError("no labeled objects of a known category under " + data);
      std::vector<std::pair<std::string, MeanSize>> sizes;
      for (const auto& name : category_names()) {
        const auto it = acc.find(name);
        if (it == acc.end()) continue;
        const double n = static_cast<double>(it->second.second);
        sizes.push_back({name, {it->second.first.l / n, it->second.first.w / n, it->second.first.h / n}});
        out << "mean_size " << name << " count " << it->second.second << " l " << detail::format_fixed(sizes.back().second.l)
            << " w " << detail::format_fixed(sizes.back().second.w) << " h " << detail::format_fixed(sizes.back().second.h)
            << "\n";
      }
      cfg.set("anchors.mean_sizes", format_mean_sizes(sizes));
      out << "anchors.mean_sizes = " << cfg.get("anchors.mean_sizes") << "\n";
      if (!out_path.empty()) detail::write_text(out_path, cfg.dump());
      return 0;
    }

    if (*synth) {
      const SyntheticConfig sc = synthetic_config(cfg);
      const DatasetPaths ds{out_path};
      const double jitter = cfg.real("synth.proposal_jitter");
      std::vector<FrameProposal> props;
      for (std::size_t i = 0; i < cfg.count("synth.count"); ++i) {
        Rng rng = item_rng(rng_seed, i, 0);
        const std::string id = cli_detail::frame_name(i);
        const SceneSample s = make_synthetic_scene(sc, rng, id);
        save_kitti_cloud(ds.cloud(id), s.cloud);
        detail::write_text(ds.calib(id), serialize_kitti_calib(s.calib));
        detail::write_text(ds.label(id), serialize_kitti_labels(*s.labels));
        for (const auto& p : s.proposals)
          props.push_back({id, jitter > 0.0 ? augment_proposal(p, rng, {jitter, jitter, 0.0, 0.0}) : p});
      }
      detail::write_text(ds.proposals(), serialize_proposals(props));
      out << "wrote " << cfg.count("synth.count") << " scenes to " << out_path << "\n";
      return 0;
    }

    if (*train) {
      const auto scenes = cli_detail::load_dataset(data, true, false);
      Rng rng(rng_seed);
      const bool refiner = stage == "refine";
      Model<float> model(refiner ? refiner_spec(cfg) : detector_spec(cfg), rng);
      out << "model " << model.spec.stage << " parameters " << model.net.parameter_count() << "\n";
      const TrainLog log = refiner ? train_refiner(model, scenes, refine_train_config(cfg), refine_config(cfg), rng, &out)
                                   : train_detector(model, scenes, train_config(cfg), rng, &out);
      CheckpointData ck = model_to_checkpoint(model);
      ck.meta["config.resolved"] = cfg.dump();
      save_checkpoint(out_path, ck);
      out << "trained " << log.steps << " steps, checkpoint " << out_path << "\n";
      return 0;
    }

    if (*infer) {
      Model<float> model = cli_detail::load_model<float>(checkpoint, "detect");
      const auto scenes = cli_detail::load_dataset(data, false, true);
      const InferConfig ic = infer_config(cfg);
      std::vector<DetectionResult> all;
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        const auto dets = infer_scene(model, scenes[i], ic, i);
        all.insert(all.end(), dets.begin(), dets.end());
      }
      save_detections(out_path, all);
      out << "wrote " << all.size() << " detections for " << scenes.size() << " frames to " << out_path << "\n";
      return 0;
    }

    if (*refine) {
      Model<float> model = cli_detail::load_model<float>(checkpoint, "refine");
      const auto scenes = cli_detail::load_dataset(data, false, false);
      const auto dets = load_detections(detections);
      const InferConfig ic = infer_config(cfg);
      const RefineConfig rc = refine_config(cfg);
      std::vector<DetectionResult> all;
      for (std::size_t i = 0; i < scenes.size(); ++i) {
        std::vector<DetectionResult> mine;
        for (const auto& d : dets)
          if (d.frame_id == scenes[i].frame_id) mine.push_back(d);
        const auto r = refine_scene(model, scenes[i], mine, rc, ic, i);
        all.insert(all.end(), r.begin(), r.end());
      }
      save_detections(out_path, all);
      out << "wrote " << all.size() << " refined detections to " << out_path << "\n";
      return 0;
    }

    if (*eval) {
      const auto labels = cli_detail::load_label_map(data);
      const auto dets = load_detections(detections);
      const auto scenes = make_eval_scenes(labels, dets);
      const auto results = evaluate(scenes, eval_config(cfg));
      out << format_results_table(results);
      if (!out_path.empty()) detail::write_text(out_path, format_results_kv(results));
      return 0;
    }

    if (*exporter) {
      const DatasetPaths ds{data};
      SceneSample s;
      s.cloud = load_kitti_cloud(ds.cloud(frame));
      s.calib = load_kitti_calib(ds.calib(frame));
      std::vector<OrientedBox3D> boxes;
      std::vector<std::string> names;
      if (std::filesystem::exists(ds.label(frame)))
        for (const auto& l : load_kitti_labels(ds.label(frame))) {
          boxes.push_back(l.box);
          names.push_back("label_" + l.type + "_" + std::to_string(boxes.size() - 1));
        }
      if (!detections.empty())
        for (const auto& d : load_detections(detections))
          if (d.frame_id == frame) {
            boxes.push_back(d.box);
            names.push_back("det_" + category_name(d.category) + "_" + std::to_string(boxes.size() - 1));
          }
      detail::write_text(out_path, export_obj(rect_cloud(s), boxes, names));
      out << "wrote " << out_path << "\n";
      return 0;
    }
    return fail(ErrorKind::config, "no subcommand");
  } catch (const Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(ErrorKind::io, e.what());
  } catch (const std::exception& e) {
    err << "error: code=other msg=" << e.what() << "\n";
    return 1;
  }
}

}  // namespace fconv
