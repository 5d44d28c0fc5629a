// skipgs_cli: generate synthetic scenes, train baseline or gated runs, and
// compare two runs.
//
//   skipgs_cli gen-scene --out run1 [--gaussians 64 --cams 13 --size 64x64 --seed 7]
//   skipgs_cli train --scene run1 --out run1/skipgs [--skipgs on --budget on --iters 3000 --td 1500]
//   skipgs_cli compare run1/baseline/report.json run1/skipgs/report.json --out run1/cmp
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "skipgs/skipgs.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace skipgs;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

std::string view_file(std::int64_t view_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "view_%04lld.ppm", static_cast<long long>(view_id));
  return buf;
}

void parse_size(const std::string& s, int& w, int& h) {
  const auto x = s.find('x');
  try {
    std::size_t used = 0;
    if (x == std::string::npos) throw std::invalid_argument(s);
    w = std::stoi(s.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(s);
    h = std::stoi(s.substr(x + 1), &used);
    if (used != s.size() - x - 1) throw std::invalid_argument(s);
  } catch (const std::logic_error&) {
    throw UsageError("--size must look like WIDTHxHEIGHT, got '" + s + "'");
  }
}

bool parse_switch(const std::string& flag, const std::string& v) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw UsageError(flag + " must be 'on' or 'off', got '" + v + "'");
}

void write_json(const fs::path& p, const json& j) { write_file(p.string(), j.dump(2) + "\n"); }

// ---- gen-scene ----

struct GenOptions {
  SceneSpec spec;
  std::string size = "64x64";
  std::string init_mode = "perturbed_gt";
  std::string out;
};

void add_gen_scene(CLI::App& app, GenOptions& o) {
  auto* c = app.add_subcommand("gen-scene", "Generate a synthetic scene and its target images");
  c->add_option("--out", o.out, "Output directory")->required();
  c->add_option("--gaussians", o.spec.num_gt_gaussians, "Ground-truth Gaussian count")->capture_default_str();
  c->add_option("--cams", o.spec.num_cams, "Camera count (the last one is held out)")->capture_default_str();
  c->add_option("--size", o.size, "Image size WIDTHxHEIGHT")->capture_default_str();
  c->add_option("--seed", o.spec.seed, "Scene seed")->capture_default_str();
  c->add_option("--extent", o.spec.extent, "Ground-truth world radius")->capture_default_str();
  c->add_option("--ring-radius", o.spec.ring_radius, "Camera ring radius")->capture_default_str();
  c->add_option("--elevation", o.spec.elevation_deg, "Camera elevation in degrees")->capture_default_str();
  c->add_option("--fov", o.spec.fov_deg, "Horizontal field of view in degrees")->capture_default_str();
  c->add_option("--scale-min", o.spec.scale_min, "Smallest GT std-dev, fraction of extent")->capture_default_str();
  c->add_option("--scale-max", o.spec.scale_max, "Largest GT std-dev, fraction of extent")->capture_default_str();
  c->add_option("--init-mode", o.init_mode, "perturbed_gt or random_volume")->capture_default_str();
  c->add_option("--init-count", o.spec.init_count, "Initial Gaussian count for training")->capture_default_str();
  c->add_option("--noise", o.spec.noise_sigma, "Init position noise (perturbed_gt)")->capture_default_str();
  c->add_option("--init-scale", o.spec.init_scale, "Init std-dev, fraction of extent")->capture_default_str();
}

int run_gen_scene(GenOptions& o) {
  parse_size(o.size, o.spec.width, o.spec.height);
  try {
    o.spec.init_mode = parse_init_mode(o.init_mode);
    o.spec.validate();
  } catch (const ValidationError& e) {
    throw UsageError(e.what());
  }
  const GeneratedScene g = generate_scene(o.spec);
  const fs::path out(o.out);
  fs::create_directories(out);
  json doc = scene_to_json(g.gt, g.cams);
  doc["spec"] = o.spec;
  write_json(out / "scene.json", doc);
  for (std::size_t i = 0; i < g.cams.size(); ++i) write_ppm((out / view_file(g.cams[i].view_id)).string(), g.targets[i]);
  std::cout << "wrote " << (out / "scene.json").string() << ": " << g.gt.size() << " Gaussians, " << g.cams.size()
            << " views of " << o.spec.width << "x" << o.spec.height << ", seed " << o.spec.seed << "\n";
  return 0;
}

// ---- train ----

struct TrainOptions {
  std::string scene;
  std::string out;
  std::string config;
  std::string skipgs = "on";
  std::string budget = "on";
  std::int64_t iters = 0, td = 0, warmup = 0, eval_every = 0;
  std::uint64_t seed = 0;
  int threads = 1;
  int eval_view = -1;
  CLI::App* cmd = nullptr;

  bool given(const char* flag) const { return cmd->count(flag) > 0; }
};

void add_train(CLI::App& app, TrainOptions& o) {
  auto* c = app.add_subcommand("train", "Train one arm on a generated scene");
  o.cmd = c;
  c->add_option("--scene", o.scene, "Scene directory written by gen-scene")->required();
  c->add_option("--out", o.out, "Output directory (default: <scene>/<arm>)");
  c->add_option("--config", o.config, "JSON file with TrainConfig fields; flags override it");
  c->add_option("--skipgs", o.skipgs, "Backward gating after densification: on|off");
  c->add_option("--budget", o.budget, "Minimum backward budget: on|off");
  c->add_option("--iters", o.iters, "Total iterations T");
  c->add_option("--td", o.td, "Last densification iteration T_d");
  c->add_option("--warmup", o.warmup, "Forced-backward warmup length W");
  c->add_option("--seed", o.seed, "Training seed (view order, splits)");
  c->add_option("--eval-every", o.eval_every, "Held-out evaluation interval");
  c->add_option("--eval-view", o.eval_view, "Held-out camera index (-1: last)");
  c->add_option("--threads", o.threads, "Renderer worker threads")->envname("SKIPGS_THREADS");
}

TrainConfig resolve_train_config(const TrainOptions& o) {
  TrainConfig cfg;
  if (!o.config.empty()) {
    try {
      cfg = json::parse(read_file(o.config)).get<TrainConfig>();
    } catch (const json::exception& e) {
      throw UsageError("--config: " + std::string(e.what()));
    } catch (const ValidationError& e) {
      throw UsageError("--config: " + std::string(e.what()));
    }
  }
  if (o.given("--skipgs")) cfg.skipgs_enabled = parse_switch("--skipgs", o.skipgs);
  if (o.given("--budget")) cfg.gating.budget_enabled = parse_switch("--budget", o.budget);
  if (o.given("--iters")) cfg.total_iters = o.iters;
  if (o.given("--td")) cfg.densify_end = o.td;
  if (o.given("--warmup")) cfg.gating.warmup_len = o.warmup;
  if (o.given("--seed")) cfg.seed = o.seed;
  if (o.given("--eval-every")) cfg.eval_every = o.eval_every;
  if (o.given("--eval-view")) cfg.eval_view = o.eval_view;
  if (o.given("--threads")) cfg.threads = o.threads;
  if (cfg.threads < 1) throw UsageError("--threads must be >= 1");
  return cfg;
}

int run_train(const TrainOptions& o) {
  TrainConfig cfg = resolve_train_config(o);

  const fs::path dir(o.scene);
  const std::string scene_bytes = read_file((dir / "scene.json").string());
  json doc;
  try {
    doc = json::parse(scene_bytes);
  } catch (const json::exception& e) {
    throw ValidationError("scene.json: " + std::string(e.what()));
  }
  const SceneDocument sd = scene_from_json(doc);
  if (!doc.contains("spec")) throw ValidationError("scene.json: missing spec");
  const SceneSpec spec = doc.at("spec").get<SceneSpec>();
  std::vector<Image<float>> targets;
  for (const auto& cam : sd.cams) {
    targets.push_back(read_ppm((dir / view_file(cam.view_id)).string()));
    if (targets.back().width != cam.width || targets.back().height != cam.height)
      throw ValidationError(view_file(cam.view_id) + ": size does not match its camera");
  }
  cfg.densify.scene_extent = camera_extent(sd.cams);
  try {
    cfg.validate(sd.cams.size());
  } catch (const ValidationError& e) {
    throw UsageError(e.what());
  }

  const SceneModel<float> init = init_training_scene(spec, sd.scene);
  TrainResult r = train(init, sd.cams, targets, cfg);

  const fs::path out = o.out.empty() ? dir / cfg.arm() : fs::path(o.out);
  fs::create_directories(out);
  write_file((out / "train_log.csv").string(), train_log_csv(r.report));
  write_file((out / "densify_events.csv").string(), densify_log_csv(r.report));
  json rep = report_to_json(r.report);
  rep["scene_hash"] = hex64(fnv1a(scene_bytes));
  rep["seed"] = cfg.seed;
  rep["ablation"] = cfg.skipgs_enabled && !cfg.gating.budget_enabled;
  rep["config"] = cfg;
  write_json(out / "report.json", rep);
  write_json(out / "checkpoint.json", checkpoint_to_json(r, cfg.total_iters));
  RenderSettings<float> rs;
  rs.threads = cfg.threads;
  const Camera<float>& held = sd.cams[cfg.eval_index(sd.cams.size())];
  write_ppm((out / ("render_" + view_file(held.view_id))).string(), render(r.scene, held, rs).image);

  std::cout << "arm " << cfg.arm() << ": psnr " << rep.at("psnr").dump() << " dB, backward ratio "
            << r.report.backward_ratio_post() << ", T_post " << r.report.t_post_us() / 1e6 << " s -> "
            << out.string() << "\n";
  return 0;
}

// ---- compare ----

struct CompareOptions {
  std::string a, b, out;
};

void add_compare(CLI::App& app, CompareOptions& o) {
  auto* c = app.add_subcommand("compare", "Difference two report.json files (second minus first)");
  c->add_option("reference", o.a, "Reference report.json or run directory (e.g. baseline)")->required();
  c->add_option("candidate", o.b, "Candidate report.json or run directory (e.g. skipgs)")->required();
  c->add_option("--out", o.out, "Output directory (default: next to the candidate)");
}

constexpr const char* kPlotScript = R"py(#!/usr/bin/env python3
# PSNR against wall-clock time and backward ratio against iteration for the
# runs listed in compare.json.
import csv
import json
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
with open(os.path.join(here, "compare.json")) as f:
    cmp = json.load(f)

fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(11, 4))
for side in ("reference", "candidate"):
    rep_path = cmp[side]["report"]
    with open(rep_path) as f:
        rep = json.load(f)
    label = "%s (%s)" % (rep["arm"], side)
    ev = rep["evals"]
    ax0.plot([e["elapsed_us"] / 1e6 for e in ev], [float(e["psnr"]) for e in ev], label=label)
    ts, ratio, done = [], [], 0
    with open(os.path.join(os.path.dirname(rep_path), "train_log.csv")) as f:
        for row in csv.DictReader(f):
            t = int(row["t"])
            if t <= rep["densify_end"]:
                continue
            done += int(row["executed"])
            ts.append(t)
            ratio.append(done / (t - rep["densify_end"]))
    ax1.plot(ts, ratio, label=label)
ax0.set_xlabel("training time [s]")
ax0.set_ylabel("held-out PSNR [dB]")
ax1.set_xlabel("iteration")
ax1.set_ylabel("cumulative backward ratio")
for ax in (ax0, ax1):
    ax.grid(alpha=0.3)
    ax.legend()
fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else os.path.join(here, "compare.png")
fig.savefig(out, dpi=120)
print("wrote", out)
)py";

json load_report(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

double number(const json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    return std::numeric_limits<double>::quiet_NaN();
  }
  return j.get<double>();
}

json difference(double a, double b) {
  if (a == b) return 0.0;  // also covers inf == inf
  const double d = b - a;
  if (std::isfinite(d)) return d;
  return std::isnan(d) ? json("nan") : json(d > 0 ? "inf" : "-inf");
}

// A run directory stands for the report.json inside it.
std::string report_path(const std::string& p) {
  return fs::is_directory(p) ? (fs::path(p) / "report.json").string() : p;
}

int run_compare(const CompareOptions& in) {
  CompareOptions o = in;
  o.a = report_path(o.a);
  o.b = report_path(o.b);
  const json a = load_report(o.a), b = load_report(o.b);
  json warnings = json::array();
  bool incomparable = false;
  try {
    if (a.at("scene_hash") != b.at("scene_hash")) {
      incomparable = true;
      warnings.push_back("scene hashes differ: " + a.at("scene_hash").get<std::string>() + " vs " +
                         b.at("scene_hash").get<std::string>());
    }
    if (a.at("seed") != b.at("seed")) {
      incomparable = true;
      warnings.push_back("seeds differ: " + a.at("seed").dump() + " vs " + b.at("seed").dump());
    }
    if (a.at("total_iters") != b.at("total_iters") || a.at("densify_end") != b.at("densify_end"))
      warnings.push_back("iteration schedules differ");

    auto side = [](const std::string& path, const json& r) {
      return json{{"report", fs::absolute(path).string()}, {"arm", r.at("arm")}, {"psnr", r.at("psnr")},
                  {"ssim", r.at("ssim")}, {"t_post_us", r.at("t_post_us")},
                  {"backward_count_post", r.at("backward_count_post")}};
    };
    json cmp = {
        {"reference", side(o.a, a)},
        {"candidate", side(o.b, b)},
        {"delta_psnr", difference(number(a.at("psnr")), number(b.at("psnr")))},
        {"delta_ssim", difference(a.at("ssim").get<double>(), b.at("ssim").get<double>())},
        {"delta_t_post_us", b.at("t_post_us").get<std::int64_t>() - a.at("t_post_us").get<std::int64_t>()},
        {"delta_backward_count",
         b.at("backward_count_post").get<std::int64_t>() - a.at("backward_count_post").get<std::int64_t>()},
        {"incomparable", incomparable},
        {"warnings", warnings},
    };
    const fs::path out = o.out.empty() ? fs::path(o.b).parent_path() / "compare" : fs::path(o.out);
    fs::create_directories(out);
    write_json(out / "compare.json", cmp);
    write_file((out / "plot_compare.py").string(), kPlotScript);
    for (const auto& w : warnings) std::cerr << "warning: " << w.get<std::string>() << "\n";
    std::cout << "delta psnr " << cmp.at("delta_psnr").dump() << " dB, delta T_post " << cmp.at("delta_t_post_us")
              << " us, delta backward " << cmp.at("delta_backward_count") << (incomparable ? " (incomparable)" : "")
              << " -> " << (out / "compare.json").string() << "\n";
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report is missing a field: ") + e.what());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Backward-gated Gaussian splatting trainer"};
  app.require_subcommand(1);
  GenOptions gen;
  TrainOptions tr;
  CompareOptions cmp;
  add_gen_scene(app, gen);
  add_train(app, tr);
  add_compare(app, cmp);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (app.got_subcommand("gen-scene")) return run_gen_scene(gen);
    if (app.got_subcommand("train")) return run_train(tr);
    return run_compare(cmp);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
