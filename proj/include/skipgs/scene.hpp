#pragma once

// Synthetic scenes: ground-truth Gaussians, a ring of cameras, self-rendered
// targets, the initial model handed to training, and the on-disk formats
// (scene.json and binary PPM images).

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "skipgs/error.hpp"
#include "skipgs/image.hpp"
#include "skipgs/model.hpp"
#include "skipgs/renderer.hpp"

namespace skipgs {

enum class InitMode { perturbed_gt, random_volume };

struct SceneSpec {
  int num_gt_gaussians = 64;
  double extent = 1.0;  // world radius holding the ground truth
  int num_cams = 13;
  int width = 64;
  int height = 64;
  double ring_radius = 3.5;
  double elevation_deg = 20.0;
  double fov_deg = 45.0;
  double scale_min = 0.06;  // ground-truth std-dev range, fraction of extent
  double scale_max = 0.25;
  std::uint64_t seed = 0;
  InitMode init_mode = InitMode::perturbed_gt;
  int init_count = 32;
  double noise_sigma = 0.05;
  double init_scale = 0.08;  // fraction of extent

  void validate() const {
    if (num_gt_gaussians < 1) throw ValidationError("scene: need at least one ground-truth Gaussian");
    if (num_cams < 3) throw ValidationError("scene: need at least 3 cameras (2 train + 1 eval)");
    if (width < 4 || height < 4) throw ValidationError("scene: image must be at least 4x4");
    if (!(extent > 0 && ring_radius > extent)) throw ValidationError("scene: ring radius must exceed a positive extent");
    if (!(fov_deg > 0 && fov_deg < 180)) throw ValidationError("scene: fov must lie in (0, 180) degrees");
    if (!(scale_min > 0 && scale_max >= scale_min)) throw ValidationError("scene: invalid scale range");
    if (init_count < 1) throw ValidationError("scene: init_count must be positive");
    if (!(noise_sigma >= 0) || !(init_scale > 0)) throw ValidationError("scene: invalid init noise or scale");
  }
};

struct GeneratedScene {
  SceneModel<float> gt;
  std::vector<Camera<float>> cams;
  std::vector<Image<float>> targets;
};

namespace detail {

inline Vec3<float> uniform_in_ball(std::mt19937_64& rng, double radius) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (;;) {
    const Vec3<double> p(u(rng), u(rng), u(rng));
    if (p.squaredNorm() <= 1.0) return (p * radius).cast<float>();
  }
}

}  // namespace detail

inline std::vector<Camera<float>> make_camera_ring(const SceneSpec& spec) {
  std::vector<Camera<float>> cams;
  const double elev = spec.elevation_deg * std::numbers::pi / 180.0;
  const double focal = 0.5 * spec.width / std::tan(0.5 * spec.fov_deg * std::numbers::pi / 180.0);
  for (int k = 0; k < spec.num_cams; ++k) {
    const double az = 2.0 * std::numbers::pi * k / spec.num_cams;
    const Vec3<double> eye(spec.ring_radius * std::cos(elev) * std::cos(az), spec.ring_radius * std::sin(elev),
                           spec.ring_radius * std::cos(elev) * std::sin(az));
    cams.push_back(look_at<double>(eye, Vec3<double>::Zero(), Vec3<double>(0, 1, 0), focal, spec.width, spec.height, k)
                       .cast<float>());
  }
  return cams;
}

inline GeneratedScene generate_scene(const SceneSpec& spec, const RenderSettings<float>& rs = {}) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  GeneratedScene out;
  out.gt.background = Vec3<float>::Zero();
  const double lo = std::log(spec.scale_min * spec.extent), hi = std::log(spec.scale_max * spec.extent);
  for (int i = 0; i < spec.num_gt_gaussians; ++i) {
    Gaussian3D<float> g;
    g.mu = detail::uniform_in_ball(rng, spec.extent);
    Vec4<double> q(normal(rng), normal(rng), normal(rng), normal(rng));
    g.rot = q.normalized().cast<float>();
    for (int k = 0; k < 3; ++k) g.log_scale[k] = static_cast<float>(lo + (hi - lo) * unit(rng));
    g.opacity_logit = static_cast<float>(logit(0.5 + 0.45 * unit(rng)));
    for (int k = 0; k < 3; ++k) g.color[k] = static_cast<float>(unit(rng));
    out.gt.gaussians.push_back(g);
  }
  out.cams = make_camera_ring(spec);
  for (const auto& cam : out.cams) out.targets.push_back(render(out.gt, cam, rs).image);
  return out;
}

inline SceneModel<float> init_training_scene(const SceneSpec& spec, const SceneModel<float>& gt) {
  spec.validate();
  std::mt19937_64 rng(spec.seed ^ 0xA5A5A5A5DEADBEEFull);
  std::normal_distribution<double> normal(0.0, 1.0);

  SceneModel<float> s;
  s.background = gt.background;
  auto reset = [&](const Vec3<float>& mu) {
    Gaussian3D<float> g;
    g.mu = mu;
    g.log_scale = Vec3<float>::Constant(static_cast<float>(std::log(spec.init_scale * spec.extent)));
    g.opacity_logit = logit(0.1f);
    g.color = Vec3<float>::Constant(0.5f);
    return g;
  };
  if (spec.init_mode == InitMode::perturbed_gt) {
    if (static_cast<std::size_t>(spec.init_count) > gt.size())
      throw ValidationError("scene: init_count exceeds the number of ground-truth Gaussians");
    for (int i = 0; i < spec.init_count; ++i) {
      Vec3<double> mu = gt.gaussians[i].mu.cast<double>();
      if (spec.noise_sigma > 0)
        for (int k = 0; k < 3; ++k) mu[k] += spec.noise_sigma * normal(rng);
      s.gaussians.push_back(reset(mu.cast<float>()));
    }
  } else {
    for (int i = 0; i < spec.init_count; ++i) s.gaussians.push_back(reset(detail::uniform_in_ball(rng, spec.extent)));
  }
  return s;
}

// Camera-centre spread used as the densification size reference.
inline double camera_extent(const std::vector<Camera<float>>& cams) {
  Vec3<double> mean = Vec3<double>::Zero();
  for (const auto& c : cams) mean += c.center().cast<double>();
  mean /= static_cast<double>(cams.size());
  double r = 0;
  for (const auto& c : cams) r = std::max(r, (c.center().cast<double>() - mean).norm());
  return 1.1 * r;
}

// ---- PPM (P6, maxval 255) ----

inline std::uint8_t quantize_channel(float v) {
  // nearbyint under the default rounding mode rounds half to even.
  const double q = std::nearbyint(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
  return static_cast<std::uint8_t>(q);
}

inline std::string encode_ppm(const Image<float>& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.reserve(out.size() + img.size());
  for (float v : img.data) out.push_back(static_cast<char>(quantize_channel(v)));
  return out;
}

inline Image<float> decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw ValidationError(std::string("ppm: malformed header (") + what + ")");
    return std::stol(bytes.substr(start, pos - start));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ValidationError("ppm: missing P6 magic");
  pos = 2;
  const long w = read_int("width"), h = read_int("height"), maxval = read_int("maxval");
  if (maxval != 255) throw ValidationError("ppm: only maxval 255 is supported, got " + std::to_string(maxval));
  if (w <= 0 || h <= 0) throw ValidationError("ppm: non-positive dimensions");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ValidationError("ppm: malformed header (separator)");
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3;
  if (bytes.size() - pos < need) throw ValidationError("ppm: truncated payload");
  Image<float> img(static_cast<int>(w), static_cast<int>(h));
  for (std::size_t i = 0; i < need; ++i) img.data[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
  return img;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path);
}

inline void write_ppm(const std::string& path, const Image<float>& img) { write_file(path, encode_ppm(img)); }
inline Image<float> read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }

// ---- scene.json ----

template <typename T>
nlohmann::json vec_json(const Eigen::MatrixBase<T>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

template <typename V>
V json_vec(const nlohmann::json& j) {
  V v;
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != v.size())
    throw ValidationError("scene json: vector has the wrong length");
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = j[static_cast<std::size_t>(i)].get<typename V::Scalar>();
  return v;
}

inline nlohmann::json scene_to_json(const SceneModel<float>& scene, const std::vector<Camera<float>>& cams) {
  nlohmann::json gs = nlohmann::json::array();
  for (const auto& g : scene.gaussians)
    gs.push_back({{"mu", vec_json(g.mu)},
                  {"rot", vec_json(g.rot)},
                  {"log_scale", vec_json(g.log_scale)},
                  {"opacity_logit", g.opacity_logit},
                  {"color", vec_json(g.color)}});
  nlohmann::json cs = nlohmann::json::array();
  for (const auto& c : cams) {
    nlohmann::json rot = nlohmann::json::array();
    for (int r = 0; r < 3; ++r) rot.push_back(vec_json(c.rotation.row(r).transpose().eval()));
    cs.push_back({{"world_to_cam", {{"rotation", rot}, {"translation", vec_json(c.translation)}}},
                  {"focal", vec_json(c.focal)},
                  {"principal", vec_json(c.principal)},
                  {"size", {c.width, c.height}},
                  {"view_id", c.view_id}});
  }
  return {{"gaussians", gs}, {"background", vec_json(scene.background)}, {"cameras", cs}};
}

struct SceneDocument {
  SceneModel<float> scene;
  std::vector<Camera<float>> cams;
};

inline SceneDocument scene_from_json(const nlohmann::json& j) {
  SceneDocument doc;
  try {
    for (const auto& g : j.at("gaussians")) {
      Gaussian3D<float> x;
      x.mu = json_vec<Vec3<float>>(g.at("mu"));
      x.rot = json_vec<Vec4<float>>(g.at("rot"));
      x.log_scale = json_vec<Vec3<float>>(g.at("log_scale"));
      x.opacity_logit = g.at("opacity_logit").get<float>();
      x.color = json_vec<Vec3<float>>(g.at("color"));
      doc.scene.gaussians.push_back(x);
    }
    doc.scene.background = json_vec<Vec3<float>>(j.at("background"));
    for (const auto& c : j.value("cameras", nlohmann::json::array())) {
      Camera<float> cam;
      const auto& rot = c.at("world_to_cam").at("rotation");
      if (rot.size() != 3) throw ValidationError("scene json: rotation must have 3 rows");
      for (int r = 0; r < 3; ++r) cam.rotation.row(r) = json_vec<Vec3<float>>(rot[r]).transpose();
      cam.translation = json_vec<Vec3<float>>(c.at("world_to_cam").at("translation"));
      cam.focal = json_vec<Vec2<float>>(c.at("focal"));
      cam.principal = json_vec<Vec2<float>>(c.at("principal"));
      cam.width = c.at("size").at(0).get<int>();
      cam.height = c.at("size").at(1).get<int>();
      cam.view_id = c.at("view_id").get<std::int64_t>();
      doc.cams.push_back(cam);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("scene json: ") + e.what());
  }
  return doc;
}

// 64-bit FNV-1a, used to tell whether two runs trained on the same scene.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline const char* init_mode_name(InitMode m) { return m == InitMode::perturbed_gt ? "perturbed_gt" : "random_volume"; }

inline InitMode parse_init_mode(const std::string& s) {
  if (s == "perturbed_gt") return InitMode::perturbed_gt;
  if (s == "random_volume") return InitMode::random_volume;
  throw ValidationError("unknown init mode '" + s + "'");
}

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = {{"num_gt_gaussians", s.num_gt_gaussians}, {"extent", s.extent},
       {"num_cams", s.num_cams},                 {"size", {s.width, s.height}},
       {"ring_radius", s.ring_radius},           {"elevation_deg", s.elevation_deg},
       {"fov_deg", s.fov_deg},                   {"scale_min", s.scale_min},
       {"scale_max", s.scale_max},               {"seed", s.seed},
       {"init_mode", init_mode_name(s.init_mode)}, {"init_count", s.init_count},
       {"noise_sigma", s.noise_sigma},           {"init_scale", s.init_scale}};
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
  s.num_gt_gaussians = j.value("num_gt_gaussians", s.num_gt_gaussians);
  s.extent = j.value("extent", s.extent);
  s.num_cams = j.value("num_cams", s.num_cams);
  if (j.contains("size")) {
    s.width = j.at("size").at(0).get<int>();
    s.height = j.at("size").at(1).get<int>();
  }
  s.ring_radius = j.value("ring_radius", s.ring_radius);
  s.elevation_deg = j.value("elevation_deg", s.elevation_deg);
  s.fov_deg = j.value("fov_deg", s.fov_deg);
  s.scale_min = j.value("scale_min", s.scale_min);
  s.scale_max = j.value("scale_max", s.scale_max);
  s.seed = j.value("seed", s.seed);
  if (j.contains("init_mode")) s.init_mode = parse_init_mode(j.at("init_mode").get<std::string>());
  s.init_count = j.value("init_count", s.init_count);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.init_scale = j.value("init_scale", s.init_scale);
}

}  // namespace skipgs
