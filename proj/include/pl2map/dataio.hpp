#pragma once

// On-disk formats and the synthetic scene generator.
//
// Scene directory:  scene.json (dims, cameras, image list) + images/<id>.bin.
// Image record:     "PL2I" u32 version, u32 array count, then named arrays.
// Array:            u16 name length, name, u8 dtype (1 = f32, 2 = f64), u8 rank,
//                   u64 dims[rank], little-endian payload.
// Checkpoint:       "PL2M" u32 version, u32 json length, model config JSON,
//                   u64 iteration, u32 tensor count, per tensor u8 rank +
//                   u64 dims + f32 payload, then u64 FNV-1a of everything before.
// Predictions:      "PL2P" u32 version, f64 beta, u32 image count, per image a
//                   u16-prefixed id and two arrays (points [N,4], lines [M,7]).

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "pl2map/geometry.hpp"
#include "pl2map/model.hpp"
#include "pl2map/pose.hpp"
#include "pl2map/scene.hpp"

namespace pl2map {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

inline constexpr std::uint32_t kSceneVersion = 1;
inline constexpr std::uint32_t kImageVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kPredictionsVersion = 1;

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Byte-level helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void name(const std::string& s) {
    if (s.size() > 0xffff) throw FormatError("name too long: " + s.substr(0, 32) + "...");
    put<std::uint16_t>(std::uint16_t(s.size()));
    raw(s.data(), s.size());
  }
  template <typename S>
  void values(std::span<const S> v) {
    if constexpr (std::endian::native == std::endian::little) {
      raw(v.data(), v.size() * sizeof(S));
    } else {
      for (S x : v) put(x);
    }
  }
  template <typename S>
  void array(const std::string& n, const Tensor<S>& t) {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
    name(n);
    put<std::uint8_t>(std::is_same_v<S, float> ? 1 : 2);
    put<std::uint8_t>(std::uint8_t(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(d);
    values<S>(t.values());
  }
  std::vector<char>& bytes() { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& bytes, std::string what, std::size_t end = std::string::npos)
      : bytes_(bytes), end_(std::min(end, bytes.size())), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }
  std::string name() {
    const std::size_t n = get<std::uint16_t>();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void magic(const char (&m)[5]) {
    need(4);
    if (std::memcmp(bytes_.data() + pos_, m, 4) != 0) fail(std::string("bad magic, expected ") + m);
    pos_ += 4;
  }
  template <typename S>
  void values(std::span<S> out) {
    need(out.size() * sizeof(S));
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(S));
      pos_ += out.size() * sizeof(S);
    } else {
      for (S& x : out) x = get<S>();
    }
  }
  Shape shape(std::size_t rank) {
    Shape s;
    std::size_t total = 1;
    for (std::size_t i = 0; i < rank; ++i) {
      s.push_back(std::size_t(get<std::uint64_t>()));
      if (s.back() != 0 && total > (end_ - pos_) / s.back()) fail("array dimensions exceed file size");
      total *= s.back();
    }
    return s;
  }
  template <typename S>
  Tensor<S> array(const std::string& expected_name) {
    const std::string n = name();
    if (n != expected_name) fail("expected array '" + expected_name + "', found '" + n + "'");
    const int dtype = get<std::uint8_t>();
    const int want = std::is_same_v<S, float> ? 1 : 2;
    if (dtype != want) fail("array '" + n + "' has dtype code " + std::to_string(dtype) + ", expected " + std::to_string(want));
    Tensor<S> t(shape(get<std::uint8_t>()));
    values<S>(t.values());
    return t;
  }
  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ == end_; }
  [[noreturn]] void fail(const std::string& msg) const { throw FormatError(what_ + ": " + msg); }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) fail("truncated (need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ")");
  }
  const std::vector<char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

/// Writes to a sibling temporary and renames it over the target.
inline void write_file_atomic(const fs::path& path, const char* data, std::size_t n) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(data, std::streamsize(n));
    out.flush();
    if (!out) throw FormatError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_file_atomic(const fs::path& path, const std::vector<char>& bytes) {
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline std::uint64_t fnv1a64(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

inline std::vector<char> encode_image(const ImageRecord& im) {
  detail::ByteWriter w;
  w.raw("PL2I", 4);
  w.put<std::uint32_t>(kImageVersion);
  w.put<std::uint32_t>(7);
  const auto& q = im.pose.rotation;
  const auto& t = im.pose.translation;
  w.array("pose", Tensor<double>({7}, {q.w(), q.x(), q.y(), q.z(), t.x(), t.y(), t.z()}));
  w.array("keypoints", im.keypoints);
  w.array("descriptors", im.descriptors);
  w.array("point_labels", im.point_labels);
  w.array("line_endpoints", im.line_endpoints);
  w.array("line_tokens", im.line_tokens);
  w.array("line_labels", im.line_labels);
  return std::move(w.bytes());
}

/// Decodes arrays only; id, camera and split come from the manifest.
inline void decode_image(const std::vector<char>& bytes, ImageRecord& im) {
  detail::ByteReader r(bytes, "image '" + im.id + "'");
  r.magic("PL2I");
  const auto version = r.get<std::uint32_t>();
  if (version != kImageVersion)
    throw VersionError("image '" + im.id + "': record version " + std::to_string(version) + ", expected " +
                       std::to_string(kImageVersion));
  if (r.get<std::uint32_t>() != 7) r.fail("expected 7 arrays");
  const auto pose = r.array<double>("pose");
  if (pose.shape() != Shape{7}) r.fail("pose must have 7 values");
  im.pose.rotation = Eigen::Quaterniond(pose[0], pose[1], pose[2], pose[3]);
  im.pose.translation = Eigen::Vector3d(pose[4], pose[5], pose[6]);
  im.keypoints = r.array<double>("keypoints");
  im.descriptors = r.array<float>("descriptors");
  im.point_labels = r.array<double>("point_labels");
  im.line_endpoints = r.array<double>("line_endpoints");
  im.line_tokens = r.array<float>("line_tokens");
  im.line_labels = r.array<double>("line_labels");
  if (!r.at_end()) r.fail("trailing bytes");
}

/// Writes scene.json and one record per image under dir/images.
inline void save_scene(const SceneDataset& scene, const fs::path& dir) {
  scene.validate();
  nlohmann::json m;
  m["format"] = "pl2map-scene";
  m["version"] = kSceneVersion;
  m["descriptor_dim"] = scene.descriptor_dim;
  m["line_tokens"] = scene.line_tokens;
  m["cameras"] = nlohmann::json::array();
  for (const auto& K : scene.cameras)
    m["cameras"].push_back({{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy}, {"width", K.width}, {"height", K.height}});
  m["images"] = nlohmann::json::array();
  for (const auto& im : scene.images) {
    const std::string file = "images/" + im.id + ".bin";
    m["images"].push_back({{"id", im.id}, {"camera", im.camera}, {"split", to_string(im.split)}, {"file", file}});
    detail::write_file_atomic(dir / file, encode_image(im));
  }
  detail::write_text_atomic(dir / "scene.json", m.dump(2) + "\n");
}

inline SceneDataset load_scene(const fs::path& dir) {
  const fs::path manifest = dir / "scene.json";
  std::ifstream in(manifest);
  if (!in) throw FormatError("cannot open " + manifest.string());
  SceneDataset scene;
  try {
    const nlohmann::json m = nlohmann::json::parse(in);
    if (m.value("format", "") != "pl2map-scene") throw FormatError(manifest.string() + ": not a scene manifest");
    const auto version = m.at("version").get<std::uint32_t>();
    if (version != kSceneVersion)
      throw VersionError(manifest.string() + ": scene version " + std::to_string(version) + ", expected " +
                         std::to_string(kSceneVersion));
    scene.descriptor_dim = m.at("descriptor_dim").get<std::size_t>();
    scene.line_tokens = m.at("line_tokens").get<std::size_t>();
    for (const auto& c : m.at("cameras")) {
      Intrinsics K;
      K.fx = c.at("fx").get<double>();
      K.fy = c.at("fy").get<double>();
      K.cx = c.at("cx").get<double>();
      K.cy = c.at("cy").get<double>();
      K.width = c.at("width").get<int>();
      K.height = c.at("height").get<int>();
      scene.cameras.push_back(K);
    }
    for (const auto& e : m.at("images")) {
      ImageRecord im;
      im.id = e.at("id").get<std::string>();
      im.camera = e.at("camera").get<std::size_t>();
      im.split = split_from_string(e.at("split").get<std::string>());
      decode_image(detail::read_file(dir / e.at("file").get<std::string>()), im);
      scene.images.push_back(std::move(im));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(manifest.string() + ": " + e.what());
  }
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t train_views = 100;
  std::size_t test_views = 20;
  std::size_t points = 300;
  std::size_t lines = 60;
  double extent = 10;           // landmarks fill a cube of this side, centered at the origin
  double camera_distance = 20;  // radius of the camera sphere
  std::size_t descriptor_dim = 256;
  std::size_t line_tokens = 12;
  double noise = 0.01;   // per-view descriptor noise sigma
  double dropout = 0.2;  // fraction of landmarks whose labels are marked r = 0
  double min_segment_px = 10;
  Intrinsics intrinsics;
  std::uint64_t seed = 0;

  void validate() const {
    if (train_views + test_views == 0 || points + lines == 0)
      throw std::invalid_argument("synthetic spec: counts must be positive");
    if (!(extent > 0) || !(camera_distance > 0)) throw std::invalid_argument("synthetic spec: extent must be positive");
    if (descriptor_dim == 0 || line_tokens < 2) throw std::invalid_argument("synthetic spec: bad descriptor dims");
    if (!(noise >= 0) || !(dropout >= 0 && dropout <= 1)) throw std::invalid_argument("synthetic spec: bad noise/dropout");
    intrinsics.validate();
  }
};

/// Camera looking from `center` toward `target`, world z as the up hint.
inline Pose look_at(const Eigen::Vector3d& center, const Eigen::Vector3d& target) {
  const Eigen::Vector3d z = (target - center).normalized();
  Eigen::Vector3d up = Eigen::Vector3d::UnitZ();
  if (std::abs(z.dot(up)) > 0.99) up = Eigen::Vector3d::UnitY();
  const Eigen::Vector3d x = up.cross(z).normalized();  // image x axis
  const Eigen::Vector3d y = z.cross(x);                // image y points down
  Eigen::Matrix3d R;
  R.row(0) = x;
  R.row(1) = y;
  R.row(2) = z;
  return Pose(R, -R * center);
}

/// Random landmarks with fixed unit descriptors, viewed by cameras on a sphere.
/// Observations are exact projections (noise only touches descriptors). A
/// landmark is kept in a view when it projects inside the image at valid depth;
/// a line also needs its 2D segment to be at least min_segment_px long. Exactly
/// round(dropout * count) point landmarks and line landmarks are label-dropped:
/// their observations stay, their labels become zeros with r = 0.
inline SceneDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> cube(-0.5 * spec.extent, 0.5 * spec.extent);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t D = spec.descriptor_dim, T = spec.line_tokens;

  auto unit_descriptor = [&] {
    Eigen::VectorXd d(D);
    for (std::size_t i = 0; i < D; ++i) d[Eigen::Index(i)] = gauss(rng);
    return Eigen::VectorXd(d.normalized());
  };
  auto dropped_set = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<bool> out(n, false);
    const auto k = std::size_t(std::llround(spec.dropout * double(n)));
    for (std::size_t i = 0; i < k; ++i) out[idx[i]] = true;
    return out;
  };

  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::VectorXd> point_desc;
  for (std::size_t i = 0; i < spec.points; ++i) {
    points.emplace_back(cube(rng), cube(rng), cube(rng));
    point_desc.push_back(unit_descriptor());
  }
  std::vector<Line3> lines;
  std::vector<std::pair<Eigen::VectorXd, Eigen::VectorXd>> line_desc;
  for (std::size_t i = 0; i < spec.lines; ++i) {
    lines.push_back({{cube(rng), cube(rng), cube(rng)}, {cube(rng), cube(rng), cube(rng)}});
    auto a = unit_descriptor();
    line_desc.emplace_back(a, unit_descriptor());
  }
  const auto point_dropped = dropped_set(spec.points);
  const auto line_dropped = dropped_set(spec.lines);

  SceneDataset scene;
  scene.descriptor_dim = D;
  scene.line_tokens = T;
  scene.cameras.push_back(spec.intrinsics);
  const Intrinsics& K = scene.cameras[0];

  auto visible = [&](const Pose& pose, const Eigen::Vector3d& X, Eigen::Vector2d& px) {
    const Eigen::Vector3d c = pose.transform(X);
    if (!depth_valid(c.z())) return false;
    pinhole(K, c.x(), c.y(), c.z(), px.x(), px.y());
    return K.contains(px);
  };

  const std::size_t views = spec.train_views + spec.test_views;
  for (std::size_t v = 0; v < views; ++v) {
    const bool train = v < spec.train_views;
    char id[32];
    std::snprintf(id, sizeof id, "%s_%04zu", train ? "train" : "test", train ? v : v - spec.train_views);
    ImageRecord im;
    im.id = id;
    im.split = train ? Split::train : Split::test;
    const Eigen::Vector3d dir = Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng)).normalized();
    const Eigen::Vector3d target(0.1 * cube(rng), 0.1 * cube(rng), 0.1 * cube(rng));
    im.pose = look_at(spec.camera_distance * dir, target);

    std::vector<std::size_t> pts;
    std::vector<Eigen::Vector2d> kps;
    for (std::size_t i = 0; i < spec.points; ++i) {
      Eigen::Vector2d px;
      if (visible(im.pose, points[i], px)) {
        pts.push_back(i);
        kps.push_back(px);
      }
    }
    std::vector<std::size_t> lns;
    std::vector<Segment2> segs;
    for (std::size_t i = 0; i < spec.lines; ++i) {
      Segment2 s;
      if (visible(im.pose, lines[i].p, s.p) && visible(im.pose, lines[i].q, s.q) &&
          (s.q - s.p).norm() >= spec.min_segment_px) {
        lns.push_back(i);
        segs.push_back(s);
      }
    }

    const std::size_t N = pts.size(), M = lns.size();
    im.keypoints = Tensor<double>({N, 2});
    im.descriptors = Tensor<float>({N, D});
    im.point_labels = Tensor<double>({N, 4});
    for (std::size_t k = 0; k < N; ++k) {
      const std::size_t i = pts[k];
      im.keypoints(k, 0) = kps[k].x();
      im.keypoints(k, 1) = kps[k].y();
      for (std::size_t d = 0; d < D; ++d)
        im.descriptors(k, d) = float(point_desc[i][Eigen::Index(d)] + spec.noise * gauss(rng));
      if (!point_dropped[i]) {
        for (int c = 0; c < 3; ++c) im.point_labels(k, std::size_t(c)) = points[i][c];
        im.point_labels(k, 3) = 1;
      }
    }
    im.line_endpoints = Tensor<double>({M, 4});
    im.line_tokens = Tensor<float>({M, T, D});
    im.line_labels = Tensor<double>({M, 7});
    for (std::size_t k = 0; k < M; ++k) {
      const std::size_t i = lns[k];
      im.line_endpoints(k, 0) = segs[k].p.x();
      im.line_endpoints(k, 1) = segs[k].p.y();
      im.line_endpoints(k, 2) = segs[k].q.x();
      im.line_endpoints(k, 3) = segs[k].q.y();
      for (std::size_t t = 0; t < T; ++t) {
        const double s = double(t) / double(T - 1);  // from the P end to the Q end
        for (std::size_t d = 0; d < D; ++d) {
          const auto e = Eigen::Index(d);
          im.line_tokens[(k * T + t) * D + d] =
              float((1 - s) * line_desc[i].first[e] + s * line_desc[i].second[e] + spec.noise * gauss(rng));
        }
      }
      if (!line_dropped[i]) {
        for (int c = 0; c < 3; ++c) {
          im.line_labels(k, std::size_t(c)) = lines[i].p[c];
          im.line_labels(k, std::size_t(3 + c)) = lines[i].q[c];
        }
        im.line_labels(k, 6) = 1;
      }
    }
    scene.images.push_back(std::move(im));
  }
  scene.validate();
  return scene;
}

// ---------------------------------------------------------------------------
// Model config JSON and checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const ModelConfig& c) {
  nlohmann::json layers = nlohmann::json::array();
  for (auto k : c.layers) layers.push_back(to_string(k));
  return {{"descriptor_dim", c.descriptor_dim}, {"heads", c.heads},           {"line_tokens", c.line_tokens},
          {"layers", layers},                   {"point_head", c.point_head}, {"line_head", c.line_head},
          {"encoder_expansion", c.encoder_expansion}, {"beta", c.beta}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.descriptor_dim = j.at("descriptor_dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.line_tokens = j.at("line_tokens").get<std::size_t>();
  c.layers.clear();
  for (const auto& k : j.at("layers")) c.layers.push_back(attention_kind_from_string(k.get<std::string>()));
  c.point_head = j.at("point_head").get<std::vector<std::size_t>>();
  c.line_head = j.at("line_head").get<std::vector<std::size_t>>();
  c.encoder_expansion = j.at("encoder_expansion").get<std::size_t>();
  c.beta = j.at("beta").get<double>();
  c.validate();
  return c;
}

struct Checkpoint {
  ModelParams<float> params;
  std::uint64_t iteration = 0;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
  const ModelLayout layout(ck.params.config);
  if (layout.specs.size() != ck.params.tensors.size()) throw FormatError("checkpoint: tensor count does not match config");
  detail::ByteWriter w;
  w.raw("PL2M", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = config_to_json(ck.params.config).dump();
  w.put<std::uint32_t>(std::uint32_t(cfg.size()));
  w.raw(cfg.data(), cfg.size());
  w.put<std::uint64_t>(ck.iteration);
  w.put<std::uint32_t>(std::uint32_t(ck.params.tensors.size()));
  for (std::size_t i = 0; i < ck.params.tensors.size(); ++i) {
    const auto& t = ck.params.tensors[i];
    if (t.shape() != layout.specs[i].shape) throw FormatError("checkpoint: tensor " + layout.specs[i].name + " has wrong shape");
    w.put<std::uint8_t>(std::uint8_t(t.rank()));
    for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
    w.values<float>(t.values());
  }
  const auto& b = w.bytes();
  w.put<std::uint64_t>(detail::fnv1a64(b.data(), b.size()));
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes, const std::string& what = "checkpoint") {
  if (bytes.size() < 4 + 4 + 8) throw FormatError(what + ": file too short");
  const std::size_t body = bytes.size() - 8;
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, 8);
  if (detail::to_little(stored) != detail::fnv1a64(bytes.data(), body))
    throw ChecksumError(what + ": checksum mismatch (file is corrupted)");
  detail::ByteReader r(bytes, what, body);
  r.magic("PL2M");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError(what + ": format version " + std::to_string(version) + ", this build reads " +
                       std::to_string(kCheckpointVersion));
  const std::size_t n = r.get<std::uint32_t>();
  std::string cfg(n, '\0');
  for (auto& c : cfg) c = char(r.get<std::uint8_t>());
  Checkpoint ck;
  try {
    ck.params.config = config_from_json(nlohmann::json::parse(cfg));
  } catch (const std::exception& e) {
    r.fail(std::string("bad model config: ") + e.what());
  }
  ck.iteration = r.get<std::uint64_t>();
  const ModelLayout layout(ck.params.config);
  const std::size_t count = r.get<std::uint32_t>();
  if (count != layout.specs.size()) r.fail("tensor count does not match config");
  for (std::size_t i = 0; i < count; ++i) {
    const Shape shape = r.shape(r.get<std::uint8_t>());
    if (shape != layout.specs[i].shape) r.fail("tensor " + layout.specs[i].name + " has shape " + shape_string(shape));
    Tensor<float> t(shape);
    r.values<float>(t.values());
    ck.params.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  detail::write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  return decode_checkpoint(detail::read_file(path), path.string());
}

/// Bytes a checkpoint of this config occupies on disk.
inline std::size_t checkpoint_size(const ModelConfig& c) {
  const ModelLayout layout(c);
  std::size_t n = 4 + 4 + 4 + config_to_json(c).dump().size() + 8 + 4 + 8;
  for (const auto& s : layout.specs) n += 1 + 8 * s.shape.size() + 4 * shape_size(s.shape);
  return n;
}

// ---------------------------------------------------------------------------
// Predictions, maps and poses
// ---------------------------------------------------------------------------

struct ImagePrediction {
  std::string id;
  Prediction<float> prediction;
};

inline void save_predictions(const std::vector<ImagePrediction>& preds, double beta, const fs::path& path) {
  detail::ByteWriter w;
  w.raw("PL2P", 4);
  w.put<std::uint32_t>(kPredictionsVersion);
  w.put<double>(beta);
  w.put<std::uint32_t>(std::uint32_t(preds.size()));
  for (const auto& p : preds) {
    w.name(p.id);
    w.array("points", p.prediction.points);
    w.array("lines", p.prediction.lines);
  }
  detail::write_file_atomic(path, w.bytes());
}

inline std::vector<ImagePrediction> load_predictions(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes, path.string());
  r.magic("PL2P");
  const auto version = r.get<std::uint32_t>();
  if (version != kPredictionsVersion) throw VersionError(path.string() + ": predictions version " + std::to_string(version));
  const double beta = r.get<double>();
  std::vector<ImagePrediction> out(r.get<std::uint32_t>());
  for (auto& p : out) {
    p.id = r.name();
    const auto points = r.array<float>("points");
    const auto lines = r.array<float>("lines");
    if (points.rank() != 2 || points.dim(1) != 4 || lines.rank() != 2 || lines.dim(1) != 7)
      r.fail("image '" + p.id + "': bad prediction shapes");
    p.prediction = make_prediction(points, lines, beta);
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return out;
}

/// "P x y z r" per point and "L x1 y1 z1 x2 y2 z2 r" per line, for every
/// feature whose predicted reliability is at least the threshold.
inline std::string export_map(const std::vector<ImagePrediction>& preds, double threshold) {
  std::string out;
  char buf[256];
  for (const auto& ip : preds) {
    const auto& p = ip.prediction;
    for (std::size_t i = 0; i < p.num_points(); ++i) {
      if (!(p.point_reliability[i] >= threshold)) continue;
      const auto X = p.point(i);
      std::snprintf(buf, sizeof buf, "P %.9g %.9g %.9g %.9g\n", X.x(), X.y(), X.z(), double(p.point_reliability[i]));
      out += buf;
    }
    for (std::size_t i = 0; i < p.num_lines(); ++i) {
      if (!(p.line_reliability[i] >= threshold)) continue;
      const auto L = p.line(i);
      std::snprintf(buf, sizeof buf, "L %.9g %.9g %.9g %.9g %.9g %.9g %.9g\n", L.p.x(), L.p.y(), L.p.z(), L.q.x(), L.q.y(),
                    L.q.z(), double(p.line_reliability[i]));
      out += buf;
    }
  }
  return out;
}

struct PoseRecord {
  std::string id;
  bool success = false;
  Pose pose;
  std::size_t point_inliers = 0, line_inliers = 0;
};

/// One line per image: "id success qw qx qy qz tx ty tz point_inliers line_inliers".
inline std::string format_poses(const std::vector<PoseRecord>& poses) {
  std::string out = "# id success qw qx qy qz tx ty tz point_inliers line_inliers\n";
  char buf[512];
  for (const auto& p : poses) {
    if (p.id.find_first_of(" \t\n") != std::string::npos) throw FormatError("pose id contains whitespace: '" + p.id + "'");
    const auto& q = p.pose.rotation;
    const auto& t = p.pose.translation;
    std::snprintf(buf, sizeof buf, "%s %d %.17g %.17g %.17g %.17g %.17g %.17g %.17g %zu %zu\n", p.id.c_str(),
                  int(p.success), q.w(), q.x(), q.y(), q.z(), t.x(), t.y(), t.z(), p.point_inliers, p.line_inliers);
    out += buf;
  }
  return out;
}

inline std::vector<PoseRecord> parse_poses(const std::string& text, const std::string& what = "poses") {
  std::vector<PoseRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    PoseRecord p;
    int success = 0;
    double qw, qx, qy, qz, tx, ty, tz;
    if (!(ls >> p.id >> success >> qw >> qx >> qy >> qz >> tx >> ty >> tz >> p.point_inliers >> p.line_inliers))
      throw FormatError(what + ":" + std::to_string(lineno) + ": expected 11 fields");
    p.success = success != 0;
    p.pose.rotation = Eigen::Quaterniond(qw, qx, qy, qz);
    p.pose.translation = Eigen::Vector3d(tx, ty, tz);
    out.push_back(std::move(p));
  }
  return out;
}

inline void save_poses(const std::vector<PoseRecord>& poses, const fs::path& path) {
  detail::write_text_atomic(path, format_poses(poses));
}

inline std::vector<PoseRecord> load_poses(const fs::path& path) {
  const auto bytes = detail::read_file(path);
  return parse_poses(std::string(bytes.begin(), bytes.end()), path.string());
}

}  // namespace pl2map
