#pragma once

#include <filesystem>
#include <fstream>
#include <cctype>
#include <cstring>
#include <map>
#include <sstream>

#include "bevfuse/diffcore/checkpoint.hpp"
#include "bevfuse/synth/sensors.hpp"

namespace bevfuse::synth {

using diff::FormatError;
namespace le = diff::le;

/// Everything stored per scene: the scene description, K radar sweeps
/// (float32 returns) and one RGB8 pseudo-image per camera.
struct SceneRecord {
  Scene scene;
  std::vector<radar::RadarSweep> sweeps;
  std::vector<Image8> images;
};

inline constexpr char kSceneMagic[4] = {'B', 'F', 'S', 'C'};
inline constexpr std::uint32_t kSceneVersion = 1;

inline double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

/// Quantizes returns to float32 as the file stores them.
inline std::vector<radar::RadarSweep> quantize_sweeps(std::vector<radar::RadarSweep> sweeps) {
  for (auto& s : sweeps) {
    for (auto& r : s.returns) {
      r.x = as_f32(r.x);
      r.y = as_f32(r.y);
      r.z = as_f32(r.z);
      r.radial_velocity = as_f32(r.radial_velocity);
      r.rcs = as_f32(r.rcs);
    }
  }
  return sweeps;
}

/// Scene -> record: visibility, sensors, quantization. Pure in `seed`.
inline SceneRecord make_record(Scene scene, const RadarParams& radar, std::uint64_t seed) {
  compute_visibility(scene);
  SceneRecord rec;
  rec.sweeps = quantize_sweeps(simulate_radar(scene, radar, seed ^ 0xA5A5A5A5ull));
  for (const auto& cam : scene.cameras) rec.images.push_back(Image8::from_tensor(render_camera(scene, cam)));
  rec.scene = std::move(scene);
  return rec;
}

namespace detail {

template <typename M>
void put_matrix(std::ostream& os, const M& m) {
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) le::put<double>(os, m(r, c));
}

template <typename M>
void get_matrix(std::istream& is, M& m) {
  for (long r = 0; r < m.rows(); ++r)
    for (long c = 0; c < m.cols(); ++c) m(r, c) = le::get<double>(is);
}

inline std::uint32_t get_count(std::istream& is, std::uint32_t limit, const char* what) {
  const auto n = le::get<std::uint32_t>(is);
  if (n > limit) throw FormatError(std::string("scene file: implausible ") + what + " count");
  return n;
}

}  // namespace detail

inline void write_scene(std::ostream& os, const SceneRecord& rec) {
  std::map<std::string, std::string> sections;
  {
    std::ostringstream s;
    le::put<std::uint64_t>(s, rec.scene.rng_seed);
    le::put<std::uint8_t>(s, rec.scene.shading == Shading::kFlat ? 1 : 0);
    detail::put_matrix(s, rec.scene.ego_pose);
    le::put<double>(s, rec.scene.ego_velocity.x());
    le::put<double>(s, rec.scene.ego_velocity.y());
    sections["META"] = s.str();
  }
  {
    std::ostringstream s;
    le::put<std::uint32_t>(s, static_cast<std::uint32_t>(rec.scene.cameras.size()));
    for (const auto& c : rec.scene.cameras) {
      le::put<std::int32_t>(s, c.height);
      le::put<std::int32_t>(s, c.width);
      detail::put_matrix(s, c.intrinsics);
      detail::put_matrix(s, c.extrinsics);
      detail::put_matrix(s, c.ego_aug_inv);
      detail::put_matrix(s, c.image_aug);
    }
    sections["CALB"] = s.str();
  }
  {
    std::ostringstream s;
    le::put<std::uint32_t>(s, static_cast<std::uint32_t>(rec.scene.vehicles.size()));
    for (const auto& v : rec.scene.vehicles) {
      for (double x : {v.center.x(), v.center.y(), v.center.z(), v.length, v.width, v.height, v.yaw,
                       v.velocity.x(), v.velocity.y(), v.rcs, v.tint, v.visibility}) {
        le::put<double>(s, x);
      }
    }
    sections["VEHI"] = s.str();
  }
  {
    std::ostringstream s;
    le::put<std::uint32_t>(s, static_cast<std::uint32_t>(rec.sweeps.size()));
    for (const auto& sw : rec.sweeps) {
      detail::put_matrix(s, sw.pose);
      le::put<std::uint32_t>(s, static_cast<std::uint32_t>(sw.returns.size()));
      for (const auto& r : sw.returns) {
        for (double x : {r.x, r.y, r.z, r.radial_velocity, r.rcs}) le::put<float>(s, static_cast<float>(x));
      }
    }
    sections["RADR"] = s.str();
  }
  {
    std::ostringstream s;
    le::put<std::uint32_t>(s, static_cast<std::uint32_t>(rec.images.size()));
    for (const auto& im : rec.images) {
      le::put<std::uint32_t>(s, static_cast<std::uint32_t>(im.height));
      le::put<std::uint32_t>(s, static_cast<std::uint32_t>(im.width));
      s.write(reinterpret_cast<const char*>(im.rgb.data()), static_cast<std::streamsize>(im.rgb.size()));
    }
    sections["IMGS"] = s.str();
  }
  os.write(kSceneMagic, 4);
  le::put<std::uint32_t>(os, kSceneVersion);
  le::put<std::uint32_t>(os, static_cast<std::uint32_t>(sections.size()));
  for (const char* tag : {"META", "CALB", "VEHI", "RADR", "IMGS"}) {
    const std::string& body = sections.at(tag);
    os.write(tag, 4);
    le::put<std::uint64_t>(os, body.size());
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
  }
}

inline SceneRecord read_scene(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kSceneMagic, 4) != 0) {
    throw FormatError("scene file: bad magic (expected BFSC)");
  }
  const auto version = le::get<std::uint32_t>(is);
  if (version != kSceneVersion) throw FormatError("scene file: unsupported version " + std::to_string(version));
  const auto count = detail::get_count(is, 64, "section");
  std::map<std::string, std::string> sections;
  for (std::uint32_t k = 0; k < count; ++k) {
    char tag[4];
    if (!is.read(tag, 4)) throw FormatError("scene file: truncated section header");
    const auto len = le::get<std::uint64_t>(is);
    if (len > (std::uint64_t{1} << 32)) throw FormatError("scene file: section too large");
    std::string body(len, '\0');
    if (len && !is.read(body.data(), static_cast<std::streamsize>(len))) {
      throw FormatError("scene file: truncated section " + std::string(tag, 4));
    }
    sections[std::string(tag, 4)] = std::move(body);  // unknown tags are skipped
  }
  auto section = [&](const char* tag) {
    auto it = sections.find(tag);
    if (it == sections.end()) throw FormatError(std::string("scene file: missing section ") + tag);
    return std::istringstream(it->second);
  };
  SceneRecord rec;
  {
    auto s = section("META");
    rec.scene.rng_seed = le::get<std::uint64_t>(s);
    rec.scene.shading = le::get<std::uint8_t>(s) ? Shading::kFlat : Shading::kNormal;
    detail::get_matrix(s, rec.scene.ego_pose);
    rec.scene.ego_velocity.x() = le::get<double>(s);
    rec.scene.ego_velocity.y() = le::get<double>(s);
  }
  {
    auto s = section("CALB");
    const auto n = detail::get_count(s, 64, "camera");
    for (std::uint32_t k = 0; k < n; ++k) {
      geom::CameraCalibration c;
      c.height = le::get<std::int32_t>(s);
      c.width = le::get<std::int32_t>(s);
      detail::get_matrix(s, c.intrinsics);
      detail::get_matrix(s, c.extrinsics);
      detail::get_matrix(s, c.ego_aug_inv);
      detail::get_matrix(s, c.image_aug);
      c.validate();
      rec.scene.cameras.push_back(c);
    }
  }
  {
    auto s = section("VEHI");
    const auto n = detail::get_count(s, 100000, "vehicle");
    for (std::uint32_t k = 0; k < n; ++k) {
      double f[12];
      for (double& x : f) x = le::get<double>(s);
      VehicleBox v;
      v.center = Vec3(f[0], f[1], f[2]);
      v.length = f[3];
      v.width = f[4];
      v.height = f[5];
      v.yaw = f[6];
      v.velocity = Vec2(f[7], f[8]);
      v.rcs = f[9];
      v.tint = f[10];
      v.visibility = f[11];
      rec.scene.vehicles.push_back(v);
    }
  }
  {
    auto s = section("RADR");
    const auto K = detail::get_count(s, 1024, "sweep");
    for (std::uint32_t k = 0; k < K; ++k) {
      radar::RadarSweep sw;
      detail::get_matrix(s, sw.pose);
      const auto n = detail::get_count(s, 1u << 24, "radar point");
      sw.returns.resize(n);
      for (auto& r : sw.returns) {
        r.x = le::get<float>(s);
        r.y = le::get<float>(s);
        r.z = le::get<float>(s);
        r.radial_velocity = le::get<float>(s);
        r.rcs = le::get<float>(s);
      }
      rec.sweeps.push_back(std::move(sw));
    }
  }
  {
    auto s = section("IMGS");
    const auto n = detail::get_count(s, 64, "image");
    for (std::uint32_t k = 0; k < n; ++k) {
      Image8 im;
      im.height = static_cast<int>(detail::get_count(s, 1u << 14, "image row"));
      im.width = static_cast<int>(detail::get_count(s, 1u << 14, "image column"));
      im.rgb.resize(3u * im.height * im.width);
      if (!s.read(reinterpret_cast<char*>(im.rgb.data()), static_cast<std::streamsize>(im.rgb.size()))) {
        throw FormatError("scene file: truncated image");
      }
      rec.images.push_back(std::move(im));
    }
  }
  if (rec.images.size() != rec.scene.cameras.size()) {
    throw FormatError("scene file: image count does not match camera count");
  }
  return rec;
}

inline void save_scene(const std::string& path, const SceneRecord& rec) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_scene(os, rec);
}

inline SceneRecord load_scene(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open scene '" + path + "'");
  return read_scene(is);
}

// ---------------------------------------------------------------------------
// Manifest: one relative path per line.

inline constexpr const char* kManifestName = "manifest.txt";

inline void write_manifest(const std::filesystem::path& dir, const std::vector<std::string>& files) {
  std::ofstream os(dir / kManifestName);
  if (!os) throw std::runtime_error("cannot write manifest in '" + dir.string() + "'");
  for (const auto& f : files) os << f << '\n';
}

/// Absolute paths of the scenes listed in `dir`/manifest.txt.
inline std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / kManifestName);
  if (!is) throw std::runtime_error("no manifest in '" + dir.string() + "'");
  std::vector<std::filesystem::path> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    out.push_back(dir / line);
  }
  if (out.empty()) throw std::runtime_error("manifest in '" + dir.string() + "' lists no scenes");
  return out;
}

// ---------------------------------------------------------------------------
// Portable any-maps.

inline void write_ppm(const std::string& path, int height, int width, const std::vector<std::uint8_t>& rgb) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os << "P6\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

struct GrayImage {
  int height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<std::string> comments;
};

inline void write_pgm(const std::string& path, const GrayImage& im) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os << "P5\n";
  for (const auto& c : im.comments) os << "# " << c << '\n';
  os << im.width << ' ' << im.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(im.pixels.data()), static_cast<std::streamsize>(im.pixels.size()));
}

inline GrayImage read_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  GrayImage im;
  auto token = [&]() {
    std::string t;
    while (true) {
      const int c = is.get();
      if (c == EOF) break;
      if (c == '#') {
        std::string line;
        std::getline(is, line);
        if (!line.empty() && line.front() == ' ') line.erase(0, 1);
        im.comments.push_back(line);
        continue;
      }
      if (std::isspace(c)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(c));
    }
    return t;
  };
  if (token() != "P5") throw FormatError("'" + path + "' is not a binary PGM");
  try {
    im.width = std::stoi(token());
    im.height = std::stoi(token());
    if (std::stoi(token()) != 255) throw FormatError("PGM: only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw FormatError("'" + path + "': malformed PGM header");
  }
  if (im.width <= 0 || im.height <= 0) throw FormatError("PGM: bad dimensions");
  im.pixels.resize(static_cast<std::size_t>(im.width) * im.height);
  if (!is.read(reinterpret_cast<char*>(im.pixels.data()), static_cast<std::streamsize>(im.pixels.size()))) {
    throw FormatError("'" + path + "': truncated PGM data");
  }
  return im;
}

}  // namespace bevfuse::synth
