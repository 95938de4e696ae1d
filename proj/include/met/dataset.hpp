#pragma once

// Dataset files (`data.json`, `images.bin` f32le N×3×H×W, `labels.bin` u32le)
// and the seeded grating generator.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "met/checkpoint.hpp"
#include "met/vit.hpp"

namespace met {

struct Dataset {
  ImageBatch images;
  int classes = 0;
};

struct DatasetManifest {
  std::size_t samples = 0;
  int channels = 3;
  int height = 0;
  int width = 0;
  int classes = 0;
  std::string images = "images.bin";
  std::string labels = "labels.bin";
};

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& b = ds.images;
  std::vector<char> img, lab;
  img.reserve(b.pixels.size() * 4);
  for (double v : b.pixels) detail::put_f32(img, v);
  for (int l : b.labels) {
    const auto u = detail::to_le(static_cast<std::uint32_t>(l));
    const auto* p = reinterpret_cast<const char*>(&u);
    lab.insert(lab.end(), p, p + 4);
  }
  DatasetManifest m{b.size(), 3, b.height, b.width, ds.classes};
  nlohmann::json j{{"samples", m.samples}, {"channels", m.channels}, {"height", m.height},
                   {"width", m.width},     {"classes", m.classes},   {"images", m.images},
                   {"labels", m.labels}};
  detail::write_file(dir / m.images, std::string(img.begin(), img.end()));
  detail::write_file(dir / m.labels, std::string(lab.begin(), lab.end()));
  detail::write_file(dir / "data.json", j.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  DatasetManifest m;
  try {
    auto j = nlohmann::json::parse(detail::read_file(dir / "data.json"));
    m.samples = j.at("samples").get<std::size_t>();
    m.channels = j.at("channels").get<int>();
    m.height = j.at("height").get<int>();
    m.width = j.at("width").get<int>();
    m.classes = j.at("classes").get<int>();
    m.images = j.at("images").get<std::string>();
    m.labels = j.at("labels").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed " + (dir / "data.json").string() + ": " + e.what());
  }
  if (m.channels != 3) throw DataError("datasets must have 3 channels");
  if (m.samples == 0 || m.height <= 0 || m.width <= 0 || m.classes < 1)
    throw DataError("dataset manifest declares empty extents");
  const auto img = detail::read_file(dir / m.images);
  const auto lab = detail::read_file(dir / m.labels);
  const std::size_t per = 3ull * static_cast<std::size_t>(m.height * m.width);
  if (img.size() != m.samples * per * 4)
    throw DataError(m.images + " has " + std::to_string(img.size()) + " bytes, expected " +
                    std::to_string(m.samples * per * 4));
  if (lab.size() != m.samples * 4)
    throw DataError(m.labels + " has " + std::to_string(lab.size()) + " bytes, expected " +
                    std::to_string(m.samples * 4));
  Dataset ds;
  ds.classes = m.classes;
  ds.images.height = m.height;
  ds.images.width = m.width;
  ds.images.pixels.resize(m.samples * per);
  for (std::size_t i = 0; i < ds.images.pixels.size(); ++i)
    ds.images.pixels[i] = detail::get_f32(img.data() + 4 * i);
  for (std::size_t i = 0; i < m.samples; ++i) {
    std::uint32_t u;
    std::memcpy(&u, lab.data() + 4 * i, 4);
    u = detail::to_le(u);
    if (u >= static_cast<std::uint32_t>(m.classes))
      throw DataError("label " + std::to_string(u) + " of sample " + std::to_string(i) +
                      " is not below class count " + std::to_string(m.classes));
    ds.images.labels.push_back(static_cast<int>(u));
  }
  return ds;
}

struct SynthSpec {
  int classes = 4;
  int per_class = 50;
  int height = 32;
  int width = 32;
  double noise = 0.3;
  std::uint64_t pattern_seed = 7;  // fixes the class gratings
};

/// Class c is a sinusoidal grating with its own orientation, frequency, phase
/// and channel gains (drawn from pattern_seed), plus N(0, noise²) pixel noise
/// drawn from `seed`. Samples are interleaved by class.
inline Dataset generate_synthetic(std::uint64_t seed, const SynthSpec& spec) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.per_class < 1 || spec.height < 1 || spec.width < 1)
    throw ConfigError("synthetic data extents must be positive");
  std::mt19937_64 prng(spec.pattern_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  struct Grating {
    double angle, freq, phase, gain[3];
  };
  std::vector<Grating> g(static_cast<std::size_t>(spec.classes));
  for (int c = 0; c < spec.classes; ++c) {
    auto& gr = g[static_cast<std::size_t>(c)];
    gr.angle = std::numbers::pi * (c + 0.25 * unit(prng)) / spec.classes;
    gr.freq = 1.5 + c + 0.5 * unit(prng);
    gr.phase = 2 * std::numbers::pi * unit(prng);
    for (double& k : gr.gain) k = 0.5 + 0.5 * unit(prng);
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds;
  ds.classes = spec.classes;
  ds.images.height = spec.height;
  ds.images.width = spec.width;
  const int total = spec.classes * spec.per_class;
  for (int i = 0; i < total; ++i) {
    const int c = i % spec.classes;
    const auto& gr = g[static_cast<std::size_t>(c)];
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < spec.height; ++y)
        for (int x = 0; x < spec.width; ++x) {
          const double u = (x * std::cos(gr.angle) + y * std::sin(gr.angle)) / spec.width;
          const double v = gr.gain[ch] * std::sin(2 * std::numbers::pi * gr.freq * u + gr.phase);
          const double eps = noise(rng);
          ds.images.pixels.push_back(v + spec.noise * eps);
        }
    ds.images.labels.push_back(c);
  }
  return ds;
}

}  // namespace met
