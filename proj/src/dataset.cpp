#include "sdet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>
#include <unordered_map>

#include "sdet/error.hpp"
#include "sdet/serialize.hpp"

namespace sdet::data {

namespace fs = std::filesystem;

std::vector<double> gaussian_noise_samples(size_t n, double sigma, uint64_t seed) {
  if (sigma < 0) fail("bad_argument", "noise sigma must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma);
  std::vector<double> out(n);
  for (double& v : out) v = sigma == 0 ? 0.0 : dist(rng);
  return out;
}

img::Image8 gaussian_noise(const img::Image8& im, double sigma, uint64_t seed) {
  std::vector<double> noise = gaussian_noise_samples(im.pixels.size(), sigma, seed);
  img::Image8 out = im;
  for (size_t i = 0; i < im.pixels.size(); ++i) {
    long v = std::lround(double(im.pixels[i]) + noise[i]);
    out.pixels[i] = uint8_t(std::clamp(v, 0L, 255L));
  }
  return out;
}

Sample hflip(const Sample& s) {
  Sample out = s;
  const img::Image8& im = s.image;
  for (size_t y = 0; y < im.height; ++y)
    for (size_t x = 0; x < im.width; ++x)
      for (size_t c = 0; c < im.channels; ++c)
        out.image.at(y, x, c) = im.at(y, im.width - 1 - x, c);
  for (GtBox& b : out.boxes) b.cx = double(im.width) - b.cx;
  return out;
}

Sample noise_flip(const Sample& s, double sigma, uint64_t seed) {
  Sample out = hflip(s);
  out.image = gaussian_noise(out.image, sigma, seed);
  return out;
}

namespace {

uint64_t mix_seed(uint64_t seed, uint64_t index, uint64_t salt) {
  uint64_t x = seed ^ (0x9e3779b97f4a7c15ULL + salt);
  x ^= index + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  return x;
}

}  // namespace

std::vector<Sample> augment(const std::vector<Sample>& originals, double sigma,
                            uint64_t seed) {
  std::vector<Sample> out;
  out.reserve(originals.size() * 4);
  for (size_t i = 0; i < originals.size(); ++i) {
    const Sample& base = originals[i];
    out.push_back(base);

    Sample n = base;
    n.image = gaussian_noise(base.image, sigma, mix_seed(seed, i, 1));
    n.id = base.id + "_noise";
    n.origin = base.id;
    n.provenance = "noise";
    out.push_back(std::move(n));

    Sample f = hflip(base);
    f.id = base.id + "_flip";
    f.origin = base.id;
    f.provenance = "flip";
    out.push_back(std::move(f));

    Sample nf = noise_flip(base, sigma, mix_seed(seed, i, 2));
    nf.id = base.id + "_noise_flip";
    nf.origin = base.id;
    nf.provenance = "noise_flip";
    out.push_back(std::move(nf));
  }
  return out;
}

void split_dataset(std::vector<Sample>& samples, uint64_t seed) {
  if (samples.empty()) fail("bad_argument", "cannot split an empty dataset");
  std::vector<size_t> roots;
  for (size_t i = 0; i < samples.size(); ++i)
    if (samples[i].origin.empty()) roots.push_back(i);
  if (roots.empty()) fail("bad_argument", "no original samples to split");

  std::vector<size_t> order = roots;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  size_t n = order.size();
  size_t n_val = size_t(std::floor(0.15 * double(n)));
  size_t n_test = size_t(std::floor(0.15 * double(n)));
  std::unordered_map<std::string, std::string> split_of;
  for (size_t k = 0; k < n; ++k) {
    const char* sp = k < n - n_val - n_test ? "train" : k < n - n_test ? "val" : "test";
    samples[order[k]].split = sp;
    split_of[samples[order[k]].id] = sp;
  }
  for (Sample& s : samples) {
    if (s.origin.empty()) continue;
    auto it = split_of.find(s.origin);
    if (it == split_of.end()) fail("bad_argument", "variant without its original", s.id);
    s.split = it->second;
  }
}

Sample resize(const Sample& s, size_t out_w, size_t out_h) {
  Sample out = s;
  out.image = img::resize_bilinear(s.image, out_w, out_h);
  double sx = double(out_w) / double(s.image.width);
  double sy = double(out_h) / double(s.image.height);
  for (GtBox& b : out.boxes) {
    b.cx *= sx;
    b.w *= sx;
    b.cy *= sy;
    b.h *= sy;
  }
  return out;
}

std::vector<Sample> synth_sonar(uint64_t seed, size_t n, size_t side, double wall_ratio) {
  if (side < 16) fail("bad_argument", "side too small for streak geometry");
  if (wall_ratio < 0 || wall_ratio > 1) fail("bad_argument", "wall_ratio outside [0,1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Sample> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    Sample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "synth_%06zu", i);
    s.id = idbuf;
    s.provenance = "original";
    s.image = img::Image8(side, side, 1);

    // multiplicative-looking speckle: dark base with exponential bright grains
    std::exponential_distribution<double> speck(1.0 / 18.0);
    for (size_t p = 0; p < s.image.pixels.size(); ++p) {
      double v = 22.0 + 14.0 * u(rng) + speck(rng);
      s.image.pixels[p] = uint8_t(std::clamp(std::lround(v), 0L, 255L));
    }

    bool wall = u(rng) < wall_ratio;
    if (wall) {
      // quasi-linear bright streak: a jittered line segment with thickness
      double angle = (u(rng) - 0.5) * 1.2;  // radians from vertical
      double x_mid = side * (0.15 + 0.7 * u(rng));
      size_t y0 = size_t(double(side) * 0.08 * u(rng));
      size_t y1 = side - 1 - size_t(double(side) * 0.08 * u(rng));
      double half_th = 0.8 + 1.6 * u(rng);
      double bright = 170.0 + 70.0 * u(rng);
      double wobble_amp = 0.8 * u(rng);
      double wobble_freq = 0.15 + 0.35 * u(rng);

      long min_x = long(side), max_x = -1, min_y = long(side), max_y = -1;
      double tan_a = std::tan(angle);
      for (size_t y = y0; y <= y1; ++y) {
        double cx = x_mid + tan_a * (double(y) - double(side) / 2.0) +
                    wobble_amp * std::sin(wobble_freq * double(y));
        long lo = std::lround(cx - half_th), hi = std::lround(cx + half_th);
        for (long x = lo; x <= hi; ++x) {
          if (x < 0 || x >= long(side)) continue;
          double fall = 1.0 - 0.5 * std::abs(double(x) - cx) / (half_th + 0.5);
          double v = double(s.image.at(y, size_t(x))) + bright * fall * (0.75 + 0.25 * u(rng));
          s.image.at(y, size_t(x)) = uint8_t(std::clamp(std::lround(v), 0L, 255L));
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min<long>(min_y, long(y));
          max_y = std::max<long>(max_y, long(y));
        }
      }
      if (max_x >= 0) {
        // integer bounds -> dyadic centers, so flips are exact in doubles
        GtBox b;
        b.class_id = 0;
        b.cx = double(min_x + max_x + 1) / 2.0;
        b.cy = double(min_y + max_y + 1) / 2.0;
        b.w = double(max_x - min_x + 1);
        b.h = double(max_y - min_y + 1);
        s.boxes.push_back(b);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string format_annotation(const Sample& s) {
  std::ostringstream os;
  double w = double(s.image.width), h = double(s.image.height);
  for (const GtBox& b : s.boxes) {
    char line[160];
    std::snprintf(line, sizeof line, "%zu %.17g %.17g %.17g %.17g\n", b.class_id, b.cx / w,
                  b.cy / h, b.w / w, b.h / h);
    os << line;
  }
  return os.str();
}

std::vector<GtBox> parse_annotation(const std::string& text, size_t width, size_t height,
                                    const std::string& context) {
  std::vector<GtBox> boxes;
  std::istringstream is(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    long cls;
    double cx, cy, w, h;
    if (!(ls >> cls >> cx >> cy >> w >> h) || cls < 0)
      fail("format", "malformed annotation line " + std::to_string(lineno), context);
    if (cx < 0 || cx > 1 || cy < 0 || cy > 1 || w < 0 || w > 1 || h < 0 || h > 1)
      fail("format", "annotation outside [0,1] at line " + std::to_string(lineno), context);
    boxes.push_back({size_t(cls), cx * double(width), cy * double(height),
                     w * double(width), h * double(height)});
  }
  return boxes;
}

void save_dataset(const std::string& dir, const std::vector<Sample>& samples) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "labels");
  nlohmann::json manifest = nlohmann::json::array();
  for (const Sample& s : samples) {
    std::string img_rel = "images/" + s.id + ".pgm";
    std::string ann_rel = "labels/" + s.id + ".txt";
    img::write_pgm((fs::path(dir) / img_rel).string(), s.image);
    io::write_text_file((fs::path(dir) / ann_rel).string(), format_annotation(s));
    manifest.push_back({{"id", s.id},
                        {"origin", s.origin},
                        {"image", img_rel},
                        {"annotation", ann_rel},
                        {"split", s.split},
                        {"provenance", s.provenance}});
  }
  io::write_json_file((fs::path(dir) / "manifest.json").string(), manifest);
}

std::vector<Sample> load_dataset(const std::string& dir) {
  nlohmann::json manifest = io::read_json_file((fs::path(dir) / "manifest.json").string());
  if (!manifest.is_array()) fail("format", "manifest must be a JSON array", dir);
  std::vector<Sample> out;
  out.reserve(manifest.size());
  for (const auto& e : manifest) {
    Sample s;
    s.id = e.at("id").get<std::string>();
    s.origin = e.value("origin", "");
    s.split = e.value("split", "");
    s.provenance = e.value("provenance", "original");
    std::string img_path = (fs::path(dir) / e.at("image").get<std::string>()).string();
    s.image = img::read_image(img_path);
    std::string ann_path = (fs::path(dir) / e.at("annotation").get<std::string>()).string();
    s.boxes = parse_annotation(io::read_text_file(ann_path), s.image.width, s.image.height,
                               ann_path);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sdet::data
