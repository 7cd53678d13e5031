#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdet/boxes.hpp"
#include "sdet/image.hpp"

namespace sdet::data {

inline constexpr double kDefaultNoiseSigma = 0.5 * 255.0;

// One dataset entry. Boxes are in pixel coordinates (center + size);
// annotation files on disk hold them normalized to [0, 1].
struct Sample {
  std::string id;
  std::string origin;  // id whose split this sample must follow ("" = itself)
  img::Image8 image;
  std::vector<GtBox> boxes;
  std::string split;       // train | val | test, assigned by split_dataset
  std::string provenance;  // original | noise | flip | noise_flip
};

// The raw N(0, sigma^2) draws consumed by gaussian_noise, in pixel order.
std::vector<double> gaussian_noise_samples(size_t n, double sigma, uint64_t seed);

// I + N(0, sigma^2) per pixel, then rounded and clamped to [0, 255].
img::Image8 gaussian_noise(const img::Image8& im, double sigma, uint64_t seed);

// Mirrors the image across its vertical axis; box centers map cx -> W - cx.
Sample hflip(const Sample& s);

// hflip first, then gaussian_noise on the flipped image.
Sample noise_flip(const Sample& s, double sigma, uint64_t seed);

// Expands every sample into (original, noise, flip, noise_flip) with ids
// suffixed by the provenance; per-variant noise seeds derive from `seed`.
std::vector<Sample> augment(const std::vector<Sample>& originals, double sigma,
                            uint64_t seed);

// Deterministic 70/15/15 partition over originals (floor, remainder to
// train); samples whose origin was already placed inherit that split.
void split_dataset(std::vector<Sample>& samples, uint64_t seed);

// Bilinear image resize with linear box rescale.
Sample resize(const Sample& s, size_t out_w, size_t out_h);

// Desk-scale stand-in data: speckled grayscale with bright quasi-linear
// streaks. Streaked samples carry class 0 ("wall") boxes with exact integer
// pixel bounds; the rest have no boxes. wall_ratio picks the Bernoulli rate.
std::vector<Sample> synth_sonar(uint64_t seed, size_t n, size_t side = 64,
                                double wall_ratio = 0.6);

// Directory layout: images/<id>.pgm, labels/<id>.txt, manifest.json.
void save_dataset(const std::string& dir, const std::vector<Sample>& samples);
std::vector<Sample> load_dataset(const std::string& dir);

// Annotation text format: one "class cx cy w h" line per box, normalized.
std::string format_annotation(const Sample& s);
std::vector<GtBox> parse_annotation(const std::string& text, size_t width, size_t height,
                                    const std::string& context);

}  // namespace sdet::data
