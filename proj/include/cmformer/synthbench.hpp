#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cmf {

// One placed primitive; later entries overwrite earlier ones.
struct ScenePrimitive {
  std::size_t class_id = 0;
  enum Kind { kRect, kDisc, kBar } kind = kRect;
  // rect/bar: top-left + extent; disc: center + radius in w (h unused)
  int x = 0, y = 0, w = 0, h = 0;
};

// Full deterministic description of one scene's content.
struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t canvas_h = 0, canvas_w = 0;
  std::size_t n_classes = 6;
  std::size_t horizon_y = 0;           // sky above, ground below
  std::size_t road_y0 = 0, road_y1 = 0;
  std::vector<ScenePrimitive> prims;
};

struct SceneConfig {
  std::size_t h = 64, w = 64;
  std::size_t n_classes = 6;  // 0 sky, 1 ground, 2 road, 3.. foreground
};

struct LabeledScene {
  SceneSpec spec;
  std::vector<std::uint8_t> labels;  // h*w, values in [0, n_classes)
};

// Style axes of one domain; a domain is this fixed vector plus a small
// per-sample jitter controlled by `jitter`.
struct DomainStyle {
  std::string name;
  double hue_shift = 0.0;       // radians around the gray axis
  double brightness = 0.0;      // additive, [-0.3, 0.3]
  double contrast = 1.0;        // multiplicative, [0.6, 1.5]
  double noise_sigma = 0.0;     // [0, 0.1]
  double fog_alpha = 0.0;       // [0, 0.6] blend toward gray 0.7
  double illum_gradient = 0.0;  // horizontal gain, [-0.3, 0.3]
  double jitter = 0.0;          // per-sample jitter amplitude in [0, 1]
};

LabeledScene gen_scene(std::uint64_t seed, const SceneConfig& cfg = {});

std::vector<std::uint8_t> render_labels(const SceneSpec& spec);

// Render base colors for the scene then apply, in order: illumination
// gradient, contrast, brightness, hue rotation, fog, Gaussian noise, clip.
// Neutral stages are skipped exactly. Labels are untouched by construction.
std::vector<float> apply_style(const SceneSpec& spec, const DomainStyle& style,
                               std::uint64_t jitter_seed);

// The five shipped domains: clear, dusk, fog, noiseCam, coolHue.
const std::vector<DomainStyle>& domain_presets();
const DomainStyle& find_preset(const std::string& name);

struct Sample {
  std::vector<float> image;          // h*w*3 in [0,1]
  std::vector<std::uint8_t> labels;  // h*w; 255 reserved as ignore
};

struct Dataset {
  std::size_t h = 0, w = 0;
  std::size_t channels = 3;
  std::size_t n_classes = 0;
  std::vector<Sample> samples;
};

// "CMSB" container: u32 version, count, H, W, channels, K, then per sample
// the f32 image and u8 labels, all little-endian.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

// Samples with scene seeds [seed_begin, seed_begin + count); jitter seeds are
// derived from (domain name, scene seed).
Dataset generate_domain_dataset(const DomainStyle& style,
                                std::uint64_t seed_begin, std::size_t count,
                                const SceneConfig& cfg = {});

}  // namespace cmf
