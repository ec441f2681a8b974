#include "cmformer/synthbench.hpp"

#include <algorithm>
#include <cmath>

#include "cmformer/binio.hpp"
#include "cmformer/rng.hpp"

namespace cmf {

LabeledScene gen_scene(std::uint64_t seed, const SceneConfig& cfg) {
  if (cfg.h % 32 != 0 || cfg.w % 32 != 0) {
    throw shape_error("gen_scene: canvas " + std::to_string(cfg.h) + "x" +
                      std::to_string(cfg.w) + " must be multiples of 32");
  }
  std::mt19937_64 rng(mix_seed(seed, 0x5CE17Eull));
  SceneSpec spec;
  spec.seed = seed;
  spec.canvas_h = cfg.h;
  spec.canvas_w = cfg.w;
  spec.n_classes = cfg.n_classes;

  const double h = static_cast<double>(cfg.h);
  spec.horizon_y = static_cast<std::size_t>(h * rand_uniform(rng, 0.30, 0.45));
  const double below = h - static_cast<double>(spec.horizon_y);
  spec.road_y0 = spec.horizon_y +
                 static_cast<std::size_t>(below * rand_uniform(rng, 0.15, 0.35));
  spec.road_y1 = spec.road_y0 +
                 static_cast<std::size_t>(below * rand_uniform(rng, 0.20, 0.40));
  spec.road_y1 = std::min<std::size_t>(spec.road_y1, cfg.h - 1);

  const std::size_t n_prims = 2 + rand_index(rng, 5);  // 2..6
  const double unit = static_cast<double>(std::min(cfg.h, cfg.w));
  for (std::size_t i = 0; i < n_prims; ++i) {
    ScenePrimitive prim;
    // foreground classes cycle over rect/disc/bar with class-specific sizes
    const std::size_t fg_classes = cfg.n_classes - 3;
    prim.class_id = 3 + rand_index(rng, fg_classes);
    prim.kind = static_cast<ScenePrimitive::Kind>((prim.class_id - 3) % 3);
    switch (prim.kind) {
      case ScenePrimitive::kRect:
        prim.w = static_cast<int>(unit * rand_uniform(rng, 0.20, 0.34));
        prim.h = static_cast<int>(unit * rand_uniform(rng, 0.20, 0.34));
        break;
      case ScenePrimitive::kDisc:
        prim.w = static_cast<int>(unit * rand_uniform(rng, 0.10, 0.17));
        prim.h = prim.w;
        break;
      case ScenePrimitive::kBar:
        prim.w = static_cast<int>(unit * rand_uniform(rng, 0.08, 0.12));
        prim.h = static_cast<int>(unit * rand_uniform(rng, 0.30, 0.48));
        break;
    }
    // keep primitives on-canvas and below the upper sky margin
    const int min_y = static_cast<int>(spec.horizon_y) / 2;
    const int max_x = static_cast<int>(cfg.w) - prim.w - 1;
    const int max_y = static_cast<int>(cfg.h) - prim.h - 1;
    prim.x = static_cast<int>(rand_index(
        rng, static_cast<std::uint64_t>(std::max(1, max_x))));
    prim.y = min_y + static_cast<int>(rand_index(
                         rng, static_cast<std::uint64_t>(
                                  std::max(1, max_y - min_y))));
    spec.prims.push_back(prim);
  }

  LabeledScene scene;
  scene.spec = spec;
  scene.labels = render_labels(spec);
  return scene;
}

std::vector<std::uint8_t> render_labels(const SceneSpec& spec) {
  const std::size_t h = spec.canvas_h, w = spec.canvas_w;
  std::vector<std::uint8_t> labels(h * w, 1);  // ground
  for (std::size_t y = 0; y < spec.horizon_y; ++y)
    std::fill(labels.begin() + y * w, labels.begin() + (y + 1) * w, 0);  // sky
  for (std::size_t y = spec.road_y0; y < spec.road_y1; ++y)
    std::fill(labels.begin() + y * w, labels.begin() + (y + 1) * w, 2);  // road
  for (const ScenePrimitive& prim : spec.prims) {
    const auto cls = static_cast<std::uint8_t>(prim.class_id);
    switch (prim.kind) {
      case ScenePrimitive::kRect:
      case ScenePrimitive::kBar:
        for (int y = prim.y; y < prim.y + prim.h; ++y) {
          if (y < 0 || y >= static_cast<int>(h)) continue;
          for (int x = prim.x; x < prim.x + prim.w; ++x) {
            if (x < 0 || x >= static_cast<int>(w)) continue;
            labels[static_cast<std::size_t>(y) * w +
                   static_cast<std::size_t>(x)] = cls;
          }
        }
        break;
      case ScenePrimitive::kDisc: {
        const double cy = prim.y + prim.w / 2.0, cx = prim.x + prim.w / 2.0;
        const double r = prim.w / 2.0;
        for (int y = prim.y; y <= prim.y + prim.w; ++y) {
          if (y < 0 || y >= static_cast<int>(h)) continue;
          for (int x = prim.x; x <= prim.x + prim.w; ++x) {
            if (x < 0 || x >= static_cast<int>(w)) continue;
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            if (dy * dy + dx * dx <= r * r) {
              labels[static_cast<std::size_t>(y) * w +
                     static_cast<std::size_t>(x)] = cls;
            }
          }
        }
        break;
      }
    }
  }
  return labels;
}

namespace {

// class base colors; components stay within [0.1, 0.8] so a +0.2 brightness
// shift does not clip
constexpr double kPalette[][3] = {
    {0.33, 0.55, 0.78},  // 0 sky
    {0.30, 0.44, 0.22},  // 1 ground
    {0.36, 0.36, 0.40},  // 2 road
    {0.70, 0.26, 0.20},  // 3 rect
    {0.74, 0.62, 0.16},  // 4 disc
    {0.18, 0.56, 0.52},  // 5 bar
    {0.56, 0.24, 0.62},  // 6
    {0.72, 0.46, 0.28},  // 7
};
constexpr std::size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

struct StyleVec {
  double hue, brightness, contrast, noise, fog, illum;
};

StyleVec jittered(const DomainStyle& s, std::uint64_t jitter_seed) {
  StyleVec v{s.hue_shift, s.brightness, s.contrast,
             s.noise_sigma, s.fog_alpha, s.illum_gradient};
  if (s.jitter > 0.0) {
    std::mt19937_64 rng(mix_seed(jitter_seed, 0x57F1Eull));
    auto delta = [&](double scale) {
      return s.jitter * scale * rand_uniform(rng, -1.0, 1.0);
    };
    v.hue += delta(0.25);
    v.brightness = std::clamp(v.brightness + delta(0.05), -0.3, 0.3);
    v.contrast = std::clamp(v.contrast + delta(0.10), 0.6, 1.5);
    v.noise = std::clamp(v.noise + delta(0.01), 0.0, 0.1);
    v.fog = std::clamp(v.fog + delta(0.06), 0.0, 0.6);
    v.illum = std::clamp(v.illum + delta(0.06), -0.3, 0.3);
  }
  return v;
}

}  // namespace

std::vector<float> apply_style(const SceneSpec& spec, const DomainStyle& style,
                               std::uint64_t jitter_seed) {
  const std::size_t h = spec.canvas_h, w = spec.canvas_w;
  const std::vector<std::uint8_t> labels = render_labels(spec);
  const StyleVec v = jittered(style, jitter_seed);

  std::vector<float> img(h * w * 3);
  for (std::size_t i = 0; i < h * w; ++i) {
    const std::size_t cls = std::min<std::size_t>(labels[i], kPaletteSize - 1);
    img[i * 3 + 0] = static_cast<float>(kPalette[cls][0]);
    img[i * 3 + 1] = static_cast<float>(kPalette[cls][1]);
    img[i * 3 + 2] = static_cast<float>(kPalette[cls][2]);
  }

  if (v.illum != 0.0) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double gain =
            1.0 + v.illum * (2.0 * static_cast<double>(x) /
                                 static_cast<double>(w - 1) -
                             1.0);
        for (int c = 0; c < 3; ++c) {
          float& p = img[(y * w + x) * 3 + static_cast<std::size_t>(c)];
          p = static_cast<float>(p * gain);
        }
      }
    }
  }
  if (v.contrast != 1.0) {
    for (float& p : img)
      p = static_cast<float>((p - 0.5) * v.contrast + 0.5);
  }
  if (v.brightness != 0.0) {
    for (float& p : img) p = static_cast<float>(p + v.brightness);
  }
  if (v.hue != 0.0) {
    // rotation around the (1,1,1) gray axis
    const double c = std::cos(v.hue), s = std::sin(v.hue);
    const double oc = (1.0 - c) / 3.0;
    const double a = c + oc;
    const double b1 = oc - s / std::sqrt(3.0);
    const double b2 = oc + s / std::sqrt(3.0);
    for (std::size_t i = 0; i < h * w; ++i) {
      const double r = img[i * 3], g = img[i * 3 + 1], b = img[i * 3 + 2];
      img[i * 3 + 0] = static_cast<float>(a * r + b1 * g + b2 * b);
      img[i * 3 + 1] = static_cast<float>(b2 * r + a * g + b1 * b);
      img[i * 3 + 2] = static_cast<float>(b1 * r + b2 * g + a * b);
    }
  }
  if (v.fog != 0.0) {
    for (float& p : img)
      p = static_cast<float>((1.0 - v.fog) * p + v.fog * 0.7);
  }
  if (v.noise != 0.0) {
    std::mt19937_64 rng(mix_seed(jitter_seed, 0x9015Eull));
    for (float& p : img)
      p = static_cast<float>(p + v.noise * rand_normal(rng));
  }
  if (v.illum != 0.0 || v.contrast != 1.0 || v.brightness != 0.0 ||
      v.hue != 0.0 || v.fog != 0.0 || v.noise != 0.0) {
    for (float& p : img) p = std::clamp(p, 0.0f, 1.0f);
  }
  return img;
}

const std::vector<DomainStyle>& domain_presets() {
  static const std::vector<DomainStyle> presets = [] {
    std::vector<DomainStyle> v;
    DomainStyle clear;
    clear.name = "clear";
    clear.noise_sigma = 0.01;
    clear.jitter = 0.5;
    v.push_back(clear);

    DomainStyle dusk;
    dusk.name = "dusk";
    dusk.hue_shift = -0.45;
    dusk.brightness = -0.22;
    dusk.contrast = 0.78;
    dusk.noise_sigma = 0.02;
    dusk.illum_gradient = -0.20;
    dusk.jitter = 0.5;
    v.push_back(dusk);

    DomainStyle fog;
    fog.name = "fog";
    fog.fog_alpha = 0.45;
    fog.contrast = 0.72;
    fog.brightness = 0.08;
    fog.noise_sigma = 0.015;
    fog.jitter = 0.5;
    v.push_back(fog);

    DomainStyle noise_cam;
    noise_cam.name = "noiseCam";
    noise_cam.noise_sigma = 0.08;
    noise_cam.contrast = 1.25;
    noise_cam.hue_shift = 0.12;
    noise_cam.jitter = 0.5;
    v.push_back(noise_cam);

    DomainStyle cool_hue;
    cool_hue.name = "coolHue";
    cool_hue.hue_shift = 0.95;
    cool_hue.brightness = 0.06;
    cool_hue.contrast = 1.12;
    cool_hue.noise_sigma = 0.01;
    cool_hue.illum_gradient = 0.15;
    cool_hue.jitter = 0.5;
    v.push_back(cool_hue);
    return v;
  }();
  return presets;
}

const DomainStyle& find_preset(const std::string& name) {
  for (const DomainStyle& s : domain_presets()) {
    if (s.name == name) return s;
  }
  throw config_error("unknown domain preset: " + name);
}

namespace {
constexpr char kMagic[5] = "CMSB";
constexpr std::uint32_t kVersion = 1;

std::uint64_t domain_hash(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}
}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
  BinWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(ds.samples.size()));
  w.u32(static_cast<std::uint32_t>(ds.h));
  w.u32(static_cast<std::uint32_t>(ds.w));
  w.u32(static_cast<std::uint32_t>(ds.channels));
  w.u32(static_cast<std::uint32_t>(ds.n_classes));
  for (const Sample& s : ds.samples) {
    for (float v : s.image) w.f32(v);
    w.bytes(s.labels.data(), s.labels.size());
  }
  w.close();
}

Dataset read_dataset(const std::string& path) {
  BinReader r(path);
  r.expect_magic(kMagic);
  r.expect_version(kVersion);
  Dataset ds;
  const std::uint32_t count = r.u32();
  ds.h = r.u32();
  ds.w = r.u32();
  ds.channels = r.u32();
  ds.n_classes = r.u32();
  if (ds.channels != 3) {
    throw format_error("dataset " + path + ": expected 3 channels, got " +
                       std::to_string(ds.channels));
  }
  ds.samples.resize(count);
  for (Sample& s : ds.samples) {
    s.image.resize(ds.h * ds.w * 3);
    for (float& v : s.image) v = r.f32();
    s.labels.resize(ds.h * ds.w);
    r.bytes(s.labels.data(), s.labels.size());
  }
  return ds;
}

Dataset generate_domain_dataset(const DomainStyle& style,
                                std::uint64_t seed_begin, std::size_t count,
                                const SceneConfig& cfg) {
  Dataset ds;
  ds.h = cfg.h;
  ds.w = cfg.w;
  ds.n_classes = cfg.n_classes;
  const std::uint64_t salt = domain_hash(style.name);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t scene_seed = seed_begin + i;
    LabeledScene scene = gen_scene(scene_seed, cfg);
    Sample s;
    s.image = apply_style(scene.spec, style, mix_seed(scene_seed, salt));
    s.labels = std::move(scene.labels);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace cmf
