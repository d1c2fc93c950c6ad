#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrec/core.hpp"
#include "vrec/nnet.hpp"

namespace vrec {

struct TaskDataset {
  std::size_t input_dim = 0;
  int num_classes = 0;
  std::vector<Sample> train;
  std::vector<Sample> validation;
  std::vector<Sample> test;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("TaskDataset: need at least two classes");
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (const auto* split : {&train, &validation, &test}) {
      for (const auto& s : *split) {
        if (s.x.size() != input_dim) throw DimensionError("TaskDataset sample", input_dim, s.x.size());
        if (s.label < 0 || s.label >= num_classes) throw std::invalid_argument("TaskDataset: label out of range");
        if (!all_finite(s.x)) throw std::invalid_argument("TaskDataset: non-finite input");
      }
    }
    for (const auto& s : train) ++counts[static_cast<std::size_t>(s.label)];
    for (int c = 0; c < num_classes; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        throw std::invalid_argument("TaskDataset: class " + std::to_string(c) + " has no training samples");
      }
    }
  }
};

// ---------------------------------------------------------------------------------------------
// Synthetic glyph task

struct GlyphParams {
  int num_classes = 10;
  int side = 16;
  int train_per_class = 200;
  int validation_per_class = 100;
  int test_per_class = 100;
  double noise = 0.1;          // stddev of additive pixel noise
  double stroke_width = 0.08;  // in unit image coordinates
  double background = 0.35;    // pixel level away from the stroke
  double contrast = 0.3;       // stroke intensity above background

  void validate() const {
    if (num_classes < 2 || num_classes > 26) throw std::invalid_argument("GlyphParams: num_classes must be in [2, 26]");
    if (side < 8 || side > 16) throw std::invalid_argument("GlyphParams: side must be in [8, 16]");
    if (train_per_class < 50) throw std::invalid_argument("GlyphParams: need at least 50 training samples per class");
    if (validation_per_class < 1 || test_per_class < 1) {
      throw std::invalid_argument("GlyphParams: validation/test splits must be non-empty");
    }
    if (!(noise >= 0.0) || !(stroke_width > 0.0)) throw std::invalid_argument("GlyphParams: bad noise or stroke width");
    if (!(background >= 0.0 && contrast > 0.0 && background + contrast <= 1.0)) {
      throw std::invalid_argument("GlyphParams: background + contrast must lie in [0, 1]");
    }
  }
};

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double t = std::clamp(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
  return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

/// Distance from p to a half circle of radius r around (0.5, 0.5) whose midpoint faces `dir`.
inline double arc_distance(double px, double py, double r, double dir) {
  const double x = px - 0.5;
  const double y = py - 0.5;
  double rel = std::atan2(y, x) - dir;
  rel = std::remainder(rel, 2.0 * M_PI);
  if (std::abs(rel) <= M_PI / 2) return std::abs(std::hypot(x, y) - r);
  const double e1x = r * std::cos(dir + M_PI / 2);
  const double e1y = r * std::sin(dir + M_PI / 2);
  const double e2x = r * std::cos(dir - M_PI / 2);
  const double e2y = r * std::sin(dir - M_PI / 2);
  return std::min(std::hypot(x - e1x, y - e1y), std::hypot(x - e2x, y - e2y));
}

}  // namespace detail

/// Noise-free template of glyph class `c`: even classes are bars through the centre at
/// class-specific orientations, odd classes are half arcs facing class-specific directions.
[[nodiscard]] inline Vector glyph_template(const GlyphParams& p, int c) {
  const int kinds = (p.num_classes + 1) / 2;
  const int k = c / 2;
  const auto side = static_cast<std::size_t>(p.side);
  Vector img(side * side);
  const double w2 = 2.0 * p.stroke_width * p.stroke_width;
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const double u = (static_cast<double>(j) + 0.5) / static_cast<double>(side);
      const double v = (static_cast<double>(i) + 0.5) / static_cast<double>(side);
      double d;
      if (c % 2 == 0) {
        const double a = M_PI * k / kinds;
        const double hx = 0.4 * std::cos(a);
        const double hy = 0.4 * std::sin(a);
        d = detail::segment_distance(u, v, 0.5 - hx, 0.5 - hy, 0.5 + hx, 0.5 + hy);
      } else {
        d = detail::arc_distance(u, v, 0.3, 2.0 * M_PI * k / kinds);
      }
      img[i * side + j] = p.background + p.contrast * std::exp(-d * d / w2);
    }
  }
  return img;
}

[[nodiscard]] inline TaskDataset make_glyph_task(const GlyphParams& p, std::uint64_t seed) {
  p.validate();
  TaskDataset ds;
  ds.input_dim = static_cast<std::size_t>(p.side * p.side);
  ds.num_classes = p.num_classes;
  std::vector<Vector> templates;
  for (int c = 0; c < p.num_classes; ++c) templates.push_back(glyph_template(p, c));
  Rng rng(derive_seed(seed, 0x617c));
  auto fill = [&](std::vector<Sample>& split, int per_class) {
    for (int n = 0; n < per_class; ++n) {
      for (int c = 0; c < p.num_classes; ++c) {
        Sample s{templates[static_cast<std::size_t>(c)], c};
        if (p.noise > 0.0) {
          for (double& v : s.x) v = std::clamp(v + p.noise * normal(rng), 0.0, 1.0);
        }
        split.push_back(std::move(s));
      }
    }
  };
  fill(ds.train, p.train_per_class);
  fill(ds.validation, p.validation_per_class);
  fill(ds.test, p.test_per_class);
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------------------------
// CSV task loading: each row is `label,v_1,...,v_d` with v in [0, 1].

struct CsvTaskParams {
  std::filesystem::path path;
  double validation_fraction = 0.15;
  double test_fraction = 0.15;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line) : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

[[nodiscard]] inline std::vector<Sample> parse_task_csv(std::istream& is) {
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  std::size_t dim = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> values;
    std::size_t col = 0;
    while (std::getline(ls, cell, ',')) {
      ++col;
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        throw ParseError("column " + std::to_string(col) + ": not a number: '" + cell + "'", lineno);
      }
      if (used != cell.size() && cell.find_first_not_of(" \t", used) != std::string::npos) {
        throw ParseError("column " + std::to_string(col) + ": trailing characters in '" + cell + "'", lineno);
      }
      values.push_back(v);
    }
    if (values.size() < 2) throw ParseError("expected label followed by at least one value", lineno);
    const double lab = values.front();
    if (lab < 0 || lab != std::floor(lab)) throw ParseError("label must be a nonnegative integer", lineno);
    Sample s{Vector(values.begin() + 1, values.end()), static_cast<int>(lab)};
    if (dim == 0) dim = s.x.size();
    if (s.x.size() != dim) {
      throw ParseError("expected " + std::to_string(dim) + " values, got " + std::to_string(s.x.size()), lineno);
    }
    for (std::size_t k = 0; k < s.x.size(); ++k) {
      if (!(s.x[k] >= 0.0 && s.x[k] <= 1.0)) {
        throw ParseError("column " + std::to_string(k + 2) + ": value outside [0, 1]", lineno);
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

[[nodiscard]] inline TaskDataset load_task_csv(const CsvTaskParams& p, std::uint64_t seed) {
  if (!(p.validation_fraction > 0 && p.test_fraction > 0 && p.validation_fraction + p.test_fraction < 1)) {
    throw std::invalid_argument("CsvTaskParams: bad split fractions");
  }
  std::ifstream is(p.path);
  if (!is) throw IoError("cannot open " + p.path.string());
  auto all = parse_task_csv(is);
  if (all.empty()) throw std::invalid_argument("CSV task file is empty");
  Rng rng(derive_seed(seed, 0xc5f));
  shuffle(all, rng);
  TaskDataset ds;
  ds.input_dim = all.front().x.size();
  int max_label = 0;
  for (const auto& s : all) max_label = std::max(max_label, s.label);
  ds.num_classes = max_label + 1;
  const auto n = all.size();
  const auto n_val = static_cast<std::size_t>(std::round(p.validation_fraction * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::round(p.test_fraction * static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_val ? ds.validation : (i < n_val + n_test ? ds.test : ds.train);
    dst.push_back(std::move(all[i]));
  }
  ds.validate();
  return ds;
}

using TaskSpec = std::variant<GlyphParams, CsvTaskParams>;

[[nodiscard]] inline TaskDataset make_task(const TaskSpec& spec, std::uint64_t seed) {
  if (const auto* g = std::get_if<GlyphParams>(&spec)) return make_glyph_task(*g, seed);
  return load_task_csv(std::get<CsvTaskParams>(spec), seed);
}

// ---------------------------------------------------------------------------------------------
// Hidden distributions

inline constexpr std::size_t kDefaultLatentDim = 16;
inline constexpr double kDefaultSigma0 = 0.3;
inline constexpr double kLatentBound = 0.5;

struct LatentVector {
  Vector entries;

  bool operator==(const LatentVector&) const = default;
};

/// Latent mean with each coordinate uniform in [-0.5, 0.5].
[[nodiscard]] inline LatentVector sample_latent(Rng& rng, std::size_t dim = kDefaultLatentDim) {
  LatentVector z{Vector(dim)};
  for (double& e : z.entries) e = uniform(rng, -kLatentBound, kLatentBound);
  return z;
}

struct HiddenDistribution {
  LatentVector latent;
  double sigma0 = kDefaultSigma0;
  int samples_per_label = 100;
};

/// Procedural texture renderer standing in for a generative model.
///
/// Latent coordinates are consumed in groups of four, one group per sinusoidal component
/// (frequency, orientation, phase, amplitude weight), each mapped affinely from [-0.5, 0.5]:
/// f in [freq_lo, freq_lo + freq_span] cycles per image, t in [0, orient_span],
/// phi in [0, phase_span], a in [0, 1]. Pixel (u, v) of the unit square is
///
///   B + (A / C) * sum_k a_k sin(2 pi f_k (u cos t_k + v sin t_k) + phi_k)
///
/// with B = base, A = amplitude and C the component count, so values stay in [B - A, B + A].
/// The defaults give faint, nearly flat textures just below the glyph background level.
struct TextureRenderer {
  std::size_t input_dim = 64;
  double base = 0.3;  // mean pixel level
  double amplitude = 0.05;
  double freq_lo = 1.0;
  double freq_span = 0.5;
  double orient_span = 0.3;
  double phase_span = 0.5;

  std::size_t grid_width() const {
    const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(input_dim))));
    return s * s == input_dim ? s : input_dim;
  }

  [[nodiscard]] Vector render(std::span<const double> z) const {
    if (z.empty() || z.size() % 4 != 0) throw std::invalid_argument("TextureRenderer: latent dim must be a positive multiple of 4");
    const std::size_t width = grid_width();
    const std::size_t height = input_dim / width;
    const std::size_t comps = z.size() / 4;
    const double scale = amplitude / static_cast<double>(comps);
    Vector img(input_dim, base);
    for (std::size_t k = 0; k < comps; ++k) {
      const double f = freq_lo + freq_span * (z[4 * k] + 0.5);
      const double t = orient_span * (z[4 * k + 1] + 0.5);
      const double phi = phase_span * (z[4 * k + 2] + 0.5);
      const double a = z[4 * k + 3] + 0.5;
      const double ct = std::cos(t);
      const double st = std::sin(t);
      for (std::size_t i = 0; i < height; ++i) {
        const double v = height == 1 ? 0.5 : (static_cast<double>(i) + 0.5) / static_cast<double>(height);
        for (std::size_t j = 0; j < width; ++j) {
          const double u = (static_cast<double>(j) + 0.5) / static_cast<double>(width);
          img[i * width + j] += scale * a * std::sin(2.0 * M_PI * f * (u * ct + v * st) + phi);
        }
      }
    }
    return img;
  }

  /// K with ||render(z1) - render(z2)||_2 <= K ||z1 - z2||_1 for latents of `latent_dim`:
  /// sqrt(d) times the largest bound on a per-pixel partial derivative. With u, v in [0, 1],
  /// |u cos t + v sin t| and |-u sin t + v cos t| are at most sqrt(2).
  [[nodiscard]] double lipschitz_constant(std::size_t latent_dim) const {
    const double scale = amplitude / static_cast<double>(latent_dim / 4);
    const double f_max = freq_lo + freq_span;
    const double d_freq = scale * 2.0 * M_PI * freq_span * std::sqrt(2.0);
    const double d_orient = scale * 2.0 * M_PI * f_max * std::sqrt(2.0) * orient_span;
    const double d_phase = scale * phase_span;
    const double d_amp = scale;
    return std::sqrt(static_cast<double>(input_dim)) * std::max({d_freq, d_orient, d_phase, d_amp});
  }
};

/// Draws `n` inputs from a hidden distribution: each sample's latent is Normal(mean, sigma0^2)
/// per coordinate, clipped to the latent box, then rendered.
[[nodiscard]] inline std::vector<Vector> gen_hidden_samples(const HiddenDistribution& h, std::size_t input_dim,
                                                            std::size_t n, std::uint64_t seed,
                                                            const TextureRenderer& style = {}) {
  if (n < 1) throw std::invalid_argument("gen_hidden_samples: n must be at least 1");
  if (!(h.sigma0 >= 0.0)) throw std::invalid_argument("gen_hidden_samples: sigma0 must be nonnegative");
  TextureRenderer renderer = style;
  renderer.input_dim = input_dim;
  Rng rng(seed);
  std::vector<Vector> out;
  out.reserve(n);
  Vector z(h.latent.entries.size());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = std::clamp(h.latent.entries[i] + h.sigma0 * normal(rng), -kLatentBound, kLatentBound);
    }
    out.push_back(renderer.render(z));
  }
  return out;
}

/// One hidden distribution per task label.
struct HiddenAssignment {
  std::vector<HiddenDistribution> per_label;

  std::size_t size() const { return per_label.size(); }

  /// {"<label>": [latent entries], ...}
  [[nodiscard]] nlohmann::json latents_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t l = 0; l < per_label.size(); ++l) j[std::to_string(l)] = per_label[l].latent.entries;
    return j;
  }

  [[nodiscard]] static HiddenAssignment from_latents_json(const nlohmann::json& j, double sigma0, int samples_per_label) {
    HiddenAssignment a;
    a.per_label.resize(j.size());
    for (const auto& [key, value] : j.items()) {
      const auto l = static_cast<std::size_t>(std::stoul(key));
      if (l >= a.per_label.size()) throw std::invalid_argument("latent assignment: label keys must be 0..L-1");
      a.per_label[l] = HiddenDistribution{LatentVector{value.get<Vector>()}, sigma0, samples_per_label};
    }
    return a;
  }
};

[[nodiscard]] inline HiddenAssignment assign_per_label(int num_labels, double sigma0, Rng& rng,
                                                       int samples_per_label = 100,
                                                       std::size_t latent_dim = kDefaultLatentDim) {
  if (num_labels < 2) throw std::invalid_argument("assign_per_label: need at least two labels");
  if (!(sigma0 > 0.0)) throw std::invalid_argument("assign_per_label: sigma0 must be positive");
  if (samples_per_label < 1) throw std::invalid_argument("assign_per_label: samples_per_label must be positive");
  HiddenAssignment a;
  for (int l = 0; l < num_labels; ++l) {
    a.per_label.push_back({sample_latent(rng, latent_dim), sigma0, samples_per_label});
  }
  return a;
}

}  // namespace vrec
