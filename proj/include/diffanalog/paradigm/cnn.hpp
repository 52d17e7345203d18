#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "diffanalog/gradient.hpp"
#include "diffanalog/io.hpp"
#include "diffanalog/model.hpp"
#include "diffanalog/random.hpp"
#include "diffanalog/solver.hpp"

/// Cellular nonlinear network edge detector.
///
/// Pixel convention: 0 is black, 1 is white. The cell output f(x) in [-1, 1]
/// is displayed as (1 - f(x)) / 2, so a saturated edge cell (f = +1) renders
/// black and a non-edge cell (f = -1) renders white.
namespace diffanalog::cnn {

using Image = io::Image;

enum class InputPolarity {
  Unipolar,  // u = 1 - pixel: black ink drives u = 1, white u = 0
  Bipolar,   // u = 1 - 2 * pixel: black +1, white -1
};

inline InputPolarity parse_polarity(const std::string& s) {
  if (s == "unipolar" || s == "01") return InputPolarity::Unipolar;
  if (s == "bipolar" || s == "pm1") return InputPolarity::Bipolar;
  throw ConfigError("unknown CNN input polarity '" + s + "' (expected unipolar|bipolar)");
}

inline const char* to_string(InputPolarity p) {
  return p == InputPolarity::Bipolar ? "bipolar" : "unipolar";
}

/// 3x3 templates in row-major order; entry (m, n) weights neighbor offset (m - 1, n - 1).
struct CnnTemplates {
  std::array<double, 9> A{};
  std::array<double, 9> B{};
  double z = 0.0;
  bool symmetric = true;

  static CnnTemplates edge_detector() {
    CnnTemplates t;
    t.A = {0, 0, 0, 0, 2, 0, 0, 0, 0};
    t.B = {-1, -1, -1, -1, 8, -1, -1, -1, -1};
    t.z = -0.5;
    return t;
  }

  /// Builds a symmetric template from corner/edge/center values.
  static std::array<double, 9> symmetric_3x3(double corner, double edge, double center) {
    return {corner, edge, corner, edge, center, edge, corner, edge, corner};
  }

  /// Throws when `symmetric` is set but the entries are not corner/edge/center symmetric.
  void validate() const {
    if (!symmetric) return;
    auto check = [](const std::array<double, 9>& m, const char* name) {
      const bool ok = m[0] == m[2] && m[0] == m[6] && m[0] == m[8] && m[1] == m[3] &&
                      m[1] == m[5] && m[1] == m[7];
      if (!ok) throw ConfigError(std::string("template ") + name + " is not symmetric");
    };
    check(A, "A");
    check(B, "B");
  }
};

struct CnnConfig {
  std::size_t rows = 16;
  std::size_t cols = 16;
  CnnTemplates init = CnnTemplates::edge_detector();
  double sigma = 0.1;
  std::string boundary = "zero";
  InputPolarity polarity = InputPolarity::Unipolar;
  double t3 = 2.0;
  double dt = 0.01;
  Method method = Method::Rk4;
  /// Analog trainable range is [init - w, init + w].
  double range_halfwidth = 2.0;

  SolveConfig solve_config() const { return {dt, t3, method, 0}; }
};

/// Trainable names in declaration order for the symmetric (7) or full (19) layout.
inline std::vector<std::string> trainable_names(bool symmetric) {
  if (symmetric) return {"A_corner", "A_edge", "A_center", "B_corner", "B_edge", "B_center", "z"};
  std::vector<std::string> names;
  for (const char* t : {"A", "B"}) {
    for (int m = 0; m < 3; ++m) {
      for (int n = 0; n < 3; ++n) names.push_back(std::string(t) + "_" + std::to_string(m) + std::to_string(n));
    }
  }
  names.push_back("z");
  return names;
}

/// Cell state x_ij has derivative -x + sum A f(x_kl) + sum B u_kl + z over the
/// 3x3 neighborhood, f = clamp(-1, 1). Each A, B and z site gets its own
/// mismatch symbol when sigma > 0. One input per cell; one readout at t3
/// returning the display value of every cell.
inline CompiledModel build_cnn(const CnnConfig& cfg) {
  if (cfg.rows < 3 || cfg.cols < 3) throw ConfigError("CNN grid must be at least 3x3");
  if (cfg.boundary != "zero") {
    throw ConfigError("unsupported CNN boundary mode '" + cfg.boundary + "' (only 'zero')");
  }
  if (!(cfg.sigma >= 0.0)) throw ConfigError("CNN mismatch sigma must be >= 0");
  cfg.init.validate();
  using namespace expr;
  ModelBuilder b;
  const std::size_t R = cfg.rows, C = cfg.cols;
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      b.add_state("x_" + std::to_string(i) + "_" + std::to_string(j));
    }
  }
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) b.declare_input("u_" + std::to_string(i) + "_" + std::to_string(j));
  }

  const auto names = trainable_names(cfg.init.symmetric);
  std::vector<double> inits;
  if (cfg.init.symmetric) {
    inits = {cfg.init.A[0], cfg.init.A[1], cfg.init.A[4], cfg.init.B[0], cfg.init.B[1], cfg.init.B[4],
             cfg.init.z};
  } else {
    inits.assign(cfg.init.A.begin(), cfg.init.A.end());
    inits.insert(inits.end(), cfg.init.B.begin(), cfg.init.B.end());
    inits.push_back(cfg.init.z);
  }
  for (std::size_t p = 0; p < names.size(); ++p) {
    b.add_trainable(analog_trainable(names[p], inits[p], inits[p] - cfg.range_halfwidth,
                                     inits[p] + cfg.range_halfwidth, true));
  }
  // Parameter index of template entry (m, n).
  auto a_param = [&](int m, int n) -> std::size_t {
    if (!cfg.init.symmetric) return static_cast<std::size_t>(m * 3 + n);
    const int dist = std::abs(m - 1) + std::abs(n - 1);
    return dist == 2 ? 0 : dist == 1 ? 1 : 2;
  };
  auto b_param = [&](int m, int n) -> std::size_t { return a_param(m, n) + (cfg.init.symmetric ? 3 : 9); };
  const std::size_t z_param = names.size() - 1;

  const bool mism = cfg.sigma > 0.0;
  auto site = [&](Expr e) { return mism ? b.mismatch(std::move(e), cfg.sigma) : e; };

  std::vector<Expr> f(R * C);
  for (std::size_t k = 0; k < R * C; ++k) f[k] = clamp(state(k), -1.0, 1.0);

  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      const std::size_t cell = i * C + j;
      std::vector<Expr> terms{neg(state(cell))};
      for (int m = 0; m < 3; ++m) {
        for (int n = 0; n < 3; ++n) {
          // Neighbor (k, l) with m = 1 + i - k, n = 1 + j - l.
          const long k = static_cast<long>(i) + 1 - m;
          const long l = static_cast<long>(j) + 1 - n;
          if (k < 0 || l < 0 || k >= static_cast<long>(R) || l >= static_cast<long>(C)) continue;
          const std::size_t nb = static_cast<std::size_t>(k) * C + static_cast<std::size_t>(l);
          terms.push_back(site(param(a_param(m, n)) * f[nb]));
          terms.push_back(site(param(b_param(m, n)) * input(nb)));
        }
      }
      terms.push_back(site(param(z_param)));
      b.set_derivative(cell, sum(std::move(terms)));
    }
  }
  std::vector<Expr> readout(R * C);
  for (std::size_t k = 0; k < R * C; ++k) readout[k] = 0.5 - 0.5 * f[k];
  b.set_readout({cfg.t3}, std::move(readout));
  return compile(b, cfg.dt);
}

inline std::vector<double> encode_input(const Image& img, InputPolarity polarity) {
  std::vector<double> u(img.pixels.size());
  for (std::size_t k = 0; k < u.size(); ++k) {
    u[k] = polarity == InputPolarity::Bipolar ? 1.0 - 2.0 * img.pixels[k] : 1.0 - img.pixels[k];
  }
  return u;
}

inline void check_pixels(const Image& img) {
  if (img.pixels.size() != img.width * img.height) throw ConfigError("image size does not match its shape");
  for (double p : img.pixels) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("pixel values must lie in [0, 1]");
  }
}

inline double mse_loss(const Image& readout, const Image& reference) {
  if (readout.width != reference.width || readout.height != reference.height ||
      readout.pixels.size() != reference.pixels.size()) {
    throw ConfigError("mse_loss: image shapes differ");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < readout.pixels.size(); ++k) {
    const double d = readout.pixels[k] - reference.pixels[k];
    s += d * d;
  }
  return s / static_cast<double>(readout.pixels.size());
}

inline Image readout_image(const Matrix& readouts, std::size_t width, std::size_t height) {
  Image img{width, height, std::vector<double>(readouts.row(0).begin(), readouts.row(0).end())};
  return img;
}

/// Physical parameter vector for a template under the model's trainable layout.
inline std::vector<double> template_params(const CnnTemplates& t) {
  if (t.symmetric) return {t.A[0], t.A[1], t.A[4], t.B[0], t.B[1], t.B[4], t.z};
  std::vector<double> p(t.A.begin(), t.A.end());
  p.insert(p.end(), t.B.begin(), t.B.end());
  p.push_back(t.z);
  return p;
}

/// Ideal-CNN oracle: the noiseless edge-detector template simulated to t3,
/// each cell thresholded to black (edge) or white.
inline Image reference_edge(const Image& img, const CnnConfig& cfg) {
  check_pixels(img);
  for (double p : img.pixels) {
    if (p != 0.0 && p != 1.0) throw ConfigError("reference_edge needs a binary image");
  }
  CnnConfig ideal = cfg;
  ideal.rows = img.height;
  ideal.cols = img.width;
  ideal.sigma = 0.0;
  ideal.init = CnnTemplates::edge_detector();
  const CompiledModel model = build_cnn(ideal);
  const auto u = encode_input(img, cfg.polarity);
  const auto tr = solve(model, template_params(ideal.init), {}, u, model.initial_state, ideal.solve_config());
  Image out{img.width, img.height, std::vector<double>(img.pixels.size())};
  for (std::size_t k = 0; k < out.pixels.size(); ++k) out.pixels[k] = tr.readouts(0, k) < 0.5 ? 0.0 : 1.0;
  return out;
}

struct Sample {
  Image image;
  Image edges;
};

/// Random binary silhouette: 1-3 black rectangles, ellipses or triangles on white.
inline Image random_silhouette(std::size_t width, std::size_t height, Rng& rng) {
  Image img{width, height, std::vector<double>(width * height, 1.0)};
  std::uniform_int_distribution<int> n_shapes(1, 3), kind(0, 2);
  std::uniform_real_distribution<double> ux(0.0, static_cast<double>(width)),
      uy(0.0, static_cast<double>(height));
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  std::uniform_real_distribution<double> size(0.15, 0.5);
  const int count = n_shapes(rng);
  for (int s = 0; s < count; ++s) {
    const int k = kind(rng);
    const double cx = ux(rng), cy = uy(rng);
    const double rx = size(rng) * w * 0.5 + 0.5, ry = size(rng) * h * 0.5 + 0.5;
    // Triangle vertices around the center.
    std::array<double, 6> tri{};
    if (k == 2) {
      for (int v = 0; v < 3; ++v) {
        tri[2 * v] = cx + (ux(rng) / w - 0.5) * 2.0 * rx * 1.5;
        tri[2 * v + 1] = cy + (uy(rng) / h - 0.5) * 2.0 * ry * 1.5;
      }
    }
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        const double px = static_cast<double>(c) + 0.5, py = static_cast<double>(r) + 0.5;
        bool inside = false;
        if (k == 0) {
          inside = std::abs(px - cx) <= rx && std::abs(py - cy) <= ry;
        } else if (k == 1) {
          const double dx = (px - cx) / rx, dy = (py - cy) / ry;
          inside = dx * dx + dy * dy <= 1.0;
        } else {
          auto edge = [&](int a, int bb) {
            return (tri[2 * bb] - tri[2 * a]) * (py - tri[2 * a + 1]) -
                   (tri[2 * bb + 1] - tri[2 * a + 1]) * (px - tri[2 * a]);
          };
          const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
          inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
        }
        if (inside) img.pixels[r * width + c] = 0.0;
      }
    }
  }
  bool any_black = false;
  for (double p : img.pixels) any_black = any_black || p == 0.0;
  if (!any_black) img.pixels[(height / 2) * width + width / 2] = 0.0;
  return img;
}

/// n silhouettes with their reference edge maps; image k depends only on (seed, k).
inline std::vector<Sample> synth_silhouettes(std::size_t n, std::size_t width, std::size_t height,
                                             std::uint64_t seed, const CnnConfig& cfg) {
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng(derive_seed(seed, {stream::kData, k}));
    Sample s;
    s.image = random_silhouette(width, height, rng);
    s.edges = reference_edge(s.image, cfg);
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<BatchItem> to_batch(const std::vector<Sample>& samples, const CnnConfig& cfg,
                                       const CompiledModel& model) {
  std::vector<BatchItem> items;
  items.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.image.width != cfg.cols || s.image.height != cfg.rows) {
      throw ConfigError("dataset image shape does not match the CNN grid");
    }
    Matrix target(1, s.edges.pixels.size());
    target.data = s.edges.pixels;
    items.push_back({encode_input(s.image, cfg.polarity), std::move(target), model.initial_state});
  }
  return items;
}

/// MSE against the reference edge map for the display readout at t3.
inline LossSpec loss_spec(const CnnConfig& cfg) {
  return LossSpec::mse(Matrix(1, cfg.rows * cfg.cols));
}

/// Fraction of cells with |x(t3)| >= 1 (zero-gradient region of the activation).
inline double saturated_fraction(const Trajectory& tr) {
  const auto last = tr.states.row(tr.states.rows - 1);
  std::size_t n = 0;
  for (double x : last) n += std::abs(x) >= 1.0 ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(last.size());
}

}  // namespace diffanalog::cnn
