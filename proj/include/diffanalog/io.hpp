#pragma once

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "diffanalog/common.hpp"

namespace diffanalog::io {

/// Shortest round-trippable decimal form used by every text output.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << content;
  if (!os) throw ConfigError("write failed for " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// CSV text with an optional leading `# provenance: ...` line.
class CsvWriter {
 public:
  explicit CsvWriter(const std::vector<std::string>& header, const std::string& provenance = {}) {
    if (!provenance.empty()) out_ << "# provenance: " << provenance << "\n";
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << "\n";
  }

  void row(const std::vector<double>& values) {
    for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << fmt(values[i]);
    out_ << "\n";
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
  }

  std::string str() const { return out_.str(); }

 private:
  std::ostringstream out_;
};

/// Grayscale image with pixel values in [0, 1].
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;  // row-major

  double at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
};

namespace detail {

inline void skip_ws_and_comments(std::istream& is) {
  while (is) {
    const int c = is.peek();
    if (c == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(c)) {
      is.get();
    } else {
      break;
    }
  }
}

inline std::size_t read_header_int(std::istream& is, const std::string& what) {
  skip_ws_and_comments(is);
  long long v = -1;
  if (!(is >> v) || v <= 0) throw ConfigError("PGM: bad " + what);
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Reads ASCII (P2) or binary (P5, 8-bit or 16-bit) PGM, scaled to [0, 1].
inline Image read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P2" && magic != "P5") throw ConfigError(path.string() + ": not a P2/P5 PGM file");
  Image img;
  img.width = detail::read_header_int(is, "width");
  img.height = detail::read_header_int(is, "height");
  const std::size_t maxval = detail::read_header_int(is, "maxval");
  if (maxval > 65535) throw ConfigError("PGM: maxval exceeds 65535");
  const std::size_t n = img.width * img.height;
  img.pixels.resize(n);
  if (magic == "P2") {
    for (std::size_t i = 0; i < n; ++i) {
      detail::skip_ws_and_comments(is);
      long long v = -1;
      if (!(is >> v) || v < 0 || static_cast<std::size_t>(v) > maxval) {
        throw ConfigError(path.string() + ": truncated or out-of-range pixel data");
      }
      img.pixels[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
  } else {
    is.get();  // single whitespace after maxval
    const bool wide = maxval > 255;
    for (std::size_t i = 0; i < n; ++i) {
      int hi = is.get();
      int v = hi;
      if (wide) v = (hi << 8) | is.get();
      if (!is) throw ConfigError(path.string() + ": truncated pixel data");
      img.pixels[i] = static_cast<double>(v) / static_cast<double>(maxval);
    }
  }
  return img;
}

/// Writes an 8-bit ASCII PGM; values are clamped to [0, 1] and rounded.
inline std::string pgm_text(const Image& img) {
  std::ostringstream os;
  os << "P2\n" << img.width << " " << img.height << "\n255\n";
  for (std::size_t r = 0; r < img.height; ++r) {
    for (std::size_t c = 0; c < img.width; ++c) {
      double v = img.at(r, c);
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      os << (c ? " " : "") << static_cast<int>(v * 255.0 + 0.5);
    }
    os << "\n";
  }
  return os.str();
}

inline void write_pgm(const std::filesystem::path& path, const Image& img) {
  write_file(path, pgm_text(img));
}

}  // namespace diffanalog::io
