#include "winvit/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "winvit/errors.hpp"

namespace winvit::data {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in, const std::string& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      if (!tok.empty()) return tok;
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw DataError(DataError::Kind::MalformedPpm, "'" + path + "': truncated PPM header");
  return tok;
}

std::size_t header_number(std::istream& in, const std::string& path, const char* what) {
  auto tok = header_token(in, path);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); })) {
    throw DataError(DataError::Kind::MalformedPpm, "'" + path + "': bad " + what + " '" + tok + "' in PPM header");
  }
  return std::stoul(tok);
}

}  // namespace

std::string to_string(Split split) { return split == Split::Train ? "train" : "val"; }

void Dataset::validate(bool require_all_classes) const {
  if (items.empty()) throw DataError(DataError::Kind::Empty, to_string(split) + " split is empty");
  const auto& shape = items.front().image.shape();
  std::vector<std::size_t> counts(num_classes(), 0);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.label < 0 || static_cast<std::size_t>(it.label) >= num_classes()) {
      throw DataError(DataError::Kind::LabelOutOfRange, "item " + std::to_string(i) + " has label " +
                                                            std::to_string(it.label) + " outside [0," +
                                                            std::to_string(num_classes()) + ")");
    }
    if (it.image.shape() != shape) {
      throw DataError(DataError::Kind::MalformedRow, "item " + std::to_string(i) + " has image " +
                                                         shape_str(it.image.shape()) + ", expected " +
                                                         shape_str(shape));
    }
    ++counts[static_cast<std::size_t>(it.label)];
  }
  if (require_all_classes) {
    for (std::size_t k = 0; k < counts.size(); ++k) {
      if (counts[k] == 0) {
        throw DataError(DataError::Kind::Empty, "class " + std::to_string(k) + " has no " + to_string(split) + " items");
      }
    }
  }
}

Tensor render_pattern(std::size_t label, std::size_t size, double phase_x, double phase_y) {
  const auto family = static_cast<Pattern>(label % 3);
  const double freq = 4.0 + 2.0 * static_cast<double>(label / 3);
  const double s = static_cast<double>(size);
  std::vector<double> plane(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / s, v = (static_cast<double>(y) + 0.5) / s;
      double value = 0.0;
      switch (family) {
        case Pattern::Stripes:
          value = 0.5 + 0.5 * std::sin(kTwoPi * (freq * u + 0.25 * phase_x));
          break;
        case Pattern::Checker:
          value = 0.5 + 0.5 * std::sin(kTwoPi * (0.5 * freq * u + 0.25 * phase_x)) *
                            std::sin(kTwoPi * (0.5 * freq * v + 0.25 * phase_y));
          break;
        case Pattern::Radial: {
          const double cx = 0.5 + 0.2 * (phase_x - 0.5), cy = 0.5 + 0.2 * (phase_y - 0.5);
          const double r = std::hypot(u - cx, v - cy) / std::numbers::sqrt2 * (freq / 4.0);
          value = std::clamp(1.0 - 2.0 * r, 0.0, 1.0);
          break;
        }
      }
      plane[y * size + x] = value;
    }
  }
  std::vector<double> data;
  data.reserve(3 * plane.size());
  for (int c = 0; c < 3; ++c) data.insert(data.end(), plane.begin(), plane.end());
  return Tensor({3, size, size}, std::move(data));
}

Splits generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 1 || spec.samples_per_class < 1 || spec.image_size < 1) {
    throw ConfigError("synthetic dataset needs at least one class, sample and pixel");
  }
  if (!(spec.noise_std >= 0.0)) throw ConfigError("noise_std must be non-negative");
  Splits out;
  out.train.split = Split::Train;
  out.val.split = Split::Val;
  static const char* kFamilies[] = {"stripes", "checker", "radial"};
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    auto name = std::string(kFamilies[k % 3]);
    if (k >= 3) name += std::to_string(k / 3);
    out.train.class_names.push_back(name);
  }
  out.val.class_names = out.train.class_names;

  Rng rng(spec.seed);
  std::uniform_real_distribution<double> phase(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.noise_std > 0.0 ? spec.noise_std : 1.0);
  for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      const double px = phase(rng), py = phase(rng);
      Tensor image = render_pattern(k, spec.image_size, px, py);
      if (spec.noise_std > 0.0) {
        for (auto& v : image.mutable_data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
      }
      image.finalize();
      auto& target = i % 5 == 4 ? out.val : out.train;
      target.items.push_back(Item{std::move(image), static_cast<int>(k)});
    }
  }
  return out;
}

Image8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataError::Kind::MissingFile, "cannot open image '" + path + "'");
  const auto magic = header_token(in, path);
  Image8 img;
  if (magic == "P6") img.channels = 3;
  else if (magic == "P5") img.channels = 1;
  else throw DataError(DataError::Kind::MalformedPpm, "'" + path + "': expected P6 or P5, got '" + magic + "'");
  img.width = header_number(in, path, "width");
  img.height = header_number(in, path, "height");
  const auto maxval = header_number(in, path, "maxval");
  if (img.width == 0 || img.height == 0) throw DataError(DataError::Kind::MalformedPpm, "'" + path + "': empty raster");
  if (maxval == 0 || maxval > 255) {
    throw DataError(DataError::Kind::MalformedPpm, "'" + path + "': maxval " + std::to_string(maxval) +
                                                       " is not 8-bit");
  }
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) {
    throw DataError(DataError::Kind::MalformedPpm, "'" + path + "': raster truncated");
  }
  if (maxval != 255) {
    for (auto& p : img.pixels) {
      p = static_cast<std::uint8_t>(std::lround(255.0 * std::min<double>(p, maxval) / static_cast<double>(maxval)));
    }
  }
  return img;
}

void write_ppm(const std::string& path, const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw ContractError("PPM images have 1 or 3 channels");
  if (image.pixels.size() != image.width * image.height * image.channels) {
    throw ContractError("pixel buffer does not match " + std::to_string(image.width) + "x" +
                        std::to_string(image.height));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << (image.channels == 3 ? "P6" : "P5") << "\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw Error("write to '" + path + "' failed");
}

Tensor image_to_tensor(const Image8& image) {
  const auto hw = image.width * image.height;
  std::vector<double> data(3 * hw);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto src = image.channels == 3 ? c : 0;
    for (std::size_t i = 0; i < hw; ++i) data[c * hw + i] = image.pixels[i * image.channels + src] / 255.0;
  }
  Tensor t({3, image.height, image.width}, std::move(data));
  t.finalize();
  return t;
}

Tensor resize_bilinear(const Tensor& chw, std::size_t out_height, std::size_t out_width) {
  if (chw.rank() != 3) throw DimensionError("resize expects [C x H x W], got " + shape_str(chw.shape()));
  const auto c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  if (out_height == 0 || out_width == 0) throw DimensionError("resize target must be non-empty");
  if (h == out_height && w == out_width) return chw;
  struct Tap {
    std::size_t lo, hi;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = std::max(0.0, (static_cast<double>(o) + 0.5) * scale - 0.5);
      auto lo = std::min(static_cast<std::size_t>(src), in - 1);
      t[o] = Tap{lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
    }
    return t;
  };
  const auto ty = taps(h, out_height), tx = taps(w, out_width);
  const auto src = chw.data();
  std::vector<double> out(c * out_height * out_width);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* plane = src.data() + ch * h * w;
    for (std::size_t y = 0; y < out_height; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_width; ++x) {
        const auto& b = tx[x];
        const double top = plane[a.lo * w + b.lo] * (1.0 - b.frac) + plane[a.lo * w + b.hi] * b.frac;
        const double bot = plane[a.hi * w + b.lo] * (1.0 - b.frac) + plane[a.hi * w + b.hi] * b.frac;
        out[(ch * out_height + y) * out_width + x] = top * (1.0 - a.frac) + bot * a.frac;
      }
    }
  }
  Tensor t({c, out_height, out_width}, std::move(out), chw.dtype());
  t.finalize();
  return t;
}

Splits load_manifest(const std::string& path, std::size_t image_size, std::size_t num_classes) {
  std::ifstream in(path);
  if (!in) throw DataError(DataError::Kind::MissingFile, "cannot open manifest '" + path + "'");
  const auto base = std::filesystem::path(path).parent_path();
  Splits out;
  out.train.split = Split::Train;
  out.val.split = Split::Val;
  for (std::size_t k = 0; k < num_classes; ++k) out.train.class_names.push_back("class" + std::to_string(k));
  out.val.class_names = out.train.class_names;

  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    line = trim(line);
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(trim(f));
    if (!line.empty() && line.back() == ',') fields.push_back("");
    const auto where = "manifest row " + std::to_string(row);
    if (fields.size() != 3) {
      throw DataError(DataError::Kind::MalformedRow, where + ": expected filepath,label,split, got '" + line + "'");
    }
    if (row == 1 && fields[0] == "filepath" && fields[1] == "label" && fields[2] == "split") continue;

    long label = 0;
    try {
      std::size_t pos = 0;
      label = std::stol(fields[1], &pos);
      if (pos != fields[1].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError(DataError::Kind::MalformedRow, where + ": label '" + fields[1] + "' is not an integer");
    }
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes) {
      throw DataError(DataError::Kind::LabelOutOfRange, where + ": label " + std::to_string(label) +
                                                            " outside [0," + std::to_string(num_classes) + ")");
    }
    Dataset* target = nullptr;
    if (fields[2] == "train") target = &out.train;
    else if (fields[2] == "val") target = &out.val;
    else throw DataError(DataError::Kind::MalformedRow, where + ": split must be train or val, got '" + fields[2] + "'");

    std::filesystem::path file(fields[0]);
    if (file.is_relative()) file = base / file;
    Image8 img;
    try {
      img = read_ppm(file.string());
    } catch (const DataError& e) {
      throw DataError(e.kind(), where + ": " + e.what());
    }
    Tensor t = resize_bilinear(image_to_tensor(img), image_size, image_size);
    target->items.push_back(Item{std::move(t), static_cast<int>(label)});
  }
  if (out.train.items.empty() && out.val.items.empty()) {
    throw DataError(DataError::Kind::Empty, "manifest '" + path + "' lists no images");
  }
  return out;
}

double nearest_centroid_accuracy(const Dataset& train, const Dataset& test) {
  train.validate(true);
  test.validate(false);
  const auto k = train.num_classes();
  const auto n = train.items.front().image.numel();
  std::vector<std::vector<double>> centroid(k, std::vector<double>(n, 0.0));
  std::vector<std::size_t> count(k, 0);
  for (const auto& it : train.items) {
    auto& c = centroid[static_cast<std::size_t>(it.label)];
    const auto d = it.image.data();
    for (std::size_t i = 0; i < n; ++i) c[i] += d[i];
    ++count[static_cast<std::size_t>(it.label)];
  }
  for (std::size_t j = 0; j < k; ++j) {
    for (auto& v : centroid[j]) v /= static_cast<double>(count[j]);
  }
  std::size_t correct = 0;
  for (const auto& it : test.items) {
    const auto d = it.image.data();
    std::size_t best = 0;
    double best_dist = INFINITY;
    for (std::size_t j = 0; j < k; ++j) {
      double dist = 0.0;
      for (std::size_t i = 0; i < n; ++i) dist += (d[i] - centroid[j][i]) * (d[i] - centroid[j][i]);
      if (dist < best_dist) {
        best_dist = dist;
        best = j;
      }
    }
    if (static_cast<int>(best) == it.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.items.size());
}

}  // namespace winvit::data
