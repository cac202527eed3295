#include "pchnet/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>
#include <string>
#include <system_error>

#include "pchnet/error.hpp"
#include "pchnet/rng.hpp"

namespace pchnet {

namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;

std::uint32_t read_be32(std::span<const std::uint8_t> bytes, std::size_t offset) {
  if (bytes.size() < offset + 4) {
    throw ParseError("IDX header truncated: expected at least " + std::to_string(offset + 4) +
                         " bytes, got " + std::to_string(bytes.size()),
                     bytes.size());
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void check_magic(std::span<const std::uint8_t> bytes, std::uint32_t expected) {
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != expected) {
    std::ostringstream msg;
    msg << "IDX bad magic 0x" << std::hex << magic << ", expected 0x" << expected;
    throw ParseError(msg.str(), 0);
  }
}

void check_payload(std::span<const std::uint8_t> bytes, std::size_t expected) {
  if (bytes.size() != expected) {
    throw ParseError("IDX size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                         std::to_string(bytes.size()),
                     std::min(bytes.size(), expected));
  }
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view field = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t' || field.back() == '\r')) {
      field.remove_suffix(1);
    }
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_number(std::string_view field, std::size_t line_no, std::size_t column) {
  double value = 0.0;
  const char* first = field.data();
  const char* last = field.data() + field.size();
  if (!field.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (field.empty() || ec != std::errc() || ptr != last) {
    throw ParseError("CSV line " + std::to_string(line_no) + ", column " + std::to_string(column) +
                         ": non-numeric cell '" + std::string(field) + "'",
                     line_no);
  }
  return value;
}

}  // namespace

Matrix parse_idx_images(std::span<const std::uint8_t> bytes) {
  check_magic(bytes, kIdxImages);
  const std::size_t count = read_be32(bytes, 4);
  const std::size_t rows = read_be32(bytes, 8);
  const std::size_t cols = read_be32(bytes, 12);
  check_payload(bytes, 16 + count * rows * cols);
  Matrix out(count, rows * cols);
  auto v = out.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(bytes[16 + i]) / 255.0;
  return out;
}

std::vector<std::size_t> parse_idx_labels(std::span<const std::uint8_t> bytes) {
  check_magic(bytes, kIdxLabels);
  const std::size_t count = read_be32(bytes, 4);
  check_payload(bytes, 8 + count);
  return {bytes.begin() + 8, bytes.end()};
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  Dataset d;
  d.features = parse_idx_images(read_bytes(images));
  d.labels = parse_idx_labels(read_bytes(labels));
  if (d.features.rows() != d.labels.size()) {
    throw ParseError("IDX image count " + std::to_string(d.features.rows()) +
                         " does not match label count " + std::to_string(d.labels.size()),
                     4);
  }
  d.num_classes = d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.train.resize(d.size());
  std::iota(d.train.begin(), d.train.end(), 0);
  return d;
}

Dataset parse_csv(std::string_view text, const CsvOptions& opts) {
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> labels;
  std::size_t width = 0;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    if (opts.header && line_no == 1) continue;

    const auto fields = split_fields(line);
    if (opts.label_column >= fields.size()) {
      throw ParseError("CSV line " + std::to_string(line_no) + ": no label column " +
                           std::to_string(opts.label_column),
                       line_no);
    }
    if (width == 0) width = fields.size();
    if (fields.size() != width) {
      throw ParseError("CSV line " + std::to_string(line_no) + ": expected " +
                           std::to_string(width) + " cells, got " + std::to_string(fields.size()),
                       line_no);
    }
    std::vector<double> features;
    features.reserve(width - 1);
    for (std::size_t c = 0; c < fields.size(); ++c) {
      const double v = parse_number(fields[c], line_no, c);
      if (c == opts.label_column) {
        if (v < 0.0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
          throw ParseError("CSV line " + std::to_string(line_no) +
                               ": label must be a non-negative integer",
                           line_no);
        }
        labels.push_back(static_cast<std::size_t>(v));
      } else {
        features.push_back(v);
      }
    }
    rows.push_back(std::move(features));
  }
  if (rows.empty()) throw ParseError("CSV contains no data rows", line_no);

  Dataset d;
  d.features = Matrix(rows.size(), width - 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), d.features.row(i).begin());
  }
  if (opts.normalize) {
    for (std::size_t c = 0; c < d.features.cols(); ++c) {
      double lo = d.features(0, c);
      double hi = lo;
      for (std::size_t i = 0; i < d.features.rows(); ++i) {
        lo = std::min(lo, d.features(i, c));
        hi = std::max(hi, d.features(i, c));
      }
      for (std::size_t i = 0; i < d.features.rows(); ++i) {
        d.features(i, c) = hi > lo ? (d.features(i, c) - lo) / (hi - lo) : 0.0;
      }
    }
  }
  d.labels = std::move(labels);
  d.num_classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  d.train.resize(d.size());
  std::iota(d.train.begin(), d.train.end(), 0);
  return d;
}

Dataset load_csv(const std::filesystem::path& path, const CsvOptions& opts) {
  const std::vector<std::uint8_t> bytes = read_bytes(path);
  return parse_csv(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), opts);
}

std::string to_csv(const Dataset& data) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    out += std::to_string(data.labels[i]);
    for (double x : data.features.row(i)) {
      const auto res = std::to_chars(buf, buf + sizeof buf, x);
      out += ',';
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

Dataset synth_blobs(std::size_t classes, std::size_t dim, std::size_t per_class, double spread,
                    std::uint64_t seed) {
  if (classes < 1 || dim < 1 || per_class < 1) throw ConfigError("synth_blobs: counts must be >= 1");
  if (!(spread >= 0.0)) throw ConfigError("synth_blobs: spread must be non-negative");
  Rng rng(seed);
  Matrix centers(classes, dim);
  for (double& x : centers.values()) x = rng.uniform();

  Dataset d;
  d.num_classes = classes;
  d.features = Matrix(classes * per_class, dim);
  d.labels.reserve(classes * per_class);
  std::size_t row = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t p = 0; p < per_class; ++p, ++row) {
      for (std::size_t j = 0; j < dim; ++j) {
        const double x = centers(c, j) + (spread > 0.0 ? spread * rng.normal() : 0.0);
        d.features(row, j) = std::clamp(x, 0.0, 1.0);
      }
      d.labels.push_back(c);
    }
  }
  d.train.resize(d.size());
  std::iota(d.train.begin(), d.train.end(), 0);
  return d;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw ConfigError("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace pchnet
