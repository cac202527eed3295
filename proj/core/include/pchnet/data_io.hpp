#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pchnet/dataset.hpp"

namespace pchnet {

/// IDX image file (magic 0x00000803): count x rows x cols unsigned bytes,
/// returned as count x (rows * cols) with every pixel divided by 255.
Matrix parse_idx_images(std::span<const std::uint8_t> bytes);

/// IDX label file (magic 0x00000801).
std::vector<std::size_t> parse_idx_labels(std::span<const std::uint8_t> bytes);

/// Reads an MNIST-style image/label pair. All rows start in the train split.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

struct CsvOptions {
  std::size_t label_column = 0;
  bool header = false;
  /// Min-max scale every feature column into [0, 1] (constant columns map to 0).
  bool normalize = true;
};

/// Parses CSV text; ParseError offsets are 1-based line numbers.
Dataset parse_csv(std::string_view text, const CsvOptions& opts);
Dataset load_csv(const std::filesystem::path& path, const CsvOptions& opts);

/// Label in column 0 followed by the features; loadable with default CsvOptions.
std::string to_csv(const Dataset& data);

/// `classes` Gaussian clusters around centers drawn uniformly from [0, 1]^dim,
/// `per_class` points each, clamped to [0, 1]. All rows start in the train split.
Dataset synth_blobs(std::size_t classes, std::size_t dim, std::size_t per_class, double spread,
                    std::uint64_t seed);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

}  // namespace pchnet
