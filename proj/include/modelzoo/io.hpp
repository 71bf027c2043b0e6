#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "modelzoo/datasets.hpp"
#include "modelzoo/tensor.hpp"

namespace modelzoo {

// Shortest decimal form that reads back to the same double.
std::string format_number(double v);

/// CSV with a fixed header; rows are written as they arrive.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void row(const std::vector<std::string>& cells);
  std::size_t columns() const { return columns_; }

 private:
  std::FILE* file_ = nullptr;
  std::size_t columns_ = 0;
  std::filesystem::path path_;
};

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};

CsvTable read_csv(const std::filesystem::path& path);

// Pixel value in [-1, 1] to a byte, clamping outside values.
std::uint8_t quantize(double v);
double dequantize(std::uint8_t b);

// [H, W] or [H, W, 1] as P5; [H, W, 3] as P6.
void write_pnm(const std::filesystem::path& path, const Tensor& image);
// Returns [H, W, 1] for P5 and [H, W, 3] for P6, values in [-1, 1].
Tensor read_pnm(const std::filesystem::path& path);

// Named tensors in the binary tensor format.
void save_checkpoint(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::filesystem::path& path);

// points.csv (x0.., label) or images/NNNNN.pgm, masks.csv when present, truth
// tensors in truth.bin, and manifest.json with the spec, seed and shapes.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds, const DatasetSpec& spec, std::uint64_t seed);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace modelzoo
