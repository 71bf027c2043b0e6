#include "modelzoo/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "modelzoo/error.hpp"

namespace modelzoo {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

CsvWriter::CsvWriter(const fs::path& path, std::vector<std::string> header) : columns_(header.size()), path_(path) {
  file_ = std::fopen(path.c_str(), "w");
  if (!file_) throw Error("io", "cannot write " + path.string());
  row(header);
}

CsvWriter::~CsvWriter() {
  if (file_) std::fclose(file_);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw ShapeError("io", "CSV row width does not match the header of " + path_.string());
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += cells[i];
  }
  line += '\n';
  if (std::fputs(line.c_str(), file_) < 0) throw Error("io", "write failed on " + path_.string());
  std::fflush(file_);
}

std::size_t CsvTable::column(const std::string& name) const {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ShapeError("io", "CSV has no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot read " + path.string());
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(in, line)) throw ShapeError("io", "empty CSV " + path.string());
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.header.size()) throw ShapeError("io", "ragged CSV row in " + path.string());
    t.rows.push_back(std::move(cells));
  }
  return t;
}

std::uint8_t quantize(double v) {
  const double c = std::clamp(std::isnan(v) ? -1.0 : v, -1.0, 1.0);
  return static_cast<std::uint8_t>(std::lround((c + 1.0) * 127.5));
}

double dequantize(std::uint8_t b) { return static_cast<double>(b) / 127.5 - 1.0; }

void write_pnm(const fs::path& path, const Tensor& image) {
  const auto& s = image.shape();
  std::size_t channels = 1;
  if (s.size() == 3) channels = s[2];
  if (!(s.size() == 2 || (s.size() == 3 && (channels == 1 || channels == 3))))
    throw ShapeError("io", "image must be [H, W], [H, W, 1] or [H, W, 3], got " + shape_string(s));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << (channels == 1 ? "P5" : "P6") << '\n' << s[1] << ' ' << s[0] << "\n255\n";
  std::string bytes(image.size(), '\0');
  for (std::size_t i = 0; i < image.size(); ++i) bytes[i] = static_cast<char>(quantize(image.values()[i]));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("io", "write failed on " + path.string());
}

Tensor read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot read " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if ((magic != "P5" && magic != "P6") || maxval != 255 || w == 0 || h == 0)
    throw ShapeError("io", "unsupported PNM header in " + path.string());
  const std::size_t c = magic == "P5" ? 1 : 3;
  std::string bytes(h * w * c, '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw ShapeError("io", "truncated " + path.string());
  Tensor t({h, w, c});
  for (std::size_t i = 0; i < bytes.size(); ++i) t[i] = dequantize(static_cast<std::uint8_t>(bytes[i]));
  return t;
}

void save_checkpoint(const fs::path& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << "modelzoo-checkpoint 1\n" << tensors.size() << '\n';
  for (const auto& [name, t] : tensors) {
    out << name << '\n';
    write_tensor(out, t);
  }
  if (!out) throw Error("io", "write failed on " + path.string());
}

std::map<std::string, Tensor> load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io", "cannot read checkpoint " + path.string() + " (run fit first)");
  std::string magic;
  std::getline(in, magic);
  if (magic != "modelzoo-checkpoint 1") throw ShapeError("io", "not a checkpoint: " + path.string());
  std::size_t n = 0;
  in >> n;
  in.get();
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string name;
    std::getline(in, name);
    out[name] = read_tensor(in);
  }
  if (!in) throw ShapeError("io", "truncated checkpoint " + path.string());
  return out;
}

void save_dataset(const fs::path& dir, const Dataset& ds, const DatasetSpec& spec, std::uint64_t seed) {
  if (ds.examples.empty()) throw ShapeError("io", "empty dataset");
  fs::create_directories(dir);
  const bool images = ds.examples[0].rank() == 3;
  json manifest = {{"name", ds.name},
                   {"seed", seed},
                   {"count", ds.examples.size()},
                   {"shape", ds.examples[0].shape()},
                   {"labeled", !ds.labels.empty()},
                   {"masked", !ds.masks.empty()},
                   {"format", images ? "pgm" : "csv"}};
  manifest["spec"] = {{"n", spec.n},         {"k", spec.k},       {"radius", spec.radius},
                      {"sd", spec.sd},       {"p", spec.p},       {"d", spec.d},
                      {"sigma2", spec.sigma2}, {"sparsity", spec.sparsity}, {"rank", spec.rank},
                      {"mask_rate", spec.mask_rate}, {"size", spec.size},
                      {"texture", texture_kind_name(spec.texture)}};
  json truth = json::object();
  for (const auto& [name, t] : ds.truth) truth[name] = {{"shape", t.shape()}, {"values", t.values()}};
  manifest["truth"] = truth;

  if (images) {
    fs::create_directories(dir / "images");
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.pgm", i);
      write_pnm(dir / "images" / name, ds.examples[i]);
    }
  } else {
    std::vector<std::string> header;
    for (std::size_t j = 0; j < ds.examples[0].size(); ++j) header.push_back("x" + std::to_string(j));
    if (!ds.labels.empty()) header.push_back("label");
    CsvWriter csv(dir / "points.csv", header);
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
      std::vector<std::string> cells;
      for (double v : ds.examples[i].values()) cells.push_back(format_number(v));
      if (!ds.labels.empty()) cells.push_back(std::to_string(ds.labels[i]));
      csv.row(cells);
    }
  }
  if (!ds.masks.empty()) {
    std::vector<std::string> header;
    for (std::size_t j = 0; j < ds.masks[0].size(); ++j) header.push_back("m" + std::to_string(j));
    CsvWriter csv(dir / "masks.csv", header);
    for (const auto& m : ds.masks) {
      std::vector<std::string> cells;
      for (double v : m.values()) cells.push_back(v != 0.0 ? "1" : "0");
      csv.row(cells);
    }
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error("io", "no dataset at " + dir.string() + " (run gen-data first)");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw ShapeError("io", "bad manifest in " + dir.string() + ": " + e.what());
  }
  Dataset ds;
  ds.name = manifest.at("name").get<std::string>();
  const auto count = manifest.at("count").get<std::size_t>();
  const auto shape = manifest.at("shape").get<Shape>();
  if (manifest.at("format") == "pgm") {
    for (std::size_t i = 0; i < count; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.pgm", i);
      ds.examples.push_back(read_pnm(dir / "images" / name));
    }
  } else {
    auto table = read_csv(dir / "points.csv");
    if (table.rows.size() != count) throw ShapeError("io", "points.csv row count disagrees with the manifest");
    const bool labeled = manifest.at("labeled").get<bool>();
    const std::size_t p = shape_size(shape);
    for (const auto& r : table.rows) {
      std::vector<double> v(p);
      for (std::size_t j = 0; j < p; ++j) v[j] = std::stod(r[j]);
      ds.examples.emplace_back(shape, std::move(v));
      if (labeled) ds.labels.push_back(std::stoul(r[p]));
    }
  }
  if (manifest.at("masked").get<bool>()) {
    auto table = read_csv(dir / "masks.csv");
    for (const auto& r : table.rows) {
      Tensor m({r.size()});
      for (std::size_t j = 0; j < r.size(); ++j) m[j] = std::stod(r[j]);
      ds.masks.push_back(m);
    }
  }
  for (const auto& [name, t] : manifest.at("truth").items())
    ds.truth[name] = Tensor(t.at("shape").get<Shape>(), t.at("values").get<std::vector<double>>());
  return ds;
}

}  // namespace modelzoo
